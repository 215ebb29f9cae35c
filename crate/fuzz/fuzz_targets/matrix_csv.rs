#![no_main]

use bicon::data::LabeledMatrix;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(m) = LabeledMatrix::from_csv(text) {
        // Debug formatting of f64 round-trips exactly.
        let csv = m.to_csv().expect("parsed CSV always has labels");
        let again = LabeledMatrix::from_csv(&csv).expect("re-encoded CSV parses");
        assert_eq!(m, again);
    }
});
