#![no_main]

use bicon::data::LabeledMatrix;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = LabeledMatrix::from_binary(data) {
        let bytes = m.to_binary();
        let again = LabeledMatrix::from_binary(&bytes).expect("re-encoded matrix parses");
        assert_eq!(m, again);
    }
});
