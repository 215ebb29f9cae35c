#![no_main]

use bicon::model::Model;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = Model::from_bytes(data) {
        let bytes = model.to_bytes();
        let again = Model::from_bytes(&bytes).expect("re-encoded checkpoint parses");
        assert_eq!(bytes, again.to_bytes());
    }
});
