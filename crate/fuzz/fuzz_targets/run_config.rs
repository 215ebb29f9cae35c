#![no_main]

use bicon::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = RunConfig::parse(text) {
        let again = RunConfig::parse(&cfg.canonical()).expect("canonical text parses");
        assert_eq!(cfg.hash(), again.hash());
        let _ = cfg.loss_config();
        let _ = cfg.dataset_spec();
    }
});
