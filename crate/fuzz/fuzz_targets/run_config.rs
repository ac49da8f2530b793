#![no_main]
use libfuzzer_sys::fuzz_target;
use spvim_cli::RunConfig;

fuzz_target!(|text: &str| {
    if let Ok(cfg) = RunConfig::parse(text) {
        // merging with itself is a no-op
        assert_eq!(cfg.clone().merge(cfg.clone()), cfg);
    }
});
