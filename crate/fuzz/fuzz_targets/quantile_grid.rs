#![no_main]
use libfuzzer_sys::fuzz_target;
use spvim_core::varimp::QuantileGrid;

fuzz_target!(|text: &str| {
    if let Ok(grid) = text.parse::<QuantileGrid>() {
        let levels = grid.levels();
        assert!(!levels.is_empty());
        assert!(levels.iter().all(|q| (0.0..=1.0).contains(q)));
        assert!(levels.windows(2).all(|w| w[0] < w[1]));
    }
});
