#![no_main]
use libfuzzer_sys::fuzz_target;
use spvim_core::model::SpatialModel;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(model) = SpatialModel::from_json(text) {
        let json = model.to_json().unwrap();
        SpatialModel::from_json(&json).unwrap();
    }
});
