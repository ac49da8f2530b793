#![no_main]
use libfuzzer_sys::fuzz_target;
use spvim_core::data::{CovariateTable, Dataset, Metric, OutcomeTransform};

fuzz_target!(|data: &[u8]| {
    // Parsed datasets must survive a write/read round trip unchanged.
    if let Ok(d) = Dataset::from_csv_reader(data, Metric::Euclidean, OutcomeTransform::Identity) {
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = Dataset::from_csv_reader(&buf[..], Metric::Euclidean, OutcomeTransform::Identity).unwrap();
        assert_eq!(back.y(), d.y());
        assert_eq!(back.names(), d.names());
    }
    let _ = Dataset::from_csv_reader(data, Metric::HaversineKm, OutcomeTransform::Log);
    let _ = CovariateTable::from_csv_reader(data, Metric::Euclidean, false);
});
