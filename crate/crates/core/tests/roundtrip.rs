mod common;

use common::*;
use faer::Mat;
use proptest::prelude::*;
use spvim_core::data::{Dataset, Location, Metric, OutcomeTransform};
use spvim_core::model::SpatialModel;
use spvim_core::spatrf::{fit_spatrf, SpatRfConfig};
use spvim_core::ukpls::{fit_ukpls_with, UkPlsOptions};
use spvim_core::Error;

fn small(seed: u64) -> Dataset {
    let mut rng = rng(seed);
    let n = 30;
    let sites = random_sites(&mut rng, n, 2.0);
    let x = Mat::from_fn(n, 3, |_, _| normal(&mut rng));
    let y = (0..n).map(|i| x[(i, 0)] + sites[i].y + normal(&mut rng)).collect();
    Dataset::new(x, y, sites, vec!["a".into(), "b".into(), "c".into()], OutcomeTransform::Identity).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn dataset_csv_roundtrip_is_exact(
        rows in prop::collection::vec(
            (-1e6f64..1e6, -1e6f64..1e6, any::<f64>(), prop::collection::vec(-1e12f64..1e12, 2)),
            3..12,
        ),
    ) {
        prop_assume!(rows.iter().all(|r| r.2.is_finite()));
        let n = rows.len();
        let sites: Vec<Location> = rows.iter().enumerate().map(|(i, r)| Location::new(i as i64 * 7 - 3, r.0, r.1)).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let x = Mat::from_fn(n, 2, |i, j| rows[i].3[j]);
        let d = Dataset::new(x, y, sites, vec!["p q".into(), "r,s".into()], OutcomeTransform::Identity).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = Dataset::from_csv_reader(buf.as_slice(), Metric::Euclidean, OutcomeTransform::Identity).unwrap();
        prop_assert_eq!(back.y(), d.y());
        prop_assert_eq!(back.x(), d.x());
        prop_assert_eq!(back.sites(), d.sites());
        prop_assert_eq!(back.names(), d.names());
    }
}

#[test]
fn saved_models_predict_identically() {
    let d = small(1);
    let models = [
        SpatialModel::Ukpls(fit_ukpls_with(&d, &UkPlsOptions { n_components: Some(2), ..Default::default() }).unwrap()),
        SpatialModel::Spatrf(fit_spatrf(&d, &SpatRfConfig { n_trees: 3, ..Default::default() }).unwrap()),
    ];
    let mut rng = rng(2);
    let new_sites = random_sites(&mut rng, 5, 2.0)
        .into_iter()
        .map(|s| Location::new(s.id + 100, s.x, s.y))
        .collect::<Vec<_>>();
    let new_x = Mat::from_fn(5, 3, |_, _| normal(&mut rng));
    for m in models {
        let back = SpatialModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back.to_json().unwrap(), m.to_json().unwrap());
        let a = m.predict(new_x.as_ref(), &new_sites).unwrap();
        let b = back.predict(new_x.as_ref(), &new_sites).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

#[test]
fn foreign_versions_and_corrupt_trees_are_rejected() {
    let d = small(3);
    let m = SpatialModel::Spatrf(fit_spatrf(&d, &SpatRfConfig { n_trees: 1, ..Default::default() }).unwrap());
    let json = m.to_json().unwrap();
    let future = json.replacen("\"format_version\":1", "\"format_version\":2", 1);
    assert!(matches!(SpatialModel::from_json(&future), Err(Error::Parse(_))));
    let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
    let nodes = v["model"]["trees"][0]["nodes"].as_array_mut().unwrap();
    if let Some(split) = nodes.iter_mut().find(|n| n["type"] == "split") {
        split["left"] = serde_json::json!(0);
        assert!(SpatialModel::from_json(&v.to_string()).is_err());
    }
    assert!(SpatialModel::from_json("{}").is_err());
    assert!(SpatialModel::from_json("{\"format_version\":1,\"model\":{\"kind\":\"gam\"}}").is_err());
}
