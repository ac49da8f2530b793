//! Sites, datasets, outcome transforms and link functions.
//!
//! A [`Dataset`] keeps the raw outcome alongside its transformed copy; every
//! model is fit on the transformed scale and reports on the raw scale.

use std::collections::HashSet;
use std::io::{Read, Write};

use faer::{Mat, MatRef};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius used by the haversine metric, in kilometers.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    #[default]
    Euclidean,
    /// Great-circle distance in km; `x` is longitude and `y` latitude in degrees.
    HaversineKm,
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "haversine" | "haversine-km" => Ok(Metric::HaversineKm),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub id: i64,
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub metric: Metric,
}

impl Location {
    pub fn new(id: i64, x: f64, y: f64) -> Self {
        Location {
            id,
            x,
            y,
            metric: Metric::Euclidean,
        }
    }

    pub fn with_metric(mut self, metric: Metric) -> Self {
        self.metric = metric;
        self
    }

    fn validate(&self) -> Result<()> {
        if !self.x.is_finite() || !self.y.is_finite() {
            return Err(Error::InvalidInput(format!(
                "site {} has non-finite coordinates",
                self.id
            )));
        }
        if self.metric == Metric::HaversineKm
            && (!(-180.0..=180.0).contains(&self.x) || !(-90.0..=90.0).contains(&self.y))
        {
            return Err(Error::InvalidInput(format!(
                "site {} is outside lon/lat bounds",
                self.id
            )));
        }
        Ok(())
    }

    /// Distance under the shared metric. Callers guarantee both sites use it.
    #[inline]
    pub fn distance(&self, other: &Location) -> f64 {
        match self.metric {
            Metric::Euclidean => (self.x - other.x).hypot(self.y - other.y),
            Metric::HaversineKm => haversine_km(self.x, self.y, other.x, other.y),
        }
    }
}

fn haversine_km(lon1: f64, lat1: f64, lon2: f64, lat2: f64) -> f64 {
    let (phi1, phi2) = (lat1.to_radians(), lat2.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (lon2 - lon1).to_radians();
    let a = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
}

/// Returns the metric shared by every site, or a configuration error.
pub fn shared_metric<'a>(sites: impl IntoIterator<Item = &'a Location>) -> Result<Metric> {
    let mut metric = None;
    for s in sites {
        match metric {
            None => metric = Some(s.metric),
            Some(m) if m != s.metric => {
                return Err(Error::Config("sites mix distance metrics".into()))
            }
            _ => {}
        }
    }
    Ok(metric.unwrap_or_default())
}

/// Symmetric n×n distance matrix with a zero diagonal.
pub fn pairwise_distances(sites: &[Location]) -> Result<Mat<f64>> {
    shared_metric(sites)?;
    let n = sites.len();
    let mut d = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let v = sites[i].distance(&sites[j]);
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    Ok(d)
}

/// |a|×|b| distances between two site sets.
pub fn cross_distances(a: &[Location], b: &[Location]) -> Result<Mat<f64>> {
    shared_metric(a.iter().chain(b.iter()))?;
    Ok(Mat::from_fn(a.len(), b.len(), |i, j| a[i].distance(&b[j])))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeTransform {
    #[default]
    Identity,
    Log,
    Sqrt,
}

impl std::str::FromStr for OutcomeTransform {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "none" => Ok(OutcomeTransform::Identity),
            "log" => Ok(OutcomeTransform::Log),
            "sqrt" => Ok(OutcomeTransform::Sqrt),
            other => Err(Error::Config(format!("unknown transform `{other}`"))),
        }
    }
}

impl OutcomeTransform {
    pub fn forward(self, v: f64) -> f64 {
        match self {
            OutcomeTransform::Identity => v,
            OutcomeTransform::Log => v.ln(),
            OutcomeTransform::Sqrt => v.sqrt(),
        }
    }

    pub fn inverse(self, v: f64) -> f64 {
        match self {
            OutcomeTransform::Identity => v,
            OutcomeTransform::Log => v.exp(),
            OutcomeTransform::Sqrt => v * v,
        }
    }
}

/// Elementwise outcome transform with domain checks.
pub fn transform_outcome(y: &[f64], transform: OutcomeTransform) -> Result<Vec<f64>> {
    for (index, &v) in y.iter().enumerate() {
        let bad = match transform {
            OutcomeTransform::Identity => None,
            OutcomeTransform::Log if !(v > 0.0) => Some("log requires a positive outcome"),
            OutcomeTransform::Sqrt if !(v >= 0.0) => Some("sqrt requires a nonnegative outcome"),
            _ => None,
        };
        if let Some(message) = bad {
            return Err(Error::Domain {
                index,
                message: format!("{message}, got {v}"),
            });
        }
    }
    Ok(y.iter().map(|&v| transform.forward(v)).collect())
}

pub fn inverse_transform_outcome(y: &[f64], transform: OutcomeTransform) -> Vec<f64> {
    y.iter().map(|&v| transform.inverse(v)).collect()
}

/// The link g relating the additive predictor to the mean: g(mu) = eta.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LinkFunction {
    #[default]
    Identity,
    Log,
}

impl LinkFunction {
    /// g(mu). The log link requires mu > 0.
    pub fn apply(self, mu: f64) -> f64 {
        match self {
            LinkFunction::Identity => mu,
            LinkFunction::Log => mu.ln(),
        }
    }

    /// g^-1(eta).
    pub fn invert(self, eta: f64) -> f64 {
        match self {
            LinkFunction::Identity => eta,
            LinkFunction::Log => eta.exp(),
        }
    }

    pub(crate) fn apply_all(self, mu: &[f64]) -> Result<Vec<f64>> {
        if self == LinkFunction::Log {
            if let Some(index) = mu.iter().position(|&v| !(v > 0.0)) {
                return Err(Error::Domain {
                    index,
                    message: "log link requires a positive mean".into(),
                });
            }
        }
        Ok(mu.iter().map(|&v| self.apply(v)).collect())
    }
}

/// Covariates, outcome and sites for n observations.
#[derive(Debug, Clone)]
pub struct Dataset {
    x: Mat<f64>,
    y: Vec<f64>,
    y_transformed: Vec<f64>,
    sites: Vec<Location>,
    names: Vec<String>,
    transform: OutcomeTransform,
}

impl Dataset {
    /// `y` is the raw outcome; `transform` is applied here and recorded.
    pub fn new(
        x: Mat<f64>,
        y: Vec<f64>,
        sites: Vec<Location>,
        names: Vec<String>,
        transform: OutcomeTransform,
    ) -> Result<Self> {
        let (n, p) = (x.nrows(), x.ncols());
        if n < 3 {
            return Err(Error::InvalidInput(format!("need at least 3 rows, got {n}")));
        }
        if p < 1 {
            return Err(Error::InvalidInput("need at least one covariate".into()));
        }
        if y.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: y.len(),
            });
        }
        if sites.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: sites.len(),
            });
        }
        if names.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: names.len(),
            });
        }
        for j in 0..p {
            for i in 0..n {
                if !x[(i, j)].is_finite() {
                    return Err(Error::InvalidInput(format!(
                        "non-finite covariate `{}` at row {i}",
                        names[j]
                    )));
                }
            }
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite outcome at row {i}")));
        }
        let mut ids = HashSet::with_capacity(n);
        for s in &sites {
            s.validate()?;
            if !ids.insert(s.id) {
                return Err(Error::InvalidInput(format!("duplicate site id {}", s.id)));
            }
        }
        shared_metric(&sites)?;
        let y_transformed = transform_outcome(&y, transform)?;
        Ok(Dataset {
            x,
            y,
            y_transformed,
            sites,
            names,
            transform,
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> MatRef<'_, f64> {
        self.x.as_ref()
    }

    /// Raw outcome.
    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// Outcome after the recorded transform.
    pub fn y_transformed(&self) -> &[f64] {
        &self.y_transformed
    }

    pub fn sites(&self) -> &[Location] {
        &self.sites
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn transform(&self) -> OutcomeTransform {
        self.transform
    }

    pub fn metric(&self) -> Metric {
        self.sites[0].metric
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n()).map(|i| self.x[(i, j)]).collect()
    }

    /// Rows `rows` in the given order.
    pub fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        let x = Mat::from_fn(rows.len(), self.p(), |i, j| self.x[(rows[i], j)]);
        Dataset::new(
            x,
            rows.iter().map(|&i| self.y[i]).collect(),
            rows.iter().map(|&i| self.sites[i]).collect(),
            self.names.clone(),
            self.transform,
        )
    }

    /// Keeps only the covariate columns in `cols`.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Dataset> {
        let x = Mat::from_fn(self.n(), cols.len(), |i, j| self.x[(i, cols[j])]);
        Dataset::new(
            x,
            self.y.clone(),
            self.sites.clone(),
            cols.iter().map(|&j| self.names[j].clone()).collect(),
            self.transform,
        )
    }

    /// Same data with the outcome replaced (raw scale).
    pub fn with_outcome(&self, y: Vec<f64>) -> Result<Dataset> {
        Dataset::new(
            self.x.clone(),
            y,
            self.sites.clone(),
            self.names.clone(),
            self.transform,
        )
    }

    /// Reads the CSV schema `site_id,x,y,outcome,<covariates...>`.
    pub fn from_csv_reader<R: Read>(
        reader: R,
        metric: Metric,
        transform: OutcomeTransform,
    ) -> Result<Dataset> {
        let table = CovariateTable::from_csv_reader(reader, metric, true)?;
        let y = table
            .outcome
            .ok_or_else(|| Error::Parse("missing `outcome` column".into()))?;
        Dataset::new(table.x, y, table.sites, table.names, transform)
    }

    pub fn from_csv_path(
        path: impl AsRef<std::path::Path>,
        metric: Metric,
        transform: OutcomeTransform,
    ) -> Result<Dataset> {
        let f = std::fs::File::open(path)?;
        Dataset::from_csv_reader(std::io::BufReader::new(f), metric, transform)
    }

    /// Writes the raw outcome in the CSV schema. Floats use the shortest
    /// round-trip representation, so reading back is exact.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![
            "site_id".to_string(),
            "x".into(),
            "y".into(),
            "outcome".into(),
        ];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.n() {
            let s = &self.sites[i];
            let mut rec = vec![
                s.id.to_string(),
                s.x.to_string(),
                s.y.to_string(),
                self.y[i].to_string(),
            ];
            rec.extend((0..self.p()).map(|j| self.x[(i, j)].to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Covariates and sites with an optional outcome; used for prediction inputs.
#[derive(Debug, Clone)]
pub struct CovariateTable {
    pub x: Mat<f64>,
    pub sites: Vec<Location>,
    pub names: Vec<String>,
    pub outcome: Option<Vec<f64>>,
}

const REQUIRED: [&str; 3] = ["site_id", "x", "y"];

impl CovariateTable {
    pub fn from_csv_reader<R: Read>(
        reader: R,
        metric: Metric,
        require_outcome: bool,
    ) -> Result<CovariateTable> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let find = |name: &str| header.iter().position(|h| h == name);
        let mut special = Vec::new();
        for name in REQUIRED {
            special.push(find(name).ok_or_else(|| Error::Parse(format!("missing `{name}` column")))?);
        }
        let outcome_col = find("outcome");
        if require_outcome && outcome_col.is_none() {
            return Err(Error::Parse("missing `outcome` column".into()));
        }
        special.extend(outcome_col);
        let cov_cols: Vec<usize> = (0..header.len()).filter(|c| !special.contains(c)).collect();
        if cov_cols.is_empty() {
            return Err(Error::Parse("no covariate columns".into()));
        }
        let names: Vec<String> = cov_cols.iter().map(|&c| header[c].clone()).collect();
        let mut seen = HashSet::new();
        if let Some(dup) = header.iter().find(|h| !seen.insert(h.as_str())) {
            return Err(Error::Parse(format!("duplicate column `{dup}`")));
        }

        let mut sites = Vec::new();
        let mut outcome = Vec::new();
        let mut values = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != header.len() {
                return Err(Error::Parse(format!(
                    "row {}: expected {} fields, got {}",
                    row + 1,
                    header.len(),
                    rec.len()
                )));
            }
            let num = |c: usize| -> Result<f64> {
                let field = &rec[c];
                let v: f64 = field.parse().map_err(|_| {
                    Error::Parse(format!("row {}: `{field}` is not a number", row + 1))
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse(format!("row {}: non-finite value", row + 1)));
                }
                Ok(v)
            };
            let id: i64 = rec[special[0]]
                .parse()
                .map_err(|_| Error::Parse(format!("row {}: bad site_id", row + 1)))?;
            let site = Location::new(id, num(special[1])?, num(special[2])?).with_metric(metric);
            site.validate().map_err(|e| Error::Parse(e.to_string()))?;
            sites.push(site);
            if let Some(c) = outcome_col {
                outcome.push(num(c)?);
            }
            for &c in &cov_cols {
                values.push(num(c)?);
            }
        }
        let n = sites.len();
        let p = cov_cols.len();
        let x = Mat::from_fn(n, p, |i, j| values[i * p + j]);
        Ok(CovariateTable {
            x,
            sites,
            names,
            outcome: outcome_col.map(|_| outcome),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn log_and_sqrt_transforms() {
        let e = std::f64::consts::E;
        let t = transform_outcome(&[1.0, e, e * e], OutcomeTransform::Log).unwrap();
        for (a, b) in t.iter().zip([0.0, 1.0, 2.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(
            transform_outcome(&[4.0, 9.0], OutcomeTransform::Sqrt).unwrap(),
            vec![2.0, 3.0]
        );
        let back = inverse_transform_outcome(
            &transform_outcome(&[0.5], OutcomeTransform::Log).unwrap(),
            OutcomeTransform::Log,
        );
        assert!((back[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn log_rejects_nonpositive_with_index() {
        match transform_outcome(&[1.0, 2.0, 0.0], OutcomeTransform::Log) {
            Err(Error::Domain { index, .. }) => assert_eq!(index, 2),
            other => panic!("expected domain error, got {other:?}"),
        }
        assert!(transform_outcome(&[-1.0], OutcomeTransform::Sqrt).is_err());
    }

    #[test]
    fn distances_small_cases() {
        let d = pairwise_distances(&[Location::new(0, 0.0, 0.0), Location::new(1, 3.0, 4.0)]).unwrap();
        assert_eq!(d[(0, 1)], 5.0);
        assert_eq!(d[(1, 0)], 5.0);
        let one = pairwise_distances(&[Location::new(0, 1.0, 1.0)]).unwrap();
        assert_eq!((one.nrows(), one.ncols()), (1, 1));
        assert_eq!(one[(0, 0)], 0.0);
    }

    #[test]
    fn haversine_quarter_circle() {
        let a = Location::new(0, 0.0, 0.0).with_metric(Metric::HaversineKm);
        let b = Location::new(1, 0.0, 90.0).with_metric(Metric::HaversineKm);
        // independent evaluation: a quarter of the great circle
        let expected = std::f64::consts::PI / 2.0 * 6371.0;
        let d = pairwise_distances(&[a, b]).unwrap();
        assert!((d[(0, 1)] - expected).abs() < 1e-9);
        assert!((d[(0, 1)] - 10007.543).abs() < 1e-3);
    }

    #[test]
    fn mixed_metrics_rejected() {
        let a = Location::new(0, 0.0, 0.0);
        let b = Location::new(1, 0.0, 0.0).with_metric(Metric::HaversineKm);
        assert!(matches!(pairwise_distances(&[a, b]), Err(Error::Config(_))));
    }

    #[test]
    fn dataset_rejects_non_finite_and_duplicates() {
        let sites = vec![
            Location::new(0, 0.0, 0.0),
            Location::new(1, 1.0, 0.0),
            Location::new(2, 0.0, 1.0),
        ];
        let names = vec!["a".to_string()];
        let x = Mat::from_fn(3, 1, |i, _| i as f64);
        assert!(Dataset::new(x.clone(), vec![1.0, 2.0, 3.0], sites.clone(), names.clone(), OutcomeTransform::Identity).is_ok());
        assert!(Dataset::new(x.clone(), vec![1.0, f64::NAN, 3.0], sites.clone(), names.clone(), OutcomeTransform::Identity).is_err());
        let mut bad_x = x.clone();
        bad_x[(1, 0)] = f64::INFINITY;
        assert!(Dataset::new(bad_x, vec![1.0, 2.0, 3.0], sites.clone(), names.clone(), OutcomeTransform::Identity).is_err());
        let mut dup = sites.clone();
        dup[2].id = 0;
        assert!(Dataset::new(x, vec![1.0, 2.0, 3.0], dup, names, OutcomeTransform::Identity).is_err());
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let csv = "site_id,x,y,outcome,a,b\n1,0.1,0.2,3.5,1e-3,2\n2,1,1,4,0.3333333333333333,5\n3,2,0.5,1,7,8\n";
        let d = Dataset::from_csv_reader(csv.as_bytes(), Metric::Euclidean, OutcomeTransform::Identity).unwrap();
        assert_eq!(d.names(), &["a".to_string(), "b".to_string()]);
        let mut out = Vec::new();
        d.write_csv(&mut out).unwrap();
        let back = Dataset::from_csv_reader(out.as_slice(), Metric::Euclidean, OutcomeTransform::Identity).unwrap();
        assert_eq!(back.y(), d.y());
        assert_eq!(back.x(), d.x());
        assert_eq!(back.sites(), d.sites());
    }

    #[test]
    fn csv_missing_column_is_parse_error() {
        let csv = "site_id,x,outcome,a\n1,0,1,2\n";
        assert!(matches!(
            Dataset::from_csv_reader(csv.as_bytes(), Metric::Euclidean, OutcomeTransform::Identity),
            Err(Error::Parse(_))
        ));
    }

    proptest! {
        #[test]
        fn transform_roundtrip(v in 1e-6f64..1e6) {
            for t in [OutcomeTransform::Identity, OutcomeTransform::Log, OutcomeTransform::Sqrt] {
                let back = t.inverse(t.forward(v));
                prop_assert!((back - v).abs() <= 1e-12 * v.max(1.0));
            }
        }

        #[test]
        fn distance_axioms(pts in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3)) {
            let sites: Vec<_> = pts.iter().enumerate().map(|(i, &(x, y))| Location::new(i as i64, x, y)).collect();
            let d = pairwise_distances(&sites).unwrap();
            for i in 0..3 {
                prop_assert_eq!(d[(i, i)], 0.0);
                for j in 0..3 {
                    prop_assert_eq!(d[(i, j)], d[(j, i)]);
                    prop_assert!(d[(i, j)] >= 0.0);
                    for k in 0..3 {
                        prop_assert!(d[(i, k)] <= d[(i, j)] + d[(j, k)] + 1e-9);
                    }
                }
            }
        }
    }
}
