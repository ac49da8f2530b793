//! Simulated spatial data with a known sparse nonlinear mean, an
//! exponential Gaussian error field, and i.i.d. noise.

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::covariance::{factor_from_distances, CovarianceParams};
use crate::data::{pairwise_distances, Dataset, Location, OutcomeTransform};
use crate::error::{Error, Result};
use crate::linalg;

/// The five covariates that enter the mean, in column-block order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActiveRole {
    DistA1,
    Popden,
    Ndvi,
    Mixedurban,
    Residential,
}

impl ActiveRole {
    pub const ALL: [ActiveRole; 5] = [
        ActiveRole::DistA1,
        ActiveRole::Popden,
        ActiveRole::Ndvi,
        ActiveRole::Mixedurban,
        ActiveRole::Residential,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActiveRole::DistA1 => "distA1",
            ActiveRole::Popden => "popden",
            ActiveRole::Ndvi => "ndvi",
            ActiveRole::Mixedurban => "mixedurban",
            ActiveRole::Residential => "residential",
        }
    }
}

/// m(X) = s · (a·distA1 + b·popden² + c·ndvi + d·√mixedurban + e·residential
/// + f·distA1·ndvi).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCoefficients {
    pub dist_a1: f64,
    pub popden_sq: f64,
    pub ndvi: f64,
    pub sqrt_mixedurban: f64,
    pub residential: f64,
    pub dist_a1_ndvi: f64,
}

impl Default for MeanCoefficients {
    fn default() -> Self {
        MeanCoefficients {
            dist_a1: -0.5,
            popden_sq: 0.2,
            ndvi: -1.0,
            sqrt_mixedurban: 0.5,
            residential: 0.5,
            dist_a1_ndvi: -0.25,
        }
    }
}

impl MeanCoefficients {
    pub fn scaled(&self, s: f64) -> Self {
        MeanCoefficients {
            dist_a1: s * self.dist_a1,
            popden_sq: s * self.popden_sq,
            ndvi: s * self.ndvi,
            sqrt_mixedurban: s * self.sqrt_mixedurban,
            residential: s * self.residential,
            dist_a1_ndvi: s * self.dist_a1_ndvi,
        }
    }

    fn is_zero(&self) -> bool {
        [
            self.dist_a1,
            self.popden_sq,
            self.ndvi,
            self.sqrt_mixedurban,
            self.residential,
            self.dist_a1_ndvi,
        ]
        .iter()
        .all(|c| *c == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub p: usize,
    /// Columns per active block, the active covariate included.
    pub block_size: usize,
    pub block_corr: f64,
    pub coefficients: MeanCoefficients,
    /// Common multiplier on every mean coefficient, set by calibration.
    pub mean_scale: f64,
    /// Spatially correlated error (its nugget is ignored).
    pub theta_err: CovarianceParams,
    pub nugget_sd: f64,
    /// Sites are uniform on [0, extent]².
    pub extent: f64,
    pub seed: u64,
    pub target_mean_variance: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n: 300,
            p: 30,
            block_size: 4,
            block_corr: 0.8,
            coefficients: MeanCoefficients::default(),
            mean_scale: 1.0,
            theta_err: CovarianceParams {
                nugget: 0.0,
                psill: 4.0,
                range: 2.5,
            },
            nugget_sd: 1.0,
            extent: 1.55,
            seed: 0,
            target_mean_variance: 2.21,
        }
    }
}

pub const CALIBRATION_SEED: u64 = 0x5eed_ca1b;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.p < ActiveRole::ALL.len() {
            return Err(Error::InvalidInput(format!(
                "synthetic data needs p >= 5, got {}",
                self.p
            )));
        }
        if self.n < 3 {
            return Err(Error::InvalidInput(format!("synthetic data needs n >= 3, got {}", self.n)));
        }
        if self.block_size == 0 {
            return Err(Error::Config("block_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.block_corr) {
            return Err(Error::Config("block_corr must lie in [0, 1)".into()));
        }
        if !(self.extent > 0.0) || !self.extent.is_finite() {
            return Err(Error::Config("extent must be positive".into()));
        }
        if !(self.nugget_sd >= 0.0) || !self.mean_scale.is_finite() {
            return Err(Error::Config("nugget_sd and mean_scale must be finite and nonnegative".into()));
        }
        if self.theta_err.psill < 0.0 || !(self.theta_err.range > 0.0) {
            return Err(Error::Config("spatial error needs psill >= 0 and range > 0".into()));
        }
        Ok(())
    }

    /// Columns per block once p is too small for full blocks.
    fn effective_block(&self) -> usize {
        self.block_size.min(self.p / ActiveRole::ALL.len()).max(1)
    }

    /// Column index of each active role.
    pub fn active_indices(&self) -> [usize; 5] {
        let b = self.effective_block();
        [0, b, 2 * b, 3 * b, 4 * b]
    }

    pub fn column_names(&self) -> Vec<String> {
        let b = self.effective_block();
        (0..self.p)
            .map(|j| {
                if j < 5 * b {
                    let role = ActiveRole::ALL[j / b].name();
                    match j % b {
                        0 => role.to_string(),
                        d => format!("{role}_corr{d}"),
                    }
                } else {
                    format!("noise{}", j - 5 * b + 1)
                }
            })
            .collect()
    }

    pub fn effective_coefficients(&self) -> MeanCoefficients {
        self.coefficients.scaled(self.mean_scale)
    }
}

/// Uniform sites and standardized block-correlated covariates, with popden
/// and mixedurban shifted to a minimum of zero.
fn draw_covariates(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> (Mat<f64>, Vec<Location>) {
    let (n, p) = (spec.n, spec.p);
    let sites: Vec<Location> = (0..n)
        .map(|i| {
            let x = rng.random::<f64>() * spec.extent;
            let y = rng.random::<f64>() * spec.extent;
            Location::new(i as i64, x, y)
        })
        .collect();
    let b = spec.effective_block();
    let (a, e) = (spec.block_corr.sqrt(), (1.0 - spec.block_corr).sqrt());
    let mut x = Mat::<f64>::zeros(n, p);
    for i in 0..n {
        for blk in 0..5 {
            let common: f64 = rng.sample(StandardNormal);
            for d in 0..b {
                let own: f64 = rng.sample(StandardNormal);
                x[(i, blk * b + d)] = a * common + e * own;
            }
        }
        for j in 5 * b..p {
            x[(i, j)] = rng.sample(StandardNormal);
        }
    }
    for j in 0..p {
        let col = x.col_as_slice_mut(j);
        let mean = linalg::mean(col);
        let sd = linalg::variance(col).sqrt();
        if sd > 0.0 {
            col.iter_mut().for_each(|v| *v = (*v - mean) / sd);
        }
    }
    let act = spec.active_indices();
    for j in [act[1], act[3]] {
        let col = x.col_as_slice_mut(j);
        let min = col.iter().copied().fold(f64::INFINITY, f64::min);
        col.iter_mut().for_each(|v| *v -= min);
    }
    (x, sites)
}

pub fn generate_covariates(spec: &SyntheticSpec) -> Result<(Mat<f64>, Vec<Location>)> {
    spec.validate()?;
    Ok(draw_covariates(spec, &mut ChaCha8Rng::seed_from_u64(spec.seed)))
}

/// The mean surface m(X).
pub fn mean_function(x: faer::MatRef<'_, f64>, spec: &SyntheticSpec) -> Result<Vec<f64>> {
    let c = spec.effective_coefficients();
    let [d, pop, ndvi, mix, res] = spec.active_indices();
    (0..x.nrows())
        .map(|i| {
            let m = x[(i, mix)];
            if m < 0.0 {
                return Err(Error::Domain {
                    index: i,
                    message: format!("mixedurban value {m} has no square root"),
                });
            }
            Ok(c.dist_a1 * x[(i, d)]
                + c.popden_sq * x[(i, pop)] * x[(i, pop)]
                + c.ndvi * x[(i, ndvi)]
                + c.sqrt_mixedurban * m.sqrt()
                + c.residential * x[(i, res)]
                + c.dist_a1_ndvi * x[(i, d)] * x[(i, ndvi)])
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Components {
    pub mean: Vec<f64>,
    pub spatial: Vec<f64>,
    pub nugget: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceDecomposition {
    pub mean: f64,
    pub spatial: f64,
    pub nugget: f64,
}

impl Components {
    pub fn outcome(&self) -> Vec<f64> {
        (0..self.mean.len())
            .map(|i| self.mean[i] + self.spatial[i] + self.nugget[i])
            .collect()
    }

    pub fn variances(&self) -> VarianceDecomposition {
        VarianceDecomposition {
            mean: linalg::variance(&self.mean),
            spatial: linalg::variance(&self.spatial),
            nugget: linalg::variance(&self.nugget),
        }
    }
}

fn draw_outcome(
    x: faer::MatRef<'_, f64>,
    sites: &[Location],
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Components> {
    let n = sites.len();
    let mean = mean_function(x, spec)?;
    let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let spatial = if spec.theta_err.psill > 0.0 {
        let theta = CovarianceParams {
            nugget: 0.0,
            ..spec.theta_err
        };
        let chol = factor_from_distances(pairwise_distances(sites)?.as_ref(), &theta)?;
        linalg::matvec(chol.l(), &z)
    } else {
        vec![0.0; n]
    };
    let nugget = (0..n)
        .map(|_| spec.nugget_sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(Components {
        mean,
        spatial,
        nugget,
    })
}

/// Outcome y = m(X) + η + ε for given covariates and sites, drawing η and ε
/// from `seed`.
pub fn generate_outcome(
    x: faer::MatRef<'_, f64>,
    sites: &[Location],
    spec: &SyntheticSpec,
    seed: u64,
) -> Result<(Vec<f64>, Components)> {
    spec.validate()?;
    let c = draw_outcome(x, sites, spec, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok((c.outcome(), c))
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub components: Components,
    pub spec: SyntheticSpec,
}

impl SyntheticData {
    pub fn active_indices(&self) -> [usize; 5] {
        self.spec.active_indices()
    }

    /// max_a |corr(X_j, X_a)| over the active columns a, for each column j.
    pub fn max_abs_corr_with_active(&self) -> Vec<f64> {
        let x = self.dataset.x();
        let act = self.active_indices();
        (0..x.ncols())
            .map(|j| {
                act.iter()
                    .map(|&a| correlation(&self.dataset.column(j), &self.dataset.column(a)).abs())
                    .fold(0.0, f64::max)
            })
            .collect()
    }
}

/// Pearson correlation; 0 when either vector is constant.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (linalg::mean(a), linalg::mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa > 0.0 && sbb > 0.0 {
        sab / (saa * sbb).sqrt()
    } else {
        0.0
    }
}

/// Draws sites, covariates and outcome from `spec.seed`.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (x, sites) = draw_covariates(spec, &mut rng);
    let components = draw_outcome(x.as_ref(), &sites, spec, &mut rng)?;
    let dataset = Dataset::new(
        x,
        components.outcome(),
        sites,
        spec.column_names(),
        OutcomeTransform::Identity,
    )?;
    Ok(SyntheticData {
        dataset,
        components,
        spec: spec.clone(),
    })
}

/// Rescales the mean coefficients so the Monte-Carlo variance of m(X),
/// averaged over ⌈n_mc / n⌉ covariate draws of size n, hits the target.
pub fn calibrate_mean_scale(spec: &SyntheticSpec, n_mc: usize) -> Result<SyntheticSpec> {
    spec.validate()?;
    if spec.coefficients.is_zero() || spec.mean_scale == 0.0 {
        return Err(Error::DegenerateInput(
            "cannot calibrate a mean with all coefficients zero".into(),
        ));
    }
    let reps = n_mc.div_ceil(spec.n).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(CALIBRATION_SEED);
    let mut total = 0.0;
    for _ in 0..reps {
        let (x, _) = draw_covariates(spec, &mut rng);
        total += linalg::variance(&mean_function(x.as_ref(), spec)?);
    }
    let var = total / reps as f64;
    if !(var > 0.0) {
        return Err(Error::DegenerateInput("mean surface has zero variance".into()));
    }
    Ok(SyntheticSpec {
        mean_scale: spec.mean_scale * (spec.target_mean_variance / var).sqrt(),
        ..spec.clone()
    })
}
