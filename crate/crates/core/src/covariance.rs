//! Exponential covariance with nugget: construction, Gaussian likelihood,
//! maximum-likelihood estimation and kriging.
//!
//! The covariance between two observations at distance `d` is
//! `psill * exp(-d / range)`, plus `nugget` on the diagonal of a square
//! block. The nugget models measurement error, so it never enters a
//! cross-covariance between training and prediction locations, even when
//! the two coincide.

use faer::{Mat, MatRef};
use serde::{Deserialize, Serialize};

use crate::data::{cross_distances, pairwise_distances, Location};
use crate::error::{Error, Result};
use crate::linalg::{self, Cholesky};
use crate::optim::{nelder_mead, SimplexOptions};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Nugget below which the diagonal receives jitter before factorization.
const JITTER_NUGGET: f64 = 1e-12;
const JITTER_SCALE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceParams {
    pub nugget: f64,
    pub psill: f64,
    pub range: f64,
}

impl CovarianceParams {
    pub fn new(nugget: f64, psill: f64, range: f64) -> Result<Self> {
        let p = CovarianceParams {
            nugget,
            psill,
            range,
        };
        p.validate()?;
        Ok(p)
    }

    /// Uncorrelated errors with the given variance.
    pub fn pure_nugget(variance: f64) -> Self {
        CovarianceParams {
            nugget: variance,
            psill: 0.0,
            range: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.nugget >= 0.0
            && self.psill >= 0.0
            && self.nugget.is_finite()
            && self.psill.is_finite()
            && self.nugget + self.psill > 0.0
            && self.range > 0.0
            && self.range.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "invalid covariance parameters {self:?}"
            )))
        }
    }

    #[inline]
    pub fn correlated(&self, d: f64) -> f64 {
        self.psill * (-d / self.range).exp()
    }

    /// Fraction of total variance that is spatially correlated.
    pub fn spatial_fraction(&self) -> f64 {
        self.psill / (self.psill + self.nugget)
    }

    fn jitter(&self) -> f64 {
        if self.nugget < JITTER_NUGGET {
            JITTER_SCALE * (self.nugget + self.psill)
        } else {
            0.0
        }
    }
}

/// Square covariance over `sites`, nugget on the diagonal.
pub fn cov_matrix(sites: &[Location], params: &CovarianceParams) -> Result<Mat<f64>> {
    params.validate()?;
    let d = pairwise_distances(sites)?;
    let n = sites.len();
    Ok(Mat::from_fn(n, n, |i, j| {
        params.correlated(d[(i, j)]) + if i == j { params.nugget } else { 0.0 }
    }))
}

/// Cross covariance between two site sets (no nugget).
pub fn cross_cov_matrix(
    a: &[Location],
    b: &[Location],
    params: &CovarianceParams,
) -> Result<Mat<f64>> {
    params.validate()?;
    let d = cross_distances(a, b)?;
    Ok(Mat::from_fn(a.len(), b.len(), |i, j| params.correlated(d[(i, j)])))
}

/// Lower triangle of the covariance from precomputed distances.
fn lower_cov_from_distances(
    d: MatRef<'_, f64>,
    params: &CovarianceParams,
    jitter: f64,
) -> Mat<f64> {
    let n = d.nrows();
    let diag = params.psill + params.nugget + jitter;
    let mut s = Mat::zeros(n, n);
    for j in 0..n {
        let dc = d.col(j);
        let sc = s.col_as_slice_mut(j);
        sc[j] = diag;
        if params.psill > 0.0 {
            let inv_range = 1.0 / params.range;
            for i in j + 1..n {
                sc[i] = params.psill * (-dc[i] * inv_range).exp();
            }
        }
    }
    s
}

/// Cholesky factor of Σ(params) over sites with distance matrix `d`.
/// With a (near) zero nugget, a failed factorization is retried once with
/// diagonal jitter.
pub fn factor_from_distances(d: MatRef<'_, f64>, params: &CovarianceParams) -> Result<Cholesky> {
    let s = lower_cov_from_distances(d, params, 0.0);
    if let Some(c) = Cholesky::factor(s.as_ref()) {
        return Ok(c);
    }
    let jitter = params.jitter();
    let retry = (jitter > 0.0)
        .then(|| Cholesky::factor(lower_cov_from_distances(d, params, jitter).as_ref()))
        .flatten();
    retry.ok_or_else(|| {
        Error::NumericalRank(format!(
            "covariance is not positive definite for {params:?} (duplicate sites with zero nugget?)"
        ))
    })
}

fn nll_with_factor(chol: &Cholesky, residuals: &[f64]) -> f64 {
    let w = chol.forward(residuals);
    let n = residuals.len() as f64;
    0.5 * n * LN_2PI + 0.5 * chol.log_det() + 0.5 * linalg::dot(&w, &w)
}

pub(crate) fn nll_from_distances(
    residuals: &[f64],
    d: MatRef<'_, f64>,
    params: &CovarianceParams,
) -> Result<f64> {
    let chol = factor_from_distances(d, params)?;
    Ok(nll_with_factor(&chol, residuals))
}

/// Gaussian negative log-likelihood of mean-zero residuals.
pub fn neg_log_likelihood(
    residuals: &[f64],
    sites: &[Location],
    params: &CovarianceParams,
) -> Result<f64> {
    if residuals.len() != sites.len() {
        return Err(Error::DimensionMismatch {
            expected: sites.len(),
            got: residuals.len(),
        });
    }
    params.validate()?;
    let d = pairwise_distances(sites)?;
    nll_from_distances(residuals, d.as_ref(), params)
}

/// Box constraints on the log-parameters.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LogBounds {
    lo: [f64; 3],
    hi: [f64; 3],
}

impl LogBounds {
    fn new(var: f64, dmax: f64) -> Self {
        LogBounds {
            lo: [(1e-8 * var).ln(), (1e-8 * var).ln(), (1e-3 * dmax).ln()],
            hi: [(1e3 * var).ln(), (1e3 * var).ln(), (10.0 * dmax).ln()],
        }
    }

    fn to_params(self, z: &[f64]) -> CovarianceParams {
        let c = |k: usize| z[k].clamp(self.lo[k], self.hi[k]).exp();
        CovarianceParams {
            nugget: c(0),
            psill: c(1),
            range: c(2),
        }
    }

    fn to_log(self, p: &CovarianceParams) -> [f64; 3] {
        let raw = [p.nugget, p.psill, p.range];
        let mut z = [0.0; 3];
        for k in 0..3 {
            let v = if raw[k] > 0.0 { raw[k].ln() } else { self.lo[k] };
            z[k] = v.clamp(self.lo[k], self.hi[k]);
        }
        z
    }
}

/// Options for [`fit_ml`] and friends.
#[derive(Debug, Clone)]
pub struct MlOptions {
    pub max_iter: usize,
    pub rel_tol: f64,
    /// Initial simplex step in log space from the default start.
    pub step: f64,
    /// Initial simplex step when warm-started from a supplied point.
    pub warm_step: f64,
}

impl Default for MlOptions {
    fn default() -> Self {
        MlOptions {
            max_iter: 500,
            rel_tol: 1e-8,
            step: 0.5,
            warm_step: 0.25,
        }
    }
}

/// Outcome of a likelihood maximization. `converged == false` means the
/// iteration budget ran out; `params` is then the best point seen.
#[derive(Debug, Clone, Copy)]
pub struct MlFit {
    pub params: CovarianceParams,
    pub nll: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Variance heuristic start: nugget = psill = var/2, range = dmax/4.
pub fn default_init(residuals: &[f64], dmax: f64) -> CovarianceParams {
    let var = linalg::variance(residuals);
    CovarianceParams {
        nugget: var / 2.0,
        psill: var / 2.0,
        range: dmax / 4.0,
    }
}

pub(crate) fn max_distance(d: MatRef<'_, f64>) -> f64 {
    let mut m = 0.0f64;
    for j in 0..d.ncols() {
        for i in j + 1..d.nrows() {
            m = m.max(d[(i, j)]);
        }
    }
    m
}

/// Maximum-likelihood covariance estimation over precomputed distances.
/// Never returns a point worse than the start.
pub(crate) fn fit_ml_distances(
    residuals: &[f64],
    d: MatRef<'_, f64>,
    init: Option<CovarianceParams>,
    opts: &MlOptions,
) -> Result<MlFit> {
    let n = residuals.len();
    if n < 3 {
        return Err(Error::InvalidInput(format!(
            "covariance estimation needs at least 3 sites, got {n}"
        )));
    }
    if let Some(i) = residuals.iter().position(|r| !r.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite residual at {i}")));
    }
    let var = linalg::variance(residuals);
    if residuals.iter().all(|&r| r == residuals[0]) || !(var > 0.0) {
        return Err(Error::DegenerateInput("residuals are all identical".into()));
    }
    let dmax = max_distance(d);
    if !(dmax > 0.0) {
        return Err(Error::DegenerateInput("all sites coincide".into()));
    }
    let bounds = LogBounds::new(var, dmax);
    let (start, step) = match init {
        Some(p) => (p, opts.warm_step),
        None => (default_init(residuals, dmax), opts.step),
    };
    let z0 = bounds.to_log(&start);
    let objective = |z: &[f64]| {
        nll_from_distances(residuals, d, &bounds.to_params(z)).unwrap_or(f64::INFINITY)
    };
    let r = nelder_mead(
        objective,
        &z0,
        &SimplexOptions {
            max_iter: opts.max_iter,
            rel_tol: opts.rel_tol,
            step,
        },
    );
    if !r.value.is_finite() {
        return Err(Error::NumericalRank(
            "covariance is singular over the whole search region".into(),
        ));
    }
    Ok(MlFit {
        params: bounds.to_params(&r.x),
        nll: r.value,
        iterations: r.iterations,
        converged: r.converged,
    })
}

/// Fits covariance parameters to mean-zero residuals by maximum likelihood.
///
/// Searches over log-parameters within `[1e-8, 1e3] * var(r)` for both
/// variances and `[1e-3, 10] * dmax` for the range. A supplied `init` is
/// used as a warm start and the result is never worse than it.
pub fn fit_ml(
    residuals: &[f64],
    sites: &[Location],
    init: Option<CovarianceParams>,
) -> Result<FittedCovariance> {
    fit_ml_with(residuals, sites, init, &MlOptions::default())
}

pub fn fit_ml_with(
    residuals: &[f64],
    sites: &[Location],
    init: Option<CovarianceParams>,
    opts: &MlOptions,
) -> Result<FittedCovariance> {
    if residuals.len() != sites.len() {
        return Err(Error::DimensionMismatch {
            expected: sites.len(),
            got: residuals.len(),
        });
    }
    let d = pairwise_distances(sites)?;
    let fit = fit_ml_distances(residuals, d.as_ref(), init, opts)?;
    if !fit.converged {
        return Err(Error::NotConverged {
            best: fit.params,
            nll: fit.nll,
            iterations: fit.iterations,
        });
    }
    FittedCovariance::from_distances(fit.params, sites.to_vec(), residuals.to_vec(), d.as_ref())
}

/// Covariance parameters together with the training residuals they smooth.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "FittedRecord", into = "FittedRecord")]
pub struct FittedCovariance {
    params: CovarianceParams,
    sites: Vec<Location>,
    residuals: Vec<f64>,
    factor: Cholesky,
    /// Σ⁻¹ r
    alpha: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct FittedRecord {
    params: CovarianceParams,
    sites: Vec<Location>,
    residuals: Vec<f64>,
}

impl TryFrom<FittedRecord> for FittedCovariance {
    type Error = Error;
    fn try_from(r: FittedRecord) -> Result<Self> {
        FittedCovariance::new(r.params, r.sites, r.residuals)
    }
}

impl From<FittedCovariance> for FittedRecord {
    fn from(f: FittedCovariance) -> Self {
        FittedRecord {
            params: f.params,
            sites: f.sites,
            residuals: f.residuals,
        }
    }
}

impl FittedCovariance {
    pub fn new(
        params: CovarianceParams,
        sites: Vec<Location>,
        residuals: Vec<f64>,
    ) -> Result<Self> {
        let d = pairwise_distances(&sites)?;
        Self::from_distances(params, sites, residuals, d.as_ref())
    }

    pub(crate) fn from_distances(
        params: CovarianceParams,
        sites: Vec<Location>,
        residuals: Vec<f64>,
        d: MatRef<'_, f64>,
    ) -> Result<Self> {
        params.validate()?;
        if residuals.len() != sites.len() {
            return Err(Error::DimensionMismatch {
                expected: sites.len(),
                got: residuals.len(),
            });
        }
        if let Some(i) = residuals.iter().position(|r| !r.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite residual at {i}")));
        }
        let factor = factor_from_distances(d, &params)?;
        let alpha = factor.solve(&residuals);
        Ok(FittedCovariance {
            params,
            sites,
            residuals,
            factor,
            alpha,
        })
    }

    pub fn params(&self) -> &CovarianceParams {
        &self.params
    }

    pub fn sites(&self) -> &[Location] {
        &self.sites
    }

    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    pub fn factor(&self) -> &Cholesky {
        &self.factor
    }

    pub fn nll(&self) -> f64 {
        nll_with_factor(&self.factor, &self.residuals)
    }

    /// Σ⁻¹ over the training sites.
    pub fn precision(&self) -> Mat<f64> {
        self.factor.inverse()
    }

    /// Kriging weights Σ_tst,trn Σ_trn,trn⁻¹ (one row per test site).
    pub fn kriging_weights(&self, test_sites: &[Location]) -> Result<Mat<f64>> {
        let cross = cross_cov_matrix(test_sites, &self.sites, &self.params)?;
        let w = self.factor.solve_mat(cross.transpose());
        Ok(w.transpose().to_owned())
    }

    /// Conditional expectation of the error field at `test_sites`.
    pub fn krige(&self, test_sites: &[Location]) -> Result<Vec<f64>> {
        if self.params.psill == 0.0 {
            return Ok(vec![0.0; test_sites.len()]);
        }
        let cross = cross_cov_matrix(test_sites, &self.sites, &self.params)?;
        Ok(linalg::matvec(cross.as_ref(), &self.alpha))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::matvec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn line(n: usize, gap: f64) -> Vec<Location> {
        (0..n).map(|i| Location::new(i as i64, i as f64 * gap, 0.0)).collect()
    }

    fn random_sites(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> Vec<Location> {
        (0..n)
            .map(|i| Location::new(i as i64, rng.random::<f64>() * extent, rng.random::<f64>() * extent))
            .collect()
    }

    fn sample_field(rng: &mut ChaCha8Rng, sites: &[Location], p: &CovarianceParams) -> Vec<f64> {
        let s = cov_matrix(sites, p).unwrap();
        let c = Cholesky::factor(s.as_ref()).unwrap();
        let z: Vec<f64> = (0..sites.len()).map(|_| rng.sample(StandardNormal)).collect();
        matvec(c.l(), &z)
    }

    #[test]
    fn single_site_diagonal() {
        let p = CovarianceParams::new(1.0, 2.0, 1.0).unwrap();
        let s = cov_matrix(&line(1, 1.0), &p).unwrap();
        assert_eq!(s[(0, 0)], 3.0);
    }

    #[test]
    fn pure_nugget_is_scaled_identity() {
        let p = CovarianceParams::new(0.7, 0.0, 1.0).unwrap();
        let sites = line(4, 0.3);
        let s = cov_matrix(&sites, &p).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(s[(i, j)], if i == j { 0.7 } else { 0.0 });
            }
        }
        let c = cross_cov_matrix(&line(2, 0.1), &sites, &p).unwrap();
        assert!((0..2).all(|i| (0..4).all(|j| c[(i, j)] == 0.0)));
    }

    #[test]
    fn off_diagonal_kernel_value() {
        let p = CovarianceParams::new(0.0, 4.0, 2.5).unwrap();
        let s = cov_matrix(&line(2, 2.5), &p).unwrap();
        // hand evaluation: 4 * e^-1
        assert!((s[(0, 1)] - 4.0 * (-1.0f64).exp()).abs() < 1e-15);
        assert!((s[(0, 1)] - 1.471518).abs() < 1e-6);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(CovarianceParams::new(0.0, 0.0, 1.0).is_err());
        assert!(CovarianceParams::new(1.0, 1.0, 0.0).is_err());
        assert!(CovarianceParams::new(-1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn nll_identity_cases() {
        let p = CovarianceParams::new(1.0, 0.0, 1.0).unwrap();
        let sites = line(2, 1.0);
        let v = neg_log_likelihood(&[0.0, 0.0], &sites, &p).unwrap();
        assert!((v - LN_2PI).abs() < 1e-12);
        assert!((v - 1.837877).abs() < 1e-6);
        let v = neg_log_likelihood(&[1.0, 1.0], &sites, &p).unwrap();
        assert!((v - (LN_2PI + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn nll_matches_explicit_two_by_two() {
        let p = CovarianceParams::new(0.0, 1.0, 1.0).unwrap();
        let c = (-1.0f64).exp();
        // Σ = [[1, c], [c, 1]], r = [1, -1]
        let det = 1.0 - c * c;
        let quad = (1.0 + 1.0 + 2.0 * c) / det; // rᵀ adj(Σ) r / det
        let expected = LN_2PI + 0.5 * det.ln() + 0.5 * quad;
        let v = neg_log_likelihood(&[1.0, -1.0], &line(2, 1.0), &p).unwrap();
        assert!((v - expected).abs() < 1e-8, "{v} vs {expected}");
    }

    #[test]
    fn duplicate_sites_without_nugget_get_jitter() {
        let mut sites = line(3, 1.0);
        sites[2].x = 0.0;
        let p = CovarianceParams::new(0.0, 1.0, 1.0).unwrap();
        assert!(neg_log_likelihood(&[0.1, 0.2, 0.1], &sites, &p).is_ok());
    }

    #[test]
    fn krige_without_correlation_is_zero() {
        let p = CovarianceParams::new(1.0, 0.0, 1.0).unwrap();
        let f = FittedCovariance::new(p, line(3, 1.0), vec![1.0, -2.0, 3.0]).unwrap();
        assert_eq!(f.krige(&line(2, 0.5)).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn krige_interpolates_without_nugget() {
        let p = CovarianceParams::new(0.0, 2.0, 1.0).unwrap();
        let sites = line(4, 0.8);
        let r = vec![0.3, -1.2, 2.0, 0.5];
        let f = FittedCovariance::new(p, sites.clone(), r.clone()).unwrap();
        let pred = f.krige(&sites[1..2]).unwrap();
        assert!((pred[0] - r[1]).abs() < 1e-10);
    }

    #[test]
    fn krige_matches_explicit_three_by_three_inverse() {
        let p = CovarianceParams::new(0.5, 2.0, 1.0).unwrap();
        let train = vec![
            Location::new(0, 0.0, 0.0),
            Location::new(1, 1.0, 0.0),
            Location::new(2, 0.0, 2.0),
        ];
        let test = vec![Location::new(9, 0.5, 0.5)];
        let r = [1.0, -0.5, 2.0];
        let s = cov_matrix(&train, &p).unwrap();
        // adjugate inverse
        let a = |i: usize, j: usize| s[(i, j)];
        let det = a(0, 0) * (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1))
            - a(0, 1) * (a(1, 0) * a(2, 2) - a(1, 2) * a(2, 0))
            + a(0, 2) * (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0));
        let cof = |i: usize, j: usize| {
            let rows: Vec<usize> = (0..3).filter(|&k| k != i).collect();
            let cols: Vec<usize> = (0..3).filter(|&k| k != j).collect();
            let m = a(rows[0], cols[0]) * a(rows[1], cols[1]) - a(rows[0], cols[1]) * a(rows[1], cols[0]);
            if (i + j) % 2 == 0 { m } else { -m }
        };
        let inv = |i: usize, j: usize| cof(j, i) / det;
        let k: Vec<f64> = train
            .iter()
            .map(|t| 2.0 * (-((t.x - 0.5f64).hypot(t.y - 0.5))).exp())
            .collect();
        let mut expected = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                expected += k[i] * inv(i, j) * r[j];
            }
        }
        let f = FittedCovariance::new(p, train, r.to_vec()).unwrap();
        let got = f.krige(&test).unwrap()[0];
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn krige_far_field_vanishes() {
        let p = CovarianceParams::new(0.1, 1.0, 1.0).unwrap();
        let f = FittedCovariance::new(p, line(3, 1.0), vec![1.0, 2.0, 3.0]).unwrap();
        let far = [Location::new(99, 1e6, 0.0)];
        assert_eq!(f.krige(&far).unwrap()[0], 0.0);
    }

    #[test]
    fn krige_is_linear_in_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sites = random_sites(&mut rng, 12, 3.0);
        let test = random_sites(&mut rng, 4, 3.0);
        let p = CovarianceParams::new(0.3, 1.5, 0.8).unwrap();
        let r: Vec<f64> = (0..12).map(|_| rng.sample(StandardNormal)).collect();
        let base = FittedCovariance::new(p, sites.clone(), r.clone()).unwrap().krige(&test).unwrap();
        for _ in 0..5 {
            let a: f64 = rng.random_range(-3.0..3.0);
            let scaled: Vec<f64> = r.iter().map(|v| a * v).collect();
            let got = FittedCovariance::new(p, sites.clone(), scaled).unwrap().krige(&test).unwrap();
            for (g, b) in got.iter().zip(&base) {
                assert!((g - a * b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn krige_shrinks_with_nugget() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sites = random_sites(&mut rng, 20, 2.0);
        let p = CovarianceParams::new(0.5, 1.0, 1.0).unwrap();
        let r: Vec<f64> = (0..20).map(|_| rng.sample(StandardNormal)).collect();
        let f = FittedCovariance::new(p, sites.clone(), r.clone()).unwrap();
        let pred = f.krige(&sites).unwrap();
        // in the Σ⁻¹ norm the smoothed field is no longer than the residuals
        let prec = f.precision();
        let norm = |v: &[f64]| linalg::dot(v, &matvec(prec.as_ref(), v));
        assert!(norm(&pred) <= norm(&r));
    }

    #[test]
    fn nll_invariant_under_reordering() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sites = random_sites(&mut rng, 15, 2.0);
        let r: Vec<f64> = (0..15).map(|_| rng.sample(StandardNormal)).collect();
        let p = CovarianceParams::new(0.2, 1.0, 0.7).unwrap();
        let a = neg_log_likelihood(&r, &sites, &p).unwrap();
        let perm: Vec<usize> = (0..15).rev().collect();
        let s2: Vec<Location> = perm.iter().map(|&i| sites[i]).collect();
        let r2: Vec<f64> = perm.iter().map(|&i| r[i]).collect();
        let b = neg_log_likelihood(&r2, &s2, &p).unwrap();
        assert!((a - b).abs() < 1e-9 * a.abs());
    }

    #[test]
    fn nugget_matrices_always_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let mut sites = random_sites(&mut rng, 10, 1.0);
            sites[3] = Location { id: 3, ..sites[7] };
            let p = CovarianceParams::new(rng.random_range(1e-3..1.0), rng.random_range(0.0..5.0), rng.random_range(0.1..3.0)).unwrap();
            let d = pairwise_distances(&sites).unwrap();
            assert!(factor_from_distances(d.as_ref(), &p).is_ok());
        }
    }

    #[test]
    fn fit_ml_recovers_generating_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let truth = CovarianceParams::new(1.0, 4.0, 2.5).unwrap();
        let sites = random_sites(&mut rng, 400, 10.0);
        let r = sample_field(&mut rng, &sites, &truth);
        let fit = fit_ml(&r, &sites, None).unwrap();
        let p = fit.params();
        for (est, tru) in [(p.nugget, 1.0), (p.psill, 4.0), (p.range, 2.5)] {
            assert!(est > tru / 2.0 && est < tru * 2.0, "{p:?}");
        }
        let warm = fit_ml(&r, &sites, Some(truth)).unwrap();
        let at_truth = neg_log_likelihood(&r, &sites, &truth).unwrap();
        assert!(warm.nll() <= at_truth + 1e-9);
    }

    #[test]
    fn fit_ml_on_white_noise_is_mostly_nugget() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let sites = random_sites(&mut rng, 400, 10.0);
        let r: Vec<f64> = (0..400).map(|_| rng.sample(StandardNormal)).collect();
        let fit = fit_ml(&r, &sites, None).unwrap();
        assert!(fit.params().spatial_fraction() < 0.5, "{:?}", fit.params());
    }

    #[test]
    fn fit_ml_rejects_constant_residuals() {
        let sites = line(5, 1.0);
        assert!(matches!(fit_ml(&[2.0; 5], &sites, None), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn fit_ml_reports_non_convergence_with_best_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sites = random_sites(&mut rng, 30, 3.0);
        let r: Vec<f64> = (0..30).map(|_| rng.sample(StandardNormal)).collect();
        let opts = MlOptions { max_iter: 2, ..Default::default() };
        match fit_ml_with(&r, &sites, None, &opts) {
            Err(Error::NotConverged { best, .. }) => assert!(best.validate().is_ok()),
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn fitted_covariance_serde_roundtrip_is_exact() {
        let p = CovarianceParams::new(0.3, 1.1, 0.9).unwrap();
        let f = FittedCovariance::new(p, line(4, 0.7), vec![0.1, -0.2, 0.3, 0.4]).unwrap();
        let json = serde_json::to_string(&f).unwrap();
        let back: FittedCovariance = serde_json::from_str(&json).unwrap();
        let test = line(3, 0.33);
        assert_eq!(f.krige(&test).unwrap(), back.krige(&test).unwrap());
    }
}
