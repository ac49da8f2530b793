//! Partial least squares (single response, NIPALS) on standardized
//! covariates, plus cross-validated choice of the component count.

use faer::linalg::solvers::DenseSolveCore;
use faer::{Mat, MatRef};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::r_squared_with_mean;
use crate::linalg;
use crate::ukpls::{fit_ukpls_with, predict_ukpls, UkPlsOptions};

/// Weights mapping standardized covariates to PLS scores, T = X_std · H.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProjectionRecord", into = "ProjectionRecord")]
pub struct PlsProjection {
    weights: Mat<f64>,
    x_center: Vec<f64>,
    x_scale: Vec<f64>,
}

/// On-disk form: `weights` is p×l in row-major order.
#[derive(Serialize, Deserialize)]
struct ProjectionRecord {
    n_components: usize,
    weights: Vec<f64>,
    x_center: Vec<f64>,
    x_scale: Vec<f64>,
}

impl TryFrom<ProjectionRecord> for PlsProjection {
    type Error = Error;
    fn try_from(r: ProjectionRecord) -> Result<Self> {
        let p = r.x_center.len();
        let l = r.n_components;
        if r.x_scale.len() != p || r.weights.len() != p * l || l == 0 {
            return Err(Error::Parse("inconsistent PLS projection shape".into()));
        }
        if r.x_scale.iter().any(|s| !(*s > 0.0) || !s.is_finite())
            || r.x_center.iter().chain(&r.weights).any(|v| !v.is_finite())
        {
            return Err(Error::Parse("invalid PLS projection values".into()));
        }
        Ok(PlsProjection {
            weights: Mat::from_fn(p, l, |i, j| r.weights[i * l + j]),
            x_center: r.x_center,
            x_scale: r.x_scale,
        })
    }
}

impl From<PlsProjection> for ProjectionRecord {
    fn from(p: PlsProjection) -> Self {
        let (rows, cols) = (p.weights.nrows(), p.weights.ncols());
        ProjectionRecord {
            n_components: cols,
            weights: (0..rows * cols).map(|k| p.weights[(k / cols, k % cols)]).collect(),
            x_center: p.x_center,
            x_scale: p.x_scale,
        }
    }
}

impl PlsProjection {
    pub fn n_components(&self) -> usize {
        self.weights.ncols()
    }

    pub fn n_covariates(&self) -> usize {
        self.weights.nrows()
    }

    /// The p×l weight matrix H.
    pub fn weights(&self) -> MatRef<'_, f64> {
        self.weights.as_ref()
    }

    pub fn x_center(&self) -> &[f64] {
        &self.x_center
    }

    pub fn x_scale(&self) -> &[f64] {
        &self.x_scale
    }

    /// Standardizes with the stored center/scale, then multiplies by H.
    pub fn project(&self, x: MatRef<'_, f64>) -> Result<Mat<f64>> {
        let p = self.n_covariates();
        if x.ncols() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: x.ncols(),
            });
        }
        let xs = Mat::from_fn(x.nrows(), p, |i, j| (x[(i, j)] - self.x_center[j]) / self.x_scale[j]);
        Ok(xs * &self.weights)
    }
}

fn standardize(x: MatRef<'_, f64>) -> Result<(Mat<f64>, Vec<f64>, Vec<f64>)> {
    let (n, p) = (x.nrows(), x.ncols());
    let mut center = Vec::with_capacity(p);
    let mut scale = Vec::with_capacity(p);
    for j in 0..p {
        let col: Vec<f64> = (0..n).map(|i| x[(i, j)]).collect();
        let m = linalg::mean(&col);
        let sd = linalg::variance(&col).sqrt();
        let spread = col.iter().fold(0.0f64, |a, v| a.max((v - m).abs()));
        if !(sd > 0.0) || spread <= 1e-12 * m.abs().max(1e-300) {
            return Err(Error::DegenerateCovariate(format!("column {j}")));
        }
        center.push(m);
        scale.push(sd);
    }
    let xs = Mat::from_fn(n, p, |i, j| (x[(i, j)] - center[j]) / scale[j]);
    Ok((xs, center, scale))
}

/// Dominant right singular vector of `x` by power iteration.
fn dominant_direction(x: MatRef<'_, f64>) -> Option<Vec<f64>> {
    let p = x.ncols();
    let mut v: Vec<f64> = (0..p)
        .map(|j| (0..x.nrows()).map(|i| x[(i, j)] * x[(i, j)]).sum::<f64>().sqrt())
        .collect();
    let mut norm = linalg::dot(&v, &v).sqrt();
    if !(norm > 0.0) {
        return None;
    }
    for _ in 0..500 {
        v.iter_mut().for_each(|a| *a /= norm);
        let next = linalg::matvec_t(x, &linalg::matvec(x, &v));
        let nn = linalg::dot(&next, &next).sqrt();
        if !(nn > 0.0) {
            return None;
        }
        let delta: f64 = next.iter().zip(&v).map(|(a, b)| (a / nn - b).abs()).sum();
        v = next;
        norm = nn;
        if delta < 1e-14 {
            break;
        }
    }
    v.iter_mut().for_each(|a| *a /= norm);
    Some(v)
}

/// Extracts `l` PLS components by NIPALS with X and y deflation.
///
/// Each weight vector is proportional to Xₐᵀyₐ for the deflated covariates
/// and response, which maximizes the covariance between the new score and
/// the current response residual. The returned H satisfies T = X_std H with
/// mutually orthogonal score columns.
pub fn fit_pls(x: MatRef<'_, f64>, y: &[f64], l: usize) -> Result<PlsProjection> {
    let (n, p) = (x.nrows(), x.ncols());
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: y.len(),
        });
    }
    if l == 0 || l > p.min(n.saturating_sub(1)) {
        return Err(Error::InvalidInput(format!(
            "component count {l} outside 1..={}",
            p.min(n.saturating_sub(1))
        )));
    }
    let (mut xk, center, scale) = standardize(x)?;
    let ybar = linalg::mean(y);
    let mut yk: Vec<f64> = y.iter().map(|v| v - ybar).collect();
    let y_spread = yk.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if y_spread <= 1e-12 * ybar.abs().max(1e-300) {
        return Err(Error::DegenerateResponse);
    }

    let mut w_mat = Mat::<f64>::zeros(p, l);
    let mut p_mat = Mat::<f64>::zeros(p, l);
    let mut first_norm = 0.0;
    for a in 0..l {
        let mut w = linalg::matvec_t(xk.as_ref(), &yk);
        let mut wn = linalg::dot(&w, &w).sqrt();
        if a == 0 {
            if !(wn > 1e-12 * y_spread * (n as f64)) {
                return Err(Error::DegenerateResponse);
            }
            first_norm = wn;
        } else if wn <= 1e-10 * first_norm {
            // response exhausted; continue along the covariate structure
            w = dominant_direction(xk.as_ref()).ok_or_else(|| {
                Error::InvalidInput(format!("covariates support only {a} components"))
            })?;
            wn = 1.0;
        }
        w.iter_mut().for_each(|v| *v /= wn);
        let t = linalg::matvec(xk.as_ref(), &w);
        let tt = linalg::dot(&t, &t);
        if !(tt > 0.0) {
            return Err(Error::InvalidInput(format!(
                "covariates support only {a} components"
            )));
        }
        let loading: Vec<f64> = linalg::matvec_t(xk.as_ref(), &t).iter().map(|v| v / tt).collect();
        let q = linalg::dot(&yk, &t) / tt;
        for j in 0..p {
            let col = xk.col_as_slice_mut(j);
            for i in 0..n {
                col[i] -= t[i] * loading[j];
            }
            w_mat[(j, a)] = w[j];
            p_mat[(j, a)] = loading[j];
        }
        for i in 0..n {
            yk[i] -= q * t[i];
        }
    }
    // H = W (PᵀW)⁻¹ maps undeflated standardized X to the scores
    let ptw = p_mat.transpose() * &w_mat;
    let weights = &w_mat * ptw.partial_piv_lu().inverse();
    Ok(PlsProjection {
        weights,
        x_center: center,
        x_scale: scale,
    })
}

/// Result of cross-validated component selection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentSelection {
    pub n_components: usize,
    /// Mean out-of-fold R² for l = 1..=l_max.
    pub cv_r2: Vec<f64>,
    /// Set when the best CV R² is not positive (no detectable signal).
    pub no_signal: bool,
}

/// Default upper bound on the component count: min(p, n - 1, 10).
pub fn default_max_components(n: usize, p: usize) -> usize {
    p.min(n.saturating_sub(1)).min(10).max(1)
}

/// Chooses l in 1..=l_max maximizing the mean out-of-fold R² of the full
/// UK-PLS pipeline (ties go to the smaller l).
pub fn select_components_cv(
    data: &Dataset,
    l_max: usize,
    folds: usize,
    seed: u64,
    base: &UkPlsOptions,
) -> Result<ComponentSelection> {
    let n = data.n();
    if folds < 2 || n < 2 * folds {
        return Err(Error::InvalidInput(format!(
            "cannot run {folds}-fold selection on {n} rows"
        )));
    }
    // each training fold must still allow l_max components
    let train_min = n - n.div_ceil(folds);
    let l_max = l_max.min(data.p()).min(train_min.saturating_sub(1));
    if l_max == 0 {
        return Err(Error::InvalidInput("no admissible component count".into()));
    }
    if l_max == 1 {
        return Ok(ComponentSelection {
            n_components: 1,
            cv_r2: vec![f64::NAN],
            no_signal: false,
        });
    }
    let assignment = fold_assignment(n, folds, seed);
    let ybar = linalg::mean(data.y());
    let mut fold_r2 = vec![0.0; l_max];
    for f in 0..folds {
        let train: Vec<usize> = (0..n).filter(|&i| assignment[i] != f).collect();
        let test: Vec<usize> = (0..n).filter(|&i| assignment[i] == f).collect();
        let tr = data.subset(&train)?;
        let te = data.subset(&test)?;
        let mut warm = None;
        for l in 1..=l_max {
            let opts = UkPlsOptions {
                n_components: Some(l),
                init: warm.or(base.init),
                ..base.clone()
            };
            let model = fit_ukpls_with(&tr, &opts).map_err(|e| Error::Fold {
                fold: f,
                source: Box::new(e),
            })?;
            warm = Some(*model.covariance().params());
            let pred = predict_ukpls(&model, te.x(), te.sites())?;
            fold_r2[l - 1] += r_squared_with_mean(te.y(), &pred, ybar)? / folds as f64;
        }
    }
    let cv_r2 = fold_r2;
    let mut best = 0;
    for (k, r) in cv_r2.iter().enumerate() {
        if *r > cv_r2[best] {
            best = k;
        }
    }
    Ok(ComponentSelection {
        n_components: best + 1,
        no_signal: !(cv_r2[best] > 0.0),
        cv_r2,
    })
}

/// Near-equal random folds: a seeded permutation dealt round-robin.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        assignment[i] = pos % folds;
    }
    assignment
}
