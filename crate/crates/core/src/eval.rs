//! Cross-validation, R², and covariate screening.

use std::collections::HashMap;

use faer::{Mat, MatRef};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Location};
use crate::error::{Error, Result};
use crate::linalg;
use crate::parallel::with_workers;
use crate::pls::fold_assignment;
use crate::spatrf::{fit_spatrf, predict_spatrf, SpatRfConfig};
use crate::ukpls::{fit_ukpls_with, predict_ukpls, UkPlsOptions};

/// 1 − SSE/SST on whatever scale the inputs are on.
pub fn r_squared(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y.len() < 2 {
        return Err(Error::InvalidInput("R² needs at least two observations".into()));
    }
    r_squared_with_mean(y, y_hat, linalg::mean(y))
}

/// R² with the SST taken about a supplied mean (the full-data mean when
/// scoring a single fold).
pub fn r_squared_with_mean(y: &[f64], y_hat: &[f64], mean: f64) -> Result<f64> {
    if y.len() != y_hat.len() {
        return Err(Error::DimensionMismatch {
            expected: y.len(),
            got: y_hat.len(),
        });
    }
    let sse: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    let sst: f64 = y.iter().map(|a| (a - mean) * (a - mean)).sum();
    if !(sst > 0.0) {
        return Err(Error::DegenerateInput("outcome has zero variance".into()));
    }
    Ok(1.0 - sse / sst)
}

/// Anything that can be trained on one fold and predict another, on the
/// original outcome scale.
pub trait Learner: Sync {
    fn fit_predict(
        &self,
        train: &Dataset,
        test_x: MatRef<'_, f64>,
        test_sites: &[Location],
    ) -> Result<Vec<f64>>;
}

/// The model families the CV harness knows how to build.
#[derive(Debug, Clone)]
pub enum ModelSpec {
    UkPls(UkPlsOptions),
    SpatRf(SpatRfConfig),
    /// A forest grown with an identity error covariance and no kriging.
    NonSpatialRf(SpatRfConfig),
    /// Training-fold mean.
    Intercept,
}

impl Learner for ModelSpec {
    fn fit_predict(
        &self,
        train: &Dataset,
        test_x: MatRef<'_, f64>,
        test_sites: &[Location],
    ) -> Result<Vec<f64>> {
        match self {
            ModelSpec::UkPls(opts) => {
                let m = fit_ukpls_with(train, opts)?;
                predict_ukpls(&m, test_x, test_sites)
            }
            ModelSpec::SpatRf(cfg) => {
                let m = fit_spatrf(train, cfg)?;
                predict_spatrf(&m, test_x, test_sites)
            }
            ModelSpec::NonSpatialRf(cfg) => {
                let m = fit_spatrf(train, &cfg.clone().non_spatial())?;
                predict_spatrf(&m, test_x, test_sites)
            }
            ModelSpec::Intercept => {
                let m = train.transform().inverse(linalg::mean(train.y_transformed()));
                Ok(vec![m; test_x.nrows()])
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvResult {
    /// Fold id of each site.
    pub folds: Vec<usize>,
    pub predictions: Vec<f64>,
    /// y − ŷ on the original scale.
    pub errors: Vec<f64>,
    pub r2: f64,
    pub fold_r2: Vec<f64>,
}

/// k-fold cross-validation with a seeded random fold assignment. Every
/// model stage, including component or hyperparameter selection, sees only
/// the training folds.
pub fn kfold_cv(
    learner: &dyn Learner,
    data: &Dataset,
    k: usize,
    seed: u64,
    workers: usize,
) -> Result<CvResult> {
    let n = data.n();
    if k < 2 || n < 2 * k {
        return Err(Error::InvalidInput(format!(
            "{k}-fold cross-validation needs k >= 2 and n >= 2k (n = {n})"
        )));
    }
    let folds = fold_assignment(n, k, seed);
    let per_fold: Vec<Result<(Vec<usize>, Vec<f64>)>> = with_workers(workers, || {
        (0..k)
            .into_par_iter()
            .map(|f| {
                let train: Vec<usize> = (0..n).filter(|&i| folds[i] != f).collect();
                let test: Vec<usize> = (0..n).filter(|&i| folds[i] == f).collect();
                let run = || -> Result<Vec<f64>> {
                    let tr = data.subset(&train)?;
                    let x = data.x();
                    let te_x = Mat::from_fn(test.len(), data.p(), |r, c| x[(test[r], c)]);
                    let te_sites: Vec<Location> = test.iter().map(|&i| data.sites()[i]).collect();
                    learner.fit_predict(&tr, te_x.as_ref(), &te_sites)
                };
                run()
                    .map(|p| (test, p))
                    .map_err(|e| Error::Fold {
                        fold: f,
                        source: Box::new(e),
                    })
            })
            .collect()
    });
    let y = data.y();
    let ybar = linalg::mean(y);
    let mut predictions = vec![f64::NAN; n];
    let mut fold_r2 = Vec::with_capacity(k);
    for r in per_fold {
        let (test, pred) = r?;
        if pred.len() != test.len() {
            return Err(Error::DimensionMismatch {
                expected: test.len(),
                got: pred.len(),
            });
        }
        let yt: Vec<f64> = test.iter().map(|&i| y[i]).collect();
        fold_r2.push(r_squared_with_mean(&yt, &pred, ybar)?);
        for (&i, p) in test.iter().zip(pred) {
            predictions[i] = p;
        }
    }
    let errors = y.iter().zip(&predictions).map(|(a, b)| a - b).collect();
    Ok(CvResult {
        r2: r_squared(y, &predictions)?,
        folds,
        predictions,
        errors,
        fold_r2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScreenRule {
    /// Fewer than 20% of values differ from the most common value.
    LowVariability,
    /// More than 2% of values lie beyond median ± 5·IQR.
    Outliers,
    /// Land-use proportion whose maximum is below 10%.
    SparseLandUse,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Exclusion {
    pub index: usize,
    pub name: String,
    pub rule: ScreenRule,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Screening {
    pub retained: Vec<usize>,
    pub excluded: Vec<Exclusion>,
}

pub const MIN_DIFFERING_FRACTION: f64 = 0.20;
pub const MAX_OUTLIER_FRACTION: f64 = 0.02;
pub const OUTLIER_IQR_MULTIPLE: f64 = 5.0;
pub const MIN_LANDUSE_MAX: f64 = 0.10;

/// Linear-interpolation quantile of sorted data.
fn sorted_quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn screen_column(col: &[f64], is_landuse: bool) -> Option<ScreenRule> {
    let n = col.len() as f64;
    let mut counts: HashMap<u64, usize> = HashMap::new();
    for v in col {
        // +0.0 and -0.0 count as the same value
        *counts.entry((v + 0.0).to_bits()).or_default() += 1;
    }
    let mode_count = counts.values().copied().max().unwrap_or(0) as f64;
    if (n - mode_count) / n < MIN_DIFFERING_FRACTION {
        return Some(ScreenRule::LowVariability);
    }
    let mut sorted = col.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = sorted_quantile(&sorted, 0.5);
    let iqr = sorted_quantile(&sorted, 0.75) - sorted_quantile(&sorted, 0.25);
    let limit = OUTLIER_IQR_MULTIPLE * iqr;
    let outliers = col.iter().filter(|&&v| (v - median).abs() > limit).count() as f64;
    if outliers / n > MAX_OUTLIER_FRACTION {
        return Some(ScreenRule::Outliers);
    }
    if is_landuse && sorted[sorted.len() - 1] < MIN_LANDUSE_MAX {
        return Some(ScreenRule::SparseLandUse);
    }
    None
}

/// Drops low-variability, outlier-heavy, and sparse land-use covariates.
/// `landuse[j]` marks column j as a land-use proportion.
pub fn screen_covariates(
    x: MatRef<'_, f64>,
    names: &[String],
    landuse: &[bool],
) -> Result<Screening> {
    let (n, p) = (x.nrows(), x.ncols());
    if n < 10 {
        return Err(Error::InvalidInput(format!("screening needs n >= 10, got {n}")));
    }
    if names.len() != p || landuse.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: names.len().min(landuse.len()),
        });
    }
    let mut retained = Vec::new();
    let mut excluded = Vec::new();
    for j in 0..p {
        let col: Vec<f64> = (0..n).map(|i| x[(i, j)]).collect();
        match screen_column(&col, landuse[j]) {
            None => retained.push(j),
            Some(rule) => excluded.push(Exclusion {
                index: j,
                name: names[j].clone(),
                rule,
            }),
        }
    }
    if retained.is_empty() {
        return Err(Error::EmptyFeatures);
    }
    Ok(Screening { retained, excluded })
}
