//! Leave-one-out quantile-substitution variable importance.

use std::str::FromStr;

use faer::{Mat, MatRef};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{
    cross_cov_matrix, factor_from_distances, fit_ml_distances, MlOptions,
};
use crate::data::{pairwise_distances, Dataset, LinkFunction, OutcomeTransform};
use crate::error::{Error, Result};
use crate::model::AdditiveSpatialModel;
use crate::ukpls::canonical_order;

/// Strictly increasing quantile levels in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct QuantileGrid {
    levels: Vec<f64>,
}

impl QuantileGrid {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::InvalidInput("quantile grid is empty".into()));
        }
        if let Some(q) = levels.iter().find(|q| !(0.0..=1.0).contains(*q)) {
            return Err(Error::InvalidInput(format!("quantile level {q} is outside [0, 1]")));
        }
        if levels.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput("quantile levels must be strictly increasing".into()));
        }
        Ok(QuantileGrid { levels })
    }

    pub fn quartiles() -> Self {
        QuantileGrid {
            levels: vec![0.25, 0.5, 0.75],
        }
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

impl TryFrom<Vec<f64>> for QuantileGrid {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        QuantileGrid::new(v)
    }
}

impl From<QuantileGrid> for Vec<f64> {
    fn from(g: QuantileGrid) -> Self {
        g.levels
    }
}

impl FromStr for QuantileGrid {
    type Err = Error;

    /// Comma-separated levels, e.g. `0.25,0.5,0.75`.
    fn from_str(s: &str) -> Result<Self> {
        let levels = s
            .split(',')
            .map(|t| {
                let t = t.trim();
                t.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("invalid quantile level {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        QuantileGrid::new(levels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefitPolicy {
    /// Re-estimate the covariance on the n − 1 remaining sites.
    FullRefit,
    /// Keep the fitted covariance and only drop the site from the kriging
    /// system.
    WeightsOnly,
}

impl RefitPolicy {
    pub fn default_for(n: usize) -> Self {
        if n <= 300 {
            RefitPolicy::FullRefit
        } else {
            RefitPolicy::WeightsOnly
        }
    }
}

impl FromStr for RefitPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" | "full_refit" => Ok(RefitPolicy::FullRefit),
            "weights" | "weights_only" => Ok(RefitPolicy::WeightsOnly),
            other => Err(Error::Parse(format!("unknown refit policy {other:?}"))),
        }
    }
}

/// Nearest order statistic: sorted x at 1-based index ⌈q·n⌉ (1 when q = 0).
pub fn empirical_quantile(x: &[f64], q: f64) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::InvalidInput("quantile of an empty vector".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidInput(format!("quantile level {q} is outside [0, 1]")));
    }
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let idx = ((q * n as f64).ceil() as usize).clamp(1, n);
    Ok(sorted[idx - 1])
}

/// Copy of `x` with column j set to `value` in every row.
pub fn substitute_quantile(x: MatRef<'_, f64>, j: usize, value: f64) -> Result<Mat<f64>> {
    if j >= x.ncols() {
        return Err(Error::InvalidInput(format!(
            "column {j} is out of range for {} covariates",
            x.ncols()
        )));
    }
    let mut out = x.to_owned();
    for i in 0..x.nrows() {
        out[(i, j)] = value;
    }
    Ok(out)
}

/// A site where the covariance re-fit failed and the fitted parameters
/// were used instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteWarning {
    pub covariate: usize,
    pub level: usize,
    pub component: usize,
    pub site: usize,
    pub message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImportanceTrajectory {
    pub names: Vec<String>,
    pub levels: Vec<f64>,
    /// F⁻¹_{X_j}(q_l), one row per covariate.
    pub quantile_values: Vec<Vec<f64>>,
    /// μ̄_{j,l} on the original outcome scale.
    pub mu_bar: Vec<Vec<f64>>,
    /// (1/n) Σ_i Σ_k w_k η̂ before the link and outcome transform are inverted.
    pub mu_bar_working: Vec<Vec<f64>>,
    pub policy: RefitPolicy,
    pub warnings: Vec<SiteWarning>,
}

/// ζ_k and ν̂_k at one site for every component, and their weighted sum.
#[derive(Debug, Clone)]
pub struct SiteTerms {
    pub zeta: Vec<f64>,
    pub nu: Vec<f64>,
    pub eta: f64,
}

/// Per-component quantities that do not depend on the substituted data.
struct Prepared {
    /// Σ_k⁻¹ over the training sites, for weights-only kriging.
    precision: Vec<Mat<f64>>,
    dist: Mat<f64>,
}

fn prepare(model: &dyn AdditiveSpatialModel) -> Result<Prepared> {
    let precision = (0..model.n_components())
        .map(|k| model.component_covariance(k).precision())
        .collect();
    Ok(Prepared {
        precision,
        dist: pairwise_distances(model.training_sites())?,
    })
}

/// −Σ_{j≠i} P_ij r_j / P_ii: the kriging prediction at site i from all other
/// sites under fixed parameters. Never reads r_i.
fn loo_weights_only(p: MatRef<'_, f64>, r: &[f64], i: usize) -> f64 {
    let col = p.col(i);
    let mut s = 0.0;
    for (j, rj) in r.iter().enumerate() {
        if j != i {
            s += col[j] * rj;
        }
    }
    -s / col[i]
}

/// Re-estimates the covariance on all sites but i, warm-started at the
/// fitted parameters, and kriges to site i.
fn loo_full_refit(
    model: &dyn AdditiveSpatialModel,
    dist: MatRef<'_, f64>,
    k: usize,
    r: &[f64],
    i: usize,
) -> Result<f64> {
    let cov = model.component_covariance(k);
    let n = r.len();
    let keep: Vec<usize> = (0..n).filter(|&j| j != i).collect();
    let d = Mat::from_fn(n - 1, n - 1, |a, b| dist[(keep[a], keep[b])]);
    let rk: Vec<f64> = keep.iter().map(|&j| r[j]).collect();
    let fit = fit_ml_distances(&rk, d.as_ref(), Some(*cov.params()), &MlOptions::default())?;
    let chol = factor_from_distances(d.as_ref(), &fit.params)?;
    let alpha = chol.solve(&rk);
    let sites: Vec<_> = keep.iter().map(|&j| cov.sites()[j]).collect();
    let cross = cross_cov_matrix(&cov.sites()[i..=i], &sites, &fit.params)?;
    let nu: f64 = alpha.iter().enumerate().map(|(a, w)| cross[(0, a)] * w).sum();
    if !nu.is_finite() {
        return Err(Error::NumericalRank("re-fit kriging prediction is not finite".into()));
    }
    Ok(nu)
}

fn check_model_data(model: &dyn AdditiveSpatialModel, x: MatRef<'_, f64>, y: &[f64]) -> Result<()> {
    let n = model.training_sites().len();
    if x.nrows() != n || y.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: x.nrows().min(y.len()),
        });
    }
    if x.ncols() != model.n_covariates() {
        return Err(Error::DimensionMismatch {
            expected: model.n_covariates(),
            got: x.ncols(),
        });
    }
    Ok(())
}

/// Component means ζ_k over all sites for the substituted design.
fn component_means(model: &dyn AdditiveSpatialModel, x_sub: MatRef<'_, f64>) -> Result<Vec<Vec<f64>>> {
    (0..model.n_components())
        .map(|k| model.component_mean(k, x_sub))
        .collect()
}

/// Linear predictor at site i for the substituted design `x_sub`, with the
/// working-scale outcome `y`. The error term at site i uses only the other
/// sites' residuals.
pub fn loo_site_terms(
    model: &dyn AdditiveSpatialModel,
    x_sub: MatRef<'_, f64>,
    y: &[f64],
    i: usize,
    policy: RefitPolicy,
) -> Result<SiteTerms> {
    check_model_data(model, x_sub, y)?;
    if i >= y.len() {
        return Err(Error::InvalidInput(format!("site {i} is out of range")));
    }
    let prep = prepare(model)?;
    let zetas = component_means(model, x_sub)?;
    let mut warnings = Vec::new();
    site_terms(model, &prep, &zetas, y, i, policy, &mut |k, msg| warnings.push((k, msg)))
}

fn site_terms(
    model: &dyn AdditiveSpatialModel,
    prep: &Prepared,
    zetas: &[Vec<f64>],
    y: &[f64],
    i: usize,
    policy: RefitPolicy,
    warn: &mut dyn FnMut(usize, String),
) -> Result<SiteTerms> {
    let w = model.component_weight();
    let mut zeta = Vec::with_capacity(zetas.len());
    let mut nu = Vec::with_capacity(zetas.len());
    let mut eta = 0.0;
    for (k, z) in zetas.iter().enumerate() {
        let r: Vec<f64> = y.iter().zip(z).map(|(a, b)| a - b).collect();
        let refit = policy == RefitPolicy::FullRefit && !model.covariance_is_fixed();
        let v = if refit {
            match loo_full_refit(model, prep.dist.as_ref(), k, &r, i) {
                Ok(v) => v,
                Err(e) => {
                    warn(k, e.to_string());
                    loo_weights_only(prep.precision[k].as_ref(), &r, i)
                }
            }
        } else {
            loo_weights_only(prep.precision[k].as_ref(), &r, i)
        };
        eta += w * (z[i] + v);
        zeta.push(z[i]);
        nu.push(v);
    }
    Ok(SiteTerms { zeta, nu, eta })
}

/// (1/n) Σ η̂ and its image g⁻¹ then transform⁻¹, summed in index order.
pub fn aggregate_mu_bar(eta: &[f64], link: LinkFunction, transform: OutcomeTransform) -> (f64, f64) {
    let working = eta.iter().sum::<f64>() / eta.len() as f64;
    (working, transform.inverse(link.invert(working)))
}

/// Importance trajectory over every covariate and quantile level. Each
/// cell substitutes F⁻¹_{X_j}(q_l) into column j at all sites, then averages
/// the leave-one-out linear predictor over sites. Results do not depend on
/// the number of worker threads.
pub fn compute_importance(
    model: &dyn AdditiveSpatialModel,
    data: &Dataset,
    grid: &QuantileGrid,
    policy: RefitPolicy,
) -> Result<ImportanceTrajectory> {
    let sorted;
    let data = match canonical_order(data) {
        Some(order) => {
            sorted = data.subset(&order)?;
            &sorted
        }
        None => data,
    };
    if data.sites() != model.training_sites() {
        return Err(Error::InvalidInput(
            "dataset sites differ from the model's training sites".into(),
        ));
    }
    let y = model.link().apply_all(data.y_transformed())?;
    check_model_data(model, data.x(), &y)?;
    let (n, p, m) = (data.n(), data.p(), grid.len());
    let prep = prepare(model)?;

    let quantile_values = (0..p)
        .map(|j| {
            let col = data.column(j);
            grid.levels()
                .iter()
                .map(|&q| empirical_quantile(&col, q))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    type Cell = (f64, f64, Vec<SiteWarning>);
    let cells: Vec<Result<Cell>> = (0..p * m)
        .into_par_iter()
        .map(|c| {
            let (j, l) = (c / m, c % m);
            let x_sub = substitute_quantile(data.x(), j, quantile_values[j][l])?;
            let zetas = component_means(model, x_sub.as_ref())?;
            let per_site: Vec<Result<(f64, Vec<SiteWarning>)>> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut warnings = Vec::new();
                    let t = site_terms(model, &prep, &zetas, &y, i, policy, &mut |k, message| {
                        warnings.push(SiteWarning {
                            covariate: j,
                            level: l,
                            component: k,
                            site: i,
                            message,
                        })
                    })?;
                    Ok((t.eta, warnings))
                })
                .collect();
            let mut eta = Vec::with_capacity(n);
            let mut warnings = Vec::new();
            for r in per_site {
                let (e, w) = r?;
                eta.push(e);
                warnings.extend(w);
            }
            let (working, mu) = aggregate_mu_bar(&eta, model.link(), model.transform());
            Ok((working, mu, warnings))
        })
        .collect();

    let mut mu_bar = vec![vec![0.0; m]; p];
    let mut mu_bar_working = vec![vec![0.0; m]; p];
    let mut warnings = Vec::new();
    for (c, r) in cells.into_iter().enumerate() {
        let (working, mu, w) = r?;
        mu_bar[c / m][c % m] = mu;
        mu_bar_working[c / m][c % m] = working;
        warnings.extend(w);
    }
    Ok(ImportanceTrajectory {
        names: data.names().to_vec(),
        levels: grid.levels().to_vec(),
        quantile_values,
        mu_bar,
        mu_bar_working,
        policy,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastRow {
    pub index: usize,
    pub name: String,
    pub d21: f64,
    pub d32: f64,
    pub d31: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContrastReport {
    pub rows: Vec<ContrastRow>,
    /// Covariate indices by decreasing |Δ31|, ties by index.
    pub ranking: Vec<usize>,
}

/// Adjacent and outer differences of a three-level trajectory.
pub fn contrasts(traj: &ImportanceTrajectory) -> Result<ContrastReport> {
    if traj.levels.len() != 3 {
        return Err(Error::GridShape {
            expected: 3,
            got: traj.levels.len(),
        });
    }
    let rows: Vec<ContrastRow> = traj
        .mu_bar
        .iter()
        .enumerate()
        .map(|(j, mu)| {
            let d21 = mu[1] - mu[0];
            let d32 = mu[2] - mu[1];
            ContrastRow {
                index: j,
                name: traj.names.get(j).cloned().unwrap_or_default(),
                d21,
                d32,
                d31: d21 + d32,
            }
        })
        .collect();
    let mut ranking: Vec<usize> = (0..rows.len()).collect();
    ranking.sort_by(|&a, &b| {
        rows[b]
            .d31
            .abs()
            .total_cmp(&rows[a].d31.abs())
            .then(a.cmp(&b))
    });
    Ok(ContrastReport { rows, ranking })
}
