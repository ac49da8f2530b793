//! UK-PLS: PLS scores as the universal-kriging trend, with the regression
//! coefficients and covariance parameters fit jointly by maximum likelihood.

use faer::{Mat, MatRef};
use serde::{Deserialize, Serialize};

use crate::covariance::{
    self, factor_from_distances, fit_ml_distances, CovarianceParams, FittedCovariance, MlOptions,
};
use crate::data::{pairwise_distances, Dataset, LinkFunction, Location, OutcomeTransform};
use crate::error::{Error, Result};
use crate::linalg::{self, Cholesky};
use crate::pls::{default_max_components, fit_pls, select_components_cv, ComponentSelection, PlsProjection};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UkPlsOptions {
    /// Component count; selected by cross-validation when `None`.
    pub n_components: Option<usize>,
    /// Upper bound for selection; defaults to min(p, n - 1, 10).
    pub max_components: Option<usize>,
    pub selection_folds: usize,
    pub seed: u64,
    pub link: LinkFunction,
    /// Use these covariance parameters instead of estimating them.
    pub fixed_covariance: Option<CovarianceParams>,
    /// Starting point for the covariance search.
    pub init: Option<CovarianceParams>,
    pub max_rounds: usize,
    /// Stop when the joint NLL changes by less than this (relative).
    pub tol: f64,
}

impl Default for UkPlsOptions {
    fn default() -> Self {
        UkPlsOptions {
            n_components: None,
            max_components: None,
            selection_folds: 5,
            seed: 0,
            link: LinkFunction::Identity,
            fixed_covariance: None,
            init: None,
            max_rounds: 50,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UkPlsModel {
    projection: PlsProjection,
    /// Intercept followed by one coefficient per PLS score.
    beta: Vec<f64>,
    covariance: FittedCovariance,
    covariance_fixed: bool,
    link: LinkFunction,
    transform: OutcomeTransform,
    names: Vec<String>,
    nll: f64,
    rounds: usize,
    selection: Option<ComponentSelection>,
}

/// [1, T] for scores T.
fn design(scores: MatRef<'_, f64>) -> Mat<f64> {
    Mat::from_fn(scores.nrows(), scores.ncols() + 1, |i, j| {
        if j == 0 {
            1.0
        } else {
            scores[(i, j - 1)]
        }
    })
}

/// Generalized least squares through the whitened system.
pub(crate) fn gls(design: MatRef<'_, f64>, y: &[f64], chol: &Cholesky) -> Result<Vec<f64>> {
    let dw = chol.forward_mat(design);
    let yw = chol.forward(y);
    linalg::least_squares(dw.as_ref(), &yw)
        .ok_or_else(|| Error::NumericalRank("GLS design is rank deficient".into()))
}

fn residuals(design: MatRef<'_, f64>, beta: &[f64], y: &[f64]) -> Vec<f64> {
    let fitted = linalg::matvec(design, beta);
    y.iter().zip(&fitted).map(|(a, b)| a - b).collect()
}

/// Row order sorted by site id, or `None` when already sorted. Fitting in
/// this order makes the result independent of the input row order.
pub(crate) fn canonical_order(data: &Dataset) -> Option<Vec<usize>> {
    let ids: Vec<i64> = data.sites().iter().map(|s| s.id).collect();
    if ids.windows(2).all(|w| w[0] < w[1]) {
        return None;
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&i| ids[i]);
    Some(order)
}

/// Fits UK-PLS with `l` components (selected by CV when `None`).
pub fn fit_ukpls(data: &Dataset, l: Option<usize>) -> Result<UkPlsModel> {
    fit_ukpls_with(
        data,
        &UkPlsOptions {
            n_components: l,
            ..Default::default()
        },
    )
}

pub fn fit_ukpls_with(data: &Dataset, opts: &UkPlsOptions) -> Result<UkPlsModel> {
    let sorted;
    let data = match canonical_order(data) {
        Some(order) => {
            sorted = data.subset(&order)?;
            &sorted
        }
        None => data,
    };
    let y = opts.link.apply_all(data.y_transformed())?;
    let (selection, l) = match opts.n_components {
        Some(l) => (None, l),
        None => {
            let l_max = opts
                .max_components
                .unwrap_or_else(|| default_max_components(data.n(), data.p()));
            let sel = select_components_cv(
                data,
                l_max,
                opts.selection_folds,
                opts.seed,
                &UkPlsOptions {
                    n_components: None,
                    ..opts.clone()
                },
            )?;
            let l = sel.n_components;
            (Some(sel), l)
        }
    };
    let projection = fit_pls(data.x(), &y, l).map_err(|e| match e {
        Error::DegenerateCovariate(col) => {
            let name = col
                .strip_prefix("column ")
                .and_then(|j| j.parse::<usize>().ok())
                .and_then(|j| data.names().get(j).cloned())
                .unwrap_or(col);
            Error::DegenerateCovariate(name)
        }
        other => other,
    })?;
    let scores = projection.project(data.x())?;
    let x = design(scores.as_ref());
    let dist = pairwise_distances(data.sites())?;

    let (params, beta, nll, rounds) = match opts.fixed_covariance {
        Some(theta) => {
            theta.validate()?;
            let chol = factor_from_distances(dist.as_ref(), &theta)?;
            let beta = gls(x.as_ref(), &y, &chol)?;
            let nll = covariance::nll_from_distances(&residuals(x.as_ref(), &beta, &y), dist.as_ref(), &theta)?;
            (theta, beta, nll, 0)
        }
        None => joint_ml(x.as_ref(), &y, dist.as_ref(), opts)?,
    };
    let resid = residuals(x.as_ref(), &beta, &y);
    let covariance = FittedCovariance::from_distances(params, data.sites().to_vec(), resid, dist.as_ref())?;
    Ok(UkPlsModel {
        projection,
        beta,
        covariance,
        covariance_fixed: opts.fixed_covariance.is_some(),
        link: opts.link,
        transform: data.transform(),
        names: data.names().to_vec(),
        nll,
        rounds,
        selection,
    })
}

/// Block-coordinate maximum likelihood: GLS for β given θ, then covariance
/// ML on the residuals given β, until the joint NLL settles.
fn joint_ml(
    x: MatRef<'_, f64>,
    y: &[f64],
    dist: MatRef<'_, f64>,
    opts: &UkPlsOptions,
) -> Result<(CovarianceParams, Vec<f64>, f64, usize)> {
    let ols = linalg::least_squares(x, y)
        .ok_or_else(|| Error::NumericalRank("trend design is rank deficient".into()))?;
    let mut theta = match opts.init {
        Some(p) => p,
        None => covariance::default_init(&residuals(x, &ols, y), covariance::max_distance(dist)),
    };
    let chol = factor_from_distances(dist, &theta)?;
    let mut beta = gls(x, y, &chol)?;
    let mut nll = covariance::nll_from_distances(&residuals(x, &beta, y), dist, &theta)?;

    let ml = MlOptions::default();
    let mut rounds = 0;
    while rounds < opts.max_rounds {
        rounds += 1;
        let before = nll;
        // the first round explores from the heuristic start
        let round_opts = if rounds == 1 && opts.init.is_none() {
            MlOptions {
                warm_step: ml.step,
                ..ml.clone()
            }
        } else {
            ml.clone()
        };
        let fit = fit_ml_distances(&residuals(x, &beta, y), dist, Some(theta), &round_opts)?;
        if fit.nll <= nll {
            theta = fit.params;
            nll = fit.nll;
        }
        let chol = factor_from_distances(dist, &theta)?;
        let candidate = gls(x, y, &chol)?;
        let cand_nll = covariance::nll_from_distances(&residuals(x, &candidate, y), dist, &theta)?;
        if cand_nll <= nll {
            beta = candidate;
            nll = cand_nll;
        }
        if before - nll <= opts.tol * nll.abs().max(1.0) {
            break;
        }
    }
    Ok((theta, beta, nll, rounds))
}

impl UkPlsModel {
    pub fn projection(&self) -> &PlsProjection {
        &self.projection
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn covariance(&self) -> &FittedCovariance {
        &self.covariance
    }

    pub fn covariance_fixed(&self) -> bool {
        self.covariance_fixed
    }

    pub fn link(&self) -> LinkFunction {
        self.link
    }

    pub fn transform(&self) -> OutcomeTransform {
        self.transform
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Joint negative log-likelihood at the fitted (β, θ).
    pub fn nll(&self) -> f64 {
        self.nll
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn selection(&self) -> Option<&ComponentSelection> {
        self.selection.as_ref()
    }

    pub fn n_covariates(&self) -> usize {
        self.projection.n_covariates()
    }

    /// Trend term [1, project(x)] · β on the working scale.
    pub fn mean_term(&self, x: MatRef<'_, f64>) -> Result<Vec<f64>> {
        let scores = self.projection.project(x)?;
        Ok(linalg::matvec(design(scores.as_ref()).as_ref(), &self.beta))
    }

    /// Mean and kriging terms on the working scale; their sum is the
    /// prediction before the link and outcome transform are inverted.
    pub fn predict_parts(
        &self,
        x: MatRef<'_, f64>,
        sites: &[Location],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        if sites.len() != x.nrows() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                got: sites.len(),
            });
        }
        let mean = self.mean_term(x)?;
        let krige = self.covariance.krige(sites)?;
        Ok((mean, krige))
    }
}

/// Predictions on the original outcome scale.
pub fn predict_ukpls(model: &UkPlsModel, x: MatRef<'_, f64>, sites: &[Location]) -> Result<Vec<f64>> {
    let (mean, krige) = model.predict_parts(x, sites)?;
    Ok(mean
        .iter()
        .zip(&krige)
        .map(|(m, k)| model.transform.inverse(model.link.invert(m + k)))
        .collect())
}
