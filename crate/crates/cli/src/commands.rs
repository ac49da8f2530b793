use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use faer::Mat;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use spvim_core::data::{CovariateTable, Dataset, OutcomeTransform};
use spvim_core::eval::{kfold_cv, ModelSpec};
use spvim_core::model::{SpatialModel, FORMAT_VERSION};
use spvim_core::parallel::with_workers;
use spvim_core::spatrf::{fit_spatrf, SpatRfConfig};
use spvim_core::synthetic::{calibrate_mean_scale, generate, ActiveRole, SyntheticSpec};
use spvim_core::ukpls::{fit_ukpls_with, UkPlsOptions};
use spvim_core::varimp::{compute_importance, contrasts, ContrastRow, QuantileGrid, RefitPolicy, SiteWarning};
use spvim_core::{Error, Result};

use crate::config::{ModelKind, RunConfig};

pub const DEFAULT_MC_DRAWS: usize = 100_000;

fn with_path(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| with_path(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| with_path(path, e))?))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// `out.csv` → `out.<suffix>`; refuses to clobber the primary output.
fn sibling(out: &Path, suffix: &str) -> Result<PathBuf> {
    let stem = out
        .file_stem()
        .ok_or_else(|| Error::Config(format!("output path {} has no file name", out.display())))?;
    let mut name = stem.to_os_string();
    name.push(".");
    name.push(suffix);
    let path = out.with_file_name(name);
    if path == out {
        return Err(Error::Config(format!(
            "output {} would collide with its {suffix} companion",
            out.display()
        )));
    }
    Ok(path)
}

fn workers(cfg: &RunConfig) -> usize {
    cfg.workers.unwrap_or(0)
}

fn load_dataset(cfg: &RunConfig, transform: Option<OutcomeTransform>) -> Result<Dataset> {
    let path = cfg.require(&cfg.data, "data")?;
    Dataset::from_csv_reader(
        std::io::BufReader::new(open(path)?),
        cfg.metric.unwrap_or_default(),
        transform.or(cfg.transform).unwrap_or_default(),
    )
}

fn load_model(cfg: &RunConfig) -> Result<SpatialModel> {
    let path = cfg.require(&cfg.model_file, "model_file")?;
    SpatialModel::read_json(open(path)?)
}

/// Column permutation that brings `names` into the model's order.
fn align_columns(model_names: &[String], names: &[String]) -> Result<Vec<usize>> {
    if model_names.len() != names.len() {
        return Err(Error::InvalidInput(format!(
            "schema mismatch: model has {} covariates, data has {}",
            model_names.len(),
            names.len()
        )));
    }
    model_names
        .iter()
        .map(|m| {
            names.iter().position(|n| n == m).ok_or_else(|| {
                Error::InvalidInput(format!("schema mismatch: covariate `{m}` is missing from the data"))
            })
        })
        .collect()
}

fn ukpls_options(cfg: &RunConfig) -> UkPlsOptions {
    let d = UkPlsOptions::default();
    UkPlsOptions {
        n_components: cfg.components,
        max_components: cfg.max_components,
        selection_folds: cfg.selection_folds.unwrap_or(d.selection_folds),
        seed: cfg.seed.unwrap_or(d.seed),
        link: cfg.link.unwrap_or(d.link),
        ..d
    }
}

fn forest_config(cfg: &RunConfig) -> SpatRfConfig {
    let d = SpatRfConfig::default();
    SpatRfConfig {
        n_trees: cfg.n_trees.unwrap_or(d.n_trees),
        mtry: cfg.mtry.or(d.mtry),
        min_leaf: cfg.min_leaf.unwrap_or(d.min_leaf),
        max_depth: cfg.max_depth.unwrap_or(d.max_depth),
        rounds: cfg.rounds.unwrap_or(d.rounds),
        bootstrap: cfg.bootstrap.unwrap_or(d.bootstrap),
        seed: cfg.seed.unwrap_or(d.seed),
        link: cfg.link.unwrap_or(d.link),
        ..d
    }
}

fn model_spec(cfg: &RunConfig) -> Result<ModelSpec> {
    Ok(match *cfg.require(&cfg.model, "model")? {
        ModelKind::Ukpls => ModelSpec::UkPls(ukpls_options(cfg)),
        ModelKind::Spatrf => ModelSpec::SpatRf(forest_config(cfg)),
        ModelKind::Rf => ModelSpec::NonSpatialRf(forest_config(cfg)),
        ModelKind::Intercept => ModelSpec::Intercept,
    })
}

pub fn fit_model(cfg: &RunConfig, data: &Dataset) -> Result<SpatialModel> {
    let kind = *cfg.require(&cfg.model, "model")?;
    with_workers(workers(cfg), || match kind {
        ModelKind::Ukpls => fit_ukpls_with(data, &ukpls_options(cfg)).map(SpatialModel::Ukpls),
        ModelKind::Spatrf => fit_spatrf(data, &forest_config(cfg)).map(SpatialModel::Spatrf),
        ModelKind::Rf => fit_spatrf(data, &forest_config(cfg).non_spatial()).map(SpatialModel::Spatrf),
        ModelKind::Intercept => Err(Error::Config("the intercept baseline cannot be saved as a model".into())),
    })
}

#[derive(Serialize)]
struct ActiveCovariate {
    role: &'static str,
    index: usize,
    name: String,
}

pub fn simulate(cfg: &RunConfig) -> Result<Value> {
    let out = cfg.require(&cfg.out, "out")?;
    let sidecar = sibling(out, "json")?;
    let d = SyntheticSpec::default();
    let mut spec = SyntheticSpec {
        n: cfg.n.unwrap_or(d.n),
        p: cfg.p.unwrap_or(d.p),
        extent: cfg.extent.unwrap_or(d.extent),
        seed: cfg.seed.unwrap_or(d.seed),
        ..d
    };
    spec.validate()?;
    if cfg.calibrate.unwrap_or(true) {
        spec = calibrate_mean_scale(&spec, cfg.mc_draws.unwrap_or(DEFAULT_MC_DRAWS))?;
    }
    let sim = generate(&spec)?;
    let mut w = create(out)?;
    sim.dataset.write_csv(&mut w)?;
    w.flush()?;

    let names = spec.column_names();
    let active: Vec<ActiveCovariate> = ActiveRole::ALL
        .iter()
        .zip(spec.active_indices())
        .map(|(role, index)| ActiveCovariate {
            role: role.name(),
            index,
            name: names[index].clone(),
        })
        .collect();
    let v = sim.components.variances();
    write_json(
        &sidecar,
        &json!({
            "format_version": FORMAT_VERSION,
            "spec": spec,
            "active": active,
            "coefficients": spec.effective_coefficients(),
            "variances": v,
            "max_abs_corr_with_active": sim.max_abs_corr_with_active(),
        }),
    )?;
    Ok(json!({"data": out, "sidecar": sidecar, "variances": v}))
}

pub fn fit(cfg: &RunConfig) -> Result<Value> {
    let out = cfg.require(&cfg.out, "out")?;
    let data = load_dataset(cfg, None)?;
    let model = fit_model(cfg, &data)?;
    let mut w = create(out)?;
    model.write_json(&mut w)?;
    w.flush()?;
    Ok(json!({"model": out, "kind": model.kind(), "n": data.n(), "p": data.p()}))
}

pub fn predict(cfg: &RunConfig) -> Result<Value> {
    let out = cfg.require(&cfg.out, "out")?;
    let model = load_model(cfg)?;
    let path = cfg.require(&cfg.data, "data")?;
    let table = CovariateTable::from_csv_reader(open(path)?, cfg.metric.unwrap_or_default(), false)?;
    let cols = align_columns(model.as_additive().names(), &table.names)?;
    let x = Mat::from_fn(table.x.nrows(), cols.len(), |i, j| table.x[(i, cols[j])]);
    let y_hat = with_workers(workers(cfg), || model.predict(x.as_ref(), &table.sites))?;
    let mut w = csv::Writer::from_writer(create(out)?);
    w.write_record(["site_id", "y_hat"])?;
    for (s, v) in table.sites.iter().zip(&y_hat) {
        w.write_record([s.id.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(json!({"predictions": out, "n": y_hat.len()}))
}

pub fn cv(cfg: &RunConfig) -> Result<Value> {
    let out = cfg.require(&cfg.out, "out")?;
    let errors_path = sibling(out, "errors.csv")?;
    let data = load_dataset(cfg, None)?;
    let spec = model_spec(cfg)?;
    let folds = cfg.folds.unwrap_or(10);
    let seed = cfg.seed.unwrap_or(0);
    let res = kfold_cv(&spec, &data, folds, seed, workers(cfg))?;

    let mut w = csv::Writer::from_writer(create(&errors_path)?);
    w.write_record(["site_id", "y", "y_hat", "error"])?;
    for i in 0..data.n() {
        w.write_record([
            data.sites()[i].id.to_string(),
            data.y()[i].to_string(),
            res.predictions[i].to_string(),
            res.errors[i].to_string(),
        ])?;
    }
    w.flush()?;
    let model = cfg.model.map(ModelKind::name);
    write_json(
        out,
        &json!({
            "format_version": FORMAT_VERSION,
            "model": model,
            "folds": folds,
            "seed": seed,
            "r2": res.r2,
            "per_fold_r2": res.fold_r2,
        }),
    )?;
    Ok(json!({"cv": out, "errors": errors_path, "r2": res.r2}))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub format_version: u32,
    pub policy: RefitPolicy,
    pub levels: Vec<f64>,
    /// Present only for three-level grids.
    pub contrasts: Option<Vec<ContrastRow>>,
    /// Covariate names by decreasing |Δ31|.
    pub ranking: Option<Vec<String>>,
    pub warnings: Vec<SiteWarning>,
}

pub fn importance(cfg: &RunConfig) -> Result<Value> {
    let out = cfg.require(&cfg.out, "out")?;
    let report_path = sibling(out, "json")?;
    let model = load_model(cfg)?;
    let m = model.as_additive();
    let raw = load_dataset(cfg, Some(m.transform()))?;
    let cols = align_columns(m.names(), raw.names())?;
    let data = raw.select_columns(&cols)?;
    let grid = cfg.quantiles.clone().unwrap_or_else(QuantileGrid::quartiles);
    let policy = cfg.policy.unwrap_or_else(|| RefitPolicy::default_for(data.n()));
    let traj = with_workers(workers(cfg), || compute_importance(m, &data, &grid, policy))?;

    let mut w = csv::Writer::from_writer(create(out)?);
    w.write_record(["covariate", "q_level", "quantile_value", "mu_bar"])?;
    for (j, name) in traj.names.iter().enumerate() {
        for (l, q) in traj.levels.iter().enumerate() {
            w.write_record([
                name.clone(),
                q.to_string(),
                traj.quantile_values[j][l].to_string(),
                traj.mu_bar[j][l].to_string(),
            ])?;
        }
    }
    w.flush()?;

    let (rows, ranking) = if traj.levels.len() == 3 {
        let c = contrasts(&traj)?;
        let ranking = c.ranking.iter().map(|&j| traj.names[j].clone()).collect();
        (Some(c.rows), Some(ranking))
    } else {
        (None, None)
    };
    let report = ImportanceReport {
        format_version: FORMAT_VERSION,
        policy: traj.policy,
        levels: traj.levels.clone(),
        contrasts: rows,
        ranking,
        warnings: traj.warnings.clone(),
    };
    write_json(&report_path, &report)?;
    Ok(json!({
        "trajectories": out,
        "report": report_path,
        "policy": policy,
        "warnings": report.warnings.len(),
    }))
}

/// Model summary, with the importance ranking when a report is given.
pub fn report(cfg: &RunConfig) -> Result<Value> {
    let model = load_model(cfg)?;
    let m = model.as_additive();
    let params: Vec<_> = (0..m.n_components())
        .map(|k| *m.component_covariance(k).params())
        .collect();
    let mut summary = json!({
        "kind": model.kind(),
        "n_sites": m.training_sites().len(),
        "covariates": m.names(),
        "link": m.link(),
        "transform": m.transform(),
        "covariance_fixed": m.covariance_is_fixed(),
        "components": m.n_components(),
    });
    match &model {
        SpatialModel::Ukpls(u) => {
            summary["latent_components"] = json!(u.projection().n_components());
            summary["covariance"] = json!(params[0]);
            summary["selection"] = json!(u.selection());
        }
        SpatialModel::Spatrf(f) => {
            summary["config"] = json!(f.config());
            let k = params.len() as f64;
            summary["mean_covariance"] = json!({
                "nugget": params.iter().map(|p| p.nugget).sum::<f64>() / k,
                "psill": params.iter().map(|p| p.psill).sum::<f64>() / k,
                "range": params.iter().map(|p| p.range).sum::<f64>() / k,
            });
        }
    }
    if let Some(path) = &cfg.importance_file {
        let imp: ImportanceReport = serde_json::from_reader(open(path)?)?;
        if imp.format_version != FORMAT_VERSION {
            return Err(Error::Parse(format!(
                "importance report version {} is not supported",
                imp.format_version
            )));
        }
        summary["importance"] = json!({
            "policy": imp.policy,
            "ranking": imp.ranking,
            "contrasts": imp.contrasts,
            "warnings": imp.warnings.len(),
        });
    }
    if let Some(out) = &cfg.out {
        write_json(out, &summary)?;
    }
    Ok(summary)
}
