//! The additive spatial model abstraction shared by UK-PLS and the spatial
//! forest, and the versioned model file.

use std::io::{Read, Write};

use faer::MatRef;
use serde::{Deserialize, Serialize};

use crate::covariance::FittedCovariance;
use crate::data::{LinkFunction, Location, OutcomeTransform};
use crate::error::{Error, Result};
use crate::spatrf::{predict_spatrf, SpatRfModel};
use crate::ukpls::{predict_ukpls, UkPlsModel};

/// η(s) = Σ_k w_k [ζ_k(X(s)) + ν_k(s)], with μ = g⁻¹(η) on the transformed
/// outcome scale.
pub trait AdditiveSpatialModel: Sync {
    fn n_components(&self) -> usize;
    /// Weight w_k applied to every component by the prediction combiner.
    fn component_weight(&self) -> f64;
    fn n_covariates(&self) -> usize;
    fn names(&self) -> &[String];
    /// ζ_k at each row of `x`, on the working scale.
    fn component_mean(&self, k: usize, x: MatRef<'_, f64>) -> Result<Vec<f64>>;
    /// Fitted error covariance of component k over the training sites.
    fn component_covariance(&self, k: usize) -> &FittedCovariance;
    /// True when the covariance parameters were supplied, not estimated.
    fn covariance_is_fixed(&self) -> bool;
    fn link(&self) -> LinkFunction;
    fn transform(&self) -> OutcomeTransform;

    fn training_sites(&self) -> &[Location] {
        self.component_covariance(0).sites()
    }
}

impl AdditiveSpatialModel for UkPlsModel {
    fn n_components(&self) -> usize {
        1
    }

    fn component_weight(&self) -> f64 {
        1.0
    }

    fn n_covariates(&self) -> usize {
        UkPlsModel::n_covariates(self)
    }

    fn names(&self) -> &[String] {
        UkPlsModel::names(self)
    }

    fn component_mean(&self, _k: usize, x: MatRef<'_, f64>) -> Result<Vec<f64>> {
        self.mean_term(x)
    }

    fn component_covariance(&self, _k: usize) -> &FittedCovariance {
        self.covariance()
    }

    fn covariance_is_fixed(&self) -> bool {
        UkPlsModel::covariance_fixed(self)
    }

    fn link(&self) -> LinkFunction {
        UkPlsModel::link(self)
    }

    fn transform(&self) -> OutcomeTransform {
        UkPlsModel::transform(self)
    }
}

impl AdditiveSpatialModel for SpatRfModel {
    fn n_components(&self) -> usize {
        self.trees().len()
    }

    fn component_weight(&self) -> f64 {
        1.0 / self.trees().len() as f64
    }

    fn n_covariates(&self) -> usize {
        SpatRfModel::n_covariates(self)
    }

    fn names(&self) -> &[String] {
        SpatRfModel::names(self)
    }

    fn component_mean(&self, k: usize, x: MatRef<'_, f64>) -> Result<Vec<f64>> {
        if x.ncols() != SpatRfModel::n_covariates(self) {
            return Err(Error::DimensionMismatch {
                expected: SpatRfModel::n_covariates(self),
                got: x.ncols(),
            });
        }
        Ok(self.trees()[k].predict_mean(x))
    }

    fn component_covariance(&self, k: usize) -> &FittedCovariance {
        self.trees()[k].covariance()
    }

    fn covariance_is_fixed(&self) -> bool {
        SpatRfModel::covariance_fixed(self)
    }

    fn link(&self) -> LinkFunction {
        SpatRfModel::link(self)
    }

    fn transform(&self) -> OutcomeTransform {
        SpatRfModel::transform(self)
    }
}

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpatialModel {
    Ukpls(UkPlsModel),
    Spatrf(SpatRfModel),
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    model: SpatialModel,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

impl SpatialModel {
    pub fn as_additive(&self) -> &dyn AdditiveSpatialModel {
        match self {
            SpatialModel::Ukpls(m) => m,
            SpatialModel::Spatrf(m) => m,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            SpatialModel::Ukpls(_) => "ukpls",
            SpatialModel::Spatrf(_) => "spatrf",
        }
    }

    /// Predictions on the original outcome scale.
    pub fn predict(&self, x: MatRef<'_, f64>, sites: &[Location]) -> Result<Vec<f64>> {
        match self {
            SpatialModel::Ukpls(m) => predict_ukpls(m, x, sites),
            SpatialModel::Spatrf(m) => predict_spatrf(m, x, sites),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Out<'a> {
            format_version: u32,
            model: &'a SpatialModel,
        }
        Ok(serde_json::to_string(&Out {
            format_version: FORMAT_VERSION,
            model: self,
        })?)
    }

    pub fn write_json<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(self.to_json()?.as_bytes())?;
        Ok(())
    }

    /// Parses a model file, rejecting other format versions.
    pub fn from_json(text: &str) -> Result<Self> {
        let probe: VersionProbe = serde_json::from_str(text)?;
        if probe.format_version != FORMAT_VERSION {
            return Err(Error::Parse(format!(
                "model format version {} is not supported (expected {FORMAT_VERSION})",
                probe.format_version
            )));
        }
        let file: ModelFile = serde_json::from_str(text)?;
        Ok(file.model)
    }

    pub fn read_json<R: Read>(mut r: R) -> Result<Self> {
        let mut text = String::new();
        r.read_to_string(&mut text)?;
        Self::from_json(&text)
    }
}
