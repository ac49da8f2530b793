//! Flat `key = value` run configuration. Command-line flags use the same
//! keys and override the file.

use std::path::PathBuf;
use std::str::FromStr;

use spvim_core::data::{LinkFunction, Metric, OutcomeTransform};
use spvim_core::varimp::{QuantileGrid, RefitPolicy};
use spvim_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Ukpls,
    Spatrf,
    /// The forest with spatial structure switched off.
    Rf,
    /// Training mean; cross-validation baseline only.
    Intercept,
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ukpls" | "uk-pls" => Ok(ModelKind::Ukpls),
            "spatrf" => Ok(ModelKind::Spatrf),
            "rf" => Ok(ModelKind::Rf),
            "intercept" => Ok(ModelKind::Intercept),
            other => Err(Error::Config(format!("unknown model `{other}`"))),
        }
    }
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Ukpls => "ukpls",
            ModelKind::Spatrf => "spatrf",
            ModelKind::Rf => "rf",
            ModelKind::Intercept => "intercept",
        }
    }
}

fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{v}` is not a boolean"))),
    }
}

fn parse_path(v: &str) -> Result<PathBuf> {
    if v.is_empty() {
        return Err(Error::Config("empty path".into()));
    }
    Ok(PathBuf::from(v))
}

fn parse_finite(v: &str) -> Result<f64> {
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(Error::Config(format!("`{v}` is not a finite number"))),
    }
}

fn parse_from<T: FromStr>(v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| Error::Config(format!("invalid value `{v}`: {e}")))
}

macro_rules! run_config {
    ($($key:ident: $ty:ty => $parse:expr;)*) => {
        #[derive(Debug, Clone, Default, PartialEq)]
        pub struct RunConfig {
            $(pub $key: Option<$ty>,)*
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            /// Sets one key; dashes in the key are read as underscores.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key.trim().replace('-', "_").as_str() {
                    $(stringify!($key) => {
                        if self.$key.is_some() {
                            return Err(Error::Config(format!("key `{}` is set twice", stringify!($key))));
                        }
                        let parsed: Result<$ty> = ($parse)(value);
                        self.$key = Some(parsed.map_err(|e| {
                            Error::Config(format!("key `{}`: {}", stringify!($key), strip_prefix(e)))
                        })?);
                    })*
                    other => return Err(Error::Config(format!("unknown key `{other}`"))),
                }
                Ok(())
            }

            /// Keys set in `over` replace those in `self`.
            pub fn merge(self, over: RunConfig) -> RunConfig {
                RunConfig { $($key: over.$key.or(self.$key),)* }
            }
        }
    };
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::Config(m) | Error::Parse(m) | Error::InvalidInput(m) => m,
        other => other.to_string(),
    }
}

run_config! {
    seed: u64 => parse_from::<u64>;
    workers: usize => parse_from::<usize>;
    model: ModelKind => ModelKind::from_str;
    data: PathBuf => parse_path;
    out: PathBuf => parse_path;
    model_file: PathBuf => parse_path;
    importance_file: PathBuf => parse_path;
    metric: Metric => Metric::from_str;
    transform: OutcomeTransform => OutcomeTransform::from_str;
    link: LinkFunction => parse_link;
    components: usize => parse_positive;
    max_components: usize => parse_positive;
    selection_folds: usize => parse_positive;
    n_trees: usize => parse_positive;
    mtry: usize => parse_positive;
    min_leaf: usize => parse_positive;
    max_depth: usize => parse_from::<usize>;
    rounds: usize => parse_from::<usize>;
    bootstrap: bool => parse_bool;
    folds: usize => parse_positive;
    quantiles: QuantileGrid => QuantileGrid::from_str;
    policy: RefitPolicy => RefitPolicy::from_str;
    n: usize => parse_positive;
    p: usize => parse_positive;
    extent: f64 => parse_finite;
    calibrate: bool => parse_bool;
    mc_draws: usize => parse_positive;
}

fn parse_positive(v: &str) -> Result<usize> {
    match parse_from::<usize>(v)? {
        0 => Err(Error::Config("must be positive".into())),
        k => Ok(k),
    }
}

fn parse_link(v: &str) -> Result<LinkFunction> {
    match v {
        "identity" => Ok(LinkFunction::Identity),
        "log" => Ok(LinkFunction::Log),
        other => Err(Error::Config(format!("unknown link `{other}`"))),
    }
}

impl RunConfig {
    /// Parses a config file: one `key = value` per line, `#` starts a comment.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, strip_prefix(e))))?;
        }
        Ok(cfg)
    }

    pub fn read(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    pub fn require<'a, T>(&self, field: &'a Option<T>, key: &str) -> Result<&'a T> {
        field
            .as_ref()
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }
}
