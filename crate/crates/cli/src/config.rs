//! Experiment configuration: a TOML document with defaults for every field.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use bilevel_core::algorithms::{
    Algorithm1Config, AlgorithmSpec, Batches, ScheduleConfig, ScheduleKind, SsgdConfig, StocBioConfig,
};
use bilevel_core::estimators::{EstimatorConfig, Method};
use bilevel_core::hyperclean::BlobConfig;
use bilevel_core::synthetic::SyntheticConfig;
use bilevel_core::theory::TheoryOptions;

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    /// Malformed document, unknown key or type mismatch.
    Parse { line: Option<usize>, message: String },
    /// Well-formed document with an out-of-range value.
    Invalid { key: String, message: String },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Parse { line: Some(l), message } => write!(f, "config line {l}: {message}"),
            ConfigError::Parse { line: None, message } => write!(f, "config: {message}"),
            ConfigError::Invalid { key, message } => write!(f, "invalid `{key}`: {message}"),
        }
    }
}

impl std::error::Error for ConfigError {}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    #[default]
    Synthetic,
    Hyperclean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemConfig {
    pub kind: ProblemKind,
    /// Load the instance from a dump instead of generating it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    /// Seed of the data generator; the run seed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
    pub w0: Vec<f64>,
    /// Pads `w0` with its last entry up to this dimension.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_train: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_val: Option<usize>,
    pub n_test: usize,
    pub r: f64,
    pub feature_variance: f64,
    pub noise_variance: f64,
    pub features: usize,
    pub classes: usize,
    pub corruption: f64,
    pub ridge: f64,
    pub centroid_scale: f64,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        let synth = SyntheticConfig::default();
        let blobs = BlobConfig::default();
        Self {
            kind: ProblemKind::Synthetic,
            file: None,
            data_seed: None,
            w0: vec![2.0, 5.0, 7.0],
            dim: None,
            n_train: None,
            n_val: None,
            n_test: blobs.n_test,
            r: synth.r,
            feature_variance: synth.feature_variance,
            noise_variance: synth.noise_variance,
            features: blobs.features,
            classes: blobs.classes,
            corruption: blobs.corruption_prob,
            ridge: blobs.ridge,
            centroid_scale: blobs.centroid_scale,
        }
    }
}

impl ProblemConfig {
    /// `w0` padded to `dim`.
    pub fn w0_full(&self) -> Vec<f64> {
        let mut w = self.w0.clone();
        if let (Some(d), Some(&last)) = (self.dim, self.w0.last()) {
            w.resize(d.max(w.len()), last);
        }
        w
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        let d = SyntheticConfig::default();
        SyntheticConfig {
            n_train: self.n_train.unwrap_or(d.n_train),
            n_val: self.n_val.unwrap_or(d.n_val),
            r: self.r,
            feature_variance: self.feature_variance,
            noise_variance: self.noise_variance,
        }
    }

    pub fn blobs(&self) -> BlobConfig {
        let d = BlobConfig::default();
        BlobConfig {
            n_train: self.n_train.unwrap_or(d.n_train),
            n_val: self.n_val.unwrap_or(d.n_val),
            n_test: self.n_test,
            features: self.features,
            classes: self.classes,
            corruption_prob: self.corruption,
            ridge: self.ridge,
            centroid_scale: self.centroid_scale,
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.file.is_some() {
            return Ok(());
        }
        match self.kind {
            ProblemKind::Synthetic => {
                if self.w0.len() < 2 {
                    return Err(invalid("problem.w0", "needs at least 2 entries"));
                }
                if let Some(d) = self.dim {
                    if d < self.w0.len() {
                        return Err(invalid("problem.dim", format!("{d} is shorter than w0")));
                    }
                }
                positive("problem.r", self.r)?;
                non_negative("problem.feature_variance", self.feature_variance)?;
                non_negative("problem.noise_variance", self.noise_variance)?;
            }
            ProblemKind::Hyperclean => {
                for (k, v) in [("problem.features", self.features), ("problem.classes", self.classes)] {
                    at_least_one(k, v)?;
                }
                if !(0.0..=1.0).contains(&self.corruption) {
                    return Err(invalid("problem.corruption", "must lie in [0, 1]"));
                }
                positive("problem.ridge", self.ridge)?;
                non_negative("problem.centroid_scale", self.centroid_scale)?;
            }
        }
        for (k, v) in [("problem.n_train", self.n_train), ("problem.n_val", self.n_val)] {
            if let Some(v) = v {
                at_least_one(k, v)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AlgorithmName {
    #[default]
    Ssgd,
    Stocbio,
    Bsa,
    Ttsa,
    Alg1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorName {
    Bp,
    #[default]
    Ns,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlgorithmConfig {
    pub name: AlgorithmName,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "J")]
    pub j: usize,
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    /// Default for every batch size below.
    pub batch: usize,
    #[serde(rename = "S", skip_serializing_if = "Option::is_none")]
    pub s: Option<usize>,
    #[serde(rename = "D", skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(rename = "D_g", skip_serializing_if = "Option::is_none")]
    pub d_g: Option<usize>,
    #[serde(rename = "D_f", skip_serializing_if = "Option::is_none")]
    pub d_f: Option<usize>,
    pub estimator: EstimatorName,
    pub warm_start: bool,
    pub warm_start_y: bool,
    pub d_alpha: f64,
    pub d_beta: f64,
}

impl Default for AlgorithmConfig {
    fn default() -> Self {
        Self {
            name: AlgorithmName::Ssgd,
            k: 1000,
            t: 5,
            j: 3,
            alpha: 0.001,
            beta: 0.1,
            eta: 0.1,
            batch: 5,
            s: None,
            d: None,
            d_g: None,
            d_f: None,
            estimator: EstimatorName::Ns,
            warm_start: false,
            warm_start_y: false,
            d_alpha: 0.1,
            d_beta: 0.1,
        }
    }
}

impl AlgorithmConfig {
    pub fn batches(&self) -> Batches {
        Batches {
            s: self.s.unwrap_or(self.batch),
            d: self.d.unwrap_or(self.batch),
            d_g: self.d_g.unwrap_or(self.batch),
            d_f: self.d_f.unwrap_or(self.batch),
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        at_least_one("algorithm.K", self.k)?;
        at_least_one("algorithm.J", self.j)?;
        at_least_one("algorithm.batch", self.batch)?;
        for (k, v) in [
            ("algorithm.S", self.s),
            ("algorithm.D", self.d),
            ("algorithm.D_g", self.d_g),
            ("algorithm.D_f", self.d_f),
        ] {
            if let Some(v) = v {
                at_least_one(k, v)?;
            }
        }
        positive("algorithm.eta", self.eta)?;
        match self.name {
            AlgorithmName::Bsa | AlgorithmName::Ttsa => {
                positive("algorithm.d_alpha", self.d_alpha)?;
                positive("algorithm.d_beta", self.d_beta)?;
            }
            _ => {
                at_least_one("algorithm.T", self.t)?;
                positive("algorithm.alpha", self.alpha)?;
                positive("algorithm.beta", self.beta)?;
            }
        }
        if self.warm_start && !(self.name == AlgorithmName::Alg1 && self.estimator == EstimatorName::Sgd) {
            return Err(invalid("algorithm.warm_start", "only applies to alg1 with estimator = \"sgd\""));
        }
        if self.warm_start_y && self.name != AlgorithmName::Alg1 {
            return Err(invalid("algorithm.warm_start_y", "only applies to alg1"));
        }
        Ok(())
    }

    pub fn spec(&self) -> AlgorithmSpec {
        let batches = self.batches();
        match self.name {
            AlgorithmName::Ssgd => AlgorithmSpec::Ssgd(SsgdConfig {
                k: self.k,
                t: self.t,
                j: self.j,
                alpha: self.alpha,
                beta: self.beta,
                eta: self.eta,
                batches,
            }),
            AlgorithmName::Stocbio => AlgorithmSpec::StocBio(StocBioConfig {
                k: self.k,
                t: self.t,
                j: self.j,
                alpha: self.alpha,
                beta: self.beta,
                eta: self.eta,
                batches,
            }),
            AlgorithmName::Bsa | AlgorithmName::Ttsa => AlgorithmSpec::Schedule(ScheduleConfig {
                kind: if self.name == AlgorithmName::Bsa {
                    ScheduleKind::Bsa
                } else {
                    ScheduleKind::Ttsa
                },
                d_alpha: self.d_alpha,
                d_beta: self.d_beta,
                k: self.k,
                j: self.j,
                eta: self.eta,
            }),
            AlgorithmName::Alg1 => AlgorithmSpec::Algorithm1(Algorithm1Config {
                k: self.k,
                t: self.t,
                alpha: self.alpha,
                beta: self.beta,
                s: batches.s,
                estimator: EstimatorConfig {
                    method: match self.estimator {
                        EstimatorName::Bp => Method::StochasticBp,
                        EstimatorName::Ns => Method::StochasticNs,
                        EstimatorName::Sgd => Method::SgdEstimation,
                    },
                    j: self.j,
                    eta: self.eta,
                    warm_start: self.warm_start,
                    d_f: batches.d_f,
                    d_g: batches.d_g,
                    d: batches.d,
                },
                warm_start_y: self.warm_start_y,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    /// Upper starting point; zeros when empty.
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryConfig {
    /// Radius of the ball the constants are measured over.
    pub radius: f64,
    pub rho2_scale: f64,
    /// Inner-loop length used for `C_21`.
    #[serde(rename = "J")]
    pub j: usize,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        let o = TheoryOptions::default();
        Self {
            radius: 1.0,
            rho2_scale: o.rho2_scale,
            j: o.j,
        }
    }
}

impl TheoryConfig {
    pub fn options(&self) -> TheoryOptions {
        TheoryOptions {
            rho2_scale: self.rho2_scale,
            j: self.j,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Record every m-th outer iteration in the trace.
    pub record_every: usize,
    /// Full-batch mode: every batch enumerates its whole dataset.
    pub deterministic: bool,
    /// Stop each run after this many counter units.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget: Option<u64>,
    /// Write wall-clock seconds into traces; `0` when off.
    pub record_time: bool,
    pub problem: ProblemConfig,
    pub algorithm: AlgorithmConfig,
    pub init: InitConfig,
    pub theory: TheoryConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            output_dir: PathBuf::from("runs"),
            record_every: 1,
            deterministic: false,
            budget: None,
            record_time: true,
            problem: ProblemConfig::default(),
            algorithm: AlgorithmConfig::default(),
            init: InitConfig::default(),
            theory: TheoryConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "needs at least one seed"));
        }
        at_least_one("record_every", self.record_every)?;
        if let Some(b) = self.budget {
            if b == 0 {
                return Err(invalid("budget", "must be positive"));
            }
        }
        if self.init.x0.iter().any(|v| !v.is_finite()) {
            return Err(invalid("init.x0", "entries must be finite"));
        }
        positive("theory.radius", self.theory.radius)?;
        positive("theory.rho2_scale", self.theory.rho2_scale)?;
        at_least_one("theory.J", self.theory.j)?;
        self.problem.validate()?;
        self.algorithm.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn positive(key: &str, v: f64) -> Result<(), ConfigError> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(invalid(key, format!("must be positive and finite, got {v}")));
    }
    Ok(())
}

fn non_negative(key: &str, v: f64) -> Result<(), ConfigError> {
    if !(v >= 0.0) || !v.is_finite() {
        return Err(invalid(key, format!("must be non-negative and finite, got {v}")));
    }
    Ok(())
}

fn at_least_one(key: &str, v: usize) -> Result<(), ConfigError> {
    if v == 0 {
        return Err(invalid(key, "must be at least 1"));
    }
    Ok(())
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

fn de_error(text: &str, e: toml::de::Error) -> ConfigError {
    ConfigError::Parse {
        line: e.span().map(|s| line_of(text, s.start)),
        message: e.message().to_string(),
    }
}

/// Parses and validates a config document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| de_error(text, e))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parses a document into a generic table, for applying overrides.
pub fn parse_table(text: &str) -> Result<toml::Table, ConfigError> {
    text.parse::<toml::Table>().map_err(|e| de_error(text, e))
}

/// Converts an overridden table back into a validated config.
pub fn from_table(table: toml::Table) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig = table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse {
        line: None,
        message: e.message().to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}
