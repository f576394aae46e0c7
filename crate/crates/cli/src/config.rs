//! Experiment configuration file (JSON).
//!
//! Relative paths are resolved against the directory holding the config.
//! Command-line flags override `seed`, `runs`, `output` and `methods`.

use std::path::{Path, PathBuf};

use cmfuot_core::cmf::{CdParams, NnlsParams, DEFAULT_DENSE_GRAM_CAP, DEFAULT_NNLS_CAP, DEFAULT_REFRESH_EVERY};
use cmfuot_core::eval::{Method, SolverSettings, SweepSpec};
use cmfuot_core::uot::{FusionParams, DEFAULT_LAMBDA, DEFAULT_MU};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_mu")]
    pub mu: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { lambda: DEFAULT_LAMBDA, mu: DEFAULT_MU }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    /// Coordinate-update budget for the greedy solvers.
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    /// Absolute stopping threshold on the best update gain.
    #[serde(default)]
    pub tol: Option<f64>,
    #[serde(default = "default_refresh")]
    pub refresh_every: usize,
    #[serde(default = "default_gram_cap")]
    pub dense_gram_cap: usize,
    #[serde(default = "default_nnls_cap")]
    pub nnls_cap: usize,
    #[serde(default = "default_nnls_tol")]
    pub nnls_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: default_max_iters(),
            tol: None,
            refresh_every: DEFAULT_REFRESH_EVERY,
            dense_gram_cap: DEFAULT_DENSE_GRAM_CAP,
            nnls_cap: DEFAULT_NNLS_CAP,
            nnls_tol: default_nnls_tol(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Peak merge radius in metres (default: three grid steps).
    #[serde(default)]
    pub merge_radius: Option<f64>,
    /// Squared-error charge for a missed source (default: squared grid diagonal).
    #[serde(default)]
    pub miss_penalty: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scene: PathBuf,
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// SNR for `solve` and `trace`; absent means noiseless.
    #[serde(default)]
    pub snr_db: Option<f64>,
    /// Covariance text file to use instead of simulating one (`solve` only).
    #[serde(default)]
    pub covariance: Option<PathBuf>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}
fn default_mu() -> f64 {
    DEFAULT_MU
}
fn default_max_iters() -> usize {
    100_000
}
fn default_refresh() -> usize {
    DEFAULT_REFRESH_EVERY
}
fn default_gram_cap() -> usize {
    DEFAULT_DENSE_GRAM_CAP
}
fn default_nnls_cap() -> usize {
    DEFAULT_NNLS_CAP
}
fn default_nnls_tol() -> f64 {
    NnlsParams::default().tol
}
fn default_methods() -> Vec<String> {
    Method::ALL.iter().map(|m| m.name().to_string()).collect()
}
fn default_runs() -> usize {
    1
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// Scalars that flags may override.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub runs: Option<usize>,
    pub output: Option<PathBuf>,
    pub methods: Vec<String>,
}

/// A validated config with paths resolved and overrides applied.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub methods: Vec<Method>,
    /// Whether `methods` came from the command line.
    pub methods_from_flags: bool,
    /// Hex SHA-256 over the effective config (minus the output directory)
    /// and the scene file contents.
    pub config_hash: String,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl Experiment {
    pub fn load(path: &Path, overrides: Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_config(config, base, overrides)
    }

    pub fn from_config(mut config: ExperimentConfig, base: &Path, overrides: Overrides) -> Result<Self, CliError> {
        config.scene = resolve(base, &config.scene);
        config.covariance = config.covariance.map(|c| resolve(base, &c));
        config.output = match overrides.output {
            Some(o) => o,
            None => resolve(base, &config.output),
        };
        if let Some(s) = overrides.seed {
            config.seed = s;
        }
        if let Some(r) = overrides.runs {
            config.runs = r;
        }
        let methods_from_flags = !overrides.methods.is_empty();
        if methods_from_flags {
            config.methods = overrides.methods;
        }

        let methods = config
            .methods
            .iter()
            .map(|m| Method::parse(m).map_err(|e| CliError::Config(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        if methods.is_empty() {
            return Err(CliError::Config("no methods selected".into()));
        }
        if config.runs == 0 {
            return Err(CliError::Config("runs must be at least 1".into()));
        }
        if let Some(sweep) = &config.sweep {
            if sweep.values.is_empty() || sweep.values.iter().any(|v| !v.is_finite()) {
                return Err(CliError::Config("sweep values must be a nonempty list of finite numbers".into()));
            }
        }
        if let Some(s) = config.snr_db {
            if s.is_nan() {
                return Err(CliError::Config("snr_db must be a number".into()));
            }
        }
        if !config.scene.is_file() {
            return Err(CliError::Config(format!("scene file {} does not exist", config.scene.display())));
        }
        if let Some(c) = &config.covariance {
            if !c.is_file() {
                return Err(CliError::Config(format!("covariance file {} does not exist", c.display())));
            }
        }
        let exp = Self { config, methods, methods_from_flags, config_hash: String::new() };
        exp.settings().fusion.validate().map_err(|e| CliError::Config(e.to_string()))?;
        exp.hashed()
    }

    fn hashed(mut self) -> Result<Self, CliError> {
        let scene = std::fs::read(&self.config.scene)
            .map_err(|e| CliError::Config(format!("cannot read scene {}: {e}", self.config.scene.display())))?;
        let mut hashed = self.config.clone();
        hashed.output = PathBuf::new();
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&hashed).expect("config serializes"));
        h.update(&scene);
        self.config_hash = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        Ok(self)
    }

    pub fn settings(&self) -> SolverSettings {
        let s = &self.config.solver;
        SolverSettings {
            cd: CdParams { max_iters: s.max_iters, tol: s.tol, refresh_every: s.refresh_every, trace: false },
            fusion: FusionParams {
                lambda: self.config.fusion.lambda,
                mu: self.config.fusion.mu,
                max_iters: s.max_iters,
                tol: s.tol,
                refresh_every: s.refresh_every,
                dense_gram_cap: s.dense_gram_cap,
                trace: false,
            },
            nnls: NnlsParams { tol: s.nnls_tol, cap: s.nnls_cap },
            dense_gram_cap: s.dense_gram_cap,
            merge_radius: self.config.eval.merge_radius,
            miss_penalty: self.config.eval.miss_penalty,
        }
    }

    /// Metadata lines written at the top of every output file.
    pub fn metadata(&self, command: &str) -> Vec<(String, String)> {
        vec![
            ("tool".into(), "cmfuot".into()),
            ("version".into(), env!("CARGO_PKG_VERSION").into()),
            ("command".into(), command.into()),
            ("config_hash".into(), self.config_hash.clone()),
            ("seed".into(), self.config.seed.to_string()),
        ]
    }
}
