//! Flat `key=value` run configuration.
//!
//! Settings are applied in order: config file lines first, then command-line
//! flags, so flags win. Every key belongs to the model, the training loop or
//! the driver itself; anything else is rejected with its origin.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use latentflow::objectives::{ModelSpec, TrainConfig};

use crate::error::{io_err, CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Train,
    EvalElbo,
    EstimateLoglik,
    Sample,
    Gradcheck,
    CompareEstimators,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Toy4,
    Lingauss,
    Idx(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binarize {
    Threshold,
    Stochastic,
    Off,
}

/// Where a setting came from, for error messages.
#[derive(Debug, Clone, PartialEq)]
pub enum Origin {
    Line { file: PathBuf, line: usize },
    Flag(String),
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Line { file, line } => write!(f, "{}:{line}", file.display()),
            Origin::Flag(name) => write!(f, "{name}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Setting {
    pub key: String,
    pub value: String,
    pub origin: Origin,
}

/// Keys owned by the driver rather than the library types.
pub const DRIVER_KEYS: &[&str] = &[
    "dataset",
    "data_seed",
    "binarize",
    "lingauss_n",
    "lingauss_sigma",
    "out",
    "resume",
    "checkpoint",
    "samples",
];

#[derive(Debug, Clone)]
pub struct RunSpec {
    pub command: Command,
    pub dataset: DatasetSource,
    pub data_seed: u64,
    pub binarize: Binarize,
    pub lingauss_n: usize,
    pub lingauss_sigma: f64,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Sample count for `sample` and `compare-estimators`; `None` picks the
    /// command default.
    pub samples: Option<usize>,
    pub json: bool,
    /// Every setting in application order.
    pub settings: Vec<Setting>,
    /// Keys set explicitly by file or flag.
    pub explicit: BTreeSet<String>,
}

impl RunSpec {
    pub fn new(command: Command) -> Self {
        RunSpec {
            command,
            dataset: DatasetSource::Toy4,
            data_seed: 0,
            binarize: Binarize::Threshold,
            lingauss_n: 1000,
            lingauss_sigma: 0.5,
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            out: PathBuf::from("latentflow-out"),
            resume: None,
            checkpoint: None,
            samples: None,
            json: false,
            settings: vec![],
            explicit: BTreeSet::new(),
        }
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    /// Applies one setting, checking the key and the value range.
    pub fn apply(&mut self, s: Setting) -> CliResult<()> {
        let bad = |msg: String| CliError::Validation(format!("{}: `{}`: {msg}", s.origin, s.key));
        let owned = if DRIVER_KEYS.contains(&s.key.as_str()) {
            self.set_driver(&s.key, s.value.trim()).map_err(bad)?;
            true
        } else {
            self.model.set(&s.key, &s.value).map_err(bad)? || self.train.set(&s.key, &s.value).map_err(bad)?
        };
        if !owned {
            return Err(CliError::Validation(format!("{}: unknown key `{}`", s.origin, s.key)));
        }
        let canonical = match s.key.as_str() {
            "planar_steps" | "iaf_steps" => "flow_steps".to_string(),
            k => k.to_string(),
        };
        self.explicit.insert(canonical);
        self.settings.push(s);
        Ok(())
    }

    fn set_driver(&mut self, key: &str, v: &str) -> Result<(), String> {
        let num = |what: &str| format!("`{v}` is not a valid {what}");
        match key {
            "dataset" => {
                self.dataset = match v {
                    "toy4" => DatasetSource::Toy4,
                    "lingauss" => DatasetSource::Lingauss,
                    _ => match v.strip_prefix("idx:") {
                        Some(p) if !p.is_empty() => DatasetSource::Idx(PathBuf::from(p)),
                        _ => return Err(format!("expected toy4, lingauss or idx:PATH, got `{v}`")),
                    },
                }
            }
            "data_seed" => self.data_seed = v.parse().map_err(|_| num("integer"))?,
            "binarize" => {
                self.binarize = match v {
                    "threshold" => Binarize::Threshold,
                    "stochastic" => Binarize::Stochastic,
                    "off" | "none" => Binarize::Off,
                    _ => return Err(format!("expected threshold, stochastic or off, got `{v}`")),
                }
            }
            "lingauss_n" => {
                self.lingauss_n = v.parse().map_err(|_| num("integer"))?;
                if self.lingauss_n == 0 {
                    return Err("must be at least 1".into());
                }
            }
            "lingauss_sigma" => {
                let s: f64 = v.parse().map_err(|_| num("number"))?;
                if !(s > 0.0 && s.is_finite()) {
                    return Err(format!("must be positive, got {v}"));
                }
                self.lingauss_sigma = s;
            }
            "out" => self.out = PathBuf::from(v),
            "resume" => self.resume = Some(PathBuf::from(v)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            "samples" => {
                let n: usize = v.parse().map_err(|_| num("integer"))?;
                if n < 2 {
                    return Err("must be at least 2".into());
                }
                self.samples = Some(n);
            }
            _ => unreachable!("listed in DRIVER_KEYS"),
        }
        Ok(())
    }

    /// Reads `key=value` pairs from a file; several whitespace-separated pairs
    /// may share a line and `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> CliResult<()> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            for token in line.split_whitespace() {
                let origin = Origin::Line {
                    file: path.to_path_buf(),
                    line: i + 1,
                };
                let Some((k, v)) = token.split_once('=') else {
                    return Err(CliError::Validation(format!("{origin}: expected key=value, got `{token}`")));
                };
                self.apply(Setting {
                    key: k.trim().to_string(),
                    value: v.trim().to_string(),
                    origin,
                })?;
            }
        }
        Ok(())
    }

    /// Defaults that depend on other settings, and checks on referenced
    /// paths.
    pub fn finish(&mut self) -> CliResult<()> {
        if !self.is_explicit("init_seed") {
            self.model.init_seed = self.train.seed;
        }
        if self.dataset == DatasetSource::Lingauss {
            if !self.is_explicit("likelihood") {
                self.model.likelihood = latentflow::objectives::LikelihoodFamily::Gaussian;
            }
            if !self.is_explicit("obs_sigma") {
                self.model.obs_sigma = self.lingauss_sigma;
            }
            if !self.is_explicit("data_dim") {
                self.model.data_dim = 5;
            }
        }
        let mut paths: Vec<&Path> = vec![];
        if let DatasetSource::Idx(p) = &self.dataset {
            paths.push(p);
        }
        paths.extend(self.resume.as_deref());
        paths.extend(self.checkpoint.as_deref());
        for p in paths {
            if !p.is_file() {
                return Err(io_err(p, "no such file"));
            }
        }
        Ok(())
    }

    /// Re-applies the explicit model settings on top of `base` (typically a
    /// spec read from a checkpoint) and fails if any of them would change it.
    pub fn check_model_overrides(&self, base: &ModelSpec) -> CliResult<()> {
        let mut probe = base.clone();
        for s in &self.settings {
            if ModelSpec::KEYS.contains(&s.key.as_str()) && s.key != "init_seed" {
                probe.set(&s.key, &s.value).map_err(CliError::Validation)?;
                if probe != *base {
                    return Err(CliError::Validation(format!(
                        "{}: `{}` differs from the model stored in the checkpoint",
                        s.origin, s.key
                    )));
                }
            }
        }
        Ok(())
    }

    /// Applies the explicit training settings on top of `base`.
    pub fn train_overrides(&self, base: &TrainConfig) -> CliResult<TrainConfig> {
        let mut cfg = base.clone();
        for s in &self.settings {
            if TrainConfig::KEYS.contains(&s.key.as_str()) {
                cfg.set(&s.key, &s.value).map_err(CliError::Validation)?;
            }
        }
        Ok(cfg)
    }
}
