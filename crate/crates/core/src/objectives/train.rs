//! Doubly stochastic ELBO ascent.
//!
//! Step `s` draws its minibatch from the epoch permutation that covers it and
//! its noise from the `(TRAIN_NOISE, s)` substream of the run seed, so any
//! prefix of a run can be resumed from a snapshot and continue bit-exactly.

use thiserror::Error;

use crate::error::{Error, Result};
use crate::optim::{early_stop_check, OptimizerConfig, OptimizerKind, OptimizerState, DEFAULT_PATIENCE};
use crate::rng::{tags, Rng};
use crate::tensor::Tensor;

use super::estimators::{
    anneal_beta, draw_noise, elbo_estimate_with_noise, objective_and_gradient, KlMode, ELBO_DIVERGENCE_LIMIT,
};
use super::model::Vae;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    /// Free-bits floor `λ`; `None` trains on the sampled ELBO.
    pub free_bits: Option<f64>,
    /// Number of contiguous free-bits groups `K`.
    pub free_bits_groups: usize,
    pub anneal_start: u64,
    /// Length of the linear KL warm-up; 0 disables annealing.
    pub anneal_steps: u64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Holdout evaluation period in steps; 0 disables evaluation.
    pub eval_every: u64,
    pub patience: usize,
    pub holdout_fraction: f64,
    /// Importance samples per datapoint for likelihood evaluation.
    pub iwae_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            steps: 1000,
            free_bits: None,
            free_bits_groups: 1,
            anneal_start: 0,
            anneal_steps: 0,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            eval_every: 0,
            patience: DEFAULT_PATIENCE,
            holdout_fraction: 0.1,
            iwae_samples: 100,
        }
    }
}

fn parse<T: std::str::FromStr>(v: &str, what: &str) -> std::result::Result<T, String> {
    v.trim().parse().map_err(|_| format!("`{v}` is not a valid {what}"))
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "batch_size",
        "steps",
        "free_bits",
        "free_bits_groups",
        "anneal_start",
        "anneal_steps",
        "optimizer",
        "lr",
        "beta1",
        "beta2",
        "adam_eps",
        "seed",
        "eval_every",
        "patience",
        "holdout_fraction",
        "iwae_samples",
    ];

    /// Applies one `key=value` setting; `Ok(false)` for foreign keys.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        let v = value.trim();
        match key {
            "batch_size" => {
                self.batch_size = parse(v, "integer")?;
                if self.batch_size == 0 {
                    return Err("must be at least 1".into());
                }
            }
            "steps" => self.steps = parse(v, "integer")?,
            "free_bits" => {
                self.free_bits = if v == "none" || v == "off" {
                    None
                } else {
                    let l: f64 = parse(v, "number")?;
                    if !(l >= 0.0 && l.is_finite()) {
                        return Err(format!("must be a non-negative number, got {v}"));
                    }
                    Some(l)
                }
            }
            "free_bits_groups" => {
                self.free_bits_groups = parse(v, "integer")?;
                if self.free_bits_groups == 0 {
                    return Err("must be at least 1".into());
                }
            }
            "anneal_start" => self.anneal_start = parse(v, "integer")?,
            "anneal_steps" => self.anneal_steps = parse(v, "integer")?,
            "optimizer" => {
                self.optimizer.kind = OptimizerKind::parse(v).ok_or_else(|| format!("unknown optimizer `{v}`"))?
            }
            "lr" | "beta1" | "beta2" | "adam_eps" => {
                let x: f64 = parse(v, "number")?;
                let ok = match key {
                    "lr" | "adam_eps" => x > 0.0 && x.is_finite(),
                    _ => (0.0..1.0).contains(&x),
                };
                if !ok {
                    return Err(format!("{v} is out of range"));
                }
                match key {
                    "lr" => self.optimizer.lr = x,
                    "beta1" => self.optimizer.beta1 = x,
                    "beta2" => self.optimizer.beta2 = x,
                    _ => self.optimizer.eps = x,
                }
            }
            "seed" => self.seed = parse(v, "integer")?,
            "eval_every" => self.eval_every = parse(v, "integer")?,
            "patience" => self.patience = parse(v, "integer")?,
            "holdout_fraction" => {
                let f: f64 = parse(v, "number")?;
                if !(0.0..1.0).contains(&f) {
                    return Err(format!("must lie in [0, 1), got {v}"));
                }
                self.holdout_fraction = f;
            }
            "iwae_samples" => {
                self.iwae_samples = parse(v, "integer")?;
                if self.iwae_samples == 0 {
                    return Err("must be at least 1".into());
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let o = &self.optimizer;
        [
            ("batch_size", self.batch_size.to_string()),
            ("steps", self.steps.to_string()),
            ("free_bits", self.free_bits.map_or("none".into(), |l| format!("{l:?}"))),
            ("free_bits_groups", self.free_bits_groups.to_string()),
            ("anneal_start", self.anneal_start.to_string()),
            ("anneal_steps", self.anneal_steps.to_string()),
            ("optimizer", o.kind.as_str().into()),
            ("lr", format!("{:?}", o.lr)),
            ("beta1", format!("{:?}", o.beta1)),
            ("beta2", format!("{:?}", o.beta2)),
            ("adam_eps", format!("{:?}", o.eps)),
            ("seed", self.seed.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("patience", self.patience.to_string()),
            ("holdout_fraction", format!("{:?}", self.holdout_fraction)),
            ("iwae_samples", self.iwae_samples.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn kl_mode(&self) -> KlMode {
        match self.free_bits {
            None => KlMode::Sampled,
            Some(lambda) => KlMode::FreeBits {
                lambda,
                groups: self.free_bits_groups,
            },
        }
    }

    /// Checks the settings against a model's latent dimension.
    pub fn validate(&self, latent_dim: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.free_bits.is_some() {
            let k = self.free_bits_groups;
            if k == 0 || k > latent_dim || latent_dim % k != 0 {
                return Err(Error::Config(format!(
                    "free_bits_groups={k} must divide latent_dim={latent_dim}"
                )));
            }
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }
}

/// One row of the metrics log; values come from the minibatch before the
/// update of that step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub elbo: f64,
    pub logpx: f64,
    pub logpz: f64,
    pub logqz: f64,
    /// Sampled `logqz − logpz`, or the summed group KLs under free bits.
    pub kl_est: f64,
    pub grad_norm: f64,
    pub beta: f64,
}

/// Everything besides the parameters needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Steps completed.
    pub step: u64,
    pub optimizer: OptimizerState,
    pub holdout_history: Vec<f64>,
    pub stopped_early: bool,
}

impl TrainState {
    pub fn fresh(vae: &Vae, config: &TrainConfig) -> Self {
        TrainState {
            step: 0,
            optimizer: OptimizerState::new(config.optimizer, vae.params.values()),
            holdout_history: vec![],
            stopped_early: false,
        }
    }
}

/// Parameters and state at a step boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub params: Vec<Tensor>,
    pub state: TrainState,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<MetricsRow>,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at step {step}: {reason}")]
    Diverged {
        step: u64,
        reason: String,
        /// State before the failing step.
        last_good: Box<Snapshot>,
        /// Rows logged before the failure.
        metrics: Vec<MetricsRow>,
    },
    #[error(transparent)]
    Model(#[from] Error),
}

/// Epoch permutations, generated on demand.
struct Shuffler {
    rng: Rng,
    n: usize,
    epoch: Option<(u64, Vec<usize>)>,
}

impl Shuffler {
    fn index(&mut self, k: u64) -> usize {
        let e = k / self.n as u64;
        if self.epoch.as_ref().map(|(i, _)| *i) != Some(e) {
            let perm = self.rng.substream(tags::SHUFFLE, e).permutation(self.n);
            self.epoch = Some((e, perm));
        }
        self.epoch.as_ref().expect("set above").1[(k % self.n as u64) as usize]
    }
}

fn gather_rows(data: &Tensor, idx: &[usize]) -> Tensor {
    let d = data.cols();
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend_from_slice(data.row_slice(i));
    }
    Tensor::new(vec![idx.len(), d], out).expect("row lengths agree")
}

/// Mean single-sample ELBO on the holdout rows, with noise tied to `step`.
pub fn holdout_elbo(vae: &Vae, holdout: &Tensor, seed: u64, step: u64) -> Result<f64> {
    let mut rng = Rng::new(seed).substream(tags::HOLDOUT_NOISE, step);
    let eps = draw_noise(vae, holdout.rows(), &mut rng);
    Ok(elbo_estimate_with_noise(vae, holdout, &eps)?.elbo)
}

/// Runs (or resumes) AEVB training in place on `vae.params`.
pub fn train_aevb(
    vae: &mut Vae,
    data: &Tensor,
    holdout: Option<&Tensor>,
    config: &TrainConfig,
    resume: Option<TrainState>,
) -> std::result::Result<TrainOutcome, TrainError> {
    config.validate(vae.latent_dim())?;
    vae.check_input(data)?;
    if data.rows() == 0 {
        return Err(Error::InvalidArgument("training set is empty".into()).into());
    }
    let holdout = holdout.filter(|h| h.rows() > 0);
    if let Some(h) = holdout {
        vae.check_input(h)?;
    }
    let mut state = resume.unwrap_or_else(|| TrainState::fresh(vae, config));
    let master = Rng::new(config.seed);
    let mut shuffler = Shuffler {
        rng: master.clone(),
        n: data.rows(),
        epoch: None,
    };
    let mode = config.kl_mode();
    let mb = config.batch_size as u64;
    let mut metrics = Vec::new();

    while state.step < config.steps && !state.stopped_early {
        let s = state.step;
        let idx: Vec<usize> = (0..mb).map(|j| shuffler.index(s * mb + j)).collect();
        let x = gather_rows(data, &idx);
        let mut noise_rng = master.substream(tags::TRAIN_NOISE, s);
        let eps = draw_noise(vae, x.rows(), &mut noise_rng);
        let beta = anneal_beta(s, config.anneal_start, config.anneal_steps);

        let diverged = |reason: String, state: &TrainState, vae: &Vae, metrics: &Vec<MetricsRow>| TrainError::Diverged {
            step: s,
            reason,
            last_good: Box::new(Snapshot {
                params: vae.params.values().to_vec(),
                state: state.clone(),
            }),
            metrics: metrics.clone(),
        };
        let out = match objective_and_gradient(vae, &x, &eps, mode, beta) {
            Ok(o) => o,
            Err(e @ (Error::NonFiniteElbo { .. } | Error::NonFinite { .. })) => {
                return Err(diverged(e.to_string(), &state, vae, &metrics))
            }
            Err(e) => return Err(e.into()),
        };
        let grad_sq: f64 = out.grads.iter().map(Tensor::l2_norm_sq).sum();
        if !out.value.is_finite() || !grad_sq.is_finite() {
            return Err(diverged("non-finite objective or gradient".into(), &state, vae, &metrics));
        }
        if out.report.elbo.abs() > ELBO_DIVERGENCE_LIMIT {
            return Err(diverged(format!("|ELBO| = {:e} exceeds the limit", out.report.elbo.abs()), &state, vae, &metrics));
        }
        let r = &out.report;
        metrics.push(MetricsRow {
            step: s,
            elbo: r.elbo,
            logpx: r.logpx_term,
            logpz: r.logpz_term,
            logqz: r.logqz_term,
            kl_est: match mode {
                KlMode::Sampled => r.kl_sampled(),
                KlMode::FreeBits { .. } => r.kl_groups.iter().sum(),
            },
            grad_norm: grad_sq.sqrt(),
            beta,
        });
        state.optimizer.step(vae.params.values_mut(), &out.grads)?;
        state.step = s + 1;

        if let (Some(h), true) = (holdout, config.eval_every > 0) {
            if state.step % config.eval_every == 0 {
                let v = holdout_elbo(vae, h, config.seed, state.step)?;
                state.holdout_history.push(v);
                if early_stop_check(&state.holdout_history, config.patience) {
                    state.stopped_early = true;
                }
            }
        }
    }
    Ok(TrainOutcome { state, metrics })
}
