//! ELBO estimators, gradient estimators and importance-weighted bounds.
//!
//! All estimators take a batch `x` (`B×D_x`) and base noise `eps`
//! (`B×D_z`); the `rng` variants just draw `eps` first. Reported terms are
//! minibatch means.

use crate::distributions::{diag_kl_standard_var, diag_logprob_var, fullcov_logprob_at_var, HALF_LN_2PI};
use crate::error::{Error, Result};
use crate::flows::PosteriorKind;
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{cholesky, forward_substitute, log_sum_exp, Tensor};

use super::model::{Prior, Vae};

/// Divergence threshold on the magnitude of the ELBO.
pub const ELBO_DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct ElboReport {
    pub logpx_term: f64,
    pub logpz_term: f64,
    pub logqz_term: f64,
    /// `logpx_term + (logpz_term − logqz_term)`
    pub elbo: f64,
    /// Minibatch-mean KL per latent group: analytic per dimension when the
    /// posterior allows it (or per free-bits group), otherwise one sampled
    /// estimate `logqz − logpz`.
    pub kl_groups: Vec<f64>,
}

impl ElboReport {
    fn new(logpx: f64, logpz: f64, logqz: f64, kl_groups: Vec<f64>) -> Result<Self> {
        let elbo = logpx + (logpz - logqz);
        if !elbo.is_finite() {
            return Err(Error::NonFiniteElbo {
                logpx,
                logpz,
                logqz,
            });
        }
        Ok(ElboReport {
            logpx_term: logpx,
            logpz_term: logpz,
            logqz_term: logqz,
            elbo,
            kl_groups,
        })
    }

    /// Sampled `logqz − logpz`.
    pub fn kl_sampled(&self) -> f64 {
        self.logqz_term - self.logpz_term
    }
}

/// How the KL part of the objective is formed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KlMode {
    /// Single-sample `logpz − logqz`.
    Sampled,
    /// Analytic per-group KL clamped from below at `lambda`.
    FreeBits { lambda: f64, groups: usize },
}

/// Objective value and its gradient with respect to every parameter.
#[derive(Debug, Clone)]
pub struct ObjectiveOutput {
    pub value: f64,
    pub report: ElboReport,
    pub grads: Vec<Tensor>,
}

/// `β = clamp((step − start) / steps, 0, 1)`; `steps = 0` means no annealing.
pub fn anneal_beta(step: u64, start: u64, steps: u64) -> f64 {
    if steps == 0 {
        return 1.0;
    }
    (step.saturating_sub(start) as f64 / steps as f64).min(1.0)
}

/// `Σ_j max(λ, k_j)`
pub fn free_bits_penalty(group_kls: &[f64], lambda: f64) -> f64 {
    group_kls.iter().map(|&k| k.max(lambda)).sum()
}

pub fn draw_noise(vae: &Vae, rows: usize, rng: &mut Rng) -> Tensor {
    let mut eps = Tensor::zeros(&[rows, vae.latent_dim()]);
    rng.fill_normal(eps.data_mut());
    eps
}

fn check_noise(vae: &Vae, x: &Tensor, eps: &Tensor) -> Result<()> {
    vae.check_input(x)?;
    if eps.shape() != [x.rows(), vae.latent_dim()] {
        return Err(Error::InvalidArgument(format!(
            "noise must be {}x{}, got {:?}",
            x.rows(),
            vae.latent_dim(),
            eps.shape()
        )));
    }
    if x.rows() == 0 {
        return Err(Error::InvalidArgument("empty minibatch".into()));
    }
    Ok(())
}

fn group_matrix(d: usize, groups: usize) -> Result<Tensor> {
    if groups == 0 || groups > d || d % groups != 0 {
        return Err(Error::Config(format!("{groups} free-bits groups do not evenly divide {d} latent dimensions")));
    }
    let size = d / groups;
    let mut g = Tensor::zeros(&[d, groups]);
    for i in 0..d {
        g.set2(i, i / size, 1.0);
    }
    Ok(g)
}

fn analytic_kl_available(vae: &Vae) -> bool {
    vae.post.spec.has_analytic_kl() && matches!(vae.gen.prior, Prior::StandardNormal { .. })
}

/// Minibatch-mean analytic KL summed within contiguous groups, `1×K`.
fn group_kl_var(t: &mut Tape, vae: &Vae, mu: Var, log_sigma: Var, groups: usize) -> Result<Var> {
    let g = t.constant(group_matrix(vae.latent_dim(), groups)?);
    let per_dim = diag_kl_standard_var(t, mu, log_sigma)?;
    let per_group = t.matmul(per_dim, g)?;
    let summed = t.sum_axis(per_group, 0)?;
    let b = t.value(mu).rows() as f64;
    Ok(t.scale(summed, 1.0 / b)?)
}

/// Builds the scalar objective to maximize. Returns it together with the
/// term report.
pub fn build_objective(
    vae: &Vae,
    t: &mut Tape,
    p: &[Var],
    x: &Tensor,
    eps: &Tensor,
    mode: KlMode,
    beta: f64,
) -> Result<(Var, ElboReport)> {
    check_noise(vae, x, eps)?;
    let xv = t.constant(x.clone());
    let ev = t.constant(eps.clone());
    let terms = vae.terms_var(t, p, xv, ev)?;
    let mean_px = t.mean(terms.logpx)?;
    let mean_pz = t.mean(terms.logpz)?;
    let mean_qz = t.mean(terms.logqz)?;
    let (logpx, logpz, logqz) = (t.scalar_value(mean_px), t.scalar_value(mean_pz), t.scalar_value(mean_qz));

    match mode {
        KlMode::Sampled => {
            let kl_groups = if analytic_kl_available(vae) {
                let d = vae.latent_dim();
                let kl = group_kl_var(t, vae, terms.flow.enc.mu, terms.flow.enc.log_sigma, d)?;
                t.value(kl).data().to_vec()
            } else {
                vec![logqz - logpz]
            };
            let report = ElboReport::new(logpx, logpz, logqz, kl_groups)?;
            let gap = t.sub(terms.logpz, terms.logqz)?;
            let weighted = if beta == 1.0 { gap } else { t.scale(gap, beta)? };
            let rows = t.add(terms.logpx, weighted)?;
            Ok((t.mean(rows)?, report))
        }
        KlMode::FreeBits { lambda, groups } => {
            if !analytic_kl_available(vae) {
                return Err(Error::Config(format!(
                    "free bits needs an analytic KL: diag posterior with a standard-normal prior, not `{}`",
                    vae.post.spec.kind.name()
                )));
            }
            if !(lambda >= 0.0) {
                return Err(Error::Config(format!("free-bits lambda must be non-negative, got {lambda}")));
            }
            let kl = group_kl_var(t, vae, terms.flow.enc.mu, terms.flow.enc.log_sigma, groups)?;
            let kl_groups = t.value(kl).data().to_vec();
            let report = ElboReport::new(logpx, logpz, logqz, kl_groups.clone())?;
            let mut penalty: Option<Var> = None;
            for (j, &k) in kl_groups.iter().enumerate() {
                let term = if k > lambda {
                    t.slice(kl, 1, j, 1)?
                } else {
                    t.constant(Tensor::full(&[1, 1], lambda))
                };
                penalty = Some(match penalty {
                    None => term,
                    Some(acc) => t.add(acc, term)?,
                });
            }
            let penalty = t.sum(penalty.expect("at least one group"))?;
            let weighted = if beta == 1.0 { penalty } else { t.scale(penalty, beta)? };
            Ok((t.sub(mean_px, weighted)?, report))
        }
    }
}

/// Objective value and gradients for given noise.
pub fn objective_and_gradient(vae: &Vae, x: &Tensor, eps: &Tensor, mode: KlMode, beta: f64) -> Result<ObjectiveOutput> {
    let mut t = Tape::new();
    let p = vae.params.bind(&mut t, true);
    let (obj, report) = build_objective(vae, &mut t, &p, x, eps, mode, beta)?;
    let g = t.backward(obj)?;
    Ok(ObjectiveOutput {
        value: t.scalar_value(obj),
        report,
        grads: p.iter().map(|v| g.wrt(*v)).collect(),
    })
}

/// Finite-difference check of the objective gradient wrt every parameter,
/// with frozen noise.
pub fn objective_grad_check(
    vae: &Vae,
    x: &Tensor,
    eps: &Tensor,
    mode: KlMode,
    beta: f64,
    fd_step: f64,
) -> Result<GradCheckReport> {
    grad_check(
        |t, p| Ok(build_objective(vae, t, p, x, eps, mode, beta)?.0),
        vae.params.values(),
        fd_step,
    )
}

/// Objective value without gradients.
pub fn objective_value(vae: &Vae, x: &Tensor, eps: &Tensor, mode: KlMode, beta: f64) -> Result<(f64, ElboReport)> {
    let mut t = Tape::new();
    let p = vae.params.bind(&mut t, false);
    let (obj, report) = build_objective(vae, &mut t, &p, x, eps, mode, beta)?;
    Ok((t.scalar_value(obj), report))
}

/// Single-sample ELBO per row of `x` for given noise.
pub fn elbo_samples(vae: &Vae, x: &Tensor, eps: &Tensor) -> Result<Vec<f64>> {
    check_noise(vae, x, eps)?;
    let mut t = Tape::new();
    let p = vae.params.bind(&mut t, false);
    let xv = t.constant(x.clone());
    let ev = t.constant(eps.clone());
    let terms = vae.terms_var(&mut t, &p, xv, ev)?;
    let gap = t.sub(terms.logpz, terms.logqz)?;
    let rows = t.add(terms.logpx, gap)?;
    Ok(t.value(rows).data().to_vec())
}

pub fn elbo_estimate_with_noise(vae: &Vae, x: &Tensor, eps: &Tensor) -> Result<ElboReport> {
    Ok(objective_value(vae, x, eps, KlMode::Sampled, 1.0)?.1)
}

/// Single-sample ELBO estimate averaged over the rows of `x`.
pub fn elbo_estimate(vae: &Vae, x: &Tensor, rng: &mut Rng) -> Result<ElboReport> {
    let eps = draw_noise(vae, x.rows(), rng);
    elbo_estimate_with_noise(vae, x, &eps)
}

/// Pathwise gradient of the minibatch-mean ELBO.
pub fn elbo_gradient(vae: &Vae, x: &Tensor, rng: &mut Rng) -> Result<(ElboReport, Vec<Tensor>)> {
    let eps = draw_noise(vae, x.rows(), rng);
    let out = objective_and_gradient(vae, x, &eps, KlMode::Sampled, 1.0)?;
    Ok((out.report, out.grads))
}

/// `logpx + β (logpz − logqz)`, minibatch mean.
pub fn kl_annealed_elbo(vae: &Vae, x: &Tensor, eps: &Tensor, beta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("beta must lie in [0, 1], got {beta}")));
    }
    Ok(objective_value(vae, x, eps, KlMode::Sampled, beta)?.0)
}

/// Reconstruction term minus `Σ_j max(λ, KL_j)`, with group KLs averaged
/// over the minibatch.
pub fn free_bits_objective(vae: &Vae, x: &Tensor, eps: &Tensor, lambda: f64, groups: usize) -> Result<f64> {
    Ok(objective_value(vae, x, eps, KlMode::FreeBits { lambda, groups }, 1.0)?.0)
}

/// Minibatch-mean `logpx − KL(q ‖ p)` with the KL in closed form.
pub fn analytic_kl_elbo(vae: &Vae, x: &Tensor, eps: &Tensor) -> Result<f64> {
    if !analytic_kl_available(vae) {
        return Err(Error::Config("analytic KL needs a diag posterior and a standard-normal prior".into()));
    }
    check_noise(vae, x, eps)?;
    let mut t = Tape::new();
    let p = vae.params.bind(&mut t, false);
    let xv = t.constant(x.clone());
    let ev = t.constant(eps.clone());
    let terms = vae.terms_var(&mut t, &p, xv, ev)?;
    let recon = t.mean(terms.logpx)?;
    let kl = diag_kl_standard_var(&mut t, terms.flow.enc.mu, terms.flow.enc.log_sigma)?;
    let kl_rows = t.sum_axis(kl, 1)?;
    let kl_mean = t.mean(kl_rows)?;
    Ok(t.scalar_value(recon) - t.scalar_value(kl_mean))
}

/// Score-function (REINFORCE) estimate of the inference-parameter gradient:
/// mean over rows of `f(z) ∇_φ log q_φ(z|x)` with
/// `f = log p(x, z) − log q(z|x)` and `z` held fixed. Entries for
/// generative parameters are zero.
pub fn score_function_gradient_with_noise(vae: &Vae, x: &Tensor, eps: &Tensor) -> Result<Vec<Tensor>> {
    check_noise(vae, x, eps)?;
    let (z, f) = {
        let mut t = Tape::new();
        let p = vae.params.bind(&mut t, false);
        let xv = t.constant(x.clone());
        let ev = t.constant(eps.clone());
        let terms = vae.terms_var(&mut t, &p, xv, ev)?;
        let gap = t.sub(terms.logpz, terms.logqz)?;
        let f = t.add(terms.logpx, gap)?;
        (t.value(terms.flow.z).clone(), t.value(f).clone())
    };
    let mut t = Tape::new();
    let p = vae.params.bind(&mut t, true);
    let xv = t.constant(x.clone());
    let zv = t.constant(z);
    let enc = vae.post.encoder.forward(&mut t, &p, xv)?;
    let logq = match (&vae.post.spec.kind, enc.l_raw) {
        (PosteriorKind::DiagGaussian, _) => diag_logprob_var(&mut t, zv, enc.mu, enc.log_sigma)?,
        (PosteriorKind::FullCov, Some(l_raw)) => fullcov_logprob_at_var(&mut t, zv, enc.mu, enc.log_sigma, l_raw)?,
        (kind, _) => {
            return Err(Error::Config(format!(
                "score-function gradients need a closed-form density at arbitrary z; `{}` has none",
                kind.name()
            )))
        }
    };
    let fv = t.constant(f);
    let weighted = t.mul(fv, logq)?;
    let loss = t.mean(weighted)?;
    let g = t.backward(loss)?;
    Ok(p.iter().map(|v| g.wrt(*v)).collect())
}

pub fn score_function_gradient(vae: &Vae, x: &Tensor, rng: &mut Rng) -> Result<Vec<Tensor>> {
    let eps = draw_noise(vae, x.rows(), rng);
    score_function_gradient_with_noise(vae, x, &eps)
}

/// `log (1/L) Σ_l p(x, z_l) / q(z_l|x)` for a single datapoint `x` (`1×D_x`)
/// and `L×D_z` noise.
pub fn iwae_with_noise(vae: &Vae, x: &Tensor, eps: &Tensor) -> Result<f64> {
    vae.check_input(x)?;
    if x.rows() != 1 {
        return Err(Error::InvalidArgument("importance-weighted estimate takes one datapoint".into()));
    }
    let l = eps.rows();
    if l == 0 {
        return Err(Error::InvalidArgument("L must be at least 1".into()));
    }
    let repeated = Tensor::new(vec![l, x.cols()], x.data().repeat(l))?;
    let log_w = elbo_samples(vae, &repeated, eps)?;
    let est = log_sum_exp(&log_w) - (l as f64).ln();
    if !est.is_finite() {
        return Err(Error::NonFinite {
            what: "importance-weighted estimate".into(),
        });
    }
    Ok(est)
}

pub fn iwae_loglik_estimate(vae: &Vae, x: &Tensor, l: usize, rng: &mut Rng) -> Result<f64> {
    if l == 0 {
        return Err(Error::InvalidArgument("L must be at least 1".into()));
    }
    let eps = draw_noise(vae, l, rng);
    iwae_with_noise(vae, x, &eps)
}

/// `log N(x; 0, W Wᵀ + σ² I)` for `W` of shape `D_x×D_z`.
pub fn exact_marginal_linear_gaussian(x: &[f64], w: &Tensor, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let d = x.len();
    if w.rank() != 2 || w.rows() != d {
        return Err(Error::InvalidArgument(format!("W must have {d} rows, got shape {:?}", w.shape())));
    }
    let mut cov = w.matmul(&w.transpose()?)?;
    for i in 0..d {
        let v = cov.get2(i, i) + sigma * sigma;
        cov.set2(i, i, v);
    }
    let l = cholesky(&cov)?;
    let y = forward_substitute(&l, x);
    let quad: f64 = y.iter().map(|v| v * v).sum();
    let log_det: f64 = (0..d).map(|i| l.get2(i, i).ln()).sum();
    Ok(-0.5 * quad - log_det - d as f64 * HALF_LN_2PI)
}
