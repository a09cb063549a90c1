//! Log-densities and reparameterized samplers.
//!
//! The `*_var` functions build differentiable graphs over batches (one row per
//! datapoint, results as `B×1` columns). The value-level types wrap them for a
//! single datapoint so both paths share one implementation.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `½ ln(2π)`
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;
pub const LOG_SIGMA_MIN: f64 = -7.0;
pub const LOG_SIGMA_MAX: f64 = 7.0;
/// Bernoulli probabilities are clamped to `[P_EPS, 1 - P_EPS]` before `log`.
pub const P_EPS: f64 = 1e-7;

/// Row-wise `Σ_i log N(eps_i; 0, 1)`.
pub fn std_normal_logprob_var(t: &mut Tape, eps: Var) -> Result<Var> {
    let sq = t.square(eps)?;
    let half = t.scale(sq, -0.5)?;
    let shifted = t.add_const(half, -HALF_LN_2PI)?;
    Ok(t.sum_axis(shifted, 1)?)
}

/// Row-wise `Σ_i log N(z_i; mu_i, exp(log_sigma_i)²)`.
pub fn diag_logprob_var(t: &mut Tape, z: Var, mu: Var, log_sigma: Var) -> Result<Var> {
    let diff = t.sub(z, mu)?;
    let neg_ls = t.neg(log_sigma)?;
    let inv_sigma = t.exp(neg_ls)?;
    let std = t.mul(diff, inv_sigma)?;
    let sq = t.square(std)?;
    let half = t.scale(sq, -0.5)?;
    let a = t.sub(half, log_sigma)?;
    let b = t.add_const(a, -HALF_LN_2PI)?;
    Ok(t.sum_axis(b, 1)?)
}

/// `z = mu + exp(log_sigma) ⊙ eps`.
pub fn reparam_diag_var(t: &mut Tape, mu: Var, log_sigma: Var, eps: Var) -> Result<Var> {
    let sigma = t.exp(log_sigma)?;
    let scaled = t.mul(sigma, eps)?;
    Ok(t.add(mu, scaled)?)
}

/// Per-dimension `KL(N(mu, σ²) ‖ N(0, 1)) = ½(mu² + σ² − 1 − 2 log σ)`, shape `B×D`.
pub fn diag_kl_standard_var(t: &mut Tape, mu: Var, log_sigma: Var) -> Result<Var> {
    let mu2 = t.square(mu)?;
    let two_ls = t.scale(log_sigma, 2.0)?;
    let var = t.exp(two_ls)?;
    let a = t.add(mu2, var)?;
    let b = t.sub(a, two_ls)?;
    let c = t.add_const(b, -1.0)?;
    Ok(t.scale(c, 0.5)?)
}

fn lower_mask_constants(d: usize) -> (Tensor, Tensor, Tensor) {
    // column i*d + j of a flattened d×d matrix holds entry (i, j)
    let mut mask = Tensor::zeros(&[1, d * d]);
    let mut tile = Tensor::zeros(&[d, d * d]);
    let mut gather = Tensor::zeros(&[d * d, d]);
    for i in 0..d {
        for j in 0..d {
            let c = i * d + j;
            if j < i {
                mask.data_mut()[c] = 1.0;
            }
            tile.set2(j, c, 1.0);
            gather.set2(c, i, 1.0);
        }
    }
    (mask, tile, gather)
}

/// Full-covariance reparameterization with `L = L_mask ⊙ L_raw + diag(σ)`.
///
/// `l_raw` is `B×D²` (row-major flattening of each datapoint's `D×D` matrix).
/// Returns `(z, log q)` with `log q = log p(eps) − Σ log σ_i`.
pub fn fullcov_reparam_var(
    t: &mut Tape,
    mu: Var,
    log_sigma: Var,
    l_raw: Var,
    eps: Var,
) -> Result<(Var, Var)> {
    let d = t.value(mu).cols();
    let (mask, tile, gather) = lower_mask_constants(d);
    let mask = t.constant(mask);
    let tile = t.constant(tile);
    let gather = t.constant(gather);

    let diag_part = reparam_diag_var(t, mu, log_sigma, eps)?;
    let below = t.mul(l_raw, mask)?;
    let eps_tiled = t.matmul(eps, tile)?;
    let prod = t.mul(below, eps_tiled)?;
    let off_diag = t.matmul(prod, gather)?;
    let z = t.add(diag_part, off_diag)?;

    let base = std_normal_logprob_var(t, eps)?;
    let sum_ls = t.sum_axis(log_sigma, 1)?;
    let logq = t.sub(base, sum_ls)?;
    Ok((z, logq))
}

/// Row-wise log-density of a fixed `z` under the masked full-covariance
/// Gaussian, by forward substitution `eps_i = (z_i − mu_i − Σ_{j<i} L_ij eps_j) / σ_i`.
pub fn fullcov_logprob_at_var(t: &mut Tape, z: Var, mu: Var, log_sigma: Var, l_raw: Var) -> Result<Var> {
    let d = t.value(mu).cols();
    let neg_ls = t.neg(log_sigma)?;
    let inv_sigma = t.exp(neg_ls)?;
    let mut eps: Vec<Var> = Vec::with_capacity(d);
    for i in 0..d {
        let zi = t.slice(z, 1, i, 1)?;
        let mi = t.slice(mu, 1, i, 1)?;
        let mut r = t.sub(zi, mi)?;
        for (j, &ej) in eps.iter().enumerate() {
            let lij = t.slice(l_raw, 1, i * d + j, 1)?;
            let c = t.mul(lij, ej)?;
            r = t.sub(r, c)?;
        }
        let si = t.slice(inv_sigma, 1, i, 1)?;
        eps.push(t.mul(r, si)?);
    }
    let e = t.concat(&eps, 1)?;
    let base = std_normal_logprob_var(t, e)?;
    let sum_ls = t.sum_axis(log_sigma, 1)?;
    Ok(t.sub(base, sum_ls)?)
}

/// Row-wise Bernoulli log-mass of binary `x` under probabilities `p`.
pub fn bernoulli_logprob_var(t: &mut Tape, x: Var, p: Var) -> Result<Var> {
    let pc = t.clamp(p, P_EPS, 1.0 - P_EPS)?;
    let log_p = t.log(pc)?;
    let neg = t.neg(pc)?;
    let one_minus = t.add_const(neg, 1.0)?;
    let log_1mp = t.log(one_minus)?;
    let x_neg = t.neg(x)?;
    let one_minus_x = t.add_const(x_neg, 1.0)?;
    let a = t.mul(x, log_p)?;
    let b = t.mul(one_minus_x, log_1mp)?;
    let s = t.add(a, b)?;
    Ok(t.sum_axis(s, 1)?)
}

fn ensure_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::InvalidArgument(format!("{what}: expected length {want}, got {got}")));
    }
    Ok(())
}

fn as_row(v: &Tensor) -> Tensor {
    Tensor::row(v.data())
}

/// Factorized Gaussian `N(mu, diag(exp(log_sigma))²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mu: Tensor,
    pub log_sigma: Tensor,
}

impl DiagGaussian {
    pub fn new(mu: Tensor, log_sigma: Tensor) -> Result<Self> {
        ensure_len("log_sigma", log_sigma.len(), mu.len())?;
        if !log_sigma.all_finite() {
            return Err(Error::InvalidArgument("log_sigma must be finite".into()));
        }
        Ok(DiagGaussian { mu, log_sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

pub fn diag_gaussian_logprob(z: &Tensor, q: &DiagGaussian) -> Result<f64> {
    ensure_len("z", z.len(), q.dim())?;
    let mut t = Tape::new();
    let zv = t.constant(as_row(z));
    let mu = t.constant(as_row(&q.mu));
    let ls = t.constant(as_row(&q.log_sigma));
    let lp = diag_logprob_var(&mut t, zv, mu, ls)?;
    Ok(t.scalar_value(lp))
}

pub fn reparam_sample_diag(q: &DiagGaussian, eps: &Tensor) -> Result<Tensor> {
    ensure_len("eps", eps.len(), q.dim())?;
    let mut t = Tape::new();
    let mu = t.constant(as_row(&q.mu));
    let ls = t.constant(as_row(&q.log_sigma));
    let e = t.constant(as_row(eps));
    let z = reparam_diag_var(&mut t, mu, ls, e)?;
    Ok(t.value(z).reshape(q.mu.shape())?)
}

/// Gaussian with lower-triangular scale factor `l` (`Σ = l lᵀ`).
#[derive(Debug, Clone, PartialEq)]
pub struct FullCovGaussian {
    pub mu: Tensor,
    pub l: Tensor,
}

impl FullCovGaussian {
    pub fn new(mu: Tensor, l: Tensor) -> Result<Self> {
        let d = mu.len();
        if l.shape() != [d, d] {
            return Err(Error::InvalidArgument(format!(
                "factor must be {d}x{d}, got {:?}",
                l.shape()
            )));
        }
        for i in 0..d {
            if !(l.get2(i, i) > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "factor diagonal entry {i} is not positive ({})",
                    l.get2(i, i)
                )));
            }
            for j in i + 1..d {
                if l.get2(i, j) != 0.0 {
                    return Err(Error::InvalidArgument(format!("factor is not lower-triangular at ({i}, {j})")));
                }
            }
        }
        Ok(FullCovGaussian { mu, l })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn covariance(&self) -> Tensor {
        self.l
            .matmul(&self.l.transpose().expect("2-d"))
            .expect("square factor")
    }
}

/// `z = mu + L eps` and `log q(z) = Σ log N(eps_i; 0, 1) − Σ log L_ii`.
pub fn fullcov_sample_and_logprob(q: &FullCovGaussian, eps: &Tensor) -> Result<(Tensor, f64)> {
    let d = q.dim();
    ensure_len("eps", eps.len(), d)?;
    let mut t = Tape::new();
    let mu = t.constant(as_row(&q.mu));
    let ls = t.constant(Tensor::row(&(0..d).map(|i| q.l.get2(i, i).ln()).collect::<Vec<_>>()));
    let raw = t.constant(Tensor::row(q.l.data()));
    let e = t.constant(as_row(eps));
    let (z, logq) = fullcov_reparam_var(&mut t, mu, ls, raw, e)?;
    Ok((t.value(z).reshape(q.mu.shape())?, t.scalar_value(logq)))
}

/// `L = L_mask ⊙ L_raw + diag(sigma)`: strictly-lower entries of `l_raw`
/// survive, everything on or above the diagonal is replaced.
#[allow(non_snake_case)]
pub fn build_masked_L(l_raw: &Tensor, sigma: &Tensor) -> Result<Tensor> {
    let d = sigma.len();
    if l_raw.shape() != [d, d] {
        return Err(Error::InvalidArgument(format!(
            "raw factor must be {d}x{d}, got {:?}",
            l_raw.shape()
        )));
    }
    if sigma.data().iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidArgument("sigma must be positive".into()));
    }
    let mut l = Tensor::zeros(&[d, d]);
    for i in 0..d {
        for j in 0..i {
            l.set2(i, j, l_raw.get2(i, j));
        }
        l.set2(i, i, sigma.data()[i]);
    }
    Ok(l)
}

/// Factorized Bernoulli with clamped probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct BernoulliVec {
    pub p: Tensor,
}

impl BernoulliVec {
    pub fn new(p: Tensor) -> Self {
        BernoulliVec {
            p: p.map(|v| v.clamp(P_EPS, 1.0 - P_EPS)),
        }
    }
}

pub fn bernoulli_logprob(x: &Tensor, b: &BernoulliVec) -> Result<f64> {
    ensure_len("x", x.len(), b.p.len())?;
    if let Some(v) = x.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidArgument(format!("Bernoulli observation {v} is not binary")));
    }
    let mut t = Tape::new();
    let xv = t.constant(as_row(x));
    let pv = t.constant(as_row(&b.p));
    let lp = bernoulli_logprob_var(&mut t, xv, pv)?;
    Ok(t.scalar_value(lp))
}

/// Closed-form `KL(N(mu, σ²) ‖ N(0, 1))` for one dimension.
pub fn gaussian_kl_standard(mu: f64, log_sigma: f64) -> f64 {
    0.5 * (mu * mu + (2.0 * log_sigma).exp() - 1.0 - 2.0 * log_sigma)
}

/// `log N(x; mean, σ²)` for a scalar.
pub fn normal_logpdf(x: f64, mean: f64, sigma: f64) -> f64 {
    let u = (x - mean) / sigma;
    -0.5 * u * u - sigma.ln() - 0.5 * (2.0 * PI).ln()
}
