//! Posterior families built by change of variables.
//!
//! Every family starts from `eps0 ~ N(0, I)`, maps it through a base affine
//! layer `z0 = mu + σ ⊙ eps0` (or the masked full-covariance factor) and then
//! through an optional chain of invertible steps. The running log-density is
//! `log p(eps0) − Σ log|det J_t|`.

use crate::distributions::{self, std_normal_logprob_var};
use crate::error::{Error, Result};
use crate::networks::{identity_ordering, Activation, Encoder, EncoderOutput, MaskedNet};
use crate::params::{ParamId, ParamStore};
use crate::rng::{sample_standard_normal, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// How an IAF step combines `(m, s)` with the previous iterate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IafUpdate {
    /// `σ = sigmoid(s)`, `eps_t = σ ⊙ eps_{t−1} + (1 − σ) ⊙ m`
    Gated,
    /// `σ = exp(s)`, `eps_t = m + σ ⊙ eps_{t−1}`
    Affine,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PosteriorKind {
    DiagGaussian,
    FullCov,
    Planar { steps: usize },
    Iaf { steps: usize, hidden: Vec<usize>, update: IafUpdate },
}

impl PosteriorKind {
    pub fn name(&self) -> &'static str {
        match self {
            PosteriorKind::DiagGaussian => "diag",
            PosteriorKind::FullCov => "fullcov",
            PosteriorKind::Planar { .. } => "planar",
            PosteriorKind::Iaf { .. } => "iaf",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSpec {
    pub kind: PosteriorKind,
    pub latent_dim: usize,
    /// Width of the context vector `h` fed to every IAF step.
    pub context_dim: usize,
}

impl PosteriorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be at least 1".into()));
        }
        match &self.kind {
            PosteriorKind::Planar { steps } | PosteriorKind::Iaf { steps, .. } if *steps == 0 => {
                Err(Error::Config(format!("{} posterior needs at least one step", self.kind.name())))
            }
            _ => Ok(()),
        }
    }

    /// Whether `KL(q(z|x) ‖ N(0, I))` has a per-dimension closed form.
    pub fn has_analytic_kl(&self) -> bool {
        matches!(self.kind, PosteriorKind::DiagGaussian)
    }

    fn encoder_context_dim(&self) -> usize {
        match self.kind {
            PosteriorKind::Iaf { .. } => self.context_dim,
            _ => 0,
        }
    }
}

/// Parameters of one planar step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanarIds {
    /// `1×D`
    pub u: ParamId,
    /// `D×1`
    pub w: ParamId,
    /// `1×1`
    pub b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Flow {
    None,
    Planar(Vec<PlanarIds>),
    Iaf { nets: Vec<MaskedNet>, update: IafUpdate },
}

/// A built inference model: encoder plus optional flow.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub spec: PosteriorSpec,
    pub encoder: Encoder,
    pub flow: Flow,
}

/// Graph handles for one posterior evaluation over a batch.
#[derive(Debug, Clone)]
pub struct FlowVars {
    pub z: Var,
    /// `B×1`
    pub log_q: Var,
    /// Per-step `B×1` log-determinants, already subtracted from `log_q`.
    pub step_logdets: Vec<Var>,
    pub enc: EncoderOutput,
}

/// Values of one posterior evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowResult {
    /// `B×D`
    pub z: Tensor,
    pub eps0: Tensor,
    /// One entry per row.
    pub log_q: Vec<f64>,
    /// `step_logdets[t][row]`
    pub step_logdets: Vec<Vec<f64>>,
}

impl Posterior {
    pub fn new(
        store: &mut ParamStore,
        spec: PosteriorSpec,
        data_dim: usize,
        encoder_hidden: &[usize],
        act: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let d = spec.latent_dim;
        let encoder = Encoder::new(
            store,
            data_dim,
            encoder_hidden,
            act,
            d,
            spec.encoder_context_dim(),
            matches!(spec.kind, PosteriorKind::FullCov),
            rng,
        )?;
        let flow = match &spec.kind {
            PosteriorKind::DiagGaussian | PosteriorKind::FullCov => Flow::None,
            PosteriorKind::Planar { steps } => Flow::Planar(
                (0..*steps)
                    .map(|k| PlanarIds {
                        u: store.add_glorot(format!("planar.t{k}.u"), 1, d, rng),
                        w: store.add_glorot(format!("planar.t{k}.w"), d, 1, rng),
                        b: store.add(format!("planar.t{k}.b"), Tensor::zeros(&[1, 1])),
                    })
                    .collect(),
            ),
            PosteriorKind::Iaf { steps, hidden, update } => Flow::Iaf {
                nets: (0..*steps)
                    .map(|k| {
                        MaskedNet::new(
                            store,
                            &format!("iaf.t{k}"),
                            d,
                            hidden,
                            spec.context_dim,
                            act,
                            &identity_ordering(d),
                            rng,
                        )
                    })
                    .collect::<Result<_>>()?,
                update: *update,
            },
        };
        Ok(Posterior { spec, encoder, flow })
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    /// Maps `eps0` (`B×D` constant) to `z` with its exact log-density.
    pub fn sample_and_logq_var(&self, t: &mut Tape, p: &[Var], x: Var, eps0: Var) -> Result<FlowVars> {
        let enc = self.encoder.forward(t, p, x)?;
        let (z0, logq0) = match (&self.spec.kind, enc.l_raw) {
            (PosteriorKind::FullCov, Some(l_raw)) => {
                distributions::fullcov_reparam_var(t, enc.mu, enc.log_sigma, l_raw, eps0)?
            }
            _ => {
                let z0 = distributions::reparam_diag_var(t, enc.mu, enc.log_sigma, eps0)?;
                let base = std_normal_logprob_var(t, eps0)?;
                let sum_ls = t.sum_axis(enc.log_sigma, 1)?;
                (z0, t.sub(base, sum_ls)?)
            }
        };

        let mut z = z0;
        let mut log_q = logq0;
        let mut step_logdets = Vec::new();
        match &self.flow {
            Flow::None => {}
            Flow::Planar(steps) => {
                for s in steps {
                    let (next, ld) = planar_step_var(t, z, p[s.u.0], p[s.w.0], p[s.b.0])?;
                    z = next;
                    log_q = t.sub(log_q, ld)?;
                    step_logdets.push(ld);
                }
            }
            Flow::Iaf { nets, update } => {
                for (k, net) in nets.iter().enumerate() {
                    if k > 0 {
                        z = reverse_ordering_var(t, z)?;
                    }
                    let (next, ld) = iaf_step_var(t, z, enc.h, net, p, *update)?;
                    z = next;
                    log_q = t.sub(log_q, ld)?;
                    step_logdets.push(ld);
                }
            }
        }
        Ok(FlowVars {
            z,
            log_q,
            step_logdets,
            enc,
        })
    }

    /// Value-level evaluation for given noise.
    pub fn evaluate(&self, store: &ParamStore, x: &Tensor, eps0: &Tensor) -> Result<FlowResult> {
        let mut t = Tape::new();
        let p = store.bind(&mut t, false);
        let xv = t.constant(x.clone());
        let ev = t.constant(eps0.clone());
        let fv = self.sample_and_logq_var(&mut t, &p, xv, ev)?;
        Ok(FlowResult {
            z: t.value(fv.z).clone(),
            eps0: eps0.clone(),
            log_q: t.value(fv.log_q).data().to_vec(),
            step_logdets: fv.step_logdets.iter().map(|v| t.value(*v).data().to_vec()).collect(),
        })
    }

    /// Draws `eps0 ~ N(0, I)` per row of `x` and evaluates the posterior.
    pub fn sample_and_logq(&self, store: &ParamStore, x: &Tensor, rng: &mut Rng) -> Result<FlowResult> {
        let eps0 = sample_standard_normal(rng, &[x.rows(), self.latent_dim()]);
        self.evaluate(store, x, &eps0)
    }
}

/// Planar step with the invertibility-corrected `û`:
/// `û = u + (softplus(wᵀu) − 1 − wᵀu) w / ‖w‖²`,
/// `eps' = eps + û tanh(wᵀeps + b)`,
/// `log|det| = log|1 + (1 − tanh²(wᵀeps + b)) wᵀû|`.
///
/// `u` is `1×D`, `w` is `D×1`, `b` is `1×1`; `eps` is `B×D`.
pub fn planar_step_var(t: &mut Tape, eps: Var, u: Var, w: Var, b: Var) -> Result<(Var, Var)> {
    let wu = t.matmul(u, w)?;
    let sp = t.softplus(wu)?;
    let m = t.add_const(sp, -1.0)?;
    let coef = t.sub(m, wu)?;
    let ww = t.square(w)?;
    let norm2 = t.sum(ww)?;
    // 1/‖w‖², with the log floor turning w = 0 into a zero correction
    let log_norm2 = t.log(norm2)?;
    let neg = t.neg(log_norm2)?;
    let inv_norm2 = t.exp(neg)?;
    let wt = t.transpose(w)?;
    let dir = t.mul(wt, inv_norm2)?;
    let corr = t.mul(dir, coef)?;
    let u_hat = t.add(u, corr)?;

    let a = t.matmul(eps, w)?;
    let a = t.add(a, b)?;
    let th = t.tanh(a)?;
    let shift = t.matmul(th, u_hat)?;
    let next = t.add(eps, shift)?;

    let th2 = t.square(th)?;
    let neg_th2 = t.neg(th2)?;
    let dtanh = t.add_const(neg_th2, 1.0)?;
    let wu_hat = t.matmul(u_hat, w)?;
    let inner = t.mul(dtanh, wu_hat)?;
    let det = t.add_const(inner, 1.0)?;
    let logdet = t.log(det)?;
    Ok((next, logdet))
}

/// One inverse-autoregressive step. Returns `(eps_t, Σ_i log σ_i)` where the
/// second value is to be subtracted from the running log-density.
pub fn iaf_step_var(
    t: &mut Tape,
    eps_prev: Var,
    h: Option<Var>,
    net: &MaskedNet,
    p: &[Var],
    update: IafUpdate,
) -> Result<(Var, Var)> {
    let (m, s) = net.forward(t, p, eps_prev, h)?;
    match update {
        IafUpdate::Gated => {
            let sigma = t.sigmoid(s)?;
            // eps_t = m + σ ⊙ (eps_prev − m)
            let diff = t.sub(eps_prev, m)?;
            let gated = t.mul(sigma, diff)?;
            let next = t.add(m, gated)?;
            // log sigmoid(s) = −softplus(−s)
            let neg_s = t.neg(s)?;
            let sp = t.softplus(neg_s)?;
            let log_sigma = t.neg(sp)?;
            Ok((next, t.sum_axis(log_sigma, 1)?))
        }
        IafUpdate::Affine => {
            let sigma = t.exp(s)?;
            let scaled = t.mul(sigma, eps_prev)?;
            let next = t.add(m, scaled)?;
            Ok((next, t.sum_axis(s, 1)?))
        }
    }
}

fn anti_identity(d: usize) -> Tensor {
    let mut r = Tensor::zeros(&[d, d]);
    for i in 0..d {
        r.set2(i, d - 1 - i, 1.0);
    }
    r
}

/// Reverses the column order of a `B×D` node; volume-preserving.
pub fn reverse_ordering_var(t: &mut Tape, eps: Var) -> Result<Var> {
    let d = t.value(eps).cols();
    let r = t.constant(anti_identity(d));
    Ok(t.matmul(eps, r)?)
}

/// Reverses the elements of a vector.
pub fn reverse_ordering(eps: &Tensor) -> Tensor {
    let mut data = eps.data().to_vec();
    data.reverse();
    Tensor::new(eps.shape().to_vec(), data).expect("same length")
}

/// Value-level planar step parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarParams {
    pub u: Tensor,
    pub w: Tensor,
    pub b: f64,
}

/// Planar step on a single vector; returns `(eps', log|det J|)`.
pub fn planar_step(eps: &Tensor, params: &PlanarParams) -> Result<(Tensor, f64)> {
    let d = eps.len();
    if params.u.len() != d || params.w.len() != d {
        return Err(Error::InvalidArgument(format!("planar parameters must have length {d}")));
    }
    let mut t = Tape::new();
    let e = t.constant(Tensor::row(eps.data()));
    let u = t.constant(Tensor::row(params.u.data()));
    let w = t.constant(Tensor::column(params.w.data()));
    let b = t.constant(Tensor::full(&[1, 1], params.b));
    let (next, ld) = planar_step_var(&mut t, e, u, w, b)?;
    Ok((t.value(next).reshape(eps.shape())?, t.scalar_value(ld)))
}

/// One IAF step on a single vector with the net's parameters from `store`.
pub fn iaf_step(
    eps_prev: &Tensor,
    h: Option<&Tensor>,
    net: &MaskedNet,
    store: &ParamStore,
    update: IafUpdate,
) -> Result<(Tensor, f64)> {
    let mut t = Tape::new();
    let p = store.bind(&mut t, false);
    let e = t.constant(Tensor::row(eps_prev.data()));
    let hv = h.map(|h| t.constant(Tensor::row(h.data())));
    let (next, ld) = iaf_step_var(&mut t, e, hv, net, &p, update)?;
    Ok((t.value(next).reshape(eps_prev.shape())?, t.scalar_value(ld)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planar_zero_u_uses_corrected_direction() {
        let eps = Tensor::row(&[0.3, -1.0, 2.0]);
        let p = PlanarParams {
            u: Tensor::row(&[0.0; 3]),
            w: Tensor::row(&[0.5, 0.1, -0.3]),
            b: 0.2,
        };
        let (next, ld) = planar_step(&eps, &p).unwrap();
        // û = (softplus(0) − 1)·w/‖w‖² is not zero, so check against the corrected u
        let wu: f64 = 0.0;
        let coef = crate::tensor::softplus(wu) - 1.0 - wu;
        let n2: f64 = p.w.data().iter().map(|v| v * v).sum();
        let a: f64 = eps.data().iter().zip(p.w.data()).map(|(e, w)| e * w).sum::<f64>() + p.b;
        for i in 0..3 {
            let uh = coef * p.w.data()[i] / n2;
            assert!((next.data()[i] - (eps.data()[i] + uh * a.tanh())).abs() < 1e-14);
        }
        assert!(ld.is_finite());
    }

    #[test]
    fn planar_u_hat_zero_gives_identity() {
        // u chosen so that û = 0: u = t·w with softplus(t‖w‖²) − 1 = 0
        let w = [0.6, -0.8];
        let tval = (std::f64::consts::E - 1.0).ln(); // softplus(tval) = 1, ‖w‖² = 1
        let p = PlanarParams {
            u: Tensor::row(&[tval * w[0], tval * w[1]]),
            w: Tensor::row(&w),
            b: -0.4,
        };
        let eps = Tensor::row(&[1.5, 0.25]);
        let (next, ld) = planar_step(&eps, &p).unwrap();
        assert!((next.data()[0] - 1.5).abs() < 1e-14 && (next.data()[1] - 0.25).abs() < 1e-14);
        assert!(ld.abs() < 1e-14);
    }

    #[test]
    fn planar_zero_w_is_a_shift() {
        let p = PlanarParams {
            u: Tensor::row(&[0.4, -0.2]),
            w: Tensor::row(&[0.0, 0.0]),
            b: 0.7,
        };
        let eps = Tensor::row(&[1.0, 2.0]);
        let (next, ld) = planar_step(&eps, &p).unwrap();
        assert!((next.data()[0] - (1.0 + 0.4 * 0.7f64.tanh())).abs() < 1e-14);
        assert!((next.data()[1] - (2.0 - 0.2 * 0.7f64.tanh())).abs() < 1e-14);
        assert_eq!(ld, 0.0);
    }

    fn zeroed_net(d: usize, s_bias: f64) -> (MaskedNet, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        let net = MaskedNet::new(&mut store, "n", d, &[4], 0, Activation::Tanh, &identity_ordering(d), &mut rng).unwrap();
        for l in &net.layers {
            store.get_mut(l.w).data_mut().fill(0.0);
            store.get_mut(l.b).data_mut().fill(0.0);
        }
        let last = net.layers.last().unwrap().b;
        store.get_mut(last).data_mut()[d..].fill(s_bias);
        (net, store)
    }

    #[test]
    fn iaf_half_gate() {
        let (net, mut store) = zeroed_net(3, 0.0);
        let last = net.layers.last().unwrap().b;
        store.get_mut(last).data_mut()[..3].copy_from_slice(&[1.0, 2.0, 3.0]);
        let eps = Tensor::row(&[2.0, -2.0, 4.0]);
        let (next, ld) = iaf_step(&eps, None, &net, &store, IafUpdate::Gated).unwrap();
        assert_eq!(next.data(), &[1.5, 0.0, 3.5]);
        assert!((ld + 3.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((ld + 2.079_441_5).abs() < 1e-7);
    }

    #[test]
    fn iaf_saturated_gate_is_identity() {
        let (net, store) = zeroed_net(3, 60.0);
        let eps = Tensor::row(&[0.1, 0.2, -0.3]);
        let (next, ld) = iaf_step(&eps, None, &net, &store, IafUpdate::Gated).unwrap();
        for (a, b) in next.data().iter().zip(eps.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(ld.abs() < 1e-20 && ld <= 0.0);
    }

    #[test]
    fn reversal_is_an_involution() {
        let v = Tensor::row(&[1.0, 2.0, 3.0]);
        assert_eq!(reverse_ordering(&v).data(), &[3.0, 2.0, 1.0]);
        assert_eq!(reverse_ordering(&reverse_ordering(&v)), v);
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap());
        let r = reverse_ordering_var(&mut t, x).unwrap();
        assert_eq!(t.value(r).data(), &[3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
    }

    #[test]
    fn zero_step_chains_are_rejected() {
        let spec = PosteriorSpec {
            kind: PosteriorKind::Iaf {
                steps: 0,
                hidden: vec![],
                update: IafUpdate::Gated,
            },
            latent_dim: 2,
            context_dim: 0,
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn diag_zero_noise_returns_mean() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(4);
        let spec = PosteriorSpec {
            kind: PosteriorKind::DiagGaussian,
            latent_dim: 3,
            context_dim: 0,
        };
        let post = Posterior::new(&mut store, spec, 5, &[8], Activation::Tanh, &mut rng).unwrap();
        let x = Tensor::row(&[1.0, 0.0, 1.0, 0.0, 1.0]);
        let r = post.evaluate(&store, &x, &Tensor::zeros(&[1, 3])).unwrap();
        let mut t = Tape::new();
        let p = store.bind(&mut t, false);
        let xv = t.constant(x);
        let enc = post.encoder.forward(&mut t, &p, xv).unwrap();
        assert_eq!(&r.z, t.value(enc.mu));
        let want: f64 = t
            .value(enc.log_sigma)
            .data()
            .iter()
            .map(|ls| -distributions::HALF_LN_2PI - ls)
            .sum();
        assert!((r.log_q[0] - want).abs() < 1e-14);
    }
}
