//! MLPs for the encoder and decoder, and MADE-style masked networks for the
//! autoregressive flow steps.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default bias on the `s` head of every masked network, so that gates start
/// near `sigmoid(2) ≈ 0.88` and each flow step is close to the identity.
pub const S_BIAS_INIT: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Softplus,
    Sigmoid,
    Linear,
}

impl Activation {
    pub fn apply(self, t: &mut Tape, x: Var) -> Result<Var> {
        Ok(match self {
            Activation::Tanh => t.tanh(x)?,
            Activation::Softplus => t.softplus(x)?,
            Activation::Sigmoid => t.sigmoid(x)?,
            Activation::Linear => x,
        })
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "softplus" => Some(Activation::Softplus),
            "sigmoid" => Some(Activation::Sigmoid),
            "linear" => Some(Activation::Linear),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Softplus => "softplus",
            Activation::Sigmoid => "sigmoid",
            Activation::Linear => "linear",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
    pub act: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// `widths = [in, h1, .., out]`; hidden layers use `hidden_act`, the last
    /// layer `out_act`. Weights are Glorot-uniform, biases zero.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        hidden_act: Activation,
        out_act: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(format!("{name}: an MLP needs at least input and output widths")));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (widths[l], widths[l + 1]);
                Dense {
                    w: store.add_glorot(format!("{name}.l{l}.w"), fan_in, fan_out, rng),
                    b: store.add(format!("{name}.l{l}.b"), Tensor::zeros(&[1, fan_out])),
                    fan_in,
                    fan_out,
                    act: if l + 1 == n { out_act } else { hidden_act },
                }
            })
            .collect();
        Ok(Mlp { layers })
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn forward(&self, t: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            let a = t.matmul(h, p[layer.w.0])?;
            let a = t.add(a, p[layer.b.0])?;
            h = layer.act.apply(t, a)?;
        }
        Ok(h)
    }

    pub fn zero_output_layer(&self, store: &mut ParamStore) {
        if let Some(last) = self.layers.last() {
            store.get_mut(last.w).data_mut().fill(0.0);
            store.get_mut(last.b).data_mut().fill(0.0);
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.fan_in * l.fan_out + l.fan_out).sum()
    }
}

/// Encoder heads, each `B×width`.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    pub mu: Var,
    /// Clamped to `[LOG_SIGMA_MIN, LOG_SIGMA_MAX]`.
    pub log_sigma: Var,
    pub h: Option<Var>,
    /// Row-major `D×D` per datapoint, present for full-covariance posteriors.
    pub l_raw: Option<Var>,
}

/// Amortized inference network emitting `(mu, log σ, [h], [L'])`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub mlp: Mlp,
    pub latent_dim: usize,
    pub context_dim: usize,
    pub with_l_raw: bool,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        data_dim: usize,
        hidden: &[usize],
        act: Activation,
        latent_dim: usize,
        context_dim: usize,
        with_l_raw: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let out = 2 * latent_dim + context_dim + if with_l_raw { latent_dim * latent_dim } else { 0 };
        let mut widths = vec![data_dim];
        widths.extend_from_slice(hidden);
        widths.push(out);
        Ok(Encoder {
            mlp: Mlp::new(store, "enc", &widths, act, Activation::Linear, rng)?,
            latent_dim,
            context_dim,
            with_l_raw,
        })
    }

    pub fn forward(&self, t: &mut Tape, p: &[Var], x: Var) -> Result<EncoderOutput> {
        let width = t.value(x).cols();
        if width != self.mlp.input_width() {
            return Err(Error::InvalidArgument(format!(
                "encoder expects input width {}, got {width}",
                self.mlp.input_width()
            )));
        }
        let d = self.latent_dim;
        let out = self.mlp.forward(t, p, x)?;
        let mu = t.slice(out, 1, 0, d)?;
        let raw_ls = t.slice(out, 1, d, d)?;
        let log_sigma = t.clamp(
            raw_ls,
            crate::distributions::LOG_SIGMA_MIN,
            crate::distributions::LOG_SIGMA_MAX,
        )?;
        let mut at = 2 * d;
        let h = if self.context_dim > 0 {
            let h = t.slice(out, 1, at, self.context_dim)?;
            at += self.context_dim;
            Some(h)
        } else {
            None
        };
        let l_raw = if self.with_l_raw {
            Some(t.slice(out, 1, at, d * d)?)
        } else {
            None
        };
        Ok(EncoderOutput { mu, log_sigma, h, l_raw })
    }
}

/// Decoder MLP; a sigmoid output layer gives Bernoulli means, a linear one
/// Gaussian means.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub mlp: Mlp,
}

impl Decoder {
    pub fn forward(&self, t: &mut Tape, p: &[Var], z: Var) -> Result<Var> {
        let width = t.value(z).cols();
        if width != self.mlp.input_width() {
            return Err(Error::InvalidArgument(format!(
                "decoder expects latent width {}, got {width}",
                self.mlp.input_width()
            )));
        }
        self.mlp.forward(t, p, z)
    }
}

/// Masks for a MADE network over `d` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct MadeMasks {
    /// One `in×out` mask per layer; the last maps to `2d` outputs (`m` then `s`).
    pub masks: Vec<Tensor>,
    /// Input degrees (1-based autoregressive rank per input).
    pub input_degrees: Vec<usize>,
    /// Set when `d < 2`: every output is then independent of the inputs.
    pub degenerate: bool,
}

/// Builds masks so that outputs `(m_i, s_i)` depend only on inputs ranked
/// before input `i`. `ordering[i]` is the zero-based rank of input `i`.
/// Hidden degrees are evenly spaced over `1..d`.
pub fn build_made_masks(d: usize, hidden: &[usize], ordering: &[usize]) -> Result<MadeMasks> {
    if ordering.len() != d {
        return Err(Error::Config(format!("ordering has {} entries for {d} inputs", ordering.len())));
    }
    let mut seen = vec![false; d];
    for &o in ordering {
        if o >= d || seen[o] {
            return Err(Error::Config(format!("ordering {ordering:?} is not a permutation")));
        }
        seen[o] = true;
    }
    let input_degrees: Vec<usize> = ordering.iter().map(|&o| o + 1).collect();
    let hidden_degrees: Vec<Vec<usize>> = hidden
        .iter()
        .map(|&h| {
            (0..h)
                .map(|k| if d < 2 { 1 } else { 1 + (k * (d - 1)) / h })
                .collect()
        })
        .collect();

    let connect = |from: &[usize], to: &[usize], strict: bool| {
        let mut m = Tensor::zeros(&[from.len(), to.len()]);
        for (j, &a) in from.iter().enumerate() {
            for (k, &b) in to.iter().enumerate() {
                if (strict && b > a) || (!strict && b >= a) {
                    m.set2(j, k, 1.0);
                }
            }
        }
        m
    };

    let out_degrees: Vec<usize> = input_degrees.iter().chain(&input_degrees).copied().collect();
    let mut masks = Vec::with_capacity(hidden.len() + 1);
    let mut prev: &[usize] = &input_degrees;
    for hd in &hidden_degrees {
        masks.push(connect(prev, hd, false));
        prev = hd;
    }
    masks.push(connect(prev, &out_degrees, true));
    Ok(MadeMasks {
        masks,
        input_degrees,
        degenerate: d < 2,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedLayer {
    pub w: ParamId,
    pub b: ParamId,
    /// Unmasked context weights `context_dim×out`.
    pub ctx: Option<ParamId>,
    pub mask: Tensor,
    pub act: Activation,
}

/// Autoregressive network over `z` with an unmasked context input `h`,
/// returning `(m, s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedNet {
    pub layers: Vec<MaskedLayer>,
    pub dim: usize,
    pub context_dim: usize,
    pub ordering: Vec<usize>,
    pub degenerate: bool,
}

impl MaskedNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: &[usize],
        context_dim: usize,
        act: Activation,
        ordering: &[usize],
        rng: &mut Rng,
    ) -> Result<Self> {
        let made = build_made_masks(dim, hidden, ordering)?;
        let mut widths = vec![dim];
        widths.extend_from_slice(hidden);
        widths.push(2 * dim);
        let n = widths.len() - 1;
        let layers = made
            .masks
            .into_iter()
            .enumerate()
            .map(|(l, mask)| {
                let (fan_in, fan_out) = (widths[l], widths[l + 1]);
                let w = store.add_glorot(format!("{name}.l{l}.w"), fan_in, fan_out, rng);
                let mut bias = Tensor::zeros(&[1, fan_out]);
                if l + 1 == n {
                    bias.data_mut()[dim..].fill(S_BIAS_INIT);
                }
                let b = store.add(format!("{name}.l{l}.b"), bias);
                let ctx = (context_dim > 0)
                    .then(|| store.add_glorot(format!("{name}.l{l}.ctx"), context_dim, fan_out, rng));
                MaskedLayer {
                    w,
                    b,
                    ctx,
                    mask,
                    act: if l + 1 == n { Activation::Linear } else { act },
                }
            })
            .collect();
        Ok(MaskedNet {
            layers,
            dim,
            context_dim,
            ordering: ordering.to_vec(),
            degenerate: made.degenerate,
        })
    }

    /// Scalar parameter count implied by the layer widths.
    pub fn expected_param_count(dim: usize, hidden: &[usize], context_dim: usize) -> usize {
        let mut widths = vec![dim];
        widths.extend_from_slice(hidden);
        widths.push(2 * dim);
        widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1] + context_dim * w[1])
            .sum()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| [Some(l.w), Some(l.b), l.ctx].into_iter().flatten())
            .collect()
    }

    pub fn forward(&self, t: &mut Tape, p: &[Var], z: Var, h: Option<Var>) -> Result<(Var, Var)> {
        let mut a = z;
        for layer in &self.layers {
            let mask = t.constant(layer.mask.clone());
            let w = t.mul(p[layer.w.0], mask)?;
            let mut pre = t.matmul(a, w)?;
            pre = t.add(pre, p[layer.b.0])?;
            if let (Some(c), Some(h)) = (layer.ctx, h) {
                let ch = t.matmul(h, p[c.0])?;
                pre = t.add(pre, ch)?;
            }
            a = layer.act.apply(t, pre)?;
        }
        let m = t.slice(a, 1, 0, self.dim)?;
        let s = t.slice(a, 1, self.dim, self.dim)?;
        Ok((m, s))
    }
}

/// Zero-based ranks for the identity ordering.
pub fn identity_ordering(d: usize) -> Vec<usize> {
    (0..d).collect()
}

/// Zero-based ranks for the reversed ordering.
pub fn reversed_ordering(d: usize) -> Vec<usize> {
    (0..d).rev().collect()
}
