//! Generative model, hierarchical priors and the assembled VAE.

use std::collections::VecDeque;

use crate::distributions::{self, bernoulli_logprob_var, diag_logprob_var, std_normal_logprob_var};
use crate::error::{Error, Result};
use crate::flows::{FlowVars, IafUpdate, Posterior, PosteriorKind, PosteriorSpec};
use crate::networks::{Activation, Decoder, Mlp};
use crate::params::ParamStore;
use crate::rng::{tags, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LikelihoodKind {
    /// Sigmoid decoder output, binary observations.
    Bernoulli,
    /// Linear decoder output as the mean, fixed observation noise.
    Gaussian { sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LikelihoodFamily {
    Bernoulli,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorFamily {
    StandardNormal,
    /// Blocks laid out contiguously in `z`; a block with parents is a
    /// diagonal Gaussian whose moments come from an MLP over the parents.
    Hierarchical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosteriorFamily {
    Diag,
    FullCov,
    Planar,
    Iaf,
}

impl PosteriorFamily {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "diag" => Some(PosteriorFamily::Diag),
            "fullcov" => Some(PosteriorFamily::FullCov),
            "planar" => Some(PosteriorFamily::Planar),
            "iaf" => Some(PosteriorFamily::Iaf),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PosteriorFamily::Diag => "diag",
            PosteriorFamily::FullCov => "fullcov",
            PosteriorFamily::Planar => "planar",
            PosteriorFamily::Iaf => "iaf",
        }
    }
}

/// Everything needed to rebuild a model's structure.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub data_dim: usize,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub activation: Activation,
    pub likelihood: LikelihoodFamily,
    /// Observation noise of the Gaussian likelihood.
    pub obs_sigma: f64,
    pub prior: PriorFamily,
    pub prior_blocks: Vec<usize>,
    /// Parent block indices per block.
    pub prior_parents: Vec<Vec<usize>>,
    pub prior_hidden: Vec<usize>,
    pub posterior: PosteriorFamily,
    /// Steps of a planar or IAF chain.
    pub flow_steps: usize,
    pub iaf_hidden: Vec<usize>,
    pub iaf_update: IafUpdate,
    pub context_dim: usize,
    pub init_seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            data_dim: 16,
            latent_dim: 2,
            encoder_hidden: vec![64, 64],
            decoder_hidden: vec![64, 64],
            activation: Activation::Tanh,
            likelihood: LikelihoodFamily::Bernoulli,
            obs_sigma: 1.0,
            prior: PriorFamily::StandardNormal,
            prior_blocks: vec![],
            prior_parents: vec![],
            prior_hidden: vec![16],
            posterior: PosteriorFamily::Diag,
            flow_steps: 2,
            iaf_hidden: vec![64, 64],
            iaf_update: IafUpdate::Gated,
            context_dim: 64,
            init_seed: 0,
        }
    }
}

fn fmt_list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list(s: &str) -> std::result::Result<Vec<usize>, String> {
    let s = s.trim();
    if s.is_empty() || s == "none" {
        return Ok(vec![]);
    }
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("`{p}` is not a non-negative integer")))
        .collect()
}

fn parse_parents(s: &str) -> std::result::Result<Vec<Vec<usize>>, String> {
    let s = s.trim();
    if s.is_empty() || s == "none" {
        return Ok(vec![]);
    }
    s.split(';')
        .map(|b| {
            let b = b.trim();
            if b == "-" {
                Ok(vec![])
            } else {
                parse_list(b)
            }
        })
        .collect()
}

fn fmt_parents(p: &[Vec<usize>]) -> String {
    p.iter()
        .map(|b| if b.is_empty() { "-".to_string() } else { fmt_list(b) })
        .collect::<Vec<_>>()
        .join(";")
}

fn parse_num<T: std::str::FromStr>(v: &str, what: &str) -> std::result::Result<T, String> {
    v.trim().parse().map_err(|_| format!("`{v}` is not a valid {what}"))
}

fn parse_steps(v: &str) -> std::result::Result<usize, String> {
    let steps: usize = parse_num(v, "integer")?;
    if steps == 0 {
        return Err("must be at least 1".into());
    }
    Ok(steps)
}

impl ModelSpec {
    /// Keys understood by [`ModelSpec::set`]. `planar_steps` and `iaf_steps`
    /// are aliases of `flow_steps`.
    pub const KEYS: &'static [&'static str] = &[
        "data_dim",
        "latent_dim",
        "encoder_hidden",
        "decoder_hidden",
        "activation",
        "likelihood",
        "obs_sigma",
        "prior",
        "prior_blocks",
        "prior_parents",
        "prior_hidden",
        "posterior",
        "flow_steps",
        "planar_steps",
        "iaf_steps",
        "iaf_hidden",
        "iaf_update",
        "context_dim",
        "init_seed",
    ];

    /// Applies one `key=value` setting. Returns `Ok(false)` for keys this
    /// type does not own and `Err` with a message for malformed values.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        let v = value.trim();
        match key {
            "data_dim" => self.data_dim = parse_num(v, "integer")?,
            "latent_dim" => self.latent_dim = parse_num(v, "integer")?,
            "encoder_hidden" => self.encoder_hidden = parse_list(v)?,
            "decoder_hidden" => self.decoder_hidden = parse_list(v)?,
            "activation" => self.activation = Activation::parse(v).ok_or_else(|| format!("unknown activation `{v}`"))?,
            "likelihood" => {
                self.likelihood = match v {
                    "bernoulli" => LikelihoodFamily::Bernoulli,
                    "gaussian" => LikelihoodFamily::Gaussian,
                    other => return Err(format!("unknown likelihood `{other}`")),
                }
            }
            "obs_sigma" => {
                let sigma: f64 = parse_num(v, "number")?;
                if !(sigma > 0.0 && sigma.is_finite()) {
                    return Err(format!("must be positive, got {v}"));
                }
                self.obs_sigma = sigma;
            }
            "prior" => {
                self.prior = match v {
                    "standard" => PriorFamily::StandardNormal,
                    "hierarchical" => PriorFamily::Hierarchical,
                    other => return Err(format!("unknown prior `{other}`")),
                }
            }
            "prior_blocks" => self.prior_blocks = parse_list(v)?,
            "prior_parents" => self.prior_parents = parse_parents(v)?,
            "prior_hidden" => self.prior_hidden = parse_list(v)?,
            "posterior" => self.posterior = PosteriorFamily::parse(v).ok_or_else(|| format!("unknown posterior `{v}`"))?,
            "flow_steps" | "planar_steps" | "iaf_steps" => self.flow_steps = parse_steps(v)?,
            "iaf_hidden" => self.iaf_hidden = parse_list(v)?,
            "iaf_update" => {
                self.iaf_update = match v {
                    "gated" => IafUpdate::Gated,
                    "affine" => IafUpdate::Affine,
                    other => return Err(format!("unknown iaf_update `{other}`")),
                }
            }
            "context_dim" => self.context_dim = parse_num(v, "integer")?,
            "init_seed" => self.init_seed = parse_num(v, "integer")?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn likelihood_kind(&self) -> LikelihoodKind {
        match self.likelihood {
            LikelihoodFamily::Bernoulli => LikelihoodKind::Bernoulli,
            LikelihoodFamily::Gaussian => LikelihoodKind::Gaussian { sigma: self.obs_sigma },
        }
    }

    /// Serializes to `key=value` pairs accepted back by [`ModelSpec::set`].
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv: Vec<(&str, String)> = vec![
            ("data_dim", self.data_dim.to_string()),
            ("latent_dim", self.latent_dim.to_string()),
            ("encoder_hidden", fmt_list(&self.encoder_hidden)),
            ("decoder_hidden", fmt_list(&self.decoder_hidden)),
            ("activation", self.activation.as_str().to_string()),
        ];
        kv.push((
            "likelihood",
            match self.likelihood {
                LikelihoodFamily::Bernoulli => "bernoulli",
                LikelihoodFamily::Gaussian => "gaussian",
            }
            .into(),
        ));
        kv.push(("obs_sigma", format!("{:?}", self.obs_sigma)));
        kv.push((
            "prior",
            match self.prior {
                PriorFamily::StandardNormal => "standard",
                PriorFamily::Hierarchical => "hierarchical",
            }
            .into(),
        ));
        kv.push(("prior_blocks", fmt_list(&self.prior_blocks)));
        kv.push(("prior_parents", fmt_parents(&self.prior_parents)));
        kv.push(("prior_hidden", fmt_list(&self.prior_hidden)));
        kv.push(("posterior", self.posterior.as_str().into()));
        kv.push(("flow_steps", self.flow_steps.to_string()));
        kv.push(("iaf_hidden", fmt_list(&self.iaf_hidden)));
        kv.push((
            "iaf_update",
            match self.iaf_update {
                IafUpdate::Gated => "gated",
                IafUpdate::Affine => "affine",
            }
            .into(),
        ));
        kv.push(("context_dim", self.context_dim.to_string()));
        kv.push(("init_seed", self.init_seed.to_string()));
        kv.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn from_kv<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut spec = ModelSpec::default();
        for (k, v) in pairs {
            match spec.set(k, v) {
                Ok(true) => {}
                Ok(false) => return Err(Error::Config(format!("unknown model key `{k}`"))),
                Err(e) => return Err(Error::Config(format!("{k}: {e}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn posterior_kind(&self) -> PosteriorKind {
        match self.posterior {
            PosteriorFamily::Diag => PosteriorKind::DiagGaussian,
            PosteriorFamily::FullCov => PosteriorKind::FullCov,
            PosteriorFamily::Planar => PosteriorKind::Planar { steps: self.flow_steps },
            PosteriorFamily::Iaf => PosteriorKind::Iaf {
                steps: self.flow_steps,
                hidden: self.iaf_hidden.clone(),
                update: self.iaf_update,
            },
        }
    }

    pub fn posterior_spec(&self) -> PosteriorSpec {
        PosteriorSpec {
            kind: self.posterior_kind(),
            latent_dim: self.latent_dim,
            context_dim: self.context_dim,
        }
    }

    /// Block sizes and parents of the hierarchical prior; an empty block
    /// list means a single root block.
    pub fn prior_layout(&self) -> (Vec<usize>, Vec<Vec<usize>>) {
        if self.prior_blocks.is_empty() {
            (vec![self.latent_dim], vec![vec![]])
        } else {
            let mut parents = self.prior_parents.clone();
            if parents.is_empty() {
                // default: a chain
                parents = (0..self.prior_blocks.len())
                    .map(|i| if i == 0 { vec![] } else { vec![i - 1] })
                    .collect();
            }
            (self.prior_blocks.clone(), parents)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 {
            return Err(Error::Config("data_dim must be at least 1".into()));
        }
        self.posterior_spec().validate()?;
        if self.posterior == PosteriorFamily::Iaf && self.context_dim == 0 {
            return Err(Error::Config("iaf posterior needs context_dim >= 1".into()));
        }
        if self.prior == PriorFamily::Hierarchical {
            let (blocks, parents) = self.prior_layout();
            if blocks.iter().sum::<usize>() != self.latent_dim {
                return Err(Error::Config(format!(
                    "prior blocks {blocks:?} do not add up to latent_dim {}",
                    self.latent_dim
                )));
            }
            if parents.len() != blocks.len() {
                return Err(Error::Config(format!(
                    "{} prior blocks but {} parent lists",
                    blocks.len(),
                    parents.len()
                )));
            }
            topological_order(&parents)?;
        }
        Ok(())
    }
}

/// Kahn's algorithm; errors on unknown parents, self-loops and cycles.
pub fn topological_order(parents: &[Vec<usize>]) -> Result<Vec<usize>> {
    let n = parents.len();
    let mut indegree = vec![0usize; n];
    let mut children = vec![vec![]; n];
    for (i, ps) in parents.iter().enumerate() {
        for &p in ps {
            if p >= n {
                return Err(Error::Config(format!("block {i} names unknown parent {p}")));
            }
            indegree[i] += 1;
            children[p].push(i);
        }
    }
    let mut queue: VecDeque<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = queue.pop_front() {
        order.push(i);
        for &c in &children[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                queue.push_back(c);
            }
        }
    }
    if order.len() != n {
        return Err(Error::Config("latent block graph has a cycle".into()));
    }
    Ok(order)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentBlock {
    pub dim: usize,
    /// First column of this block in `z`.
    pub offset: usize,
    pub parents: Vec<usize>,
    /// Emits `(mu, log σ)` from the concatenated parents; `None` for roots.
    pub net: Option<Mlp>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalLatents {
    pub blocks: Vec<LatentBlock>,
    pub order: Vec<usize>,
}

impl HierarchicalLatents {
    pub fn new(
        store: &mut ParamStore,
        dims: &[usize],
        parents: &[Vec<usize>],
        hidden: &[usize],
        act: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        if dims.len() != parents.len() || dims.is_empty() {
            return Err(Error::Config("need one parent list per latent block".into()));
        }
        let order = topological_order(parents)?;
        let mut offset = 0;
        let mut blocks = Vec::with_capacity(dims.len());
        for (i, (&dim, ps)) in dims.iter().zip(parents).enumerate() {
            if dim == 0 {
                return Err(Error::Config(format!("latent block {i} is empty")));
            }
            let net = if ps.is_empty() {
                None
            } else {
                let mut widths = vec![ps.iter().map(|&p| dims[p]).sum()];
                widths.extend_from_slice(hidden);
                widths.push(2 * dim);
                Some(Mlp::new(store, &format!("prior.b{i}"), &widths, act, Activation::Linear, rng)?)
            };
            blocks.push(LatentBlock {
                dim,
                offset,
                parents: ps.clone(),
                net,
            });
            offset += dim;
        }
        Ok(HierarchicalLatents { blocks, order })
    }

    pub fn latent_dim(&self) -> usize {
        self.blocks.iter().map(|b| b.dim).sum()
    }

    /// Conditional moments of block `i` given the parent columns of `z`.
    fn moments(&self, t: &mut Tape, p: &[Var], i: usize, z_blocks: &[Option<Var>]) -> Result<Option<(Var, Var)>> {
        let b = &self.blocks[i];
        let Some(net) = &b.net else {
            return Ok(None);
        };
        let inputs: Vec<Var> = b.parents.iter().map(|&q| z_blocks[q].expect("parents come first")).collect();
        let input = if inputs.len() == 1 { inputs[0] } else { t.concat(&inputs, 1)? };
        let out = net.forward(t, p, input)?;
        let mu = t.slice(out, 1, 0, b.dim)?;
        let raw = t.slice(out, 1, b.dim, b.dim)?;
        let ls = t.clamp(raw, distributions::LOG_SIGMA_MIN, distributions::LOG_SIGMA_MAX)?;
        Ok(Some((mu, ls)))
    }

    /// Per-block `B×1` log-densities of `z`, indexed by block.
    pub fn block_logprob_vars(&self, t: &mut Tape, p: &[Var], z: Var) -> Result<Vec<Var>> {
        let mut z_blocks = vec![None; self.blocks.len()];
        for (i, b) in self.blocks.iter().enumerate() {
            z_blocks[i] = Some(t.slice(z, 1, b.offset, b.dim)?);
        }
        let mut out = vec![None; self.blocks.len()];
        for &i in &self.order {
            let zi = z_blocks[i].expect("sliced above");
            out[i] = Some(match self.moments(t, p, i, &z_blocks)? {
                None => std_normal_logprob_var(t, zi)?,
                Some((mu, ls)) => diag_logprob_var(t, zi, mu, ls)?,
            });
        }
        Ok(out.into_iter().map(|v| v.expect("every block visited")).collect())
    }

    /// Reparameterized ancestral pass: block `i` is `mu_i + σ_i ⊙ eps_i`
    /// with moments from its already-sampled parents.
    pub fn sample_var(&self, t: &mut Tape, p: &[Var], eps: Var) -> Result<Var> {
        let mut z_blocks = vec![None; self.blocks.len()];
        for &i in &self.order {
            let b = &self.blocks[i];
            let e = t.slice(eps, 1, b.offset, b.dim)?;
            z_blocks[i] = Some(match self.moments(t, p, i, &z_blocks)? {
                None => e,
                Some((mu, ls)) => distributions::reparam_diag_var(t, mu, ls, e)?,
            });
        }
        let parts: Vec<Var> = z_blocks.into_iter().map(|v| v.expect("every block visited")).collect();
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            Ok(t.concat(&parts, 1)?)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prior {
    StandardNormal { dim: usize },
    Hierarchical(HierarchicalLatents),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeModel {
    pub prior: Prior,
    pub decoder: Decoder,
    pub likelihood: LikelihoodKind,
    pub data_dim: usize,
}

/// Values from one ancestral pass over `n` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AncestralSample {
    /// Block values in block order, each `n×dim`.
    pub blocks: Vec<Tensor>,
    /// All blocks laid out side by side, `n×D_z`.
    pub z: Tensor,
    /// Decoder output: Bernoulli probabilities or Gaussian means.
    pub x_mean: Tensor,
    /// Observation: a draw, or `x_mean` when no observation noise was given.
    pub x: Tensor,
    /// `block_logprobs[i][row]`
    pub block_logprobs: Vec<Vec<f64>>,
    pub logpx: Vec<f64>,
    /// `log p(x, z)` per row.
    pub log_joint: Vec<f64>,
}

impl GenerativeModel {
    pub fn latent_dim(&self) -> usize {
        match &self.prior {
            Prior::StandardNormal { dim } => *dim,
            Prior::Hierarchical(h) => h.latent_dim(),
        }
    }

    /// `B×1` prior log-density.
    pub fn logpz_var(&self, t: &mut Tape, p: &[Var], z: Var) -> Result<Var> {
        match &self.prior {
            Prior::StandardNormal { .. } => std_normal_logprob_var(t, z),
            Prior::Hierarchical(h) => {
                let parts = h.block_logprob_vars(t, p, z)?;
                let mut acc = parts[0];
                for &v in &parts[1..] {
                    acc = t.add(acc, v)?;
                }
                Ok(acc)
            }
        }
    }

    pub fn decoder_mean_var(&self, t: &mut Tape, p: &[Var], z: Var) -> Result<Var> {
        self.decoder.forward(t, p, z)
    }

    /// `B×1` observation log-likelihood of `x` given decoder output `mean`.
    pub fn logpx_from_mean_var(&self, t: &mut Tape, x: Var, mean: Var) -> Result<Var> {
        match self.likelihood {
            LikelihoodKind::Bernoulli => bernoulli_logprob_var(t, x, mean),
            LikelihoodKind::Gaussian { sigma } => {
                let d = t.value(mean).cols();
                let ls = t.constant(Tensor::full(&[1, d], sigma.ln()));
                diag_logprob_var(t, x, mean, ls)
            }
        }
    }

    pub fn logpx_var(&self, t: &mut Tape, p: &[Var], x: Var, z: Var) -> Result<Var> {
        let mean = self.decoder_mean_var(t, p, z)?;
        self.logpx_from_mean_var(t, x, mean)
    }

    /// Maps standard-normal noise to a prior draw.
    pub fn prior_sample_var(&self, t: &mut Tape, p: &[Var], eps: Var) -> Result<Var> {
        match &self.prior {
            Prior::StandardNormal { .. } => Ok(eps),
            Prior::Hierarchical(h) => h.sample_var(t, p, eps),
        }
    }

    /// Ancestral pass from explicit noise. `x_noise` holds uniforms (Bernoulli)
    /// or standard normals (Gaussian) for the observation; without it `x`
    /// is the decoder mean.
    pub fn ancestral_sample_from_noise(
        &self,
        store: &ParamStore,
        eps: &Tensor,
        x_noise: Option<&Tensor>,
    ) -> Result<AncestralSample> {
        let n = eps.rows();
        let mut t = Tape::new();
        let p = store.bind(&mut t, false);
        let e = t.constant(eps.clone());
        let z = self.prior_sample_var(&mut t, &p, e)?;
        let mean = self.decoder_mean_var(&mut t, &p, z)?;
        let x_mean = t.value(mean).clone();
        let x = match (x_noise, self.likelihood) {
            (None, _) => x_mean.clone(),
            (Some(u), LikelihoodKind::Bernoulli) => x_mean.zip_with(u, "sample", |pr, u| if u < pr { 1.0 } else { 0.0 })?,
            (Some(g), LikelihoodKind::Gaussian { sigma }) => x_mean.zip_with(g, "sample", |m, g| m + sigma * g)?,
        };
        let xv = t.constant(x.clone());
        let lpx = self.logpx_from_mean_var(&mut t, xv, mean)?;
        let (blocks, block_lp) = match &self.prior {
            Prior::StandardNormal { .. } => (vec![t.value(z).clone()], vec![std_normal_logprob_var(&mut t, z)?]),
            Prior::Hierarchical(h) => {
                let lps = h.block_logprob_vars(&mut t, &p, z)?;
                let zt = t.value(z).clone();
                let blocks = h
                    .blocks
                    .iter()
                    .map(|b| zt.slice(1, b.offset, b.dim))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                (blocks, lps)
            }
        };
        let block_logprobs: Vec<Vec<f64>> = block_lp.iter().map(|v| t.value(*v).data().to_vec()).collect();
        let logpx = t.value(lpx).data().to_vec();
        let log_joint = (0..n)
            .map(|r| block_logprobs.iter().map(|b| b[r]).sum::<f64>() + logpx[r])
            .collect();
        Ok(AncestralSample {
            blocks,
            z: t.value(z).clone(),
            x_mean,
            x,
            block_logprobs,
            logpx,
            log_joint,
        })
    }

    /// Ancestral sampling of `n` rows; when `sample_x` the observation is
    /// drawn from the likelihood, otherwise it is the decoder mean.
    pub fn ancestral_sample(&self, store: &ParamStore, n: usize, sample_x: bool, rng: &mut Rng) -> Result<AncestralSample> {
        let mut eps = Tensor::zeros(&[n, self.latent_dim()]);
        rng.fill_normal(eps.data_mut());
        let noise = sample_x.then(|| {
            let mut u = Tensor::zeros(&[n, self.data_dim]);
            match self.likelihood {
                LikelihoodKind::Bernoulli => u.data_mut().iter_mut().for_each(|v| *v = rng.uniform()),
                LikelihoodKind::Gaussian { .. } => rng.fill_normal(u.data_mut()),
            }
            u
        });
        self.ancestral_sample_from_noise(store, &eps, noise.as_ref())
    }
}

/// Draws `n` observations (or decoder means) from the generative model.
pub fn model_sample(gen: &GenerativeModel, store: &ParamStore, n: usize, sample_x: bool, rng: &mut Rng) -> Result<Tensor> {
    if n == 0 {
        return Ok(Tensor::zeros(&[0, gen.data_dim]));
    }
    Ok(gen.ancestral_sample(store, n, sample_x, rng)?.x)
}

/// Graph handles for the three ELBO terms over a batch, each `B×1`.
#[derive(Debug, Clone)]
pub struct TermVars {
    pub logpx: Var,
    pub logpz: Var,
    pub logqz: Var,
    pub flow: FlowVars,
}

/// Generative model, posterior and their shared parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Vae {
    pub spec: ModelSpec,
    pub gen: GenerativeModel,
    pub post: Posterior,
    pub params: ParamStore,
}

impl Vae {
    /// Builds and initializes a model; initial weights depend only on
    /// `spec.init_seed`.
    pub fn build(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::new(spec.init_seed).substream(tags::INIT, 0);
        let mut store = ParamStore::new();
        let post = Posterior::new(
            &mut store,
            spec.posterior_spec(),
            spec.data_dim,
            &spec.encoder_hidden,
            spec.activation,
            &mut rng,
        )?;
        let prior = match spec.prior {
            PriorFamily::StandardNormal => Prior::StandardNormal { dim: spec.latent_dim },
            PriorFamily::Hierarchical => {
                let (blocks, parents) = spec.prior_layout();
                Prior::Hierarchical(HierarchicalLatents::new(
                    &mut store,
                    &blocks,
                    &parents,
                    &spec.prior_hidden,
                    spec.activation,
                    &mut rng,
                )?)
            }
        };
        let mut widths = vec![spec.latent_dim];
        widths.extend_from_slice(&spec.decoder_hidden);
        widths.push(spec.data_dim);
        let out_act = match spec.likelihood {
            LikelihoodFamily::Bernoulli => Activation::Sigmoid,
            LikelihoodFamily::Gaussian => Activation::Linear,
        };
        let decoder = Decoder {
            mlp: Mlp::new(&mut store, "dec", &widths, spec.activation, out_act, &mut rng)?,
        };
        let gen = GenerativeModel {
            prior,
            decoder,
            likelihood: spec.likelihood_kind(),
            data_dim: spec.data_dim,
        };
        Ok(Vae {
            spec,
            gen,
            post,
            params: store,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    pub fn data_dim(&self) -> usize {
        self.spec.data_dim
    }

    /// `logpx`, `logpz`, `logqz` for a batch `x` and base noise `eps`.
    pub fn terms_var(&self, t: &mut Tape, p: &[Var], x: Var, eps: Var) -> Result<TermVars> {
        let flow = self.post.sample_and_logq_var(t, p, x, eps)?;
        let logpz = self.gen.logpz_var(t, p, flow.z)?;
        let logpx = self.gen.logpx_var(t, p, x, flow.z)?;
        Ok(TermVars {
            logpx,
            logpz,
            logqz: flow.log_q,
            flow,
        })
    }

    /// True for parameters of the inference model (encoder and flow).
    pub fn inference_mask(&self) -> Vec<bool> {
        self.params
            .names()
            .iter()
            .map(|n| n.starts_with("enc.") || n.starts_with("planar.") || n.starts_with("iaf."))
            .collect()
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.data_dim() {
            return Err(Error::InvalidArgument(format!(
                "expected a batch with {} columns, got shape {:?}",
                self.data_dim(),
                x.shape()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kahn_detects_cycles() {
        assert_eq!(topological_order(&[vec![], vec![0], vec![1]]).unwrap(), vec![0, 1, 2]);
        assert_eq!(topological_order(&[vec![1], vec![]]).unwrap(), vec![1, 0]);
        assert!(topological_order(&[vec![1], vec![0]]).is_err());
        assert!(topological_order(&[vec![0]]).is_err());
        assert!(topological_order(&[vec![3]]).is_err());
    }

    #[test]
    fn spec_kv_round_trip() {
        let mut spec = ModelSpec::default();
        for (k, v) in [
            ("posterior", "iaf"),
            ("iaf_steps", "3"),
            ("iaf_hidden", "8"),
            ("latent_dim", "4"),
            ("likelihood", "gaussian"),
            ("obs_sigma", "0.1"),
            ("prior", "hierarchical"),
            ("prior_blocks", "2,2"),
            ("prior_parents", "-;0"),
            ("decoder_hidden", ""),
        ] {
            assert!(spec.set(k, v).unwrap(), "{k}");
        }
        spec.validate().unwrap();
        let kv = spec.to_kv();
        let back = ModelSpec::from_kv(kv.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        assert_eq!(back, spec);

        let plain = ModelSpec::default();
        let kv = plain.to_kv();
        assert_eq!(ModelSpec::from_kv(kv.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap(), plain);
    }

    #[test]
    fn spec_rejects_bad_values() {
        let mut spec = ModelSpec::default();
        assert!(spec.set("iaf_steps", "0").is_err());
        assert!(spec.set("posterior", "radial").is_err());
        assert!(!spec.set("nonsense", "1").unwrap());
        spec.set("prior", "hierarchical").unwrap();
        spec.set("prior_blocks", "1,2").unwrap();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn zero_decoder_gives_half() {
        let spec = ModelSpec {
            latent_dim: 3,
            ..ModelSpec::default()
        };
        let mut vae = Vae::build(spec).unwrap();
        vae.gen.decoder.mlp.zero_output_layer(&mut vae.params);
        let xs = model_sample(&vae.gen, &vae.params, 5, false, &mut Rng::new(1)).unwrap();
        assert_eq!(xs.shape(), &[5, 16]);
        assert!(xs.data().iter().all(|&v| v == 0.5));
        let empty = model_sample(&vae.gen, &vae.params, 0, true, &mut Rng::new(1)).unwrap();
        assert_eq!(empty.shape(), &[0, 16]);
    }

    #[test]
    fn build_is_deterministic_in_init_seed() {
        let a = Vae::build(ModelSpec::default()).unwrap();
        let b = Vae::build(ModelSpec::default()).unwrap();
        assert_eq!(a.params, b.params);
        let c = Vae::build(ModelSpec {
            init_seed: 1,
            ..ModelSpec::default()
        })
        .unwrap();
        assert_ne!(a.params, c.params);
    }
}
