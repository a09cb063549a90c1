//! Datasets, IDX ingestion, binarization, checkpoints and metrics CSV.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use crate::objectives::{MetricsRow, ModelSpec, TrainConfig, TrainState, Vae};
use crate::optim::{OptimizerConfig, OptimizerKind, OptimizerState};
use crate::rng::{tags, Rng, RngState};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("bad IDX magic number {found:#010x}")]
    BadMagic { found: u32 },
    #[error("unsupported IDX element type {code:#04x} (only unsigned bytes are supported)")]
    UnsupportedType { code: u8 },
    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("trailing data: expected {expected} bytes, found {found}")]
    TrailingData { expected: usize, found: usize },
    #[error("IDX dimensions {dims:?} overflow")]
    DimOverflow { dims: Vec<u32> },
    #[error("value {value} at index {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("not a checkpoint file")]
    NotACheckpoint,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] crate::error::Error),
}

pub type DataResult<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Binary,
    Continuous,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N×D_x`
    pub items: Tensor,
    pub kind: DataKind,
}

impl Dataset {
    pub fn new(items: Tensor, kind: DataKind) -> DataResult<Self> {
        if items.rank() != 2 {
            return Err(DataError::Malformed(format!("dataset must be 2-d, got {:?}", items.shape())));
        }
        if kind == DataKind::Binary {
            if let Some((i, &v)) = items.data().iter().enumerate().find(|(_, &v)| v != 0.0 && v != 1.0) {
                return Err(DataError::OutOfRange { index: i, value: v });
            }
        }
        Ok(Dataset { items, kind })
    }

    pub fn len(&self) -> usize {
        self.items.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.items.cols()
    }

    /// Splits off the last `ceil(fraction·N)` rows as holdout, keeping at
    /// least one training row.
    pub fn split_holdout(&self, fraction: f64) -> (Tensor, Tensor) {
        let n = self.len();
        let mut h = (fraction * n as f64).ceil() as usize;
        if h >= n {
            h = n.saturating_sub(1);
        }
        let d = self.dim();
        let cut = (n - h) * d;
        let train = Tensor::new(vec![n - h, d], self.items.data()[..cut].to_vec()).expect("row split");
        let hold = Tensor::new(vec![h, d], self.items.data()[cut..].to_vec()).expect("row split");
        (train, hold)
    }
}

/// Copies of each bit in the widened toy patterns.
pub const TOY_REPEAT: usize = 8;

/// The 2-bit patterns 00, 01, 10, 11, each bit repeated 8 times (`D_x = 16`).
pub fn make_toy_four_points() -> Dataset {
    let mut rows = Vec::with_capacity(4);
    for pattern in 0..4u32 {
        let bits = [(pattern >> 1) & 1, pattern & 1];
        let row: Vec<f64> = bits
            .iter()
            .flat_map(|&b| std::iter::repeat(b as f64).take(TOY_REPEAT))
            .collect();
        rows.push(row);
    }
    Dataset::new(Tensor::from_rows(&rows).expect("equal rows"), DataKind::Binary).expect("binary")
}

/// `n` draws of `x = W z + σ ε` with `W` of shape `D_x×D_z`.
pub fn make_linear_gaussian_synthetic(w: &Tensor, sigma: f64, n: usize, rng: &mut Rng) -> DataResult<Dataset> {
    if !(sigma > 0.0) {
        return Err(crate::error::Error::InvalidArgument(format!("sigma must be positive, got {sigma}")).into());
    }
    let (dx, dz) = (w.rows(), w.cols());
    let mut data = Vec::with_capacity(n * dx);
    let mut z = vec![0.0; dz];
    let mut e = vec![0.0; dx];
    for _ in 0..n {
        rng.fill_normal(&mut z);
        rng.fill_normal(&mut e);
        for i in 0..dx {
            let wz: f64 = (0..dz).map(|j| w.get2(i, j) * z[j]).sum();
            data.push(wz + sigma * e[i]);
        }
    }
    Dataset::new(Tensor::new(vec![n, dx], data).expect("sized"), DataKind::Continuous)
}

/// Fixed `D_x×D_z` loading matrix for the built-in linear-Gaussian dataset.
pub fn default_lingauss_w(dx: usize, dz: usize, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed).substream(tags::DATA, 1);
    let mut w = Tensor::zeros(&[dx, dz]);
    rng.fill_normal(w.data_mut());
    w
}

const IDX_U8: u8 = 0x08;

/// Parses an in-memory IDX file of unsigned bytes, scaling values by 1/255.
pub fn parse_idx(bytes: &[u8]) -> DataResult<Tensor> {
    if bytes.len() < 4 {
        return Err(DataError::Truncated {
            expected: 4,
            found: bytes.len(),
        });
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    if bytes[0] != 0 || bytes[1] != 0 || bytes[3] == 0 {
        return Err(DataError::BadMagic { found: magic });
    }
    if bytes[2] != IDX_U8 {
        return Err(DataError::UnsupportedType { code: bytes[2] });
    }
    let ndims = bytes[3] as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(DataError::Truncated {
            expected: header,
            found: bytes.len(),
        });
    }
    let dims: Vec<u32> = (0..ndims)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")))
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .filter(|c| c.checked_add(header).is_some())
        .ok_or_else(|| DataError::DimOverflow { dims: dims.clone() })?;
    let expected = header + count;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DataError::TrailingData {
            expected,
            found: bytes.len(),
        });
    }
    let data = bytes[header..].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::new(dims.iter().map(|&d| d as usize).collect(), data).expect("count matches"))
}

pub fn load_idx(path: impl AsRef<Path>) -> DataResult<Tensor> {
    parse_idx(&fs::read(path)?)
}

/// Flattens everything after the first axis: `N×(d1·d2·…)`.
pub fn flatten_rows(t: &Tensor) -> Tensor {
    let n = t.shape().first().copied().unwrap_or(1);
    let d = if n == 0 { t.shape()[1..].iter().product() } else { t.len() / n };
    t.reshape(&[n, d]).expect("same length")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinarizeMode {
    /// `x ≥ 0.5 → 1`
    Threshold,
    /// `x → Bernoulli(x)`
    Stochastic,
}

pub fn binarize(data: &Tensor, mode: BinarizeMode, rng: &mut Rng) -> DataResult<Tensor> {
    if let Some((i, &v)) = data.data().iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(DataError::OutOfRange { index: i, value: v });
    }
    Ok(match mode {
        BinarizeMode::Threshold => data.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }),
        BinarizeMode::Stochastic => {
            let mut out = data.clone();
            for v in out.data_mut() {
                *v = if rng.uniform() < *v { 1.0 } else { 0.0 };
            }
            out
        }
    })
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LFLOWCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Generic checkpoint: text metadata plus named f64 tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Layout: magic, version (u32), meta length + `key=value` lines,
    /// section count, then per section name length + name, rank, u64 dims and
    /// little-endian f64 data; a CRC32 of everything before it closes the file.
    pub fn encode(&self) -> DataResult<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let mut meta = String::new();
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(DataError::Malformed(format!("metadata entry `{k}` cannot be encoded")));
            }
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> DataResult<Self> {
        if bytes.len() < CHECKPOINT_MAGIC.len() + 8 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(DataError::NotACheckpoint);
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(DataError::Checksum { stored, computed });
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(DataError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let meta_len = r.u32()? as usize;
        let meta_text = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| DataError::Malformed("metadata is not UTF-8".into()))?;
        let meta = meta_text
            .lines()
            .map(|l| {
                l.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| DataError::Malformed(format!("metadata line `{l}`")))
            })
            .collect::<DataResult<Vec<_>>>()?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| DataError::Malformed("section name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| DataError::Malformed("dimension too large".into()))?);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|c| c.checked_mul(8).is_some())
                .ok_or_else(|| DataError::Malformed(format!("section `{name}` is too large")))?;
            let raw = r.take(count * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| DataError::Malformed(e.to_string()))?;
            tensors.push((name, t));
        }
        if r.pos != body.len() {
            return Err(DataError::Malformed("unexpected bytes after the last section".into()));
        }
        Ok(Checkpoint { meta, tensors })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> DataResult<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| DataError::Malformed("section runs past the end of the file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> DataResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> DataResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> DataResult<()> {
    let bytes = ckpt.encode()?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> DataResult<Checkpoint> {
    Checkpoint::decode(&fs::read(path)?)
}

/// A full training checkpoint: model structure, run config, parameters,
/// optimizer state, RNG position and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingCheckpoint {
    pub spec: ModelSpec,
    pub config: TrainConfig,
    pub param_names: Vec<String>,
    pub params: Vec<Tensor>,
    pub state: TrainState,
    pub rng: RngState,
}

fn f64_meta(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn parse_f64_meta(s: &str) -> DataResult<f64> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|_| DataError::Malformed(format!("bad float field `{s}`")))
}

fn parse_meta<T: std::str::FromStr>(c: &Checkpoint, key: &str) -> DataResult<T> {
    c.meta(key)
        .ok_or_else(|| DataError::Malformed(format!("missing `{key}`")))?
        .parse()
        .map_err(|_| DataError::Malformed(format!("bad `{key}`")))
}

impl TrainingCheckpoint {
    pub fn capture(vae: &Vae, config: &TrainConfig, state: &TrainState) -> Self {
        TrainingCheckpoint {
            spec: vae.spec.clone(),
            config: config.clone(),
            param_names: vae.params.names().to_vec(),
            params: vae.params.values().to_vec(),
            state: state.clone(),
            rng: Rng::new(config.seed).state(),
        }
    }

    /// Rebuilds the model with the stored parameter values.
    pub fn restore_model(&self) -> DataResult<Vae> {
        let mut vae = Vae::build(self.spec.clone())?;
        vae.params.assign(&self.param_names, self.params.clone())?;
        Ok(vae)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = vec![];
        for (k, v) in self.spec.to_kv() {
            meta.push((format!("model.{k}"), v));
        }
        for (k, v) in self.config.to_kv() {
            meta.push((format!("train.{k}"), v));
        }
        let o = &self.state.optimizer;
        meta.extend([
            ("state.step".to_string(), self.state.step.to_string()),
            ("state.stopped_early".to_string(), self.state.stopped_early.to_string()),
            ("opt.kind".to_string(), o.config.kind.as_str().to_string()),
            ("opt.lr".to_string(), f64_meta(o.config.lr)),
            ("opt.beta1".to_string(), f64_meta(o.config.beta1)),
            ("opt.beta2".to_string(), f64_meta(o.config.beta2)),
            ("opt.eps".to_string(), f64_meta(o.config.eps)),
            ("opt.t".to_string(), o.t.to_string()),
            ("rng.seed".to_string(), self.rng.seed.to_string()),
            ("rng.stream".to_string(), self.rng.stream.to_string()),
            ("rng.word_pos".to_string(), self.rng.word_pos.to_string()),
        ]);
        let mut tensors: Vec<(String, Tensor)> = self
            .param_names
            .iter()
            .cloned()
            .map(|n| format!("param.{n}"))
            .zip(self.params.iter().cloned())
            .collect();
        for (n, m) in self.param_names.iter().zip(&o.m) {
            tensors.push((format!("opt.m.{n}"), m.clone()));
        }
        for (n, v) in self.param_names.iter().zip(&o.v) {
            tensors.push((format!("opt.v.{n}"), v.clone()));
        }
        tensors.push((
            "state.holdout_history".into(),
            Tensor::new(vec![self.state.holdout_history.len()], self.state.holdout_history.clone()).expect("1-d"),
        ));
        Checkpoint { meta, tensors }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> DataResult<Self> {
        let spec = ModelSpec::from_kv(
            c.meta
                .iter()
                .filter_map(|(k, v)| k.strip_prefix("model.").map(|k| (k, v.as_str()))),
        )?;
        let mut config = TrainConfig::default();
        for (k, v) in &c.meta {
            if let Some(k) = k.strip_prefix("train.") {
                match config.set(k, v) {
                    Ok(true) => {}
                    Ok(false) => return Err(DataError::Malformed(format!("unknown training key `{k}`"))),
                    Err(e) => return Err(DataError::Malformed(format!("{k}: {e}"))),
                }
            }
        }
        let kind = c
            .meta("opt.kind")
            .and_then(OptimizerKind::parse)
            .ok_or_else(|| DataError::Malformed("missing optimizer kind".into()))?;
        let f = |k: &str| parse_f64_meta(c.meta(k).ok_or_else(|| DataError::Malformed(format!("missing `{k}`")))?);
        let opt_config = OptimizerConfig {
            kind,
            lr: f("opt.lr")?,
            beta1: f("opt.beta1")?,
            beta2: f("opt.beta2")?,
            eps: f("opt.eps")?,
        };
        let mut param_names = vec![];
        let mut params = vec![];
        for (n, t) in &c.tensors {
            if let Some(n) = n.strip_prefix("param.") {
                param_names.push(n.to_string());
                params.push(t.clone());
            }
        }
        let moments = |prefix: &str| -> DataResult<Vec<Tensor>> {
            if kind == OptimizerKind::Sgd {
                return Ok(vec![]);
            }
            param_names
                .iter()
                .map(|n| {
                    c.tensor(&format!("{prefix}{n}"))
                        .cloned()
                        .ok_or_else(|| DataError::Malformed(format!("missing optimizer moment for `{n}`")))
                })
                .collect()
        };
        let optimizer = OptimizerState {
            config: opt_config,
            t: parse_meta(c, "opt.t")?,
            m: moments("opt.m.")?,
            v: moments("opt.v.")?,
        };
        let history = c
            .tensor("state.holdout_history")
            .map(|t| t.data().to_vec())
            .unwrap_or_default();
        Ok(TrainingCheckpoint {
            spec,
            config,
            param_names,
            params,
            state: TrainState {
                step: parse_meta(c, "state.step")?,
                optimizer,
                holdout_history: history,
                stopped_early: parse_meta(c, "state.stopped_early")?,
            },
            rng: RngState {
                seed: parse_meta(c, "rng.seed")?,
                stream: parse_meta(c, "rng.stream")?,
                word_pos: parse_meta(c, "rng.word_pos")?,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> DataResult<()> {
        save_checkpoint(path, &self.to_checkpoint())
    }

    pub fn load(path: impl AsRef<Path>) -> DataResult<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?)
    }
}

pub const METRICS_HEADER: &str = "step,elbo,logpx,logpz,logqz,kl_est,grad_norm,beta";

fn fmt_f(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

pub fn metrics_csv(history: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in history {
        let fields = [r.elbo, r.logpx, r.logpz, r.logqz, r.kl_est, r.grad_norm, r.beta];
        s.push_str(&r.step.to_string());
        for v in fields {
            s.push(',');
            s.push_str(&fmt_f(v));
        }
        s.push('\n');
    }
    s
}

pub fn write_metrics(path: impl AsRef<Path>, history: &[MetricsRow]) -> DataResult<()> {
    fs::write(path, metrics_csv(history))?;
    Ok(())
}

pub fn parse_metrics(text: &str) -> DataResult<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(DataError::Malformed("metrics header".into()));
    }
    lines
        .map(|l| {
            let bad = || DataError::Malformed(format!("metrics row `{l}`"));
            let cols: Vec<&str> = l.split(',').collect();
            if cols.len() != 8 {
                return Err(bad());
            }
            let f = |i: usize| cols[i].parse::<f64>().map_err(|_| bad());
            Ok(MetricsRow {
                step: cols[0].parse().map_err(|_| bad())?,
                elbo: f(1)?,
                logpx: f(2)?,
                logpz: f(3)?,
                logqz: f(4)?,
                kl_est: f(5)?,
                grad_norm: f(6)?,
                beta: f(7)?,
            })
        })
        .collect()
}

pub fn read_metrics(path: impl AsRef<Path>) -> DataResult<Vec<MetricsRow>> {
    parse_metrics(&fs::read_to_string(path)?)
}
