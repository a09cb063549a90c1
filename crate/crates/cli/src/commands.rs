use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use latentflow::data_io::{
    binarize, default_lingauss_w, flatten_rows, load_idx, make_linear_gaussian_synthetic, make_toy_four_points, write_metrics,
    BinarizeMode, DataKind, Dataset, TrainingCheckpoint,
};
use latentflow::objectives::{
    draw_noise, elbo_samples, exact_marginal_linear_gaussian, iwae_with_noise, objective_and_gradient, objective_grad_check,
    objective_value, score_function_gradient_with_noise, train_aevb, KlMode, LikelihoodFamily, ModelSpec, PosteriorFamily,
    PriorFamily, TrainConfig, TrainError, Vae,
};
use latentflow::rng::tags;
use latentflow::{Rng, Tensor};
use rayon::prelude::*;
use serde_json::json;

use crate::config::{Binarize, Command, DatasetSource, RunSpec};
use crate::error::{io_err, CliError, CliResult};

/// Largest latent dimension `compare-estimators` accepts.
pub const COMPARE_MAX_LATENT: usize = 4;
/// Relative error at or above which `gradcheck` fails.
pub const GRADCHECK_TOL: f64 = 1e-5;
const GRADCHECK_STEP: f64 = 1e-5;

pub fn run(spec: &RunSpec) -> CliResult<()> {
    match spec.command {
        Command::Train => cmd_train(spec),
        Command::EvalElbo => cmd_eval(spec, None),
        Command::EstimateLoglik => cmd_eval(spec, Some(spec.train.iwae_samples)),
        Command::Sample => cmd_sample(spec),
        Command::Gradcheck => cmd_gradcheck(spec),
        Command::CompareEstimators => cmd_compare_estimators(spec),
    }
}

struct Loaded {
    data: Dataset,
    /// Loading matrix of the linear-Gaussian generator.
    lingauss_w: Option<Tensor>,
}

fn load_dataset(spec: &RunSpec, data_dim: usize, latent_dim: usize) -> CliResult<Loaded> {
    Ok(match &spec.dataset {
        DatasetSource::Toy4 => Loaded {
            data: make_toy_four_points(),
            lingauss_w: None,
        },
        DatasetSource::Lingauss => {
            let w = default_lingauss_w(data_dim, latent_dim, spec.data_seed);
            let mut rng = Rng::new(spec.data_seed).substream(tags::DATA, 0);
            Loaded {
                data: make_linear_gaussian_synthetic(&w, spec.lingauss_sigma, spec.lingauss_n, &mut rng)?,
                lingauss_w: Some(w),
            }
        }
        DatasetSource::Idx(path) => {
            let raw = flatten_rows(&load_idx(path).map_err(|e| io_err(path, e))?);
            let mut rng = Rng::new(spec.data_seed).substream(tags::BINARIZE, 0);
            let data = match spec.binarize {
                Binarize::Threshold => Dataset::new(binarize(&raw, BinarizeMode::Threshold, &mut rng)?, DataKind::Binary)?,
                Binarize::Stochastic => Dataset::new(binarize(&raw, BinarizeMode::Stochastic, &mut rng)?, DataKind::Binary)?,
                Binarize::Off => Dataset::new(raw, DataKind::Continuous)?,
            };
            Loaded { data, lingauss_w: None }
        }
    })
}

fn check_dims(vae: &Vae, data: &Dataset) -> CliResult<()> {
    if data.dim() != vae.data_dim() {
        return Err(CliError::Validation(format!(
            "dataset has {} columns but the model expects {}",
            data.dim(),
            vae.data_dim()
        )));
    }
    if data.is_empty() {
        return Err(CliError::Validation("dataset is empty".into()));
    }
    Ok(())
}

/// Builds a model from the configuration, sized to the dataset.
fn fresh_model(spec: &RunSpec) -> CliResult<(Vae, Loaded)> {
    let mut model = spec.model.clone();
    let loaded = load_dataset(spec, model.data_dim, model.latent_dim)?;
    if spec.is_explicit("data_dim") && model.data_dim != loaded.data.dim() {
        return Err(CliError::Validation(format!(
            "data_dim={} but the dataset has {} columns",
            model.data_dim,
            loaded.data.dim()
        )));
    }
    model.data_dim = loaded.data.dim();
    let vae = Vae::build(model)?;
    Ok((vae, loaded))
}

/// Loads a checkpoint and the dataset matching its model.
fn checkpoint_model(spec: &RunSpec, path: &Path) -> CliResult<(TrainingCheckpoint, Vae, Loaded)> {
    let ck = TrainingCheckpoint::load(path).map_err(|e| match CliError::from(e) {
        CliError::Io(msg) => io_err(path, msg),
        other => other,
    })?;
    spec.check_model_overrides(&ck.spec)?;
    let vae = ck.restore_model()?;
    let loaded = load_dataset(spec, vae.spec.data_dim, vae.spec.latent_dim)?;
    check_dims(&vae, &loaded.data)?;
    Ok((ck, vae, loaded))
}

fn model_for_eval(spec: &RunSpec) -> CliResult<(Vae, TrainConfig, Loaded)> {
    match &spec.checkpoint {
        Some(path) => {
            let (ck, vae, loaded) = checkpoint_model(spec, path)?;
            let cfg = spec.train_overrides(&ck.config)?;
            Ok((vae, cfg, loaded))
        }
        None => {
            let (vae, loaded) = fresh_model(spec)?;
            Ok((vae, spec.train.clone(), loaded))
        }
    }
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Per-datapoint log-likelihood bound. Row `i` uses its own noise stream,
/// so `L = 1` reproduces the single-sample ELBO of `eval-elbo`.
fn per_datapoint(vae: &Vae, data: &Tensor, seed: u64, l: Option<usize>) -> CliResult<Vec<f64>> {
    let master = Rng::new(seed);
    (0..data.rows())
        .into_par_iter()
        .map(|i| {
            let mut rng = master.substream(tags::EVAL_NOISE, i as u64);
            let x = Tensor::row(data.row_slice(i));
            let v = match l {
                None => elbo_samples(vae, &x, &draw_noise(vae, 1, &mut rng))?[0],
                Some(l) => iwae_with_noise(vae, &x, &draw_noise(vae, l, &mut rng))?,
            };
            Ok(v)
        })
        .collect::<latentflow::Result<Vec<f64>>>()
        .map_err(CliError::from)
}

fn cmd_train(spec: &RunSpec) -> CliResult<()> {
    let (mut vae, cfg, loaded, resume) = match &spec.resume {
        Some(path) => {
            let (ck, vae, loaded) = checkpoint_model(spec, path)?;
            let cfg = spec.train_overrides(&ck.config)?;
            (vae, cfg, loaded, Some(ck.state))
        }
        None => {
            let (vae, loaded) = fresh_model(spec)?;
            (vae, spec.train.clone(), loaded, None)
        }
    };
    let (train, holdout) = loaded.data.split_holdout(cfg.holdout_fraction);
    let holdout = (holdout.rows() > 0).then_some(holdout);
    ensure_dir(&spec.out)?;
    let metrics_path = spec.out.join("metrics.csv");
    let ckpt_path = spec.out.join("checkpoint.ckpt");

    let outcome = match train_aevb(&mut vae, &train, holdout.as_ref(), &cfg, resume) {
        Ok(o) => o,
        Err(TrainError::Diverged {
            step,
            reason,
            last_good,
            metrics,
        }) => {
            write_metrics(&metrics_path, &metrics).map_err(|e| io_err(&metrics_path, e))?;
            let good_path = spec.out.join("last_good.ckpt");
            vae.params.values_mut().clone_from_slice(&last_good.params);
            TrainingCheckpoint::capture(&vae, &cfg, &last_good.state)
                .save(&good_path)
                .map_err(|e| io_err(&good_path, e))?;
            return Err(CliError::Diverged(format!(
                "training diverged at step {step}: {reason}; last good state saved to {}",
                good_path.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    write_metrics(&metrics_path, &outcome.metrics).map_err(|e| io_err(&metrics_path, e))?;
    TrainingCheckpoint::capture(&vae, &cfg, &outcome.state)
        .save(&ckpt_path)
        .map_err(|e| io_err(&ckpt_path, e))?;

    let train_elbo = mean(&per_datapoint(&vae, &train, cfg.seed, None)?);
    let holdout_elbo = match &holdout {
        Some(h) => Some(mean(&per_datapoint(&vae, h, cfg.seed, None)?)),
        None => None,
    };
    let summary = json!({
        "command": "train",
        "steps": outcome.state.step,
        "stopped_early": outcome.state.stopped_early,
        "train_elbo": train_elbo,
        "holdout_elbo": holdout_elbo,
        "metrics": metrics_path,
        "checkpoint": ckpt_path,
    });
    write_file(&spec.out.join("summary.json"), &format!("{summary:#}\n"))?;
    if spec.json {
        println!("{summary}");
    } else {
        println!("steps completed  {}", outcome.state.step);
        if outcome.state.stopped_early {
            println!("stopped early    holdout ELBO stopped improving");
        }
        println!("train ELBO       {train_elbo:.6}");
        if let Some(h) = holdout_elbo {
            println!("holdout ELBO     {h:.6}");
        }
        println!("metrics          {}", metrics_path.display());
        println!("checkpoint       {}", ckpt_path.display());
    }
    Ok(())
}

fn cmd_eval(spec: &RunSpec, l: Option<usize>) -> CliResult<()> {
    if spec.checkpoint.is_none() {
        return Err(CliError::Validation("--checkpoint is required".into()));
    }
    let (vae, cfg, loaded) = model_for_eval(spec)?;
    let values = per_datapoint(&vae, &loaded.data.items, cfg.seed, l)?;
    let m = mean(&values);
    let exact = match (&loaded.lingauss_w, vae.spec.likelihood) {
        (Some(w), LikelihoodFamily::Gaussian) => Some(
            (0..loaded.data.len())
                .map(|i| exact_marginal_linear_gaussian(loaded.data.items.row_slice(i), w, spec.lingauss_sigma))
                .collect::<latentflow::Result<Vec<f64>>>()?,
        ),
        _ => None,
    };
    let label = match l {
        None => "elbo".to_string(),
        Some(l) => format!("iwae_L{l}"),
    };
    if spec.json {
        let mut out = json!({
            "command": if l.is_some() { "estimate-loglik" } else { "eval-elbo" },
            "seed": cfg.seed,
            "values": values,
            "mean": m,
        });
        if let Some(l) = l {
            out["L"] = json!(l);
        }
        if let Some(e) = &exact {
            out["generator_logpx"] = json!(e);
            out["generator_logpx_mean"] = json!(mean(e));
        }
        println!("{out}");
    } else {
        let mut s = String::new();
        match &exact {
            Some(e) => {
                let _ = writeln!(s, "index {label} generator_logpx");
                for (i, (v, x)) in values.iter().zip(e).enumerate() {
                    let _ = writeln!(s, "{i} {v:.10} {x:.10}");
                }
                let _ = writeln!(s, "mean {m:.10} {:.10}", mean(e));
            }
            None => {
                let _ = writeln!(s, "index {label}");
                for (i, v) in values.iter().enumerate() {
                    let _ = writeln!(s, "{i} {v:.10}");
                }
                let _ = writeln!(s, "mean {m:.10}");
            }
        }
        print!("{s}");
    }
    Ok(())
}

fn cmd_sample(spec: &RunSpec) -> CliResult<()> {
    let (vae, cfg, _) = model_for_eval(spec)?;
    let n = spec.samples.unwrap_or(16);
    let mut rng = Rng::new(cfg.seed).substream(tags::SAMPLE, 0);
    let s = vae.gen.ancestral_sample(&vae.params, n, true, &mut rng)?;
    let (dz, dx) = (s.z.cols(), s.x.cols());
    let mut csv = String::new();
    let header: Vec<String> = (0..dz)
        .map(|j| format!("z{j}"))
        .chain((0..dx).map(|j| format!("x{j}")))
        .chain(std::iter::once("log_joint".to_string()))
        .collect();
    csv.push_str(&header.join(","));
    csv.push('\n');
    for r in 0..n {
        let fields: Vec<String> = s
            .z
            .row_slice(r)
            .iter()
            .chain(s.x.row_slice(r))
            .chain(std::iter::once(&s.log_joint[r]))
            .map(|v| format!("{v:.16e}"))
            .collect();
        csv.push_str(&fields.join(","));
        csv.push('\n');
    }
    let path = spec.out.join("samples.csv");
    write_file(&path, &csv)?;
    if spec.json {
        println!("{}", json!({ "command": "sample", "n": n, "path": path }));
    } else {
        println!("wrote {n} samples to {}", path.display());
    }
    Ok(())
}

struct GradCase {
    name: String,
    model: ModelSpec,
    mode: KlMode,
    beta: f64,
}

fn gradcheck_cases(seed: u64) -> Vec<GradCase> {
    let base = ModelSpec {
        data_dim: 6,
        latent_dim: 4,
        encoder_hidden: vec![5],
        decoder_hidden: vec![5],
        flow_steps: 2,
        iaf_hidden: vec![6],
        context_dim: 3,
        init_seed: seed,
        ..ModelSpec::default()
    };
    let families = [
        PosteriorFamily::Diag,
        PosteriorFamily::FullCov,
        PosteriorFamily::Planar,
        PosteriorFamily::Iaf,
    ];
    let mut cases = vec![];
    for fam in families {
        let model = ModelSpec {
            posterior: fam,
            ..base.clone()
        };
        cases.push(GradCase {
            name: format!("{}/elbo", fam.as_str()),
            model: model.clone(),
            mode: KlMode::Sampled,
            beta: 1.0,
        });
        cases.push(GradCase {
            name: format!("{}/annealed", fam.as_str()),
            model,
            mode: KlMode::Sampled,
            beta: 0.3,
        });
    }
    cases.push(GradCase {
        name: "diag/free-bits".into(),
        model: base.clone(),
        // lambda is placed between the group KLs at run time
        mode: KlMode::FreeBits { lambda: 0.0, groups: 2 },
        beta: 1.0,
    });
    cases.push(GradCase {
        name: "iaf/hierarchical-prior".into(),
        model: ModelSpec {
            posterior: PosteriorFamily::Iaf,
            prior: PriorFamily::Hierarchical,
            prior_blocks: vec![2, 2],
            prior_parents: vec![vec![], vec![0]],
            prior_hidden: vec![3],
            ..base.clone()
        },
        mode: KlMode::Sampled,
        beta: 1.0,
    });
    cases.push(GradCase {
        name: "planar/gaussian-likelihood".into(),
        model: ModelSpec {
            posterior: PosteriorFamily::Planar,
            likelihood: LikelihoodFamily::Gaussian,
            obs_sigma: 0.7,
            ..base
        },
        mode: KlMode::Sampled,
        beta: 1.0,
    });
    cases
}

struct GradResult {
    name: String,
    max_rel_error: f64,
    worst: String,
}

fn run_grad_case(case: &GradCase, seed: u64) -> CliResult<GradResult> {
    let vae = Vae::build(case.model.clone())?;
    let master = Rng::new(seed);
    let mut data_rng = master.substream(tags::DATA, 0);
    let mut x = Tensor::zeros(&[3, case.model.data_dim]);
    for v in x.data_mut() {
        *v = match case.model.likelihood {
            LikelihoodFamily::Bernoulli => (data_rng.uniform() < 0.5) as u8 as f64,
            LikelihoodFamily::Gaussian => data_rng.normal(),
        };
    }
    let eps = draw_noise(&vae, 3, &mut master.substream(tags::EVAL_NOISE, 0));
    let mode = match case.mode {
        KlMode::FreeBits { groups, .. } => {
            let (_, report) = objective_value(&vae, &x, &eps, KlMode::FreeBits { lambda: 0.0, groups }, 1.0)?;
            let lo = report.kl_groups.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = report.kl_groups.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            KlMode::FreeBits {
                lambda: 0.5 * (lo + hi),
                groups,
            }
        }
        m => m,
    };
    let report = objective_grad_check(&vae, &x, &eps, mode, case.beta, GRADCHECK_STEP)?;
    let worst = match report.worst {
        Some((p, k)) => format!("{}[{k}]", vae.params.names()[p]),
        None => "-".into(),
    };
    Ok(GradResult {
        name: case.name.clone(),
        max_rel_error: report.max_rel_error,
        worst,
    })
}

fn cmd_gradcheck(spec: &RunSpec) -> CliResult<()> {
    let seed = spec.train.seed;
    let cases = gradcheck_cases(seed);
    let results = cases
        .par_iter()
        .map(|c| run_grad_case(c, seed))
        .collect::<CliResult<Vec<_>>>()?;
    let failed: Vec<&GradResult> = results.iter().filter(|r| !(r.max_rel_error < GRADCHECK_TOL)).collect();
    if spec.json {
        let rows: Vec<_> = results
            .iter()
            .map(|r| {
                json!({
                    "combination": r.name,
                    "max_rel_error": r.max_rel_error,
                    "worst_parameter": r.worst,
                    "pass": r.max_rel_error < GRADCHECK_TOL,
                })
            })
            .collect();
        println!("{}", json!({ "command": "gradcheck", "seed": seed, "tolerance": GRADCHECK_TOL, "results": rows }));
    } else {
        let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
        for r in &results {
            let verdict = if r.max_rel_error < GRADCHECK_TOL { "ok" } else { "FAIL" };
            println!("{:<width$}  max rel err {:.3e}  worst {}  {verdict}", r.name, r.max_rel_error, r.worst);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        let names: Vec<&str> = failed.iter().map(|r| r.name.as_str()).collect();
        Err(CliError::Validation(format!(
            "gradient check failed for {} of {} combinations: {}",
            failed.len(),
            results.len(),
            names.join(", ")
        )))
    }
}

/// Running mean and sum of squared deviations per coordinate.
#[derive(Clone)]
struct Moments {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(dim: usize) -> Self {
        Moments {
            n: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1.0;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / self.n;
            *s += d * (v - *m);
        }
    }

    fn merge(&mut self, other: &Moments) {
        let n = self.n + other.n;
        if other.n == 0.0 {
            return;
        }
        for i in 0..self.mean.len() {
            let d = other.mean[i] - self.mean[i];
            self.mean[i] += d * other.n / n;
            self.m2[i] += other.m2[i] + d * d * self.n * other.n / n;
        }
        self.n = n;
    }

    fn var(&self, i: usize) -> f64 {
        self.m2[i] / (self.n - 1.0)
    }
}

fn cmd_compare_estimators(spec: &RunSpec) -> CliResult<()> {
    let (vae, cfg, loaded) = model_for_eval(spec)?;
    if vae.latent_dim() > COMPARE_MAX_LATENT {
        return Err(CliError::Validation(format!(
            "compare-estimators needs latent_dim <= {COMPARE_MAX_LATENT}, got {}",
            vae.latent_dim()
        )));
    }
    if !matches!(vae.spec.posterior, PosteriorFamily::Diag | PosteriorFamily::FullCov) {
        return Err(CliError::Validation(format!(
            "compare-estimators needs a diag or fullcov posterior, got {}",
            vae.spec.posterior.as_str()
        )));
    }
    let n = spec.samples.unwrap_or(5000);
    let x = Tensor::row(loaded.data.items.row_slice(0));
    let mask = vae.inference_mask();
    let coords: Vec<(usize, usize)> = mask
        .iter()
        .enumerate()
        .filter(|(_, m)| **m)
        .flat_map(|(p, _)| (0..vae.params.values()[p].len()).map(move |k| (p, k)))
        .collect();
    let flatten = |g: &[Tensor]| -> Vec<f64> { coords.iter().map(|&(p, k)| g[p].data()[k]).collect() };
    let master = Rng::new(cfg.seed);
    const CHUNK: usize = 64;
    let chunks: Vec<[Moments; 3]> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = [Moments::new(coords.len()), Moments::new(coords.len()), Moments::new(coords.len())];
            for k in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let eps = draw_noise(&vae, 1, &mut master.substream(tags::ESTIMATOR, k as u64));
                let r = flatten(&objective_and_gradient(&vae, &x, &eps, KlMode::Sampled, 1.0)?.grads);
                let s = flatten(&score_function_gradient_with_noise(&vae, &x, &eps)?);
                let d: Vec<f64> = s.iter().zip(&r).map(|(a, b)| a - b).collect();
                acc[0].push(&r);
                acc[1].push(&s);
                acc[2].push(&d);
            }
            Ok(acc)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut total = [Moments::new(coords.len()), Moments::new(coords.len()), Moments::new(coords.len())];
    for c in &chunks {
        for (t, m) in total.iter_mut().zip(c) {
            t.merge(m);
        }
    }
    let [reparam, score, diff] = total;

    let mut csv = String::from("param,entry,reparam_mean,reparam_var,score_mean,score_var,diff_se,z\n");
    let (mut max_z, mut within, mut var_r, mut var_s) = (0.0f64, 0usize, 0.0, 0.0);
    for (i, &(p, k)) in coords.iter().enumerate() {
        let se = (diff.var(i) / diff.n).sqrt();
        let z = if se > 0.0 { diff.mean[i] / se } else { 0.0 };
        max_z = max_z.max(z.abs());
        within += (z.abs() <= 3.0) as usize;
        var_r += reparam.var(i);
        var_s += score.var(i);
        let _ = writeln!(
            csv,
            "{},{k},{:.16e},{:.16e},{:.16e},{:.16e},{se:.16e},{z:.16e}",
            vae.params.names()[p],
            reparam.mean[i],
            reparam.var(i),
            score.mean[i],
            score.var(i)
        );
    }
    let ratio = var_s / var_r;
    let path = spec.out.join("compare_estimators.csv");
    write_file(&path, &csv)?;
    if spec.json {
        println!(
            "{}",
            json!({
                "command": "compare-estimators",
                "samples": n,
                "coordinates": coords.len(),
                "within_3se": within,
                "max_abs_z": max_z,
                "variance_ratio": ratio,
                "path": path,
            })
        );
    } else {
        println!("samples              {n}");
        println!("coordinates          {}", coords.len());
        println!("means within 3 SE    {within}/{}", coords.len());
        println!("max |z|              {max_z:.3}");
        println!("variance ratio       {ratio:.3} (score / reparameterized)");
        println!("per-coordinate CSV   {}", path.display());
    }
    Ok(())
}
