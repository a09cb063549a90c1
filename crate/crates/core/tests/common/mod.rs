#![allow(dead_code)]

use latentflow::objectives::{LikelihoodFamily, ModelSpec, PosteriorFamily, Vae};
use latentflow::Tensor;
use nalgebra::DMatrix;

pub fn to_na(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

/// Linear-Gaussian model `x = W z + σ ε` with a linear encoder set to the
/// exact posterior mean and a diagonal scale of `inflate · sqrt(diag S)`.
pub fn lingauss_vae(w: &Tensor, sigma: f64, inflate: f64) -> Vae {
    let (dx, dz) = (w.rows(), w.cols());
    let spec = ModelSpec {
        data_dim: dx,
        latent_dim: dz,
        encoder_hidden: vec![],
        decoder_hidden: vec![],
        likelihood: LikelihoodFamily::Gaussian,
        obs_sigma: sigma,
        posterior: PosteriorFamily::Diag,
        ..ModelSpec::default()
    };
    let mut vae = Vae::build(spec).unwrap();
    let wn = to_na(w);
    let prec = DMatrix::<f64>::identity(dz, dz) + wn.transpose() * &wn / (sigma * sigma);
    let s = prec.try_inverse().unwrap();
    let a = &wn * &s / (sigma * sigma);

    let mut enc_w = Tensor::zeros(&[dx, 2 * dz]);
    let mut enc_b = Tensor::zeros(&[1, 2 * dz]);
    for i in 0..dx {
        for j in 0..dz {
            enc_w.set2(i, j, a[(i, j)]);
        }
    }
    for j in 0..dz {
        enc_b.set2(0, dz + j, (inflate * s[(j, j)].sqrt()).ln());
    }
    let store = &mut vae.params;
    *store.get_mut(store.id("enc.l0.w").unwrap()) = enc_w;
    *store.get_mut(store.id("enc.l0.b").unwrap()) = enc_b;
    *store.get_mut(store.id("dec.l0.w").unwrap()) = w.transpose().unwrap();
    *store.get_mut(store.id("dec.l0.b").unwrap()) = Tensor::zeros(&[1, dx]);
    vae
}

/// Central-difference Jacobian `J[i][j] = ∂f_i/∂x_j`.
pub fn numeric_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Vec<Vec<f64>> {
    let n_out = f(x).len();
    let mut jac = vec![vec![0.0; x.len()]; n_out];
    let mut xp = x.to_vec();
    for j in 0..x.len() {
        xp[j] = x[j] + h;
        let fp = f(&xp);
        xp[j] = x[j] - h;
        let fm = f(&xp);
        xp[j] = x[j];
        for i in 0..n_out {
            jac[i][j] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

pub fn log_abs_det(jac: &[Vec<f64>]) -> f64 {
    let n = jac.len();
    let m = DMatrix::from_fn(n, n, |i, j| jac[i][j]);
    m.determinant().abs().ln()
}

/// `log N(z; mean, cov)` from an explicit inverse and determinant.
pub fn dense_gaussian_logpdf(z: &[f64], mean: &[f64], cov: &DMatrix<f64>) -> f64 {
    let n = z.len();
    let d = nalgebra::DVector::from_fn(n, |i, _| z[i] - mean[i]);
    let inv = cov.clone().try_inverse().unwrap();
    let quad = (d.transpose() * inv * &d)[(0, 0)];
    -0.5 * quad - 0.5 * cov.determinant().ln() - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
}

pub fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Compares `values` bit-for-bit with `tests/golden/<name>.txt`. With
/// `LATENTFLOW_BLESS=1` the file is (re)written instead.
pub fn assert_golden(name: &str, values: &[f64]) {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(format!("{name}.txt"));
    if std::env::var_os("LATENTFLOW_BLESS").is_some() {
        let text: String = values.iter().map(|v| format!("{v:.17e}\n")).collect();
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, text).unwrap();
        return;
    }
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let golden: Vec<f64> = text.lines().map(|l| l.trim().parse().unwrap()).collect();
    assert_eq!(golden.len(), values.len(), "{name}: length");
    for (i, (g, v)) in golden.iter().zip(values).enumerate() {
        assert_eq!(g.to_bits(), v.to_bits(), "{name}[{i}]: golden {g:e}, got {v:e}");
    }
}
