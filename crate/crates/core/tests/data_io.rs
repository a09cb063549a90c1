mod common;

use common::*;
use latentflow::data_io::*;
use latentflow::objectives::{train_aevb, MetricsRow, ModelSpec, PosteriorFamily, TrainConfig, Vae};
use latentflow::{Rng, Tensor};
use proptest::prelude::*;

fn idx_bytes(dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 0x08, dims.len() as u8];
    for d in dims {
        b.extend_from_slice(&d.to_be_bytes());
    }
    b.extend_from_slice(payload);
    b
}

#[test]
fn idx_round_trip_and_errors() {
    let payload: Vec<u8> = (0..12).map(|i| (i * 20) as u8).collect();
    let t = parse_idx(&idx_bytes(&[2, 2, 3], &payload)).unwrap();
    assert_eq!(t.shape(), &[2, 2, 3]);
    assert_eq!(t.data()[5], 100.0 / 255.0);
    let flat = flatten_rows(&t);
    assert_eq!(flat.shape(), &[2, 6]);

    let ok = idx_bytes(&[2, 3], &payload[..6]);
    assert!(matches!(parse_idx(&ok[..ok.len() - 1]), Err(DataError::Truncated { expected: 18, found: 17 })));
    let mut long = ok.clone();
    long.push(0);
    assert!(matches!(parse_idx(&long), Err(DataError::TrailingData { .. })));
    assert!(matches!(parse_idx(&ok[..6]), Err(DataError::Truncated { expected: 12, .. })));
    let mut wrong_type = ok.clone();
    wrong_type[2] = 0x0D;
    assert!(matches!(parse_idx(&wrong_type), Err(DataError::UnsupportedType { code: 0x0D })));
    let huge = idx_bytes(&[u32::MAX, u32::MAX, u32::MAX], &[]);
    assert!(matches!(parse_idx(&huge), Err(DataError::DimOverflow { .. }) | Err(DataError::Truncated { .. })));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.idx");
    std::fs::write(&path, &ok).unwrap();
    assert_eq!(load_idx(&path).unwrap(), parse_idx(&ok).unwrap());
    assert!(matches!(load_idx(dir.path().join("missing")), Err(DataError::Io(_))));
}

proptest! {
    #[test]
    fn idx_rejects_any_bad_magic(b0 in 0u8..=255, b1 in 0u8..=255, b3 in 0u8..=255) {
        prop_assume!(b0 != 0 || b1 != 0 || b3 == 0);
        let mut bytes = idx_bytes(&[1], &[7]);
        bytes[0] = b0;
        bytes[1] = b1;
        bytes[3] = b3;
        prop_assert!(matches!(parse_idx(&bytes), Err(DataError::BadMagic { .. })), "{:?}", &bytes[..4]);
    }

    #[test]
    fn idx_never_panics(bytes in prop::collection::vec(0u8..=255, 0..64)) {
        let _ = parse_idx(&bytes);
    }

    #[test]
    fn checkpoint_round_trips(
        keys in prop::collection::vec("[a-z_]{1,8}", 0..4),
        vals in prop::collection::vec(prop::num::f64::ANY, 1..20),
        rows in 1usize..4,
    ) {
        let meta = keys.iter().enumerate().map(|(i, k)| (format!("{k}{i}"), format!("v={i}"))).collect();
        let n = vals.len() / rows * rows;
        let t = Tensor::new(vec![rows, n / rows], vals[..n].to_vec()).unwrap();
        let c = Checkpoint { meta, tensors: vec![("a".into(), t), ("b".into(), Tensor::zeros(&[0, 2]))] };
        let back = Checkpoint::decode(&c.encode().unwrap()).unwrap();
        prop_assert_eq!(&back.meta, &c.meta);
        for ((na, ta), (nb, tb)) in back.tensors.iter().zip(&c.tensors) {
            prop_assert_eq!(na, nb);
            prop_assert_eq!(ta.shape(), tb.shape());
            prop_assert!(ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn any_flipped_byte_is_detected(pos in 0usize..1000, bit in 0u8..8) {
        let c = Checkpoint {
            meta: vec![("k".into(), "v".into())],
            tensors: vec![("w".into(), Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap())],
        };
        let mut bytes = c.encode().unwrap();
        let pos = pos % bytes.len();
        bytes[pos] ^= 1 << bit;
        prop_assert!(Checkpoint::decode(&bytes).is_err());
    }
}

#[test]
fn checkpoint_header_errors() {
    let bytes = Checkpoint::default().encode().unwrap();
    assert!(matches!(Checkpoint::decode(b"NOTACKPT"), Err(DataError::NotACheckpoint) | Err(DataError::Truncated { .. })));
    let mut v2 = bytes.clone();
    v2[8] = 2;
    assert!(Checkpoint::decode(&v2).is_err());
    let mut body = bytes.clone();
    let n = body.len();
    body[n - 1] ^= 0xFF;
    assert!(matches!(Checkpoint::decode(&body), Err(DataError::Checksum { .. })));
}

#[test]
fn training_checkpoint_file_round_trip() {
    let data = make_toy_four_points();
    let spec = ModelSpec { data_dim: 16, latent_dim: 2, posterior: PosteriorFamily::Iaf, init_seed: 7, ..ModelSpec::default() };
    let mut vae = Vae::build(spec).unwrap();
    let cfg = TrainConfig { steps: 20, free_bits: None, ..TrainConfig::default() };
    let out = train_aevb(&mut vae, &data.items, None, &cfg, None).unwrap();
    let ck = TrainingCheckpoint::capture(&vae, &cfg, &out.state);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    ck.save(&path).unwrap();
    let back = TrainingCheckpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    let restored = back.restore_model().unwrap();
    assert_eq!(restored.params.values(), vae.params.values());
    assert_eq!(restored.spec, vae.spec);
}

#[test]
fn stochastic_binarization_rate() {
    let n = 10_000;
    let data = Tensor::new(vec![n, 1], vec![0.3; n]).unwrap();
    let b = binarize(&data, BinarizeMode::Stochastic, &mut Rng::new(401)).unwrap();
    assert!(b.data().iter().all(|&v| v == 0.0 || v == 1.0));
    let mean = b.data().iter().sum::<f64>() / n as f64;
    assert!((mean - 0.3).abs() < 0.015, "{mean}");

    let t = binarize(&Tensor::row(&[0.0, 0.49, 0.5, 1.0]), BinarizeMode::Threshold, &mut Rng::new(0)).unwrap();
    assert_eq!(t.data(), &[0.0, 0.0, 1.0, 1.0]);
    assert!(matches!(
        binarize(&Tensor::row(&[0.2, 1.5]), BinarizeMode::Threshold, &mut Rng::new(0)),
        Err(DataError::OutOfRange { index: 1, .. })
    ));
}

#[test]
fn linear_gaussian_data_covariance() {
    let w = Tensor::from_rows(&[vec![1.0, -0.4], vec![0.5, 0.9], vec![0.0, 0.3]]).unwrap();
    let sigma = 0.3;
    let n = 100_000;
    let d = make_linear_gaussian_synthetic(&w, sigma, n, &mut Rng::new(403)).unwrap();
    assert_eq!(d.kind, DataKind::Continuous);
    let wn = to_na(&w);
    let cov = &wn * wn.transpose() + nalgebra::DMatrix::<f64>::identity(3, 3) * sigma * sigma;
    for a in 0..3 {
        for b in 0..3 {
            let prods: Vec<f64> = (0..n).map(|r| d.items.get2(r, a) * d.items.get2(r, b)).collect();
            let (m, se) = mean_and_se(&prods);
            assert!((m - cov[(a, b)]).abs() < 5.0 * se, "[{a},{b}] {m} vs {}", cov[(a, b)]);
        }
    }
    assert!(make_linear_gaussian_synthetic(&w, 0.0, 1, &mut Rng::new(0)).is_err());
}

#[test]
fn toy_patterns_are_far_apart() {
    let d = make_toy_four_points();
    assert_eq!((d.len(), d.dim()), (4, 16));
    for i in 0..4 {
        for j in i + 1..4 {
            let ham = d.items.row_slice(i).iter().zip(d.items.row_slice(j)).filter(|(a, b)| a != b).count();
            assert!(ham >= 8, "{i},{j}: {ham}");
        }
    }
}

#[test]
fn holdout_split_takes_ceiling_from_the_end() {
    let items = Tensor::new(vec![10, 1], (0..10).map(|v| v as f64).collect()).unwrap();
    let d = Dataset::new(items, DataKind::Continuous).unwrap();
    let (train, hold) = d.split_holdout(0.15);
    assert_eq!((train.rows(), hold.rows()), (8, 2));
    assert_eq!(hold.data(), &[8.0, 9.0]);
    let (train, hold) = d.split_holdout(1.0);
    assert_eq!((train.rows(), hold.rows()), (1, 9));
    assert!(Dataset::new(Tensor::row(&[0.5]), DataKind::Binary).is_err());
}

#[test]
fn metrics_round_trip_exactly() {
    assert_eq!(metrics_csv(&[]), format!("{METRICS_HEADER}\n"));
    assert!(parse_metrics(&metrics_csv(&[])).unwrap().is_empty());
    let mut rng = Rng::new(405);
    let rows: Vec<MetricsRow> = (0..50)
        .map(|s| MetricsRow {
            step: s,
            elbo: -rng.uniform() * 1e3,
            logpx: rng.normal() * 1e-7,
            logpz: rng.normal() * 1e12,
            logqz: rng.normal(),
            kl_est: f64::MIN_POSITIVE * rng.uniform(),
            grad_norm: rng.uniform(),
            beta: if s % 2 == 0 { 1.0 } else { 0.1 },
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    write_metrics(&path, &rows).unwrap();
    assert_eq!(read_metrics(&path).unwrap(), rows);
    assert!(parse_metrics("step,elbo\n").is_err());
    assert!(parse_metrics(&format!("{METRICS_HEADER}\n1,2,3\n")).is_err());
}
