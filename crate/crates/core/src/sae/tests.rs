use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::harvest::synthetic::{gen_synthetic_pair, sample_codes, SyntheticFeatureModel};

fn gaussian_rows(n: usize, d: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::seeded(seed);
    (0..n * d).map(|_| StandardNormal.sample(&mut r)).collect()
}

fn perturbed(d: usize, f: usize, seed: u64) -> SaeParams {
    let mut p = sae_init(d, f, seed).unwrap();
    let mut r = rng::seeded(seed + 100);
    for t in p.tensors_mut() {
        for v in t.iter_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
    p
}

fn mean_loss(p: &SaeParams, batch: &[f64], lambda: f64) -> f64 {
    let rows: Vec<&[f64]> = batch.chunks(p.d()).collect();
    rows.iter().map(|x| sae_loss(p, x, lambda).unwrap().total).sum::<f64>() / rows.len() as f64
}

#[test]
fn init_contract() {
    let (d, f) = (64, 2048);
    let p = sae_init(d, f, 3).unwrap();
    let target = (2.0 * d as f64 / f as f64).sqrt();
    for j in 0..f {
        let n = crate::numerics::norm2(&p.w_dec.column(j));
        assert!((n - target).abs() < 1e-12);
    }
    for i in 0..f {
        for j in 0..d {
            assert_eq!(p.w_enc.get(i, j), p.w_dec.get(j, i));
        }
    }
    assert!(p.b_enc.iter().chain(&p.b_dec).all(|v| *v == 0.0));
    assert!(matches!(sae_init(8, 8, 0), Err(Error::Config(_))));
}

#[test]
fn decoder_column_encodes_to_its_squared_norm() {
    let (d, f) = (16, 64);
    let p = sae_init(d, f, 1).unwrap();
    for j in [0, 17, 63] {
        let fv = sae_encode(&p, &p.w_dec.column(j)).unwrap();
        assert!((fv[j] - 2.0 * d as f64 / f as f64).abs() < 1e-12);
        assert!(fv.iter().all(|v| *v >= 0.0));
    }
}

#[test]
fn encode_decode_trivial_cases() {
    let mut p = perturbed(4, 9, 2);
    let zero_f = vec![0.0; 9];
    assert_eq!(sae_decode(&p, &zero_f).unwrap(), p.b_dec);
    let mut one = zero_f.clone();
    one[5] = 2.5;
    let x = sae_decode(&p, &one).unwrap();
    for r in 0..4 {
        assert!((x[r] - (2.5 * p.w_dec.get(r, 5) + p.b_dec[r])).abs() < 1e-15);
    }
    p.b_enc = vec![0.0; 9];
    assert!(sae_encode(&p, &[0.0; 4]).unwrap().iter().all(|v| *v == 0.0));
    assert!(matches!(sae_encode(&p, &[0.0; 3]), Err(Error::Shape(_))));
    assert!(matches!(sae_decode(&p, &[0.0; 3]), Err(Error::Shape(_))));
    assert!(matches!(sae_loss(&p, &[0.0; 4], -1.0), Err(Error::Config(_))));
}

#[test]
fn loss_matches_composition() {
    let p = perturbed(5, 11, 4);
    let x = [0.3, -1.0, 0.2, 0.9, -0.4];
    let f = sae_encode(&p, &x).unwrap();
    let xh = sae_decode(&p, &f).unwrap();
    let mse: f64 = x.iter().zip(&xh).map(|(a, b)| (a - b).powi(2)).sum();
    let l = sae_loss(&p, &x, 0.7).unwrap();
    assert!((l.mse - mse).abs() < 1e-14);
    assert!((l.l1 - 0.7 * f.iter().sum::<f64>()).abs() < 1e-14);
    assert!((l.total - l.mse - l.l1).abs() < 1e-14);

    let mut q = SaeParams::zeros(5, 11);
    q.w_dec = Matrix::zeros(5, 11);
    assert_eq!(sae_loss(&q, &[0.0; 5], 1.0).unwrap().total, 0.0);
}

#[test]
fn gradients_match_central_differences() {
    let (d, f) = (8, 16);
    let lambda = 0.05;
    let mut r = rng::seeded(77);
    let mut probes = 0;
    for inst in 0..5 {
        let p = perturbed(d, f, inst);
        let batch = gaussian_rows(6, d, inst + 50);
        let g = sae_grad(&p, &batch, lambda).unwrap();
        for t in 0..4 {
            for _ in 0..10 {
                let len = p.tensors()[t].len();
                let k = r.random_range(0..len);
                let h = 1e-5;
                let mut plus = p.clone();
                plus.tensors_mut()[t][k] += h;
                let mut minus = p.clone();
                minus.tensors_mut()[t][k] -= h;
                let fd = (mean_loss(&plus, &batch, lambda) - mean_loss(&minus, &batch, lambda))
                    / (2.0 * h);
                let an = g.tensors()[t][k];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(rel < 1e-4, "tensor {t} idx {k}: fd {fd} analytic {an}");
                probes += 1;
            }
        }
    }
    assert_eq!(probes, 200);
}

#[test]
fn zero_batch_gives_zero_gradients() {
    let p = sae_init(4, 8, 0).unwrap();
    let g = sae_grad(&p, &[0.0; 12], 0.5).unwrap();
    assert!(g.tensors().iter().all(|t| t.iter().all(|v| *v == 0.0)));
    assert!(sae_grad(&p, &[], 0.5).is_err());
    assert!(sae_grad(&p, &[0.0; 5], 0.5).is_err());
}

#[test]
fn closed_gate_gets_no_encoder_gradient() {
    let mut p = perturbed(4, 8, 9);
    p.b_enc[3] = -1e6;
    let batch = gaussian_rows(10, 4, 1);
    let g = sae_grad(&p, &batch, 1.0).unwrap();
    assert!(g.w_enc.row(3).iter().all(|v| *v == 0.0));
    assert_eq!(g.b_enc[3], 0.0);
}

#[test]
fn gradient_is_thread_count_independent() {
    let p = perturbed(8, 24, 5);
    let batch = gaussian_rows(300, 8, 6);
    let a = sae_grad(&p, &batch, 0.1).unwrap();
    let b = par::sequential(|| sae_grad(&p, &batch, 0.1).unwrap());
    assert_eq!(a, b);
}

#[test]
fn adam_first_step_moves_by_lr() {
    let cfg = AdamConfig::default();
    let (mut p, mut m, mut v) = ([0.0], [0.0], [0.0]);
    adam_update(&mut p, &[1.0], &mut m, &mut v, 1, 1e-3, &cfg);
    assert!((p[0] + 1e-3 * 1.0 / (1.0 + 1e-8)).abs() < 1e-15);
    let (mut p, mut m, mut v) = ([0.5], [0.0], [0.0]);
    adam_update(&mut p, &[0.0], &mut m, &mut v, 1, 1e-3, &cfg);
    assert_eq!(p[0], 0.5);
}

#[test]
fn adam_two_steps_match_hand_trace() {
    let cfg = AdamConfig::default();
    let lr = 0.01;
    let (mut p, mut m, mut v) = ([1.0], [0.0], [0.0]);
    adam_update(&mut p, &[0.5], &mut m, &mut v, 1, lr, &cfg);
    adam_update(&mut p, &[-0.2], &mut m, &mut v, 2, lr, &cfg);
    let m1 = 0.1 * 0.5;
    let v1 = 0.001 * 0.25;
    let p1 = 1.0 - lr * (m1 / 0.1) / ((v1 / 0.001f64).sqrt() + 1e-8);
    let m2 = 0.9 * m1 + 0.1 * -0.2;
    let v2 = 0.999 * v1 + 0.001 * 0.04;
    let p2 = p1 - lr * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64 * 0.999)).sqrt() + 1e-8);
    assert!((p[0] - p2).abs() < 1e-15);
}

#[test]
fn adam_step_counts_and_checks_shapes() {
    let mut p = sae_init(4, 8, 0).unwrap();
    let g = sae_grad(&p, &gaussian_rows(3, 4, 0), 0.1).unwrap();
    let mut st = AdamState::new(&p);
    adam_step(&mut p, &g, &mut st, 1e-3, &AdamConfig::default()).unwrap();
    assert_eq!(st.step, 1);
    let bad = SaeParams::zeros(4, 9);
    assert!(adam_step(&mut p, &bad, &mut st, 1e-3, &AdamConfig::default()).is_err());
}

fn low_rank_stream(n: usize, d: usize, rank: usize, seed: u64) -> ActivationStream {
    let mut r = rng::seeded(seed);
    let basis: Vec<Vec<f64>> = (0..rank)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut r)).collect())
        .collect();
    let mut s = ActivationStream::new("low-rank", d);
    for i in 0..n {
        let mut v = vec![0.0; d];
        for b in &basis {
            let c: f64 = StandardNormal.sample(&mut r);
            for (x, y) in v.iter_mut().zip(b) {
                *x += c * y;
            }
        }
        s.push(i as u64, 0, &v).unwrap();
    }
    s
}

#[test]
fn reconstruction_only_training_drives_mse_down() {
    let s = low_rank_stream(4000, 8, 2, 1);
    let cfg = SaeTrainConfig {
        dict_size: Some(32),
        lambda_l1: 0.0,
        lr: 3e-3,
        batch_size: 64,
        total_steps: 3000,
        epochs: 100,
        log_every: 500,
        ..Default::default()
    };
    let rep = train_sae(&s, &cfg).unwrap();
    let first = rep.metrics[0].mse;
    let last = rep.metrics.last().unwrap().mse;
    let mean_sq: f64 = s.data.iter().map(|v| v * v).sum::<f64>() / s.len() as f64;
    assert!(last < 0.01 * mean_sq, "mse {first} -> {last} (signal {mean_sq})");
    assert!(!rep.exhausted);
}

#[test]
fn planted_training_learns_sparse_codes() {
    let m = SyntheticFeatureModel::random(16, 48, 3.0, 2).unwrap();
    let codes = sample_codes(48, 3.0, 20_000, 3);
    let s = gen_synthetic_pair(&m, &m, &codes).unwrap().a;
    let cfg = SaeTrainConfig {
        dict_size: Some(96),
        lambda_l1: 0.3,
        lr: 4e-3,
        batch_size: 128,
        total_steps: 1500,
        epochs: 20,
        normalize_decoder: true,
        log_every: 250,
        ..Default::default()
    };
    let rep = train_sae(&s, &cfg).unwrap();
    let l0 = rep.metrics.last().unwrap().l0;
    // planted codes carry 3 active features on average
    assert!((1.5..=6.0).contains(&l0), "final l0 {l0}");
}

#[test]
fn training_is_deterministic_and_reports_exhaustion() {
    let s = low_rank_stream(500, 6, 3, 2);
    let cfg = SaeTrainConfig {
        dict_size: Some(12),
        batch_size: 50,
        total_steps: 25,
        epochs: 2,
        log_every: 5,
        seed: 9,
        ..Default::default()
    };
    let a = train_sae(&s, &cfg).unwrap();
    let b = par::sequential(|| train_sae(&s, &cfg).unwrap());
    assert_eq!(a.params, b.params);
    assert!(a.exhausted);
    assert_eq!(a.steps_run, 20);
    let dir = tempfile::tempdir().unwrap();
    let (pa, pb) = (dir.path().join("a.sae"), dir.path().join("b.sae"));
    save_checkpoint(&pa, &a.params, "h", 20).unwrap();
    save_checkpoint(&pb, &b.params, "h", 20).unwrap();
    assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
}

#[test]
fn lambda_warms_up_linearly() {
    let cfg = SaeTrainConfig {
        lambda_l1: 2.0,
        total_steps: 100,
        ..Default::default()
    };
    assert!((cfg.lambda_at(0) - 0.4).abs() < 1e-12);
    assert!((cfg.lambda_at(4) - 2.0).abs() < 1e-12);
    assert_eq!(cfg.lambda_at(50), 2.0);
    assert!(SaeTrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
}

#[test]
fn decoder_normalization_preserves_reconstruction() {
    let mut p = perturbed(5, 10, 3);
    let x = [0.2, -0.1, 0.5, 1.0, -0.3];
    let before = sae_decode(&p, &sae_encode(&p, &x).unwrap()).unwrap();
    p.normalize_decoder();
    let after = sae_decode(&p, &sae_encode(&p, &x).unwrap()).unwrap();
    for (a, b) in before.iter().zip(&after) {
        assert!((a - b).abs() < 1e-12);
    }
    for j in 0..10 {
        assert!((crate::numerics::norm2(&p.w_dec.column(j)) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let p = perturbed(4, 9, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.sae");
    save_checkpoint(&path, &p, "abc", 7).unwrap();
    let (q, meta) = load_checkpoint(&path).unwrap();
    assert_eq!(p, q);
    assert_eq!((meta.d, meta.f, meta.step), (4, 9, 7));
    let mut bytes = std::fs::read(&path).unwrap();
    let k = bytes.len() - 20;
    bytes[k] ^= 1;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checksum { .. })));
}

#[test]
fn metrics_csv_appends() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    let row = MetricsRow {
        step: 1,
        mse: 0.5,
        l0: 3.0,
        l1: 0.25,
    };
    append_metrics_csv(&path, &[row]).unwrap();
    append_metrics_csv(&path, &[MetricsRow { step: 2, ..row }]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text, "step,mse,l0,l1\n1,0.5,3,0.25\n2,0.5,3,0.25\n");
}

#[test]
fn encode_stream_round_trips() {
    let p = perturbed(6, 14, 2);
    let mut s = ActivationStream::new("x", 6);
    let rows = gaussian_rows(700, 6, 3);
    for (i, r) in rows.chunks(6).enumerate() {
        s.push(i as u64 / 10, (i % 10) as u32, r).unwrap();
    }
    let rec = encode_stream(&p, &s).unwrap();
    assert_eq!(rec.len(), 700);
    assert_eq!(rec.docs, s.docs);
    for i in [0, 255, 256, 699] {
        assert_eq!(rec.densify_row(i), sae_encode(&p, s.row(i)).unwrap());
    }
    assert!(rec.values.iter().all(|v| *v > 0.0));

    let mut z = ActivationStream::new("z", 6);
    for i in 0..5 {
        z.push(i, 0, &[0.0; 6]).unwrap();
    }
    let q = sae_init(6, 14, 0).unwrap();
    let rz = encode_stream(&q, &z).unwrap();
    assert_eq!(rz.len(), 5);
    assert_eq!(rz.nnz(), 0);
    assert!(encode_stream(&q, &ActivationStream::new("w", 5)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn features_are_non_negative(seed in any::<u64>(), xs in prop::collection::vec(-5.0f64..5.0, 6)) {
        let p = perturbed(6, 10, seed % 1000);
        prop_assert!(sae_encode(&p, &xs).unwrap().iter().all(|v| *v >= 0.0));
    }
}
