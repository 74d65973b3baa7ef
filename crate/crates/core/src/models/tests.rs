use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::Rng as _;

use super::*;
use crate::harvest::corpus::{self, BOS};
use crate::numerics::{gelu_scalar, silu_scalar, softplus};
use crate::rng;

fn rand_matrix(r: &mut crate::rng::Rng, rows: usize, cols: usize, s: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| r.random_range(-s..s))
}

fn rand_ssm(seed: u64, e: usize, n: usize) -> SsmParams {
    let mut r = rng::seeded(seed);
    SsmParams {
        a: Matrix::from_fn(e, n, |_, _| -r.random_range(0.1..2.0)),
        w_delta: rand_matrix(&mut r, e, e, 0.5),
        b_delta: (0..e).map(|_| r.random_range(-1.0..1.0)).collect(),
        w_b: rand_matrix(&mut r, n, e, 1.0),
        w_c: rand_matrix(&mut r, n, e, 1.0),
        w_d: (0..e).map(|_| r.random_range(-1.0..1.0)).collect(),
    }
}

fn rand_seq(seed: u64, t: usize, d: usize) -> SequenceTensor {
    let mut r = rng::seeded(seed);
    SequenceTensor::from_flat(t, d, (0..t * d).map(|_| r.random_range(-1.0..1.0)).collect())
        .unwrap()
}

/// Position-by-position evaluation written directly from the recurrence.
fn naive_scan(c: &SequenceTensor, p: &SsmParams) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (e, n) = p.a.shape();
    let mut h = vec![vec![0.0; n]; e];
    let mut s_out = Vec::new();
    let mut h_out = Vec::new();
    for i in 0..c.len() {
        let ci = c.row(i);
        let mut bv = vec![0.0; n];
        let mut cv = vec![0.0; n];
        for k in 0..n {
            for j in 0..e {
                bv[k] += p.w_b.get(k, j) * ci[j];
                cv[k] += p.w_c.get(k, j) * ci[j];
            }
        }
        let mut s = vec![0.0; e];
        for ch in 0..e {
            let mut pre = p.b_delta[ch];
            for j in 0..e {
                pre += p.w_delta.get(ch, j) * ci[j];
            }
            let delta = (1.0 + pre.exp()).ln();
            for k in 0..n {
                h[ch][k] = (delta * p.a.get(ch, k)).exp() * h[ch][k] + delta * bv[k] * ci[ch];
                s[ch] += h[ch][k] * cv[k];
            }
            s[ch] += p.w_d[ch] * ci[ch];
        }
        s_out.push(s);
        h_out.push(h.iter().flatten().copied().collect());
    }
    (s_out, h_out)
}

#[test]
fn scan_matches_naive_recurrence() {
    let p = rand_ssm(1, 5, 3);
    let c = rand_seq(2, 6, 5);
    let out = selective_ssm_scan(&c, &p).unwrap();
    let (s, h) = naive_scan(&c, &p);
    for i in 0..6 {
        for (a, b) in out.s.row(i).iter().zip(&s[i]) {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in out.h.row(i).iter().zip(&h[i]) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn scan_oracle_random(seed in any::<u64>(), t in 1usize..=16, e in 1usize..6, n in 1usize..5) {
        let p = rand_ssm(seed, e, n);
        let c = rand_seq(seed ^ 0xabc, t, e);
        let out = selective_ssm_scan(&c, &p).unwrap();
        let (s, _) = naive_scan(&c, &p);
        for i in 0..t {
            for (a, b) in out.s.row(i).iter().zip(&s[i]) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn full_reset_scan_is_memoryless() {
    let mut p = rand_ssm(3, 4, 2);
    p.a = Matrix::from_fn(4, 2, |_, _| -1e300);
    p.b_delta = vec![5.0; 4];
    let c = rand_seq(4, 5, 4);
    let out = selective_ssm_scan(&c, &p).unwrap();
    for i in 0..5 {
        let single = SequenceTensor::from_rows(&[c.row(i).to_vec()]).unwrap();
        let one = selective_ssm_scan(&single, &p).unwrap();
        for (a, b) in out.s.row(i).iter().zip(one.s.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn unit_decay_recurrence_is_prefix_sum() {
    let drive = rand_seq(5, 7, 3);
    let decay = SequenceTensor::from_flat(7, 3, vec![1.0; 21]).unwrap();
    let h = linear_recurrence(&decay, &drive).unwrap();
    for i in 0..7 {
        for ch in 0..3 {
            let sum: f64 = (0..=i).map(|k| drive.row(k)[ch]).sum();
            assert!((h.row(i)[ch] - sum).abs() < 1e-12);
        }
    }
}

#[test]
fn non_negative_decay_parameter_is_rejected() {
    let mut p = rand_ssm(1, 2, 2);
    p.a.set(0, 0, 0.0);
    assert!(matches!(
        selective_ssm_scan(&rand_seq(1, 3, 2), &p),
        Err(Error::Config(_))
    ));
}

fn mamba_cfg(d: usize, n: usize) -> ModelConfig {
    ModelConfig {
        arch: Arch::Mamba,
        n_layers: 1,
        d_model: d,
        vocab: 8,
        max_len: None,
        d_conv: 4,
        d_state: n,
        expand: 2,
        n_heads: 1,
        d_mlp: 0,
    }
}

fn rand_mamba_block(seed: u64, d: usize, n: usize) -> MambaBlockParams {
    let e = 2 * d;
    let mut r = rng::seeded(seed);
    MambaBlockParams {
        norm: None,
        w_in: rand_matrix(&mut r, e, d, 0.7),
        w_g: rand_matrix(&mut r, e, d, 0.7),
        w_o: rand_matrix(&mut r, d, e, 0.7),
        conv_kernel: rand_matrix(&mut r, e, 4, 0.7),
        conv_bias: vec![0.0; e],
        ssm: rand_ssm(seed + 1, e, n),
    }
}

#[test]
fn zero_residual_gives_zero_output() {
    let d = 3;
    let p = rand_mamba_block(7, d, 2);
    let cfg = mamba_cfg(d, 2);
    let r = SequenceTensor::zeros(4, d);
    let (out, _) =
        mamba_block_forward(&p, &cfg, 0, &r, &BTreeSet::new(), &Interventions::default()).unwrap();
    assert!(out.data().iter().all(|v| *v == 0.0));
}

#[test]
fn single_token_matches_hand_evaluation() {
    let d = 2;
    let n = 2;
    let p = rand_mamba_block(11, d, n);
    let cfg = mamba_cfg(d, n);
    let r0 = vec![0.3, -0.8];
    let r = SequenceTensor::from_rows(std::slice::from_ref(&r0)).unwrap();
    let (out, _) =
        mamba_block_forward(&p, &cfg, 0, &r, &BTreeSet::new(), &Interventions::default()).unwrap();

    let e = 2 * d;
    let x: Vec<f64> = (0..e).map(|i| (0..d).map(|j| p.w_in.get(i, j) * r0[j]).sum()).collect();
    let g: Vec<f64> = (0..e)
        .map(|i| silu_scalar((0..d).map(|j| p.w_g.get(i, j) * r0[j]).sum()))
        .collect();
    let c: Vec<f64> = (0..e).map(|i| silu_scalar(p.conv_kernel.get(i, 0) * x[i])).collect();
    let bv: Vec<f64> = (0..n).map(|k| (0..e).map(|j| p.ssm.w_b.get(k, j) * c[j]).sum()).collect();
    let cv: Vec<f64> = (0..n).map(|k| (0..e).map(|j| p.ssm.w_c.get(k, j) * c[j]).sum()).collect();
    let mut y = vec![0.0; e];
    for ch in 0..e {
        let delta = softplus(
            (0..e).map(|j| p.ssm.w_delta.get(ch, j) * c[j]).sum::<f64>() + p.ssm.b_delta[ch],
        );
        let s: f64 = (0..n).map(|k| delta * bv[k] * c[ch] * cv[k]).sum::<f64>()
            + p.ssm.w_d[ch] * c[ch];
        y[ch] = s * g[ch];
    }
    for i in 0..d {
        let expect = r0[i] + (0..e).map(|j| p.w_o.get(i, j) * y[j]).sum::<f64>();
        assert!((out.row(0)[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn incremental_steps_match_full_forward() {
    let d = 3;
    let p = rand_mamba_block(5, d, 3);
    let cfg = mamba_cfg(d, 3);
    let r = rand_seq(9, 7, d);
    let (out, _) =
        mamba_block_forward(&p, &cfg, 0, &r, &BTreeSet::new(), &Interventions::default()).unwrap();
    let mut st = MambaBlockState::zeros(&cfg);
    assert_eq!(st.conv_tail.len(), 3);
    for i in 0..7 {
        let o = st.step(&p, r.row(i)).unwrap();
        for (a, b) in o.iter().zip(out.row(i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn block_rejects_foreign_layer_intervention() {
    let d = 3;
    let p = rand_mamba_block(5, d, 2);
    let cfg = mamba_cfg(d, 2);
    let r = rand_seq(1, 3, d);
    let mut iv = Interventions::new();
    iv.overwrite(HookSite::new(1, HookKind::SsmInputC), 0, vec![0.0; 6]);
    assert!(matches!(
        mamba_block_forward(&p, &cfg, 0, &r, &BTreeSet::new(), &iv),
        Err(Error::Intervention(_))
    ));
    let mut iv = Interventions::new();
    iv.overwrite(HookSite::new(0, HookKind::MlpNeuronPostActivation), 0, vec![0.0; 6]);
    assert!(mamba_block_forward(&p, &cfg, 0, &r, &BTreeSet::new(), &iv).is_err());
}

fn small_mamba(seed: u64) -> Model {
    random_mamba(&RandomModelConfig {
        vocab: 12,
        d_model: 6,
        n_layers: 3,
        d_state: 3,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn small_transformer(seed: u64) -> Model {
    random_transformer(&RandomModelConfig {
        arch: Arch::Transformer,
        vocab: 12,
        d_model: 8,
        n_layers: 3,
        n_heads: 2,
        d_mlp: 16,
        max_len: 32,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn every_site(m: &Model) -> BTreeSet<HookSite> {
    let mut s = BTreeSet::new();
    for l in 0..m.n_layers() {
        for k in HookKind::ALL {
            let site = HookSite::new(l, k);
            if m.validate_site(site).is_ok() {
                s.insert(site);
            }
        }
    }
    s
}

#[test]
fn identity_intervention_is_bitwise_noop() {
    for m in [small_mamba(1), small_transformer(1)] {
        let toks = [BOS, 3, 5, 7, 2, 9];
        let sites = every_site(&m);
        let clean = run_model(&m, &toks, &sites, &Interventions::default()).unwrap();
        for (&site, t) in &clean.sites {
            let mut iv = Interventions::new();
            for pos in 0..toks.len() {
                iv.overwrite(site, pos, t.row(pos).to_vec());
            }
            let patched = run_model(&m, &toks, &sites, &iv).unwrap();
            assert_eq!(patched, clean, "{site}");
        }
    }
}

#[test]
fn causality_for_both_architectures() {
    for m in [small_mamba(2), small_transformer(2)] {
        let sites = every_site(&m);
        let a = [BOS, 3, 5, 7, 2, 9, 4];
        for j in 1..a.len() {
            let mut b = a;
            b[j] = if a[j] == 10 { 11 } else { 10 };
            let ta = run_model(&m, &a, &sites, &Interventions::default()).unwrap();
            let tb = run_model(&m, &b, &sites, &Interventions::default()).unwrap();
            for (site, t) in &ta.sites {
                let u = &tb.sites[site];
                for i in 0..j {
                    assert_eq!(t.row(i), u.row(i), "{site} pos {i} changed by token {j}");
                }
            }
            for i in 0..j {
                assert_eq!(ta.logits.row(i), tb.logits.row(i));
            }
        }
    }
}

#[test]
fn transformer_with_zero_values_and_mlp_is_identity() {
    let mut m = small_transformer(3);
    for b in m.blocks.iter_mut() {
        if let Block::Transformer(p) = b {
            p.w_v = Matrix::zeros(8, 8);
            p.w_down = Matrix::zeros(8, 16);
        }
    }
    let r = rand_seq(3, 5, 8);
    if let Block::Transformer(p) = &m.blocks[0] {
        let (out, _) = transformer_block_forward(
            p,
            &m.config,
            0,
            &r,
            &BTreeSet::new(),
            &Interventions::default(),
        )
        .unwrap();
        assert_eq!(out, r);
    }
}

#[test]
fn single_token_attention_is_ov_of_normed_input() {
    let m = small_transformer(4);
    let Block::Transformer(mut p) = m.blocks[0].clone() else {
        unreachable!()
    };
    p.w_down = Matrix::zeros(8, 16);
    let r = rand_seq(8, 1, 8);
    let (out, _) =
        transformer_block_forward(&p, &m.config, 0, &r, &BTreeSet::new(), &Interventions::default())
            .unwrap();
    let u = crate::numerics::rms_norm(r.row(0), p.norm_attn.as_ref().unwrap(), NORM_EPS);
    let v = p.w_v.matvec(&u).unwrap();
    let ov = p.w_o.matvec(&v).unwrap();
    for i in 0..8 {
        assert!((out.row(0)[i] - r.row(0)[i] - ov[i]).abs() < 1e-12);
    }
    assert!(gelu_scalar(0.0) == 0.0);
}

#[test]
fn trivial_one_layer_logits_are_unembedded_embeddings() {
    let v = 5;
    let d = 4;
    let mut m = random_transformer(&RandomModelConfig {
        arch: Arch::Transformer,
        vocab: v,
        d_model: d,
        n_layers: 1,
        n_heads: 1,
        d_mlp: 2,
        max_len: 8,
        ..Default::default()
    })
    .unwrap();
    m.pos_embed = None;
    m.config.max_len = None;
    m.final_norm = None;
    if let Block::Transformer(p) = &mut m.blocks[0] {
        p.w_v = Matrix::zeros(d, d);
        p.w_down = Matrix::zeros(d, 2);
    }
    let toks = [0, 3, 1];
    let l = logits(&m, &toks).unwrap();
    for (i, &t) in toks.iter().enumerate() {
        let expect = m.unembed.matvec(m.embed.row(t)).unwrap();
        assert_eq!(l.row(i), expect.as_slice());
    }
}

#[test]
fn capturing_every_layer_and_input_errors() {
    let m = small_mamba(5);
    let sites = all_layers(&m, HookKind::ResidualPostBlock);
    let tr = run_model(&m, &[BOS, 4, 5], &sites, &Interventions::default()).unwrap();
    assert_eq!(tr.sites.len(), 3);
    assert!(matches!(logits(&m, &[]), Err(Error::Data(_))));
    assert!(matches!(logits(&m, &[BOS, 12]), Err(Error::Data(_))));
    let bad: BTreeSet<_> = [HookSite::new(3, HookKind::ResidualPostBlock)].into();
    assert!(run_model(&m, &[BOS], &bad, &Interventions::default()).is_err());
}

#[test]
fn residual_patch_affects_only_later_layers() {
    let m = small_mamba(6);
    let toks = [BOS, 4, 5, 6, 7];
    let sites = all_layers(&m, HookKind::ResidualPostBlock);
    let clean = run_model(&m, &toks, &sites, &Interventions::default()).unwrap();
    let mut iv = Interventions::new();
    iv.overwrite(HookSite::new(1, HookKind::ResidualPostBlock), 2, vec![3.0; 6]);
    let patched = run_model(&m, &toks, &sites, &iv).unwrap();
    assert_eq!(
        clean.sites[&HookSite::new(0, HookKind::ResidualPostBlock)],
        patched.sites[&HookSite::new(0, HookKind::ResidualPostBlock)]
    );
    let l2 = HookSite::new(2, HookKind::ResidualPostBlock);
    assert_ne!(clean.sites[&l2], patched.sites[&l2]);
    assert_eq!(clean.sites[&l2].row(1), patched.sites[&l2].row(1));
}

#[test]
fn hook_site_grammar() {
    for l in [0, 3, 17] {
        for k in HookKind::ALL {
            let s = HookSite::new(l, k);
            assert_eq!(s.to_string().parse::<HookSite>().unwrap(), s);
        }
    }
    assert_eq!(
        "layer2.ssm_state_h".parse::<HookSite>().unwrap(),
        HookSite::new(2, HookKind::SsmStateH)
    );
    for bad in ["layer.x", "2.logits", "layerx.logits", "layer1.attn", "layer1"] {
        assert!(bad.parse::<HookSite>().is_err(), "{bad}");
    }
}

#[test]
fn hook_sites_are_architecture_checked() {
    let m = small_mamba(1);
    assert!(m.validate_site(HookSite::new(0, HookKind::SsmStateH)).is_ok());
    assert!(m.validate_site(HookSite::new(0, HookKind::MlpNeuronPostActivation)).is_err());
    assert!(m.validate_site(HookSite::new(2, HookKind::Logits)).is_ok());
    assert!(m.validate_site(HookSite::new(1, HookKind::Logits)).is_err());
    let t = small_transformer(1);
    assert!(t.validate_site(HookSite::new(0, HookKind::ConvInputX)).is_err());
}

#[test]
fn constructed_transformer_solves_probes() {
    let m = build_induction_transformer(16, 0).unwrap();
    let l = logits(&m, &[BOS, 3, 5, 9, 4, 6, 3, 7, 8, 5]).unwrap();
    assert_eq!(argmax(l.row(l.len() - 1)), 9);
    for d in [8, 16, 32] {
        let probes = InductionProbe::suite(16, d, 200, 7).unwrap();
        assert!(induction_accuracy(&m, &probes).unwrap() >= 0.99);
    }
    // no earlier occurrence of the final token: the answer is not B
    let l = logits(&m, &[BOS, 3, 5, 9, 4, 6, 3, 7, 8, 12]).unwrap();
    assert_ne!(argmax(l.row(l.len() - 1)), 9);
}

#[test]
fn constructed_mamba_solves_probes_and_writes_late() {
    let v = 16;
    let m = build_induction_mamba(v, 0).unwrap();
    let l = logits(&m, &[BOS, 3, 5, 9, 4, 6, 3, 7, 8, 5]).unwrap();
    assert_eq!(argmax(l.row(l.len() - 1)), 9);
    for d in [8, 16, 32] {
        let probes = InductionProbe::suite(v, d, 200, 7).unwrap();
        assert!(induction_accuracy(&m, &probes).unwrap() >= 0.99);
    }

    let layer = m.construction.as_ref().unwrap().designated_layer.unwrap();
    let mut r = rng::seeded(1);
    let s = corpus::induction_sample(&mut r, v, 16).unwrap();
    let site = HookSite::new(layer, HookKind::SsmStateH);
    let tr = run_model(&m, &s.clean, &[site].into(), &Interventions::default()).unwrap();
    let h = tr.get(site).unwrap();
    let n = m.config.d_state;
    // value channel for B (lag-1 copy), key slot A
    let idx = (v + s.b) * n + s.a;
    let at_b1 = h.row(s.b1)[idx].abs();
    let at_next = h.row(s.b1 + 1)[idx].abs();
    assert!(at_next >= 10.0 * at_b1.max(1e-12), "{at_b1} vs {at_next}");
}

#[test]
fn zeroing_the_previous_token_tap_breaks_induction() {
    let v = 16;
    let mut m = build_induction_mamba(v, 0).unwrap();
    let layer = m.construction.as_ref().unwrap().designated_layer.unwrap();
    if let Block::Mamba(p) = &mut m.blocks[layer] {
        for ch in 0..p.conv_kernel.rows() {
            p.conv_kernel.set(ch, 1, 0.0);
        }
    }
    let probes = InductionProbe::suite(v, 16, 300, 3).unwrap();
    let acc = induction_accuracy(&m, &probes).unwrap();
    assert!(acc <= 5.0 / v as f64, "accuracy {acc}");
}

#[test]
fn ioi_model_prefers_indirect_object() {
    let m = build_ioi_mamba(0).unwrap();
    let mut r = rng::seeded(4);
    for _ in 0..20 {
        let s = corpus::ioi_sample(&mut r).unwrap();
        let l = logits(&m, &s.clean).unwrap();
        let last = l.row(l.len() - 1);
        assert!(last[s.io] - last[s.s] > 3.0);
    }
}

#[test]
fn construction_rejects_small_vocab() {
    assert!(matches!(build_induction_transformer(7, 0), Err(Error::Config(_))));
    assert!(matches!(build_induction_mamba(4, 0), Err(Error::Config(_))));
}

#[test]
fn weights_round_trip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for (i, m) in [small_mamba(1), small_transformer(1), build_induction_mamba(8, 0).unwrap()]
        .into_iter()
        .enumerate()
    {
        let p1 = dir.path().join(format!("m{i}.bin"));
        let p2 = dir.path().join(format!("m{i}b.bin"));
        save_weights(&m, &p1).unwrap();
        let back = load_weights(&p1).unwrap();
        assert_eq!(back, m);
        save_weights(&back, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}

#[test]
fn weights_detect_truncation_and_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.bin");
    save_weights(&small_transformer(1), &p).unwrap();
    assert!(matches!(
        load_weights_as(&p, Arch::Mamba),
        Err(Error::Architecture { .. })
    ));
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 100]).unwrap();
    assert!(matches!(load_weights(&p), Err(Error::Checksum { .. })));
}
