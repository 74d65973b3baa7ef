use proptest::prelude::*;
use rand::Rng as _;

use super::*;
use crate::rng;

fn dense(rows: &[Vec<f64>]) -> ActivationStream {
    let mut s = ActivationStream::new("t", rows[0].len());
    for (i, r) in rows.iter().enumerate() {
        s.push(i as u64, 0, r).unwrap();
    }
    s
}

fn random_rows(n: usize, f: usize, density: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::seeded(seed);
    (0..n)
        .map(|_| {
            (0..f)
                .map(|_| if r.random::<f64>() < density { r.random_range(0.0..3.0) } else { 0.0 })
                .collect()
        })
        .collect()
}

fn sparse(rows: &[Vec<f64>]) -> FeatureRecords {
    let mut rec = FeatureRecords::new(rows[0].len());
    for (i, r) in rows.iter().enumerate() {
        rec.push_dense(i as u64, 0, r);
    }
    rec
}

fn job_of(a: Vec<FeatureData>, b: Vec<FeatureData>) -> CorrelationJob {
    let wrap = |v: Vec<FeatureData>| {
        v.into_iter()
            .enumerate()
            .map(|(layer, data)| LayerSource { layer, data })
            .collect()
    };
    CorrelationJob::new(wrap(a), wrap(b), "a->b", Mode::Sae)
}

/// Two-pass centered Pearson over all pairs, concatenating layers.
fn oracle(a: &[Vec<Vec<f64>>], b: &[Vec<Vec<f64>>]) -> Vec<Option<(usize, f64)>> {
    let cols = |side: &[Vec<Vec<f64>>]| -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for layer in side {
            for j in 0..layer[0].len() {
                out.push(layer.iter().map(|r| r[j]).collect());
            }
        }
        out
    };
    let ca = cols(a);
    let cb = cols(b);
    let stats = |x: &Vec<f64>| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let c: Vec<f64> = x.iter().map(|v| v - m).collect();
        let ss = c.iter().map(|v| v * v).sum::<f64>();
        (c, ss)
    };
    let sb: Vec<_> = cb.iter().map(stats).collect();
    ca.iter()
        .map(|x| {
            let (cx, sx) = stats(x);
            if sx <= 1e-20 {
                return None;
            }
            let mut best: Option<(usize, f64)> = None;
            for (j, (cy, sy)) in sb.iter().enumerate() {
                if *sy <= 1e-20 {
                    continue;
                }
                let r = cx.iter().zip(cy).map(|(p, q)| p * q).sum::<f64>() / (sx.sqrt() * sy.sqrt());
                if best.is_none_or(|(_, b)| r > b) {
                    best = Some((j, r));
                }
            }
            best
        })
        .collect()
}

fn global_best(t: &MatchTable, widths_b: &[usize]) -> Vec<Option<(usize, f64)>> {
    t.rows
        .iter()
        .map(|r| {
            let lb = r.layer_b?;
            let off: usize = widths_b[..lb].iter().sum();
            Some((off + r.best_feature_b?, r.rho?))
        })
        .collect()
}

#[test]
fn hand_computed_statistics() {
    let mut acc = PearsonAccumulator::new(2, 2);
    let xs = [1.0, 0.0, 2.0, 1.0, 3.0, 0.0];
    let ys = [2.0, 1.0, 4.0, 0.0, 6.0, 5.0];
    acc.accumulate_dense(&xs, &ys).unwrap();
    assert_eq!(acc.n, 3);
    assert_eq!(acc.sum_x, vec![6.0, 1.0]);
    assert_eq!(acc.sum_x2, vec![14.0, 1.0]);
    assert_eq!(acc.sum_y, vec![12.0, 6.0]);
    assert_eq!(acc.sum_y2, vec![56.0, 26.0]);
    assert_eq!(acc.sum_xy, vec![28.0, 16.0, 4.0, 0.0]);
    assert!((acc.correlation(0, 0).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn empty_chunk_and_misalignment() {
    let mut acc = PearsonAccumulator::new(2, 3);
    let before = acc.clone();
    acc.accumulate_dense(&[], &[]).unwrap();
    assert_eq!(acc, before);
    assert!(acc.accumulate_dense(&[1.0, 2.0], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).is_err());
}

#[test]
fn merge_equals_concatenation() {
    let rows_a = random_rows(40, 3, 0.6, 1);
    let rows_b = random_rows(40, 4, 0.6, 2);
    let flat = |r: &[Vec<f64>]| r.concat();
    let mut whole = PearsonAccumulator::new(3, 4);
    whole.accumulate_dense(&flat(&rows_a), &flat(&rows_b)).unwrap();
    let mut h1 = PearsonAccumulator::new(3, 4);
    h1.accumulate_dense(&flat(&rows_a[..17]), &flat(&rows_b[..17])).unwrap();
    let mut h2 = PearsonAccumulator::new(3, 4);
    h2.accumulate_dense(&flat(&rows_a[17..]), &flat(&rows_b[17..])).unwrap();
    h1.merge(&h2).unwrap();
    assert_eq!(h1.n, whole.n);
    for (a, b) in h1.sum_xy.iter().zip(&whole.sum_xy) {
        assert!((a - b).abs() < 1e-9);
    }
    assert!(h1.merge(&PearsonAccumulator::new(1, 1)).is_err());
}

#[test]
fn matches_naive_oracle_on_random_instance() {
    let a = random_rows(100, 8, 0.5, 3);
    let b = random_rows(100, 12, 0.5, 4);
    let t = run_mppc(
        &job_of(vec![FeatureData::Dense(dense(&a))], vec![FeatureData::Dense(dense(&b))]),
        &MppcOptions::default(),
    )
    .unwrap();
    let want = oracle(&[a], &[b]);
    for (got, want) in global_best(&t, &[12]).iter().zip(&want) {
        let (gj, gr) = got.unwrap();
        let (wj, wr) = want.unwrap();
        assert_eq!(gj, wj);
        assert!((gr - wr).abs() < 1e-6);
    }
}

#[test]
fn tiling_layers_and_sparse_path_agree_with_oracle() {
    let a1 = random_rows(300, 10, 0.03, 5);
    let a2 = random_rows(300, 7, 0.04, 6);
    let b1 = random_rows(300, 9, 0.03, 7);
    let b2 = random_rows(300, 11, 0.02, 8);
    let want = oracle(&[a1.clone(), a2.clone()], &[b1.clone(), b2.clone()]);
    let variants = [
        (
            job_of(
                vec![FeatureData::Dense(dense(&a1)), FeatureData::Dense(dense(&a2))],
                vec![FeatureData::Dense(dense(&b1)), FeatureData::Dense(dense(&b2))],
            ),
            MppcOptions::default(),
        ),
        (
            job_of(
                vec![FeatureData::Sparse(sparse(&a1)), FeatureData::Sparse(sparse(&a2))],
                vec![FeatureData::Sparse(sparse(&b1)), FeatureData::Sparse(sparse(&b2))],
            ),
            MppcOptions {
                tile_a: Some(3),
                tile_b: Some(4),
                ..Default::default()
            },
        ),
        (
            job_of(
                vec![FeatureData::Sparse(sparse(&a1)), FeatureData::Dense(dense(&a2))],
                vec![FeatureData::Dense(dense(&b1)), FeatureData::Sparse(sparse(&b2))],
            ),
            MppcOptions {
                tile_a: Some(5),
                tile_b: Some(7),
                token_chunk: 33,
                ..Default::default()
            },
        ),
    ];
    let mut tables = Vec::new();
    for (job, opts) in &variants {
        let t = run_mppc(job, opts).unwrap();
        let got = global_best(&t, &[9, 11]);
        for (g, w) in got.iter().zip(&want) {
            match (g, w) {
                (None, None) => {}
                (Some((gj, gr)), Some((wj, wr))) => {
                    assert!((gr - wr).abs() < 1e-6);
                    if gj != wj {
                        assert!((gr - wr).abs() < 1e-9, "different argmax without a tie");
                    }
                }
                _ => panic!("definedness differs: {g:?} vs {w:?}"),
            }
        }
        tables.push(t);
    }
    assert_eq!(tables[0].rows.len(), 17);
    assert_eq!(tables[0].rows[12].layer_a, 1);
    assert_eq!(tables[0].rows[12].feature_a, 2);
}

#[test]
fn self_match_is_one_and_histogram_diagonal() {
    let a0 = random_rows(200, 6, 0.3, 9);
    let a1 = random_rows(200, 5, 0.3, 10);
    let side = || vec![FeatureData::Dense(dense(&a0)), FeatureData::Dense(dense(&a1))];
    let t = run_mppc(&job_of(side(), side()), &MppcOptions::default()).unwrap();
    for r in &t.rows {
        assert!((r.rho.unwrap() - 1.0).abs() < 1e-6);
    }
    let h = depth_histogram(&t, 2, 2).unwrap();
    assert_eq!(h, vec![vec![6, 0], vec![0, 5]]);
}

#[test]
fn constant_features_are_undefined() {
    let mut a = random_rows(50, 3, 0.5, 1);
    for r in a.iter_mut() {
        r[1] = 2.5;
    }
    let mut b = random_rows(50, 2, 0.5, 2);
    for r in b.iter_mut() {
        r[0] = 0.0;
    }
    let t = run_mppc(
        &job_of(vec![FeatureData::Dense(dense(&a))], vec![FeatureData::Dense(dense(&b))]),
        &MppcOptions::default(),
    )
    .unwrap();
    assert_eq!(t.rows[1].rho, None);
    assert_eq!(t.n_undefined(), 1);
    assert!(t.rows.iter().all(|r| r.best_feature_b != Some(0)));
    assert_eq!(t.defined().count(), 2);
}

#[test]
fn negated_copy_loses_to_any_other_feature() {
    let a = random_rows(80, 1, 0.7, 3);
    let other = random_rows(80, 1, 0.7, 4);
    let b: Vec<Vec<f64>> = a.iter().zip(&other).map(|(x, o)| vec![-x[0], o[0]]).collect();
    let t = run_mppc(
        &job_of(vec![FeatureData::Dense(dense(&a))], vec![FeatureData::Dense(dense(&b))]),
        &MppcOptions::default(),
    )
    .unwrap();
    let want = oracle(&[a], &[b]);
    assert_eq!(t.rows[0].best_feature_b, Some(1));
    assert!((t.rows[0].rho.unwrap() - want[0].unwrap().1).abs() < 1e-9);
}

#[test]
fn same_layer_restriction() {
    let a = random_rows(100, 2, 0.5, 1);
    let b0 = random_rows(100, 2, 0.5, 2);
    let job = job_of(
        vec![FeatureData::Dense(dense(&a))],
        vec![FeatureData::Dense(dense(&b0)), FeatureData::Dense(dense(&a))],
    );
    let free = run_mppc(&job, &MppcOptions::default()).unwrap();
    assert!(free.rows.iter().all(|r| r.layer_b == Some(1)));
    let same = run_mppc(
        &job,
        &MppcOptions {
            same_layer_only: true,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(same.rows.iter().all(|r| r.layer_b == Some(0)));
}

#[test]
fn errors_on_short_or_misaligned_jobs() {
    let one = random_rows(1, 2, 1.0, 1);
    let job = job_of(vec![FeatureData::Dense(dense(&one))], vec![FeatureData::Dense(dense(&one))]);
    assert!(matches!(run_mppc(&job, &MppcOptions::default()), Err(Error::Data(_))));
    let job = job_of(
        vec![FeatureData::Dense(dense(&random_rows(5, 2, 1.0, 1)))],
        vec![FeatureData::Dense(dense(&random_rows(6, 2, 1.0, 1)))],
    );
    assert!(matches!(run_mppc(&job, &MppcOptions::default()), Err(Error::Data(_))));
}

#[test]
fn csv_round_trip_and_format() {
    let a = random_rows(60, 3, 0.5, 1);
    let mut b = random_rows(60, 2, 0.5, 2);
    for r in b.iter_mut() {
        r[0] = 0.0;
    }
    let t = run_mppc(
        &job_of(vec![FeatureData::Dense(dense(&a))], vec![FeatureData::Dense(dense(&b))]),
        &MppcOptions::default(),
    )
    .unwrap();
    let csv = t.to_csv();
    assert!(csv.starts_with("feature_a,layer_a,best_feature_b,layer_b,rho\n0,0,1,0,"));
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.csv");
    t.write_csv(&p).unwrap();
    let back = MatchTable::read_csv(&p).unwrap();
    assert_eq!(back.rows, t.rows);
}

#[test]
fn difference_report() {
    let row = |i, rho| MatchRow {
        feature_a: i,
        layer_a: 0,
        best_feature_b: Some(0),
        layer_b: Some(0),
        rho,
    };
    let table = |rhos: [Option<f64>; 3]| MatchTable {
        direction: "a->b".into(),
        mode: Mode::Sae,
        n_tokens: 10,
        rows: rhos.iter().enumerate().map(|(i, r)| row(i, *r)).collect(),
    };
    let main = table([Some(0.9), Some(0.5), None]);
    let sky = table([Some(0.8), Some(0.52), Some(0.1)]);
    let d = mppc_difference(&main, &sky).unwrap();
    assert!((d.deltas[0].unwrap() - 0.1).abs() < 1e-12);
    assert!((d.deltas[1].unwrap() + 0.02).abs() < 1e-12);
    assert_eq!(d.deltas[2], None);
    assert_eq!(d.n_defined, 2);
    assert!((d.share_small - 0.5).abs() < 1e-12);
    let same = mppc_difference(&main, &main).unwrap();
    assert!(same.deltas.iter().flatten().all(|x| *x == 0.0));
    let mut short = sky.clone();
    short.rows.pop();
    assert!(mppc_difference(&main, &short).is_err());
}

#[test]
fn quantiles_follow_sorting() {
    let mut r = rng::seeded(1);
    let mut xs: Vec<f64> = (0..101).map(|_| r.random_range(-1.0..1.0)).collect();
    xs.sort_by(f64::total_cmp);
    assert_eq!(quantile(&xs, 0.05), xs[5]);
    assert_eq!(quantile(&xs, 0.5), xs[50]);
    assert_eq!(quantile(&xs, 0.95), xs[95]);
    assert_eq!(quantile(&xs, 0.0), xs[0]);
    assert_eq!(quantile(&xs, 1.0), xs[100]);
}

#[test]
fn histogram_row_sums_and_bounds() {
    let a = random_rows(100, 4, 0.5, 1);
    let b = random_rows(100, 3, 0.5, 2);
    let c = random_rows(100, 5, 0.5, 3);
    let t = run_mppc(
        &job_of(
            vec![FeatureData::Dense(dense(&a)), FeatureData::Dense(dense(&c))],
            vec![FeatureData::Dense(dense(&b)), FeatureData::Dense(dense(&c))],
        ),
        &MppcOptions::default(),
    )
    .unwrap();
    let h = depth_histogram(&t, 2, 2).unwrap();
    assert_eq!(h[0].iter().sum::<usize>(), 4);
    assert_eq!(h[1].iter().sum::<usize>(), 5);
    assert!(depth_histogram(&t, 1, 2).is_err());
}

#[test]
fn skyline_wiring() {
    let a = random_rows(100, 4, 0.5, 1);
    let mut b = random_rows(100, 6, 0.5, 2);
    for (rb, ra) in b.iter_mut().zip(&a) {
        rb[..4].copy_from_slice(ra);
    }
    let src = |rows: &Vec<Vec<f64>>| {
        vec![LayerSource {
            layer: 0,
            data: FeatureData::Dense(dense(rows)),
        }]
    };
    let assets = SkylineAssets {
        base: src(&a),
        model_variant: Some(src(&b)),
        sae_variant: Some(src(&a)),
    };
    let same = run_mppc(
        &skyline_job(SkylineKind::SaeSeedVariant, &assets, Direction::Forward).unwrap(),
        &MppcOptions::default(),
    )
    .unwrap();
    assert!(same.defined().all(|r| (r - 1.0).abs() < 1e-9));
    let fwd = run_mppc(
        &skyline_job(SkylineKind::ModelSeedVariant, &assets, Direction::Forward).unwrap(),
        &MppcOptions::default(),
    )
    .unwrap();
    let rev_job = skyline_job(SkylineKind::ModelSeedVariant, &assets, Direction::Reverse).unwrap();
    assert_eq!(rev_job.direction, "x'->x");
    let rev = run_mppc(&rev_job, &MppcOptions::default()).unwrap();
    assert!((fwd.mean_rho().unwrap() - 1.0).abs() < 1e-9);
    assert!(rev.mean_rho().unwrap() < 0.99);
    let missing = SkylineAssets {
        base: src(&a),
        ..Default::default()
    };
    assert!(skyline_job(SkylineKind::ModelSeedVariant, &missing, Direction::Forward).is_err());
}

#[test]
fn parallel_and_sequential_tables_identical() {
    let a = random_rows(500, 20, 0.2, 1);
    let b = random_rows(500, 30, 0.2, 2);
    let job = job_of(vec![FeatureData::Dense(dense(&a))], vec![FeatureData::Dense(dense(&b))]);
    let opts = MppcOptions {
        tile_a: Some(7),
        tile_b: Some(11),
        ..Default::default()
    };
    let p = run_mppc(&job, &opts).unwrap();
    let s = crate::par::sequential(|| run_mppc(&job, &opts).unwrap());
    assert_eq!(p.to_csv(), s.to_csv());
}

#[test]
fn neuron_sources_self_match() {
    use crate::harvest::corpus::{gen_token_corpus, CorpusParams};
    use crate::models::{random_mamba, RandomModelConfig};
    let m = random_mamba(&RandomModelConfig {
        vocab: 16,
        d_model: 6,
        n_layers: 2,
        d_state: 2,
        ..Default::default()
    })
    .unwrap();
    let docs = gen_token_corpus(&CorpusParams {
        n_docs: 6,
        vocab: 16,
        min_len: 10,
        max_len: 20,
        ..Default::default()
    })
    .unwrap();
    let job = neuron_mode_sources(&m, &m, &docs, 64).unwrap();
    assert_eq!(job.direction, "m->m");
    assert_eq!(job.side_a.len(), 2);
    let t = run_mppc(&job, &MppcOptions::default()).unwrap();
    assert!(t.defined().all(|r| (r - 1.0).abs() < 1e-6));
    let bad = neuron_job(
        vec![ActivationStream::new("a", 3), ActivationStream::new("b", 4)],
        vec![],
        "x",
    );
    assert!(matches!(bad, Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn positive_affine_invariance(seed in any::<u64>(), scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
        let a = random_rows(60, 3, 0.6, seed);
        let b = random_rows(60, 4, 0.6, seed ^ 1);
        let a2: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|v| scale * v + shift).collect()).collect();
        let opts = MppcOptions::default();
        let t1 = run_mppc(&job_of(vec![FeatureData::Dense(dense(&a))], vec![FeatureData::Dense(dense(&b))]), &opts).unwrap();
        let t2 = run_mppc(&job_of(vec![FeatureData::Dense(dense(&a2))], vec![FeatureData::Dense(dense(&b))]), &opts).unwrap();
        for (x, y) in t1.rows.iter().zip(&t2.rows) {
            match (x.rho, y.rho) {
                (Some(p), Some(q)) => prop_assert!((p - q).abs() < 1e-9),
                (None, None) => {}
                _ => prop_assert!(false),
            }
        }
    }

    #[test]
    fn reported_rho_dominates_every_pair(seed in any::<u64>()) {
        let a = random_rows(80, 4, 0.5, seed);
        let b = random_rows(80, 9, 0.5, seed ^ 7);
        let t = run_mppc(&job_of(vec![FeatureData::Dense(dense(&a))], vec![FeatureData::Dense(dense(&b))]), &MppcOptions::default()).unwrap();
        let mut acc = PearsonAccumulator::new(4, 9);
        acc.accumulate_dense(&a.concat(), &b.concat()).unwrap();
        for (i, r) in t.rows.iter().enumerate() {
            let Some(best) = r.rho else { continue };
            for j in 0..9 {
                if let Some(c) = acc.correlation(i, j) {
                    prop_assert!(best >= c - 1e-12);
                }
            }
            prop_assert!((-1.0..=1.0).contains(&best));
        }
    }
}
