use super::*;
use crate::gradcheck::grad_check_many;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn no_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

#[test]
fn single_pair_attention_is_one() {
    let a = cross_attention(&random(&[1, 3], 1), &random(&[1, 3], 2)).unwrap();
    assert_eq!(a.data(), &[1.0]);
}

#[test]
fn identical_visual_rows_give_uniform_columns() {
    let row = random(&[1, 4], 3).into_vec();
    let fv = Tensor::new([3, 4], [row.clone(), row.clone(), row].concat()).unwrap();
    let a = cross_attention(&fv, &random(&[2, 4], 4)).unwrap();
    assert!(a.data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn random_attention_columns_sum_to_one() {
    let a = cross_attention(&random(&[3, 5], 5), &random(&[2, 5], 6)).unwrap();
    for j in 0..2 {
        let s: f64 = (0..3).map(|i| a.get2(i, j)).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn attention_rejects_dimension_mismatch() {
    assert!(matches!(
        cross_attention(&random(&[3, 5], 5), &random(&[2, 4], 6)),
        Err(Error::Shape { op: "cross_attention", .. })
    ));
}

#[test]
fn mean_score_examples() {
    let id = Tensor::<f64>::from_f64([2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
    assert_eq!(mean_scores(&id), vec![0.5, 0.5]);
    let uniform = Tensor::<f64>::full([4, 3], 0.25).unwrap();
    assert_eq!(mean_scores(&uniform), vec![0.25; 4]);
    let a = Tensor::<f64>::from_f64([2, 2], &[0.9, 0.5, 0.1, 0.5]).unwrap();
    let m = mean_scores(&a);
    assert!((m[0] - 0.7).abs() < 1e-15 && (m[1] - 0.3).abs() < 1e-15);
}

#[test]
fn prune_step_examples() {
    assert_eq!(prune_step(&[0.25f64; 4], 0.2, true), vec![0, 1, 2, 3]);
    assert_eq!(prune_step(&[0.7f64, 0.1, 0.1, 0.1], 1.0, true), vec![0]);
    assert_eq!(prune_step(&[0.25f64; 4], 1.0, true), vec![0, 1, 2, 3]);
}

#[test]
fn prune_step_falls_back_to_first_argmax() {
    // tau = 10 puts the bar above every node.
    assert_eq!(prune_step(&[0.2f64, 0.4, 0.4], 10.0, true), vec![1]);
    assert!(prune_step(&[0.2f64, 0.4, 0.4], 10.0, false).is_empty());
}

#[test]
fn prune_loss_examples() {
    let fl = rows(&random(&[3, 4], 7));
    assert_eq!(prune_loss(&[], &fl, StepWeighting::Linear).unwrap(), 0.0);
    let same = vec![fl.clone(), fl.clone()];
    assert!(prune_loss(&same, &fl, StepWeighting::Linear).unwrap().abs() < 1e-15);
    let s1 = rows(&random(&[4, 4], 8));
    let s2 = rows(&random(&[2, 4], 9));
    let k1 = pooled_kl(&s1, &fl).unwrap();
    let k2 = pooled_kl(&s2, &fl).unwrap();
    let got = prune_loss(&[s1.clone(), s2.clone()], &fl, StepWeighting::Linear).unwrap();
    assert!((got - (k1 + 2.0 * k2)).abs() < 1e-15);
    let constant = prune_loss(&[s1, s2], &fl, StepWeighting::Constant).unwrap();
    assert!((constant - 2.0 * (k1 + k2)).abs() < 1e-15);
}

#[test]
fn zero_steps_is_identity_with_exact_zero_loss() {
    let mut g = Graph::<f64>::new();
    let fv = g.param(random(&[4, 3], 10));
    let fl = g.param(random(&[2, 3], 11));
    let cfg = PruneConfig {
        steps: 0,
        ..PruneConfig::default()
    };
    let out = multi_step_prune(&mut g, fv, fl, &cfg, &mut no_rng()).unwrap();
    assert_eq!(out.features, fv);
    assert_eq!(g.value(out.loss).item(), 0.0);
    assert!(out.trace.steps.is_empty());
    assert_eq!(out.trace.final_kept, vec![0, 1, 2, 3]);
}

/// Orthonormal rows spanning `dim` dimensions via Gram-Schmidt on random vectors.
fn orthonormal(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

#[test]
fn constructed_distractors_are_pruned() {
    // Language rows are orthonormal directions scaled by c; aligned visual
    // nodes copy them and distractors are orthogonal to all of them. Each
    // language column then puts 1 / (e^(c^2) + 4) on every distractor, which
    // is below 0.2 / 5 once c^2 > ln 21.
    let basis = orthonormal(5, 8, 12);
    let c = 2.0;
    let lang: Vec<f64> = basis[..3].iter().flat_map(|r| r.iter().map(|x| x * c)).collect();
    let mut vis_rows: Vec<Vec<f64>> = basis[..3].iter().map(|r| r.iter().map(|x| x * c).collect()).collect();
    vis_rows.push(basis[3].clone());
    vis_rows.push(basis[4].iter().map(|x| x * 3.0).collect());
    let order = [3, 0, 4, 2, 1];
    let fv = Tensor::new([5, 8], order.iter().flat_map(|&i| vis_rows[i].clone()).collect()).unwrap();
    let mut g = Graph::<f64>::new();
    let fv = g.param(fv);
    let fl = g.param(Tensor::new([3, 8], lang).unwrap());
    let out = multi_step_prune(&mut g, fv, fl, &PruneConfig::default(), &mut no_rng()).unwrap();
    // Positions 0 and 2 hold the distractors.
    assert_eq!(out.trace.final_kept, vec![1, 3, 4]);
    assert_eq!(out.trace.steps.len(), 5);
    assert!(g.value(out.loss).item() >= 0.0);
}

#[test]
fn graph_loss_matches_pure_loss_on_traced_sets() {
    let fv_t = random(&[6, 4], 13).map(|x| 3.0 * x);
    let fl_t = random(&[3, 4], 14);
    let cfg = PruneConfig {
        tau: 0.8,
        ..PruneConfig::default()
    };
    let mut g = Graph::<f64>::new();
    let fv = g.param(fv_t.clone());
    let fl = g.param(fl_t.clone());
    let out = multi_step_prune(&mut g, fv, fl, &cfg, &mut no_rng()).unwrap();
    let steps: Vec<Vec<Vec<f64>>> = out
        .trace
        .steps
        .iter()
        .map(|s| s.kept.iter().map(|&i| fv_t.row(i).to_vec()).collect())
        .collect();
    let want = prune_loss(&steps, &rows(&fl_t), cfg.weighting).unwrap();
    assert!((g.value(out.loss).item() - want).abs() < 1e-12);
    assert!((out.trace.loss - want).abs() < 1e-12);
    let kept_rows = fv_t.select_rows(&out.trace.final_kept).unwrap();
    assert_eq!(g.value(out.features), &kept_rows);
}

#[test]
fn random_mode_keeps_the_guided_count() {
    let fv_t = random(&[8, 4], 15).map(|x| 3.0 * x);
    let fl_t = random(&[3, 4], 16);
    let run = |mode, seed| {
        let mut g = Graph::<f64>::new();
        let fv = g.param(fv_t.clone());
        let fl = g.param(fl_t.clone());
        let cfg = PruneConfig {
            steps: 1,
            tau: 0.9,
            mode,
            ..PruneConfig::default()
        };
        multi_step_prune(&mut g, fv, fl, &cfg, &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap()
            .trace
    };
    let guided = run(PruneMode::Guided, 0);
    let a = run(PruneMode::Random, 1);
    let b = run(PruneMode::Random, 1);
    assert_eq!(a, b);
    assert_eq!(a.final_kept.len(), guided.final_kept.len());
    assert!(guided.final_kept.len() < 8);
    let off = run(PruneMode::Off, 0);
    assert_eq!(off.final_kept, (0..8).collect::<Vec<_>>());
}

#[test]
fn gradients_flow_through_pruning() {
    let fv = random(&[6, 4], 17).map(|x| 2.0 * x);
    let fl = random(&[3, 4], 18);
    let w = random(&[4], 19);
    let cfg = PruneConfig {
        steps: 3,
        tau: 0.7,
        ..PruneConfig::default()
    };
    let report = grad_check_many(
        |g, v| {
            let out = multi_step_prune(g, v[0], v[1], &cfg, &mut no_rng())?;
            let pooled = g.mean(out.features, 0)?;
            let c = g.constant(w.clone());
            let p = g.mul(pooled, c)?;
            let s = g.sum(p)?;
            g.add(s, out.loss)
        },
        &[fv, fl],
        1e-5,
        None,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn heatmap_is_well_formed_svg() {
    let svg = attention_heatmap_svg(
        &[vec![0.9, 0.1], vec![0.1, 0.9]],
        &["a<b".into(), "c".into()],
        &["x".into(), "y".into()],
        "step 1",
    );
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("<rect").count(), 4);
    assert!(svg.contains("a&lt;b"));
}

mod props {
    use super::*;
    use proptest::prelude::*;

    fn instance() -> impl Strategy<Value = (Tensor<f64>, Tensor<f64>)> {
        (1usize..9, 1usize..6, 1usize..6, any::<u64>(), 0.1f64..4.0).prop_map(|(pv, pl, d, seed, scale)| {
            (
                random(&[pv, d], seed).map(|x| x * scale),
                random(&[pl, d], seed ^ 0x5555).map(|x| x * scale),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn column_stochastic_and_scores_sum_to_one((fv, fl) in instance()) {
            let a = cross_attention(&fv, &fl).unwrap();
            for j in 0..fl.rows() {
                let s: f64 = (0..fv.rows()).map(|i| a.get2(i, j)).sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
            let m: f64 = mean_scores(&a).iter().sum();
            prop_assert!((m - 1.0).abs() < 1e-9);
        }

        #[test]
        fn tau_monotone((fv, fl) in instance(), t1 in 0.0f64..3.0, t2 in 0.0f64..3.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let m = mean_scores(&cross_attention(&fv, &fl).unwrap());
            let a = prune_step(&m, lo, false);
            let b = prune_step(&m, hi, false);
            prop_assert!(b.iter().all(|i| a.contains(i)));
        }

        #[test]
        fn kept_sets_nested_and_never_empty((fv, fl) in instance(), tau in 0.0f64..3.0) {
            let mut g = Graph::<f64>::new();
            let v = g.param(fv);
            let l = g.param(fl);
            let cfg = PruneConfig { tau, ..PruneConfig::default() };
            let out = multi_step_prune(&mut g, v, l, &cfg, &mut no_rng()).unwrap();
            let mut prev: Vec<usize> = (0..out.trace.initial_nodes).collect();
            for s in &out.trace.steps {
                prop_assert_eq!(&s.candidates, &prev);
                prop_assert!(s.kept.iter().all(|i| prev.contains(i)));
                prop_assert!(!s.kept.is_empty());
                prop_assert!((s.mean_scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prev = s.kept.clone();
            }
            prop_assert!(g.value(out.loss).item() >= 0.0);
        }
    }
}
