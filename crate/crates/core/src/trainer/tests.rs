use super::*;
use crate::backbone::BackboneConfig;
use crate::model::{GraphConfig, ModelConfig};
use crate::pruner::PruneConfig;

#[test]
fn schedule_values() {
    assert_eq!(lr_at(2000, 0.005, 2000), 0.005);
    assert!((lr_at(1000, 0.005, 2000) - 0.0025).abs() < 1e-15);
    assert!((lr_at(8000, 0.005, 2000) - 0.0025).abs() < 1e-15);
    let below = lr_at(1999, 1.0, 2000);
    let above = lr_at(2001, 1.0, 2000);
    assert!((below - 1.0).abs() < 1e-3 && (above - 1.0).abs() < 1e-3);
    let t = TrainConfig::table_preset("base").unwrap();
    assert_eq!((t.warmup, t.peak_lr), (20_000, 0.0005));
    assert_eq!(TrainConfig::default().warmup, 2000);
}

#[test]
fn total_loss_sums_and_names_bad_component() {
    assert!((total_loss(1.0, 0.5, 0.2).unwrap() - 1.7).abs() < 1e-15);
    assert_eq!(total_loss(1.0, 0.0, 0.2).unwrap(), 1.0 + 0.2);
    let e = total_loss(1.0, f64::NAN, 0.2).unwrap_err().to_string();
    assert!(e.contains("l_prune"), "{e}");
}

fn one_param(values: &[f64]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.add("w", Tensor::new([values.len()], values.to_vec()).unwrap()).unwrap();
    s
}

#[test]
fn adam_zero_gradient_keeps_params_and_decays_moments() {
    let mut p = one_param(&[1.0, -2.0]);
    let mut adam = Adam::new(&p, 0.9, 0.98, 1e-8).unwrap();
    adam.m[0] = Tensor::new([2], vec![0.5, 0.5]).unwrap();
    adam.v[0] = Tensor::new([2], vec![0.0, 0.0]).unwrap();
    adam.step(&mut p, &[Tensor::zeros([2]).unwrap()], 0.1).unwrap();
    assert_eq!(adam.m[0].data(), &[0.45, 0.45]);
    // With v = 0 the nonzero first moment still moves the parameter; restart
    // from clean moments to check the pure zero-gradient case.
    let mut p = one_param(&[1.0, -2.0]);
    let mut adam = Adam::new(&p, 0.9, 0.98, 1e-8).unwrap();
    adam.step(&mut p, &[Tensor::zeros([2]).unwrap()], 0.1).unwrap();
    assert_eq!(p.get(p.id("w").unwrap()).data(), &[1.0, -2.0]);
}

#[test]
fn adam_first_step_moves_by_lr_against_gradient_sign() {
    let mut p = one_param(&[0.0, 0.0, 0.0]);
    let mut adam = Adam::new(&p, 0.9, 0.98, 1e-8).unwrap();
    adam.step(&mut p, &[Tensor::new([3], vec![3.0, -0.5, 1e-3]).unwrap()], 0.01).unwrap();
    let w = p.get(p.id("w").unwrap()).data().to_vec();
    assert!((w[0] + 0.01).abs() < 1e-9);
    assert!((w[1] - 0.01).abs() < 1e-9);
    assert!((w[2] + 0.01).abs() < 1e-7);
}

#[test]
fn adam_two_steps_match_recurrence() {
    let (b1, b2, eps) = (0.9f64, 0.98f64, 1e-8f64);
    let grads = [[0.3, -1.2], [-0.7, 0.4]];
    let lrs = [0.01, 0.02];
    let mut p = one_param(&[0.5, -0.25]);
    let mut adam = Adam::new(&p, b1, b2, eps).unwrap();
    let (mut w, mut m, mut v): ([f64; 2], [f64; 2], [f64; 2]) = ([0.5, -0.25], [0.0; 2], [0.0; 2]);
    for t in 0..2 {
        adam.step(&mut p, &[Tensor::new([2], grads[t].to_vec()).unwrap()], lrs[t]).unwrap();
        for i in 0..2 {
            m[i] = b1 * m[i] + (1.0 - b1) * grads[t][i];
            v[i] = b2 * v[i] + (1.0 - b2) * grads[t][i] * grads[t][i];
            let mh = m[i] / (1.0 - b1.powi(t as i32 + 1));
            let vh = v[i] / (1.0 - b2.powi(t as i32 + 1));
            w[i] -= lrs[t] * mh / (vh.sqrt() + eps);
        }
    }
    let got = p.get(p.id("w").unwrap()).data();
    for i in 0..2 {
        assert!((got[i] - w[i]).abs() < 1e-15);
    }
}

#[test]
fn adam_rejects_non_finite_gradient_without_changes() {
    let mut p = one_param(&[1.0]);
    let mut adam = Adam::new(&p, 0.9, 0.98, 1e-8).unwrap();
    let before = (p.clone(), adam.clone());
    let err = adam.step(&mut p, &[Tensor::new([1], vec![f64::INFINITY]).unwrap()], 0.1);
    assert!(matches!(err, Err(Error::NonFinite(_))));
    assert_eq!((p, adam), before);
}

#[test]
fn clipping_scales_to_max_norm() {
    let mut g: Vec<Tensor<f64>> = vec![Tensor::new([2], vec![3.0, 4.0]).unwrap()];
    assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
    assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
    let mut small: Vec<Tensor<f64>> = vec![Tensor::new([1], vec![0.1]).unwrap()];
    clip_global_norm(&mut small, 1.0);
    assert_eq!(small[0].data(), &[0.1]);
}

#[test]
fn early_stopping_traces() {
    let mut s = EarlyStopping::new(1);
    assert!(!s.update(2.0));
    assert!(s.update(2.5));
    let mut s = EarlyStopping::new(2);
    assert!(!s.update(3.0));
    assert!(!s.update(3.0));
    assert!(!s.update(2.0));
    assert!(!s.update(2.1));
    assert!(s.update(2.2));
}

fn tiny_model_config(graphs: bool) -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        backbone: BackboneConfig {
            layers: 1,
            heads: 2,
            d_model: 8,
            d_ff: 16,
            dropout: 0.1,
            max_positions: 32,
            learned_positions: false,
            segment_embeddings: true,
            tie_output: true,
        },
        graph: GraphConfig {
            use_visual: graphs,
            use_language: graphs,
            label_dim: 4,
            visual_dim: 4,
            ..GraphConfig::default()
        },
        prune: PruneConfig::default(),
        nmt_aux: true,
    }
}

fn toy_corpus() -> Vec<Example> {
    (0..12)
        .map(|i| Example::text(format!("t{i}"), vec![4 + i % 5, 5 + i % 3], vec![6 + i % 4, 4 + i % 6]))
        .collect()
}

#[test]
fn training_log_and_checkpoints_are_deterministic() {
    let cfg = TrainConfig {
        max_tokens: 12,
        max_updates: 9,
        warmup: 4,
        peak_lr: 0.01,
        ..TrainConfig::default()
    };
    let data = toy_corpus();
    let run = |dir: &Path| {
        let mut model = PsgModel::<f64>::new(tiny_model_config(false), 3).unwrap();
        let mut log = Vec::new();
        let report = train(
            &mut model,
            &data,
            &data[..4],
            &cfg,
            TrainOutput {
                dir: Some(dir),
                run: serde_json::json!({"note": "test"}),
                log: Some(&mut log),
            },
        )
        .unwrap();
        (report, String::from_utf8(log).unwrap(), std::fs::read(dir.join("checkpoint_last.bin")).unwrap())
    };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (r1, log1, ck1) = run(d1.path());
    let (r2, log2, ck2) = run(d2.path());
    assert_eq!(ck1, ck2);
    assert_eq!(log1, log2);
    assert_eq!(r1, r2);
    assert_eq!(r1.updates, 9);
    assert_eq!(r1.stop, StopReason::MaxUpdates);
    let records: Vec<LogRecord> = log1.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 9);
    for r in &records {
        assert_eq!(r.l_total, r.l_mmt + r.l_prune + r.l_nmt);
    }
    assert_eq!(records.iter().filter(|r| r.val_loss.is_some()).count() as u64, r1.epochs);
    let ck = Checkpoint::read(&d1.path().join("checkpoint_last.bin")).unwrap();
    assert_eq!(ck.step, 9);
    assert!(ck.moments.is_some());
    let model: PsgModel<f64> = ck.to_model().unwrap();
    assert_eq!(ck.run_config().unwrap()["note"], "test");
    assert_eq!(model.params(), &ck.params);
    assert_eq!(crate::checkpoint::list_checkpoints(d1.path()).unwrap().len() as u64, r1.epochs);
}

#[test]
fn training_reduces_loss_on_tiny_corpus() {
    let cfg = TrainConfig {
        max_tokens: 64,
        max_updates: 150,
        warmup: 10,
        peak_lr: 0.01,
        label_smoothing: 0.0,
        ..TrainConfig::default()
    };
    let mut mc = tiny_model_config(false);
    mc.backbone.dropout = 0.0;
    let mut model = PsgModel::<f64>::new(mc, 4).unwrap();
    let data = toy_corpus();
    let before = corpus_nll(&model, &data, 64).unwrap();
    let report = train(&mut model, &data, &[], &cfg, TrainOutput::default()).unwrap();
    let after = corpus_nll(&model, &data, 64).unwrap();
    assert!(after < 0.5 * before, "{before} -> {after}");
    assert!(report.val_loss.is_empty());
}

#[test]
fn total_gradient_is_sum_of_component_gradients() {
    use crate::graph_encoder::VectorizedSceneGraph;
    use crate::sg::Modality;
    use std::sync::Arc;
    let mut mc = tiny_model_config(true);
    mc.backbone.dropout = 0.0;
    let model = PsgModel::<f64>::new(mc, 5).unwrap();
    let mut ex = toy_corpus().remove(0);
    let g4 = |m, n: usize, seed: f64| {
        Arc::new(VectorizedSceneGraph {
            modality: m,
            num_entities: n,
            entity_dim: 4,
            entities: (0..n * 4).map(|i| ((i as f64 + seed) * 0.7).sin()).collect(),
            relation_dim: 4,
            relations: vec![0.3, -0.2, 0.5, 0.1],
            pairs: vec![[0, 1]],
        })
    };
    ex.visual = Some(g4(Modality::Visual, 3, 1.0));
    ex.language = Some(g4(Modality::Language, 2, 2.0));
    let grads_of = |pick: usize| {
        let mut g = Graph::new();
        let b = model.params().bind(&mut g);
        let l = model.batch_loss(&mut g, &b, &[&ex], 0.1, 0).unwrap();
        let target = [l.total, l.mmt, l.prune, l.nmt][pick];
        let mut gr = g.backward(target).unwrap();
        model.params().collect_grads(&b, &mut gr).unwrap()
    };
    let total = grads_of(0);
    let parts: Vec<_> = (1..4).map(grads_of).collect();
    for (k, t) in total.iter().enumerate() {
        for (i, &x) in t.data().iter().enumerate() {
            let s: f64 = parts.iter().map(|p| p[k].data()[i]).sum();
            assert!((x - s).abs() < 1e-12);
        }
    }
}
