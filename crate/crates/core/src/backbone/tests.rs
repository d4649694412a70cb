use super::*;
use crate::gradcheck::grad_check_many;
use crate::tokenizer::BOS;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config() -> BackboneConfig {
    BackboneConfig {
        layers: 2,
        heads: 2,
        d_model: 8,
        d_ff: 16,
        dropout: 0.0,
        max_positions: 32,
        learned_positions: false,
        segment_embeddings: true,
        tie_output: true,
    }
}

const VOCAB: usize = 13;

fn build(cfg: &BackboneConfig, seed: u64) -> (Backbone, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bb = Backbone::build(cfg, VOCAB, &mut store, &mut rng).unwrap();
    (bb, store)
}

fn features(rows: usize, d: usize, seed: u64) -> Tensor<f64> {
    crate::params::normal(&[rows, d], 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn presets_match_size_table() {
    let t = BackboneConfig::tiny();
    assert_eq!((t.layers, t.heads, t.d_model), (4, 4, 128));
    let s = BackboneConfig::small();
    assert_eq!((s.layers, s.heads, s.d_model), (6, 8, 128));
    let m = BackboneConfig::medium();
    assert_eq!((m.layers, m.heads, m.d_model), (6, 8, 256));
    let b = BackboneConfig::base();
    assert_eq!((b.layers, b.heads, b.d_model, b.d_ff), (6, 8, 512, 2048));
    assert!(BackboneConfig::by_name("huge").is_err());
    let bad = BackboneConfig {
        heads: 3,
        ..small_config()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn positional_encoding_values() {
    let pe = positional_encoding::<f64>(5, 6, 10).unwrap();
    assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    assert_eq!(pe, positional_encoding::<f64>(5, 6, 10).unwrap());
    for pos in 0..5 {
        for i in 0..3 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / 6.0);
            assert!((pe.get2(pos, 2 * i) - angle.sin()).abs() < 1e-15);
            assert!((pe.get2(pos, 2 * i + 1) - angle.cos()).abs() < 1e-15);
        }
    }
    assert!(positional_encoding::<f64>(11, 6, 10).is_err());
}

#[test]
fn joint_row_count_and_spans() {
    let (bb, store) = build(&small_config(), 1);
    let mut g = Graph::inference();
    let b = store.bind(&mut g);
    let l = g.constant(features(2, 8, 2));
    let v = g.constant(features(3, 8, 3));
    let src = [4usize, 5, 6, 2];
    let enc = bb.encode_joint(&mut g, &b, &[&src], &[Some(l)], &[Some(v)]).unwrap();
    assert_eq!(g.shape(enc.out), &[9, 8]);
    assert_eq!(enc.spans[0], Spans { text: 4, language: 2, visual: 3 });
    assert!(enc.key_mask.iter().all(|&m| m));
}

#[test]
fn empty_graphs_equal_text_only_bitwise() {
    let (bb, store) = build(&small_config(), 4);
    let src = [7usize, 8, 2];
    let mut g = Graph::inference();
    let b = store.bind(&mut g);
    let a = bb.encode_joint(&mut g, &b, &[&src], &[None], &[None]).unwrap();
    let t = bb.encode_text_only(&mut g, &b, &[&src]).unwrap();
    assert_eq!(g.value(a.out), g.value(t.out));
    assert!(bb.encode_text_only(&mut g, &b, &[&[]]).is_err());
}

#[test]
fn encoder_padding_invariance() {
    let (bb, store) = build(&small_config(), 5);
    let mut g = Graph::inference();
    let b = store.bind(&mut g);
    let short = [4usize, 2];
    let long = [5usize, 6, 7, 8, 9, 2];
    let l = g.constant(features(2, 8, 6));
    let alone = bb.encode_joint(&mut g, &b, &[&short], &[Some(l)], &[None]).unwrap();
    let both = bb
        .encode_joint(&mut g, &b, &[&short, &long], &[Some(l), None], &[None, None])
        .unwrap();
    assert_eq!(both.len, 6);
    let a = g.value(alone.out).clone();
    let c = g.value(both.out).select_rows(&[0, 1, 2, 3]).unwrap();
    assert!(a.max_abs_diff(&c) < 1e-9);
}

#[test]
fn dropout_is_deterministic_under_seed() {
    let cfg = BackboneConfig {
        dropout: 0.3,
        ..small_config()
    };
    let (bb, store) = build(&cfg, 6);
    let run = |seed| {
        let mut g = Graph::new().with_dropout_seed(seed);
        let b = store.bind(&mut g);
        let e = bb.encode_text_only(&mut g, &b, &[&[4, 5, 2]]).unwrap();
        g.value(e.out).clone()
    };
    assert_eq!(run(3), run(3));
    assert_ne!(run(3), run(4));
}

#[test]
fn decoder_is_causal() {
    let (bb, store) = build(&small_config(), 7);
    let logits = |tgt: &[usize]| {
        let mut g = Graph::inference();
        let b = store.bind(&mut g);
        let enc = bb.encode_text_only(&mut g, &b, &[&[4, 5, 6, 2]]).unwrap();
        let (l, _) = bb.decode_train(&mut g, &b, &enc, &[tgt]).unwrap();
        g.value(l).clone()
    };
    let a = logits(&[BOS, 4, 5, 6, 7]);
    let c = logits(&[BOS, 4, 9, 6, 7]);
    for t in 0..2 {
        assert_eq!(a.row(t), c.row(t));
    }
    assert!(a.row(2) != c.row(2));
    let single = logits(&[BOS]);
    assert_eq!(single.shape(), &[1, VOCAB]);
}

#[test]
fn decoder_padding_invariance() {
    let (bb, store) = build(&small_config(), 8);
    let mut g = Graph::inference();
    let b = store.bind(&mut g);
    let enc1 = bb.encode_text_only(&mut g, &b, &[&[4, 5, 2]]).unwrap();
    let (l1, _) = bb.decode_train(&mut g, &b, &enc1, &[&[BOS, 6, 7]]).unwrap();
    let enc2 = bb
        .encode_text_only(&mut g, &b, &[&[4, 5, 2], &[8, 9, 10, 11, 12, 2]])
        .unwrap();
    let (l2, len) = bb
        .decode_train(&mut g, &b, &enc2, &[&[BOS, 6, 7], &[BOS, 4, 4, 4, 4, 4]])
        .unwrap();
    assert_eq!(len, 6);
    let a = g.value(l1).clone();
    let c = g.value(l2).select_rows(&[0, 1, 2]).unwrap();
    assert!(a.max_abs_diff(&c) < 1e-9);
}

#[test]
fn incremental_matches_full_decode() {
    let (bb, store) = build(&small_config(), 9);
    let src = [4usize, 5, 6, 2];
    let prefix = [BOS, 7, 8, 9, 10];
    let mut g = Graph::inference();
    let b = store.bind(&mut g);
    let lang = g.constant(features(2, 8, 10));
    let enc = bb.encode_joint(&mut g, &b, &[&src], &[Some(lang)], &[None]).unwrap();
    let (full, _) = bb.decode_train(&mut g, &b, &enc, &[&prefix]).unwrap();
    let full = g.value(full).clone();
    let ctx = bb.cross_context(&mut g, &b, &enc, 0).unwrap();
    let mut caches = vec![bb.empty_cache(), bb.empty_cache()];
    for (t, &tok) in prefix.iter().enumerate() {
        let mut sg = Graph::inference();
        let sb = store.bind(&mut sg);
        let step = bb.decode_step(&mut sg, &sb, &ctx, &mut caches, &[tok, tok]).unwrap();
        assert_eq!(step.shape(), &[2, VOCAB]);
        for h in 0..2 {
            let diff = step
                .row(h)
                .iter()
                .zip(full.row(t))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-9, "step {t}: {diff}");
        }
    }
    assert_eq!(caches[0], caches[1]);
    assert_eq!(caches[0].len, prefix.len());
}

#[test]
fn step_rejects_mismatched_caches() {
    let (bb, store) = build(&small_config(), 11);
    let mut g = Graph::inference();
    let b = store.bind(&mut g);
    let enc = bb.encode_text_only(&mut g, &b, &[&[4, 2]]).unwrap();
    let ctx = bb.cross_context(&mut g, &b, &enc, 0).unwrap();
    let mut one = vec![bb.empty_cache()];
    bb.decode_step(&mut g, &b, &ctx, &mut one, &[BOS]).unwrap();
    let mut mixed = vec![one[0].clone(), bb.empty_cache()];
    assert!(bb.decode_step(&mut g, &b, &ctx, &mut mixed, &[4, BOS]).is_err());
    assert!(bb.decode_step(&mut g, &b, &ctx, &mut one, &[4, 4]).is_err());
}

#[test]
fn untied_and_learned_positions_build() {
    let cfg = BackboneConfig {
        tie_output: false,
        learned_positions: true,
        segment_embeddings: false,
        ..small_config()
    };
    let (bb, store) = build(&cfg, 12);
    assert!(store.id("output.weight").is_some());
    assert!(store.id("embed.position").is_some());
    assert!(store.id("embed.segment").is_none());
    let mut g = Graph::inference();
    let b = store.bind(&mut g);
    let enc = bb.encode_text_only(&mut g, &b, &[&[4, 2]]).unwrap();
    let (l, _) = bb.decode_train(&mut g, &b, &enc, &[&[BOS, 5]]).unwrap();
    assert_eq!(g.shape(l), &[2, VOCAB]);
}

#[test]
fn encode_decode_gradients_match_finite_differences() {
    let cfg = BackboneConfig {
        layers: 1,
        ..small_config()
    };
    let (bb, store) = build(&cfg, 13);
    let inputs: Vec<Tensor<f64>> = store
        .iter()
        .map(|(_, t)| t.clone())
        .chain([features(2, 8, 14).map(|x| 0.5 * x)])
        .collect();
    let np = store.len();
    let report = grad_check_many(
        |g, vars| {
            let b = Bound::new(vars[..np].to_vec());
            let enc = bb.encode_joint(g, &b, &[&[4, 5, 2], &[6, 2]], &[Some(vars[np]), None], &[None, None])?;
            let (logits, len) = bb.decode_train(g, &b, &enc, &[&[BOS, 7, 8], &[BOS, 9]])?;
            assert_eq!(len, 3);
            g.smoothed_cross_entropy(logits, &[Some(7), Some(8), Some(2), Some(9), Some(2), None], 0.1)
        },
        &inputs,
        1e-5,
        Some(6),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}
