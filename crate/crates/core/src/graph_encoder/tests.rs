use super::*;
use crate::gradcheck::grad_check_many;
use crate::sg::{Entity, Relation};
use rand::{Rng, SeedableRng};

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn ent(id: usize, label: &str, feature: Option<Vec<f64>>) -> Entity {
    Entity {
        id,
        label: label.into(),
        confidence: None,
        feature,
    }
}

fn rel(id: usize, label: &str, subject: usize, object: usize) -> Relation {
    Relation {
        id,
        label: label.into(),
        subject,
        object,
        confidence: None,
    }
}

struct Weights {
    pe: Tensor<f64>,
    pe_b: Tensor<f64>,
    pr: Tensor<f64>,
    pr_b: Tensor<f64>,
    w1: Tensor<f64>,
    w2: Tensor<f64>,
    b: Tensor<f64>,
}

impl Weights {
    fn random(in_dim: usize, rel_dim: usize, d: usize, seed: u64) -> Self {
        Weights {
            pe: random(&[in_dim, d], seed),
            pe_b: random(&[d], seed + 1),
            pr: random(&[rel_dim, d], seed + 2),
            pr_b: random(&[d], seed + 3),
            w1: random(&[d, d], seed + 4),
            w2: random(&[d, d], seed + 5),
            b: random(&[d], seed + 6),
        }
    }

    fn list(&self) -> Vec<Tensor<f64>> {
        vec![
            self.pe.clone(),
            self.pe_b.clone(),
            self.pr.clone(),
            self.pr_b.clone(),
            self.w1.clone(),
            self.w2.clone(),
            self.b.clone(),
        ]
    }
}

fn params_from(v: &[Var]) -> GcnParams {
    GcnParams {
        entity_proj: Projection {
            layers: vec![(v[0], v[1])],
        },
        relation_proj: Projection {
            layers: vec![(v[2], v[3])],
        },
        w1: v[4],
        w2: v[5],
        b: v[6],
    }
}

fn run(vsgs: &[&VectorizedSceneGraph], w: &Weights) -> Tensor<f64> {
    let mut g = Graph::inference();
    let vars: Vec<Var> = w.list().into_iter().map(|t| g.param(t)).collect();
    let batch = GraphBatch::new(vsgs).unwrap().unwrap();
    let out = gcn_forward(&mut g, &batch, &params_from(&vars)).unwrap();
    g.value(out).clone()
}

fn affine(x: &[f64], w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Vec<f64> {
    let (n, m) = (w.shape()[0], w.shape()[1]);
    (0..m)
        .map(|c| (0..n).map(|r| x[r] * w.get2(r, c)).sum::<f64>() + b.map_or(0.0, |b| b.data()[c]))
        .collect()
}

/// Direct per-node evaluation of the update rule, enumerating summands.
fn reference(v: &VectorizedSceneGraph, w: &Weights) -> Vec<Vec<f64>> {
    let p = v.num_entities;
    let e: Vec<Vec<f64>> = (0..p).map(|i| affine(v.entity_row(i), &w.pe, Some(&w.pe_b))).collect();
    let r: Vec<Vec<f64>> = (0..v.num_relations())
        .map(|k| affine(v.relation_row(k), &w.pr, Some(&w.pr_b)))
        .collect();
    // Summands of node j: (neighbor, relation) with None for the self term.
    let mut terms: Vec<Vec<(usize, Option<usize>)>> = (0..p).map(|j| vec![(j, None)]).collect();
    for (k, &[s, o]) in v.pairs.iter().enumerate() {
        terms[s].push((o, Some(k)));
        if s != o {
            terms[o].push((s, Some(k)));
        }
    }
    let deg: Vec<f64> = terms.iter().map(|t| t.len() as f64).collect();
    (0..p)
        .map(|j| {
            let d = w.b.len();
            let mut out = vec![0.0; d];
            for &(k, rk) in &terms[j] {
                let mut msg = affine(&e[k], &w.w1, None);
                if let Some(rk) = rk {
                    for (m, x) in msg.iter_mut().zip(affine(&r[rk], &w.w2, None)) {
                        *m += x;
                    }
                }
                let norm = (deg[k] * deg[j]).sqrt();
                for c in 0..d {
                    out[c] += msg[c] / norm + w.b.data()[c];
                }
            }
            out
        })
        .collect()
}

fn language_graph() -> SceneGraph {
    SceneGraph::new(
        Modality::Language,
        vec![ent(0, "man", None), ent(1, "horse", None), ent(2, "field", None)],
        vec![rel(0, "rides", 0, 1), rel(1, "in", 1, 2), rel(2, "near", 0, 1), rel(3, "self", 2, 2)],
    )
    .unwrap()
}

#[test]
fn empty_graph_vectorizes_to_empty_matrices() {
    let p = EmbeddingProvider::synthetic(4, 0).unwrap();
    let v = vectorize(&SceneGraph::empty(Modality::Visual), &p).unwrap();
    assert_eq!(v.num_entities, 0);
    assert!(v.entities.is_empty() && v.relations.is_empty() && v.pairs.is_empty());
    assert!(GraphBatch::<f64>::new(&[&v]).unwrap().is_none());
}

#[test]
fn visual_feature_passes_through_verbatim() {
    let f = vec![0.125, -3.5, 7.0];
    let g = SceneGraph::new(Modality::Visual, vec![ent(0, "dog", Some(f.clone()))], vec![]).unwrap();
    let v = vectorize(&g, &EmbeddingProvider::synthetic(8, 1).unwrap()).unwrap();
    assert_eq!(v.entity_row(0), &f[..]);
    assert_eq!(v.entity_dim, 3);
}

#[test]
fn synthetic_provider_is_deterministic_and_unit_norm() {
    let p = EmbeddingProvider::synthetic(16, 9).unwrap();
    let g = SceneGraph::new(Modality::Language, vec![ent(0, "cat", None), ent(1, "cat", None)], vec![]).unwrap();
    let v = vectorize(&g, &p).unwrap();
    assert_eq!(v.entity_row(0), v.entity_row(1));
    let n: f64 = v.entity_row(0).iter().map(|x| x * x).sum();
    assert!((n - 1.0).abs() < 1e-12);
    let other = EmbeddingProvider::synthetic(16, 10).unwrap();
    assert_ne!(p.embed("cat"), other.embed("cat"));
}

#[test]
fn file_provider_lists_every_missing_label() {
    let p = EmbeddingProvider::from_table(2, [("man".to_string(), vec![1.0, 0.0])]).unwrap();
    let err = vectorize(&language_graph(), &p).unwrap_err().to_string();
    for label in ["field", "horse", "in", "near", "rides", "self"] {
        assert!(err.contains(label), "{err}");
    }
}

#[test]
fn embedding_file_roundtrip_with_spaced_label() {
    let text = "emb v1 2 3\nteddy bear 0.5 -1 2e-3\ncat 1 2 3\n";
    let p = EmbeddingProvider::parse(text).unwrap();
    assert_eq!(p.dim(), 3);
    assert_eq!(p.embed("teddy bear").unwrap(), vec![0.5, -1.0, 0.002]);
    let back = EmbeddingProvider::parse(&p.to_text().unwrap()).unwrap();
    assert_eq!(back, p);
    assert!(EmbeddingProvider::parse("emb v1 3 3\ncat 1 2 3\n").is_err());
    assert!(EmbeddingProvider::parse("emb v1 1 3\ncat 1 2\n").is_err());
    assert!(EmbeddingProvider::parse("emb v2 1 1\n").is_err());
}

fn single_node() -> VectorizedSceneGraph {
    VectorizedSceneGraph {
        modality: Modality::Language,
        num_entities: 1,
        entity_dim: 3,
        entities: vec![0.3, -0.2, 0.9],
        relation_dim: 3,
        relations: vec![],
        pairs: vec![],
    }
}

fn identity(n: usize) -> Tensor<f64> {
    let mut t = Tensor::zeros([n, n]).unwrap();
    for i in 0..n {
        t.data_mut()[i * n + i] = 1.0;
    }
    t
}

#[test]
fn single_node_zero_weight_gives_bias() {
    let mut w = Weights::random(3, 3, 3, 1);
    w.w1 = Tensor::zeros([3, 3]).unwrap();
    let out = run(&[&single_node()], &w);
    assert_eq!(out.data(), w.b.data());
}

#[test]
fn single_node_identity_weight_gives_entity() {
    let mut w = Weights::random(3, 3, 3, 2);
    w.pe = identity(3);
    w.pe_b = Tensor::zeros([3]).unwrap();
    w.w1 = identity(3);
    w.b = Tensor::zeros([3]).unwrap();
    let out = run(&[&single_node()], &w);
    assert_eq!(out.data(), &[0.3, -0.2, 0.9]);
}

#[test]
fn two_node_one_relation_matches_hand_evaluation() {
    // e0 = [1, 0], e1 = [0, 2], r = [1, 1]; projections are identity,
    // W1 = [[1,0],[0,1]], W2 = [[0,1],[1,0]], b = [0.1, -0.1]. Both nodes have
    // two summands, so every neighbor term is divided by sqrt(2*2) = 2 and the
    // self term by 2.
    //   out0 = e0/2 + (e1 + r·W2)/2 + 2b = [0.5,0] + ([0,2]+[1,1])/2 + [0.2,-0.2]
    //        = [1.2, 1.3]
    //   out1 = e1/2 + (e0 + r·W2)/2 + 2b = [0,1] + ([1,0]+[1,1])/2 + [0.2,-0.2]
    //        = [1.2, 1.3]
    let v = VectorizedSceneGraph {
        modality: Modality::Language,
        num_entities: 2,
        entity_dim: 2,
        entities: vec![1.0, 0.0, 0.0, 2.0],
        relation_dim: 2,
        relations: vec![1.0, 1.0],
        pairs: vec![[0, 1]],
    };
    let w = Weights {
        pe: identity(2),
        pe_b: Tensor::zeros([2]).unwrap(),
        pr: identity(2),
        pr_b: Tensor::zeros([2]).unwrap(),
        w1: identity(2),
        w2: Tensor::from_f64([2, 2], &[0.0, 1.0, 1.0, 0.0]).unwrap(),
        b: Tensor::from_f64([2], &[0.1, -0.1]).unwrap(),
    };
    let out = run(&[&v], &w);
    for (a, b) in out.data().iter().zip([1.2, 1.3, 1.2, 1.3]) {
        assert!((a - b).abs() < 1e-12, "{:?}", out.data());
    }
}

#[test]
fn multi_relation_graph_matches_reference() {
    let p = EmbeddingProvider::synthetic(5, 3).unwrap();
    let v = vectorize(&language_graph(), &p).unwrap();
    let w = Weights::random(5, 5, 4, 20);
    let out = run(&[&v], &w);
    let want = reference(&v, &w);
    for (j, row) in want.iter().enumerate() {
        for (c, x) in row.iter().enumerate() {
            assert!((out.get2(j, c) - x).abs() < 1e-12);
        }
    }
}

#[test]
fn batched_union_equals_separate_runs() {
    let p = EmbeddingProvider::synthetic(5, 3).unwrap();
    let a = vectorize(&language_graph(), &p).unwrap();
    let b = single_node_of_dim(5);
    let empty = vectorize(&SceneGraph::empty(Modality::Language), &p).unwrap();
    let w = Weights::random(5, 5, 4, 30);
    let joint = run(&[&a, &empty, &b], &w);
    let sa = run(&[&a], &w);
    let sb = run(&[&b], &w);
    let batch = GraphBatch::<f64>::new(&[&a, &empty, &b]).unwrap().unwrap();
    assert_eq!(batch.node_range(1), 3..3);
    assert_eq!(joint.select_rows(&[0, 1, 2]).unwrap().max_abs_diff(&sa), 0.0);
    assert_eq!(joint.select_rows(&[3]).unwrap().max_abs_diff(&sb), 0.0);
}

fn single_node_of_dim(d: usize) -> VectorizedSceneGraph {
    VectorizedSceneGraph {
        modality: Modality::Language,
        num_entities: 1,
        entity_dim: d,
        entities: (0..d).map(|i| i as f64 * 0.1).collect(),
        relation_dim: d,
        relations: vec![],
        pairs: vec![],
    }
}

#[test]
fn no_relations_is_per_node_affine() {
    let mut v = vectorize(&language_graph(), &EmbeddingProvider::synthetic(4, 5).unwrap()).unwrap();
    v.pairs.clear();
    v.relations.clear();
    let w = Weights::random(4, 4, 3, 40);
    let out = run(&[&v], &w);
    for j in 0..3 {
        let e = affine(v.entity_row(j), &w.pe, Some(&w.pe_b));
        let want = affine(&e, &w.w1, Some(&w.b));
        for c in 0..3 {
            assert!((out.get2(j, c) - want[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn gcn_gradients_match_finite_differences() {
    let v = vectorize(&language_graph(), &EmbeddingProvider::synthetic(4, 7).unwrap()).unwrap();
    let w = Weights::random(4, 4, 3, 50);
    let weights = random(&[3, 3], 51);
    let report = grad_check_many(
        |g, vars| {
            let batch = GraphBatch::new(&[&v])?.unwrap();
            let out = gcn_forward(g, &batch, &params_from(vars))?;
            let c = g.constant(weights.clone());
            let p = g.mul(out, c)?;
            g.sum(p)
        },
        &w.list(),
        1e-5,
        None,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn deep_projection_inserts_relu() {
    let mut g = Graph::<f64>::inference();
    let x = g.constant(Tensor::from_f64([1, 2], &[1.0, -1.0]).unwrap());
    let w = g.constant(identity(2));
    let b = g.constant(Tensor::zeros([2]).unwrap());
    let proj = Projection {
        layers: vec![(w, b), (w, b)],
    };
    let y = proj.apply(&mut g, x).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 0.0]);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn permutation_equivariance(
            p in 1usize..6,
            edges in proptest::collection::vec((0usize..6, 0usize..6), 0..8),
            seed in 0u64..1000,
            perm_seed in 0u64..1000,
        ) {
            let pairs: Vec<[usize; 2]> = edges.into_iter().map(|(s, o)| [s % p, o % p]).collect();
            let v = VectorizedSceneGraph {
                modality: Modality::Language,
                num_entities: p,
                entity_dim: 3,
                entities: random(&[p, 3], seed).into_vec(),
                relation_dim: 3,
                relations: if pairs.is_empty() { vec![] } else { random(&[pairs.len(), 3], seed + 1).into_vec() },
                pairs: pairs.clone(),
            };
            let mut perm: Vec<usize> = (0..p).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
            for i in (1..p).rev() {
                perm.swap(i, rand::Rng::random_range(&mut rng, 0..=i));
            }
            // Node `old` becomes `perm[old]`.
            let mut inv = vec![0; p];
            for (old, &new) in perm.iter().enumerate() {
                inv[new] = old;
            }
            let mut permuted = v.retain_entities(&inv);
            permuted.pairs = pairs.iter().map(|&[s, o]| [perm[s], perm[o]]).collect();
            permuted.relations = v.relations.clone();
            let w = Weights::random(3, 3, 2, seed + 7);
            let a = run(&[&v], &w);
            let b = run(&[&permuted], &w);
            for old in 0..p {
                for c in 0..2 {
                    prop_assert!((a.get2(old, c) - b.get2(perm[old], c)).abs() < 1e-12);
                }
            }
        }
    }
}
