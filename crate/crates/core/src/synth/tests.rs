use super::*;
use crate::data::load_split;
use crate::tokenizer::SYNTHETIC_MERGES;

fn small(seed: u64) -> SynthSpec {
    SynthSpec {
        seed,
        visual_scale: 2.5,
        train: 200,
        valid: 20,
        test: 60,
        ..SynthSpec::default()
    }
}

#[test]
fn generation_is_seeded() {
    let a = generate(&small(3)).unwrap();
    assert_eq!(a, generate(&small(3)).unwrap());
    assert_ne!(a.split("train").unwrap().src, generate(&small(4)).unwrap().split("train").unwrap().src);
}

#[test]
fn pairs_are_distinct_across_splits() {
    let c = generate(&small(1)).unwrap();
    let mut seen = HashSet::new();
    for s in &c.splits {
        for pair in s.src.iter().zip(&s.tgt) {
            assert!(seen.insert(pair), "{pair:?}");
        }
    }
    assert_eq!(seen.len(), 280);
}

#[test]
fn answer_key_matches_references() {
    let c = generate(&small(2)).unwrap();
    for e in &c.answer_key.entries {
        let tgt = &c.split(&e.split).unwrap().tgt[e.example];
        let words: Vec<&str> = tgt.split(' ').collect();
        assert_eq!(words[e.word_index], e.correct);
        assert!(e.senses.contains(&e.correct));
        let others = e.senses.iter().filter(|s| **s != e.correct);
        assert!(others.clone().all(|s| !words.contains(&s.as_str())));
    }
    // Every example carries exactly one ambiguous noun.
    assert_eq!(c.answer_key.entries.len(), 280);
    assert_eq!(c.items.len(), 60);
    for it in &c.items {
        assert_ne!(it.positive, it.negative);
        assert_eq!(it.positive.split(' ').count(), it.negative.split(' ').count());
    }
}

#[test]
fn senses_are_uniform() {
    let spec = SynthSpec {
        train: 2000,
        valid: 0,
        test: 0,
        nouns: 20,
        feature_dim: 64,
        ..SynthSpec::default()
    };
    let c = generate(&spec).unwrap();
    let mut counts: BTreeMap<&str, f64> = BTreeMap::new();
    for e in &c.answer_key.entries {
        *counts.entry(&e.correct).or_default() += 1.0;
    }
    assert_eq!(counts.len(), 4);
    let expect = 2000.0 / 4.0;
    let chi2: f64 = counts.values().map(|o| (o - expect).powi(2) / expect).sum();
    // 3 degrees of freedom, p = 0.001.
    assert!(chi2 < 16.27, "{chi2}");
}

#[test]
fn distractor_and_sense_directions_are_orthogonal_to_language_labels() {
    let c = generate(&small(5)).unwrap();
    let dim = c.spec.feature_dim;
    let emb = |l: &str| synthetic_vector(l, dim, c.spec.embedding_seed);
    let train = c.split("train").unwrap();
    for (v, l) in train.visual.iter().zip(&train.language) {
        let labels: Vec<Vec<f64>> = l
            .entities()
            .iter()
            .map(|e| emb(&e.label))
            .chain(l.relations().iter().map(|r| emb(&r.label)))
            .collect();
        let mut aligned = 0;
        for e in v.entities() {
            let f: Vec<f64> = e.feature.as_ref().unwrap().iter().map(|x| x / c.spec.visual_scale).collect();
            let f = &f;
            if e.label.starts_with("thing") {
                assert!(e.confidence.unwrap() < 0.6);
                for q in &labels {
                    assert!(dot(f, q).abs() < 1e-9);
                }
            } else {
                aligned += 1;
                let base = emb(&e.label);
                let diff: Vec<f64> = f.iter().zip(&base).map(|(a, b)| a - b).collect();
                let n = dot(&diff, &diff).sqrt();
                // Ambiguous nouns carry a unit sense component.
                assert!(n < 1e-12 || (n - c.spec.sense_scale).abs() < 1e-9, "{n}");
                for q in &labels {
                    assert!(dot(&diff, q).abs() < 1e-9);
                }
            }
        }
        assert_eq!(aligned, 2);
        assert_eq!(v.num_entities(), 2 + c.spec.distractors);
    }
}

#[test]
fn unambiguous_corpus() {
    let spec = SynthSpec {
        ambiguous_types: 0,
        distractors: 0,
        train: 64,
        valid: 0,
        test: 0,
        ..SynthSpec::default()
    };
    let c = generate(&spec).unwrap();
    assert!(c.answer_key.entries.is_empty() && c.items.is_empty());
    assert_eq!(c.split("train").unwrap().src.len(), 64);
    let hyps = c.split("train").unwrap().tgt.clone();
    assert!(ambiguous_token_accuracy(&hyps, &c.answer_key, "train").is_err());
}

#[test]
fn infeasible_specs_are_rejected() {
    let bad = [
        SynthSpec { feature_dim: 10, ..SynthSpec::default() },
        SynthSpec { senses: 1, ..SynthSpec::default() },
        SynthSpec { verbs: 0, ..SynthSpec::default() },
        SynthSpec { nouns: 2, verbs: 1, train: 100_000, ..SynthSpec::default() },
    ];
    for spec in bad {
        assert!(matches!(generate(&spec), Err(Error::Config(_))), "{spec:?}");
    }
}

#[test]
fn written_corpus_loads_back_identically() {
    let c = generate(&SynthSpec { train: 30, valid: 5, test: 10, ..SynthSpec::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    c.write(dir.path()).unwrap();
    let bpe = BpeModel::train(c.all_text(), SYNTHETIC_MERGES).unwrap();
    let provider = EmbeddingProvider::read(&dir.path().join("labels.emb")).unwrap();
    for split in ["train", "valid", "test"] {
        let loaded = load_split(dir.path(), split, &bpe, &provider).unwrap();
        assert_eq!(loaded, c.examples(split, &bpe).unwrap());
    }
    let key: AnswerKey = serde_json::from_slice(&std::fs::read(dir.path().join("answer_key.json")).unwrap()).unwrap();
    assert_eq!(key, c.answer_key);
    let spec: SynthSpec = serde_json::from_slice(&std::fs::read(dir.path().join("spec.json")).unwrap()).unwrap();
    assert_eq!(spec, c.spec);
    let items = std::fs::read_to_string(dir.path().join("test.items.jsonl")).unwrap();
    assert_eq!(items.lines().count(), c.items.len());
    assert_eq!(c.accuracy_items(&bpe).unwrap().len(), c.items.len());
}

#[test]
fn ambiguous_accuracy_rule() {
    let c = generate(&small(6)).unwrap();
    let refs = c.split("test").unwrap().tgt.clone();
    assert_eq!(ambiguous_token_accuracy(&refs, &c.answer_key, "test").unwrap(), 1.0);
    let negs: Vec<String> = c.items.iter().map(|i| i.negative.clone()).collect();
    assert_eq!(ambiguous_token_accuracy(&negs, &c.answer_key, "test").unwrap(), 0.0);
    // Hedging with every sense counts as wrong.
    let both: Vec<String> = c.items.iter().map(|i| format!("{} {}", i.positive, i.negative)).collect();
    assert_eq!(ambiguous_token_accuracy(&both, &c.answer_key, "test").unwrap(), 0.0);
    let empty = vec![String::new(); refs.len()];
    assert_eq!(ambiguous_token_accuracy(&empty, &c.answer_key, "test").unwrap(), 0.0);
    assert!(ambiguous_token_accuracy(&refs[1..], &c.answer_key, "test").is_err());
    assert!(ambiguous_token_accuracy(&refs, &c.answer_key, "dev").is_err());
}
