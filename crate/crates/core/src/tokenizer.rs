//! Byte-pair-encoding subword tokenizer.
//!
//! Words are whitespace-delimited; the final symbol of every word carries the
//! end-of-word marker `</w>` so decoding can restore word boundaries. Ties in
//! pair frequency are broken toward the lexicographically smallest pair.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

pub const END_OF_WORD: &str = "</w>";

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Default merge budget for real corpora.
pub const DEFAULT_MERGES: usize = 10_000;
/// Default merge budget for synthetic fixtures.
pub const SYNTHETIC_MERGES: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    alphabet: Vec<char>,
    ranks: HashMap<(String, String), usize>,
    vocab: Vec<String>,
    index: HashMap<String, usize>,
}

fn word_symbols(word: &str) -> Vec<String> {
    let mut syms: Vec<String> = word.chars().map(String::from).collect();
    if let Some(last) = syms.last_mut() {
        last.push_str(END_OF_WORD);
    }
    syms
}

fn merge_pair(syms: &mut Vec<String>, left: &str, right: &str) {
    let mut i = 0;
    while i + 1 < syms.len() {
        if syms[i] == left && syms[i + 1] == right {
            let r = syms.remove(i + 1);
            syms[i].push_str(&r);
        }
        i += 1;
    }
}

impl BpeModel {
    /// Learns up to `merges` merge operations from `corpus`.
    pub fn train<'a>(corpus: impl IntoIterator<Item = &'a str>, merges: usize) -> Result<Self> {
        let mut words: Vec<(Vec<String>, usize)> = Vec::new();
        let mut seen: HashMap<&'a str, usize> = HashMap::new();
        let mut alphabet = BTreeSet::new();
        let mut sentences = 0usize;
        for sentence in corpus {
            sentences += 1;
            for w in sentence.split_whitespace() {
                alphabet.extend(w.chars());
                match seen.get(w) {
                    Some(&i) => words[i].1 += 1,
                    None => {
                        seen.insert(w, words.len());
                        words.push((word_symbols(w), 1));
                    }
                }
            }
        }
        if sentences == 0 {
            return Err(Error::Tokenizer("empty training corpus".into()));
        }

        let mut learned = Vec::new();
        for _ in 0..merges {
            let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
            for (syms, freq) in &words {
                for pair in syms.windows(2) {
                    *counts.entry((pair[0].as_str(), pair[1].as_str())).or_default() += freq;
                }
            }
            let best = counts
                .into_iter()
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
            let Some(((l, r), _)) = best else { break };
            let (l, r) = (l.to_string(), r.to_string());
            for (syms, _) in &mut words {
                merge_pair(syms, &l, &r);
            }
            learned.push((l, r));
        }
        Ok(Self::from_parts(learned, alphabet.into_iter().collect()))
    }

    fn from_parts(merges: Vec<(String, String)>, alphabet: Vec<char>) -> Self {
        let mut vocab: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for c in &alphabet {
            vocab.push(c.to_string());
            vocab.push(format!("{c}{END_OF_WORD}"));
        }
        for (l, r) in &merges {
            vocab.push(format!("{l}{r}"));
        }
        let mut index = HashMap::new();
        vocab.retain(|t| {
            if index.contains_key(t) {
                return false;
            }
            index.insert(t.clone(), index.len());
            true
        });
        let ranks = merges.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        BpeModel {
            merges,
            alphabet,
            ranks,
            vocab,
            index,
        }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.vocab.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Subword symbols of `text` after applying merges in training order.
    pub fn segment(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for w in text.split_whitespace() {
            let mut syms = word_symbols(w);
            loop {
                let best = syms
                    .windows(2)
                    .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())))
                    .min()
                    .copied();
                let Some(rank) = best else { break };
                let (l, r) = &self.merges[rank];
                merge_pair(&mut syms, l, r);
            }
            out.extend(syms);
        }
        out
    }

    /// Token ids of `text`; symbols outside the vocabulary map to [`UNK`].
    /// No bos/eos are added.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        self.segment(text)
            .iter()
            .map(|s| self.id(s).unwrap_or(UNK))
            .collect()
    }

    /// Text of `ids`; padding and sentence markers are skipped.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self
                .token(id)
                .ok_or_else(|| Error::Tokenizer(format!("id {id} outside vocabulary of {}", self.vocab.len())))?;
            match id {
                PAD | BOS | EOS => {}
                UNK => out.push_str(tok),
                _ => match tok.strip_suffix(END_OF_WORD) {
                    Some(stem) => {
                        out.push_str(stem);
                        out.push(' ');
                    }
                    None => out.push_str(tok),
                },
            }
        }
        Ok(out.trim_end().to_string())
    }

    /// `bpe v1 <n>` header, `n` merge lines, then the base alphabet.
    pub fn to_text(&self) -> String {
        let mut s = format!("bpe v1 {}\n", self.merges.len());
        for (l, r) in &self.merges {
            s.push_str(&format!("{l} {r}\n"));
        }
        s.push_str("alphabet ");
        s.extend(self.alphabet.iter());
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let n: usize = header
            .strip_prefix("bpe v1 ")
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| Error::Tokenizer(format!("bad header {header:?}")))?;
        let mut merges = Vec::with_capacity(n);
        for i in 0..n {
            let line = lines
                .next()
                .ok_or_else(|| Error::Tokenizer(format!("expected {n} merges, found {i}")))?;
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => merges.push((l.to_string(), r.to_string())),
                _ => return Err(Error::Tokenizer(format!("bad merge line {}: {line:?}", i + 2))),
            }
        }
        let alphabet = match lines.next() {
            Some(l) => l
                .strip_prefix("alphabet ")
                .or_else(|| l.strip_prefix("alphabet"))
                .ok_or_else(|| Error::Tokenizer(format!("bad alphabet line {l:?}")))?
                .chars()
                .collect(),
            None => Vec::new(),
        };
        Ok(Self::from_parts(merges, alphabet))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_merges_is_character_level() {
        let m = BpeModel::train(["ab ba"], 0).unwrap();
        assert!(m.merges().is_empty());
        // 4 specials + {a, a</w>, b, b</w>}
        assert_eq!(m.vocab_size(), 8);
        assert_eq!(m.segment("ab"), vec!["a", "b</w>"]);
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let m = BpeModel::train(["aaab aab"], 1).unwrap();
        assert_eq!(m.merges(), &[("a".to_string(), "a".to_string())]);
        assert_eq!(m.segment("aaab"), vec!["aa", "a", "b</w>"]);
    }

    #[test]
    fn ties_break_toward_smallest_pair() {
        // (x,y) and (a,b) both occur once.
        let m = BpeModel::train(["xy ab"], 1).unwrap();
        assert_eq!(m.merges()[0], ("a".to_string(), "b</w>".to_string()));
    }

    #[test]
    fn merges_capped_at_attainable() {
        let m = BpeModel::train(["ab"], 50).unwrap();
        assert_eq!(m.merges().len(), 1);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(BpeModel::train(std::iter::empty::<&str>(), 3).is_err());
    }

    #[test]
    fn empty_text_encodes_to_nothing() {
        let m = BpeModel::train(["hello world"], 5).unwrap();
        assert!(m.encode("").is_empty());
        assert_eq!(m.decode(&[]).unwrap(), "");
    }

    #[test]
    fn unknown_characters_become_unk_and_bad_ids_fail() {
        let m = BpeModel::train(["abc"], 2).unwrap();
        assert_eq!(m.encode("z"), vec![UNK]);
        assert!(m.decode(&[m.vocab_size()]).is_err());
        assert_eq!(m.decode(&[BOS, EOS, PAD]).unwrap(), "");
    }

    #[test]
    fn roundtrip_training_sentences() {
        let corpus = ["the crane is near the lake", "a man rides a horse", "lowest newer wider"];
        let m = BpeModel::train(corpus, 30).unwrap();
        for s in corpus {
            assert_eq!(m.decode(&m.encode(s)).unwrap(), s);
        }
    }

    #[test]
    fn text_serialization_roundtrip_and_determinism() {
        let corpus = ["low lower lowest", "new newer newest"];
        let a = BpeModel::train(corpus, 12).unwrap();
        let b = BpeModel::train(corpus, 12).unwrap();
        assert_eq!(a.to_text(), b.to_text());
        assert!(a.to_text().starts_with("bpe v1 12\n"));
        let back = BpeModel::from_text(&a.to_text()).unwrap();
        assert_eq!(back, a);
        assert!(BpeModel::from_text("bpe v2 1\n").is_err());
        assert!(BpeModel::from_text("bpe v1 2\na b\n").is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn roundtrip_over_alphabet(words in proptest::collection::vec("[abcde]{1,7}", 1..8), merges in 0usize..20) {
                let m = BpeModel::train(["abcde edcba aabb"], merges).unwrap();
                let text = words.join(" ");
                prop_assert_eq!(m.decode(&m.encode(&text)).unwrap(), text);
            }
        }
    }
}
