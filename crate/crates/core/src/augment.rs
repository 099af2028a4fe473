//! Discrete text augmentations and next-sentence positives.
//!
//! Every operator is a pure function of its input and seed.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::{index, IndexedRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Vocab, PAD_ID};

/// A non-empty token-id sequence without padding.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Sentence(Vec<u32>);

impl Sentence {
    pub fn new(tokens: Vec<u32>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::TooShort { len: 0 });
        }
        if tokens.contains(&PAD_ID) {
            return Err(Error::InvalidConfig("padding id inside sentence".into()));
        }
        Ok(Self(tokens))
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl AsRef<[u32]> for Sentence {
    fn as_ref(&self) -> &[u32] {
        &self.0
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn check_percent(k: f64) -> Result<()> {
    if !(0.0..100.0).contains(&k) {
        return Err(Error::InvalidConfig(format!("k must lie in [0, 100), got {k}")));
    }
    Ok(())
}

/// Keeps a random contiguous span of `ceil((1 - k/100) · len)` tokens.
pub fn crop(s: &Sentence, k_percent: f64, seed: u64) -> Result<Sentence> {
    check_percent(k_percent)?;
    let len = s.len();
    let keep = (((1.0 - k_percent / 100.0) * len as f64).ceil() as usize).clamp(1, len);
    if keep == len {
        return Ok(s.clone());
    }
    let start = rng(seed).random_range(0..=len - keep);
    Ok(Sentence(s.0[start..start + keep].to_vec()))
}

/// Deletes `round(k/100 · len)` distinct random positions, never all of them.
pub fn word_delete(s: &Sentence, k_percent: f64, seed: u64) -> Result<Sentence> {
    check_percent(k_percent)?;
    let len = s.len();
    let count = ((k_percent / 100.0 * len as f64).round() as usize).min(len - 1);
    if count == 0 {
        return Ok(s.clone());
    }
    let dropped: HashSet<usize> = index::sample(&mut rng(seed), len, count).into_iter().collect();
    Ok(Sentence(
        s.0.iter()
            .enumerate()
            .filter(|(i, _)| !dropped.contains(i))
            .map(|(_, &t)| t)
            .collect(),
    ))
}

/// Removes exactly one uniformly chosen token.
pub fn delete_one_word(s: &Sentence, seed: u64) -> Result<Sentence> {
    if s.len() < 2 {
        return Err(Error::TooShort { len: s.len() });
    }
    let pos = rng(seed).random_range(0..s.len());
    let mut out = s.0.clone();
    out.remove(pos);
    Ok(Sentence(out))
}

/// Token id → candidate synonym ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynonymTable {
    map: BTreeMap<u32, Vec<u32>>,
}

impl SynonymTable {
    pub fn new(map: HashMap<u32, Vec<u32>>) -> Self {
        Self {
            map: map.into_iter().filter(|(_, v)| !v.is_empty()).collect(),
        }
    }

    /// Parses a JSON object `{word: [synonym, ...]}`, adding unseen words to `vocab`.
    pub fn from_json(text: &str, vocab: &mut Vocab) -> Result<Self> {
        let raw: BTreeMap<String, Vec<String>> = serde_json::from_str(text)?;
        let mut map = HashMap::new();
        for (word, syns) in raw {
            let id = vocab.insert(&word.to_lowercase());
            let ids: Vec<u32> = syns.iter().map(|w| vocab.insert(&w.to_lowercase())).collect();
            map.insert(id, ids);
        }
        Ok(Self::new(map))
    }

    pub fn get(&self, token: u32) -> Option<&[u32]> {
        self.map.get(&token).map(Vec::as_slice)
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Replaces one random replaceable token with a random synonym.
pub fn synonym_replace(s: &Sentence, table: &SynonymTable, seed: u64) -> Result<Sentence> {
    let candidates: Vec<usize> = (0..s.len()).filter(|&i| table.get(s.0[i]).is_some()).collect();
    let mut r = rng(seed);
    let &pos = candidates.choose(&mut r).ok_or(Error::NoReplaceableToken)?;
    let syns = table.get(s.0[pos]).expect("candidate has synonyms");
    let &replacement = syns.choose(&mut r).expect("non-empty synonym list");
    let mut out = s.0.clone();
    out[pos] = replacement;
    Ok(Sentence(out))
}

/// For each sentence but the last, pairs it with one of the next `window` sentences.
///
/// Returns index pairs `(i, j)` with `i < j <= min(i + window, m - 1)`.
pub fn next_sentence_pairs(corpus_len: usize, window: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if window == 0 {
        return Err(Error::InvalidConfig("window must be >= 1".into()));
    }
    if corpus_len < 2 {
        return Err(Error::TooShort { len: corpus_len });
    }
    let mut r = rng(seed);
    Ok((0..corpus_len - 1)
        .map(|i| {
            let hi = (i + window).min(corpus_len - 1);
            (i, r.random_range(i + 1..=hi))
        })
        .collect())
}

/// F1 between the distinct-token sets of two sentences.
pub fn lexical_overlap_f1(a: &[u32], b: &[u32]) -> f64 {
    let sa: HashSet<u32> = a.iter().copied().collect();
    let sb: HashSet<u32> = b.iter().copied().collect();
    if sa.is_empty() || sb.is_empty() {
        return 0.0;
    }
    let inter = sa.intersection(&sb).count() as f64;
    if inter == 0.0 {
        return 0.0;
    }
    let precision = inter / sa.len() as f64;
    let recall = inter / sb.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// A discrete augmentation, as named in training configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AugmentOp {
    Crop { k: f64 },
    WordDelete { k: f64 },
    DeleteOneWord,
    Synonym,
}

impl AugmentOp {
    pub fn apply(&self, s: &Sentence, table: Option<&SynonymTable>, seed: u64) -> Result<Sentence> {
        match *self {
            AugmentOp::Crop { k } => crop(s, k, seed),
            AugmentOp::WordDelete { k } => word_delete(s, k, seed),
            AugmentOp::DeleteOneWord => delete_one_word(s, seed),
            AugmentOp::Synonym => synonym_replace(s, table.ok_or(Error::NoReplaceableToken)?, seed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sent(n: u32) -> Sentence {
        Sentence::new((3..3 + n).collect()).unwrap()
    }

    fn is_subsequence(sub: &[u32], full: &[u32]) -> bool {
        let mut it = full.iter();
        sub.iter().all(|t| it.any(|f| f == t))
    }

    #[test]
    fn crop_examples() {
        let s = sent(10);
        assert_eq!(crop(&s, 0.0, 1).unwrap(), s);
        let c = crop(&s, 20.0, 4).unwrap();
        assert_eq!(c.len(), 8);
        assert!(s.tokens().windows(8).any(|w| w == c.tokens()));
        assert_eq!(crop(&sent(1), 50.0, 3).unwrap(), sent(1));
        assert!(crop(&s, 100.0, 0).is_err());
    }

    #[test]
    fn word_delete_examples() {
        let s = sent(10);
        assert_eq!(word_delete(&s, 0.0, 1).unwrap(), s);
        let w = word_delete(&s, 10.0, 2).unwrap();
        assert_eq!(w.len(), 9);
        assert!(is_subsequence(w.tokens(), s.tokens()));
        assert_eq!(word_delete(&sent(2), 90.0, 5).unwrap().len(), 1);
    }

    #[test]
    fn delete_one_word_examples() {
        assert_eq!(delete_one_word(&sent(2), 0).unwrap().len(), 1);
        assert_eq!(delete_one_word(&sent(6), 9).unwrap(), delete_one_word(&sent(6), 9).unwrap());
        assert!(matches!(delete_one_word(&sent(1), 0), Err(Error::TooShort { len: 1 })));
    }

    #[test]
    fn delete_one_word_is_uniform() {
        let s = sent(5);
        let mut counts = [0usize; 5];
        for seed in 0..10_000 {
            let out = delete_one_word(&s, seed).unwrap();
            let missing = s.tokens().iter().position(|t| !out.tokens().contains(t)).unwrap();
            counts[missing] += 1;
        }
        // binomial(10000, 0.2): sd = 40
        for c in counts {
            assert!((c as f64 - 2000.0).abs() <= 3.0 * 40.0, "{counts:?}");
        }
    }

    #[test]
    fn synonym_examples() {
        let empty = SynonymTable::default();
        assert!(matches!(synonym_replace(&sent(3), &empty, 0), Err(Error::NoReplaceableToken)));
        let mut vocab = Vocab::new();
        let a = vocab.insert("a");
        let c = vocab.insert("c");
        let table = SynonymTable::from_json(r#"{"a": ["b"]}"#, &mut vocab).unwrap();
        let b = vocab.id("b").unwrap();
        let s = Sentence::new(vec![a, c]).unwrap();
        for seed in 0..5 {
            let out = synonym_replace(&s, &table, seed).unwrap();
            assert_eq!(out.tokens(), &[b, c]);
        }
    }

    #[test]
    fn next_sentence_examples() {
        let pairs = next_sentence_pairs(5, 1, 0).unwrap();
        assert_eq!(pairs, vec![(0, 1), (1, 2), (2, 3), (3, 4)]);
        assert_eq!(next_sentence_pairs(2, 3, 0).unwrap(), vec![(0, 1)]);
        let pairs = next_sentence_pairs(100, 3, 42).unwrap();
        assert_eq!(pairs.len(), 99);
        assert!(pairs.iter().all(|&(i, j)| (1..=3).contains(&(j - i)) && j < 100));
        let gaps: HashSet<usize> = pairs.iter().map(|&(i, j)| j - i).collect();
        assert_eq!(gaps.len(), 3);
    }

    #[test]
    fn overlap_examples() {
        assert_eq!(lexical_overlap_f1(&[3, 4], &[3, 4]), 1.0);
        assert_eq!(lexical_overlap_f1(&[3, 4], &[5, 6]), 0.0);
        assert!((lexical_overlap_f1(&[3, 4, 5], &[4, 5, 6]) - 2.0 / 3.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn operators_are_deterministic_subsequences(
            tokens in prop::collection::vec(3u32..50, 1..30),
            k in 0.0f64..99.0,
            seed in any::<u64>(),
        ) {
            let s = Sentence::new(tokens).unwrap();
            let c = crop(&s, k, seed).unwrap();
            prop_assert_eq!(&c, &crop(&s, k, seed).unwrap());
            prop_assert!(s.tokens().windows(c.len()).any(|w| w == c.tokens()));
            let w = word_delete(&s, k, seed).unwrap();
            prop_assert_eq!(&w, &word_delete(&s, k, seed).unwrap());
            prop_assert!(!w.is_empty());
            prop_assert!(is_subsequence(w.tokens(), s.tokens()));
        }

        #[test]
        fn overlap_is_symmetric_and_jaccard_bounded(
            a in prop::collection::vec(3u32..15, 1..12),
            b in prop::collection::vec(3u32..15, 1..12),
        ) {
            let f = lexical_overlap_f1(&a, &b);
            prop_assert_eq!(f, lexical_overlap_f1(&b, &a));
            let sa: HashSet<u32> = a.iter().copied().collect();
            let sb: HashSet<u32> = b.iter().copied().collect();
            let j = sa.intersection(&sb).count() as f64 / sa.union(&sb).count() as f64;
            prop_assert!(j <= f + 1e-12);
            prop_assert!(f <= 2.0 * j / (1.0 + j) + 1e-12);
        }

        #[test]
        fn synonym_keeps_length(tokens in prop::collection::vec(3u32..8, 1..10), seed in any::<u64>()) {
            let s = Sentence::new(tokens).unwrap();
            let table = SynonymTable::new(HashMap::from([(3, vec![9, 10]), (5, vec![11])]));
            if let Ok(out) = synonym_replace(&s, &table, seed) {
                prop_assert_eq!(out.len(), s.len());
            }
        }
    }
}
