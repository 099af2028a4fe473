//! Corpus, NLI-triplet and STS loaders, and a synthetic clustered corpus.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::Sentence;
use crate::error::{Error, Result};
use crate::io::{read_to_string, write_atomic};
use crate::vocab::Vocab;

/// A training example: a lone sentence, a pair, or an NLI triplet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainInstance {
    pub anchor: Sentence,
    pub positive: Option<Sentence>,
    pub hard_negative: Option<Sentence>,
}

impl TrainInstance {
    pub fn single(anchor: Sentence) -> Self {
        Self {
            anchor,
            positive: None,
            hard_negative: None,
        }
    }

    pub fn pair(anchor: Sentence, positive: Sentence) -> Self {
        Self {
            anchor,
            positive: Some(positive),
            hard_negative: None,
        }
    }

    pub fn triplet(anchor: Sentence, positive: Sentence, hard_negative: Sentence) -> Self {
        Self {
            anchor,
            positive: Some(positive),
            hard_negative: Some(hard_negative),
        }
    }
}

fn tokenize_line(vocab: &Vocab, text: &str) -> Vec<u32> {
    vocab.encode(text)
}

/// One sentence per non-blank line; lowercased whitespace tokens; vocab in
/// first-occurrence order after the reserved ids.
pub fn parse_corpus(text: &str) -> Result<(Vec<Sentence>, Vocab)> {
    let mut vocab = Vocab::new();
    let mut sentences = Vec::new();
    for line in text.lines() {
        let ids: Vec<u32> = line
            .split_whitespace()
            .map(|w| vocab.insert(&w.to_lowercase()))
            .collect();
        if !ids.is_empty() {
            sentences.push(Sentence::new(ids)?);
        }
    }
    if sentences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok((sentences, vocab))
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<(Vec<Sentence>, Vocab)> {
    parse_corpus(&read_to_string(path)?)
}

/// Tokenizes a corpus against an existing vocab; unknown words map to UNK.
pub fn encode_corpus(text: &str, vocab: &Vocab) -> Result<Vec<Sentence>> {
    let sentences = text
        .lines()
        .map(|l| tokenize_line(vocab, l))
        .filter(|ids| !ids.is_empty())
        .map(Sentence::new)
        .collect::<Result<Vec<_>>>()?;
    if sentences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(sentences)
}

fn split_columns(line: &str, line_no: usize, expected: usize) -> Result<Vec<&str>> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != expected {
        return Err(Error::BadColumnCount {
            line: line_no,
            expected,
            found: cols.len(),
        });
    }
    Ok(cols)
}

fn sentence_from(vocab: &Vocab, text: &str, line: usize) -> Result<Sentence> {
    Sentence::new(tokenize_line(vocab, text))
        .map_err(|_| Error::InvalidConfig(format!("line {line}: empty sentence")))
}

/// Premise, entailment, contradiction per line; one triplet per row, rows taken verbatim.
pub fn parse_nli_triplets(text: &str, vocab: &Vocab) -> Result<Vec<TrainInstance>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols = split_columns(line, i + 1, 3)?;
        out.push(TrainInstance::triplet(
            sentence_from(vocab, cols[0], i + 1)?,
            sentence_from(vocab, cols[1], i + 1)?,
            sentence_from(vocab, cols[2], i + 1)?,
        ));
    }
    Ok(out)
}

pub fn load_nli_triplets(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Vec<TrainInstance>> {
    parse_nli_triplets(&read_to_string(path)?, vocab)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StsExample {
    pub s1: String,
    pub s2: String,
    pub gold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StsSubset {
    pub name: String,
    pub examples: Vec<StsExample>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StsDataset {
    pub subsets: Vec<StsSubset>,
}

pub const GOLD_MIN: f64 = 0.0;
pub const GOLD_MAX: f64 = 5.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub file: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum Manifest {
    Wrapped { subsets: Vec<ManifestEntry> },
    Bare(Vec<ManifestEntry>),
}

/// Parses `s1 TAB s2 TAB score` rows.
pub fn parse_sts_rows(text: &str) -> Result<Vec<StsExample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols = split_columns(line, i + 1, 3)?;
        let score_text = cols[2].trim();
        let gold: f64 = score_text.parse().map_err(|_| Error::BadScore {
            line: i + 1,
            text: score_text.to_string(),
        })?;
        if !(GOLD_MIN..=GOLD_MAX).contains(&gold) {
            return Err(Error::ScoreOutOfRange { line: i + 1, score: gold });
        }
        out.push(StsExample {
            s1: cols[0].to_string(),
            s2: cols[1].to_string(),
            gold,
        });
    }
    Ok(out)
}

/// Loads every subset listed in the manifest; file paths are relative to the manifest.
pub fn load_sts(manifest_path: impl AsRef<Path>) -> Result<StsDataset> {
    let manifest_path = manifest_path.as_ref();
    let manifest: Manifest = serde_json::from_str(&read_to_string(manifest_path)?)?;
    let entries = match manifest {
        Manifest::Wrapped { subsets } | Manifest::Bare(subsets) => subsets,
    };
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut subsets = Vec::with_capacity(entries.len());
    for e in entries {
        let examples = parse_sts_rows(&read_to_string(base.join(&e.file))?)?;
        if examples.is_empty() {
            return Err(Error::InvalidConfig(format!("STS subset {} is empty", e.name)));
        }
        subsets.push(StsSubset {
            name: e.name,
            examples,
        });
    }
    Ok(StsDataset { subsets })
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

impl StsDataset {
    pub fn len(&self) -> usize {
        self.subsets.iter().map(|s| s.examples.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn golds(&self) -> Vec<Vec<f64>> {
        self.subsets
            .iter()
            .map(|s| s.examples.iter().map(|e| e.gold).collect())
            .collect()
    }

    /// Writes `manifest.json` plus one TSV per subset into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::new();
        for s in &self.subsets {
            let file = PathBuf::from(format!("{}.tsv", file_stem(&s.name)));
            let mut body = String::new();
            for e in &s.examples {
                body.push_str(&format!("{}\t{}\t{}\n", e.s1, e.s2, e.gold));
            }
            write_atomic(dir.join(&file), body.as_bytes())?;
            entries.push(ManifestEntry {
                name: s.name.clone(),
                file,
            });
        }
        let manifest = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&Manifest::Wrapped { subsets: entries })?;
        write_atomic(&manifest, json.as_bytes())?;
        Ok(manifest)
    }
}

/// Parameters of the synthetic clustered corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyCorpusConfig {
    pub seed: u64,
    pub n_clusters: usize,
    pub per_cluster: usize,
    /// Total id count including the three reserved ids.
    pub vocab_size: usize,
    /// Inclusive sentence length range in words.
    pub len_range: (usize, usize),
    /// Held-out probe sentences per cluster.
    pub probe_per_cluster: usize,
    /// Scored probe pairs, split into unequal subsets.
    pub probe_pairs: usize,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_clusters: 8,
            per_cluster: 250,
            vocab_size: 256,
            len_range: (5, 12),
            probe_per_cluster: 16,
            probe_pairs: 512,
        }
    }
}

/// Share of each sentence's tokens drawn from its cluster's pool.
pub const TOPICAL_SHARE: f64 = 0.8;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpus {
    pub vocab: Vocab,
    pub sentences: Vec<Sentence>,
    pub clusters: Vec<usize>,
    /// Same-cluster index pairs into `sentences`.
    pub paraphrase_pairs: Vec<(usize, usize)>,
    /// Anchor, same-cluster positive, cross-cluster negative.
    pub triplets: Vec<TrainInstance>,
    /// Scored held-out pairs: gold 5 within a cluster, 0 across.
    pub probes: StsDataset,
}

/// Generates a corpus in which each cluster owns a private topical word pool
/// and all clusters share a pool of function words.
pub fn gen_toy_corpus(cfg: &ToyCorpusConfig) -> Result<ToyCorpus> {
    let c = cfg.n_clusters;
    if c == 0 || cfg.vocab_size < 4 * c {
        return Err(Error::VocabTooSmall {
            vocab_size: cfg.vocab_size,
            n_clusters: c,
        });
    }
    let (lo, hi) = cfg.len_range;
    if lo == 0 || lo > hi {
        return Err(Error::InvalidConfig(format!("bad len_range ({lo}, {hi})")));
    }
    let mut vocab = Vocab::new();
    let words = cfg.vocab_size - vocab.len();
    let shared_n = (words / 5).max(1).min(words - c);
    let topical_n = (words - shared_n) / c;
    let shared: Vec<u32> = (0..shared_n).map(|k| vocab.insert(&format!("w{k}"))).collect();
    let topical: Vec<Vec<u32>> = (0..c)
        .map(|ci| (0..topical_n).map(|k| vocab.insert(&format!("c{ci}t{k}"))).collect())
        .collect();
    // fill any remainder so the vocab has exactly vocab_size ids
    let mut extra = 0;
    while vocab.len() < cfg.vocab_size {
        vocab.insert(&format!("x{extra}"));
        extra += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sample_sentence = |rng: &mut ChaCha8Rng, cluster: usize| -> Sentence {
        let len = rng.random_range(lo..=hi);
        let toks = (0..len)
            .map(|_| {
                if rng.random::<f64>() < TOPICAL_SHARE {
                    topical[cluster][rng.random_range(0..topical_n)]
                } else {
                    shared[rng.random_range(0..shared_n)]
                }
            })
            .collect();
        Sentence::new(toks).expect("non-empty, no padding")
    };

    let mut sentences = Vec::with_capacity(c * cfg.per_cluster);
    let mut clusters = Vec::with_capacity(c * cfg.per_cluster);
    for ci in 0..c {
        for _ in 0..cfg.per_cluster {
            sentences.push(sample_sentence(&mut rng, ci));
            clusters.push(ci);
        }
    }

    let mut paraphrase_pairs = Vec::new();
    let mut triplets = Vec::new();
    if cfg.per_cluster >= 2 {
        for i in 0..sentences.len() {
            let ci = clusters[i];
            let base = ci * cfg.per_cluster;
            let mut j = base + rng.random_range(0..cfg.per_cluster - 1);
            if j >= i {
                j += 1;
            }
            paraphrase_pairs.push((i, j));
            if c >= 2 {
                let mut other = rng.random_range(0..c - 1);
                if other >= ci {
                    other += 1;
                }
                let k = other * cfg.per_cluster + rng.random_range(0..cfg.per_cluster);
                triplets.push(TrainInstance::triplet(
                    sentences[i].clone(),
                    sentences[j].clone(),
                    sentences[k].clone(),
                ));
            }
        }
    }

    let probe_pool: Vec<(usize, Sentence)> = (0..c)
        .flat_map(|ci| (0..cfg.probe_per_cluster).map(move |_| ci))
        .map(|ci| (ci, sample_sentence(&mut rng, ci)))
        .collect();
    let probes = if probe_pool.len() >= 2 && cfg.probe_pairs > 0 {
        let mut examples = Vec::with_capacity(cfg.probe_pairs);
        let by_cluster: Vec<Vec<usize>> = (0..c)
            .map(|ci| (0..probe_pool.len()).filter(|&k| probe_pool[k].0 == ci).collect())
            .collect();
        for p in 0..cfg.probe_pairs {
            let a = rng.random_range(0..probe_pool.len());
            let ca = probe_pool[a].0;
            let same = p % 2 == 0 && by_cluster[ca].len() >= 2 || c < 2;
            let b = if same {
                loop {
                    let b = by_cluster[ca][rng.random_range(0..by_cluster[ca].len())];
                    if b != a {
                        break b;
                    }
                }
            } else {
                loop {
                    let b = rng.random_range(0..probe_pool.len());
                    if probe_pool[b].0 != ca {
                        break b;
                    }
                }
            };
            let gold = if probe_pool[b].0 == ca { GOLD_MAX } else { GOLD_MIN };
            examples.push(StsExample {
                s1: vocab.decode(probe_pool[a].1.tokens()),
                s2: vocab.decode(probe_pool[b].1.tokens()),
                gold,
            });
        }
        examples.shuffle(&mut rng);
        split_unequal(examples)
    } else {
        StsDataset::default()
    };

    Ok(ToyCorpus {
        vocab,
        sentences,
        clusters,
        paraphrase_pairs,
        triplets,
        probes,
    })
}

/// Splits examples into subsets of relative sizes 1 : 2 : 5 (fewer when short).
fn split_unequal(examples: Vec<StsExample>) -> StsDataset {
    let n = examples.len();
    let sizes: Vec<usize> = if n >= 8 {
        let a = n / 8;
        let b = n / 4;
        vec![a, b, n - a - b]
    } else if n >= 3 {
        vec![1, n - 1]
    } else {
        vec![n]
    };
    let mut it = examples.into_iter();
    let subsets = sizes
        .iter()
        .enumerate()
        .map(|(k, &size)| StsSubset {
            name: format!("toy-{}", (b'a' + k as u8) as char),
            examples: it.by_ref().take(size).collect(),
        })
        .collect();
    StsDataset { subsets }
}

impl ToyCorpus {
    pub fn corpus_text(&self) -> String {
        let mut s = String::new();
        for sent in &self.sentences {
            s.push_str(&self.vocab.decode(sent.tokens()));
            s.push('\n');
        }
        s
    }

    pub fn triplets_tsv(&self) -> String {
        let mut s = String::new();
        for t in &self.triplets {
            let pos = t.positive.as_ref().expect("triplet");
            let neg = t.hard_negative.as_ref().expect("triplet");
            s.push_str(&format!(
                "{}\t{}\t{}\n",
                self.vocab.decode(t.anchor.tokens()),
                self.vocab.decode(pos.tokens()),
                self.vocab.decode(neg.tokens())
            ));
        }
        s
    }
}
