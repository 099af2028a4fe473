//! Checkpoint diagnostics: alignment/uniformity probes, singular spectra,
//! cosine-similarity densities per gold band and the Jensen audit.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::augment::Sentence;
use crate::data::{StsDataset, GOLD_MAX, GOLD_MIN};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::losses::{alignment, asymptotic_terms, uniformity};
use crate::numerics::{cosine_sim, gram_sum, max_normalized, normalize_rows, singular_values, Mat};
use crate::vocab::Vocab;

pub const DEFAULT_THRESHOLD: f64 = 4.0;
pub const DEFAULT_BANDS: usize = 5;
pub const DEFAULT_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub left: Sentence,
    pub right: Sentence,
    pub gold: f64,
}

/// Sentences used by the diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSet {
    /// Positive pairs for the alignment probe.
    pub pairs: Vec<(Sentence, Sentence)>,
    /// Every distinct sentence, for the uniformity probe and the spectrum.
    pub pool: Vec<Sentence>,
    pub scored: Vec<ScoredPair>,
}

impl ProbeSet {
    pub fn new(pairs: Vec<(Sentence, Sentence)>, pool: Vec<Sentence>, scored: Vec<ScoredPair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptySelection);
        }
        if pool.len() < 2 {
            return Err(Error::NeedTwoPoints);
        }
        Ok(Self { pairs, pool, scored })
    }

    /// Positive pairs are the scored pairs with gold strictly above `threshold`;
    /// the pool is every distinct sentence of the dataset, in first-seen order.
    pub fn from_sts(ds: &StsDataset, vocab: &Vocab, threshold: f64) -> Result<Self> {
        let mut scored = Vec::with_capacity(ds.len());
        for sub in &ds.subsets {
            for ex in &sub.examples {
                scored.push(ScoredPair {
                    left: encode_text(vocab, &ex.s1)?,
                    right: encode_text(vocab, &ex.s2)?,
                    gold: ex.gold,
                });
            }
        }
        let pairs = select_positive_pairs(&scored, threshold)?;
        let mut seen = BTreeSet::new();
        let mut pool = Vec::new();
        for p in &scored {
            for s in [&p.left, &p.right] {
                if seen.insert(s.tokens().to_vec()) {
                    pool.push(s.clone());
                }
            }
        }
        Self::new(pairs, pool, scored)
    }
}

pub(crate) fn encode_text(vocab: &Vocab, text: &str) -> Result<Sentence> {
    Sentence::new(vocab.encode(text))
}

/// Pairs whose gold score is strictly greater than `threshold`.
pub fn select_positive_pairs(scored: &[ScoredPair], threshold: f64) -> Result<Vec<(Sentence, Sentence)>> {
    let out: Vec<_> = scored
        .iter()
        .filter(|p| p.gold > threshold)
        .map(|p| (p.left.clone(), p.right.clone()))
        .collect();
    if out.is_empty() {
        return Err(Error::EmptySelection);
    }
    Ok(out)
}

/// Cosine histogram of one gold band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandHistogram {
    pub band_low: f64,
    pub band_high: f64,
    /// `n_bins + 1` edges over [-1, 1].
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    /// Mean cosine of the band's pairs, `None` when the band is empty.
    pub mean_cosine: Option<f64>,
}

impl BandHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Index of the right-closed interval containing `x`; the first interval is
/// closed on the left too.
fn right_closed_index(x: f64, lo: f64, hi: f64, n: usize) -> usize {
    let width = (hi - lo) / n as f64;
    let mut k = ((x - lo) / width).ceil() as isize - 1;
    k = k.clamp(0, n as isize - 1);
    let mut k = k as usize;
    // guard against rounding at the edges
    let edge = |i: usize| lo + width * i as f64;
    while k > 0 && x <= edge(k) {
        k -= 1;
    }
    while k + 1 < n && x > edge(k + 1) {
        k += 1;
    }
    k
}

/// Per-band histograms of `cosines`, banded by `golds`.
pub fn cosine_histograms(cosines: &[f64], golds: &[f64], n_bands: usize, n_bins: usize) -> Result<Vec<BandHistogram>> {
    if n_bands < 1 {
        return Err(Error::InvalidConfig("n_bands must be >= 1".into()));
    }
    if n_bins < 2 {
        return Err(Error::InvalidConfig("n_bins must be >= 2".into()));
    }
    if cosines.len() != golds.len() {
        return Err(Error::DimMismatch {
            expected: golds.len(),
            got: cosines.len(),
        });
    }
    let band_w = (GOLD_MAX - GOLD_MIN) / n_bands as f64;
    let bin_w = 2.0 / n_bins as f64;
    let edges: Vec<f64> = (0..=n_bins).map(|i| -1.0 + bin_w * i as f64).collect();
    let mut bands: Vec<BandHistogram> = (0..n_bands)
        .map(|b| BandHistogram {
            band_low: GOLD_MIN + band_w * b as f64,
            band_high: GOLD_MIN + band_w * (b + 1) as f64,
            edges: edges.clone(),
            counts: vec![0; n_bins],
            mean_cosine: None,
        })
        .collect();
    let mut sums = vec![0.0; n_bands];
    for (&c, &g) in cosines.iter().zip(golds) {
        let b = right_closed_index(g, GOLD_MIN, GOLD_MAX, n_bands);
        let k = right_closed_index(c.clamp(-1.0, 1.0), -1.0, 1.0, n_bins);
        bands[b].counts[k] += 1;
        sums[b] += c;
    }
    for (band, s) in bands.iter_mut().zip(sums) {
        let n = band.total();
        if n > 0 {
            band.mean_cosine = Some(s / n as f64);
        }
    }
    Ok(bands)
}

/// Eval-phase cosine of every scored pair, then [`cosine_histograms`].
pub fn cosine_density(
    model: &EncoderModel,
    scored: &[ScoredPair],
    n_bands: usize,
    n_bins: usize,
) -> Result<Vec<BandHistogram>> {
    let cos = pair_cosines(model, scored.iter().map(|p| (&p.left, &p.right)))?;
    let golds: Vec<f64> = scored.iter().map(|p| p.gold).collect();
    cosine_histograms(&cos, &golds, n_bands, n_bins)
}

pub(crate) fn pair_cosines<'a, I>(model: &EncoderModel, pairs: I) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = (&'a Sentence, &'a Sentence)>,
{
    let (left, right): (Vec<&Sentence>, Vec<&Sentence>) = pairs.into_iter().unzip();
    let a = model.embed_sentences(&left)?;
    let b = model.embed_sentences(&right)?;
    a.row_iter().zip(b.row_iter()).map(|(x, y)| cosine_sim(x, y)).collect()
}

/// CSV with columns `band,bin_left,bin_right,count`, where `band` is `low-high`.
pub fn density_csv(bands: &[BandHistogram]) -> String {
    let mut out = String::from("band,bin_left,bin_right,count\n");
    for b in bands {
        for (k, c) in b.counts.iter().enumerate() {
            out.push_str(&format!(
                "{}-{},{},{},{}\n",
                b.band_low,
                b.band_high,
                b.edges[k],
                b.edges[k + 1],
                c
            ));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub align: f64,
    pub uniform: f64,
    /// Singular values of the normalized pool embeddings, divided by the largest.
    pub singular_values: Vec<f64>,
    pub singular_values_raw: Vec<f64>,
    pub gram_sum_over_m2_tau: f64,
    pub jensen_gap: f64,
    pub cosine_density: Vec<BandHistogram>,
}

impl DiagnosticsReport {
    /// `σ₁² / Σσ²` of the raw spectrum.
    pub fn sigma_max_ratio(&self) -> f64 {
        sigma_max_ratio(&self.singular_values_raw)
    }
}

pub fn sigma_max_ratio(spectrum: &[f64]) -> f64 {
    let total: f64 = spectrum.iter().map(|s| s * s).sum();
    match spectrum.first() {
        Some(s) if total > 0.0 => s * s / total,
        _ => 0.0,
    }
}

/// Alignment and uniformity of eval-phase, normalized probe embeddings.
pub fn align_uniform(model: &EncoderModel, probes: &ProbeSet) -> Result<(f64, f64, Mat)> {
    let (x, y) = pair_embeddings(model, probes)?;
    let pool = normalize_rows(&model.embed_sentences(&probes.pool)?)?;
    Ok((alignment(&x, &y)?, uniformity(&pool)?, pool))
}

fn pair_embeddings(model: &EncoderModel, probes: &ProbeSet) -> Result<(Mat, Mat)> {
    let left: Vec<&Sentence> = probes.pairs.iter().map(|p| &p.0).collect();
    let right: Vec<&Sentence> = probes.pairs.iter().map(|p| &p.1).collect();
    Ok((
        normalize_rows(&model.embed_sentences(&left)?)?,
        normalize_rows(&model.embed_sentences(&right)?)?,
    ))
}

pub fn diagnose(model: &EncoderModel, probes: &ProbeSet, tau: f64) -> Result<DiagnosticsReport> {
    diagnose_with(model, probes, tau, DEFAULT_BANDS, DEFAULT_BINS)
}

pub fn diagnose_with(
    model: &EncoderModel,
    probes: &ProbeSet,
    tau: f64,
    n_bands: usize,
    n_bins: usize,
) -> Result<DiagnosticsReport> {
    let (x, y) = pair_embeddings(model, probes)?;
    let pool = normalize_rows(&model.embed_sentences(&probes.pool)?)?;
    let terms = asymptotic_terms(&x, &y, &pool, tau)?;
    let raw = singular_values(&pool)?;
    let m = pool.rows() as f64;
    Ok(DiagnosticsReport {
        align: alignment(&x, &y)?,
        uniform: uniformity(&pool)?,
        singular_values: max_normalized(&raw),
        singular_values_raw: raw,
        gram_sum_over_m2_tau: gram_sum(&pool) / (m * m * tau),
        jensen_gap: terms.jensen_gap(),
        cosine_density: cosine_density(model, &probes.scored, n_bands, n_bins)?,
    })
}
