//! STS evaluation: cosine scoring plus the metric × aggregation matrix.

use serde::{Deserialize, Serialize};

use crate::augment::Sentence;
use crate::data::StsDataset;
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::metrics::{encode_text, pair_cosines};
use crate::numerics::{pearson, spearman};
use crate::vocab::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Spearman,
    Pearson,
}

/// How per-subset results are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// One correlation over the concatenation of every subset.
    #[default]
    All,
    /// Unweighted mean of per-subset correlations.
    Mean,
    /// Mean weighted by subset size.
    Wmean,
}

/// Protocol choice. Similarities are used directly, without a fitted regressor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvalConfig {
    pub metric: Metric,
    pub aggregation: Aggregation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetScore {
    pub name: String,
    pub n: usize,
    /// `None` when the subset is degenerate (constant gold or similarity).
    pub correlation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub config: EvalConfig,
    pub per_subset: Vec<SubsetScore>,
    pub aggregate: f64,
    /// Subsets left out of a mean/wmean aggregate.
    pub skipped: Vec<String>,
}

/// Eval-phase cosine similarity of every pair, grouped like the dataset.
pub fn score_pairs(model: &EncoderModel, vocab: &Vocab, ds: &StsDataset) -> Result<Vec<Vec<f64>>> {
    ds.subsets
        .iter()
        .map(|sub| {
            let pairs = sub
                .examples
                .iter()
                .map(|e| Ok((encode_text(vocab, &e.s1)?, encode_text(vocab, &e.s2)?)))
                .collect::<Result<Vec<(Sentence, Sentence)>>>()?;
            pair_cosines(model, pairs.iter().map(|(a, b)| (a, b)))
        })
        .collect()
}

fn correlate(metric: Metric, x: &[f64], y: &[f64]) -> Result<f64> {
    match metric {
        Metric::Spearman => spearman(x, y),
        Metric::Pearson => pearson(x, y),
    }
}

/// Correlates similarities against golds subset by subset and aggregates.
pub fn evaluate(names: &[String], sims: &[Vec<f64>], golds: &[Vec<f64>], cfg: EvalConfig) -> Result<EvalResult> {
    if names.len() != sims.len() || sims.len() != golds.len() {
        return Err(Error::DimMismatch {
            expected: names.len(),
            got: sims.len().min(golds.len()),
        });
    }
    if names.is_empty() {
        return Err(Error::DegenerateSeries);
    }
    let mut per_subset = Vec::with_capacity(names.len());
    let mut skipped = Vec::new();
    for ((name, s), g) in names.iter().zip(sims).zip(golds) {
        if s.len() != g.len() {
            return Err(Error::DimMismatch {
                expected: g.len(),
                got: s.len(),
            });
        }
        let correlation = match correlate(cfg.metric, s, g) {
            Ok(r) => Some(r),
            Err(Error::DegenerateSeries) => {
                skipped.push(name.clone());
                None
            }
            Err(e) => return Err(e),
        };
        per_subset.push(SubsetScore {
            name: name.clone(),
            n: s.len(),
            correlation,
        });
    }
    let aggregate = match cfg.aggregation {
        Aggregation::All => {
            skipped.clear();
            let s: Vec<f64> = sims.iter().flatten().copied().collect();
            let g: Vec<f64> = golds.iter().flatten().copied().collect();
            correlate(cfg.metric, &s, &g)?
        }
        Aggregation::Mean | Aggregation::Wmean => {
            let mut num = 0.0;
            let mut den = 0.0;
            for p in &per_subset {
                if let Some(r) = p.correlation {
                    let w = if cfg.aggregation == Aggregation::Mean {
                        1.0
                    } else {
                        p.n as f64
                    };
                    num += w * r;
                    den += w;
                }
            }
            if den == 0.0 {
                return Err(Error::DegenerateSeries);
            }
            num / den
        }
    };
    Ok(EvalResult {
        config: cfg,
        per_subset,
        aggregate,
        skipped,
    })
}

/// Scores a dataset and evaluates it in one go.
pub fn evaluate_model(model: &EncoderModel, vocab: &Vocab, ds: &StsDataset, cfg: EvalConfig) -> Result<EvalResult> {
    let sims = score_pairs(model, vocab, ds)?;
    let names: Vec<String> = ds.subsets.iter().map(|s| s.name.clone()).collect();
    evaluate(&names, &sims, &ds.golds(), cfg)
}

/// Fixed-width table: one column per subset then `Avg.`, correlations × 100.
pub fn render_table(r: &EvalResult) -> String {
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x));
    let mut heads: Vec<String> = r.per_subset.iter().map(|p| p.name.clone()).collect();
    let mut vals: Vec<String> = r.per_subset.iter().map(|p| cell(p.correlation)).collect();
    heads.push("Avg.".into());
    vals.push(cell(Some(r.aggregate)));
    let widths: Vec<usize> = heads
        .iter()
        .zip(&vals)
        .map(|(h, v)| h.len().max(v.len()).max(6))
        .collect();
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    format!("{}\n{}\n", line(&heads), line(&vals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{StsExample, StsSubset};
    use crate::encoder::EncoderConfig;
    use proptest::prelude::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    fn cfg(metric: Metric, aggregation: Aggregation) -> EvalConfig {
        EvalConfig { metric, aggregation }
    }

    #[test]
    fn default_is_spearman_all() {
        assert_eq!(EvalConfig::default(), cfg(Metric::Spearman, Aggregation::All));
    }

    #[test]
    fn single_subset_all_mean_wmean_agree() {
        let s = vec![vec![0.1, 0.5, 0.3, 0.9]];
        let g = vec![vec![1.0, 3.0, 2.0, 2.5]];
        let a = evaluate(&names(1), &s, &g, cfg(Metric::Spearman, Aggregation::All)).unwrap();
        let m = evaluate(&names(1), &s, &g, cfg(Metric::Spearman, Aggregation::Mean)).unwrap();
        let w = evaluate(&names(1), &s, &g, cfg(Metric::Spearman, Aggregation::Wmean)).unwrap();
        assert_eq!(a.aggregate, m.aggregate);
        assert_eq!(m.aggregate, w.aggregate);
    }

    #[test]
    fn degenerate_subset_is_skipped_for_mean() {
        let s = vec![vec![0.1, 0.2, 0.3], vec![0.4, 0.5, 0.6]];
        let g = vec![vec![1.0, 2.0, 3.0], vec![2.0, 2.0, 2.0]];
        let m = evaluate(&names(2), &s, &g, cfg(Metric::Spearman, Aggregation::Mean)).unwrap();
        assert_eq!(m.skipped, vec!["s1".to_string()]);
        assert!((m.aggregate - 1.0).abs() < 1e-15);
        assert!(m.per_subset[1].correlation.is_none());
        let a = evaluate(&names(2), &s, &g, cfg(Metric::Spearman, Aggregation::All)).unwrap();
        assert!(a.skipped.is_empty());
    }

    #[test]
    fn identical_sentences_score_one() {
        let model = EncoderModel::init(
            EncoderConfig {
                d_model: 8,
                n_layers: 1,
                d_ff: 16,
                ..EncoderConfig::default()
            },
            3,
        )
        .unwrap();
        let mut vocab = Vocab::new();
        for w in ["a", "b", "c"] {
            vocab.insert(w);
        }
        let ds = StsDataset {
            subsets: vec![StsSubset {
                name: "x".into(),
                examples: vec![
                    StsExample {
                        s1: "a b".into(),
                        s2: "a b".into(),
                        gold: 5.0,
                    },
                    StsExample {
                        s1: "a c".into(),
                        s2: "b zzz".into(),
                        gold: 1.0,
                    },
                ],
            }],
        };
        let s1 = score_pairs(&model, &vocab, &ds).unwrap();
        let s2 = score_pairs(&model, &vocab, &ds).unwrap();
        assert_eq!(s1[0][0], 1.0);
        assert!(s1[0].iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(s1, s2);
    }

    #[test]
    fn table_has_avg_column() {
        let s = vec![vec![0.1, 0.5, 0.3], vec![0.2, 0.1, 0.4]];
        let g = vec![vec![1.0, 3.0, 2.0], vec![1.0, 0.0, 2.0]];
        let r = evaluate(&names(2), &s, &g, cfg(Metric::Spearman, Aggregation::Mean)).unwrap();
        let t = render_table(&r);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].ends_with("Avg."));
        assert!(lines[1].ends_with("100.00"));
        assert_eq!(lines[0].len(), lines[1].len());
    }

    fn subsets() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        prop::collection::vec(3usize..9, 1..5).prop_flat_map(|sizes| {
            let s = sizes
                .iter()
                .map(|&n| prop::collection::vec(-1.0f64..1.0, n))
                .collect::<Vec<_>>();
            let g = sizes
                .iter()
                .map(|&n| prop::collection::vec((0u8..=5).prop_map(f64::from), n))
                .collect::<Vec<_>>();
            (s, g)
        })
    }

    proptest! {
        #[test]
        fn all_ignores_partitioning((s, g) in subsets()) {
            let flat_s = vec![s.iter().flatten().copied().collect::<Vec<_>>()];
            let flat_g = vec![g.iter().flatten().copied().collect::<Vec<_>>()];
            let c = cfg(Metric::Spearman, Aggregation::All);
            let parts = evaluate(&names(s.len()), &s, &g, c);
            let whole = evaluate(&names(1), &flat_s, &flat_g, c);
            match (parts, whole) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a.aggregate, b.aggregate),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "partitioning changed degeneracy"),
            }
        }

        #[test]
        fn spearman_invariant_to_increasing_transform((s, g) in subsets()) {
            let t: Vec<Vec<f64>> = s.iter().map(|v| v.iter().map(|x| (3.0 * x).exp() + 1.0).collect()).collect();
            for agg in [Aggregation::All, Aggregation::Mean, Aggregation::Wmean] {
                let c = cfg(Metric::Spearman, agg);
                let a = evaluate(&names(s.len()), &s, &g, c);
                let b = evaluate(&names(s.len()), &t, &g, c);
                if let (Ok(a), Ok(b)) = (a, b) {
                    prop_assert!((a.aggregate - b.aggregate).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn wmean_equals_mean_for_equal_sizes(
            n in 3usize..8,
            k in 1usize..5,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<Vec<f64>> = (0..k).map(|_| (0..n).map(|_| rng.random::<f64>()).collect()).collect();
            let g: Vec<Vec<f64>> = (0..k).map(|_| (0..n).map(|_| rng.random_range(0..=5) as f64).collect()).collect();
            let m = evaluate(&names(k), &s, &g, cfg(Metric::Pearson, Aggregation::Mean));
            let w = evaluate(&names(k), &s, &g, cfg(Metric::Pearson, Aggregation::Wmean));
            if let (Ok(m), Ok(w)) = (m, w) {
                prop_assert!((m.aggregate - w.aggregate).abs() <= 1e-15);
            }
        }
    }
}
