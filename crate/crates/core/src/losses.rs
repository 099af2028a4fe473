//! Contrastive objectives with analytic gradients, plus the alignment and
//! uniformity metrics and the asymptotic-objective diagnostics.
//!
//! Both objectives share one softmax cross-entropy: anchor `i` scores every
//! in-batch positive `j` (and, in the supervised case, every hard negative
//! `j`, the own negative weighted by `alpha`), and the target is its own
//! positive. Batch loss is the mean over anchors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, gram_sum, norm, Mat, ZERO_NORM};

/// Tolerance on row norms for inputs that must already be unit length.
pub const NORMALIZED_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    #[default]
    Cosine,
    Dot,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Softmax temperature.
    pub tau: f64,
    /// Weight of each anchor's own hard negative.
    pub alpha: f64,
    pub similarity: Similarity,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.05,
            alpha: 1.0,
            similarity: Similarity::Cosine,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Anchors, their positives, and optionally one hard negative per anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub anchors: Mat,
    pub positives: Mat,
    pub hard_negatives: Option<Mat>,
}

impl EmbeddingBatch {
    pub fn new(anchors: Mat, positives: Mat, hard_negatives: Option<Mat>) -> Result<Self> {
        let shape = anchors.shape();
        for m in std::iter::once(&positives).chain(hard_negatives.as_ref()) {
            if m.shape() != shape {
                return Err(Error::DimMismatch {
                    expected: shape.0 * shape.1,
                    got: m.rows() * m.cols(),
                });
            }
        }
        if shape.0 == 0 {
            return Err(Error::DimMismatch { expected: 1, got: 0 });
        }
        Ok(Self {
            anchors,
            positives,
            hard_negatives,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.rows() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad_anchors: Mat,
    pub grad_positives: Mat,
    pub grad_negatives: Option<Mat>,
}

/// Rows prepared for a similarity: unit rows plus norms for cosine, raw rows for dot.
struct Prepared {
    rows: Mat,
    norms: Vec<f64>,
}

fn prepare(m: &Mat, sim: Similarity) -> Result<Prepared> {
    match sim {
        Similarity::Dot => Ok(Prepared {
            rows: m.clone(),
            norms: vec![1.0; m.rows()],
        }),
        Similarity::Cosine => {
            let mut rows = m.clone();
            let mut norms = Vec::with_capacity(m.rows());
            for i in 0..rows.rows() {
                let r = rows.row_mut(i);
                let n = norm(r);
                if n < ZERO_NORM {
                    return Err(Error::ZeroNorm { row: i });
                }
                r.iter_mut().for_each(|v| *v /= n);
                norms.push(n);
            }
            Ok(Prepared { rows, norms })
        }
    }
}

/// Maps a gradient w.r.t. the prepared rows back to the raw rows.
fn unprepare_grad(g: &mut Mat, p: &Prepared, sim: Similarity) {
    if sim == Similarity::Dot {
        return;
    }
    for i in 0..g.rows() {
        let u = p.rows.row(i);
        let gi = g.row_mut(i);
        let radial = dot(gi, u);
        let inv = 1.0 / p.norms[i];
        for (gv, uv) in gi.iter_mut().zip(u) {
            *gv = (*gv - radial * uv) * inv;
        }
    }
}

/// Logits and denominator weights of anchor `i` against every candidate.
fn row_logits(
    a: &Prepared,
    p: &Prepared,
    q: Option<&Prepared>,
    i: usize,
    cfg: &LossConfig,
    logits: &mut [f64],
    weights: &mut [f64],
) {
    let n = p.rows.rows();
    let inv_tau = 1.0 / cfg.tau;
    let ai = a.rows.row(i);
    for j in 0..n {
        logits[j] = dot(ai, p.rows.row(j)) * inv_tau;
        weights[j] = 1.0;
    }
    if let Some(q) = q {
        for j in 0..n {
            logits[n + j] = dot(ai, q.rows.row(j)) * inv_tau;
            weights[n + j] = if i == j { cfg.alpha } else { 1.0 };
        }
    }
}

fn weighted_max(logits: &[f64], weights: &[f64]) -> f64 {
    logits
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max)
}

fn contrastive(
    anchors: &Mat,
    positives: &Mat,
    negatives: Option<&Mat>,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    let n = anchors.rows();
    let d = anchors.cols();
    let a = prepare(anchors, cfg.similarity)?;
    let p = prepare(positives, cfg.similarity)?;
    let q = negatives.map(|m| prepare(m, cfg.similarity)).transpose()?;
    let inv_tau = 1.0 / cfg.tau;

    let mut ga = Mat::zeros(n, d);
    let mut gp = Mat::zeros(n, d);
    let mut gq = q.as_ref().map(|_| Mat::zeros(n, d));
    let mut total = 0.0;

    let n_cand = if q.is_some() { 2 * n } else { n };
    let mut logits = vec![0.0; n_cand];
    let mut weights = vec![1.0; n_cand];
    for i in 0..n {
        let ai = a.rows.row(i);
        row_logits(&a, &p, q.as_ref(), i, cfg, &mut logits, &mut weights);
        let max = weighted_max(&logits, &weights);
        let mut probs: Vec<f64> = logits
            .iter()
            .zip(&weights)
            .map(|(&l, &w)| w * (l - max).exp())
            .collect();
        let z: f64 = probs.iter().sum();
        let loss_i = max + z.ln() - logits[i];
        if !loss_i.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        total += loss_i;
        probs.iter_mut().for_each(|v| *v /= z);
        // d loss_i / d logit_k = prob_k - [k == i]; scaled by 1/(N tau)
        probs[i] -= 1.0;
        let scale = inv_tau / n as f64;
        let gai = ga.row_mut(i);
        for j in 0..n {
            let c = probs[j] * scale;
            let pj = p.rows.row(j);
            for k in 0..d {
                gai[k] += c * pj[k];
            }
        }
        if let Some(q) = &q {
            for j in 0..n {
                let c = probs[n + j] * scale;
                let qj = q.rows.row(j);
                for k in 0..d {
                    gai[k] += c * qj[k];
                }
            }
        }
        for j in 0..n {
            let c = probs[j] * scale;
            let gpj = gp.row_mut(j);
            for k in 0..d {
                gpj[k] += c * ai[k];
            }
        }
        if let Some(gq) = gq.as_mut() {
            for j in 0..n {
                let c = probs[n + j] * scale;
                let gqj = gq.row_mut(j);
                for k in 0..d {
                    gqj[k] += c * ai[k];
                }
            }
        }
    }
    let value = total / n as f64;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    unprepare_grad(&mut ga, &a, cfg.similarity);
    unprepare_grad(&mut gp, &p, cfg.similarity);
    if let (Some(g), Some(q)) = (gq.as_mut(), q.as_ref()) {
        unprepare_grad(g, q, cfg.similarity);
    }
    Ok(LossOutput {
        value,
        grad_anchors: ga,
        grad_positives: gp,
        grad_negatives: gq,
    })
}

/// In-batch-negative cross-entropy over anchor/positive pairs.
///
/// Serves both the paired objective and the dropout objective, where anchors
/// and positives are two encodings of the same sentences.
pub fn infonce_loss(batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<LossOutput> {
    if batch.hard_negatives.is_some() {
        return Err(Error::InvalidConfig(
            "infonce_loss does not take hard negatives; use supervised_loss".into(),
        ));
    }
    contrastive(&batch.anchors, &batch.positives, None, cfg)
}

/// Cross-entropy with hard negatives in the denominator, the anchor's own
/// negative weighted by `cfg.alpha`.
pub fn supervised_loss(batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<LossOutput> {
    let neg = batch
        .hard_negatives
        .as_ref()
        .ok_or(Error::MissingHardNegatives)?;
    contrastive(&batch.anchors, &batch.positives, Some(neg), cfg)
}

/// Dispatches on whether the batch carries hard negatives.
pub fn batch_loss(batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<LossOutput> {
    if batch.hard_negatives.is_some() {
        supervised_loss(batch, cfg)
    } else {
        infonce_loss(batch, cfg)
    }
}

fn check_normalized(m: &Mat) -> Result<()> {
    for (i, r) in m.row_iter().enumerate() {
        let n = norm(r);
        if (n - 1.0).abs() > NORMALIZED_TOL {
            return Err(Error::NotNormalized { row: i, norm: n });
        }
    }
    Ok(())
}

/// Mean squared distance between paired unit rows.
pub fn alignment(x: &Mat, y: &Mat) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::DimMismatch {
            expected: x.rows(),
            got: y.rows(),
        });
    }
    check_normalized(x)?;
    check_normalized(y)?;
    let total: f64 = x
        .row_iter()
        .zip(y.row_iter())
        .map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>())
        .sum();
    Ok(total / x.rows() as f64)
}

/// Log of the mean Gaussian potential `exp(-2‖xᵢ - xⱼ‖²)` over distinct pairs `i < j`.
pub fn uniformity(x: &Mat) -> Result<f64> {
    if x.rows() < 2 {
        return Err(Error::NeedTwoPoints);
    }
    check_normalized(x)?;
    let m = x.rows();
    let mut total = 0.0;
    for i in 0..m {
        let xi = x.row(i);
        for j in i + 1..m {
            let d2: f64 = xi
                .iter()
                .zip(x.row(j))
                .map(|(u, v)| (u - v) * (u - v))
                .sum();
            total += (-2.0 * d2).exp();
        }
    }
    let pairs = (m * (m - 1) / 2) as f64;
    Ok((total / pairs).ln())
}

/// The two terms of the large-negative-count limit of the objective, and the
/// Jensen lower bound on the second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticTerms {
    pub align_term: f64,
    pub uniform_term: f64,
    pub jensen_lower_bound: f64,
}

impl AsymptoticTerms {
    pub fn jensen_gap(&self) -> f64 {
        self.uniform_term - self.jensen_lower_bound
    }
}

/// Evaluates the asymptotic terms over unit rows: positives pairs `(x, x_pos)`
/// for the alignment term and `pool` for the uniformity term.
pub fn asymptotic_terms(x: &Mat, x_pos: &Mat, pool: &Mat, tau: f64) -> Result<AsymptoticTerms> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::InvalidConfig(format!("tau must be > 0, got {tau}")));
    }
    if x.shape() != x_pos.shape() {
        return Err(Error::DimMismatch {
            expected: x.rows(),
            got: x_pos.rows(),
        });
    }
    check_normalized(x)?;
    check_normalized(x_pos)?;
    check_normalized(pool)?;
    let pairs = x.rows().max(1) as f64;
    let align_term = -x
        .row_iter()
        .zip(x_pos.row_iter())
        .map(|(a, b)| dot(a, b))
        .sum::<f64>()
        / (tau * pairs);

    let m = pool.rows();
    if m == 0 {
        return Err(Error::NeedTwoPoints);
    }
    let mf = m as f64;
    let mut uniform = 0.0;
    let mut row = vec![0.0; m];
    for i in 0..m {
        let hi = pool.row(i);
        for (j, r) in row.iter_mut().enumerate() {
            *r = dot(hi, pool.row(j)) / tau;
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|l| (l - max).exp()).sum();
        uniform += max + (s / mf).ln();
    }
    let uniform_term = uniform / mf;
    let jensen_lower_bound = gram_sum(pool) / (tau * mf * mf);
    Ok(AsymptoticTerms {
        align_term,
        uniform_term,
        jensen_lower_bound,
    })
}

/// Largest relative error between analytic loss gradients and central
/// differences over every embedding coordinate of the batch.
///
/// The relative error denominator is `max(|analytic|, |numeric|, 1e-8)`.
/// Loss differences are taken per anchor as a log-ratio of partition sums,
/// so candidates the perturbation does not touch cancel exactly; a plain
/// difference of two batch losses loses components far below the loss's
/// own rounding.
pub fn loss_grad_check(batch: &EmbeddingBatch, cfg: &LossConfig, epsilon: f64) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidConfig(format!(
            "epsilon must lie in [1e-7, 1e-3], got {epsilon}"
        )));
    }
    let analytic = batch_loss(batch, cfg)?;
    let mut worst: f64 = 0.0;
    let n_mats = if batch.hard_negatives.is_some() { 3 } else { 2 };
    for which in 0..n_mats {
        let grad = match which {
            0 => &analytic.grad_anchors,
            1 => &analytic.grad_positives,
            _ => analytic.grad_negatives.as_ref().expect("negatives present"),
        };
        let len = grad.as_slice().len();
        for idx in 0..len {
            let eval = |delta: f64| -> EmbeddingBatch {
                let mut b = batch.clone();
                let m = match which {
                    0 => &mut b.anchors,
                    1 => &mut b.positives,
                    _ => b.hard_negatives.as_mut().expect("negatives present"),
                };
                m.as_mut_slice()[idx] += delta;
                b
            };
            let numeric = loss_difference(&eval(epsilon), &eval(-epsilon), cfg)? / (2.0 * epsilon);
            let a = grad.as_slice()[idx];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

/// `loss(plus) - loss(minus)` for two batches of the same shape.
fn loss_difference(plus: &EmbeddingBatch, minus: &EmbeddingBatch, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    let prep = |b: &EmbeddingBatch| -> Result<(Prepared, Prepared, Option<Prepared>)> {
        Ok((
            prepare(&b.anchors, cfg.similarity)?,
            prepare(&b.positives, cfg.similarity)?,
            b.hard_negatives.as_ref().map(|m| prepare(m, cfg.similarity)).transpose()?,
        ))
    };
    let (ap, pp, qp) = prep(plus)?;
    let (am, pm, qm) = prep(minus)?;
    let n = plus.len();
    let n_cand = if qp.is_some() { 2 * n } else { n };
    let (mut lp, mut lm) = (vec![0.0; n_cand], vec![0.0; n_cand]);
    let mut w = vec![1.0; n_cand];
    let mut total = 0.0;
    for i in 0..n {
        row_logits(&ap, &pp, qp.as_ref(), i, cfg, &mut lp, &mut w);
        row_logits(&am, &pm, qm.as_ref(), i, cfg, &mut lm, &mut w);
        let max = weighted_max(&lm, &w);
        let mut z = 0.0;
        let mut dz = 0.0;
        for k in 0..n_cand {
            if w[k] > 0.0 {
                let e = w[k] * (lm[k] - max).exp();
                z += e;
                dz += e * (lp[k] - lm[k]).exp_m1();
            }
        }
        total += (dz / z).ln_1p() - (lp[i] - lm[i]);
    }
    let diff = total / n as f64;
    if !diff.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok(diff)
}
