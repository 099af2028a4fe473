//! A small pre-norm transformer sentence encoder with hand-written reverse
//! mode gradients.
//!
//! Each block is `x + Attn(LN(x))` followed by `x + FF(LN(x))`, with a GELU
//! (tanh form) feed-forward layer. Dropout hits attention probabilities and
//! the feed-forward hidden activations only. The sentence vector is pooled
//! from the block outputs and optionally passed through a dense+tanh
//! projection head.

mod compute;
pub mod dropout;
pub mod layout;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::numerics::Mat;
use crate::vocab::{BOS_ID, PAD_ID};

pub use dropout::{DropoutMode, DropoutPlan};
pub use layout::{Layout, TensorSpec};

use compute::{backward_sentence, forward_sentence, SentenceCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Output at position 0 (the BOS token).
    #[default]
    FirstToken,
    /// Average over the real positions of the last block.
    Mean,
    /// Mean-pooled average of the first and last block outputs.
    FirstLastAvg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionHead {
    Always,
    #[default]
    TrainOnly,
    Never,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Maximum sequence length including the BOS token.
    pub max_len: usize,
    pub dropout_p: f64,
    pub pooling: Pooling,
    pub projection_head: ProjectionHead,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            max_len: 32,
            dropout_p: 0.1,
            pooling: Pooling::FirstToken,
            projection_head: ProjectionHead::TrainOnly,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_len == 0 {
            return bad("n_layers, d_ff and max_len must be positive".into());
        }
        if self.vocab_size <= BOS_ID as usize {
            return bad(format!("vocab_size {} leaves no room for tokens", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p must lie in [0, 1), got {}", self.dropout_p));
        }
        Ok(())
    }

    fn head_applies(&self, phase: Phase) -> bool {
        match self.projection_head {
            ProjectionHead::Always => true,
            ProjectionHead::TrainOnly => phase == Phase::Train,
            ProjectionHead::Never => false,
        }
    }
}

/// Padded token ids, `n × seq_len`, with per-row lengths. Padding id is 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    ids: Vec<u32>,
    n: usize,
    seq_len: usize,
    lengths: Vec<usize>,
}

impl TokenBatch {
    pub fn new(ids: Vec<u32>, n: usize, seq_len: usize, lengths: Vec<usize>) -> Result<Self> {
        if ids.len() != n * seq_len || lengths.len() != n {
            return Err(Error::DimMismatch {
                expected: n * seq_len,
                got: ids.len(),
            });
        }
        for (i, &len) in lengths.iter().enumerate() {
            if len == 0 || len > seq_len {
                return Err(Error::InvalidConfig(format!(
                    "row {i}: length {len} outside 1..={seq_len}"
                )));
            }
            if ids[i * seq_len..i * seq_len + len].contains(&PAD_ID) {
                return Err(Error::InvalidConfig(format!("row {i}: padding id inside sentence")));
            }
        }
        Ok(Self {
            ids,
            n,
            seq_len,
            lengths,
        })
    }

    /// Prepends BOS to each token sequence and pads to the longest row.
    pub fn from_sentences<S: AsRef<[u32]>>(sentences: &[S]) -> Result<Self> {
        let seq_len = sentences
            .iter()
            .map(|s| s.as_ref().len() + 1)
            .max()
            .unwrap_or(1);
        let n = sentences.len();
        let mut ids = vec![PAD_ID; n * seq_len];
        let mut lengths = Vec::with_capacity(n);
        for (i, s) in sentences.iter().enumerate() {
            let s = s.as_ref();
            ids[i * seq_len] = BOS_ID;
            ids[i * seq_len + 1..i * seq_len + 1 + s.len()].copy_from_slice(s);
            lengths.push(s.len() + 1);
        }
        Self::new(ids, n, seq_len, lengths)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    /// The real (unpadded) tokens of row `i`.
    pub fn row(&self, i: usize) -> &[u32] {
        &self.ids[i * self.seq_len..i * self.seq_len + self.lengths[i]]
    }

    pub fn padded_row(&self, i: usize) -> &[u32] {
        &self.ids[i * self.seq_len..(i + 1) * self.seq_len]
    }
}

/// Encoder configuration plus a flat parameter vector laid out per [`Layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub params: Vec<f64>,
    layout: Layout,
    /// Seeds this model descends from, oldest first.
    pub seed_lineage: Vec<u64>,
}

/// Result of a forward pass, holding what the reverse pass needs.
pub struct ForwardPass {
    output: Mat,
    plan: DropoutPlan,
    caches: Vec<SentenceCache>,
}

impl ForwardPass {
    pub fn output(&self) -> &Mat {
        &self.output
    }

    pub fn into_output(self) -> Mat {
        self.output
    }

    pub fn plan(&self) -> DropoutPlan {
        self.plan
    }

    /// Gradient of `⟨upstream, output⟩` w.r.t. every parameter.
    ///
    /// `plan` must be the plan of the forward call; the recorded masks are reused.
    pub fn backward(
        &self,
        model: &EncoderModel,
        plan: &DropoutPlan,
        upstream: &Mat,
    ) -> Result<Vec<f64>> {
        if *plan != self.plan {
            return Err(Error::PlanMismatch);
        }
        let mut grad = vec![0.0; model.num_params()];
        self.accumulate_grad(model, upstream, &mut grad)?;
        Ok(grad)
    }

    /// Adds the parameter gradient of `⟨upstream, output⟩` into `grad`.
    pub fn accumulate_grad(
        &self,
        model: &EncoderModel,
        upstream: &Mat,
        grad: &mut [f64],
    ) -> Result<()> {
        if upstream.shape() != self.output.shape() {
            return Err(Error::DimMismatch {
                expected: self.output.rows() * self.output.cols(),
                got: upstream.rows() * upstream.cols(),
            });
        }
        if grad.len() != model.num_params() {
            return Err(Error::DimMismatch {
                expected: model.num_params(),
                got: grad.len(),
            });
        }
        let per_sentence: Vec<Option<Vec<f64>>> = self
            .caches
            .par_iter()
            .enumerate()
            .map(|(i, cache)| {
                let up = upstream.row(i);
                if up.iter().all(|&g| g == 0.0) {
                    return None;
                }
                let mut g = vec![0.0; model.num_params()];
                backward_sentence(model, cache, up, &mut g);
                Some(g)
            })
            .collect();
        // fixed-order reduction keeps the sum independent of thread count
        for g in per_sentence.into_iter().flatten() {
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        Ok(())
    }
}

const EMBED_CHUNK: usize = 256;

impl EncoderModel {
    /// Deterministic initialization: Glorot-uniform weights, zero biases,
    /// unit layer-norm gains, `N(0, 0.02)` token and position embeddings.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let mut params = vec![0.0; layout.num_params()];
        for spec in &layout.tensors {
            let dst = &mut params[spec.range()];
            let leaf = spec.name.rsplit('.').next().unwrap_or("");
            match (spec.name.as_str(), leaf) {
                ("tok_emb" | "pos_emb", _) => dst.iter_mut().for_each(|v| *v = normal.sample(&mut rng)),
                (_, "gamma") => dst.fill(1.0),
                (_, "weight") => {
                    let a = (6.0 / (spec.shape[0] + spec.shape[1]) as f64).sqrt();
                    let u = Uniform::new(-a, a).expect("valid range");
                    dst.iter_mut().for_each(|v| *v = u.sample(&mut rng));
                }
                _ => dst.fill(0.0),
            }
        }
        Ok(Self {
            config,
            params,
            layout,
            seed_lineage: vec![seed],
        })
    }

    pub fn from_parts(config: EncoderConfig, params: Vec<f64>, seed_lineage: Vec<u64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.num_params() {
            return Err(Error::DimMismatch {
                expected: layout.num_params(),
                got: params.len(),
            });
        }
        Ok(Self {
            config,
            params,
            layout,
            seed_lineage,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.num_params()
    }

    /// Output dimension of the sentence vector.
    pub fn output_dim(&self) -> usize {
        self.config.d_model
    }

    fn check_batch(&self, batch: &TokenBatch) -> Result<()> {
        for i in 0..batch.len() {
            let row = batch.row(i);
            if row.len() > self.config.max_len {
                return Err(Error::LengthOverflow {
                    len: row.len(),
                    max_len: self.config.max_len,
                });
            }
            if let Some(&bad) = row.iter().find(|&&t| t as usize >= self.config.vocab_size) {
                return Err(Error::InvalidConfig(format!(
                    "token id {bad} outside vocab of size {}",
                    self.config.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Forward pass that keeps activations for [`ForwardPass::backward`].
    pub fn forward(&self, batch: &TokenBatch, plan: &DropoutPlan, phase: Phase) -> Result<ForwardPass> {
        if phase == Phase::Eval && plan.is_active() {
            return Err(Error::InvalidPlan(
                "evaluation requires dropout mode none".into(),
            ));
        }
        self.check_batch(batch)?;
        let apply_head = self.config.head_applies(phase);
        let caches: Vec<SentenceCache> = (0..batch.len())
            .into_par_iter()
            .map(|i| forward_sentence(self, batch.row(i), i, plan, apply_head))
            .collect();
        let d = self.output_dim();
        let mut data = Vec::with_capacity(batch.len() * d);
        for c in &caches {
            data.extend_from_slice(&c.embedding);
        }
        let output = Mat::new(batch.len(), d, data)?;
        Ok(ForwardPass {
            output,
            plan: *plan,
            caches,
        })
    }

    /// Sentence embeddings, `n × d_model`.
    pub fn encode(&self, batch: &TokenBatch, plan: &DropoutPlan, phase: Phase) -> Result<Mat> {
        Ok(self.forward(batch, plan, phase)?.into_output())
    }

    /// Eval-phase embeddings with no dropout.
    pub fn encode_eval(&self, batch: &TokenBatch) -> Result<Mat> {
        self.encode(batch, &DropoutPlan::none(), Phase::Eval)
    }

    /// Eval-phase embeddings of raw sentences (BOS is prepended), one row each.
    pub fn embed_sentences<S: AsRef<[u32]>>(&self, sentences: &[S]) -> Result<Mat> {
        let d = self.output_dim();
        let mut data = Vec::with_capacity(sentences.len() * d);
        for chunk in sentences.chunks(EMBED_CHUNK) {
            let batch = TokenBatch::from_sentences(chunk)?;
            data.extend_from_slice(self.encode_eval(&batch)?.as_slice());
        }
        Mat::new(sentences.len(), d, data)
    }

    /// Parameter gradient of `⟨upstream, encode(batch, plan, Train)⟩`.
    pub fn encode_with_grad(
        &self,
        batch: &TokenBatch,
        plan: &DropoutPlan,
        upstream: &Mat,
    ) -> Result<Vec<f64>> {
        let pass = self.forward(batch, plan, Phase::Train)?;
        pass.backward(self, plan, upstream)
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = serde_json::json!({
            "kind": "encoder",
            "config": self.config,
            "manifest": self.layout.tensors,
            "seed_lineage": self.seed_lineage,
        });
        Ok(Container {
            meta,
            blocks: vec![("params".into(), self.params.clone())],
        })
    }

    /// Reads the encoder stored under block `params` (or `prefix.params`).
    pub fn from_container(c: &Container, prefix: &str) -> Result<Self> {
        let meta = if prefix.is_empty() {
            &c.meta
        } else {
            c.meta
                .get(prefix)
                .ok_or_else(|| Error::BadCheckpoint(format!("missing model section {prefix}")))?
        };
        let config: EncoderConfig = serde_json::from_value(
            meta.get("config")
                .cloned()
                .ok_or_else(|| Error::BadCheckpoint("missing config".into()))?,
        )?;
        let manifest: Vec<TensorSpec> = serde_json::from_value(
            meta.get("manifest")
                .cloned()
                .ok_or_else(|| Error::BadCheckpoint("missing manifest".into()))?,
        )?;
        let lineage: Vec<u64> = meta
            .get("seed_lineage")
            .cloned()
            .map(serde_json::from_value)
            .transpose()?
            .unwrap_or_default();
        let block = if prefix.is_empty() {
            "params".to_string()
        } else {
            format!("{prefix}.params")
        };
        let params = c
            .block(&block)
            .ok_or_else(|| Error::BadCheckpoint(format!("missing block {block}")))?
            .to_vec();
        let model = Self::from_parts(config, params, lineage)?;
        if model.layout.tensors != manifest {
            return Err(Error::BadCheckpoint("manifest does not match config".into()));
        }
        Ok(model)
    }
}
