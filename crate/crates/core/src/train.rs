//! Training loop: batch schedule, positive/negative construction per
//! objective, Adam, evaluation hook, checkpoints and resume.
//!
//! Every random choice is a pure function of `(seed, step)`: the epoch
//! permutation, the dropout plans and the augmentation seeds. The step counter
//! therefore doubles as the RNG cursor, and a resumed run continues bit for bit.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::augment::{next_sentence_pairs, AugmentOp, Sentence, SynonymTable};
use crate::checkpoint::Container;
use crate::data::TrainInstance;
use crate::encoder::dropout::mix;
use crate::encoder::{
    DropoutMode, DropoutPlan, EncoderConfig, EncoderModel, ForwardPass, Phase, ProjectionHead, TokenBatch,
};
use crate::error::{Error, Result};
use crate::losses::{batch_loss, EmbeddingBatch, LossConfig};
use crate::metrics::{align_uniform, pair_cosines, sigma_max_ratio, ProbeSet};
use crate::numerics::{cosine_sim, singular_values, spearman};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Cosines below this count as a non-degenerate positive pair.
pub const DEGENERATE_COS: f64 = 1.0 - 1e-9;

const MONITOR_STEP: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    /// Positives are a second encoding of the same sentence under new dropout.
    #[default]
    UnsupDropout,
    /// Positives are encodings of an augmented copy of the anchor.
    UnsupAugment { op: AugmentOp },
    /// Positives are one of the next `window` sentences of the corpus.
    NextSentence { window: usize },
    /// Positives from the entailment column.
    Supervised,
    /// Entailment positives plus contradiction hard negatives.
    SupervisedHardNeg,
}

impl Objective {
    pub fn is_supervised(&self) -> bool {
        matches!(self, Objective::Supervised | Objective::SupervisedHardNeg)
    }

    /// Head used when the config does not pick one: kept at inference for
    /// the supervised objectives, training-only otherwise.
    pub fn default_projection_head(&self) -> ProjectionHead {
        if self.is_supervised() {
            ProjectionHead::Always
        } else {
            ProjectionHead::TrainOnly
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    #[default]
    Shared,
    /// Anchors go through encoder 0, positives and negatives through encoder 1.
    Dual,
}

impl EncoderMode {
    pub fn n_models(self) -> usize {
        match self {
            EncoderMode::Shared => 1,
            EncoderMode::Dual => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub max_steps: Option<u64>,
    pub steps_per_eval: u64,
    pub seed: u64,
    pub objective: Objective,
    pub encoder_mode: EncoderMode,
    pub loss: LossConfig,
    pub dropout: DropoutMode,
    pub encoder: EncoderConfig,
    /// Also return the parameters with the best probe Spearman seen at an eval step.
    pub keep_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 1e-3,
            epochs: 1,
            max_steps: None,
            steps_per_eval: 10,
            seed: 7,
            objective: Objective::default(),
            encoder_mode: EncoderMode::default(),
            loss: LossConfig::default(),
            dropout: DropoutMode::default(),
            encoder: EncoderConfig::default(),
            keep_best: false,
        }
    }
}

impl TrainConfig {
    /// Defaults for `objective`, with the objective's default projection head.
    pub fn for_objective(objective: Objective) -> Self {
        let mut cfg = Self {
            objective,
            ..Self::default()
        };
        cfg.encoder.projection_head = objective.default_projection_head();
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(
                "batch_size must be >= 2 for in-batch negatives".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.steps_per_eval == 0 {
            return Err(Error::InvalidConfig("steps_per_eval must be >= 1".into()));
        }
        if let Objective::NextSentence { window: 0 } = self.objective {
            return Err(Error::InvalidConfig("window must be >= 1".into()));
        }
        self.loss.validate()?;
        self.encoder.validate()
    }

    fn uses_hard_negatives(&self) -> bool {
        self.objective == Objective::SupervisedHardNeg
    }
}

/// Hex SHA-256 of the config with the run-length fields (`epochs`,
/// `max_steps`, `keep_best`) blanked, so a run may be extended on resume.
pub fn config_hash(cfg: &TrainConfig) -> Result<String> {
    let mut c = cfg.clone();
    c.epochs = 0;
    c.max_steps = None;
    c.keep_best = false;
    let bytes = serde_json::to_vec(&c)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Instances plus what some objectives and the evaluation hook need.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub instances: Vec<TrainInstance>,
    pub synonyms: Option<SynonymTable>,
    pub probes: Option<ProbeSet>,
}

impl TrainData {
    pub fn from_corpus(sentences: Vec<Sentence>) -> Self {
        Self {
            instances: sentences.into_iter().map(TrainInstance::single).collect(),
            ..Self::default()
        }
    }

    pub fn from_instances(instances: Vec<TrainInstance>) -> Self {
        Self {
            instances,
            ..Self::default()
        }
    }

    pub fn with_probes(mut self, probes: ProbeSet) -> Self {
        self.probes = Some(probes);
        self
    }

    pub fn with_synonyms(mut self, synonyms: SynonymTable) -> Self {
        self.synonyms = Some(synonyms);
        self
    }
}

/// Checks the data against the objective and returns the instance list
/// the batch schedule runs over.
fn prepare_instances(cfg: &TrainConfig, data: &TrainData) -> Result<Vec<TrainInstance>> {
    if data.instances.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let prepared = match cfg.objective {
        Objective::UnsupDropout | Objective::UnsupAugment { .. } => data
            .instances
            .iter()
            .map(|i| TrainInstance::single(i.anchor.clone()))
            .collect(),
        Objective::NextSentence { window } => {
            next_sentence_pairs(data.instances.len(), window, mix(cfg.seed ^ 0x4E53))?
                .into_iter()
                .map(|(i, j)| {
                    TrainInstance::pair(data.instances[i].anchor.clone(), data.instances[j].anchor.clone())
                })
                .collect()
        }
        Objective::Supervised => {
            if let Some(k) = data.instances.iter().position(|i| i.positive.is_none()) {
                return Err(Error::ObjectiveDataMismatch(format!(
                    "supervised objective but instance {k} has no positive"
                )));
            }
            data.instances
                .iter()
                .map(|i| TrainInstance::pair(i.anchor.clone(), i.positive.clone().expect("checked")))
                .collect()
        }
        Objective::SupervisedHardNeg => {
            if let Some(k) = data
                .instances
                .iter()
                .position(|i| i.positive.is_none() || i.hard_negative.is_none())
            {
                return Err(Error::ObjectiveDataMismatch(format!(
                    "hard-negative objective but instance {k} is not a triplet"
                )));
            }
            data.instances.clone()
        }
    };
    if let Objective::UnsupAugment { op: AugmentOp::Synonym } = cfg.objective {
        if data.synonyms.is_none() {
            return Err(Error::ObjectiveDataMismatch(
                "synonym augmentation needs a synonym table".into(),
            ));
        }
    }
    Ok(prepared)
}

/// Adam moments for one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// Bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::DimMismatch {
            expected: params.len(),
            got: grads.len(),
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub step: u64,
    pub loss: f64,
    pub align: Option<f64>,
    pub uniform: Option<f64>,
    pub sigma_max_ratio: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub records: Vec<TrajectoryRecord>,
}

impl TrajectoryLog {
    pub fn push(&mut self, r: TrajectoryRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if r.step <= last.step {
                return Err(Error::InvalidConfig(format!(
                    "trajectory steps must increase ({} after {})",
                    r.step, last.step
                )));
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn first(&self) -> Option<&TrajectoryRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&TrajectoryRecord> {
        self.records.last()
    }

    /// CSV with header `step,loss,align,uniform,sigma_max_ratio`; missing probe values are empty.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        let mut out = String::from("step,loss,align,uniform,sigma_max_ratio\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{:e},{},{},{}\n",
                r.step,
                r.loss,
                opt(r.align),
                opt(r.uniform),
                opt(r.sigma_max_ratio)
            ));
        }
        out
    }
}

/// Per-step record of the training batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    /// Step index before the update.
    pub step: u64,
    pub loss: f64,
    /// Smallest `cos(hᵢ, hᵢ⁺)` over the batch, on raw (unnormalized) embeddings.
    pub min_positive_cosine: f64,
    pub max_positive_cosine: f64,
    /// Share of the batch with `cos(hᵢ, hᵢ⁺) < 1 - 1e-9`.
    pub frac_positive_below: f64,
}

/// Full training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub models: Vec<EncoderModel>,
    pub adam: Vec<AdamState>,
    /// Number of updates applied; also the cursor of every step-keyed RNG.
    pub step: u64,
}

impl Checkpoint {
    pub fn config_hash(&self) -> Result<String> {
        config_hash(&self.config)
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut meta = json!({
            "kind": "train",
            "config": self.config,
            "config_hash": self.config_hash()?,
            "step": self.step,
            "n_models": self.models.len(),
            "adam_t": self.adam.iter().map(|a| a.t).collect::<Vec<_>>(),
        });
        let mut blocks = Vec::new();
        for (k, (model, adam)) in self.models.iter().zip(&self.adam).enumerate() {
            let c = model.to_container()?;
            meta[format!("encoder{k}")] = c.meta;
            blocks.push((format!("encoder{k}.params"), model.params.clone()));
            blocks.push((format!("adam{k}.m"), adam.m.clone()));
            blocks.push((format!("adam{k}.v"), adam.v.clone()));
        }
        Ok(Container { meta, blocks })
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.meta.get("kind").and_then(Value::as_str) != Some("train") {
            return Err(Error::BadCheckpoint("not a training checkpoint".into()));
        }
        let field = |name: &str| -> Result<Value> {
            c.meta
                .get(name)
                .cloned()
                .ok_or_else(|| Error::BadCheckpoint(format!("missing {name}")))
        };
        let config: TrainConfig = serde_json::from_value(field("config")?)?;
        let step: u64 = serde_json::from_value(field("step")?)?;
        let n: usize = serde_json::from_value(field("n_models")?)?;
        let adam_t: Vec<u64> = serde_json::from_value(field("adam_t")?)?;
        let stored_hash: String = serde_json::from_value(field("config_hash")?)?;
        if stored_hash != config_hash(&config)? {
            return Err(Error::BadCheckpoint("config hash mismatch".into()));
        }
        if n != config.encoder_mode.n_models() || adam_t.len() != n {
            return Err(Error::BadCheckpoint("model count does not match encoder mode".into()));
        }
        let mut models = Vec::with_capacity(n);
        let mut adam = Vec::with_capacity(n);
        for (k, &t) in adam_t.iter().enumerate() {
            let model = EncoderModel::from_container(c, &format!("encoder{k}"))?;
            let block = |name: String| -> Result<Vec<f64>> {
                let b = c
                    .block(&name)
                    .ok_or_else(|| Error::BadCheckpoint(format!("missing block {name}")))?;
                if b.len() != model.num_params() {
                    return Err(Error::BadCheckpoint(format!("block {name} has wrong length")));
                }
                Ok(b.to_vec())
            };
            adam.push(AdamState {
                m: block(format!("adam{k}.m"))?,
                v: block(format!("adam{k}.v"))?,
                t,
            });
            models.push(model);
        }
        Ok(Self {
            config,
            models,
            adam,
            step,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Reads the anchor encoder from either an encoder or a training checkpoint.
pub fn load_encoder(path: impl AsRef<Path>) -> Result<EncoderModel> {
    encoder_from_container(&Container::load(path)?)
}

pub fn encoder_from_container(c: &Container) -> Result<EncoderModel> {
    match c.meta.get("kind").and_then(Value::as_str) {
        Some("train") => EncoderModel::from_container(c, "encoder0"),
        _ => EncoderModel::from_container(c, ""),
    }
}

/// Embeddings of one assembled batch, with what backprop needs.
pub struct BuiltBatch {
    pub embeddings: EmbeddingBatch,
    passes: Vec<(usize, DropoutPlan, ForwardPass)>,
}

/// Encodes anchors (pass 0), positives (pass 1) and, for the hard-negative
/// objective, negatives (pass 2) of `instances` at `step`.
pub fn build_batch(
    cfg: &TrainConfig,
    models: &[EncoderModel],
    instances: &[&TrainInstance],
    synonyms: Option<&SynonymTable>,
    step: u64,
) -> Result<BuiltBatch> {
    if models.len() != cfg.encoder_mode.n_models() {
        return Err(Error::InvalidConfig("model count does not match encoder mode".into()));
    }
    let side = |pass: usize| match cfg.encoder_mode {
        EncoderMode::Shared => 0,
        EncoderMode::Dual => pass.min(1),
    };
    let anchors: Vec<&Sentence> = instances.iter().map(|i| &i.anchor).collect();
    let anchor_batch = TokenBatch::from_sentences(&anchors)?;
    let positive_batch = match cfg.objective {
        Objective::UnsupDropout => None,
        Objective::UnsupAugment { op } => {
            let aug: Vec<Sentence> = instances
                .iter()
                .enumerate()
                .map(|(k, inst)| {
                    let seed = mix(mix(cfg.seed ^ 0xA06) ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ k as u64);
                    // sentences too short for the operator keep the identity view
                    op.apply(&inst.anchor, synonyms, seed)
                        .unwrap_or_else(|_| inst.anchor.clone())
                })
                .collect();
            Some(TokenBatch::from_sentences(&aug)?)
        }
        _ => {
            let pos = instances
                .iter()
                .map(|i| {
                    i.positive
                        .as_ref()
                        .ok_or_else(|| Error::ObjectiveDataMismatch("instance without positive".into()))
                })
                .collect::<Result<Vec<_>>>()?;
            Some(TokenBatch::from_sentences(&pos)?)
        }
    };
    let negative_batch = if cfg.uses_hard_negatives() {
        let neg = instances
            .iter()
            .map(|i| i.hard_negative.as_ref().ok_or(Error::MissingHardNegatives))
            .collect::<Result<Vec<_>>>()?;
        Some(TokenBatch::from_sentences(&neg)?)
    } else {
        None
    };

    let mut passes = Vec::with_capacity(3);
    let batches = [Some(&anchor_batch), Some(positive_batch.as_ref().unwrap_or(&anchor_batch)), negative_batch.as_ref()];
    for (pass, batch) in batches.into_iter().enumerate() {
        let Some(batch) = batch else { continue };
        let plan = DropoutPlan::for_pass(cfg.dropout, cfg.seed, step, pass as u64);
        let m = side(pass);
        let fp = models[m].forward(batch, &plan, Phase::Train)?;
        passes.push((m, plan, fp));
    }
    let mut outputs = passes.iter().map(|(_, _, fp)| fp.output().clone());
    let a = outputs.next().expect("anchor pass");
    let p = outputs.next().expect("positive pass");
    let embeddings = EmbeddingBatch::new(a, p, outputs.next())?;
    Ok(BuiltBatch { embeddings, passes })
}

impl BuiltBatch {
    fn positive_cosines(&self) -> Result<Vec<f64>> {
        self.embeddings
            .anchors
            .row_iter()
            .zip(self.embeddings.positives.row_iter())
            .map(|(a, b)| cosine_sim(a, b))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestSnapshot {
    pub step: u64,
    pub spearman: f64,
    pub models: Vec<EncoderModel>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrajectoryLog,
    pub stats: Vec<StepStats>,
    pub best: Option<BestSnapshot>,
}

pub struct Trainer<'a> {
    data: &'a TrainData,
    instances: Vec<TrainInstance>,
    state: Checkpoint,
    perm: Option<(u64, Vec<usize>)>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, data: &'a TrainData) -> Result<Self> {
        config.validate()?;
        let mut models = Vec::new();
        for k in 0..config.encoder_mode.n_models() {
            let seed = if k == 0 { config.seed } else { mix(config.seed ^ k as u64) };
            let mut m = EncoderModel::init(config.encoder.clone(), seed)?;
            m.seed_lineage = vec![seed];
            models.push(m);
        }
        let adam = models.iter().map(|m| AdamState::new(m.num_params())).collect();
        Self::resume(
            Checkpoint {
                config,
                models,
                adam,
                step: 0,
            },
            data,
        )
    }

    /// Continues from `ckpt`; its config decides everything but the run length.
    pub fn resume(ckpt: Checkpoint, data: &'a TrainData) -> Result<Self> {
        ckpt.config.validate()?;
        let instances = prepare_instances(&ckpt.config, data)?;
        if instances.len() < ckpt.config.batch_size {
            return Err(Error::ObjectiveDataMismatch(format!(
                "{} instances cannot fill one batch of {}",
                instances.len(),
                ckpt.config.batch_size
            )));
        }
        Ok(Self {
            data,
            instances,
            state: ckpt,
            perm: None,
        })
    }

    /// Like [`Trainer::resume`] with a new config that may only differ in run length.
    pub fn resume_with(mut ckpt: Checkpoint, config: TrainConfig, data: &'a TrainData) -> Result<Self> {
        if config_hash(&config)? != ckpt.config_hash()? {
            return Err(Error::InvalidConfig(
                "resume config differs from the checkpoint beyond epochs/max_steps/keep_best".into(),
            ));
        }
        ckpt.config = config;
        Self::resume(ckpt, data)
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.state
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.state
    }

    pub fn steps_per_epoch(&self) -> u64 {
        (self.instances.len() / self.state.config.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        let c = &self.state.config;
        c.max_steps
            .unwrap_or(c.epochs as u64 * self.steps_per_epoch())
    }

    fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let epoch = step / spe;
        let within = (step % spe) as usize;
        if self.perm.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut idx: Vec<usize> = (0..self.instances.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(mix(self.state.config.seed ^ mix(epoch)));
            idx.shuffle(&mut rng);
            self.perm = Some((epoch, idx));
        }
        let n = self.state.config.batch_size;
        self.perm.as_ref().expect("set above").1[within * n..(within + 1) * n].to_vec()
    }

    /// Loss on the first `batch_size` instances under a fixed plan.
    pub fn monitor_loss(&self) -> Result<f64> {
        let n = self.state.config.batch_size;
        let inst: Vec<&TrainInstance> = self.instances[..n].iter().collect();
        let built = build_batch(
            &self.state.config,
            &self.state.models,
            &inst,
            self.data.synonyms.as_ref(),
            MONITOR_STEP,
        )?;
        match batch_loss(&built.embeddings, &self.state.config.loss) {
            Ok(o) => Ok(o.value),
            Err(Error::NonFiniteLoss) => Err(Error::Diverged {
                step: self.state.step,
                last_good: Box::new(self.state.clone()),
            }),
            Err(e) => Err(e),
        }
    }

    fn record(&self) -> Result<TrajectoryRecord> {
        let loss = self.monitor_loss()?;
        let (align, uniform, ratio) = match &self.data.probes {
            Some(p) => {
                let (a, u, pool) = align_uniform(&self.state.models[0], p)?;
                (Some(a), Some(u), Some(sigma_max_ratio(&singular_values(&pool)?)))
            }
            None => (None, None, None),
        };
        Ok(TrajectoryRecord {
            step: self.state.step,
            loss,
            align,
            uniform,
            sigma_max_ratio: ratio,
        })
    }

    fn probe_spearman(&self) -> Result<Option<f64>> {
        let Some(p) = &self.data.probes else { return Ok(None) };
        if p.scored.is_empty() {
            return Ok(None);
        }
        let cos = pair_cosines(&self.state.models[0], p.scored.iter().map(|s| (&s.left, &s.right)))?;
        let golds: Vec<f64> = p.scored.iter().map(|s| s.gold).collect();
        match spearman(&cos, &golds) {
            Ok(r) => Ok(Some(r)),
            Err(Error::DegenerateSeries) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// One optimizer update.
    pub fn step_once(&mut self) -> Result<StepStats> {
        let step = self.state.step;
        let idx = self.batch_indices(step);
        let inst: Vec<&TrainInstance> = idx.iter().map(|&i| &self.instances[i]).collect();
        let cfg = &self.state.config;
        let built = build_batch(cfg, &self.state.models, &inst, self.data.synonyms.as_ref(), step)?;
        let diverged = |state: &Checkpoint| Error::Diverged {
            step,
            last_good: Box::new(state.clone()),
        };
        let out = match batch_loss(&built.embeddings, &cfg.loss) {
            Ok(o) => o,
            Err(Error::NonFiniteLoss) => return Err(diverged(&self.state)),
            Err(e) => return Err(e),
        };
        let cos = built.positive_cosines()?;
        let below = cos.iter().filter(|&&c| c < DEGENERATE_COS).count();
        let stats = StepStats {
            step,
            loss: out.value,
            min_positive_cosine: cos.iter().cloned().fold(f64::INFINITY, f64::min),
            max_positive_cosine: cos.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            frac_positive_below: below as f64 / cos.len() as f64,
        };

        let mut grads: Vec<Vec<f64>> = self.state.models.iter().map(|m| vec![0.0; m.num_params()]).collect();
        let upstreams = [Some(&out.grad_anchors), Some(&out.grad_positives), out.grad_negatives.as_ref()];
        for ((m, _plan, fp), up) in built.passes.iter().zip(upstreams) {
            let up = up.expect("a gradient for every pass");
            fp.accumulate_grad(&self.state.models[*m], up, &mut grads[*m])?;
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(diverged(&self.state));
        }
        let lr = self.state.config.lr;
        for ((model, adam), g) in self.state.models.iter_mut().zip(&mut self.state.adam).zip(&grads) {
            adam_step(&mut model.params, g, adam, lr)?;
        }
        self.state.step += 1;
        Ok(stats)
    }

    /// Trains up to [`Trainer::total_steps`], logging every `steps_per_eval`
    /// steps, at the starting step and at the last one.
    pub fn run(mut self) -> Result<TrainOutcome> {
        let total = self.total_steps();
        let every = self.state.config.steps_per_eval;
        let keep_best = self.state.config.keep_best;
        let mut log = TrajectoryLog::default();
        let mut stats = Vec::new();
        let mut best: Option<BestSnapshot> = None;
        let mut evaluate = |t: &Self, log: &mut TrajectoryLog| -> Result<()> {
            log.push(t.record()?)?;
            if keep_best {
                if let Some(r) = t.probe_spearman()? {
                    if best.as_ref().is_none_or(|b| r > b.spearman) {
                        best = Some(BestSnapshot {
                            step: t.state.step,
                            spearman: r,
                            models: t.state.models.clone(),
                        });
                    }
                }
            }
            Ok(())
        };
        evaluate(&self, &mut log)?;
        while self.state.step < total {
            stats.push(self.step_once()?);
            let s = self.state.step;
            if s.is_multiple_of(every) || s == total {
                evaluate(&self, &mut log)?;
            }
        }
        Ok(TrainOutcome {
            checkpoint: self.state,
            log,
            stats,
            best,
        })
    }
}

/// Trains from scratch.
pub fn train_run(config: TrainConfig, data: &TrainData) -> Result<TrainOutcome> {
    Trainer::new(config, data)?.run()
}
