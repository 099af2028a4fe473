//! `simcse-kit` command-line front end.
//!
//! Exit codes: 0 on success, 1 on usage or validation errors, 2 on runtime
//! errors. `SIMCSE_KIT_THREADS` sets the worker count (default 1).

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use simcse_core::augment::{AugmentOp, Sentence, SynonymTable};
use simcse_core::checkpoint::Container;
use simcse_core::data::{
    encode_corpus, gen_toy_corpus, load_nli_triplets, load_sts, parse_corpus, ToyCorpusConfig,
};
use simcse_core::encoder::dropout::mix;
use simcse_core::evalproto::{self, Aggregation, EvalConfig, Metric};
use simcse_core::io::{read_to_string, write_atomic};
use simcse_core::metrics::{density_csv, diagnose_with, ProbeSet};
use simcse_core::train::{encoder_from_container, train_run, TrainConfig, TrainData};
use simcse_core::{DropoutMode, Error, Vocab};

pub const THREADS_ENV: &str = "SIMCSE_KIT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "simcse-kit", version, about = "Contrastive sentence-embedding toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic clustered corpus, NLI-style triplets and STS probes.
    GenToy(GenToyArgs),
    /// Train an encoder from a JSON config.
    Train(TrainArgs),
    /// Score an STS manifest with a checkpoint.
    EvalSts(EvalArgs),
    /// Alignment/uniformity, spectrum and cosine-density report for a checkpoint.
    Analyze(AnalyzeArgs),
    /// Apply a discrete augmentation to every line of a corpus.
    Augment(AugmentArgs),
}

#[derive(Debug, Args)]
pub struct GenToyArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub clusters: usize,
    #[arg(long, default_value_t = 250)]
    pub per_cluster: usize,
    #[arg(long, default_value_t = 256)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 5)]
    pub min_len: usize,
    #[arg(long, default_value_t = 12)]
    pub max_len: usize,
    #[arg(long, default_value_t = 16)]
    pub probe_per_cluster: usize,
    #[arg(long, default_value_t = 512)]
    pub probe_pairs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DropoutModeArg {
    Fresh,
    Fixed,
    None,
}

impl From<DropoutModeArg> for DropoutMode {
    fn from(m: DropoutModeArg) -> Self {
        match m {
            DropoutModeArg::Fresh => DropoutMode::Fresh,
            DropoutModeArg::Fixed => DropoutMode::Fixed,
            DropoutModeArg::None => DropoutMode::None,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training config (JSON, TrainConfig fields plus an optional "data" section).
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Trajectory CSV path; defaults to `<out>.trajectory.csv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub dropout_mode: Option<DropoutModeArg>,
    #[arg(long)]
    pub dropout_p: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Corpus, one sentence per line (unsupervised objectives).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Premise/entailment/contradiction TSV (supervised objectives).
    #[arg(long)]
    pub triplets: Option<PathBuf>,
    /// Vocab JSON; built from the corpus when absent.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// STS manifest used as the evaluation-hook probe set.
    #[arg(long)]
    pub probes: Option<PathBuf>,
    #[arg(long)]
    pub synonyms: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Spearman,
    Pearson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AggArg {
    All,
    Mean,
    Wmean,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// STS manifest JSON.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = MetricArg::Spearman)]
    pub metric: MetricArg,
    #[arg(long, value_enum, default_value_t = AggArg::All)]
    pub agg: AggArg,
    /// Vocab JSON; defaults to the vocab stored in the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Write the result JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also print the fixed-width table.
    #[arg(long)]
    pub table: bool,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// STS manifest supplying the probe pairs and pool.
    #[arg(long)]
    pub probes: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    pub tau: f64,
    /// Pairs with gold strictly above this are positives.
    #[arg(long, default_value_t = 4.0)]
    pub threshold: f64,
    #[arg(long, default_value_t = 5)]
    pub bands: usize,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    /// Report JSON output.
    #[arg(long)]
    pub out: PathBuf,
    /// Density CSV output; defaults to `<out>.density.csv`.
    #[arg(long)]
    pub density_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OpArg {
    Crop,
    WordDelete,
    DeleteOneWord,
    Synonym,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum)]
    pub op: OpArg,
    /// Percentage for crop and word deletion.
    #[arg(long, default_value_t = 10.0)]
    pub k: f64,
    #[arg(long)]
    pub synonyms: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// A flag or config problem found before any work starts.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Exit code for an error: 1 for validation problems, 2 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<Error>() {
        Some(
            Error::InvalidConfig(_)
            | Error::ObjectiveDataMismatch(_)
            | Error::BadColumnCount { .. }
            | Error::ScoreOutOfRange { .. }
            | Error::BadScore { .. }
            | Error::VocabTooSmall { .. }
            | Error::EmptyCorpus
            | Error::EmptySelection
            | Error::LengthOverflow { .. }
            | Error::Json(_),
        ) => 1,
        _ => 2,
    }
}

/// Parses `argv` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_threads();
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn init_threads() {
    let n = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1);
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenToy(a) => gen_toy(a),
        Command::Train(a) => train(a),
        Command::EvalSts(a) => eval_sts(a),
        Command::Analyze(a) => analyze(a),
        Command::Augment(a) => augment(a),
    }
}

fn gen_toy(a: GenToyArgs) -> Result<()> {
    let cfg = ToyCorpusConfig {
        seed: a.seed,
        n_clusters: a.clusters,
        per_cluster: a.per_cluster,
        vocab_size: a.vocab_size,
        len_range: (a.min_len, a.max_len),
        probe_per_cluster: a.probe_per_cluster,
        probe_pairs: a.probe_pairs,
    };
    let toy = gen_toy_corpus(&cfg)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_atomic(a.out.join("corpus.txt"), toy.corpus_text().as_bytes())?;
    write_atomic(a.out.join("vocab.json"), toy.vocab.to_json()?.as_bytes())?;
    write_atomic(a.out.join("triplets.tsv"), toy.triplets_tsv().as_bytes())?;
    let manifest = toy.probes.save(a.out.join("sts"))?;
    let info = json!({
        "config": cfg,
        "sentences": toy.sentences.len(),
        "triplets": toy.triplets.len(),
        "probe_pairs": toy.probes.len(),
        "manifest": manifest,
    });
    write_atomic(a.out.join("toy.json"), serde_json::to_string_pretty(&info)?.as_bytes())?;
    println!("{}", serde_json::to_string_pretty(&info)?);
    Ok(())
}

/// Input paths of a training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub corpus: Option<PathBuf>,
    pub triplets: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub probes: Option<PathBuf>,
    pub synonyms: Option<PathBuf>,
}

impl DataPaths {
    fn relative_to(mut self, base: &Path) -> Self {
        for p in [
            &mut self.corpus,
            &mut self.triplets,
            &mut self.vocab,
            &mut self.probes,
            &mut self.synonyms,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        self
    }
}

/// Reads a config file: TrainConfig fields plus an optional `data` section
/// whose relative paths resolve against the config's directory. Without an
/// explicit `encoder.projection_head` the objective's default applies.
pub fn read_train_config(path: &Path) -> Result<(TrainConfig, DataPaths)> {
    let text = read_to_string(path)?;
    let mut doc: Value = serde_json::from_str(&text)
        .map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let data = match doc.as_object_mut().and_then(|o| o.remove("data")) {
        Some(v) => serde_json::from_value::<DataPaths>(v)
            .map_err(|e| usage(format!("{}: data section: {e}", path.display())))?,
        None => DataPaths::default(),
    };
    let head_given = doc.pointer("/encoder/projection_head").is_some();
    let mut cfg: TrainConfig =
        serde_json::from_value(doc).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if !head_given {
        cfg.encoder.projection_head = cfg.objective.default_projection_head();
    }
    let base = path.parent().unwrap_or(Path::new("."));
    Ok((cfg, data.relative_to(base)))
}

fn load_vocab(path: &Path) -> Result<Vocab> {
    Ok(Vocab::from_json(&read_to_string(path)?)?)
}

fn train(a: TrainArgs) -> Result<()> {
    let (mut cfg, mut paths) = read_train_config(&a.config)?;
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(m) = a.dropout_mode {
        cfg.dropout = m.into();
    }
    if let Some(p) = a.dropout_p {
        cfg.encoder.dropout_p = p;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.max_steps {
        cfg.max_steps = Some(v);
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    for (flag, slot) in [
        (a.corpus, &mut paths.corpus),
        (a.triplets, &mut paths.triplets),
        (a.vocab, &mut paths.vocab),
        (a.probes, &mut paths.probes),
        (a.synonyms, &mut paths.synonyms),
    ] {
        if flag.is_some() {
            *slot = flag;
        }
    }

    let (mut data, mut vocab) = match (&paths.corpus, &paths.triplets) {
        (Some(_), Some(_)) => return Err(usage("give either a corpus or a triplet file, not both")),
        (None, None) => return Err(usage("no training data: set data.corpus or data.triplets")),
        (Some(corpus), None) => {
            let text = read_to_string(corpus)?;
            let (sentences, vocab) = match &paths.vocab {
                Some(v) => {
                    let vocab = load_vocab(v)?;
                    (encode_corpus(&text, &vocab)?, vocab)
                }
                None => parse_corpus(&text)?,
            };
            (TrainData::from_corpus(sentences), vocab)
        }
        (None, Some(triplets)) => {
            let vocab = match &paths.vocab {
                Some(v) => load_vocab(v)?,
                None => return Err(usage("triplet training needs data.vocab")),
            };
            (TrainData::from_instances(load_nli_triplets(triplets, &vocab)?), vocab)
        }
    };
    if let Some(p) = &paths.synonyms {
        data = data.with_synonyms(SynonymTable::from_json(&read_to_string(p)?, &mut vocab)?);
    }
    // the embedding table always covers the vocab
    cfg.encoder.vocab_size = vocab.len();
    if let Some(p) = &paths.probes {
        data = data.with_probes(ProbeSet::from_sts(&load_sts(p)?, &vocab, 4.0)?);
    }
    cfg.validate()?;

    let effective = json!({ "train": cfg, "data": paths });
    println!("{}", serde_json::to_string_pretty(&effective)?);
    let out = train_run(cfg, &data)?;

    let mut container = out.checkpoint.to_container()?;
    container.meta["vocab"] = serde_json::from_str(&vocab.to_json()?)?;
    container.meta["effective_config"] = effective.clone();
    container.save(&a.out)?;
    if let Some(best) = &out.best {
        let mut c = best.models[0].to_container()?;
        c.meta["vocab"] = container.meta["vocab"].clone();
        c.meta["effective_config"] = effective.clone();
        c.meta["best_step"] = json!(best.step);
        c.meta["best_spearman"] = json!(best.spearman);
        c.save(suffixed(&a.out, ".best"))?;
    }
    let log_path = a.log.unwrap_or_else(|| suffixed(&a.out, ".trajectory.csv"));
    let csv = format!("# config={}\n{}", serde_json::to_string(&effective)?, out.log.to_csv());
    write_atomic(&log_path, csv.as_bytes())?;
    if let Some(last) = out.log.last() {
        println!("step {} loss {:.6}", last.step, last.loss);
    }
    Ok(())
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Checkpoint plus the vocab its ids refer to.
fn load_model(checkpoint: &Path, vocab: Option<&Path>) -> Result<(simcse_core::EncoderModel, Vocab)> {
    let c = Container::load(checkpoint)?;
    let model = encoder_from_container(&c)?;
    let vocab = match vocab {
        Some(p) => load_vocab(p)?,
        None => {
            let v = c
                .meta
                .get("vocab")
                .ok_or_else(|| usage("checkpoint has no vocab; pass --vocab"))?;
            Vocab::from_json(&serde_json::to_string(v)?)?
        }
    };
    if vocab.len() > model.config.vocab_size {
        return Err(usage(format!(
            "vocab has {} entries but the model embeds only {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    Ok((model, vocab))
}

fn eval_sts(a: EvalArgs) -> Result<()> {
    let (model, vocab) = load_model(&a.checkpoint, a.vocab.as_deref())?;
    let ds = load_sts(&a.manifest)?;
    let cfg = EvalConfig {
        metric: match a.metric {
            MetricArg::Spearman => Metric::Spearman,
            MetricArg::Pearson => Metric::Pearson,
        },
        aggregation: match a.agg {
            AggArg::All => Aggregation::All,
            AggArg::Mean => Aggregation::Mean,
            AggArg::Wmean => Aggregation::Wmean,
        },
    };
    let result = evalproto::evaluate_model(&model, &vocab, &ds, cfg)?;
    for s in &result.skipped {
        eprintln!("warning: subset {s} is degenerate and was skipped");
    }
    let doc = json!({
        "checkpoint": a.checkpoint,
        "manifest": a.manifest,
        "config": result.config,
        "per_subset": result.per_subset,
        "aggregate": result.aggregate,
        "skipped": result.skipped,
    });
    let text = serde_json::to_string_pretty(&doc)? + "\n";
    match &a.out {
        Some(p) => write_atomic(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    if a.table {
        print!("{}", evalproto::render_table(&result));
    }
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let (model, vocab) = load_model(&a.checkpoint, a.vocab.as_deref())?;
    let probes = ProbeSet::from_sts(&load_sts(&a.probes)?, &vocab, a.threshold)?;
    let report = diagnose_with(&model, &probes, a.tau, a.bands, a.bins)?;
    let doc = json!({
        "checkpoint": a.checkpoint,
        "probes": a.probes,
        "tau": a.tau,
        "threshold": a.threshold,
        "n_pairs": probes.pairs.len(),
        "n_pool": probes.pool.len(),
        "report": report,
    });
    write_atomic(&a.out, (serde_json::to_string_pretty(&doc)? + "\n").as_bytes())?;
    let csv_path = a.density_csv.unwrap_or_else(|| suffixed(&a.out, ".density.csv"));
    write_atomic(&csv_path, density_csv(&report.cosine_density).as_bytes())?;
    println!(
        "align {:.6} uniform {:.6} jensen_gap {:.6}",
        report.align, report.uniform, report.jensen_gap
    );
    Ok(())
}

fn augment(a: AugmentArgs) -> Result<()> {
    let text = read_to_string(&a.corpus)?;
    let (sentences, mut vocab) = parse_corpus(&text)?;
    let table = match &a.synonyms {
        Some(p) => Some(SynonymTable::from_json(&read_to_string(p)?, &mut vocab)?),
        None if a.op == OpArg::Synonym => return Err(usage("--op synonym needs --synonyms")),
        None => None,
    };
    let op = match a.op {
        OpArg::Crop => AugmentOp::Crop { k: a.k },
        OpArg::WordDelete => AugmentOp::WordDelete { k: a.k },
        OpArg::DeleteOneWord => AugmentOp::DeleteOneWord,
        OpArg::Synonym => AugmentOp::Synonym,
    };
    let mut out = String::new();
    let mut unchanged = 0usize;
    for (i, s) in sentences.iter().enumerate() {
        let seed = mix(a.seed ^ mix(i as u64));
        let view: Sentence = match op.apply(s, table.as_ref(), seed) {
            Ok(v) => v,
            Err(Error::TooShort { .. } | Error::NoReplaceableToken) => {
                unchanged += 1;
                s.clone()
            }
            Err(e) => return Err(e.into()),
        };
        out.push_str(&vocab.decode(view.tokens()));
        out.push('\n');
    }
    write_atomic(&a.out, out.as_bytes())?;
    if unchanged > 0 {
        eprintln!("{unchanged} sentences could not be transformed and were copied unchanged");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use simcse_core::ProjectionHead;

    #[test]
    fn config_data_paths_resolve_against_the_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(
            &path,
            r#"{"lr": 0.01, "data": {"corpus": "x/corpus.txt", "vocab": "/abs/v.json"}}"#,
        )
        .unwrap();
        let (cfg, data) = read_train_config(&path).unwrap();
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(data.corpus.unwrap(), dir.path().join("x/corpus.txt"));
        assert_eq!(data.vocab.unwrap(), PathBuf::from("/abs/v.json"));
    }

    #[test]
    fn projection_head_defaults_follow_the_objective() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let head = |json: &str| {
            std::fs::write(&path, json).unwrap();
            read_train_config(&path).unwrap().0.encoder.projection_head
        };
        assert_eq!(head("{}"), ProjectionHead::TrainOnly);
        assert_eq!(head(r#"{"objective": {"kind": "supervised"}}"#), ProjectionHead::Always);
        assert_eq!(
            head(r#"{"objective": {"kind": "supervised_hard_neg"}, "encoder": {"projection_head": "never"}}"#),
            ProjectionHead::Never
        );
    }

    #[test]
    fn unknown_data_key_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"data": {"corpse": "x"}}"#).unwrap();
        let err = read_train_config(&path).unwrap_err();
        assert_eq!(exit_code(&err), 1);
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(exit_code(&Error::InvalidConfig("x".into()).into()), 1);
        assert_eq!(exit_code(&Error::NonFiniteLoss.into()), 2);
        let io = Error::Io {
            path: "p".into(),
            source: std::io::Error::other("boom"),
        };
        assert_eq!(exit_code(&anyhow::Error::from(io).context("loading")), 2);
        assert_eq!(exit_code(&anyhow::Error::from(Error::EmptyCorpus).context("loading")), 1);
    }

    #[test]
    fn suffix_appends_to_the_full_name() {
        assert_eq!(suffixed(Path::new("a/b.ckpt"), ".csv"), PathBuf::from("a/b.ckpt.csv"));
    }
}
