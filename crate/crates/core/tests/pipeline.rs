use simcse_core::data::{encode_corpus, gen_toy_corpus, load_sts};
use simcse_core::evalproto::evaluate_model;
use simcse_core::metrics::{diagnose, DEFAULT_THRESHOLD};
use simcse_core::train::{load_encoder, Trainer};
use simcse_core::{
    Checkpoint, EncoderConfig, EncoderMode, EvalConfig, Objective, ProbeSet, ToyCorpusConfig, TrainConfig,
    TrainData,
};

fn small_toy() -> ToyCorpusConfig {
    ToyCorpusConfig {
        n_clusters: 4,
        per_cluster: 24,
        vocab_size: 64,
        probe_per_cluster: 4,
        probe_pairs: 40,
        ..ToyCorpusConfig::default()
    }
}

fn small_config(max_steps: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        max_steps: Some(max_steps),
        steps_per_eval: 3,
        encoder: EncoderConfig {
            vocab_size: 64,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_len: 16,
            ..EncoderConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn corpus_text_round_trips_through_the_vocab() {
    let toy = gen_toy_corpus(&small_toy()).unwrap();
    let back = encode_corpus(&toy.corpus_text(), &toy.vocab).unwrap();
    assert_eq!(back, toy.sentences);
}

#[test]
fn train_save_load_evaluate() {
    let toy = gen_toy_corpus(&small_toy()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy.probes.save(dir.path()).unwrap();
    let sts = load_sts(&manifest).unwrap();
    let probes = ProbeSet::from_sts(&sts, &toy.vocab, DEFAULT_THRESHOLD).unwrap();
    let data = TrainData::from_corpus(toy.sentences.clone()).with_probes(probes.clone());

    let out = Trainer::new(small_config(7), &data).unwrap().run().unwrap();
    let steps: Vec<u64> = out.log.records.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 3, 6, 7]);
    assert!(out.log.records.iter().all(|r| r.align.is_some() && r.uniform.is_some()));

    let path = dir.path().join("m.ckpt");
    out.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, out.checkpoint);
    let model = load_encoder(&path).unwrap();
    assert_eq!(model, out.checkpoint.models[0]);

    let eval = evaluate_model(&model, &toy.vocab, &sts, EvalConfig::default()).unwrap();
    assert!(eval.aggregate.abs() <= 1.0);
    let report = diagnose(&model, &probes, 0.05).unwrap();
    assert!(report.jensen_gap >= -1e-12);
    assert_eq!(report.singular_values[0], 1.0);
}

#[test]
fn interrupted_run_resumes_to_the_same_state() {
    let toy = gen_toy_corpus(&small_toy()).unwrap();
    let data = TrainData::from_corpus(toy.sentences);
    let straight = Trainer::new(small_config(20), &data).unwrap().run().unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    let half = Trainer::new(small_config(9), &data).unwrap().run().unwrap();
    half.checkpoint.save(&path).unwrap();
    let resumed = Trainer::resume_with(Checkpoint::load(&path).unwrap(), small_config(20), &data)
        .unwrap()
        .run()
        .unwrap();
    assert_eq!(resumed.checkpoint, straight.checkpoint);
}

#[test]
fn dual_supervised_keeps_two_models() {
    let toy = gen_toy_corpus(&small_toy()).unwrap();
    let data = TrainData::from_instances(toy.triplets);
    let cfg = TrainConfig {
        objective: Objective::SupervisedHardNeg,
        encoder_mode: EncoderMode::Dual,
        ..small_config(4)
    };
    let out = Trainer::new(cfg, &data).unwrap().run().unwrap();
    assert_eq!(out.checkpoint.models.len(), 2);
    assert_eq!(out.checkpoint.adam.len(), 2);
    assert_ne!(out.checkpoint.models[0], out.checkpoint.models[1]);
    assert!(out.log.records.iter().all(|r| r.loss.is_finite() && r.align.is_none()));
}
