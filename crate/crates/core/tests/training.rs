mod common;

use relprop::autodiff::{ParamGroup, ParamStore};
use relprop::data::SynthData;
use relprop::model::{GateOptions, ModelConfig, RelevanceOverride, RpModel};
use relprop::pipeline::{build_vocab, init_model, train, Corpora};
use relprop::train::{
    predict_ner, prepare_ner, prepare_trc, run_multitask, split_trc, NerEval, TrainConfig, TrainData, Trainer,
};
use relprop::Real;

fn small_model_config() -> ModelConfig {
    let mut m = ModelConfig::default();
    m.encoder.layers = 1;
    m.encoder.d_model = 16;
    m.encoder.d_ff = 32;
    m
}

fn setup(seed: u64) -> (SynthData, RpModel, ParamStore, TrainData) {
    let synth = common::small_synth(seed);
    let corpora = Corpora::from_synth(&synth);
    let mut features = synth.grids.clone();
    let (model, store) = init_model(&small_model_config(), seed, build_vocab(&corpora)).unwrap();
    let (tr, _, te) = split_trc(&corpora.trc, seed);
    let data = TrainData {
        trc_train: prepare_trc(&model, &tr, &mut features).unwrap(),
        trc_test: prepare_trc(&model, &te, &mut features).unwrap(),
        ner_train: prepare_ner(&model, &corpora.ner_train, &mut features).unwrap(),
        ner_dev: prepare_ner(&model, &corpora.ner_dev, &mut features).unwrap(),
    };
    (synth, model, store, data)
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        seed: 3,
        batch_size: 4,
        patience: 0,
        ..TrainConfig::desk()
    }
}

fn checksums(s: &ParamStore) -> [u64; 4] {
    [
        ParamGroup::Encoder,
        ParamGroup::Visual,
        ParamGroup::RelationHead,
        ParamGroup::Tagger,
    ]
    .map(|g| s.checksum(g))
}

#[test]
fn relation_step_leaves_the_tagger_alone() {
    let (_, model, mut store, data) = setup(1);
    let before = checksums(&store);
    let mut t = Trainer::new(&cfg(1), &model, 1);
    let batch: Vec<_> = data.trc_train.iter().take(4).collect();
    t.trc_batch(&mut store, &batch).unwrap();
    let after = checksums(&store);
    assert_ne!(before[0], after[0], "encoder");
    assert_ne!(before[1], after[1], "visual projection");
    assert_ne!(before[2], after[2], "relation head");
    assert_eq!(before[3], after[3], "tagger");
}

#[test]
fn tagging_step_leaves_the_relation_head_alone() {
    let (_, model, mut store, data) = setup(2);
    let before = checksums(&store);
    let mut t = Trainer::new(&cfg(1), &model, 1);
    let batch: Vec<_> = data.ner_train.iter().take(4).collect();
    t.ner_batch(&mut store, &batch).unwrap();
    let after = checksums(&store);
    assert_ne!(before[0], after[0]);
    assert_ne!(before[1], after[1]);
    assert_eq!(before[2], after[2]);
    assert_ne!(before[3], after[3]);
}

#[test]
fn both_passes_read_the_same_encoder_weights() {
    let (_, model, store, _) = setup(3);
    let names: Vec<&str> = store
        .iter()
        .filter(|(_, p)| p.group == ParamGroup::Encoder)
        .map(|(_, p)| p.name.as_str())
        .collect();
    let mut dedup = names.clone();
    dedup.sort_unstable();
    dedup.dedup();
    assert_eq!(names.len(), dedup.len(), "one copy of each encoder parameter");
    assert!(model
        .encoder
        .query_key_params()
        .iter()
        .all(|id| store.group(*id) == ParamGroup::Encoder));
}

#[test]
fn temperature_reaches_its_floor_on_the_last_step() {
    let (_, model, mut store, data) = setup(4);
    let mut c = cfg(2);
    c.gate = relprop::gate::GateKind::Gumbel;
    let summary = run_multitask(&c, &model, &mut store, &data, None).unwrap();
    let last = summary.reports.last().unwrap();
    assert_eq!(last.tau, 0.1);
    assert!(summary.reports[0].tau > 0.1);
}

#[test]
fn zero_epochs_returns_initial_weights() {
    let (_, model, mut store, data) = setup(5);
    let init = store.clone();
    let summary = run_multitask(&cfg(0), &model, &mut store, &data, None).unwrap();
    assert!(summary.reports.is_empty());
    assert_eq!(summary.best_epoch, 0);
    assert_eq!(checksums(&summary.best), checksums(&init));
}

#[test]
fn one_batch_can_be_overfit() {
    let (_, model, mut store, data) = setup(6);
    let batch: Vec<_> = data.ner_train.iter().take(2).collect();
    let mut c = cfg(1);
    c.lr_finetune = c.lr_main;
    let mut t = Trainer::new(&c, &model, 50);
    let first = t.ner_batch(&mut store, &batch).unwrap();
    let mut last = first;
    for _ in 0..49 {
        last = t.ner_batch(&mut store, &batch).unwrap();
    }
    assert!(last < 0.1 * first, "loss {first} -> {last}");
}

#[test]
fn ablation_runs_no_relation_batches() {
    let (_, model, mut store, data) = setup(7);
    let mut c = cfg(1);
    c.ablate_rp = true;
    let head = store.checksum(ParamGroup::RelationHead);
    let summary = run_multitask(&c, &model, &mut store, &data, None).unwrap();
    assert_eq!(summary.reports[0].trc_batches, 0);
    assert_eq!(summary.reports[0].mean_l1, None);
    assert_eq!(store.checksum(ParamGroup::RelationHead), head);
}

#[test]
fn single_token_sentence_trains_and_predicts() {
    let (_, model, mut store, mut data) = setup(8);
    for ex in data.ner_train.iter_mut().take(3) {
        let grid =
            relprop::data::FeatureGrid::new(3, 3, model.config.encoder.d_v, vec![0.5; 9 * model.config.encoder.d_v])
                .unwrap();
        ex.words.truncate(1);
        ex.tags.truncate(1);
        ex.seq = model.sequence(&ex.words, &grid).unwrap();
    }
    run_multitask(&cfg(1), &model, &mut store, &data, None).unwrap();
    let preds = predict_ner(&model, &store, &data.ner_train[..3], &GateOptions::default()).unwrap();
    assert!(preds.iter().all(|p| p.tags.len() == 1));
}

#[test]
fn zero_relevance_matches_a_text_only_model() {
    // With r = 0 the visual rows carry only segment and position
    // embeddings, so the grid content cannot change predictions.
    let (_, model, store, data) = setup(9);
    let opts = GateOptions {
        relevance: RelevanceOverride::Fixed(0.0),
        ..GateOptions::default()
    };
    let a = predict_ner(&model, &store, &data.ner_dev, &opts).unwrap();
    let mut blank = data.ner_dev.clone();
    for ex in &mut blank {
        let d = model.config.encoder.d_v;
        let grid = relprop::data::FeatureGrid::new(3, 3, d, vec![0.0; 9 * d]).unwrap();
        ex.seq = model.sequence(&ex.words, &grid).unwrap();
    }
    let b = predict_ner(&model, &store, &blank, &opts).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.tags, y.tags);
        assert_eq!(x.attention, y.attention);
    }
}

#[test]
fn training_is_reproducible() {
    let run = || {
        let synth = common::small_synth(10);
        let corpora = Corpora::from_synth(&synth);
        let mut features = synth.grids.clone();
        let t = train(&small_model_config(), &cfg(2), &corpora, &mut features, None, None).unwrap();
        (checksums(&t.store), serde_json::to_string(&t.summary.reports).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn eval_subsets_partition_the_corpus() {
    let (_, model, store, data) = setup(11);
    let preds = predict_ner(&model, &store, &data.ner_dev, &GateOptions::default()).unwrap();
    let e = NerEval::from_predictions(&preds);
    let sum = |f: fn(&relprop::ner::EntityCounts) -> usize| f(&e.relevant) + f(&e.irrelevant);
    assert_eq!(sum(|c| c.tp), e.overall.tp);
    assert_eq!(sum(|c| c.fp), e.overall.fp);
    assert_eq!(sum(|c| c.fn_), e.overall.fn_);
    let f1 = e.overall.f1();
    assert!((0.0..=1.0 as Real).contains(&f1));
}
