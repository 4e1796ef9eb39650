//! End-to-end wiring from corpora to a trained model.

use std::collections::HashMap;

use crate::autodiff::ParamStore;
use crate::data::{FeatureSource, NerExample, SynthData, TagSet, TrcExample, Vocabularies};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, RpModel};
use crate::rng::{substream, Stream};
use crate::tensor::Real;
use crate::train::{
    prepare_ner, prepare_trc, run_multitask, split_trc, RunOutput, TrainConfig, TrainData, TrainSummary,
};

#[derive(Debug, Clone, Default)]
pub struct Corpora {
    pub trc: Vec<TrcExample>,
    pub ner_train: Vec<NerExample>,
    pub ner_dev: Vec<NerExample>,
    pub ner_test: Vec<NerExample>,
}

impl Corpora {
    pub fn from_synth(d: &SynthData) -> Self {
        Corpora {
            trc: d.trc.clone(),
            ner_train: d.ner_train.clone(),
            ner_dev: d.ner_dev.clone(),
            ner_test: d.ner_test.clone(),
        }
    }

    /// Carves 10% of the tagging train set off as dev when none was given.
    pub fn ensure_dev(&mut self) {
        if self.ner_dev.is_empty() && self.ner_train.len() >= 10 {
            let n = self.ner_train.len() / 10;
            self.ner_dev = self.ner_train.split_off(self.ner_train.len() - n);
        }
    }
}

/// Vocabularies from the training text of both tasks.
pub fn build_vocab(c: &Corpora) -> Vocabularies {
    let trc_words: Vec<Vec<String>> = c.trc.iter().map(TrcExample::words).collect();
    let sentences = c
        .ner_train
        .iter()
        .map(|e| e.words.as_slice())
        .chain(trc_words.iter().map(Vec::as_slice));
    let sentences: Vec<&[String]> = sentences.collect();
    Vocabularies::build(sentences.iter().copied(), 2)
}

pub struct Trained {
    pub model: RpModel,
    pub store: ParamStore,
    pub summary: TrainSummary,
    pub data: TrainData,
}

/// Builds vocabularies and a freshly initialised model.
pub fn init_model(model_cfg: &ModelConfig, seed: u64, vocab: Vocabularies) -> Result<(RpModel, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = substream(seed, Stream::Init);
    let model = RpModel::new(&mut store, model_cfg, vocab, TagSet::default(), &mut rng)?;
    Ok((model, store))
}

/// Splits the relation corpus, prepares sequences and trains. The returned
/// store holds the best-dev parameters. Words found in `vectors` start from
/// those embeddings.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    corpora: &Corpora,
    features: &mut dyn FeatureSource,
    vectors: Option<&HashMap<String, Vec<Real>>>,
    out: Option<&RunOutput>,
) -> Result<Trained> {
    if corpora.ner_train.is_empty() {
        return Err(Error::Config("tagging corpus is empty".into()));
    }
    let vocab = build_vocab(corpora);
    if let Some(out) = out {
        std::fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
        vocab.save(&out.dir.join("vocab.json"))?;
    }
    let (model, mut store) = init_model(model_cfg, train_cfg.seed, vocab)?;
    if let Some(v) = vectors {
        model.tagger.embedder.init_from_vectors(&mut store, v)?;
    }
    let (trc_train, _, trc_test) = split_trc(&corpora.trc, train_cfg.seed);
    let data = TrainData {
        trc_train: prepare_trc(&model, &trc_train, features)?,
        trc_test: prepare_trc(&model, &trc_test, features)?,
        ner_train: prepare_ner(&model, &corpora.ner_train, features)?,
        ner_dev: prepare_ner(&model, &corpora.ner_dev, features)?,
    };
    let summary = run_multitask(train_cfg, &model, &mut store, &data, out)?;
    let store = summary.best.clone();
    Ok(Trained {
        model,
        store,
        summary,
        data,
    })
}
