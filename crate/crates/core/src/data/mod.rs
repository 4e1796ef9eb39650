//! Corpus loaders, feature grids, vocabularies and the synthetic generator.

pub mod conll;
pub mod features;
pub mod synth;
pub mod tags;
pub mod trc;
pub mod vocab;

pub use conll::{load_manifest, load_ner_corpus, Manifest, NerExample};
pub use features::{
    load_feature_grid, write_feature_grid, FeatureGrid, FeatureSource, FileFeatureSource, MemoryFeatureSource,
};
pub use synth::{synth_generate, ProbeReport, SynthConfig, SynthData};
pub use tags::{Scheme, Tag, TagSet};
pub use trc::{load_trc_corpus, RelationType, TrcExample};
pub use vocab::{SubwordTokenization, SubwordVocab, Vocab, Vocabularies};
