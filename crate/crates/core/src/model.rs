//! The full model: encoder, relation head over `[CLS]`, gate, and tagger.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::data::{FeatureGrid, TagSet, Vocabularies};
use crate::encoder::{build_sequence, pool_word_outputs, AttentionTensor, Encoder, EncoderConfig, MultimodalSequence};
use crate::error::Result;
use crate::gate::{apply_gate, build_mask, GateKind};
use crate::ner::{NerConfig, Tagger};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub tagger: NerConfig,
}

/// Where the relevance score of the gated pass comes from.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum RelevanceOverride {
    /// Computed by the relation head and gate.
    #[default]
    Model,
    /// A constant, with no relation pass at all. `Fixed(1.0)` is the
    /// ungated ablation.
    Fixed(Real),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateOptions {
    pub kind: GateKind,
    pub tau: Real,
    /// Stops the tagging loss from reaching the first pass through `r`.
    pub detach: bool,
    pub relevance: RelevanceOverride,
}

impl Default for GateOptions {
    fn default() -> Self {
        GateOptions {
            kind: GateKind::Soft,
            tau: 1.0,
            detach: false,
            relevance: RelevanceOverride::Model,
        }
    }
}

pub struct NerForward {
    pub emissions: Var,
    /// Relevance score used for the mask, shape `[1]`.
    pub r: Var,
    /// Relation logits of the first pass, when it ran.
    pub logits: Option<Var>,
    /// Attention of the gated pass.
    pub attention: AttentionTensor,
    pub gated_input_rows: Var,
    pub visual_rows: Var,
}

#[derive(Debug, Clone)]
pub struct RpModel {
    pub config: ModelConfig,
    pub vocab: Vocabularies,
    pub encoder: Encoder,
    relation_w: ParamId,
    relation_b: ParamId,
    pub tagger: Tagger,
}

impl RpModel {
    /// Registers all parameters in `store`. The encoder vocabulary size is
    /// taken from `vocab`.
    pub fn new(
        store: &mut ParamStore,
        config: &ModelConfig,
        vocab: Vocabularies,
        tags: TagSet,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut config = config.clone();
        config.encoder.vocab_size = vocab.subwords.len();
        let encoder = Encoder::new(store, &config.encoder, rng)?;
        let d = config.encoder.d_model;
        let relation_w = store.add_normal(
            "relation.w",
            ParamGroup::RelationHead,
            &[d, 2],
            config.encoder.init_std,
            rng,
        );
        let relation_b = store.add_full("relation.b", ParamGroup::RelationHead, &[2], 0.0);
        let tagger = Tagger::new(
            store,
            &config.tagger,
            vocab.words.clone(),
            vocab.chars.clone(),
            tags,
            d,
            rng,
        )?;
        Ok(RpModel {
            config,
            vocab,
            encoder,
            relation_w,
            relation_b,
            tagger,
        })
    }

    pub fn relation_params(&self) -> [ParamId; 2] {
        [self.relation_w, self.relation_b]
    }

    pub fn sequence<S: AsRef<str>>(&self, words: &[S], grid: &FeatureGrid) -> Result<MultimodalSequence> {
        let v = &self.vocab.subwords;
        let tok = v.tokenize(words);
        build_sequence(&tok, grid, v.cls_id(), v.sep_id(), self.config.encoder.max_len)
    }

    /// Ungated pass; returns the two relation logits.
    pub fn relation_logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        seq: &MultimodalSequence,
        train: bool,
        rng: &mut Rng,
    ) -> Result<Var> {
        let out = self.encoder.encode(g, store, seq, None, train, rng)?;
        let cls = g.row(out.hidden, 0)?;
        let (w, b) = (g.param(store, self.relation_w), g.param(store, self.relation_b));
        let z = g.matmul(cls, w)?;
        let z = g.add(z, b)?;
        g.reshape(z, &[2])
    }

    /// Cross entropy of the relation head for one pair.
    pub fn trc_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        seq: &MultimodalSequence,
        label: usize,
        train: bool,
        rng: &mut Rng,
    ) -> Result<(Var, Var)> {
        let logits = self.relation_logits(g, store, seq, train, rng)?;
        Ok((cross_entropy(g, logits, label)?, logits))
    }

    /// Relevance pass, gate, mask, gated pass, pooling and emissions.
    #[allow(clippy::too_many_arguments)]
    pub fn ner_forward<S: AsRef<str>>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        words: &[S],
        seq: &MultimodalSequence,
        opts: &GateOptions,
        train: bool,
        dropout_rng: &mut Rng,
        gumbel_rng: &mut Rng,
    ) -> Result<NerForward> {
        let (r, logits) = match opts.relevance {
            RelevanceOverride::Fixed(v) => (g.input(Tensor::vector(vec![v])), None),
            RelevanceOverride::Model => {
                let logits = self.relation_logits(g, store, seq, train, dropout_rng)?;
                let gate = apply_gate(g, opts.kind, logits, opts.tau, train, gumbel_rng)?;
                let r = if opts.detach {
                    let v = g.value(gate.r).clone();
                    g.input(v)
                } else {
                    gate.r
                };
                (r, Some(logits))
            }
        };
        let mask = build_mask(g, r, seq.blocks(), self.config.encoder.d_model)?;
        let out = self.encoder.encode(g, store, seq, Some(mask), train, dropout_rng)?;
        let pooled = pool_word_outputs(g, out.hidden, &seq.word_spans)?;
        let emissions = self.tagger.forward_ner(g, store, words, pooled, train, dropout_rng)?;
        Ok(NerForward {
            emissions,
            r,
            logits,
            attention: out.attention,
            gated_input_rows: out.input_rows,
            visual_rows: out.visual_rows,
        })
    }
}

/// `logsumexp(z) - z[label]` for a logit vector.
pub fn cross_entropy(g: &mut Graph, logits: Var, label: usize) -> Result<Var> {
    let lse = g.log_sum_exp(logits, 0)?;
    let picked = g.gather(logits, &[label])?;
    g.sub(lse, picked)
}
