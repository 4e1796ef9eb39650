//! Multimodal transformer encoder.
//!
//! The input is `[CLS] w1..wn [SEP] v1..vm`. Text positions get ordinal
//! position ids and segment A; every visual token gets segment B and the same
//! position id (the last one in the table). Visual tokens are projected
//! block features with no bias, so a zero mask removes them completely and
//! leaves only their segment and position embeddings.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::data::{FeatureGrid, SubwordTokenization};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

pub const SEGMENT_TEXT: usize = 0;
pub const SEGMENT_VISUAL: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Channels of the visual feature grid.
    pub d_v: usize,
    pub dropout: Real,
    /// Subword vocabulary size; filled in from the built vocabulary.
    pub vocab_size: usize,
    pub max_len: usize,
    pub init_std: Real,
    pub layer_norm_eps: Real,
    /// Residual `f + relu(f A + c)` on loaded features before projection.
    pub visual_adapter: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::desk()
    }
}

impl EncoderConfig {
    /// Small enough to train on a laptop CPU in minutes.
    pub fn desk() -> Self {
        EncoderConfig {
            layers: 2,
            heads: 2,
            d_model: 32,
            d_ff: 64,
            d_v: 16,
            dropout: 0.1,
            vocab_size: 0,
            max_len: 128,
            init_std: 0.02,
            layer_norm_eps: 1e-12,
            visual_adapter: false,
        }
    }

    /// BERT-Base dimensions over 2048-channel backbone features.
    pub fn base() -> Self {
        EncoderConfig {
            layers: 12,
            heads: 12,
            d_model: 768,
            d_ff: 3072,
            d_v: 2048,
            max_len: 512,
            ..EncoderConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.d_ff == 0 || self.d_v == 0 {
            return bad("encoder dimensions must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("encoder dropout {} outside [0, 1)", self.dropout));
        }
        if self.max_len < 4 {
            return bad("max_len must be at least 4".into());
        }
        Ok(())
    }
}

/// Input for one text-image pair, before embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSequence {
    /// `[CLS] w1..wn [SEP]`.
    pub token_ids: Vec<usize>,
    /// Raw block features, `[m, d_v]`.
    pub visual: Tensor,
    pub segment_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    /// Per original word, the `[start, end)` range of its subwords within
    /// `w1..wn` (add one for sequence positions).
    pub word_spans: Vec<(usize, usize)>,
}

impl MultimodalSequence {
    pub fn text_len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn subwords(&self) -> usize {
        self.token_ids.len() - 2
    }

    pub fn blocks(&self) -> usize {
        self.visual.rows()
    }

    pub fn len(&self) -> usize {
        self.text_len() + self.blocks()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Sequence positions of the visual tokens.
    pub fn visual_range(&self) -> std::ops::Range<usize> {
        self.text_len()..self.len()
    }
}

/// Lays out `[CLS] w.. [SEP] v..` with segment and position ids.
pub fn build_sequence(
    tok: &SubwordTokenization,
    grid: &FeatureGrid,
    cls_id: usize,
    sep_id: usize,
    max_len: usize,
) -> Result<MultimodalSequence> {
    let n = tok.ids.len();
    let m = grid.blocks();
    if n + 2 + m > max_len {
        return Err(Error::SequenceTooLong {
            len: n + 2 + m,
            max: max_len,
        });
    }
    let mut token_ids = Vec::with_capacity(n + 2);
    token_ids.push(cls_id);
    token_ids.extend_from_slice(&tok.ids);
    token_ids.push(sep_id);
    let mut segment_ids = vec![SEGMENT_TEXT; n + 2];
    segment_ids.extend(std::iter::repeat_n(SEGMENT_VISUAL, m));
    let mut position_ids: Vec<usize> = (0..n + 2).collect();
    position_ids.extend(std::iter::repeat_n(max_len - 1, m));
    Ok(MultimodalSequence {
        token_ids,
        visual: grid.to_tensor(),
        segment_ids,
        position_ids,
        word_spans: tok.word_spans.clone(),
    })
}

/// Attention probabilities of every layer and head, `[L, H, S, S]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    pub layers: usize,
    pub heads: usize,
    pub len: usize,
    pub values: Vec<Real>,
}

impl AttentionTensor {
    pub fn new(layers: usize, heads: usize, len: usize, values: Vec<Real>) -> Result<Self> {
        if values.len() != layers * heads * len * len {
            return Err(Error::invalid(
                "attention_tensor",
                format!(
                    "{layers}x{heads}x{len}x{len} needs {} values, got {}",
                    layers * heads * len * len,
                    values.len()
                ),
            ));
        }
        Ok(AttentionTensor {
            layers,
            heads,
            len,
            values,
        })
    }

    /// Every row uniform over all keys.
    pub fn uniform(layers: usize, heads: usize, len: usize) -> Self {
        let v = 1.0 / len as Real;
        AttentionTensor::new(layers, heads, len, vec![v; layers * heads * len * len]).unwrap()
    }

    pub fn get(&self, layer: usize, head: usize, q: usize, k: usize) -> Real {
        self.values[((layer * self.heads + head) * self.len + q) * self.len + k]
    }

    pub fn map(&self, layer: usize, head: usize) -> &[Real] {
        let s = self.len * self.len;
        let start = (layer * self.heads + head) * s;
        &self.values[start..start + s]
    }
}

#[derive(Debug, Clone)]
struct LayerParams {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

/// Bias-free `W^v` plus the optional adapter.
#[derive(Debug, Clone)]
pub struct VisualProjection {
    pub weight: ParamId,
    pub adapter: Option<(ParamId, ParamId)>,
}

impl VisualProjection {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        let std = cfg.init_std;
        let weight = store.add_normal("visual.proj", ParamGroup::Visual, &[cfg.d_v, cfg.d_model], std, rng);
        let adapter = cfg.visual_adapter.then(|| {
            (
                store.add_normal("visual.adapter.w", ParamGroup::Visual, &[cfg.d_v, cfg.d_v], std, rng),
                store.add_full("visual.adapter.b", ParamGroup::Visual, &[cfg.d_v], 0.0),
            )
        });
        VisualProjection { weight, adapter }
    }

    /// `[m, d_v]` features to `[m, d_model]` embeddings.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Result<Var> {
        let mut f = features;
        if let Some((w, b)) = self.adapter {
            let (w, b) = (g.param(store, w), g.param(store, b));
            let h = g.matmul(f, w)?;
            let h = g.add(h, b)?;
            let h = g.relu(h);
            f = g.add(f, h)?;
        }
        let w = g.param(store, self.weight);
        g.matmul(f, w)
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    seg_emb: ParamId,
    emb_ln_g: ParamId,
    emb_ln_b: ParamId,
    pub visual: VisualProjection,
    layers: Vec<LayerParams>,
}

pub struct EncoderOutput {
    /// Final-layer states, `[S, d_model]`.
    pub hidden: Var,
    /// Summed token/visual, segment and position embeddings before the
    /// embedding layer norm.
    pub input_rows: Var,
    /// `R ⊙ V` (or `V` when unmasked).
    pub visual_rows: Var,
    pub attention: AttentionTensor,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        if cfg.vocab_size == 0 {
            return Err(Error::Config("encoder vocab_size is zero".into()));
        }
        let (d, std) = (cfg.d_model, cfg.init_std);
        let enc = ParamGroup::Encoder;
        let tok_emb = store.add_normal("encoder.tok_emb", enc, &[cfg.vocab_size, d], std, rng);
        let pos_emb = store.add_normal("encoder.pos_emb", enc, &[cfg.max_len, d], std, rng);
        let seg_emb = store.add_normal("encoder.seg_emb", enc, &[2, d], std, rng);
        let emb_ln_g = store.add_full("encoder.emb_ln.g", enc, &[d], 1.0);
        let emb_ln_b = store.add_full("encoder.emb_ln.b", enc, &[d], 0.0);
        let visual = VisualProjection::new(store, cfg, rng);
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let mut w = |name: &str, rows: usize, cols: usize| {
                store.add_normal(format!("encoder.layer{l}.{name}"), enc, &[rows, cols], std, rng)
            };
            let (wq, wk, wv, wo) = (w("wq", d, d), w("wk", d, d), w("wv", d, d), w("wo", d, d));
            let (w1, w2) = (w("w1", d, cfg.d_ff), w("w2", cfg.d_ff, d));
            let mut full =
                |name: &str, n: usize, v: Real| store.add_full(format!("encoder.layer{l}.{name}"), enc, &[n], v);
            layers.push(LayerParams {
                wq,
                bq: full("bq", d, 0.0),
                wk,
                bk: full("bk", d, 0.0),
                wv,
                bv: full("bv", d, 0.0),
                wo,
                bo: full("bo", d, 0.0),
                ln1_g: full("ln1.g", d, 1.0),
                ln1_b: full("ln1.b", d, 0.0),
                w1,
                b1: full("b1", cfg.d_ff, 0.0),
                w2,
                b2: full("b2", d, 0.0),
                ln2_g: full("ln2.g", d, 1.0),
                ln2_b: full("ln2.b", d, 0.0),
            });
        }
        Ok(Encoder {
            config: cfg.clone(),
            tok_emb,
            pos_emb,
            seg_emb,
            emb_ln_g,
            emb_ln_b,
            visual,
            layers,
        })
    }

    /// Ids of the query/key projections, so tests can force uniform
    /// attention by zeroing them.
    pub fn query_key_params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.wq, l.bq, l.wk, l.bk]).collect()
    }

    fn linear(g: &mut Graph, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let (w, b) = (g.param(store, w), g.param(store, b));
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }

    /// Runs the encoder. `mask`, when given, must be `[m, d_model]` and
    /// multiplies the projected visual rows.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        seq: &MultimodalSequence,
        mask: Option<Var>,
        train: bool,
        rng: &mut Rng,
    ) -> Result<EncoderOutput> {
        let cfg = &self.config;
        let (d, m) = (cfg.d_model, seq.blocks());
        if seq.visual.cols() != cfg.d_v {
            return Err(Error::shape("encode", seq.visual.shape(), &[m, cfg.d_v]));
        }
        if seq.len() > cfg.max_len {
            return Err(Error::SequenceTooLong {
                len: seq.len(),
                max: cfg.max_len,
            });
        }
        if let Some(r) = mask {
            if g.shape(r) != [m, d] {
                return Err(Error::shape("encode mask", g.shape(r), &[m, d]));
            }
        }

        let tok_table = g.param(store, self.tok_emb);
        let text = g.embedding(tok_table, &seq.token_ids)?;
        let feats = g.input(seq.visual.clone());
        let mut visual_rows = self.visual.forward(g, store, feats)?;
        if let Some(r) = mask {
            visual_rows = g.mul(r, visual_rows)?;
        }
        let content = g.concat(&[text, visual_rows], 0)?;
        let pos_table = g.param(store, self.pos_emb);
        let pos = g.embedding(pos_table, &seq.position_ids)?;
        let seg_table = g.param(store, self.seg_emb);
        let seg = g.embedding(seg_table, &seq.segment_ids)?;
        let x = g.add(content, pos)?;
        let input_rows = g.add(x, seg)?;
        let (lg, lb) = (g.param(store, self.emb_ln_g), g.param(store, self.emb_ln_b));
        let x = g.layer_norm(input_rows, lg, lb, cfg.layer_norm_eps)?;
        let mut x = g.dropout(x, cfg.dropout, train, rng)?;

        let s = seq.len();
        let dh = d / cfg.heads;
        let scale = 1.0 / (dh as Real).sqrt();
        let mut att = Vec::with_capacity(cfg.layers * cfg.heads * s * s);
        for lp in &self.layers {
            let q = Self::linear(g, store, x, lp.wq, lp.bq)?;
            let k = Self::linear(g, store, x, lp.wk, lp.bk)?;
            let v = Self::linear(g, store, x, lp.wv, lp.bv)?;
            let mut heads = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let (lo, hi) = (h * dh, (h + 1) * dh);
                let qh = g.slice(q, 1, lo, hi)?;
                let kh = g.slice(k, 1, lo, hi)?;
                let vh = g.slice(v, 1, lo, hi)?;
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let scores = g.scale(scores, scale);
                let probs = g.softmax(scores, 1)?;
                att.extend_from_slice(g.value(probs).data());
                heads.push(g.matmul(probs, vh)?);
            }
            let ctx = g.concat(&heads, 1)?;
            let out = Self::linear(g, store, ctx, lp.wo, lp.bo)?;
            let out = g.dropout(out, cfg.dropout, train, rng)?;
            let res = g.add(x, out)?;
            let (g1, b1) = (g.param(store, lp.ln1_g), g.param(store, lp.ln1_b));
            let x1 = g.layer_norm(res, g1, b1, cfg.layer_norm_eps)?;

            let ff = Self::linear(g, store, x1, lp.w1, lp.b1)?;
            let ff = g.gelu(ff);
            let ff = Self::linear(g, store, ff, lp.w2, lp.b2)?;
            let ff = g.dropout(ff, cfg.dropout, train, rng)?;
            let res = g.add(x1, ff)?;
            let (g2, b2) = (g.param(store, lp.ln2_g), g.param(store, lp.ln2_b));
            x = g.layer_norm(res, g2, b2, cfg.layer_norm_eps)?;
        }
        Ok(EncoderOutput {
            hidden: x,
            input_rows,
            visual_rows,
            attention: AttentionTensor::new(cfg.layers, cfg.heads, s, att)?,
        })
    }
}

/// Mean of the subword states of each word, `[n_words, d_model]`. Spans
/// index subwords, so position `1 + i` in `hidden` holds subword `i`.
pub fn pool_word_outputs(g: &mut Graph, hidden: Var, spans: &[(usize, usize)]) -> Result<Var> {
    let s = g.shape(hidden)[0];
    if spans.is_empty() {
        return Err(Error::invalid("pool_word_outputs", "no words"));
    }
    let mut p = vec![0.0; spans.len() * s];
    for (w, &(start, end)) in spans.iter().enumerate() {
        if end <= start {
            return Err(Error::invalid("pool_word_outputs", format!("empty span for word {w}")));
        }
        if 1 + end > s {
            return Err(Error::invalid(
                "pool_word_outputs",
                format!("span {start}..{end} exceeds sequence"),
            ));
        }
        let k = 1.0 / (end - start) as Real;
        for i in start..end {
            p[w * s + 1 + i] = k;
        }
    }
    let p = g.input(Tensor::matrix(spans.len(), s, p)?);
    g.matmul(p, hidden)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};

    fn tiny(vocab: usize) -> EncoderConfig {
        EncoderConfig {
            d_model: 8,
            d_ff: 16,
            d_v: 4,
            vocab_size: vocab,
            max_len: 64,
            init_std: 0.5,
            ..EncoderConfig::desk()
        }
    }

    fn grid(h: usize, w: usize, c: usize, seed: u64) -> FeatureGrid {
        use rand::Rng as _;
        let mut rng = substream(seed, Stream::Synth);
        FeatureGrid::new(h, w, c, (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn tok(ids: Vec<usize>) -> SubwordTokenization {
        let spans = (0..ids.len()).map(|i| (i, i + 1)).collect();
        SubwordTokenization { ids, word_spans: spans }
    }

    #[test]
    fn layout_lengths() {
        let s = build_sequence(&tok(vec![5, 6, 7]), &grid(7, 7, 4, 1), 2, 3, 512).unwrap();
        assert_eq!(s.len(), 54);
        assert_eq!(s.token_ids[0], 2);
        assert_eq!(s.token_ids[4], 3);
        assert!(s.position_ids[5..].iter().all(|&p| p == 511));
        assert!(s.segment_ids[..5].iter().all(|&t| t == SEGMENT_TEXT));
        assert!(s.segment_ids[5..].iter().all(|&t| t == SEGMENT_VISUAL));
        let s = build_sequence(&tok(vec![5]), &grid(1, 1, 4, 1), 2, 3, 512).unwrap();
        assert_eq!(s.len(), 4);
        assert!(matches!(
            build_sequence(&tok(vec![5; 10]), &grid(7, 7, 4, 1), 2, 3, 60),
            Err(Error::SequenceTooLong { len: 61, max: 60 })
        ));
    }

    #[test]
    fn text_rows_ignore_the_grid() {
        let cfg = tiny(10);
        let mut store = ParamStore::new();
        let mut rng = substream(0, Stream::Init);
        let enc = Encoder::new(&mut store, &cfg, &mut rng).unwrap();
        let mut rows = |seed| {
            let s = build_sequence(&tok(vec![4, 5]), &grid(2, 2, 4, seed), 2, 3, 64).unwrap();
            let mut g = Graph::new();
            let out = enc.encode(&mut g, &store, &s, None, false, &mut rng).unwrap();
            g.value(out.input_rows).data()[..4 * 8].to_vec()
        };
        assert_eq!(rows(1), rows(2));
    }

    #[test]
    fn attention_is_row_stochastic() {
        let cfg = tiny(10);
        let mut store = ParamStore::new();
        let mut rng = substream(0, Stream::Init);
        let enc = Encoder::new(&mut store, &cfg, &mut rng).unwrap();
        let s = build_sequence(&tok(vec![4, 5, 6]), &grid(2, 3, 4, 1), 2, 3, 64).unwrap();
        let mut g = Graph::new();
        let out = enc.encode(&mut g, &store, &s, None, false, &mut rng).unwrap();
        let a = &out.attention;
        for l in 0..2 {
            for h in 0..2 {
                for q in 0..a.len {
                    let total: Real = (0..a.len).map(|k| a.get(l, h, q, k)).sum();
                    assert!((total - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn wrong_mask_shape_is_rejected() {
        let cfg = tiny(10);
        let mut store = ParamStore::new();
        let mut rng = substream(0, Stream::Init);
        let enc = Encoder::new(&mut store, &cfg, &mut rng).unwrap();
        let s = build_sequence(&tok(vec![4]), &grid(2, 2, 4, 1), 2, 3, 64).unwrap();
        let mut g = Graph::new();
        let bad = g.input(Tensor::zeros(&[3, 8]));
        assert!(matches!(
            enc.encode(&mut g, &store, &s, Some(bad), false, &mut rng),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn pooling_averages_spans() {
        let mut g = Graph::new();
        let h = g.input(Tensor::matrix(4, 2, vec![0.0, 0.0, 1.0, 2.0, 3.0, 6.0, 9.0, 9.0]).unwrap());
        let p = pool_word_outputs(&mut g, h, &[(0, 2), (2, 3)]).unwrap();
        assert_eq!(g.value(p).data(), &[2.0, 4.0, 9.0, 9.0]);
        assert!(pool_word_outputs(&mut g, h, &[(1, 1)]).is_err());
    }
}
