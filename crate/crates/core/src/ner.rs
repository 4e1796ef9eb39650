//! BiLSTM-CRF tagger: word and character embeddings, a stacked
//! bidirectional LSTM, emission scores, and a linear-chain CRF with virtual
//! start and stop states.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::data::{TagSet, Vocab};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{log_sum_exp, Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NerConfig {
    pub word_dim: usize,
    pub char_dim: usize,
    /// Per direction.
    pub char_hidden: usize,
    /// Per direction.
    pub hidden: usize,
    pub layers: usize,
    pub dropout: Real,
}

impl Default for NerConfig {
    fn default() -> Self {
        NerConfig::desk()
    }
}

impl NerConfig {
    pub fn desk() -> Self {
        NerConfig {
            word_dim: 32,
            char_dim: 16,
            char_hidden: 16,
            hidden: 32,
            layers: 2,
            dropout: 0.2,
        }
    }

    /// Full-size tagger: 300-d word vectors, 25-d chars, 1024 per direction.
    pub fn full_scale() -> Self {
        NerConfig {
            word_dim: 300,
            char_dim: 25,
            char_hidden: 25,
            hidden: 1024,
            layers: 2,
            dropout: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.word_dim == 0 || self.char_dim == 0 || self.char_hidden == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(Error::Config("tagger dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("tagger dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// One LSTM direction. Gate order in the packed weights: input, forget,
/// cell, output.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub hidden: usize,
    w_x: ParamId,
    w_h: ParamId,
    b: ParamId,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (hidden as Real).sqrt();
        let t = ParamGroup::Tagger;
        let w_x = store.add_uniform(format!("{name}.w_x"), t, &[input, 4 * hidden], bound, rng);
        let w_h = store.add_uniform(format!("{name}.w_h"), t, &[hidden, 4 * hidden], bound, rng);
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        let b = store.add(format!("{name}.b"), t, Tensor::vector(bias));
        LstmCell { hidden, w_x, w_h, b }
    }

    /// Input projection for all steps at once: `[rows, 4h]`.
    fn project(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.w_x), g.param(store, self.b));
        let z = g.matmul(x, w)?;
        g.add(z, b)
    }

    fn step(&self, g: &mut Graph, store: &ParamStore, zx: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hd = self.hidden;
        let w_h = g.param(store, self.w_h);
        let zh = g.matmul(h, w_h)?;
        let z = g.add(zx, zh)?;
        let i = g.slice(z, 1, 0, hd)?;
        let i = g.sigmoid(i);
        let f = g.slice(z, 1, hd, 2 * hd)?;
        let f = g.sigmoid(f);
        let cand = g.slice(z, 1, 2 * hd, 3 * hd)?;
        let cand = g.tanh(cand);
        let o = g.slice(z, 1, 3 * hd, 4 * hd)?;
        let o = g.sigmoid(o);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok((h, c))
    }

    /// Runs over the rows of `x` (`[T, in]`) in order, or reversed; returns
    /// `[T, h]` aligned with the input rows.
    pub fn run(&self, g: &mut Graph, store: &ParamStore, x: Var, reverse: bool) -> Result<Var> {
        let t_len = g.shape(x)[0];
        let zx = self.project(g, store, x)?;
        let mut h = g.input(Tensor::zeros(&[1, self.hidden]));
        let mut c = g.input(Tensor::zeros(&[1, self.hidden]));
        let mut outs = vec![h; t_len];
        let order: Vec<usize> = if reverse {
            (0..t_len).rev().collect()
        } else {
            (0..t_len).collect()
        };
        for t in order {
            let zt = g.row(zx, t)?;
            (h, c) = self.step(g, store, zt, h, c)?;
            outs[t] = h;
        }
        g.concat(&outs, 0)
    }

    /// Batched run over `steps` time steps of `[B, in]` inputs with a 0/1
    /// mask per row and step; masked steps carry the state unchanged.
    /// Returns the final hidden state, `[B, h]`.
    fn run_masked(&self, g: &mut Graph, store: &ParamStore, zx: Var, batch: usize, masks: &[Vec<Real>]) -> Result<Var> {
        let hd = self.hidden;
        let mut h = g.input(Tensor::zeros(&[batch, hd]));
        let mut c = g.input(Tensor::zeros(&[batch, hd]));
        for (t, mask) in masks.iter().enumerate() {
            let zt = g.slice(zx, 0, t * batch, (t + 1) * batch)?;
            let (h_new, c_new) = self.step(g, store, zt, h, c)?;
            if mask.iter().all(|&m| m == 1.0) {
                (h, c) = (h_new, c_new);
                continue;
            }
            let expand = |v: &dyn Fn(Real) -> Real| -> Tensor {
                let data = mask.iter().flat_map(|&m| std::iter::repeat_n(v(m), hd)).collect();
                Tensor::matrix(batch, hd, data).unwrap()
            };
            let on = g.input(expand(&|m| m));
            let off = g.input(expand(&|m| 1.0 - m));
            let blend = |g: &mut Graph, new: Var, old: Var| -> Result<Var> {
                let a = g.mul(on, new)?;
                let b = g.mul(off, old)?;
                g.add(a, b)
            };
            h = blend(g, h_new, h)?;
            c = blend(g, c_new, c)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct BiLstm {
    pub layers: Vec<(LstmCell, LstmCell)>,
    pub dropout: Real,
}

impl BiLstm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        layers: usize,
        dropout: Real,
        rng: &mut Rng,
    ) -> Self {
        let layers = (0..layers)
            .map(|l| {
                let inp = if l == 0 { input } else { 2 * hidden };
                (
                    LstmCell::new(store, &format!("{name}.l{l}.fwd"), inp, hidden, rng),
                    LstmCell::new(store, &format!("{name}.l{l}.bwd"), inp, hidden, rng),
                )
            })
            .collect();
        BiLstm { layers, dropout }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.layers[0].0.hidden
    }

    /// `[T, in]` to `[T, 2h]`, with dropout on every layer's input.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, train: bool, rng: &mut Rng) -> Result<Var> {
        let mut x = x;
        for (fwd, bwd) in &self.layers {
            x = g.dropout(x, self.dropout, train, rng)?;
            let f = fwd.run(g, store, x, false)?;
            let b = bwd.run(g, store, x, true)?;
            x = g.concat(&[f, b], 1)?;
        }
        Ok(x)
    }
}

/// `e_k = [word vector; char feature]`.
#[derive(Debug, Clone)]
pub struct WordEmbedder {
    pub words: Vocab,
    pub chars: Vocab,
    word_table: ParamId,
    char_table: ParamId,
    char_fwd: LstmCell,
    char_bwd: LstmCell,
}

impl WordEmbedder {
    pub fn new(store: &mut ParamStore, cfg: &NerConfig, words: Vocab, chars: Vocab, rng: &mut Rng) -> Self {
        let t = ParamGroup::Tagger;
        let word_table = store.add_normal("tagger.word_emb", t, &[words.len(), cfg.word_dim], 0.1, rng);
        let char_table = store.add_normal("tagger.char_emb", t, &[chars.len(), cfg.char_dim], 0.1, rng);
        let char_fwd = LstmCell::new(store, "tagger.char.fwd", cfg.char_dim, cfg.char_hidden, rng);
        let char_bwd = LstmCell::new(store, "tagger.char.bwd", cfg.char_dim, cfg.char_hidden, rng);
        WordEmbedder {
            words,
            chars,
            word_table,
            char_table,
            char_fwd,
            char_bwd,
        }
    }

    pub fn output_dim(&self, store: &ParamStore) -> usize {
        store.value(self.word_table).cols() + 2 * self.char_fwd.hidden
    }

    /// Overwrites rows of the word table for words found in `vectors`.
    /// Returns how many rows were set.
    pub fn init_from_vectors(&self, store: &mut ParamStore, vectors: &HashMap<String, Vec<Real>>) -> Result<usize> {
        let dim = store.value(self.word_table).cols();
        let mut hits = 0;
        for id in 2..self.words.len() {
            if let Some(v) = vectors.get(self.words.item(id)) {
                if v.len() != dim {
                    return Err(Error::Config(format!(
                        "word vectors have {} dims, tagger expects {dim}",
                        v.len()
                    )));
                }
                store.value_mut(self.word_table).data_mut()[id * dim..(id + 1) * dim].copy_from_slice(v);
                hits += 1;
            }
        }
        Ok(hits)
    }

    /// `[n, word_dim + 2 * char_hidden]`.
    pub fn forward<S: AsRef<str>>(&self, g: &mut Graph, store: &ParamStore, words: &[S]) -> Result<Var> {
        let n = words.len();
        let ids: Vec<usize> = words.iter().map(|w| self.words.id(w.as_ref())).collect();
        let table = g.param(store, self.word_table);
        let wv = g.embedding(table, &ids)?;

        let chars: Vec<Vec<usize>> = words
            .iter()
            .map(|w| w.as_ref().chars().map(|c| self.chars.id(&c.to_string())).collect())
            .collect();
        let steps = chars.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let ctable = g.param(store, self.char_table);
        let mut finals = Vec::with_capacity(2);
        for (cell, reverse) in [(&self.char_fwd, false), (&self.char_bwd, true)] {
            // step-major ids, padded with [PAD] (masked out)
            let mut flat = Vec::with_capacity(steps * n);
            let mut masks = Vec::with_capacity(steps);
            for t in 0..steps {
                let mut mask = Vec::with_capacity(n);
                for cs in &chars {
                    let valid = t < cs.len();
                    let pos = if reverse && valid { cs.len() - 1 - t } else { t };
                    flat.push(if valid { cs[pos] } else { 0 });
                    mask.push(valid as u8 as Real);
                }
                masks.push(mask);
            }
            let emb = g.embedding(ctable, &flat)?;
            let zx = cell.project(g, store, emb)?;
            finals.push(cell.run_masked(g, store, zx, n, &masks)?);
        }
        g.concat(&[wv, finals[0], finals[1]], 1)
    }
}

/// Emission projection plus transitions over `K + 2` states, where `K` is
/// the virtual start state and `K + 1` the virtual stop state.
#[derive(Debug, Clone)]
pub struct CrfModel {
    pub num_tags: usize,
    emit_w: ParamId,
    emit_b: ParamId,
    pub transitions: ParamId,
}

impl CrfModel {
    pub fn new(store: &mut ParamStore, input: usize, num_tags: usize, rng: &mut Rng) -> Self {
        let t = ParamGroup::Tagger;
        let bound = 1.0 / (input as Real).sqrt();
        CrfModel {
            num_tags,
            emit_w: store.add_uniform("tagger.emit.w", t, &[input, num_tags], bound, rng),
            emit_b: store.add_full("tagger.emit.b", t, &[num_tags], 0.0),
            transitions: store.add_normal("tagger.crf.transitions", t, &[num_tags + 2, num_tags + 2], 0.01, rng),
        }
    }

    pub fn emissions(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.emit_w), g.param(store, self.emit_b));
        let e = g.matmul(h, w)?;
        g.add(e, b)
    }
}

/// `-log p(gold | x)` with the partition function from the log-space
/// forward recursion.
pub fn crf_nll(g: &mut Graph, emissions: Var, transitions: Var, gold: &[usize]) -> Result<Var> {
    let es = g.shape(emissions).to_vec();
    if es.len() != 2 || es[0] == 0 {
        return Err(Error::invalid(
            "crf_nll",
            format!("emissions must be [n, K], got {es:?}"),
        ));
    }
    let (n, k) = (es[0], es[1]);
    if g.shape(transitions) != [k + 2, k + 2] {
        return Err(Error::shape("crf_nll", g.shape(transitions), &[k + 2, k + 2]));
    }
    if gold.len() != n {
        return Err(Error::invalid(
            "crf_nll",
            format!("gold has {} tags for {n} positions", gold.len()),
        ));
    }
    if let Some(&bad) = gold.iter().find(|&&y| y >= k) {
        return Err(Error::invalid(
            "crf_nll",
            format!("gold tag {bad} out of range for {k} tags"),
        ));
    }
    let (start, stop) = (k, k + 1);
    let kk = k + 2;

    let emit_idx: Vec<usize> = gold.iter().enumerate().map(|(t, &y)| t * k + y).collect();
    let mut trans_idx = vec![start * kk + gold[0]];
    trans_idx.extend(gold.windows(2).map(|w| w[0] * kk + w[1]));
    trans_idx.push(gold[n - 1] * kk + stop);
    let ge = g.gather(emissions, &emit_idx)?;
    let gt = g.gather(transitions, &trans_idx)?;
    let ge = g.sum(ge);
    let gt = g.sum(gt);
    let gold_score = g.add(ge, gt)?;

    let inner = g.slice(transitions, 0, 0, k)?;
    let inner = g.slice(inner, 1, 0, k)?;
    // row y holds T[., y] so that adding alpha as a row bias lines up y'
    let into = g.transpose(inner)?;
    let from_start = g.slice(transitions, 0, start, start + 1)?;
    let from_start = g.slice(from_start, 1, 0, k)?;
    let from_start = g.reshape(from_start, &[k])?;
    let to_stop = g.slice(transitions, 1, stop, stop + 1)?;
    let to_stop = g.slice(to_stop, 0, 0, k)?;
    let to_stop = g.reshape(to_stop, &[k])?;

    let e0 = g.row(emissions, 0)?;
    let e0 = g.reshape(e0, &[k])?;
    let mut alpha = g.add(from_start, e0)?;
    for t in 1..n {
        let scores = g.add(into, alpha)?;
        let prev = g.log_sum_exp(scores, 1)?;
        let et = g.row(emissions, t)?;
        let et = g.reshape(et, &[k])?;
        alpha = g.add(prev, et)?;
    }
    let last = g.add(alpha, to_stop)?;
    let log_z = g.log_sum_exp(last, 0)?;
    g.sub(log_z, gold_score)
}

/// Score of one tag path under the CRF.
pub fn sequence_score(emissions: &Tensor, transitions: &Tensor, tags: &[usize]) -> Real {
    let k = emissions.cols();
    let (start, stop) = (k, k + 1);
    let mut s = transitions.at(start, tags[0]) + transitions.at(tags[tags.len() - 1], stop);
    for (t, &y) in tags.iter().enumerate() {
        s += emissions.at(t, y);
        if t > 0 {
            s += transitions.at(tags[t - 1], y);
        }
    }
    s
}

/// Log partition function by the forward recursion on plain tensors.
pub fn log_partition(emissions: &Tensor, transitions: &Tensor) -> Real {
    let (n, k) = (emissions.rows(), emissions.cols());
    let mut alpha: Vec<Real> = (0..k).map(|y| transitions.at(k, y) + emissions.at(0, y)).collect();
    for t in 1..n {
        alpha = (0..k)
            .map(|y| log_sum_exp((0..k).map(|p| alpha[p] + transitions.at(p, y))) + emissions.at(t, y))
            .collect();
    }
    log_sum_exp((0..k).map(|y| alpha[y] + transitions.at(y, k + 1)))
}

/// Highest-scoring path and its score. Ties go to the lowest tag id.
pub fn viterbi_decode(emissions: &Tensor, transitions: &Tensor) -> (Vec<usize>, Real) {
    let (n, k) = (emissions.rows(), emissions.cols());
    let mut score: Vec<Real> = (0..k).map(|y| transitions.at(k, y) + emissions.at(0, y)).collect();
    let mut back = vec![vec![0usize; k]; n];
    for t in 1..n {
        let mut next = vec![0.0; k];
        for y in 0..k {
            let mut best = (Real::NEG_INFINITY, 0);
            for p in 0..k {
                let s = score[p] + transitions.at(p, y);
                if s > best.0 {
                    best = (s, p);
                }
            }
            next[y] = best.0 + emissions.at(t, y);
            back[t][y] = best.1;
        }
        score = next;
    }
    let mut best = (Real::NEG_INFINITY, 0);
    for y in 0..k {
        let s = score[y] + transitions.at(y, k + 1);
        if s > best.0 {
            best = (s, y);
        }
    }
    let mut path = vec![best.1; n];
    for t in (1..n).rev() {
        path[t - 1] = back[t][path[t]];
    }
    (path, best.0)
}

/// Embedder, biLSTM and CRF.
#[derive(Debug, Clone)]
pub struct Tagger {
    pub embedder: WordEmbedder,
    pub lstm: BiLstm,
    pub crf: CrfModel,
    pub tags: TagSet,
    /// Width of the per-word encoder vectors concatenated to `e_k`.
    pub context_dim: usize,
}

impl Tagger {
    pub fn new(
        store: &mut ParamStore,
        cfg: &NerConfig,
        words: Vocab,
        chars: Vocab,
        tags: TagSet,
        context_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let embedder = WordEmbedder::new(store, cfg, words, chars, rng);
        let input = embedder.output_dim(store) + context_dim;
        let lstm = BiLstm::new(store, "tagger.lstm", input, cfg.hidden, cfg.layers, cfg.dropout, rng);
        let crf = CrfModel::new(store, lstm.output_dim(), tags.len(), rng);
        Ok(Tagger {
            embedder,
            lstm,
            crf,
            tags,
            context_dim,
        })
    }

    /// Emission scores `[n, K]` from words and per-word encoder vectors
    /// `[n, context_dim]`.
    pub fn forward_ner<S: AsRef<str>>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        words: &[S],
        context: Var,
        train: bool,
        rng: &mut Rng,
    ) -> Result<Var> {
        if words.is_empty() {
            return Err(Error::invalid("forward_ner", "empty sentence"));
        }
        if g.shape(context) != [words.len(), self.context_dim] {
            return Err(Error::shape(
                "forward_ner",
                g.shape(context),
                &[words.len(), self.context_dim],
            ));
        }
        let e = self.embedder.forward(g, store, words)?;
        let x = g.concat(&[e, context], 1)?;
        let h = self.lstm.forward(g, store, x, train, rng)?;
        let h = g.dropout(h, self.lstm.dropout, train, rng)?;
        self.crf.emissions(g, store, h)
    }

    pub fn nll(&self, g: &mut Graph, store: &ParamStore, emissions: Var, gold: &[usize]) -> Result<Var> {
        let t = g.param(store, self.crf.transitions);
        crf_nll(g, emissions, t, gold)
    }

    pub fn decode(&self, g: &Graph, store: &ParamStore, emissions: Var) -> Vec<usize> {
        viterbi_decode(g.value(emissions), store.value(self.crf.transitions)).0
    }
}

/// Entity-level true positive, false positive and false negative counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl EntityCounts {
    pub fn add(&mut self, other: EntityCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn precision(&self) -> Real {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Real {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> Real {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: usize, b: usize) -> Real {
    if b == 0 {
        0.0
    } else {
        a as Real / b as Real
    }
}

/// Counts for one sentence: exact span and type match.
pub fn entity_counts(tags: &TagSet, pred: &[usize], gold: &[usize]) -> EntityCounts {
    let p = tags.entities(pred);
    let g = tags.entities(gold);
    let tp = p.iter().filter(|e| g.contains(e)).count();
    EntityCounts {
        tp,
        fp: p.len() - tp,
        fn_: g.len() - tp,
    }
}

/// Micro-averaged `(precision, recall, F1)` over a corpus.
pub fn f1_score(tags: &TagSet, pred: &[Vec<usize>], gold: &[Vec<usize>]) -> (Real, Real, Real) {
    let mut c = EntityCounts::default();
    for (p, g) in pred.iter().zip(gold) {
        c.add(entity_counts(tags, p, g));
    }
    (c.precision(), c.recall(), c.f1())
}
