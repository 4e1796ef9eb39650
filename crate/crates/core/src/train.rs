//! Multitask training: each epoch runs relation classification over all
//! relation batches, then gated tagging over all tagging batches.

use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{checkpoint, Adam, AdamConfig, GradBuffer, Graph, ParamGroup, ParamStore};
use crate::data::{FeatureSource, NerExample, TrcExample};
use crate::encoder::{AttentionTensor, MultimodalSequence};
use crate::error::{Error, Result};
use crate::gate::{AnnealSchedule, GateKind};
use crate::model::{GateOptions, RelevanceOverride, RpModel};
use crate::ner::{entity_counts, EntityCounts};
use crate::rng::{substream, Rng, Stream};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Relation head and tagger.
    pub lr_main: Real,
    /// Encoder and visual path.
    pub lr_finetune: Real,
    pub gate: GateKind,
    pub tau_start: Real,
    pub tau_end: Real,
    pub detach_relation_score: bool,
    /// Skip relation training and use `R = 1` everywhere.
    pub ablate_rp: bool,
    pub seed: u64,
    /// Epochs without dev improvement before stopping; 0 disables.
    pub patience: usize,
    pub adam_beta1: Real,
    pub adam_beta2: Real,
    pub adam_eps: Real,
    /// Write `epoch_NNN.rpw` after every epoch.
    pub save_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    /// Learning rates sized for an encoder trained from scratch.
    pub fn desk() -> Self {
        TrainConfig {
            lr_main: 1e-2,
            lr_finetune: 5e-4,
            ..TrainConfig::full_scale()
        }
    }

    /// Rates and batch size for fine-tuning pretrained weights.
    pub fn full_scale() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            lr_main: 1e-4,
            lr_finetune: 1e-6,
            gate: GateKind::Soft,
            tau_start: 1.0,
            tau_end: 0.1,
            detach_relation_score: false,
            ablate_rp: false,
            seed: 1,
            patience: 5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            save_every_epoch: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_main > 0.0 && self.lr_finetune > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.tau_end > 0.0 && self.tau_start >= self.tau_end) {
            return Err(Error::Config(
                "temperatures must satisfy tau_start >= tau_end > 0".into(),
            ));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PreparedTrc {
    pub seq: MultimodalSequence,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct PreparedNer {
    pub words: Vec<String>,
    pub tags: Vec<usize>,
    pub seq: MultimodalSequence,
    pub relevant: Option<bool>,
}

pub fn prepare_trc(
    model: &RpModel,
    examples: &[TrcExample],
    features: &mut dyn FeatureSource,
) -> Result<Vec<PreparedTrc>> {
    examples
        .iter()
        .map(|ex| {
            Ok(PreparedTrc {
                seq: model.sequence(&ex.words(), features.grid(&ex.image_ref)?)?,
                label: ex.label,
            })
        })
        .collect()
}

pub fn prepare_ner(
    model: &RpModel,
    examples: &[NerExample],
    features: &mut dyn FeatureSource,
) -> Result<Vec<PreparedNer>> {
    examples
        .iter()
        .map(|ex| {
            Ok(PreparedNer {
                words: ex.words.clone(),
                tags: ex.tags.clone(),
                seq: model.sequence(&ex.words, features.grid(&ex.image_ref)?)?,
                relevant: ex.relevant,
            })
        })
        .collect()
}

/// Shuffled 8:2 train/test split, then 10% of train carved off as dev.
/// Returns `(train, dev, test)`.
pub fn split_trc<T: Clone>(examples: &[T], seed: u64) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut idx: Vec<usize> = (0..examples.len()).collect();
    idx.shuffle(&mut substream(seed, Stream::Split));
    let n_test = examples.len() / 5;
    let n_dev = (examples.len() - n_test) / 10;
    let pick = |r: &[usize]| r.iter().map(|&i| examples[i].clone()).collect::<Vec<_>>();
    (
        pick(&idx[n_test + n_dev..]),
        pick(&idx[n_test..n_test + n_dev]),
        pick(&idx[..n_test]),
    )
}

#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub trc_train: Vec<PreparedTrc>,
    pub trc_test: Vec<PreparedTrc>,
    pub ner_train: Vec<PreparedNer>,
    pub ner_dev: Vec<PreparedNer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub trc_batches: usize,
    pub mean_l1: Option<Real>,
    pub trc_accuracy: Option<Real>,
    pub trc_f1: Option<Real>,
    pub ner_batches: usize,
    pub mean_l2: Real,
    pub dev_f1: Real,
    pub tau: Real,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrcEval {
    pub accuracy: Real,
    pub precision: Real,
    pub recall: Real,
    pub f1: Real,
    pub count: usize,
}

pub fn evaluate_trc(model: &RpModel, store: &ParamStore, data: &[PreparedTrc]) -> Result<TrcEval> {
    let mut rng = substream(0, Stream::Dropout);
    let (mut tp, mut fp, mut fn_, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for ex in data {
        let mut g = Graph::new();
        let logits = model.relation_logits(&mut g, store, &ex.seq, false, &mut rng)?;
        let z = g.value(logits).data();
        let pred = (z[1] > z[0]) as usize;
        correct += (pred == ex.label) as usize;
        match (pred, ex.label) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => {}
        }
    }
    let c = EntityCounts { tp, fp, fn_ };
    Ok(TrcEval {
        accuracy: if data.is_empty() {
            0.0
        } else {
            correct as Real / data.len() as Real
        },
        precision: c.precision(),
        recall: c.recall(),
        f1: c.f1(),
        count: data.len(),
    })
}

/// Per-sentence tagging results.
#[derive(Debug, Clone)]
pub struct NerPrediction {
    pub tags: Vec<usize>,
    pub r: Real,
    /// Ground truth when known, else `r > 0.5`.
    pub relevant: bool,
    pub counts: EntityCounts,
    pub attention: AttentionTensor,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct NerEval {
    pub overall: EntityCounts,
    pub relevant: EntityCounts,
    pub irrelevant: EntityCounts,
}

impl NerEval {
    pub fn from_predictions(preds: &[NerPrediction]) -> Self {
        let mut e = NerEval::default();
        for p in preds {
            e.overall.add(p.counts);
            if p.relevant {
                e.relevant.add(p.counts);
            } else {
                e.irrelevant.add(p.counts);
            }
        }
        e
    }
}

/// Eval-mode tagging of every sentence.
pub fn predict_ner(
    model: &RpModel,
    store: &ParamStore,
    data: &[PreparedNer],
    opts: &GateOptions,
) -> Result<Vec<NerPrediction>> {
    let mut dropout_rng = substream(0, Stream::Dropout);
    let mut gumbel_rng = substream(0, Stream::Gumbel);
    data.iter()
        .map(|ex| {
            let mut g = Graph::new();
            let out = model.ner_forward(
                &mut g,
                store,
                &ex.words,
                &ex.seq,
                opts,
                false,
                &mut dropout_rng,
                &mut gumbel_rng,
            )?;
            let tags = model.tagger.decode(&g, store, out.emissions);
            let r = g.value(out.r).item();
            Ok(NerPrediction {
                counts: entity_counts(&model.tagger.tags, &tags, &ex.tags),
                tags,
                r,
                relevant: ex.relevant.unwrap_or(r > 0.5),
                attention: out.attention,
            })
        })
        .collect()
}

fn check_finite(loss: Real, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss(format!("{what} = {loss}")))
    }
}

/// Optimiser state, RNG streams and the Task#2 step counter.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub model: &'a RpModel,
    pub adam: Adam,
    pub schedule: AnnealSchedule,
    pub ner_steps: usize,
    shuffle_rng: Rng,
    dropout_rng: Rng,
    gumbel_rng: Rng,
}

impl<'a> Trainer<'a> {
    /// `ner_batches_per_epoch` sizes the annealing schedule.
    pub fn new(config: &TrainConfig, model: &'a RpModel, ner_batches_per_epoch: usize) -> Self {
        let schedule = AnnealSchedule {
            start: config.tau_start,
            end: config.tau_end,
            total_steps: config.epochs * ner_batches_per_epoch,
        };
        Trainer {
            config: config.clone(),
            model,
            adam: Adam::new(config.adam()),
            schedule,
            ner_steps: 0,
            shuffle_rng: substream(config.seed, Stream::Shuffle),
            dropout_rng: substream(config.seed, Stream::Dropout),
            gumbel_rng: substream(config.seed, Stream::Gumbel),
        }
    }

    pub fn tau(&self) -> Real {
        self.schedule.tau(self.ner_steps)
    }

    pub fn gate_options(&self) -> GateOptions {
        GateOptions {
            kind: self.config.gate,
            tau: self.tau(),
            detach: self.config.detach_relation_score,
            relevance: if self.config.ablate_rp {
                RelevanceOverride::Fixed(1.0)
            } else {
                RelevanceOverride::Model
            },
        }
    }

    fn batches(&mut self, n: usize) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut self.shuffle_rng);
        idx.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// One relation batch; returns the summed loss. Updates the relation
    /// head and the encoder/visual path.
    pub fn trc_batch(&mut self, store: &mut ParamStore, batch: &[&PreparedTrc]) -> Result<Real> {
        let mut grads = GradBuffer::new();
        let mut total = 0.0;
        for ex in batch {
            let mut g = Graph::new();
            let (loss, _) = self
                .model
                .trc_loss(&mut g, store, &ex.seq, ex.label, true, &mut self.dropout_rng)?;
            let l = g.value(loss).item();
            check_finite(l, "relation loss")?;
            total += l;
            g.backward(loss)?;
            grads.accumulate(&g);
        }
        let (main, fine) = (self.config.lr_main, self.config.lr_finetune);
        self.adam.step(store, &grads, |group| match group {
            ParamGroup::RelationHead => Some(main),
            ParamGroup::Encoder | ParamGroup::Visual => Some(fine),
            ParamGroup::Tagger => None,
        })?;
        Ok(total)
    }

    /// One tagging batch; returns the summed loss. Updates the tagger and
    /// the encoder/visual path, never the relation head.
    pub fn ner_batch(&mut self, store: &mut ParamStore, batch: &[&PreparedNer]) -> Result<Real> {
        let opts = self.gate_options();
        let mut grads = GradBuffer::new();
        let mut total = 0.0;
        for ex in batch {
            let mut g = Graph::new();
            let out = self.model.ner_forward(
                &mut g,
                store,
                &ex.words,
                &ex.seq,
                &opts,
                true,
                &mut self.dropout_rng,
                &mut self.gumbel_rng,
            )?;
            let loss = self.model.tagger.nll(&mut g, store, out.emissions, &ex.tags)?;
            let l = g.value(loss).item();
            check_finite(l, "tagging loss")?;
            total += l;
            g.backward(loss)?;
            grads.accumulate(&g);
        }
        let (main, fine) = (self.config.lr_main, self.config.lr_finetune);
        self.adam.step(store, &grads, |group| match group {
            ParamGroup::Tagger => Some(main),
            ParamGroup::Encoder | ParamGroup::Visual => Some(fine),
            ParamGroup::RelationHead => None,
        })?;
        self.ner_steps += 1;
        Ok(total)
    }

    /// Returns `(batches, mean loss per example)`.
    pub fn trc_epoch(&mut self, store: &mut ParamStore, data: &[PreparedTrc]) -> Result<(usize, Real)> {
        let batches = self.batches(data.len());
        let mut total = 0.0;
        for b in &batches {
            let batch: Vec<&PreparedTrc> = b.iter().map(|&i| &data[i]).collect();
            total += self.trc_batch(store, &batch)?;
        }
        Ok((batches.len(), total / data.len().max(1) as Real))
    }

    pub fn ner_epoch(&mut self, store: &mut ParamStore, data: &[PreparedNer]) -> Result<(usize, Real)> {
        let batches = self.batches(data.len());
        let mut total = 0.0;
        for b in &batches {
            let batch: Vec<&PreparedNer> = b.iter().map(|&i| &data[i]).collect();
            total += self.ner_batch(store, &batch)?;
        }
        Ok((batches.len(), total / data.len().max(1) as Real))
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub reports: Vec<EpochReport>,
    /// Epoch with the best dev F1 (0 = initial weights).
    pub best_epoch: usize,
    pub best_dev_f1: Real,
    /// Parameters at the best epoch.
    pub best: ParamStore,
}

/// Output locations for a training run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
}

impl RunOutput {
    pub fn checkpoints(&self) -> PathBuf {
        self.dir.join("checkpoints")
    }

    pub fn reports(&self) -> PathBuf {
        self.dir.join("reports.jsonl")
    }
}

/// Trains for `config.epochs` epochs with early stopping on dev F1. With
/// an output directory, writes `init.rpw`, per-epoch and `best_dev.rpw`
/// checkpoints and one JSON line per epoch.
pub fn run_multitask(
    config: &TrainConfig,
    model: &RpModel,
    store: &mut ParamStore,
    data: &TrainData,
    out: Option<&RunOutput>,
) -> Result<TrainSummary> {
    config.validate()?;
    if data.ner_train.is_empty() {
        return Err(Error::Config("tagging corpus is empty".into()));
    }
    if data.trc_train.is_empty() && !config.ablate_rp {
        return Err(Error::Config(
            "relation corpus is empty (required unless ablating relation propagation)".into(),
        ));
    }
    let mut report_file = None;
    if let Some(out) = out {
        let dir = out.checkpoints();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        checkpoint::save(store, &dir.join("init.rpw"))?;
        let path = out.reports();
        report_file = Some((File::create(&path).map_err(|e| Error::io(&path, e))?, path));
    }

    let per_epoch = data.ner_train.len().div_ceil(config.batch_size);
    let mut trainer = Trainer::new(config, model, per_epoch);
    let mut reports = Vec::new();
    let mut best = (0usize, Real::NEG_INFINITY, store.clone());
    let mut stale = 0;
    for epoch in 1..=config.epochs {
        let (trc_batches, mean_l1, trc_eval) = if config.ablate_rp {
            (0, None, None)
        } else {
            let (b, l1) = trainer.trc_epoch(store, &data.trc_train)?;
            let eval = (!data.trc_test.is_empty())
                .then(|| evaluate_trc(model, store, &data.trc_test))
                .transpose()?;
            (b, Some(l1), eval)
        };
        let (ner_batches, mean_l2) = trainer.ner_epoch(store, &data.ner_train)?;
        let dev = predict_ner(model, store, &data.ner_dev, &trainer.gate_options())?;
        let dev_f1 = NerEval::from_predictions(&dev).overall.f1();
        let report = EpochReport {
            epoch,
            trc_batches,
            mean_l1,
            trc_accuracy: trc_eval.map(|e| e.accuracy),
            trc_f1: trc_eval.map(|e| e.f1),
            ner_batches,
            mean_l2,
            dev_f1,
            tau: trainer.tau(),
        };
        if let Some((f, path)) = report_file.as_mut() {
            let line = serde_json::to_string(&report).expect("report serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        reports.push(report);

        let improved = dev_f1 > best.1;
        if improved {
            best = (epoch, dev_f1, store.clone());
            stale = 0;
        } else {
            stale += 1;
        }
        if let Some(out) = out {
            let dir = out.checkpoints();
            if config.save_every_epoch {
                checkpoint::save(store, &dir.join(format!("epoch_{epoch:03}.rpw")))?;
            }
            if improved {
                checkpoint::save(store, &dir.join("best_dev.rpw"))?;
            }
        }
        if config.patience > 0 && stale >= config.patience {
            break;
        }
    }
    let (best_epoch, best_dev_f1, best_store) = best;
    Ok(TrainSummary {
        reports,
        best_epoch,
        best_dev_f1: if best_epoch == 0 { 0.0 } else { best_dev_f1 },
        best: best_store,
    })
}

/// Reads a checkpoint directory's per-epoch archive names in order.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "rpw"))
        .collect();
    out.sort();
    Ok(out)
}
