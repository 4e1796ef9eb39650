//! Command-line front end: `train`, `eval`, `analyze` and `synth`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analytics::{collect_stats, export_distribution, export_heatmap, AttentionStats, Subset};
use crate::autodiff::{checkpoint, ParamStore};
use crate::config::{RunConfig, Split};
use crate::data::vocab::load_word_vectors;
use crate::data::{
    load_manifest, load_ner_corpus, load_trc_corpus, synth_generate, FeatureSource, FileFeatureSource, NerExample,
    TagSet, Vocabularies,
};
use crate::error::{Error, Result};
use crate::gate::GateKind;
use crate::model::{GateOptions, RelevanceOverride, RpModel};
use crate::ner::EntityCounts;
use crate::pipeline::{init_model, train, Corpora};
use crate::train::{evaluate_trc, predict_ner, prepare_ner, prepare_trc, split_trc, NerEval, NerPrediction, RunOutput};

#[derive(Debug, Parser)]
#[command(name = "relprop", version, about = "Relevance-gated multimodal entity tagging")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the relation head and tagger, writing checkpoints and reports.
    Train(TrainArgs),
    /// Score a checkpoint on one tagging split and dump predictions.
    Eval(EvalArgs),
    /// Export attention heat maps and the relevance/attention distribution.
    Analyze(AnalyzeArgs),
    /// Generate a synthetic corpus with feature grids.
    Synth(SynthArgs),
}

/// Flags shared by every command; each overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Gate kind: soft, hard_st or gumbel.
    #[arg(long)]
    pub gate: Option<GateKind>,
    /// Skip relation training and force r = 1.
    #[arg(long)]
    pub ablate_rp: bool,
    /// Stop the tagging loss from reaching the relation pass.
    #[arg(long)]
    pub detach_relation_score: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Data directory holding corpora and grids.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Vocabulary file; defaults to `vocab.json` beside the run.
    #[arg(long, value_name = "FILE")]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint of the gated model.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Checkpoint of a model trained with `--ablate-rp`. Without it the
    /// ungated statistics come from the gated weights with r forced to 1.
    #[arg(long, value_name = "FILE")]
    pub ablated_checkpoint: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Integer upscaling of the heat-map images.
    #[arg(long, default_value_t = 16)]
    pub scale: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
}

/// Runs a parsed command line and returns the exit status.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Analyze(a) => cmd_analyze(&a),
        Command::Synth(a) => cmd_synth(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Config from `--config`, else from `config.toml` of the run holding
/// `checkpoint`, else defaults; then flag overrides.
fn resolve_config(common: &Common, checkpoint: Option<&Path>) -> Result<RunConfig> {
    let file = common
        .config
        .clone()
        .or_else(|| checkpoint.and_then(|c| find_beside(c, "config.toml")));
    let mut cfg = match file {
        Some(p) => RunConfig::load(&p)?,
        None => RunConfig::default(),
    };
    if let Some(g) = common.gate {
        cfg.train.gate = g;
    }
    cfg.train.ablate_rp |= common.ablate_rp;
    cfg.train.detach_relation_score |= common.detach_relation_score;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
        cfg.synth.seed = s;
    }
    if let Some(e) = common.epochs {
        cfg.train.epochs = e;
    }
    if let Some(d) = &common.data {
        cfg.data.dir = d.clone();
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Looks for `name` in the checkpoint's directory and its parent.
fn find_beside(checkpoint: &Path, name: &str) -> Option<PathBuf> {
    checkpoint
        .parent()
        .into_iter()
        .flat_map(|d| [Some(d.to_path_buf()), d.parent().map(Path::to_path_buf)])
        .flatten()
        .map(|d| d.join(name))
        .find(|p| p.exists())
}

fn load_split(cfg: &RunConfig, split: Split, tags: &TagSet) -> Result<Vec<NerExample>> {
    let Some(paths) = cfg.data.ner_paths(split)? else {
        return Ok(Vec::new());
    };
    let manifest = paths.manifest.as_deref().map(load_manifest).transpose()?;
    load_ner_corpus(&paths.corpus, cfg.data.scheme, tags, manifest.as_ref())
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(&args.common, None)?;
    cfg.validate_training_paths()?;
    let tags = TagSet::default();
    let mut corpora = Corpora {
        trc: if cfg.train.ablate_rp {
            Vec::new()
        } else {
            load_trc_corpus(&cfg.data.trc_path())?
        },
        ner_train: load_split(&cfg, Split::Train, &tags)?,
        ner_dev: load_split(&cfg, Split::Dev, &tags)?,
        ner_test: Vec::new(),
    };
    corpora.ensure_dev();
    let vectors = match &cfg.data.word_vectors {
        Some(p) => Some(load_word_vectors(p)?.1),
        None => None,
    };
    let mut features = FileFeatureSource::new(cfg.data.features_root());
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    cfg.save(&cfg.out.join("config.toml"))?;
    let out = RunOutput { dir: cfg.out.clone() };
    let trained = train(
        &cfg.model,
        &cfg.train,
        &corpora,
        &mut features,
        vectors.as_ref(),
        Some(&out),
    )?;
    let s = &trained.summary;
    println!(
        "trained {} epochs; best dev F1 {:.4} at epoch {}; outputs in {}",
        s.reports.len(),
        s.best_dev_f1,
        s.best_epoch,
        cfg.out.display()
    );
    Ok(())
}

fn load_vocab(explicit: Option<&Path>, checkpoint: &Path) -> Result<Vocabularies> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => find_beside(checkpoint, "vocab.json").ok_or_else(|| {
            Error::io(
                checkpoint.with_file_name("vocab.json"),
                std::io::Error::new(std::io::ErrorKind::NotFound, "vocabulary not found beside checkpoint"),
            )
        })?,
    };
    Vocabularies::load(&path)
}

fn load_trained(cfg: &RunConfig, vocab: Vocabularies, checkpoint_path: &Path) -> Result<(RpModel, ParamStore)> {
    let (model, mut store) = init_model(&cfg.model, cfg.train.seed, vocab)?;
    checkpoint::load(&mut store, checkpoint_path)?;
    Ok((model, store))
}

fn eval_options(cfg: &RunConfig, ablate: bool) -> GateOptions {
    GateOptions {
        kind: cfg.train.gate,
        tau: cfg.train.tau_end,
        detach: false,
        relevance: if ablate {
            RelevanceOverride::Fixed(1.0)
        } else {
            RelevanceOverride::Model
        },
    }
}

fn line(name: &str, c: &EntityCounts) -> String {
    format!(
        "{name:<11} P {:.4}  R {:.4}  F1 {:.4}  (tp {} fp {} fn {})",
        c.precision(),
        c.recall(),
        c.f1(),
        c.tp,
        c.fp,
        c.fn_
    )
}

/// CoNLL-style dump: one `word gold predicted` line per token, with a
/// comment line per sentence carrying the relevance score.
pub fn render_predictions(tags: &TagSet, examples: &[NerExample], preds: &[NerPrediction]) -> String {
    let mut out = String::new();
    for (i, (ex, p)) in examples.iter().zip(preds).enumerate() {
        let subset = Subset::from_relevant(p.relevant);
        writeln!(
            out,
            "# sentence {i:05} image {} r {:.6} subset {subset}",
            ex.image_ref, p.r
        )
        .unwrap();
        for ((w, g), q) in ex.words.iter().zip(&ex.tags).zip(&p.tags) {
            writeln!(out, "{w} {} {}", tags.label(*g), tags.label(*q)).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let cfg = resolve_config(&args.common, Some(&args.checkpoint))?;
    let vocab = load_vocab(args.vocab.as_deref(), &args.checkpoint)?;
    let (model, store) = load_trained(&cfg, vocab, &args.checkpoint)?;
    let tags = model.tagger.tags.clone();
    let examples = load_split(&cfg, args.split, &tags)?;
    if examples.is_empty() {
        return Err(Error::Config(format!("no {:?} split configured", args.split)));
    }
    let mut features = FileFeatureSource::new(cfg.data.features_root());
    let data = prepare_ner(&model, &examples, &mut features)?;
    let preds = predict_ner(&model, &store, &data, &eval_options(&cfg, cfg.train.ablate_rp))?;
    let eval = NerEval::from_predictions(&preds);
    println!("{}", line("overall", &eval.overall));
    println!("{}", line("relevant", &eval.relevant));
    println!("{}", line("irrelevant", &eval.irrelevant));

    let mut metrics = serde_json::json!({ "ner": eval });
    let trc_path = cfg.data.trc_path();
    if !cfg.train.ablate_rp && trc_path.exists() {
        let (_, _, test) = split_trc(&load_trc_corpus(&trc_path)?, cfg.train.seed);
        let trc = evaluate_trc(&model, &store, &prepare_trc(&model, &test, &mut features)?)?;
        println!(
            "relation    acc {:.4}  P {:.4}  R {:.4}  F1 {:.4}  (n {})",
            trc.accuracy, trc.precision, trc.recall, trc.f1, trc.count
        );
        metrics["trc"] = serde_json::to_value(trc).expect("plain data serializes");
    }

    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let split = format!("{:?}", args.split).to_lowercase();
    let dump = cfg.out.join(format!("predictions.{split}.txt"));
    fs::write(&dump, render_predictions(&tags, &examples, &preds)).map_err(|e| Error::io(&dump, e))?;
    let mpath = cfg.out.join(format!("metrics.{split}.json"));
    let text = serde_json::to_string_pretty(&metrics).expect("plain data serializes") + "\n";
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    println!("predictions written to {}", dump.display());
    Ok(())
}

pub const WITH_RP: &str = "with_rp";
pub const WITHOUT_RP: &str = "without_rp";

fn variant_stats(
    cfg: &RunConfig,
    variant: &str,
    checkpoint_path: &Path,
    vocab: Vocabularies,
    examples: &[NerExample],
    features: &mut dyn FeatureSource,
    ablate: bool,
) -> Result<Vec<AttentionStats>> {
    let (model, store) = load_trained(cfg, vocab, checkpoint_path)?;
    let data = prepare_ner(&model, examples, features)?;
    let preds = predict_ner(&model, &store, &data, &eval_options(cfg, ablate))?;
    collect_stats(variant, &data, &preds)
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<()> {
    let mut cfg = resolve_config(&args.common, Some(&args.checkpoint))?;
    cfg.train.ablate_rp = false;
    if args.common.out.is_none() {
        let dir = args.checkpoint.parent().unwrap_or(Path::new("."));
        let run = if dir.ends_with("checkpoints") {
            dir.parent().unwrap_or(dir)
        } else {
            dir
        };
        cfg.out = run.join("analysis");
    }
    let vocab = load_vocab(args.vocab.as_deref(), &args.checkpoint)?;
    let examples = load_split(&cfg, args.split, &TagSet::default())?;
    let mut features = FileFeatureSource::new(cfg.data.features_root());

    let mut stats = variant_stats(
        &cfg,
        WITH_RP,
        &args.checkpoint,
        vocab.clone(),
        &examples,
        &mut features,
        false,
    )?;
    let ablated = match &args.ablated_checkpoint {
        Some(path) => {
            let vocab = match args.vocab.as_deref() {
                Some(v) => Vocabularies::load(v)?,
                None => load_vocab(None, path)?,
            };
            variant_stats(&cfg, WITHOUT_RP, path, vocab, &examples, &mut features, true)?
        }
        None => variant_stats(
            &cfg,
            WITHOUT_RP,
            &args.checkpoint,
            vocab,
            &examples,
            &mut features,
            true,
        )?,
    };

    let maps = cfg.out.join("heatmaps");
    fs::create_dir_all(&maps).map_err(|e| Error::io(&maps, e))?;
    for (s, ex) in stats.iter().zip(&examples) {
        let grid = features.grid(&ex.image_ref)?;
        export_heatmap(
            &s.blocks,
            grid.grid_h,
            grid.grid_w,
            &maps.join(&s.example_id),
            args.scale,
        )?;
    }

    stats.extend(ablated);
    let summary = export_distribution(&stats, &cfg.out.join("distribution.csv"), &cfg.out.join("summary.json"))?;
    for variant in [WITH_RP, WITHOUT_RP] {
        for subset in [Subset::Relevant, Subset::Irrelevant] {
            match summary.get(variant).and_then(|m| m.get(&subset)) {
                Some(s) => println!(
                    "{variant:<10} {subset:<10} mean S_TV {:.6}  mean r {:.4}  (n {})",
                    s.mean_s_tv, s.mean_r, s.count
                ),
                None => println!("{variant:<10} {subset:<10} no examples"),
            }
        }
    }
    println!("analysis written to {}", cfg.out.display());
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let cfg = resolve_config(&args.common, None)?;
    let dir = args.common.out.clone().unwrap_or_else(|| cfg.data.dir.clone());
    let data = synth_generate(&cfg.synth)?;
    data.write_to(&dir)?;
    let p = &data.probe;
    println!(
        "wrote {} relation pairs and {}/{}/{} tagging sentences to {}",
        data.trc.len(),
        data.ner_train.len(),
        data.ner_dev.len(),
        data.ner_test.len(),
        dir.display()
    );
    println!(
        "probe accuracy: relevant {:.3} (n {}), irrelevant {:.3} (n {})",
        p.relevant_accuracy, p.relevant_count, p.irrelevant_accuracy, p.irrelevant_count
    );
    Ok(())
}
