//! Synthetic desk-scale corpora.
//!
//! Every sentence holds one ambiguous token whose gold tag is LOC or ORG,
//! preceded by a cue word. For relevant pairs the grid carries the
//! prototype of the true class plus a salience offset on every block, and
//! the cue is random. For irrelevant pairs the grid holds a decoy
//! prototype of a random class and no salience, and the cue names the right
//! class with probability `cue_reliability`. Relation pairs additionally
//! carry a marker word in some of the relevant texts; tagging sentences
//! never do, so there relevance shows only in the grid.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::conll::{write_manifest, write_ner_corpus, NerExample};
use super::features::{write_feature_grid, FeatureGrid, MemoryFeatureSource};
use super::tags::{Tag, TagSet};
use super::trc::{write_trc_corpus, TrcExample};
use crate::error::{Error, Result};
use crate::rng::{substream, Rng, Stream};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub ner_train: usize,
    pub ner_dev: usize,
    pub ner_test: usize,
    pub trc_pairs: usize,
    pub fraction_relevant: Real,
    pub d_v: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Norm of the class prototypes added to the object blocks.
    pub prototype_norm: Real,
    /// Number of distinct blocks carrying the prototype; `None` means all.
    pub prototype_blocks: Option<usize>,
    /// Norm of the salience offset added to every block of relevant grids.
    pub salience_norm: Real,
    pub noise_std: Real,
    /// Chance that an irrelevant pair's cue names the true class.
    pub cue_reliability: Real,
    /// Chance that a relevant relation pair contains a marker word.
    pub marker_rate: Real,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab_size: 100,
            ner_train: 500,
            ner_dev: 50,
            ner_test: 100,
            trc_pairs: 500,
            fraction_relevant: 0.5,
            d_v: 16,
            grid_h: 3,
            grid_w: 3,
            prototype_norm: 6.0,
            prototype_blocks: None,
            salience_norm: 1.0,
            noise_std: 0.5,
            cue_reliability: 0.8,
            marker_rate: 0.5,
            seed: 7,
        }
    }
}

const MARKERS: usize = 4;
const AMBIGUOUS: usize = 8;
const PER_TYPE: usize = 8;
const MIN_FILLERS: usize = 10;

/// The word inventory, by role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthLexicon {
    pub fillers: Vec<String>,
    pub markers: Vec<String>,
    /// Cue for LOC, cue for ORG.
    pub cues: [String; 2],
    pub ambiguous: Vec<String>,
    /// Unambiguous entity words per tag type (PER, LOC, ORG, MISC order).
    pub entities: Vec<Vec<String>>,
}

impl SynthLexicon {
    fn generate(vocab_size: usize, rng: &mut Rng) -> Result<Self> {
        let fixed = MARKERS + 2 + AMBIGUOUS + 4 * PER_TYPE;
        if vocab_size < fixed + MIN_FILLERS {
            return Err(Error::Config(format!(
                "synthetic vocab_size must be at least {}",
                fixed + MIN_FILLERS
            )));
        }
        let mut seen = HashSet::new();
        let mut word = |rng: &mut Rng, capital: bool| loop {
            let w = pseudo_word(rng, capital);
            if seen.insert(w.to_lowercase()) {
                return w;
            }
        };
        let fillers = (0..vocab_size - fixed).map(|_| word(rng, false)).collect();
        let markers = (0..MARKERS).map(|_| word(rng, false)).collect();
        let cues = [word(rng, false), word(rng, false)];
        let ambiguous = (0..AMBIGUOUS).map(|_| word(rng, true)).collect();
        let entities = (0..4)
            .map(|_| (0..PER_TYPE).map(|_| word(rng, true)).collect())
            .collect();
        Ok(SynthLexicon {
            fillers,
            markers,
            cues,
            ambiguous,
            entities,
        })
    }
}

fn pseudo_word(rng: &mut Rng, capital: bool) -> String {
    const ONSETS: &[&str] = &[
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st", "tr",
    ];
    const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
    let syllables = rng.gen_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS.choose(rng).unwrap());
        w.push_str(VOWELS.choose(rng).unwrap());
    }
    if rng.gen_bool(0.3) {
        w.push_str(ONSETS[..14].choose(rng).unwrap());
    }
    if capital {
        let mut c = w.chars();
        let first = c.next().unwrap().to_ascii_uppercase();
        w = std::iter::once(first).chain(c).collect();
    }
    w
}

/// Accuracy of a linear probe on mean grid features predicting the
/// ambiguous token's class, fit and scored separately per subset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub relevant_accuracy: Real,
    pub relevant_count: usize,
    pub irrelevant_accuracy: Real,
    pub irrelevant_count: usize,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub config: SynthConfig,
    pub lexicon: SynthLexicon,
    pub trc: Vec<TrcExample>,
    pub ner_train: Vec<NerExample>,
    pub ner_dev: Vec<NerExample>,
    pub ner_test: Vec<NerExample>,
    pub grids: MemoryFeatureSource,
    pub probe: ProbeReport,
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    lex: SynthLexicon,
    tags: TagSet,
    prototypes: [Vec<Real>; 2],
    salience: Vec<Real>,
    rng: Rng,
}

fn random_direction(rng: &mut Rng, dim: usize, norm: Real) -> Vec<Real> {
    let v: Vec<Real> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let len = v.iter().map(|x| x * x).sum::<Real>().sqrt().max(1e-12);
    v.into_iter().map(|x| x * norm / len).collect()
}

/// LOC is class 0, ORG class 1.
const AMBIGUOUS_TYPES: [&str; 2] = ["LOC", "ORG"];

impl Generator<'_> {
    /// Words, tags, class of the ambiguous token.
    fn sentence(&mut self, relevant: bool, marker: bool) -> (Vec<String>, Vec<usize>, usize) {
        let rng = &mut self.rng;
        let class = rng.gen_range(0..2);
        let cue = if relevant {
            rng.gen_range(0..2)
        } else if rng.gen_bool(self.cfg.cue_reliability) {
            class
        } else {
            1 - class
        };
        let amb_tag = self
            .tags
            .id(Tag::Begin(self.tags.type_index(AMBIGUOUS_TYPES[class]).unwrap()));

        // units stay contiguous so entity spans and cue pairs are never split
        let mut units: Vec<Vec<(String, usize)>> = (0..rng.gen_range(3..=7))
            .map(|_| vec![(self.lex.fillers.choose(rng).unwrap().clone(), 0)])
            .collect();

        let ty = rng.gen_range(0..4);
        let entity = (0..rng.gen_range(1..=2))
            .map(|k| {
                let tag = if k == 0 { Tag::Begin(ty) } else { Tag::Inside(ty) };
                (self.lex.entities[ty].choose(rng).unwrap().clone(), self.tags.id(tag))
            })
            .collect();
        units.insert(rng.gen_range(0..=units.len()), entity);

        let pair = vec![
            (self.lex.cues[cue].clone(), 0),
            (self.lex.ambiguous.choose(rng).unwrap().clone(), amb_tag),
        ];
        units.insert(rng.gen_range(0..=units.len()), pair);

        if marker {
            let marker = vec![(self.lex.markers.choose(rng).unwrap().clone(), 0)];
            units.insert(rng.gen_range(0..=units.len()), marker);
        }
        let words = units.into_iter().flatten();
        let (w, t) = words.unzip();
        (w, t, class)
    }

    fn grid(&mut self, relevant: bool, class: usize) -> FeatureGrid {
        let cfg = self.cfg;
        let m = cfg.grid_h * cfg.grid_w;
        let rng = &mut self.rng;
        let mut values: Vec<Real> = (0..m * cfg.d_v)
            .map(|_| cfg.noise_std * Distribution::<Real>::sample(&StandardNormal, rng))
            .collect();
        let shown = if relevant { class } else { rng.gen_range(0..2) };
        for block in rand::seq::index::sample(rng, m, cfg.prototype_blocks.unwrap_or(m)) {
            for (v, p) in values[block * cfg.d_v..(block + 1) * cfg.d_v]
                .iter_mut()
                .zip(&self.prototypes[shown])
            {
                *v += p;
            }
        }
        if relevant {
            for chunk in values.chunks_mut(cfg.d_v) {
                for (v, s) in chunk.iter_mut().zip(&self.salience) {
                    *v += s;
                }
            }
        }
        FeatureGrid::new(cfg.grid_h, cfg.grid_w, cfg.d_v, values).expect("sizes validated")
    }

    fn relevant_flags(&mut self, n: usize) -> Vec<bool> {
        let k = (n as Real * self.cfg.fraction_relevant).round() as usize;
        let mut flags: Vec<bool> = (0..n).map(|i| i < k).collect();
        flags.shuffle(&mut self.rng);
        flags
    }
}

/// Generates all corpora and grids from `cfg.seed`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthData> {
    if cfg.d_v == 0 || cfg.grid_h == 0 || cfg.grid_w == 0 {
        return Err(Error::Config("synthetic grid dimensions must be positive".into()));
    }
    if matches!(cfg.prototype_blocks, Some(k) if k == 0 || k > cfg.grid_h * cfg.grid_w) {
        return Err(Error::Config("prototype_blocks must lie in 1..=grid cells".into()));
    }
    for (name, p) in [
        ("fraction_relevant", cfg.fraction_relevant),
        ("cue_reliability", cfg.cue_reliability),
        ("marker_rate", cfg.marker_rate),
    ] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("{name} must lie in [0, 1]")));
        }
    }
    let mut rng = substream(cfg.seed, Stream::Synth);
    let lex = SynthLexicon::generate(cfg.vocab_size, &mut rng)?;
    let prototypes = [
        random_direction(&mut rng, cfg.d_v, cfg.prototype_norm),
        random_direction(&mut rng, cfg.d_v, cfg.prototype_norm),
    ];
    let salience = random_direction(&mut rng, cfg.d_v, cfg.salience_norm);
    let mut g = Generator {
        cfg,
        lex,
        tags: TagSet::default(),
        prototypes,
        salience,
        rng,
    };

    let mut grids = HashMap::new();
    let mut probe_rows: [Vec<(Vec<Real>, usize)>; 2] = [Vec::new(), Vec::new()];

    let mut ner_split = |g: &mut Generator, name: &str, n: usize| {
        let flags = g.relevant_flags(n);
        let mut out = Vec::with_capacity(n);
        for (i, relevant) in flags.into_iter().enumerate() {
            let (words, tags, class) = g.sentence(relevant, false);
            let grid = g.grid(relevant, class);
            probe_rows[relevant as usize].push((grid.mean_feature(), class));
            let image_ref = format!("grids/{name}_{i:05}.rpf");
            grids.insert(image_ref.clone(), grid);
            out.push(NerExample {
                words,
                tags,
                image_ref,
                relevant: Some(relevant),
            });
        }
        out
    };
    let ner_train = ner_split(&mut g, "ner_train", cfg.ner_train);
    let ner_dev = ner_split(&mut g, "ner_dev", cfg.ner_dev);
    let ner_test = ner_split(&mut g, "ner_test", cfg.ner_test);

    let flags = g.relevant_flags(cfg.trc_pairs);
    let mut trc = Vec::with_capacity(cfg.trc_pairs);
    for (i, relevant) in flags.into_iter().enumerate() {
        let marker = relevant && g.rng.gen_bool(cfg.marker_rate);
        let (words, _, class) = g.sentence(relevant, marker);
        let image_ref = format!("grids/trc_{i:05}.rpf");
        grids.insert(image_ref.clone(), g.grid(relevant, class));
        trc.push(TrcExample {
            text: words.join(" "),
            image_ref,
            label: relevant as usize,
            relation: None,
        });
    }

    let mut probe_rng = g.rng.clone();
    let (irrelevant_accuracy, irrelevant_count) = probe_accuracy(&probe_rows[0], &mut probe_rng);
    let (relevant_accuracy, relevant_count) = probe_accuracy(&probe_rows[1], &mut probe_rng);
    Ok(SynthData {
        config: cfg.clone(),
        lexicon: g.lex,
        trc,
        ner_train,
        ner_dev,
        ner_test,
        grids: MemoryFeatureSource { grids },
        probe: ProbeReport {
            relevant_accuracy,
            relevant_count,
            irrelevant_accuracy,
            irrelevant_count,
        },
    })
}

/// Logistic regression on standardized features, trained by full-batch
/// gradient descent on a shuffled 70% and scored on the rest. Returns
/// (held-out accuracy, rows used); NaN accuracy when too few rows.
pub fn probe_accuracy(rows: &[(Vec<Real>, usize)], rng: &mut Rng) -> (Real, usize) {
    if rows.len() < 10 {
        return (Real::NAN, rows.len());
    }
    let d = rows[0].0.len();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(rng);
    let cut = rows.len() * 7 / 10;
    let (train, test) = order.split_at(cut);

    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for &i in train {
        for (m, x) in mean.iter_mut().zip(&rows[i].0) {
            *m += x / train.len() as Real;
        }
    }
    for &i in train {
        for ((s, x), m) in sd.iter_mut().zip(&rows[i].0).zip(&mean) {
            *s += (x - m).powi(2) / train.len() as Real;
        }
    }
    let sd: Vec<Real> = sd.into_iter().map(|v| v.sqrt().max(1e-9)).collect();
    let feat = |i: usize| -> Vec<Real> {
        rows[i]
            .0
            .iter()
            .zip(&mean)
            .zip(&sd)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    };
    let train_x: Vec<Vec<Real>> = train.iter().map(|&i| feat(i)).collect();

    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let lr = 0.5;
    let l2 = 1e-3;
    for _ in 0..500 {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, &i) in train_x.iter().zip(train) {
            let z: Real = b + x.iter().zip(&w).map(|(a, b)| a * b).sum::<Real>();
            let err = 1.0 / (1.0 + (-z).exp()) - rows[i].1 as Real;
            gb += err;
            for (g, xi) in gw.iter_mut().zip(x) {
                *g += err * xi;
            }
        }
        let n = train.len() as Real;
        b -= lr * gb / n;
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= lr * (g / n + l2 * *wi);
        }
    }
    let correct = test
        .iter()
        .filter(|&&i| {
            let z: Real = b + feat(i).iter().zip(&w).map(|(a, b)| a * b).sum::<Real>();
            (z > 0.0) as usize == rows[i].1
        })
        .count();
    (correct as Real / test.len() as Real, rows.len())
}

impl SynthData {
    /// Writes corpora, manifests, grids, the lexicon and the probe report
    /// under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        let tags = TagSet::default();
        fs::create_dir_all(dir.join("grids")).map_err(|e| Error::io(dir, e))?;
        let mut refs: Vec<&String> = self.grids.grids.keys().collect();
        refs.sort();
        for r in refs {
            write_feature_grid(&self.grids.grids[r], &dir.join(r))?;
        }
        for (name, split) in [
            ("train", &self.ner_train),
            ("dev", &self.ner_dev),
            ("test", &self.ner_test),
        ] {
            write_ner_corpus(&dir.join(format!("ner_{name}.txt")), &tags, split)?;
            write_manifest(&dir.join(format!("ner_{name}.manifest.tsv")), split)?;
        }
        write_trc_corpus(&dir.join("trc.tsv"), &self.trc)?;
        write_json(&dir.join("lexicon.json"), &self.lexicon)?;
        write_json(&dir.join("probe.json"), &self.probe)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("plain data serializes") + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::conll::{load_manifest, load_ner_corpus};
    use crate::data::tags::Scheme;

    fn small() -> SynthConfig {
        SynthConfig {
            ner_train: 120,
            ner_dev: 10,
            ner_test: 80,
            trc_pairs: 40,
            ..SynthConfig::default()
        }
    }

    fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        for entry in walk(dir) {
            out.push((
                entry.strip_prefix(dir).unwrap().display().to_string(),
                fs::read(&entry).unwrap(),
            ));
        }
        out.sort();
        out
    }

    fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
        let mut out = Vec::new();
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn fixed_seed_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        synth_generate(&small()).unwrap().write_to(a.path()).unwrap();
        synth_generate(&small()).unwrap().write_to(b.path()).unwrap();
        assert_eq!(tree(a.path()), tree(b.path()));
    }

    #[test]
    fn zero_fraction_gives_all_negative_labels() {
        let cfg = SynthConfig {
            fraction_relevant: 0.0,
            ..small()
        };
        let d = synth_generate(&cfg).unwrap();
        assert!(d.trc.iter().all(|e| e.label == 0));
        assert!(d.ner_train.iter().all(|e| e.relevant == Some(false)));
    }

    #[test]
    fn output_passes_loader_validation() {
        let dir = tempfile::tempdir().unwrap();
        let d = synth_generate(&small()).unwrap();
        d.write_to(dir.path()).unwrap();
        let manifest = load_manifest(&dir.path().join("ner_train.manifest.tsv")).unwrap();
        let back = load_ner_corpus(
            &dir.path().join("ner_train.txt"),
            Scheme::Bio2,
            &TagSet::default(),
            Some(&manifest),
        )
        .unwrap();
        assert_eq!(back, d.ner_train);
    }

    #[test]
    fn vocabulary_size_matches_config() {
        let d = synth_generate(&small()).unwrap();
        let mut words = HashSet::new();
        let lex = &d.lexicon;
        words.extend(
            lex.fillers
                .iter()
                .chain(&lex.markers)
                .chain(&lex.cues)
                .chain(&lex.ambiguous),
        );
        words.extend(lex.entities.iter().flatten());
        assert_eq!(words.len(), 100);
        assert!(synth_generate(&SynthConfig {
            vocab_size: 20,
            ..small()
        })
        .is_err());
    }

    #[test]
    fn probe_reads_tag_from_grid_only_when_relevant() {
        let p = synth_generate(&SynthConfig::default()).unwrap().probe;
        assert!(p.relevant_accuracy > 0.95, "{p:?}");
        assert!((p.irrelevant_accuracy - 0.5).abs() < 0.15, "{p:?}");
    }
}
