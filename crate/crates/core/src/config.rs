//! Run configuration: one TOML file with `[model.encoder]`, `[model.tagger]`,
//! `[train]`, `[data]` and `[synth]` sections.
//!
//! Corpus paths left unset resolve to the file names written by the
//! synthetic generator under `data.dir`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Scheme, SynthConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Base directory for unset corpus paths and for image references.
    pub dir: PathBuf,
    pub scheme: Scheme,
    pub trc: Option<PathBuf>,
    pub ner_train: Option<PathBuf>,
    pub ner_dev: Option<PathBuf>,
    pub ner_test: Option<PathBuf>,
    pub ner_train_manifest: Option<PathBuf>,
    pub ner_dev_manifest: Option<PathBuf>,
    pub ner_test_manifest: Option<PathBuf>,
    /// Root that image references resolve under; defaults to `dir`.
    pub features: Option<PathBuf>,
    /// Plain-text word vectors for the tagger's word table.
    pub word_vectors: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: PathBuf::from("data"),
            scheme: Scheme::Bio2,
            trc: None,
            ner_train: None,
            ner_dev: None,
            ner_test: None,
            ner_train_manifest: None,
            ner_dev_manifest: None,
            ner_test_manifest: None,
            features: None,
            word_vectors: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split `{s}` (expected train, dev or test)")),
        }
    }
}

/// A corpus file and its optional manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusPaths {
    pub corpus: PathBuf,
    pub manifest: Option<PathBuf>,
}

impl DataConfig {
    fn pick(&self, explicit: &Option<PathBuf>, default_name: &str) -> (PathBuf, bool) {
        match explicit {
            Some(p) => (p.clone(), true),
            None => (self.dir.join(default_name), false),
        }
    }

    pub fn trc_path(&self) -> PathBuf {
        self.pick(&self.trc, "trc.tsv").0
    }

    pub fn features_root(&self) -> PathBuf {
        self.features.clone().unwrap_or_else(|| self.dir.clone())
    }

    fn split_fields(&self, split: Split) -> (&Option<PathBuf>, &Option<PathBuf>) {
        match split {
            Split::Train => (&self.ner_train, &self.ner_train_manifest),
            Split::Dev => (&self.ner_dev, &self.ner_dev_manifest),
            Split::Test => (&self.ner_test, &self.ner_test_manifest),
        }
    }

    /// Paths of one tagging split. Explicit paths must exist. A default
    /// manifest is used only when present, and a default dev corpus only
    /// when present; `None` means the split is absent.
    pub fn ner_paths(&self, split: Split) -> Result<Option<CorpusPaths>> {
        let name = split.name();
        let (corpus, manifest) = self.split_fields(split);
        let (corpus, explicit) = self.pick(corpus, &format!("ner_{name}.txt"));
        if !explicit && split == Split::Dev && !corpus.exists() {
            return Ok(None);
        }
        require(&corpus)?;
        let manifest = match manifest {
            Some(m) => {
                require(m)?;
                Some(m.clone())
            }
            None => {
                let m = self.dir.join(format!("ner_{name}.manifest.tsv"));
                m.exists().then_some(m)
            }
        };
        Ok(Some(CorpusPaths { corpus, manifest }))
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Output directory of the command.
    pub out: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out: PathBuf::from("runs/latest"),
            model: ModelConfig::default(),
            train: TrainConfig::desk(),
            data: DataConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        RunConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// Checks numeric settings. Paths are checked when they are used.
    pub fn validate(&self) -> Result<()> {
        self.model.encoder.validate()?;
        self.train.validate()
    }

    /// Checks that every file a training run reads exists.
    pub fn validate_training_paths(&self) -> Result<()> {
        if !self.train.ablate_rp {
            require(&self.data.trc_path())?;
        }
        self.data.ner_paths(Split::Train)?;
        self.data.ner_paths(Split::Dev)?;
        require(&self.data.features_root())?;
        if let Some(v) = &self.data.word_vectors {
            require(v)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gate::GateKind;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = RunConfig::from_toml(
            "[train]\nepochs = 3\ngate = \"gumbel\"\n\n[model.encoder]\nlayers = 1\n\n[data]\ndir = \"x\"\n",
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.gate, GateKind::Gumbel);
        assert_eq!(cfg.train.lr_main, TrainConfig::desk().lr_main);
        assert_eq!(cfg.model.encoder.layers, 1);
        assert_eq!(cfg.model.encoder.d_model, ModelConfig::default().encoder.d_model);
        assert_eq!(cfg.data.trc_path(), PathBuf::from("x/trc.tsv"));
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        assert!(matches!(
            RunConfig::from_toml("[train]\nepoch = 3\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(RunConfig::from_toml("[trian]\n"), Err(Error::Config(_))));
    }

    #[test]
    fn missing_corpus_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.data.dir = dir.path().to_path_buf();
        let err = cfg.validate_training_paths().unwrap_err();
        assert!(err.to_string().contains("trc.tsv"), "{err}");
        cfg.train.ablate_rp = true;
        let err = cfg.validate_training_paths().unwrap_err();
        assert!(err.to_string().contains("ner_train.txt"), "{err}");
    }

    #[test]
    fn absent_default_dev_is_optional() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.data.dir = dir.path().to_path_buf();
        assert_eq!(cfg.data.ner_paths(Split::Dev).unwrap(), None);
        cfg.data.ner_dev = Some(dir.path().join("dev.txt"));
        assert!(cfg.data.ner_paths(Split::Dev).is_err());
    }
}
