//! Experiment configuration files (TOML). Unknown keys are rejected so a
//! typo cannot silently fall back to a default.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synthdata::DatasetSpec;
use crate::trainer::TrainConfig;

/// One experiment: `[model]` architecture, `[train]` hyperparameters, and an
/// optional `[data]` section. Every run writes the resolved version of this
/// file into its output directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory; commands may override it with `--data`.
    pub path: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.model.validate()?;
        config.train.validate()?;
        Ok(config)
    }

    /// Serialize with a version header; written into output directories so
    /// every run is self-describing.
    pub fn resolved_text(&self) -> String {
        let body = toml::to_string_pretty(self).expect("config serializes");
        format!(
            "# canet {} resolved configuration (seed {})\n{}",
            env!("CARGO_PKG_VERSION"),
            self.train.seed,
            body
        )
    }
}

/// Input for `gen-data`: either the four-dataset family or a single recipe.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSpec {
    /// "family" or "single".
    pub kind: String,
    #[serde(default)]
    pub base_seed: u64,
    /// Split-size overrides applied to every family member.
    #[serde(default)]
    pub n_train: Option<usize>,
    #[serde(default)]
    pub n_val: Option<usize>,
    #[serde(default)]
    pub n_test: Option<usize>,
    /// The recipe for `kind = "single"`.
    #[serde(default)]
    pub dataset: Option<DatasetSpec>,
}

impl GenSpec {
    pub fn load(path: &Path) -> Result<GenSpec> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: GenSpec =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        match spec.kind.as_str() {
            "family" => {
                if spec.dataset.is_some() {
                    return Err(Error::Config("a family spec must not carry [dataset]".into()));
                }
            }
            "single" => {
                if spec.dataset.is_none() {
                    return Err(Error::Config("a single spec needs a [dataset] section".into()));
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "kind must be \"family\" or \"single\", got {other:?}"
                )))
            }
        }
        Ok(spec)
    }

    /// The dataset recipes this spec expands to.
    pub fn specs(&self) -> Vec<DatasetSpec> {
        let mut specs = match self.kind.as_str() {
            "family" => crate::synthdata::make_dataset_family(self.base_seed).to_vec(),
            _ => vec![self.dataset.clone().expect("validated")],
        };
        for s in &mut specs {
            if let Some(n) = self.n_train {
                s.n_train = n;
            }
            if let Some(n) = self.n_val {
                s.n_val = n;
            }
            if let Some(n) = self.n_test {
                s.n_test = n;
            }
        }
        specs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<ExperimentConfig>("[train]\nlearning_rate = 0.1\n");
        let msg = err.unwrap_err().to_string();
        assert!(msg.contains("learning_rate"), "error must name the key: {msg}");
    }

    #[test]
    fn defaults_fill_missing_sections() {
        let cfg: ExperimentConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let cfg: ExperimentConfig = toml::from_str("[train]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.model.eta, 3);
    }

    #[test]
    fn genspec_validates_kind_and_sections() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.toml");
        fs::write(&p, "kind = \"family\"\nbase_seed = 7\nn_train = 5\n").unwrap();
        let spec = GenSpec::load(&p).unwrap();
        let specs = spec.specs();
        assert_eq!(specs.len(), 4);
        assert!(specs.iter().all(|s| s.n_train == 5));

        fs::write(&p, "kind = \"single\"\n").unwrap();
        assert!(GenSpec::load(&p).is_err());
        fs::write(&p, "kind = \"nope\"\n").unwrap();
        assert!(GenSpec::load(&p).is_err());
        // invalid granularity value names the key
        fs::write(
            &p,
            "kind = \"single\"\n[dataset]\nname = \"x\"\ngranularity = \"chunky\"\n",
        )
        .unwrap();
        let err = GenSpec::load(&p).unwrap_err();
        assert!(err.to_string().contains("granularity"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }
}
