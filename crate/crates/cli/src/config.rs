//! Run configuration: one TOML file merged over preset defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use swipe_core::data::SyntheticCorpusSpec;
use swipe_core::inference::{Refinement, ReconstructionSpec};
use swipe_core::model::ModelConfig;
use swipe_core::sampling::SamplingConfig;
use swipe_core::trainer::TrainConfig;

use crate::CliError;

/// Architecture preset that supplies the `[model]` defaults.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Narrow model sized for a single CPU core.
    #[default]
    Desk,
    /// Reference widths and depths.
    Reference,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Desk => ModelConfig::desk(),
            Preset::Reference => ModelConfig::default(),
        }
    }
}

/// Reconstruction settings; the target size comes from the command.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconstructionConfig {
    pub mode: Refinement,
    pub initial_stride: usize,
    pub threshold: f64,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self {
            mode: Refinement::Mise,
            initial_stride: 4,
            threshold: 0.5,
        }
    }
}

impl ReconstructionConfig {
    pub fn spec(&self, height: usize, width: usize) -> ReconstructionSpec {
        ReconstructionSpec {
            target_height: height,
            target_width: width,
            initial_stride: self.initial_stride,
            threshold: self.threshold,
            refinement: self.mode,
        }
    }
}

/// Fully resolved settings for every command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    /// Corpus root holding `manifest.json`.
    pub corpus_dir: PathBuf,
    /// Output directory of `train` and `ablate`.
    pub out_dir: PathBuf,
    pub generate: SyntheticCorpusSpec,
    pub sampling: SamplingConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub reconstruction: ReconstructionConfig,
}

impl RunConfig {
    pub fn defaults(preset: Preset) -> Self {
        Self {
            preset,
            corpus_dir: PathBuf::from("corpus"),
            out_dir: PathBuf::from("runs/default"),
            generate: SyntheticCorpusSpec::default(),
            sampling: SamplingConfig::default(),
            model: preset.model(),
            train: TrainConfig::default(),
            reconstruction: ReconstructionConfig::default(),
        }
    }

    /// Defaults for the chosen preset, overlaid with the file's tables.
    /// `preset` (flag or environment) outranks the file's `preset` key.
    pub fn resolve(file: Option<&Path>, preset: Option<Preset>) -> Result<Self, CliError> {
        let overlay = match file {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
                let value: toml::Table =
                    toml::from_str(&text).map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
                Some(value)
            }
            None => None,
        };
        let file_preset = match overlay.as_ref().and_then(|t| t.get("preset")) {
            Some(v) => Some(
                v.clone()
                    .try_into::<Preset>()
                    .map_err(|e| CliError::user(format!("preset: {e}")))?,
            ),
            None => None,
        };
        let preset = preset.or(file_preset).unwrap_or_default();
        let mut base = toml::Table::try_from(Self::defaults(preset)).map_err(|e| CliError::internal(e.to_string()))?;
        if let Some(mut overlay) = overlay {
            overlay.remove("preset");
            merge(&mut base, overlay);
        }
        let cfg: Self = toml::Value::Table(base)
            .try_into()
            .map_err(|e| CliError::user(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        self.sampling.validate()?;
        self.reconstruction.spec(1, 1).validate()?;
        Ok(())
    }
}

pub const RESOLVED_FILE: &str = "resolved.toml";

/// Recursive table merge; `over` wins on every leaf it defines.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        for preset in [Preset::Desk, Preset::Reference] {
            let cfg = RunConfig::defaults(preset);
            let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn file_overrides_only_named_leaves() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[train]\niterations = 7\n[train.optimizer]\nlr = 0.01\n").unwrap();
        let cfg = RunConfig::resolve(Some(&path), None).unwrap();
        let mut want = RunConfig::defaults(Preset::Desk);
        want.train.iterations = 7;
        want.train.optimizer.lr = 0.01;
        assert_eq!(cfg, want);
    }

    #[test]
    fn preset_flag_outranks_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "preset = \"reference\"\n").unwrap();
        assert_eq!(RunConfig::resolve(Some(&path), None).unwrap().model, ModelConfig::default());
        let cfg = RunConfig::resolve(Some(&path), Some(Preset::Desk)).unwrap();
        assert_eq!(cfg.model, ModelConfig::desk());
    }

    #[test]
    fn unknown_value_is_user_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[train]\niterations = \"many\"\n").unwrap();
        let err = RunConfig::resolve(Some(&path), None).unwrap_err();
        assert_eq!(err.code, 2);
    }
}
