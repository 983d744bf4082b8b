//! Layered run configuration: preset, then the TOML file, then flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use milel::model::ModelConfig;
use milel::synth::SynthConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// The published hyper-parameters.
    Published,
    /// Small and fast; used by the synthetic benchmark.
    Benchmark,
    /// Gradient-check size.
    Tiny,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Published => ModelConfig::default(),
            Preset::Benchmark => ModelConfig::benchmark(),
            Preset::Tiny => ModelConfig::tiny(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub cap: usize,
    pub n_neg: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { cap: 100, n_neg: 10 }
    }
}

/// Everything a run depends on besides its input files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub preset: Preset,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub synth: SynthConfig,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    preset: Option<Preset>,
    #[serde(default)]
    data: Option<DataConfig>,
    model: Option<toml::Table>,
    #[serde(default)]
    synth: Option<SynthConfig>,
}

impl RunConfig {
    /// Reads `path` (if any) on top of `preset`. Keys in the `[model]` table
    /// override the preset one by one.
    pub fn load(path: Option<&Path>, preset: Option<Preset>) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
                toml::from_str::<FileConfig>(&text).with_context(|| format!("invalid config {}", p.display()))?
            }
            None => FileConfig { seed: None, preset: None, data: None, model: None, synth: None },
        };
        let preset = preset.or(file.preset).unwrap_or(Preset::Published);
        let mut model = toml::Table::try_from(preset.model()).context("cannot serialize model preset")?;
        if let Some(overrides) = file.model {
            for (k, v) in overrides {
                if !model.contains_key(&k) {
                    bail!("invalid config: unknown model key `{k}`");
                }
                model.insert(k, v);
            }
        }
        let model: ModelConfig = model.try_into().context("invalid [model] table")?;
        Ok(RunConfig {
            seed: file.seed.unwrap_or(0),
            preset,
            data: file.data.unwrap_or_default(),
            model,
            synth: file.synth.unwrap_or_default(),
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("cannot serialize config")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_preset_key_by_key() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 7\npreset = \"benchmark\"\n[model]\neta = 2.5\n[data]\ncap = 20\n").unwrap();
        let c = RunConfig::load(Some(&path), None).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.model.eta, 2.5);
        assert_eq!(c.model.entity_dim, ModelConfig::benchmark().entity_dim);
        assert_eq!(c.data, DataConfig { cap: 20, n_neg: 10 });
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[model]\nbogus = 1\n").unwrap();
        assert!(RunConfig::load(Some(&path), None).unwrap_err().to_string().contains("bogus"));
    }

    #[test]
    fn echoed_config_round_trips() {
        let c = RunConfig::load(None, Some(Preset::Tiny)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("echo.toml");
        std::fs::write(&path, c.to_toml().unwrap()).unwrap();
        assert_eq!(RunConfig::load(Some(&path), None).unwrap(), c);
    }
}
