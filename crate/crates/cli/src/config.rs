use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use emin::backbone::ModelConfig;
use emin::corpus::SynthConfig;
use emin::costmodel::BenchConfig;
use emin::em::{EMConfig, Strategy};
use serde::{Deserialize, Serialize};

/// Architecture settings; vocabulary size and position tables come from
/// the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let d = ModelConfig::desk(5);
        ModelSettings {
            d_model: d.d_model,
            num_layers: d.num_layers,
            num_heads: d.num_heads,
            ff_dim: d.ff_dim,
            dropout: d.dropout,
        }
    }
}

impl ModelSettings {
    pub fn apply(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            ff_dim: self.ff_dim,
            dropout: self.dropout,
            ..ModelConfig::desk(vocab_size)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalSettings {
    pub top_d: usize,
    pub stopwords: Option<PathBuf>,
}

impl Default for RetrievalSettings {
    fn default() -> Self {
        RetrievalSettings {
            top_d: emin::retrieval::DEFAULT_TOP_D,
            stopwords: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSettings {
    #[serde(flatten)]
    pub model: BenchConfig,
    pub grid: Vec<(usize, usize)>,
    pub repetitions: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            model: BenchConfig::default(),
            grid: [1, 2, 4, 8, 16].iter().map(|&m| (m, 64)).collect(),
            repetitions: 3,
        }
    }
}

/// Everything a command may read, loadable from one JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// The single source of randomness; copied into the synthesizer and
    /// benchmark settings.
    pub seed: u64,
    pub synth: SynthConfig,
    pub model: ModelSettings,
    pub em: EMConfig,
    pub retrieval: RetrievalSettings,
    pub bench: BenchSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            synth: SynthConfig::default(),
            model: ModelSettings::default(),
            em: EMConfig::default(),
            retrieval: RetrievalSettings::default(),
            bench: BenchSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| crate::UsageError(format!("{}: {e}", path.display())).into())
    }
}

/// Flags shared by every command. Unset flags leave the configuration
/// file (or the defaults) in charge.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// JSON configuration file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Evidence paragraphs per instance
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// KL threshold for stopping EM
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    #[arg(long, global = true)]
    pub beam: Option<usize>,
    #[arg(long, global = true, value_parser = parse_strategy)]
    pub strategy: Option<Strategy>,
    #[arg(long = "t-max", global = true)]
    pub t_max: Option<usize>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    s.parse().map_err(|e: emin::Error| e.to_string())
}

impl Common {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        c.synth.seed = c.seed;
        c.bench.model.seed = c.seed;
        if let Some(k) = self.k {
            c.em.k = k;
            c.synth.paragraphs_per_instance = k;
        }
        if let Some(e) = self.epsilon {
            c.em.epsilon = e;
        }
        if let Some(b) = self.beam {
            c.em.beam_width = b;
        }
        if let Some(s) = self.strategy {
            c.em.strategy = s;
        }
        if let Some(t) = self.t_max {
            c.em.t_max = t;
        }
        Ok(c)
    }

    pub fn out_or(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"seed": 3, "em": {"epsilon": 0.5, "t_max": 4}}"#).unwrap();
        let common = Common {
            config: Some(path),
            t_max: Some(9),
            ..Common::default()
        };
        let c = common.resolve().unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.em.epsilon, 0.5);
        assert_eq!(c.em.t_max, 9);
        assert_eq!(c.em.beam_width, EMConfig::default().beam_width);
    }

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
    }
}
