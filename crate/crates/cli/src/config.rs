//! TOML run configuration. Command-line flags override file values, which
//! override built-in defaults.

use std::path::Path;

use anyhow::Context;
use escounts::{CorpusSpec, DecoderConfig, EvalConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Applied to every section when set.
    pub seed: Option<u64>,
    pub corpus: CorpusSpec,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Desk-scale defaults: short schedule, small grid.
    pub fn desk() -> Self {
        Self {
            train: TrainConfig::desk(),
            ..Self::default()
        }
    }

    /// Reads `path` over the desk defaults; `None` gives the defaults.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::desk());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut value: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        // sections missing from the file keep the desk schedule, not the long one
        if !value.contains_key("train") {
            value.insert("train".into(), toml::Value::try_from(TrainConfig::desk())?);
        } else if let Some(toml::Value::Table(t)) = value.get_mut("train") {
            let desk = toml::Value::try_from(TrainConfig::desk())?;
            if let toml::Value::Table(d) = desk {
                for (k, v) in d {
                    t.entry(k).or_insert(v);
                }
            }
        }
        toml::Value::Table(value)
            .try_into()
            .with_context(|| format!("invalid config {}", path.display()))
    }

    /// Resolves the seed (flag or environment first, then file) into every section.
    pub fn apply_seed(&mut self, flag: Option<u64>) {
        if let Some(seed) = flag.or(self.seed) {
            self.seed = Some(seed);
            self.corpus.seed = seed;
            self.train.seed = seed;
            self.eval.seed = seed;
        }
    }
}
