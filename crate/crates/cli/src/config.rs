use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use flownas_core::arch::{BnAccounting, HwThresholds};
use flownas_core::engine::TrainConfig;
use flownas_core::quant::QuantConfig;
use flownas_core::search::SearchConfig;
use flownas_core::session::{DEFAULT_SESSION_LEN, STRATEGY_COUNT};
use flownas_core::space::SearchSpaceConfig;

use crate::CliError;

pub const SEED_ENV: &str = "FLOWNAS_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub classes: u16,
    pub samples: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            samples: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub pcap_dir: Option<PathBuf>,
    pub label_map: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub strategy: u8,
    pub input_len: usize,
    /// Fraction of the dataset held out as a test set by `train`.
    pub test_split: f64,
    pub toy: Option<ToyConfig>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            pcap_dir: None,
            label_map: None,
            dataset: None,
            strategy: 2,
            input_len: DEFAULT_SESSION_LEN,
            test_split: 0.2,
            toy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub n_generations: usize,
    pub children_per_generation: usize,
    pub spawn_cap: Option<usize>,
}

impl Default for SearchSection {
    fn default() -> Self {
        let d = SearchConfig::default();
        Self {
            n_generations: d.n_generations,
            children_per_generation: d.children_per_generation,
            spawn_cap: d.spawn_cap,
        }
    }
}

/// Everything a run depends on. Loaded from TOML, then overridden by the
/// environment and command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub bn_accounting: BnAccounting,
    pub data: DataConfig,
    pub thresholds: HwThresholds,
    pub space: SearchSpaceConfig,
    pub train: TrainConfig,
    pub search: SearchSection,
    pub quant: QuantConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            bn_accounting: BnAccounting::default(),
            data: DataConfig::default(),
            thresholds: HwThresholds::DEFAULT,
            space: SearchSpaceConfig::default(),
            train: TrainConfig::default(),
            search: SearchSection::default(),
            quant: QuantConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&std::path::Path>) -> Result<Self, CliError> {
        let mut cfg = match path {
            None => Self::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
        };
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if !(1..=STRATEGY_COUNT).contains(&self.data.strategy) {
            return bad(format!(
                "strategy {} is outside 1..={STRATEGY_COUNT}",
                self.data.strategy
            ));
        }
        if self.data.input_len == 0 {
            return bad("input_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.data.test_split) {
            return bad("test_split must be in [0, 1)".into());
        }
        for (name, p) in [
            ("pcap_dir", &self.data.pcap_dir),
            ("label_map", &self.data.label_map),
            ("dataset", &self.data.dataset),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    return bad(format!("{name} {} does not exist", p.display()));
                }
            }
        }
        if let Some(t) = &self.data.toy {
            if t.classes < 2 || t.samples < t.classes as usize {
                return bad("toy dataset needs at least 2 classes and one sample per class".into());
            }
        }
        self.thresholds.validate().map_err(CliError::Config)?;
        self.space.validate().map_err(CliError::Config)?;
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.search.n_generations == 0 || self.search.children_per_generation == 0 {
            return bad("search counts must be positive".into());
        }
        if !(2..=16).contains(&self.quant.bits) {
            return bad(format!("quant bits {} outside 2..=16", self.quant.bits));
        }
        Ok(())
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            n_generations: self.search.n_generations,
            children_per_generation: self.search.children_per_generation,
            thresholds: self.thresholds,
            bn_accounting: self.bn_accounting,
            space: self.space.clone(),
            train: self.train_config(),
            seed: self.seed,
            spawn_cap: self.search.spawn_cap,
        }
    }
}
