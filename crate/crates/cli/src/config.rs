//! Experiment configuration (TOML). Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ullsnn_core::arch::LayerDesc;
use ullsnn_core::convert::ConversionMode;
use ullsnn_core::data::{load_idx_dataset, Dataset, Synthetic};
use ullsnn_core::dnn::{StatsConfig, TrainConfig};
use ullsnn_core::energy::EnergyModel;
use ullsnn_core::Execution;

use crate::exit::CliError;

/// Environment variable naming the root under which runs without an explicit
/// output directory are placed (as `<root>/<name>`).
pub const OUTPUT_ROOT_ENV: &str = "ULLSNN_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    /// Master seed; every stage derives its own stream from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_time_steps")]
    pub time_steps: usize,
    #[serde(default = "default_mode")]
    pub mode: ConversionMode,
    pub dataset: DatasetConfig,
    pub network: NetworkConfig,
    #[serde(default)]
    pub dnn: TrainConfig,
    #[serde(default = "default_snn_training")]
    pub snn: TrainConfig,
    #[serde(default)]
    pub calibration: StatsConfig,
    #[serde(default)]
    pub energy: EnergyModel,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub sequential: bool,
}

fn default_name() -> String {
    "run".into()
}

fn default_time_steps() -> usize {
    2
}

fn default_mode() -> ConversionMode {
    ConversionMode::Scaled
}

fn default_snn_training() -> TrainConfig {
    TrainConfig {
        epochs: 10,
        learning_rate: 0.01,
        momentum: 0.9,
        ..TrainConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default)]
    pub synthetic: Option<Synthetic>,
    #[serde(default)]
    pub idx: Option<IdxFiles>,
    /// Share of the samples held out for testing.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_test_fraction() -> f64 {
    0.25
}

/// Paths are relative to the directory holding the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxFiles {
    pub images: PathBuf,
    pub labels: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Hidden layers; a dense readout with one output per class is appended.
    pub hidden: Vec<LayerDesc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Step counts swept by `analyze`.
    pub time_steps: Vec<usize>,
    pub resamples: usize,
    /// Replace network activations with a synthetic sample.
    pub inject: Option<Injection>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            time_steps: (1..=5).collect(),
            resamples: 200,
            inject: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum Injection {
    Uniform { mu: f64, samples: usize },
    /// Exponential with the given rate, analysed against `mu`.
    Exponential { rate: f64, mu: f64, samples: usize },
}

/// Values given on the command line; each wins over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub time_steps: Option<usize>,
    pub mode: Option<ConversionMode>,
    pub sequential: bool,
    pub dnn_epochs: Option<usize>,
    pub snn_epochs: Option<usize>,
    pub sweep: Option<Vec<usize>>,
    pub resamples: Option<usize>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads, applies overrides, resolves relative paths and validates.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(idx) = cfg.dataset.idx.as_mut() {
            idx.images = base.join(&idx.images);
            idx.labels = base.join(&idx.labels);
        }
        if let Some(dir) = cfg.output_dir.as_mut() {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(dir) = &o.output_dir {
            self.output_dir = Some(dir.clone());
        }
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(t) = o.time_steps {
            self.time_steps = t;
        }
        if let Some(mode) = o.mode {
            self.mode = mode;
        }
        self.sequential |= o.sequential;
        if let Some(e) = o.dnn_epochs {
            self.dnn.epochs = e;
        }
        if let Some(e) = o.snn_epochs {
            self.snn.epochs = e;
        }
        if let Some(sweep) = &o.sweep {
            self.analysis.time_steps = sweep.clone();
        }
        if let Some(r) = o.resamples {
            self.analysis.resamples = r;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.time_steps == 0 {
            return bad("time_steps must be at least 1".into());
        }
        match (&self.dataset.synthetic, &self.dataset.idx) {
            (Some(_), None) => {}
            (None, Some(idx)) => {
                for p in [&idx.images, &idx.labels] {
                    if !p.is_file() {
                        return bad(format!("dataset file {} does not exist", p.display()));
                    }
                }
            }
            _ => return bad("dataset needs exactly one of [dataset.synthetic] or [dataset.idx]".into()),
        }
        if !(0.0 < self.dataset.test_fraction && self.dataset.test_fraction < 1.0) {
            return bad(format!("test_fraction {} outside (0, 1)", self.dataset.test_fraction));
        }
        if self.network.hidden.is_empty() {
            return bad("network.hidden must list at least one layer".into());
        }
        self.dnn.validate().map_err(|e| CliError::Config(format!("[dnn] {e}")))?;
        self.snn.validate().map_err(|e| CliError::Config(format!("[snn] {e}")))?;
        EnergyModel::new(self.energy.e_mac_pj, self.energy.e_ac_pj)?;
        if self.analysis.time_steps.is_empty() || self.analysis.time_steps.contains(&0) {
            return bad("analysis.time_steps must be non-empty and positive".into());
        }
        if self.analysis.resamples < 2 {
            return bad("analysis.resamples must be at least 2".into());
        }
        if let Some(inj) = &self.analysis.inject {
            let (mu, samples) = match *inj {
                Injection::Uniform { mu, samples } | Injection::Exponential { mu, samples, .. } => (mu, samples),
            };
            if !(mu > 0.0 && mu.is_finite()) || samples == 0 {
                return bad("analysis.inject needs a positive mu and sample count".into());
            }
        }
        Ok(())
    }

    pub fn execution(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }

    /// Output directory: flag, then config, then `$ULLSNN_OUTPUT_ROOT/<name>`,
    /// then `runs/<name>`.
    pub fn output_dir(&self) -> PathBuf {
        if let Some(dir) = &self.output_dir {
            return dir.clone();
        }
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(&self.name)
    }

    /// Train/test split of the configured dataset.
    pub fn datasets(&self) -> Result<(Dataset, Dataset), CliError> {
        let data = match (&self.dataset.synthetic, &self.dataset.idx) {
            (Some(gen), _) => gen.generate(self.stage_seed(Stage::Data))?,
            (_, Some(idx)) => load_idx_dataset(&idx.images, &idx.labels)?,
            _ => unreachable!("validated"),
        };
        Ok(data.split(1.0 - self.dataset.test_fraction, self.stage_seed(Stage::Split))?)
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        let local = match stage {
            Stage::Dnn => self.dnn.seed,
            Stage::Snn => self.snn.seed,
            Stage::Calibration => self.calibration.seed,
            _ => 0,
        };
        ullsnn_core::par::derive_seed(self.seed, &[stage as u64, local])
    }

    pub fn dnn_training(&self) -> TrainConfig {
        TrainConfig {
            seed: self.stage_seed(Stage::Dnn),
            execution: self.execution(),
            ..self.dnn.clone()
        }
    }

    pub fn snn_training(&self) -> TrainConfig {
        TrainConfig {
            seed: self.stage_seed(Stage::Snn),
            execution: self.execution(),
            ..self.snn.clone()
        }
    }

    pub fn stats(&self) -> StatsConfig {
        StatsConfig {
            seed: self.stage_seed(Stage::Calibration),
            execution: self.execution(),
            ..self.calibration
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Stage {
    Data = 1,
    Split = 2,
    Init = 3,
    Dnn = 4,
    Calibration = 5,
    Snn = 6,
    Analysis = 7,
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [dataset.synthetic]
        generator = "blobs"
        classes = 3
        dim = 2
        samples_per_class = 10
        separation = 2.0
        spread = 0.5

        [network]
        hidden = [{ type = "dense", units = 8 }]
    "#;

    #[test]
    fn defaults_fill_in() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.time_steps, 2);
        assert_eq!(cfg.mode, ConversionMode::Scaled);
        assert_eq!(cfg.analysis.resamples, 200);
        assert_eq!(cfg.dnn, TrainConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for extra in ["tiem_steps = 3\n", "[dnn]\nepoch = 3\n", "[analysis]\nresample = 3\n"] {
            let text = format!("{extra}{MINIMAL}");
            assert!(matches!(ExperimentConfig::parse(&text), Err(CliError::Config(_))), "{extra}");
        }
        let nested = MINIMAL.replace("spread = 0.5", "spread = 0.5\nsprad = 1.0");
        assert!(ExperimentConfig::parse(&nested).is_err());
    }

    #[test]
    fn overrides_win() {
        let mut cfg = ExperimentConfig::parse(&format!("time_steps = 4\nseed = 3\n{MINIMAL}")).unwrap();
        cfg.apply(&Overrides { time_steps: Some(1), mode: Some(ConversionMode::Naive), ..Overrides::default() });
        assert_eq!((cfg.time_steps, cfg.seed, cfg.mode), (1, 3, ConversionMode::Naive));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let mut cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        cfg.time_steps = 0;
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
        let mut cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        cfg.dataset.idx = Some(IdxFiles { images: "a".into(), labels: "b".into() });
        assert!(cfg.validate().is_err());
        cfg.dataset.synthetic = None;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stage_seeds_are_distinct_and_stable() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_ne!(cfg.stage_seed(Stage::Dnn), cfg.stage_seed(Stage::Snn));
        assert_eq!(cfg.stage_seed(Stage::Dnn), cfg.clone().stage_seed(Stage::Dnn));
    }
}
