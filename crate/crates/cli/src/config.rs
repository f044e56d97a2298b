//! Declarative run description shared by every subcommand. It is written
//! back, fully resolved, next to each command's outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use phicnet::adapt::AdaptConfig;
use phicnet::cell::{CellConfig, ModelKind};
use phicnet::pde::SystemKind;
use phicnet::sim::{Counts, DatasetConfig, GridSpec};
use phicnet::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Desk,
    Paper,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetOverrides {
    pub grid: Option<GridSpec>,
    pub frames_per_seq: Option<usize>,
    pub counts: Option<Counts>,
    pub theta: Option<f64>,
    /// Observation noise as a fraction of the dataset std.
    pub noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    #[serde(rename = "K")]
    pub k: usize,
    pub widths: Vec<usize>,
    /// Starting value of the physical parameter; the data's true value
    /// when absent.
    pub theta_init: Option<f64>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { kind: ModelKind::Phicnet, k: 1, widths: vec![16, 32], theta_init: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    pub horizon: usize,
    /// Horizon steps rendered as PGM images for the first test sequence.
    pub snapshots: Vec<usize>,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self { horizon: 10, snapshots: vec![10] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    #[serde(rename = "K")]
    K,
    Lambda,
    Noise,
}

impl SweepVariable {
    pub fn name(self) -> &'static str {
        match self {
            SweepVariable::K => "K",
            SweepVariable::Lambda => "lambda",
            SweepVariable::Noise => "noise",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub variable: SweepVariable,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptSpec {
    pub e_th: f64,
    pub inner_steps: usize,
    pub inner_lr: f64,
    /// `n + K + 16` when absent.
    pub window: Option<usize>,
    /// Length of the simulated stream, warmup included.
    pub frames: usize,
    /// `(first frame, value)` pairs for the true parameter.
    pub schedule: Vec<(usize, f64)>,
}

impl Default for AdaptSpec {
    fn default() -> Self {
        Self { e_th: 0.02, inner_steps: 20, inner_lr: 0.1, window: None, frames: 100, schedule: Vec::new() }
    }
}

impl AdaptSpec {
    pub fn resolve(&self, cell: &CellConfig) -> AdaptConfig {
        AdaptConfig {
            e_th: self.e_th,
            inner_steps: self.inner_steps,
            inner_lr: self.inner_lr,
            window: self.window.unwrap_or(AdaptConfig::for_cell(cell).window),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset manifest; the dataset is generated in memory when absent.
    pub dataset: Option<PathBuf>,
    /// Checkpoint manifest to evaluate, adapt or resume from.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: Option<String>,
    pub system: SystemKind,
    pub scale: Scale,
    pub seed: u64,
    pub dataset: DatasetOverrides,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub eval: EvalSpec,
    pub sweep: Option<SweepSpec>,
    pub adapt: AdaptSpec,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: None,
            system: SystemKind::Heat,
            scale: Scale::Desk,
            seed: 0,
            dataset: DatasetOverrides::default(),
            model: ModelSpec::default(),
            train: TrainConfig { epochs: 20, ..TrainConfig::default() },
            eval: EvalSpec::default(),
            sweep: None,
            adapt: AdaptSpec::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> phicnet::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| phicnet::Error::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| phicnet::Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies command-line overrides; the seed also drives training.
    pub fn resolve(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.train.seed = self.seed;
        self
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        let mut d = match self.scale {
            Scale::Desk => DatasetConfig::desk(self.system, self.seed),
            Scale::Paper => DatasetConfig::paper_scale(self.system, self.seed),
        };
        if let Some(name) = &self.name {
            d.name = name.clone();
        }
        let o = &self.dataset;
        if let Some(g) = o.grid {
            d.grid = g;
        }
        if let Some(f) = o.frames_per_seq {
            d.frames_per_seq = f;
        }
        if let Some(c) = o.counts {
            d.counts = c;
        }
        if let Some(t) = o.theta {
            d.theta = t;
        }
        d
    }

    pub fn write(&self, dir: &Path) -> phicnet::Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("run_config.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_json() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
        let partial: RunConfig = serde_json::from_str(r#"{"system":"wave","model":{"K":2}}"#).unwrap();
        assert_eq!(partial.system, SystemKind::Wave);
        assert_eq!(partial.model.k, 2);
        assert_eq!(partial.model.widths, vec![16, 32]);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sytem":"wave"}"#).is_err());
    }

    #[test]
    fn seed_override_reaches_training() {
        let cfg = RunConfig::default().resolve(Some(9));
        assert_eq!((cfg.seed, cfg.train.seed), (9, 9));
        assert_eq!(cfg.dataset_config().seed, 9);
    }

    #[test]
    fn shipped_configs_load() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let mut seen = 0;
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "json") {
                RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
                seen += 1;
            }
        }
        assert!(seen > 0);
    }
}
