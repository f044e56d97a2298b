//! Checkpoint files: `<name>.ckpt.json` manifest plus `<name>.params.bin`,
//! a little-endian f64 blob holding the physical scalars, the network
//! parameters (`w_vc`, encoder weights, decoder weights, biases) and, when
//! flagged, the optimizer moments.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cell::{CellConfig, ModelKind};
use crate::error::{Error, Result};
use crate::field::BoundaryRule;
use crate::pde::{PdeModel, PhysParams, SystemKind};
use crate::rednet::{RedNet, RedNetConfig};

use super::optim::{Optimizer, OptimizerKind};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub name: String,
    pub system: SystemKind,
    pub model_kind: ModelKind,
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub theta_names: Vec<String>,
    pub theta_trainable: Vec<bool>,
    pub boundary: BoundaryRule,
    pub advection_scale: f64,
    /// Factor the training data was divided by.
    pub norm_scale: f64,
    pub architecture: RedNetConfig,
    pub param_count: usize,
    pub optimizer_state: bool,
    #[serde(default)]
    pub optimizer: Option<OptimizerKind>,
    #[serde(default)]
    pub optimizer_lr: Option<(f64, f64)>,
    #[serde(default)]
    pub optimizer_steps: u64,
    pub byte_order: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub name: String,
    pub cell: CellConfig,
    pub norm_scale: f64,
    pub optimizer: Option<Optimizer>,
    /// Step sizes the optimizer was built with, `(network, theta)`.
    pub optimizer_lr: Option<(f64, f64)>,
}

impl Checkpoint {
    pub fn new(name: impl Into<String>, cell: CellConfig, norm_scale: f64) -> Self {
        Self { name: name.into(), cell, norm_scale, optimizer: None, optimizer_lr: None }
    }

    pub fn paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
        (dir.join(format!("{name}.ckpt.json")), dir.join(format!("{name}.params.bin")))
    }

    pub fn manifest(&self) -> CheckpointManifest {
        let model = &self.cell.model;
        CheckpointManifest {
            format_version: FORMAT_VERSION,
            name: self.name.clone(),
            system: model.kind(),
            model_kind: self.cell.kind,
            n: self.cell.n(),
            k: self.cell.k,
            theta_names: model.kind().param_names().iter().map(|s| s.to_string()).collect(),
            theta_trainable: model.params.trainable.clone(),
            boundary: model.boundary(),
            advection_scale: model.advection_scale(),
            norm_scale: self.norm_scale,
            architecture: self.cell.net.config().clone(),
            param_count: self.cell.net.params().len(),
            optimizer_state: self.optimizer.is_some(),
            optimizer: self.optimizer.as_ref().map(|o| o.kind()),
            optimizer_lr: self.optimizer_lr,
            optimizer_steps: self.optimizer.as_ref().map_or(0, |o| o.steps()),
            byte_order: "little".into(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir)?;
        let (mpath, bpath) = Self::paths(dir, &self.name);
        fs::write(&mpath, serde_json::to_string_pretty(&self.manifest())?)?;
        let mut values: Vec<f64> = self.cell.model.params.values.clone();
        values.extend_from_slice(self.cell.net.params());
        if let Some(opt) = &self.optimizer {
            values.extend(opt.state());
        }
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(&bpath, bytes)?;
        Ok((mpath, bpath))
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let m: CheckpointManifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint format_version {}", m.format_version)));
        }
        if m.byte_order != "little" {
            return Err(Error::Format(format!("unsupported byte order `{}`", m.byte_order)));
        }
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let (_, bpath) = Self::paths(dir, &m.name);
        let bytes = fs::read(&bpath)?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Format("parameter blob length is not a multiple of 8".into()));
        }
        let values: Vec<f64> =
            bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk"))).collect();
        let nt = m.theta_names.len();
        if m.theta_trainable.len() != nt || nt != m.system.param_names().len() {
            return Err(Error::Format("physical parameter list does not match the system".into()));
        }
        if m.param_count != m.architecture.param_count() {
            return Err(Error::Format(format!(
                "manifest declares {} network parameters, architecture implies {}",
                m.param_count,
                m.architecture.param_count()
            )));
        }
        let base = nt + m.param_count;
        if values.len() < base {
            return Err(Error::Format(format!("parameter blob holds {} values, need at least {base}", values.len())));
        }
        let mut model = PdeModel::with_boundary(m.system, values[0], m.boundary);
        model.params = PhysParams { values: values[..nt].to_vec(), trainable: m.theta_trainable.clone() };
        model.set_advection_scale(m.advection_scale);
        let net = RedNet::from_params(m.architecture.clone(), values[nt..base].to_vec())?;
        let cell = CellConfig::new(m.model_kind, model, m.k, net)?;
        if cell.n() != m.n {
            return Err(Error::Format(format!("manifest n={} but {} has order {}", m.n, m.system.name(), cell.n())));
        }
        let optimizer = match (m.optimizer_state, m.optimizer, m.optimizer_lr) {
            (true, Some(kind), Some((lr, theta_lr))) => {
                let mut opt = Optimizer::new(kind, &cell, lr, theta_lr);
                opt.restore(m.optimizer_steps, &values[base..])?;
                Some(opt)
            }
            (true, _, _) => return Err(Error::Format("optimizer state flagged but its settings are missing".into())),
            (false, _, _) => {
                if values.len() != base {
                    return Err(Error::Format(format!("parameter blob holds {} values, expected {base}", values.len())));
                }
                None
            }
        };
        Ok(Self { name: m.name, cell, norm_scale: m.norm_scale, optimizer, optimizer_lr: m.optimizer_lr })
    }
}
