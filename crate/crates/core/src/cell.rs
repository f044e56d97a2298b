//! The recurrent cell: observation memory `C_t`, source memory `C_{V,t}`,
//! homogeneous solution `H_t`, source estimate `V_t` and the next-frame
//! forecast.
//!
//! The same state machine also drives the two baselines; [`ModelKind`]
//! selects what the network reads and whether the physics term is added.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result, Shape};
use crate::field::{Field, FieldStack};
use crate::pde::{homogeneous_update, PdeModel};
use crate::rednet::{RedNet, RedNetConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Physics term plus a network over estimated sources.
    Phicnet,
    /// Physics term plus a corrective network over the observation memory.
    PdeRnnCnn,
    /// Network over the last `n + K` observations; no physics.
    RednetFull,
}

impl ModelKind {
    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::Phicnet => "phicnet",
            ModelKind::PdeRnnCnn => "pde_rnn_cnn",
            ModelKind::RednetFull => "rednet_full",
        }
    }

    pub fn uses_physics(self) -> bool {
        self != ModelKind::RednetFull
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "phicnet" => Ok(ModelKind::Phicnet),
            "pde_rnn_cnn" => Ok(ModelKind::PdeRnnCnn),
            "rednet_full" => Ok(ModelKind::RednetFull),
            other => Err(config_err(format!("unknown model kind `{other}`"))),
        }
    }
}

/// Finite-difference coefficients of an order-`m` backward extrapolation:
/// entry `p` (0-based) is `(-1)^p · C(m, p + 1)`.
pub fn temporal_coeffs(m: usize) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(config_err("temporal order must be at least 1"));
    }
    let mut out = Vec::with_capacity(m);
    let mut binom = 1.0; // C(m, 0)
    for p in 0..m {
        binom = binom * (m - p) as f64 / (p + 1) as f64;
        out.push(if p % 2 == 0 { binom } else { -binom });
    }
    Ok(out)
}

/// Everything a rollout needs: the physics, the source order `K` and the
/// network.
#[derive(Clone, Debug, PartialEq)]
pub struct CellConfig {
    pub kind: ModelKind,
    pub model: PdeModel,
    pub k: usize,
    pub net: RedNet,
}

impl CellConfig {
    /// A cell whose network starts as the order-`k` finite-difference source
    /// extrapolator.
    pub fn phicnet(model: PdeModel, k: usize, widths: Vec<usize>, seed: u64) -> Result<Self> {
        let net_cfg = RedNetConfig { depth: k, channels: model.channels(), widths, kernel: 3, identity_path: true };
        let net = RedNet::new(net_cfg, &temporal_coeffs(k)?, seed)?;
        Self::new(ModelKind::Phicnet, model, k, net)
    }

    pub fn new(kind: ModelKind, model: PdeModel, k: usize, net: RedNet) -> Result<Self> {
        let cfg = Self { kind, model, k, net };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(config_err("source order K must be at least 1"));
        }
        let nc = self.net.config();
        if nc.channels != self.model.channels() {
            return Err(config_err(format!(
                "network emits {} channels, system has {}",
                nc.channels,
                self.model.channels()
            )));
        }
        if nc.depth != self.stream_depth() {
            return Err(config_err(format!(
                "{} network must read {} maps, configured for {}",
                self.kind.tag(),
                self.stream_depth(),
                nc.depth
            )));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.model.temporal_order()
    }

    /// Frames consumed before the first scored prediction.
    pub fn warmup_len(&self) -> usize {
        self.n() + self.k
    }

    /// Number of maps the network reads.
    pub fn stream_depth(&self) -> usize {
        match self.kind {
            ModelKind::Phicnet => self.k,
            ModelKind::PdeRnnCnn => self.n(),
            ModelKind::RednetFull => self.n() + self.k,
        }
    }

    pub fn field_shape(&self, height: usize, width: usize) -> Shape {
        Shape::new(self.model.channels(), height, width)
    }
}

/// Recurrent state. `c_v` holds source estimates for the cell and the raw
/// observations the baselines' networks read.
#[derive(Clone, Debug, PartialEq)]
pub struct CellState {
    pub c_u: FieldStack,
    pub c_v: FieldStack,
    pub h_prev: Field,
    pub t: usize,
}

/// One forecast: the next frame and, where the model exposes one, the
/// source map it implies.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub u_hat: Field,
    pub v_hat: Option<Field>,
}

/// `H = Σ_p w_hc[p]·C_t[p] + f(C_t[0])`.
pub fn homogeneous_step(state: &CellState, cfg: &CellConfig) -> Result<Field> {
    homogeneous_update(&cfg.model, &state.c_u, &temporal_coeffs(cfg.n())?)
}

/// `V_t = U_t − H_{t−1}`.
pub fn estimate_source(state: &CellState, u_in: &Field) -> Result<Field> {
    u_in.sub(&state.h_prev)
}

impl CellState {
    pub fn empty(cfg: &CellConfig, shape: Shape) -> Result<Self> {
        Ok(Self {
            c_u: FieldStack::zeros(cfg.n(), shape)?,
            c_v: FieldStack::zeros(cfg.stream_depth(), shape)?,
            h_prev: Field::zeros(shape),
            t: 0,
        })
    }

    fn prefill(&mut self, u: Field, cfg: &CellConfig) -> Result<()> {
        if cfg.kind != ModelKind::Phicnet {
            self.c_v.push(u.clone())?;
        }
        self.c_u.push(u)?;
        self.t += 1;
        Ok(())
    }

    /// Consumes one frame: updates both memories and `h_prev`.
    pub fn ingest(&mut self, u_in: &Field, cfg: &CellConfig) -> Result<()> {
        let stream = match cfg.kind {
            ModelKind::Phicnet => estimate_source(self, u_in)?,
            _ => u_in.clone(),
        };
        self.c_v.push(stream)?;
        self.c_u.push(u_in.clone())?;
        if cfg.kind.uses_physics() {
            self.h_prev = homogeneous_step(self, cfg)?;
        }
        self.t += 1;
        Ok(())
    }

    /// Forecast of the frame after the last one ingested.
    pub fn predict(&self, cfg: &CellConfig) -> Result<Prediction> {
        let out = cfg.net.forward(&self.c_v)?;
        Ok(match cfg.kind {
            ModelKind::RednetFull => Prediction { u_hat: out, v_hat: None },
            _ => Prediction { u_hat: self.h_prev.add(&out)?, v_hat: Some(out) },
        })
    }
}

/// Replays the first `n + K` frames: `n` fill the observation memory, the
/// homogeneous step of that memory seeds `h_prev`, and each remaining frame
/// produces one source estimate.
pub fn warmup(frames: &[Field], cfg: &CellConfig) -> Result<CellState> {
    if frames.len() != cfg.warmup_len() {
        return Err(Error::LengthMismatch { context: "warmup frames", expected: cfg.warmup_len(), found: frames.len() });
    }
    let mut state = CellState::empty(cfg, frames[0].shape())?;
    let n = cfg.n();
    for f in &frames[..n] {
        state.prefill(f.clone(), cfg)?;
    }
    if cfg.kind.uses_physics() {
        state.h_prev = homogeneous_step(&state, cfg)?;
    }
    for f in &frames[n..] {
        state.ingest(f, cfg)?;
    }
    Ok(state)
}

/// Ingests `u_in` and forecasts the next frame.
pub fn cell_step(state: &mut CellState, u_in: &Field, cfg: &CellConfig) -> Result<Prediction> {
    state.ingest(u_in, cfg)?;
    state.predict(cfg)
}

/// Predictions for frames `n + K ..= n + K + horizon − 1` of a rollout
/// started from `frames[..n + K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub u_hat: Vec<Field>,
    pub v_hat: Vec<Option<Field>>,
    /// Fresh source estimates `V_t` made when each predicted frame was
    /// ingested (cell only; the last prediction is never ingested).
    pub v_est: Vec<Field>,
}

/// Closed loop feeds predictions back; teacher forcing feeds `frames`,
/// which must then cover the whole horizon.
pub fn rollout(cfg: &CellConfig, frames: &[Field], horizon: usize, teacher_forced: bool) -> Result<Rollout> {
    let w = cfg.warmup_len();
    let needed = if teacher_forced { w + horizon - 1 } else { w };
    if frames.len() < needed.max(w) {
        return Err(Error::LengthMismatch { context: "rollout frames", expected: needed.max(w), found: frames.len() });
    }
    let mut state = warmup(&frames[..w], cfg)?;
    let mut out = Rollout { u_hat: Vec::with_capacity(horizon), v_hat: Vec::with_capacity(horizon), v_est: Vec::new() };
    let mut pred = state.predict(cfg)?;
    for step in 0..horizon {
        if step > 0 {
            let input = if teacher_forced { frames[w + step - 1].clone() } else { out.u_hat[step - 1].clone() };
            pred = cell_step(&mut state, &input, cfg)?;
            if cfg.kind == ModelKind::Phicnet {
                out.v_est.push(state.c_v.newest().clone());
            }
        }
        if !pred.u_hat.is_finite() {
            return Err(Error::NonFinite("rollout prediction"));
        }
        out.u_hat.push(pred.u_hat.clone());
        out.v_hat.push(pred.v_hat.clone());
    }
    Ok(out)
}
