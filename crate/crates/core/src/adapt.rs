//! Online re-fitting of the physical parameters while the network stays
//! frozen.
//!
//! The session runs teacher-forced: each step forecasts the next frame,
//! receives the true observation, and when the relative error
//! `‖U − Û‖² / ‖U‖²` exceeds `e_th` re-fits θ by gradient descent on the
//! one-step prediction loss over the most recent `window` frames. After a
//! re-fit the recurrent state is rebuilt from the stored observations.
//!
//! A window that straddles a parameter change fits neither regime, so a
//! trigger keeps the session re-fitting for one full window: the last fit
//! of the episode sees only frames from after the change.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::cell::{warmup, CellConfig, CellState, ModelKind, Prediction};
use crate::error::{config_err, Error, Result};
use crate::field::Field;
use crate::train::{bptt_gradients, rollout_loss, Regime};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    /// Relative squared error that triggers a re-fit.
    pub e_th: f64,
    /// Maximum accepted descent steps per trigger.
    pub inner_steps: usize,
    /// Initial step length relative to `|θ|`; grows after accepted steps
    /// and halves on rejected ones.
    pub inner_lr: f64,
    /// Frames in the re-fit window, warmup included.
    pub window: usize,
}

impl AdaptConfig {
    /// Defaults for `cell`: `e_th = 0.02`, 20 inner steps, window `n + K + 16`.
    pub fn for_cell(cell: &CellConfig) -> Self {
        Self { e_th: 0.02, inner_steps: 20, inner_lr: 0.1, window: cell.warmup_len() + 16 }
    }

    pub fn validate(&self, cell: &CellConfig) -> Result<()> {
        if self.e_th.is_nan() || self.e_th <= 0.0 {
            return Err(config_err(format!("e_th must be positive, got {}", self.e_th)));
        }
        if self.inner_steps == 0 {
            return Err(config_err("inner_steps must be at least 1"));
        }
        if !(self.inner_lr > 0.0 && self.inner_lr.is_finite()) {
            return Err(config_err(format!("inner_lr must be positive, got {}", self.inner_lr)));
        }
        if self.window <= cell.warmup_len() {
            return Err(config_err(format!(
                "window must exceed the {} warmup frames, got {}",
                cell.warmup_len(),
                self.window
            )));
        }
        if cell.kind != ModelKind::Phicnet {
            return Err(config_err("online adaptation needs a phicnet cell"));
        }
        Ok(())
    }
}

/// `‖U − Û‖² / ‖U‖²`.
pub fn relative_error(u: &Field, u_hat: &Field) -> Result<f64> {
    let denom = u.norm_l2_sq();
    if denom == 0.0 {
        return Err(Error::UndefinedMetric("relative error of an all-zero frame"));
    }
    Ok(u.sub(u_hat)?.norm_l2_sq() / denom)
}

/// Outcome of one online step.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptStep {
    pub error: f64,
    pub triggered: bool,
    /// Physical parameters after the step.
    pub theta: Vec<f64>,
    /// Descent steps accepted during the re-fit.
    pub accepted: usize,
}

/// Owns the model for the duration of an online run.
pub struct AdaptSession {
    cell: CellConfig,
    cfg: AdaptConfig,
    state: CellState,
    history: VecDeque<Field>,
    steps: usize,
    /// Re-fits still owed to the current episode.
    pending: usize,
}

impl AdaptSession {
    /// Starts from the first `n + K` observations.
    pub fn new(cell: CellConfig, cfg: AdaptConfig, warm: &[Field]) -> Result<Self> {
        cfg.validate(&cell)?;
        let state = warmup(warm, &cell)?;
        Ok(Self { cell, cfg, state, history: warm.iter().cloned().collect(), steps: 0, pending: 0 })
    }

    pub fn cell(&self) -> &CellConfig {
        &self.cell
    }

    pub fn into_cell(self) -> CellConfig {
        self.cell
    }

    pub fn theta(&self) -> &[f64] {
        &self.cell.model.params.values
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Forecast of the next observation under the current θ.
    pub fn predict(&self) -> Result<Prediction> {
        self.state.predict(&self.cell)
    }

    /// Scores the forecast against `u`, re-fits θ if the error is above
    /// threshold or an episode is still running, and advances the state
    /// with the true observation.
    pub fn adapt_step(&mut self, u: &Field) -> Result<AdaptStep> {
        let pred = self.predict()?;
        let error = relative_error(u, &pred.u_hat)?;
        self.history.push_back(u.clone());
        while self.history.len() > self.cfg.window {
            self.history.pop_front();
        }
        self.steps += 1;
        let mut accepted = 0;
        let triggered = error > self.cfg.e_th;
        if triggered {
            self.pending = self.cfg.window;
        }
        if self.pending > 0 && self.history.len() > self.cell.warmup_len() {
            self.pending -= 1;
            let window: Vec<Field> = self.history.iter().cloned().collect();
            let (theta, n) = refit(&self.cell, &window, &self.cfg)?;
            accepted = n;
            if n > 0 {
                self.cell.model.params.values = theta;
                let w = self.cell.warmup_len();
                self.state = warmup(&window[window.len() - w..], &self.cell)?;
            } else {
                self.state.ingest(u, &self.cell)?;
            }
        } else {
            self.state.ingest(u, &self.cell)?;
        }
        Ok(AdaptStep { error, triggered, theta: self.theta().to_vec(), accepted })
    }
}

fn window_loss(cell: &CellConfig, window: &[Field]) -> Option<f64> {
    rollout_loss(cell, window, Regime::TeacherForced, 0.0).ok().map(|r| r.loss.l_pred).filter(|l| l.is_finite())
}

/// Backtracking descent on θ alone. Returns the new θ and how many steps
/// were accepted; a non-finite loss or gradient at the start leaves θ as
/// it was.
fn refit(cell: &CellConfig, window: &[Field], cfg: &AdaptConfig) -> Result<(Vec<f64>, usize)> {
    let mut work = cell.clone();
    let Some(mut loss) = window_loss(&work, window) else {
        return Ok((cell.model.params.values.clone(), 0));
    };
    let mut rel = cfg.inner_lr;
    let mut accepted = 0;
    for _ in 0..cfg.inner_steps {
        let grads = match bptt_gradients(&work, window, Regime::TeacherForced, 0.0) {
            Ok((_, g)) => g,
            Err(Error::NonFinite(_) | Error::NonFiniteGradient { .. }) => break,
            Err(e) => return Err(e),
        };
        let trainable = &work.model.params.trainable;
        let g: Vec<f64> = grads.theta.iter().zip(trainable).map(|(g, t)| if *t { *g } else { 0.0 }).collect();
        let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !gnorm.is_finite() || gnorm == 0.0 {
            break;
        }
        let theta0 = work.model.params.values.clone();
        let scale = theta0.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
        let mut improved = false;
        while rel > 1e-6 {
            let mut trial = work.clone();
            for (v, gi) in trial.model.params.values.iter_mut().zip(&g) {
                *v -= rel * scale * gi / gnorm;
            }
            trial.model.params.clamp();
            match window_loss(&trial, window) {
                Some(l) if l < loss => {
                    loss = l;
                    work = trial;
                    improved = true;
                    break;
                }
                _ => rel *= 0.5,
            }
        }
        if !improved {
            break;
        }
        accepted += 1;
        rel *= 1.5;
    }
    Ok((work.model.params.values, accepted))
}

/// One row of an adaptation trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub error: f64,
    pub triggered: bool,
    pub theta_estimate: f64,
    pub theta_true: Option<f64>,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("step,error,triggered,theta_estimate,theta_true\n");
    for r in rows {
        let truth = r.theta_true.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{}\n", r.step, r.error, r.triggered as u8, r.theta_estimate, truth));
    }
    out
}

/// Runs a session over `frames` (warmup included). `theta_true(j)` gives
/// the coefficient in force when frame `j` was generated, when known.
pub fn run_stream(
    cell: CellConfig,
    cfg: AdaptConfig,
    frames: &[Field],
    theta_true: Option<&dyn Fn(usize) -> f64>,
) -> Result<(Vec<TraceRow>, CellConfig)> {
    let w = cell.warmup_len();
    if frames.len() <= w {
        return Err(Error::LengthMismatch { context: "adaptation stream", expected: w + 1, found: frames.len() });
    }
    let mut session = AdaptSession::new(cell, cfg, &frames[..w])?;
    let mut rows = Vec::with_capacity(frames.len() - w);
    for (j, u) in frames.iter().enumerate().skip(w) {
        let s = session.adapt_step(u)?;
        rows.push(TraceRow {
            step: j,
            error: s.error,
            triggered: s.triggered,
            theta_estimate: s.theta[0],
            theta_true: theta_true.map(|f| f(j)),
        });
    }
    Ok((rows, session.into_cell()))
}
