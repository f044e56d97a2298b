//! Rollout losses, backpropagation through time and the training loop.

pub mod checkpoint;
pub mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell::{temporal_coeffs, CellConfig, ModelKind};
use crate::error::{config_err, Error, Result};
use crate::field::Field;
use crate::pde::homogeneous_update_refs;
use crate::rednet::Tape;
use crate::sim::Sequence;
pub use checkpoint::Checkpoint;
pub use optim::{Optimizer, OptimizerKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// After warmup the model consumes its own forecasts.
    ClosedLoop,
    /// Observations are fed at every step.
    TeacherForced,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_pred: f64,
    pub l_source_pred: f64,
    pub l_source_sparse: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    fn new(l_pred: f64, l_source_pred: f64, l_source_sparse: f64, lambda: f64) -> Self {
        Self { l_pred, l_source_pred, l_source_sparse, total: l_pred + l_source_pred + lambda * l_source_sparse, lambda }
    }

    fn mean(items: &[LossBreakdown]) -> Self {
        let n = items.len().max(1) as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        let lambda = items.first().map_or(0.0, |l| l.lambda);
        Self::new(sum(|l| l.l_pred), sum(|l| l.l_source_pred), sum(|l| l.l_source_sparse), lambda)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Step size for the physical parameters; `lr` when absent.
    #[serde(default)]
    pub theta_lr: Option<f64>,
    pub optimizer: OptimizerKind,
    pub lambda: f64,
    pub regime: Regime,
    /// Global gradient-norm cap; non-positive disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    /// Sequences per optimizer step; all training sequences when absent.
    #[serde(default)]
    pub batch_size: Option<usize>,
    /// Cut every sequence into consecutive windows of this many frames
    /// (truncated rollouts); whole sequences when absent.
    #[serde(default)]
    pub window: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-3,
            theta_lr: None,
            optimizer: OptimizerKind::SgdMomentum { momentum: 0.9 },
            lambda: 1e-3,
            regime: Regime::ClosedLoop,
            clip_norm: 5.0,
            seed: 0,
            batch_size: None,
            window: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(config_err(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.lr >= 0.0) || !(self.theta_lr.unwrap_or(0.0) >= 0.0) {
            return Err(config_err("learning rates must be non-negative"));
        }
        if self.batch_size == Some(0) {
            return Err(config_err("batch_size must be positive"));
        }
        Ok(())
    }
}

/// Gradients split by parameter group. `theta` has one entry per physical
/// scalar (zero for frozen ones); `net` follows the network's flat layout,
/// which starts with `w_vc`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub theta: Vec<f64>,
    pub net: Vec<f64>,
}

impl Grads {
    pub fn zeros(cfg: &CellConfig) -> Self {
        Self { theta: vec![0.0; cfg.model.params.values.len()], net: vec![0.0; cfg.net.params().len()] }
    }

    pub fn norm(&self) -> f64 {
        self.theta.iter().chain(&self.net).map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn add_scaled(&mut self, other: &Grads, s: f64) {
        for (a, b) in self.theta.iter_mut().zip(&other.theta) {
            *a += s * b;
        }
        for (a, b) in self.net.iter_mut().zip(&other.net) {
            *a += s * b;
        }
    }

    /// Rescales to at most `max_norm`; returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.norm();
        if max_norm > 0.0 && norm > max_norm {
            let s = max_norm / norm;
            self.theta.iter_mut().chain(self.net.iter_mut()).for_each(|g| *g *= s);
        }
        norm
    }

    fn is_finite(&self) -> bool {
        self.theta.iter().chain(&self.net).all(|g| g.is_finite())
    }
}

/// Everything the reverse sweep needs from a forward unroll.
struct Unroll {
    /// Inputs `x_t` the model consumed.
    x: Vec<Field>,
    /// Stream values `s_t` read by the network (`V_t` for the cell).
    s: Vec<Option<Field>>,
    /// Network outputs `o_t` predicting step `t`.
    o: Vec<Option<Field>>,
    tapes: Vec<Option<Tape>>,
    u_hat: Vec<Option<Field>>,
    loss: LossBreakdown,
}

fn check_len(cfg: &CellConfig, frames: &[Field]) -> Result<()> {
    if frames.len() < cfg.warmup_len() + 1 {
        return Err(Error::LengthMismatch { context: "sequence frames", expected: cfg.warmup_len() + 1, found: frames.len() });
    }
    Ok(())
}

fn unroll(cfg: &CellConfig, frames: &[Field], regime: Regime, lambda: f64, keep_tapes: bool) -> Result<Unroll> {
    check_len(cfg, frames)?;
    let n = cfg.n();
    let w = cfg.warmup_len();
    let d = cfg.stream_depth();
    let last = frames.len() - 1;
    let phys = cfg.kind.uses_physics();
    let coeffs = temporal_coeffs(n)?;
    let scored = (last + 1 - w) as f64;

    let mut x: Vec<Field> = Vec::with_capacity(last + 1);
    let mut h: Vec<Option<Field>> = vec![None; last + 1];
    let mut s: Vec<Option<Field>> = vec![None; last + 1];
    let mut o: Vec<Option<Field>> = vec![None; last + 1];
    let mut tapes: Vec<Option<Tape>> = (0..=last).map(|_| None).collect();
    let mut u_hat: Vec<Option<Field>> = vec![None; last + 1];
    let (mut l_pred, mut l_src, mut l_sparse) = (0.0, 0.0, 0.0);

    for t in 0..=last {
        let input = if t < w || regime == Regime::TeacherForced {
            frames[t].clone()
        } else {
            u_hat[t].clone().expect("forecast exists for every scored step")
        };
        // stream value
        s[t] = match cfg.kind {
            ModelKind::Phicnet if t >= n => Some(input.sub(h[t - 1].as_ref().expect("H before V"))?),
            ModelKind::Phicnet => None,
            _ => Some(input.clone()),
        };
        x.push(input);
        if t >= w {
            let target = &frames[t];
            let pred = u_hat[t].as_ref().expect("scored step");
            l_pred += pred.sub(target)?.norm_l2_sq();
            if cfg.kind == ModelKind::Phicnet {
                let v_hat = o[t].as_ref().expect("scored step");
                l_src += s[t].as_ref().expect("stream").sub(v_hat)?.norm_l2_sq();
                l_sparse += v_hat.norm_l1();
            }
        }
        if t == last {
            break;
        }
        if phys && t + 1 >= n {
            let hist: Vec<&Field> = (0..n).map(|p| &x[t - p]).collect();
            h[t] = Some(homogeneous_update_refs(&cfg.model, &hist, &coeffs)?);
        }
        if t + 1 >= w {
            let slots: Vec<&Field> = (0..d).map(|p| s[t - p].as_ref().expect("stream filled")).collect();
            let (out, tape) = cfg.net.forward_tape(&Field::concat_channels(&slots)?)?;
            let pred = if phys { h[t].as_ref().expect("H computed").add(&out)? } else { out.clone() };
            if !pred.is_finite() {
                return Err(Error::NonFinite("forecast during unroll"));
            }
            u_hat[t + 1] = Some(pred);
            o[t + 1] = Some(out);
            if keep_tapes {
                tapes[t] = Some(tape);
            }
        }
    }
    let (l_src, l_sparse) = if cfg.kind == ModelKind::Phicnet { (l_src / scored, l_sparse / scored) } else { (0.0, 0.0) };
    let lambda = if cfg.kind == ModelKind::Phicnet { lambda } else { 0.0 };
    let loss = LossBreakdown::new(l_pred / scored, l_src, l_sparse, lambda);
    Ok(Unroll { x, s, o, tapes, u_hat, loss })
}

/// Forecasts and source predictions of one rollout with its losses.
#[derive(Clone, Debug)]
pub struct RolloutLoss {
    pub loss: LossBreakdown,
    /// `u_hat[i]` forecasts frame `n + K + i`.
    pub u_hat: Vec<Field>,
    pub v_hat: Vec<Option<Field>>,
}

/// Warmup on the first `n + K` frames, then scores every later frame.
pub fn rollout_loss(cfg: &CellConfig, frames: &[Field], regime: Regime, lambda: f64) -> Result<RolloutLoss> {
    let u = unroll(cfg, frames, regime, lambda, false)?;
    let w = cfg.warmup_len();
    let exposes_source = cfg.kind != ModelKind::RednetFull;
    Ok(RolloutLoss {
        loss: u.loss,
        u_hat: u.u_hat.into_iter().skip(w).map(|f| f.expect("scored")).collect(),
        v_hat: u.o.into_iter().skip(w).map(|f| if exposes_source { f } else { None }).collect(),
    })
}

/// Exact gradients of the rollout's total loss (unclipped).
/// A sequence of exactly `n + K` frames has nothing to score and yields
/// zero loss and zero gradients.
pub fn bptt_gradients(cfg: &CellConfig, frames: &[Field], regime: Regime, lambda: f64) -> Result<(LossBreakdown, Grads)> {
    if frames.len() == cfg.warmup_len() {
        return Ok((LossBreakdown { lambda, ..LossBreakdown::default() }, Grads::zeros(cfg)));
    }
    let u = unroll(cfg, frames, regime, lambda, true)?;
    let n = cfg.n();
    let w = cfg.warmup_len();
    let d = cfg.stream_depth();
    let last = frames.len() - 1;
    let phys = cfg.kind.uses_physics();
    let cell = cfg.kind == ModelKind::Phicnet;
    let coeffs = temporal_coeffs(n)?;
    let scored = (last + 1 - w) as f64;
    let lambda = u.loss.lambda;
    let shape = frames[0].shape();

    let mut grads = Grads::zeros(cfg);
    let mut xb: Vec<Field> = vec![Field::zeros(shape); last + 1];
    let mut hb: Vec<Field> = vec![Field::zeros(shape); last + 1];
    let mut sb: Vec<Field> = vec![Field::zeros(shape); last + 1];

    for t in (0..=last).rev() {
        // (1) the forecast of step t + 1 made after ingesting x_t
        if t < last && t + 1 >= w {
            let target = t + 1;
            let pred = u.u_hat[target].as_ref().expect("scored");
            let mut ub = pred.sub(&frames[target])?.scale(2.0 / scored);
            if regime == Regime::ClosedLoop {
                ub.add_assign(&xb[target])?;
            }
            let o = u.o[target].as_ref().expect("scored");
            let mut ob = ub.clone();
            if cell {
                let sv = u.s[target].as_ref().expect("stream");
                ob.axpy(-2.0 / scored, &sv.sub(o)?)?;
                ob.axpy(lambda / scored, &o.map(sign))?;
            }
            if phys {
                hb[t].add_assign(&ub)?;
            }
            let tape = u.tapes[t].as_ref().expect("tape kept");
            let (din, dnet) = cfg.net.backward(tape, &ob)?;
            for (g, v) in grads.net.iter_mut().zip(&dnet) {
                *g += v;
            }
            for (p, slot) in din.split_channels(d)?.into_iter().enumerate() {
                sb[t - p].add_assign(&slot)?;
            }
        }
        // (2) H_t = Σ_p w_hc[p] x_{t-p} + f(x_t)
        if phys && t < last && t + 1 >= n {
            let hbar = hb[t].clone();
            for (p, c) in coeffs.iter().enumerate() {
                xb[t - p].axpy(*c, &hbar)?;
            }
            let (dx, dtheta) = cfg.model.f_adjoint(&u.x[t], &hbar)?;
            xb[t].add_assign(&dx)?;
            for ((g, v), tr) in grads.theta.iter_mut().zip(&dtheta).zip(&cfg.model.params.trainable) {
                if *tr {
                    *g += v;
                }
            }
        }
        // (3) stream value s_t
        if let Some(st) = &u.s[t] {
            if cell && t >= w {
                let o = u.o[t].as_ref().expect("scored");
                sb[t].axpy(2.0 / scored, &st.sub(o)?)?;
            }
            let sbar = sb[t].clone();
            xb[t].add_assign(&sbar)?;
            if cell {
                hb[t - 1].axpy(-1.0, &sbar)?;
            }
        }
        if !xb[t].is_finite() || !grads.is_finite() {
            return Err(Error::NonFiniteGradient { step: t });
        }
    }
    Ok((u.loss, grads))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean loss and mean gradient over `batch`, reduced in sequence order.
pub fn batch_gradients(cfg: &CellConfig, batch: &[&Sequence], tcfg: &TrainConfig) -> Result<(LossBreakdown, Grads)> {
    let parts: Vec<(LossBreakdown, Grads)> = batch
        .par_iter()
        .map(|seq| bptt_gradients(cfg, &seq.frames_u, tcfg.regime, tcfg.lambda))
        .collect::<Result<_>>()?;
    let mut total = Grads::zeros(cfg);
    let s = 1.0 / batch.len() as f64;
    for (_, g) in &parts {
        total.add_scaled(g, s);
    }
    let losses: Vec<LossBreakdown> = parts.iter().map(|(l, _)| *l).collect();
    Ok((LossBreakdown::mean(&losses), total))
}

/// Mean loss over `seqs` (in parallel, reduced in order).
pub fn evaluate_loss(cfg: &CellConfig, seqs: &[Sequence], regime: Regime, lambda: f64) -> Result<LossBreakdown> {
    let losses: Vec<LossBreakdown> = seqs
        .par_iter()
        .map(|seq| Ok(unroll(cfg, &seq.frames_u, regime, lambda, false)?.loss))
        .collect::<Result<_>>()?;
    Ok(LossBreakdown::mean(&losses))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val_total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Parameters with the lowest validation loss seen.
    pub best: CellConfig,
    pub best_epoch: usize,
    /// Parameters after the final step.
    pub last: CellConfig,
    pub optimizer: Optimizer,
    pub curve: Vec<EpochRecord>,
    /// Epoch at which training stopped on a non-finite loss or gradient.
    pub diverged_at: Option<usize>,
}

impl TrainReport {
    pub fn curve_csv(&self) -> String {
        let mut out = String::from("epoch,l_pred,l_source_pred,l_source_sparse,total,val_total\n");
        for r in &self.curve {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch, r.train.l_pred, r.train.l_source_pred, r.train.l_source_sparse, r.train.total, r.val_total
            ));
        }
        out
    }
}

fn is_numerical(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_) | Error::NonFiniteGradient { .. } | Error::Unstable { .. })
}

/// Consecutive windows of `len` frames whose scored parts tile each
/// sequence: window `i` starts at `i · (len − warmup)`. A shorter tail is
/// kept if it scores at least one frame.
pub fn windows(seqs: &[Sequence], len: usize, warmup: usize) -> Result<Vec<Sequence>> {
    if len <= warmup {
        return Err(config_err(format!("training window of {len} frames leaves nothing after {warmup} warmup frames")));
    }
    let stride = len - warmup;
    let mut out = Vec::new();
    for seq in seqs {
        let mut start = 0;
        while start + warmup < seq.len() {
            let end = (start + len).min(seq.len());
            out.push(Sequence {
                frames_u: seq.frames_u[start..end].to_vec(),
                frames_v_true: seq.frames_v_true[start..end].to_vec(),
            });
            start += stride;
        }
    }
    Ok(out)
}

/// Trains `init` on `train`, keeping the parameters with the best
/// validation loss. `on_epoch` observes every epoch record.
pub fn train(
    init: &CellConfig,
    train: &[Sequence],
    val: &[Sequence],
    tcfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    train_from(init, None, train, val, tcfg, on_epoch)
}

/// [`train`] continuing from an existing optimizer state.
pub fn train_from(
    init: &CellConfig,
    optimizer: Option<Optimizer>,
    train: &[Sequence],
    val: &[Sequence],
    tcfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    tcfg.validate()?;
    if train.is_empty() {
        return Err(config_err("no training sequences"));
    }
    let mut cfg = init.clone();
    let mut opt = optimizer
        .unwrap_or_else(|| Optimizer::new(tcfg.optimizer, &cfg, tcfg.lr, tcfg.theta_lr.unwrap_or(tcfg.lr)));
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let (train_w, val_w);
    let (train, val) = match tcfg.window {
        Some(len) => {
            train_w = windows(train, len, cfg.warmup_len())?;
            val_w = windows(val, len, cfg.warmup_len())?;
            (&train_w[..], &val_w[..])
        }
        None => (train, val),
    };
    let val_set = if val.is_empty() { train } else { val };
    let score = |c: &CellConfig| evaluate_loss(c, val_set, tcfg.regime, tcfg.lambda).map(|l| l.total);

    let mut best = cfg.clone();
    let mut best_val = match score(&cfg) {
        Ok(v) if v.is_finite() => v,
        _ => f64::INFINITY,
    };
    let mut best_epoch = 0;
    let mut curve = Vec::with_capacity(tcfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let bs = tcfg.batch_size.unwrap_or(train.len()).min(train.len());

    for epoch in 1..=tcfg.epochs {
        if bs < train.len() {
            order.shuffle(&mut rng);
        }
        let mut losses = Vec::new();
        for chunk in order.chunks(bs) {
            let batch: Vec<&Sequence> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, mut grads) = match batch_gradients(&cfg, &batch, tcfg) {
                Ok(r) => r,
                Err(e) if is_numerical(&e) => {
                    return Ok(TrainReport { best, best_epoch, last: cfg, optimizer: opt, curve, diverged_at: Some(epoch) });
                }
                Err(e) => return Err(e),
            };
            if !loss.total.is_finite() {
                return Ok(TrainReport { best, best_epoch, last: cfg, optimizer: opt, curve, diverged_at: Some(epoch) });
            }
            grads.clip_global_norm(tcfg.clip_norm);
            opt.step(&mut cfg, &grads);
            cfg.model.params.clamp();
            losses.push(loss);
        }
        let val_total = match score(&cfg) {
            Ok(v) => v,
            Err(e) if is_numerical(&e) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        let record = EpochRecord { epoch, train: LossBreakdown::mean(&losses), val_total };
        on_epoch(&record);
        curve.push(record);
        if val_total < best_val {
            best_val = val_total;
            best = cfg.clone();
            best_epoch = epoch;
        }
    }
    Ok(TrainReport { best, best_epoch, last: cfg, optimizer: opt, curve, diverged_at: None })
}

/// Largest relative deviation between analytic and finite-difference
/// gradients within one parameter group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub group: String,
    pub max_rel_err: f64,
    pub count: usize,
}

/// Central-difference check of [`bptt_gradients`] for every parameter.
/// The error of a group is `max |g - fd| / max |fd|` over its entries.
pub fn grad_check(cfg: &CellConfig, frames: &[Field], regime: Regime, lambda: f64, eps: f64) -> Result<Vec<GroupError>> {
    let (_, grads) = bptt_gradients(cfg, frames, regime, lambda)?;
    let loss_at = |c: &CellConfig| -> Result<f64> { Ok(unroll(c, frames, regime, lambda, false)?.loss.total) };
    let fd = |apply: &dyn Fn(&mut CellConfig, f64)| -> Result<f64> {
        let mut plus = cfg.clone();
        apply(&mut plus, eps);
        let mut minus = cfg.clone();
        apply(&mut minus, -eps);
        Ok((loss_at(&plus)? - loss_at(&minus)?) / (2.0 * eps))
    };
    let mut groups: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    let theta: Vec<(f64, f64)> = (0..grads.theta.len())
        .filter(|&i| cfg.model.params.trainable[i])
        .map(|i| Ok((grads.theta[i], fd(&|c, e| c.model.params.values[i] += e)?)))
        .collect::<Result<_>>()?;
    groups.push(("theta".into(), theta));
    let wv = cfg.net.w_vc().len();
    let net_group = |range: std::ops::Range<usize>| -> Result<Vec<(f64, f64)>> {
        range.map(|i| Ok((grads.net[i], fd(&|c, e| c.net.params_mut()[i] += e)?))).collect()
    };
    if wv > 0 {
        groups.push(("w_vc".into(), net_group(0..wv)?));
    }
    groups.push(("network".into(), net_group(wv..grads.net.len())?));
    Ok(groups
        .into_iter()
        .filter(|(_, v)| !v.is_empty())
        .map(|(group, pairs)| {
            let scale = pairs.iter().fold(0.0f64, |m, (_, f)| m.max(f.abs()));
            let err = pairs.iter().fold(0.0f64, |m, (g, f)| m.max((g - f).abs()));
            let max_rel_err = if scale > 0.0 { err / scale } else { err };
            GroupError { group, max_rel_err, count: pairs.len() }
        })
        .collect())
}
