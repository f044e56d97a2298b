//! Forecast SNR, source correlation and horizon sweeps with 95% intervals.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell::{rollout, CellConfig, Prediction};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::sim::Sequence;

/// `20·log10(‖U‖ / ‖U − Û‖)`; `+inf` for an exact forecast.
pub fn snr_db(u_true: &Field, u_hat: &Field) -> Result<f64> {
    let signal = u_true.norm_l2();
    if signal == 0.0 {
        return Err(Error::UndefinedMetric("SNR of an all-zero frame"));
    }
    let residual = u_true.sub(u_hat)?.norm_l2();
    if residual == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (signal / residual).log10())
}

/// Pearson correlation over every grid point and channel.
pub fn corr_coef(v_true: &Field, v_hat: &Field) -> Result<f64> {
    v_true.check_shape(v_hat, "corr_coef")?;
    let n = v_true.as_slice().len() as f64;
    let ma = v_true.sum() / n;
    let mb = v_hat.sum() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (a, b) in v_true.as_slice().iter().zip(v_hat.as_slice()) {
        let (da, db) = (a - ma, b - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedMetric("correlation with a constant map"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    SnrDb,
    CorrCoef,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::SnrDb => "snr_db",
            MetricKind::CorrCoef => "corr_coef",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStat {
    /// Steps after the last observed frame, starting at 1.
    pub step: usize,
    pub mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub count: usize,
}

/// Mean and normal-approximation 95% interval (`mean ± 1.96·stderr`).
pub fn mean_ci(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if !mean.is_finite() || n == 1 {
        return (mean, mean, mean);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let half = 1.96 * (var / n as f64).sqrt();
    (mean, mean - half, mean + half)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonReport {
    pub metric: MetricKind,
    pub model_tag: String,
    pub steps: Vec<StepStat>,
}

impl HorizonReport {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// Statistic at `step` (1-based).
    pub fn at(&self, step: usize) -> Option<&StepStat> {
        self.steps.get(step.checked_sub(1)?)
    }

    pub fn csv_header() -> &'static str {
        "step,metric,mean,ci_lo,ci_hi,model_tag"
    }

    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.step,
                self.metric.name(),
                s.mean,
                s.ci_lo,
                s.ci_hi,
                self.model_tag
            ));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}", Self::csv_header(), self.csv_rows())
    }
}

/// Anything that forecasts closed-loop from a warmup window.
pub trait Forecaster: Sync {
    fn warmup_len(&self) -> usize;
    fn tag(&self) -> String;
    /// Predictions for the `horizon` frames following `warm`.
    fn forecast(&self, warm: &[Field], horizon: usize) -> Result<Vec<Prediction>>;
}

impl Forecaster for CellConfig {
    fn warmup_len(&self) -> usize {
        CellConfig::warmup_len(self)
    }

    fn tag(&self) -> String {
        self.kind.tag().to_string()
    }

    fn forecast(&self, warm: &[Field], horizon: usize) -> Result<Vec<Prediction>> {
        let r = rollout(self, warm, horizon, false)?;
        Ok(r.u_hat.into_iter().zip(r.v_hat).map(|(u_hat, v_hat)| Prediction { u_hat, v_hat }).collect())
    }
}

/// Per-step metric values of one sequence; `None` where undefined.
struct SeqMetrics {
    snr: Vec<Option<f64>>,
    rho: Vec<Option<f64>>,
}

/// Closed-loop forecasts from the first `n + K` frames of every test
/// sequence, scored against the held-out frames (SNR) and hidden sources
/// (ρ). The model runs on fields divided by `scale`; metrics are computed
/// after multiplying its output back.
///
/// A zero-signal frame is skipped for SNR. For ρ a constant true map is
/// skipped, while a constant predicted map scores 0.
pub fn horizon_eval(
    model: &dyn Forecaster,
    test: &[Sequence],
    horizon: usize,
    scale: f64,
) -> Result<(HorizonReport, HorizonReport)> {
    horizon_eval_against(model, test, test, horizon, scale)
}

/// [`horizon_eval`] warming up on `observed` (e.g. noisy) sequences while
/// scoring against the matching `truth` sequences.
pub fn horizon_eval_against(
    model: &dyn Forecaster,
    observed: &[Sequence],
    truth: &[Sequence],
    horizon: usize,
    scale: f64,
) -> Result<(HorizonReport, HorizonReport)> {
    let w = model.warmup_len();
    if observed.len() != truth.len() {
        return Err(Error::LengthMismatch { context: "observed vs truth sequences", expected: truth.len(), found: observed.len() });
    }
    for (obs, seq) in observed.iter().zip(truth) {
        if seq.len() < w + horizon || obs.len() < w {
            return Err(Error::LengthMismatch { context: "test sequence frames", expected: w + horizon, found: seq.len().min(obs.len()) });
        }
    }
    let per_seq: Vec<SeqMetrics> = observed
        .par_iter()
        .zip(truth)
        .map(|(obs, seq)| {
            let warm: Vec<Field> = obs.frames_u[..w].iter().map(|f| f.scale(1.0 / scale)).collect();
            let preds = model.forecast(&warm, horizon)?;
            let mut m = SeqMetrics { snr: Vec::with_capacity(horizon), rho: Vec::with_capacity(horizon) };
            for (i, p) in preds.iter().enumerate() {
                let frame = w + i;
                let u_hat = p.u_hat.scale(scale);
                m.snr.push(match snr_db(&seq.frames_u[frame], &u_hat) {
                    Ok(v) => Some(v),
                    Err(Error::UndefinedMetric(_)) => None,
                    Err(e) => return Err(e),
                });
                let rho = match &p.v_hat {
                    None => None,
                    Some(v) => {
                        let truth = &seq.frames_v_true[frame - 1];
                        match corr_coef(truth, &v.scale(scale)) {
                            Ok(r) => Some(r),
                            Err(Error::UndefinedMetric(_)) => {
                                if truth.max_abs() == 0.0 || corr_coef(truth, truth).is_err() {
                                    None
                                } else {
                                    Some(0.0)
                                }
                            }
                            Err(e) => return Err(e),
                        }
                    }
                };
                m.rho.push(rho);
            }
            Ok(m)
        })
        .collect::<Result<_>>()?;
    let summarize = |metric: MetricKind, pick: &dyn Fn(&SeqMetrics) -> &Vec<Option<f64>>| HorizonReport {
        metric,
        model_tag: model.tag(),
        steps: (0..horizon)
            .map(|i| {
                let vals: Vec<f64> = per_seq.iter().filter_map(|m| pick(m)[i]).collect();
                let (mean, ci_lo, ci_hi) = mean_ci(&vals);
                StepStat { step: i + 1, mean, ci_lo, ci_hi, count: vals.len() }
            })
            .collect(),
    };
    Ok((summarize(MetricKind::SnrDb, &|m| &m.snr), summarize(MetricKind::CorrCoef, &|m| &m.rho)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Shape;
    use proptest::prelude::*;

    fn f(vals: &[f64]) -> Field {
        Field::from_vec(Shape::new(1, 2, vals.len() / 2), vals.to_vec()).unwrap()
    }

    #[test]
    fn snr_cases() {
        let u = f(&[1.0, -2.0, 3.0, 0.5]);
        assert_eq!(snr_db(&u, &u).unwrap(), f64::INFINITY);
        assert_eq!(snr_db(&u, &Field::zeros(u.shape())).unwrap(), 0.0);
        // residual with half the signal norm
        let half = u.scale(0.5);
        assert!((snr_db(&u, &half).unwrap() - 6.020599913279624).abs() < 1e-9);
        assert!(matches!(snr_db(&Field::zeros(u.shape()), &u), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn corr_cases() {
        let v = f(&[1.0, 2.0, 3.0, 4.0]);
        assert!((corr_coef(&v, &v.map(|x| 2.5 * x - 7.0)).unwrap() - 1.0).abs() < 1e-9);
        assert!((corr_coef(&v, &v.scale(-1.0)).unwrap() + 1.0).abs() < 1e-9);
        // brute force over the 4 points
        let w = f(&[1.0, 2.0, 3.0, 5.0]);
        let (a, b) = ([1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0, 5.0]);
        let (ma, mb) = (2.5, 2.75);
        let cov: f64 = (0..4).map(|i| (a[i] - ma) * (b[i] - mb)).sum();
        let va: f64 = (0..4).map(|i| (a[i] - ma) * (a[i] - ma)).sum();
        let vb: f64 = (0..4).map(|i| (b[i] - mb) * (b[i] - mb)).sum();
        assert!((corr_coef(&v, &w).unwrap() - cov / (va * vb).sqrt()).abs() < 1e-12);
        assert!(matches!(corr_coef(&v, &Field::constant(v.shape(), 1.0)), Err(Error::UndefinedMetric(_))));
    }

    proptest! {
        #[test]
        fn halving_the_residual_adds_six_db(vals in proptest::collection::vec(-5.0f64..5.0, 8), noise in proptest::collection::vec(-1.0f64..1.0, 8)) {
            let u = f(&vals);
            prop_assume!(u.norm_l2() > 1e-3);
            let e = f(&noise);
            prop_assume!(e.norm_l2() > 1e-3);
            let s1 = snr_db(&u, &u.add(&e).unwrap()).unwrap();
            let s2 = snr_db(&u, &u.add(&e.scale(0.5)).unwrap()).unwrap();
            prop_assert!((s2 - s1 - 20.0 * 2f64.log10()).abs() < 1e-9);
        }

        #[test]
        fn corr_is_invariant_under_positive_affine_maps(vals in proptest::collection::vec(-5.0f64..5.0, 8), other in proptest::collection::vec(-5.0f64..5.0, 8), a in 0.1f64..10.0, b in -3.0f64..3.0) {
            let (x, y) = (f(&vals), f(&other));
            let base = corr_coef(&x, &y);
            prop_assume!(base.is_ok());
            let moved = corr_coef(&x.map(|v| a * v + b), &y).unwrap();
            prop_assert!((moved - base.unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn confidence_interval_contains_mean() {
        let (m, lo, hi) = mean_ci(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        let half = 1.96 * (5.0f64 / 3.0 / 4.0).sqrt();
        assert!((hi - m - half).abs() < 1e-12 && (m - lo - half).abs() < 1e-12);
        assert_eq!(mean_ci(&[3.0]), (3.0, 3.0, 3.0));
    }
}
