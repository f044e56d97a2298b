//! Comparison models built on the same encoder-decoder.
//!
//! `pde_rnn_cnn` keeps the homogeneous physics step and adds a corrective
//! network over the last `n` observations. `rednet_full` drops the physics
//! and maps the last `n + K` observations straight to the next frame; its
//! identity path starts as persistence of the newest frame.

use crate::cell::{CellConfig, ModelKind};
use crate::error::Result;
use crate::pde::PdeModel;
use crate::rednet::{RedNet, RedNetConfig};

pub fn pde_rnn_cnn(model: PdeModel, k: usize, widths: Vec<usize>, seed: u64) -> Result<CellConfig> {
    let net_cfg =
        RedNetConfig { depth: model.temporal_order(), channels: model.channels(), widths, kernel: 3, identity_path: false };
    let net = RedNet::new(net_cfg, &[], seed)?;
    CellConfig::new(ModelKind::PdeRnnCnn, model, k, net)
}

pub fn rednet_full(model: PdeModel, k: usize, widths: Vec<usize>, seed: u64) -> Result<CellConfig> {
    let depth = model.temporal_order() + k;
    let net_cfg = RedNetConfig { depth, channels: model.channels(), widths, kernel: 3, identity_path: true };
    let mut persistence = vec![0.0; depth];
    persistence[0] = 1.0;
    let net = RedNet::new(net_cfg, &persistence, seed)?;
    CellConfig::new(ModelKind::RednetFull, model, k, net)
}

/// Any of the three models with the same block widths.
pub fn build(kind: ModelKind, model: PdeModel, k: usize, widths: Vec<usize>, seed: u64) -> Result<CellConfig> {
    match kind {
        ModelKind::Phicnet => CellConfig::phicnet(model, k, widths, seed),
        ModelKind::PdeRnnCnn => pde_rnn_cnn(model, k, widths, seed),
        ModelKind::RednetFull => rednet_full(model, k, widths, seed),
    }
}

/// Trainable scalar count: physical parameters marked trainable (never for
/// the physics-free model) plus network parameters.
pub fn trainable_count(cfg: &CellConfig) -> usize {
    let theta = if cfg.kind.uses_physics() { cfg.model.params.trainable.iter().filter(|t| **t).count() } else { 0 };
    theta + cfg.net.params().len()
}

/// `max / min` of the trainable counts of two models.
pub fn budget_ratio(a: &CellConfig, b: &CellConfig) -> f64 {
    let (x, y) = (trainable_count(a) as f64, trainable_count(b) as f64);
    x.max(y) / x.min(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::{homogeneous_step, rollout, warmup};
    use crate::error::Shape;
    use crate::field::{Field, FieldStack};
    use crate::pde::SystemKind;
    use crate::rednet::tests::{naive_forward, randomize};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frames(shape: Shape, count: usize, seed: u64) -> Vec<Field> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| Field::from_fn(shape, |_, _, _| rng.random_range(-1.0..1.0))).collect()
    }

    fn systems() -> [PdeModel; 3] {
        [
            PdeModel::new(SystemKind::Heat, 0.1),
            PdeModel::new(SystemKind::Wave, 0.25),
            PdeModel::new(SystemKind::Burgers, 0.1),
        ]
    }

    #[test]
    fn budgets_are_within_a_factor_of_two() {
        for model in systems() {
            for k in 1..=3 {
                let cell = build(ModelKind::Phicnet, model.clone(), k, vec![16, 32], 0).unwrap();
                for kind in [ModelKind::PdeRnnCnn, ModelKind::RednetFull] {
                    let other = build(kind, model.clone(), k, vec![16, 32], 0).unwrap();
                    let r = budget_ratio(&cell, &other);
                    assert!(r <= 2.0, "{} vs phicnet K={k} on {}: ratio {r}", kind.tag(), model.kind().name());
                }
            }
        }
    }

    #[test]
    fn fresh_pde_rnn_cnn_is_pure_physics() {
        for model in systems() {
            let shape = Shape::new(model.channels(), 8, 8);
            let cfg = pde_rnn_cnn(model, 2, vec![4, 4], 1).unwrap();
            let fr = frames(shape, cfg.warmup_len(), 2).into_iter().map(|f| f.scale(0.1)).collect::<Vec<_>>();
            let state = warmup(&fr, &cfg).unwrap();
            let pred = state.predict(&cfg).unwrap();
            let h = homogeneous_step(&state, &cfg).unwrap();
            assert_eq!(pred.u_hat, h);
            assert_eq!(pred.v_hat.unwrap().max_abs(), 0.0);
        }
    }

    #[test]
    fn fresh_rednet_full_is_persistence() {
        let model = PdeModel::new(SystemKind::Wave, 0.25);
        let shape = Shape::new(model.channels(), 8, 8);
        let cfg = rednet_full(model, 3, vec![4, 4], 1).unwrap();
        let fr = frames(shape, cfg.warmup_len(), 3);
        let r = rollout(&cfg, &fr, 4, false).unwrap();
        for u in &r.u_hat {
            assert_eq!(u, fr.last().unwrap());
        }
        assert!(r.v_hat.iter().all(Option::is_none));
    }

    #[test]
    fn forecasts_match_a_naive_network_oracle() {
        for model in systems() {
            let shape = Shape::new(model.channels(), 8, 8);
            let n = model.temporal_order();
            for kind in [ModelKind::PdeRnnCnn, ModelKind::RednetFull] {
                let mut cfg = build(kind, model.clone(), 2, vec![4, 4], 5).unwrap();
                randomize(&mut cfg.net, 6, 0.2);
                let fr: Vec<Field> = frames(shape, cfg.warmup_len() + 3, 7).into_iter().map(|f| f.scale(0.2)).collect();
                let r = rollout(&cfg, &fr, 4, true).unwrap();
                for (step, u_hat) in r.u_hat.iter().enumerate() {
                    let last = cfg.warmup_len() + step; // frames before the forecast
                    let depth = cfg.stream_depth();
                    let recent: Vec<Field> = (0..depth).map(|p| fr[last - 1 - p].clone()).collect();
                    let input = FieldStack::from_entries(recent).unwrap().to_channels();
                    let mut expect = naive_forward(&cfg.net, &input);
                    if kind.uses_physics() {
                        let mem: Vec<Field> = (0..n).map(|p| fr[last - 1 - p].clone()).collect();
                        let h = crate::pde::homogeneous_update(
                            &cfg.model,
                            &FieldStack::from_entries(mem).unwrap(),
                            &crate::cell::temporal_coeffs(n).unwrap(),
                        )
                        .unwrap();
                        expect = expect.add(&h).unwrap();
                    }
                    let err = u_hat.max_abs_diff(&expect).unwrap();
                    assert!(err < 1e-10, "{} on {} step {step}: {err}", kind.tag(), cfg.model.kind().name());
                }
            }
        }
    }
}
