//! Hidden source dynamics driving the simulated systems.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result, Shape};
use crate::field::{stencil_apply, BoundaryRule, Field, StencilKernel};

/// Declarative description of a source process; randomness is drawn from
/// the seed handed to [`SourceSpec::init`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceSpec {
    None,
    /// Piecewise-constant blocks relaxing towards their 4-neighbours.
    DiffusingBlocks { blocks_per_side: usize, gamma: f64 },
    /// Two Gaussian bumps whose amplitudes are spring-coupled oscillators.
    CoupledOscillators {
        period: f64,
        coupling: f64,
        spread: f64,
        amp_min: f64,
        amp_max: f64,
        margin: usize,
    },
    /// A high and a low pressure zone orbiting in opposite senses; the
    /// source is the negative pressure gradient.
    OrbitingPressure {
        peak_min: f64,
        peak_max: f64,
        spread_min: f64,
        spread_max: f64,
        radius_min: f64,
        radius_max: f64,
        angular_rate: f64,
    },
}

impl SourceSpec {
    pub fn default_blocks() -> Self {
        SourceSpec::DiffusingBlocks { blocks_per_side: 4, gamma: 0.03 }
    }

    pub fn default_oscillators() -> Self {
        SourceSpec::CoupledOscillators {
            period: 15.0,
            coupling: 0.01,
            spread: 1.0,
            amp_min: 0.5,
            amp_max: 1.0,
            margin: 3,
        }
    }

    pub fn default_pressure() -> Self {
        SourceSpec::OrbitingPressure {
            peak_min: 0.02,
            peak_max: 0.04,
            spread_min: 2.0,
            spread_max: 3.0,
            radius_min: 1.0,
            radius_max: 3.0,
            angular_rate: 2.0 * PI / 40.0,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            SourceSpec::None => "none",
            SourceSpec::DiffusingBlocks { .. } => "diffusing_blocks",
            SourceSpec::CoupledOscillators { .. } => "coupled_oscillators",
            SourceSpec::OrbitingPressure { .. } => "orbiting_pressure",
        }
    }

    /// Draws an initial state for a grid of `shape`.
    pub fn init(&self, shape: Shape, seed: u64) -> Result<SourceState> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (shape.height, shape.width);
        match *self {
            SourceSpec::None => Ok(SourceState::None { shape }),
            SourceSpec::DiffusingBlocks { blocks_per_side, gamma } => {
                if blocks_per_side == 0 || h % blocks_per_side != 0 || w % blocks_per_side != 0 {
                    return Err(config_err(format!(
                        "grid {h}x{w} is not divisible into {blocks_per_side}x{blocks_per_side} blocks"
                    )));
                }
                if !(0.0..=0.25).contains(&gamma) {
                    return Err(config_err(format!("block rate gamma={gamma} outside [0, 0.25]")));
                }
                let values = (0..blocks_per_side * blocks_per_side).map(|_| rng.random::<f64>()).collect();
                Ok(SourceState::Blocks(BlockState { shape, side: blocks_per_side, gamma, values }))
            }
            SourceSpec::CoupledOscillators { period, coupling, spread, amp_min, amp_max, margin } => {
                if period <= 2.0 {
                    return Err(config_err("oscillator period must exceed 2 steps"));
                }
                if 2 * margin >= h.min(w) {
                    return Err(config_err("oscillator margin leaves no room on the grid"));
                }
                let omega = 2.0 * PI / period;
                let stiffness = 2.0 - 2.0 * omega.cos();
                let mut draw = || {
                    let amp = rng.random_range(amp_min..=amp_max);
                    let phase = rng.random_range(0.0..2.0 * PI);
                    let row = rng.random_range(margin..h - margin) as f64;
                    let col = rng.random_range(margin..w - margin) as f64;
                    Oscillator {
                        row,
                        col,
                        value: amp * phase.cos(),
                        prev: amp * (phase - omega).cos(),
                    }
                };
                let oscillators = [draw(), draw()];
                Ok(SourceState::Oscillators(OscillatorState { shape, stiffness, coupling, spread, oscillators }))
            }
            SourceSpec::OrbitingPressure {
                peak_min,
                peak_max,
                spread_min,
                spread_max,
                radius_min,
                radius_max,
                angular_rate,
            } => {
                let mut zone = |sign: f64| {
                    let radius = rng.random_range(radius_min..=radius_max);
                    let spread = rng.random_range(spread_min..=spread_max);
                    let reach = radius + spread;
                    let lo_r = reach.min(h as f64 / 2.0);
                    let lo_c = reach.min(w as f64 / 2.0);
                    let center_row = rng.random_range(lo_r..=(h as f64 - 1.0 - lo_r).max(lo_r));
                    let center_col = rng.random_range(lo_c..=(w as f64 - 1.0 - lo_c).max(lo_c));
                    PressureZone {
                        center_row,
                        center_col,
                        radius,
                        angle: rng.random_range(0.0..2.0 * PI),
                        // High pressure turns clockwise, low counter-clockwise.
                        rate: -sign * angular_rate,
                        peak: sign * rng.random_range(peak_min..=peak_max),
                        spread,
                    }
                };
                let zones = [zone(1.0), zone(-1.0)];
                Ok(SourceState::Pressure(PressureState { shape, zones }))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockState {
    pub shape: Shape,
    pub side: usize,
    pub gamma: f64,
    /// Row-major block values.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Oscillator {
    pub row: f64,
    pub col: f64,
    pub value: f64,
    pub prev: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OscillatorState {
    pub shape: Shape,
    pub stiffness: f64,
    pub coupling: f64,
    pub spread: f64,
    pub oscillators: [Oscillator; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct PressureZone {
    pub center_row: f64,
    pub center_col: f64,
    pub radius: f64,
    pub angle: f64,
    pub rate: f64,
    pub peak: f64,
    pub spread: f64,
}

impl PressureZone {
    fn position(&self) -> (f64, f64) {
        (
            self.center_row + self.radius * self.angle.sin(),
            self.center_col + self.radius * self.angle.cos(),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PressureState {
    pub shape: Shape,
    pub zones: [PressureZone; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub enum SourceState {
    None { shape: Shape },
    Blocks(BlockState),
    Oscillators(OscillatorState),
    Pressure(PressureState),
}

fn gaussian(row: usize, col: usize, r0: f64, c0: f64, spread: f64) -> f64 {
    let d2 = (row as f64 - r0).powi(2) + (col as f64 - c0).powi(2);
    (-d2 / (2.0 * spread * spread)).exp()
}

impl SourceState {
    /// Advances the hidden dynamics by one unit step.
    pub fn advance(&mut self) {
        match self {
            SourceState::None { .. } => {}
            SourceState::Blocks(b) => {
                let n = b.side;
                let old = b.values.clone();
                for j in 0..n {
                    for l in 0..n {
                        let here = old[j * n + l];
                        let mut flow = 0.0;
                        if j > 0 {
                            flow += old[(j - 1) * n + l] - here;
                        }
                        if j + 1 < n {
                            flow += old[(j + 1) * n + l] - here;
                        }
                        if l > 0 {
                            flow += old[j * n + l - 1] - here;
                        }
                        if l + 1 < n {
                            flow += old[j * n + l + 1] - here;
                        }
                        b.values[j * n + l] = here + b.gamma * flow;
                    }
                }
            }
            SourceState::Oscillators(o) => {
                let [a, b] = &o.oscillators;
                let (xa, xb) = (a.value, b.value);
                let next_a = 2.0 * xa - a.prev - o.stiffness * xa + o.coupling * (xb - xa);
                let next_b = 2.0 * xb - b.prev - o.stiffness * xb + o.coupling * (xa - xb);
                o.oscillators[0].prev = xa;
                o.oscillators[0].value = next_a;
                o.oscillators[1].prev = xb;
                o.oscillators[1].value = next_b;
            }
            SourceState::Pressure(p) => {
                for z in &mut p.zones {
                    z.angle += z.rate;
                }
            }
        }
    }

    pub fn shape(&self) -> Shape {
        match self {
            SourceState::None { shape } => *shape,
            SourceState::Blocks(b) => Shape::new(1, b.shape.height, b.shape.width),
            SourceState::Oscillators(o) => Shape::new(1, o.shape.height, o.shape.width),
            SourceState::Pressure(p) => Shape::new(2, p.shape.height, p.shape.width),
        }
    }

    /// Pressure field of the orbiting zones (only for the pressure process).
    pub fn pressure(&self) -> Option<Field> {
        let SourceState::Pressure(p) = self else { return None };
        let shape = Shape::new(1, p.shape.height, p.shape.width);
        let pos: Vec<_> = p.zones.iter().map(|z| (z.position(), z.peak, z.spread)).collect();
        Some(Field::from_fn(shape, |_, r, c| {
            pos.iter().map(|&((r0, c0), peak, s)| peak * gaussian(r, c, r0, c0, s)).sum()
        }))
    }

    /// Source map of the current state.
    pub fn rasterize(&self) -> Field {
        match self {
            SourceState::None { shape } => Field::zeros(Shape::new(shape.channels, shape.height, shape.width)),
            SourceState::Blocks(b) => {
                let (bh, bw) = (b.shape.height / b.side, b.shape.width / b.side);
                Field::from_fn(self.shape(), |_, r, c| b.values[(r / bh) * b.side + c / bw])
            }
            SourceState::Oscillators(o) => Field::from_fn(self.shape(), |_, r, c| {
                o.oscillators.iter().map(|osc| osc.value * gaussian(r, c, osc.row, osc.col, o.spread)).sum()
            }),
            SourceState::Pressure(_) => {
                let p = self.pressure().expect("pressure state");
                let b = BoundaryRule::NeumannReplicate;
                let px = stencil_apply(&p, &StencilKernel::d10(), b).expect("kernel fits grid");
                let py = stencil_apply(&p, &StencilKernel::d01(), b).expect("kernel fits grid");
                Field::concat_channels(&[&px.scale(-1.0), &py.scale(-1.0)]).expect("equal shapes")
            }
        }
    }
}

/// One substep of the source dynamics followed by rasterization.
pub fn step_sources(state: &SourceState) -> (SourceState, Field) {
    let mut next = state.clone();
    next.advance();
    let map = next.rasterize();
    (next, map)
}
