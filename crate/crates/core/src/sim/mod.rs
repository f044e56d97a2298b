//! Ground-truth generation: explicit integration of the forced systems.

pub mod dataset;
pub mod source;

use crate::cell::temporal_coeffs;
use crate::error::{config_err, Error, Result, Shape};
use crate::field::{Field, FieldStack};
use crate::pde::{homogeneous_update, PdeModel};

pub use dataset::{add_observation_noise, build_dataset, Counts, DatasetConfig, GridSpec, SequenceDataset, Split};
pub use source::{step_sources, SourceSpec, SourceState};

/// One simulated sequence. `frames_v_true[t]` is the source that carries
/// `frames_u[t]` to `frames_u[t + 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub frames_u: Vec<Field>,
    pub frames_v_true: Vec<Field>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames_u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames_u.is_empty()
    }

    pub fn shape(&self) -> Shape {
        self.frames_u[0].shape()
    }

    pub fn scaled(&self, s: f64) -> Sequence {
        Sequence {
            frames_u: self.frames_u.iter().map(|f| f.scale(s)).collect(),
            frames_v_true: self.frames_v_true.iter().map(|f| f.scale(s)).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SimOptions {
    /// Abort when `max |U|` exceeds this.
    pub blowup: f64,
    /// Pre-start history, newest first; zero when absent.
    pub initial_history: Option<Vec<Field>>,
    /// `(first_frame, coefficient)` pairs switching the physical scalar
    /// for the update that produces `first_frame` and after.
    pub coeff_schedule: Vec<(usize, f64)>,
    /// Enforce the explicit-scheme coefficient bound.
    pub check_stability: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { blowup: 1e6, initial_history: None, coeff_schedule: Vec::new(), check_stability: true }
    }
}

fn check_coeff(model: &PdeModel, coeff: f64) -> Result<()> {
    let limit = model.kind().stability_limit();
    if !(0.0..=limit).contains(&coeff) {
        return Err(config_err(format!(
            "{}={coeff} outside the stable range [0, {limit}]",
            model.kind().param_names()[0]
        )));
    }
    Ok(())
}

/// Integrates `U_j = H(U_{j-1}, ...) + source(j)` for `j = 0..=steps`,
/// where `source(j)` is the map applied on the step that produces frame `j`.
pub fn simulate_with_sources(
    model: &PdeModel,
    shape: Shape,
    steps: usize,
    opts: &SimOptions,
    mut source: impl FnMut(usize) -> Result<Field>,
) -> Result<Vec<Field>> {
    let n = model.temporal_order();
    if opts.check_stability {
        check_coeff(model, model.coeff())?;
        for &(_, c) in &opts.coeff_schedule {
            check_coeff(model, c)?;
        }
    }
    let mut memory = match &opts.initial_history {
        Some(h) => {
            if h.len() != n {
                return Err(Error::LengthMismatch { context: "initial history", expected: n, found: h.len() });
            }
            FieldStack::from_entries(h.clone())?
        }
        None => FieldStack::zeros(n, shape)?,
    };
    if memory.shape() != shape {
        return Err(Error::ShapeMismatch { context: "initial history", expected: shape, found: memory.shape() });
    }
    let coeffs = temporal_coeffs(n)?;
    let mut model = model.clone();
    let mut frames = Vec::with_capacity(steps + 1);
    for j in 0..=steps {
        if let Some(&(_, c)) = opts.coeff_schedule.iter().rev().find(|(from, _)| *from <= j) {
            model.set_coeff(c);
        }
        let mut u = homogeneous_update(&model, &memory, &coeffs)?;
        u.add_assign(&source(j)?)?;
        let max_abs = u.max_abs();
        if !max_abs.is_finite() || max_abs > opts.blowup {
            return Err(Error::Unstable { step: j, max_abs });
        }
        memory.push(u.clone())?;
        frames.push(u);
    }
    Ok(frames)
}

/// Simulates `steps` transitions (`steps + 1` frames) of `model` driven by
/// the source process initialized from `seed`.
pub fn simulate_sequence(
    model: &PdeModel,
    source: &SourceSpec,
    seed: u64,
    shape: Shape,
    steps: usize,
    opts: &SimOptions,
) -> Result<Sequence> {
    let field_shape = Shape::new(model.channels(), shape.height, shape.width);
    let mut state = source.init(field_shape, seed)?;
    if state.shape() != field_shape {
        return Err(Error::ShapeMismatch {
            context: "source channels vs system channels",
            expected: field_shape,
            found: state.shape(),
        });
    }
    // maps[j] drives frame j; the recorded v_t is maps[t + 1].
    let mut maps = vec![state.rasterize()];
    let frames_u = simulate_with_sources(model, field_shape, steps, opts, |j| {
        while maps.len() <= j + 1 {
            let (next, map) = step_sources(&state);
            state = next;
            maps.push(map);
        }
        Ok(maps[j].clone())
    })?;
    let frames_v_true = maps.into_iter().skip(1).take(steps + 1).collect();
    Ok(Sequence { frames_u, frames_v_true })
}
