//! Known-physics right-hand sides `f(U; θ)` for the heat, wave and Burgers
//! systems, with exact vector-Jacobian products.
//!
//! Parameters are in lattice units: the single scalar per system already
//! absorbs the time step and the squared grid spacing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Shape};
use crate::field::{stencil_adjoint, stencil_apply, weighted_collapse, BoundaryRule, Field, FieldStack, StencilKernel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Heat,
    Wave,
    Burgers,
}

impl SystemKind {
    /// Temporal order `n` of the observed PDE.
    pub fn temporal_order(self) -> usize {
        match self {
            SystemKind::Heat | SystemKind::Burgers => 1,
            SystemKind::Wave => 2,
        }
    }

    pub fn channels(self) -> usize {
        match self {
            SystemKind::Heat | SystemKind::Wave => 1,
            SystemKind::Burgers => 2,
        }
    }

    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            SystemKind::Heat => &["alpha_eff"],
            SystemKind::Wave => &["c2_eff"],
            SystemKind::Burgers => &["beta_eff"],
        }
    }

    pub fn default_boundary(self) -> BoundaryRule {
        match self {
            SystemKind::Heat | SystemKind::Wave => BoundaryRule::DirichletZero,
            SystemKind::Burgers => BoundaryRule::NeumannReplicate,
        }
    }

    /// Largest coefficient the explicit update tolerates.
    pub fn stability_limit(self) -> f64 {
        match self {
            SystemKind::Heat | SystemKind::Burgers => 0.25,
            SystemKind::Wave => 0.5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SystemKind::Heat => "heat",
            SystemKind::Wave => "wave",
            SystemKind::Burgers => "burgers",
        }
    }
}

impl std::str::FromStr for SystemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heat" => Ok(SystemKind::Heat),
            "wave" => Ok(SystemKind::Wave),
            "burgers" => Ok(SystemKind::Burgers),
            other => Err(Error::Config(format!("unknown system `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysParams {
    pub values: Vec<f64>,
    pub trainable: Vec<bool>,
}

impl PhysParams {
    pub fn single(value: f64) -> Self {
        Self { values: vec![value], trainable: vec![true] }
    }

    pub fn frozen(value: f64) -> Self {
        Self { values: vec![value], trainable: vec![false] }
    }

    pub fn n_trainable(&self) -> usize {
        self.trainable.iter().filter(|t| **t).count()
    }

    /// Physical coefficients are non-negative.
    pub fn clamp(&mut self) {
        for v in &mut self.values {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PdeModel {
    kind: SystemKind,
    pub params: PhysParams,
    boundary: BoundaryRule,
    kernels: Vec<StencilKernel>,
    /// Multiplies the Burgers advection term; equals the normalization
    /// scale when the model runs on scaled fields, otherwise 1.
    advection_scale: f64,
}

impl PdeModel {
    pub fn new(kind: SystemKind, coeff: f64) -> Self {
        Self::with_boundary(kind, coeff, kind.default_boundary())
    }

    pub fn with_boundary(kind: SystemKind, coeff: f64, boundary: BoundaryRule) -> Self {
        let kernels = match kind {
            SystemKind::Heat | SystemKind::Wave => vec![StencilKernel::d20(), StencilKernel::d02()],
            SystemKind::Burgers => vec![
                StencilKernel::d10(),
                StencilKernel::d01(),
                StencilKernel::d20(),
                StencilKernel::d02(),
            ],
        };
        Self { kind, params: PhysParams::single(coeff), boundary, kernels, advection_scale: 1.0 }
    }

    pub fn kind(&self) -> SystemKind {
        self.kind
    }

    pub fn temporal_order(&self) -> usize {
        self.kind.temporal_order()
    }

    pub fn channels(&self) -> usize {
        self.kind.channels()
    }

    pub fn boundary(&self) -> BoundaryRule {
        self.boundary
    }

    pub fn kernels(&self) -> &[StencilKernel] {
        &self.kernels
    }

    pub fn coeff(&self) -> f64 {
        self.params.values[0]
    }

    pub fn set_coeff(&mut self, v: f64) {
        self.params.values[0] = v;
    }

    pub fn advection_scale(&self) -> f64 {
        self.advection_scale
    }

    pub fn set_advection_scale(&mut self, s: f64) {
        self.advection_scale = s;
    }

    fn check_input(&self, u: &Field) -> Result<()> {
        if u.channels() != self.channels() {
            return Err(Error::ShapeMismatch {
                context: "PdeModel channels",
                expected: Shape::new(self.channels(), u.height(), u.width()),
                found: u.shape(),
            });
        }
        Ok(())
    }

    fn laplacian(&self, u: &Field) -> Result<Field> {
        let mut lap = stencil_apply(u, &self.kernels[self.kernels.len() - 2], self.boundary)?;
        lap.add_assign(&stencil_apply(u, &self.kernels[self.kernels.len() - 1], self.boundary)?)?;
        Ok(lap)
    }

    fn laplacian_adjoint(&self, g: &Field) -> Result<Field> {
        let mut out = stencil_adjoint(g, &self.kernels[self.kernels.len() - 2], self.boundary)?;
        out.add_assign(&stencil_adjoint(g, &self.kernels[self.kernels.len() - 1], self.boundary)?)?;
        Ok(out)
    }

    /// Evaluates the known right-hand side on `u`.
    pub fn f_eval(&self, u: &Field) -> Result<Field> {
        self.check_input(u)?;
        if !u.is_finite() {
            return Err(Error::NonFinite("f_eval input"));
        }
        let coeff = self.coeff();
        match self.kind {
            SystemKind::Heat | SystemKind::Wave => Ok(self.laplacian(u)?.scale(coeff)),
            SystemKind::Burgers => {
                let ux = stencil_apply(u, &self.kernels[0], self.boundary)?;
                let uy = stencil_apply(u, &self.kernels[1], self.boundary)?;
                let lap = self.laplacian(u)?;
                let s = self.advection_scale;
                let plane = u.shape().plane();
                let (u1, u2) = (u.channel(0), u.channel(1));
                let mut out = Field::zeros(u.shape());
                for c in 0..2 {
                    let (dx, dy, l) = (ux.channel(c), uy.channel(c), lap.channel(c));
                    let dst = out.channel_mut(c);
                    for i in 0..plane {
                        dst[i] = -s * (u1[i] * dx[i] + u2[i] * dy[i]) + coeff * l[i];
                    }
                }
                Ok(out)
            }
        }
    }

    /// Vector-Jacobian product of [`PdeModel::f_eval`]: returns the gradient
    /// with respect to `u` and to every physical scalar.
    pub fn f_adjoint(&self, u: &Field, upstream: &Field) -> Result<(Field, Vec<f64>)> {
        self.check_input(u)?;
        u.check_shape(upstream, "f_adjoint upstream")?;
        let coeff = self.coeff();
        match self.kind {
            SystemKind::Heat | SystemKind::Wave => {
                let dtheta = upstream.dot(&self.laplacian(u)?)?;
                let du = self.laplacian_adjoint(upstream)?.scale(coeff);
                Ok((du, vec![dtheta]))
            }
            SystemKind::Burgers => {
                let ux = stencil_apply(u, &self.kernels[0], self.boundary)?;
                let uy = stencil_apply(u, &self.kernels[1], self.boundary)?;
                let lap = self.laplacian(u)?;
                let dtheta = upstream.dot(&lap)?;
                let s = self.advection_scale;
                let plane = u.shape().plane();
                let (u1, u2) = (u.channel(0), u.channel(1));

                let mut du = self.laplacian_adjoint(upstream)?.scale(coeff);
                // Pointwise advection coefficients.
                let mut g1 = Field::zeros(u.shape());
                let mut g2 = Field::zeros(u.shape());
                let mut d_u1 = vec![0.0; plane];
                let mut d_u2 = vec![0.0; plane];
                for c in 0..2 {
                    let g = upstream.channel(c);
                    let (dx, dy) = (ux.channel(c), uy.channel(c));
                    let a = g1.channel_mut(c);
                    for i in 0..plane {
                        a[i] = -s * g[i] * u1[i];
                        d_u1[i] -= s * g[i] * dx[i];
                        d_u2[i] -= s * g[i] * dy[i];
                    }
                    let b = g2.channel_mut(c);
                    for i in 0..plane {
                        b[i] = -s * g[i] * u2[i];
                    }
                }
                du.add_assign(&stencil_adjoint(&g1, &self.kernels[0], self.boundary)?)?;
                du.add_assign(&stencil_adjoint(&g2, &self.kernels[1], self.boundary)?)?;
                for (d, v) in du.channel_mut(0).iter_mut().zip(&d_u1) {
                    *d += v;
                }
                for (d, v) in du.channel_mut(1).iter_mut().zip(&d_u2) {
                    *d += v;
                }
                Ok((du, vec![dtheta]))
            }
        }
    }
}

/// Homogeneous one-step update shared by the simulator and the cell:
/// temporal finite-difference extrapolation of the memory plus `f` of the
/// newest map.
pub fn homogeneous_update(model: &PdeModel, memory: &FieldStack, coeffs: &[f64]) -> Result<Field> {
    let mut h = weighted_collapse(memory, coeffs)?;
    h.add_assign(&model.f_eval(memory.newest())?)?;
    Ok(h)
}

/// [`homogeneous_update`] on borrowed history, newest first; bit-identical
/// to the stack version.
pub fn homogeneous_update_refs(model: &PdeModel, memory: &[&Field], coeffs: &[f64]) -> Result<Field> {
    if memory.len() != coeffs.len() || memory.is_empty() {
        return Err(Error::LengthMismatch { context: "homogeneous_update history", expected: coeffs.len(), found: memory.len() });
    }
    let mut h = memory[0].scale(coeffs[0]);
    for (c, e) in coeffs.iter().zip(memory).skip(1) {
        h.axpy(*c, e)?;
    }
    h.add_assign(&model.f_eval(memory[0])?)?;
    Ok(h)
}
