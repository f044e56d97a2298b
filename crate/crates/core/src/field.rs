//! Dense multi-channel grids and the finite-difference machinery the cell
//! equations are written in.
//!
//! A [`Field`] is stored channel-major, then row-major. Column index is the
//! `x` direction of the differential kernels, row index is `y`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Shape};

#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    shape: Shape,
    data: Vec<f64>,
}

impl Field {
    pub fn zeros(shape: Shape) -> Self {
        Self { shape, data: vec![0.0; shape.len()] }
    }

    pub fn constant(shape: Shape, value: f64) -> Self {
        Self { shape, data: vec![value; shape.len()] }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::LengthMismatch {
                context: "Field::from_vec",
                expected: shape.len(),
                found: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    /// Builds a field from `f(channel, row, col)`.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for r in 0..shape.height {
                for col in 0..shape.width {
                    data.push(f(c, r, col));
                }
            }
        }
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape.width
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    fn index(&self, c: usize, r: usize, col: usize) -> usize {
        (c * self.shape.height + r) * self.shape.width + col
    }

    #[inline]
    pub fn get(&self, c: usize, r: usize, col: usize) -> f64 {
        self.data[self.index(c, r, col)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, r: usize, col: usize, value: f64) {
        let i = self.index(c, r, col);
        self.data[i] = value;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.shape.plane();
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let plane = self.shape.plane();
        &mut self.data[c * plane..(c + 1) * plane]
    }

    /// Extracts channel `c` as a single-channel field.
    pub fn channel_field(&self, c: usize) -> Field {
        Field {
            shape: Shape::new(1, self.shape.height, self.shape.width),
            data: self.channel(c).to_vec(),
        }
    }

    pub(crate) fn check_shape(&self, other: &Field, context: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch { context, expected: self.shape, found: other.shape });
        }
        Ok(())
    }

    pub fn add(&self, other: &Field) -> Result<Field> {
        self.check_shape(other, "Field::add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Field { shape: self.shape, data })
    }

    pub fn sub(&self, other: &Field) -> Result<Field> {
        self.check_shape(other, "Field::sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Field { shape: self.shape, data })
    }

    pub fn scale(&self, s: f64) -> Field {
        Field { shape: self.shape, data: self.data.iter().map(|v| v * s).collect() }
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: f64, x: &Field) -> Result<()> {
        self.check_shape(x, "Field::axpy")?;
        for (d, s) in self.data.iter_mut().zip(&x.data) {
            *d += a * s;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, x: &Field) -> Result<()> {
        self.check_shape(x, "Field::add_assign")?;
        for (d, s) in self.data.iter_mut().zip(&x.data) {
            *d += s;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn dot(&self, other: &Field) -> Result<f64> {
        self.check_shape(other, "Field::dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_l2_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm_l2(&self) -> f64 {
        self.norm_l2_sq().sqrt()
    }

    pub fn norm_l1(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest pointwise absolute difference.
    pub fn max_abs_diff(&self, other: &Field) -> Result<f64> {
        self.check_shape(other, "Field::max_abs_diff")?;
        Ok(self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Concatenates fields of equal spatial extent along the channel axis.
    pub fn concat_channels(parts: &[&Field]) -> Result<Field> {
        let first = parts.first().ok_or_else(|| Error::Config("concat of zero fields".into()))?;
        let (h, w) = (first.height(), first.width());
        let mut channels = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.height() != h || p.width() != w {
                return Err(Error::ShapeMismatch {
                    context: "Field::concat_channels",
                    expected: Shape::new(p.channels(), h, w),
                    found: p.shape(),
                });
            }
            channels += p.channels();
            data.extend_from_slice(&p.data);
        }
        Ok(Field { shape: Shape::new(channels, h, w), data })
    }

    /// Inverse of [`Field::concat_channels`] for `parts` equal slices.
    pub fn split_channels(&self, parts: usize) -> Result<Vec<Field>> {
        if parts == 0 || !self.channels().is_multiple_of(parts) {
            return Err(Error::Config(format!(
                "cannot split {} channels into {parts} parts",
                self.channels()
            )));
        }
        let per = self.channels() / parts;
        let shape = Shape::new(per, self.height(), self.width());
        Ok(self
            .data
            .chunks(shape.len())
            .map(|chunk| Field { shape, data: chunk.to_vec() })
            .collect())
    }
}

/// Fixed-depth memory of fields, newest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldStack {
    entries: Vec<Field>,
}

impl FieldStack {
    pub fn zeros(depth: usize, shape: Shape) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("FieldStack depth must be positive".into()));
        }
        Ok(Self { entries: vec![Field::zeros(shape); depth] })
    }

    pub fn from_entries(entries: Vec<Field>) -> Result<Self> {
        let first = entries
            .first()
            .ok_or_else(|| Error::Config("FieldStack depth must be positive".into()))?;
        for e in &entries[1..] {
            first.check_shape(e, "FieldStack::from_entries")?;
        }
        Ok(Self { entries })
    }

    pub fn depth(&self) -> usize {
        self.entries.len()
    }

    pub fn shape(&self) -> Shape {
        self.entries[0].shape()
    }

    pub fn entries(&self) -> &[Field] {
        &self.entries
    }

    pub fn newest(&self) -> &Field {
        &self.entries[0]
    }

    /// Shift every entry one slot older and place `newest` in front.
    ///
    /// This is the sub-diagonal shift matrix applied to the previous memory
    /// plus the unit input vector `[1, 0, ..., 0]` applied to the new map.
    pub fn push(&mut self, newest: Field) -> Result<()> {
        self.entries[0].check_shape(&newest, "FieldStack::push")?;
        self.entries.pop();
        self.entries.insert(0, newest);
        Ok(())
    }

    pub fn weighted_collapse(&self, w: &[f64]) -> Result<Field> {
        weighted_collapse(self, w)
    }

    /// All entries stacked along the channel axis, newest first.
    pub fn to_channels(&self) -> Field {
        let refs: Vec<&Field> = self.entries.iter().collect();
        Field::concat_channels(&refs).expect("stack entries share one shape")
    }
}

pub fn stack_shift_insert(stack: &FieldStack, newest: Field) -> Result<FieldStack> {
    let mut out = stack.clone();
    out.push(newest)?;
    Ok(out)
}

/// Pointwise `sum_p w[p] * entries[p]`.
pub fn weighted_collapse(stack: &FieldStack, w: &[f64]) -> Result<Field> {
    if w.len() != stack.depth() {
        return Err(Error::LengthMismatch {
            context: "weighted_collapse",
            expected: stack.depth(),
            found: w.len(),
        });
    }
    let mut out = stack.entries[0].scale(w[0]);
    for (wp, e) in w.iter().zip(&stack.entries).skip(1) {
        out.axpy(*wp, e)?;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryRule {
    /// Halo cells are zero.
    DirichletZero,
    /// Halo cells copy the nearest edge value.
    NeumannReplicate,
}

/// Finite-difference taps, applied as a correlation (no flip).
#[derive(Clone, Debug, PartialEq)]
pub struct StencilKernel {
    rows: usize,
    cols: usize,
    taps: Vec<f64>,
    order_x: usize,
    order_y: usize,
}

impl StencilKernel {
    pub fn new(rows: usize, cols: usize, taps: Vec<f64>, order_x: usize, order_y: usize) -> Result<Self> {
        if rows.is_multiple_of(2) || cols.is_multiple_of(2) {
            return Err(Error::Config(format!("stencil must have odd extent, got {rows}x{cols}")));
        }
        if taps.len() != rows * cols {
            return Err(Error::LengthMismatch {
                context: "StencilKernel::new",
                expected: rows * cols,
                found: taps.len(),
            });
        }
        Ok(Self { rows, cols, taps, order_x, order_y })
    }

    /// Second difference along x (columns).
    pub fn d20() -> Self {
        Self::new(3, 3, vec![0.0, 0.0, 0.0, 1.0, -2.0, 1.0, 0.0, 0.0, 0.0], 2, 0).unwrap()
    }

    /// Second difference along y (rows).
    pub fn d02() -> Self {
        Self::new(3, 3, vec![0.0, 1.0, 0.0, 0.0, -2.0, 0.0, 0.0, 1.0, 0.0], 0, 2).unwrap()
    }

    /// Central first difference along x.
    pub fn d10() -> Self {
        Self::new(3, 3, vec![0.0, 0.0, 0.0, -0.5, 0.0, 0.5, 0.0, 0.0, 0.0], 1, 0).unwrap()
    }

    /// Central first difference along y.
    pub fn d01() -> Self {
        Self::new(3, 3, vec![0.0, -0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.0], 0, 1).unwrap()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn orders(&self) -> (usize, usize) {
        (self.order_x, self.order_y)
    }

    fn check_fits(&self, shape: Shape) -> Result<()> {
        if self.rows > shape.height || self.cols > shape.width {
            return Err(Error::ShapeMismatch {
                context: "stencil larger than grid",
                expected: Shape::new(shape.channels, self.rows, self.cols),
                found: shape,
            });
        }
        Ok(())
    }

    fn nonzero_taps(&self) -> impl Iterator<Item = (isize, isize, f64)> + '_ {
        let (hr, hc) = ((self.rows / 2) as isize, (self.cols / 2) as isize);
        self.taps.iter().enumerate().filter(|(_, t)| **t != 0.0).map(move |(i, &t)| {
            ((i / self.cols) as isize - hr, (i % self.cols) as isize - hc, t)
        })
    }
}

/// Resolves a halo coordinate; `None` means the halo value is zero.
#[inline]
fn resolve(i: isize, n: usize, b: BoundaryRule) -> Option<usize> {
    if i >= 0 && (i as usize) < n {
        return Some(i as usize);
    }
    match b {
        BoundaryRule::DirichletZero => None,
        BoundaryRule::NeumannReplicate => Some(i.clamp(0, n as isize - 1) as usize),
    }
}

/// Correlates every channel of `f` with `k` over the halo-padded grid.
pub fn stencil_apply(f: &Field, k: &StencilKernel, b: BoundaryRule) -> Result<Field> {
    k.check_fits(f.shape())?;
    let (h, w) = (f.height(), f.width());
    let mut out = Field::zeros(f.shape());
    let taps: Vec<_> = k.nonzero_taps().collect();
    for c in 0..f.channels() {
        let src = f.channel(c);
        let dst = out.channel_mut(c);
        for r in 0..h {
            for col in 0..w {
                let mut acc = 0.0;
                for &(dr, dc, t) in &taps {
                    if let (Some(rr), Some(cc)) = (
                        resolve(r as isize + dr, h, b),
                        resolve(col as isize + dc, w, b),
                    ) {
                        acc += t * src[rr * w + cc];
                    }
                }
                dst[r * w + col] = acc;
            }
        }
    }
    Ok(out)
}

/// Transpose of [`stencil_apply`]: scatters `g` back through the padding rule.
pub fn stencil_adjoint(g: &Field, k: &StencilKernel, b: BoundaryRule) -> Result<Field> {
    k.check_fits(g.shape())?;
    let (h, w) = (g.height(), g.width());
    let mut out = Field::zeros(g.shape());
    let taps: Vec<_> = k.nonzero_taps().collect();
    for c in 0..g.channels() {
        let src = g.channel(c);
        let dst = out.channel_mut(c);
        for r in 0..h {
            for col in 0..w {
                let gv = src[r * w + col];
                if gv == 0.0 {
                    continue;
                }
                for &(dr, dc, t) in &taps {
                    if let (Some(rr), Some(cc)) = (
                        resolve(r as isize + dr, h, b),
                        resolve(col as isize + dc, w, b),
                    ) {
                        dst[rr * w + cc] += t * gv;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn shape(h: usize, w: usize) -> Shape {
        Shape::new(1, h, w)
    }

    #[test]
    fn d20_of_constant_is_zero_inside_and_not_at_dirichlet_edges() {
        let f = Field::constant(shape(8, 8), 5.0);
        let out = stencil_apply(&f, &StencilKernel::d20(), BoundaryRule::DirichletZero).unwrap();
        for r in 0..8 {
            for c in 1..7 {
                assert_eq!(out.get(0, r, c), 0.0);
            }
            assert_eq!(out.get(0, r, 0), -5.0);
            assert_eq!(out.get(0, r, 7), -5.0);
        }
    }

    #[test]
    fn d20_of_quadratic_is_two() {
        let f = Field::from_fn(shape(8, 8), |_, _, x| (x * x) as f64);
        let out = stencil_apply(&f, &StencilKernel::d20(), BoundaryRule::NeumannReplicate).unwrap();
        for r in 0..8 {
            for c in 1..7 {
                assert_eq!(out.get(0, r, c), 2.0);
            }
        }
    }

    #[test]
    fn d20_row_taps() {
        let f = Field::from_vec(shape(3, 3), vec![0.0, 0.0, 0.0, 3.0, 7.0, 11.5, 0.0, 0.0, 0.0]).unwrap();
        let out = stencil_apply(&f, &StencilKernel::d20(), BoundaryRule::DirichletZero).unwrap();
        assert_eq!(out.get(0, 1, 1), 3.0 - 2.0 * 7.0 + 11.5);
    }

    #[test]
    fn second_differences_annihilate_linear_ramps() {
        let ramp = Field::from_fn(shape(7, 9), |_, y, x| 1.5 + 0.25 * x as f64 - 2.0 * y as f64);
        for k in [StencilKernel::d20(), StencilKernel::d02()] {
            for b in [BoundaryRule::DirichletZero, BoundaryRule::NeumannReplicate] {
                let out = stencil_apply(&ramp, &k, b).unwrap();
                for r in 1..6 {
                    for c in 1..8 {
                        assert_eq!(out.get(0, r, c), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn neumann_constant_is_zero_everywhere() {
        let f = Field::constant(shape(5, 6), -3.25);
        for k in [StencilKernel::d20(), StencilKernel::d02(), StencilKernel::d10(), StencilKernel::d01()] {
            let out = stencil_apply(&f, &k, BoundaryRule::NeumannReplicate).unwrap();
            assert_eq!(out.max_abs(), 0.0);
        }
    }

    #[test]
    fn kernel_larger_than_grid_is_rejected() {
        let f = Field::zeros(shape(2, 8));
        let err = stencil_apply(&f, &StencilKernel::d02(), BoundaryRule::DirichletZero).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }), "{err}");
    }

    #[test]
    fn shift_insert_examples() {
        let s = shape(2, 2);
        let a = Field::constant(s, 1.0);
        let b = Field::constant(s, 2.0);
        let c = Field::constant(s, 3.0);
        let stack = FieldStack::from_entries(vec![a.clone(), b]).unwrap();
        let out = stack_shift_insert(&stack, c.clone()).unwrap();
        assert_eq!(out.entries(), &[c.clone(), a.clone()]);

        let one = FieldStack::from_entries(vec![a]).unwrap();
        let out = stack_shift_insert(&one, c.clone()).unwrap();
        assert_eq!(out.entries(), &[c]);

        let mut three = FieldStack::zeros(3, s).unwrap();
        for v in 1..=3 {
            three.push(Field::constant(s, v as f64)).unwrap();
        }
        let got: Vec<f64> = three.entries().iter().map(|e| e.get(0, 0, 0)).collect();
        assert_eq!(got, vec![3.0, 2.0, 1.0]);

        let err = three.push(Field::zeros(shape(3, 3))).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn collapse_examples() {
        let s = shape(2, 3);
        let a = Field::from_fn(s, |_, r, c| (r * 3 + c) as f64);
        let b = Field::from_fn(s, |_, r, c| 1.0 - (r + c) as f64);
        let one = FieldStack::from_entries(vec![a.clone()]).unwrap();
        assert_eq!(weighted_collapse(&one, &[1.0]).unwrap(), a);

        let two = FieldStack::from_entries(vec![a.clone(), b.clone()]).unwrap();
        let expect = Field::from_fn(s, |_, r, c| 2.0 * a.get(0, r, c) - b.get(0, r, c));
        assert_eq!(weighted_collapse(&two, &[2.0, -1.0]).unwrap(), expect);

        let same = FieldStack::from_entries(vec![a.clone(), a.clone(), a.clone()]).unwrap();
        assert_eq!(weighted_collapse(&same, &[3.0, -3.0, 1.0]).unwrap(), a);

        assert!(matches!(
            weighted_collapse(&two, &[1.0]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    fn grid() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>)> {
        (3usize..8, 3usize..8).prop_flat_map(|(h, w)| {
            (
                Just(h),
                Just(w),
                prop::collection::vec(-10.0f64..10.0, h * w),
                prop::collection::vec(-10.0f64..10.0, h * w),
            )
        })
    }

    proptest! {
        #[test]
        fn stencil_is_linear((h, w, a, b) in grid(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let s = shape(h, w);
            let f = Field::from_vec(s, a).unwrap();
            let g = Field::from_vec(s, b).unwrap();
            let mut combo = f.scale(alpha);
            combo.axpy(beta, &g).unwrap();
            for k in [StencilKernel::d20(), StencilKernel::d02(), StencilKernel::d10(), StencilKernel::d01()] {
                for bc in [BoundaryRule::DirichletZero, BoundaryRule::NeumannReplicate] {
                    let lhs = stencil_apply(&combo, &k, bc).unwrap();
                    let mut rhs = stencil_apply(&f, &k, bc).unwrap().scale(alpha);
                    rhs.axpy(beta, &stencil_apply(&g, &k, bc).unwrap()).unwrap();
                    prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
                }
            }
        }

        #[test]
        fn adjoint_is_transpose((h, w, a, b) in grid()) {
            let s = shape(h, w);
            let f = Field::from_vec(s, a).unwrap();
            let g = Field::from_vec(s, b).unwrap();
            for k in [StencilKernel::d20(), StencilKernel::d02(), StencilKernel::d10(), StencilKernel::d01()] {
                for bc in [BoundaryRule::DirichletZero, BoundaryRule::NeumannReplicate] {
                    let lhs = stencil_apply(&f, &k, bc).unwrap().dot(&g).unwrap();
                    let rhs = f.dot(&stencil_adjoint(&g, &k, bc).unwrap()).unwrap();
                    prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
                }
            }
        }

        #[test]
        fn push_then_unit_collapse_returns_insert((h, w, a, b) in grid(), depth in 1usize..4) {
            let s = shape(h, w);
            let mut stack = FieldStack::zeros(depth, s).unwrap();
            stack.push(Field::from_vec(s, b).unwrap()).unwrap();
            let newest = Field::from_vec(s, a).unwrap();
            stack.push(newest.clone()).unwrap();
            let mut e1 = vec![0.0; depth];
            e1[0] = 1.0;
            prop_assert_eq!(weighted_collapse(&stack, &e1).unwrap(), newest);
        }
    }
}
