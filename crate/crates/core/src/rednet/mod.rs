//! Residual encoder-decoder over a stack of maps, with an optional linear
//! identity path mixing the stacked inputs.
//!
//! Encoder block `m`: stride-2 conv then stride-1 conv, both ReLU. Decoder
//! block `m` mirrors it with a stride-1 then stride-2 transposed conv; inner
//! blocks add the matching encoder output before their ReLU, the outermost
//! block adds `Σ_p w_vc[p] · input_slot_p` and has no activation.

pub mod conv;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result, Shape};
use crate::field::{Field, FieldStack};
use conv::{gather, scatter, wgrad, Act, Geometry};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RedNetConfig {
    /// Number of stacked input maps.
    pub depth: usize,
    /// Channels per map; also the output channel count.
    pub channels: usize,
    /// Feature width of each encoder block; its length is `M`.
    pub widths: Vec<usize>,
    pub kernel: usize,
    /// Whether the `w_vc` identity path exists.
    pub identity_path: bool,
}

impl RedNetConfig {
    /// Small plan used at desk scale: two blocks of width 16 and 32.
    pub fn desk(depth: usize, channels: usize) -> Self {
        Self { depth, channels, widths: vec![16, 32], kernel: 3, identity_path: true }
    }

    pub fn blocks(&self) -> usize {
        self.widths.len()
    }

    pub fn in_channels(&self) -> usize {
        self.depth * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.channels == 0 {
            return Err(config_err("network depth and channels must be positive"));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(config_err("network needs at least one block and positive widths"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(config_err(format!("kernel size must be odd, got {}", self.kernel)));
        }
        Ok(())
    }

    /// Rejects grids the stride-2 stages cannot halve exactly.
    pub fn check_grid(&self, height: usize, width: usize) -> Result<()> {
        let f = 1usize << self.blocks();
        if !height.is_multiple_of(f) || !width.is_multiple_of(f) || height < f || width < f {
            return Err(config_err(format!(
                "grid {height}x{width} must be a positive multiple of {f} for {} blocks",
                self.blocks()
            )));
        }
        Ok(())
    }

    fn layers(&self) -> Vec<LayerSpec> {
        let k = self.kernel;
        let m = self.blocks();
        let mut specs = Vec::with_capacity(4 * m);
        let mut off = if self.identity_path { self.depth } else { 0 };
        let mut push = |src: usize, dst: usize, stride: usize, transposed: bool, specs: &mut Vec<LayerSpec>| {
            specs.push(LayerSpec { src, dst, stride, transposed, w_off: off, b_off: 0 });
            off += src * dst * k * k;
        };
        let mut prev = self.in_channels();
        for &w in &self.widths {
            push(prev, w, 2, false, &mut specs);
            push(w, w, 1, false, &mut specs);
            prev = w;
        }
        for b in (0..m).rev() {
            let w = self.widths[b];
            let target = if b == 0 { self.channels } else { self.widths[b - 1] };
            push(w, w, 1, true, &mut specs);
            push(w, target, 2, true, &mut specs);
        }
        for s in &mut specs {
            s.b_off = off;
            off += s.dst;
        }
        specs
    }

    pub fn param_count(&self) -> usize {
        let layers = self.layers();
        let last = layers.last().expect("at least one block");
        last.b_off + last.dst
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerSpec {
    src: usize,
    dst: usize,
    stride: usize,
    transposed: bool,
    w_off: usize,
    b_off: usize,
}

/// Network weights as one flat vector: `[w_vc][layer weights in order]
/// [layer biases in order]`, encoder layers before decoder layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RedNet {
    config: RedNetConfig,
    params: Vec<f64>,
}

/// Activations saved by a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    input: Act,
    /// Post-activation output of every layer except the last.
    outs: Vec<Act>,
}

impl RedNet {
    /// Fan-in uniform init, zero biases, zero final layer; `w_vc` is set to
    /// `identity_init` (its length must equal the depth).
    pub fn new(config: RedNetConfig, identity_init: &[f64], seed: u64) -> Result<Self> {
        config.validate()?;
        if config.identity_path && identity_init.len() != config.depth {
            return Err(Error::LengthMismatch { context: "w_vc init", expected: config.depth, found: identity_init.len() });
        }
        let mut params = vec![0.0; config.param_count()];
        if config.identity_path {
            params[..config.depth].copy_from_slice(identity_init);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = config.layers();
        let k = config.kernel;
        for l in &layers[..layers.len() - 1] {
            let bound = (3.0 / (l.src * k * k) as f64).sqrt();
            for w in &mut params[l.w_off..l.w_off + l.src * l.dst * k * k] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: RedNetConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if params.len() != config.param_count() {
            return Err(Error::LengthMismatch { context: "network parameters", expected: config.param_count(), found: params.len() });
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &RedNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn w_vc(&self) -> &[f64] {
        if self.config.identity_path {
            &self.params[..self.config.depth]
        } else {
            &[]
        }
    }

    /// Zeroes every convolution weight and bias, leaving only `w_vc`.
    pub fn zero_convolutions(&mut self) {
        let start = self.w_vc().len();
        self.params[start..].fill(0.0);
    }

    fn geometry(&self, stride: usize) -> Geometry {
        Geometry { k: self.config.kernel, stride, pad: self.config.kernel / 2 }
    }

    fn run_layer(&self, l: &LayerSpec, x: &Act, big_hw: Option<(usize, usize)>) -> Act {
        let k = self.config.kernel;
        let w = &self.params[l.w_off..l.w_off + l.src * l.dst * k * k];
        let g = self.geometry(l.stride);
        let mut y = if l.transposed {
            let (h, wd) = big_hw.expect("transposed layer needs an output size");
            let mut y = Act::zeros(l.dst, h, wd);
            scatter(x, w, g, &mut y);
            y
        } else {
            let mut y = Act::zeros(l.dst, x.h.div_ceil(l.stride), x.w.div_ceil(l.stride));
            gather(x, w, g, &mut y);
            y
        };
        let plane = y.h * y.w;
        for (c, b) in self.params[l.b_off..l.b_off + l.dst].iter().enumerate() {
            if *b != 0.0 {
                for v in &mut y.data[c * plane..(c + 1) * plane] {
                    *v += b;
                }
            }
        }
        y
    }

    fn input_act(&self, input: &Field) -> Result<Act> {
        if input.channels() != self.config.in_channels() {
            return Err(Error::ShapeMismatch {
                context: "network input channels",
                expected: Shape::new(self.config.in_channels(), input.height(), input.width()),
                found: input.shape(),
            });
        }
        self.config.check_grid(input.height(), input.width())?;
        Ok(Act { ch: input.channels(), h: input.height(), w: input.width(), data: input.as_slice().to_vec() })
    }

    /// Output for a stack of maps stacked newest-first along channels.
    pub fn forward(&self, stack: &FieldStack) -> Result<Field> {
        if stack.depth() != self.config.depth {
            return Err(Error::LengthMismatch { context: "network input stack", expected: self.config.depth, found: stack.depth() });
        }
        Ok(self.forward_tape(&stack.to_channels())?.0)
    }

    pub fn forward_tape(&self, input: &Field) -> Result<(Field, Tape)> {
        let x = self.input_act(input)?;
        let layers = self.config.layers();
        let m = self.config.blocks();
        let mut outs: Vec<Act> = Vec::with_capacity(layers.len() - 1);
        // encoder outputs e_j live at outs[2j - 1], e_0 is the input
        for i in 0..2 * m {
            let prev = if i == 0 { &x } else { &outs[i - 1] };
            let mut y = self.run_layer(&layers[i], prev, None);
            y.relu_in_place();
            outs.push(y);
        }
        let mut out = None;
        for (j, b) in (0..m).rev().enumerate() {
            let l1 = &layers[2 * m + 2 * j];
            let l2 = &layers[2 * m + 2 * j + 1];
            let cur = outs.last().expect("encoder ran");
            let mut y = self.run_layer(l1, cur, Some((cur.h, cur.w)));
            y.relu_in_place();
            outs.push(y);
            let skip = if b == 0 { &x } else { &outs[2 * b - 1] };
            let mut z = self.run_layer(l2, outs.last().expect("pushed"), Some((skip.h, skip.w)));
            if b > 0 {
                for (v, s) in z.data.iter_mut().zip(&skip.data) {
                    *v += s;
                }
                z.relu_in_place();
                outs.push(z);
            } else {
                self.add_identity(&x, &mut z);
                out = Some(z);
            }
        }
        let z = out.expect("at least one block");
        let field = Field::from_vec(Shape::new(z.ch, z.h, z.w), z.data)?;
        Ok((field, Tape { input: x, outs }))
    }

    fn add_identity(&self, x: &Act, out: &mut Act) {
        let plane = out.ch * out.h * out.w;
        for (p, wv) in self.w_vc().iter().enumerate() {
            for (o, v) in out.data.iter_mut().zip(&x.data[p * plane..(p + 1) * plane]) {
                *o += wv * v;
            }
        }
    }

    /// Gradient of `<upstream, forward(input)>` with respect to the input
    /// (stacked channels) and the flat parameter vector.
    pub fn backward(&self, tape: &Tape, upstream: &Field) -> Result<(Field, Vec<f64>)> {
        let x = &tape.input;
        if upstream.channels() != self.config.channels || upstream.height() != x.h || upstream.width() != x.w {
            return Err(Error::ShapeMismatch {
                context: "network upstream gradient",
                expected: Shape::new(self.config.channels, x.h, x.w),
                found: upstream.shape(),
            });
        }
        let layers = self.config.layers();
        let m = self.config.blocks();
        let k = self.config.kernel;
        let mut grad = vec![0.0; self.params.len()];
        let mut dx = Act::zeros(x.ch, x.h, x.w);
        let dz = Act { ch: upstream.channels(), h: x.h, w: x.w, data: upstream.as_slice().to_vec() };
        // identity path
        let plane = dz.data.len();
        for p in 0..self.w_vc().len() {
            let xs = &x.data[p * plane..(p + 1) * plane];
            grad[p] = dz.data.iter().zip(xs).map(|(a, b)| a * b).sum();
            for (d, g) in dx.data[p * plane..(p + 1) * plane].iter_mut().zip(&dz.data) {
                *d += self.w_vc()[p] * g;
            }
        }
        // Pending gradients for encoder outputs reached through skips.
        let mut skip_grads: Vec<Option<Act>> = vec![None; m];
        let mut dcur = dz;
        // Walk decoder blocks from the outermost (b = 0) inward.
        for b in 0..m {
            let j = m - 1 - b;
            let l1 = &layers[2 * m + 2 * j];
            let l2 = &layers[2 * m + 2 * j + 1];
            let idx1 = 2 * m + 2 * j; // outs index of l1's output
            let y1 = &tape.outs[idx1];
            if b > 0 {
                // dcur is w.r.t. relu(z + skip), stored at outs[idx1 + 1]
                tape.outs[idx1 + 1].mask_grad(&mut dcur);
                skip_grads[b] = Some(dcur.clone());
            }
            // l2: transposed, small = y1, big = output
            let mut dy1 = self.layer_backward(l2, y1, &dcur, &mut grad, k);
            y1.mask_grad(&mut dy1);
            let src = if j == 0 { &tape.outs[2 * m - 1] } else { &tape.outs[idx1 - 1] };
            dcur = self.layer_backward(l1, src, &dy1, &mut grad, k);
        }
        // dcur is now w.r.t. the deepest encoder output e_M.
        for b in (1..=m).rev() {
            if b < m {
                if let Some(s) = &skip_grads[b] {
                    for (d, g) in dcur.data.iter_mut().zip(&s.data) {
                        *d += g;
                    }
                }
            }
            let i2 = 2 * b - 1;
            let i1 = 2 * b - 2;
            tape.outs[i2].mask_grad(&mut dcur);
            let mut d1 = self.layer_backward(&layers[i2], &tape.outs[i1], &dcur, &mut grad, k);
            tape.outs[i1].mask_grad(&mut d1);
            let src = if i1 == 0 { x } else { &tape.outs[i1 - 1] };
            dcur = self.layer_backward(&layers[i1], src, &d1, &mut grad, k);
        }
        for (d, g) in dx.data.iter_mut().zip(&dcur.data) {
            *d += g;
        }
        let field = Field::from_vec(Shape::new(dx.ch, dx.h, dx.w), dx.data)?;
        Ok((field, grad))
    }

    /// Accumulates weight and bias gradients of layer `l` evaluated at input
    /// `x` with output gradient `dy`, returning the input gradient.
    fn layer_backward(&self, l: &LayerSpec, x: &Act, dy: &Act, grad: &mut [f64], k: usize) -> Act {
        let wlen = l.src * l.dst * k * k;
        let w = &self.params[l.w_off..l.w_off + wlen];
        let g = self.geometry(l.stride);
        let plane = dy.h * dy.w;
        for c in 0..l.dst {
            grad[l.b_off + c] += dy.data[c * plane..(c + 1) * plane].iter().sum::<f64>();
        }
        let mut dx = Act::zeros(x.ch, x.h, x.w);
        if l.transposed {
            wgrad(x, dy, g, &mut grad[l.w_off..l.w_off + wlen]);
            gather(dy, w, g, &mut dx);
        } else {
            wgrad(dy, x, g, &mut grad[l.w_off..l.w_off + wlen]);
            scatter(dy, w, g, &mut dx);
        }
        dx
    }
}

#[cfg(test)]
pub(crate) mod tests;
