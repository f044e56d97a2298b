//! Strided 2-D convolution primitives on channel-major planes.
//!
//! Every layer connects a "big" grid (indexed `r * stride + ky - pad`) with a
//! "small" grid (indexed `r`). A convolution gathers big → small, a
//! transposed convolution scatters small → big, and the backward passes swap
//! the two. Weights are always laid out `[small_ch][big_ch][k][k]`.

/// A dense activation tensor `[ch][h][w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Act {
    pub ch: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Act {
    pub fn zeros(ch: usize, h: usize, w: usize) -> Self {
        Self { ch, h, w, data: vec![0.0; ch * h * w] }
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn relu_in_place(&mut self) {
        for v in &mut self.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }

    /// Zeroes `grad` wherever this (post-ReLU) activation is not positive.
    pub fn mask_grad(&self, grad: &mut Act) {
        for (g, a) in grad.data.iter_mut().zip(&self.data) {
            if *a <= 0.0 {
                *g = 0.0;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Geometry {
    /// Half-open range of small-grid indices `r` whose big index
    /// `r * stride + tap - pad` lies inside `0..big`.
    #[inline]
    fn valid(&self, tap: usize, small: usize, big: usize) -> (usize, usize) {
        let lo = if tap >= self.pad { 0 } else { (self.pad - tap).div_ceil(self.stride) };
        // largest r with r*s + tap - pad <= big - 1
        let top = big + self.pad;
        let hi = if top <= tap { 0 } else { ((top - tap - 1) / self.stride + 1).min(small) };
        (lo, hi.max(lo))
    }
}

/// `small[a][r][c] += Σ_b,ky,kx w[a][b][ky][kx] · big[b][r·s+ky−p][c·s+kx−p]`.
pub fn gather(big: &Act, w: &[f64], g: Geometry, small: &mut Act) {
    let k = g.k;
    let s = g.stride;
    debug_assert_eq!(w.len(), small.ch * big.ch * k * k);
    let (bh, bw, sh, sw) = (big.h, big.w, small.h, small.w);
    for a in 0..small.ch {
        let out = &mut small.data[a * sh * sw..(a + 1) * sh * sw];
        for b in 0..big.ch {
            let inp = &big.data[b * bh * bw..(b + 1) * bh * bw];
            for ky in 0..k {
                let (r0, r1) = g.valid(ky, sh, bh);
                for kx in 0..k {
                    let wt = w[((a * big.ch + b) * k + ky) * k + kx];
                    if wt == 0.0 {
                        continue;
                    }
                    let (c0, c1) = g.valid(kx, sw, bw);
                    for r in r0..r1 {
                        let row = (r * s + ky - g.pad) * bw;
                        let orow = &mut out[r * sw..(r + 1) * sw];
                        for c in c0..c1 {
                            orow[c] += wt * inp[row + c * s + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// `big[b][r·s+ky−p][c·s+kx−p] += w[a][b][ky][kx] · small[a][r][c]`.
pub fn scatter(small: &Act, w: &[f64], g: Geometry, big: &mut Act) {
    let k = g.k;
    let s = g.stride;
    debug_assert_eq!(w.len(), small.ch * big.ch * k * k);
    let (bh, bw, sh, sw) = (big.h, big.w, small.h, small.w);
    for a in 0..small.ch {
        let inp = &small.data[a * sh * sw..(a + 1) * sh * sw];
        for b in 0..big.ch {
            let out = &mut big.data[b * bh * bw..(b + 1) * bh * bw];
            for ky in 0..k {
                let (r0, r1) = g.valid(ky, sh, bh);
                for kx in 0..k {
                    let wt = w[((a * big.ch + b) * k + ky) * k + kx];
                    if wt == 0.0 {
                        continue;
                    }
                    let (c0, c1) = g.valid(kx, sw, bw);
                    for r in r0..r1 {
                        let row = (r * s + ky - g.pad) * bw;
                        let irow = &inp[r * sw..(r + 1) * sw];
                        for c in c0..c1 {
                            out[row + c * s + kx - g.pad] += wt * irow[c];
                        }
                    }
                }
            }
        }
    }
}

/// `dw[a][b][ky][kx] += Σ_r,c small[a][r][c] · big[b][r·s+ky−p][c·s+kx−p]`.
pub fn wgrad(small: &Act, big: &Act, g: Geometry, dw: &mut [f64]) {
    let k = g.k;
    let s = g.stride;
    debug_assert_eq!(dw.len(), small.ch * big.ch * k * k);
    let (bh, bw, sh, sw) = (big.h, big.w, small.h, small.w);
    for a in 0..small.ch {
        let sp = &small.data[a * sh * sw..(a + 1) * sh * sw];
        for b in 0..big.ch {
            let bp = &big.data[b * bh * bw..(b + 1) * bh * bw];
            for ky in 0..k {
                let (r0, r1) = g.valid(ky, sh, bh);
                for kx in 0..k {
                    let (c0, c1) = g.valid(kx, sw, bw);
                    let mut acc = 0.0;
                    for r in r0..r1 {
                        let row = (r * s + ky - g.pad) * bw;
                        let srow = &sp[r * sw..(r + 1) * sw];
                        for c in c0..c1 {
                            acc += srow[c] * bp[row + c * s + kx - g.pad];
                        }
                    }
                    dw[((a * big.ch + b) * k + ky) * k + kx] += acc;
                }
            }
        }
    }
}
