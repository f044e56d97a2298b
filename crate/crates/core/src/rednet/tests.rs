use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Grid3 = Vec<Vec<Vec<f64>>>;

fn to_grid(f: &Field) -> Grid3 {
    (0..f.channels())
        .map(|c| (0..f.height()).map(|r| (0..f.width()).map(|col| f.get(c, r, col)).collect()).collect())
        .collect()
}

fn conv_naive(x: &Grid3, w: &[f64], b: &[f64], cout: usize, k: usize, stride: usize) -> Grid3 {
    let (cin, h, wd) = (x.len(), x[0].len(), x[0][0].len());
    let p = (k / 2) as isize;
    let oh = (h - 1) / stride + 1;
    let ow = (wd - 1) / stride + 1;
    let mut y = vec![vec![vec![0.0; ow]; oh]; cout];
    for o in 0..cout {
        for r in 0..oh {
            for c in 0..ow {
                let mut acc = b[o];
                for i in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let rr = (r * stride + ky) as isize - p;
                            let cc = (c * stride + kx) as isize - p;
                            if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < wd {
                                acc += w[((o * cin + i) * k + ky) * k + kx] * x[i][rr as usize][cc as usize];
                            }
                        }
                    }
                }
                y[o][r][c] = acc;
            }
        }
    }
    y
}

/// Transposed conv via zero insertion + flipped kernel, cropped to `out`.
fn tconv_naive(x: &Grid3, w: &[f64], b: &[f64], cout: usize, k: usize, stride: usize, out: (usize, usize)) -> Grid3 {
    let (cin, h, wd) = (x.len(), x[0].len(), x[0][0].len());
    let p = k / 2;
    let lo = k - 1 - p;
    let dh = out.0 + k - 1;
    let dw = out.1 + k - 1;
    let mut dil = vec![vec![vec![0.0; dw]; dh]; cin];
    for i in 0..cin {
        for r in 0..h {
            for c in 0..wd {
                dil[i][lo + r * stride][lo + c * stride] = x[i][r][c];
            }
        }
    }
    let mut y = vec![vec![vec![0.0; out.1]; out.0]; cout];
    for o in 0..cout {
        for r in 0..out.0 {
            for c in 0..out.1 {
                let mut acc = b[o];
                for i in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let wt = w[((i * cout + o) * k + (k - 1 - ky)) * k + (k - 1 - kx)];
                            acc += wt * dil[i][r + ky][c + kx];
                        }
                    }
                }
                y[o][r][c] = acc;
            }
        }
    }
    y
}

fn relu(mut g: Grid3) -> Grid3 {
    g.iter_mut().flatten().flatten().for_each(|v| *v = v.max(0.0));
    g
}

fn add(a: &Grid3, b: &Grid3) -> Grid3 {
    a.iter()
        .zip(b)
        .map(|(pa, pb)| pa.iter().zip(pb).map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| x + y).collect()).collect())
        .collect()
}

/// Straight-line evaluation of the encoder-decoder from its definition,
/// reading weights from the documented flat layout.
pub(crate) fn naive_forward(net: &RedNet, input: &Field) -> Field {
    let cfg = net.config();
    let p = net.params();
    let k = cfg.kernel;
    let mut w_off = if cfg.identity_path { cfg.depth } else { 0 };
    let mut sizes = Vec::new(); // (src, dst) per layer
    let mut prev = cfg.in_channels();
    for &w in &cfg.widths {
        sizes.push((prev, w));
        sizes.push((w, w));
        prev = w;
    }
    for b in (0..cfg.widths.len()).rev() {
        let t = if b == 0 { cfg.channels } else { cfg.widths[b - 1] };
        sizes.push((cfg.widths[b], cfg.widths[b]));
        sizes.push((cfg.widths[b], t));
    }
    let mut w_offs = Vec::new();
    for &(s, d) in &sizes {
        w_offs.push(w_off);
        w_off += s * d * k * k;
    }
    let mut b_offs = Vec::new();
    for &(_, d) in &sizes {
        b_offs.push(w_off);
        w_off += d;
    }
    let wts = |i: usize| &p[w_offs[i]..w_offs[i] + sizes[i].0 * sizes[i].1 * k * k];
    let bias = |i: usize| &p[b_offs[i]..b_offs[i] + sizes[i].1];

    let x = to_grid(input);
    let m = cfg.widths.len();
    let mut enc = vec![x.clone()];
    let mut cur = x.clone();
    for b in 0..m {
        cur = relu(conv_naive(&cur, wts(2 * b), bias(2 * b), sizes[2 * b].1, k, 2));
        cur = relu(conv_naive(&cur, wts(2 * b + 1), bias(2 * b + 1), sizes[2 * b + 1].1, k, 1));
        enc.push(cur.clone());
    }
    for (j, b) in (0..m).rev().enumerate() {
        let i1 = 2 * m + 2 * j;
        let hw = (cur[0].len(), cur[0][0].len());
        cur = relu(tconv_naive(&cur, wts(i1), bias(i1), sizes[i1].1, k, 1, hw));
        let skip = &enc[b];
        let z = tconv_naive(&cur, wts(i1 + 1), bias(i1 + 1), sizes[i1 + 1].1, k, 2, (skip[0].len(), skip[0][0].len()));
        cur = if b > 0 { relu(add(&z, skip)) } else { z };
    }
    let c = cfg.channels;
    let mut out = Field::from_fn(Shape::new(c, input.height(), input.width()), |ch, r, col| cur[ch][r][col]);
    for (slot, wv) in net.w_vc().iter().enumerate() {
        for ch in 0..c {
            for r in 0..input.height() {
                for col in 0..input.width() {
                    let v = out.get(ch, r, col) + wv * x[slot * c + ch][r][col];
                    out.set(ch, r, col, v);
                }
            }
        }
    }
    out
}

pub(crate) fn randomize(net: &mut RedNet, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in net.params_mut() {
        *v = rng.random_range(-scale..scale);
    }
}

fn rand_field(shape: Shape, seed: u64) -> Field {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Field::from_fn(shape, |_, _, _| rng.random_range(-1.0..1.0))
}

#[test]
fn zero_convolutions_leave_only_the_identity_path() {
    let mut net = RedNet::new(RedNetConfig::desk(1, 1), &[1.0], 0).unwrap();
    randomize(&mut net, 1, 0.3);
    net.params_mut()[0] = 1.0;
    net.zero_convolutions();
    let v = rand_field(Shape::new(1, 16, 16), 2);
    let stack = FieldStack::from_entries(vec![v.clone()]).unwrap();
    assert_eq!(net.forward(&stack).unwrap(), v);

    let mut net3 = RedNet::new(RedNetConfig::desk(3, 1), &[3.0, -3.0, 1.0], 0).unwrap();
    net3.zero_convolutions();
    let entries: Vec<Field> = (0..3).map(|i| rand_field(Shape::new(1, 8, 8), 10 + i)).collect();
    let stack = FieldStack::from_entries(entries).unwrap();
    assert_eq!(net3.forward(&stack).unwrap(), stack.weighted_collapse(&[3.0, -3.0, 1.0]).unwrap());
}

#[test]
fn fresh_network_outputs_the_identity_path() {
    let net = RedNet::new(RedNetConfig::desk(2, 1), &[2.0, -1.0], 9).unwrap();
    let entries: Vec<Field> = (0..2).map(|i| rand_field(Shape::new(1, 16, 16), i)).collect();
    let stack = FieldStack::from_entries(entries).unwrap();
    assert_eq!(net.forward(&stack).unwrap(), stack.weighted_collapse(&[2.0, -1.0]).unwrap());
}

#[test]
fn zero_input_with_zero_biases_gives_zero() {
    let net = RedNet::new(RedNetConfig::desk(2, 2), &[2.0, -1.0], 4).unwrap();
    let stack = FieldStack::zeros(2, Shape::new(2, 16, 16)).unwrap();
    assert_eq!(net.forward(&stack).unwrap().max_abs(), 0.0);
}

#[test]
fn forward_matches_naive_evaluation() {
    for (cfg, seed) in [
        (RedNetConfig { depth: 2, channels: 1, widths: vec![4, 6], kernel: 3, identity_path: true }, 1),
        (RedNetConfig { depth: 1, channels: 2, widths: vec![3], kernel: 3, identity_path: true }, 2),
        (RedNetConfig { depth: 3, channels: 1, widths: vec![4, 4, 5], kernel: 5, identity_path: false }, 3),
    ] {
        let mut net = RedNet::new(cfg.clone(), &vec![0.5; cfg.depth], 0).unwrap();
        randomize(&mut net, seed, 0.4);
        let input = rand_field(Shape::new(cfg.in_channels(), 8, 8), seed + 100);
        let (fast, _) = net.forward_tape(&input).unwrap();
        let slow = naive_forward(&net, &input);
        assert!(fast.max_abs_diff(&slow).unwrap() < 1e-10, "{cfg:?}");
    }
}

#[test]
fn shapes_round_trip_on_power_of_two_grids_and_bad_grids_are_rejected() {
    let cfg = RedNetConfig::desk(1, 1);
    let net = RedNet::new(cfg.clone(), &[1.0], 0).unwrap();
    for n in [4, 8, 16, 32] {
        let out = net.forward_tape(&Field::zeros(Shape::new(1, n, n))).unwrap().0;
        assert_eq!(out.shape(), Shape::new(1, n, n));
    }
    let rect = net.forward_tape(&Field::zeros(Shape::new(1, 8, 12))).unwrap().0;
    assert_eq!(rect.shape(), Shape::new(1, 8, 12));
    assert!(matches!(net.forward_tape(&Field::zeros(Shape::new(1, 10, 10))), Err(Error::Config(_))));
    assert!(matches!(net.forward_tape(&Field::zeros(Shape::new(2, 8, 8))), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let mut net = RedNet::new(RedNetConfig::desk(2, 1), &[2.0, -1.0], 0).unwrap();
    randomize(&mut net, 5, 0.3);
    let input = rand_field(Shape::new(2, 8, 8), 6);
    let (_, tape) = net.forward_tape(&input).unwrap();
    let (dx, dp) = net.backward(&tape, &Field::zeros(Shape::new(1, 8, 8))).unwrap();
    assert_eq!(dx.max_abs(), 0.0);
    assert!(dp.iter().all(|g| *g == 0.0));
}

#[test]
fn identity_path_gradient_is_an_inner_product() {
    let mut net = RedNet::new(RedNetConfig::desk(3, 1), &[3.0, -3.0, 1.0], 0).unwrap();
    net.zero_convolutions();
    let input = rand_field(Shape::new(3, 8, 8), 7);
    let up = rand_field(Shape::new(1, 8, 8), 8);
    let (_, tape) = net.forward_tape(&input).unwrap();
    let (_, dp) = net.backward(&tape, &up).unwrap();
    let slots = input.split_channels(3).unwrap();
    for p in 0..3 {
        assert!((dp[p] - up.dot(&slots[p]).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn gradients_match_finite_differences() {
    let cfg = RedNetConfig { depth: 2, channels: 1, widths: vec![4, 4], kernel: 3, identity_path: true };
    let mut net = RedNet::new(cfg, &[2.0, -1.0], 0).unwrap();
    randomize(&mut net, 11, 0.5);
    let input = rand_field(Shape::new(2, 8, 8), 12);
    let up = rand_field(Shape::new(1, 8, 8), 13);
    let (_, tape) = net.forward_tape(&input).unwrap();
    let (dx, dp) = net.backward(&tape, &up).unwrap();
    let loss = |n: &RedNet, x: &Field| n.forward_tape(x).unwrap().0.dot(&up).unwrap();
    let eps = 1e-5;
    let gmax = dp.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    for i in 0..dp.len() {
        let mut plus = net.clone();
        plus.params_mut()[i] += eps;
        let mut minus = net.clone();
        minus.params_mut()[i] -= eps;
        let fd = (loss(&plus, &input) - loss(&minus, &input)) / (2.0 * eps);
        assert!((fd - dp[i]).abs() <= 1e-4 * gmax, "param {i}: fd {fd} analytic {}", dp[i]);
    }
    let xmax = dx.max_abs();
    for i in 0..input.as_slice().len() {
        let mut plus = input.clone();
        plus.as_mut_slice()[i] += eps;
        let mut minus = input.clone();
        minus.as_mut_slice()[i] -= eps;
        let fd = (loss(&net, &plus) - loss(&net, &minus)) / (2.0 * eps);
        assert!((fd - dx.as_slice()[i]).abs() <= 1e-4 * xmax, "input {i}");
    }
}
