//! Independent f64 reference implementations. Each one follows the textbook
//! formula with plain nested loops and shares no code with the library.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use textseg::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(r: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| r.random_range(lo..=hi)).collect()
}

pub fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, rand_vec(r, n, lo, hi)).unwrap()
}

pub fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y).abs())
        .fold(0.0, f64::max)
}

pub fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Zero-padded cross-correlation. Returns `(data, [C_out, H', W'])`.
pub fn conv2d(
    x: &Tensor,
    wt: &Tensor,
    b: &Tensor,
    (sh, sw): (usize, usize),
    (ph, pw): (usize, usize),
) -> (Vec<f64>, [usize; 3]) {
    let [ci, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    let [co, _, kh, kw] = [wt.shape()[0], wt.shape()[1], wt.shape()[2], wt.shape()[3]];
    let oh = (h + 2 * ph - kh) / sh + 1;
    let ow = (w + 2 * pw - kw) / sw + 1;
    let xv = |c: usize, i: isize, j: isize| -> f64 {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            0.0
        } else {
            x.data()[c * h * w + i as usize * w + j as usize] as f64
        }
    };
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for y in 0..oh {
            for z in 0..ow {
                let mut s = b.data()[o] as f64;
                for c in 0..ci {
                    for u in 0..kh {
                        for v in 0..kw {
                            let i = (y * sh + u) as isize - ph as isize;
                            let j = (z * sw + v) as isize - pw as isize;
                            s += wt.data()[((o * ci + c) * kh + u) * kw + v] as f64 * xv(c, i, j);
                        }
                    }
                }
                out[(o * oh + y) * ow + z] = s;
            }
        }
    }
    (out, [co, oh, ow])
}

/// Transposed convolution as an explicit scatter-add of every input tap.
pub fn transposed_conv2d(
    x: &Tensor,
    wt: &Tensor,
    b: &Tensor,
    stride: usize,
) -> (Vec<f64>, [usize; 3]) {
    let [ci, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    let [_, co, kh, kw] = [wt.shape()[0], wt.shape()[1], wt.shape()[2], wt.shape()[3]];
    let (oh, ow) = (stride * (h - 1) + kh, stride * (w - 1) + kw);
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for p in 0..oh * ow {
            out[o * oh * ow + p] = b.data()[o] as f64;
        }
    }
    for c in 0..ci {
        for i in 0..h {
            for j in 0..w {
                let xv = x.data()[(c * h + i) * w + j] as f64;
                for o in 0..co {
                    for u in 0..kh {
                        for v in 0..kw {
                            let wv = wt.data()[((c * co + o) * kh + u) * kw + v] as f64;
                            out[(o * oh + i * stride + u) * ow + j * stride + v] += xv * wv;
                        }
                    }
                }
            }
        }
    }
    (out, [co, oh, ow])
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Half-pixel bilinear sampling of one `[H,W]` plane.
pub fn bilinear(plane: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let src = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        let (y0, y1, fy) = src(y, h, oh);
        for x in 0..ow {
            let (x0, x1, fx) = src(x, w, ow);
            let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
            let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
            out[y * ow + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One LSTM step with gate order i, f, g, o.
pub fn lstm_step(
    w_ih: &Tensor,
    w_hh: &Tensor,
    b: &Tensor,
    x: &[f64],
    h: &[f64],
    c: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let hid = h.len();
    let gate = |r: usize| {
        let mut s = b.data()[r] as f64;
        for (k, xv) in x.iter().enumerate() {
            s += w_ih.data()[r * x.len() + k] as f64 * xv;
        }
        for (k, hv) in h.iter().enumerate() {
            s += w_hh.data()[r * hid + k] as f64 * hv;
        }
        s
    };
    let mut hn = vec![0.0; hid];
    let mut cn = vec![0.0; hid];
    for j in 0..hid {
        let (i, f, g, o) = (
            sigmoid(gate(j)),
            sigmoid(gate(hid + j)),
            gate(2 * hid + j).tanh(),
            sigmoid(gate(3 * hid + j)),
        );
        cn[j] = f * c[j] + i * g;
        hn[j] = o * cn[j].tanh();
    }
    (hn, cn)
}

/// Attention over `fused [C,H,W]`: centre tap `W_F`, the eight neighbours with
/// their own taps (zero outside the map), plus `W_h h`, tanh, score `w_e`,
/// softmax over positions, and the weighted feature sum.
pub fn attention(
    fused: &Tensor,
    h_t: &[f64],
    att_feat: &Tensor,
    att_hidden: &Tensor,
    att_score: &Tensor,
) -> (Vec<f64>, Vec<f64>) {
    let [c, h, w] = [fused.shape()[0], fused.shape()[1], fused.shape()[2]];
    let a = att_score.len();
    let d = h_t.len();
    let f = |ch: usize, i: usize, j: usize| fused.data()[(ch * h + i) * w + j] as f64;
    let tap = |r: usize, ch: usize, u: usize, v: usize| {
        att_feat.data()[((r * c + ch) * 3 + u) * 3 + v] as f64
    };
    let mut scores = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let mut s = 0.0;
            for r in 0..a {
                let mut e = 0.0;
                for ch in 0..c {
                    e += tap(r, ch, 1, 1) * f(ch, i, j);
                    for (di, dj) in [
                        (-1, -1),
                        (-1, 0),
                        (-1, 1),
                        (0, -1),
                        (0, 1),
                        (1, -1),
                        (1, 0),
                        (1, 1),
                    ] {
                        let (p, q) = (i as isize + di, j as isize + dj);
                        if p >= 0 && q >= 0 && p < h as isize && q < w as isize {
                            e += tap(r, ch, (di + 1) as usize, (dj + 1) as usize)
                                * f(ch, p as usize, q as usize);
                        }
                    }
                }
                for k in 0..d {
                    e += att_hidden.data()[r * d + k] as f64 * h_t[k];
                }
                s += att_score.data()[r] as f64 * e.tanh();
            }
            scores.push(s);
        }
    }
    let alpha = softmax(&scores);
    let glimpse = (0..c)
        .map(|ch| (0..h * w).map(|p| alpha[p] * f(ch, p / w, p % w)).sum())
        .collect();
    (alpha, glimpse)
}

/// `-ln softmax(logits)[target]`.
pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    -softmax(logits)[target].ln()
}

pub fn bce_mean(pred: &[f64], target: &[f64]) -> f64 {
    let eps = 1e-7;
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(&m, &p)| {
            let m = m.clamp(eps, 1.0 - eps);
            -(p * m.ln() + (1.0 - p) * (1.0 - m).ln())
        })
        .sum();
    s / pred.len() as f64
}

/// Brute-force TAR step. `sigma_global` replaces the per-window deviation.
pub fn tar_step(
    label: &[f64],
    guide: &[f64],
    (c, h, w): (usize, usize, usize),
    r: usize,
    include_center: bool,
    floor: f64,
    sigma_global: bool,
) -> Vec<f64> {
    let g = |ch: usize, i: usize, j: usize| guide[(ch * h + i) * w + j];
    let win = |i: usize, n: usize| (i.saturating_sub(r)..=(i + r).min(n - 1)).collect::<Vec<_>>();
    let global: Vec<f64> = (0..c)
        .map(|ch| {
            let vals: Vec<f64> = (0..h * w).map(|p| g(ch, p / w, p % w)).collect();
            std_dev(&vals)
        })
        .collect();
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let sigma: Vec<f64> = (0..c)
                .map(|ch| {
                    let s = if sigma_global {
                        global[ch]
                    } else {
                        let mut vals = Vec::new();
                        for &p in &win(i, h) {
                            for &q in &win(j, w) {
                                vals.push(g(ch, p, q));
                            }
                        }
                        std_dev(&vals)
                    };
                    s.max(floor)
                })
                .collect();
            let mut logits = Vec::new();
            let mut values = Vec::new();
            for &p in &win(i, h) {
                for &q in &win(j, w) {
                    if (p, q) == (i, j) && !include_center {
                        continue;
                    }
                    let k: f64 = (0..c)
                        .map(|ch| -(g(ch, i, j) - g(ch, p, q)).abs() / (sigma[ch] * sigma[ch]))
                        .sum::<f64>()
                        / c as f64;
                    logits.push(k);
                    values.push(label[p * w + q]);
                }
            }
            out[i * w + j] = if logits.is_empty() {
                label[i * w + j]
            } else {
                softmax(&logits)
                    .iter()
                    .zip(&values)
                    .map(|(a, v)| a * v)
                    .sum()
            };
        }
    }
    out
}

/// Population standard deviation.
pub fn std_dev(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// `-ln(exp(s_p/tau) / sum_n exp(s_n/tau))`, optionally with the positive in the sum.
pub fn l_nce(pi: &[f64], pp: &[f64], negs: &[&[f64]], tau: f64, with_positive: bool) -> f64 {
    let pos = (cosine(pi, pp) / tau).exp();
    let mut den: f64 = negs.iter().map(|n| (cosine(pi, n) / tau).exp()).sum();
    if with_positive {
        den += pos;
    }
    -(pos / den).ln()
}

/// Double loop over the batch: both directions per item, negatives are the
/// raw images of every other item.
pub fn contrastive(items: &[(Vec<f64>, Vec<f64>)], tau: f64, with_positive: bool) -> f64 {
    let mut total = 0.0;
    for i in 0..items.len() {
        let negs: Vec<&[f64]> = (0..items.len())
            .filter(|&j| j != i)
            .map(|j| items[j].0.as_slice())
            .collect();
        total += l_nce(&items[i].0, &items[i].1, &negs, tau, with_positive);
        total += l_nce(&items[i].1, &items[i].0, &negs, tau, with_positive);
    }
    total
}

/// Central finite differences of `f` at `x`.
pub fn finite_diff(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|k| {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[k] += h;
            b[k] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect()
}

/// Per-pixel vote: foreground when at least two of the three bits are set.
pub fn vote(a: &[u8], b: &[u8], c: &[u8]) -> Vec<u8> {
    (0..a.len())
        .map(|i| (a[i] + b[i] + c[i] >= 2) as u8)
        .collect()
}

pub fn fiou(a: &[f64], b: &[f64]) -> f64 {
    let inter = a
        .iter()
        .zip(b)
        .filter(|(&x, &y)| x != 0.0 && y != 0.0)
        .count();
    let union = a
        .iter()
        .zip(b)
        .filter(|(&x, &y)| x != 0.0 || y != 0.0)
        .count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
