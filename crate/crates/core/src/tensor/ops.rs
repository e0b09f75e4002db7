use super::Tensor;
use crate::error::{Error, Result};

/// Cross-correlation with a square stride and padding. See [`conv2d_strided`].
pub fn conv2d(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    conv2d_strided(input, weights, bias, (stride, stride), (padding, padding))
}

/// 2-D cross-correlation of `input [C_in,H,W]` with `weights [C_out,C_in,kH,kW]`
/// plus `bias [C_out]`, zero padding. Output size per axis is
/// `(n + 2*pad - k) / stride + 1`.
pub fn conv2d_strided(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor> {
    let (c_in, h, w) = input.dims3("conv2d input")?;
    let ws = weights.expect_rank(4, "conv2d weights")?;
    let (c_out, wc_in, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if wc_in != c_in {
        return Err(Error::shape(format!(
            "conv2d: weights expect {wc_in} input channels, input has {c_in}"
        )));
    }
    bias.expect_shape(&[c_out]).map_err(|_| {
        Error::shape(format!(
            "conv2d: bias must be [{c_out}], got {:?}",
            bias.shape()
        ))
    })?;
    let (sh, sw) = stride;
    let (ph, pw) = padding;
    if sh == 0 || sw == 0 {
        return Err(Error::shape("conv2d: stride must be >= 1"));
    }
    if h + 2 * ph < kh || w + 2 * pw < kw {
        return Err(Error::shape(format!(
            "conv2d: kernel {kh}x{kw} does not fit padded input {}x{}",
            h + 2 * ph,
            w + 2 * pw
        )));
    }
    let oh = (h + 2 * ph - kh) / sh + 1;
    let ow = (w + 2 * pw - kw) / sw + 1;

    let x: Vec<f64> = input.data().iter().map(|&v| v as f64).collect();
    let wt = weights.data();
    // Output columns whose tap kx lands inside the row: ox in lo..hi, ix = ox*sw + kx - pw.
    let cols: Vec<(usize, usize)> = (0..kw)
        .map(|kx| {
            if w + pw <= kx {
                return (0, 0);
            }
            let lo = (pw.saturating_sub(kx)).div_ceil(sw);
            let hi = ((w + pw - kx - 1) / sw + 1).min(ow);
            (lo, hi.max(lo))
        })
        .collect();
    let mut out = Vec::with_capacity(c_out * oh * ow);
    let mut acc = vec![0f64; oh * ow];
    for co in 0..c_out {
        acc.fill(bias.data()[co] as f64);
        for ci in 0..c_in {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wt[((co * c_in + ci) * kh + ky) * kw + kx] as f64;
                    let (lo, hi) = cols[kx];
                    if wv == 0.0 || lo >= hi {
                        continue;
                    }
                    let ix0 = lo * sw + kx - pw;
                    for oy in 0..oh {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let arow = &mut acc[oy * ow + lo..oy * ow + hi];
                        if sw == 1 {
                            for (a, &v) in arow.iter_mut().zip(&row[ix0..ix0 + (hi - lo)]) {
                                *a += wv * v;
                            }
                        } else {
                            for (a, &v) in arow.iter_mut().zip(row[ix0..].iter().step_by(sw)) {
                                *a += wv * v;
                            }
                        }
                    }
                }
            }
        }
        out.extend(acc.iter().map(|&v| v as f32));
    }
    Tensor::new(&[c_out, oh, ow], out)
}

/// Transposed convolution (the adjoint of a strided cross-correlation) of
/// `input [C_in,H,W]` with `weights [C_in,C_out,kH,kW]`, no padding.
/// Output is `[C_out, stride*(H-1)+kH, stride*(W-1)+kW]`.
pub fn transposed_conv2d(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
) -> Result<Tensor> {
    let (c_in, h, w) = input.dims3("transposed_conv2d input")?;
    let ws = weights.expect_rank(4, "transposed_conv2d weights")?;
    let (wc_in, c_out, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if wc_in != c_in {
        return Err(Error::shape(format!(
            "transposed_conv2d: weights expect {wc_in} input channels, input has {c_in}"
        )));
    }
    if bias.shape() != [c_out] {
        return Err(Error::shape(format!(
            "transposed_conv2d: bias must be [{c_out}], got {:?}",
            bias.shape()
        )));
    }
    if stride == 0 {
        return Err(Error::shape("transposed_conv2d: stride must be >= 1"));
    }
    if h == 0 || w == 0 {
        return Err(Error::shape("transposed_conv2d: empty input"));
    }
    let oh = stride * (h - 1) + kh;
    let ow = stride * (w - 1) + kw;

    let x: Vec<f64> = input.data().iter().map(|&v| v as f64).collect();
    let wt = weights.data();
    let mut out = Vec::with_capacity(c_out * oh * ow);
    let mut acc = vec![0f64; oh * ow];
    for co in 0..c_out {
        acc.fill(bias.data()[co] as f64);
        for ci in 0..c_in {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wt[((ci * c_out + co) * kh + ky) * kw + kx] as f64;
                    if wv == 0.0 {
                        continue;
                    }
                    for iy in 0..h {
                        let start = (iy * stride + ky) * ow + kx;
                        let row = &plane[iy * w..(iy + 1) * w];
                        for (a, &v) in acc[start..].iter_mut().step_by(stride).zip(row) {
                            *a += wv * v;
                        }
                    }
                }
            }
        }
        out.extend(acc.iter().map(|&v| v as f32));
    }
    Tensor::new(&[c_out, oh, ow], out)
}

/// Source coordinate and blend weight for one output index under the
/// half-pixel (align-corners = false) convention, clamped at the borders.
fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = if i0 == n_in - 1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

/// Bilinear resize of `[C,H,W]` (or `[H,W]`) to the given spatial size.
///
/// Uses the align-corners = false convention: output pixel `o` samples the
/// input at `(o + 0.5) * in / out - 0.5`, clamped to the valid range. Resizing
/// to the same size returns an exact copy.
pub fn resize_bilinear(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w, rank2) = match input.rank() {
        2 => {
            let (h, w) = input.dims2("resize")?;
            (1, h, w, true)
        }
        3 => {
            let (c, h, w) = input.dims3("resize")?;
            (c, h, w, false)
        }
        _ => {
            return Err(Error::shape(format!(
                "resize_bilinear: expected [C,H,W] or [H,W], got {:?}",
                input.shape()
            )))
        }
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize_bilinear: output size must be >= 1"));
    }
    if h == 0 || w == 0 {
        return Err(Error::shape("resize_bilinear: empty input"));
    }
    if out_h == h && out_w == w {
        return Ok(input.clone());
    }
    let ys = bilinear_taps(h, out_h);
    let xs = bilinear_taps(w, out_w);
    let x = input.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] as f64 * (1.0 - fx) + plane[y0 * w + x1] as f64 * fx;
                let bot = plane[y1 * w + x0] as f64 * (1.0 - fx) + plane[y1 * w + x1] as f64 * fx;
                out.push((top * (1.0 - fy) + bot * fy) as f32);
            }
        }
    }
    if rank2 {
        Tensor::new(&[out_h, out_w], out)
    } else {
        Tensor::new(&[c, out_h, out_w], out)
    }
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(format!(
            "axis {axis} out of range for rank {}",
            shape.len()
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Softmax along `axis`, stabilised by subtracting the running maximum.
pub fn softmax(input: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = axis_extents(input.shape(), axis)?;
    let x = input.data();
    let mut out = vec![0f32; x.len()];
    let mut buf = vec![0f64; n];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let max = (0..n)
                .map(|k| x[idx(k)] as f64)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (k, b) in buf.iter_mut().enumerate() {
                *b = (x[idx(k)] as f64 - max).exp();
                sum += *b;
            }
            for (k, b) in buf.iter().enumerate() {
                out[idx(k)] = (b / sum) as f32;
            }
        }
    }
    Tensor::new(input.shape(), out)
}

pub fn tanh(input: &Tensor) -> Tensor {
    input.map(f32::tanh)
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    input.map(|v| (1.0 / (1.0 + (-(v as f64)).exp())) as f32)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// `[M,K] x [K,N] -> [M,N]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul lhs")?;
    let (k2, n) = b.dims2("matmul rhs")?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul: inner dimensions differ ({m}x{k} * {k2}x{n})"
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(m * n);
    let mut row = vec![0f64; n];
    for i in 0..m {
        row.fill(0.0);
        for p in 0..k {
            let av = ad[i * k + p] as f64;
            for (j, r) in row.iter_mut().enumerate() {
                *r += av * bd[p * n + j] as f64;
            }
        }
        out.extend(row.iter().map(|&v| v as f32));
    }
    Tensor::new(&[m, n], out)
}

/// `[M,K] x [K] -> [M]`.
pub fn matvec(a: &Tensor, x: &[f32]) -> Result<Tensor> {
    let (m, k) = a.dims2("matvec matrix")?;
    if x.len() != k {
        return Err(Error::shape(format!(
            "matvec: matrix has {k} columns, vector has {}",
            x.len()
        )));
    }
    let ad = a.data();
    let out = (0..m)
        .map(|i| {
            ad[i * k..(i + 1) * k]
                .iter()
                .zip(x)
                .map(|(&w, &v)| w as f64 * v as f64)
                .sum::<f64>() as f32
        })
        .collect();
    Tensor::new(&[m], out)
}

/// Concatenates tensors along `axis`; all other dimensions must agree.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat: no inputs"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::shape(format!(
            "concat: axis {axis} out of range for rank {rank}"
        )));
    }
    for p in parts {
        if p.rank() != rank
            || p.shape()[..axis] != first.shape()[..axis]
            || p.shape()[axis + 1..] != first.shape()[axis + 1..]
        {
            return Err(Error::shape(format!(
                "concat: shape {:?} incompatible with {:?} along axis {axis}",
                p.shape(),
                first.shape()
            )));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total_axis: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total_axis;
    Tensor::new(&shape, out)
}

/// Max pooling over `[C,H,W]` windows without padding.
pub fn max_pool2d(
    input: &Tensor,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<Tensor> {
    let (c, h, w) = input.dims3("max_pool2d input")?;
    let (kh, kw) = kernel;
    let (sh, sw) = stride;
    if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
        return Err(Error::shape("max_pool2d: kernel and stride must be >= 1"));
    }
    if kh > h || kw > w {
        return Err(Error::shape(format!(
            "max_pool2d: kernel {kh}x{kw} larger than input {h}x{w}"
        )));
    }
    let oh = (h - kh) / sh + 1;
    let ow = (w - kw) / sw + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f32::NEG_INFINITY;
                for ky in 0..kh {
                    for kx in 0..kw {
                        m = m.max(x[(ch * h + oy * sh + ky) * w + ox * sw + kx]);
                    }
                }
                out.push(m);
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}
