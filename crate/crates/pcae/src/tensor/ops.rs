//! Forward/backward pairs for the stateless operators: dense matmul,
//! 3D convolution, max pooling, trilinear upsampling, ELU and dropout.
//!
//! Convention: `*_forward` returns the output (plus whatever context the
//! backward needs), `*_backward` maps the upstream gradient to input and
//! parameter gradients. Backward functions return fresh gradient tensors;
//! accumulation into [`Param`](super::Param) buffers happens in the layer
//! wrappers.

use super::{Rng, Tensor, TensorError};
use rand::Rng as _;

// ---------------------------------------------------------------------------
// dense
// ---------------------------------------------------------------------------

/// `x` is `[in]` or `[rows, in]`; `weight` is `[out, in]`; output matches the
/// input rank.
pub fn dense_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor, TensorError> {
    let (rows, n_in) = rows_of(x)?;
    if weight.rank() != 2 || weight.shape()[1] != n_in {
        return Err(TensorError::invalid(
            "dense",
            format!("weight {:?} incompatible with input width {n_in}", weight.shape()),
        ));
    }
    let n_out = weight.shape()[0];
    if let Some(b) = bias {
        if b.shape() != [n_out] {
            return Err(TensorError::ShapeMismatch { expected: vec![n_out], got: b.shape().to_vec() });
        }
    }
    let xv = x.data();
    let wv = weight.data();
    let mut out = vec![0.0; rows * n_out];
    for r in 0..rows {
        let xr = &xv[r * n_in..(r + 1) * n_in];
        let or = &mut out[r * n_out..(r + 1) * n_out];
        for (o, slot) in or.iter_mut().enumerate() {
            let wr = &wv[o * n_in..(o + 1) * n_in];
            let mut acc = 0.0;
            for i in 0..n_in {
                acc += xr[i] * wr[i];
            }
            *slot = acc;
        }
        if let Some(b) = bias {
            for (slot, bv) in or.iter_mut().zip(b.data()) {
                *slot += bv;
            }
        }
    }
    let shape: Vec<usize> =
        if x.rank() == 1 { vec![n_out] } else { vec![rows, n_out] };
    Tensor::from_vec(&shape, out)
}

/// Returns `(grad_x, grad_weight, grad_bias)`; `grad_bias` is `None` when
/// `with_bias` is false.
pub fn dense_backward(
    x: &Tensor,
    weight: &Tensor,
    with_bias: bool,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Option<Tensor>) {
    let (rows, n_in) = rows_of(x).expect("validated in forward");
    let n_out = weight.shape()[0];
    debug_assert_eq!(grad_out.len(), rows * n_out);
    let xv = x.data();
    let wv = weight.data();
    let gv = grad_out.data();

    let mut gx = vec![0.0; rows * n_in];
    let mut gw = vec![0.0; n_out * n_in];
    let mut gb = if with_bias { vec![0.0; n_out] } else { Vec::new() };
    for r in 0..rows {
        let xr = &xv[r * n_in..(r + 1) * n_in];
        let gr = &gv[r * n_out..(r + 1) * n_out];
        let gxr = &mut gx[r * n_in..(r + 1) * n_in];
        for o in 0..n_out {
            let g = gr[o];
            if with_bias {
                gb[o] += g;
            }
            let wr = &wv[o * n_in..(o + 1) * n_in];
            let gwr = &mut gw[o * n_in..(o + 1) * n_in];
            for i in 0..n_in {
                gxr[i] += g * wr[i];
                gwr[i] += g * xr[i];
            }
        }
    }
    let gx = Tensor::from_vec(x.shape(), gx).unwrap();
    let gw = Tensor::from_vec(weight.shape(), gw).unwrap();
    let gb = if with_bias { Some(Tensor::from_vec(&[n_out], gb).unwrap()) } else { None };
    (gx, gw, gb)
}

fn rows_of(x: &Tensor) -> Result<(usize, usize), TensorError> {
    match *x.shape() {
        [n] => Ok((1, n)),
        [rows, n] => Ok((rows, n)),
        _ => Err(TensorError::invalid("dense", format!("expected rank 1 or 2, got {:?}", x.shape()))),
    }
}

// ---------------------------------------------------------------------------
// conv3d
// ---------------------------------------------------------------------------

/// Cross-correlation of `x: [C_in, D, H, W]` with `weight:
/// [C_out, C_in, k, k, k]`, stride 1, no bias. Output spatial extent is
/// `D + 2*padding - k + 1` per axis.
pub fn conv3d_forward(x: &Tensor, weight: &Tensor, padding: usize) -> Result<Tensor, TensorError> {
    let ([c_in, d, h, w], [c_out, wc_in, k]) = conv_dims(x, weight)?;
    if wc_in != c_in {
        return Err(TensorError::invalid(
            "conv3d",
            format!("input has {c_in} channels, weight expects {wc_in}"),
        ));
    }
    let out_d = out_extent(d, padding, k)?;
    let out_h = out_extent(h, padding, k)?;
    let out_w = out_extent(w, padding, k)?;

    let in_vol = d * h * w;
    let out_vol = out_d * out_h * out_w;
    let mut out = vec![0.0; c_out * out_vol];
    let xv = x.data();
    let wv = weight.data();
    for co in 0..c_out {
        let y_slab = &mut out[co * out_vol..(co + 1) * out_vol];
        for ci in 0..c_in {
            let x_slab = &xv[ci * in_vol..(ci + 1) * in_vol];
            let w_base = (co * c_in + ci) * k * k * k;
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let coeff = wv[w_base + (kd * k + kh) * k + kw];
                        if coeff == 0.0 {
                            continue;
                        }
                        // dst(o) += coeff * src(o + off)
                        accumulate_shifted(
                            y_slab,
                            [out_d, out_h, out_w],
                            x_slab,
                            [d, h, w],
                            [
                                kd as isize - padding as isize,
                                kh as isize - padding as isize,
                                kw as isize - padding as isize,
                            ],
                            coeff,
                        );
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[c_out, out_d, out_h, out_w], out)
}

/// Returns `(grad_x, grad_weight)`.
pub fn conv3d_backward(
    x: &Tensor,
    weight: &Tensor,
    padding: usize,
    grad_out: &Tensor,
) -> (Tensor, Tensor) {
    let ([c_in, d, h, w], [c_out, _, k]) = conv_dims(x, weight).expect("validated in forward");
    let (out_d, out_h, out_w) =
        (grad_out.shape()[1], grad_out.shape()[2], grad_out.shape()[3]);
    let in_vol = d * h * w;
    let out_vol = out_d * out_h * out_w;
    let xv = x.data();
    let wv = weight.data();
    let gv = grad_out.data();

    let mut gx = vec![0.0; c_in * in_vol];
    let mut gw = vec![0.0; weight.len()];
    for co in 0..c_out {
        let g_slab = &gv[co * out_vol..(co + 1) * out_vol];
        for ci in 0..c_in {
            let x_slab = &xv[ci * in_vol..(ci + 1) * in_vol];
            let gx_slab = &mut gx[ci * in_vol..(ci + 1) * in_vol];
            let w_base = (co * c_in + ci) * k * k * k;
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let off = [
                            kd as isize - padding as isize,
                            kh as isize - padding as isize,
                            kw as isize - padding as isize,
                        ];
                        let widx = w_base + (kd * k + kh) * k + kw;
                        // y(o) = sum coeff * x(o + off)  =>
                        //   gx(o + off) += coeff * gy(o)
                        //   gw += dot(gy(o), x(o + off))
                        let coeff = wv[widx];
                        if coeff != 0.0 {
                            accumulate_shifted_transposed(
                                gx_slab,
                                [d, h, w],
                                g_slab,
                                [out_d, out_h, out_w],
                                off,
                                coeff,
                            );
                        }
                        gw[widx] +=
                            dot_shifted(g_slab, [out_d, out_h, out_w], x_slab, [d, h, w], off);
                    }
                }
            }
        }
    }
    (
        Tensor::from_vec(x.shape(), gx).unwrap(),
        Tensor::from_vec(weight.shape(), gw).unwrap(),
    )
}

fn conv_dims(
    x: &Tensor,
    weight: &Tensor,
) -> Result<([usize; 4], [usize; 3]), TensorError> {
    let xs = x.shape();
    let ws = weight.shape();
    if xs.len() != 4 {
        return Err(TensorError::invalid("conv3d", format!("input must be rank 4, got {xs:?}")));
    }
    if ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] {
        return Err(TensorError::invalid("conv3d", format!("weight must be [Co,Ci,k,k,k], got {ws:?}")));
    }
    Ok(([xs[0], xs[1], xs[2], xs[3]], [ws[0], ws[1], ws[2]]))
}

fn out_extent(n: usize, padding: usize, k: usize) -> Result<usize, TensorError> {
    let ext = n as isize + 2 * padding as isize - k as isize + 1;
    if ext <= 0 {
        return Err(TensorError::invalid(
            "conv3d",
            format!("non-positive output extent for input {n}, padding {padding}, kernel {k}"),
        ));
    }
    Ok(ext as usize)
}

/// dst(o) += alpha * src(o + off) over the in-bounds intersection.
fn accumulate_shifted(
    dst: &mut [f64],
    dst_dims: [usize; 3],
    src: &[f64],
    src_dims: [usize; 3],
    off: [isize; 3],
    alpha: f64,
) {
    let (r0, r1, r2) = overlap_ranges(dst_dims, src_dims, off);
    for z in r0.clone() {
        let sz = (z as isize + off[0]) as usize;
        for y in r1.clone() {
            let sy = (y as isize + off[1]) as usize;
            let d_row = (z * dst_dims[1] + y) * dst_dims[2];
            let s_row = (sz * src_dims[1] + sy) * src_dims[2];
            let sx0 = (r2.start as isize + off[2]) as usize;
            let d = &mut dst[d_row + r2.start..d_row + r2.end];
            let s = &src[s_row + sx0..s_row + sx0 + (r2.end - r2.start)];
            for (dv, sv) in d.iter_mut().zip(s) {
                *dv += alpha * sv;
            }
        }
    }
}

/// dst(o + off) += alpha * src(o): the transpose of `accumulate_shifted`.
fn accumulate_shifted_transposed(
    dst: &mut [f64],
    dst_dims: [usize; 3],
    src: &[f64],
    src_dims: [usize; 3],
    off: [isize; 3],
    alpha: f64,
) {
    let (r0, r1, r2) = overlap_ranges(src_dims, dst_dims, off);
    for z in r0.clone() {
        let dz = (z as isize + off[0]) as usize;
        for y in r1.clone() {
            let dy = (y as isize + off[1]) as usize;
            let s_row = (z * src_dims[1] + y) * src_dims[2];
            let d_row = (dz * dst_dims[1] + dy) * dst_dims[2];
            let dx0 = (r2.start as isize + off[2]) as usize;
            let s = &src[s_row + r2.start..s_row + r2.end];
            let d = &mut dst[d_row + dx0..d_row + dx0 + (r2.end - r2.start)];
            for (dv, sv) in d.iter_mut().zip(s) {
                *dv += alpha * sv;
            }
        }
    }
}

/// sum over o of a(o) * b(o + off).
fn dot_shifted(a: &[f64], a_dims: [usize; 3], b: &[f64], b_dims: [usize; 3], off: [isize; 3]) -> f64 {
    let (r0, r1, r2) = overlap_ranges(a_dims, b_dims, off);
    let mut acc = 0.0;
    for z in r0.clone() {
        let bz = (z as isize + off[0]) as usize;
        for y in r1.clone() {
            let by = (y as isize + off[1]) as usize;
            let a_row = (z * a_dims[1] + y) * a_dims[2];
            let b_row = (bz * b_dims[1] + by) * b_dims[2];
            let bx0 = (r2.start as isize + off[2]) as usize;
            let av = &a[a_row + r2.start..a_row + r2.end];
            let bv = &b[b_row + bx0..b_row + bx0 + (r2.end - r2.start)];
            for (x, y) in av.iter().zip(bv) {
                acc += x * y;
            }
        }
    }
    acc
}

type AxisRanges = (std::ops::Range<usize>, std::ops::Range<usize>, std::ops::Range<usize>);

/// Index ranges (over the first operand) where both `o` and `o + off` are in
/// bounds.
fn overlap_ranges(a_dims: [usize; 3], b_dims: [usize; 3], off: [isize; 3]) -> AxisRanges {
    let axis = |a: usize, b: usize, o: isize| -> std::ops::Range<usize> {
        let lo = (-o).max(0) as usize;
        let hi = (a as isize).min(b as isize - o).max(lo as isize) as usize;
        lo..hi
    };
    (
        axis(a_dims[0], b_dims[0], off[0]),
        axis(a_dims[1], b_dims[1], off[1]),
        axis(a_dims[2], b_dims[2], off[2]),
    )
}

// ---------------------------------------------------------------------------
// maxpool3d
// ---------------------------------------------------------------------------

pub struct MaxPoolCache {
    pub in_shape: Vec<usize>,
    /// Flat input index of the block argmax for each output element.
    pub argmax: Vec<usize>,
}

/// 2x2x2 max pooling with stride 2. Spatial extents must be even. Ties go to
/// the lowest linear index so the backward routing is deterministic.
pub fn maxpool3d_forward(x: &Tensor) -> Result<(Tensor, MaxPoolCache), TensorError> {
    let &[c, d, h, w] = x.shape() else {
        return Err(TensorError::invalid("maxpool3d", format!("input must be rank 4, got {:?}", x.shape())));
    };
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::invalid("maxpool3d", format!("odd spatial extent in {:?}", x.shape())));
    }
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let xv = x.data();
    let mut out = vec![0.0; c * od * oh * ow];
    let mut argmax = vec![0usize; out.len()];
    let mut oi = 0;
    for ch in 0..c {
        let base_c = ch * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = base_c
                                    + ((2 * z + dz) * h + (2 * y + dy)) * w
                                    + 2 * xx
                                    + dx;
                                if xv[idx] > best {
                                    best = xv[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    out[oi] = best;
                    argmax[oi] = best_idx;
                    oi += 1;
                }
            }
        }
    }
    let y = Tensor::from_vec(&[c, od, oh, ow], out)?;
    Ok((y, MaxPoolCache { in_shape: x.shape().to_vec(), argmax }))
}

pub fn maxpool3d_backward(cache: &MaxPoolCache, grad_out: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(&cache.in_shape);
    let gxv = gx.data_mut();
    for (g, &idx) in grad_out.data().iter().zip(cache.argmax.iter()) {
        gxv[idx] += g;
    }
    gx
}

// ---------------------------------------------------------------------------
// trilinear upsampling (factor 2, half-pixel centers)
// ---------------------------------------------------------------------------

/// Doubles every spatial extent. Output sample `i` reads source coordinate
/// `(i + 0.5) / 2 - 0.5`, clamped to the borders. Linear in the input, so the
/// backward pass is the exact transpose.
pub fn upsample2x_forward(x: &Tensor) -> Result<Tensor, TensorError> {
    let &[c, d, h, w] = x.shape() else {
        return Err(TensorError::invalid("upsample2x", format!("input must be rank 4, got {:?}", x.shape())));
    };
    let taps_d = axis_taps(d);
    let taps_h = axis_taps(h);
    let taps_w = axis_taps(w);
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    let xv = x.data();
    let mut out = vec![0.0; c * od * oh * ow];
    let mut oi = 0;
    for ch in 0..c {
        let base = ch * d * h * w;
        for &(z0, z1, wz) in &taps_d {
            for &(y0, y1, wy) in &taps_h {
                let r00 = base + (z0 * h + y0) * w;
                let r01 = base + (z0 * h + y1) * w;
                let r10 = base + (z1 * h + y0) * w;
                let r11 = base + (z1 * h + y1) * w;
                for &(x0, x1, wx) in &taps_w {
                    let c00 = xv[r00 + x0] * (1.0 - wx) + xv[r00 + x1] * wx;
                    let c01 = xv[r01 + x0] * (1.0 - wx) + xv[r01 + x1] * wx;
                    let c10 = xv[r10 + x0] * (1.0 - wx) + xv[r10 + x1] * wx;
                    let c11 = xv[r11 + x0] * (1.0 - wx) + xv[r11 + x1] * wx;
                    let c0 = c00 * (1.0 - wy) + c01 * wy;
                    let c1 = c10 * (1.0 - wy) + c11 * wy;
                    out[oi] = c0 * (1.0 - wz) + c1 * wz;
                    oi += 1;
                }
            }
        }
    }
    Tensor::from_vec(&[c, od, oh, ow], out)
}

pub fn upsample2x_backward(in_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let [c, d, h, w] = [in_shape[0], in_shape[1], in_shape[2], in_shape[3]];
    let taps_d = axis_taps(d);
    let taps_h = axis_taps(h);
    let taps_w = axis_taps(w);
    let gv = grad_out.data();
    let mut gx = vec![0.0; c * d * h * w];
    let mut oi = 0;
    for ch in 0..c {
        let base = ch * d * h * w;
        for &(z0, z1, wz) in &taps_d {
            for &(y0, y1, wy) in &taps_h {
                let r00 = base + (z0 * h + y0) * w;
                let r01 = base + (z0 * h + y1) * w;
                let r10 = base + (z1 * h + y0) * w;
                let r11 = base + (z1 * h + y1) * w;
                for &(x0, x1, wx) in &taps_w {
                    let g = gv[oi];
                    oi += 1;
                    let g0 = g * (1.0 - wz);
                    let g1 = g * wz;
                    let g00 = g0 * (1.0 - wy);
                    let g01 = g0 * wy;
                    let g10 = g1 * (1.0 - wy);
                    let g11 = g1 * wy;
                    gx[r00 + x0] += g00 * (1.0 - wx);
                    gx[r00 + x1] += g00 * wx;
                    gx[r01 + x0] += g01 * (1.0 - wx);
                    gx[r01 + x1] += g01 * wx;
                    gx[r10 + x0] += g10 * (1.0 - wx);
                    gx[r10 + x1] += g10 * wx;
                    gx[r11 + x0] += g11 * (1.0 - wx);
                    gx[r11 + x1] += g11 * wx;
                }
            }
        }
    }
    Tensor::from_vec(in_shape, gx).unwrap()
}

/// Per output index along one axis: (left source, right source, right weight).
fn axis_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|i| {
            let s = (i as f64 + 0.5) / 2.0 - 0.5;
            if s <= 0.0 {
                (0, 0, 0.0)
            } else if s >= (n - 1) as f64 {
                (n - 1, n - 1, 0.0)
            } else {
                let i0 = s.floor() as usize;
                (i0, i0 + 1, s - i0 as f64)
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// ELU
// ---------------------------------------------------------------------------

pub fn elu_forward(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { v.exp() - 1.0 }).collect();
    Tensor::from_vec(x.shape(), data).unwrap()
}

/// ELU is invertible enough for the backward to run off its own output:
/// for x <= 0, dy/dx = exp(x) = y + 1.
pub fn elu_backward(y: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = y
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&yv, &g)| if yv > 0.0 { g } else { g * (yv + 1.0) })
        .collect();
    Tensor::from_vec(y.shape(), data).unwrap()
}

// ---------------------------------------------------------------------------
// dropout (inverted)
// ---------------------------------------------------------------------------

pub struct DropoutMask {
    /// Per-element multiplier: 0 for dropped, 1/(1-p) for kept.
    pub factors: Vec<f64>,
}

/// Inverted dropout: survivors are scaled by 1/(1-p) so inference is the
/// identity.
pub fn dropout_forward(x: &Tensor, p: f64, rng: &mut Rng) -> (Tensor, DropoutMask) {
    assert!((0.0..1.0).contains(&p), "dropout probability must be in [0, 1)");
    if p == 0.0 {
        let factors = vec![1.0; x.len()];
        return (x.clone(), DropoutMask { factors });
    }
    let keep = 1.0 / (1.0 - p);
    let factors: Vec<f64> = (0..x.len())
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    let data = x.data().iter().zip(&factors).map(|(v, f)| v * f).collect();
    (Tensor::from_vec(x.shape(), data).unwrap(), DropoutMask { factors })
}

pub fn dropout_backward(mask: &DropoutMask, grad_out: &Tensor) -> Tensor {
    let data = grad_out.data().iter().zip(&mask.factors).map(|(g, f)| g * f).collect();
    Tensor::from_vec(grad_out.shape(), data).unwrap()
}

// ---------------------------------------------------------------------------
// scalar helpers
// ---------------------------------------------------------------------------

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
