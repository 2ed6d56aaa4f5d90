//! Batch normalization and instance normalization with externally supplied
//! affine parameters.
//!
//! Both normalizers divide by the population standard deviation (variance
//! over the reduction count, not count - 1); the backward formulas below
//! assume exactly that.

use super::{Tensor, TensorError};

// ---------------------------------------------------------------------------
// batchnorm over rows [N, C]
// ---------------------------------------------------------------------------

pub struct BnRowsCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Training-mode batchnorm over the row dimension of `x: [N, C]`.
pub fn batchnorm_rows_train(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<(Tensor, BnRowsCache, BnStats), TensorError> {
    let &[n, c] = x.shape() else {
        return Err(TensorError::invalid("batchnorm", format!("expected [N, C], got {:?}", x.shape())));
    };
    if n == 0 {
        return Err(TensorError::invalid("batchnorm", "zero-size batch"));
    }
    debug_assert_eq!(gamma.len(), c);
    let xv = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for row in xv.chunks_exact(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    for row in xv.chunks_exact(c) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= n as f64);

    let inv_std: Vec<f64> = var.iter().map(|&v| safe_inv_std(v, eps)).collect();
    let mut xhat = vec![0.0; xv.len()];
    let mut y = vec![0.0; xv.len()];
    for (i, v) in xv.iter().enumerate() {
        let ch = i % c;
        let h = (v - mean[ch]) * inv_std[ch];
        xhat[i] = h;
        y[i] = gamma[ch] * h + beta[ch];
    }
    Ok((
        Tensor::from_vec(x.shape(), y)?,
        BnRowsCache { xhat: Tensor::from_vec(x.shape(), xhat)?, inv_std },
        BnStats { mean, var },
    ))
}

/// Inference-mode batchnorm using running statistics.
pub fn batchnorm_rows_eval(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Result<Tensor, TensorError> {
    let &[_, c] = x.shape() else {
        return Err(TensorError::invalid("batchnorm", format!("expected [N, C], got {:?}", x.shape())));
    };
    let inv_std: Vec<f64> = running_var.iter().map(|&v| safe_inv_std(v, eps)).collect();
    let y = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let ch = i % c;
            gamma[ch] * (v - running_mean[ch]) * inv_std[ch] + beta[ch]
        })
        .collect();
    Tensor::from_vec(x.shape(), y)
}

/// Returns `(grad_x, grad_gamma, grad_beta)` for training-mode batchnorm.
pub fn batchnorm_rows_backward(
    cache: &BnRowsCache,
    gamma: &[f64],
    grad_out: &Tensor,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let &[n, c] = cache.xhat.shape() else { unreachable!() };
    let hv = cache.xhat.data();
    let gv = grad_out.data();
    let mut g_sum = vec![0.0; c];
    let mut gh_sum = vec![0.0; c];
    for (g_row, h_row) in gv.chunks_exact(c).zip(hv.chunks_exact(c)) {
        for ch in 0..c {
            g_sum[ch] += g_row[ch];
            gh_sum[ch] += g_row[ch] * h_row[ch];
        }
    }
    let inv_n = 1.0 / n as f64;
    let mut gx = vec![0.0; gv.len()];
    for i in 0..gv.len() {
        let ch = i % c;
        gx[i] = gamma[ch]
            * cache.inv_std[ch]
            * (gv[i] - g_sum[ch] * inv_n - hv[i] * gh_sum[ch] * inv_n);
    }
    (
        Tensor::from_vec(cache.xhat.shape(), gx).unwrap(),
        gh_sum, // d/d gamma = sum of gy * xhat
        g_sum,  // d/d beta  = sum of gy
    )
}

// ---------------------------------------------------------------------------
// batchnorm over a batch of volumes [C, spatial...]
// ---------------------------------------------------------------------------

pub struct BnVolCache {
    pub xhat: Vec<Tensor>,
    pub inv_std: Vec<f64>,
    pub count: usize,
}

/// Training-mode batchnorm for a batch of channel-major volumes. Statistics
/// reduce over the batch and all spatial positions, per channel.
pub fn batchnorm_vol_train(
    xs: &[Tensor],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<(Vec<Tensor>, BnVolCache, BnStats), TensorError> {
    let c = check_vol_batch(xs)?;
    debug_assert_eq!(gamma.len(), c);
    let vol = xs[0].len() / c;
    let count = xs.len() * vol;

    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for x in xs {
        for (ch, m) in mean.iter_mut().enumerate() {
            let slab = &x.data()[ch * vol..(ch + 1) * vol];
            *m += slab.iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    for x in xs {
        for (ch, s) in var.iter_mut().enumerate() {
            let m = mean[ch];
            let slab = &x.data()[ch * vol..(ch + 1) * vol];
            *s += slab.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count as f64);
    let inv_std: Vec<f64> = var.iter().map(|&v| safe_inv_std(v, eps)).collect();

    let mut ys = Vec::with_capacity(xs.len());
    let mut xhats = Vec::with_capacity(xs.len());
    for x in xs {
        let mut y = vec![0.0; x.len()];
        let mut h = vec![0.0; x.len()];
        for ch in 0..c {
            let m = mean[ch];
            let r = inv_std[ch];
            let (g, b) = (gamma[ch], beta[ch]);
            for i in ch * vol..(ch + 1) * vol {
                let hv = (x.data()[i] - m) * r;
                h[i] = hv;
                y[i] = g * hv + b;
            }
        }
        ys.push(Tensor::from_vec(x.shape(), y)?);
        xhats.push(Tensor::from_vec(x.shape(), h)?);
    }
    Ok((ys, BnVolCache { xhat: xhats, inv_std, count }, BnStats { mean, var }))
}

pub fn batchnorm_vol_eval(
    xs: &[Tensor],
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Result<Vec<Tensor>, TensorError> {
    let c = check_vol_batch(xs)?;
    let vol = xs[0].len() / c;
    let inv_std: Vec<f64> = running_var.iter().map(|&v| safe_inv_std(v, eps)).collect();
    xs.iter()
        .map(|x| {
            let mut y = vec![0.0; x.len()];
            for ch in 0..c {
                let (m, r) = (running_mean[ch], inv_std[ch]);
                let (g, b) = (gamma[ch], beta[ch]);
                for i in ch * vol..(ch + 1) * vol {
                    y[i] = g * (x.data()[i] - m) * r + b;
                }
            }
            Tensor::from_vec(x.shape(), y)
        })
        .collect()
}

pub fn batchnorm_vol_backward(
    cache: &BnVolCache,
    gamma: &[f64],
    grad_outs: &[Tensor],
) -> (Vec<Tensor>, Vec<f64>, Vec<f64>) {
    let c = gamma.len();
    let vol = cache.xhat[0].len() / c;
    let mut g_sum = vec![0.0; c];
    let mut gh_sum = vec![0.0; c];
    for (g, h) in grad_outs.iter().zip(&cache.xhat) {
        for ch in 0..c {
            let gs = &g.data()[ch * vol..(ch + 1) * vol];
            let hs = &h.data()[ch * vol..(ch + 1) * vol];
            for (gv, hv) in gs.iter().zip(hs) {
                g_sum[ch] += gv;
                gh_sum[ch] += gv * hv;
            }
        }
    }
    let inv_n = 1.0 / cache.count as f64;
    let gxs = grad_outs
        .iter()
        .zip(&cache.xhat)
        .map(|(g, h)| {
            let mut gx = vec![0.0; g.len()];
            for ch in 0..c {
                let k = gamma[ch] * cache.inv_std[ch];
                let gm = g_sum[ch] * inv_n;
                let ghm = gh_sum[ch] * inv_n;
                for i in ch * vol..(ch + 1) * vol {
                    gx[i] = k * (g.data()[i] - gm - h.data()[i] * ghm);
                }
            }
            Tensor::from_vec(g.shape(), gx).unwrap()
        })
        .collect();
    (gxs, gh_sum, g_sum)
}

fn check_vol_batch(xs: &[Tensor]) -> Result<usize, TensorError> {
    if xs.is_empty() {
        return Err(TensorError::invalid("batchnorm", "zero-size batch"));
    }
    let shape = xs[0].shape();
    if shape.len() < 2 {
        return Err(TensorError::invalid("batchnorm", "volume input must be rank >= 2"));
    }
    for x in xs {
        if x.shape() != shape {
            return Err(TensorError::ShapeMismatch { expected: shape.to_vec(), got: x.shape().to_vec() });
        }
    }
    Ok(shape[0])
}

// ---------------------------------------------------------------------------
// instance normalization with optional affine injection
// ---------------------------------------------------------------------------

pub struct InstanceNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub scale: Option<Vec<f64>>,
}

/// Per-instance, per-channel normalization over all spatial cells of
/// `x: [C, spatial...]`, followed by the affine transform `s * xhat + t`
/// when an affine pair is given. With no affine pair this is plain instance
/// normalization (s = 1, t = 0).
pub fn instance_norm_forward(
    x: &Tensor,
    affine: Option<(&[f64], &[f64])>,
    eps: f64,
) -> Result<(Tensor, InstanceNormCache), TensorError> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(TensorError::invalid("instance_norm", format!("expected [C, spatial...], got {shape:?}")));
    }
    let c = shape[0];
    let vol = x.len() / c;
    if let Some((s, t)) = affine {
        if s.len() != c || t.len() != c {
            return Err(TensorError::invalid(
                "instance_norm",
                format!("affine widths ({}, {}) do not match {c} channels", s.len(), t.len()),
            ));
        }
    }
    let xv = x.data();
    let mut xhat = vec![0.0; xv.len()];
    let mut y = vec![0.0; xv.len()];
    let mut inv_std = vec![0.0; c];
    for ch in 0..c {
        let slab = &xv[ch * vol..(ch + 1) * vol];
        let mean = slab.iter().sum::<f64>() / vol as f64;
        let var = slab.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vol as f64;
        let r = safe_inv_std(var, eps);
        inv_std[ch] = r;
        let (s, t) = match affine {
            Some((s, t)) => (s[ch], t[ch]),
            None => (1.0, 0.0),
        };
        for (i, v) in slab.iter().enumerate() {
            let h = (v - mean) * r;
            xhat[ch * vol + i] = h;
            y[ch * vol + i] = s * h + t;
        }
    }
    let scale = affine.map(|(s, _)| s.to_vec());
    Ok((
        Tensor::from_vec(shape, y)?,
        InstanceNormCache { xhat: Tensor::from_vec(shape, xhat)?, inv_std, scale },
    ))
}

/// Returns `(grad_x, grad_s, grad_t)`; the affine gradients are `None` when
/// the forward ran without an affine pair.
pub fn instance_norm_backward(
    cache: &InstanceNormCache,
    grad_out: &Tensor,
) -> (Tensor, Option<Vec<f64>>, Option<Vec<f64>>) {
    let c = cache.inv_std.len();
    let vol = cache.xhat.len() / c;
    let hv = cache.xhat.data();
    let gv = grad_out.data();
    let mut gx = vec![0.0; gv.len()];
    let mut gs = vec![0.0; c];
    let mut gt = vec![0.0; c];
    for ch in 0..c {
        let h = &hv[ch * vol..(ch + 1) * vol];
        let g = &gv[ch * vol..(ch + 1) * vol];
        let mut g_sum = 0.0;
        let mut gh_sum = 0.0;
        for (gv, hv) in g.iter().zip(h) {
            g_sum += gv;
            gh_sum += gv * hv;
        }
        gs[ch] = gh_sum;
        gt[ch] = g_sum;
        let s = cache.scale.as_ref().map_or(1.0, |s| s[ch]);
        let k = s * cache.inv_std[ch];
        let gm = g_sum / vol as f64;
        let ghm = gh_sum / vol as f64;
        for i in 0..vol {
            gx[ch * vol + i] = k * (g[i] - gm - h[i] * ghm);
        }
    }
    let affine = cache.scale.is_some();
    (
        Tensor::from_vec(cache.xhat.shape(), gx).unwrap(),
        affine.then_some(gs),
        affine.then_some(gt),
    )
}

/// 1/sqrt(var + eps), with the fully degenerate case (var + eps == 0) mapped
/// to 0 so a constant channel normalizes to 0 instead of NaN.
fn safe_inv_std(var: f64, eps: f64) -> f64 {
    let denom = var + eps;
    if denom > 0.0 {
        1.0 / denom.sqrt()
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use rand::SeedableRng;

    #[test]
    fn batchnorm_rows_normalizes() {
        let mut rng = Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[16, 3], 2.0, &mut rng);
        let (y, _, _) = batchnorm_rows_train(&x, &[1.0; 3], &[0.0; 3], 1e-5).unwrap();
        for ch in 0..3 {
            let col: Vec<f64> = y.data().iter().skip(ch).step_by(3).copied().collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn batchnorm_constant_channel_is_beta() {
        let x = Tensor::filled(&[5, 2], 7.0);
        let (y, _, _) = batchnorm_rows_train(&x, &[3.0, 3.0], &[0.5, -0.5], 1e-5).unwrap();
        for row in y.data().chunks_exact(2) {
            assert!((row[0] - 0.5).abs() < 1e-9);
            assert!((row[1] + 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn batchnorm_rejects_empty_batch() {
        let x = Tensor::zeros(&[0, 3]);
        assert!(batchnorm_rows_train(&x, &[1.0; 3], &[0.0; 3], 1e-5).is_err());
        assert!(batchnorm_vol_train(&[], &[1.0], &[0.0], 1e-5).is_err());
    }

    #[test]
    fn batchnorm_vol_matches_rows() {
        // A batch of [C, 1] volumes is the same computation as rows [N, C].
        let mut rng = Rng::seed_from_u64(2);
        let rows = Tensor::uniform(&[6, 4], 1.0, &mut rng);
        let vols: Vec<Tensor> = rows
            .data()
            .chunks_exact(4)
            .map(|r| Tensor::from_vec(&[4, 1], r.to_vec()).unwrap())
            .collect();
        let gamma = [1.3, 0.7, -0.2, 2.0];
        let beta = [0.1, 0.0, -1.0, 0.4];
        let (yr, _, sr) = batchnorm_rows_train(&rows, &gamma, &beta, 1e-5).unwrap();
        let (yv, _, sv) = batchnorm_vol_train(&vols, &gamma, &beta, 1e-5).unwrap();
        for (i, y) in yv.iter().enumerate() {
            for ch in 0..4 {
                assert!((y.data()[ch] - yr.data()[i * 4 + ch]).abs() < 1e-12);
            }
        }
        for ch in 0..4 {
            assert!((sr.mean[ch] - sv.mean[ch]).abs() < 1e-12);
            assert!((sr.var[ch] - sv.var[ch]).abs() < 1e-12);
        }
    }

    #[test]
    fn instance_norm_known_values() {
        // channel values [1, 2, 3]: mean 2, population variance 2/3
        let x = Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let (y, _) = instance_norm_forward(&x, None, 0.0).unwrap();
        let e = (3.0f64 / 2.0).sqrt(); // 1.22474...
        assert!((y.data()[0] + e).abs() < 1e-9, "{:?}", y.data());
        assert!(y.data()[1].abs() < 1e-12);
        assert!((y.data()[2] - e).abs() < 1e-9);
        assert!((e - 1.224744871391589).abs() < 1e-12);
    }

    #[test]
    fn instance_norm_constant_channel_yields_translation() {
        let x = Tensor::filled(&[2, 2, 2, 2], 4.2);
        let s = [3.0, -1.0];
        let t = [0.25, -0.75];
        let (y, _) = instance_norm_forward(&x, Some((&s, &t)), 1e-5).unwrap();
        for (i, &v) in y.data().iter().enumerate() {
            let expect = if i < 8 { 0.25 } else { -0.75 };
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn instance_norm_channel_mismatch_rejected() {
        let x = Tensor::zeros(&[3, 2, 2, 2]);
        let s = [1.0; 2];
        let t = [0.0; 2];
        assert!(instance_norm_forward(&x, Some((&s, &t)), 1e-5).is_err());
    }

    #[test]
    fn instance_norm_output_statistics() {
        let mut rng = Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[4, 4, 4, 4], 2.0, &mut rng);
        let (y, _) = instance_norm_forward(&x, None, 1e-5).unwrap();
        let vol = 64;
        for ch in 0..4 {
            let slab = &y.data()[ch * vol..(ch + 1) * vol];
            let mean = slab.iter().sum::<f64>() / vol as f64;
            let var = slab.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vol as f64;
            assert!(mean.abs() <= 1e-6);
            assert!((var - 1.0).abs() <= 1e-4);
        }
    }

    #[test]
    fn affine_upstream_gradient_annihilates() {
        // With the upstream gradient affine in xhat, the input gradient
        // cancels exactly in the zero-eps limit.
        let mut rng = Rng::seed_from_u64(4);
        for trial in 0..5 {
            let x = Tensor::uniform(&[2, 3, 3, 3], 1.5, &mut rng);
            let (_, cache) = instance_norm_forward(&x, None, 0.0).unwrap();
            let (a, b) = (0.5 + trial as f64, -1.25 * trial as f64);
            let g: Vec<f64> = cache.xhat.data().iter().map(|h| a * h + b).collect();
            let g = Tensor::from_vec(x.shape(), g).unwrap();
            let (gx, _, _) = instance_norm_backward(&cache, &g);
            let norm = gx.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm <= 1e-8, "gradient norm {norm}");
        }
    }
}
