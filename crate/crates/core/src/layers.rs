//! The fixed set of layer operations and their analytic gradients.
//!
//! Each forward has a matching backward that maps the upstream gradient to
//! input/parameter gradients. There is no tape: the model composes these
//! pairs in a fixed topology, which keeps every gradient auditable against
//! the finite-difference checker in [`crate::gradcheck`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::math;
use crate::tensor::Tensor;

/// out[t,j] = sum_i x[t,i] * w[i,j] + b[j]
pub fn affine_fwd(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (t, din) = (x.rows(), x.cols());
    let (wi, dout) = (w.rows(), w.cols());
    if din != wi || b.numel() != dout {
        return Err(CoreError::ShapeMismatch {
            context: "affine_fwd",
            expected: format!("x[T x {wi}], b[{dout}]"),
            got: format!("x{}, b{}", x.describe_shape(), b.describe_shape()),
        });
    }
    let mut out = vec![0.0; t * dout];
    for r in 0..t {
        let xr = x.row(r);
        let or = &mut out[r * dout..(r + 1) * dout];
        or.copy_from_slice(b.data());
        for (i, &xv) in xr.iter().enumerate() {
            let wr = &w.data()[i * dout..(i + 1) * dout];
            for (o, &wv) in or.iter_mut().zip(wr) {
                *o += xv * wv;
            }
        }
    }
    Tensor::from_vec(&[t, dout], out)
}

/// Returns (dx, dw, db).
pub fn affine_bwd(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (t, din) = (x.rows(), x.cols());
    let dout = w.cols();
    debug_assert_eq!(dy.rows(), t);
    debug_assert_eq!(dy.cols(), dout);
    let mut dx = vec![0.0; t * din];
    let mut dw = vec![0.0; din * dout];
    let mut db = vec![0.0; dout];
    for r in 0..t {
        let xr = x.row(r);
        let dyr = dy.row(r);
        for (dbj, &dyv) in db.iter_mut().zip(dyr) {
            *dbj += dyv;
        }
        for i in 0..din {
            let wr = &w.data()[i * dout..(i + 1) * dout];
            let dwr = &mut dw[i * dout..(i + 1) * dout];
            let mut acc = 0.0;
            for ((&wv, dwv), &dyv) in wr.iter().zip(dwr.iter_mut()).zip(dyr) {
                acc += wv * dyv;
                *dwv += xr[i] * dyv;
            }
            dx[r * din + i] = acc;
        }
    }
    (Tensor::from_vec(&[t, din], dx).unwrap(), dw, db)
}

/// Valid (no padding) convolution over the time axis.
///
/// kernels are [K x Din x Dout]; output has T' = (T - K) / stride + 1 frames.
pub fn conv1d_fwd(x: &Tensor, kernels: &Tensor, stride: usize) -> Result<Tensor> {
    let (t, din) = (x.rows(), x.cols());
    let k = kernels.shape()[0];
    let kin = kernels.shape()[1];
    let dout = kernels.shape()[2];
    if kin != din {
        return Err(CoreError::ShapeMismatch {
            context: "conv1d_fwd",
            expected: format!("kernel input dim {din}"),
            got: format!("{kin}"),
        });
    }
    if t < k {
        return Err(CoreError::SequenceTooShort { needed: k, got: t });
    }
    let t_out = (t - k) / stride + 1;
    let mut out = vec![0.0; t_out * dout];
    for to in 0..t_out {
        let or = &mut out[to * dout..(to + 1) * dout];
        for tap in 0..k {
            let xr = x.row(to * stride + tap);
            let kt = &kernels.data()[tap * din * dout..(tap + 1) * din * dout];
            for (i, &xv) in xr.iter().enumerate() {
                let kr = &kt[i * dout..(i + 1) * dout];
                for (o, &kv) in or.iter_mut().zip(kr) {
                    *o += xv * kv;
                }
            }
        }
    }
    Tensor::from_vec(&[t_out, dout], out)
}

/// Returns (dx, dkernels).
pub fn conv1d_bwd(x: &Tensor, kernels: &Tensor, stride: usize, dy: &Tensor) -> (Tensor, Vec<f64>) {
    let (t, din) = (x.rows(), x.cols());
    let k = kernels.shape()[0];
    let dout = kernels.shape()[2];
    let t_out = dy.rows();
    let mut dx = vec![0.0; t * din];
    let mut dk = vec![0.0; k * din * dout];
    for to in 0..t_out {
        let dyr = dy.row(to);
        for tap in 0..k {
            let ti = to * stride + tap;
            let xr = x.row(ti);
            let kt = &kernels.data()[tap * din * dout..(tap + 1) * din * dout];
            let dkt = &mut dk[tap * din * dout..(tap + 1) * din * dout];
            for i in 0..din {
                let kr = &kt[i * dout..(i + 1) * dout];
                let dkr = &mut dkt[i * dout..(i + 1) * dout];
                let mut acc = 0.0;
                for ((&kv, dkv), &dyv) in kr.iter().zip(dkr.iter_mut()).zip(dyr) {
                    acc += kv * dyv;
                    *dkv += xr[i] * dyv;
                }
                dx[ti * din + i] += acc;
            }
        }
    }
    (Tensor::from_vec(&[t, din], dx).unwrap(), dk)
}

/// Broadcast-add a per-channel bias: out[t,j] = x[t,j] + b[j].
pub fn add_bias_fwd(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (t, d) = (x.rows(), x.cols());
    if b.numel() != d {
        return Err(CoreError::ShapeMismatch {
            context: "add_bias_fwd",
            expected: format!("bias[{d}]"),
            got: b.describe_shape(),
        });
    }
    let mut out = x.data().to_vec();
    for r in 0..t {
        for (o, &bv) in out[r * d..(r + 1) * d].iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    Tensor::from_vec(&[t, d], out)
}

/// Bias gradient: column sums of the upstream gradient. dx passes through.
pub fn add_bias_bwd(dy: &Tensor) -> Vec<f64> {
    let d = dy.cols();
    let mut db = vec![0.0; d];
    for r in 0..dy.rows() {
        for (dbj, &v) in db.iter_mut().zip(dy.row(r)) {
            *dbj += v;
        }
    }
    db
}

/// Per-frame normalization to zero mean / unit variance, then gain * xhat + bias.
pub fn layernorm_fwd(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let (t, d) = (x.rows(), x.cols());
    if gain.numel() != d || bias.numel() != d {
        return Err(CoreError::ShapeMismatch {
            context: "layernorm_fwd",
            expected: format!("gain/bias[{d}]"),
            got: format!("gain{}, bias{}", gain.describe_shape(), bias.describe_shape()),
        });
    }
    let mut out = vec![0.0; t * d];
    for r in 0..t {
        let xr = x.row(r);
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / math::sqrt(var + eps);
        for (j, o) in out[r * d..(r + 1) * d].iter_mut().enumerate() {
            *o = gain.data()[j] * (xr[j] - mean) * inv + bias.data()[j];
        }
    }
    Tensor::from_vec(&[t, d], out)
}

/// Returns (dx, dgain, dbias). Mean/variance are recomputed from `x`.
pub fn layernorm_bwd(x: &Tensor, gain: &Tensor, eps: f64, dy: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (t, d) = (x.rows(), x.cols());
    let df = d as f64;
    let mut dx = vec![0.0; t * d];
    let mut dg = vec![0.0; d];
    let mut db = vec![0.0; d];
    for r in 0..t {
        let xr = x.row(r);
        let dyr = dy.row(r);
        let mean = xr.iter().sum::<f64>() / df;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / df;
        let inv = 1.0 / math::sqrt(var + eps);
        // dL/dxhat, plus reductions needed for the mean/var terms.
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for j in 0..d {
            let xhat = (xr[j] - mean) * inv;
            let dxhat = dyr[j] * gain.data()[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dg[j] += dyr[j] * xhat;
            db[j] += dyr[j];
        }
        for j in 0..d {
            let xhat = (xr[j] - mean) * inv;
            let dxhat = dyr[j] * gain.data()[j];
            dx[r * d + j] = inv * (dxhat - sum_dxhat / df - xhat * sum_dxhat_xhat / df);
        }
    }
    (Tensor::from_vec(&[t, d], dx).unwrap(), dg, db)
}

pub fn relu_fwd(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::from_vec(x.shape(), data).unwrap()
}

pub fn relu_bwd(x: &Tensor, dy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&xv, &dv)| if xv > 0.0 { dv } else { 0.0 })
        .collect();
    Tensor::from_vec(x.shape(), data).unwrap()
}

/// Row-wise log-probabilities: out[t,:] = x[t,:] - logsumexp(x[t,:]).
pub fn log_softmax_fwd(x: &Tensor) -> Tensor {
    let (t, d) = (x.rows(), x.cols());
    let mut out = vec![0.0; t * d];
    for r in 0..t {
        let xr = x.row(r);
        let max = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + math::ln(xr.iter().map(|&v| math::exp(v - max)).sum::<f64>());
        for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(xr) {
            *o = v - lse;
        }
    }
    Tensor::from_vec(&[t, d], out).unwrap()
}

/// Backward through log_softmax given its own output `y`:
/// dx[t,j] = dy[t,j] - exp(y[t,j]) * sum_k dy[t,k].
pub fn log_softmax_bwd(y: &Tensor, dy: &Tensor) -> Tensor {
    let (t, d) = (y.rows(), y.cols());
    let mut dx = vec![0.0; t * d];
    for r in 0..t {
        let yr = y.row(r);
        let dyr = dy.row(r);
        let s: f64 = dyr.iter().sum();
        for j in 0..d {
            dx[r * d + j] = dyr[j] - math::exp(yr[j]) * s;
        }
    }
    Tensor::from_vec(&[t, d], dx).unwrap()
}

/// Gradient reversal: the forward pass is the identity, the backward pass
/// multiplies the upstream gradient by -lambda.
pub fn grl_backward(upstream: &Tensor, lambda: f64) -> Tensor {
    let data = upstream.data().iter().map(|&v| -lambda * v).collect();
    Tensor::from_vec(upstream.shape(), data).unwrap()
}

/// Arithmetic mean over frames: [T x D] -> [1 x D].
pub fn mean_pool_fwd(x: &Tensor) -> Tensor {
    let (t, d) = (x.rows(), x.cols());
    let mut out = vec![0.0; d];
    for r in 0..t {
        for (o, &v) in out.iter_mut().zip(x.row(r)) {
            *o += v;
        }
    }
    let tf = t as f64;
    out.iter_mut().for_each(|v| *v /= tf);
    Tensor::from_vec(&[1, d], out).unwrap()
}

pub fn mean_pool_bwd(frames: usize, dy: &Tensor) -> Tensor {
    let d = dy.cols();
    let tf = frames as f64;
    let mut dx = vec![0.0; frames * d];
    for r in 0..frames {
        for (o, &v) in dx[r * d..(r + 1) * d].iter_mut().zip(dy.row(0)) {
            *o = v / tf;
        }
    }
    Tensor::from_vec(&[frames, d], dx).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn affine_identity_case() {
        let x = t2(&[&[1.0, 2.0]]);
        let w = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        let y = affine_fwd(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn affine_hand_computed() {
        let x = t2(&[&[1.0, 1.0]]);
        let w = t2(&[&[2.0], &[3.0]]);
        let b = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let y = affine_fwd(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn affine_shape_mismatch_errors() {
        let x = t2(&[&[1.0, 1.0]]);
        let w = t2(&[&[2.0]]);
        let b = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        assert!(matches!(affine_fwd(&x, &w, &b), Err(CoreError::ShapeMismatch { .. })));
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let x = t2(&[&[1.0], &[2.0], &[3.0]]);
        let k = Tensor::from_vec(&[1, 1, 1], vec![1.0]).unwrap();
        let y = conv1d_fwd(&x, &k, 1).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_hand_computed_sums() {
        let x = t2(&[&[1.0], &[2.0], &[3.0]]);
        let k = Tensor::from_vec(&[2, 1, 1], vec![1.0, 1.0]).unwrap();
        let y = conv1d_fwd(&x, &k, 1).unwrap();
        assert_eq!(y.data(), &[3.0, 5.0]);
        assert_eq!(y.shape(), &[2, 1]);
    }

    #[test]
    fn conv_rejects_short_sequences() {
        let x = t2(&[&[1.0]]);
        let k = Tensor::from_vec(&[2, 1, 1], vec![1.0, 1.0]).unwrap();
        assert!(matches!(conv1d_fwd(&x, &k, 1), Err(CoreError::SequenceTooShort { needed: 2, got: 1 })));
    }

    #[test]
    fn conv_stride_output_length() {
        let x = Tensor::from_vec(&[7, 1], (0..7).map(|v| v as f64).collect()).unwrap();
        let k = Tensor::from_vec(&[3, 1, 1], vec![1.0, 0.0, 0.0]).unwrap();
        let y = conv1d_fwd(&x, &k, 2).unwrap();
        assert_eq!(y.rows(), 3);
        assert_eq!(y.data(), &[0.0, 2.0, 4.0]);
    }

    #[test]
    fn layernorm_constant_row_is_zero() {
        let x = t2(&[&[5.0, 5.0, 5.0]]);
        let g = Tensor::from_vec(&[3], vec![1.0; 3]).unwrap();
        let b = Tensor::from_vec(&[3], vec![0.0; 3]).unwrap();
        let y = layernorm_fwd(&x, &g, &b, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layernorm_two_point_row() {
        let x = t2(&[&[1.0, 3.0]]);
        let g = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        let y = layernorm_fwd(&x, &g, &b, 1e-5).unwrap();
        assert!(math::abs(y.data()[0] + 1.0) < 1e-3);
        assert!(math::abs(y.data()[1] - 1.0) < 1e-3);
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = t2(&[&[-1.0, 0.0, 2.0]]);
        assert_eq!(relu_fwd(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn log_softmax_uniform_pair() {
        let x = t2(&[&[0.0, 0.0]]);
        let y = log_softmax_fwd(&x);
        let ln2 = math::ln(2.0);
        assert!(math::abs(y.data()[0] + ln2) < 1e-15);
        assert!(math::abs(y.data()[1] + ln2) < 1e-15);
    }

    #[test]
    fn log_softmax_rows_exp_sum_to_one() {
        let x = t2(&[&[0.3, -1.2, 4.5], &[10.0, 10.0, -3.0]]);
        let y = log_softmax_fwd(&x);
        for r in 0..2 {
            let s: f64 = y.row(r).iter().map(|&v| math::exp(v)).sum();
            assert!(math::abs(s - 1.0) < 1e-12);
        }
    }

    #[test]
    fn grl_scales_and_flips() {
        let up = t2(&[&[2.0, -3.0]]);
        assert_eq!(grl_backward(&up, 1.0).data(), &[-2.0, 3.0]);
        assert_eq!(grl_backward(&up, 0.0).data(), &[0.0, 0.0]);
        let up1 = t2(&[&[4.0]]);
        assert_eq!(grl_backward(&up1, 0.5).data(), &[-2.0]);
    }

    #[test]
    fn mean_pool_roundtrip_gradient() {
        let x = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let p = mean_pool_fwd(&x);
        assert_eq!(p.data(), &[2.0, 3.0]);
        let dy = t2(&[&[1.0, 2.0]]);
        let dx = mean_pool_bwd(2, &dy);
        assert_eq!(dx.data(), &[0.5, 1.0, 0.5, 1.0]);
    }
}
