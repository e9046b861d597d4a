//! ReLU and batch normalization.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Normalization epsilon for batch norm.
pub const BN_EPSILON: f64 = 1e-3;
/// Exponential moving-average momentum for running statistics.
pub const BN_MOMENTUM: f64 = 0.99;

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    out
}

/// Adjoint of [`relu`]: passes gradient where the forward input was
/// strictly positive.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != upstream.shape() {
        return Err(Error::shape("relu_backward", input.shape(), upstream.shape()));
    }
    let mut out = upstream.clone();
    for (g, &x) in out.data_mut().iter_mut().zip(input.data()) {
        if x <= T::zero() {
            *g = T::zero();
        }
    }
    Ok(out)
}

/// Saved forward state needed by the train-mode adjoint. Only train-mode
/// forwards produce one; asking for gradients of an infer-mode batch norm
/// is a caller error surfaced by the graph executor.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    /// Normalized activations (pre scale/shift).
    pub xhat: Tensor<T>,
    /// Per-channel 1/sqrt(var + eps).
    pub inv_std: Vec<T>,
    /// Reduction count: batch × spatial.
    pub m: usize,
}

fn check_bn_args<T: Scalar>(
    op: &'static str,
    input: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
) -> Result<usize> {
    if input.rank() != 4 {
        return Err(Error::op(op, format!("input must be rank 4, got {:?}", input.shape())));
    }
    let c = input.dim(3);
    if scale.shape() != [c] {
        return Err(Error::shape(op, scale.shape(), &[c]));
    }
    if shift.shape() != [c] {
        return Err(Error::shape(op, shift.shape(), &[c]));
    }
    Ok(c)
}

/// Train-mode batch norm: normalizes per channel over batch × spatial with
/// the current mini-batch moments and updates the running statistics by
/// exponential moving average.
pub fn batch_norm_train<T: Scalar>(
    input: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let c = check_bn_args("batch_norm_train", input, scale, shift)?;
    let (b, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    let m = b * h * w;
    let m_t = T::from_f64c(m as f64);

    // Per-channel mean and (biased) variance, accumulated in fixed order.
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let idata = input.data();
    for base in (0..idata.len()).step_by(c) {
        for (mc, &v) in mean.iter_mut().zip(&idata[base..base + c]) {
            *mc = *mc + v;
        }
    }
    for mc in mean.iter_mut() {
        *mc = *mc / m_t;
    }
    for base in (0..idata.len()).step_by(c) {
        for ci in 0..c {
            let d = idata[base + ci] - mean[ci];
            var[ci] = var[ci] + d * d;
        }
    }
    for vc in var.iter_mut() {
        *vc = *vc / m_t;
    }

    let eps = T::from_f64c(BN_EPSILON);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

    let mut xhat = Tensor::<T>::zeros(input.shape().to_vec());
    let mut out = Tensor::<T>::zeros(input.shape().to_vec());
    {
        let xh = xhat.data_mut();
        let od = out.data_mut();
        let sc = scale.data();
        let sh = shift.data();
        for base in (0..idata.len()).step_by(c) {
            for ci in 0..c {
                let n = (idata[base + ci] - mean[ci]) * inv_std[ci];
                xh[base + ci] = n;
                od[base + ci] = n * sc[ci] + sh[ci];
            }
        }
    }

    let momentum = T::from_f64c(BN_MOMENTUM);
    let one_minus = T::one() - momentum;
    for (r, &b) in running_mean.data_mut().iter_mut().zip(&mean) {
        *r = *r * momentum + b * one_minus;
    }
    for (r, &b) in running_var.data_mut().iter_mut().zip(&var) {
        *r = *r * momentum + b * one_minus;
    }

    out.debug_check_finite("batch_norm_train");
    Ok((out, BnCache { xhat, inv_std, m }))
}

/// Infer-mode batch norm: normalizes with the stored running statistics.
pub fn batch_norm_infer<T: Scalar>(
    input: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
) -> Result<Tensor<T>> {
    let c = check_bn_args("batch_norm_infer", input, scale, shift)?;
    let eps = T::from_f64c(BN_EPSILON);
    let rm = running_mean.data();
    let inv_std: Vec<T> = running_var
        .data()
        .iter()
        .map(|&v| T::one() / (v + eps).sqrt())
        .collect();
    let mut out = Tensor::<T>::zeros(input.shape().to_vec());
    let idata = input.data();
    let od = out.data_mut();
    let sc = scale.data();
    let sh = shift.data();
    for base in (0..idata.len()).step_by(c) {
        for ci in 0..c {
            od[base + ci] = (idata[base + ci] - rm[ci]) * inv_std[ci] * sc[ci] + sh[ci];
        }
    }
    out.debug_check_finite("batch_norm_infer");
    Ok(out)
}

/// Adjoint of [`batch_norm_train`] via the cached normalized activations:
///
/// d_in = inv_std/m · (m·dxhat − Σ dxhat − xhat · Σ(dxhat·xhat))
pub fn batch_norm_backward<T: Scalar>(
    cache: &BnCache<T>,
    scale: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if upstream.shape() != cache.xhat.shape() {
        return Err(Error::shape("batch_norm_backward", upstream.shape(), cache.xhat.shape()));
    }
    let c = cache.xhat.dim(3);
    let m_t = T::from_f64c(cache.m as f64);
    let gdata = upstream.data();
    let xh = cache.xhat.data();
    let sc = scale.data();

    let mut d_scale = vec![T::zero(); c];
    let mut d_shift = vec![T::zero(); c];
    let mut sum_dxhat = vec![T::zero(); c];
    let mut sum_dxhat_xhat = vec![T::zero(); c];
    for base in (0..gdata.len()).step_by(c) {
        for ci in 0..c {
            let g = gdata[base + ci];
            let x = xh[base + ci];
            d_scale[ci] = d_scale[ci] + g * x;
            d_shift[ci] = d_shift[ci] + g;
            let dxh = g * sc[ci];
            sum_dxhat[ci] = sum_dxhat[ci] + dxh;
            sum_dxhat_xhat[ci] = sum_dxhat_xhat[ci] + dxh * x;
        }
    }

    let mut d_input = Tensor::<T>::zeros(cache.xhat.shape().to_vec());
    let di = d_input.data_mut();
    for base in (0..gdata.len()).step_by(c) {
        for ci in 0..c {
            let dxh = gdata[base + ci] * sc[ci];
            let term = m_t * dxh - sum_dxhat[ci] - xh[base + ci] * sum_dxhat_xhat[ci];
            di[base + ci] = cache.inv_std[ci] / m_t * term;
        }
    }

    Ok((
        d_input,
        Tensor::new(vec![c], d_scale)?,
        Tensor::new(vec![c], d_shift)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let input = Tensor::new(vec![1, 1, 1, 3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&input).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_backward_masks_nonpositive() {
        let input = Tensor::new(vec![1, 1, 1, 3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        let g = Tensor::new(vec![1, 1, 1, 3], vec![1.0f32, 1.0, 1.0]).unwrap();
        assert_eq!(relu_backward(&input, &g).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn unit_gaussian_channel_is_roughly_identity() {
        // Zero-mean unit-variance data with scale 1 shift 0 stays put
        // up to the epsilon in the denominator.
        let vals: Vec<f32> = vec![-1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0];
        let input = Tensor::new(vec![8, 1, 1, 1], vals.clone()).unwrap();
        let scale = Tensor::full(vec![1], 1.0f32);
        let shift = Tensor::<f32>::zeros(vec![1]);
        let mut rm = Tensor::<f32>::zeros(vec![1]);
        let mut rv = Tensor::full(vec![1], 1.0f32);
        let (out, _) = batch_norm_train(&input, &scale, &shift, &mut rm, &mut rv).unwrap();
        for (o, v) in out.data().iter().zip(&vals) {
            assert!((o - v).abs() < 1e-3 + 1e-5, "{o} vs {v}");
        }
    }

    #[test]
    fn train_mode_normalizes_moments() {
        let mut vals = Vec::new();
        for i in 0..64 {
            vals.push(i as f32 * 0.37 - 5.0);
        }
        let input = Tensor::new(vec![4, 4, 4, 1], vals).unwrap();
        let scale = Tensor::full(vec![1], 1.0f32);
        let shift = Tensor::<f32>::zeros(vec![1]);
        let mut rm = Tensor::<f32>::zeros(vec![1]);
        let mut rv = Tensor::full(vec![1], 1.0f32);
        let (out, _) = batch_norm_train(&input, &scale, &shift, &mut rm, &mut rv).unwrap();
        let n = out.len() as f64;
        let mean: f64 = out.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var: f64 = out.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-4, "mean {mean}");
        // Epsilon shrinks the output variance slightly below 1.
        assert!((var - 1.0).abs() < 2e-3, "var {var}");
        // Running stats moved toward batch stats.
        assert!(rm.data()[0] != 0.0);
    }

    #[test]
    fn infer_uses_running_stats() {
        let input = Tensor::new(vec![1, 1, 1, 1], vec![3.0f32]).unwrap();
        let scale = Tensor::full(vec![1], 2.0f32);
        let shift = Tensor::full(vec![1], 0.5f32);
        let rm = Tensor::full(vec![1], 1.0f32);
        let rv = Tensor::full(vec![1], 4.0f32);
        let out = batch_norm_infer(&input, &scale, &shift, &rm, &rv).unwrap();
        let expect = (3.0 - 1.0) / (4.0f32 + 1e-3).sqrt() * 2.0 + 0.5;
        assert!((out.data()[0] - expect).abs() < 1e-6);
    }
}
