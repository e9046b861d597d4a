//! Standard, depthwise, and pointwise 2-D convolutions.
//!
//! Inputs are NHWC, kernels `kh × kw × cin × cout` (depthwise: `kh × kw × c`,
//! one filter per input channel). Per output element the accumulation order
//! is fixed as (ky, kx, ci) with the bias added last; the naive references
//! in the test suite use the same order, so agreement is exact and results
//! are bit-stable across runs.

use super::Padding;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn check_rank4(op: &'static str, t: &Tensor<impl Scalar>, what: &str) -> Result<()> {
    if t.rank() != 4 {
        return Err(Error::op(op, format!("{what} must be rank 4, got {:?}", t.shape())));
    }
    Ok(())
}

/// Full convolution: kernel `kh × kw × cin × cout`, optional bias `cout`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    check_rank4("conv2d", input, "input")?;
    check_rank4("conv2d", kernel, "kernel")?;
    let (b, ih, iw, cin) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (kh, kw, kcin, cout) = (kernel.dim(0), kernel.dim(1), kernel.dim(2), kernel.dim(3));
    if cin != kcin {
        return Err(Error::shape("conv2d", input.shape(), kernel.shape()));
    }
    if let Some(bt) = bias {
        if bt.shape() != [cout] {
            return Err(Error::shape("conv2d", bt.shape(), &[cout]));
        }
    }
    let (oh, pad_t) = padding.out_and_pad(ih, kh, stride)?;
    let (ow, pad_l) = padding.out_and_pad(iw, kw, stride)?;

    let mut out = Tensor::<T>::zeros(vec![b, oh, ow, cout]);
    let idata = input.data();
    let kdata = kernel.data();
    let odata = out.data_mut();

    for n in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let obase = ((n * oh + oy) * ow + ox) * cout;
                let orow = &mut odata[obase..obase + cout];
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad_t as isize;
                    if iy < 0 || iy >= ih as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad_l as isize;
                        if ix < 0 || ix >= iw as isize {
                            continue;
                        }
                        let ibase = ((n * ih + iy as usize) * iw + ix as usize) * cin;
                        let kbase = (ky * kw + kx) * cin * cout;
                        for ci in 0..cin {
                            let v = idata[ibase + ci];
                            let krow = &kdata[kbase + ci * cout..kbase + (ci + 1) * cout];
                            for (o, &k) in orow.iter_mut().zip(krow) {
                                *o = *o + v * k;
                            }
                        }
                    }
                }
                if let Some(bt) = bias {
                    for (o, &bv) in orow.iter_mut().zip(bt.data()) {
                        *o = *o + bv;
                    }
                }
            }
        }
    }
    out.debug_check_finite("conv2d");
    Ok(out)
}

/// Adjoint of [`conv2d`]: gradients for input, kernel, and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    has_bias: bool,
    upstream: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let (b, ih, iw, cin) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (kh, kw, _, cout) = (kernel.dim(0), kernel.dim(1), kernel.dim(2), kernel.dim(3));
    let (oh, pad_t) = padding.out_and_pad(ih, kh, stride)?;
    let (ow, pad_l) = padding.out_and_pad(iw, kw, stride)?;
    if upstream.shape() != [b, oh, ow, cout] {
        return Err(Error::shape("conv2d_backward", upstream.shape(), &[b, oh, ow, cout]));
    }

    let mut d_input = Tensor::<T>::zeros(input.shape().to_vec());
    let mut d_kernel = Tensor::<T>::zeros(kernel.shape().to_vec());
    let mut d_bias = has_bias.then(|| Tensor::<T>::zeros(vec![cout]));

    let idata = input.data();
    let kdata = kernel.data();
    let gdata = upstream.data();
    let di = d_input.data_mut();
    let dk = d_kernel.data_mut();

    for n in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let gbase = ((n * oh + oy) * ow + ox) * cout;
                let grow = &gdata[gbase..gbase + cout];
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad_t as isize;
                    if iy < 0 || iy >= ih as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad_l as isize;
                        if ix < 0 || ix >= iw as isize {
                            continue;
                        }
                        let ibase = ((n * ih + iy as usize) * iw + ix as usize) * cin;
                        let kbase = (ky * kw + kx) * cin * cout;
                        for ci in 0..cin {
                            let krow = &kdata[kbase + ci * cout..kbase + (ci + 1) * cout];
                            let dkrow = &mut dk[kbase + ci * cout..kbase + (ci + 1) * cout];
                            let v = idata[ibase + ci];
                            let mut acc = T::zero();
                            for co in 0..cout {
                                let g = grow[co];
                                acc = acc + krow[co] * g;
                                dkrow[co] = dkrow[co] + v * g;
                            }
                            di[ibase + ci] = di[ibase + ci] + acc;
                        }
                    }
                }
                if let Some(db) = d_bias.as_mut() {
                    for (d, &g) in db.data_mut().iter_mut().zip(grow) {
                        *d = *d + g;
                    }
                }
            }
        }
    }
    Ok((d_input, d_kernel, d_bias))
}

/// Depthwise convolution: kernel `kh × kw × c`, one filter per channel,
/// channel count preserved.
pub fn depthwise_conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    check_rank4("depthwise_conv2d", input, "input")?;
    if kernel.rank() != 3 {
        return Err(Error::op(
            "depthwise_conv2d",
            format!("kernel must be rank 3 (kh,kw,c), got {:?}", kernel.shape()),
        ));
    }
    let (b, ih, iw, c) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (kh, kw, kc) = (kernel.dim(0), kernel.dim(1), kernel.dim(2));
    if c != kc {
        return Err(Error::shape("depthwise_conv2d", input.shape(), kernel.shape()));
    }
    if let Some(bt) = bias {
        if bt.shape() != [c] {
            return Err(Error::shape("depthwise_conv2d", bt.shape(), &[c]));
        }
    }
    let (oh, pad_t) = padding.out_and_pad(ih, kh, stride)?;
    let (ow, pad_l) = padding.out_and_pad(iw, kw, stride)?;

    let mut out = Tensor::<T>::zeros(vec![b, oh, ow, c]);
    let idata = input.data();
    let kdata = kernel.data();
    let odata = out.data_mut();

    for n in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let obase = ((n * oh + oy) * ow + ox) * c;
                let orow = &mut odata[obase..obase + c];
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad_t as isize;
                    if iy < 0 || iy >= ih as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad_l as isize;
                        if ix < 0 || ix >= iw as isize {
                            continue;
                        }
                        let ibase = ((n * ih + iy as usize) * iw + ix as usize) * c;
                        let kbase = (ky * kw + kx) * c;
                        let irow = &idata[ibase..ibase + c];
                        let krow = &kdata[kbase..kbase + c];
                        for ((o, &v), &k) in orow.iter_mut().zip(irow).zip(krow) {
                            *o = *o + v * k;
                        }
                    }
                }
                if let Some(bt) = bias {
                    for (o, &bv) in orow.iter_mut().zip(bt.data()) {
                        *o = *o + bv;
                    }
                }
            }
        }
    }
    out.debug_check_finite("depthwise_conv2d");
    Ok(out)
}

/// Adjoint of [`depthwise_conv2d`].
pub fn depthwise_conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    has_bias: bool,
    upstream: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let (b, ih, iw, c) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (kh, kw) = (kernel.dim(0), kernel.dim(1));
    let (oh, pad_t) = padding.out_and_pad(ih, kh, stride)?;
    let (ow, pad_l) = padding.out_and_pad(iw, kw, stride)?;
    if upstream.shape() != [b, oh, ow, c] {
        return Err(Error::shape("depthwise_backward", upstream.shape(), &[b, oh, ow, c]));
    }

    let mut d_input = Tensor::<T>::zeros(input.shape().to_vec());
    let mut d_kernel = Tensor::<T>::zeros(kernel.shape().to_vec());
    let mut d_bias = has_bias.then(|| Tensor::<T>::zeros(vec![c]));

    let idata = input.data();
    let kdata = kernel.data();
    let gdata = upstream.data();
    let di = d_input.data_mut();
    let dk = d_kernel.data_mut();

    for n in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let gbase = ((n * oh + oy) * ow + ox) * c;
                let grow = &gdata[gbase..gbase + c];
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad_t as isize;
                    if iy < 0 || iy >= ih as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad_l as isize;
                        if ix < 0 || ix >= iw as isize {
                            continue;
                        }
                        let ibase = ((n * ih + iy as usize) * iw + ix as usize) * c;
                        let kbase = (ky * kw + kx) * c;
                        for ci in 0..c {
                            let g = grow[ci];
                            di[ibase + ci] = di[ibase + ci] + kdata[kbase + ci] * g;
                            dk[kbase + ci] = dk[kbase + ci] + idata[ibase + ci] * g;
                        }
                    }
                }
                if let Some(db) = d_bias.as_mut() {
                    for (d, &g) in db.data_mut().iter_mut().zip(grow) {
                        *d = *d + g;
                    }
                }
            }
        }
    }
    Ok((d_input, d_kernel, d_bias))
}

/// Pointwise (1×1) convolution: per-pixel dense map across channels.
pub fn pointwise_conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    if kernel.rank() != 4 || kernel.dim(0) != 1 || kernel.dim(1) != 1 {
        return Err(Error::op(
            "pointwise_conv2d",
            format!("kernel must be 1×1×cin×cout, got {:?}", kernel.shape()),
        ));
    }
    conv2d(input, kernel, bias, 1, Padding::Valid)
}

/// Adjoint of [`pointwise_conv2d`].
pub fn pointwise_conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    has_bias: bool,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    conv2d_backward(input, kernel, has_bias, upstream, 1, Padding::Valid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(shape: [usize; 4], data: Vec<f32>) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn identity_kernel_passes_value_through() {
        let v = t4([1, 1, 1, 1], vec![3.5]);
        let k = t4([1, 1, 1, 1], vec![1.0]);
        let b = Tensor::new(vec![1], vec![0.0]).unwrap();
        let out = conv2d(&v, &k, Some(&b), 1, Padding::Same).unwrap();
        assert_eq!(out.data(), &[3.5]);
    }

    #[test]
    fn ones_kernel_valid_sums_window() {
        let input = t4([1, 3, 3, 1], vec![1.0; 9]);
        let k = Tensor::new(vec![3, 3, 1, 1], vec![1.0; 9]).unwrap();
        let out = conv2d(&input, &k, None, 1, Padding::Valid).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[9.0]);
    }

    #[test]
    fn conv_channel_mismatch_names_both_shapes() {
        let input = t4([1, 2, 2, 3], vec![0.0; 12]);
        let k = Tensor::new(vec![1, 1, 2, 4], vec![0.0; 8]).unwrap();
        let err = conv2d(&input, &k, None, 1, Padding::Same).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2, 2, 3]") && msg.contains("[1, 1, 2, 4]"), "{msg}");
    }

    #[test]
    fn depthwise_identity_kernels_preserve_input() {
        // 3x3 kernels with 1 at the center per channel.
        let input = t4([1, 4, 4, 2], (0..32).map(|i| i as f32).collect());
        let mut kdata = vec![0.0f32; 9 * 2];
        kdata[4 * 2] = 1.0;
        kdata[4 * 2 + 1] = 1.0;
        let k = Tensor::new(vec![3, 3, 2], kdata).unwrap();
        let out = depthwise_conv2d(&input, &k, None, 1, Padding::Same).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn depthwise_stride2_same_shape() {
        let input = t4([1, 4, 4, 2], vec![1.0; 32]);
        let k = Tensor::new(vec![3, 3, 2], vec![0.5; 18]).unwrap();
        let out = depthwise_conv2d(&input, &k, None, 2, Padding::Same).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2, 2]);
    }

    #[test]
    fn pointwise_identity_matrix_is_identity() {
        let input = t4([1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let k = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = pointwise_conv2d(&input, &k, None).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn pointwise_shape_rule() {
        let input = t4([1, 2, 2, 2], vec![0.5; 8]);
        let k = Tensor::new(vec![1, 1, 2, 4], vec![0.1; 8]).unwrap();
        let out = pointwise_conv2d(&input, &k, None).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2, 4]);
    }

    #[test]
    fn pointwise_rejects_spatial_kernel() {
        let input = t4([1, 2, 2, 2], vec![0.0; 8]);
        let k = Tensor::new(vec![3, 3, 2, 2], vec![0.0; 36]).unwrap();
        assert!(pointwise_conv2d(&input, &k, None).is_err());
    }

    #[test]
    fn dense_like_identity_backward_passes_grad() {
        // conv with identity 1x1 kernel: upstream grad flows to input unchanged.
        let input = t4([1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let k = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let g = t4([1, 2, 2, 1], vec![0.1, 0.2, 0.3, 0.4]);
        let (di, dk, db) = conv2d_backward(&input, &k, true, &g, 1, Padding::Same).unwrap();
        assert_eq!(di.data(), g.data());
        // dk = sum(input * g) = 0.1 + 0.4 + 0.9 + 1.6 = 3.0
        assert!((dk.data()[0] - 3.0).abs() < 1e-6);
        assert!((db.unwrap().data()[0] - 1.0).abs() < 1e-6);
    }
}
