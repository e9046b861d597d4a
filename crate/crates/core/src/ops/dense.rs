//! Fully-connected layer and flatten.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `out[b,m] = in[b,:] · w[:,m] + bias[m]` for rank-2 input `b×n` and
/// weights `n×m`.
pub fn dense<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    if input.rank() != 2 || weights.rank() != 2 {
        return Err(Error::op(
            "dense",
            format!(
                "input and weights must be rank 2, got {:?} and {:?}",
                input.shape(),
                weights.shape()
            ),
        ));
    }
    let (b, n) = (input.dim(0), input.dim(1));
    let (wn, m) = (weights.dim(0), weights.dim(1));
    if n != wn {
        return Err(Error::shape("dense", input.shape(), weights.shape()));
    }
    if let Some(bt) = bias {
        if bt.shape() != [m] {
            return Err(Error::shape("dense", bt.shape(), &[m]));
        }
    }
    let mut out = Tensor::<T>::zeros(vec![b, m]);
    let idata = input.data();
    let wdata = weights.data();
    let odata = out.data_mut();
    for r in 0..b {
        let orow = &mut odata[r * m..(r + 1) * m];
        for i in 0..n {
            let v = idata[r * n + i];
            let wrow = &wdata[i * m..(i + 1) * m];
            for (o, &w) in orow.iter_mut().zip(wrow) {
                *o = *o + v * w;
            }
        }
        if let Some(bt) = bias {
            for (o, &bv) in orow.iter_mut().zip(bt.data()) {
                *o = *o + bv;
            }
        }
    }
    out.debug_check_finite("dense");
    Ok(out)
}

/// Adjoint of [`dense`].
pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    has_bias: bool,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let (b, n) = (input.dim(0), input.dim(1));
    let m = weights.dim(1);
    if upstream.shape() != [b, m] {
        return Err(Error::shape("dense_backward", upstream.shape(), &[b, m]));
    }
    let mut d_input = Tensor::<T>::zeros(vec![b, n]);
    let mut d_weights = Tensor::<T>::zeros(vec![n, m]);
    let mut d_bias = has_bias.then(|| Tensor::<T>::zeros(vec![m]));

    let idata = input.data();
    let wdata = weights.data();
    let gdata = upstream.data();
    let di = d_input.data_mut();
    let dw = d_weights.data_mut();
    for r in 0..b {
        let grow = &gdata[r * m..(r + 1) * m];
        for i in 0..n {
            let wrow = &wdata[i * m..(i + 1) * m];
            let dwrow = &mut dw[i * m..(i + 1) * m];
            let v = idata[r * n + i];
            let mut acc = T::zero();
            for co in 0..m {
                let g = grow[co];
                acc = acc + wrow[co] * g;
                dwrow[co] = dwrow[co] + v * g;
            }
            di[r * n + i] = acc;
        }
        if let Some(db) = d_bias.as_mut() {
            for (d, &g) in db.data_mut().iter_mut().zip(grow) {
                *d = *d + g;
            }
        }
    }
    Ok((d_input, d_weights, d_bias))
}

/// Collapse a rank-4 activation to rank-2 `b × (h·w·c)`.
pub fn flatten<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    if input.rank() == 2 {
        return Ok(input.clone());
    }
    if input.rank() != 4 {
        return Err(Error::op(
            "flatten",
            format!("input must be rank 2 or 4, got {:?}", input.shape()),
        ));
    }
    let b = input.dim(0);
    let rest = input.dim(1) * input.dim(2) * input.dim(3);
    input.clone().reshape(vec![b, rest])
}

pub fn flatten_backward<T: Scalar>(input_shape: &[usize], upstream: &Tensor<T>) -> Result<Tensor<T>> {
    upstream.clone().reshape(input_shape.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights_zero_bias_is_identity() {
        let input = Tensor::new(vec![2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut w = Tensor::<f32>::zeros(vec![3, 3]);
        for i in 0..3 {
            w.set2(i, i, 1.0);
        }
        let bias = Tensor::<f32>::zeros(vec![3]);
        let out = dense(&input, &w, Some(&bias)).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn zero_weights_bias_only() {
        let input = Tensor::new(vec![1, 2], vec![5.0f32, -7.0]).unwrap();
        let w = Tensor::<f32>::zeros(vec![2, 4]);
        let bias = Tensor::new(vec![4], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let out = dense(&input, &w, Some(&bias)).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn identity_weights_pass_upstream_to_input_grad() {
        let input = Tensor::new(vec![1, 2], vec![1.0f32, 2.0]).unwrap();
        let mut w = Tensor::<f32>::zeros(vec![2, 2]);
        w.set2(0, 0, 1.0);
        w.set2(1, 1, 1.0);
        let g = Tensor::new(vec![1, 2], vec![0.3f32, -0.7]).unwrap();
        let (di, _, _) = dense_backward(&input, &w, true, &g).unwrap();
        assert_eq!(di.data(), g.data());
    }

    #[test]
    fn flatten_round_trip() {
        let input = Tensor::new(vec![2, 2, 1, 3], (0..12).map(|i| i as f32).collect()).unwrap();
        let flat = flatten(&input).unwrap();
        assert_eq!(flat.shape(), &[2, 6]);
        let back = flatten_backward(&[2, 2, 1, 3], &flat).unwrap();
        assert_eq!(back.data(), input.data());
    }
}
