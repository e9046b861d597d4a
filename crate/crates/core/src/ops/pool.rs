//! Global average pooling.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Spatial mean per channel: rank-4 `b×h×w×c` in, rank-2 `b×c` out.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    if input.rank() != 4 {
        return Err(Error::op(
            "global_avg_pool",
            format!("input must be rank 4, got {:?}", input.shape()),
        ));
    }
    let (b, h, w, c) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let area = T::from_f64c((h * w) as f64);
    let mut out = Tensor::<T>::zeros(vec![b, c]);
    let idata = input.data();
    let odata = out.data_mut();
    for n in 0..b {
        let orow = &mut odata[n * c..(n + 1) * c];
        for y in 0..h {
            for x in 0..w {
                let ibase = ((n * h + y) * w + x) * c;
                for (o, &v) in orow.iter_mut().zip(&idata[ibase..ibase + c]) {
                    *o = *o + v;
                }
            }
        }
        for o in orow.iter_mut() {
            *o = *o / area;
        }
    }
    out.debug_check_finite("global_avg_pool");
    Ok(out)
}

/// Adjoint of [`global_avg_pool`]: spreads each channel gradient uniformly
/// over the spatial extent.
pub fn global_avg_pool_backward<T: Scalar>(
    input_shape: &[usize],
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (b, h, w, c) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    if upstream.shape() != [b, c] {
        return Err(Error::shape("global_avg_pool_backward", upstream.shape(), &[b, c]));
    }
    let inv_area = T::one() / T::from_f64c((h * w) as f64);
    let mut d_input = Tensor::<T>::zeros(input_shape.to_vec());
    let gdata = upstream.data();
    let ddata = d_input.data_mut();
    for n in 0..b {
        let grow = &gdata[n * c..(n + 1) * c];
        for y in 0..h {
            for x in 0..w {
                let base = ((n * h + y) * w + x) * c;
                for (d, &g) in ddata[base..base + c].iter_mut().zip(grow) {
                    *d = g * inv_area;
                }
            }
        }
    }
    Ok(d_input)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_pools_to_constant() {
        let input = Tensor::new(vec![1, 3, 3, 2], vec![2.5; 18]).unwrap();
        let out = global_avg_pool(&input).unwrap();
        assert_eq!(out.shape(), &[1, 2]);
        assert_eq!(out.data(), &[2.5, 2.5]);
    }

    #[test]
    fn two_by_two_mean() {
        let input = Tensor::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = global_avg_pool(&input).unwrap();
        assert_eq!(out.data(), &[2.5]);
    }

    #[test]
    fn backward_spreads_uniformly() {
        let g = Tensor::new(vec![1, 1], vec![4.0f32]).unwrap();
        let d = global_avg_pool_backward(&[1, 2, 2, 1], &g).unwrap();
        assert_eq!(d.data(), &[1.0, 1.0, 1.0, 1.0]);
    }
}
