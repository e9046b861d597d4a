//! Softmax, cross-entropy, and the two-head joint loss.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Probability floor inside the cross-entropy log.
pub const CE_CLAMP: f64 = 1e-12;

/// Row-wise softmax over rank-2 logits, stabilized by max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.rank() != 2 {
        return Err(Error::op(
            "softmax",
            format!("logits must be rank 2, got {:?}", logits.shape()),
        ));
    }
    let (b, k) = (logits.dim(0), logits.dim(1));
    let mut out = Tensor::<T>::zeros(vec![b, k]);
    let ldata = logits.data();
    let odata = out.data_mut();
    for r in 0..b {
        let row = &ldata[r * k..(r + 1) * k];
        let mut max = row[0];
        for &v in &row[1..] {
            if v > max {
                max = v;
            }
        }
        let orow = &mut odata[r * k..(r + 1) * k];
        let mut sum = T::zero();
        for (o, &v) in orow.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            sum = sum + e;
        }
        for o in orow.iter_mut() {
            *o = *o / sum;
        }
    }
    out.debug_check_finite("softmax");
    Ok(out)
}

/// Adjoint of [`softmax`] alone: `d_z = p ⊙ (g − ⟨g, p⟩)` per row.
pub fn softmax_backward<T: Scalar>(probs: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if probs.shape() != upstream.shape() {
        return Err(Error::shape("softmax_backward", probs.shape(), upstream.shape()));
    }
    let (b, k) = (probs.dim(0), probs.dim(1));
    let mut out = Tensor::<T>::zeros(vec![b, k]);
    let p = probs.data();
    let g = upstream.data();
    let o = out.data_mut();
    for r in 0..b {
        let base = r * k;
        let mut dot = T::zero();
        for i in 0..k {
            dot = dot + g[base + i] * p[base + i];
        }
        for i in 0..k {
            o[base + i] = p[base + i] * (g[base + i] - dot);
        }
    }
    Ok(out)
}

fn check_labels(op: &'static str, b: usize, k: usize, labels: &[u32]) -> Result<()> {
    if labels.len() != b {
        return Err(Error::op(op, format!("{} labels for batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::op(op, format!("label {bad} out of range for {k} classes")));
    }
    Ok(())
}

/// Mean over the batch of `−log p[label]`, with `p` clamped below by
/// [`CE_CLAMP`].
pub fn cross_entropy<T: Scalar>(probs: &Tensor<T>, labels: &[u32]) -> Result<T> {
    if probs.rank() != 2 {
        return Err(Error::op("cross_entropy", format!("probs must be rank 2, got {:?}", probs.shape())));
    }
    let (b, k) = (probs.dim(0), probs.dim(1));
    check_labels("cross_entropy", b, k, labels)?;
    let clamp = T::from_f64c(CE_CLAMP);
    let mut total = T::zero();
    for (r, &label) in labels.iter().enumerate() {
        let p = probs.at2(r, label as usize).max(clamp);
        total = total - p.ln();
    }
    Ok(total / T::from_f64c(b as f64))
}

/// Adjoint of [`cross_entropy`] w.r.t. the probabilities:
/// `d_p[r, label] = −1 / (b · p)` (zero in the clamped region).
pub fn cross_entropy_backward<T: Scalar>(probs: &Tensor<T>, labels: &[u32]) -> Result<Tensor<T>> {
    let (b, k) = (probs.dim(0), probs.dim(1));
    check_labels("cross_entropy", b, k, labels)?;
    let clamp = T::from_f64c(CE_CLAMP);
    let inv_b = T::one() / T::from_f64c(b as f64);
    let mut out = Tensor::<T>::zeros(vec![b, k]);
    for (r, &label) in labels.iter().enumerate() {
        let p = probs.at2(r, label as usize);
        if p > clamp {
            out.set2(r, label as usize, -inv_b / p);
        }
    }
    Ok(out)
}

/// Fused softmax + cross-entropy gradient w.r.t. the logits:
/// `(p − one_hot(label)) / b`.
pub fn softmax_cross_entropy_grad<T: Scalar>(probs: &Tensor<T>, labels: &[u32]) -> Result<Tensor<T>> {
    let (b, k) = (probs.dim(0), probs.dim(1));
    check_labels("softmax_cross_entropy_grad", b, k, labels)?;
    let inv_b = T::one() / T::from_f64c(b as f64);
    let mut out = probs.clone();
    for (r, &label) in labels.iter().enumerate() {
        let off = r * k + label as usize;
        out.data_mut()[off] = out.data()[off] - T::one();
    }
    for v in out.data_mut() {
        *v = *v * inv_b;
    }
    Ok(out)
}

/// Two-head weighted loss `w_ee · L_early + L_final`; returns
/// (total, early term, final term).
pub fn joint_loss<T: Scalar>(
    softmax_ee: &Tensor<T>,
    softmax_ef: &Tensor<T>,
    labels: &[u32],
    w_ee: f64,
) -> Result<(T, T, T)> {
    let l_ee = cross_entropy(softmax_ee, labels)?;
    let l_ef = cross_entropy(softmax_ef, labels)?;
    Ok((T::from_f64c(w_ee) * l_ee + l_ef, l_ee, l_ef))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_logits_give_uniform() {
        let logits = Tensor::new(vec![1, 4], vec![2.0f32; 4]).unwrap();
        let p = softmax(&logits).unwrap();
        for &v in p.data() {
            assert!((v - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn ln3_gap_gives_quarter_three_quarters() {
        let logits = Tensor::new(vec![1, 2], vec![0.0f64, 3.0f64.ln()]).unwrap();
        let p = softmax(&logits).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-12);
        assert!((p.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn shift_invariance_preserves_argmax() {
        let logits = Tensor::new(vec![1, 3], vec![0.3f32, 1.7, -0.2]).unwrap();
        let shifted = Tensor::new(vec![1, 3], vec![100.3f32, 101.7, 99.8]).unwrap();
        let a = softmax(&logits).unwrap();
        let b = softmax(&shifted).unwrap();
        let argmax = |t: &Tensor<f32>| {
            t.data()
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
                .unwrap()
                .0
        };
        assert_eq!(argmax(&a), argmax(&b));
    }

    #[test]
    fn rows_sum_to_one() {
        let logits = Tensor::new(vec![2, 3], vec![5.0f32, -3.0, 0.7, 88.0, 87.0, 86.0]).unwrap();
        let p = softmax(&logits).unwrap();
        for r in 0..2 {
            let s: f32 = (0..3).map(|c| p.at2(r, c)).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn perfect_prediction_zero_loss() {
        let p = Tensor::new(vec![1, 3], vec![0.0f32, 1.0, 0.0]).unwrap();
        let l = cross_entropy(&p, &[1]).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn uniform_ten_class_is_ln10() {
        let p = Tensor::new(vec![1, 10], vec![0.1f64; 10]).unwrap();
        let l = cross_entropy(&p, &[4]).unwrap();
        assert!((l - 10.0f64.ln()).abs() < 1e-12);
        assert!((l - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn clamp_prevents_infinite_loss() {
        let p = Tensor::new(vec![1, 2], vec![0.0f32, 1.0]).unwrap();
        let l = cross_entropy(&p, &[0]).unwrap();
        assert!(l.is_finite());
        assert!((l - (-(CE_CLAMP as f32).ln())).abs() / l < 1e-5);
    }

    #[test]
    fn fused_grad_is_probs_minus_one_hot() {
        let logits = Tensor::new(vec![1, 3], vec![0.2f64, -1.0, 0.5]).unwrap();
        let p = softmax(&logits).unwrap();
        let g = softmax_cross_entropy_grad(&p, &[2]).unwrap();
        assert!((g.at2(0, 0) - p.at2(0, 0)).abs() < 1e-12);
        assert!((g.at2(0, 1) - p.at2(0, 1)).abs() < 1e-12);
        assert!((g.at2(0, 2) - (p.at2(0, 2) - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn joint_loss_weights_early_term() {
        let ee = Tensor::new(vec![1, 2], vec![(-2.0f64).exp(), 1.0 - (-2.0f64).exp()]).unwrap();
        let ef = Tensor::new(vec![1, 2], vec![(-1.0f64).exp(), 1.0 - (-1.0f64).exp()]).unwrap();
        // L_ee = 2, L_ef = 1, w = 0.5 -> 2.0
        let (total, l_ee, l_ef) = joint_loss(&ee, &ef, &[0], 0.5).unwrap();
        assert!((l_ee - 2.0).abs() < 1e-12);
        assert!((l_ef - 1.0).abs() < 1e-12);
        assert!((total - 2.0).abs() < 1e-12);
        // w -> 0 limit equals the final term alone.
        let (t0, _, _) = joint_loss(&ee, &ef, &[0], 0.0).unwrap();
        assert!((t0 - l_ef).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range_is_error() {
        let p = Tensor::new(vec![1, 2], vec![0.5f32, 0.5]).unwrap();
        assert!(cross_entropy(&p, &[2]).is_err());
    }
}
