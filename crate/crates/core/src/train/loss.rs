use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean soft-target cross entropy over the batch and its logit gradient
/// `(softmax - targets) / B`. Accumulation happens in `f64`.
pub fn cross_entropy_smoothed<T: Scalar>(logits: &Tensor<T>, targets: &[T]) -> Result<(f64, Tensor<T>)> {
    let (b, k) = match logits.shape() {
        [b, k] => (*b, *k),
        s => return Err(Error::invalid(format!("logits must be 2-D, got {s:?}"))),
    };
    if targets.len() != b * k {
        return Err(Error::ShapeMismatch {
            left: vec![b, k],
            right: vec![targets.len()],
        });
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    if b == 0 {
        return Ok((0.0, logits.clone()));
    }
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(b * k);
    let mut z = vec![0.0f64; k];
    for (row, tgt) in logits.data().chunks_exact(k).zip(targets.chunks_exact(k)) {
        let mx = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let mut sum = 0.0;
        for (zi, v) in z.iter_mut().zip(row) {
            *zi = (v.as_f64() - mx).exp();
            sum += *zi;
        }
        let lse = sum.ln();
        let mut tsum = 0.0;
        for ((zi, v), t) in z.iter().zip(row).zip(tgt) {
            let t = t.as_f64();
            tsum += t;
            // t * log softmax, skipping exact zeros so saturated logits stay finite.
            if t != 0.0 {
                loss -= t * (v.as_f64() - mx - lse);
            }
            grad.push(T::lit((zi / sum - t) * inv_b));
        }
        if (tsum - 1.0).abs() > 1e-4 {
            return Err(Error::invalid(format!("target row sums to {tsum}, expected 1")));
        }
    }
    Ok((loss * inv_b, Tensor::from_vec(&[b, k], grad)?))
}

/// Index of the largest entry of each row; ties resolve to the lowest index.
pub fn argmax_rows<T: Scalar>(values: &[T], cols: usize) -> Vec<usize> {
    values
        .chunks_exact(cols)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate().skip(1) {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor::<f64>::full(&[2, 10], 0.7);
        let mut targets = vec![0.03; 20];
        targets[3] = 0.73;
        targets[15] = 0.73;
        let (loss, _) = cross_entropy_smoothed(&logits, &targets).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn large_margin_drives_loss_to_zero() {
        let logits = Tensor::<f64>::from_vec(&[1, 3], vec![0.0, 800.0, 0.0]).unwrap();
        let (loss, d) = cross_entropy_smoothed(&logits, &[0.0, 1.0, 0.0]).unwrap();
        assert!(loss.abs() < 1e-300);
        assert!(d.all_finite());
    }

    #[test]
    fn rejects_non_finite_and_bad_targets() {
        let logits = Tensor::<f64>::from_vec(&[1, 2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(cross_entropy_smoothed(&logits, &[1.0, 0.0]), Err(Error::NonFinite(_))));
        let logits = Tensor::<f64>::zeros(&[1, 2]);
        assert!(cross_entropy_smoothed(&logits, &[0.5, 0.2]).is_err());
    }

    #[test]
    fn argmax_ties_pick_first() {
        assert_eq!(argmax_rows(&[1.0, 3.0, 3.0, 0.0, 0.0, 0.0], 3), vec![1, 0]);
    }
}
