use crate::error::{Error, Result};
use crate::tensor::Tensor;

const TARGET_TOL: f64 = 1e-6;

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (rows, cols) = logits.shape2()?;
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let row = logits.row(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        out.extend(row.iter().map(|&v| (v - m).exp()));
        let z: f64 = out[start..].iter().sum();
        out[start..].iter_mut().for_each(|v| *v /= z);
    }
    Tensor::new(vec![rows, cols], out)
}

/// Mean cross-entropy against probability-vector targets. Returns the loss
/// and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<(f64, Tensor)> {
    let (rows, cols) = logits.shape2()?;
    if targets.dims() != logits.dims() {
        return Err(Error::shape(format!(
            "targets {:?} do not match logits {:?}",
            targets.dims(),
            logits.dims()
        )));
    }
    if rows == 0 {
        return Err(Error::shape("empty batch"));
    }
    for r in 0..rows {
        let t = targets.row(r);
        let sum: f64 = t.iter().sum();
        if (sum - 1.0).abs() > TARGET_TOL || t.iter().any(|&v| !(v >= -TARGET_TOL)) {
            return Err(Error::InvalidTarget { row: r, sum });
        }
    }
    let n = rows as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let row = logits.row(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        for (&z, &y) in row.iter().zip(targets.row(r)) {
            let log_p = z - lse;
            if y != 0.0 {
                loss -= y * log_p;
            }
            grad.push((log_p.exp() - y) / n);
        }
    }
    Ok((loss / n, Tensor::new(vec![rows, cols], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::rel_err;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_hot(rows: &[usize]) -> Tensor {
        Tensor::from_fn(&[rows.len(), 8], |i| if rows[i / 8] == i % 8 { 1.0 } else { 0.0 })
    }

    #[test]
    fn uniform_logits_cost_ln_8() {
        let (loss, _) = softmax_cross_entropy(&Tensor::zeros(&[2, 8]), &one_hot(&[3, 5])).unwrap();
        assert!((loss - 8f64.ln()).abs() < 1e-12);
        assert!((loss - 2.0794).abs() < 1e-4);
    }

    #[test]
    fn saturated_logit_costs_nothing() {
        let mut logits = Tensor::zeros(&[1, 8]);
        logits.data_mut()[2] = 1000.0;
        let (loss, grad) = softmax_cross_entropy(&logits, &one_hot(&[2])).unwrap();
        assert!(loss < 1e-6);
        assert!(grad.all_finite());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = Tensor::from_fn(&[4, 8], |_| rng.random_range(-3.0..3.0));
        let targets = Tensor::from_fn(&[4, 8], |_| rng.random_range(0.0..1.0));
        let targets = Tensor::from_fn(&[4, 8], |i| {
            let r = i / 8;
            targets.data()[i] / targets.row(r).iter().sum::<f64>()
        });
        let (_, grad) = softmax_cross_entropy(&logits, &targets).unwrap();
        let step = 1e-5;
        for i in 0..logits.len() {
            let mut p = logits.clone();
            p.data_mut()[i] += step;
            let mut m = logits.clone();
            m.data_mut()[i] -= step;
            let numeric = (softmax_cross_entropy(&p, &targets).unwrap().0 - softmax_cross_entropy(&m, &targets).unwrap().0)
                / (2.0 * step);
            let e = rel_err(grad.data()[i], numeric);
            assert!(e < 1e-6, "entry {i}: analytic {} numeric {numeric} rel {e}", grad.data()[i]);
        }
    }

    #[test]
    fn rejects_non_distribution_targets() {
        let mut t = one_hot(&[0, 1]);
        t.data_mut()[9] = 0.9;
        assert!(matches!(
            softmax_cross_entropy(&Tensor::zeros(&[2, 8]), &t),
            Err(Error::InvalidTarget { row: 1, .. })
        ));
    }

    proptest! {
        #[test]
        fn softmax_rows_are_shift_invariant_distributions(
            vals in proptest::collection::vec(-50.0f64..50.0, 8),
            shift in -100.0f64..100.0,
        ) {
            let a = Tensor::new(vec![1, 8], vals.clone()).unwrap();
            let b = a.map(|v| v + shift);
            let pa = softmax(&a).unwrap();
            let pb = softmax(&b).unwrap();
            prop_assert!((pa.data().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(pa.max_abs_diff(&pb) <= 1e-9);
        }
    }
}
