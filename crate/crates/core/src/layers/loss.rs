use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 2 {
        return Err(Error::dim(
            "softmax",
            format!("expected N×K logits, got {:?}", logits.shape()),
        ));
    }
    let k = logits.shape()[1];
    let mut probs = logits.clone();
    for row in probs.data_mut().chunks_exact_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Ok(probs)
}

/// Mean softmax cross-entropy over the batch. Returns the loss and the
/// class probabilities; the gradient with respect to the logits is
/// `(probs − onehot) / N` (see [`softmax_cross_entropy_grad`]).
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let probs = softmax(logits)?;
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::Input(format!("{} labels for {n} rows of logits", labels.len())));
    }
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Input(format!("label {y} out of range for {k} classes")));
        }
        // log-sum-exp form keeps −log p finite when p underflows
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
    }
    Ok((loss / n as f64, probs))
}

pub fn softmax_cross_entropy_grad(probs: &Tensor, labels: &[usize]) -> Tensor {
    let n = probs.shape()[0];
    let k = probs.shape()[1];
    let mut g = probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        g.data_mut()[i * k + y] -= 1.0;
    }
    g.data_mut().iter_mut().for_each(|v| *v /= n as f64);
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits() {
        let (loss, probs) = softmax_cross_entropy(&Tensor::zeros(&[1, 4]), &[2]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((loss - 1.3862944).abs() < 1e-7);
        assert!(probs.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let logits = Tensor::new(&[1, 2], vec![1000.0, 0.0]).unwrap();
        let (loss, probs) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(loss.is_finite() && loss < 1e-12);
        assert!(probs.all_finite());
        let (loss1, _) = softmax_cross_entropy(&logits, &[1]).unwrap();
        assert!((loss1 - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let logits = Tensor::new(&[3, 5], (0..15).map(|_| rng.random_range(-4.0..4.0)).collect()).unwrap();
        let labels = [0, 4, 2];
        let (loss, probs) = softmax_cross_entropy(&logits, &labels).unwrap();
        // direct: −log(exp(z_y) / Σ exp(z_j)), sum ordered from the smallest term
        let mut expected = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let mut terms: Vec<f64> = logits.row(i).iter().map(|v| v.exp()).collect();
            terms.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let z: f64 = terms.iter().sum();
            expected += -(logits.row(i)[y].exp() / z).ln();
            for j in 0..5 {
                let p = logits.row(i)[j].exp() / z;
                assert!((probs.row(i)[j] - p).abs() < 1e-10);
            }
        }
        expected /= 3.0;
        assert!((loss - expected).abs() < 1e-10);
        for i in 0..3 {
            assert!((probs.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn label_out_of_range() {
        assert!(matches!(
            softmax_cross_entropy(&Tensor::zeros(&[1, 3]), &[3]),
            Err(Error::Input(_))
        ));
    }

    proptest::proptest! {
        #[test]
        fn rows_sum_to_one(values in proptest::collection::vec(-700.0f64..700.0, 12)) {
            let t = Tensor::new(&[3, 4], values).unwrap();
            let p = softmax(&t).unwrap();
            for i in 0..3 {
                proptest::prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
