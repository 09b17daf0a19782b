use crate::error::{Error, Result};
use crate::kernels::softmax;
use crate::tensor::{Element, Tensor};

/// Probabilities are clamped to this floor before taking the log.
pub const PROB_FLOOR: f64 = 1e-7;

fn check<T: Element>(pred: &Tensor<T>, label: usize) -> Result<()> {
    if pred.rank() != 1 {
        return Err(Error::Dimension(format!(
            "cross-entropy expects a flat probability vector, got {:?}",
            pred.shape()
        )));
    }
    if label >= pred.len() {
        return Err(Error::Data(format!(
            "label {label} out of range for {} classes",
            pred.len()
        )));
    }
    let total = pred.sum_f64();
    if !total.is_finite() || (total - 1.0).abs() > 1e-4 {
        return Err(Error::Numeric(format!(
            "cross-entropy input sums to {total}, not a probability vector"
        )));
    }
    Ok(())
}

/// `-ln(max(pred[label], 1e-7))` for a softmax output.
pub fn cross_entropy<T: Element>(pred: &Tensor<T>, label: usize) -> Result<f64> {
    check(pred, label)?;
    Ok(-pred.data()[label].as_f64().max(PROB_FLOOR).ln())
}

/// Gradient of [`cross_entropy`] w.r.t. the probabilities. Zero when the
/// clamp is active.
pub fn cross_entropy_grad<T: Element>(pred: &Tensor<T>, label: usize) -> Result<Tensor<T>> {
    check(pred, label)?;
    let mut g = Tensor::zeros(pred.shape().to_vec());
    let p = pred.data()[label];
    if p.as_f64() >= PROB_FLOOR {
        g.data_mut()[label] = -T::one() / p;
    }
    Ok(g)
}

/// Gradient of softmax followed by cross-entropy w.r.t. the logits:
/// `softmax(logits) - onehot(label)`.
pub fn softmax_cross_entropy_grad<T: Element>(logits: &Tensor<T>, label: usize) -> Result<Tensor<T>> {
    let mut p = softmax(logits);
    check(&p, label)?;
    p.data_mut()[label] -= T::one();
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_values() {
        let half = Tensor::<f32>::vector(vec![0.5, 0.5]);
        assert!((cross_entropy(&half, 0).unwrap() - std::f64::consts::LN_2).abs() < 1e-7);
        let sure = Tensor::<f32>::vector(vec![1.0, 0.0]);
        assert!(cross_entropy(&sure, 0).unwrap().abs() < 1e-12);
        // Confidently wrong: clamped, finite.
        let wrong = cross_entropy(&sure, 1).unwrap();
        assert!((wrong - (-PROB_FLOOR.ln())).abs() < 1e-9);
        assert_eq!(cross_entropy_grad(&sure, 1).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_ce_gradient_at_zero_logits() {
        let g = softmax_cross_entropy_grad(&Tensor::<f32>::vector(vec![0.0, 0.0]), 0).unwrap();
        assert_eq!(g.data(), &[-0.5, 0.5]);
    }

    #[test]
    fn label_out_of_range() {
        let p = Tensor::<f32>::vector(vec![0.5, 0.5]);
        assert!(matches!(cross_entropy(&p, 2), Err(Error::Data(_))));
        assert!(matches!(cross_entropy_grad(&p, 7), Err(Error::Data(_))));
    }

    #[test]
    fn rejects_non_distribution() {
        let p = Tensor::<f32>::vector(vec![0.5, 0.6]);
        assert!(matches!(cross_entropy(&p, 0), Err(Error::Numeric(_))));
    }
}
