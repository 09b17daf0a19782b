use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Model outputs for every sample, in order.
pub fn predict_all(model: &Model, samples: &[Sample]) -> Result<Vec<Tensor>> {
    crate::exec::map_ordered(samples, model.execution(), |_, s| model.forward(&s.input))
        .into_iter()
        .collect()
}

/// Fraction of samples whose arg-max class (lowest index on ties) equals
/// the label.
pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let preds = predict_all(model, samples)?;
    let hits = preds.iter().zip(samples).filter(|(p, s)| p.argmax() == s.label).count();
    Ok(hits as f64 / samples.len() as f64)
}

/// `counts[label][predicted]`.
pub fn confusion(model: &Model, samples: &[Sample], classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut counts = vec![vec![0; classes]; classes];
    for (p, s) in predict_all(model, samples)?.iter().zip(samples) {
        let guess = p.argmax();
        if s.label >= classes || guess >= classes {
            return Err(Error::Data(format!(
                "label {} or prediction {guess} outside {classes} classes",
                s.label
            )));
        }
        counts[s.label][guess] += 1;
    }
    Ok(counts)
}
