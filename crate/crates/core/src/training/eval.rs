use crate::data::{Domain, DomainSequence};
use crate::error::{Error, Result};
use crate::model::{argmax_rows, Predictor};

/// Fraction of samples whose argmax logit equals the label, at the domain's timestamp.
pub fn accuracy<P: Predictor + ?Sized>(model: &P, domain: &Domain) -> Result<f64> {
    if domain.is_empty() {
        return Err(Error::Invalid("cannot score an empty domain".into()));
    }
    let logits = model.predict_logits(&domain.inputs, domain.timestamp)?;
    let hits = argmax_rows(&logits)
        .iter()
        .zip(&domain.labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / domain.len() as f64)
}

/// Accuracy per requested domain index.
pub fn evaluate<P: Predictor + ?Sized>(model: &P, seq: &DomainSequence, indices: &[usize]) -> Result<Vec<f64>> {
    indices
        .iter()
        .map(|&i| {
            let domain = seq.domains.get(i).ok_or(Error::Index {
                index: i,
                len: seq.len(),
            })?;
            accuracy(model, domain)
        })
        .collect()
}
