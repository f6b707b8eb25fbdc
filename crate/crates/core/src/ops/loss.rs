use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check(logits: &Tensor, labels: &[usize], smoothing: f64) -> Result<(usize, usize)> {
    let [b, k] = *logits.shape() else {
        return Err(Error::dim(
            "cross_entropy",
            logits.shape(),
            &[labels.len(), 0],
        ));
    };
    if b != labels.len() || b == 0 || k == 0 {
        return Err(Error::dim(
            "cross_entropy",
            logits.shape(),
            &[labels.len(), k],
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::input(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::config(format!(
            "label smoothing must be in [0, 1), got {smoothing}"
        )));
    }
    Ok((b, k))
}

/// Row-wise softmax via the max-shifted log-sum-exp.
pub fn softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        out.extend(row.iter().map(|v| (v - m).exp() / z));
    }
    out
}

/// Batch mean of the label-smoothed negative log-likelihood.
pub fn cross_entropy(logits: &Tensor, labels: &[usize], smoothing: f64) -> Result<f64> {
    let (b, k) = check(logits, labels, smoothing)?;
    let mut total = 0.0;
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let mean_logit = row.iter().sum::<f64>() / k as f64;
        total += (1.0 - smoothing) * (lse - row[label]) + smoothing * (lse - mean_logit);
    }
    Ok(total / b as f64)
}

impl Tape {
    /// Scalar loss node of shape `[1]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
        let vl = self.value(logits);
        let loss = cross_entropy(vl, labels, smoothing)?;
        let k = vl.shape()[1];
        let b = labels.len();
        let probs = softmax_rows(vl.data(), k);
        let labels = labels.to_vec();
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            vec![logits],
            Box::new(move |g, _| {
                let scale = g[0] / b as f64;
                let mut gl = probs.clone();
                for (r, &label) in labels.iter().enumerate() {
                    let row = &mut gl[r * k..(r + 1) * k];
                    for (j, v) in row.iter_mut().enumerate() {
                        let target =
                            smoothing / k as f64 + if j == label { 1.0 - smoothing } else { 0.0 };
                        *v = (*v - target) * scale;
                    }
                }
                vec![Some(gl)]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor::full(&[3, 4], 0.7);
        let loss = cross_entropy(&logits, &[0, 2, 3], 0.0).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((loss - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn saturated_logits_give_near_zero() {
        let logits = Tensor::new(&[1, 4], vec![30.0, -30.0, -30.0, -30.0]).unwrap();
        assert!(cross_entropy(&logits, &[0], 0.0).unwrap() < 1e-20);
    }

    #[test]
    fn out_of_range_label_is_input_error() {
        let err = cross_entropy(&Tensor::zeros(&[1, 3]), &[3], 0.0).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }
}
