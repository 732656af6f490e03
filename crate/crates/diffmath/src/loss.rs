use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::DiffError;

const UNIT_TOL: f64 = 1e-6;

pub fn loss_mse(pred: &Tensor, target: &Tensor) -> Result<f64, DiffError> {
    if pred.shape() != target.shape() {
        return Err(DiffError::Shape(format!("mse: {:?} vs {:?}", pred.shape(), target.shape())));
    }
    let sum: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / pred.len() as f64)
}

/// Symmetric InfoNCE over the `B x B` cosine matrix; matched pairs share a row index.
pub fn loss_contrastive(image_embeds: &Tensor, text_embeds: &Tensor, temperature: f64) -> Result<f64, DiffError> {
    check_contrastive(image_embeds, text_embeds, temperature)?;
    for (name, t) in [("image", image_embeds), ("text", text_embeds)] {
        for r in 0..t.rows() {
            let norm = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_TOL {
                return Err(DiffError::Precondition(format!("{name} row {r} has norm {norm}")));
            }
        }
    }
    let mut tape = Tape::new();
    let a = tape.leaf(image_embeds.clone());
    let b = tape.leaf(text_embeds.clone());
    let loss = contrastive_on_tape(&mut tape, a, b, temperature)?;
    Ok(tape.value(loss).data()[0])
}

fn check_contrastive(a: &Tensor, b: &Tensor, temperature: f64) -> Result<(), DiffError> {
    if a.shape().len() != 2 || a.shape() != b.shape() {
        return Err(DiffError::Shape(format!("contrastive: {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.rows() < 2 {
        return Err(DiffError::Precondition("contrastive loss needs a batch of at least 2".into()));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(DiffError::Precondition(format!("temperature must be positive, got {temperature}")));
    }
    Ok(())
}

/// Differentiable form of [`loss_contrastive`]; callers are responsible for unit rows.
pub fn contrastive_on_tape(tape: &mut Tape, image: Var, text: Var, temperature: f64) -> Result<Var, DiffError> {
    check_contrastive(tape.value(image), tape.value(text), temperature)?;
    let b = tape.value(image).rows();
    let diag: Vec<usize> = (0..b).collect();
    let sims = tape.matmul_bt(image, text)?;
    let logits = tape.scale(sims, 1.0 / temperature);
    let forward = tape.softmax_cross_entropy(logits, &diag)?;
    let logits_t = tape.transpose(logits);
    let backward = tape.softmax_cross_entropy(logits_t, &diag)?;
    let both = tape.add(forward, backward)?;
    Ok(tape.scale(both, 0.5))
}

/// Numerically stable softmax of `values / temperature`.
pub fn softmax(values: &[f64], temperature: f64) -> Result<Vec<f64>, DiffError> {
    if values.is_empty() {
        return Err(DiffError::Precondition("softmax of an empty vector".into()));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(DiffError::Precondition(format!("temperature must be positive, got {temperature}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(DiffError::NonFinite("softmax input".into()));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_examples() {
        let v = |d: &[f64]| Tensor::vector(d.to_vec()).unwrap();
        assert_eq!(loss_mse(&v(&[1.0, 2.0]), &v(&[1.0, 2.0])).unwrap(), 0.0);
        assert_eq!(loss_mse(&v(&[1.0, 1.0]), &v(&[0.0, 0.0])).unwrap(), 1.0);
        assert_eq!(loss_mse(&v(&[3.0]), &v(&[1.0])).unwrap(), 4.0);
        assert!(loss_mse(&v(&[3.0]), &v(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&[0.3; 12], 1.0).unwrap();
        assert!(u.iter().all(|p| (p - 1.0 / 12.0).abs() < 1e-15));
        let p = softmax(&[10.0, 0.0, 0.0], 1.0).unwrap();
        assert!(p[0] > p[1] && p[0] > p[2]);
        assert!(softmax(&[], 1.0).is_err());
        assert!(softmax(&[1.0], 0.0).is_err());
        assert!(softmax(&[1.0], -1.0).is_err());
    }

    fn unit_rows(rows: &[Vec<f64>]) -> Tensor {
        let normed: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.iter().map(|v| v / n).collect()
            })
            .collect();
        Tensor::from_rows(&normed).unwrap()
    }

    #[test]
    fn contrastive_vanishes_for_identical_sharp_pairs() {
        let e = unit_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        assert!(loss_contrastive(&e, &e, 1e-3).unwrap() < 1e-12);
        assert!(loss_contrastive(&e, &e, 0.0).is_err());
    }

    #[test]
    fn contrastive_rejects_tiny_batches_and_non_unit_rows() {
        let one = unit_rows(&[vec![1.0, 0.0]]);
        assert!(loss_contrastive(&one, &one, 0.1).is_err());
        let loose = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.1]).unwrap();
        assert!(matches!(loss_contrastive(&loose, &loose, 0.1), Err(DiffError::Precondition(_))));
    }
}
