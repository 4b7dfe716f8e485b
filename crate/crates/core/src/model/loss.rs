use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::model::config::DistillConfig;
use crate::model::layers::softmax_rows;
use crate::model::vit::argmax_rows;

/// Mean cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (b, c) = logits.dim();
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for {b} logit rows", labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::InvalidParam(format!("label {y} with {c} classes")));
    }
    if b == 0 {
        return Ok((0.0, Array2::zeros((0, c))));
    }
    let p = softmax_rows(logits);
    let mut loss = 0.0;
    let mut grad = p.clone();
    for (i, &y) in labels.iter().enumerate() {
        loss -= p[[i, y]].max(1e-300).ln();
        grad[[i, y]] -= 1.0;
    }
    grad /= b as f64;
    Ok((loss / b as f64, grad))
}

#[derive(Clone, Debug)]
pub struct DistillLoss {
    pub loss: f64,
    /// Gradient for the logits scored against the labels.
    pub d_label: Array2<f64>,
    /// Gradient for the logits scored against the teacher's hard labels.
    pub d_teacher: Array2<f64>,
}

/// `(1 − λ)·CE(label_logits, labels) + λ·CE(teacher_logits_student, argmax teacher)`.
///
/// With a single head pass the same logits twice and add the two gradients.
pub fn distill_loss(
    label_logits: &ArrayView2<f64>,
    teacher_side_logits: &ArrayView2<f64>,
    teacher_logits: &ArrayView2<f64>,
    labels: &[usize],
    cfg: DistillConfig,
) -> Result<DistillLoss> {
    if teacher_logits.dim() != teacher_side_logits.dim() || label_logits.dim() != teacher_side_logits.dim() {
        return Err(Error::Shape(format!(
            "student {:?} / {:?} vs teacher {:?}",
            label_logits.dim(),
            teacher_side_logits.dim(),
            teacher_logits.dim()
        )));
    }
    let hard = argmax_rows(&teacher_logits.to_owned());
    let (l1, g1) = cross_entropy(label_logits, labels)?;
    let (l2, g2) = cross_entropy(teacher_side_logits, &hard)?;
    let lam = cfg.lambda;
    Ok(DistillLoss {
        loss: (1.0 - lam) * l1 + lam * l2,
        d_label: g1 * (1.0 - lam),
        d_teacher: g2 * lam,
    })
}

/// Top-1 and top-5 accuracy of `logits` against `labels`.
pub fn topk_accuracy(logits: &Array2<f64>, labels: &[usize]) -> (f64, f64) {
    if labels.is_empty() {
        return (0.0, 0.0);
    }
    let (mut t1, mut t5) = (0usize, 0usize);
    for (row, &y) in logits.axis_iter(Axis(0)).zip(labels) {
        let above = row.iter().filter(|&&v| v > row[y]).count();
        t1 += usize::from(above == 0);
        t5 += usize::from(above < 5);
    }
    let n = labels.len() as f64;
    (t1 as f64 / n, t5 as f64 / n)
}
