//! Nearest-class-mean linear probe.

use ndarray::{Array2, ArrayView2, Axis};

/// Accuracy of the nearest-class-mean classifier fitted on `(x, labels)`
/// and scored on the same rows. Equal-norm-corrected distances make the
/// decision boundaries hyperplanes, so this is a linear probe.
pub fn linear_probe_accuracy(x: &ArrayView2<f64>, labels: &[usize], classes: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let d = x.ncols();
    let mut means = Array2::<f64>::zeros((classes, d));
    let mut counts = vec![0usize; classes];
    for (row, &y) in x.axis_iter(Axis(0)).zip(labels) {
        means.row_mut(y).scaled_add(1.0, &row);
        counts[y] += 1;
    }
    for (mut m, &c) in means.axis_iter_mut(Axis(0)).zip(&counts) {
        if c > 0 {
            m /= c as f64;
        }
    }
    // argmin |x − μ|² = argmax x·μ − |μ|²/2
    let half_norms: Vec<f64> = means.rows().into_iter().map(|m| 0.5 * m.dot(&m)).collect();
    let scores = x.dot(&means.t());
    let mut correct = 0;
    for (row, &y) in scores.axis_iter(Axis(0)).zip(labels) {
        let best = (0..classes)
            .filter(|&c| counts[c] > 0)
            .max_by(|&a, &b| (row[a] - half_norms[a]).total_cmp(&(row[b] - half_norms[b])))
            .unwrap_or(0);
        correct += usize::from(best == y);
    }
    correct as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn separates_two_points() {
        let x = array![[0.0, 1.0], [1.0, 0.0], [0.1, 0.9]];
        assert_eq!(linear_probe_accuracy(&x.view(), &[0, 1, 0], 2), 1.0);
    }

    #[test]
    fn fails_on_xor() {
        let x = array![[1.0, 1.0], [-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]];
        assert!(linear_probe_accuracy(&x.view(), &[0, 0, 1, 1], 2) < 1.0);
    }
}
