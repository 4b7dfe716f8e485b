use ndarray::{Array2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

/// Labeled images, one channel-major `C × S × S` image per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Array2<f64>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub side: usize,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Array2<f64>, labels: Vec<usize>, channels: usize, side: usize, num_classes: usize) -> Result<Self> {
        if images.nrows() != labels.len() {
            return Err(Error::Dataset(format!("{} images, {} labels", images.nrows(), labels.len())));
        }
        if images.ncols() != channels * side * side {
            return Err(Error::Dataset(format!(
                "rows of {} values for {channels}×{side}×{side} images",
                images.ncols()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Dataset(format!("label {y} with {num_classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            channels,
            side,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            images: self.images.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            channels: self.channels,
            side: self.side,
            num_classes: self.num_classes,
        }
    }
}

/// Random crop after zero padding by `pad` pixels, then a horizontal flip
/// with probability 1/2, applied to each row independently.
pub fn augment(images: &mut Array2<f64>, channels: usize, side: usize, pad: usize, rng: &mut impl Rng) {
    let plane = side * side;
    for mut row in images.axis_iter_mut(Axis(0)) {
        let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let flip = rng.random_bool(0.5);
        let src = row.to_owned();
        for c in 0..channels {
            for y in 0..side {
                for x in 0..side {
                    let sx = if flip { side - 1 - x } else { x } as isize + dx;
                    let sy = y as isize + dy;
                    let inside = (0..side as isize).contains(&sx) && (0..side as isize).contains(&sy);
                    row[c * plane + y * side + x] = if inside {
                        src[c * plane + sy as usize * side + sx as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_pad_augmentation_is_a_flip_or_identity() {
        let img = Array2::from_shape_fn((1, 2 * 3 * 3), |(_, j)| j as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let mut a = img.clone();
            augment(&mut a, 2, 3, 0, &mut rng);
            let flipped = Array2::from_shape_fn((1, 18), |(_, j)| {
                let (c, y, x) = (j / 9, (j % 9) / 3, j % 3);
                img[[0, c * 9 + y * 3 + 2 - x]]
            });
            assert!(a == img || a == flipped);
        }
    }

    #[test]
    fn rejects_out_of_range_labels() {
        assert!(Dataset::new(Array2::zeros((1, 4)), vec![3], 1, 2, 2).is_err());
    }
}
