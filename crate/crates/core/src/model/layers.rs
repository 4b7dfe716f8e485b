//! Full-precision building blocks with hand-written backward passes.

use ndarray::{Array1, Array2, ArrayView2, Axis, Ix1, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::param::{join, Param, Parameters};

const LN_EPS: f64 = 1e-5;

pub(crate) fn normal_vec(rng: &mut impl Rng, len: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("normal");
    (0..len).map(|_| normal.sample(rng)).collect()
}

fn vec1(p: &Param) -> ndarray::ArrayView1<'_, f64> {
    p.value.view().into_dimensionality::<Ix1>().expect("1-d param")
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: Param,
    pub shift: Param,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: Param::from_vec(&[dim], vec![1.0; dim]),
            shift: Param::zeros(&[dim]),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mean = x.sum_axis(Axis(1)) / d;
        let mut xhat = x - &mean.view().insert_axis(Axis(1));
        let var = xhat.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
        xhat *= &inv_std.view().insert_axis(Axis(1));
        let y = &xhat * &vec1(&self.gain) + &vec1(&self.shift);
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache, dy: &Array2<f64>) -> Array2<f64> {
        let d_gain = (dy * &cache.xhat).sum_axis(Axis(0));
        let d_shift = dy.sum_axis(Axis(0));
        self.gain.grad.scaled_add(1.0, &d_gain.into_dyn());
        self.shift.grad.scaled_add(1.0, &d_shift.into_dyn());
        let dxhat = dy * &vec1(&self.gain);
        let d = dy.ncols() as f64;
        let mean_dxhat = dxhat.sum_axis(Axis(1)) / d;
        let mean_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / d;
        let mut dx = dxhat - &mean_dxhat.insert_axis(Axis(1));
        dx -= &(&cache.xhat * &mean_dxhat_xhat.insert_axis(Axis(1)));
        dx *= &cache.inv_std.view().insert_axis(Axis(1));
        dx
    }
}

impl Parameters for LayerNorm {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(join(prefix, "gain"), &self.gain);
        f(join(prefix, "shift"), &self.shift);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "gain"), &mut self.gain);
        f(join(prefix, "shift"), &mut self.shift);
    }
}

/// Plain `y = x·Wᵀ + b`.
#[derive(Clone, Debug)]
pub struct FpLinear {
    pub weight: Param,
    pub bias: Param,
}

impl FpLinear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        Self {
            weight: Param::from_vec(&[out_dim, in_dim], normal_vec(rng, in_dim * out_dim, std)),
            bias: Param::zeros(&[out_dim]),
        }
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight.mat().t()) + &vec1(&self.bias)
    }

    pub fn backward(&mut self, x: &ArrayView2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        let dw = dy.t().dot(x);
        self.weight.grad_mat_mut().scaled_add(1.0, &dw);
        self.bias.grad.scaled_add(1.0, &dy.sum_axis(Axis(0)).into_dyn());
        dy.dot(&self.weight.mat())
    }
}

impl Parameters for FpLinear {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Row-wise softmax, max-shifted.
pub fn softmax_rows(x: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Backward of [`softmax_rows`] given its output `p`.
pub fn softmax_rows_backward(p: &ArrayView2<f64>, dp: &ArrayView2<f64>) -> Array2<f64> {
    let mut dx = Array2::zeros(p.raw_dim());
    Zip::from(dx.rows_mut())
        .and(p.rows())
        .and(dp.rows())
        .for_each(|mut dx, p, dp| {
            let dot = p.dot(&dp);
            Zip::from(&mut dx).and(&p).and(&dp).for_each(|d, &p, &g| *d = p * (g - dot));
        });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss(y: &Array2<f64>, w: &Array2<f64>) -> f64 {
        (y * w).sum()
    }

    #[test]
    fn layer_norm_input_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ln = LayerNorm::new(5);
        ln.gain.value = Array1::from(normal_vec(&mut rng, 5, 1.0)).into_dyn();
        let x = Array2::from_shape_vec((3, 5), normal_vec(&mut rng, 15, 1.0)).unwrap();
        let w = Array2::from_shape_vec((3, 5), normal_vec(&mut rng, 15, 1.0)).unwrap();
        let (_, cache) = ln.forward(&x);
        let dx = ln.backward(&cache, &w);
        let eps = 1e-6;
        for i in 0..3 {
            for j in 0..5 {
                let mut xp = x.clone();
                xp[[i, j]] += eps;
                let mut xm = x.clone();
                xm[[i, j]] -= eps;
                let fd = (loss(&ln.forward(&xp).0, &w) - loss(&ln.forward(&xm).0, &w)) / (2.0 * eps);
                assert!((fd - dx[[i, j]]).abs() < 1e-6, "{fd} vs {}", dx[[i, j]]);
            }
        }
    }

    #[test]
    fn softmax_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Array2::from_shape_vec((2, 4), normal_vec(&mut rng, 8, 1.0)).unwrap();
        let w = Array2::from_shape_vec((2, 4), normal_vec(&mut rng, 8, 1.0)).unwrap();
        let p = softmax_rows(&x.view());
        let dx = softmax_rows_backward(&p.view(), &w.view());
        let eps = 1e-6;
        for i in 0..2 {
            for j in 0..4 {
                let mut xp = x.clone();
                xp[[i, j]] += eps;
                let mut xm = x.clone();
                xm[[i, j]] -= eps;
                let fd = (loss(&softmax_rows(&xp.view()), &w) - loss(&softmax_rows(&xm.view()), &w))
                    / (2.0 * eps);
                assert!((fd - dx[[i, j]]).abs() < 1e-7);
            }
        }
    }
}
