use ndarray::{ArrayD, Zip};

use crate::param::Parameters;

/// Cosine decay from `lr0` to zero over `total` steps, no warm-up.
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = (step.min(total)) as f64 / total as f64;
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adam over all parameters of a model, in visiting order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    moments: Vec<(ArrayD<f64>, ArrayD<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut impl Parameters) {
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = self.lr;
        let moments = &mut self.moments;
        let mut i = 0;
        model.visit_params_mut("", &mut |_, p| {
            if moments.len() <= i {
                moments.push((ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim())));
            }
            let (m, v) = &mut moments[i];
            Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
            i += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{Param, Parameters};

    struct Quad(Param);

    impl Parameters for Quad {
        fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
            f(prefix.to_string(), &self.0);
        }
        fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
            f(prefix.to_string(), &mut self.0);
        }
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(5e-4, 0, 10), 5e-4);
        assert!(cosine_lr(5e-4, 10, 10).abs() < 1e-20);
        assert!((cosine_lr(5e-4, 5, 10) - 2.5e-4).abs() < 1e-18);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut q = Quad(Param::from_vec(&[2], vec![1.0, -1.0]));
        q.0.grad = ArrayD::from_shape_vec(vec![2], vec![3.0, -0.5]).unwrap();
        let mut opt = Adam::new(0.1);
        opt.step(&mut q);
        assert!((q.0.value[[0]] - 0.9).abs() < 1e-6);
        assert!((q.0.value[[1]] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut q = Quad(Param::from_vec(&[1], vec![3.0]));
        let mut opt = Adam::new(0.05);
        for _ in 0..500 {
            let w = q.0.value[[0]];
            q.0.grad[[0]] = 2.0 * (w - 1.0);
            opt.step(&mut q);
        }
        assert!((q.0.value[[0]] - 1.0).abs() < 1e-2);
    }
}
