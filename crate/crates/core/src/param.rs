use ndarray::{ArrayD, ArrayView2, ArrayViewMut2, Ix2, IxDyn};

/// A learnable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        Self::new(ArrayD::from_shape_vec(IxDyn(shape), data).expect("param shape"))
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn get(&self) -> f64 {
        self.value.as_slice().expect("contiguous")[0]
    }

    pub fn set(&mut self, v: f64) {
        self.value.as_slice_mut().expect("contiguous")[0] = v;
    }

    pub fn add_grad(&mut self, g: f64) {
        self.grad.as_slice_mut().expect("contiguous")[0] += g;
    }

    pub fn mat(&self) -> ArrayView2<'_, f64> {
        self.value.view().into_dimensionality::<Ix2>().expect("2-d param")
    }

    pub fn grad_mat_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        self.grad.view_mut().into_dimensionality::<Ix2>().expect("2-d param")
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn clamp_min(&mut self, lo: f64) {
        self.value.mapv_inplace(|v| if v < lo { lo } else { v });
    }
}

/// Named access to the learnable tensors of a layer tree.
pub trait Parameters {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
