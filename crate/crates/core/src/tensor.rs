use ndarray::{Array3, ArrayView3};

/// Dense `H × N × M` tensor (heads × rows × columns), row-major.
pub type Tensor3 = Array3<f64>;
pub type Tensor3View<'a> = ArrayView3<'a, f64>;
