use ndarray::{linalg::general_mat_mul, Array1, Array2, ArrayView1, Axis};
use rand_chacha::ChaCha8Rng;

use super::normal_vec;

/// Fully connected layer, `y = W x + b` with `W: out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl Dense {
    pub fn he_init(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::with_std(inputs, outputs, (2.0 / inputs as f32).sqrt(), rng)
    }

    pub fn glorot_init(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::with_std(inputs, outputs, (2.0 / (inputs + outputs) as f32).sqrt(), rng)
    }

    fn with_std(inputs: usize, outputs: usize, std: f32, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Array2::from_shape_vec((outputs, inputs), normal_vec(rng, inputs * outputs, std))
                .expect("shape"),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView1<f32>) -> Array1<f32> {
        self.weight.dot(&x) + &self.bias
    }

    /// Accumulate gradients into `grads` (if given) and return `dL/dx`.
    pub fn backward(
        &self,
        x: ArrayView1<f32>,
        dy: ArrayView1<f32>,
        grads: Option<&mut Dense>,
    ) -> Array1<f32> {
        if let Some(g) = grads {
            general_mat_mul(1.0, &dy.insert_axis(Axis(1)), &x.insert_axis(Axis(0)), 1.0, &mut g.weight);
            g.bias += &dy;
        }
        self.weight.t().dot(&dy)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.dim()),
            bias: Array1::zeros(self.bias.dim()),
        }
    }
}
