use ndarray::{linalg::general_mat_mul, s, Array1, Array2, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;

use super::normal_vec;

/// Single-layer LSTM. Gate blocks are stacked as `[input, forget, cell, output]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    /// `4H x D`
    pub w_x: Array2<f32>,
    /// `4H x H`
    pub w_h: Array2<f32>,
    pub bias: Array1<f32>,
}

pub struct LstmCache {
    x: Array2<f32>,
    /// Post-activation gates per step, `T x 4H`.
    gates: Array2<f32>,
    /// Cell states `c_1..c_T`.
    cells: Array2<f32>,
    /// Hidden states `h_1..h_T`.
    hiddens: Array2<f32>,
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

impl Lstm {
    pub fn init(inputs: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let std_x = (2.0 / (inputs + 4 * hidden) as f32).sqrt();
        let std_h = (1.0 / hidden as f32).sqrt();
        let mut bias = Array1::zeros(4 * hidden);
        bias.slice_mut(s![hidden..2 * hidden]).fill(1.0);
        Self {
            w_x: Array2::from_shape_vec((4 * hidden, inputs), normal_vec(rng, 4 * hidden * inputs, std_x))
                .expect("shape"),
            w_h: Array2::from_shape_vec((4 * hidden, hidden), normal_vec(rng, 4 * hidden * hidden, std_h))
                .expect("shape"),
            bias,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_h.ncols()
    }

    pub fn inputs(&self) -> usize {
        self.w_x.ncols()
    }

    /// Run over `x` (`T x D`, valid steps only) from a zero state.
    /// Returns the final hidden state.
    pub fn forward(&self, x: ArrayView2<f32>) -> (Array1<f32>, LstmCache) {
        let h = self.hidden();
        let steps = x.nrows();
        let mut zx = Array2::<f32>::zeros((steps, 4 * h));
        general_mat_mul(1.0, &x, &self.w_x.t(), 0.0, &mut zx);
        let mut gates = Array2::<f32>::zeros((steps, 4 * h));
        let mut cells = Array2::<f32>::zeros((steps, h));
        let mut hiddens = Array2::<f32>::zeros((steps, h));
        let mut h_prev = Array1::<f32>::zeros(h);
        let mut c_prev = Array1::<f32>::zeros(h);
        for t in 0..steps {
            let z = &zx.row(t) + &self.w_h.dot(&h_prev) + &self.bias;
            let mut gate = gates.row_mut(t);
            for j in 0..h {
                gate[j] = sigmoid(z[j]);
                gate[h + j] = sigmoid(z[h + j]);
                gate[2 * h + j] = z[2 * h + j].tanh();
                gate[3 * h + j] = sigmoid(z[3 * h + j]);
            }
            for j in 0..h {
                let c = gate[h + j] * c_prev[j] + gate[j] * gate[2 * h + j];
                cells[[t, j]] = c;
                hiddens[[t, j]] = gate[3 * h + j] * c.tanh();
            }
            h_prev.assign(&hiddens.row(t));
            c_prev.assign(&cells.row(t));
        }
        (
            h_prev,
            LstmCache {
                x: x.to_owned(),
                gates,
                cells,
                hiddens,
            },
        )
    }

    /// Backpropagate `dh_last` (gradient w.r.t. the final hidden state)
    /// through time and accumulate parameter gradients into `grads`.
    pub fn backward(&self, cache: &LstmCache, dh_last: &Array1<f32>, grads: &mut Lstm) {
        let h = self.hidden();
        let steps = cache.x.nrows();
        let mut dz_all = Array2::<f32>::zeros((steps, 4 * h));
        let mut dh = dh_last.clone();
        let mut dc = Array1::<f32>::zeros(h);
        let zeros = Array1::<f32>::zeros(h);
        for t in (0..steps).rev() {
            let gate = cache.gates.row(t);
            let c_prev = if t > 0 { cache.cells.row(t - 1) } else { zeros.view() };
            let h_prev = if t > 0 { cache.hiddens.row(t - 1) } else { zeros.view() };
            let mut dz = dz_all.row_mut(t);
            for j in 0..h {
                let (i, f, g, o) = (gate[j], gate[h + j], gate[2 * h + j], gate[3 * h + j]);
                let tc = cache.cells[[t, j]].tanh();
                let d_o = dh[j] * tc;
                let dcj = dc[j] + dh[j] * o * (1.0 - tc * tc);
                dz[j] = dcj * g * i * (1.0 - i);
                dz[h + j] = dcj * c_prev[j] * f * (1.0 - f);
                dz[2 * h + j] = dcj * i * (1.0 - g * g);
                dz[3 * h + j] = d_o * o * (1.0 - o);
                dc[j] = dcj * f;
            }
            let dz = dz_all.row(t);
            general_mat_mul(
                1.0,
                &dz.insert_axis(Axis(1)),
                &h_prev.insert_axis(Axis(0)),
                1.0,
                &mut grads.w_h,
            );
            dh = self.w_h.t().dot(&dz);
        }
        grads.bias += &dz_all.sum_axis(Axis(0));
        general_mat_mul(1.0, &dz_all.t(), &cache.x, 1.0, &mut grads.w_x);
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w_x: Array2::zeros(self.w_x.dim()),
            w_h: Array2::zeros(self.w_h.dim()),
            bias: Array1::zeros(self.bias.dim()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn bptt_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lstm = Lstm::init(4, 3, &mut rng);
        let x = Array2::from_shape_vec((5, 4), normal_vec(&mut rng, 20, 1.0)).unwrap();
        let probe = Array1::from_vec(vec![0.7f32, -1.1, 0.4]);
        let loss = |l: &Lstm| -> f64 {
            let (h, _) = l.forward(x.view());
            h.iter().zip(probe.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let (_, cache) = lstm.forward(x.view());
        let mut grads = lstm.zeros_like();
        lstm.backward(&cache, &probe, &mut grads);
        let eps = 1e-2f32;
        let check = |get: &dyn Fn(&mut Lstm) -> &mut f32, analytic: f32| {
            let mut up = lstm.clone();
            *get(&mut up) += eps;
            let mut dn = lstm.clone();
            *get(&mut dn) -= eps;
            let fd = (loss(&up) - loss(&dn)) / (2.0 * eps as f64);
            assert!(
                (fd - analytic as f64).abs() < 2e-3,
                "fd {fd} vs analytic {analytic}"
            );
        };
        for &(r, c) in &[(0usize, 0usize), (4, 2), (7, 3), (11, 1)] {
            check(&|l: &mut Lstm| &mut l.w_x[[r, c]], grads.w_x[[r, c]]);
        }
        for &(r, c) in &[(1usize, 0usize), (5, 2), (10, 1)] {
            check(&|l: &mut Lstm| &mut l.w_h[[r, c]], grads.w_h[[r, c]]);
        }
        for &r in &[0usize, 3, 6, 9] {
            check(&|l: &mut Lstm| &mut l.bias[r], grads.bias[r]);
        }
    }
}
