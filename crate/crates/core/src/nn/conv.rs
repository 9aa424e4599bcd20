use ndarray::{linalg::general_mat_mul, Array1, Array2, Array3, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;

use super::normal_vec;

/// Square-kernel 2D convolution over CHW tensors, computed as im2col + GEMM.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `out_channels x (in_channels * kernel * kernel)`
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn he_init(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let std = (2.0 / fan_in as f32).sqrt();
        let weight = Array2::from_shape_vec(
            (out_channels, fan_in),
            normal_vec(rng, out_channels * fan_in, std),
        )
        .expect("shape");
        Self {
            weight,
            bias: Array1::zeros(out_channels),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn im2col(&self, x: &Array3<f32>) -> Array2<f32> {
        let (c, h, w) = x.dim();
        let (oh, ow) = self.output_size(h, w);
        let k = self.kernel;
        let (s, p) = (self.stride as isize, self.padding as isize);
        let mut col = Array2::<f32>::zeros((c * k * k, oh * ow));
        let src = x.as_standard_layout();
        let src = src.as_slice().expect("contiguous");
        let dst = col.as_slice_mut().expect("contiguous");
        for ci in 0..c {
            let plane = &src[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let out = &mut dst[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let out_row = &mut out[oy * ow..(oy + 1) * ow];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                *o = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &Array2<f32>, (c, h, w): (usize, usize, usize)) -> Array3<f32> {
        let (oh, ow) = self.output_size(h, w);
        let k = self.kernel;
        let (s, p) = (self.stride as isize, self.padding as isize);
        let mut x = Array3::<f32>::zeros((c, h, w));
        let dst = x.as_slice_mut().expect("contiguous");
        let src = col.as_slice().expect("contiguous");
        for ci in 0..c {
            let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let inp = &src[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = iy as usize * w;
                        for ox in 0..ow {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                plane[base + ix as usize] += inp[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    /// Returns the output and the im2col buffer needed by [`Conv2d::backward`].
    pub fn forward(&self, x: &Array3<f32>) -> (Array3<f32>, Array2<f32>) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (oh, ow) = self.output_size(h, w);
        let col = self.im2col(x);
        let mut y = Array2::<f32>::zeros((self.out_channels, oh * ow));
        general_mat_mul(1.0, &self.weight, &col, 0.0, &mut y);
        y += &self.bias.view().insert_axis(Axis(1));
        let y = y
            .into_shape_with_order((self.out_channels, oh, ow))
            .expect("shape");
        (y, col)
    }

    /// Forward pass without keeping the im2col buffer.
    pub fn infer(&self, x: &Array3<f32>) -> Array3<f32> {
        self.forward(x).0
    }

    /// Accumulate weight/bias gradients into `grads` (when given) and return
    /// the input gradient when `need_dx`.
    pub fn backward(
        &self,
        col: &Array2<f32>,
        dy: &Array3<f32>,
        input_dim: (usize, usize, usize),
        grads: Option<&mut Conv2d>,
        need_dx: bool,
    ) -> Option<Array3<f32>> {
        let (co, oh, ow) = dy.dim();
        let dy2: ArrayView2<f32> = dy.view().into_shape_with_order((co, oh * ow)).expect("shape");
        if let Some(g) = grads {
            general_mat_mul(1.0, &dy2, &col.t(), 1.0, &mut g.weight);
            g.bias += &dy2.sum_axis(Axis(1));
        }
        if !need_dx {
            return None;
        }
        let mut dcol = Array2::<f32>::zeros(col.dim());
        general_mat_mul(1.0, &self.weight.t(), &dy2, 0.0, &mut dcol);
        Some(self.col2im(&dcol, input_dim))
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.dim()),
            bias: Array1::zeros(self.bias.dim()),
            ..self.clone()
        }
    }
}

/// 2x2 max pooling with stride 2 (odd trailing rows/columns are dropped).
pub struct MaxPool2;

impl MaxPool2 {
    /// Returns the pooled tensor and the flat input index of every maximum.
    pub fn forward(x: &Array3<f32>) -> (Array3<f32>, Vec<usize>) {
        let (c, h, w) = x.dim();
        let (oh, ow) = (h / 2, w / 2);
        let src = x.as_standard_layout();
        let src = src.as_slice().expect("contiguous");
        let mut y = Array3::<f32>::zeros((c, oh, ow));
        let mut idx = vec![0usize; c * oh * ow];
        let dst = y.as_slice_mut().expect("contiguous");
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = ci * h * w + 2 * oy * w + 2 * ox;
                    let cands = [base, base + 1, base + w, base + w + 1];
                    let mut best = cands[0];
                    for &i in &cands[1..] {
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    let o = (ci * oh + oy) * ow + ox;
                    dst[o] = src[best];
                    idx[o] = best;
                }
            }
        }
        (y, idx)
    }

    pub fn backward(dy: &Array3<f32>, idx: &[usize], input_dim: (usize, usize, usize)) -> Array3<f32> {
        let mut dx = Array3::<f32>::zeros(input_dim);
        let dst = dx.as_slice_mut().expect("contiguous");
        for (g, &i) in dy.iter().zip(idx) {
            dst[i] += g;
        }
        dx
    }
}
