//! Dense two-frame optical flow.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grayscale frame, intensities in `[0, 1]`, indexed `[row, col]`.
pub type GrayFrame = Array2<f32>;

pub fn load_gray(path: &Path) -> Result<GrayFrame> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)?.to_luma32f();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_vec((h as usize, w as usize), img.into_raw()).expect("luma buffer"))
}

/// Per-pixel displacement `(u, v)` from the first frame to the second,
/// `u` along columns (x) and `v` along rows (y).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub u: Array2<f32>,
    pub v: Array2<f32>,
}

impl FlowField {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            u: Array2::zeros((h, w)),
            v: Array2::zeros((h, w)),
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.u.dim()
    }

    pub fn max_magnitude(&self) -> f32 {
        self.u
            .iter()
            .zip(self.v.iter())
            .map(|(u, v)| (u * u + v * v).sqrt())
            .fold(0.0, f32::max)
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(self.v.iter()).all(|x| x.is_finite())
    }
}

/// Pluggable two-frame dense flow estimator.
pub trait FlowEstimator: Send + Sync {
    fn id(&self) -> String;
    fn estimate(&self, a: &GrayFrame, b: &GrayFrame) -> Result<FlowField>;
}

/// Coarse-to-fine dense Lucas-Kanade: per-pixel Gauss-Newton updates with
/// windowed structure tensors on a binomial image pyramid, followed by a
/// 3x3 median filter at every level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PyramidalLucasKanade {
    pub max_levels: usize,
    /// Pyramid levels stop before either side drops below this.
    pub min_level_size: usize,
    /// Window is `(2r + 1)^2` pixels.
    pub window_radius: usize,
    pub iterations: usize,
    /// Floor on the smaller structure-tensor eigenvalue, per window pixel.
    /// Weaker pixels keep the flow propagated from the coarser level.
    pub min_eigenvalue: f32,
    /// Largest update (pixels, per component) of a single iteration.
    pub max_step: f32,
}

impl Default for PyramidalLucasKanade {
    fn default() -> Self {
        Self {
            max_levels: 4,
            min_level_size: 12,
            window_radius: 4,
            iterations: 10,
            min_eigenvalue: 1e-6,
            max_step: 1.0,
        }
    }
}

pub fn compute_flow(a: &GrayFrame, b: &GrayFrame) -> Result<FlowField> {
    PyramidalLucasKanade::default().estimate(a, b)
}

impl FlowEstimator for PyramidalLucasKanade {
    fn id(&self) -> String {
        format!(
            "pyrlk-v2/levels{}-win{}-it{}",
            self.max_levels,
            2 * self.window_radius + 1,
            self.iterations
        )
    }

    fn estimate(&self, a: &GrayFrame, b: &GrayFrame) -> Result<FlowField> {
        if a.dim() != b.dim() {
            return Err(Error::SizeMismatch {
                a: a.dim(),
                b: b.dim(),
            });
        }
        let (h, w) = a.dim();
        if h < 2 || w < 2 {
            return Ok(FlowField::zeros(h, w));
        }
        let pyr_a = pyramid(a, self.max_levels, self.min_level_size);
        let pyr_b = pyramid(b, self.max_levels, self.min_level_size);
        let mut flow: Option<FlowField> = None;
        for (la, lb) in pyr_a.iter().zip(&pyr_b).rev() {
            let (lh, lw) = la.dim();
            let mut f = match flow {
                None => FlowField::zeros(lh, lw),
                Some(coarse) => upsample_flow(&coarse, lh, lw),
            };
            self.refine(la, lb, &mut f);
            f.u = median3(&f.u);
            f.v = median3(&f.v);
            flow = Some(f);
        }
        let flow = flow.expect("at least one level");
        debug_assert!(flow.is_finite());
        Ok(flow)
    }
}

impl PyramidalLucasKanade {
    /// Classic Lucas-Kanade at every pixel: the whole window is warped by the
    /// centre pixel's flow, so pixels are solved independently.
    fn refine(&self, a: &GrayFrame, b: &GrayFrame, flow: &mut FlowField) {
        let (h, w) = a.dim();
        let (ix, iy) = gradients(a);
        let r = self.window_radius as isize;
        let (xmax, ymax) = ((w - 1) as f32, (h - 1) as f32);
        for y in 0..h {
            for x in 0..w {
                let (mut u, mut v) = (flow.u[[y, x]], flow.v[[y, x]]);
                for _ in 0..self.iterations {
                    let (mut a11, mut a12, mut a22, mut b1, mut b2) = (0.0f32, 0.0, 0.0, 0.0, 0.0);
                    let mut count = 0usize;
                    for wy in (y as isize - r).max(0)..=(y as isize + r).min(h as isize - 1) {
                        for wx in (x as isize - r).max(0)..=(x as isize + r).min(w as isize - 1) {
                            let (sx, sy) = (wx as f32 + u, wy as f32 + v);
                            // samples warped outside the second frame carry no information
                            if !(0.0..=xmax).contains(&sx) || !(0.0..=ymax).contains(&sy) {
                                continue;
                            }
                            let (j0, j1) = (wy as usize, wx as usize);
                            let (gx, gy) = (ix[[j0, j1]], iy[[j0, j1]]);
                            let e = bilinear(b, sx, sy) - a[[j0, j1]];
                            a11 += gx * gx;
                            a12 += gx * gy;
                            a22 += gy * gy;
                            b1 += gx * e;
                            b2 += gy * e;
                            count += 1;
                        }
                    }
                    let half_trace = 0.5 * (a11 + a22);
                    let lambda_min = half_trace - (0.25 * (a11 - a22).powi(2) + a12 * a12).sqrt();
                    if count == 0 || lambda_min <= self.min_eigenvalue * count as f32 {
                        break;
                    }
                    let det = a11 * a22 - a12 * a12;
                    let du = ((-a22 * b1 + a12 * b2) / det).clamp(-self.max_step, self.max_step);
                    let dv = ((a12 * b1 - a11 * b2) / det).clamp(-self.max_step, self.max_step);
                    u += du;
                    v += dv;
                    if du.abs() < 1e-3 && dv.abs() < 1e-3 {
                        break;
                    }
                }
                flow.u[[y, x]] = u;
                flow.v[[y, x]] = v;
            }
        }
    }
}

/// 3x3 median with edge clamping.
fn median3(f: &Array2<f32>) -> Array2<f32> {
    let (h, w) = f.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut win = [0.0f32; 9];
        let mut k = 0;
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                win[k] = f[[clamp_index(y as isize + dy, h), clamp_index(x as isize + dx, w)]];
                k += 1;
            }
        }
        win.sort_by(f32::total_cmp);
        win[4]
    })
}

fn pyramid(img: &GrayFrame, max_levels: usize, min_size: usize) -> Vec<GrayFrame> {
    let mut levels = vec![img.clone()];
    while levels.len() < max_levels.max(1) {
        let last = levels.last().expect("non-empty");
        let (h, w) = last.dim();
        if h / 2 < min_size || w / 2 < min_size {
            break;
        }
        levels.push(downsample(last));
    }
    levels
}

const BINOMIAL: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

fn blur(img: &GrayFrame) -> GrayFrame {
    let (h, w) = img.dim();
    let mut tmp = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            tmp[[y, x]] = (0..5)
                .map(|k| BINOMIAL[k] * img[[y, clamp_index(x as isize + k as isize - 2, w)]])
                .sum();
        }
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = (0..5)
                .map(|k| BINOMIAL[k] * tmp[[clamp_index(y as isize + k as isize - 2, h), x]])
                .sum();
        }
    }
    out
}

fn downsample(img: &GrayFrame) -> GrayFrame {
    let blurred = blur(img);
    let (h, w) = img.dim();
    Array2::from_shape_fn((h / 2, w / 2), |(y, x)| blurred[[2 * y, 2 * x]])
}

fn upsample_flow(coarse: &FlowField, h: usize, w: usize) -> FlowField {
    let sample = |f: &Array2<f32>, y: usize, x: usize| {
        // pixel centers: fine (x + 0.5) maps to coarse (x + 0.5) / 2
        let cx = (x as f32 + 0.5) / 2.0 - 0.5;
        let cy = (y as f32 + 0.5) / 2.0 - 0.5;
        2.0 * bilinear(f, cx, cy)
    };
    FlowField {
        u: Array2::from_shape_fn((h, w), |(y, x)| sample(&coarse.u, y, x)),
        v: Array2::from_shape_fn((h, w), |(y, x)| sample(&coarse.v, y, x)),
    }
}

/// Bilinear sample with edge clamping.
fn bilinear(img: &Array2<f32>, x: f32, y: f32) -> f32 {
    let (h, w) = img.dim();
    let x = x.clamp(0.0, (w - 1) as f32);
    let y = y.clamp(0.0, (h - 1) as f32);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f32;
    let fy = y - y0 as f32;
    let top = img[[y0, x0]] * (1.0 - fx) + img[[y0, x1]] * fx;
    let bottom = img[[y1, x0]] * (1.0 - fx) + img[[y1, x1]] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Central differences, one-sided at the border.
fn gradients(img: &GrayFrame) -> (Array2<f32>, Array2<f32>) {
    let (h, w) = img.dim();
    let ix = Array2::from_shape_fn((h, w), |(y, x)| {
        let (l, r) = (x.saturating_sub(1), (x + 1).min(w - 1));
        (img[[y, r]] - img[[y, l]]) / (r - l).max(1) as f32
    });
    let iy = Array2::from_shape_fn((h, w), |(y, x)| {
        let (t, b) = (y.saturating_sub(1), (y + 1).min(h - 1));
        (img[[b, x]] - img[[t, x]]) / (b - t).max(1) as f32
    });
    (ix, iy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::texture;

    fn median(mut xs: Vec<f32>) -> f32 {
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        xs[xs.len() / 2]
    }

    fn shifted_pair(dx: isize, dy: isize) -> (GrayFrame, GrayFrame) {
        let canvas = texture(96, 96, 17);
        let crop = |ox: isize, oy: isize| {
            Array2::from_shape_fn((64, 64), |(y, x)| {
                canvas[[(y as isize + 16 + oy) as usize, (x as isize + 16 + ox) as usize]]
            })
        };
        // frame b shows the content of frame a moved by (+dx, +dy)
        (crop(0, 0), crop(-dx, -dy))
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let (a, _) = shifted_pair(0, 0);
        let flow = compute_flow(&a, &a).unwrap();
        assert!(flow.u.iter().chain(flow.v.iter()).all(|&x| x == 0.0));
    }

    #[test]
    fn three_pixel_shift_right() {
        let (a, b) = shifted_pair(3, 0);
        let flow = compute_flow(&a, &b).unwrap();
        let mu = median(flow.u.iter().copied().collect());
        let mv = median(flow.v.iter().copied().collect());
        assert!((mu - 3.0).abs() <= 0.5, "median u {mu}");
        assert!(mv.abs() <= 0.5, "median v {mv}");
    }

    #[test]
    fn horizontal_translation_keeps_v_small() {
        let (a, b) = shifted_pair(5, 0);
        let flow = compute_flow(&a, &b).unwrap();
        let mut av: Vec<f32> = flow.v.iter().map(|v| v.abs()).collect();
        av.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q95 = av[(av.len() as f32 * 0.95) as usize];
        let mu = median(flow.u.iter().map(|u| u.abs()).collect());
        assert!(q95 < mu, "q95 |v| {q95} vs median |u| {mu}");
    }

    #[test]
    fn median_endpoint_error_up_to_eight_pixels() {
        for d in 1..=8isize {
            for (dx, dy) in [(d, 0), (-d, 0), (0, d), (d, -d)] {
                let (a, b) = shifted_pair(dx, dy);
                let flow = compute_flow(&a, &b).unwrap();
                let epe: Vec<f32> = flow
                    .u
                    .iter()
                    .zip(flow.v.iter())
                    .map(|(u, v)| ((u - dx as f32).powi(2) + (v - dy as f32).powi(2)).sqrt())
                    .collect();
                let m = median(epe);
                assert!(m <= 0.5, "shift ({dx},{dy}): median EPE {m}");
            }
        }
    }

    #[test]
    fn size_mismatch_is_an_error() {
        let a = Array2::<f32>::zeros((10, 12));
        let b = Array2::<f32>::zeros((12, 10));
        assert!(matches!(compute_flow(&a, &b), Err(Error::SizeMismatch { .. })));
    }
}
