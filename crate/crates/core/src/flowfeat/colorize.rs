//! Color-wheel encoding of flow fields: hue follows direction, saturation
//! follows magnitude relative to a normalization maximum, zero flow is white.

use std::path::Path;

use image::{Rgb, Rgb32FImage, RgbImage};

use super::flow::FlowField;
use crate::error::{Error, Result};

// Segment lengths of the standard flow color wheel.
const RY: usize = 15;
const YG: usize = 6;
const GC: usize = 4;
const CB: usize = 11;
const BM: usize = 13;
const MR: usize = 6;
pub const WHEEL_SIZE: usize = RY + YG + GC + CB + BM + MR;

fn colorwheel() -> [[f32; 3]; WHEEL_SIZE] {
    let mut wheel = [[0.0f32; 3]; WHEEL_SIZE];
    let ramp = |i: usize, n: usize| (255.0 * i as f32 / n as f32).floor() / 255.0;
    let mut k = 0;
    for i in 0..RY {
        wheel[k] = [1.0, ramp(i, RY), 0.0];
        k += 1;
    }
    for i in 0..YG {
        wheel[k] = [1.0 - ramp(i, YG), 1.0, 0.0];
        k += 1;
    }
    for i in 0..GC {
        wheel[k] = [0.0, 1.0, ramp(i, GC)];
        k += 1;
    }
    for i in 0..CB {
        wheel[k] = [0.0, 1.0 - ramp(i, CB), 1.0];
        k += 1;
    }
    for i in 0..BM {
        wheel[k] = [ramp(i, BM), 0.0, 1.0];
        k += 1;
    }
    for i in 0..MR {
        wheel[k] = [1.0, 0.0, 1.0 - ramp(i, MR)];
        k += 1;
    }
    wheel
}

/// Continuous position of a flow direction on the wheel, in `[0, WHEEL_SIZE)`.
/// Opposite directions are exactly `WHEEL_SIZE / 2` apart.
pub fn wheel_position(u: f32, v: f32) -> f64 {
    let a = (-(v as f64)).atan2(-(u as f64)) / std::f64::consts::PI;
    let fk = (a + 1.0) / 2.0 * WHEEL_SIZE as f64;
    fk.rem_euclid(WHEEL_SIZE as f64)
}

/// RGB flow image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowImage {
    pub rgb: Rgb32FImage,
}

impl FlowImage {
    pub fn dimensions(&self) -> (u32, u32) {
        self.rgb.dimensions()
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.rgb.width(), self.rgb.height(), |x, y| {
            let p = self.rgb.get_pixel(x, y);
            Rgb([0, 1, 2].map(|c| (p[c].clamp(0.0, 1.0) * 255.0).round() as u8))
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.to_rgb8().save(path)?;
        Ok(())
    }

    /// Aspect-distorting bilinear resize.
    pub fn resized(&self, width: u32, height: u32) -> FlowImage {
        if self.dimensions() == (width, height) {
            return self.clone();
        }
        FlowImage {
            rgb: image::imageops::resize(&self.rgb, width, height, image::imageops::FilterType::Triangle),
        }
    }
}

/// Encode with per-image maximum normalization.
pub fn colorize_flow(flow: &FlowField) -> FlowImage {
    colorize_flow_with_max(flow, flow.max_magnitude())
}

/// Encode with an explicit normalization maximum (shared across fields).
pub fn colorize_flow_with_max(flow: &FlowField, max_magnitude: f32) -> FlowImage {
    let wheel = colorwheel();
    let (h, w) = flow.dim();
    let norm = if max_magnitude > 0.0 { max_magnitude } else { 1.0 };
    let rgb = Rgb32FImage::from_fn(w as u32, h as u32, |x, y| {
        let (u, v) = (flow.u[[y as usize, x as usize]], flow.v[[y as usize, x as usize]]);
        let rad = (u * u + v * v).sqrt() / norm;
        if rad == 0.0 {
            return Rgb([1.0, 1.0, 1.0]);
        }
        let fk = wheel_position(u, v);
        let k0 = fk.floor() as usize % WHEEL_SIZE;
        let k1 = (k0 + 1) % WHEEL_SIZE;
        let f = (fk - fk.floor()) as f32;
        Rgb([0, 1, 2].map(|c| {
            let col = (1.0 - f) * wheel[k0][c] + f * wheel[k1][c];
            if rad <= 1.0 {
                1.0 - rad * (1.0 - col)
            } else {
                col * 0.75
            }
        }))
    });
    FlowImage { rgb }
}

/// HSV hue in degrees and saturation of an RGB triple.
pub fn hue_saturation(p: [f32; 3]) -> (f32, f32) {
    let max = p[0].max(p[1]).max(p[2]);
    let min = p[0].min(p[1]).min(p[2]);
    let delta = max - min;
    let sat = if max > 0.0 { delta / max } else { 0.0 };
    if delta == 0.0 {
        return (0.0, sat);
    }
    let hue = if max == p[0] {
        60.0 * ((p[1] - p[2]) / delta).rem_euclid(6.0)
    } else if max == p[1] {
        60.0 * ((p[2] - p[0]) / delta + 2.0)
    } else {
        60.0 * ((p[0] - p[1]) / delta + 4.0)
    };
    (hue, sat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn field(f: impl Fn(usize, usize) -> (f32, f32)) -> FlowField {
        let u = Array2::from_shape_fn((12, 16), |(y, x)| f(y, x).0);
        let v = Array2::from_shape_fn((12, 16), |(y, x)| f(y, x).1);
        FlowField { u, v }
    }

    fn swirl(y: usize, x: usize) -> (f32, f32) {
        let (fy, fx) = (y as f32 - 5.5, x as f32 - 7.5);
        (fx * 0.3 - fy * 0.2, fy * 0.25 + fx * 0.1)
    }

    #[test]
    fn zero_field_is_uniform_white() {
        let img = colorize_flow(&FlowField::zeros(8, 8));
        assert!(img.rgb.pixels().all(|p| p.0 == [1.0, 1.0, 1.0]));
    }

    #[test]
    fn doubling_keeps_hue_and_raises_saturation() {
        let base = field(swirl);
        let doubled = field(|y, x| {
            let (u, v) = swirl(y, x);
            (2.0 * u, 2.0 * v)
        });
        let max = doubled.max_magnitude();
        let a = colorize_flow_with_max(&base, max);
        let b = colorize_flow_with_max(&doubled, max);
        for (pa, pb) in a.rgb.pixels().zip(b.rgb.pixels()) {
            let (ha, sa) = hue_saturation(pa.0);
            let (hb, sb) = hue_saturation(pb.0);
            if sa == 0.0 {
                continue;
            }
            let dh = (ha - hb).abs().min(360.0 - (ha - hb).abs());
            assert!(dh < 1e-2, "hue {ha} vs {hb}");
            assert!(sb > sa);
        }
    }

    #[test]
    fn opposite_directions_are_half_a_wheel_apart() {
        for (u, v) in [(1.0f32, 0.0f32), (0.3, -2.0), (-1.5, 0.7), (0.0, 1.0)] {
            let d = (wheel_position(u, v) - wheel_position(-u, -v)).abs();
            assert!((d - WHEEL_SIZE as f64 / 2.0).abs() < 1e-9);
        }
        let base = field(swirl);
        let rotated = field(|y, x| {
            let (u, v) = swirl(y, x);
            (-u, -v)
        });
        let a = colorize_flow(&base);
        let b = colorize_flow(&rotated);
        assert_ne!(a, b);
    }

    #[test]
    fn channels_stay_in_range() {
        let img = colorize_flow(&field(swirl));
        assert!(img.rgb.pixels().all(|p| p.0.iter().all(|&c| (0.0..=1.0).contains(&c))));
    }
}
