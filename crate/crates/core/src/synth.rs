//! Toy datasets in the ingestion layout.
//!
//! Each topology class is drawn as a road pictogram whose branches follow
//! the class's afforded motions (up = straight, left, right). Each input-F
//! sequence is a random texture that drifts horizontally: content moves
//! right for a left turn, left for a right turn, and stays still when
//! driving straight.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{frame_path, write_annotations, AnnotationRow, SampleKind};
use crate::error::{Error, Result};
use crate::labels::{Catalogue, EgoMotion, NUM_TOPOLOGIES};

/// Frame index of the input-F sequence within a synthetic drive.
const F_FIRST_FRAME: u64 = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    /// Input-T images per topology class (7 entries).
    pub t_per_class: Vec<usize>,
    /// Input-F sequences per topology class (7 entries).
    pub f_per_class: Vec<usize>,
    pub image_size: u32,
    pub frame_size: u32,
    pub frames_min: usize,
    pub frames_max: usize,
    /// Horizontal drift of turning sequences, pixels per frame.
    pub drift_px: u32,
    /// Standard deviation of additive Gaussian pixel noise, in [0, 1] units.
    pub noise: f32,
    pub seed: u64,
    pub catalogue: Catalogue,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self::uniform(10, 10, 0)
    }
}

impl SynthSpec {
    pub fn uniform(t: usize, f: usize, seed: u64) -> Self {
        Self {
            t_per_class: vec![t; NUM_TOPOLOGIES],
            f_per_class: vec![f; NUM_TOPOLOGIES],
            image_size: 224,
            frame_size: 64,
            frames_min: 5,
            frames_max: 7,
            drift_px: 3,
            noise: 0.0,
            seed,
            catalogue: Catalogue::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, counts) in [("t_per_class", &self.t_per_class), ("f_per_class", &self.f_per_class)] {
            if counts.len() != NUM_TOPOLOGIES {
                return Err(Error::Config(format!("{name} needs {NUM_TOPOLOGIES} entries")));
            }
            if let Some(c) = counts.iter().position(|&n| n < 1) {
                return Err(Error::Config(format!("{name}: class {} has count < 1", c + 1)));
            }
        }
        if self.frames_min < 2 || self.frames_max < self.frames_min {
            return Err(Error::Config(format!(
                "frames_min/frames_max must satisfy 2 <= min <= max, got {}..{}",
                self.frames_min, self.frames_max
            )));
        }
        if self.image_size < 16 || self.frame_size < 16 {
            return Err(Error::Config("image_size and frame_size must be >= 16".into()));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Config(format!("noise {} must be >= 0", self.noise)));
        }
        self.catalogue.validate()
    }
}

fn seed_for(seed: u64, class: u8, index: usize, stream: u64) -> u64 {
    let mut x = seed ^ ((class as u64) << 48) ^ ((index as u64) << 16) ^ stream;
    // splitmix64 finaliser
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn binomial_blur(img: &Array2<f32>) -> Array2<f32> {
    const K: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let (h, w) = img.dim();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let tmp: Array2<f32> = Array2::from_shape_fn((h, w), |(y, x)| {
        (0..5).map(|k| K[k] * img[[y, clamp(x as isize + k as isize - 2, w)]]).sum::<f32>()
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        (0..5).map(|k| K[k] * tmp[[clamp(y as isize + k as isize - 2, h), x]]).sum::<f32>()
    })
}

fn normalized(mut img: Array2<f32>) -> Array2<f32> {
    let lo = img.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = img.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = (hi - lo).max(1e-6);
    img.mapv_inplace(|v| (v - lo) / span);
    img
}

/// Smooth random texture in `[0.05, 0.95]` with detail at two scales.
pub fn texture(h: usize, w: usize, seed: u64) -> Array2<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Array2::from_shape_fn((h, w), |_| rng.random::<f32>());
    let mut fine = noise.clone();
    for _ in 0..2 {
        fine = binomial_blur(&fine);
    }
    let mut coarse = fine.clone();
    for _ in 0..14 {
        coarse = binomial_blur(&coarse);
    }
    let mix = normalized(fine) * 0.5 + normalized(coarse) * 0.5;
    normalized(mix).mapv(|v| 0.05 + 0.9 * v)
}

fn add_noise(v: f32, noise: Option<&Normal<f32>>, rng: &mut ChaCha8Rng) -> f32 {
    match noise {
        Some(n) => (v + n.sample(rng)).clamp(0.0, 1.0),
        None => v,
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Road pictogram: an approach road from the bottom edge plus one branch per
/// afforded motion. Position, width and colours are jittered by `rng`.
pub fn render_glyph(afforded: &[EgoMotion], size: u32, noise: f32, rng: &mut ChaCha8Rng) -> RgbImage {
    let s = size as f32;
    let cx = s * (0.5 + rng.random_range(-0.06..0.06));
    let cy = s * (0.5 + rng.random_range(-0.06..0.06));
    let half = s * rng.random_range(0.07..0.10);
    let bg = [
        0.25 + rng.random_range(-0.05..0.05),
        0.45 + rng.random_range(-0.05..0.05),
        0.20 + rng.random_range(-0.05..0.05),
    ];
    let road = 0.55 + rng.random_range(-0.08..0.08);
    let up = afforded.contains(&EgoMotion::Straight);
    let left = afforded.contains(&EgoMotion::Left);
    let right = afforded.contains(&EgoMotion::Right);
    let dist = (noise > 0.0).then(|| Normal::new(0.0, noise).expect("finite noise"));

    RgbImage::from_fn(size, size, |x, y| {
        let (x, y) = (x as f32 + 0.5, y as f32 + 0.5);
        let in_vertical = (x - cx).abs() <= half;
        let in_horizontal = (y - cy).abs() <= half;
        let on_road = (in_vertical && y >= cy - half)
            || (up && in_vertical && y < cy)
            || (left && in_horizontal && x < cx)
            || (right && in_horizontal && x > cx);
        let base = if on_road { [road; 3] } else { bg };
        let px = base.map(|v| to_u8(add_noise(v, dist.as_ref(), rng)));
        Rgb(px)
    })
}

/// Horizontal content velocity in pixels per frame for an ego-motion.
pub fn drift_for(motion: EgoMotion, drift_px: u32) -> i64 {
    match motion {
        EgoMotion::Straight => 0,
        EgoMotion::Left => drift_px as i64,
        EgoMotion::Right => -(drift_px as i64),
    }
}

/// `n` grayscale frames of a texture drifting for `motion`.
pub fn render_sequence(
    motion: EgoMotion,
    n: usize,
    size: u32,
    drift_px: u32,
    noise: f32,
    rng: &mut ChaCha8Rng,
) -> Vec<GrayImage> {
    let u = drift_for(motion, drift_px);
    let s = size as usize;
    let travel = (n.saturating_sub(1)) * u.unsigned_abs() as usize;
    let canvas = texture(s, s + travel, rng.random());
    let dist = (noise > 0.0).then(|| Normal::new(0.0, noise).expect("finite noise"));
    // content at canvas column c appears at x = c - offset_k, moving by u per frame
    let base = if u > 0 { travel as i64 } else { 0 };
    (0..n)
        .map(|k| {
            let offset = (base - k as i64 * u) as usize;
            GrayImage::from_fn(size, size, |x, y| {
                let v = canvas[[y as usize, x as usize + offset]];
                Luma([to_u8(add_noise(v, dist.as_ref(), rng))])
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOutput {
    pub root: PathBuf,
    pub annotations: PathBuf,
    pub num_t: usize,
    pub num_f: usize,
}

fn save<P: image::PixelWithColorType>(img: &image::ImageBuffer<P, Vec<P::Subpixel>>, path: &Path) -> Result<()>
where
    [P::Subpixel]: image::EncodableLayout,
{
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path)?;
    Ok(())
}

/// Write images, frame sequences, `annotations.csv` and `synth_spec.json`
/// under `out_dir`. Output bytes depend only on `spec`.
pub fn generate(spec: &SynthSpec, out_dir: &Path) -> Result<SynthOutput> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let d2i = spec.catalogue.d2i;

    let jobs: Vec<(u8, usize)> = (1..=NUM_TOPOLOGIES as u8)
        .flat_map(|c| {
            let n = spec.t_per_class[c as usize - 1].max(spec.f_per_class[c as usize - 1]);
            (0..n).map(move |j| (c, j))
        })
        .collect();

    let rows = jobs
        .par_iter()
        .map(|&(class, j)| -> Result<Vec<AnnotationRow>> {
            let topo = spec.catalogue.class(class).expect("validated catalogue");
            let intersection_id = format!("i{class}_{j:03}");
            let drive_id = format!("synth_{class}_{j:03}");
            let mut rows = Vec::new();
            if j < spec.t_per_class[class as usize - 1] {
                let mut rng = ChaCha8Rng::seed_from_u64(seed_for(spec.seed, class, j, 1));
                let img = render_glyph(&topo.afforded_motions, spec.image_size, spec.noise, &mut rng);
                save(&img, &frame_path(out_dir, &drive_id, 0))?;
                let (lo, hi) = d2i.t_range();
                rows.push(AnnotationRow {
                    kind: SampleKind::T,
                    intersection_id: intersection_id.clone(),
                    topology: class,
                    drive_id: drive_id.clone(),
                    frame_start: 0,
                    frame_end: None,
                    d2i_start: round_cm(rng.random_range(lo..=hi)),
                    d2i_end: None,
                    egomotion: None,
                    lat: None,
                    lon: None,
                });
            }
            if j < spec.f_per_class[class as usize - 1] {
                let mut rng = ChaCha8Rng::seed_from_u64(seed_for(spec.seed, class, j, 2));
                let motions = &topo.afforded_motions;
                let motion = motions[j % motions.len()];
                let n = rng.random_range(spec.frames_min..=spec.frames_max);
                let frames = render_sequence(motion, n, spec.frame_size, spec.drift_px, spec.noise, &mut rng);
                for (k, f) in frames.iter().enumerate() {
                    save(f, &frame_path(out_dir, &drive_id, F_FIRST_FRAME + k as u64))?;
                }
                let (s_lo, _) = d2i.f_start_range();
                let (_, e_hi) = d2i.f_end_range();
                rows.push(AnnotationRow {
                    kind: SampleKind::F,
                    intersection_id,
                    topology: class,
                    drive_id,
                    frame_start: F_FIRST_FRAME,
                    frame_end: Some(F_FIRST_FRAME + n as u64 - 1),
                    d2i_start: round_cm(rng.random_range(s_lo..=0.0)),
                    d2i_end: Some(round_cm(rng.random_range(0.0..=e_hi))),
                    egomotion: Some(motion.name().to_string()),
                    lat: None,
                    lon: None,
                });
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect::<Vec<_>>();

    let annotations = out_dir.join("annotations.csv");
    write_annotations(&annotations, &rows)?;
    let spec_path = out_dir.join("synth_spec.json");
    std::fs::write(&spec_path, serde_json::to_string_pretty(spec)?).map_err(|e| Error::io(&spec_path, e))?;
    Ok(SynthOutput {
        root: out_dir.to_path_buf(),
        annotations,
        num_t: rows.iter().filter(|r| r.kind == SampleKind::T).count(),
        num_f: rows.iter().filter(|r| r.kind == SampleKind::F).count(),
    })
}

/// Keep D2I values short and exactly representable in the CSV.
fn round_cm(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ingest, make_folds, IngestOptions, SplitScheme};
    use sha2::{Digest, Sha256};

    fn tree_digest(root: &Path) -> String {
        fn walk(dir: &Path, out: &mut Vec<PathBuf>) {
            for e in std::fs::read_dir(dir).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    walk(&p, out)
                } else {
                    out.push(p)
                }
            }
        }
        let mut files = Vec::new();
        walk(root, &mut files);
        files.sort();
        let mut h = Sha256::new();
        for f in files {
            h.update(f.strip_prefix(root).unwrap().to_string_lossy().as_bytes());
            h.update(std::fs::read(&f).unwrap());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn small(seed: u64) -> SynthSpec {
        SynthSpec {
            image_size: 48,
            frame_size: 32,
            frames_min: 2,
            frames_max: 4,
            ..SynthSpec::uniform(5, 5, seed)
        }
    }

    #[test]
    fn texture_range_and_determinism() {
        let a = texture(40, 50, 3);
        assert_eq!(a.dim(), (40, 50));
        assert!(a.iter().all(|&v| (0.05 - 1e-6..=0.95 + 1e-6).contains(&v)));
        assert_eq!(a, texture(40, 50, 3));
        assert_ne!(a, texture(40, 50, 4));
    }

    #[test]
    fn sequence_drifts_by_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = render_sequence(EgoMotion::Left, 3, 32, 3, 0.0, &mut rng);
        // left turn: content moves right by 3 px per frame
        for y in 0..32 {
            for x in 3..32 {
                assert_eq!(f[1].get_pixel(x, y), f[0].get_pixel(x - 3, y));
            }
        }
        let f = render_sequence(EgoMotion::Right, 2, 32, 3, 0.0, &mut rng);
        assert_eq!(f[1].get_pixel(0, 0), f[0].get_pixel(3, 0));
        let f = render_sequence(EgoMotion::Straight, 4, 32, 3, 0.0, &mut rng);
        assert!(f.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn glyphs_differ_between_classes() {
        let cat = Catalogue::default();
        let imgs: Vec<RgbImage> = cat
            .topology_classes
            .iter()
            .map(|c| render_glyph(&c.afforded_motions, 64, 0.0, &mut ChaCha8Rng::seed_from_u64(9)))
            .collect();
        for i in 0..imgs.len() {
            for j in i + 1..imgs.len() {
                assert_ne!(imgs[i], imgs[j], "classes {} and {}", i + 1, j + 1);
            }
        }
    }

    #[test]
    fn generate_is_deterministic_and_ingestible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let out = generate(&small(42), a.path()).unwrap();
        generate(&small(42), b.path()).unwrap();
        assert_eq!(tree_digest(a.path()), tree_digest(b.path()));
        assert_eq!((out.num_t, out.num_f), (35, 35));

        let spec = small(42);
        let ds = ingest(a.path(), &out.annotations, &spec.catalogue.d2i, IngestOptions { strict: true }).unwrap();
        assert_eq!(ds.samples_t.len(), 35);
        assert_eq!(ds.samples_f.len(), 35);
        for f in &ds.samples_f {
            let afforded = &spec.catalogue.class(f.topology).unwrap().afforded_motions;
            assert!(afforded.contains(&f.egomotion));
        }
        assert!(make_folds(&ds.intersections, (5, 2, 3), 5, 0, SplitScheme::Resampled).is_ok());

        let c = tempfile::tempdir().unwrap();
        generate(&small(43), c.path()).unwrap();
        assert_ne!(tree_digest(a.path()), tree_digest(c.path()));
    }

    #[test]
    fn ten_per_class_supports_five_folds() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            image_size: 24,
            frame_size: 16,
            frames_min: 2,
            frames_max: 2,
            ..SynthSpec::uniform(10, 10, 5)
        };
        let out = generate(&spec, dir.path()).unwrap();
        let ds = ingest(dir.path(), &out.annotations, &spec.catalogue.d2i, IngestOptions::default()).unwrap();
        let folds = make_folds(&ds.intersections, (5, 2, 3), 5, 1, SplitScheme::Resampled).unwrap();
        for plan in folds {
            assert_eq!((plan.train.len(), plan.val.len(), plan.test.len()), (35, 14, 21));
        }
    }

    #[test]
    fn rejects_zero_counts() {
        let mut spec = small(0);
        spec.t_per_class[2] = 0;
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(generate(&spec, dir.path()), Err(Error::Config(_))));
    }
}
