//! Mask fusion of the scene PDF (7 topologies) with the ego-motion PDF
//! (3 motions).
//!
//! The ego-motion PDF is turned into a binary mask over topologies:
//! when its top-1 probability exceeds the threshold, topologies consistent
//! with the top-1 motion survive; otherwise the mask is keyed on the worst-1
//! motion. The fused output is the elementwise product with the scene PDF,
//! renormalized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{ClassPdf, ConsistencyMatrix, LabelSpace, NUM_TOPOLOGIES};

pub const DEFAULT_TOP1_THRESHOLD: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Keep topologies consistent with the worst-1 motion.
    #[default]
    Verbatim,
    /// Drop only topologies whose sole afforded motion is the worst-1 motion.
    ExcludeWorst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackPolicy {
    #[default]
    TnetPassthrough,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub consistency: ConsistencyMatrix,
    pub top1_threshold: f64,
    pub mask_mode: MaskMode,
    pub fallback_policy: FallbackPolicy,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            consistency: ConsistencyMatrix::default(),
            top1_threshold: DEFAULT_TOP1_THRESHOLD,
            mask_mode: MaskMode::Verbatim,
            fallback_policy: FallbackPolicy::TnetPassthrough,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top1_threshold > 0.0 && self.top1_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "top1_threshold must lie in (0, 1], got {}",
                self.top1_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskVector(pub [bool; NUM_TOPOLOGIES]);

impl MaskVector {
    pub fn get(&self, topology: usize) -> bool {
        self.0[topology - 1]
    }

    pub fn as_array(&self) -> &[bool; NUM_TOPOLOGIES] {
        &self.0
    }
}

fn expect_space(pdf: &ClassPdf, space: LabelSpace) -> Result<()> {
    if pdf.space() != space {
        return Err(Error::InvalidPdf(format!(
            "expected a {:?} distribution, got {:?}",
            space,
            pdf.space()
        )));
    }
    Ok(())
}

pub fn build_mask(f_out: &ClassPdf, cfg: &FusionConfig) -> Result<MaskVector> {
    expect_space(f_out, LabelSpace::Egomotion3)?;
    cfg.validate()?;
    let cm = &cfg.consistency;
    let top = f_out.top1();
    if f_out.max_value() > cfg.top1_threshold {
        return Ok(MaskVector(*cm.row(top)));
    }
    let worst = f_out.worst1();
    let mask = match cfg.mask_mode {
        MaskMode::Verbatim => *cm.row(worst),
        MaskMode::ExcludeWorst => {
            let mut w = [true; NUM_TOPOLOGIES];
            for (c, slot) in w.iter_mut().enumerate() {
                let only_worst =
                    (1..=3).all(|m| cm.get(m, c + 1) == (m == worst));
                *slot = !only_worst;
            }
            w
        }
    };
    Ok(MaskVector(mask))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FusionOutput {
    pub pdf: ClassPdf,
    pub mask: MaskVector,
    /// Set when the masked product vanished and the scene PDF was passed through.
    pub fallback: bool,
}

/// Apply a mask to a scene PDF. Returns the renormalized product, or the
/// scene PDF unchanged with `fallback = true` if the product is all zero.
pub fn apply_mask(t_out: &ClassPdf, mask: MaskVector) -> Result<FusionOutput> {
    expect_space(t_out, LabelSpace::Topology7)?;
    let product: Vec<f64> = t_out
        .values()
        .iter()
        .zip(mask.0)
        .map(|(&t, w)| if w { t } else { 0.0 })
        .collect();
    if product.iter().all(|&v| v == 0.0) {
        return Ok(FusionOutput {
            pdf: t_out.clone(),
            mask,
            fallback: true,
        });
    }
    Ok(FusionOutput {
        pdf: ClassPdf::new(&product, LabelSpace::Topology7)?,
        mask,
        fallback: false,
    })
}

pub fn fuse(t_out: &ClassPdf, f_out: &ClassPdf, cfg: &FusionConfig) -> Result<FusionOutput> {
    expect_space(t_out, LabelSpace::Topology7)?;
    let mask = build_mask(f_out, cfg)?;
    apply_mask(t_out, mask)
}

/// Input line of batch fusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionInput {
    pub sample_id: String,
    pub t_out: Vec<f64>,
    pub f_out: Vec<f64>,
}

/// Output line of batch fusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionRecord {
    pub sample_id: String,
    pub i_out: Vec<f64>,
    pub mask: Vec<bool>,
    pub fallback_flag: bool,
}

pub fn fuse_record(input: &FusionInput, cfg: &FusionConfig) -> Result<FusionRecord> {
    let t = ClassPdf::from_normalized(&input.t_out, LabelSpace::Topology7)?;
    let f = ClassPdf::from_normalized(&input.f_out, LabelSpace::Egomotion3)?;
    let out = fuse(&t, &f, cfg)?;
    Ok(FusionRecord {
        sample_id: input.sample_id.clone(),
        i_out: out.pdf.values().to_vec(),
        mask: out.mask.0.to_vec(),
        fallback_flag: out.fallback,
    })
}

/// Fuse a batch in parallel; output order follows input order.
pub fn fuse_batch(inputs: &[FusionInput], cfg: &FusionConfig) -> Result<Vec<FusionRecord>> {
    use rayon::prelude::*;
    inputs.par_iter().map(|i| fuse_record(i, cfg)).collect()
}
