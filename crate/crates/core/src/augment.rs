//! Sketch augmentation: identity / dilation / erosion.
//!
//! One of three branches is drawn per sample: keep the sketch (p = 0.5),
//! dilate with a 3x3 kernel (p = 0.25), or erode with a 7x7 kernel
//! (p = 0.25). Sketches are binarized before morphology; edges clamp.

use serde::{Deserialize, Serialize};

use crate::imagery::Sketch;
use crate::rng::SplitMix64;
use crate::{Error, Result};

/// Branch probabilities and kernel sizes.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub p_identity: f64,
    pub p_dilate: f64,
    pub p_erode: f64,
    pub dilate_kernel: usize,
    pub erode_kernel: usize,
    pub binarize_threshold: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            p_identity: 0.5,
            p_dilate: 0.25,
            p_erode: 0.25,
            dilate_kernel: 3,
            erode_kernel: 7,
            binarize_threshold: 0.5,
        }
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        let ps = [self.p_identity, self.p_dilate, self.p_erode];
        if ps.iter().any(|&p| p < 0.0) {
            return Err(Error::Config("negative branch probability".into()));
        }
        if (ps.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("branch probabilities must sum to 1".into()));
        }
        for k in [self.dilate_kernel, self.erode_kernel] {
            check_kernel(k)?;
        }
        Ok(())
    }
}

fn check_kernel(kernel: usize) -> Result<()> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::Config(format!("kernel {kernel} must be odd and >= 1")));
    }
    Ok(())
}

/// Thresholds a sketch to {0, 1}.
pub fn binarize(sketch: &Sketch, threshold: f64) -> Sketch {
    Sketch {
        width: sketch.width,
        height: sketch.height,
        data: sketch
            .data
            .iter()
            .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
            .collect(),
    }
}

fn morph(sketch: &Sketch, kernel: usize, threshold: f64, take_max: bool) -> Result<Sketch> {
    check_kernel(kernel)?;
    let bin = binarize(sketch, threshold);
    let (w, h) = (bin.width, bin.height);
    let r = (kernel / 2) as i64;
    let mut out = vec![0.0f64; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut acc = if take_max { 0.0f64 } else { 1.0f64 };
            for dy in -r..=r {
                let yy = (y + dy).clamp(0, h as i64 - 1) as usize;
                for dx in -r..=r {
                    let xx = (x + dx).clamp(0, w as i64 - 1) as usize;
                    let v = bin.data[yy * w + xx];
                    acc = if take_max { acc.max(v) } else { acc.min(v) };
                }
            }
            out[y as usize * w + x as usize] = acc;
        }
    }
    Ok(Sketch {
        width: w,
        height: h,
        data: out,
    })
}

/// Morphological max over a `kernel`x`kernel` square with edge clamping.
pub fn dilate(sketch: &Sketch, kernel: usize) -> Result<Sketch> {
    morph(sketch, kernel, 0.5, true)
}

/// Morphological min over a `kernel`x`kernel` square with edge clamping.
pub fn erode(sketch: &Sketch, kernel: usize) -> Result<Sketch> {
    morph(sketch, kernel, 0.5, false)
}

/// Which branch [`random_augment`] took.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentBranch {
    Identity,
    Dilate,
    Erode,
}

/// Draws one branch by the shared generator and applies it.
pub fn random_augment(sketch: &Sketch, policy: &AugmentPolicy, seed: u64) -> Result<Sketch> {
    Ok(random_augment_traced(sketch, policy, seed)?.0)
}

pub fn random_augment_traced(
    sketch: &Sketch,
    policy: &AugmentPolicy,
    seed: u64,
) -> Result<(Sketch, AugmentBranch)> {
    policy.validate()?;
    let u = SplitMix64::new(seed).next_f64();
    let bin = |s: &Sketch| binarize(s, policy.binarize_threshold);
    if u < policy.p_identity {
        Ok((bin(sketch), AugmentBranch::Identity))
    } else if u < policy.p_identity + policy.p_dilate {
        let out = morph(sketch, policy.dilate_kernel, policy.binarize_threshold, true)?;
        Ok((out, AugmentBranch::Dilate))
    } else {
        let out = morph(sketch, policy.erode_kernel, policy.binarize_threshold, false)?;
        Ok((out, AugmentBranch::Erode))
    }
}
