//! Training losses: style-vector alignment, cross-entropy, soft Dice, and
//! their weighted sum, each with analytic gradients.

use serde::{Deserialize, Serialize};

use crate::imagery::{OneHotMask, ProbMap};
use crate::mask23d::StyleVector;
use crate::sketch2mask::BottleneckEmbedding;
use crate::{Error, Result};

/// Clamp floor applied to predicted probabilities before the log.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub epsilon: f64,
    pub lambda_sv: f64,
    pub lambda_ce: f64,
    pub lambda_dice: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon: 1e-6,
            lambda_sv: 1.0,
            lambda_ce: 1.0,
            lambda_dice: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be > 0".into()));
        }
        if [self.lambda_sv, self.lambda_ce, self.lambda_dice]
            .iter()
            .any(|&l| l < 0.0)
        {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-step loss values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_sv: f64,
    pub l_ce: f64,
    pub l_dice: f64,
    pub l_total: f64,
}

fn check_mask_dims(y: &OneHotMask, yhat: &ProbMap) -> Result<()> {
    if y.width != yhat.width || y.height != yhat.height || y.num_classes != yhat.num_classes {
        return Err(Error::Config(format!(
            "target {}x{}x{} vs prediction {}x{}x{}",
            y.width, y.height, y.num_classes, yhat.width, yhat.height, yhat.num_classes
        )));
    }
    Ok(())
}

/// Squared L2 distance between the style vector and the bottleneck embedding
/// (sum over all L x D entries, no averaging).
pub fn style_vector_loss(w_plus: &StyleVector, w_e: &BottleneckEmbedding) -> Result<f64> {
    if w_plus.rows != w_e.rows || w_plus.dim != w_e.dim {
        return Err(Error::Config(format!(
            "style vector {}x{} vs embedding {}x{}",
            w_plus.rows, w_plus.dim, w_e.rows, w_e.dim
        )));
    }
    Ok(w_plus
        .data
        .iter()
        .zip(&w_e.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// d(style_vector_loss)/d(w_e): 2 (w_e - w_plus).
pub fn style_vector_loss_grad_we(w_plus: &StyleVector, w_e: &BottleneckEmbedding) -> Vec<f64> {
    w_plus
        .data
        .iter()
        .zip(&w_e.data)
        .map(|(a, b)| 2.0 * (b - a))
        .collect()
}

/// Mean over pixels of the negative log probability of the true class;
/// predictions are clamped at [`LOG_CLAMP`] before the log.
pub fn cross_entropy_loss(y: &OneHotMask, yhat: &ProbMap) -> Result<f64> {
    check_mask_dims(y, yhat)?;
    let n = (y.width * y.height) as f64;
    let mut acc = 0.0;
    for (t, p) in y.data.iter().zip(&yhat.data) {
        if *t != 0.0 {
            acc -= t * p.max(LOG_CLAMP).ln();
        }
    }
    Ok(acc / n)
}

/// d(cross_entropy_loss)/d(yhat), zero where the clamp is active.
pub fn cross_entropy_grad(y: &OneHotMask, yhat: &ProbMap) -> Result<Vec<f64>> {
    check_mask_dims(y, yhat)?;
    let n = (y.width * y.height) as f64;
    Ok(y.data
        .iter()
        .zip(&yhat.data)
        .map(|(t, p)| {
            if *t != 0.0 && *p > LOG_CLAMP {
                -t / (p * n)
            } else {
                0.0
            }
        })
        .collect())
}

/// Soft Dice loss over all classes, including classes absent from the target
/// (their per-class term contributes 0/(sum(yhat)+eps)).
pub fn dice_loss(y: &OneHotMask, yhat: &ProbMap, epsilon: f64) -> Result<f64> {
    check_mask_dims(y, yhat)?;
    let c = y.num_classes;
    let mut acc = 0.0;
    for class in 0..c {
        let (inter, psum, gsum) = dice_sums(y, yhat, class);
        acc += 2.0 * inter / (psum + gsum + epsilon);
    }
    Ok(1.0 - acc / c as f64)
}

fn dice_sums(y: &OneHotMask, yhat: &ProbMap, class: usize) -> (f64, f64, f64) {
    let c = y.num_classes;
    let n = y.width * y.height;
    let (mut inter, mut psum, mut gsum) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let t = y.data[i * c + class];
        let p = yhat.data[i * c + class];
        inter += t * p;
        psum += p;
        gsum += t;
    }
    (inter, psum, gsum)
}

/// d(dice_loss)/d(yhat).
pub fn dice_grad(y: &OneHotMask, yhat: &ProbMap, epsilon: f64) -> Result<Vec<f64>> {
    check_mask_dims(y, yhat)?;
    let c = y.num_classes;
    let n = y.width * y.height;
    let mut grad = vec![0.0; n * c];
    for class in 0..c {
        let (inter, psum, gsum) = dice_sums(y, yhat, class);
        let denom = psum + gsum + epsilon;
        for i in 0..n {
            let t = y.data[i * c + class];
            // d/dp [2 I / denom] = (2 t denom - 2 I) / denom^2, negated and
            // averaged over classes for the loss
            grad[i * c + class] = -(2.0 * t * denom - 2.0 * inter) / (denom * denom * c as f64);
        }
    }
    Ok(grad)
}

/// Weighted sum of the three terms.
pub fn total_loss(l_sv: f64, l_ce: f64, l_dice: f64, cfg: &LossConfig) -> LossReport {
    LossReport {
        l_sv,
        l_ce,
        l_dice,
        l_total: cfg.lambda_sv * l_sv + cfg.lambda_ce * l_ce + cfg.lambda_dice * l_dice,
    }
}
