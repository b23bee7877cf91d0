//! Optimization of the sketch-to-mask network against the frozen teacher.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{random_augment, AugmentPolicy};
use crate::imagery::{one_hot, SegMask, Sketch};
use crate::losses::{
    cross_entropy_grad, cross_entropy_loss, dice_grad, dice_loss, style_vector_loss,
    style_vector_loss_grad_we, total_loss, LossConfig, LossReport,
};
use crate::mask23d::{style_target, Mask23DParams, StyleVector};
use crate::nn::softmax_backward;
use crate::rng::{mix, SplitMix64};
use crate::sketch2mask::{
    backward, forward_cached, probs_from_logits_chw, save_params, BottleneckEmbedding,
    UNetParams,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Save a checkpoint every this many steps; 0 saves only the final one.
    pub checkpoint_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 2,
            learning_rate: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_interval: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be > 0".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Total loss and its gradient w.r.t. every network parameter for one
/// (sketch, mask) pair; `w_plus` is the teacher's style target for the mask.
pub fn grad_total_loss(
    params: &UNetParams,
    sketch: &Sketch,
    mask: &SegMask,
    w_plus: &StyleVector,
    loss_cfg: &LossConfig,
) -> Result<(LossReport, UNetParams)> {
    loss_cfg.validate()?;
    let cfg = &params.config;
    let cache = forward_cached(params, sketch)?;
    let probs = probs_from_logits_chw(cfg, &cache.logits_chw);
    let target = one_hot(mask);
    let embedding = BottleneckEmbedding {
        rows: cfg.style_rows,
        dim: cfg.style_dim,
        data: cache.embedding.clone(),
    };

    let l_sv = style_vector_loss(w_plus, &embedding)?;
    let l_ce = cross_entropy_loss(&target, &probs)?;
    let l_dice = dice_loss(&target, &probs, loss_cfg.epsilon)?;
    let report = total_loss(l_sv, l_ce, l_dice, loss_cfg);

    // combined gradient w.r.t. the per-pixel probabilities, then back
    // through each pixel's softmax
    let g_ce = cross_entropy_grad(&target, &probs)?;
    let g_dice = dice_grad(&target, &probs, loss_cfg.epsilon)?;
    let c = cfg.num_classes;
    let hw = cfg.input_size * cfg.input_size;
    let mut d_logits_chw = vec![0.0; c * hw];
    let mut d_probs_row = vec![0.0; c];
    for p in 0..hw {
        for k in 0..c {
            let i = p * c + k;
            d_probs_row[k] = loss_cfg.lambda_ce * g_ce[i] + loss_cfg.lambda_dice * g_dice[i];
        }
        let d_row = softmax_backward(&probs.data[p * c..(p + 1) * c], &d_probs_row);
        for k in 0..c {
            d_logits_chw[k * hw + p] = d_row[k];
        }
    }
    let d_embedding: Vec<f64> = style_vector_loss_grad_we(w_plus, &embedding)
        .into_iter()
        .map(|g| loss_cfg.lambda_sv * g)
        .collect();

    let grads = backward(params, &cache, &d_logits_chw, &d_embedding);
    Ok((report, grads))
}

/// Total loss only (used by the finite-difference checker).
pub fn eval_total_loss(
    params: &UNetParams,
    sketch: &Sketch,
    mask: &SegMask,
    w_plus: &StyleVector,
    loss_cfg: &LossConfig,
) -> Result<f64> {
    let cfg = &params.config;
    let cache = forward_cached(params, sketch)?;
    let probs = probs_from_logits_chw(cfg, &cache.logits_chw);
    let target = one_hot(mask);
    let embedding = BottleneckEmbedding {
        rows: cfg.style_rows,
        dim: cfg.style_dim,
        data: cache.embedding,
    };
    let l_sv = style_vector_loss(w_plus, &embedding)?;
    let l_ce = cross_entropy_loss(&target, &probs)?;
    let l_dice = dice_loss(&target, &probs, loss_cfg.epsilon)?;
    Ok(total_loss(l_sv, l_ce, l_dice, loss_cfg).l_total)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &UNetParams) -> Self {
        AdamState {
            step: 0,
            m: params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
            v: params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }

    pub fn apply(&mut self, params: &mut UNetParams, grads: &UNetParams, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (ti, tensor) in params.tensors.iter_mut().enumerate() {
            let g = &grads.tensors[ti].data;
            let (m, v) = (&mut self.m[ti], &mut self.v[ti]);
            for i in 0..tensor.data.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                tensor.data[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            }
        }
    }
}

/// One optimization step over a mini-batch; gradients and losses are batch
/// means.
pub fn train_step(
    params: &mut UNetParams,
    opt: &mut AdamState,
    batch: &[(&Sketch, &SegMask, &StyleVector)],
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut acc_grads = UNetParams::zeros_like(&params.config);
    let mut acc = LossReport {
        l_sv: 0.0,
        l_ce: 0.0,
        l_dice: 0.0,
        l_total: 0.0,
    };
    for (sketch, mask, w_plus) in batch {
        let (report, grads) = grad_total_loss(params, sketch, mask, w_plus, loss_cfg)?;
        acc.l_sv += report.l_sv;
        acc.l_ce += report.l_ce;
        acc.l_dice += report.l_dice;
        acc.l_total += report.l_total;
        for (a, g) in acc_grads.tensors.iter_mut().zip(&grads.tensors) {
            for (x, y) in a.data.iter_mut().zip(&g.data) {
                *x += y;
            }
        }
    }
    let inv = 1.0 / batch.len() as f64;
    for t in acc_grads.tensors.iter_mut() {
        for x in t.data.iter_mut() {
            *x *= inv;
        }
    }
    acc.l_sv *= inv;
    acc.l_ce *= inv;
    acc.l_dice *= inv;
    acc.l_total *= inv;
    opt.apply(params, &acc_grads, cfg);
    Ok(acc)
}

fn save_checkpoint(params: &UNetParams, dir: &Path, name: &str) -> Result<()> {
    let tmp = dir.join(format!(".tmp_{name}"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    }
    save_params(params, &tmp)?;
    let fin = dir.join(name);
    if fin.exists() {
        fs::remove_dir_all(&fin).map_err(|e| Error::io(fin.display().to_string(), e))?;
    }
    fs::rename(&tmp, &fin).map_err(|e| Error::io(fin.display().to_string(), e))?;
    Ok(())
}

/// Full training loop.
///
/// Teacher style targets are computed once per mask up front. Sample order
/// reshuffles every epoch from the training seed; each presented sketch is
/// augmented with a seed derived from (seed, step, sample index), so runs
/// are bit-reproducible. Checkpoints are written to `out_dir/checkpoints`
/// via a temp directory and rename; losses land in `out_dir/train_log.csv`.
pub fn train_loop(
    mut params: UNetParams,
    teacher: &Mask23DParams,
    data: &[(Sketch, SegMask)],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    augment: Option<&AugmentPolicy>,
    out_dir: Option<&Path>,
) -> Result<(UNetParams, Vec<LossReport>)> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if !teacher.is_frozen() {
        return Err(Error::State("teacher must be frozen before training".into()));
    }
    if let Some(p) = augment {
        p.validate()?;
    }
    let targets: Vec<StyleVector> = data
        .iter()
        .map(|(_, mask)| style_target(teacher, mask))
        .collect::<Result<_>>()?;

    let ckpt_dir = out_dir.map(|d| d.join("checkpoints"));
    if let Some(d) = &ckpt_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d.display().to_string(), e))?;
    }
    let mut log = String::from("step,l_sv,l_ce,l_dice,l_total\n");

    let mut opt = AdamState::new(&params);
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = 0u64;
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        let mut presented: Vec<(usize, Sketch)> = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..data.len()).collect();
                SplitMix64::new(mix(&[cfg.seed, 1, epoch])).shuffle(&mut order);
                epoch += 1;
            }
            let idx = order.pop().unwrap();
            let sketch = match augment {
                Some(policy) => random_augment(
                    &data[idx].0,
                    policy,
                    mix(&[cfg.seed, 2, step as u64, idx as u64]),
                )?,
                None => data[idx].0.clone(),
            };
            presented.push((idx, sketch));
        }
        for (idx, sketch) in &presented {
            batch.push((sketch, &data[*idx].1, &targets[*idx]));
        }
        let batch_refs: Vec<(&Sketch, &SegMask, &StyleVector)> =
            batch.iter().map(|(s, m, w)| (*s, *m, *w)).collect();
        let report = train_step(&mut params, &mut opt, &batch_refs, loss_cfg, cfg)?;
        log.push_str(&format!(
            "{},{:.9},{:.9},{:.9},{:.9}\n",
            step + 1,
            report.l_sv,
            report.l_ce,
            report.l_dice,
            report.l_total
        ));
        history.push(report);
        if let Some(d) = &ckpt_dir {
            let done = step + 1;
            if cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0 && done < cfg.steps
            {
                save_checkpoint(&params, d, &format!("step_{done:06}"))?;
            }
        }
    }
    if let Some(d) = &ckpt_dir {
        save_checkpoint(&params, d, "final")?;
    }
    if let Some(dir) = out_dir {
        let path = dir.join("train_log.csv");
        let mut f = fs::File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(log.as_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok((params, history))
}

/// Result of comparing analytic gradients to central finite differences.
#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    /// (tensor name, worst relative error in that tensor)
    pub per_tensor: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub pass: bool,
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Checks every parameter's analytic gradient against a central difference
/// of the total loss.
pub fn finite_diff_check(
    params: &UNetParams,
    sketch: &Sketch,
    mask: &SegMask,
    w_plus: &StyleVector,
    loss_cfg: &LossConfig,
) -> Result<FiniteDiffReport> {
    finite_diff_check_impl(params, sketch, mask, w_plus, loss_cfg, None)
}

pub(crate) fn finite_diff_check_impl(
    params: &UNetParams,
    sketch: &Sketch,
    mask: &SegMask,
    w_plus: &StyleVector,
    loss_cfg: &LossConfig,
    corrupt_grads: Option<&dyn Fn(&mut UNetParams)>,
) -> Result<FiniteDiffReport> {
    let (_, mut grads) = grad_total_loss(params, sketch, mask, w_plus, loss_cfg)?;
    if let Some(f) = corrupt_grads {
        f(&mut grads);
    }
    let mut work = params.clone();
    let mut per_tensor = Vec::with_capacity(params.tensors.len());
    let mut max_rel: f64 = 0.0;
    for ti in 0..params.tensors.len() {
        // Relative error is taken per tensor: the largest entry-wise deviation
        // over the tensor's gradient scale.  Entry-wise ratios would bottom out
        // on the finite-difference noise floor for near-zero components.
        let mut max_diff: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..params.tensors[ti].data.len() {
            let orig = work.tensors[ti].data[i];
            work.tensors[ti].data[i] = orig + FD_STEP;
            let hi = eval_total_loss(&work, sketch, mask, w_plus, loss_cfg)?;
            work.tensors[ti].data[i] = orig - FD_STEP;
            let lo = eval_total_loss(&work, sketch, mask, w_plus, loss_cfg)?;
            work.tensors[ti].data[i] = orig;
            let numeric = (hi - lo) / (2.0 * FD_STEP);
            let analytic = grads.tensors[ti].data[i];
            max_diff = max_diff.max((analytic - numeric).abs());
            scale = scale.max(analytic.abs()).max(numeric.abs());
        }
        let rel = max_diff / scale.max(1e-6);
        per_tensor.push((params.tensors[ti].name.clone(), rel));
        max_rel = max_rel.max(rel);
    }
    Ok(FiniteDiffReport {
        per_tensor,
        max_rel_err: max_rel,
        pass: max_rel < FD_TOLERANCE,
    })
}

/// Builds a seeded fixture for the finite-difference check on the small
/// 16x16 depth-2 configuration: jittered weights, a continuous-valued sketch
/// and random targets.  The jitter keeps pre-activations off the leaky-ReLU
/// kink, where central differences are meaningless.
pub fn fd_fixture(seed: u64) -> (UNetParams, Sketch, SegMask, StyleVector) {
    let cfg = crate::sketch2mask::UNetConfig::selftest_small();
    let mut params = crate::sketch2mask::init_params(&cfg, seed)
        .expect("selftest_small is a valid configuration");
    let mut r = SplitMix64::new(mix(&[seed, 99]));
    for t in params.tensors.iter_mut() {
        for v in t.data.iter_mut() {
            *v += 0.05 * r.next_gaussian();
        }
    }
    let n = cfg.input_size;
    let sketch = Sketch {
        width: n,
        height: n,
        data: (0..n * n).map(|_| r.next_f64()).collect(),
    };
    let mask = SegMask::new(
        n,
        n,
        cfg.num_classes,
        (0..n * n).map(|_| r.below(cfg.num_classes) as u8).collect(),
    )
    .expect("labels drawn below num_classes");
    let w_plus = StyleVector {
        rows: cfg.style_rows,
        dim: cfg.style_dim,
        data: (0..cfg.embedding_len())
            .map(|_| 0.5 * r.next_gaussian())
            .collect(),
    };
    (params, sketch, mask, w_plus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask23d::{init_frozen, Mask23DConfig, Mask23DParams};
    use crate::sketch2mask::{init_params, load_params, UNetConfig};
    use tempfile::tempdir;

    fn selftest_setup(seed: u64) -> (UNetParams, Sketch, SegMask, StyleVector) {
        fd_fixture(seed)
    }

    fn selftest_teacher(unet: &UNetConfig, seed: u64) -> Mask23DParams {
        let cfg = Mask23DConfig {
            mask_resolution: unet.input_size,
            latent_dim: 4,
            style_rows: unet.style_rows,
            style_dim: unet.style_dim,
            plane_resolution: 8,
            plane_channels: 4,
            feature_dim: 2,
            num_classes: unet.num_classes,
            mlp_hidden: 8,
        };
        init_frozen(&cfg, seed).unwrap()
    }

    fn tiny_dataset(unet: &UNetConfig, count: usize, seed: u64) -> Vec<(Sketch, SegMask)> {
        let n = unet.input_size;
        let mut r = SplitMix64::new(seed);
        (0..count)
            .map(|_| {
                // coarse blobs so there is structure to learn
                let cx = r.range(0.3, 0.7) * n as f64;
                let cy = r.range(0.3, 0.7) * n as f64;
                let rad = r.range(0.15, 0.35) * n as f64;
                let mut labels = vec![0u8; n * n];
                let mut sk = vec![0.0; n * n];
                for y in 0..n {
                    for x in 0..n {
                        let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                        if d < rad {
                            labels[y * n + x] = 1;
                        }
                        if (d - rad).abs() < 1.0 {
                            sk[y * n + x] = 1.0;
                        }
                    }
                }
                if unet.num_classes > 2 {
                    labels[(cy as usize).min(n - 1) * n + (cx as usize).min(n - 1)] = 2;
                }
                (
                    Sketch {
                        width: n,
                        height: n,
                        data: sk,
                    },
                    SegMask::new(n, n, unet.num_classes, labels).unwrap(),
                )
            })
            .collect()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (params, sketch, mask, w_plus) = selftest_setup(7);
        let report =
            finite_diff_check(&params, &sketch, &mask, &w_plus, &LossConfig::default()).unwrap();
        assert!(
            report.pass,
            "max rel err {} (per tensor: {:?})",
            report.max_rel_err, report.per_tensor
        );
    }

    #[test]
    fn corrupted_gradient_fails_check() {
        let (params, sketch, mask, w_plus) = selftest_setup(8);
        let corrupt = |g: &mut UNetParams| {
            for v in g.tensors[0].data.iter_mut() {
                *v *= 1.5;
            }
            g.tensors[0].data[0] += 0.1;
        };
        let report = finite_diff_check_impl(
            &params,
            &sketch,
            &mask,
            &w_plus,
            &LossConfig::default(),
            Some(&corrupt),
        )
        .unwrap();
        assert!(!report.pass, "corrupted gradients must not pass");
    }

    #[test]
    fn zero_weights_zero_gradients() {
        let (params, sketch, mask, w_plus) = selftest_setup(9);
        let cfg = LossConfig {
            lambda_sv: 0.0,
            lambda_ce: 0.0,
            lambda_dice: 0.0,
            ..Default::default()
        };
        let (report, grads) = grad_total_loss(&params, &sketch, &mask, &w_plus, &cfg).unwrap();
        assert_eq!(report.l_total, 0.0);
        for t in &grads.tensors {
            assert!(t.data.iter().all(|&g| g == 0.0), "nonzero grad in {}", t.name);
        }
    }

    #[test]
    fn sv_only_loss_leaves_head_untouched() {
        // the embedding branch sits before the decoder head, so a pure
        // style loss cannot reach the final classifier weights
        let (params, sketch, mask, w_plus) = selftest_setup(10);
        let cfg = LossConfig {
            lambda_sv: 1.0,
            lambda_ce: 0.0,
            lambda_dice: 0.0,
            ..Default::default()
        };
        let (_, grads) = grad_total_loss(&params, &sketch, &mask, &w_plus, &cfg).unwrap();
        for t in &grads.tensors {
            if t.name.starts_with("head") || t.name.starts_with("dec") {
                assert!(t.data.iter().all(|&g| g == 0.0), "{} got gradient", t.name);
            }
        }
        // but the projection does receive one
        let proj = grads.get("proj.weight");
        assert!(proj.data.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn adam_first_step_closed_form() {
        let (mut params, sketch, mask, w_plus) = selftest_setup(11);
        let before = params.clone();
        let cfg = TrainConfig::default();
        let (_, grads) =
            grad_total_loss(&params, &sketch, &mask, &w_plus, &LossConfig::default()).unwrap();
        let mut opt = AdamState::new(&params);
        opt.apply(&mut params, &grads, &cfg);
        // bias-corrected first step: m_hat = g, v_hat = g^2
        for (ti, t) in params.tensors.iter().enumerate() {
            for i in 0..t.data.len() {
                let g = grads.tensors[ti].data[i];
                let expect = before.tensors[ti].data[i]
                    - cfg.learning_rate * g / (g.abs() + cfg.adam_eps);
                assert!(
                    (t.data[i] - expect).abs() < 1e-12,
                    "{} [{}]",
                    t.name,
                    i
                );
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let unet = UNetConfig::selftest_small();
        let teacher = selftest_teacher(&unet, 12);
        let data = tiny_dataset(&unet, 6, 13);
        let cfg = TrainConfig {
            steps: 5,
            batch_size: 2,
            checkpoint_interval: 0,
            seed: 14,
            ..Default::default()
        };
        let run = || {
            train_loop(
                init_params(&unet, 15).unwrap(),
                &teacher,
                &data,
                &cfg,
                &LossConfig::default(),
                Some(&AugmentPolicy::default()),
                None,
            )
            .unwrap()
        };
        let (a, ha) = run();
        let (b, hb) = run();
        for (x, y) in a.tensors.iter().zip(&b.tensors) {
            assert_eq!(x.data, y.data, "tensor {} diverged", x.name);
        }
        for (x, y) in ha.iter().zip(&hb) {
            assert_eq!(x.l_total, y.l_total);
        }
    }

    #[test]
    fn checkpoint_schedule() {
        let unet = UNetConfig::selftest_small();
        let teacher = selftest_teacher(&unet, 16);
        let data = tiny_dataset(&unet, 4, 17);
        let dir = tempdir().unwrap();
        let cfg = TrainConfig {
            steps: 25,
            batch_size: 2,
            checkpoint_interval: 10,
            seed: 18,
            ..Default::default()
        };
        let (final_params, _) = train_loop(
            init_params(&unet, 19).unwrap(),
            &teacher,
            &data,
            &cfg,
            &LossConfig::default(),
            None,
            Some(dir.path()),
        )
        .unwrap();
        let ck = dir.path().join("checkpoints");
        assert!(ck.join("step_000010").is_dir());
        assert!(ck.join("step_000020").is_dir());
        assert!(ck.join("final").is_dir());
        assert!(!ck.join("step_000030").exists());
        assert!(dir.path().join("train_log.csv").is_file());
        let log = fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
        assert!(log.starts_with("step,l_sv,l_ce,l_dice,l_total\n"));
        assert_eq!(log.lines().count(), 26);
        // final checkpoint round-trips to nearly the in-memory parameters
        // (f32 storage)
        let loaded = load_params(&ck.join("final")).unwrap();
        for (a, b) in final_params.tensors.iter().zip(&loaded.tensors) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() <= 1e-5 * (1.0 + x.abs()));
            }
        }
    }

    #[test]
    fn unfrozen_teacher_rejected() {
        let unet = UNetConfig::selftest_small();
        let teacher_cfg = Mask23DConfig {
            mask_resolution: unet.input_size,
            latent_dim: 4,
            style_rows: unet.style_rows,
            style_dim: unet.style_dim,
            plane_resolution: 8,
            plane_channels: 4,
            feature_dim: 2,
            num_classes: unet.num_classes,
            mlp_hidden: 8,
        };
        let teacher = Mask23DParams::init(&teacher_cfg, 20).unwrap();
        let data = tiny_dataset(&unet, 2, 21);
        let out = train_loop(
            init_params(&unet, 22).unwrap(),
            &teacher,
            &data,
            &TrainConfig::default(),
            &LossConfig::default(),
            None,
            None,
        );
        assert!(matches!(out, Err(Error::State(_))));
    }

    #[test]
    fn short_run_reduces_loss() {
        let unet = UNetConfig::selftest_small();
        let teacher = selftest_teacher(&unet, 23);
        let data = tiny_dataset(&unet, 8, 24);
        let cfg = TrainConfig {
            steps: 60,
            batch_size: 4,
            learning_rate: 3e-3,
            checkpoint_interval: 0,
            seed: 25,
            ..Default::default()
        };
        let (_, history) = train_loop(
            init_params(&unet, 26).unwrap(),
            &teacher,
            &data,
            &cfg,
            &LossConfig::default(),
            None,
            None,
        )
        .unwrap();
        let head: f64 = history[..5].iter().map(|r| r.l_total).sum::<f64>() / 5.0;
        let tail: f64 = history[history.len() - 5..]
            .iter()
            .map(|r| r.l_total)
            .sum::<f64>()
            / 5.0;
        assert!(tail < head, "loss did not decrease: {head} -> {tail}");
    }

    #[test]
    fn teacher_unchanged_by_training() {
        let unet = UNetConfig::selftest_small();
        let teacher = selftest_teacher(&unet, 27);
        let snapshot = teacher.clone();
        let data = tiny_dataset(&unet, 4, 28);
        let cfg = TrainConfig {
            steps: 10,
            batch_size: 2,
            checkpoint_interval: 0,
            seed: 29,
            ..Default::default()
        };
        train_loop(
            init_params(&unet, 30).unwrap(),
            &teacher,
            &data,
            &cfg,
            &LossConfig::default(),
            None,
            None,
        )
        .unwrap();
        assert_eq!(teacher, snapshot);
    }
}
