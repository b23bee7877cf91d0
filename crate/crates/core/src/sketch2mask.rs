//! Sketch-to-mask U-Net.
//!
//! Encoder levels apply two 3x3 convolutions (leaky-rectifier, slope 0.2)
//! and a 2x max-pool; the decoder mirrors them with nearest-neighbor
//! upsampling and skip concatenation. The flattened bottleneck is linearly
//! projected to an L x D embedding whose shape equals the mask-to-3D style
//! vector, and projected back to seed the decoder, so the embedding path
//! receives gradient from both the alignment and the segmentation losses.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::imagery::{self, argmax_mask, ProbMap, SegMask, Sketch, Tensor};
use crate::nn;
use crate::rng::{mix, SplitMix64};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub input_size: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub num_classes: usize,
    pub style_rows: usize,
    pub style_dim: usize,
}

impl UNetConfig {
    /// Default desk-scale configuration (64x64 inputs, CPU-trainable).
    pub fn desk_default() -> Self {
        UNetConfig {
            input_size: 64,
            depth: 4,
            base_channels: 8,
            num_classes: 6,
            style_rows: 7,
            style_dim: 64,
        }
    }

    /// Full-scale preset (512x512, seven encoder-decoder pairs, 7x512
    /// embedding). Kept as a named preset; not exercised by tests.
    pub fn paper_scale() -> Self {
        UNetConfig {
            input_size: 512,
            depth: 7,
            base_channels: 32,
            num_classes: 6,
            style_rows: 7,
            style_dim: 512,
        }
    }

    /// Tiny configuration for finite-difference verification.
    pub fn selftest_small() -> Self {
        UNetConfig {
            input_size: 16,
            depth: 2,
            base_channels: 4,
            num_classes: 3,
            style_rows: 2,
            style_dim: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.input_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "input_size {} is not a power of two",
                self.input_size
            )));
        }
        if self.depth == 0 || self.input_size < (1 << self.depth) {
            return Err(Error::Config(format!(
                "input_size {} < 2^depth (depth {})",
                self.input_size, self.depth
            )));
        }
        if self.base_channels == 0 || self.num_classes < 2 {
            return Err(Error::Config("base_channels >= 1, num_classes >= 2".into()));
        }
        if self.style_rows == 0 || self.style_dim == 0 {
            return Err(Error::Config("style shape entries must be >= 1".into()));
        }
        Ok(())
    }

    pub fn enc_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn bottleneck_spatial(&self) -> usize {
        self.input_size >> self.depth
    }

    /// Flattened bottleneck size feeding the style projection.
    pub fn bottleneck_flat(&self) -> usize {
        let s = self.bottleneck_spatial();
        s * s * self.enc_channels(self.depth - 1)
    }

    pub fn embedding_len(&self) -> usize {
        self.style_rows * self.style_dim
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamTensor {
    fn zeros(name: &str, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        ParamTensor {
            name: name.to_string(),
            shape,
            data: vec![0.0; n],
        }
    }
}

/// Full U-Net parameter set; tensor order is fixed by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetParams {
    pub config: UNetConfig,
    pub tensors: Vec<ParamTensor>,
}

/// Bottleneck embedding w (L x D), shape-matched to the style vector.
#[derive(Debug, Clone, PartialEq)]
pub struct BottleneckEmbedding {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

fn tensor_layout(config: &UNetConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for i in 0..config.depth {
        let c_in = if i == 0 { 1 } else { config.enc_channels(i - 1) };
        let c = config.enc_channels(i);
        out.push((format!("enc{i}.conv1.weight"), vec![c, c_in, 3, 3]));
        out.push((format!("enc{i}.conv1.bias"), vec![c]));
        out.push((format!("enc{i}.conv2.weight"), vec![c, c, 3, 3]));
        out.push((format!("enc{i}.conv2.bias"), vec![c]));
    }
    let flat = config.bottleneck_flat();
    let emb = config.embedding_len();
    out.push(("proj.weight".into(), vec![emb, flat]));
    out.push(("unproj.weight".into(), vec![flat, emb]));
    for i in (0..config.depth).rev() {
        let c = config.enc_channels(i);
        // upsampled input: the unprojected bottleneck at the deepest level,
        // otherwise the next-deeper decoder output
        let c_up = if i + 1 == config.depth {
            config.enc_channels(config.depth - 1)
        } else {
            config.enc_channels(i + 1)
        };
        out.push((format!("dec{i}.conv1.weight"), vec![c, c_up + c, 3, 3]));
        out.push((format!("dec{i}.conv1.bias"), vec![c]));
        out.push((format!("dec{i}.conv2.weight"), vec![c, c, 3, 3]));
        out.push((format!("dec{i}.conv2.bias"), vec![c]));
    }
    out.push(("head.weight".into(), vec![config.num_classes, config.base_channels]));
    out.push(("head.bias".into(), vec![config.num_classes]));
    out
}

impl UNetParams {
    pub fn zeros_like(config: &UNetConfig) -> Self {
        let tensors = tensor_layout(config)
            .into_iter()
            .map(|(name, shape)| ParamTensor::zeros(&name, shape))
            .collect();
        UNetParams {
            config: *config,
            tensors,
        }
    }

    pub fn get(&self, name: &str) -> &ParamTensor {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .unwrap_or_else(|| panic!("no tensor {name}"))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }
}

/// Deterministic initialization: kernels uniform in (-b, b) with
/// b = sqrt(6 / (fan_in + fan_out)), biases zero.
pub fn init_params(config: &UNetConfig, seed: u64) -> Result<UNetParams> {
    config.validate()?;
    let mut params = UNetParams::zeros_like(config);
    for (ti, t) in params.tensors.iter_mut().enumerate() {
        if t.name.ends_with("bias") {
            continue;
        }
        let (fan_in, fan_out) = fans(&t.shape);
        let b = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut r = SplitMix64::new(mix(&[seed, ti as u64]));
        for v in t.data.iter_mut() {
            *v = r.range(-b, b);
        }
    }
    Ok(params)
}

/// (fan_in, fan_out) for a weight tensor shape.
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        4 => (shape[1] * 9, shape[0] * 9),
        2 => (shape[1], shape[0]),
        _ => (shape.iter().product(), shape.iter().product()),
    }
}

/// Intermediate activations retained for the backward pass.
pub struct ForwardCache {
    pub lvl_input: Vec<Vec<f64>>,
    enc_pre1: Vec<Vec<f64>>,
    enc_act1: Vec<Vec<f64>>,
    enc_pre2: Vec<Vec<f64>>,
    pool_arg: Vec<Vec<usize>>,
    bottleneck_flat: Vec<f64>,
    pub embedding: Vec<f64>,
    dec_cat: Vec<Vec<f64>>,
    dec_pre1: Vec<Vec<f64>>,
    dec_act1: Vec<Vec<f64>>,
    dec_pre2: Vec<Vec<f64>>,
    dec_act2: Vec<Vec<f64>>,
    pub logits_chw: Vec<f64>,
}

/// Forward pass retaining every intermediate needed by [`backward`].
pub fn forward_cached(params: &UNetParams, sketch: &Sketch) -> Result<ForwardCache> {
    let cfg = &params.config;
    if sketch.width != cfg.input_size || sketch.height != cfg.input_size {
        return Err(Error::Config(format!(
            "sketch {}x{} does not match input_size {}",
            sketch.width, sketch.height, cfg.input_size
        )));
    }
    let depth = cfg.depth;
    let mut lvl_input = Vec::with_capacity(depth);
    let mut enc_pre1 = Vec::new();
    let mut enc_act1 = Vec::new();
    let mut enc_pre2 = Vec::new();
    let mut enc_act2 = Vec::new();
    let mut pool_arg = Vec::new();

    let mut cur = sketch.data.clone();
    let mut cur_c = 1usize;
    let mut s = cfg.input_size;
    for i in 0..depth {
        let c = cfg.enc_channels(i);
        let w1 = params.get(&format!("enc{i}.conv1.weight"));
        let b1 = params.get(&format!("enc{i}.conv1.bias"));
        let w2 = params.get(&format!("enc{i}.conv2.weight"));
        let b2 = params.get(&format!("enc{i}.conv2.bias"));
        lvl_input.push(cur.clone());
        let pre1 = nn::conv3x3_forward(&cur, cur_c, s, s, &w1.data, &b1.data, c);
        let act1 = nn::leaky_relu_forward(&pre1);
        let pre2 = nn::conv3x3_forward(&act1, c, s, s, &w2.data, &b2.data, c);
        let act2 = nn::leaky_relu_forward(&pre2);
        let (pooled, arg, ns, _) = nn::maxpool2_forward(&act2, c, s, s);
        enc_pre1.push(pre1);
        enc_act1.push(act1);
        enc_pre2.push(pre2);
        enc_act2.push(act2);
        pool_arg.push(arg);
        cur = pooled;
        cur_c = c;
        s = ns;
    }

    let flat = cur; // bottleneck activations, CHW-flattened
    let emb_len = cfg.embedding_len();
    let proj = params.get("proj.weight");
    let unproj = params.get("unproj.weight");
    let embedding = nn::linear_forward(&flat, &proj.data, cfg.bottleneck_flat(), emb_len);
    let unproj_out = nn::linear_forward(&embedding, &unproj.data, emb_len, cfg.bottleneck_flat());

    let mut dec_cat = vec![Vec::new(); depth];
    let mut dec_pre1 = vec![Vec::new(); depth];
    let mut dec_act1 = vec![Vec::new(); depth];
    let mut dec_pre2 = vec![Vec::new(); depth];
    let mut dec_act2 = vec![Vec::new(); depth];

    let mut cur = unproj_out.clone();
    let mut cur_c = cfg.enc_channels(depth - 1);
    let mut s = cfg.bottleneck_spatial();
    for i in (0..depth).rev() {
        let c = cfg.enc_channels(i);
        let up = nn::upsample2_forward(&cur, cur_c, s, s);
        s *= 2;
        let mut cat = up;
        cat.extend_from_slice(&enc_act2[i]);
        let w1 = params.get(&format!("dec{i}.conv1.weight"));
        let b1 = params.get(&format!("dec{i}.conv1.bias"));
        let w2 = params.get(&format!("dec{i}.conv2.weight"));
        let b2 = params.get(&format!("dec{i}.conv2.bias"));
        let pre1 = nn::conv3x3_forward(&cat, cur_c + c, s, s, &w1.data, &b1.data, c);
        let act1 = nn::leaky_relu_forward(&pre1);
        let pre2 = nn::conv3x3_forward(&act1, c, s, s, &w2.data, &b2.data, c);
        let act2 = nn::leaky_relu_forward(&pre2);
        dec_cat[i] = cat;
        dec_pre1[i] = pre1;
        dec_act1[i] = act1;
        dec_pre2[i] = pre2;
        dec_act2[i] = act2.clone();
        cur = act2;
        cur_c = c;
    }

    let hw = cfg.input_size * cfg.input_size;
    let hw_ok = cur.len() == cfg.base_channels * hw;
    debug_assert!(hw_ok);
    let head_w = params.get("head.weight");
    let head_b = params.get("head.bias");
    let logits_chw = nn::conv1x1_forward(
        &cur,
        cfg.base_channels,
        hw,
        &head_w.data,
        &head_b.data,
        cfg.num_classes,
    );

    Ok(ForwardCache {
        lvl_input,
        enc_pre1,
        enc_act1,
        enc_pre2,
        pool_arg,
        bottleneck_flat: flat,
        embedding,
        dec_cat,
        dec_pre1,
        dec_act1,
        dec_pre2,
        dec_act2,
        logits_chw,
    })
}

/// Maps a sketch to per-pixel class logits (H x W x C) and the bottleneck
/// embedding.
pub fn forward(params: &UNetParams, sketch: &Sketch) -> Result<(Tensor, BottleneckEmbedding)> {
    let cache = forward_cached(params, sketch)?;
    Ok((
        logits_hwc(&params.config, &cache.logits_chw),
        BottleneckEmbedding {
            rows: params.config.style_rows,
            dim: params.config.style_dim,
            data: cache.embedding,
        },
    ))
}

/// Converts internal CHW logits to the H x W x C tensor contract.
pub fn logits_hwc(cfg: &UNetConfig, chw: &[f64]) -> Tensor {
    let (n, c) = (cfg.input_size, cfg.num_classes);
    let hw = n * n;
    let mut data = vec![0.0; chw.len()];
    for ch in 0..c {
        for p in 0..hw {
            data[p * c + ch] = chw[ch * hw + p];
        }
    }
    Tensor {
        shape: vec![n, n, c],
        data,
    }
}

/// Per-pixel softmax probabilities and the argmax mask (ties break toward
/// the lower class index).
pub fn predict_mask(params: &UNetParams, sketch: &Sketch) -> Result<(SegMask, ProbMap)> {
    let cache = forward_cached(params, sketch)?;
    let probs = probs_from_logits_chw(&params.config, &cache.logits_chw);
    let mask = argmax_mask(&probs);
    Ok((mask, probs))
}

/// Softmax over classes for every pixel of a CHW logit buffer.
pub fn probs_from_logits_chw(cfg: &UNetConfig, chw: &[f64]) -> ProbMap {
    let (n, c) = (cfg.input_size, cfg.num_classes);
    let hw = n * n;
    let mut data = vec![0.0; hw * c];
    let mut row = vec![0.0; c];
    for p in 0..hw {
        for ch in 0..c {
            row[ch] = chw[ch * hw + p];
        }
        let sm = nn::softmax(&row);
        data[p * c..(p + 1) * c].copy_from_slice(&sm);
    }
    ProbMap {
        width: n,
        height: n,
        num_classes: c,
        data,
    }
}

/// Backward pass: gradients of a scalar loss w.r.t. every parameter, given
/// dL/dlogits (CHW) and dL/dembedding (L*D).
pub fn backward(
    params: &UNetParams,
    cache: &ForwardCache,
    d_logits_chw: &[f64],
    d_embedding: &[f64],
) -> UNetParams {
    let cfg = &params.config;
    let depth = cfg.depth;
    let mut grads = UNetParams::zeros_like(cfg);
    let hw = cfg.input_size * cfg.input_size;

    let set = |grads: &mut UNetParams, name: &str, data: Vec<f64>| {
        let t = grads
            .tensors
            .iter_mut()
            .find(|t| t.name == name)
            .expect("tensor exists");
        t.data = data;
    };

    // head
    let head_w = params.get("head.weight");
    let (mut g_cur, d_hw, d_hb) = nn::conv1x1_backward(
        &cache.dec_act2[0],
        cfg.base_channels,
        hw,
        &head_w.data,
        cfg.num_classes,
        d_logits_chw,
    );
    set(&mut grads, "head.weight", d_hw);
    set(&mut grads, "head.bias", d_hb);

    // decoder, shallowest level first
    let mut skip_grads: Vec<Vec<f64>> = vec![Vec::new(); depth];
    for i in 0..depth {
        let c = cfg.enc_channels(i);
        let c_up = if i + 1 == depth {
            cfg.enc_channels(depth - 1)
        } else {
            cfg.enc_channels(i + 1)
        };
        let s = cfg.input_size >> i;
        let w1 = params.get(&format!("dec{i}.conv1.weight"));
        let w2 = params.get(&format!("dec{i}.conv2.weight"));

        let d_pre2 = nn::leaky_relu_backward(&cache.dec_pre2[i], &g_cur);
        let (d_act1, d_w2, d_b2) =
            nn::conv3x3_backward(&cache.dec_act1[i], c, s, s, &w2.data, c, &d_pre2);
        let d_pre1 = nn::leaky_relu_backward(&cache.dec_pre1[i], &d_act1);
        let (d_cat, d_w1, d_b1) =
            nn::conv3x3_backward(&cache.dec_cat[i], c_up + c, s, s, &w1.data, c, &d_pre1);
        set(&mut grads, &format!("dec{i}.conv2.weight"), d_w2);
        set(&mut grads, &format!("dec{i}.conv2.bias"), d_b2);
        set(&mut grads, &format!("dec{i}.conv1.weight"), d_w1);
        set(&mut grads, &format!("dec{i}.conv1.bias"), d_b1);

        let (d_up, d_skip) = d_cat.split_at(c_up * s * s);
        skip_grads[i] = d_skip.to_vec();
        g_cur = nn::upsample2_backward(d_up, c_up, s / 2, s / 2);
    }

    // projections: g_cur now sits on the unprojected bottleneck
    let flat_len = cfg.bottleneck_flat();
    let emb_len = cfg.embedding_len();
    let unproj = params.get("unproj.weight");
    let proj = params.get("proj.weight");
    let (mut d_emb, d_unproj_w) =
        nn::linear_backward(&cache.embedding, &unproj.data, emb_len, flat_len, &g_cur);
    for (a, b) in d_emb.iter_mut().zip(d_embedding) {
        *a += b;
    }
    let (d_flat, d_proj_w) =
        nn::linear_backward(&cache.bottleneck_flat, &proj.data, flat_len, emb_len, &d_emb);
    set(&mut grads, "unproj.weight", d_unproj_w);
    set(&mut grads, "proj.weight", d_proj_w);

    // encoder, deepest level first
    let mut g_pooled = d_flat;
    for i in (0..depth).rev() {
        let c = cfg.enc_channels(i);
        let c_in = if i == 0 { 1 } else { cfg.enc_channels(i - 1) };
        let s = cfg.input_size >> i;
        let w1 = params.get(&format!("enc{i}.conv1.weight"));
        let w2 = params.get(&format!("enc{i}.conv2.weight"));

        let mut d_act2 = nn::maxpool2_backward(&cache.pool_arg[i], &g_pooled, c * s * s);
        for (a, b) in d_act2.iter_mut().zip(&skip_grads[i]) {
            *a += b;
        }
        let d_pre2 = nn::leaky_relu_backward(&cache.enc_pre2[i], &d_act2);
        let (d_act1, d_w2, d_b2) =
            nn::conv3x3_backward(&cache.enc_act1[i], c, s, s, &w2.data, c, &d_pre2);
        let d_pre1 = nn::leaky_relu_backward(&cache.enc_pre1[i], &d_act1);
        let (d_in, d_w1, d_b1) =
            nn::conv3x3_backward(&cache.lvl_input[i], c_in, s, s, &w1.data, c, &d_pre1);
        set(&mut grads, &format!("enc{i}.conv2.weight"), d_w2);
        set(&mut grads, &format!("enc{i}.conv2.bias"), d_b2);
        set(&mut grads, &format!("enc{i}.conv1.weight"), d_w1);
        set(&mut grads, &format!("enc{i}.conv1.bias"), d_b1);
        g_pooled = d_in;
    }

    grads
}

// ---------------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    config: UNetConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

/// Writes parameters as a directory of S3DT tensors plus a JSON shape manifest.
pub fn save_params(params: &UNetParams, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let manifest = CheckpointManifest {
        config: params.config,
        tensors: params
            .tensors
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let mpath = dir.join("unet.json");
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(mpath.display().to_string(), e))?;
    for t in &params.tensors {
        let tensor = Tensor {
            shape: t.shape.clone(),
            data: t.data.clone(),
        };
        imagery::save_tensor(&tensor, &dir.join(format!("{}.s3dt", t.name)))?;
    }
    Ok(())
}

pub fn load_params(dir: &Path) -> Result<UNetParams> {
    let mpath = dir.join("unet.json");
    let bytes = fs::read(&mpath).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes)?;
    manifest.config.validate()?;
    let mut params = UNetParams::zeros_like(&manifest.config);
    for t in params.tensors.iter_mut() {
        let loaded = imagery::load_tensor(&dir.join(format!("{}.s3dt", t.name)))?;
        if loaded.shape != t.shape {
            return Err(Error::Config(format!(
                "tensor {} shape {:?} does not match config shape {:?}",
                t.name, loaded.shape, t.shape
            )));
        }
        t.data = loaded.data;
    }
    Ok(params)
}
