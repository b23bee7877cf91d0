//! Frozen toy mask-to-3D module.
//!
//! A conditional encoder maps (label map, latent code) to an L x D style
//! vector. The style vector modulates three learned feature planes; a small
//! MLP turns tri-plane samples into (color, density, feature, semantics),
//! and emission-absorption quadrature renders color and semantic images
//! along camera rays. The module stays frozen while the sketch-to-mask
//! network trains against it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::imagery::{self, one_hot, SegMask, Tensor};
use crate::nn;
use crate::rng::{mix, SplitMix64};
use crate::{Error, Result};

/// Channel width of the frozen encoder's conv stack.
const ENC_CH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mask23DConfig {
    /// Mask resolution the encoder expects.
    pub mask_resolution: usize,
    pub latent_dim: usize,
    pub style_rows: usize,
    pub style_dim: usize,
    pub plane_resolution: usize,
    pub plane_channels: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub mlp_hidden: usize,
}

impl Mask23DConfig {
    pub fn desk_default() -> Self {
        Mask23DConfig {
            mask_resolution: 64,
            latent_dim: 16,
            style_rows: 7,
            style_dim: 64,
            plane_resolution: 16,
            plane_channels: 8,
            feature_dim: 4,
            num_classes: 6,
            mlp_hidden: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mask_resolution < 8 || !self.mask_resolution.is_power_of_two() {
            return Err(Error::Config("mask_resolution must be a power of two >= 8".into()));
        }
        if self.plane_resolution < 2 {
            return Err(Error::Config("plane_resolution must be >= 2".into()));
        }
        if self.style_rows == 0 || self.style_dim == 0 || self.num_classes < 2 {
            return Err(Error::Config("bad style shape or class count".into()));
        }
        Ok(())
    }

    /// Flattened size after the encoder's three stride-2 convolutions.
    fn enc_flat(&self) -> usize {
        let s = self.mask_resolution / 8;
        s * s * ENC_CH
    }

    fn mlp_out(&self) -> usize {
        4 + self.feature_dim + self.num_classes
    }
}

/// Random latent code z.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub data: Vec<f64>,
}

impl LatentCode {
    pub fn zeros(dim: usize) -> Self {
        LatentCode {
            data: vec![0.0; dim],
        }
    }

    pub fn standard_normal(dim: usize, seed: u64) -> Self {
        let mut r = SplitMix64::new(seed);
        LatentCode {
            data: (0..dim).map(|_| r.next_gaussian()).collect(),
        }
    }
}

/// L x D style matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleVector {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

/// Three axis-aligned feature planes, each `channels` x R x R.
#[derive(Debug, Clone, PartialEq)]
pub struct TriPlane {
    pub resolution: usize,
    pub channels: usize,
    pub planes: [Vec<f64>; 3],
}

/// Field output at one 3D point.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSample {
    pub color: [f64; 3],
    pub density: f64,
    pub feature: Vec<f64>,
    pub semantic: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
    pub fov_deg: f64,
    pub image_size: usize,
}

impl Camera {
    /// Canonical frontal view of the unit scene.
    pub fn frontal(image_size: usize) -> Self {
        Camera {
            position: [0.0, 0.0, 2.5],
            look_at: [0.0, 0.0, 0.0],
            up: [0.0, 1.0, 0.0],
            fov_deg: 45.0,
            image_size,
        }
    }

    /// Orbit around the scene origin at fixed elevation.
    pub fn orbit(image_size: usize, azimuth_deg: f64, elevation_deg: f64) -> Self {
        let radius = 2.5;
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        Camera {
            position: [
                radius * el.cos() * az.sin(),
                radius * el.sin(),
                radius * el.cos() * az.cos(),
            ],
            look_at: [0.0, 0.0, 0.0],
            up: [0.0, 1.0, 0.0],
            fov_deg: 45.0,
            image_size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub samples_per_ray: usize,
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            samples_per_ray: 24,
            near: 1.0,
            far: 4.0,
            background: [1.0, 1.0, 1.0],
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_ray < 2 {
            return Err(Error::Config("samples_per_ray must be >= 2".into()));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::Config("need 0 < near < far".into()));
        }
        Ok(())
    }
}

/// Accumulated images of one rendered view.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// H x W x 3
    pub color: Vec<f64>,
    /// H x W x C
    pub semantic: Vec<f64>,
    /// H x W x l
    pub feature: Vec<f64>,
    /// H x W
    pub weight_sum: Vec<f64>,
}

/// Frozen teacher parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask23DParams {
    pub config: Mask23DConfig,
    // conditional encoder: three stride-2 convs then a linear map
    enc_w: [Vec<f64>; 3],
    enc_b: [Vec<f64>; 3],
    enc_lin: Vec<f64>,
    // tri-plane synthesizer
    base_planes: [Vec<f64>; 3],
    mod_scale_w: [Vec<f64>; 3],
    mod_scale_b: [Vec<f64>; 3],
    mod_shift_w: [Vec<f64>; 3],
    mod_shift_b: [Vec<f64>; 3],
    // field MLP
    mlp_w1: Vec<f64>,
    mlp_b1: Vec<f64>,
    mlp_w2: Vec<f64>,
    mlp_b2: Vec<f64>,
    // toy upsampler
    up_w: Vec<f64>,
    up_b: Vec<f64>,
    frozen: bool,
}

fn gaussian_vec(r: &mut SplitMix64, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * r.next_gaussian()).collect()
}

impl Mask23DParams {
    /// Deterministic random weights, not yet frozen (so they can be
    /// pretrained once).
    pub fn init(config: &Mask23DConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.num_classes;
        let (rr, f, l, hid) = (
            config.plane_resolution,
            config.plane_channels,
            config.feature_dim,
            config.mlp_hidden,
        );
        let mut r = SplitMix64::new(mix(&[seed, 0x3D]));
        let enc_w = [
            gaussian_vec(&mut r, ENC_CH * c * 9, (2.0 / (c as f64 * 9.0)).sqrt()),
            gaussian_vec(&mut r, ENC_CH * ENC_CH * 9, (2.0 / (ENC_CH as f64 * 9.0)).sqrt()),
            gaussian_vec(&mut r, ENC_CH * ENC_CH * 9, (2.0 / (ENC_CH as f64 * 9.0)).sqrt()),
        ];
        let enc_b = [vec![0.0; ENC_CH], vec![0.0; ENC_CH], vec![0.0; ENC_CH]];
        let lin_in = config.enc_flat() + config.latent_dim;
        let lin_out = config.style_rows * config.style_dim;
        let enc_lin = gaussian_vec(&mut r, lin_out * lin_in, 1.0 / (lin_in as f64).sqrt());

        let mk_plane = |r: &mut SplitMix64| gaussian_vec(r, f * rr * rr, 0.5);
        let base_planes = [mk_plane(&mut r), mk_plane(&mut r), mk_plane(&mut r)];
        let mk_mod_w = |r: &mut SplitMix64| gaussian_vec(r, f * config.style_dim, 0.3 / (config.style_dim as f64).sqrt());
        let mod_scale_w = [mk_mod_w(&mut r), mk_mod_w(&mut r), mk_mod_w(&mut r)];
        let mod_shift_w = [mk_mod_w(&mut r), mk_mod_w(&mut r), mk_mod_w(&mut r)];
        let mk_mod_b = |r: &mut SplitMix64| gaussian_vec(r, f, 0.1);
        let mod_scale_b = [mk_mod_b(&mut r), mk_mod_b(&mut r), mk_mod_b(&mut r)];
        let mod_shift_b = [mk_mod_b(&mut r), mk_mod_b(&mut r), mk_mod_b(&mut r)];

        let mlp_w1 = gaussian_vec(&mut r, hid * f, (2.0 / f as f64).sqrt());
        let mlp_b1 = gaussian_vec(&mut r, hid, 0.1);
        let mlp_w2 = gaussian_vec(&mut r, config.mlp_out() * hid, (2.0 / hid as f64).sqrt());
        let mut mlp_b2 = gaussian_vec(&mut r, config.mlp_out(), 0.1);
        mlp_b2[3] = 0.5; // bias the density head so the scene is not empty

        let up_w = gaussian_vec(&mut r, 3 * (3 + l) * 9, 0.1);
        let up_b = vec![0.0; 3];

        Ok(Mask23DParams {
            config: *config,
            enc_w,
            enc_b,
            enc_lin,
            base_planes,
            mod_scale_w,
            mod_scale_b,
            mod_shift_w,
            mod_shift_b,
            mlp_w1,
            mlp_b1,
            mlp_w2,
            mlp_b2,
            up_w,
            up_b,
            frozen: false,
        })
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Diagnostic teacher whose field is constant everywhere: density
    /// exactly `density`, color 0.5 per channel, uniform semantics. Used to
    /// pin down the renderer against closed-form transmittance.
    pub fn constant_field(config: &Mask23DConfig, density: f64, seed: u64) -> Result<Self> {
        if density < 0.0 {
            return Err(Error::Config("density must be >= 0".into()));
        }
        let mut p = Mask23DParams::init(config, seed)?;
        p.mlp_w2 = vec![0.0; p.mlp_w2.len()];
        p.mlp_b2 = vec![0.0; p.mlp_b2.len()];
        // invert softplus: x = ln(e^y - 1)
        p.mlp_b2[3] = if density == 0.0 {
            -745.0 // softplus underflows to 0 here
        } else {
            (density.exp() - 1.0).ln()
        };
        p.freeze();
        Ok(p)
    }

    /// Replaces the upsampler kernel with the identity on color channels
    /// (center tap 1).
    pub fn set_identity_upsampler(&mut self) {
        let l = self.config.feature_dim;
        self.up_w = vec![0.0; 3 * (3 + l) * 9];
        for ch in 0..3 {
            self.up_w[(ch * (3 + l) + ch) * 9 + 4] = 1.0;
        }
        self.up_b = vec![0.0; 3];
    }
}

/// Deterministic frozen teacher.
pub fn init_frozen(config: &Mask23DConfig, seed: u64) -> Result<Mask23DParams> {
    let mut p = Mask23DParams::init(config, seed)?;
    p.freeze();
    Ok(p)
}

/// Conditional style encoder: one-hot mask through the strided conv stack,
/// concatenated with z, then a linear map to L x D.
pub fn encode(params: &Mask23DParams, mask: &SegMask, z: &LatentCode) -> Result<StyleVector> {
    let cfg = &params.config;
    if mask.width != cfg.mask_resolution || mask.height != cfg.mask_resolution {
        return Err(Error::Config(format!(
            "mask {}x{} does not match teacher resolution {}",
            mask.width, mask.height, cfg.mask_resolution
        )));
    }
    if mask.num_classes != cfg.num_classes {
        return Err(Error::Config("mask class count mismatch".into()));
    }
    if z.data.len() != cfg.latent_dim {
        return Err(Error::Config(format!(
            "latent dim {} != config {}",
            z.data.len(),
            cfg.latent_dim
        )));
    }
    // one-hot in CHW
    let c = cfg.num_classes;
    let hw = mask.width * mask.height;
    let oh = one_hot(mask);
    let mut x = vec![0.0; c * hw];
    for p in 0..hw {
        for ch in 0..c {
            x[ch * hw + p] = oh.data[p * c + ch];
        }
    }
    let (mut cur, mut h, mut w) = (x, mask.height, mask.width);
    let mut cur_c = c;
    for layer in 0..3 {
        let (out, nh, nw) = nn::conv3x3_stride2_forward(
            &cur,
            cur_c,
            h,
            w,
            &params.enc_w[layer],
            &params.enc_b[layer],
            ENC_CH,
        );
        cur = nn::leaky_relu_forward(&out);
        h = nh;
        w = nw;
        cur_c = ENC_CH;
    }
    cur.extend_from_slice(&z.data);
    let out_len = cfg.style_rows * cfg.style_dim;
    let data = nn::linear_forward(&cur, &params.enc_lin, cur.len(), out_len);
    Ok(StyleVector {
        rows: cfg.style_rows,
        dim: cfg.style_dim,
        data,
    })
}

/// Deterministic training target for the alignment loss: encode with z = 0.
pub fn style_target(params: &Mask23DParams, mask: &SegMask) -> Result<StyleVector> {
    encode(params, mask, &LatentCode::zeros(params.config.latent_dim))
}

/// Style-modulated tri-plane synthesis: each base plane is scaled and
/// shifted channelwise by affine maps of the style rows; row r modulates
/// plane r mod 3.
pub fn synth_triplane(params: &Mask23DParams, w: &StyleVector) -> Result<TriPlane> {
    let cfg = &params.config;
    if w.rows != cfg.style_rows || w.dim != cfg.style_dim {
        return Err(Error::Config("style vector shape mismatch".into()));
    }
    let (rr, f, d) = (cfg.plane_resolution, cfg.plane_channels, cfg.style_dim);
    let mut planes: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for p in 0..3 {
        // mean of the style rows assigned to this plane
        let mut u = vec![0.0; d];
        let mut count = 0usize;
        for row in (p..w.rows).step_by(3) {
            for k in 0..d {
                u[k] += w.data[row * d + k];
            }
            count += 1;
        }
        if count > 0 {
            for v in u.iter_mut() {
                *v /= count as f64;
            }
        }
        let mut plane = vec![0.0; f * rr * rr];
        for ch in 0..f {
            let mut scale = 1.0 + params.mod_scale_b[p][ch];
            let mut shift = params.mod_shift_b[p][ch];
            for k in 0..d {
                scale += params.mod_scale_w[p][ch * d + k] * u[k];
                shift += params.mod_shift_w[p][ch * d + k] * u[k];
            }
            let base = &params.base_planes[p][ch * rr * rr..(ch + 1) * rr * rr];
            let out = &mut plane[ch * rr * rr..(ch + 1) * rr * rr];
            for (o, b) in out.iter_mut().zip(base) {
                *o = scale * b + shift;
            }
        }
        planes[p] = plane;
    }
    Ok(TriPlane {
        resolution: rr,
        channels: f,
        planes,
    })
}

/// Bilinear sample of the three planes at a point in [-1,1]^3 (clamped),
/// summed per channel. Plane coordinates: XY -> (x,y), XZ -> (x,z),
/// YZ -> (y,z).
pub fn sample_triplane(planes: &TriPlane, point: [f64; 3]) -> Vec<f64> {
    let (rr, f) = (planes.resolution, planes.channels);
    let clamp1 = |v: f64| v.clamp(-1.0, 1.0);
    let coords = [
        (clamp1(point[0]), clamp1(point[1])),
        (clamp1(point[0]), clamp1(point[2])),
        (clamp1(point[1]), clamp1(point[2])),
    ];
    let mut out = vec![0.0; f];
    for p in 0..3 {
        let (u, v) = coords[p];
        let gx = (u + 1.0) / 2.0 * (rr - 1) as f64;
        let gy = (v + 1.0) / 2.0 * (rr - 1) as f64;
        let x0 = (gx.floor() as usize).min(rr - 1);
        let y0 = (gy.floor() as usize).min(rr - 1);
        let x1 = (x0 + 1).min(rr - 1);
        let y1 = (y0 + 1).min(rr - 1);
        let fx = gx - x0 as f64;
        let fy = gy - y0 as f64;
        let plane = &planes.planes[p];
        for ch in 0..f {
            let base = ch * rr * rr;
            let v00 = plane[base + y0 * rr + x0];
            let v01 = plane[base + y0 * rr + x1];
            let v10 = plane[base + y1 * rr + x0];
            let v11 = plane[base + y1 * rr + x1];
            out[ch] += (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01)
                + fy * ((1.0 - fx) * v10 + fx * v11);
        }
    }
    out
}

/// Field MLP at one point: color via logistic squashing, density via
/// softplus, semantics via softmax, feature raw.
pub fn field_eval(params: &Mask23DParams, planes: &TriPlane, point: [f64; 3]) -> FieldSample {
    let feats = sample_triplane(planes, point);
    let (h, out) = mlp_eval(params, &feats);
    let _ = h;
    split_field(&params.config, &out)
}

fn mlp_eval(params: &Mask23DParams, feats: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let cfg = &params.config;
    let mut h = nn::linear_forward(feats, &params.mlp_w1, cfg.plane_channels, cfg.mlp_hidden);
    for (v, b) in h.iter_mut().zip(&params.mlp_b1) {
        *v += b;
    }
    let h = nn::leaky_relu_forward(&h);
    let mut out = nn::linear_forward(&h, &params.mlp_w2, cfg.mlp_hidden, cfg.mlp_out());
    for (v, b) in out.iter_mut().zip(&params.mlp_b2) {
        *v += b;
    }
    (h, out)
}

fn split_field(cfg: &Mask23DConfig, out: &[f64]) -> FieldSample {
    let l = cfg.feature_dim;
    FieldSample {
        color: [
            nn::sigmoid(out[0]),
            nn::sigmoid(out[1]),
            nn::sigmoid(out[2]),
        ],
        density: nn::softplus(out[3]),
        feature: out[4..4 + l].to_vec(),
        semantic: nn::softmax(&out[4 + l..]),
    }
}

/// One camera ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub dir: [f64; 3],
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Pinhole rays through pixel centers in a right-handed look-at frame,
/// row-major top-left first.
pub fn make_rays(camera: &Camera) -> Result<Vec<Ray>> {
    let fwd = sub(camera.look_at, camera.position);
    if norm(fwd) == 0.0 {
        return Err(Error::Config("camera position equals look_at".into()));
    }
    let fwd = normalize(fwd);
    let right = cross(fwd, camera.up);
    if norm(right) < 1e-12 {
        return Err(Error::Config("up vector parallel to view direction".into()));
    }
    let right = normalize(right);
    let up = cross(right, fwd);
    let half = (camera.fov_deg.to_radians() / 2.0).tan();
    let n = camera.image_size;
    let mut rays = Vec::with_capacity(n * n);
    for i in 0..n {
        let y_ndc = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
        for j in 0..n {
            let x_ndc = 2.0 * (j as f64 + 0.5) / n as f64 - 1.0;
            let dir = normalize([
                fwd[0] + half * (x_ndc * right[0] + y_ndc * up[0]),
                fwd[1] + half * (x_ndc * right[1] + y_ndc * up[1]),
                fwd[2] + half * (x_ndc * right[2] + y_ndc * up[2]),
            ]);
            rays.push(Ray {
                origin: camera.position,
                dir,
            });
        }
    }
    Ok(rays)
}

/// Emission-absorption quadrature along one ray.
///
/// Samples sit at segment midpoints t_i = near + (i + 0.5) (far - near)/N,
/// delta_i = (far - near)/N, tau_i = T_i (1 - exp(-sigma_i delta_i)) with
/// T_i = exp(-sum_{j<i} sigma_j delta_j). Color composites over the
/// background with the residual transmittance; semantics do not.
pub fn render_ray(
    params: &Mask23DParams,
    planes: &TriPlane,
    ray: &Ray,
    rcfg: &RenderConfig,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, f64) {
    let cfg = &params.config;
    let n = rcfg.samples_per_ray;
    let delta = (rcfg.far - rcfg.near) / n as f64;
    let mut color = vec![0.0; 3];
    let mut semantic = vec![0.0; cfg.num_classes];
    let mut feature = vec![0.0; cfg.feature_dim];
    let mut transmittance = 1.0;
    let mut weight_sum = 0.0;
    for i in 0..n {
        let t = rcfg.near + (i as f64 + 0.5) * delta;
        let point = [
            ray.origin[0] + t * ray.dir[0],
            ray.origin[1] + t * ray.dir[1],
            ray.origin[2] + t * ray.dir[2],
        ];
        let s = field_eval(params, planes, point);
        let absorb = 1.0 - (-s.density * delta).exp();
        let tau = transmittance * absorb;
        for k in 0..3 {
            color[k] += tau * s.color[k];
        }
        for k in 0..cfg.num_classes {
            semantic[k] += tau * s.semantic[k];
        }
        for k in 0..cfg.feature_dim {
            feature[k] += tau * s.feature[k];
        }
        weight_sum += tau;
        transmittance *= 1.0 - absorb;
    }
    let residual = 1.0 - weight_sum;
    for k in 0..3 {
        color[k] += residual * rcfg.background[k];
    }
    (color, semantic, feature, weight_sum)
}

/// Renders every pixel of `camera` for style vector `w`.
pub fn render_image(
    params: &Mask23DParams,
    w: &StyleVector,
    camera: &Camera,
    rcfg: &RenderConfig,
) -> Result<RenderOutput> {
    rcfg.validate()?;
    let planes = synth_triplane(params, w)?;
    let rays = make_rays(camera)?;
    let cfg = &params.config;
    let n = camera.image_size;
    let mut out = RenderOutput {
        width: n,
        height: n,
        num_classes: cfg.num_classes,
        feature_dim: cfg.feature_dim,
        color: vec![0.0; n * n * 3],
        semantic: vec![0.0; n * n * cfg.num_classes],
        feature: vec![0.0; n * n * cfg.feature_dim],
        weight_sum: vec![0.0; n * n],
    };
    for (p, ray) in rays.iter().enumerate() {
        let (c, s, f, ws) = render_ray(params, &planes, ray, rcfg);
        out.color[p * 3..(p + 1) * 3].copy_from_slice(&c);
        out.semantic[p * cfg.num_classes..(p + 1) * cfg.num_classes].copy_from_slice(&s);
        out.feature[p * cfg.feature_dim..(p + 1) * cfg.feature_dim].copy_from_slice(&f);
        out.weight_sum[p] = ws;
    }
    Ok(out)
}

/// Toy upsampler: 2x nearest-neighbor enlargement, then one 3x3 convolution
/// over the concatenated color and feature channels; the semantic map is
/// enlarged by nearest-neighbor only.
pub fn upsample(params: &Mask23DParams, render: &RenderOutput) -> (Tensor, Tensor) {
    let cfg = &params.config;
    let (h, w) = (render.height, render.width);
    let l = cfg.feature_dim;
    // to CHW
    let mut chw = vec![0.0; (3 + l) * h * w];
    for p in 0..h * w {
        for k in 0..3 {
            chw[k * h * w + p] = render.color[p * 3 + k];
        }
        for k in 0..l {
            chw[(3 + k) * h * w + p] = render.feature[p * l + k];
        }
    }
    let up = nn::upsample2_forward(&chw, 3 + l, h, w);
    let (oh, ow) = (2 * h, 2 * w);
    let conv = nn::conv3x3_forward(&up, 3 + l, oh, ow, &params.up_w, &params.up_b, 3);
    let mut color = vec![0.0; oh * ow * 3];
    for p in 0..oh * ow {
        for k in 0..3 {
            color[p * 3 + k] = conv[k * oh * ow + p];
        }
    }
    // semantics: nearest-neighbor per channel
    let c = cfg.num_classes;
    let mut sem = vec![0.0; oh * ow * c];
    for y in 0..oh {
        for x in 0..ow {
            let src = (y / 2) * w + x / 2;
            for k in 0..c {
                sem[(y * ow + x) * c + k] = render.semantic[src * c + k];
            }
        }
    }
    (
        Tensor {
            shape: vec![oh, ow, 3],
            data: color,
        },
        Tensor {
            shape: vec![oh, ow, c],
            data: sem,
        },
    )
}

/// Fits only the semantic head of the field MLP so the rendered semantic map
/// matches each input mask from the canonical frontal camera, then freezes.
///
/// Density, color, and features are untouched, so the per-ray transmittance
/// weights and hidden activations can be precomputed once per sample.
pub fn pretrain_semantic(
    mut params: Mask23DParams,
    masks: &[SegMask],
    steps: usize,
) -> Result<(Mask23DParams, Vec<f64>)> {
    if params.frozen {
        return Err(Error::State("cannot pretrain frozen parameters".into()));
    }
    let cfg = params.config;
    let res = 16usize; // pretrain render resolution
    let rcfg = RenderConfig {
        samples_per_ray: 8,
        ..Default::default()
    };
    let camera = Camera::frontal(res);
    let rays = make_rays(&camera)?;
    let c = cfg.num_classes;
    let hid = cfg.mlp_hidden;
    let nsamp = rcfg.samples_per_ray;
    let delta = (rcfg.far - rcfg.near) / nsamp as f64;

    // per sample, per ray, per step: (tau, hidden activations)
    struct RaySample {
        tau: f64,
        hidden: Vec<f64>,
    }
    let mut precomp: Vec<(Vec<Vec<RaySample>>, Vec<u8>)> = Vec::with_capacity(masks.len());
    for mask in masks {
        let w = style_target(&params, mask)?;
        let planes = synth_triplane(&params, &w)?;
        let mut per_ray = Vec::with_capacity(rays.len());
        for ray in &rays {
            let mut transmittance = 1.0;
            let mut samples = Vec::with_capacity(nsamp);
            for i in 0..nsamp {
                let t = rcfg.near + (i as f64 + 0.5) * delta;
                let point = [
                    ray.origin[0] + t * ray.dir[0],
                    ray.origin[1] + t * ray.dir[1],
                    ray.origin[2] + t * ray.dir[2],
                ];
                let feats = sample_triplane(&planes, point);
                let (h, out) = mlp_eval(&params, &feats);
                let density = nn::softplus(out[3]);
                let absorb = 1.0 - (-density * delta).exp();
                samples.push(RaySample {
                    tau: transmittance * absorb,
                    hidden: h,
                });
                transmittance *= 1.0 - absorb;
            }
            per_ray.push(samples);
        }
        // nearest-downsampled target labels
        let scale = mask.width / res;
        let mut target = vec![0u8; res * res];
        for y in 0..res {
            for x in 0..res {
                target[y * res + x] = mask.labels[(y * scale) * mask.width + x * scale];
            }
        }
        precomp.push((per_ray, target));
    }

    // semantic rows of the output layer
    let sem_off = 4 + cfg.feature_dim;
    let lr = 0.5;
    let n_pix = (res * res * masks.len()) as f64;
    let mut history = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let mut ce = 0.0;
        let mut gw = vec![0.0; c * hid];
        let mut gb = vec![0.0; c];
        for (per_ray, target) in &precomp {
            for (pix, samples) in per_ray.iter().enumerate() {
                let t_class = target[pix] as usize;
                // accumulate the rendered class distribution with a uniform
                // residual so it is a proper distribution
                let mut probs = vec![0.0; c];
                let mut weight_sum = 0.0;
                let mut per_sample_s: Vec<Vec<f64>> = Vec::with_capacity(samples.len());
                for s in samples {
                    let mut logits = vec![0.0; c];
                    for k in 0..c {
                        let row = &params.mlp_w2[(sem_off + k) * hid..(sem_off + k + 1) * hid];
                        logits[k] = params.mlp_b2[sem_off + k]
                            + row.iter().zip(&s.hidden).map(|(a, b)| a * b).sum::<f64>();
                    }
                    let sm = nn::softmax(&logits);
                    for k in 0..c {
                        probs[k] += s.tau * sm[k];
                    }
                    weight_sum += s.tau;
                    per_sample_s.push(sm);
                }
                let residual = (1.0 - weight_sum) / c as f64;
                for p in probs.iter_mut() {
                    *p += residual;
                }
                ce -= probs[t_class].max(1e-12).ln();
                if step == steps {
                    continue; // final evaluation only
                }
                // d ce / d probs[t] = -1 / (n probs[t])
                let gp = -1.0 / (n_pix * probs[t_class].max(1e-12));
                for (s, sm) in samples.iter().zip(&per_sample_s) {
                    // chain through the per-sample softmax
                    let dot = sm[t_class] * gp;
                    for k in 0..c {
                        let gk = s.tau * sm[k] * (if k == t_class { gp } else { 0.0 } - dot);
                        if gk == 0.0 {
                            continue;
                        }
                        gb[k] += gk;
                        let row = &mut gw[k * hid..(k + 1) * hid];
                        for (g, hv) in row.iter_mut().zip(&s.hidden) {
                            *g += gk * hv;
                        }
                    }
                }
            }
        }
        history.push(ce / n_pix);
        if step == steps {
            break;
        }
        for k in 0..c {
            params.mlp_b2[sem_off + k] -= lr * gb[k];
            let row = &mut params.mlp_w2[(sem_off + k) * hid..(sem_off + k + 1) * hid];
            for (wv, g) in row.iter_mut().zip(&gw[k * hid..(k + 1) * hid]) {
                *wv -= lr * g;
            }
        }
    }
    params.freeze();
    Ok((params, history))
}

// ---------------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TeacherManifest {
    config: Mask23DConfig,
    frozen: bool,
    tensors: Vec<String>,
}

fn named_tensors(p: &Mask23DParams) -> Vec<(String, Vec<f64>)> {
    let mut out: Vec<(String, Vec<f64>)> = Vec::new();
    for i in 0..3 {
        out.push((format!("enc{i}.weight"), p.enc_w[i].clone()));
        out.push((format!("enc{i}.bias"), p.enc_b[i].clone()));
    }
    out.push(("enc.linear".into(), p.enc_lin.clone()));
    for i in 0..3 {
        out.push((format!("plane{i}.base"), p.base_planes[i].clone()));
        out.push((format!("plane{i}.scale.weight"), p.mod_scale_w[i].clone()));
        out.push((format!("plane{i}.scale.bias"), p.mod_scale_b[i].clone()));
        out.push((format!("plane{i}.shift.weight"), p.mod_shift_w[i].clone()));
        out.push((format!("plane{i}.shift.bias"), p.mod_shift_b[i].clone()));
    }
    out.push(("mlp.w1".into(), p.mlp_w1.clone()));
    out.push(("mlp.b1".into(), p.mlp_b1.clone()));
    out.push(("mlp.w2".into(), p.mlp_w2.clone()));
    out.push(("mlp.b2".into(), p.mlp_b2.clone()));
    out.push(("up.weight".into(), p.up_w.clone()));
    out.push(("up.bias".into(), p.up_b.clone()));
    out
}

/// Writes the teacher as an S3DT tensor directory plus a JSON manifest.
pub fn save_teacher(params: &Mask23DParams, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let tensors = named_tensors(params);
    let manifest = TeacherManifest {
        config: params.config,
        frozen: params.frozen,
        tensors: tensors.iter().map(|(n, _)| n.clone()).collect(),
    };
    let mpath = dir.join("teacher.json");
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(mpath.display().to_string(), e))?;
    for (name, data) in tensors {
        let t = Tensor {
            shape: vec![data.len()],
            data,
        };
        imagery::save_tensor(&t, &dir.join(format!("{name}.s3dt")))?;
    }
    Ok(())
}

pub fn load_teacher(dir: &Path) -> Result<Mask23DParams> {
    let mpath = dir.join("teacher.json");
    let bytes = fs::read(&mpath).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    let manifest: TeacherManifest = serde_json::from_slice(&bytes)?;
    let mut params = Mask23DParams::init(&manifest.config, 0)?;
    let load = |name: &str| -> Result<Vec<f64>> {
        Ok(imagery::load_tensor(&dir.join(format!("{name}.s3dt")))?.data)
    };
    for i in 0..3 {
        params.enc_w[i] = load(&format!("enc{i}.weight"))?;
        params.enc_b[i] = load(&format!("enc{i}.bias"))?;
        params.base_planes[i] = load(&format!("plane{i}.base"))?;
        params.mod_scale_w[i] = load(&format!("plane{i}.scale.weight"))?;
        params.mod_scale_b[i] = load(&format!("plane{i}.scale.bias"))?;
        params.mod_shift_w[i] = load(&format!("plane{i}.shift.weight"))?;
        params.mod_shift_b[i] = load(&format!("plane{i}.shift.bias"))?;
    }
    params.enc_lin = load("enc.linear")?;
    params.mlp_w1 = load("mlp.w1")?;
    params.mlp_b1 = load("mlp.b1")?;
    params.mlp_w2 = load("mlp.w2")?;
    params.mlp_b2 = load("mlp.b2")?;
    params.up_w = load("up.weight")?;
    params.up_b = load("up.bias")?;
    params.frozen = manifest.frozen;
    Ok(params)
}
