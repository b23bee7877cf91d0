use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use sketch3d::augment::{binarize, dilate, erode, random_augment};
use sketch3d::config::RunConfig;
use sketch3d::datagen;
use sketch3d::embedview::{affinities, collect_embeddings, export_scatter, silhouette, tsne_embed};
use sketch3d::imagery::{
    colorize_mask, load_mask_pgm, load_pgm, save_mask_pgm, save_pgm, save_ppm, ProbMap, RgbImage,
    SegMask,
};
use sketch3d::losses::{
    cross_entropy_loss, dice_loss, style_vector_loss, total_loss, LossConfig,
};
use sketch3d::mask23d::{
    self, encode, init_frozen, load_teacher, render_image, save_teacher, Camera,
    LatentCode, Mask23DConfig, Mask23DParams, RenderConfig, StyleVector,
};
use sketch3d::metrics::{average_precision, confusion, evaluate, miou, ConfusionMatrix};
use sketch3d::rng::mix;
use sketch3d::sketch2mask::{init_params, load_params, predict_mask, BottleneckEmbedding};
use sketch3d::training::{finite_diff_check, train_loop};
use sketch3d::{Error, Result};

/// Sketch-to-3D desk-scale pipeline.
#[derive(Parser)]
#[command(name = "sketch3d", version, about)]
struct Cli {
    /// JSON run configuration; omitted sections use desk-scale defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic sketch/mask dataset.
    GenData {
        /// Dataset root to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the sketch-to-mask network against a frozen teacher.
    Train {
        /// Dataset root (from gen-data).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints, teacher, and logs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Split to evaluate.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Sketch -> mask -> 3D orbit renders.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        /// Input sketch PGM.
        #[arg(long)]
        sketch: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Orbit frame count.
        #[arg(long, default_value_t = 8)]
        frames: usize,
        /// Rendered image size in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Sample the latent code from this seed instead of z = 0.
        #[arg(long)]
        latent_seed: Option<u64>,
    },
    /// Render orbit frames for an existing label mask.
    Render {
        #[arg(long)]
        teacher: PathBuf,
        /// Input mask PGM (raw labels).
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        latent_seed: Option<u64>,
    },
    /// Project test-split bottleneck embeddings to 2D.
    Tsne {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output prefix; writes prefix.csv and prefix.ppm.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the three augmentation branch outputs for one sketch.
    AugmentPreview {
        #[arg(long)]
        sketch: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the gradient finite-difference suite and all analytic oracles.
    Selftest,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap prints help/version on stdout with success status
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Value(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.config)?;
    match cli.command {
        Command::GenData { out } => {
            let manifest = cfg.data.to_manifest(cfg.seed);
            datagen::generate_dataset(&out, &manifest)?;
            println!("wrote {} samples under {}", manifest.count, out.display());
            Ok(())
        }
        Command::Train { data, out } => cmd_train(&cfg, &data, &out),
        Command::Eval {
            checkpoint,
            data,
            split,
        } => cmd_eval(&checkpoint, &data, &split),
        Command::Infer {
            checkpoint,
            teacher,
            sketch,
            out,
            frames,
            size,
            latent_seed,
        } => cmd_infer(
            &cfg,
            &checkpoint,
            &teacher,
            &sketch,
            &out,
            frames,
            size,
            latent_seed,
        ),
        Command::Render {
            teacher,
            mask,
            out,
            frames,
            size,
            latent_seed,
        } => {
            let teacher = load_teacher(&teacher)?;
            let mask = load_mask_pgm(&mask, teacher.config.num_classes)?;
            let z = latent_code(&teacher.config, latent_seed);
            let w = encode(&teacher, &mask, &z)?;
            render_orbit(&teacher, &w, &cfg.render, frames, size, &out)
        }
        Command::Tsne {
            checkpoint,
            data,
            out,
        } => cmd_tsne(&cfg, &checkpoint, &data, &out),
        Command::AugmentPreview { sketch, out, seed } => {
            let s = load_pgm(&sketch)?;
            let policy = cfg.augment;
            policy.validate()?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display().to_string(), e))?;
            save_pgm(
                &binarize(&s, policy.binarize_threshold),
                &out.join("identity.pgm"),
            )?;
            save_pgm(&dilate(&s, policy.dilate_kernel)?, &out.join("dilate.pgm"))?;
            save_pgm(&erode(&s, policy.erode_kernel)?, &out.join("erode.pgm"))?;
            save_pgm(&random_augment(&s, &policy, seed)?, &out.join("sampled.pgm"))?;
            println!("wrote 4 previews under {}", out.display());
            Ok(())
        }
        Command::Selftest => cmd_selftest(),
    }
}

fn latent_code(cfg: &Mask23DConfig, seed: Option<u64>) -> LatentCode {
    match seed {
        Some(s) => LatentCode::standard_normal(cfg.latent_dim, s),
        None => LatentCode::zeros(cfg.latent_dim),
    }
}

fn cmd_train(cfg: &RunConfig, data: &PathBuf, out: &PathBuf) -> Result<()> {
    let train_data = datagen::load_split(data, "train")?;
    let teacher = init_frozen(&cfg.teacher, mix(&[cfg.seed, 0x7E]))?;
    save_teacher(&teacher, &out.join("teacher"))?;
    let params = init_params(&cfg.unet, mix(&[cfg.seed, 0x0E]))?;
    let started = Instant::now();
    let (params, history) = train_loop(
        params,
        &teacher,
        &train_data,
        &cfg.train,
        &cfg.loss,
        Some(&cfg.augment),
        Some(out),
    )?;
    println!(
        "trained {} steps in {:.1}s: L_total {:.4} -> {:.4}",
        history.len(),
        started.elapsed().as_secs_f64(),
        history.first().map(|r| r.l_total).unwrap_or(f64::NAN),
        history.last().map(|r| r.l_total).unwrap_or(f64::NAN),
    );
    let test_data = datagen::load_split(data, "test")?;
    if !test_data.is_empty() {
        let report = eval_params(&params, &test_data)?;
        println!("test mIoU {:.4}  mAP {:.4}", report.0, report.1);
    }
    Ok(())
}

fn eval_params(
    params: &sketch3d::sketch2mask::UNetParams,
    data: &[(sketch3d::imagery::Sketch, SegMask)],
) -> Result<(f64, f64)> {
    let mut preds: Vec<SegMask> = Vec::with_capacity(data.len());
    let mut probs: Vec<ProbMap> = Vec::with_capacity(data.len());
    for (sketch, _) in data {
        let (mask, prob) = predict_mask(params, sketch)?;
        preds.push(mask);
        probs.push(prob);
    }
    let truths: Vec<SegMask> = data.iter().map(|(_, m)| m.clone()).collect();
    let report = evaluate(&preds, &probs, &truths)?;
    Ok((report.miou, report.mean_ap))
}

fn cmd_eval(checkpoint: &PathBuf, data: &PathBuf, split: &str) -> Result<()> {
    let params = load_params(checkpoint)?;
    let samples = datagen::load_split(data, split)?;
    if samples.is_empty() {
        return Err(Error::Value(format!("split '{split}' is empty")));
    }
    let (miou_v, map_v) = eval_params(&params, &samples)?;
    println!("split {split}: {} samples", samples.len());
    println!("mIoU {miou_v:.6}");
    println!("mAP {map_v:.6}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_infer(
    cfg: &RunConfig,
    checkpoint: &PathBuf,
    teacher_dir: &PathBuf,
    sketch: &PathBuf,
    out: &PathBuf,
    frames: usize,
    size: usize,
    latent_seed: Option<u64>,
) -> Result<()> {
    let params = load_params(checkpoint)?;
    let teacher = load_teacher(teacher_dir)?;
    let s = load_pgm(sketch)?;
    let (mask, _) = predict_mask(&params, &s)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    save_mask_pgm(&mask, &out.join("mask.pgm"))?;
    save_ppm(&colorize_mask(&mask), &out.join("mask_color.ppm"))?;
    let z = latent_code(&teacher.config, latent_seed);
    let w = encode(&teacher, &mask, &z)?;
    render_orbit(&teacher, &w, &cfg.render, frames, size, out)
}

/// Renders a frontal view plus `frames` orbit frames over +-45 degrees of
/// azimuth.
fn render_orbit(
    teacher: &Mask23DParams,
    w: &StyleVector,
    rcfg: &RenderConfig,
    frames: usize,
    size: usize,
    out: &PathBuf,
) -> Result<()> {
    if frames == 0 || size == 0 {
        return Err(Error::Config("frames and size must be > 0".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let frontal = render_image(teacher, w, &Camera::frontal(size), rcfg)?;
    save_ppm(&render_to_rgb(&frontal), &out.join("frontal.ppm"))?;
    for k in 0..frames {
        let azimuth = if frames == 1 {
            0.0
        } else {
            -45.0 + 90.0 * k as f64 / (frames - 1) as f64
        };
        let cam = Camera::orbit(size, azimuth, 10.0);
        let frame = render_image(teacher, w, &cam, rcfg)?;
        save_ppm(&render_to_rgb(&frame), &out.join(format!("frame_{k:02}.ppm")))?;
    }
    println!("wrote frontal + {frames} orbit frames under {}", out.display());
    Ok(())
}

fn render_to_rgb(out: &mask23d::RenderOutput) -> RgbImage {
    RgbImage {
        width: out.width,
        height: out.height,
        data: out.color.iter().map(|&v| v.clamp(0.0, 1.0)).collect(),
    }
}

fn cmd_tsne(cfg: &RunConfig, checkpoint: &PathBuf, data: &PathBuf, out: &PathBuf) -> Result<()> {
    let params = load_params(checkpoint)?;
    let samples = datagen::load_split(data, "test")?;
    let set = collect_embeddings(&params, &samples)?;
    let p = affinities(&set.points, set.n, set.d, cfg.tsne.perplexity)?;
    let result = tsne_embed(&p, set.n, &cfg.tsne)?;
    export_scatter(&result.coords, &set.labels, params.config.num_classes, out)?;
    println!(
        "embedded {} points: KL {:.4} -> {:.4}",
        set.n, result.initial_kl, result.final_kl
    );
    if let Ok(s) = silhouette(&result.coords, set.n, 2, &set.labels) {
        println!("silhouette {s:.4}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// selftest
// ---------------------------------------------------------------------------

fn check(name: &str, pass: bool, detail: String, failures: &mut usize) {
    if pass {
        println!("ok   {name} ({detail})");
    } else {
        println!("FAIL {name} ({detail})");
        *failures += 1;
    }
}

fn cmd_selftest() -> Result<()> {
    use sketch3d::imagery::OneHotMask;

    let mut failures = 0usize;
    let started = Instant::now();

    // gradient check on the 16x16 depth-2 configuration
    {
        let (params, sketch, mask, w_plus) = sketch3d::training::fd_fixture(7);
        let report = finite_diff_check(&params, &sketch, &mask, &w_plus, &LossConfig::default())?;
        check(
            "finite-difference gradients",
            report.pass,
            format!("max rel err {:.2e} over {} tensors", report.max_rel_err, report.per_tensor.len()),
            &mut failures,
        );
    }

    // loss oracles
    {
        let y = OneHotMask {
            width: 1,
            height: 1,
            num_classes: 4,
            data: vec![1.0, 0.0, 0.0, 0.0],
        };
        let yhat = ProbMap::new(1, 1, 4, vec![0.25; 4])?;
        let ce = cross_entropy_loss(&y, &yhat)?;
        check(
            "cross-entropy uniform C=4",
            (ce - 4.0f64.ln()).abs() < 1e-9,
            format!("{ce:.9} vs ln 4"),
            &mut failures,
        );

        let y = OneHotMask {
            width: 4,
            height: 1,
            num_classes: 2,
            data: vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0],
        };
        let yhat = ProbMap::new(4, 1, 2, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0])?;
        let dice = dice_loss(&y, &yhat, 1e-6)?;
        check(
            "dice hand case",
            (dice - 2.0 / 3.0).abs() < 1e-6,
            format!("{dice:.9} vs 2/3"),
            &mut failures,
        );

        let w_plus = StyleVector {
            rows: 1,
            dim: 2,
            data: vec![1.0, 2.0],
        };
        let w_e = BottleneckEmbedding {
            rows: 1,
            dim: 2,
            data: vec![0.0, 0.0],
        };
        let sv = style_vector_loss(&w_plus, &w_e)?;
        check("style vector loss (1,2) vs (0,0)", sv == 5.0, format!("{sv}"), &mut failures);

        let cfg = LossConfig {
            lambda_sv: 2.0,
            lambda_ce: 3.0,
            lambda_dice: 0.5,
            ..Default::default()
        };
        let t = total_loss(1.0, 2.0, 4.0, &cfg).l_total;
        check(
            "total loss linearity",
            (t - 10.0).abs() < 1e-12,
            format!("{t} vs 10"),
            &mut failures,
        );
    }

    // renderer closed form
    {
        let tc = Mask23DConfig {
            mask_resolution: 16,
            latent_dim: 4,
            style_rows: 4,
            style_dim: 8,
            plane_resolution: 8,
            plane_channels: 4,
            feature_dim: 2,
            num_classes: 6,
            mlp_hidden: 8,
        };
        let teacher = Mask23DParams::constant_field(&tc, 2.0f64.ln(), 0)?;
        let w = StyleVector {
            rows: 4,
            dim: 8,
            data: vec![0.0; 32],
        };
        let planes = mask23d::synth_triplane(&teacher, &w)?;
        let ray = mask23d::Ray {
            origin: [0.0, 0.0, 2.5],
            dir: [0.0, 0.0, -1.0],
        };
        let rcfg = RenderConfig {
            samples_per_ray: 2,
            near: 1.0,
            far: 3.0,
            background: [0.0, 0.0, 0.0],
        };
        let (_, _, _, ws) = mask23d::render_ray(&teacher, &planes, &ray, &rcfg);
        check(
            "two-sample transmittance",
            (ws - 0.75).abs() < 1e-9,
            format!("weight sum {ws:.9} vs 0.75"),
            &mut failures,
        );
    }

    // metric oracles
    {
        let truth = SegMask::new(4, 1, 3, vec![0, 0, 1, 1])?;
        let pred = SegMask::new(4, 1, 3, vec![0, 1, 1, 1])?;
        let m = confusion(&pred, &truth)?;
        let v = miou(&m)?;
        check(
            "mIoU hand case",
            (v - 7.0 / 12.0).abs() < 1e-12,
            format!("{v:.9} vs 7/12"),
            &mut failures,
        );
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false])
            .unwrap_or(f64::NAN);
        check(
            "AP hand case",
            (ap - 5.0 / 6.0).abs() < 1e-12,
            format!("{ap:.9} vs 5/6"),
            &mut failures,
        );
        let perfect = confusion(&truth, &truth)?;
        check(
            "perfect prediction",
            miou(&perfect)? == 1.0,
            "mIoU 1".into(),
            &mut failures,
        );
        let empty = ConfusionMatrix::zeros(3);
        check(
            "empty confusion rejected",
            miou(&empty).is_err(),
            "undefined-metric error".into(),
            &mut failures,
        );
    }

    println!(
        "selftest: {} checks failed in {:.1}s",
        failures,
        started.elapsed().as_secs_f64()
    );
    if failures > 0 {
        return Err(Error::Numeric(format!("{failures} selftest checks failed")));
    }
    Ok(())
}
