use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use gblend::assets::{
    frame_stem, load_checkpoint, load_frame_params, load_model, load_sequence, load_video_dir,
    read_json, save_checkpoint, save_model, synth_dataset, write_json, write_png, FrameParamsFile,
    SynthConfig, FRAMES_FILE, INIT_MODEL_FILE, INIT_SPEC_FILE,
};
use gblend::metrics::{QualityReport, StabilityReport};
use gblend::model::{BlendshapeModel, Camera};
use gblend::trainer::{
    evaluate, initialize_model, mean_loss, render_frame, train, InitSpec, StepRecord, TrainConfig,
    TrainState,
};
use serde::Serialize;

use crate::args::{
    AnimateArgs, Command, EvaluateArgs, MetricsCommand, QualityArgs, RenderArgs, StabilityArgs,
    SynthArgs, TrainArgs, ViewArgs,
};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Render(a) => render(a),
        Command::Animate(a) => animate(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Metrics(MetricsCommand::Stability(a)) => stability(a),
        Command::Metrics(MetricsCommand::Quality(a)) => quality(a),
        Command::Synth(a) => synth(a),
    }
}

/// Accepts a sequence directory or a path to its frames file.
fn load_frames(path: &Path) -> Result<FrameParamsFile> {
    if path.is_dir() {
        return Ok(load_frame_params(path)?);
    }
    let params: FrameParamsFile = read_json(path)?;
    params.validate()?;
    Ok(params)
}

fn check_model(model: &BlendshapeModel, params: &FrameParamsFile) -> Result<()> {
    if model.expression_count() != params.expressions || model.joint_count() != params.joints {
        bail!(
            "model has {} blendshapes and {} joints, frames declare {} and {}",
            model.expression_count(),
            model.joint_count(),
            params.expressions,
            params.joints
        );
    }
    Ok(())
}

fn view_camera(camera: Camera, view: &ViewArgs) -> Result<Camera> {
    let (w, h) = match (view.width, view.height) {
        (None, None) => return Ok(camera),
        (Some(w), Some(h)) => (w, h),
        (Some(w), None) => (
            w,
            ((w as f64 * camera.height as f64 / camera.width as f64).round() as u32).max(1),
        ),
        (None, Some(h)) => (
            ((h as f64 * camera.width as f64 / camera.height as f64).round() as u32).max(1),
            h,
        ),
    };
    if w == 0 || h == 0 {
        bail!("output size must be at least 1x1, got {w}x{h}");
    }
    Ok(camera.resized(w, h))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).with_context(|| format!("{}", p.display()))?;
    }
    Ok(())
}

fn render(a: RenderArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let params = load_frames(&a.frames)?;
    check_model(&model, &params)?;
    let Some(frame) = params.frames.get(a.frame_index) else {
        bail!(
            "frame index {} is out of range: the sequence has {} frames (valid 0..={})",
            a.frame_index,
            params.frames.len(),
            params.frames.len() as i64 - 1
        );
    };
    let camera = view_camera(frame.camera(), &a.view)?;
    let out = render_frame(
        &model,
        &frame.psi(),
        &frame.pose(),
        &camera,
        a.view.background,
    )?;
    create_parent(&a.out)?;
    write_png(&a.out, &out.rgb)?;
    if let Some(p) = &a.alpha_out {
        create_parent(p)?;
        write_png(p, &out.alpha)?;
    }
    println!(
        "wrote {} ({}x{})",
        a.out.display(),
        camera.width,
        camera.height
    );
    Ok(())
}

#[derive(Serialize)]
struct ThroughputReport {
    frames: usize,
    /// Rendering time only; image encoding is excluded.
    elapsed_s: f64,
    fps: f64,
}

fn animate(a: AnimateArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let params = load_frames(&a.frames)?;
    check_model(&model, &params)?;
    if params.frames.is_empty() {
        bail!("sequence has no frames to render");
    }
    fs::create_dir_all(&a.out_dir).with_context(|| format!("{}", a.out_dir.display()))?;
    let mut elapsed = 0.0;
    for f in &params.frames {
        let camera = view_camera(f.camera(), &a.view)?;
        let started = Instant::now();
        let out = render_frame(&model, &f.psi(), &f.pose(), &camera, a.view.background)?;
        elapsed += started.elapsed().as_secs_f64();
        write_png(
            a.out_dir.join(format!("{}.png", frame_stem(f.index))),
            &out.rgb,
        )?;
    }
    let report = ThroughputReport {
        frames: params.frames.len(),
        elapsed_s: elapsed,
        fps: params.frames.len() as f64 / elapsed.max(f64::MIN_POSITIVE),
    };
    println!(
        "rendered {} frames in {:.3} s ({:.2} fps)",
        report.frames, report.elapsed_s, report.fps
    );
    if let Some(p) = &a.report {
        create_parent(p)?;
        write_json(p, &report)?;
    }
    Ok(())
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    let mut c = TrainConfig {
        seed: a.seed,
        ..TrainConfig::default()
    };
    let set = |dst: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *dst = v;
        }
    };
    set(&mut c.learning_rates.center, a.lr_center);
    set(&mut c.learning_rates.scale, a.lr_scale);
    set(&mut c.learning_rates.rotation, a.lr_rotation);
    set(&mut c.learning_rates.opacity, a.lr_opacity);
    set(&mut c.learning_rates.sh, a.lr_sh);
    set(&mut c.position_lr_scale, a.position_lr_scale);
    set(&mut c.loss_weights.rgb, a.weight_rgb);
    set(&mut c.loss_weights.alpha, a.weight_alpha);
    set(&mut c.loss_weights.reg, a.weight_reg);
    set(&mut c.loss_weights.l1_fraction, a.l1_fraction);
    c.iterations = a.iters.unwrap_or(c.iterations);
    c.lr_decay = a.lr_decay.or(c.lr_decay);
    c.holdout = a.holdout.or(c.holdout);
    c.checkpoint_every = a.checkpoint_every.unwrap_or(c.checkpoint_every);
    c.neutral_count = a.neutral_count.unwrap_or(c.neutral_count);
    c.mouth_count = a.mouth_count.unwrap_or(c.mouth_count);
    c.sh_degree = a.sh_degree.unwrap_or(c.sh_degree);
    c.background = a.background.unwrap_or(c.background);
    c
}

/// Starting state: `--resume`, else `--init-model`, else the data directory's
/// `init.gbav`, else its `init.json`, else a default spec sized from the
/// sequence header.
fn starting_state(
    a: &TrainArgs,
    config: &mut TrainConfig,
    params: &FrameParamsFile,
) -> Result<TrainState> {
    if let Some(p) = &a.resume {
        let state = load_checkpoint(p)?;
        config.seed = state.seed;
        return Ok(state);
    }
    let spec_path = a.data_dir.join(INIT_SPEC_FILE);
    let spec: Option<InitSpec> = if spec_path.is_file() {
        Some(read_json(&spec_path)?)
    } else {
        None
    };
    let model_path = a
        .init_model
        .clone()
        .or_else(|| Some(a.data_dir.join(INIT_MODEL_FILE)).filter(|p| p.is_file()));
    if let Some(p) = model_path {
        let model = load_model(&p)?;
        config.sh_degree = model.sh_degree();
        let volume = config.cylinder.or(spec.and_then(|s| s.cylinder));
        return Ok(TrainState::new(model, a.seed, volume));
    }
    let spec = spec.unwrap_or_else(|| InitSpec::new(params.expressions, params.joints));
    let init = initialize_model(config, &spec)?;
    Ok(TrainState::new(init.model, a.seed, init.volume))
}

#[derive(Serialize)]
struct TrainSummary {
    iterations: u64,
    seed: u64,
    gaussians: usize,
    train_frames: usize,
    heldout_frames: usize,
    initial_loss: f64,
    final_loss: f64,
    loss_ratio: f64,
    heldout_psnr_db: Option<f64>,
    heldout_ssim: Option<f64>,
}

pub const LOG_FILE: &str = "log.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MODEL_FILE: &str = "model.gbav";
pub const CHECKPOINT_DIR: &str = "checkpoints";

fn checkpoint_path(out: &Path, iteration: u64) -> PathBuf {
    out.join(CHECKPOINT_DIR)
        .join(format!("{iteration:06}.gbck"))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let sequence = load_sequence(&a.data_dir)?;
    if sequence.is_empty() {
        bail!(
            "{}: sequence has no frames",
            a.data_dir.join(FRAMES_FILE).display()
        );
    }
    let frames = sequence.frame_data();
    let mut config = train_config(&a);
    config.validate()?;
    let mut state = starting_state(&a, &mut config, &sequence.params)?;
    check_model(&state.model, &sequence.params)?;

    let held = config.holdout_for(frames.len());
    let (train_frames, held_frames) = frames.split_at(frames.len() - held);

    fs::create_dir_all(a.out.join(CHECKPOINT_DIR))
        .with_context(|| format!("{}", a.out.display()))?;
    let log_path = a.out.join(LOG_FILE);
    let log_file = if a.resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .with_context(|| format!("{}", log_path.display()))?;
    let mut log = BufWriter::new(log_file);

    let initial = mean_loss(&state.model, state.volume.as_ref(), train_frames, &config)?;
    let started = Instant::now();
    train(&mut state, train_frames, &config, |s, rec: &StepRecord| {
        let line = serde_json::to_string(rec).expect("step record serializes");
        writeln!(log, "{line}").map_err(|e| io_error(&log_path, e))?;
        if a.progress_every > 0 && s.iteration % a.progress_every == 0 {
            eprintln!("iter {:>6}  loss {:.6}", s.iteration, rec.loss);
        }
        if config.checkpoint_every > 0 && s.iteration % config.checkpoint_every == 0 {
            save_checkpoint(checkpoint_path(&a.out, s.iteration), s)?;
        }
        Ok(())
    })?;
    log.flush()
        .with_context(|| format!("{}", log_path.display()))?;
    let elapsed = started.elapsed().as_secs_f64();

    save_model(a.out.join(MODEL_FILE), &state.model)?;
    save_checkpoint(checkpoint_path(&a.out, state.iteration), &state)?;
    let final_loss = mean_loss(&state.model, state.volume.as_ref(), train_frames, &config)?;
    let quality = if held_frames.is_empty() {
        None
    } else {
        Some(evaluate(&state.model, held_frames, config.background)?)
    };
    let summary = TrainSummary {
        iterations: state.iteration,
        seed: state.seed,
        gaussians: state.model.neutral.len() + state.model.mouth.len(),
        train_frames: train_frames.len(),
        heldout_frames: held_frames.len(),
        initial_loss: initial,
        final_loss,
        loss_ratio: final_loss / initial,
        heldout_psnr_db: quality.as_ref().map(|q| q.mean_psnr_db),
        heldout_ssim: quality.as_ref().map(|q| q.mean_ssim),
    };
    write_json(a.out.join(SUMMARY_FILE), &summary)?;
    println!(
        "trained {} iterations in {elapsed:.1} s: loss {initial:.6} -> {final_loss:.6} (ratio {:.4})",
        summary.iterations, summary.loss_ratio
    );
    if let Some(q) = quality {
        println!(
            "held-out ({} frames): PSNR {:.2} dB, SSIM {:.4}",
            q.frames, q.mean_psnr_db, q.mean_ssim
        );
    }
    Ok(())
}

fn io_error(path: &Path, source: std::io::Error) -> gblend::Error {
    gblend::Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let sequence = load_sequence(&a.data_dir)?;
    check_model(&model, &sequence.params)?;
    let frames = sequence.frame_data();
    let held = match a.holdout {
        Some(0) => frames.len(),
        Some(h) => h.min(frames.len()),
        None => TrainConfig::default().holdout_for(frames.len()),
    };
    if held == 0 {
        bail!(
            "sequence of {} frames leaves nothing to evaluate",
            frames.len()
        );
    }
    let report = evaluate(&model, &frames[frames.len() - held..], a.background)?;
    print!("{}", report.to_text());
    if let Some(p) = &a.json {
        create_parent(p)?;
        write_json(p, &report)?;
    }
    Ok(())
}

fn stability(a: StabilityArgs) -> Result<()> {
    let video = load_video_dir(&a.video_dir)?;
    let report = StabilityReport::compute(&video)?;
    print!("{}", report.to_text());
    if let Some(p) = &a.json {
        create_parent(p)?;
        write_json(p, &report)?;
    }
    Ok(())
}

fn quality(a: QualityArgs) -> Result<()> {
    let rendered = load_video_dir(&a.render_dir)?;
    let target = load_video_dir(&a.target_dir)?;
    let report = QualityReport::compute(&rendered, &target)?;
    print!("{}", report.to_text());
    if let Some(p) = &a.json {
        create_parent(p)?;
        write_json(p, &report)?;
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let defaults = SynthConfig::default();
    let config = SynthConfig {
        gaussians: a.gaussians,
        mouth_gaussians: a.mouth_gaussians,
        blendshapes: a.blendshapes,
        frames: a.frames,
        width: a.width,
        height: a.height,
        sh_degree: a.sh_degree,
        seed: a.seed,
        color_noise: a.color_noise.unwrap_or(defaults.color_noise),
        scale_noise: a.scale_noise.unwrap_or(defaults.scale_noise),
        opacity_noise: a.opacity_noise.unwrap_or(defaults.opacity_noise),
    };
    let data = synth_dataset(&config, &a.out_dir)?;
    println!(
        "wrote {} frames of {}x{} with {} gaussians to {}",
        data.images.len(),
        config.width,
        config.height,
        data.ground_truth.neutral.len() + data.ground_truth.mouth.len(),
        a.out_dir.display()
    );
    Ok(())
}
