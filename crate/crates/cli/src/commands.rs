//! Implementations of the pipeline subcommands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use serde::Serialize;
use sketchcolour_core::adapters::{count_trainable, ControlNetBaseline};
use sketchcolour_core::checkpoint::{Archive, CheckpointHeader, Stage};
use sketchcolour_core::config::{resolve_config, ExperimentConfig};
use sketchcolour_core::dataset::{
    fill_and_crop, manifest_from_jsonl, manifest_to_jsonl, plan_corpus, render_planned, Split,
};
use sketchcolour_core::denoiser::Denoiser;
use sketchcolour_core::diffusion::{sample, ConditionalDenoiser, DiffusionSchedule, SamplerConfig};
use sketchcolour_core::metrics::{evaluate, ExternalFeatures, MetricReport};
use sketchcolour_core::sketcher::{binarize, sketch_video};
use sketchcolour_core::tensor::Tensor;
use sketchcolour_core::train::{self, Corpus};
use sketchcolour_core::video::{luminance, VideoTensor};
use sketchcolour_core::videovae::{pca_channel_projection, VideoVae};
use sketchcolour_core::{Error, LatentTensor, Result};

use crate::frames;
use crate::memtrack;
use crate::ConfigArgs;

pub(crate) fn resolve(args: &ConfigArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let file_text = match &args.config {
        Some(p) => Some(std::fs::read_to_string(p)?),
        None => None,
    };
    let cfg = resolve_config(args.preset.as_deref(), file_text.as_deref(), &args.sets)?;
    let cache = args
        .cache
        .clone()
        .or_else(|| std::env::var_os("SKETCHCOLOUR_CACHE").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("sketchcolour-cache"));
    Ok((cfg, cache))
}

fn corpus_dir(cache: &Path) -> PathBuf {
    cache.join("corpus")
}

fn ckpt_path(cache: &Path, name: &str) -> PathBuf {
    cache.join("checkpoints").join(format!("{name}.ckpt"))
}

fn logs_dir(cache: &Path) -> PathBuf {
    cache.join("logs")
}

fn write_log_csv(cache: &Path, name: &str, csv: &str) -> Result<()> {
    let dir = logs_dir(cache);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(name), csv)?;
    Ok(())
}

/// Corpus identity: hash of (root seed, data parameters).
fn corpus_hash(cfg: &ExperimentConfig) -> String {
    #[derive(Serialize)]
    struct CorpusId<'a> {
        root_seed: u64,
        data: &'a sketchcolour_core::dataset::DataConfig,
    }
    let json =
        serde_json::to_string(&CorpusId { root_seed: cfg.root_seed, data: &cfg.data }).unwrap();
    use sketchcolour_core::rng::derive_seed;
    format!("{:016x}", derive_seed(0xC0_4B05, &json, 0))
}

fn load_corpus(cache: &Path, _cfg: &ExperimentConfig) -> Result<Corpus> {
    let dir = corpus_dir(cache);
    let manifest_path = dir.join("manifest.jsonl");
    if !manifest_path.exists() {
        return Err(Error::Contract(format!(
            "no corpus at {} — run `sketchcolour gen-data` first",
            dir.display()
        )));
    }
    let records = manifest_from_jsonl(&std::fs::read_to_string(&manifest_path)?)?;
    let mut clips = BTreeMap::new();
    for r in &records {
        clips.insert(r.clip_id.clone(), frames::read_video_dir(&dir.join(&r.path))?);
    }
    Ok(Corpus { records, clips })
}

pub(crate) fn gen_data(args: &ConfigArgs, force: bool) -> Result<ExitCode> {
    let (cfg, cache) = resolve(args)?;
    let dir = corpus_dir(&cache);
    let sentinel = dir.join("corpus.json");
    let hash = corpus_hash(&cfg);
    if sentinel.exists() {
        let existing: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&sentinel)?)?;
        let same = existing.get("corpus_hash").and_then(|v| v.as_str()) == Some(hash.as_str());
        if same && !force {
            println!("[gen-data] corpus at {} is up to date (hash {hash})", dir.display());
            return Ok(ExitCode::SUCCESS);
        }
        if !same && !force {
            return Err(Error::Contract(format!(
                "a corpus generated under a different config exists at {}; pass --force to replace it",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(&dir)?;
    }
    std::fs::create_dir_all(&dir)?;
    let plan = plan_corpus(&cfg.data, cfg.root_seed);
    for p in &plan {
        let clip = render_planned(&cfg.data, p)?;
        frames::write_video_dir(&dir.join(&p.record.path), &clip)?;
    }
    let records: Vec<_> = plan.iter().map(|p| p.record.clone()).collect();
    std::fs::write(dir.join("manifest.jsonl"), manifest_to_jsonl(&records)?)?;
    std::fs::write(
        &sentinel,
        serde_json::to_string_pretty(&serde_json::json!({
            "corpus_hash": hash,
            "train_clips": cfg.data.train_clips,
            "test_clips": cfg.data.test_clips,
        }))?,
    )?;
    let train = records.iter().filter(|r| r.split == Split::Train).count();
    println!(
        "[gen-data] wrote {} clips ({} train / {} test) to {}",
        records.len(),
        train,
        records.len() - train,
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub(crate) fn train_vae(args: &ConfigArgs) -> Result<ExitCode> {
    let (cfg, cache) = resolve(args)?;
    let corpus = load_corpus(&cache, &cfg)?;
    println!("[train-vae] {} steps on {} clips", cfg.train.vae_steps, corpus.ids(Split::Train).len());
    let outcome = train::train_vae(&cfg, &corpus)?;
    write_log_csv(&cache, "vae_loss.csv", &outcome.log.to_csv())?;
    let mut header = CheckpointHeader::new(cfg.training_fingerprint(), Stage::Vae, cfg.train.vae_steps);
    header.metrics_snapshot.insert("holdout_mae".into(), outcome.metrics.holdout_mae);
    header.metrics_snapshot.insert("latent_scale".into(), outcome.metrics.latent_scale);
    header.metrics_snapshot.insert("sketch_pca_corr".into(), outcome.metrics.sketch_pca_corr);
    if let Some(l) = outcome.log.final_loss() {
        header.metrics_snapshot.insert("final_loss".into(), l);
    }
    let path = ckpt_path(&cache, "vae");
    if let Some(step) = outcome.log.diverged_at {
        header.step = step;
        Archive::from_store(header, &outcome.vae.store).save(&path)?;
        println!("[train-vae] diverged at step {step}; last-good checkpoint saved to {}", path.display());
        return Err(Error::Numeric(format!("vae training diverged at step {step}")));
    }
    Archive::from_store(header, &outcome.vae.store).save(&path)?;
    println!(
        "[train-vae] done: holdout MAE {:.5}, latent scale {:.4}, sketch-PCA corr {:.4} → {}",
        outcome.metrics.holdout_mae,
        outcome.metrics.latent_scale,
        outcome.metrics.sketch_pca_corr,
        path.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub(crate) fn load_vae(cfg: &ExperimentConfig, path: &Path) -> Result<(VideoVae, CheckpointHeader)> {
    let arch = Archive::load(path)?;
    arch.require_stage(Stage::Vae)?;
    arch.require_config_hash(&cfg.training_fingerprint())?;
    let mut vae = VideoVae::new(cfg.vae, 0)?;
    vae.store.load_values(&arch.to_store(), true)?;
    Ok((vae, arch.header))
}

fn load_base_model(cfg: &ExperimentConfig, path: &Path) -> Result<Denoiser> {
    let arch = Archive::load(path)?;
    arch.require_stage(Stage::BaseA)?;
    arch.require_config_hash(&cfg.training_fingerprint())?;
    let mut model = Denoiser::new(cfg.dit, cfg.latent_dims()?, 2, 0)?;
    model.store.load_values(&arch.to_store(), true)?;
    Ok(model)
}

pub(crate) fn train_base(args: &ConfigArgs) -> Result<ExitCode> {
    let (cfg, cache) = resolve(args)?;
    let corpus = load_corpus(&cache, &cfg)?;
    let (vae, _) = load_vae(&cfg, &ckpt_path(&cache, "vae"))?;
    println!("[train-base] {} steps", cfg.train.steps);
    let (model, log) = train::train_base(&cfg, &corpus, &vae)?;
    write_log_csv(&cache, "base_a_loss.csv", &log.to_csv())?;
    let mut header =
        CheckpointHeader::new(cfg.training_fingerprint(), Stage::BaseA, cfg.train.steps);
    header.input_streams = Some(2);
    if let Some(l) = log.final_loss() {
        header.metrics_snapshot.insert("final_loss".into(), l);
    }
    let path = ckpt_path(&cache, "base_a");
    if let Some(step) = log.diverged_at {
        header.step = step;
        Archive::from_store(header, &model.store).save(&path)?;
        return Err(Error::Numeric(format!("base training diverged at step {step}")));
    }
    Archive::from_store(header, &model.store).save(&path)?;
    println!("[train-base] done → {}", path.display());
    Ok(ExitCode::SUCCESS)
}

pub(crate) fn finetune_sketch(args: &ConfigArgs, base: Option<&Path>) -> Result<ExitCode> {
    let (cfg, cache) = resolve(args)?;
    let corpus = load_corpus(&cache, &cfg)?;
    let (vae, _) = load_vae(&cfg, &ckpt_path(&cache, "vae"))?;
    let base_path = base.map(Path::to_path_buf).unwrap_or_else(|| ckpt_path(&cache, "base_a"));
    let base = load_base_model(&cfg, &base_path)?;
    let steps = cfg.train.finetune_steps.unwrap_or(cfg.train.steps);
    println!("[finetune-sketch] {} steps from {}", steps, base_path.display());
    let (model, log) = train::finetune_sketch(&cfg, &corpus, &vae, &base)?;
    println!(
        "[finetune-sketch] trainable parameters: {}",
        serde_json::to_string(&count_trainable(&model.store))?
    );
    write_log_csv(&cache, "sketch_b_loss.csv", &log.to_csv())?;
    let mut header = CheckpointHeader::new(cfg.training_fingerprint(), Stage::SketchB, steps);
    header.input_streams = Some(3);
    if let Some(l) = log.final_loss() {
        header.metrics_snapshot.insert("final_loss".into(), l);
    }
    let path = ckpt_path(&cache, "sketch_b");
    if let Some(step) = log.diverged_at {
        header.step = step;
        Archive::from_store(header, &model.store).save(&path)?;
        return Err(Error::Numeric(format!("fine-tuning diverged at step {step}")));
    }
    Archive::from_store(header.clone(), &model.store).save(&path)?;
    // adapter-only archive: LoRA factors + patch embedding
    let mut adapter_header = header;
    adapter_header.stage = Stage::Adapters;
    Archive::filtered(adapter_header, &model.store, &["lora.", "patch_embed."])
        .save(&ckpt_path(&cache, "sketch_b_adapters"))?;
    println!("[finetune-sketch] done → {}", path.display());
    Ok(ExitCode::SUCCESS)
}

enum SketchCapable {
    Lora(Denoiser),
    Branch(ControlNetBaseline),
}

impl ConditionalDenoiser for SketchCapable {
    fn predict(
        &self,
        noisy: &LatentTensor,
        reference: &LatentTensor,
        sk: &LatentTensor,
        t: usize,
    ) -> Result<LatentTensor> {
        match self {
            SketchCapable::Lora(m) => m.predict(noisy, reference, sk, t),
            SketchCapable::Branch(m) => m.predict(noisy, reference, sk, t),
        }
    }
}

fn load_sketch_capable(cfg: &ExperimentConfig, path: &Path) -> Result<(SketchCapable, Stage)> {
    let arch = Archive::load(path)?;
    arch.require_config_hash(&cfg.training_fingerprint())?;
    match arch.header.stage {
        Stage::SketchB => {
            if arch.header.input_streams != Some(3) {
                return Err(Error::Contract(
                    "checkpoint patch embedding is not sketch-expanded (32-channel); \
                     a sketch-capable checkpoint is required"
                        .into(),
                ));
            }
            let mut model = Denoiser::new(cfg.dit, cfg.latent_dims()?, 3, 0)?;
            sketchcolour_core::adapters::inject_lora(&mut model, &cfg.lora, 0)?;
            model.store.load_values(&arch.to_store(), true)?;
            Ok((SketchCapable::Lora(model), Stage::SketchB))
        }
        Stage::ControlnetB => {
            let trunk = Denoiser::new(cfg.dit, cfg.latent_dims()?, 2, 0)?;
            let mut model = ControlNetBaseline::build(&trunk, cfg.controlnet_branch_depth)?;
            model.store_mut().load_values(&arch.to_store(), true)?;
            Ok((SketchCapable::Branch(model), Stage::ControlnetB))
        }
        other => Err(Error::Contract(format!(
            "checkpoint stage {other} cannot colourize sketches; \
             a sketch-capable checkpoint (sketchB or controlnetB) is required"
        ))),
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn infer(
    args: &ConfigArgs,
    checkpoint: Option<&Path>,
    reference: &Path,
    sketches: &Path,
    out: &Path,
    seed: Option<u64>,
    gif: bool,
) -> Result<ExitCode> {
    let (mut cfg, cache) = resolve(args)?;
    if let Some(s) = seed {
        cfg.sampler.seed = s;
    }
    let ckpt = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ckpt_path(&cache, "sketch_b"));
    let (model, stage) = load_sketch_capable(&cfg, &ckpt)?;
    let (vae, _) = load_vae(&cfg, &ckpt_path(&cache, "vae"))?;

    // reference frame, fill-and-cropped to the working resolution if needed
    let mut ref_frame = frames::read_frame(reference)?;
    if ref_frame.shape()[0] != cfg.data.height || ref_frame.shape()[1] != cfg.data.width {
        println!(
            "[infer] reference is {}×{}; fill-and-cropping to {}×{}",
            ref_frame.shape()[0],
            ref_frame.shape()[1],
            cfg.data.height,
            cfg.data.width
        );
        ref_frame = fill_and_crop(&ref_frame, cfg.data.height, cfg.data.width);
    }
    let (h, w) = (cfg.data.height, cfg.data.width);
    let ref_video = VideoTensor::new(ref_frame.reshape(&[1, h, w, 3]))?;

    // sketch frames, auto-binarized (with a warning) when not already binary
    let mut sketch_clip = frames::read_video_dir(sketches)?;
    if sketch_clip.height() != h || sketch_clip.width() != w {
        println!(
            "[infer] sketches are {}×{}; fill-and-cropping to {h}×{w}",
            sketch_clip.height(),
            sketch_clip.width()
        );
        sketch_clip = sketchcolour_core::dataset::fill_and_crop_video(&sketch_clip, h, w)?;
    }
    if sketch_clip.frames() != cfg.data.frames {
        return Err(Error::Contract(format!(
            "sketch directory holds {} frames, the model consumes exactly {}",
            sketch_clip.frames(),
            cfg.data.frames
        )));
    }
    let is_binary = sketch_clip.tensor().data().iter().all(|&v| v == 0.0 || v == 1.0);
    let sketch_video = if is_binary {
        sketch_clip
    } else {
        println!("[infer] warning: sketches are not binary; auto-binarizing at {}", cfg.sketch.binarize_threshold);
        let (frames_n, hh, ww) = (sketch_clip.frames(), sketch_clip.height(), sketch_clip.width());
        let mut data = Vec::with_capacity(frames_n * hh * ww * 3);
        for t in 0..frames_n {
            let f = sketch_clip.frame(t);
            let luma: Vec<f64> = (0..hh * ww)
                .map(|p| luminance(f.data()[p * 3], f.data()[p * 3 + 1], f.data()[p * 3 + 2]))
                .collect();
            let bin = binarize(&Tensor::from_vec(&[hh, ww], luma), cfg.sketch.binarize_threshold)?;
            for &v in bin.data() {
                data.extend_from_slice(&[v, v, v]);
            }
        }
        VideoTensor::new(Tensor::from_vec(&[frames_n, hh, ww, 3], data))?
    };

    let schedule = DiffusionSchedule::new(cfg.schedule)?;
    let sampler = SamplerConfig { seed: cfg.sampler.seed, ..cfg.sampler };
    let video = sample(&model, &vae, &ref_video, &sketch_video, &schedule, &sampler)?;
    frames::write_video_dir(out, &video)?;
    if gif {
        frames::write_gif(&out.join("clip.gif"), &video, 80)?;
    }
    let sidecar = serde_json::json!({
        "config_hash": cfg.training_fingerprint(),
        "checkpoint": ckpt.display().to_string(),
        "checkpoint_stage": stage.to_string(),
        "seed": sampler.seed,
        "num_inference_steps": sampler.num_inference_steps,
        "eta": sampler.eta,
    });
    std::fs::write(out.join("infer.json"), serde_json::to_string_pretty(&sidecar)?)?;
    println!("[infer] wrote {} frames to {}", video.frames(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn load_external_features(path: &Path) -> Result<ExternalFeatures> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Renders the report in the mean (± std) table layout.
pub(crate) fn render_table(report: &MetricReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "metric            mean      (± std)        [msce mode: {:?}]\n",
        report.msce_space
    ));
    for (key, label) in [
        ("msce", "MSCE ↓"),
        ("psnr", "PSNR ↑"),
        ("ssim", "SSIM ↑"),
        ("lpips", "LPIPS* ↓"),
    ] {
        let a = &report.aggregate[key];
        out.push_str(&format!("{label:<14}{:>10.4}  (± {:.4})\n", a.mean, a.std));
    }
    match report.fvd {
        Some(v) => out.push_str(&format!("{:<14}{v:>10.4}  (set-level)\n", "FVD* ↓")),
        None => out.push_str("FVD* ↓            n/a  (set too small)\n"),
    }
    out.push_str(&format!("* proxies: {}, {}\n", report.lpips_label, report.fvd_label));
    if !report.missing.is_empty() {
        out.push_str(&format!("excluded (missing counterpart): {:?}\n", report.missing));
    }
    out
}

pub(crate) fn eval(
    args: &ConfigArgs,
    pred: &Path,
    gt: &Path,
    out: Option<&Path>,
    features_pred: Option<&Path>,
    features_gt: Option<&Path>,
) -> Result<ExitCode> {
    let (cfg, _) = resolve(args)?;
    let pred_clips = frames::read_clip_root(pred)?;
    let gt_clips = frames::read_clip_root(gt)?;
    let external = match (features_pred, features_gt) {
        (Some(p), Some(g)) => Some((load_external_features(p)?, load_external_features(g)?)),
        (None, None) => None,
        _ => {
            return Err(Error::Config(
                "--features-pred and --features-gt must be given together".into(),
            ))
        }
    };
    let report = evaluate(
        &pred_clips,
        &gt_clips,
        &cfg.eval,
        external.as_ref().map(|(a, b)| (a, b)),
    )?;
    print!("{}", render_table(&report));
    if let Some(path) = out {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(&report)?)?;
        println!("[eval] report written to {}", path.display());
    }
    if report.is_partial() {
        eprintln!("[eval] partial evaluation: {} clip(s) had no counterpart", report.missing.len());
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct CompareRow {
    variant: String,
    steps: u64,
    total_params: usize,
    trainable_params: usize,
    peak_memory_bytes: usize,
    final_loss: Option<f64>,
    holdout_msce_mean: f64,
    holdout_ssim_mean: f64,
}

pub(crate) fn compare(args: &ConfigArgs, base: Option<&Path>, out: Option<&Path>) -> Result<ExitCode> {
    let (cfg, cache) = resolve(args)?;
    let corpus = load_corpus(&cache, &cfg)?;
    let (vae, _) = load_vae(&cfg, &ckpt_path(&cache, "vae"))?;
    let base_path = base.map(Path::to_path_buf).unwrap_or_else(|| ckpt_path(&cache, "base_a"));
    let base = load_base_model(&cfg, &base_path)?;
    let out_dir = out.map(Path::to_path_buf).unwrap_or_else(|| cache.join("compare"));
    std::fs::create_dir_all(&out_dir)?;
    let steps = cfg.train.finetune_steps.unwrap_or(cfg.train.steps);
    let gt = train::test_ground_truth(&cfg, &corpus)?;

    let mut rows = Vec::new();
    // channel-concat + adapters variant
    memtrack::reset_peak();
    let (lora_model, lora_log) = train::finetune_sketch(&cfg, &corpus, &vae, &base)?;
    let lora_peak = memtrack::peak_bytes();
    std::fs::write(out_dir.join("loss_channel_concat_lora.csv"), lora_log.to_csv())?;
    let lora_outputs = train::sample_sketch_outputs(&lora_model, &vae, &cfg, &corpus)?;
    let lora_report = evaluate(&lora_outputs, &gt, &cfg.eval, None)?;
    let census = count_trainable(&lora_model.store);
    rows.push(CompareRow {
        variant: "channel_concat_lora".into(),
        steps,
        total_params: census.total_params,
        trainable_params: census.trainable_params,
        peak_memory_bytes: lora_peak,
        final_loss: lora_log.final_loss(),
        holdout_msce_mean: lora_report.aggregate["msce"].mean,
        holdout_ssim_mean: lora_report.aggregate["ssim"].mean,
    });
    let mut header = CheckpointHeader::new(cfg.training_fingerprint(), Stage::SketchB, steps);
    header.input_streams = Some(3);
    Archive::from_store(header, &lora_model.store).save(&ckpt_path(&cache, "sketch_b"))?;

    // duplicated-branch baseline, same base, same seeds, same steps
    memtrack::reset_peak();
    let (cn_model, cn_log) = train::finetune_controlnet(&cfg, &corpus, &vae, &base)?;
    let cn_peak = memtrack::peak_bytes();
    std::fs::write(out_dir.join("loss_controlnet_baseline.csv"), cn_log.to_csv())?;
    let cn_outputs = train::sample_sketch_outputs(&cn_model, &vae, &cfg, &corpus)?;
    let cn_report = evaluate(&cn_outputs, &gt, &cfg.eval, None)?;
    let census = count_trainable(cn_model.store());
    rows.push(CompareRow {
        variant: "controlnet_baseline".into(),
        steps,
        total_params: census.total_params,
        trainable_params: census.trainable_params,
        peak_memory_bytes: cn_peak,
        final_loss: cn_log.final_loss(),
        holdout_msce_mean: cn_report.aggregate["msce"].mean,
        holdout_ssim_mean: cn_report.aggregate["ssim"].mean,
    });
    let mut header = CheckpointHeader::new(cfg.training_fingerprint(), Stage::ControlnetB, steps);
    header.input_streams = Some(2);
    Archive::from_store(header, cn_model.store()).save(&ckpt_path(&cache, "controlnet_b"))?;

    let ratio = rows[1].trainable_params as f64 / rows[0].trainable_params as f64;
    let report = serde_json::json!({
        "variants": rows,
        "trainable_ratio_controlnet_over_lora": ratio,
    });
    std::fs::write(out_dir.join("comparison.json"), serde_json::to_string_pretty(&report)?)?;
    println!("variant               trainable     peak MB   holdout MSCE   holdout SSIM");
    for r in report["variants"].as_array().unwrap() {
        println!(
            "{:<22}{:>9}  {:>10.1}   {:>12.2}   {:>12.4}",
            r["variant"].as_str().unwrap(),
            r["trainable_params"],
            r["peak_memory_bytes"].as_u64().unwrap() as f64 / 1e6,
            r["holdout_msce_mean"].as_f64().unwrap(),
            r["holdout_ssim_mean"].as_f64().unwrap(),
        );
    }
    println!("trainable-parameter ratio (baseline : adapters) = {ratio:.2}");
    println!("[compare] report written to {}", out_dir.join("comparison.json").display());
    Ok(ExitCode::SUCCESS)
}

pub(crate) fn viz_latents(
    args: &ConfigArgs,
    vae_path: Option<&Path>,
    clip: &Path,
    out: &Path,
) -> Result<ExitCode> {
    let (cfg, cache) = resolve(args)?;
    let path = vae_path.map(Path::to_path_buf).unwrap_or_else(|| ckpt_path(&cache, "vae"));
    let (vae, header) = load_vae(&cfg, &path)?;
    if !header.metrics_snapshot.contains_key("holdout_mae") {
        println!("[viz-latents] warning: VAE checkpoint carries no training metrics (untrained?)");
    }
    let video = frames::read_video_dir(clip)?;
    let sketches = sketch_video(&video, &cfg.sketch)?;
    std::fs::create_dir_all(out)?;

    let components = 3.min(cfg.vae.latent_channels);
    let mut written = 0usize;
    for (name, source) in [("colour", &video), ("sketch", &sketches)] {
        let latent = vae.encode_mean(source)?;
        let pca = pca_channel_projection(&latent, components)?;
        let (lt, lh, lw) = (latent.frames(), latent.height(), latent.width());
        for t in 0..lt {
            let mut frame = Vec::with_capacity(lh * lw * 3);
            for y in 0..lh {
                for x in 0..lw {
                    for c in 0..3 {
                        let v = if c < components {
                            pca.normalized.data()[((t * lh + y) * lw + x) * components + c]
                        } else {
                            0.0
                        };
                        frame.push(v);
                    }
                }
            }
            frames::write_frame(
                &out.join(format!("{name}_{t:03}.png")),
                &Tensor::from_vec(&[lh, lw, 3], frame),
            )?;
            written += 1;
        }
    }

    let r = train::sketch_pca_correlation(&cfg, &vae, &video)?;
    let stats = serde_json::json!({
        "sketch_pca_pearson_abs": r,
        "recorded_at_training": header.metrics_snapshot.get("sketch_pca_corr"),
    });
    std::fs::write(out.join("stats.json"), serde_json::to_string_pretty(&stats)?)?;
    println!(
        "[viz-latents] wrote {written} PNGs to {}; sketch-PCA |r| = {r:.4} (recorded {:?})",
        out.display(),
        header.metrics_snapshot.get("sketch_pca_corr")
    );
    Ok(ExitCode::SUCCESS)
}

pub(crate) fn sketch(args: &ConfigArgs, input: &Path, output: &Path) -> Result<ExitCode> {
    let (cfg, _) = resolve(args)?;
    let video = frames::read_video_dir(input)?;
    let sketches = sketch_video(&video, &cfg.sketch)?;
    frames::write_video_dir(output, &sketches)?;
    println!("[sketch] wrote {} line-art frames to {}", sketches.frames(), output.display());
    Ok(ExitCode::SUCCESS)
}
