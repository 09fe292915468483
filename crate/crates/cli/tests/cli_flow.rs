//! End-to-end command behaviours on a tiny configuration: data generation
//! determinism, sketch extraction, manifest layout, evaluation against
//! directory roots, checkpoint stage/hash gating and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_sketchcolour")
}

/// Tiny-but-valid settings shared by the CLI tests.
fn tiny_sets() -> Vec<String> {
    [
        "data.train_clips=6",
        "data.test_clips=3",
        "data.height=16",
        "data.width=24",
        "data.frames=5",
        "data.min_frames=5",
        "data.extra_frames=3",
        "vae.base_width=4",
        "dit.model_dim=32",
        "dit.depth=1",
        "dit.heads=2",
        "train.vae_steps=6",
        "train.steps=4",
        "train.vae_batch_size=1",
        "train.batch_size=1",
        "train.warmup_steps=2",
        "sampler.num_inference_steps=4",
        "eval.extractor.feature_dim=8",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn run(cache: &Path, args: &[&str], sets: &[String]) -> Output {
    let mut cmd = Command::new(bin());
    cmd.env("SKETCHCOLOUR_CACHE", cache);
    cmd.args(args);
    for s in sets {
        cmd.arg("--set").arg(s);
    }
    cmd.output().expect("command runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn hash_dir(dir: &Path) -> Vec<(PathBuf, u64)> {
    let mut files: Vec<PathBuf> = walk(dir);
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let bytes = std::fs::read(&p).unwrap();
            let mut h = 0xcbf29ce484222325u64;
            for b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            (p.strip_prefix(dir).unwrap().to_path_buf(), h)
        })
        .collect()
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap().filter_map(|e| e.ok()) {
        let p = e.path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn gen_data_is_deterministic_and_manifest_is_consistent() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_ok(&run(&a, &["gen-data"], &tiny_sets()));
    assert_ok(&run(&b, &["gen-data"], &tiny_sets()));
    let ha = hash_dir(&a.join("corpus"));
    let hb = hash_dir(&b.join("corpus"));
    assert!(!ha.is_empty());
    assert_eq!(ha, hb, "two gen-data runs differ");

    // manifest line count and split disjointness
    let manifest = std::fs::read_to_string(a.join("corpus/manifest.jsonl")).unwrap();
    let lines: Vec<&str> = manifest.lines().filter(|l| !l.trim().is_empty()).collect();
    assert_eq!(lines.len(), 9);
    let mut train_ids = Vec::new();
    let mut test_ids = Vec::new();
    for l in lines {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        let id = v["clip_id"].as_str().unwrap().to_string();
        match v["split"].as_str().unwrap() {
            "train" => train_ids.push(id),
            "test" => test_ids.push(id),
            other => panic!("unknown split {other}"),
        }
    }
    assert_eq!(train_ids.len(), 6);
    assert_eq!(test_ids.len(), 3);
    assert!(train_ids.iter().all(|i| !test_ids.contains(i)));

    // re-run with the same config is a cheap no-op
    let out = run(&a, &["gen-data"], &tiny_sets());
    assert_ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("up to date"));

    // a different config refuses without --force
    let mut changed = tiny_sets();
    changed.push("root_seed=99".into());
    let out = run(&a, &["gen-data"], &changed);
    assert_eq!(out.status.code(), Some(2), "expected contract exit code");
    let out = run(&a, &["gen-data", "--force"], &changed);
    assert_ok(&out);
}

#[test]
fn sketch_command_writes_binary_line_art() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().join("cache");
    assert_ok(&run(&cache, &["gen-data"], &tiny_sets()));
    let clip = cache.join("corpus/train/clip_00000");
    let out_dir = tmp.path().join("lineart");
    assert_ok(&run(
        &cache,
        &["sketch", "--input", clip.to_str().unwrap(), "--output", out_dir.to_str().unwrap()],
        &tiny_sets(),
    ));
    let frames: Vec<_> = std::fs::read_dir(&out_dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().map(|x| x == "png").unwrap_or(false))
        .collect();
    assert!(!frames.is_empty());
    for f in frames {
        let img = image::open(f.path()).unwrap().to_rgb8();
        for p in img.pixels() {
            assert!(p[0] == 0 || p[0] == 255, "non-binary pixel {}", p[0]);
            assert_eq!(p[0], p[1]);
            assert_eq!(p[1], p[2]);
        }
    }
}

#[test]
fn eval_self_is_perfect_and_partial_eval_signals_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().join("cache");
    assert_ok(&run(&cache, &["gen-data"], &tiny_sets()));
    let gt_root = cache.join("corpus/test");
    let report_path = tmp.path().join("report.json");
    let out = run(
        &cache,
        &[
            "eval",
            "--pred",
            gt_root.to_str().unwrap(),
            "--gt",
            gt_root.to_str().unwrap(),
            "--out",
            report_path.to_str().unwrap(),
        ],
        &tiny_sets(),
    );
    assert_ok(&out);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["aggregate"]["msce"]["mean"].as_f64().unwrap(), 0.0);
    assert_eq!(report["aggregate"]["psnr"]["mean"].as_f64().unwrap(), 100.0);
    assert!((report["aggregate"]["ssim"]["mean"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert!(report["fvd"].as_f64().unwrap() <= 1e-6);
    assert!(report["lpips_label"].as_str().unwrap().contains("proxy"));
    // mean and std columns exist for all metrics
    for k in ["msce", "psnr", "ssim", "lpips"] {
        assert!(report["aggregate"][k]["std"].is_number());
    }

    // remove one prediction → partial evaluation, exit code 2
    let partial = tmp.path().join("partial");
    std::fs::create_dir_all(&partial).unwrap();
    let mut copied = 0;
    for e in std::fs::read_dir(&gt_root).unwrap().filter_map(|e| e.ok()) {
        if copied < 2 && e.path().is_dir() {
            copy_dir(&e.path(), &partial.join(e.file_name()));
            copied += 1;
        }
    }
    let out = run(
        &cache,
        &["eval", "--pred", partial.to_str().unwrap(), "--gt", gt_root.to_str().unwrap()],
        &tiny_sets(),
    );
    assert_eq!(out.status.code(), Some(2), "partial evaluation must signal exit 2");
}

fn copy_dir(src: &Path, dst: &Path) {
    std::fs::create_dir_all(dst).unwrap();
    for e in std::fs::read_dir(src).unwrap().filter_map(|e| e.ok()) {
        std::fs::copy(e.path(), dst.join(e.file_name())).unwrap();
    }
}

#[test]
fn pipeline_stage_gating_and_checkpoint_hashes() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().join("cache");
    let sets = tiny_sets();
    assert_ok(&run(&cache, &["gen-data"], &sets));

    // training commands require their upstream artifacts
    let out = run(&cache, &["train-base"], &sets);
    assert_eq!(out.status.code(), Some(2), "train-base without a vae must fail loudly");

    assert_ok(&run(&cache, &["train-vae"], &sets));
    assert_ok(&run(&cache, &["train-base"], &sets));

    // finetune from the wrong stage: pointing --base at the vae checkpoint
    let vae_ckpt = cache.join("checkpoints/vae.ckpt");
    let out = run(
        &cache,
        &["finetune-sketch", "--base", vae_ckpt.to_str().unwrap()],
        &sets,
    );
    assert_eq!(out.status.code(), Some(2), "vae checkpoint is not stage baseA");

    assert_ok(&run(&cache, &["finetune-sketch"], &sets));
    assert!(cache.join("checkpoints/sketch_b.ckpt").exists());
    assert!(cache.join("checkpoints/sketch_b_adapters.ckpt").exists());

    // config-hash mismatch fails loudly, never coerces
    let mut other = sets.clone();
    other.push("train.learning_rate=0.5".into());
    let out = run(&cache, &["train-base"], &other);
    assert_eq!(out.status.code(), Some(2), "hash mismatch must fail");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("hash"), "{stderr}");

    // infer demands a sketch-capable checkpoint
    let base_ckpt = cache.join("checkpoints/base_a.ckpt");
    let ref_png = cache.join("corpus/test/clip_00006/frame_00000.png");
    let sk_dir = tmp.path().join("sk");
    let out = run(
        &cache,
        &[
            "sketch",
            "--input",
            cache.join("corpus/test/clip_00006").to_str().unwrap(),
            "--output",
            sk_dir.to_str().unwrap(),
        ],
        &sets,
    );
    assert_ok(&out);
    let out = run(
        &cache,
        &[
            "infer",
            "--checkpoint",
            base_ckpt.to_str().unwrap(),
            "--reference",
            ref_png.to_str().unwrap(),
            "--sketches",
            sk_dir.to_str().unwrap(),
            "--out",
            tmp.path().join("out").to_str().unwrap(),
        ],
        &sets,
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sketch-capable"));

    // and a real inference run: deterministic across repeats
    let out_a = tmp.path().join("infer_a");
    let out_b = tmp.path().join("infer_b");
    for out_dir in [&out_a, &out_b] {
        let out = run(
            &cache,
            &[
                "infer",
                "--reference",
                ref_png.to_str().unwrap(),
                "--sketches",
                sk_dir.to_str().unwrap(),
                "--out",
                out_dir.to_str().unwrap(),
                "--seed",
                "5",
            ],
            &sets,
        );
        assert_ok(&out);
    }
    let ha = hash_dir(&out_a);
    let hb = hash_dir(&out_b);
    assert_eq!(ha, hb, "inference is not deterministic");
    // output frame count = sketch frame count; sidecar records seed + hash
    let frames = std::fs::read_dir(&out_a)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| {
            e.path().extension().map(|x| x == "png").unwrap_or(false)
        })
        .count();
    assert_eq!(frames, 5);
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_a.join("infer.json")).unwrap()).unwrap();
    assert_eq!(sidecar["seed"].as_u64(), Some(5));
    assert!(sidecar["config_hash"].is_string());
}

#[test]
fn checkpoint_files_roundtrip_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().join("cache");
    let sets = tiny_sets();
    assert_ok(&run(&cache, &["gen-data"], &sets));
    assert_ok(&run(&cache, &["train-vae"], &sets));
    let path = cache.join("checkpoints/vae.ckpt");
    let bytes = std::fs::read(&path).unwrap();
    let arch = sketchcolour_core::checkpoint::Archive::read_from(&bytes[..]).unwrap();
    let mut again = Vec::new();
    arch.write_to(&mut again).unwrap();
    assert_eq!(bytes, again, "load + re-save must be byte identical");
    assert_eq!(arch.header.stage, sketchcolour_core::checkpoint::Stage::Vae);
    assert!(arch.header.metrics_snapshot.contains_key("holdout_mae"));
    assert!(arch.header.metrics_snapshot.contains_key("latent_scale"));
    assert!(arch.header.metrics_snapshot.contains_key("sketch_pca_corr"));
}

#[test]
fn viz_latents_exports_pca_pairs_and_stats() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().join("cache");
    let sets = tiny_sets();
    assert_ok(&run(&cache, &["gen-data"], &sets));
    assert_ok(&run(&cache, &["train-vae"], &sets));
    let clip = cache.join("corpus/test/clip_00006");
    let out_dir = tmp.path().join("viz");
    let out = run(
        &cache,
        &["viz-latents", "--clip", clip.to_str().unwrap(), "--out", out_dir.to_str().unwrap()],
        &sets,
    );
    assert_ok(&out);
    // 5 frames → 2 latent frames → one colour + one sketch PNG per frame
    let pngs: Vec<_> = std::fs::read_dir(&out_dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().map(|x| x == "png").unwrap_or(false))
        .map(|e| e.file_name().to_string_lossy().to_string())
        .collect();
    assert_eq!(pngs.len(), 4, "expected 2 × latentFrames PNGs, got {pngs:?}");
    assert_eq!(pngs.iter().filter(|n| n.starts_with("colour_")).count(), 2);
    assert_eq!(pngs.iter().filter(|n| n.starts_with("sketch_")).count(), 2);
    let stats: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("stats.json")).unwrap())
            .unwrap();
    let r = stats["sketch_pca_pearson_abs"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&r));
    assert!(stats["recorded_at_training"].is_number());
}

#[test]
fn eval_accepts_precomputed_external_features() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().join("cache");
    let mut sets = tiny_sets();
    assert_ok(&run(&cache, &["gen-data"], &sets));
    let gt_root = cache.join("corpus/test");
    // fabricate one feature vector per clip (identical on both sides)
    let mut features = serde_json::Map::new();
    for e in std::fs::read_dir(&gt_root).unwrap().filter_map(|e| e.ok()) {
        if e.path().is_dir() {
            let id = e.file_name().to_string_lossy().to_string();
            let vec: Vec<f64> = (0..8).map(|i| (i as f64) * 0.1 + id.len() as f64).collect();
            features.insert(id, serde_json::json!(vec));
        }
    }
    let fpath = tmp.path().join("features.json");
    std::fs::write(&fpath, serde_json::to_string(&features).unwrap()).unwrap();
    sets.push("eval.extractor.kind=\"external\"".into());
    let out = run(
        &cache,
        &[
            "eval",
            "--pred",
            gt_root.to_str().unwrap(),
            "--gt",
            gt_root.to_str().unwrap(),
            "--features-pred",
            fpath.to_str().unwrap(),
            "--features-gt",
            fpath.to_str().unwrap(),
        ],
        &sets,
    );
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("external"), "report must label the external extractor: {stdout}");

    // the external kind without the files is a loud contract error
    let out = run(
        &cache,
        &["eval", "--pred", gt_root.to_str().unwrap(), "--gt", gt_root.to_str().unwrap()],
        &sets,
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_1() {
    let out = Command::new(bin()).arg("no-such-command").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = Command::new(bin())
        .args(["eval", "--pred", "/nonexistent/a", "--gt", "/nonexistent/b"])
        .output()
        .unwrap();
    // missing directories are contract/IO failures, not success
    assert_ne!(out.status.code(), Some(0));
}
