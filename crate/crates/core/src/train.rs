//! Training orchestration: synthetic corpus assembly, VAE training with
//! divergence recovery, frozen-VAE latent caching, the shared diffusion
//! training loop for the base model and both fine-tuning variants, and
//! test-set sampling helpers.
//!
//! Every draw is derived from the root seed with a stage tag, so whole runs
//! are bitwise reproducible in single-threaded mode (and thread count never
//! changes any reduction order).

use std::collections::BTreeMap;

use crate::adapters::{inject_lora, ControlNetBaseline};
use crate::config::ExperimentConfig;
use crate::dataset::{
    make_training_example, plan_corpus, render_planned, sample_window, ClipRecord, Split,
};
use crate::denoiser::{concat_latents, concat_streams, patch_matrix, Denoiser};
use crate::diffusion::{
    add_noise, draw_t_eps, encode_example, sample, sample_base, target_for, ConditionalDenoiser,
    DiffusionSchedule, ExampleLatents, SamplerConfig,
};
use crate::error::{Error, Result};
use crate::graph::{Grads, Graph, NodeId};
use crate::nn::{lr_at, AdamW, ParamStore};
use crate::rng::derive_seed;
use crate::sketcher::sketch_video;
use crate::stats::pearson;
use crate::video::VideoTensor;
use crate::videovae::{pca_channel_projection, VideoVae};

/// The synthetic corpus held in memory: manifest records plus pixel clips.
pub struct Corpus {
    pub records: Vec<ClipRecord>,
    pub clips: BTreeMap<String, VideoTensor>,
}

impl Corpus {
    /// Renders the full corpus plan for a config. Pixel values are exact
    /// u8/255 levels, so disk (PNG) and in-memory corpora are identical.
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let plan = plan_corpus(&cfg.data, cfg.root_seed);
        let mut records = Vec::with_capacity(plan.len());
        let mut clips = BTreeMap::new();
        for p in &plan {
            let clip = render_planned(&cfg.data, p)?;
            clips.insert(p.record.clip_id.clone(), clip);
            records.push(p.record.clone());
        }
        Ok(Self { records, clips })
    }

    pub fn ids(&self, split: Split) -> Vec<String> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.clip_id.clone())
            .collect()
    }

    /// The training set in selection order: clips with at least `min_frames`
    /// frames, shortest first (id tiebreak), capped at `train_clips`.
    pub fn training_selection(&self, cfg: &ExperimentConfig) -> Vec<String> {
        let train_records: Vec<ClipRecord> =
            self.records.iter().filter(|r| r.split == Split::Train).cloned().collect();
        let sel = crate::dataset::select_clips(&train_records, cfg.data.train_clips, cfg.data.min_frames);
        sel.clips.into_iter().map(|c| c.clip_id).collect()
    }

    pub fn clip(&self, id: &str) -> Result<&VideoTensor> {
        self.clips
            .get(id)
            .ok_or_else(|| Error::Contract(format!("clip {id} not in corpus")))
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub losses: Vec<(u64, f64)>,
    /// Set when training aborted on a non-finite loss; the returned model
    /// holds the last good snapshot.
    pub diverged_at: Option<u64>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().map(|(_, l)| *l)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (s, l) in &self.losses {
            out.push_str(&format!("{s},{l}\n"));
        }
        out
    }
}

/// Training-time measurements recorded into the VAE checkpoint.
#[derive(Clone, Copy, Debug)]
pub struct VaeMetrics {
    /// Mean absolute reconstruction error on held-out clips.
    pub holdout_mae: f64,
    /// Global latent scale (1/std over training latents).
    pub latent_scale: f64,
    /// Mean |Pearson r| between the first PCA component of sketch-clip
    /// latents and the downsampled binary sketch, over held-out clips.
    pub sketch_pca_corr: f64,
}

pub struct VaeOutcome {
    pub vae: VideoVae,
    pub log: TrainLog,
    pub metrics: VaeMetrics,
}

/// Trains the video VAE on the train split. On a non-finite loss the last
/// good snapshot is restored and `log.diverged_at` is set.
pub fn train_vae(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<VaeOutcome> {
    let mut vae = VideoVae::new(cfg.vae, derive_seed(cfg.root_seed, "vae-init", 0))?;
    let train_ids = corpus.training_selection(cfg);
    if train_ids.is_empty() {
        return Err(Error::Contract("no eligible training clips after selection".into()));
    }
    let tc = &cfg.train;
    let mut opt = AdamW::new(tc.beta1, tc.beta2, tc.weight_decay);
    let mut log = TrainLog::default();
    let mut snapshot: (u64, ParamStore) = (0, vae.store.clone());

    for step in 0..tc.vae_steps {
        let mut grads = Grads::default();
        let mut loss_sum = 0.0;
        for b in 0..tc.vae_batch_size {
            let draw = step * tc.vae_batch_size as u64 + b as u64;
            let pick = derive_seed(cfg.root_seed, "vae-order", draw) as usize % train_ids.len();
            let clip = corpus.clip(&train_ids[pick])?;
            let window = sample_window(
                clip,
                cfg.data.frames,
                derive_seed(cfg.root_seed, "vae-window", draw),
            )?;
            let (g, total, loss) =
                vae.loss_graph(&window, derive_seed(cfg.root_seed, "vae-noise", draw))?;
            loss_sum += loss.total;
            grads.merge(&g.backward(total));
        }
        grads.scale(1.0 / tc.vae_batch_size as f64);
        let loss = loss_sum / tc.vae_batch_size as f64;
        if !loss.is_finite() {
            vae.store = snapshot.1;
            log.diverged_at = Some(step);
            log.losses.push((step, loss));
            return Ok(VaeOutcome { metrics: vae_holdout_metrics(cfg, corpus, &vae)?, vae, log });
        }
        opt.step(&mut vae.store, &grads, lr_at(tc.vae_learning_rate, tc.warmup_steps, step), tc.grad_clip);
        if step % tc.log_every == 0 || step + 1 == tc.vae_steps {
            log.losses.push((step, loss));
        }
        if tc.snapshot_every > 0 && step % tc.snapshot_every == 0 {
            snapshot = (step, vae.store.clone());
        }
    }

    // record the latent scale before measuring anything downstream
    let scale = latent_scale_from_corpus(cfg, corpus, &vae)?;
    vae.set_latent_scale(scale);
    let metrics = vae_holdout_metrics(cfg, corpus, &vae)?;
    Ok(VaeOutcome { vae, log, metrics })
}

/// 1/std of posterior-mean latents over a fixed subset of training clips.
fn latent_scale_from_corpus(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    vae: &VideoVae,
) -> Result<f64> {
    let train_ids = corpus.training_selection(cfg);
    let mut acc = 0.0;
    let mut acc_sq = 0.0;
    let mut count = 0usize;
    for (i, id) in train_ids.iter().take(16).enumerate() {
        let window = sample_window(
            corpus.clip(id)?,
            cfg.data.frames,
            derive_seed(cfg.root_seed, "scale-window", i as u64),
        )?;
        let z = vae.encode_mean(&window)?;
        for &v in z.tensor().data() {
            acc += v;
            acc_sq += v * v;
            count += 1;
        }
    }
    let mean = acc / count as f64;
    let var = (acc_sq / count as f64 - mean * mean).max(1e-12);
    Ok(1.0 / var.sqrt())
}

/// Held-out reconstruction MAE and the sketch-PCA correlation statistic.
pub fn vae_holdout_metrics(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    vae: &VideoVae,
) -> Result<VaeMetrics> {
    let test_ids = corpus.ids(Split::Test);
    if test_ids.is_empty() {
        return Err(Error::Contract("empty test split".into()));
    }
    let mut mae_acc = 0.0;
    let mut corr_acc = 0.0;
    let subset: Vec<&String> = test_ids.iter().take(8).collect();
    for id in &subset {
        let clip = corpus.clip(id)?;
        let window = clip.window(0, cfg.data.frames.min(clip.frames()));
        let recon = vae.decode(&vae.encode_mean(&window)?)?;
        let mae = window
            .tensor()
            .data()
            .iter()
            .zip(recon.tensor().data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / window.tensor().len() as f64;
        mae_acc += mae;
        corr_acc += sketch_pca_correlation(cfg, vae, &window)?;
    }
    Ok(VaeMetrics {
        holdout_mae: mae_acc / subset.len() as f64,
        latent_scale: vae.latent_scale(),
        sketch_pca_corr: corr_acc / subset.len() as f64,
    })
}

/// |Pearson r| between the first PCA component of a sketch-clip latent and
/// the sketch itself downsampled to latent resolution (the frozen-encoder
/// robustness statistic).
pub fn sketch_pca_correlation(
    cfg: &ExperimentConfig,
    vae: &VideoVae,
    clip: &VideoTensor,
) -> Result<f64> {
    let sketch = sketch_video(clip, &cfg.sketch)?;
    let latent = vae.encode_mean(&sketch)?;
    let pca = pca_channel_projection(&latent, 1)?;
    let (lt, lh, lw) = (latent.frames(), latent.height(), latent.width());
    let tf = cfg.vae.temporal_factor;
    let sf = cfg.vae.spatial_factor;
    let mut comp = Vec::with_capacity(lt * lh * lw);
    let mut down = Vec::with_capacity(lt * lh * lw);
    for j in 0..lt {
        // representative pixel frame of the causal window that produced
        // latent frame j
        let src_t = if j == 0 { 0 } else { (j * tf).min(sketch.frames() - 1) };
        for y in 0..lh {
            for x in 0..lw {
                comp.push(pca.projected.data()[(j * lh + y) * lw + x]);
                let mut acc = 0.0;
                for dy in 0..sf {
                    for dx in 0..sf {
                        acc += sketch.get(src_t, y * sf + dy, x * sf + dx, 0);
                    }
                }
                down.push(acc / (sf * sf) as f64);
            }
        }
    }
    Ok(pearson(&comp, &down).abs())
}

/// Anything trainable under the diffusion objective.
pub trait DiffusionTrainable {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Builds the per-example loss node: model prediction (head output rows)
    /// against the patchified schedule target.
    fn loss_node(
        &self,
        g: &mut Graph,
        lat: &ExampleLatents,
        t: usize,
        eps: &crate::tensor::Tensor,
        schedule: &DiffusionSchedule,
    ) -> Result<NodeId>;
}

impl DiffusionTrainable for Denoiser {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn loss_node(
        &self,
        g: &mut Graph,
        lat: &ExampleLatents,
        t: usize,
        eps: &crate::tensor::Tensor,
        schedule: &DiffusionSchedule,
    ) -> Result<NodeId> {
        let eps = crate::video::LatentTensor::new(eps.clone())?;
        let x_t = add_noise(&lat.x0, &eps, t, schedule)?;
        let target = target_for(&lat.x0, &eps, t, schedule)?;
        let (target_rows, _) = patch_matrix(target.tensor(), &self.cfg)?;
        let target_node = g.input(target_rows);
        let stacked = match self.input_streams {
            2 => concat_latents(&[("noisy", &x_t), ("reference", &lat.reference)])?,
            3 => concat_streams(&x_t, &lat.reference, &lat.sketch)?,
            n => return Err(Error::Contract(format!("untrainable stream count {n}"))),
        };
        let out = self.forward_graph(g, &stacked, t)?;
        Ok(g.mse(out, target_node))
    }
}

impl DiffusionTrainable for ControlNetBaseline {
    fn params(&self) -> &ParamStore {
        self.store()
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        self.store_mut()
    }

    fn loss_node(
        &self,
        g: &mut Graph,
        lat: &ExampleLatents,
        t: usize,
        eps: &crate::tensor::Tensor,
        schedule: &DiffusionSchedule,
    ) -> Result<NodeId> {
        let eps = crate::video::LatentTensor::new(eps.clone())?;
        let x_t = add_noise(&lat.x0, &eps, t, schedule)?;
        let target = target_for(&lat.x0, &eps, t, schedule)?;
        let (target_rows, _) = patch_matrix(target.tensor(), &self.trunk.cfg)?;
        let target_node = g.input(target_rows);
        let out = self.forward_graph(g, &x_t, &lat.reference, &lat.sketch, t)?;
        Ok(g.mse(out, target_node))
    }
}

/// Frozen-VAE latent triplets for the train split, one deterministic window
/// per clip per stage tag.
pub fn build_latent_cache(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    vae: &VideoVae,
    stage_tag: &str,
    with_sketch: bool,
) -> Result<Vec<ExampleLatents>> {
    let train_ids = corpus.training_selection(cfg);
    if train_ids.is_empty() {
        return Err(Error::Contract("no eligible training clips after selection".into()));
    }
    let mut cache = Vec::with_capacity(train_ids.len());
    for (i, id) in train_ids.iter().enumerate() {
        let window = sample_window(
            corpus.clip(id)?,
            cfg.data.frames,
            derive_seed(cfg.root_seed, &format!("{stage_tag}-window"), i as u64),
        )?;
        if with_sketch {
            let example = make_training_example(&window, &cfg.sketch)?;
            cache.push(encode_example(vae, &example)?);
        } else {
            let scale = vae.latent_scale();
            let x0 = vae.encode_mean(&window)?.scale(scale);
            let reference = crate::videovae::pad_reference(
                &vae.encode_mean(&window.frame_video(0))?.scale(scale),
                x0.frames(),
            )?;
            let sketch = crate::video::LatentTensor::zeros(
                x0.frames(),
                x0.height(),
                x0.width(),
                x0.channels(),
            );
            cache.push(ExampleLatents { x0, reference, sketch });
        }
    }
    Ok(cache)
}

/// The shared diffusion training loop: seeded example order, per-example
/// (t, ε) draws, fixed-order batch gradient accumulation, warmup + AdamW,
/// divergence recovery from the last good snapshot.
pub fn train_diffusion<M: DiffusionTrainable>(
    model: &mut M,
    cfg: &ExperimentConfig,
    cache: &[ExampleLatents],
    schedule: &DiffusionSchedule,
    stage_tag: &str,
    steps: u64,
) -> Result<TrainLog> {
    if cache.is_empty() {
        return Err(Error::Contract("empty latent cache".into()));
    }
    let tc = &cfg.train;
    let mut opt = AdamW::new(tc.beta1, tc.beta2, tc.weight_decay);
    let mut log = TrainLog::default();
    let mut snapshot: (u64, ParamStore) = (0, model.params().clone());

    for step in 0..steps {
        let mut grads = Grads::default();
        let mut loss_sum = 0.0;
        for b in 0..tc.batch_size {
            let draw = step * tc.batch_size as u64 + b as u64;
            let pick =
                derive_seed(cfg.root_seed, &format!("{stage_tag}-order"), draw) as usize % cache.len();
            let lat = &cache[pick];
            let (t, eps) = draw_t_eps(
                schedule,
                lat.x0.tensor().shape(),
                derive_seed(cfg.root_seed, &format!("{stage_tag}-noise"), draw),
            );
            let mut g = Graph::new();
            let loss = model.loss_node(&mut g, lat, t, &eps, schedule)?;
            loss_sum += g.value(loss).data()[0];
            grads.merge(&g.backward(loss));
        }
        grads.scale(1.0 / tc.batch_size as f64);
        let loss = loss_sum / tc.batch_size as f64;
        if !loss.is_finite() {
            *model.params_mut() = snapshot.1;
            log.diverged_at = Some(step);
            log.losses.push((step, loss));
            return Ok(log);
        }
        opt.step(
            model.params_mut(),
            &grads,
            lr_at(tc.learning_rate, tc.warmup_steps, step),
            tc.grad_clip,
        );
        if step % tc.log_every == 0 || step + 1 == steps {
            log.losses.push((step, loss));
        }
        if tc.snapshot_every > 0 && step % tc.snapshot_every == 0 {
            snapshot = (step, model.params().clone());
        }
    }
    Ok(log)
}

/// Stage A: first-frame-conditioned base training (noisy + reference).
pub fn train_base(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    vae: &VideoVae,
) -> Result<(Denoiser, TrainLog)> {
    let mut model = Denoiser::new(
        cfg.dit,
        cfg.latent_dims()?,
        2,
        derive_seed(cfg.root_seed, "base-init", 0),
    )?;
    let schedule = DiffusionSchedule::new(cfg.schedule)?;
    let cache = build_latent_cache(cfg, corpus, vae, "baseA", false)?;
    let log = train_diffusion(&mut model, cfg, &cache, &schedule, "baseA", cfg.train.steps)?;
    Ok((model, log))
}

/// Stage B, channel-concat variant: expand the patch embedding with zero
/// sketch rows, inject adapters, train only {patch embedding, adapters}.
pub fn finetune_sketch(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    vae: &VideoVae,
    base: &Denoiser,
) -> Result<(Denoiser, TrainLog)> {
    let mut model = base.expand_for_sketch()?;
    inject_lora(&mut model, &cfg.lora, derive_seed(cfg.root_seed, "lora-init", 0))?;
    let schedule = DiffusionSchedule::new(cfg.schedule)?;
    let cache = build_latent_cache(cfg, corpus, vae, "sketchB", true)?;
    let steps = cfg.train.finetune_steps.unwrap_or(cfg.train.steps);
    let log = train_diffusion(&mut model, cfg, &cache, &schedule, "sketchB", steps)?;
    Ok((model, log))
}

/// Stage B, duplicated-branch baseline: clone trunk blocks into a branch and
/// train only the branch, connectors and sketch projection.
pub fn finetune_controlnet(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    vae: &VideoVae,
    base: &Denoiser,
) -> Result<(ControlNetBaseline, TrainLog)> {
    let mut model = ControlNetBaseline::build(base, cfg.controlnet_branch_depth)?;
    let schedule = DiffusionSchedule::new(cfg.schedule)?;
    let cache = build_latent_cache(cfg, corpus, vae, "controlnetB", true)?;
    let steps = cfg.train.finetune_steps.unwrap_or(cfg.train.steps);
    let log = train_diffusion(&mut model, cfg, &cache, &schedule, "controlnetB", steps)?;
    Ok((model, log))
}

/// Samples every test clip through a sketch-conditioned model.
pub fn sample_sketch_outputs<M: ConditionalDenoiser>(
    model: &M,
    vae: &VideoVae,
    cfg: &ExperimentConfig,
    corpus: &Corpus,
) -> Result<BTreeMap<String, VideoTensor>> {
    let schedule = DiffusionSchedule::new(cfg.schedule)?;
    let mut out = BTreeMap::new();
    for (i, id) in corpus.ids(Split::Test).iter().enumerate() {
        let clip = corpus.clip(id)?;
        let window = clip.window(0, cfg.data.frames.min(clip.frames()));
        let example = make_training_example(&window, &cfg.sketch)?;
        let sampler = SamplerConfig {
            seed: derive_seed(cfg.sampler.seed, "sample-sketch", i as u64),
            ..cfg.sampler
        };
        out.insert(
            id.clone(),
            sample(model, vae, &example.reference, &example.sketches, &schedule, &sampler)?,
        );
    }
    Ok(out)
}

/// Samples every test clip through the reference-only base model (the
/// no-sketch baseline of the effectiveness comparison). Seeds match
/// [`sample_sketch_outputs`] clip for clip.
pub fn sample_base_outputs(
    model: &Denoiser,
    vae: &VideoVae,
    cfg: &ExperimentConfig,
    corpus: &Corpus,
) -> Result<BTreeMap<String, VideoTensor>> {
    let schedule = DiffusionSchedule::new(cfg.schedule)?;
    let mut out = BTreeMap::new();
    for (i, id) in corpus.ids(Split::Test).iter().enumerate() {
        let clip = corpus.clip(id)?;
        let window = clip.window(0, cfg.data.frames.min(clip.frames()));
        let sampler = SamplerConfig {
            seed: derive_seed(cfg.sampler.seed, "sample-sketch", i as u64),
            ..cfg.sampler
        };
        out.insert(
            id.clone(),
            sample_base(model, vae, &window.frame_video(0), window.frames(), &schedule, &sampler)?,
        );
    }
    Ok(out)
}

/// Ground-truth windows matching the sampled outputs.
pub fn test_ground_truth(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<BTreeMap<String, VideoTensor>> {
    let mut out = BTreeMap::new();
    for id in corpus.ids(Split::Test) {
        let clip = corpus.clip(&id)?;
        out.insert(id.clone(), clip.window(0, cfg.data.frames.min(clip.frames())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::toy();
        cfg.root_seed = 7;
        cfg.data.train_clips = 4;
        cfg.data.test_clips = 2;
        cfg.data.height = 16;
        cfg.data.width = 24;
        cfg.data.frames = 5;
        cfg.data.min_frames = 5;
        cfg.data.extra_frames = 3;
        cfg.vae.base_width = 4;
        cfg.vae.spatial_factor = 4;
        cfg.dit.model_dim = 32;
        cfg.dit.depth = 1;
        cfg.dit.heads = 2;
        cfg.train.vae_steps = 3;
        cfg.train.steps = 3;
        cfg.train.vae_batch_size = 1;
        cfg.train.batch_size = 1;
        cfg.train.log_every = 1;
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    fn corpus_generation_matches_config_counts() {
        let cfg = tiny_config();
        let corpus = Corpus::generate(&cfg).unwrap();
        assert_eq!(corpus.ids(Split::Train).len(), 4);
        assert_eq!(corpus.ids(Split::Test).len(), 2);
        for id in corpus.ids(Split::Test) {
            assert_eq!(corpus.clip(&id).unwrap().frames(), 5);
        }
    }

    #[test]
    fn vae_smoke_training_runs_and_records_metrics() {
        let cfg = tiny_config();
        let corpus = Corpus::generate(&cfg).unwrap();
        let outcome = train_vae(&cfg, &corpus).unwrap();
        assert!(outcome.log.diverged_at.is_none());
        assert!(outcome.metrics.holdout_mae.is_finite());
        assert!(outcome.metrics.latent_scale > 0.0);
        assert!((0.0..=1.0).contains(&outcome.metrics.sketch_pca_corr));
        assert_eq!(outcome.vae.latent_scale(), outcome.metrics.latent_scale);
    }

    #[test]
    fn diffusion_smoke_training_is_deterministic() {
        let cfg = tiny_config();
        let corpus = Corpus::generate(&cfg).unwrap();
        let vae = VideoVae::new(cfg.vae, 1).unwrap();
        let run = || {
            let (model, log) = train_base(&cfg, &corpus, &vae).unwrap();
            (model, log)
        };
        let (m1, l1) = run();
        let (m2, l2) = run();
        assert_eq!(l1.losses, l2.losses);
        for (id, p) in m1.store.iter() {
            let other = m2.store.id(&p.name).unwrap();
            assert_eq!(
                m1.store.value(id).data(),
                m2.store.value(other).data(),
                "{} differs between identical runs",
                p.name
            );
        }
    }

    #[test]
    fn finetune_trains_only_the_conditioning_parameters() {
        let cfg = tiny_config();
        let corpus = Corpus::generate(&cfg).unwrap();
        let vae = VideoVae::new(cfg.vae, 1).unwrap();
        let (base, _) = train_base(&cfg, &corpus, &vae).unwrap();
        let frozen: Vec<(String, crate::tensor::Tensor)> = base
            .store
            .iter()
            .filter(|(_, p)| !p.name.starts_with("patch_embed."))
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect();
        let (tuned, log) = finetune_sketch(&cfg, &corpus, &vae, &base).unwrap();
        assert!(log.diverged_at.is_none());
        for (name, before) in frozen {
            let id = tuned.store.id(&name).unwrap();
            assert_eq!(tuned.store.value(id).data(), before.data(), "{name} moved");
        }
    }

    #[test]
    fn training_selection_orders_shortest_first() {
        let cfg = tiny_config();
        let corpus = Corpus::generate(&cfg).unwrap();
        let sel = corpus.training_selection(&cfg);
        assert_eq!(sel.len(), 4);
        let counts: Vec<usize> = sel
            .iter()
            .map(|id| corpus.clip(id).unwrap().frames())
            .collect();
        let mut sorted = counts.clone();
        sorted.sort_unstable();
        assert_eq!(counts, sorted, "selection must be shortest first: {counts:?}");
    }

    #[test]
    fn lora_factor_gradients_match_finite_differences() {
        // the diffusion objective's gradients w.r.t. adapter factors
        let cfg = tiny_config();
        let corpus = Corpus::generate(&cfg).unwrap();
        let vae = VideoVae::new(cfg.vae, 1).unwrap();
        let mut base = Denoiser::new(cfg.dit, cfg.latent_dims().unwrap(), 2, 3).unwrap();
        base.randomize_all(4);
        let mut model = base.expand_for_sketch().unwrap();
        crate::adapters::inject_lora(&mut model, &cfg.lora, 5).unwrap();
        // move the up factors off zero so their inputs matter
        for id in model.store.ids() {
            if model.store.name(id).starts_with("lora.") && model.store.name(id).ends_with(".up") {
                let sh = model.store.value(id).shape().to_vec();
                let mut rng = crate::rng::rng_from(6);
                model.store.set_value(id, crate::tensor::Tensor::randn(&sh, &mut rng).scale(0.02));
            }
        }
        let schedule = DiffusionSchedule::new(cfg.schedule).unwrap();
        let cache = build_latent_cache(&cfg, &corpus, &vae, "stageB", true).unwrap();
        let lat = &cache[0];
        let (t, eps) = draw_t_eps(&schedule, lat.x0.tensor().shape(), 9);

        let mut g = Graph::new();
        let loss = model.loss_node(&mut g, lat, t, &eps, &schedule).unwrap();
        let grads = g.backward(loss);
        let step = 1e-5;
        for name in ["lora.blocks.0.attn.q.down", "lora.blocks.0.attn.q.up", "lora.blocks.0.ffn.in.up"] {
            let id = model.store.id(name).unwrap();
            for e in [0usize, 3] {
                let orig = model.store.value(id).data()[e];
                let eval = |m: &Denoiser| {
                    let mut g = Graph::new();
                    let l = m.loss_node(&mut g, lat, t, &eps, &schedule).unwrap();
                    g.value(l).data()[0]
                };
                model.store.value_mut(id).data_mut()[e] = orig + step;
                let fp = eval(&model);
                model.store.value_mut(id).data_mut()[e] = orig - step;
                let fm = eval(&model);
                model.store.value_mut(id).data_mut()[e] = orig;
                let fd = (fp - fm) / (2.0 * step);
                let an = grads.get(id).map(|t| t.data()[e]).unwrap_or(0.0);
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
                assert!(rel <= 1e-3, "{name}[{e}]: analytic {an} vs fd {fd}");
            }
        }
    }

    #[test]
    fn cached_loss_matches_the_spec_level_training_loss() {
        // the latent-cache training path must agree with the direct
        // (encode-inside) objective for the same (clip, seed)
        let cfg = tiny_config();
        let corpus = Corpus::generate(&cfg).unwrap();
        let vae = VideoVae::new(cfg.vae, 1).unwrap();
        let schedule = DiffusionSchedule::new(cfg.schedule).unwrap();
        let base = Denoiser::new(cfg.dit, cfg.latent_dims().unwrap(), 2, 3).unwrap();
        let mut model = base.expand_for_sketch().unwrap();
        model.randomize_all(4);

        let id = corpus.ids(Split::Train)[0].clone();
        let window = sample_window(
            corpus.clip(&id).unwrap(),
            cfg.data.frames,
            derive_seed(cfg.root_seed, "sketchB-window", 0),
        )
        .unwrap();
        let example = make_training_example(&window, &cfg.sketch).unwrap();
        let seed = 99;
        let direct = crate::diffusion::training_loss(&model, &vae, &example, &schedule, seed).unwrap();

        let lat = encode_example(&vae, &example).unwrap();
        let (t, eps) = draw_t_eps(&schedule, lat.x0.tensor().shape(), seed);
        let mut g = Graph::new();
        let node = model.loss_node(&mut g, &lat, t, &eps, &schedule).unwrap();
        let cached = g.value(node).data()[0];
        assert!(
            (direct - cached).abs() < 1e-12,
            "direct {direct} vs cached {cached}"
        );
    }
}
