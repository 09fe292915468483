//! Causal 3D convolutional video VAE.
//!
//! The encoder compresses a [T,H,W,3] clip into a
//! [(T−1)/tf+1, H/sf, W/sf, C] latent (tf/sf/C configurable, default 4/4/16).
//! Temporal convolutions pad only on the past side, so frame 0 encodes on
//! its own and latents are causal. The decoder mirrors the encoder with
//! nearest-neighbour upsampling. Once trained the VAE is frozen and shared
//! by every downstream stream (reference, ground truth, sketches).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{xavier_uniform, Param, ParamId, ParamStore};
use crate::rng::rng_from;
use crate::tensor::{Conv3dSpec, Tensor};
use crate::video::{latent_frames, LatentTensor, VideoTensor};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct VaeConfig {
    pub temporal_factor: usize,
    /// Spatial compression; must be a power of two.
    pub spatial_factor: usize,
    pub latent_channels: usize,
    /// Channel width of the first encoder stage.
    pub base_width: usize,
    pub kl_weight: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            temporal_factor: 4,
            spatial_factor: 4,
            latent_channels: 16,
            base_width: 32,
            kl_weight: 1e-6,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temporal_factor < 1 {
            return Err(Error::Config("temporal_factor must be ≥ 1".into()));
        }
        if self.spatial_factor < 1 || !self.spatial_factor.is_power_of_two() {
            return Err(Error::Config(format!(
                "spatial_factor must be a power of 2, got {}",
                self.spatial_factor
            )));
        }
        if self.latent_channels < 1 {
            return Err(Error::Config("latent_channels must be ≥ 1".into()));
        }
        if self.base_width < 1 {
            return Err(Error::Config("base_width must be ≥ 1".into()));
        }
        Ok(())
    }

    fn spatial_stages(&self) -> usize {
        self.spatial_factor.trailing_zeros() as usize
    }

    /// Latent dims for a pixel clip, with errors naming the offending axis.
    pub fn latent_dims(&self, frames: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        let lt = latent_frames(frames, self.temporal_factor)?;
        if h == 0 || h % self.spatial_factor != 0 {
            return Err(Error::Dimension(format!(
                "height axis {h} must be divisible by {}",
                self.spatial_factor
            )));
        }
        if w == 0 || w % self.spatial_factor != 0 {
            return Err(Error::Dimension(format!(
                "width axis {w} must be divisible by {}",
                self.spatial_factor
            )));
        }
        Ok((lt, h / self.spatial_factor, w / self.spatial_factor))
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    w: ParamId,
    b: ParamId,
    spec: Conv3dSpec,
    silu: bool,
}

/// Whether encode samples the posterior or returns its mean.
#[derive(Clone, Copy, Debug)]
pub enum EncodeMode {
    Sample(u64),
    Mean,
}

/// Reconstruction/KL pieces of the VAE objective.
#[derive(Clone, Copy, Debug)]
pub struct VaeLoss {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

pub struct VideoVae {
    pub cfg: VaeConfig,
    pub store: ParamStore,
    encoder: Vec<ConvLayer>,
    decoder: Vec<ConvLayer>,
    /// Decoder stages after which a nearest-neighbour upsample runs:
    /// (layer index, temporal?) pairs, applied before that layer.
    dec_upsample_before: Vec<(usize, bool)>,
    latent_scale: ParamId,
}

impl VideoVae {
    pub fn new(cfg: VaeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from(seed);
        let mut store = ParamStore::new();
        let n = cfg.spatial_stages();
        let top = cfg.base_width << n;

        let mut encoder = Vec::new();
        let conv = |store: &mut ParamStore,
                        rng: &mut rand_chacha::ChaCha8Rng,
                        name: &str,
                        spec: Conv3dSpec,
                        silu: bool| {
            let fan_in = spec.c_in * spec.kt * spec.kh * spec.kw;
            let w = store.register(Param::new(
                format!("{name}.w"),
                xavier_uniform(&spec.weight_shape(), fan_in, spec.c_out, rng),
                true,
            ));
            let b =
                store.register(Param::new(format!("{name}.b"), Tensor::zeros(&[spec.c_out]), true));
            ConvLayer { w, b, spec, silu }
        };

        encoder.push(conv(&mut store, &mut rng, "enc.stem", Conv3dSpec::same(3, cfg.base_width, 3, 3, 3), true));
        for i in 0..n {
            let c_in = cfg.base_width << i;
            encoder.push(conv(
                &mut store,
                &mut rng,
                &format!("enc.down{i}"),
                Conv3dSpec::down_spatial(c_in, c_in * 2),
                true,
            ));
        }
        if cfg.temporal_factor > 1 {
            encoder.push(conv(
                &mut store,
                &mut rng,
                "enc.tdown",
                Conv3dSpec::down_temporal(top, top, cfg.temporal_factor),
                true,
            ));
        }
        encoder.push(conv(&mut store, &mut rng, "enc.mid", Conv3dSpec::same(top, top, 3, 3, 3), true));
        encoder.push(conv(
            &mut store,
            &mut rng,
            "enc.head",
            Conv3dSpec::same(top, 2 * cfg.latent_channels, 1, 1, 1),
            false,
        ));

        let mut decoder = Vec::new();
        let mut dec_upsample_before = Vec::new();
        decoder.push(conv(&mut store, &mut rng, "dec.in", Conv3dSpec::same(cfg.latent_channels, top, 3, 3, 3), true));
        decoder.push(conv(&mut store, &mut rng, "dec.mid", Conv3dSpec::same(top, top, 3, 3, 3), true));
        if cfg.temporal_factor > 1 {
            dec_upsample_before.push((decoder.len(), true));
            decoder.push(conv(&mut store, &mut rng, "dec.tup", Conv3dSpec::same(top, top, 3, 3, 3), true));
        }
        for i in (0..n).rev() {
            let c_in = cfg.base_width << (i + 1);
            dec_upsample_before.push((decoder.len(), false));
            decoder.push(conv(
                &mut store,
                &mut rng,
                &format!("dec.up{i}"),
                Conv3dSpec::same(c_in, c_in / 2, 3, 3, 3),
                true,
            ));
        }
        decoder.push(conv(&mut store, &mut rng, "dec.out", Conv3dSpec::same(cfg.base_width, 3, 3, 3, 3), false));

        let latent_scale =
            store.register(Param::new("latent_scale", Tensor::scalar(1.0), false));

        Ok(Self { cfg, store, encoder, decoder, dec_upsample_before, latent_scale })
    }

    /// Global scalar applied to latents before diffusion; recorded after
    /// VAE training so latents have roughly unit standard deviation.
    pub fn latent_scale(&self) -> f64 {
        self.store.value(self.latent_scale).data()[0]
    }

    pub fn set_latent_scale(&mut self, s: f64) {
        self.store.set_value(self.latent_scale, Tensor::scalar(s));
    }

    fn check_finite(value: &Tensor, stage: &str, layer: usize) -> Result<()> {
        if value.all_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite activations in {stage} layer {layer}")))
        }
    }

    /// Runs the encoder; returns (mu, logvar) nodes of shape [lt,lh,lw,C].
    fn encoder_graph(&self, g: &mut Graph, video: &VideoTensor) -> Result<(NodeId, NodeId)> {
        self.cfg.latent_dims(video.frames(), video.height(), video.width())?;
        // normalize [0,1] pixels to [−1,1]
        let x01 = g.input(video.tensor().clone());
        let x = g.scale(x01, 2.0);
        let mut x = g.add_scalar(x, -1.0);
        for (i, layer) in self.encoder.iter().enumerate() {
            let w = self.store.node(g, layer.w);
            let b = self.store.node(g, layer.b);
            x = g.conv3d(x, w, b, layer.spec);
            if layer.silu {
                x = g.silu(x);
            }
            Self::check_finite(g.value(x), "encoder", i)?;
        }
        let c = self.cfg.latent_channels;
        let mu = g.slice_cols(x, 0, c);
        let logvar = g.slice_cols(x, c, c);
        Ok((mu, logvar))
    }

    /// Runs the decoder from a latent node; returns the raw pre-pixel node
    /// (maps to pixels via (y+1)/2).
    fn decoder_graph(&self, g: &mut Graph, mut x: NodeId) -> Result<NodeId> {
        for (i, layer) in self.decoder.iter().enumerate() {
            for &(at, temporal) in &self.dec_upsample_before {
                if at == i {
                    x = if temporal {
                        g.upsample_temporal(x, self.cfg.temporal_factor)
                    } else {
                        g.upsample_spatial2(x)
                    };
                }
            }
            let w = self.store.node(g, layer.w);
            let b = self.store.node(g, layer.b);
            x = g.conv3d(x, w, b, layer.spec);
            if layer.silu {
                x = g.silu(x);
            }
            Self::check_finite(g.value(x), "decoder", i)?;
        }
        Ok(x)
    }

    /// Encodes a clip to a latent. `Sample` draws the reparameterized
    /// posterior sample from the seed; `Mean` returns the posterior mean.
    pub fn encode_with(&self, video: &VideoTensor, mode: EncodeMode) -> Result<LatentTensor> {
        let mut g = Graph::new();
        let (mu, logvar) = self.encoder_graph(&mut g, video)?;
        let value = match mode {
            EncodeMode::Mean => g.value(mu).clone(),
            EncodeMode::Sample(seed) => {
                let mut rng = rng_from(seed);
                let eps = Tensor::randn(g.value(mu).shape(), &mut rng);
                let sigma = g
                    .value(logvar)
                    .map(|lv| (0.5 * lv).exp());
                let mut z = g.value(mu).clone();
                let zd = z.data_mut();
                for ((z, s), e) in zd.iter_mut().zip(sigma.data()).zip(eps.data()) {
                    *z += s * e;
                }
                z
            }
        };
        LatentTensor::new(value)
    }

    /// Posterior sample driven by `seed`.
    pub fn encode(&self, video: &VideoTensor, seed: u64) -> Result<LatentTensor> {
        self.encode_with(video, EncodeMode::Sample(seed))
    }

    /// Posterior mean (the deterministic mode used by the frozen pipeline).
    pub fn encode_mean(&self, video: &VideoTensor) -> Result<LatentTensor> {
        self.encode_with(video, EncodeMode::Mean)
    }

    /// Decodes a latent back to pixels, clamped to [0,1].
    pub fn decode(&self, latent: &LatentTensor) -> Result<VideoTensor> {
        if latent.channels() != self.cfg.latent_channels {
            return Err(Error::Config(format!(
                "latent has {} channels, config expects {}",
                latent.channels(),
                self.cfg.latent_channels
            )));
        }
        let mut g = Graph::new();
        let z = g.input(latent.tensor().clone());
        let y = self.decoder_graph(&mut g, z)?;
        let pixels = g.value(y).map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0));
        VideoTensor::new(pixels)
    }

    /// Builds the full training graph and returns (graph, total-loss node,
    /// loss values). The reconstruction term is pixel-space MSE (through the
    /// unclamped decoder output); KL is the analytic diagonal-Gaussian term
    /// averaged per latent element.
    pub fn loss_graph(&self, video: &VideoTensor, seed: u64) -> Result<(Graph, NodeId, VaeLoss)> {
        let mut g = Graph::new();
        let (mu, logvar) = self.encoder_graph(&mut g, video)?;
        // z = mu + exp(logvar/2) ⊙ eps
        let mut rng = rng_from(seed);
        let eps = g.input(Tensor::randn(g.value(mu).shape(), &mut rng));
        let half_lv = g.scale(logvar, 0.5);
        let sigma = g.exp(half_lv);
        let noise = g.mul(sigma, eps);
        let z = g.add(mu, noise);
        let y = self.decoder_graph(&mut g, z)?;
        // pixel-space reconstruction: (y+1)/2 vs the [0,1] input
        let y_half = g.scale(y, 0.5);
        let pred01 = g.add_scalar(y_half, 0.5);
        let target = g.input(video.tensor().clone());
        let recon = g.mse(pred01, target);
        // KL(N(mu, sigma²) ‖ N(0,1)) per element: 0.5(mu² + e^lv − 1 − lv)
        let mu_sq = g.mul(mu, mu);
        let e_lv = g.exp(logvar);
        let sum = g.add(mu_sq, e_lv);
        let sum = g.add_scalar(sum, -1.0);
        let sum = g.sub(sum, logvar);
        let half = g.scale(sum, 0.5);
        let kl = g.mean_all(half);
        let kl_scaled = g.scale(kl, self.cfg.kl_weight);
        let total = g.add(recon, kl_scaled);
        let loss = VaeLoss {
            total: g.value(total).data()[0],
            reconstruction: g.value(recon).data()[0],
            kl: g.value(kl).data()[0],
        };
        if !loss.total.is_finite() {
            return Err(Error::Numeric("non-finite loss in vae objective".into()));
        }
        Ok((g, total, loss))
    }

    /// Loss values only.
    pub fn vae_loss(&self, video: &VideoTensor, seed: u64) -> Result<VaeLoss> {
        Ok(self.loss_graph(video, seed)?.2)
    }
}

/// Analytic diagonal-Gaussian KL per element, the term `vae_loss` averages.
pub fn kl_element(mu: f64, logvar: f64) -> f64 {
    0.5 * (mu * mu + logvar.exp() - 1.0 - logvar)
}

/// Pixel-space mean-squared reconstruction error between two tensors.
pub fn reconstruction_mse(pred: &Tensor, target: &Tensor) -> f64 {
    assert_eq!(pred.shape(), target.shape());
    pred.data()
        .iter()
        .zip(target.data().iter())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64
}

/// Zero-pads a single-frame reference latent out to `target_latent_frames`:
/// frame 0 is the input bit for bit, frames 1.. are exactly zero.
pub fn pad_reference(ref_latent: &LatentTensor, target_latent_frames: usize) -> Result<LatentTensor> {
    if ref_latent.frames() != 1 {
        return Err(Error::Contract(format!(
            "reference latent must hold exactly the single coloured first frame, got {} frames",
            ref_latent.frames()
        )));
    }
    if target_latent_frames < 1 {
        return Err(Error::Contract("target latent length must be ≥ 1".into()));
    }
    let (h, w, c) = (ref_latent.height(), ref_latent.width(), ref_latent.channels());
    let frame_len = h * w * c;
    let mut data = vec![0.0; target_latent_frames * frame_len];
    data[..frame_len].copy_from_slice(ref_latent.tensor().data());
    LatentTensor::new(Tensor::from_vec(&[target_latent_frames, h, w, c], data))
}

/// Channel-dimension PCA of a latent, for latent visualization.
#[derive(Clone, Debug)]
pub struct ChannelPca {
    /// [T,H,W,k], each component min-max normalized to [0,1].
    pub normalized: Tensor,
    /// [T,H,W,k] raw projection scores.
    pub projected: Tensor,
    /// k loading vectors (length C), sign-canonicalized so each vector's
    /// largest-magnitude entry is positive.
    pub loadings: Vec<Vec<f64>>,
    pub channel_means: Vec<f64>,
    /// Fraction of total variance explained per component.
    pub explained_variance: Vec<f64>,
}

/// Fits PCA over every (t,h,w) position treated as a C-dimensional sample
/// and projects onto the top `components` axes.
pub fn pca_channel_projection(latent: &LatentTensor, components: usize) -> Result<ChannelPca> {
    let c = latent.channels();
    if components == 0 || components > c {
        return Err(Error::Config(format!(
            "components {components} must lie in 1..={c}"
        )));
    }
    let n = latent.frames() * latent.height() * latent.width();
    if n < 2 {
        return Err(Error::Degenerate("need at least 2 latent positions".into()));
    }
    let data = latent.tensor().data();
    let mut means = vec![0.0; c];
    for pos in 0..n {
        for ch in 0..c {
            means[ch] += data[pos * c + ch];
        }
    }
    for m in means.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = DMatrix::<f64>::zeros(c, c);
    for pos in 0..n {
        for i in 0..c {
            let di = data[pos * c + i] - means[i];
            for j in i..c {
                let dj = data[pos * c + j] - means[j];
                cov[(i, j)] += di * dj;
            }
        }
    }
    for i in 0..c {
        for j in 0..i {
            cov[(i, j)] = cov[(j, i)];
        }
    }
    cov /= (n - 1) as f64;
    let total_var = cov.trace();
    if total_var <= 1e-12 {
        return Err(Error::Degenerate(
            "constant latent: channel covariance is rank deficient".into(),
        ));
    }
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut loadings = Vec::with_capacity(components);
    let mut explained = Vec::with_capacity(components);
    for &idx in order.iter().take(components) {
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        // canonical sign: largest-magnitude entry positive
        let lead = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        if v[lead] < 0.0 {
            for x in v.iter_mut() {
                *x = -*x;
            }
        }
        loadings.push(v);
        explained.push((eig.eigenvalues[idx] / total_var).max(0.0));
    }

    let mut projected = vec![0.0; n * components];
    for pos in 0..n {
        for (k, load) in loadings.iter().enumerate() {
            let mut acc = 0.0;
            for ch in 0..c {
                acc += (data[pos * c + ch] - means[ch]) * load[ch];
            }
            projected[pos * components + k] = acc;
        }
    }
    // per-component min-max to [0,1]
    let mut normalized = projected.clone();
    for k in 0..components {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for pos in 0..n {
            let v = projected[pos * components + k];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let range = hi - lo;
        for pos in 0..n {
            let v = &mut normalized[pos * components + k];
            *v = if range > 1e-12 { (*v - lo) / range } else { 0.5 };
        }
    }
    let shape = [latent.frames(), latent.height(), latent.width(), components];
    Ok(ChannelPca {
        normalized: Tensor::from_vec(&shape, normalized),
        projected: Tensor::from_vec(&shape, projected),
        loadings,
        channel_means: means,
        explained_variance: explained,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_vae() -> VideoVae {
        let cfg = VaeConfig {
            temporal_factor: 4,
            spatial_factor: 2,
            latent_channels: 4,
            base_width: 4,
            kl_weight: 1e-6,
        };
        VideoVae::new(cfg, 99).unwrap()
    }

    fn ramp_video(frames: usize, h: usize, w: usize) -> VideoTensor {
        VideoTensor::from_fn(frames, h, w, |t, y, x, c| {
            ((t * 31 + y * 7 + x * 3 + c) % 97) as f64 / 96.0
        })
    }

    #[test]
    fn encode_shape_law_paper_case() {
        // 17×64×96×3 → 5×16×24×16 with the default factors
        let vae = VideoVae::new(VaeConfig { base_width: 2, ..Default::default() }, 1).unwrap();
        let video = ramp_video(17, 64, 96);
        let z = vae.encode_mean(&video).unwrap();
        assert_eq!(
            (z.frames(), z.height(), z.width(), z.channels()),
            (5, 16, 24, 16)
        );
    }

    #[test]
    fn encode_shape_law_single_frame_and_mixed_factors() {
        let vae = VideoVae::new(VaeConfig { base_width: 2, ..Default::default() }, 1).unwrap();
        let z = vae.encode_mean(&ramp_video(1, 4, 4)).unwrap();
        assert_eq!((z.frames(), z.height(), z.width(), z.channels()), (1, 1, 1, 16));

        let vae = VideoVae::new(
            VaeConfig { spatial_factor: 2, base_width: 2, ..Default::default() },
            1,
        )
        .unwrap();
        let z = vae.encode_mean(&ramp_video(9, 8, 8)).unwrap();
        assert_eq!((z.frames(), z.height(), z.width(), z.channels()), (3, 4, 4, 16));
    }

    #[test]
    fn encode_rejects_bad_axes_naming_the_divisor() {
        let vae = micro_vae();
        let err = vae.encode_mean(&ramp_video(16, 8, 8)).unwrap_err();
        assert!(err.to_string().contains("mod 4"), "{err}");
        let err = vae.encode_mean(&ramp_video(17, 9, 8)).unwrap_err();
        assert!(err.to_string().contains("height") && err.to_string().contains("2"), "{err}");
    }

    #[test]
    fn encode_is_seed_deterministic() {
        let vae = micro_vae();
        let video = ramp_video(5, 8, 8);
        let a = vae.encode(&video, 7).unwrap();
        let b = vae.encode(&video, 7).unwrap();
        assert_eq!(a.tensor().data(), b.tensor().data());
        let c = vae.encode(&video, 8).unwrap();
        assert_ne!(a.tensor().data(), c.tensor().data());
        let m1 = vae.encode_mean(&video).unwrap();
        let m2 = vae.encode_mean(&video).unwrap();
        assert_eq!(m1.tensor().data(), m2.tensor().data());
    }

    #[test]
    fn decode_inverts_shape_and_stays_in_range() {
        let vae = micro_vae();
        let z = LatentTensor::new(Tensor::filled(&[2, 4, 4, 4], 0.3)).unwrap();
        let v = vae.decode(&z).unwrap();
        assert_eq!((v.frames(), v.height(), v.width()), (5, 8, 8));
        assert!(v.tensor().data().iter().all(|&x| (0.0..=1.0).contains(&x)));

        // all-zeros latent decodes to a valid clip too
        let z0 = LatentTensor::zeros(2, 4, 4, 4);
        let v0 = vae.decode(&z0).unwrap();
        assert!(v0.tensor().data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn decode_rejects_channel_mismatch() {
        let vae = micro_vae();
        let z = LatentTensor::zeros(2, 4, 4, 7);
        assert!(matches!(vae.decode(&z), Err(Error::Config(_))));
    }

    #[test]
    fn pad_reference_contract() {
        let mut rng = rng_from(3);
        let r = LatentTensor::new(Tensor::randn(&[1, 4, 6, 4], &mut rng)).unwrap();
        let padded = pad_reference(&r, 5).unwrap();
        assert_eq!(padded.frames(), 5);
        let flen = 4 * 6 * 4;
        assert_eq!(&padded.tensor().data()[..flen], r.tensor().data());
        assert!(padded.tensor().data()[flen..].iter().all(|&v| v == 0.0));
        // zero padding adds nothing to the mass
        assert_eq!(padded.tensor().abs_sum(), r.tensor().abs_sum());
        // target 1 → identity
        let same = pad_reference(&r, 1).unwrap();
        assert_eq!(same.tensor().data(), r.tensor().data());
        // more than one input frame is a contract violation
        let two = LatentTensor::zeros(2, 4, 6, 4);
        assert!(matches!(pad_reference(&two, 5), Err(Error::Contract(_))));
    }

    #[test]
    fn vae_loss_kl_weight_zero_and_finiteness() {
        let mut cfg = micro_vae().cfg;
        cfg.kl_weight = 0.0;
        let vae = VideoVae::new(cfg, 99).unwrap();
        let loss = vae.vae_loss(&ramp_video(5, 8, 8), 1).unwrap();
        assert_eq!(loss.total, loss.reconstruction);
        assert!(loss.total.is_finite() && loss.total >= 0.0);
        assert!(loss.kl >= 0.0);
    }

    #[test]
    fn kl_of_standard_posterior_is_zero() {
        assert_eq!(kl_element(0.0, 0.0), 0.0);
        assert!(kl_element(0.5, 0.3) > 0.0);
        assert!(kl_element(-0.5, -0.3) > 0.0);
    }

    #[test]
    fn reconstruction_mse_scalar_oracle() {
        // single pixel: x = 0.5, x̂ = 0.25 → (0.25)² = 0.0625
        let x = Tensor::scalar(0.5);
        let xh = Tensor::scalar(0.25);
        assert_eq!(reconstruction_mse(&xh, &x), 0.0625);
    }

    #[test]
    fn nan_weight_raises_numeric_error_with_layer_index() {
        let mut vae = micro_vae();
        let wid = vae.store.id("enc.mid.w").unwrap();
        for v in vae.store.value_mut(wid).data_mut() {
            *v = f64::NAN;
        }
        let err = vae.vae_loss(&ramp_video(5, 8, 8), 0).unwrap_err();
        match err {
            Error::Numeric(msg) => assert!(msg.contains("encoder layer"), "{msg}"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn pca_rank_one_latent_explains_everything() {
        // channel c = c · plane(t,h,w): samples span a 1-D channel subspace
        let (t, h, w, c) = (2, 4, 4, 6);
        let mut data = vec![0.0; t * h * w * c];
        for pos in 0..t * h * w {
            let plane = ((pos * 13) % 11) as f64 / 11.0 - 0.4;
            for ch in 0..c {
                data[pos * c + ch] = ch as f64 * plane;
            }
        }
        let latent = LatentTensor::new(Tensor::from_vec(&[t, h, w, c], data)).unwrap();
        let pca = pca_channel_projection(&latent, 3).unwrap();
        assert!(
            pca.explained_variance[0] > 1.0 - 1e-9,
            "first component explains {}",
            pca.explained_variance[0]
        );
        assert!(pca.normalized.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn pca_full_rank_reconstruction() {
        let mut rng = rng_from(17);
        let latent = LatentTensor::new(Tensor::randn(&[2, 3, 3, 5], &mut rng)).unwrap();
        let c = 5;
        let pca = pca_channel_projection(&latent, c).unwrap();
        // reconstruct centered data from all components
        let n = 2 * 3 * 3;
        let data = latent.tensor().data();
        for pos in 0..n {
            for ch in 0..c {
                let centered = data[pos * c + ch] - pca.channel_means[ch];
                let mut rec = 0.0;
                for k in 0..c {
                    rec += pca.projected.data()[pos * c + k] * pca.loadings[k][ch];
                }
                assert!(
                    (rec - centered).abs() < 1e-5,
                    "pos {pos} ch {ch}: {rec} vs {centered}"
                );
            }
        }
    }

    #[test]
    fn pca_constant_latent_is_degenerate() {
        let latent = LatentTensor::new(Tensor::filled(&[2, 4, 4, 6], 1.3)).unwrap();
        assert!(matches!(pca_channel_projection(&latent, 3), Err(Error::Degenerate(_))));
    }

    #[test]
    fn roundtrip_restores_pixel_shape() {
        let vae = micro_vae();
        let video = ramp_video(9, 8, 8);
        let z = vae.encode_mean(&video).unwrap();
        let back = vae.decode(&z).unwrap();
        assert_eq!(
            (back.frames(), back.height(), back.width()),
            (video.frames(), video.height(), video.width())
        );
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(8))]
        #[test]
        fn shape_law_roundtrip(m in 0usize..3, hs in 1usize..4, ws in 1usize..4) {
            let vae = micro_vae();
            let frames = 4 * m + 1;
            let (h, w) = (2 * hs, 2 * ws);
            let video = ramp_video(frames, h, w);
            let z = vae.encode_mean(&video).unwrap();
            proptest::prop_assert_eq!(z.frames(), m + 1);
            proptest::prop_assert_eq!(z.height(), h / 2);
            proptest::prop_assert_eq!(z.width(), w / 2);
            let back = vae.decode(&z).unwrap();
            proptest::prop_assert_eq!(back.frames(), frames);
            proptest::prop_assert_eq!(back.height(), h);
            proptest::prop_assert_eq!(back.width(), w);
        }
    }
}
