//! Patch-token diffusion transformer over channel-concatenated latents.
//!
//! Three latent streams — noisy video, zero-padded coloured reference,
//! binary sketch — are stacked channel-wise, cut into spatiotemporal
//! patches, projected by a single shared patch embedding and processed by
//! pre-norm transformer blocks with adaptive layer-norm timestep
//! conditioning. Sketch support is added to a two-stream base by widening
//! the patch embedding with exactly-zero rows, so the expanded model's
//! output is bitwise independent of the sketch until training moves those
//! rows.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::LoraLayer;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{xavier_uniform, Param, ParamId, ParamStore};
use crate::rng::rng_from;
use crate::tensor::Tensor;
use crate::video::LatentTensor;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DitConfig {
    pub model_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch_t: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub latent_channels: usize,
    /// Streams consumed by the finished artifact: noisy, reference, sketch.
    pub streams: usize,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self {
            model_dim: 128,
            depth: 4,
            heads: 4,
            patch_t: 1,
            patch_h: 2,
            patch_w: 2,
            latent_channels: 16,
            streams: 3,
        }
    }
}

impl DitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.model_dim % 2 != 0 {
            return Err(Error::Config("model_dim must be even for the timestep embedding".into()));
        }
        if self.patch_t == 0 || self.patch_h == 0 || self.patch_w == 0 {
            return Err(Error::Config("patch sizes must be ≥ 1".into()));
        }
        if self.depth == 0 {
            return Err(Error::Config("depth must be ≥ 1".into()));
        }
        if self.streams != 3 {
            return Err(Error::Config("this artifact uses exactly 3 streams".into()));
        }
        Ok(())
    }

    /// Patch-vector length per input channel.
    pub fn patch_volume(&self) -> usize {
        self.patch_t * self.patch_h * self.patch_w
    }

    /// Token grid for latent dims, with divisibility errors.
    pub fn token_grid(&self, lt: usize, lh: usize, lw: usize) -> Result<(usize, usize, usize)> {
        for (name, dim, patch) in
            [("latent frames", lt, self.patch_t), ("latent height", lh, self.patch_h), ("latent width", lw, self.patch_w)]
        {
            if dim == 0 || dim % patch != 0 {
                return Err(Error::Dimension(format!(
                    "{name} axis {dim} must be divisible by patch size {patch}"
                )));
            }
        }
        Ok((lt / self.patch_t, lh / self.patch_h, lw / self.patch_w))
    }
}

/// Embedded tokens plus their spatiotemporal grid.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    /// N×modelDim token matrix, N = nt·nh·nw.
    pub tokens: Tensor,
    pub grid: (usize, usize, usize),
}

/// The patch-embedding projection: kernel [inputChannels, patchVolume,
/// modelDim] (flattened to (inputChannels·patchVolume)×modelDim) plus bias.
#[derive(Clone, Debug)]
pub struct PatchEmbedWeights {
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// Widens a two-stream patch embedding to three streams: pretrained rows
/// are copied bit for bit, the new sketch-channel rows are exactly zero and
/// the bias is unchanged, so the projection output — and therefore the whole
/// model — is untouched at expansion time.
pub fn expand_patch_embedding(
    pretrained: &PatchEmbedWeights,
    cfg: &DitConfig,
) -> Result<PatchEmbedWeights> {
    let k = cfg.patch_volume();
    let d = cfg.model_dim;
    let base_channels = (cfg.streams - 1) * cfg.latent_channels;
    let expected = [base_channels, k, d];
    if pretrained.kernel.shape() != expected {
        return Err(Error::Config(format!(
            "pretrained patch kernel must cover exactly {} channels (shape {:?}), got {:?}",
            base_channels,
            expected,
            pretrained.kernel.shape()
        )));
    }
    if pretrained.bias.len() != d {
        return Err(Error::Config(format!(
            "patch bias must have {d} entries, got {}",
            pretrained.bias.len()
        )));
    }
    let full_channels = cfg.streams * cfg.latent_channels;
    let mut kernel = vec![0.0; full_channels * k * d];
    kernel[..base_channels * k * d].copy_from_slice(pretrained.kernel.data());
    Ok(PatchEmbedWeights {
        kernel: Tensor::from_vec(&[full_channels, k, d], kernel),
        bias: pretrained.bias.clone(),
    })
}

/// Stacks latent streams channel-wise in the fixed order
/// [noisy ‖ reference ‖ sketch].
pub fn concat_streams(
    noisy: &LatentTensor,
    reference: &LatentTensor,
    sketch: &LatentTensor,
) -> Result<Tensor> {
    concat_latents(&[("noisy", noisy), ("reference", reference), ("sketch", sketch)])
}

/// Channel-wise concatenation with shape checking; errors name the stream
/// that disagrees with the first.
pub fn concat_latents(streams: &[(&str, &LatentTensor)]) -> Result<Tensor> {
    let (_, first) = streams[0];
    let dims = (first.frames(), first.height(), first.width());
    for (name, s) in streams.iter().skip(1) {
        if (s.frames(), s.height(), s.width()) != dims {
            return Err(Error::Dimension(format!(
                "stream {name} has dims {}×{}×{}, expected {}×{}×{}",
                s.frames(),
                s.height(),
                s.width(),
                dims.0,
                dims.1,
                dims.2
            )));
        }
    }
    let (t, h, w) = dims;
    let total_c: usize = streams.iter().map(|(_, s)| s.channels()).sum();
    let mut out = Vec::with_capacity(t * h * w * total_c);
    for pos in 0..t * h * w {
        for (_, s) in streams {
            let c = s.channels();
            out.extend_from_slice(&s.tensor().data()[pos * c..(pos + 1) * c]);
        }
    }
    Ok(Tensor::from_vec(&[t, h, w, total_c], out))
}

/// Gathers a stacked [T,H,W,C] latent into the N×(C·patchVolume) patch
/// matrix. Row layout is channel-major: entry c·K + k holds voxel k of
/// channel c, matching the patch-kernel row order.
pub fn patch_matrix(stacked: &Tensor, cfg: &DitConfig) -> Result<(Tensor, (usize, usize, usize))> {
    let sh = stacked.shape();
    if sh.len() != 4 {
        return Err(Error::Dimension(format!("stacked latent must be [T,H,W,C], got {sh:?}")));
    }
    let (lt, lh, lw, c) = (sh[0], sh[1], sh[2], sh[3]);
    let grid = cfg.token_grid(lt, lh, lw)?;
    let (nt, nh, nw) = grid;
    let k = cfg.patch_volume();
    let data = stacked.data();
    let mut rows = Vec::with_capacity(nt * nh * nw * c * k);
    for t0 in 0..nt {
        for h0 in 0..nh {
            for w0 in 0..nw {
                for ch in 0..c {
                    for dt in 0..cfg.patch_t {
                        for dh in 0..cfg.patch_h {
                            for dw in 0..cfg.patch_w {
                                let ti = t0 * cfg.patch_t + dt;
                                let hi = h0 * cfg.patch_h + dh;
                                let wi = w0 * cfg.patch_w + dw;
                                rows.push(data[((ti * lh + hi) * lw + wi) * c + ch]);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::from_vec(&[nt * nh * nw, c * k], rows), grid))
}

/// Inverse of the patch gather for a single 16-channel stream: reassembles
/// an N×(C·patchVolume) matrix (same channel-major row layout) into a
/// latent. Each output voxel is owned by exactly one token row.
pub fn assemble_patches(
    head_out: &Tensor,
    grid: (usize, usize, usize),
    cfg: &DitConfig,
) -> Result<LatentTensor> {
    let (nt, nh, nw) = grid;
    let c = cfg.latent_channels;
    let k = cfg.patch_volume();
    if head_out.shape() != [nt * nh * nw, c * k] {
        return Err(Error::Dimension(format!(
            "head output {:?} does not match grid {:?} with {} channels",
            head_out.shape(),
            grid,
            c
        )));
    }
    let (lt, lh, lw) = (nt * cfg.patch_t, nh * cfg.patch_h, nw * cfg.patch_w);
    let mut out = vec![0.0; lt * lh * lw * c];
    let data = head_out.data();
    let mut row = 0;
    for t0 in 0..nt {
        for h0 in 0..nh {
            for w0 in 0..nw {
                let r = &data[row * c * k..(row + 1) * c * k];
                for ch in 0..c {
                    for dt in 0..cfg.patch_t {
                        for dh in 0..cfg.patch_h {
                            for dw in 0..cfg.patch_w {
                                let ti = t0 * cfg.patch_t + dt;
                                let hi = h0 * cfg.patch_h + dh;
                                let wi = w0 * cfg.patch_w + dw;
                                let kidx = (dt * cfg.patch_h + dh) * cfg.patch_w + dw;
                                out[((ti * lh + hi) * lw + wi) * c + ch] = r[ch * k + kidx];
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
    LatentTensor::new(Tensor::from_vec(&[lt, lh, lw, c], out))
}

/// Sinusoidal embedding of an integer timestep, dimension `dim` (even).
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000.0f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    Tensor::from_vec(&[1, dim], out)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BlockParams {
    pub mod_w: ParamId,
    pub mod_b: ParamId,
    pub q_w: ParamId,
    pub q_b: ParamId,
    pub k_w: ParamId,
    pub k_b: ParamId,
    pub v_w: ParamId,
    pub v_b: ParamId,
    pub o_w: ParamId,
    pub o_b: ParamId,
    pub ffn_in_w: ParamId,
    pub ffn_in_b: ParamId,
    pub ffn_out_w: ParamId,
    pub ffn_out_b: ParamId,
}

impl BlockParams {
    pub(crate) fn init<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut R) -> Self {
        let hidden = 4 * d;
        let mut lin = |name: &str, din: usize, dout: usize, rng: &mut R| {
            let w = store.register(Param::new(
                format!("{prefix}.{name}.w"),
                xavier_uniform(&[din, dout], din, dout, rng),
                true,
            ));
            let b = store
                .register(Param::new(format!("{prefix}.{name}.b"), Tensor::zeros(&[dout]), true));
            (w, b)
        };
        let (q_w, q_b) = lin("attn.q", d, d, rng);
        let (k_w, k_b) = lin("attn.k", d, d, rng);
        let (v_w, v_b) = lin("attn.v", d, d, rng);
        let (o_w, o_b) = lin("attn.o", d, d, rng);
        let (ffn_in_w, ffn_in_b) = lin("ffn.in", d, hidden, rng);
        let (ffn_out_w, ffn_out_b) = lin("ffn.out", hidden, d, rng);
        // adaptive-layer-norm modulation starts at zero so each block is the
        // identity at initialization
        let mod_w = store.register(Param::new(
            format!("{prefix}.mod.w"),
            Tensor::zeros(&[d, 6 * d]),
            true,
        ));
        let mod_b =
            store.register(Param::new(format!("{prefix}.mod.b"), Tensor::zeros(&[6 * d]), true));
        Self { mod_w, mod_b, q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b, ffn_in_w, ffn_in_b, ffn_out_w, ffn_out_b }
    }

    pub(crate) fn all_ids(&self) -> [ParamId; 14] {
        [
            self.mod_w, self.mod_b, self.q_w, self.q_b, self.k_w, self.k_b, self.v_w, self.v_b,
            self.o_w, self.o_b, self.ffn_in_w, self.ffn_in_b, self.ffn_out_w, self.ffn_out_b,
        ]
    }
}

/// Linear with an optional low-rank adapter looked up by layer path.
pub(crate) fn adapted_linear(
    g: &mut Graph,
    store: &ParamStore,
    lora: &BTreeMap<String, LoraLayer>,
    path: &str,
    w: ParamId,
    b: ParamId,
    x: NodeId,
) -> NodeId {
    let wn = store.node(g, w);
    let bn = store.node(g, b);
    let mm = g.matmul(x, wn);
    let base = g.add_bias(mm, bn);
    if let Some(l) = lora.get(path) {
        let down = store.node(g, l.down);
        let up = store.node(g, l.up);
        let xd = g.matmul(x, down);
        let xdu = g.matmul(xd, up);
        let scaled = g.scale(xdu, l.scaling);
        g.add(base, scaled)
    } else {
        base
    }
}

/// One pre-norm DiT block. `t_mod` is the SiLU-activated timestep embedding
/// (1×D); `prefix` scopes adapter lookups.
pub(crate) fn block_forward(
    g: &mut Graph,
    store: &ParamStore,
    lora: &BTreeMap<String, LoraLayer>,
    bp: &BlockParams,
    prefix: &str,
    x: NodeId,
    t_mod: NodeId,
    heads: usize,
) -> NodeId {
    let d = store.value(bp.q_w).shape()[0];
    let dh = d / heads;
    let mod_w = store.node(g, bp.mod_w);
    let mod_b = store.node(g, bp.mod_b);
    let mm = g.matmul(t_mod, mod_w);
    let modv = g.add_bias(mm, mod_b);
    let shift1 = g.slice_cols(modv, 0, d);
    let scale1 = g.slice_cols(modv, d, d);
    let gate1 = g.slice_cols(modv, 2 * d, d);
    let shift2 = g.slice_cols(modv, 3 * d, d);
    let scale2 = g.slice_cols(modv, 4 * d, d);
    let gate2 = g.slice_cols(modv, 5 * d, d);

    // attention
    let ln1 = g.layer_norm(x, 1e-6);
    let h = g.row_affine(ln1, scale1, shift1);
    let q = adapted_linear(g, store, lora, &format!("{prefix}.attn.q"), bp.q_w, bp.q_b, h);
    let k = adapted_linear(g, store, lora, &format!("{prefix}.attn.k"), bp.k_w, bp.k_b, h);
    let v = adapted_linear(g, store, lora, &format!("{prefix}.attn.v"), bp.v_w, bp.v_b, h);
    let mut head_outs = Vec::with_capacity(heads);
    for i in 0..heads {
        let qh = g.slice_cols(q, i * dh, dh);
        let kh = g.slice_cols(k, i * dh, dh);
        let vh = g.slice_cols(v, i * dh, dh);
        let scores = g.matmul_nt(qh, kh);
        let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax(scaled);
        head_outs.push(g.matmul(attn, vh));
    }
    let merged = g.concat_cols(&head_outs);
    let attn_out =
        adapted_linear(g, store, lora, &format!("{prefix}.attn.o"), bp.o_w, bp.o_b, merged);
    let gated = g.row_mul(attn_out, gate1);
    let x = g.add(x, gated);

    // feed-forward
    let ln2 = g.layer_norm(x, 1e-6);
    let h2 = g.row_affine(ln2, scale2, shift2);
    let up = adapted_linear(g, store, lora, &format!("{prefix}.ffn.in"), bp.ffn_in_w, bp.ffn_in_b, h2);
    let act = g.gelu_tanh(up);
    let down =
        adapted_linear(g, store, lora, &format!("{prefix}.ffn.out"), bp.ffn_out_w, bp.ffn_out_b, act);
    let gated2 = g.row_mul(down, gate2);
    g.add(x, gated2)
}

#[derive(Clone)]
pub struct Denoiser {
    pub cfg: DitConfig,
    /// Latent dims (lt, lh, lw) the positional tables are sized for.
    pub latent_dims: (usize, usize, usize),
    pub grid: (usize, usize, usize),
    pub store: ParamStore,
    /// 2 before sketch expansion, 3 after.
    pub input_streams: usize,
    pub(crate) patch_kernel: ParamId,
    pub(crate) patch_bias: ParamId,
    pos_t: ParamId,
    pos_h: ParamId,
    pos_w: ParamId,
    time_w1: ParamId,
    time_b1: ParamId,
    time_w2: ParamId,
    time_b2: ParamId,
    pub(crate) blocks: Vec<BlockParams>,
    fin_mod_w: ParamId,
    fin_mod_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
    /// Low-rank adapters keyed by layer path (managed by the adapters
    /// module; empty on a plain model).
    pub(crate) lora: BTreeMap<String, LoraLayer>,
}

impl Denoiser {
    /// Builds a model for `input_streams` × latentChannels stacked input
    /// over latents of shape `latent_dims`.
    pub fn new(
        cfg: DitConfig,
        latent_dims: (usize, usize, usize),
        input_streams: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if !(1..=cfg.streams).contains(&input_streams) {
            return Err(Error::Config(format!("input_streams {input_streams} out of range")));
        }
        let (lt, lh, lw) = latent_dims;
        let grid = cfg.token_grid(lt, lh, lw)?;
        let (nt, nh, nw) = grid;
        let d = cfg.model_dim;
        let c_in = input_streams * cfg.latent_channels;
        let k = cfg.patch_volume();
        let mut rng = rng_from(seed);
        let mut store = ParamStore::new();

        let patch_kernel = store.register(Param::new(
            "patch_embed.kernel",
            xavier_uniform(&[c_in, k, d], c_in * k, d, &mut rng),
            true,
        ));
        let patch_bias =
            store.register(Param::new("patch_embed.bias", Tensor::zeros(&[d]), true));
        let mut pos = |name: &str, n: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            store.register(Param::new(name, Tensor::randn(&[n, d], rng).scale(0.02), true))
        };
        let pos_t = pos("pos.t", nt, &mut rng);
        let pos_h = pos("pos.h", nh, &mut rng);
        let pos_w = pos("pos.w", nw, &mut rng);
        let time_w1 = store.register(Param::new(
            "time_mlp.w1",
            xavier_uniform(&[d, d], d, d, &mut rng),
            true,
        ));
        let time_b1 = store.register(Param::new("time_mlp.b1", Tensor::zeros(&[d]), true));
        let time_w2 = store.register(Param::new(
            "time_mlp.w2",
            xavier_uniform(&[d, d], d, d, &mut rng),
            true,
        ));
        let time_b2 = store.register(Param::new("time_mlp.b2", Tensor::zeros(&[d]), true));
        let blocks = (0..cfg.depth)
            .map(|i| BlockParams::init(&mut store, &format!("blocks.{i}"), d, &mut rng))
            .collect();
        // zero-initialized final modulation and head (identity-at-start)
        let fin_mod_w =
            store.register(Param::new("final.mod.w", Tensor::zeros(&[d, 2 * d]), true));
        let fin_mod_b = store.register(Param::new("final.mod.b", Tensor::zeros(&[2 * d]), true));
        let head_w = store.register(Param::new(
            "final.head.w",
            Tensor::zeros(&[d, cfg.latent_channels * k]),
            true,
        ));
        let head_b = store.register(Param::new(
            "final.head.b",
            Tensor::zeros(&[cfg.latent_channels * k]),
            true,
        ));

        Ok(Self {
            cfg,
            latent_dims,
            grid,
            store,
            input_streams,
            patch_kernel,
            patch_bias,
            pos_t,
            pos_h,
            pos_w,
            time_w1,
            time_b1,
            time_w2,
            time_b2,
            blocks,
            fin_mod_w,
            fin_mod_b,
            head_w,
            head_b,
            lora: BTreeMap::new(),
        })
    }

    /// Current patch-embedding weights (cloned).
    pub fn patch_embed_weights(&self) -> PatchEmbedWeights {
        PatchEmbedWeights {
            kernel: self.store.value(self.patch_kernel).clone(),
            bias: self.store.value(self.patch_bias).clone(),
        }
    }

    /// Consumes a two-stream base and returns the three-stream model with a
    /// zero-expanded patch embedding; every other parameter is copied
    /// bit for bit.
    pub fn expand_for_sketch(&self) -> Result<Denoiser> {
        if self.input_streams != self.cfg.streams - 1 {
            return Err(Error::Contract(format!(
                "expansion requires a {}-stream base, this model has {} streams",
                self.cfg.streams - 1,
                self.input_streams
            )));
        }
        let expanded = expand_patch_embedding(&self.patch_embed_weights(), &self.cfg)?;
        let mut out = Denoiser::new(self.cfg, self.latent_dims, self.cfg.streams, 0)?;
        // copy everything that exists in both stores, then overwrite the
        // patch embedding with the expanded weights
        for (id, p) in self.store.iter() {
            if p.name == "patch_embed.kernel" {
                continue;
            }
            if let Some(dst) = out.store.id(&p.name) {
                out.store.set_value(dst, self.store.value(id).clone());
            }
        }
        out.store.set_value(out.patch_kernel, expanded.kernel);
        out.store.set_value(out.patch_bias, expanded.bias);
        Ok(out)
    }

    fn check_finite(value: &Tensor, what: &str) -> Result<()> {
        if value.all_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite activations in {what}")))
        }
    }

    /// SiLU-activated timestep conditioning vector (1×D node).
    pub(crate) fn time_mod_node(&self, g: &mut Graph, t: usize) -> NodeId {
        let emb = g.input(timestep_embedding(t, self.cfg.model_dim));
        let w1 = self.store.node(g, self.time_w1);
        let b1 = self.store.node(g, self.time_b1);
        let mm1 = g.matmul(emb, w1);
        let a1 = g.add_bias(mm1, b1);
        let s1 = g.silu(a1);
        let w2 = self.store.node(g, self.time_w2);
        let b2 = self.store.node(g, self.time_b2);
        let mm2 = g.matmul(s1, w2);
        let a2 = g.add_bias(mm2, b2);
        g.silu(a2)
    }

    /// Embeds a stacked latent into tokens: patch gather → shared projection
    /// → factorized positional embeddings.
    pub(crate) fn embed_tokens(&self, g: &mut Graph, stacked: &Tensor) -> Result<NodeId> {
        let expected_c = self.input_streams * self.cfg.latent_channels;
        if stacked.shape()[3] != expected_c {
            return Err(Error::Dimension(format!(
                "stacked latent has {} channels, model expects {expected_c}",
                stacked.shape()[3]
            )));
        }
        if (stacked.shape()[0], stacked.shape()[1], stacked.shape()[2]) != self.latent_dims {
            return Err(Error::Dimension(format!(
                "latent dims {:?} do not match the model's positional grid {:?}",
                &stacked.shape()[..3],
                self.latent_dims
            )));
        }
        let (rows, grid) = patch_matrix(stacked, &self.cfg)?;
        debug_assert_eq!(grid, self.grid);
        let rows = g.input(rows);
        let kernel = self.store.node(g, self.patch_kernel);
        let d = self.cfg.model_dim;
        let c_k = expected_c * self.cfg.patch_volume();
        let kernel2d = g.reshape(kernel, &[c_k, d]);
        let bias = self.store.node(g, self.patch_bias);
        let mm = g.matmul(rows, kernel2d);
        let tok = g.add_bias(mm, bias);
        let pt = self.store.node(g, self.pos_t);
        let ph = self.store.node(g, self.pos_h);
        let pw = self.store.node(g, self.pos_w);
        Ok(g.add_factorized_pos(tok, pt, ph, pw, self.grid))
    }

    /// Final adaptive layer-norm + linear head over token node `x`.
    pub(crate) fn final_head(&self, g: &mut Graph, x: NodeId, t_mod: NodeId) -> Result<NodeId> {
        let ln = g.layer_norm(x, 1e-6);
        let fw = self.store.node(g, self.fin_mod_w);
        let fb = self.store.node(g, self.fin_mod_b);
        let mm = g.matmul(t_mod, fw);
        let modv = g.add_bias(mm, fb);
        let d = self.cfg.model_dim;
        let shift = g.slice_cols(modv, 0, d);
        let scale = g.slice_cols(modv, d, d);
        let xf = g.row_affine(ln, scale, shift);
        let hw = self.store.node(g, self.head_w);
        let hb = self.store.node(g, self.head_b);
        let hm = g.matmul(xf, hw);
        let out = g.add_bias(hm, hb);
        Self::check_finite(g.value(out), "output head")?;
        Ok(out)
    }

    /// Full forward to the head output (N×(C·K)) as a graph node; training
    /// computes its loss directly on this node.
    pub(crate) fn forward_graph(&self, g: &mut Graph, stacked: &Tensor, t: usize) -> Result<NodeId> {
        let mut x = self.embed_tokens(g, stacked)?;
        Self::check_finite(g.value(x), "patch embedding")?;
        let t_mod = self.time_mod_node(g, t);
        for (i, bp) in self.blocks.iter().enumerate() {
            x = block_forward(g, &self.store, &self.lora, bp, &format!("blocks.{i}"), x, t_mod, self.cfg.heads);
            Self::check_finite(g.value(x), &format!("block {i}"))?;
        }
        self.final_head(g, x, t_mod)
    }

    /// Scalar mean-squared-output probe over a stacked latent, as a live
    /// graph node — the loss used by gradient checks.
    pub fn loss_probe(&self, g: &mut Graph, stacked: &Tensor, t: usize) -> Result<NodeId> {
        let out = self.forward_graph(g, stacked, t)?;
        let sq = g.mul(out, out);
        Ok(g.mean_all(sq))
    }

    /// Prediction over a pre-stacked latent.
    pub fn forward_stacked(&self, stacked: &Tensor, t: usize) -> Result<LatentTensor> {
        let mut g = Graph::new();
        let out = self.forward_graph(&mut g, stacked, t)?;
        assemble_patches(g.value(out), self.grid, &self.cfg)
    }

    /// Three-stream prediction: noisy + padded reference + sketch.
    pub fn forward(
        &self,
        noisy: &LatentTensor,
        reference: &LatentTensor,
        sketch: &LatentTensor,
        t: usize,
    ) -> Result<LatentTensor> {
        if self.input_streams != 3 {
            return Err(Error::Contract(
                "model consumes no sketch stream; a sketch-capable (expanded) checkpoint is required"
                    .into(),
            ));
        }
        let stacked = concat_streams(noisy, reference, sketch)?;
        self.forward_stacked(&stacked, t)
    }

    /// Two-stream prediction (pre-expansion base): noisy + padded reference.
    pub fn forward_base(
        &self,
        noisy: &LatentTensor,
        reference: &LatentTensor,
        t: usize,
    ) -> Result<LatentTensor> {
        if self.input_streams != 2 {
            return Err(Error::Contract(format!(
                "forward_base requires the 2-stream base model, this model has {} streams",
                self.input_streams
            )));
        }
        let stacked = concat_latents(&[("noisy", noisy), ("reference", reference)])?;
        self.forward_stacked(&stacked, t)
    }

    /// Embedded tokens for a stacked latent (no transformer blocks).
    pub fn patchify(&self, stacked: &Tensor) -> Result<TokenSequence> {
        let mut g = Graph::new();
        let tok = self.embed_tokens(&mut g, stacked)?;
        Ok(TokenSequence { tokens: g.value(tok).clone(), grid: self.grid })
    }

    /// Applies the output head to embedded tokens and reassembles the
    /// 16-channel latent geometry.
    pub fn unpatchify(&self, seq: &TokenSequence) -> Result<LatentTensor> {
        if seq.grid != self.grid {
            return Err(Error::Dimension(format!(
                "token grid {:?} does not match model grid {:?}",
                seq.grid, self.grid
            )));
        }
        let mut g = Graph::new();
        let tok = g.input(seq.tokens.clone());
        let hw = self.store.node(&mut g, self.head_w);
        let hb = self.store.node(&mut g, self.head_b);
        let hm = g.matmul(tok, hw);
        let out = g.add_bias(hm, hb);
        assemble_patches(g.value(out), self.grid, &self.cfg)
    }

    /// Overwrites the output head (used by tests that need a specific head).
    pub fn set_head(&mut self, w: Tensor, b: Tensor) {
        self.store.set_value(self.head_w, w);
        self.store.set_value(self.head_b, b);
    }

    /// Fills every parameter with small random values — a test/diagnostic
    /// initialization that removes the zero-init structure so gradients and
    /// Jacobians are generically nonzero.
    pub fn randomize_all(&mut self, seed: u64) {
        let mut rng = rng_from(seed);
        for id in self.store.ids() {
            let shape = self.store.value(id).shape().to_vec();
            let t = Tensor::randn(&shape, &mut rng).scale(0.05);
            self.store.set_value(id, t);
        }
    }

    /// Ids of the patch-embedding parameters (kernel, bias).
    pub fn patch_embed_ids(&self) -> (ParamId, ParamId) {
        (self.patch_kernel, self.patch_bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_cfg() -> DitConfig {
        DitConfig { model_dim: 32, depth: 2, heads: 2, ..Default::default() }
    }

    fn micro_latent(seed: u64, dims: (usize, usize, usize), c: usize) -> LatentTensor {
        let mut rng = rng_from(seed);
        LatentTensor::new(Tensor::randn(&[dims.0, dims.1, dims.2, c], &mut rng)).unwrap()
    }

    #[test]
    fn concat_stream_order_is_fixed() {
        let dims = (2, 4, 4);
        let noisy = micro_latent(1, dims, 16);
        let reference = micro_latent(2, dims, 16);
        let sketch = micro_latent(3, dims, 16);
        let stacked = concat_streams(&noisy, &reference, &sketch).unwrap();
        assert_eq!(stacked.shape(), &[2, 4, 4, 48]);
        // channel 16 of the stack is channel 0 of the reference, everywhere
        for pos in 0..2 * 4 * 4 {
            assert_eq!(stacked.data()[pos * 48 + 16], reference.tensor().data()[pos * 16]);
            assert_eq!(stacked.data()[pos * 48], noisy.tensor().data()[pos * 16]);
            assert_eq!(stacked.data()[pos * 48 + 32], sketch.tensor().data()[pos * 16]);
        }
        // zero in, zero out
        let z = LatentTensor::zeros(2, 4, 4, 16);
        let zs = concat_streams(&z, &z, &z).unwrap();
        assert!(zs.data().iter().all(|&v| v == 0.0));
        // not commutative
        let swapped = concat_streams(&reference, &noisy, &sketch).unwrap();
        assert_ne!(stacked.data(), swapped.data());
        // mismatch names the offending stream
        let bad = micro_latent(4, (2, 4, 8), 16);
        let err = concat_streams(&noisy, &reference, &bad).unwrap_err();
        assert!(err.to_string().contains("sketch"), "{err}");
    }

    #[test]
    fn token_counts_match_the_grid_arithmetic() {
        let cfg = DitConfig::default();
        let stacked = Tensor::zeros(&[5, 16, 24, 48]);
        let (rows, grid) = patch_matrix(&stacked, &cfg).unwrap();
        assert_eq!(grid, (5, 8, 12));
        assert_eq!(rows.shape(), &[480, 48 * 4]);

        let degenerate = DitConfig { patch_t: 1, patch_h: 1, patch_w: 1, ..cfg };
        let (rows, grid) = patch_matrix(&stacked, &degenerate).unwrap();
        assert_eq!(grid, (5, 16, 24));
        assert_eq!(rows.shape(), &[1920, 48]);

        let bad = Tensor::zeros(&[5, 15, 24, 48]);
        assert!(matches!(patch_matrix(&bad, &cfg), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_sketch_kernel_rows_make_patchify_sketch_blind() {
        let cfg = micro_cfg();
        let dims = (2, 4, 4);
        let base = Denoiser::new(cfg, dims, 2, 5).unwrap();
        let model = base.expand_for_sketch().unwrap();
        let noisy = micro_latent(1, dims, 16);
        let reference = micro_latent(2, dims, 16);
        let a = concat_streams(&noisy, &reference, &micro_latent(3, dims, 16)).unwrap();
        let b = concat_streams(&noisy, &reference, &micro_latent(4, dims, 16)).unwrap();
        let ta = model.patchify(&a).unwrap();
        let tb = model.patchify(&b).unwrap();
        assert_eq!(ta.tokens.data(), tb.tokens.data());
    }

    #[test]
    fn unpatchify_with_pseudo_inverse_head_inverts_patchify() {
        // single-stream (16-channel) embedding with random kernel; head set
        // to its Moore–Penrose right inverse reproduces the latent. Needs
        // model_dim ≥ 16·patchVolume so the projection loses nothing.
        let cfg = DitConfig { depth: 2, ..Default::default() };
        let dims = (2, 4, 4);
        let mut model = Denoiser::new(cfg, dims, 1, 7).unwrap();
        // zero out the bias and positional terms so tokens are P·E exactly
        for name in ["patch_embed.bias", "pos.t", "pos.h", "pos.w"] {
            let id = model.store.id(name).unwrap();
            let sh = model.store.value(id).shape().to_vec();
            model.store.set_value(id, Tensor::zeros(&sh));
        }
        let k = cfg.patch_volume();
        let ck = 16 * k;
        let d = cfg.model_dim;
        let kern = model.store.value(model.patch_kernel).clone();
        let e = nalgebra::DMatrix::from_row_slice(ck, d, kern.data());
        let pinv = e.clone().pseudo_inverse(1e-12).expect("pinv");
        // head (d × ck): rows of pinv are already d-major
        let mut head = vec![0.0; d * ck];
        for r in 0..d {
            for c in 0..ck {
                head[r * ck + c] = pinv[(r, c)];
            }
        }
        model.set_head(Tensor::from_vec(&[d, ck], head), Tensor::zeros(&[ck]));
        let latent = micro_latent(9, dims, 16);
        let seq = model.patchify(latent.tensor()).unwrap();
        let back = model.unpatchify(&seq).unwrap();
        assert_eq!(back.tensor().shape(), latent.tensor().shape());
        for (a, b) in back.tensor().data().iter().zip(latent.tensor().data()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn assemble_patches_is_local() {
        // each output voxel depends only on its owning token row
        let cfg = micro_cfg();
        let grid = (2, 2, 2);
        let n = 8;
        let ck = 16 * cfg.patch_volume();
        let mut rows = Tensor::randn(&[n, ck], &mut rng_from(3));
        let a = assemble_patches(&rows, grid, &cfg).unwrap();
        let row_len = ck;
        rows.data_mut()[3 * row_len] += 1.0; // perturb token 3 only
        let b = assemble_patches(&rows, grid, &cfg).unwrap();
        let mut changed_positions = 0;
        let c = 16;
        let (lh, lw) = (4, 4);
        for t in 0..2 {
            for h in 0..lh {
                for w in 0..lw {
                    for ch in 0..c {
                        let i = ((t * lh + h) * lw + w) * c + ch;
                        if a.tensor().data()[i] != b.tensor().data()[i] {
                            changed_positions += 1;
                            // voxel must belong to token 3 = (t0,h0,w0)=(0,1,1)
                            assert_eq!(t / cfg.patch_t, 0);
                            assert_eq!(h / cfg.patch_h, 1);
                            assert_eq!(w / cfg.patch_w, 1);
                        }
                    }
                }
            }
        }
        assert_eq!(changed_positions, 1);
    }

    #[test]
    fn expansion_copies_prefix_zeroes_sketch_rows_and_keeps_bias() {
        let cfg = micro_cfg();
        let base = Denoiser::new(cfg, (2, 4, 4), 2, 11).unwrap();
        let pre = base.patch_embed_weights();
        let post = expand_patch_embedding(&pre, &cfg).unwrap();
        let k = cfg.patch_volume();
        let d = cfg.model_dim;
        assert_eq!(post.kernel.shape(), &[48, k, d]);
        let prefix = 32 * k * d;
        assert_eq!(&post.kernel.data()[..prefix], pre.kernel.data());
        assert!(post.kernel.data()[prefix..].iter().all(|&v| v == 0.0));
        assert_eq!(post.bias.data(), pre.bias.data());
        // zeros add nothing to the Frobenius norm
        assert_eq!(post.kernel.sq_norm(), pre.kernel.sq_norm());
        // wrong channel count is rejected
        let bad = PatchEmbedWeights { kernel: Tensor::zeros(&[16, k, d]), bias: pre.bias.clone() };
        assert!(matches!(expand_patch_embedding(&bad, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn expanded_forward_is_bitwise_sketch_independent() {
        let cfg = micro_cfg();
        let dims = (2, 4, 4);
        let mut base = Denoiser::new(cfg, dims, 2, 13).unwrap();
        base.randomize_all(21); // nontrivial blocks, head and gates
        let model = base.expand_for_sketch().unwrap();
        let noisy = micro_latent(1, dims, 16);
        let reference = micro_latent(2, dims, 16);
        let base_out = base.forward_base(&noisy, &reference, 17).unwrap();
        for seed in 30..34 {
            let sketch = micro_latent(seed, dims, 16);
            let out = model.forward(&noisy, &reference, &sketch, 17).unwrap();
            assert_eq!(out.tensor().data(), base_out.tensor().data());
            assert_eq!(out.tensor().shape(), noisy.tensor().shape());
        }
    }

    #[test]
    fn forward_is_deterministic_and_shape_preserving() {
        let cfg = micro_cfg();
        let dims = (2, 4, 4);
        let mut model = Denoiser::new(cfg, dims, 3, 15).unwrap();
        model.randomize_all(2);
        let (n, r, s) = (micro_latent(1, dims, 16), micro_latent(2, dims, 16), micro_latent(3, dims, 16));
        let a = model.forward(&n, &r, &s, 100).unwrap();
        let b = model.forward(&n, &r, &s, 100).unwrap();
        assert_eq!(a.tensor().data(), b.tensor().data());
        assert_eq!(a.tensor().shape(), n.tensor().shape());
        let c = model.forward(&n, &r, &s, 101).unwrap();
        assert_ne!(a.tensor().data(), c.tensor().data());
    }

    #[test]
    fn sketch_slice_gradient_is_nonzero_after_expansion() {
        let cfg = micro_cfg();
        let dims = (2, 4, 4);
        let mut base = Denoiser::new(cfg, dims, 2, 17).unwrap();
        base.randomize_all(5);
        let model = base.expand_for_sketch().unwrap();
        let stacked = concat_streams(
            &micro_latent(1, dims, 16),
            &micro_latent(2, dims, 16),
            &micro_latent(3, dims, 16),
        )
        .unwrap();
        let mut g = Graph::new();
        let out = model.forward_graph(&mut g, &stacked, 10).unwrap();
        let sq = g.mul(out, out);
        let loss = g.mean_all(sq);
        let grads = g.backward(loss);
        let gk = grads.get(model.patch_kernel).expect("patch kernel gradient");
        let k = cfg.patch_volume();
        let d = cfg.model_dim;
        let sketch_slice = &gk.data()[32 * k * d..];
        let nonzero = sketch_slice.iter().filter(|v| v.abs() > 0.0).count();
        assert!(nonzero > sketch_slice.len() / 2, "only {nonzero} nonzero gradient entries");
    }

    #[test]
    fn nan_weight_reports_block_index() {
        let cfg = micro_cfg();
        let dims = (2, 4, 4);
        let mut model = Denoiser::new(cfg, dims, 3, 19).unwrap();
        model.randomize_all(6);
        let wid = model.store.id("blocks.1.ffn.in.w").unwrap();
        for v in model.store.value_mut(wid).data_mut() {
            *v = f64::NAN;
        }
        let err = model
            .forward(&micro_latent(1, dims, 16), &micro_latent(2, dims, 16), &micro_latent(3, dims, 16), 3)
            .unwrap_err();
        match err {
            Error::Numeric(msg) => assert!(msg.contains("block 1"), "{msg}"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn unexpanded_model_rejects_sketch_forward() {
        let cfg = micro_cfg();
        let dims = (2, 4, 4);
        let model = Denoiser::new(cfg, dims, 2, 23).unwrap();
        let err = model
            .forward(&micro_latent(1, dims, 16), &micro_latent(2, dims, 16), &micro_latent(3, dims, 16), 0)
            .unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        assert!(err.to_string().contains("sketch-capable"), "{err}");
    }

    #[test]
    fn gradients_match_finite_differences_on_a_micro_model() {
        let cfg = micro_cfg();
        let dims = (2, 2, 2);
        let mut model = Denoiser::new(cfg, dims, 3, 29).unwrap();
        model.randomize_all(7);
        let stacked = concat_streams(
            &micro_latent(1, dims, 16),
            &micro_latent(2, dims, 16),
            &micro_latent(3, dims, 16),
        )
        .unwrap();
        let loss_of = |model: &Denoiser| {
            let mut g = Graph::new();
            let out = model.forward_graph(&mut g, &stacked, 42).unwrap();
            let sq = g.mul(out, out);
            let l = g.mean_all(sq);
            g.value(l).data()[0]
        };
        let mut g = Graph::new();
        let out = model.forward_graph(&mut g, &stacked, 42).unwrap();
        let sq = g.mul(out, out);
        let loss = g.mean_all(sq);
        let grads = g.backward(loss);

        let ids = model.store.ids();
        let mut rng = rng_from(77);
        let step = 1e-4;
        for pick in 0..12 {
            let id = ids[rng.gen_range(0..ids.len())];
            let len = model.store.value(id).len();
            let e = rng.gen_range(0..len);
            let orig = model.store.value(id).data()[e];
            model.store.value_mut(id).data_mut()[e] = orig + step;
            let fp = loss_of(&model);
            model.store.value_mut(id).data_mut()[e] = orig - step;
            let fm = loss_of(&model);
            model.store.value_mut(id).data_mut()[e] = orig;
            let fd = (fp - fm) / (2.0 * step);
            let an = grads.get(id).map(|t| t.data()[e]).unwrap_or(0.0);
            let denom = an.abs().max(fd.abs()).max(1e-8);
            assert!(
                (an - fd).abs() / denom < 1e-3,
                "pick {pick} param {} elem {e}: analytic {an} vs fd {fd}",
                model.store.name(id)
            );
        }
    }

    #[test]
    fn spatial_permutation_consistency() {
        // permuting latent rows (H axis in whole patches) together with the
        // matching pos.h rows permutes the output rows identically
        let cfg = micro_cfg();
        let dims = (2, 4, 4);
        let mut model = Denoiser::new(cfg, dims, 3, 31).unwrap();
        model.randomize_all(8);
        let stacked = concat_streams(
            &micro_latent(1, dims, 16),
            &micro_latent(2, dims, 16),
            &micro_latent(3, dims, 16),
        )
        .unwrap();
        let out = model.forward_stacked(&stacked, 5).unwrap();

        // permutation of the two H-patches: swap them
        let perm = [1usize, 0];
        // permute stacked latent rows in blocks of patch_h
        let (lt, lh, lw, c) = (2, 4, 4, 48);
        let mut permuted = vec![0.0; stacked.len()];
        for t in 0..lt {
            for h in 0..lh {
                let hp = perm[h / cfg.patch_h] * cfg.patch_h + h % cfg.patch_h;
                for w in 0..lw {
                    for ch in 0..c {
                        permuted[((t * lh + hp) * lw + w) * c + ch] =
                            stacked.data()[((t * lh + h) * lw + w) * c + ch];
                    }
                }
            }
        }
        // permute pos.h rows the same way
        let pos_h_id = model.store.id("pos.h").unwrap();
        let pos = model.store.value(pos_h_id).clone();
        let d = cfg.model_dim;
        let mut pos_p = vec![0.0; pos.len()];
        for r in 0..2 {
            pos_p[perm[r] * d..(perm[r] + 1) * d].copy_from_slice(&pos.data()[r * d..(r + 1) * d]);
        }
        model.store.set_value(pos_h_id, Tensor::from_vec(&[2, d], pos_p));
        let out_p = model
            .forward_stacked(&Tensor::from_vec(&[lt, lh, lw, c], permuted), 5)
            .unwrap();

        // out_p rows must equal out rows under the same H permutation
        let (oh, ow, oc) = (4, 4, 16);
        for t in 0..2 {
            for h in 0..oh {
                let hp = perm[h / cfg.patch_h] * cfg.patch_h + h % cfg.patch_h;
                for w in 0..ow {
                    for ch in 0..oc {
                        let a = out.get(t, h, w, ch);
                        let b = out_p.get(t, hp, w, ch);
                        assert!(
                            (a - b).abs() < 1e-9,
                            "permutation mismatch at {t},{h},{w},{ch}: {a} vs {b}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn attention_is_global() {
        // perturbing a single input voxel changes every output token
        let cfg = micro_cfg();
        let dims = (2, 4, 4);
        let mut model = Denoiser::new(cfg, dims, 3, 37).unwrap();
        model.randomize_all(9);
        let stacked = concat_streams(
            &micro_latent(1, dims, 16),
            &micro_latent(2, dims, 16),
            &micro_latent(3, dims, 16),
        )
        .unwrap();
        let base = model.forward_stacked(&stacked, 50).unwrap();
        let mut bumped = stacked.clone();
        bumped.data_mut()[0] += 0.5;
        let out = model.forward_stacked(&bumped, 50).unwrap();
        // every token (patch) must see a change somewhere in its voxels
        let (nt, nh, nw) = model.grid;
        for t0 in 0..nt {
            for h0 in 0..nh {
                for w0 in 0..nw {
                    let mut max_delta = 0.0f64;
                    for dt in 0..cfg.patch_t {
                        for dh in 0..cfg.patch_h {
                            for dw in 0..cfg.patch_w {
                                for ch in 0..16 {
                                    let d = (base
                                        .get(t0 * cfg.patch_t + dt, h0 * cfg.patch_h + dh, w0 * cfg.patch_w + dw, ch)
                                        - out.get(
                                            t0 * cfg.patch_t + dt,
                                            h0 * cfg.patch_h + dh,
                                            w0 * cfg.patch_w + dw,
                                            ch,
                                        ))
                                    .abs();
                                    max_delta = max_delta.max(d);
                                }
                            }
                        }
                    }
                    assert!(
                        max_delta > 0.0,
                        "token ({t0},{h0},{w0}) untouched by a distant perturbation"
                    );
                }
            }
        }
    }

    #[test]
    fn timestep_embedding_is_even_dim_and_bounded() {
        let e = timestep_embedding(123, 32);
        assert_eq!(e.shape(), &[1, 32]);
        assert!(e.data().iter().all(|v| v.abs() <= 1.0));
        assert_ne!(timestep_embedding(1, 32).data(), timestep_embedding(2, 32).data());
    }
}
