//! Parameter-efficient conditioning machinery: low-rank adapters on the
//! attention and feed-forward projections, trainable-parameter accounting,
//! and the duplicated-branch baseline used for the efficiency comparison.
//!
//! Both conditioning mechanisms are exactly zero at initialization: adapters
//! because their up-projection starts at zero, the branch baseline because
//! its connectors and sketch projection start at zero.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::denoiser::{block_forward, concat_latents, patch_matrix, BlockParams, Denoiser};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{Param, ParamId, ParamStore};
use crate::rng::rng_from;
use crate::tensor::{matmul_nn, Tensor};
use crate::video::LatentTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum LoraTarget {
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    FfnIn,
    FfnOut,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 6] = [
        LoraTarget::AttnQ,
        LoraTarget::AttnK,
        LoraTarget::AttnV,
        LoraTarget::AttnO,
        LoraTarget::FfnIn,
        LoraTarget::FfnOut,
    ];

    fn suffix(&self) -> &'static str {
        match self {
            LoraTarget::AttnQ => "attn.q",
            LoraTarget::AttnK => "attn.k",
            LoraTarget::AttnV => "attn.v",
            LoraTarget::AttnO => "attn.o",
            LoraTarget::FfnIn => "ffn.in",
            LoraTarget::FfnOut => "ffn.out",
        }
    }

    /// (d_in, d_out) of the targeted projection for model dim `d`.
    fn dims(&self, d: usize) -> (usize, usize) {
        match self {
            LoraTarget::FfnIn => (d, 4 * d),
            LoraTarget::FfnOut => (4 * d, d),
            _ => (d, d),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<LoraTarget>,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 8, alpha: 8.0, targets: LoraTarget::ALL.to_vec(), dropout: 0.0 }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("lora rank must be ≥ 1".into()));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("lora targets must be nonempty".into()));
        }
        if self.dropout != 0.0 {
            return Err(Error::Config(
                "lora dropout is not supported in this deterministic artifact; set it to 0".into(),
            ));
        }
        Ok(())
    }

    /// Closed-form adapter parameter count over `depth` blocks of width `d`:
    /// Σ over targeted layers of rank·(d_in + d_out).
    pub fn param_count(&self, depth: usize, d: usize) -> usize {
        let per_block: usize = self
            .targets
            .iter()
            .map(|t| {
                let (din, dout) = t.dims(d);
                self.rank * (din + dout)
            })
            .sum();
        depth * per_block
    }
}

/// One injected adapter: base(x) + scaling · (x·down)·up.
#[derive(Clone, Copy, Debug)]
pub struct LoraLayer {
    pub down: ParamId,
    pub up: ParamId,
    pub scaling: f64,
}

/// Exact parameter census of a model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamReport {
    pub total_params: usize,
    pub trainable_params: usize,
    /// Scalar counts grouped by the first path segment of each parameter.
    pub breakdown: BTreeMap<String, usize>,
}

/// Walks every live parameter tensor and counts scalars exactly.
pub fn count_trainable(store: &ParamStore) -> ParamReport {
    let mut total = 0;
    let mut trainable = 0;
    let mut breakdown = BTreeMap::new();
    for (_, p) in store.iter() {
        total += p.value.len();
        if p.trainable {
            trainable += p.value.len();
        }
        let component = p.name.split('.').next().unwrap_or("misc").to_string();
        *breakdown.entry(component).or_insert(0) += p.value.len();
    }
    ParamReport { total_params: total, trainable_params: trainable, breakdown }
}

/// Injects low-rank adapters into the targeted projections of every block,
/// freezes the base weights, and leaves exactly {adapter factors, patch
/// embedding} trainable. The adapted forward equals the base forward bit for
/// bit until training moves the zero-initialized up-projections.
pub fn inject_lora(model: &mut Denoiser, cfg: &LoraConfig, seed: u64) -> Result<()> {
    cfg.validate()?;
    if !model.lora.is_empty() {
        return Err(Error::Contract("model already carries adapters".into()));
    }
    // every target must resolve to an existing projection
    let mut missing = Vec::new();
    for i in 0..model.cfg.depth {
        for t in &cfg.targets {
            let path = format!("blocks.{i}.{}.w", t.suffix());
            if model.store.id(&path).is_none() {
                missing.push(path);
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Config(format!("unresolvable lora targets: {missing:?}")));
    }

    let mut rng = rng_from(seed);
    let d = model.cfg.model_dim;
    let mut targets = cfg.targets.clone();
    targets.sort();
    targets.dedup();
    for i in 0..model.cfg.depth {
        for t in &targets {
            let (din, dout) = t.dims(d);
            let path = format!("blocks.{i}.{}", t.suffix());
            let limit = 1.0 / (din as f64).sqrt();
            let down = model.store.register(Param::new(
                format!("lora.{path}.down"),
                Tensor::rand_uniform(&[din, cfg.rank], -limit, limit, &mut rng),
                true,
            ));
            let up = model.store.register(Param::new(
                format!("lora.{path}.up"),
                Tensor::zeros(&[cfg.rank, dout]),
                true,
            ));
            model.lora.insert(path, LoraLayer { down, up, scaling: cfg.scaling() });
        }
    }
    // freeze the base; train adapters plus the patch embedding
    for id in model.store.ids() {
        let name = model.store.name(id).to_string();
        let trainable = name.starts_with("lora.") || name.starts_with("patch_embed.");
        model.store.set_trainable(id, trainable);
    }
    Ok(())
}

/// Folds every adapter into its base weight (W += scaling·down·up) and
/// removes the adapter parameters. Merging a model without adapters — or
/// merging twice — is rejected.
pub fn merge_lora(model: &mut Denoiser) -> Result<()> {
    if model.lora.is_empty() {
        return Err(Error::Contract("no adapters to merge (already consumed?)".into()));
    }
    let lora = std::mem::take(&mut model.lora);
    for (path, layer) in lora {
        let down = model.store.value(layer.down).clone();
        let up = model.store.value(layer.up).clone();
        let (din, rank) = (down.shape()[0], down.shape()[1]);
        let dout = up.shape()[1];
        let delta = matmul_nn(down.data(), up.data(), din, rank, dout);
        let w_id = model
            .store
            .id(&format!("{path}.w"))
            .ok_or_else(|| Error::Contract(format!("missing base weight for {path}")))?;
        {
            let w = model.store.value_mut(w_id).data_mut();
            for (wv, dv) in w.iter_mut().zip(delta.iter()) {
                *wv += layer.scaling * dv;
            }
        }
        model.store.remove(&format!("lora.{path}.down"));
        model.store.remove(&format!("lora.{path}.up"));
    }
    Ok(())
}

/// The duplicated-branch conditioning baseline: the first `branch_depth`
/// transformer blocks are cloned into a trainable branch fed by a
/// zero-initialized sketch projection; each branch block's output re-enters
/// the frozen trunk through a zero-initialized linear connector. At
/// initialization the whole construction is invisible: baseline output
/// equals trunk output bit for bit.
#[derive(Clone)]
pub struct ControlNetBaseline {
    pub trunk: Denoiser,
    pub branch_depth: usize,
    branch_blocks: Vec<BlockParams>,
    sketch_proj_w: ParamId,
    sketch_proj_b: ParamId,
    connectors: Vec<(ParamId, ParamId)>,
}

impl ControlNetBaseline {
    /// Clones the first `branch_depth` blocks of a trained two-stream base.
    /// `branch_depth` defaults to the full trunk depth.
    pub fn build(base: &Denoiser, branch_depth: Option<usize>) -> Result<Self> {
        if base.input_streams != 2 {
            return Err(Error::Contract(
                "the branch baseline is built from the 2-stream base model".into(),
            ));
        }
        let depth = base.cfg.depth;
        let branch_depth = branch_depth.unwrap_or(depth);
        if branch_depth == 0 || branch_depth > depth {
            return Err(Error::Config(format!(
                "branch depth {branch_depth} must lie in 1..={depth}"
            )));
        }
        let mut trunk = base.clone();
        let d = trunk.cfg.model_dim;
        let k = trunk.cfg.patch_volume();
        let c = trunk.cfg.latent_channels;
        // clone branch blocks, then copy trunk values into them
        let mut rng = rng_from(0);
        let branch_blocks: Vec<BlockParams> = (0..branch_depth)
            .map(|i| BlockParams::init(&mut trunk.store, &format!("branch.blocks.{i}"), d, &mut rng))
            .collect();
        for i in 0..branch_depth {
            for (src, dst) in base.blocks[i].all_ids().into_iter().zip(branch_blocks[i].all_ids())
            {
                let v = base.store.value(src).clone();
                trunk.store.set_value(dst, v);
            }
        }
        let sketch_proj_w = trunk.store.register(Param::new(
            "branch.sketch_proj.w",
            Tensor::zeros(&[c * k, d]),
            true,
        ));
        let sketch_proj_b =
            trunk.store.register(Param::new("branch.sketch_proj.b", Tensor::zeros(&[d]), true));
        let connectors: Vec<(ParamId, ParamId)> = (0..branch_depth)
            .map(|i| {
                let w = trunk.store.register(Param::new(
                    format!("connect.{i}.w"),
                    Tensor::zeros(&[d, d]),
                    true,
                ));
                let b = trunk.store.register(Param::new(
                    format!("connect.{i}.b"),
                    Tensor::zeros(&[d]),
                    true,
                ));
                (w, b)
            })
            .collect();
        // freeze the trunk, train the branch
        for id in trunk.store.ids() {
            let name = trunk.store.name(id).to_string();
            let trainable = name.starts_with("branch.") || name.starts_with("connect.");
            trunk.store.set_trainable(id, trainable);
        }
        Ok(Self { trunk, branch_depth, branch_blocks, sketch_proj_w, sketch_proj_b, connectors })
    }

    pub fn store(&self) -> &ParamStore {
        &self.trunk.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.trunk.store
    }

    /// Head-output graph for training; mirrors the trunk forward with branch
    /// injections.
    pub(crate) fn forward_graph(
        &self,
        g: &mut Graph,
        noisy: &LatentTensor,
        reference: &LatentTensor,
        sketch: &LatentTensor,
        t: usize,
    ) -> Result<NodeId> {
        let trunk = &self.trunk;
        let stacked = concat_latents(&[("noisy", noisy), ("reference", reference)])?;
        let tok = trunk.embed_tokens(g, &stacked)?;
        let t_mod = trunk.time_mod_node(g, t);

        // zero-init sketch pathway
        let (sketch_rows, grid) = patch_matrix(sketch.tensor(), &trunk.cfg)?;
        if grid != trunk.grid {
            return Err(Error::Dimension("sketch grid does not match the model".into()));
        }
        let rows = g.input(sketch_rows);
        let spw = trunk.store.node(g, self.sketch_proj_w);
        let spb = trunk.store.node(g, self.sketch_proj_b);
        let sp = g.matmul(rows, spw);
        let sproj = g.add_bias(sp, spb);
        let mut b = g.add(tok, sproj);

        let empty = BTreeMap::new();
        let mut branch_outs = Vec::with_capacity(self.branch_depth);
        for (i, bp) in self.branch_blocks.iter().enumerate() {
            b = block_forward(
                g,
                &trunk.store,
                &empty,
                bp,
                &format!("branch.blocks.{i}"),
                b,
                t_mod,
                trunk.cfg.heads,
            );
            branch_outs.push(b);
        }

        let mut x = tok;
        for (i, bp) in trunk.blocks.iter().enumerate() {
            if i < self.branch_depth {
                let (cw, cb) = self.connectors[i];
                let cwn = trunk.store.node(g, cw);
                let cbn = trunk.store.node(g, cb);
                let inj = g.matmul(branch_outs[i], cwn);
                let inj = g.add_bias(inj, cbn);
                x = g.add(x, inj);
            }
            x = block_forward(g, &trunk.store, &empty, bp, &format!("blocks.{i}"), x, t_mod, trunk.cfg.heads);
        }
        trunk.final_head(g, x, t_mod)
    }

    /// Latent prediction conditioned on reference and sketch.
    pub fn forward(
        &self,
        noisy: &LatentTensor,
        reference: &LatentTensor,
        sketch: &LatentTensor,
        t: usize,
    ) -> Result<LatentTensor> {
        let mut g = Graph::new();
        let out = self.forward_graph(&mut g, noisy, reference, sketch, t)?;
        crate::denoiser::assemble_patches(g.value(out), self.trunk.grid, &self.trunk.cfg)
    }
}
