//! Evaluation metric suite: colour error (MSCE), PSNR, SSIM, a frozen
//! random-feature perceptual distance standing in for LPIPS, and Fréchet
//! video distance over clip-level feature embeddings.
//!
//! The perceptual and FVD feature backbones are seeded random convolution
//! stacks — deterministic, never trained — and every report labels them as
//! proxies. Precomputed features from an external backbone can be supplied
//! instead.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::{conv3d_forward, Conv3dSpec, Tensor};
use crate::video::{luma_plane_255, resize_video, ycbcr_255, VideoTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum MsceColourSpace {
    /// Mean over frames and pixels of the channel-summed squared RGB error
    /// (0–255 scale).
    Rgb,
    /// Mean squared error over the Cb/Cr channels only (0–255 scale).
    YuvChroma,
}

fn check_same_shape(pred: &VideoTensor, gt: &VideoTensor) -> Result<()> {
    if pred.tensor().shape() != gt.tensor().shape() {
        return Err(Error::Dimension(format!(
            "shape mismatch: pred {:?} vs gt {:?}",
            pred.tensor().shape(),
            gt.tensor().shape()
        )));
    }
    Ok(())
}

/// Per-frame mean squared colour error.
pub fn msce_frames(
    pred: &VideoTensor,
    gt: &VideoTensor,
    space: MsceColourSpace,
) -> Result<Vec<f64>> {
    check_same_shape(pred, gt)?;
    let (frames, h, w) = (pred.frames(), pred.height(), pred.width());
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let mut acc = 0.0;
        for y in 0..h {
            for x in 0..w {
                match space {
                    MsceColourSpace::Rgb => {
                        for c in 0..3 {
                            let d = 255.0 * (pred.get(t, y, x, c) - gt.get(t, y, x, c));
                            acc += d * d;
                        }
                    }
                    MsceColourSpace::YuvChroma => {
                        let (_, pu, pv) =
                            ycbcr_255(pred.get(t, y, x, 0), pred.get(t, y, x, 1), pred.get(t, y, x, 2));
                        let (_, gu, gv) =
                            ycbcr_255(gt.get(t, y, x, 0), gt.get(t, y, x, 1), gt.get(t, y, x, 2));
                        acc += 0.5 * ((pu - gu) * (pu - gu) + (pv - gv) * (pv - gv));
                    }
                }
            }
        }
        out.push(acc / (h * w) as f64);
    }
    Ok(out)
}

/// Mean squared colour error averaged over frames.
pub fn msce(pred: &VideoTensor, gt: &VideoTensor, space: MsceColourSpace) -> Result<f64> {
    let frames = msce_frames(pred, gt, space)?;
    Ok(frames.iter().sum::<f64>() / frames.len() as f64)
}

/// PSNR cap in dB for identical (or numerically indistinguishable) frames.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Per-frame 10·log10(255²/MSE) averaged over frames, capped at 100 dB.
pub fn psnr(pred: &VideoTensor, gt: &VideoTensor) -> Result<f64> {
    check_same_shape(pred, gt)?;
    let (frames, h, w) = (pred.frames(), pred.height(), pred.width());
    let mut acc = 0.0;
    for t in 0..frames {
        let mut mse = 0.0;
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let d = 255.0 * (pred.get(t, y, x, c) - gt.get(t, y, x, c));
                    mse += d * d;
                }
            }
        }
        mse /= (h * w * 3) as f64;
        let db = if mse <= 0.0 {
            PSNR_CAP_DB
        } else {
            (10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP_DB)
        };
        acc += db;
    }
    Ok(acc / frames as f64)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_L: f64 = 255.0;

fn ssim_window_weights() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= s;
    }
    k
}

/// Separable weighted filter; only the valid region (full windows) is
/// meaningful in the result.
fn filter_separable(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let r = k.len() / 2;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in r..w - r {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * plane[y * w + x + i - r];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in r..h - r {
        for x in r..w - r {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * tmp[(y + i - r) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Single-scale SSIM of two luma planes (0–255), Gaussian 11×11 window.
fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Degenerate(format!(
            "frame {h}×{w} smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} ssim window"
        )));
    }
    let k = ssim_window_weights();
    let r = SSIM_WINDOW / 2;
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x * y).collect();
    let mu_a = filter_separable(a, h, w, &k);
    let mu_b = filter_separable(b, h, w, &k);
    let m_aa = filter_separable(&aa, h, w, &k);
    let m_bb = filter_separable(&bb, h, w, &k);
    let m_ab = filter_separable(&ab, h, w, &k);
    let c1 = (SSIM_K1 * SSIM_L) * (SSIM_K1 * SSIM_L);
    let c2 = (SSIM_K2 * SSIM_L) * (SSIM_K2 * SSIM_L);
    let mut acc = 0.0;
    let mut count = 0usize;
    for y in r..h - r {
        for x in r..w - r {
            let i = y * w + x;
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = m_aa[i] - ma * ma;
            let vb = m_bb[i] - mb * mb;
            let cab = m_ab[i] - ma * mb;
            let v = ((2.0 * ma * mb + c1) * (2.0 * cab + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            acc += v;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// Standard single-scale SSIM on luminance, averaged over frames.
pub fn ssim(pred: &VideoTensor, gt: &VideoTensor) -> Result<f64> {
    check_same_shape(pred, gt)?;
    let (frames, h, w) = (pred.frames(), pred.height(), pred.width());
    let mut acc = 0.0;
    for t in 0..frames {
        let pa = luma_plane_255(&pred.frame(t));
        let ga = luma_plane_255(&gt.frame(t));
        acc += ssim_plane(&pa, &ga, h, w)?;
    }
    Ok(acc / frames as f64)
}

/// Frozen random-convolution perceptual distance (the LPIPS stand-in).
/// Three stride-2 feature levels; at each level every spatial position's
/// channel vector is unit-normalized and compared by squared L2 distance.
pub struct LpipsProxy {
    levels: Vec<(Conv3dSpec, Tensor)>,
}

impl LpipsProxy {
    pub fn new(seed: u64) -> Self {
        let mut rng = rng_from(seed);
        let widths = [(3usize, 16usize), (16, 32), (32, 64)];
        let levels = widths
            .into_iter()
            .map(|(ci, co)| {
                let spec = Conv3dSpec { sh: 2, sw: 2, ..Conv3dSpec::same(ci, co, 1, 3, 3) };
                let fan_in = (ci * 9) as f64;
                let w = Tensor::randn(&[spec.weight_len()], &mut rng).scale(1.0 / fan_in.sqrt());
                (spec, w)
            })
            .collect();
        Self { levels }
    }

    /// Per-level unit-normalized feature stacks of one frame.
    fn features(&self, frame: &Tensor) -> Vec<Vec<f64>> {
        let (h, w) = (frame.shape()[0], frame.shape()[1]);
        let mut x = frame.data().to_vec();
        let (mut ch, mut hh, mut ww) = (3usize, h, w);
        let mut out = Vec::with_capacity(self.levels.len());
        for (spec, weight) in &self.levels {
            let bias = vec![0.0; spec.c_out];
            let (y, (_, oh, ow)) = conv3d_forward(&x, weight.data(), &bias, spec, 1, hh, ww);
            let mut act: Vec<f64> = y.iter().map(|v| v.tanh()).collect();
            // channel-unit-normalize each position
            for p in 0..oh * ow {
                let v = &mut act[p * spec.c_out..(p + 1) * spec.c_out];
                let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-10);
                for a in v.iter_mut() {
                    *a /= n;
                }
            }
            out.push(act.clone());
            x = y.iter().map(|v| v.tanh()).collect();
            ch = spec.c_out;
            hh = oh;
            ww = ow;
        }
        let _ = ch;
        out
    }

    /// Mean over frames and levels of the position-averaged squared L2
    /// distance between normalized features.
    pub fn distance(&self, a: &VideoTensor, b: &VideoTensor) -> Result<f64> {
        check_same_shape(a, b)?;
        let mut acc = 0.0;
        for t in 0..a.frames() {
            let fa = self.features(&a.frame(t));
            let fb = self.features(&b.frame(t));
            let mut frame_acc = 0.0;
            for (la, lb) in fa.iter().zip(fb.iter()) {
                let mut d = 0.0;
                for (x, y) in la.iter().zip(lb.iter()) {
                    d += (x - y) * (x - y);
                }
                frame_acc += d / la.len() as f64;
            }
            acc += frame_acc / fa.len() as f64;
        }
        Ok(acc / a.frames() as f64)
    }
}

/// Configuration of the clip-level feature extractor behind FVD.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct FeatureExtractorSpec {
    pub kind: ExtractorKind,
    pub seed: u64,
    pub feature_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ExtractorKind {
    RandomConv3d,
    /// Features are read from precomputed per-clip files instead of the
    /// random backbone.
    External,
}

impl Default for FeatureExtractorSpec {
    fn default() -> Self {
        Self { kind: ExtractorKind::RandomConv3d, seed: 7, feature_dim: 256 }
    }
}

/// Frozen seeded conv3d stack mapping a whole clip to one feature vector.
pub struct ClipFeatureExtractor {
    levels: Vec<(Conv3dSpec, Tensor)>,
    pub feature_dim: usize,
}

impl ClipFeatureExtractor {
    pub fn new(seed: u64, feature_dim: usize) -> Self {
        let mut rng = rng_from(seed);
        let widths = [(3usize, 16usize), (16, 32), (32, feature_dim)];
        let levels = widths
            .into_iter()
            .enumerate()
            .map(|(i, (ci, co))| {
                let mut spec = Conv3dSpec::same(ci, co, 3, 3, 3);
                spec.sh = 2;
                spec.sw = 2;
                if i > 0 {
                    // stride-2 causal temporal: T maps to (T−1)/2 + 1, so
                    // any T ≥ 1 stays valid at every level
                    spec.st = 2;
                }
                let fan_in = (ci * spec.kt * spec.kh * spec.kw) as f64;
                let w = Tensor::randn(&[spec.weight_len()], &mut rng).scale(1.0 / fan_in.sqrt());
                (spec, w)
            })
            .collect();
        Self { levels, feature_dim }
    }

    /// One feature vector per clip: conv/tanh levels then global mean pool.
    pub fn features(&self, clip: &VideoTensor) -> Vec<f64> {
        let mut x = clip.tensor().data().to_vec();
        let (mut t, mut h, mut w) = (clip.frames(), clip.height(), clip.width());
        let mut channels = 3usize;
        for (spec, weight) in &self.levels {
            let bias = vec![0.0; spec.c_out];
            let (y, (ot, oh, ow)) = conv3d_forward(&x, weight.data(), &bias, spec, t, h, w);
            x = y.iter().map(|v| v.tanh()).collect();
            t = ot;
            h = oh;
            w = ow;
            channels = spec.c_out;
        }
        let positions = t * h * w;
        let mut pooled = vec![0.0; channels];
        for p in 0..positions {
            for c in 0..channels {
                pooled[c] += x[p * channels + c];
            }
        }
        for v in pooled.iter_mut() {
            *v /= positions as f64;
        }
        pooled
    }
}

/// Exact Fréchet distance between two Gaussians:
/// |μ1−μ2|² + tr(Σ1 + Σ2 − 2·(Σ1Σ2)^{1/2}), the matrix square root taken by
/// eigendecomposition of the symmetrized product Σ1^{1/2}·Σ2·Σ1^{1/2}.
pub fn frechet_distance(
    mu1: &DVector<f64>,
    cov1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    cov2: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || cov1.shape() != (d, d) || cov2.shape() != (d, d) {
        return Err(Error::Dimension("mean/covariance dimensions disagree".into()));
    }
    for (name, m) in [("cov1", cov1), ("cov2", cov2)] {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("{name} contains non-finite entries")));
        }
        let scale = m.iter().fold(1.0f64, |a, &v| a.max(v.abs()));
        let asym = (m - m.transpose()).iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        if asym > 1e-6 * scale {
            return Err(Error::Numeric(format!(
                "{name} is asymmetric beyond tolerance ({asym:.3e})"
            )));
        }
    }
    if mu1.iter().chain(mu2.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("means contain non-finite entries".into()));
    }

    let sym = |m: &DMatrix<f64>| (m + m.transpose()) * 0.5;
    let clipped_sqrt_eigs = |m: &DMatrix<f64>, what: &str| -> Result<(DMatrix<f64>, DVector<f64>)> {
        let eig = nalgebra::SymmetricEigen::new(sym(m));
        let scale = eig.eigenvalues.iter().fold(1.0f64, |a, &v| a.max(v.abs()));
        let mut vals = eig.eigenvalues.clone();
        for v in vals.iter_mut() {
            if *v < -1e-8 * scale {
                return Err(Error::Numeric(format!(
                    "{what} has a negative eigenvalue beyond tolerance: {v:.3e}"
                )));
            }
            *v = v.max(0.0);
        }
        Ok((eig.eigenvectors, vals))
    };

    // Σ1^{1/2}
    let (v1, l1) = clipped_sqrt_eigs(cov1, "cov1")?;
    let sqrt_l1 = DMatrix::from_diagonal(&l1.map(|x| x.sqrt()));
    let sqrt_cov1 = &v1 * sqrt_l1 * v1.transpose();
    // tr (Σ1 Σ2)^{1/2} = tr (Σ1^{1/2} Σ2 Σ1^{1/2})^{1/2}
    let inner = &sqrt_cov1 * cov2 * &sqrt_cov1;
    let (_, li) = clipped_sqrt_eigs(&inner, "product")?;
    let tr_sqrt: f64 = li.iter().map(|v| v.sqrt()).sum();

    let dmu = mu1 - mu2;
    let dist = dmu.dot(&dmu) + cov1.trace() + cov2.trace() - 2.0 * tr_sqrt;
    Ok(dist.max(0.0))
}

/// Mean and shrunk covariance of a feature set (shrinkage λ toward the
/// diagonal keeps small-set covariances usable).
pub fn fit_gaussian(features: &[Vec<f64>], shrinkage: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Degenerate(
            "need at least 2 clips to fit a covariance (set size 1)".into(),
        ));
    }
    let d = features[0].len();
    let mut mu = DVector::zeros(d);
    for f in features {
        if f.len() != d {
            return Err(Error::Dimension("feature vectors have mixed lengths".into()));
        }
        for (i, v) in f.iter().enumerate() {
            mu[i] += v;
        }
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for f in features {
        let x = DVector::from_row_slice(f) - &mu;
        cov += &x * x.transpose();
    }
    cov /= (n - 1) as f64;
    let diag = DMatrix::from_diagonal(&cov.diagonal());
    Ok((mu, cov * (1.0 - shrinkage) + diag * shrinkage))
}

/// Default covariance shrinkage for desk-scale sets.
pub const FVD_SHRINKAGE: f64 = 0.01;

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fvd_from_features(
    pred: &[Vec<f64>],
    gt: &[Vec<f64>],
    shrinkage: f64,
) -> Result<f64> {
    let (mu1, cov1) = fit_gaussian(pred, shrinkage)?;
    let (mu2, cov2) = fit_gaussian(gt, shrinkage)?;
    frechet_distance(&mu1, &cov1, &mu2, &cov2)
}

/// FVD of two clip sets through the frozen random backbone.
pub fn fvd(
    pred_set: &[VideoTensor],
    gt_set: &[VideoTensor],
    extractor: &ClipFeatureExtractor,
) -> Result<f64> {
    if pred_set.is_empty() || gt_set.is_empty() {
        return Err(Error::Degenerate("fvd needs nonempty clip sets".into()));
    }
    let pf: Vec<Vec<f64>> = pred_set.iter().map(|c| extractor.features(c)).collect();
    let gf: Vec<Vec<f64>> = gt_set.iter().map(|c| extractor.features(c)).collect();
    fvd_from_features(&pf, &gf, FVD_SHRINKAGE)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EvalConfig {
    pub msce_space: MsceColourSpace,
    pub lpips_seed: u64,
    pub extractor: FeatureExtractorSpec,
    pub shrinkage: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            msce_space: MsceColourSpace::Rgb,
            lpips_seed: 11,
            extractor: FeatureExtractorSpec::default(),
            shrinkage: FVD_SHRINKAGE,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ClipMetrics {
    pub msce: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: f64,
    pub frames_evaluated: usize,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

/// Table-shaped evaluation report: per-clip metrics, mean ± std aggregates,
/// a set-level FVD, and bookkeeping for excluded clips.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_clip: BTreeMap<String, ClipMetrics>,
    pub aggregate: BTreeMap<String, Aggregate>,
    pub fvd: Option<f64>,
    pub msce_space: MsceColourSpace,
    /// Proxy labels for the stand-in backbones.
    pub lpips_label: String,
    pub fvd_label: String,
    /// Clip ids with no counterpart, excluded from the aggregates.
    pub missing: Vec<String>,
    pub warnings: Vec<String>,
}

impl MetricReport {
    pub fn is_partial(&self) -> bool {
        !self.missing.is_empty()
    }
}

fn aggregate_of(values: &[f64]) -> Aggregate {
    let n = values.len();
    if n == 0 {
        return Aggregate { mean: f64::NAN, std: f64::NAN };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Aggregate { mean, std }
}

/// Precomputed per-clip feature vectors for the `external` extractor kind.
pub type ExternalFeatures = BTreeMap<String, Vec<f64>>;

/// Evaluates a prediction clip set against ground truth: predictions are
/// bilinearly rescaled to the ground-truth resolution, both sides truncated
/// to the common frame count per clip, all metrics computed and aggregated
/// as mean ± std, plus one set-level FVD. Missing counterparts are listed
/// and excluded.
pub fn evaluate(
    pred: &BTreeMap<String, VideoTensor>,
    gt: &BTreeMap<String, VideoTensor>,
    cfg: &EvalConfig,
    external: Option<(&ExternalFeatures, &ExternalFeatures)>,
) -> Result<MetricReport> {
    let lpips = LpipsProxy::new(cfg.lpips_seed);
    let extractor = ClipFeatureExtractor::new(cfg.extractor.seed, cfg.extractor.feature_dim);
    let mut per_clip = BTreeMap::new();
    let mut missing: Vec<String> = Vec::new();
    let mut warnings: Vec<String> = Vec::new();
    let mut pred_features: Vec<Vec<f64>> = Vec::new();
    let mut gt_features: Vec<Vec<f64>> = Vec::new();

    for id in pred.keys() {
        if !gt.contains_key(id) {
            missing.push(format!("{id} (no ground truth)"));
        }
    }
    for (id, gt_clip) in gt {
        let Some(pred_clip) = pred.get(id) else {
            missing.push(format!("{id} (no prediction)"));
            continue;
        };
        // rescale prediction to ground-truth resolution
        let scaled = if pred_clip.height() != gt_clip.height() || pred_clip.width() != gt_clip.width()
        {
            resize_video(pred_clip, gt_clip.height(), gt_clip.width())
        } else {
            pred_clip.clone()
        };
        // truncate to the shorter common frame count
        let frames = scaled.frames().min(gt_clip.frames());
        let p = scaled.window(0, frames);
        let g = gt_clip.window(0, frames);
        let metrics = ClipMetrics {
            msce: msce(&p, &g, cfg.msce_space)?,
            psnr: psnr(&p, &g)?,
            ssim: ssim(&p, &g)?,
            lpips: lpips.distance(&p, &g)?,
            frames_evaluated: frames,
        };
        per_clip.insert(id.clone(), metrics);
        match (cfg.extractor.kind, external) {
            (ExtractorKind::RandomConv3d, _) => {
                pred_features.push(extractor.features(&p));
                gt_features.push(extractor.features(&g));
            }
            (ExtractorKind::External, Some((pf, gf))) => {
                match (pf.get(id), gf.get(id)) {
                    (Some(a), Some(b)) => {
                        pred_features.push(a.clone());
                        gt_features.push(b.clone());
                    }
                    _ => warnings.push(format!("external features missing for {id}")),
                }
            }
            (ExtractorKind::External, None) => {
                return Err(Error::Contract(
                    "external extractor requires precomputed feature files".into(),
                ))
            }
        }
    }

    let mut aggregate = BTreeMap::new();
    let collect = |f: &dyn Fn(&ClipMetrics) -> f64| -> Vec<f64> {
        per_clip.values().map(f).collect()
    };
    aggregate.insert("msce".to_string(), aggregate_of(&collect(&|m| m.msce)));
    aggregate.insert("psnr".to_string(), aggregate_of(&collect(&|m| m.psnr)));
    aggregate.insert("ssim".to_string(), aggregate_of(&collect(&|m| m.ssim)));
    aggregate.insert("lpips".to_string(), aggregate_of(&collect(&|m| m.lpips)));

    if cfg.extractor.kind == ExtractorKind::RandomConv3d
        && pred_features.len() < cfg.extractor.feature_dim / 8
    {
        warnings.push(format!(
            "fvd set size {} below the recommended featureDim/8 = {}",
            pred_features.len(),
            cfg.extractor.feature_dim / 8
        ));
    }
    let fvd_value = if pred_features.len() >= 2 {
        Some(fvd_from_features(&pred_features, &gt_features, cfg.shrinkage)?)
    } else {
        warnings.push("fvd skipped: fewer than 2 evaluable clips".into());
        None
    };

    Ok(MetricReport {
        per_clip,
        aggregate,
        fvd: fvd_value,
        msce_space: cfg.msce_space,
        lpips_label: format!("lpips_proxy(randomConv2d, seed {})", cfg.lpips_seed),
        fvd_label: match cfg.extractor.kind {
            ExtractorKind::RandomConv3d => {
                format!("fvd_proxy(randomConv3d, seed {})", cfg.extractor.seed)
            }
            ExtractorKind::External => "fvd(external features)".to_string(),
        },
        missing,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use crate::stats::spearman_rho;
    use rand::Rng;

    fn constant_video(frames: usize, h: usize, w: usize, rgb: [f64; 3]) -> VideoTensor {
        VideoTensor::from_fn(frames, h, w, |_, _, _, c| rgb[c])
    }

    fn noise_video(frames: usize, h: usize, w: usize, seed: u64) -> VideoTensor {
        let mut rng = rng_from(seed);
        VideoTensor::from_fn(frames, h, w, |_, _, _, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn msce_zero_on_identical_and_scalar_oracle() {
        let v = noise_video(2, 4, 4, 1);
        assert_eq!(msce(&v, &v, MsceColourSpace::Rgb).unwrap(), 0.0);
        // 1×1 pixel, pred black vs gt pure red → 255² summed over channels
        let pred = constant_video(1, 1, 1, [0.0, 0.0, 0.0]);
        let gt = constant_video(1, 1, 1, [1.0, 0.0, 0.0]);
        assert!((msce(&pred, &gt, MsceColourSpace::Rgb).unwrap() - 65_025.0).abs() < 1e-9);
    }

    #[test]
    fn msce_matches_bruteforce_double_loop() {
        let pred = noise_video(2, 4, 4, 2);
        let gt = noise_video(2, 4, 4, 3);
        for space in [MsceColourSpace::Rgb, MsceColourSpace::YuvChroma] {
            let fast = msce(&pred, &gt, space).unwrap();
            // brute force: iterate every frame/pixel/channel explicitly
            let mut acc = 0.0;
            for t in 0..2 {
                for y in 0..4 {
                    for x in 0..4 {
                        match space {
                            MsceColourSpace::Rgb => {
                                for c in 0..3 {
                                    let d = pred.get(t, y, x, c) * 255.0 - gt.get(t, y, x, c) * 255.0;
                                    acc += d * d;
                                }
                            }
                            MsceColourSpace::YuvChroma => {
                                let (_, pu, pv) = ycbcr_255(
                                    pred.get(t, y, x, 0),
                                    pred.get(t, y, x, 1),
                                    pred.get(t, y, x, 2),
                                );
                                let (_, gu, gv) =
                                    ycbcr_255(gt.get(t, y, x, 0), gt.get(t, y, x, 1), gt.get(t, y, x, 2));
                                acc += ((pu - gu) * (pu - gu) + (pv - gv) * (pv - gv)) / 2.0;
                            }
                        }
                    }
                }
            }
            let slow = acc / (2.0 * 16.0);
            assert!((fast - slow).abs() < 1e-9, "{space:?}: {fast} vs {slow}");
        }
    }

    #[test]
    fn psnr_cap_offset_and_scaling() {
        let v = noise_video(2, 4, 4, 4);
        assert_eq!(psnr(&v, &v).unwrap(), 100.0);

        // uniform offset of 16/255 → MSE 256 → 10·log10(65025/256)
        let gt = constant_video(1, 4, 4, [0.2, 0.2, 0.2]);
        let off = 16.0 / 255.0;
        let pred = constant_video(1, 4, 4, [0.2 + off, 0.2 + off, 0.2 + off]);
        let want = 10.0 * (65_025.0f64 / 256.0).log10();
        assert!((psnr(&pred, &gt).unwrap() - want).abs() < 1e-9);

        // doubling the error field costs 20·log10(2) ≈ 6.02 dB
        let half = 8.0 / 255.0;
        let pred_half = constant_video(1, 4, 4, [0.2 + half, 0.2 + half, 0.2 + half]);
        let diff = psnr(&pred_half, &gt).unwrap() - psnr(&pred, &gt).unwrap();
        assert!((diff - 20.0 * 2.0f64.log10()).abs() < 1e-9, "{diff}");
    }

    #[test]
    fn ssim_identity_symmetry_and_constant_closed_form() {
        let a = noise_video(1, 16, 16, 5);
        let b = noise_video(1, 16, 16, 6);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);

        // constant 100 vs constant 110 on the 0–255 luma scale:
        // SSIM = (2·μ1·μ2 + C1)/(μ1² + μ2² + C1), contrast factor exactly 1
        let p = constant_video(1, 16, 16, [100.0 / 255.0; 3]);
        let g = constant_video(1, 16, 16, [110.0 / 255.0; 3]);
        let c1 = (0.01f64 * 255.0).powi(2);
        let want = (2.0 * 100.0 * 110.0 + c1) / (100.0f64 * 100.0 + 110.0 * 110.0 + c1);
        assert!((ssim(&p, &g).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn ssim_matches_bruteforce_window_loop() {
        let a = noise_video(1, 14, 14, 7);
        let b = noise_video(1, 14, 14, 8);
        let fast = ssim(&a, &b).unwrap();
        // direct per-window double loop
        let pa = luma_plane_255(&a.frame(0));
        let pb = luma_plane_255(&b.frame(0));
        let k = ssim_window_weights();
        let r = SSIM_WINDOW / 2;
        let (h, w) = (14, 14);
        let c1 = (SSIM_K1 * SSIM_L) * (SSIM_K1 * SSIM_L);
        let c2 = (SSIM_K2 * SSIM_L) * (SSIM_K2 * SSIM_L);
        let mut acc = 0.0;
        let mut count = 0;
        for cy in r..h - r {
            for cx in r..w - r {
                let (mut ma, mut mb) = (0.0, 0.0);
                let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let wgt = k[dy] * k[dx];
                        let va = pa[(cy + dy - r) * w + cx + dx - r];
                        let vb = pb[(cy + dy - r) * w + cx + dx - r];
                        ma += wgt * va;
                        mb += wgt * vb;
                        saa += wgt * va * va;
                        sbb += wgt * vb * vb;
                        sab += wgt * va * vb;
                    }
                }
                let (va, vb, cab) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                acc += ((2.0 * ma * mb + c1) * (2.0 * cab + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        let slow = acc / count as f64;
        assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
    }

    #[test]
    fn ssim_rejects_frames_smaller_than_the_window() {
        let a = noise_video(1, 8, 8, 9);
        assert!(matches!(ssim(&a, &a), Err(Error::Degenerate(_))));
    }

    #[test]
    fn lpips_proxy_zero_symmetric_and_noise_monotone() {
        let proxy = LpipsProxy::new(11);
        let a = noise_video(1, 16, 16, 10);
        assert_eq!(proxy.distance(&a, &a).unwrap(), 0.0);

        let b = noise_video(1, 16, 16, 12);
        let dab = proxy.distance(&a, &b).unwrap();
        let dba = proxy.distance(&b, &a).unwrap();
        assert!((dab - dba).abs() < 1e-12);

        // increasing noise magnitude increases the distance (ρ over 4 levels
        // must be a perfect ordering, averaged over several base frames)
        let sigmas = [2.0, 4.0, 8.0, 16.0];
        let mut means = vec![0.0; sigmas.len()];
        for trial in 0..6u64 {
            let base = noise_video(1, 20, 20, 50 + trial);
            for (i, s) in sigmas.iter().enumerate() {
                let mut rng = rng_from(1000 + trial * 10 + i as u64);
                let noisy = VideoTensor::from_fn(1, 20, 20, |t, y, x, c| {
                    base.get(t, y, x, c)
                        + s / 255.0 * rng.sample::<f64, _>(rand_distr::StandardNormal)
                });
                means[i] += proxy.distance(&noisy, &base).unwrap();
            }
        }
        let idx: Vec<f64> = (0..sigmas.len()).map(|i| i as f64).collect();
        let rho = spearman_rho(&idx, &means);
        assert!(rho > 0.95, "noise monotonicity broken: {means:?} (ρ={rho})");
    }

    #[test]
    fn frechet_identical_and_mean_shift_and_diagonal() {
        let mu = DVector::from_vec(vec![0.3, -0.2]);
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        let d = frechet_distance(&mu, &cov, &mu, &cov).unwrap();
        assert!(d <= 1e-8, "identical Gaussians: {d}");

        // matched identity covariances, unit mean shift → exactly 1
        let mu1 = DVector::from_vec(vec![0.0, 0.0]);
        let mu2 = DVector::from_vec(vec![1.0, 0.0]);
        let eye = DMatrix::identity(2, 2);
        let d = frechet_distance(&mu1, &eye, &mu2, &eye).unwrap();
        assert!((d - 1.0).abs() < 1e-9);

        // diag(1,4) vs diag(4,1): Σ(√a − √b)² = 1 + 1 = 2
        let c1 = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0]));
        let c2 = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        let d = frechet_distance(&mu1, &c1, &mu1, &c2).unwrap();
        assert!((d - 2.0).abs() < 1e-9, "{d}");
    }

    #[test]
    fn frechet_rejects_nan_and_asymmetry() {
        let mu = DVector::from_vec(vec![0.0, 0.0]);
        let eye = DMatrix::identity(2, 2);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.5, 1.0]);
        assert!(matches!(frechet_distance(&mu, &bad, &mu, &eye), Err(Error::Numeric(_))));
        let nan = DMatrix::from_row_slice(2, 2, &[f64::NAN, 0.0, 0.0, 1.0]);
        assert!(matches!(frechet_distance(&mu, &nan, &mu, &eye), Err(Error::Numeric(_))));
    }

    #[test]
    fn frechet_diagonal_closed_form_holds_on_random_instances() {
        let mut rng = rng_from(13);
        for _ in 0..20 {
            let d = 4;
            let mu1 = DVector::from_iterator(d, (0..d).map(|_| rng.gen_range(-1.0..1.0)));
            let mu2 = DVector::from_iterator(d, (0..d).map(|_| rng.gen_range(-1.0..1.0)));
            let a: Vec<f64> = (0..d).map(|_| rng.gen_range(0.1..3.0)).collect();
            let b: Vec<f64> = (0..d).map(|_| rng.gen_range(0.1..3.0)).collect();
            let c1 = DMatrix::from_diagonal(&DVector::from_vec(a.clone()));
            let c2 = DMatrix::from_diagonal(&DVector::from_vec(b.clone()));
            let got = frechet_distance(&mu1, &c1, &mu2, &c2).unwrap();
            let want: f64 = (0..d)
                .map(|i| (mu1[i] - mu2[i]).powi(2) + (a[i].sqrt() - b[i].sqrt()).powi(2))
                .sum();
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
            // symmetry
            let rev = frechet_distance(&mu2, &c2, &mu1, &c1).unwrap();
            assert!((got - rev).abs() < 1e-9);
        }
    }

    #[test]
    fn fvd_self_ordering_and_degenerate() {
        let clips: Vec<VideoTensor> = (0..6).map(|i| noise_video(3, 16, 16, 100 + i)).collect();
        let ex = ClipFeatureExtractor::new(3, 32);
        let same = fvd(&clips, &clips, &ex).unwrap();
        assert!(same <= 1e-6, "fvd(X,X) = {same}");

        // clip ordering inside a set does not matter (up to fp reassociation)
        let mut shuffled = clips.clone();
        shuffled.reverse();
        let a = fvd(&clips, &clips, &ex).unwrap();
        let b = fvd(&shuffled, &clips, &ex).unwrap();
        assert!((a - b).abs() < 1e-9);

        let one = vec![clips[0].clone()];
        assert!(matches!(fvd(&one, &clips, &ex), Err(Error::Degenerate(_))));
    }

    #[test]
    fn fvd_separates_palettes() {
        // same synthetic distribution (disjoint seeds) vs colour-inverted
        // clips: the inverted set must sit at least 5× farther at n = 32
        use crate::dataset::{plan_corpus, render_planned, DataConfig};
        let cfg = DataConfig {
            train_clips: 64,
            test_clips: 0,
            frames: 9,
            height: 24,
            width: 32,
            ..Default::default()
        };
        let plan = plan_corpus(&cfg, 555);
        let clips: Vec<VideoTensor> =
            plan.iter().map(|p| render_planned(&cfg, p).unwrap()).collect();
        let (set_a, set_b) = clips.split_at(32);
        let inverted: Vec<VideoTensor> = set_b
            .iter()
            .map(|c| {
                VideoTensor::from_fn(c.frames(), c.height(), c.width(), |t, y, x, ch| {
                    1.0 - c.get(t, y, x, ch)
                })
            })
            .collect();
        let ex = ClipFeatureExtractor::new(7, 64);
        let near = fvd(set_a, set_b, &ex).unwrap();
        let far = fvd(set_a, &inverted, &ex).unwrap();
        assert!(
            far >= 5.0 * near,
            "palette separation too weak: near={near:.4e} far={far:.4e}"
        );
    }

    #[test]
    fn evaluate_self_is_perfect_and_shapes_are_aligned() {
        let mut gt = BTreeMap::new();
        let mut pred = BTreeMap::new();
        for i in 0..3 {
            let clip = noise_video(17, 16, 16, 200 + i);
            gt.insert(format!("c{i}"), clip.clone());
            pred.insert(format!("c{i}"), clip);
        }
        let cfg = EvalConfig {
            extractor: FeatureExtractorSpec { feature_dim: 16, ..Default::default() },
            ..Default::default()
        };
        let report = evaluate(&pred, &gt, &cfg, None).unwrap();
        assert!(!report.is_partial());
        assert_eq!(report.aggregate["msce"].mean, 0.0);
        assert_eq!(report.aggregate["psnr"].mean, 100.0);
        assert!((report.aggregate["ssim"].mean - 1.0).abs() < 1e-12);
        assert_eq!(report.aggregate["lpips"].mean, 0.0);
        assert!(report.fvd.unwrap() <= 1e-6);
        // Table-shaped: every metric has mean and std columns
        for key in ["msce", "psnr", "ssim", "lpips"] {
            assert!(report.aggregate[key].std.is_finite());
        }
        assert!(report.lpips_label.contains("proxy"));
        assert!(report.fvd_label.contains("proxy"));
    }

    #[test]
    fn evaluate_truncates_and_reports_missing() {
        let mut gt = BTreeMap::new();
        let mut pred = BTreeMap::new();
        gt.insert("a".into(), noise_video(14, 16, 16, 300));
        pred.insert("a".into(), noise_video(17, 16, 16, 301));
        gt.insert("lonely".into(), noise_video(14, 16, 16, 302));
        let cfg = EvalConfig {
            extractor: FeatureExtractorSpec { feature_dim: 8, ..Default::default() },
            ..Default::default()
        };
        let report = evaluate(&pred, &gt, &cfg, None).unwrap();
        assert_eq!(report.per_clip["a"].frames_evaluated, 14);
        assert!(report.is_partial());
        assert!(report.missing.iter().any(|m| m.contains("lonely")));
        // a single evaluable clip cannot support an fvd fit
        assert!(report.fvd.is_none());
    }

    #[test]
    fn evaluate_rescales_predictions_to_gt_resolution() {
        let mut gt = BTreeMap::new();
        let mut pred = BTreeMap::new();
        // smooth content survives the up/down resample round trip
        let smooth = |phase: f64| {
            VideoTensor::from_fn(12, 16, 24, move |t, y, x, c| {
                0.5 + 0.4
                    * ((x as f64 / 6.0 + phase + c as f64).sin()
                        * (y as f64 / 5.0 + t as f64 / 4.0).cos())
            })
        };
        gt.insert("a".into(), smooth(0.0));
        gt.insert("b".into(), smooth(1.0));
        // prediction at double resolution: must be scaled down, not error
        pred.insert("a".into(), resize_video(&smooth(0.0), 32, 48));
        pred.insert("b".into(), resize_video(&smooth(1.0), 32, 48));
        let cfg = EvalConfig {
            extractor: FeatureExtractorSpec { feature_dim: 8, ..Default::default() },
            ..Default::default()
        };
        let report = evaluate(&pred, &gt, &cfg, None).unwrap();
        assert!(report.per_clip["a"].psnr > 30.0, "downscale of upscale should be close, got {}", report.per_clip["a"].psnr);
    }
}
