//! Deterministic line-art extraction: luminance → difference of Gaussians →
//! magnitude threshold → binarization. Binarizing kills every intermediate
//! grey level, so no colour information can leak through stroke intensity.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::video::{luminance, VideoTensor};

/// Parameters of the difference-of-Gaussians extractor.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SketchConfig {
    /// Narrow blur radius in pixels.
    pub sigma_narrow: f64,
    /// Wide blur radius in pixels; must exceed `sigma_narrow`.
    pub sigma_wide: f64,
    /// DoG magnitudes below this are background.
    pub dog_threshold: f64,
    /// Threshold used by [`binarize`], in (0,1).
    pub binarize_threshold: f64,
    /// true → lines dark on white background.
    pub invert: bool,
}

impl Default for SketchConfig {
    fn default() -> Self {
        Self {
            sigma_narrow: 0.8,
            sigma_wide: 1.6,
            dog_threshold: 0.02,
            binarize_threshold: 0.5,
            invert: true,
        }
    }
}

impl SketchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_wide > self.sigma_narrow && self.sigma_narrow > 0.0) {
            return Err(Error::Config(format!(
                "require sigma_wide > sigma_narrow > 0, got {} and {}",
                self.sigma_wide, self.sigma_narrow
            )));
        }
        for (name, v) in [("dog_threshold", self.dog_threshold), ("binarize_threshold", self.binarize_threshold)] {
            if !(0.0 < v && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0,1), got {v}")));
            }
        }
        Ok(())
    }
}

/// 1-D Gaussian kernel with radius ⌈3σ⌉, normalized to sum 1.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable Gaussian blur of an H×W plane with replicated borders.
pub fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let sx = (x as isize + i as isize - radius).clamp(0, w as isize - 1) as usize;
                acc += kv * plane[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let sy = (y as isize + i as isize - radius).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Extracts a soft line-art map from an [H, W, 3] frame.
///
/// The frame is reduced to luminance, blurred at two scales, and the DoG
/// magnitude below `dog_threshold` is cut to exact zero; the remainder ramps
/// linearly and saturates at 1. With `invert` the result is flipped so lines
/// are dark (0) on a white (1) background.
pub fn extract_sketch(frame: &Tensor, config: &SketchConfig) -> Result<Tensor> {
    config.validate()?;
    let sh = frame.shape();
    if sh.len() != 3 || sh[2] != 3 {
        return Err(Error::Dimension(format!("frame must be [H,W,3], got {sh:?}")));
    }
    let (h, w) = (sh[0], sh[1]);
    let src = frame.data();
    let luma: Vec<f64> =
        (0..h * w).map(|p| luminance(src[p * 3], src[p * 3 + 1], src[p * 3 + 2])).collect();
    let narrow = gaussian_blur(&luma, h, w, config.sigma_narrow);
    let wide = gaussian_blur(&luma, h, w, config.sigma_wide);
    let out: Vec<f64> = narrow
        .iter()
        .zip(wide.iter())
        .map(|(n, wv)| {
            let mag = (n - wv).abs();
            let strength = ((mag - config.dog_threshold) / config.dog_threshold).clamp(0.0, 1.0);
            if config.invert {
                1.0 - strength
            } else {
                strength
            }
        })
        .collect();
    Ok(Tensor::from_vec(&[h, w], out))
}

/// Hard threshold: 1 where `sketch ≥ threshold`, else 0.
pub fn binarize(sketch: &Tensor, threshold: f64) -> Result<Tensor> {
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(Error::Config(format!("binarize threshold must lie in (0,1), got {threshold}")));
    }
    if sketch.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Numeric("sketch values must lie in [0,1]".into()));
    }
    Ok(sketch.map(|v| if v >= threshold { 1.0 } else { 0.0 }))
}

/// Per-frame sketch extraction and binarization, replicated to three equal
/// channels so the frozen video VAE can consume the result.
pub fn sketch_video(video: &VideoTensor, config: &SketchConfig) -> Result<VideoTensor> {
    let (frames, h, w) = (video.frames(), video.height(), video.width());
    let mut data = Vec::with_capacity(frames * h * w * 3);
    for t in 0..frames {
        let soft = extract_sketch(&video.frame(t), config)?;
        let hard = binarize(&soft, config.binarize_threshold)?;
        for &v in hard.data() {
            data.extend_from_slice(&[v, v, v]);
        }
    }
    VideoTensor::new(Tensor::from_vec(&[frames, h, w, 3], data))
}
