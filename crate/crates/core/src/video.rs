//! Pixel- and latent-space clip containers plus the resampling and colour
//! helpers shared by the dataset, metrics and VAE modules.
//!
//! A [`VideoTensor`] is frames×height×width×3 with every value in [0,1]; a
//! [`LatentTensor`] is latentFrames×latentH×latentW×channels, unbounded.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A clip in pixel space: [T, H, W, 3], values in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor {
    data: Tensor,
}

impl VideoTensor {
    pub fn new(data: Tensor) -> Result<Self> {
        let sh = data.shape();
        if sh.len() != 4 || sh[3] != 3 {
            return Err(Error::Dimension(format!(
                "video tensor must be [T,H,W,3], got {sh:?}"
            )));
        }
        if sh.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("video tensor has empty axis: {sh:?}")));
        }
        if !data.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::Numeric("video values must lie in [0,1]".into()));
        }
        Ok(Self { data })
    }

    /// Builds from a per-(t,y,x,c) function; values are clamped to [0,1].
    pub fn from_fn(
        frames: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(frames * height * width * 3);
        for t in 0..frames {
            for y in 0..height {
                for x in 0..width {
                    for c in 0..3 {
                        data.push(f(t, y, x, c).clamp(0.0, 1.0));
                    }
                }
            }
        }
        Self { data: Tensor::from_vec(&[frames, height, width, 3], data) }
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn get(&self, t: usize, y: usize, x: usize, c: usize) -> f64 {
        let (h, w) = (self.height(), self.width());
        self.data.data()[((t * h + y) * w + x) * 3 + c]
    }

    /// One frame as an [H, W, 3] tensor.
    pub fn frame(&self, t: usize) -> Tensor {
        let (h, w) = (self.height(), self.width());
        let len = h * w * 3;
        let slice = &self.data.data()[t * len..(t + 1) * len];
        Tensor::from_vec(&[h, w, 3], slice.to_vec())
    }

    /// A single-frame video holding frame `t`.
    pub fn frame_video(&self, t: usize) -> VideoTensor {
        let frame = self.frame(t);
        let (h, w) = (self.height(), self.width());
        VideoTensor { data: frame.reshape(&[1, h, w, 3]) }
    }

    /// A contiguous frame slice [start, start+len).
    pub fn window(&self, start: usize, len: usize) -> VideoTensor {
        assert!(start + len <= self.frames(), "window out of range");
        let (h, w) = (self.height(), self.width());
        let fl = h * w * 3;
        let slice = &self.data.data()[start * fl..(start + len) * fl];
        VideoTensor { data: Tensor::from_vec(&[len, h, w, 3], slice.to_vec()) }
    }

    /// Concatenates frames of several clips with identical geometry.
    pub fn concat_frames(parts: &[&VideoTensor]) -> Result<VideoTensor> {
        let first = parts.first().ok_or_else(|| Error::Contract("no clips".into()))?;
        let (h, w) = (first.height(), first.width());
        let mut data = Vec::new();
        let mut frames = 0;
        for p in parts {
            if p.height() != h || p.width() != w {
                return Err(Error::Dimension("frame geometry mismatch in concat".into()));
            }
            data.extend_from_slice(p.tensor().data());
            frames += p.frames();
        }
        Ok(VideoTensor { data: Tensor::from_vec(&[frames, h, w, 3], data) })
    }
}

/// A clip in latent space: [T, H, W, C].
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTensor {
    data: Tensor,
}

impl LatentTensor {
    pub fn new(data: Tensor) -> Result<Self> {
        let sh = data.shape();
        if sh.len() != 4 {
            return Err(Error::Dimension(format!(
                "latent tensor must be [T,H,W,C], got {sh:?}"
            )));
        }
        Ok(Self { data })
    }

    pub fn zeros(frames: usize, h: usize, w: usize, c: usize) -> Self {
        Self { data: Tensor::zeros(&[frames, h, w, c]) }
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn get(&self, t: usize, y: usize, x: usize, c: usize) -> f64 {
        let (h, w, ch) = (self.height(), self.width(), self.channels());
        self.data.data()[((t * h + y) * w + x) * ch + c]
    }

    pub fn scale(&self, s: f64) -> LatentTensor {
        LatentTensor { data: self.data.scale(s) }
    }
}

/// Causal temporal shape law: T pixel frames compress to (T−1)/factor + 1
/// latent frames. Requires T ≡ 1 (mod factor).
pub fn latent_frames(frames: usize, temporal_factor: usize) -> Result<usize> {
    if temporal_factor == 0 {
        return Err(Error::Config("temporal factor must be ≥ 1".into()));
    }
    if frames == 0 || (frames - 1) % temporal_factor != 0 {
        return Err(Error::Dimension(format!(
            "frame axis {frames} must satisfy frames ≡ 1 (mod {temporal_factor})"
        )));
    }
    Ok((frames - 1) / temporal_factor + 1)
}

/// Inverse of [`latent_frames`].
pub fn pixel_frames(latent: usize, temporal_factor: usize) -> usize {
    (latent - 1) * temporal_factor + 1
}

/// Bilinear resize of an [H, W, 3] frame to `th`×`tw`. Pixel-centre aligned;
/// an identity-size resize reproduces the input exactly.
pub fn resize_bilinear(frame: &Tensor, th: usize, tw: usize) -> Tensor {
    let (h, w) = (frame.shape()[0], frame.shape()[1]);
    let c = frame.shape()[2];
    let src = frame.data();
    let mut out = vec![0.0; th * tw * c];
    let sy = h as f64 / th as f64;
    let sx = w as f64 / tw as f64;
    for oy in 0..th {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..tw {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ch in 0..c {
                let p00 = src[(y0 * w + x0) * c + ch];
                let p01 = src[(y0 * w + x1) * c + ch];
                let p10 = src[(y1 * w + x0) * c + ch];
                let p11 = src[(y1 * w + x1) * c + ch];
                let top = p00 * (1.0 - wx) + p01 * wx;
                let bot = p10 * (1.0 - wx) + p11 * wx;
                out[(oy * tw + ox) * c + ch] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    Tensor::from_vec(&[th, tw, c], out)
}

/// Resizes every frame of a clip.
pub fn resize_video(video: &VideoTensor, th: usize, tw: usize) -> VideoTensor {
    let mut data = Vec::with_capacity(video.frames() * th * tw * 3);
    for t in 0..video.frames() {
        data.extend_from_slice(resize_bilinear(&video.frame(t), th, tw).data());
    }
    VideoTensor { data: Tensor::from_vec(&[video.frames(), th, tw, 3], data) }
}

/// Rec. 601 luma from [0,1] RGB, returned on the same scale.
pub fn luminance(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Full-range Rec. 601 YCbCr on the 0–255 scale from [0,1] RGB.
pub fn ycbcr_255(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let (r, g, b) = (r * 255.0, g * 255.0, b * 255.0);
    let y = 0.299 * r + 0.587 * g + 0.114 * b;
    let cb = 128.0 - 0.168_736 * r - 0.331_264 * g + 0.5 * b;
    let cr = 128.0 + 0.5 * r - 0.418_688 * g - 0.081_312 * b;
    (y, cb, cr)
}

/// Luma plane of one frame on the 0–255 scale.
pub fn luma_plane_255(frame: &Tensor) -> Vec<f64> {
    let (h, w) = (frame.shape()[0], frame.shape()[1]);
    let src = frame.data();
    let mut out = Vec::with_capacity(h * w);
    for p in 0..h * w {
        out.push(255.0 * luminance(src[p * 3], src[p * 3 + 1], src[p * 3 + 2]));
    }
    out
}

/// Quantizes a [0,1] value to a PNG byte.
pub fn to_u8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Inverse of [`to_u8`], exact over the u8 range.
pub fn from_u8(v: u8) -> f64 {
    v as f64 / 255.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_law_examples() {
        assert_eq!(latent_frames(17, 4).unwrap(), 5);
        assert_eq!(latent_frames(1, 4).unwrap(), 1);
        assert_eq!(latent_frames(9, 4).unwrap(), 3);
        assert!(latent_frames(16, 4).is_err());
        assert_eq!(pixel_frames(5, 4), 17);
        assert_eq!(pixel_frames(1, 4), 1);
    }

    #[test]
    fn video_validation() {
        assert!(VideoTensor::new(Tensor::zeros(&[2, 4, 4, 3])).is_ok());
        assert!(VideoTensor::new(Tensor::zeros(&[2, 4, 4, 2])).is_err());
        assert!(VideoTensor::new(Tensor::filled(&[1, 2, 2, 3], 1.5)).is_err());
    }

    #[test]
    fn identity_resize_is_exact() {
        let frame = Tensor::from_vec(
            &[2, 3, 3],
            (0..18).map(|i| i as f64 / 18.0).collect(),
        );
        let out = resize_bilinear(&frame, 2, 3);
        assert_eq!(out.data(), frame.data());
    }

    #[test]
    fn downscale_by_two_averages_blocks() {
        // A 2×2 frame of constant-channel values downsampled to 1×1 must be
        // the average of the four pixels.
        let frame = Tensor::from_vec(
            &[2, 2, 3],
            vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5],
        );
        let out = resize_bilinear(&frame, 1, 1);
        for c in 0..3 {
            assert!((out.data()[c] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn u8_roundtrip_is_exact() {
        for v in 0..=255u8 {
            assert_eq!(to_u8(from_u8(v)), v);
        }
    }

    #[test]
    fn window_is_bitwise_slice() {
        let v = VideoTensor::from_fn(5, 2, 2, |t, y, x, c| {
            (t * 100 + y * 10 + x + c) as f64 / 1000.0
        });
        let w = v.window(1, 3);
        assert_eq!(w.frames(), 3);
        for t in 0..3 {
            for y in 0..2 {
                for x in 0..2 {
                    for c in 0..3 {
                        assert_eq!(w.get(t, y, x, c), v.get(t + 1, y, x, c));
                    }
                }
            }
        }
    }
}
