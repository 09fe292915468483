//! PNG frame-directory IO: clips are exchanged as directories of
//! zero-padded numbered frames (`frame_00000.png`, …), lossless 8-bit RGB.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};
use sketchcolour_core::tensor::Tensor;
use sketchcolour_core::video::{from_u8, to_u8, VideoTensor};
use sketchcolour_core::{Error, Result};

pub fn frame_name(index: usize) -> String {
    format!("frame_{index:05}.png")
}

/// Writes one [H,W,3] frame as PNG.
pub fn write_frame(path: &Path, frame: &Tensor) -> Result<()> {
    let (h, w) = (frame.shape()[0], frame.shape()[1]);
    let mut img: RgbImage = ImageBuffer::new(w as u32, h as u32);
    let data = frame.data();
    for y in 0..h {
        for x in 0..w {
            let p = (y * w + x) * 3;
            img.put_pixel(
                x as u32,
                y as u32,
                Rgb([to_u8(data[p]), to_u8(data[p + 1]), to_u8(data[p + 2])]),
            );
        }
    }
    img.save(path)
        .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))
}

/// Writes a whole clip as a frame directory.
pub fn write_video_dir(dir: &Path, video: &VideoTensor) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for t in 0..video.frames() {
        write_frame(&dir.join(frame_name(t)), &video.frame(t))?;
    }
    Ok(())
}

/// Reads one PNG into an [H,W,3] tensor.
pub fn read_frame(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            data.extend_from_slice(&[from_u8(px[0]), from_u8(px[1]), from_u8(px[2])]);
        }
    }
    Ok(Tensor::from_vec(&[h, w, 3], data))
}

/// Sorted PNG files of a frame directory.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut frames: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", dir.display()))))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    frames.sort();
    Ok(frames)
}

/// Reads a frame directory as a clip.
pub fn read_video_dir(dir: &Path) -> Result<VideoTensor> {
    let files = list_frames(dir)?;
    if files.is_empty() {
        return Err(Error::Contract(format!("no PNG frames in {}", dir.display())));
    }
    let mut geometry = None;
    for f in &files {
        let frame = read_frame(f)?;
        let dims = (frame.shape()[0], frame.shape()[1]);
        match geometry {
            None => geometry = Some(dims),
            Some(g) if g != dims => {
                return Err(Error::Dimension(format!(
                    "frame {} is {}×{}, clip is {}×{}",
                    f.display(),
                    dims.0,
                    dims.1,
                    g.0,
                    g.1
                )))
            }
            _ => {}
        }
    }
    let (h, w) = geometry.unwrap();
    let mut data = Vec::with_capacity(files.len() * h * w * 3);
    for f in &files {
        data.extend_from_slice(read_frame(f)?.data());
    }
    VideoTensor::new(Tensor::from_vec(&[files.len(), h, w, 3], data))
}

/// Reads a root directory of clip subdirectories into an id → clip map.
pub fn read_clip_root(root: &Path) -> Result<std::collections::BTreeMap<String, VideoTensor>> {
    let mut out = std::collections::BTreeMap::new();
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", root.display()))))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for d in dirs {
        let id = d
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Contract("unreadable clip directory name".into()))?
            .to_string();
        out.insert(id, read_video_dir(&d)?);
    }
    if out.is_empty() {
        return Err(Error::Contract(format!("no clip directories under {}", root.display())));
    }
    Ok(out)
}

/// Optional animated-GIF convenience export.
pub fn write_gif(path: &Path, video: &VideoTensor, frame_delay_ms: u32) -> Result<()> {
    use image::codecs::gif::{GifEncoder, Repeat};
    use image::{Delay, Frame};
    let file = std::fs::File::create(path)?;
    let mut enc = GifEncoder::new(file);
    enc.set_repeat(Repeat::Infinite)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    for t in 0..video.frames() {
        let f = video.frame(t);
        let (h, w) = (f.shape()[0], f.shape()[1]);
        let mut img = image::RgbaImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let p = (y * w + x) * 3;
                img.put_pixel(
                    x as u32,
                    y as u32,
                    image::Rgba([to_u8(f.data()[p]), to_u8(f.data()[p + 1]), to_u8(f.data()[p + 2]), 255]),
                );
            }
        }
        enc.encode_frame(Frame::from_parts(img, 0, 0, Delay::from_numer_denom_ms(frame_delay_ms, 1)))
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    }
    Ok(())
}
