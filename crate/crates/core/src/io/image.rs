//! 8-bit image files.

use std::path::{Path, PathBuf};

use image::{ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Decodes an image held in memory into a `(1, 3, H, W)` tensor in `[0, 1]`.
/// Grayscale input is replicated to three channels.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    let img = ImageReader::new(std::io::Cursor::new(bytes))
        .with_guessed_format()?
        .decode()?;
    Ok(from_rgb(&img.to_rgb8()))
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = ImageReader::open(path)?.with_guessed_format()?.decode()?;
    Ok(from_rgb(&img.to_rgb8()))
}

fn from_rgb(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(Shape::new(1, 3, h, w));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            let i = t.index(0, c, y as usize, x as usize);
            t.data_mut()[i] = px[c] as f32 / 255.0;
        }
    }
    t
}

/// Quantises a batch-1 tensor in `[0, 1]` (1 or 3 channels) to 8-bit RGB.
pub fn to_rgb(t: &Tensor) -> Result<RgbImage> {
    let [n, c, h, w] = t.shape().0;
    if n != 1 || (c != 1 && c != 3) {
        return Err(Error::invalid(format!(
            "can only write one 1- or 3-channel image, got {}",
            t.shape()
        )));
    }
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| q(t.at(0, if c == 1 { 0 } else { ch }, y as usize, x as usize));
        image::Rgb([px(0), px(1), px(2)])
    }))
}

/// Writes a PNG. The format is always PNG regardless of extension.
pub fn write_image(path: &Path, t: &Tensor) -> Result<()> {
    to_rgb(t)?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// PNG files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Places batch-1 images of equal height side by side.
pub fn hconcat(images: &[&Tensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("nothing to concatenate"))?
        .shape();
    let [_, c, h, _] = first.0;
    for im in images {
        let s = im.shape();
        if s.batch() != 1 || s.channels() != c || s.height() != h {
            return Err(Error::ShapeMismatch {
                op: "hconcat",
                left: first,
                right: s,
            });
        }
    }
    let total_w: usize = images.iter().map(|i| i.shape().width()).sum();
    let mut out = Tensor::zeros(Shape::new(1, c, h, total_w));
    let mut x0 = 0;
    for im in images {
        let w = im.shape().width();
        for ch in 0..c {
            for y in 0..h {
                let src = im.index(0, ch, y, 0);
                let dst = out.index(0, ch, y, x0);
                let row = im.data()[src..src + w].to_vec();
                out.data_mut()[dst..dst + w].copy_from_slice(&row);
            }
        }
        x0 += w;
    }
    Ok(out)
}
