//! 8-bit PNG persistence for [C,H,W] tensors with values in [0,1].

use std::path::Path;

use image::{ImageBuffer, Rgb};

use crate::error::{Error, Result};
use crate::tensor::{chw, Tensor};

/// Save a [3,H,W] tensor in [0,1] as an 8-bit RGB PNG. Values are rounded to
/// the nearest 8-bit level; renders are already quantized so the round trip
/// is exact.
pub fn save_image01(img: &Tensor, path: &Path) -> Result<()> {
    let shape = img.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::ShapeMismatch {
            context: "save_image01",
            expected: vec![3, 0, 0],
            got: shape.to_vec(),
        });
    }
    let (h, w) = (shape[1], shape[2]);
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            let v = img.data()[chw(c, y as usize, x as usize, h, w)];
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        };
        Rgb([px(0), px(1), px(2)])
    });
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    buf.save(path)?;
    Ok(())
}

/// Load an RGB PNG as a [3,H,W] tensor with values v/255 in [0,1].
pub fn load_image01(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[chw(c, y as usize, x as usize, h, w)] = px.0[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Tile equally sized [3,H,W] images into one row with a light gray gap.
pub fn tile_row(images: &[&Tensor], gap: usize) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidConfig("tile_row needs at least one image".into()))?;
    let (h, w) = (first.shape()[1], first.shape()[2]);
    for img in images {
        if img.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                context: "tile_row",
                expected: first.shape().to_vec(),
                got: img.shape().to_vec(),
            });
        }
    }
    let tw = images.len() * w + (images.len() - 1) * gap;
    let mut out = Tensor::full(&[3, h, tw], 0.85);
    for (i, img) in images.iter().enumerate() {
        let x0 = i * (w + gap);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out.data_mut()[chw(c, y, x0 + x, h, tw)] = img.data()[chw(c, y, x, h, w)];
                }
            }
        }
    }
    Ok(out)
}

/// Stack equally wide rows vertically with a gap.
pub fn tile_grid(rows: &[Tensor], gap: usize) -> Result<Tensor> {
    let first = rows
        .first()
        .ok_or_else(|| Error::InvalidConfig("tile_grid needs at least one row".into()))?;
    let (h, w) = (first.shape()[1], first.shape()[2]);
    for row in rows {
        if row.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                context: "tile_grid",
                expected: first.shape().to_vec(),
                got: row.shape().to_vec(),
            });
        }
    }
    let th = rows.len() * h + (rows.len() - 1) * gap;
    let mut out = Tensor::full(&[3, th, w], 0.85);
    for (i, row) in rows.iter().enumerate() {
        let y0 = i * (h + gap);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out.data_mut()[chw(c, y0 + y, x, th, w)] = row.data()[chw(c, y, x, h, w)];
                }
            }
        }
    }
    Ok(out)
}
