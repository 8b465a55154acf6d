//! 8-bit raster IO. Format follows the file extension (`.png`, `.pgm`,
//! `.ppm`, `.pnm`).

use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};

use super::canny::BaselinePoint;
use crate::autodiff::Array;
use crate::error::{Error, Result};

/// Reads an image as `[channels, H, W]` in `[0, 1]`; `channels` is 1 or 3.
pub fn read_image(path: &Path, channels: usize) -> Result<Array> {
    let img = ImageReader::open(path)?.with_guessed_format()?.decode()?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match channels {
        1 => {
            let g = img.to_luma8();
            Array::new(
                vec![1, h, w],
                g.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
            )
        }
        3 => {
            let rgb = img.to_rgb8();
            let mut data = vec![0.0; 3 * h * w];
            for (k, p) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    data[c * h * w + k] = p.0[c] as f64 / 255.0;
                }
            }
            Array::new(vec![3, h, w], data)
        }
        _ => Err(Error::invalid("channels must be 1 or 3")),
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[C, H, W]` image (`C` of 1 or 3), clamping to `[0, 1]`.
pub fn write_image(path: &Path, image: &Array) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || (s[0] != 1 && s[0] != 3) {
        return Err(Error::InvalidShape {
            op: "write_image",
            shape: s.to_vec(),
            reason: "expects [1 or 3, H, W]".into(),
        });
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    if s[0] == 1 {
        let buf: Vec<u8> = d.iter().map(|&v| to_byte(v)).collect();
        GrayImage::from_raw(w as u32, h as u32, buf)
            .expect("buffer sized from shape")
            .save(path)?;
    } else {
        let mut buf = Vec::with_capacity(3 * h * w);
        for k in 0..h * w {
            for c in 0..3 {
                buf.push(to_byte(d[c * h * w + k]));
            }
        }
        RgbImage::from_raw(w as u32, h as u32, buf)
            .expect("buffer sized from shape")
            .save(path)?;
    }
    Ok(())
}

/// Debug dump of an edge set as a white-on-black grayscale image.
pub fn write_edge_map(path: &Path, h: usize, w: usize, edges: &[BaselinePoint]) -> Result<()> {
    let mut img = Array::zeros(&[1, h, w]);
    for p in edges {
        if p.row < h && p.col < w {
            img.data_mut()[p.row * w + p.col] = 1.0;
        }
    }
    write_image(path, &img)
}
