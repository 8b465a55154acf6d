use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::imaging::canny::{blur, gaussian_kernel};

/// Indexed labelled images with values in `[0, 1]`, shaped `[C, H, W]`.
pub trait Dataset: Sync {
    fn len(&self) -> usize;
    fn classes(&self) -> usize;
    fn image_shape(&self) -> [usize; 3];
    fn get(&self, index: usize) -> Result<(Array, usize)>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Procedurally generated class templates: one shape and colour scheme per
/// class, jittered in position and brightness, plus pixel noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateDataset {
    pub size: usize,
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub noise: f64,
    /// Gaussian blur sigma in pixels applied to the clean template.
    pub blur: f64,
    pub seed: u64,
}

impl Default for TemplateDataset {
    fn default() -> Self {
        TemplateDataset {
            size: 1000,
            classes: 10,
            channels: 1,
            height: 16,
            width: 16,
            noise: 0.02,
            blur: 2.0,
            seed: 7,
        }
    }
}

const PALETTE: [([f64; 3], [f64; 3]); 10] = [
    ([0.90, 0.25, 0.20], [0.15, 0.20, 0.35]),
    ([0.95, 0.85, 0.20], [0.20, 0.35, 0.60]),
    ([0.25, 0.80, 0.35], [0.40, 0.15, 0.25]),
    ([0.95, 0.95, 0.95], [0.30, 0.30, 0.30]),
    ([0.20, 0.45, 0.90], [0.85, 0.75, 0.55]),
    ([0.85, 0.40, 0.85], [0.15, 0.30, 0.15]),
    ([0.95, 0.60, 0.15], [0.10, 0.10, 0.25]),
    ([0.30, 0.85, 0.85], [0.45, 0.20, 0.10]),
    ([0.80, 0.80, 0.30], [0.30, 0.10, 0.45]),
    ([0.60, 0.25, 0.15], [0.70, 0.85, 0.90]),
];

/// Foreground coverage of class `class` at normalized coordinates
/// `(u, v)` in `[-1, 1]²`, already shifted by the sample's jitter.
fn template(class: usize, u: f64, v: f64) -> bool {
    match class % 10 {
        0 => u.abs() < 0.5 && v.abs() < 0.5,
        1 => u * u + v * v < 0.36,
        2 => v > -0.55 && v < 0.55 && u.abs() < (v + 0.55) * 0.55,
        3 => (u.abs() < 0.18 && v.abs() < 0.7) || (v.abs() < 0.18 && u.abs() < 0.7),
        4 => v.abs() < 0.75 && ((v + 1.0) * 2.5).floor() as i64 % 2 == 0,
        5 => u.abs() < 0.75 && ((u + 1.0) * 2.5).floor() as i64 % 2 == 0,
        6 => (u - v).abs() < 0.35,
        7 => {
            let r2 = u * u + v * v;
            r2 < 0.55 && r2 > 0.18
        }
        8 => ((u + 1.0) * 2.0).floor() as i64 % 2 == ((v + 1.0) * 2.0).floor() as i64 % 2,
        _ => u < 0.0 && v < 0.0 || (u > 0.3 && v > 0.3),
    }
}

impl TemplateDataset {
    pub fn small(size: usize, seed: u64) -> Self {
        TemplateDataset {
            size,
            seed,
            ..Default::default()
        }
    }

    fn render(&self, index: usize) -> Result<Array> {
        let class = index % self.classes;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let du = rng.random_range(-0.12..0.12);
        let dv = rng.random_range(-0.12..0.12);
        let gain = rng.random_range(0.9..1.1);
        let noise =
            Normal::new(0.0, self.noise.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
        let (fg, bg) = PALETTE[class % PALETTE.len()];
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut data = vec![0.0; c * h * w];
        for i in 0..h {
            for j in 0..w {
                let v = (2.0 * (i as f64 + 0.5) / h as f64 - 1.0) - dv;
                let u = (2.0 * (j as f64 + 0.5) / w as f64 - 1.0) - du;
                let col = if template(class, u, v) { fg } else { bg };
                for ch in 0..c {
                    let base = if c == 3 {
                        col[ch]
                    } else {
                        (col[0] + col[1] + col[2]) / 3.0
                    };
                    data[(ch * h + i) * w + j] = base * gain;
                }
            }
        }
        if self.blur > 0.0 {
            let size = 2 * (3.0 * self.blur).ceil() as usize + 1;
            let kernel = gaussian_kernel(size, self.blur);
            for plane in data.chunks_mut(h * w) {
                let smooth = blur(plane, h, w, &kernel);
                plane.copy_from_slice(&smooth);
            }
        }
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    let px = &mut data[(ch * h + i) * w + j];
                    if self.noise > 0.0 {
                        *px += noise.sample(&mut rng);
                    }
                    *px = px.clamp(0.0, 1.0);
                }
            }
        }
        Array::new(vec![c, h, w], data)
    }
}

impl Dataset for TemplateDataset {
    fn len(&self) -> usize {
        self.size
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    fn get(&self, index: usize) -> Result<(Array, usize)> {
        if index >= self.size {
            return Err(Error::invalid(format!(
                "index {index} out of range for dataset of {}",
                self.size
            )));
        }
        Ok((self.render(index)?, index % self.classes))
    }
}

/// Images loaded from `root/<class>/<file>` where class directories are
/// taken in sorted order as labels `0..N`. Accepts PGM/PPM/PNG files, all of
/// one size; grayscale or RGB is decided by `channels`.
#[derive(Clone, Debug)]
pub struct DirDataset {
    items: Vec<(Array, usize)>,
    classes: usize,
    shape: [usize; 3],
}

impl DirDataset {
    pub fn load(root: &Path, channels: usize) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid("channels must be 1 or 3"));
        }
        let mut class_dirs: Vec<_> = std::fs::read_dir(root)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.path())
            .collect();
        class_dirs.sort();
        let mut items = Vec::new();
        let mut shape = None;
        for (label, dir) in class_dirs.iter().enumerate() {
            let mut files: Vec<_> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| {
                    matches!(
                        p.extension().and_then(|s| s.to_str()),
                        Some("pgm" | "ppm" | "pnm" | "png")
                    )
                })
                .collect();
            files.sort();
            for f in files {
                let img = crate::imaging::io::read_image(&f, channels)?;
                let s = [img.shape()[0], img.shape()[1], img.shape()[2]];
                match shape {
                    None => shape = Some(s),
                    Some(prev) if prev != s => {
                        return Err(Error::ShapeMismatch {
                            op: "dataset load",
                            lhs: prev.to_vec(),
                            rhs: s.to_vec(),
                        })
                    }
                    _ => {}
                }
                items.push((img, label));
            }
        }
        let shape =
            shape.ok_or_else(|| Error::invalid(format!("no images under {}", root.display())))?;
        Ok(DirDataset {
            items,
            classes: class_dirs.len(),
            shape,
        })
    }
}

impl Dataset for DirDataset {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn image_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn get(&self, index: usize) -> Result<(Array, usize)> {
        self.items
            .get(index)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("index {index} out of range")))
    }
}

/// Per-channel mean over the first `limit` samples (all when `None`).
pub fn channel_means(dataset: &dyn Dataset, limit: Option<usize>) -> Result<Vec<f64>> {
    let n = limit.map_or(dataset.len(), |l| l.min(dataset.len()));
    if n == 0 {
        return Err(Error::invalid("channel means of an empty dataset"));
    }
    let [c, h, w] = dataset.image_shape();
    let mut sums = vec![0.0; c];
    for i in 0..n {
        let (img, _) = dataset.get(i)?;
        for (ch, plane) in img.data().chunks(h * w).enumerate() {
            sums[ch] += plane.iter().sum::<f64>();
        }
    }
    Ok(sums.into_iter().map(|s| s / (n * h * w) as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn templates_are_in_range_and_deterministic() {
        let ds = TemplateDataset::default();
        let (a, la) = ds.get(13).unwrap();
        let (b, lb) = ds.get(13).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, 3);
        assert_eq!(la, lb);
        assert_eq!(a.shape(), &[1, 16, 16]);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn classes_differ_visually() {
        // Grayscale collapses some palette pairs to similar levels.
        for (channels, floor) in [(1, 1e-3), (3, 5e-3)] {
            let ds = TemplateDataset {
                noise: 0.0,
                channels,
                ..Default::default()
            };
            let imgs: Vec<Array> = (0..10).map(|i| ds.get(i).unwrap().0).collect();
            for i in 0..10 {
                for j in i + 1..10 {
                    let mse: f64 = imgs[i]
                        .data()
                        .iter()
                        .zip(imgs[j].data())
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        / imgs[i].len() as f64;
                    assert!(mse > floor, "classes {i} and {j} too similar: {mse}");
                }
            }
        }
    }

    #[test]
    fn colour_variant() {
        let ds = TemplateDataset {
            channels: 3,
            ..Default::default()
        };
        assert_eq!(ds.get(0).unwrap().0.shape(), &[3, 16, 16]);
    }

    #[test]
    fn out_of_range_index() {
        assert!(TemplateDataset::small(5, 1).get(5).is_err());
    }

    #[test]
    fn means_have_one_entry_per_channel() {
        let ds = TemplateDataset {
            channels: 3,
            ..TemplateDataset::small(50, 1)
        };
        let m = channel_means(&ds, None).unwrap();
        assert_eq!(m.len(), 3);
        assert!(m.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
