//! Samples, the synthetic ellipse dataset and the on-disk dataset layout.
//!
//! A dataset directory holds `images/<id>.tdl` (`[C, H, W]`) and
//! `masks/<id>.tdl` (`[H, W]`, float-encoded integer labels), plus an
//! optional `dataset.cfg` with `num_classes = K`.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[C, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Row-major `H*W` labels.
    pub mask: Vec<usize>,
    pub height: usize,
    pub width: usize,
}

impl Sample {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let s = self.image.shape();
        if s.len() != 3 || s[1] != self.height || s[2] != self.width || self.mask.len() != self.height * self.width {
            return Err(Error::invalid(
                "sample",
                format!(
                    "image {s:?} and {} labels do not describe a {}x{} sample",
                    self.mask.len(),
                    self.height,
                    self.width
                ),
            ));
        }
        if let Some(&l) = self.mask.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: l,
                classes: num_classes,
            });
        }
        Ok(())
    }
}

/// Stacks samples into `[B, C, H, W]` images and flat `B*H*W` labels.
pub fn collate<T: Element>(samples: &[&Sample]) -> Result<(Tensor<T>, Vec<usize>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("collate", "empty batch"))?;
    let shape = first.image.shape().to_vec();
    let mut img = Vec::with_capacity(samples.len() * first.image.len());
    let mut labels = Vec::with_capacity(samples.len() * first.mask.len());
    for s in samples {
        if s.image.shape() != shape.as_slice() {
            return Err(Error::shape("collate", &shape, s.image.shape()));
        }
        img.extend(s.image.data().iter().map(|&v| T::from_f64_lossy(v as f64)));
        labels.extend_from_slice(&s.mask);
    }
    let mut full = vec![samples.len()];
    full.extend(shape);
    Ok((Tensor::new(full, img)?, labels))
}

/// Intensity of class `c` in each of the three channels.
fn class_color(c: usize, k: usize) -> [f32; 3] {
    let t = c as f32 / (k - 1).max(1) as f32;
    [
        0.1 + 0.8 * t,
        0.9 - 0.8 * t,
        0.25 + 0.5 * ((c * 3) % k) as f32 / k as f32,
    ]
}

pub const SYNTH_NOISE: f64 = 0.05;

/// `n` square-or-rectangular samples with `k - 1` filled ellipses of
/// distinct foreground classes on background 0. Later ellipses occlude
/// earlier ones.
pub fn synth_dataset(n: usize, h: usize, w: usize, k: usize, seed: u64) -> Result<Vec<Sample>> {
    if k < 2 {
        return Err(Error::Config(format!(
            "synthetic data needs at least 2 classes, got {k}"
        )));
    }
    if n == 0 || h < 4 || w < 4 {
        return Err(Error::Config(format!(
            "synthetic data needs n >= 1 and extents >= 4, got n={n}, {h}x{w}"
        )));
    }
    let mut r = rng::stream(seed, rng::SYNTH);
    let noise = Normal::new(0.0, SYNTH_NOISE).expect("positive sigma");
    let side = h.min(w) as f64;
    (0..n)
        .map(|_| {
            let mut mask = vec![0usize; h * w];
            let mut order: Vec<usize> = (1..k).collect();
            for i in (1..order.len()).rev() {
                order.swap(i, r.random_range(0..=i));
            }
            for &c in &order {
                let cy = r.random_range(0.25..0.75) * h as f64;
                let cx = r.random_range(0.25..0.75) * w as f64;
                let ry = r.random_range(side / 6.0..side / 3.0);
                let rx = r.random_range(side / 6.0..side / 3.0);
                let theta = r.random_range(0.0..std::f64::consts::PI);
                let (s, co) = theta.sin_cos();
                for i in 0..h {
                    for j in 0..w {
                        let (dy, dx) = (i as f64 + 0.5 - cy, j as f64 + 0.5 - cx);
                        let (u, v) = (dx * co + dy * s, -dx * s + dy * co);
                        if (u / rx).powi(2) + (v / ry).powi(2) <= 1.0 {
                            mask[i * w + j] = c;
                        }
                    }
                }
            }
            let mut img = vec![0f32; 3 * h * w];
            for ch in 0..3 {
                for p in 0..h * w {
                    let v = class_color(mask[p], k)[ch] as f64 + noise.sample(&mut r);
                    img[ch * h * w + p] = v.clamp(0.0, 1.0) as f32;
                }
            }
            Ok(Sample {
                image: Tensor::new(vec![3, h, w], img)?,
                mask,
                height: h,
                width: w,
            })
        })
        .collect()
}

pub const DATASET_META: &str = "dataset.cfg";

fn dataset_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Writes `images/`, `masks/` and `dataset.cfg` under `root`. Sample ids
/// are zero-padded indices.
pub fn write_dataset(root: &Path, samples: &[Sample], num_classes: usize) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        let id = format!("{i:05}");
        s.image.save(&root.join("images").join(format!("{id}.tdl")))?;
        let m = Tensor::<f32>::new(vec![s.height, s.width], s.mask.iter().map(|&l| l as f32).collect())?;
        m.save(&root.join("masks").join(format!("{id}.tdl")))?;
    }
    crate::io::write_atomic(
        &root.join(DATASET_META),
        format!("num_classes = {num_classes}\n").as_bytes(),
    )
}

/// Class count recorded in `dataset.cfg`, if present.
pub fn dataset_classes(root: &Path) -> Result<Option<usize>> {
    let path = root.join(DATASET_META);
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    for line in text.lines() {
        if let Some((k, v)) = line.split_once('=') {
            if k.trim() == "num_classes" {
                return v
                    .trim()
                    .parse()
                    .map(Some)
                    .map_err(|_| dataset_err(&path, format!("bad num_classes value {:?}", v.trim())));
            }
        }
    }
    Ok(None)
}

fn list_ids(dir: &Path) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Err(dataset_err(dir, "directory is missing"));
    }
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e == "tdl") {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Loads every `images/<id>.tdl` with its mask, validating labels against
/// `num_classes`.
pub fn read_dataset(root: &Path, num_classes: usize) -> Result<Vec<Sample>> {
    let (img_dir, mask_dir) = (root.join("images"), root.join("masks"));
    let ids = list_ids(&img_dir)?;
    if !mask_dir.is_dir() {
        return Err(dataset_err(&mask_dir, "directory is missing"));
    }
    if ids.is_empty() {
        return Err(dataset_err(&img_dir, "no .tdl images"));
    }
    ids.iter()
        .map(|id| {
            let ip: PathBuf = img_dir.join(format!("{id}.tdl"));
            let mp: PathBuf = mask_dir.join(format!("{id}.tdl"));
            if !mp.exists() {
                return Err(dataset_err(&mp, "mask for image is missing"));
            }
            let image = Tensor::<f32>::load(&ip).map_err(|e| dataset_err(&ip, e.to_string()))?;
            let m = Tensor::<f32>::load(&mp).map_err(|e| dataset_err(&mp, e.to_string()))?;
            let (s, ms) = (image.shape(), m.shape());
            if s.len() != 3 || ms.len() != 2 || s[1..] != ms[..] {
                return Err(dataset_err(
                    &mp,
                    format!("image {s:?} and mask {ms:?} extents disagree"),
                ));
            }
            let mut mask = Vec::with_capacity(m.len());
            for &v in m.data() {
                if v < 0.0 || v.fract() != 0.0 {
                    return Err(dataset_err(&mp, format!("non-integral label {v}")));
                }
                let l = v as usize;
                if l >= num_classes {
                    return Err(dataset_err(&mp, format!("label {l} outside 0..{num_classes}")));
                }
                mask.push(l);
            }
            Ok(Sample {
                height: ms[0],
                width: ms[1],
                image,
                mask,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_deterministic_and_in_range() {
        let a = synth_dataset(6, 32, 32, 4, 3).unwrap();
        let b = synth_dataset(6, 32, 32, 4, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_dataset(6, 32, 32, 4, 4).unwrap());
        for s in &a {
            s.validate(4).unwrap();
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn background_fraction_is_moderate() {
        for k in [2, 4] {
            let data = synth_dataset(100, 32, 32, k, 1).unwrap();
            let bg = data.iter().flat_map(|s| &s.mask).filter(|&&l| l == 0).count() as f64 / (100.0 * 1024.0);
            assert!(bg > 0.2 && bg < 0.95, "k={k}: {bg}");
            for s in &data {
                let f = s.mask.iter().filter(|&&l| l == 0).count() as f64 / 1024.0;
                assert!(f > 0.2 && f < 0.95, "k={k}: {f}");
            }
        }
    }

    #[test]
    fn synth_rejects_degenerate() {
        assert!(synth_dataset(1, 32, 32, 1, 0).is_err());
        assert!(synth_dataset(0, 32, 32, 2, 0).is_err());
        assert!(synth_dataset(1, 2, 32, 2, 0).is_err());
    }

    #[test]
    fn collate_stacks() {
        let d = synth_dataset(2, 8, 8, 2, 0).unwrap();
        let (x, l) = collate::<f64>(&[&d[0], &d[1]]).unwrap();
        assert_eq!(x.shape(), &[2, 3, 8, 8]);
        assert_eq!(&l[64..], d[1].mask.as_slice());
    }

    #[test]
    fn directory_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let data = synth_dataset(3, 16, 16, 3, 5).unwrap();
        write_dataset(dir.path(), &data, 3).unwrap();
        assert_eq!(dataset_classes(dir.path()).unwrap(), Some(3));
        assert_eq!(read_dataset(dir.path(), 3).unwrap(), data);
        assert!(matches!(read_dataset(dir.path(), 2), Err(Error::Dataset { .. })));

        std::fs::remove_dir_all(dir.path().join("masks")).unwrap();
        let err = read_dataset(dir.path(), 3).unwrap_err();
        assert!(err.to_string().contains("masks"), "{err}");
    }
}
