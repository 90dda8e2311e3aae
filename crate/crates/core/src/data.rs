//! Synthetic labelled shapes and their on-disk form.
//!
//! Images are single-channel, values in `[-1, 1]`, background at `-1`. Each
//! sample draws its jitter from its own stream so generation is a pure
//! function of `(seed, index)`.

use std::path::Path;

use ndarray::{s, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::rng::{self, Purpose};
use crate::{Error, Result, Scalar};

pub const SHAPE_NAMES: [&str; 8] = [
    "disk",
    "square",
    "cross",
    "stripes",
    "ring",
    "triangle",
    "columns",
    "diagonal",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapesConfig {
    pub num: usize,
    pub num_classes: usize,
    pub size: usize,
    pub seed: u64,
    /// Maximum centre offset in pixels (scaled to a 16-pixel canvas).
    pub position_jitter: f64,
    /// Relative size jitter.
    pub size_jitter: f64,
    /// Foreground intensity range in `(0, 1]`; `1` maps to pixel value `+1`.
    pub intensity: (f64, f64),
}

impl Default for ShapesConfig {
    fn default() -> Self {
        ShapesConfig {
            num: 2048,
            num_classes: 4,
            size: 16,
            seed: 0,
            position_jitter: 1.5,
            size_jitter: 0.2,
            intensity: (0.6, 1.0),
        }
    }
}

impl ShapesConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 1 || self.num_classes > SHAPE_NAMES.len() {
            return Err(Error::out_of_range(
                "num_classes",
                self.num_classes as f64,
                format!("[1, {}]", SHAPE_NAMES.len()),
            ));
        }
        if self.num < self.num_classes {
            return Err(Error::Config(format!(
                "dataset of {} samples cannot hold {} classes",
                self.num, self.num_classes
            )));
        }
        if self.size < 4 {
            return Err(Error::out_of_range("size", self.size as f64, "[4, inf)"));
        }
        let (lo, hi) = self.intensity;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("intensity range ({lo}, {hi}) must lie in (0, 1]")));
        }
        Ok(())
    }
}

/// Labelled images `[num, C, H, W]` with labels in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Array4<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Array4<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.len_of(Axis(0)) != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                lhs: images.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::out_of_range("label", bad as f64, format!("[0, {num_classes})")));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gathers `indices` into a batch converted to `S`.
    pub fn batch<S: Scalar>(&self, indices: &[usize]) -> (Array4<S>, Vec<usize>) {
        let (_, c, h, w) = self.images.dim();
        let mut x = Array4::zeros((indices.len(), c, h, w));
        for (row, &i) in indices.iter().enumerate() {
            x.slice_mut(s![row, .., .., ..])
                .zip_mut_with(&self.images.slice(s![i, .., .., ..]), |o, &v| *o = S::of(v as f64));
        }
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Rows `[start, end)` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        Dataset {
            images: self.images.slice(s![start..end, .., .., ..]).to_owned(),
            labels: self.labels[start..end].to_vec(),
            num_classes: self.num_classes,
        }
    }

    /// Row-major flattening to `[num, C·H·W]` in `f64`.
    pub fn flat_pixels(&self) -> ndarray::Array2<f64> {
        let n = self.len();
        let d = self.images.len() / n.max(1);
        self.images
            .mapv(|v| v as f64)
            .into_shape_with_order((n, d))
            .expect("contiguous images")
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new().with_metadata(serde_json::json!({
            "kind": "dataset",
            "num_classes": self.num_classes,
        }));
        a.push("images", self.images.shape(), self.images.as_slice().expect("standard layout"));
        let labels: Vec<i64> = self.labels.iter().map(|&l| l as i64).collect();
        a.push_i64("labels", &[labels.len()], &labels);
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let images = a.get("images")?;
        if images.shape.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "dataset images",
                lhs: images.shape.clone(),
                rhs: vec![0, 1, 16, 16],
            });
        }
        let sh = &images.shape;
        let images = Array4::from_shape_vec((sh[0], sh[1], sh[2], sh[3]), images.to_vec::<f32>()?)
            .expect("numel checked by archive");
        let labels: Vec<usize> = a
            .get("labels")?
            .to_i64()?
            .into_iter()
            .map(|l| usize::try_from(l).map_err(|_| Error::out_of_range("label", l as f64, "[0, inf)")))
            .collect::<Result<_>>()?;
        let num_classes = a
            .metadata
            .get("num_classes")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Config("dataset archive lacks num_classes".into()))? as usize;
        Dataset::new(images, labels, num_classes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

/// `num` shapes with labels `i mod num_classes`, so class counts differ by at
/// most one.
pub fn generate_shapes(num: usize, num_classes: usize, seed: u64) -> Result<Dataset> {
    generate_shapes_with(&ShapesConfig {
        num,
        num_classes,
        seed,
        ..ShapesConfig::default()
    })
}

pub fn generate_shapes_with(cfg: &ShapesConfig) -> Result<Dataset> {
    cfg.validate()?;
    let n = cfg.size;
    let mut images = Array4::from_elem((cfg.num, 1, n, n), -1.0f32);
    let mut labels = Vec::with_capacity(cfg.num);
    for i in 0..cfg.num {
        let label = i % cfg.num_classes;
        let mut rng = rng::stream(cfg.seed, i as u64, Purpose::Dataset);
        let scale = n as f64 / 16.0;
        let jitter = cfg.position_jitter * scale;
        let cx = (n as f64 - 1.0) / 2.0 + rng.random_range(-jitter..=jitter);
        let cy = (n as f64 - 1.0) / 2.0 + rng.random_range(-jitter..=jitter);
        let size = scale * (1.0 + rng.random_range(-cfg.size_jitter..=cfg.size_jitter));
        let phase = rng.random_range(0.0..1.0);
        let intensity = rng.random_range(cfg.intensity.0..=cfg.intensity.1);
        let shape = Shape {
            label,
            cx,
            cy,
            size,
            phase,
        };
        let value = (2.0 * intensity - 1.0) as f32;
        let mut img = images.slice_mut(s![i, 0, .., ..]);
        for y in 0..n {
            for x in 0..n {
                if shape.covers(x as f64, y as f64) {
                    img[[y, x]] = value;
                }
            }
        }
        labels.push(label);
    }
    Dataset::new(images, labels, cfg.num_classes)
}

struct Shape {
    label: usize,
    cx: f64,
    cy: f64,
    /// Scale factor relative to the 16-pixel reference geometry.
    size: f64,
    phase: f64,
}

impl Shape {
    fn covers(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let s = self.size;
        match self.label {
            0 => dx * dx + dy * dy <= (4.5 * s).powi(2),
            1 => dx.abs() <= 4.0 * s && dy.abs() <= 4.0 * s,
            2 => (dx.abs() <= 1.0 * s && dy.abs() <= 5.5 * s) || (dy.abs() <= 1.0 * s && dx.abs() <= 5.5 * s),
            3 => ((y / (4.0 * s) + self.phase).fract()) < 0.5,
            4 => {
                let r2 = dx * dx + dy * dy;
                r2 <= (5.5 * s).powi(2) && r2 >= (3.5 * s).powi(2)
            }
            5 => dy <= 4.0 * s && dy >= -5.0 * s && dx.abs() <= (dy + 5.0 * s) * 0.6,
            6 => ((x / (4.0 * s) + self.phase).fract()) < 0.5,
            _ => (dx - dy).abs() <= 1.5 * s,
        }
    }
}
