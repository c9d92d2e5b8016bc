//! Synthetic classification datasets and their on-disk formats.
//!
//! Datasets regenerate deterministically from `(kind, n, noise, classes,
//! seed)`, so a checkpoint only needs to carry the generator description.
//! Vector data round-trips through CSV (`label,f0,f1,...`); rasterized grid
//! data through a raw little-endian f32 file with a JSON sidecar.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    /// Interleaved spiral arms, one per class.
    Spirals,
    /// Gaussian clusters on a circle.
    Blobs,
    /// Concentric annuli.
    Rings,
}

impl std::str::FromStr for DataKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<DataKind> {
        match s {
            "spirals" => Ok(DataKind::Spirals),
            "blobs" => Ok(DataKind::Blobs),
            "rings" => Ok(DataKind::Rings),
            other => Err(Error::InvalidParam(format!("unknown data kind `{other}`"))),
        }
    }
}

/// A labeled feature set. `feat_shape` is the per-sample shape: `[d]` for
/// vectors, `[c, g, g]` for grids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub feat_shape: Vec<usize>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_size(&self) -> usize {
        self.feat_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Contract("dataset is empty".into()));
        }
        if self.features.len() != self.len() * self.sample_size() {
            return Err(Error::Contract("dataset feature buffer has wrong length".into()));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::Index(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Batch tensor `[B, ...feat_shape]` plus labels for the given rows.
    pub fn batch(&self, rows: &[usize]) -> (Tensor, Vec<usize>) {
        let dim = self.sample_size();
        let mut data = Vec::with_capacity(rows.len() * dim);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            data.extend_from_slice(&self.features[r * dim..(r + 1) * dim]);
            labels.push(self.labels[r]);
        }
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(&self.feat_shape);
        (Tensor::constant(shape, data), labels)
    }

    pub fn to_csv(&self) -> String {
        let dim = self.sample_size();
        let mut out = String::from("label");
        for i in 0..dim {
            out.push_str(&format!(",f{i}"));
        }
        out.push('\n');
        for (r, &label) in self.labels.iter().enumerate() {
            out.push_str(&label.to_string());
            for v in &self.features[r * dim..(r + 1) * dim] {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_csv())?)
    }

    pub fn from_csv(text: &str, num_classes: usize, split: &str) -> Result<Dataset> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Contract("empty dataset file".into()))?;
        if !header.starts_with("label,f0") {
            return Err(Error::Contract(format!("unexpected dataset header: {header}")));
        }
        let dim = header.split(',').count() - 1;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let label: usize = fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| Error::Contract(format!("dataset line {}: bad label", i + 2)))?;
            labels.push(label);
            let mut count = 0;
            for f in fields {
                let v: f64 = f
                    .parse()
                    .map_err(|_| Error::Contract(format!("dataset line {}: bad value", i + 2)))?;
                features.push(v);
                count += 1;
            }
            if count != dim {
                return Err(Error::Contract(format!(
                    "dataset line {}: {count} features, expected {dim}",
                    i + 2
                )));
            }
        }
        let ds = Dataset {
            features,
            feat_shape: vec![dim],
            labels,
            num_classes,
            split: split.to_string(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn load_csv(path: &Path, num_classes: usize, split: &str) -> Result<Dataset> {
        Dataset::from_csv(&fs::read_to_string(path)?, num_classes, split)
    }

    /// Raw little-endian f32 payload plus a JSON sidecar at `<path>.json`.
    pub fn save_grid(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.features.len() * 4);
        for &v in &self.features {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        fs::write(path, bytes)?;
        let sidecar = GridSidecar {
            feat_shape: self.feat_shape.clone(),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            split: self.split.clone(),
        };
        let json = serde_json::to_string_pretty(&sidecar)?;
        fs::write(sidecar_path(path), json)?;
        Ok(())
    }

    pub fn load_grid(path: &Path) -> Result<Dataset> {
        let sidecar: GridSidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
        let bytes = fs::read(path)?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Contract("grid payload is not a whole number of f32".into()));
        }
        let features: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let ds = Dataset {
            features,
            feat_shape: sidecar.feat_shape,
            labels: sidecar.labels,
            num_classes: sidecar.num_classes,
            split: sidecar.split,
        };
        ds.validate()?;
        Ok(ds)
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".json");
    os.into()
}

#[derive(Serialize, Deserialize)]
struct GridSidecar {
    feat_shape: Vec<usize>,
    labels: Vec<usize>,
    num_classes: usize,
    split: String,
}

/// Seeded synthetic classification set with classes balanced to within one
/// sample of `n / classes`.
pub fn gen_data(kind: DataKind, n: usize, noise: f64, classes: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidParam("dataset size must be positive".into()));
    }
    if classes < 2 {
        return Err(Error::InvalidParam("need at least two classes".into()));
    }
    if noise < 0.0 {
        return Err(Error::InvalidParam("noise must be nonnegative".into()));
    }
    let mut rng = rng::stream(seed, "gen-data", kind as u64);
    let mut features = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    let base = n / classes;
    for c in 0..classes {
        let count = base + usize::from(c < n % classes);
        for i in 0..count {
            let frac = (i as f64 + 0.5) / count as f64;
            let (x, y) = match kind {
                DataKind::Spirals => {
                    // Arms offset by 2 pi / classes, sweeping ~1.25 turns.
                    let theta = c as f64 * std::f64::consts::TAU / classes as f64
                        + frac * 2.5 * std::f64::consts::PI;
                    let radius = 0.15 + 0.85 * frac;
                    (
                        radius * theta.cos() + noise * rng::normal(&mut rng),
                        radius * theta.sin() + noise * rng::normal(&mut rng),
                    )
                }
                DataKind::Blobs => {
                    let theta = c as f64 * std::f64::consts::TAU / classes as f64;
                    (
                        2.0 * theta.cos() + noise * rng::normal(&mut rng),
                        2.0 * theta.sin() + noise * rng::normal(&mut rng),
                    )
                }
                DataKind::Rings => {
                    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                    let radius = (c + 1) as f64 / classes as f64 + noise * rng::normal(&mut rng);
                    (radius * theta.cos(), radius * theta.sin())
                }
            };
            features.push(x);
            features.push(y);
            labels.push(c);
        }
    }
    Ok(Dataset {
        features,
        feat_shape: vec![2],
        labels,
        num_classes: classes,
        split: "train".to_string(),
    })
}

/// Render 2-feature samples as `g x g` single-channel grids: each point
/// becomes a Gaussian bump at its position, for convolutional stems.
pub fn rasterize(data: &Dataset, g: usize) -> Result<Dataset> {
    if data.feat_shape != [2] {
        return Err(Error::Contract(
            "rasterize expects 2-feature vector data".into(),
        ));
    }
    if g < 2 {
        return Err(Error::InvalidParam("grid must be at least 2x2".into()));
    }
    let extent = data
        .features
        .iter()
        .fold(0.0f64, |m, &v| m.max(v.abs()))
        .max(1e-9);
    let sigma = 1.5;
    let mut features = Vec::with_capacity(data.len() * g * g);
    for r in 0..data.len() {
        let x = data.features[r * 2];
        let y = data.features[r * 2 + 1];
        // Map [-extent, extent] onto cell coordinates.
        let cx = (x / extent + 1.0) / 2.0 * (g - 1) as f64;
        let cy = (y / extent + 1.0) / 2.0 * (g - 1) as f64;
        for gy in 0..g {
            for gx in 0..g {
                let d2 = (gx as f64 - cx).powi(2) + (gy as f64 - cy).powi(2);
                features.push((-d2 / (2.0 * sigma * sigma)).exp());
            }
        }
    }
    Ok(Dataset {
        features,
        feat_shape: vec![1, g, g],
        labels: data.labels.clone(),
        num_classes: data.num_classes,
        split: data.split.clone(),
    })
}
