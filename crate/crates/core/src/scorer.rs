//! Nearest-neighbor anomaly scoring against a compressed bank.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use ndarray::{s, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::interp;
use crate::memory_bank::CompressedBank;
use crate::rsft;

const QUERY_BLOCK: usize = 256;
const BANK_BLOCK: usize = 2048;

/// Per-position nearest-bank distance on the feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMap {
    data: Array2<f32>,
}

impl DistanceMap {
    pub fn new(data: Array2<f32>) -> Result<Self> {
        if data.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Shape("distances must be finite and nonnegative".into()));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }
}

/// Pixel-level anomaly scores with the image-level score (their maximum).
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    data: Array2<f32>,
    image_score: f32,
}

impl AnomalyMap {
    pub fn new(data: Array2<f32>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyInput("anomaly map has no pixels".into()));
        }
        if data.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Shape("anomaly scores must be finite and nonnegative".into()));
        }
        let image_score = data.fold(0f32, |m, &v| m.max(v));
        Ok(Self { data, image_score })
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn image_score(&self) -> f32 {
        self.image_score
    }

    pub fn dim(&self) -> (usize, usize) {
        self.data.dim()
    }
}

/// Bank vectors with cached squared norms for repeated queries.
pub struct BankIndex<'a> {
    vectors: ArrayView2<'a, f32>,
    norms: Vec<f32>,
}

impl<'a> BankIndex<'a> {
    pub fn new(bank: &'a CompressedBank) -> Result<Self> {
        Self::from_vectors(bank.vectors())
    }

    pub fn from_vectors(vectors: ArrayView2<'a, f32>) -> Result<Self> {
        if vectors.nrows() == 0 {
            return Err(Error::EmptyBank);
        }
        let norms = vectors.axis_iter(Axis(0)).map(|r| r.dot(&r)).collect();
        Ok(Self { vectors, norms })
    }

    /// Exact nearest distance for each query row.
    ///
    /// Candidates come from `‖q‖² + ‖b‖² − 2q·b` over blocked matrix products
    /// (negative round-off clamped to zero); the winning row's distance is
    /// then recomputed directly so exact matches report 0.
    pub fn nearest(&self, queries: ArrayView2<'_, f32>) -> Result<Vec<f32>> {
        if queries.ncols() != self.vectors.ncols() {
            return Err(Error::Shape(format!(
                "features have {} channels, bank has {}",
                queries.ncols(),
                self.vectors.ncols()
            )));
        }
        let n = queries.nrows();
        let starts: Vec<usize> = (0..n).step_by(QUERY_BLOCK).collect();
        let parts: Vec<Vec<f32>> = starts
            .par_iter()
            .map(|&q0| {
                let q = queries.slice(s![q0..(q0 + QUERY_BLOCK).min(n), ..]);
                let q_norms: Vec<f32> = q.axis_iter(Axis(0)).map(|r| r.dot(&r)).collect();
                let mut best = vec![f32::INFINITY; q.nrows()];
                let mut best_row = vec![0usize; q.nrows()];
                for b0 in (0..self.vectors.nrows()).step_by(BANK_BLOCK) {
                    let b1 = (b0 + BANK_BLOCK).min(self.vectors.nrows());
                    let dots = q.dot(&self.vectors.slice(s![b0..b1, ..]).t());
                    for (i, row) in dots.axis_iter(Axis(0)).enumerate() {
                        for (j, &g) in row.iter().enumerate() {
                            let d2 = (q_norms[i] + self.norms[b0 + j] - 2.0 * g).max(0.0);
                            if d2 < best[i] {
                                best[i] = d2;
                                best_row[i] = b0 + j;
                            }
                        }
                    }
                }
                q.axis_iter(Axis(0))
                    .zip(&best_row)
                    .map(|(qr, &b)| {
                        qr.iter()
                            .zip(self.vectors.row(b).iter())
                            .map(|(x, y)| (x - y) * (x - y))
                            .sum::<f32>()
                            .sqrt()
                    })
                    .collect()
            })
            .collect();
        Ok(parts.concat())
    }

    pub fn distance_map(&self, features: &FeatureMap) -> Result<DistanceMap> {
        let d = self.nearest(features.rows())?;
        DistanceMap::new(
            Array2::from_shape_vec((features.height(), features.width()), d).expect("one distance per position"),
        )
    }
}

/// Minimum Euclidean distance from every position of `features` to the bank.
pub fn nearest_distance(bank: &CompressedBank, features: &FeatureMap) -> Result<DistanceMap> {
    BankIndex::new(bank)?.distance_map(features)
}

/// Bilinear upsampling to `height × width`, then optional Gaussian smoothing.
pub fn upsample_scores(d: &DistanceMap, height: usize, width: usize, smooth_sigma: f32) -> Result<AnomalyMap> {
    let (h, w) = d.data.dim();
    if height < h || width < w {
        return Err(Error::InvalidConfig(format!(
            "cannot upsample a {h}×{w} distance map to {height}×{width}"
        )));
    }
    if !(smooth_sigma >= 0.0 && smooth_sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "smoothing sigma must be ≥ 0, got {smooth_sigma}"
        )));
    }
    let up = interp::resize_bilinear_2d(d.data.view(), height, width);
    let up = interp::gaussian_blur(up.view(), smooth_sigma);
    AnomalyMap::new(up)
}

pub fn image_score(map: &AnomalyMap) -> f32 {
    map.image_score()
}

/// Sidecar written next to an exported heatmap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapMeta {
    pub raw_min: f32,
    pub raw_max: f32,
    pub image_score: f32,
    pub height: usize,
    pub width: usize,
}

/// Paths of the three files written for one heatmap.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapFiles {
    pub png: PathBuf,
    pub json: PathBuf,
    pub raw: PathBuf,
}

/// Write `<stem>.png` (16-bit min–max scaled), `<stem>.json` and the raw
/// scores as `<stem>.rsft`.
pub fn export_heatmap(map: &AnomalyMap, dir: impl AsRef<Path>, stem: &str) -> Result<HeatmapFiles> {
    let dir = dir.as_ref();
    let (h, w) = map.dim();
    let (lo, hi) = map.data.fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let range = hi - lo;
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = map.data[(y as usize, x as usize)];
        let scaled = if range > 0.0 { (v - lo) / range } else { 0.0 };
        Luma([(scaled * 65535.0).round() as u16])
    });
    let files = HeatmapFiles {
        png: dir.join(format!("{stem}.png")),
        json: dir.join(format!("{stem}.json")),
        raw: dir.join(format!("{stem}.rsft")),
    };
    img.save(&files.png).map_err(|e| Error::Decode {
        path: files.png.clone(),
        message: e.to_string(),
    })?;
    let meta = HeatmapMeta {
        raw_min: lo,
        raw_max: hi,
        image_score: map.image_score,
        height: h,
        width: w,
    };
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Metadata(e.to_string()))?;
    std::fs::write(&files.json, text).map_err(|e| Error::io(&files.json, e))?;
    rsft::save(&files.raw, &[h, w], map.data.as_slice().expect("standard layout"))?;
    Ok(files)
}
