//! Pixel-level memory bank: collection, sparse random projection, greedy
//! k-center coreset selection and persistence.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Normalization;
use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::resc::ResCMode;
use crate::rsft;

/// Where a bank row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub image_index: usize,
    pub y: usize,
    pub x: usize,
}

/// Every position of every training feature map, rows ordered by
/// `(image_index, y, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    vectors: Array2<f32>,
    grid: (usize, usize),
}

impl MemoryBank {
    pub fn vectors(&self) -> ArrayView2<'_, f32> {
        self.vectors.view()
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn images(&self) -> usize {
        self.len() / (self.grid.0 * self.grid.1)
    }

    pub fn provenance(&self, row: usize) -> Provenance {
        provenance(self.grid, row)
    }
}

fn provenance(grid: (usize, usize), row: usize) -> Provenance {
    let per_image = grid.0 * grid.1;
    let within = row % per_image;
    Provenance {
        image_index: row / per_image,
        y: within / grid.1,
        x: within % grid.1,
    }
}

pub fn collect_features(maps: &[FeatureMap]) -> Result<MemoryBank> {
    let first = maps
        .first()
        .ok_or_else(|| Error::EmptyInput("no feature maps to bank".into()))?;
    let (h, w, c) = first.dim();
    if let Some((i, bad)) = maps.iter().enumerate().find(|(_, m)| m.dim() != (h, w, c)) {
        return Err(Error::Shape(format!(
            "feature map {i} has shape {:?}, expected {:?}",
            bad.dim(),
            (h, w, c)
        )));
    }
    let per_image = h * w;
    let mut vectors = Array2::<f32>::zeros((maps.len() * per_image, c));
    vectors
        .axis_chunks_iter_mut(Axis(0), per_image)
        .into_par_iter()
        .zip(maps.par_iter())
        .for_each(|(mut dst, m)| dst.assign(&m.rows()));
    Ok(MemoryBank { vectors, grid: (h, w) })
}

/// Johnson–Lindenstrauss target dimension `ceil(4 ln n / (ε²/2 − ε³/3))`.
pub fn jl_min_dim(n: usize, eps: f64) -> usize {
    let denom = eps * eps / 2.0 - eps * eps * eps / 3.0;
    (4.0 * (n as f64).ln() / denom).ceil() as usize
}

/// Sparse sign random projection `ℝ^c → ℝ^d` with entries `±s` at density
/// `1/√c` and `s = √(1 / (d·density))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    input_dim: usize,
    target_dim: usize,
    density: f64,
    scale: f32,
    seed: u64,
    eps: f64,
    /// Per input dimension: `(target column, positive?)`.
    entries: Vec<Vec<(u32, bool)>>,
    identity: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionInfo {
    pub eps: f64,
    pub target_dim: usize,
    pub density: f64,
    pub seed: u64,
}

impl Projection {
    /// Sparse sign matrix for an explicit target dimension.
    pub fn sparse(input_dim: usize, target_dim: usize, seed: u64) -> Self {
        let density = 1.0 / (input_dim as f64).sqrt();
        let scale = (1.0 / (target_dim as f64 * density)).sqrt() as f32;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = (0..input_dim)
            .map(|_| {
                let mut row = Vec::new();
                for j in 0..target_dim as u32 {
                    if rng.random_bool(density) {
                        row.push((j, rng.random_bool(0.5)));
                    }
                }
                row
            })
            .collect();
        Self {
            input_dim,
            target_dim,
            density,
            scale,
            seed,
            eps: 0.0,
            entries,
            identity: false,
        }
    }

    /// Selection in the original feature space.
    pub fn identity(dim: usize) -> Self {
        Self {
            input_dim: dim,
            target_dim: dim,
            density: 1.0,
            scale: 1.0,
            seed: 0,
            eps: 0.0,
            entries: Vec::new(),
            identity: true,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    pub fn density(&self) -> f64 {
        self.density
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn info(&self) -> ProjectionInfo {
        ProjectionInfo {
            eps: self.eps,
            target_dim: self.target_dim,
            density: self.density,
            seed: self.seed,
        }
    }

    pub fn nonzeros(&self) -> usize {
        self.entries.iter().map(Vec::len).sum()
    }

    /// Dense `c × d` view of the matrix.
    pub fn to_dense(&self) -> Array2<f32> {
        if self.identity {
            return Array2::eye(self.input_dim);
        }
        let mut m = Array2::zeros((self.input_dim, self.target_dim));
        for (i, row) in self.entries.iter().enumerate() {
            for &(j, pos) in row {
                m[(i, j as usize)] = if pos { self.scale } else { -self.scale };
            }
        }
        m
    }

    /// Project `rows` (`n × c`) to `n × d`.
    pub fn project(&self, rows: ArrayView2<'_, f32>) -> Array2<f32> {
        assert_eq!(rows.ncols(), self.input_dim, "projection input width");
        if self.identity {
            return rows.to_owned();
        }
        let mut out = Array2::<f32>::zeros((rows.nrows(), self.target_dim));
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(rows.axis_iter(Axis(0)).into_par_iter())
            .for_each(|(mut dst, src)| {
                for (x, entries) in src.iter().zip(&self.entries) {
                    if *x == 0.0 {
                        continue;
                    }
                    let v = x * self.scale;
                    for &(j, pos) in entries {
                        if pos {
                            dst[j as usize] += v;
                        } else {
                            dst[j as usize] -= v;
                        }
                    }
                }
            });
        out
    }
}

/// Fit the sparse projection for a bank with distortion `eps`; the target
/// dimension is the JL bound clamped to `[1, c]`.
pub fn fit_projection(bank: &MemoryBank, eps: f64, seed: u64) -> Result<Projection> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "projection eps must lie in (0, 1), got {eps}"
        )));
    }
    if bank.len() < 2 {
        return Err(Error::InvalidConfig("projection needs at least two bank rows".into()));
    }
    let d = jl_min_dim(bank.len(), eps).clamp(1, bank.channels());
    let mut p = Projection::sparse(bank.channels(), d, seed);
    p.eps = eps;
    Ok(p)
}

/// Starting row of the greedy selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CoresetStart {
    /// Row 0 of the sorted bank.
    #[default]
    First,
    /// A uniformly drawn row.
    Seeded(u64),
}

impl CoresetStart {
    fn row(&self, n: usize) -> usize {
        match *self {
            CoresetStart::First => 0,
            CoresetStart::Seeded(seed) => ChaCha8Rng::seed_from_u64(seed).random_range(0..n),
        }
    }
}

/// Squared distances from every row of `points` to `center`, written into
/// `out`. Each row's sum runs over dimensions in order; eight rows are
/// interleaved to hide add latency without reassociating any sum.
fn squared_distances(points: ArrayView2<'_, f32>, center: &[f32], out: &mut [f32]) {
    let d = points.ncols();
    let flat = points.as_slice().expect("standard layout");
    out.par_chunks_mut(1024).enumerate().for_each(|(chunk_ix, out)| {
        let base = chunk_ix * 1024;
        let mut r = 0;
        while r + 8 <= out.len() {
            let mut acc = [0f32; 8];
            for k in 0..d {
                let ck = center[k];
                for (lane, a) in acc.iter_mut().enumerate() {
                    let diff = flat[(base + r + lane) * d + k] - ck;
                    *a += diff * diff;
                }
            }
            out[r..r + 8].copy_from_slice(&acc);
            r += 8;
        }
        for (i, o) in out.iter_mut().enumerate().skip(r) {
            let row = &flat[(base + i) * d..(base + i + 1) * d];
            let mut acc = 0f32;
            for (a, b) in row.iter().zip(center) {
                let diff = a - b;
                acc += diff * diff;
            }
            *o = acc;
        }
    });
}

/// Result of a greedy k-center run.
#[derive(Debug, Clone, PartialEq)]
pub struct KCenter {
    /// Rows in the order they were picked.
    pub order: Vec<usize>,
    /// Largest distance from any row to its nearest selected row.
    pub covering_radius: f32,
}

/// Farthest-first traversal: start at `start`, then repeatedly add the
/// unselected row with the largest distance to the selected set (ties go to
/// the lowest index). Minimum distances are updated incrementally.
pub fn greedy_k_center(points: ArrayView2<'_, f32>, m: usize, start: usize) -> KCenter {
    let n = points.nrows();
    assert!(start < n && m >= 1 && m <= n, "invalid k-center request");
    let points = points.as_standard_layout();
    let mut min_dist = vec![f32::INFINITY; n];
    let mut scratch = vec![0f32; n];
    let mut selected = vec![false; n];
    let mut order = Vec::with_capacity(m);
    let mut current = start;
    loop {
        order.push(current);
        selected[current] = true;
        let center = points.row(current).to_vec();
        squared_distances(points.view(), &center, &mut scratch);
        min_dist
            .par_iter_mut()
            .zip(scratch.par_iter())
            .for_each(|(m, &d)| *m = m.min(d));
        if order.len() == m {
            break;
        }
        current = min_dist
            .par_iter()
            .enumerate()
            .filter(|(i, _)| !selected[*i])
            .map(|(i, &d)| (d, i))
            .reduce_with(|a, b| if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a })
            .expect("unselected rows remain")
            .1;
    }
    let radius_sq = min_dist.par_iter().copied().reduce(|| 0.0, f32::max);
    KCenter {
        order,
        covering_radius: radius_sq.sqrt(),
    }
}

/// Number of rows kept for a keep-fraction: `max(1, round(fraction · n))`.
pub fn coreset_size(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n)
}

/// Identifies the configuration a bank was built with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub backbone: String,
    pub side: usize,
    pub region_radius: usize,
    pub resc: ResCMode,
    pub normalization: Normalization,
}

impl std::fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "backbone={} side={} radius={} resc={:?}",
            &self.backbone[..self.backbone.len().min(12)],
            self.side,
            self.region_radius,
            self.resc
        )
    }
}

/// Metadata persisted in the `<name>.meta.json` sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankMeta {
    pub format_version: u32,
    pub rows: usize,
    pub channels: usize,
    pub source_rows: usize,
    pub grid: (usize, usize),
    pub coreset_fraction: f64,
    pub coreset_start: CoresetStart,
    pub projection: ProjectionInfo,
    pub covering_radius: f32,
    pub fingerprint: Option<Fingerprint>,
    /// Source bank rows kept, strictly increasing; with `grid` these give the
    /// provenance of every stored vector.
    pub selected_indices: Vec<usize>,
}

pub const BANK_FORMAT_VERSION: u32 = 1;

/// Coreset-compressed bank holding original-space vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedBank {
    vectors: Array2<f32>,
    meta: BankMeta,
}

impl CompressedBank {
    pub fn vectors(&self) -> ArrayView2<'_, f32> {
        self.vectors.view()
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn meta(&self) -> &BankMeta {
        &self.meta
    }

    pub fn selected_indices(&self) -> &[usize] {
        &self.meta.selected_indices
    }

    pub fn covering_radius(&self) -> f32 {
        self.meta.covering_radius
    }

    pub fn provenance(&self, row: usize) -> Provenance {
        provenance(self.meta.grid, self.meta.selected_indices[row])
    }

    pub fn with_fingerprint(mut self, fingerprint: Fingerprint) -> Self {
        self.meta.fingerprint = Some(fingerprint);
        self
    }

    /// A bank made directly from vectors, without provenance (tests, tools).
    pub fn from_vectors(vectors: Array2<f32>) -> Self {
        let n = vectors.nrows();
        let c = vectors.ncols();
        Self {
            meta: BankMeta {
                format_version: BANK_FORMAT_VERSION,
                rows: n,
                channels: c,
                source_rows: n,
                grid: (1, n.max(1)),
                coreset_fraction: 1.0,
                coreset_start: CoresetStart::First,
                projection: Projection::identity(c).info(),
                covering_radius: 0.0,
                fingerprint: None,
                selected_indices: (0..n).collect(),
            },
            vectors,
        }
    }
}

/// Greedy coreset over projected rows; stores the selected rows verbatim in
/// the original space, sorted by source index.
pub fn coreset_select(
    bank: &MemoryBank,
    proj: &Projection,
    fraction: f64,
    start: CoresetStart,
) -> Result<CompressedBank> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "coreset fraction must lie in (0, 1], got {fraction}"
        )));
    }
    if bank.is_empty() {
        return Err(Error::EmptyBank);
    }
    if proj.input_dim() != bank.channels() {
        return Err(Error::Shape(format!(
            "projection expects {} channels, bank has {}",
            proj.input_dim(),
            bank.channels()
        )));
    }
    let n = bank.len();
    let m = coreset_size(n, fraction);
    let (mut indices, radius) = if m == n {
        ((0..n).collect::<Vec<_>>(), 0.0)
    } else {
        let projected = proj.project(bank.vectors());
        let kc = greedy_k_center(projected.view(), m, start.row(n));
        (kc.order, kc.covering_radius)
    };
    indices.sort_unstable();
    let vectors = bank.vectors.select(Axis(0), &indices);
    Ok(CompressedBank {
        vectors,
        meta: BankMeta {
            format_version: BANK_FORMAT_VERSION,
            rows: m,
            channels: bank.channels(),
            source_rows: n,
            grid: bank.grid,
            coreset_fraction: fraction,
            coreset_start: start,
            projection: proj.info(),
            covering_radius: radius,
            fingerprint: None,
            selected_indices: indices,
        },
    })
}

/// `<dir>/<stem>.meta.json` for `<dir>/<stem>.rsft`.
pub fn meta_path(bank_path: &Path) -> PathBuf {
    bank_path.with_extension("meta.json")
}

pub fn save_bank(bank: &CompressedBank, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    rsft::save(
        path,
        &[bank.len(), bank.channels()],
        bank.vectors.as_slice().expect("standard layout"),
    )?;
    let meta = meta_path(path);
    let file = File::create(&meta).map_err(|e| Error::io(&meta, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &bank.meta)
        .map_err(|e| Error::Metadata(format!("{}: {e}", meta.display())))
}

/// Load a bank; when `expected` is given the stored fingerprint must match.
pub fn load_bank(path: impl AsRef<Path>, expected: Option<&Fingerprint>) -> Result<CompressedBank> {
    let path = path.as_ref();
    let meta_file = meta_path(path);
    let text = std::fs::read_to_string(&meta_file).map_err(|e| Error::io(&meta_file, e))?;
    let meta: BankMeta =
        serde_json::from_str(&text).map_err(|e| Error::VersionMismatch(format!("{}: {e}", meta_file.display())))?;
    if meta.format_version != BANK_FORMAT_VERSION {
        return Err(Error::VersionMismatch(format!(
            "bank format {} (supported: {BANK_FORMAT_VERSION})",
            meta.format_version
        )));
    }
    if let Some(want) = expected {
        match &meta.fingerprint {
            Some(found) if found == want => {}
            found => {
                return Err(Error::ConfigFingerprintMismatch {
                    expected: want.to_string(),
                    found: found.as_ref().map_or_else(|| "none".into(), ToString::to_string),
                })
            }
        }
    }
    let (shape, data) = rsft::load(path)?;
    if shape != [meta.rows, meta.channels] || meta.selected_indices.len() != meta.rows {
        return Err(Error::VersionMismatch(format!(
            "bank tensor {shape:?} disagrees with metadata ({} × {})",
            meta.rows, meta.channels
        )));
    }
    let vectors = Array2::from_shape_vec((meta.rows, meta.channels), data).expect("shape checked");
    Ok(CompressedBank { vectors, meta })
}

/// Largest distance from any bank row to its nearest selected row, measured
/// in the projection's space.
pub fn covering_radius(bank: &MemoryBank, proj: &Projection, selected: &[usize]) -> f32 {
    let projected = proj.project(bank.vectors());
    let centers = projected.select(Axis(0), selected);
    projected
        .axis_iter(Axis(0))
        .into_par_iter()
        .map(|row| {
            centers
                .axis_iter(Axis(0))
                .map(|c| row.iter().zip(c.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f32>())
                .fold(f32::INFINITY, f32::min)
        })
        .reduce(|| 0.0, f32::max)
        .sqrt()
}

/// First `rows` rows of a bank (used for bank-growth checks).
pub fn truncate_bank(bank: &CompressedBank, rows: usize) -> CompressedBank {
    CompressedBank::from_vectors(bank.vectors.slice(s![..rows, ..]).to_owned())
}
