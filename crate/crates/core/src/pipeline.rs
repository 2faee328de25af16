//! End-to-end orchestration: configuration, feature caching, bank
//! construction, scoring, evaluation and ablation grids.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{extract_features, fuse_levels, Backbone, ModelSource};
use crate::dataset::{
    load_image, load_union_mask, preprocess, BinaryMask, DatasetIndex, Entry, Label, Layout, Normalization, Split,
    MIN_SIDE,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_image, evaluate_pixel, AblationRow, EvalReport, PixelPooling, ThresholdPolicy};
use crate::feature::{FeatureMap, Level};
use crate::memory_bank::{collect_features, coreset_select, fit_projection, CompressedBank, CoresetStart, Fingerprint};
use crate::resc::{self, ResCConfig, ResCMode, DEFAULT_BLOCK_ROWS, DEFAULT_RADIUS};
use crate::rsft;
use crate::scorer::{export_heatmap, upsample_scores, AnomalyMap, BankIndex};

/// Fully resolved pipeline settings. Every field has a default, so partial
/// TOML/JSON files deserialize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// ONNX file path, or `builtin:color-pyramid`.
    pub model: Option<String>,
    pub data_root: Option<PathBuf>,
    pub layout: Layout,
    pub side: usize,
    pub normalization: Normalization,
    pub region_radius: usize,
    pub attention_block_rows: usize,
    pub resc: ResCMode,
    pub jl_eps: f64,
    pub projection_seed: u64,
    pub coreset_fraction: f64,
    /// `None` starts the greedy selection at row 0.
    pub coreset_seed: Option<u64>,
    pub train_subset: f64,
    pub smooth_sigma: f32,
    pub pixel_pooling: PixelPooling,
    /// Include normal test images (all-zero masks) in pixel metrics.
    pub pixel_include_normals: bool,
    /// Fixed decision threshold; `None` picks the best balanced accuracy.
    pub threshold: Option<f64>,
    pub cache_dir: Option<PathBuf>,
    pub bank: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model: None,
            data_root: None,
            layout: Layout::Generic,
            side: 784,
            normalization: Normalization::IMAGENET,
            region_radius: DEFAULT_RADIUS,
            attention_block_rows: DEFAULT_BLOCK_ROWS,
            resc: ResCMode::Full,
            jl_eps: 0.90,
            projection_seed: 0,
            coreset_fraction: 0.10,
            coreset_seed: None,
            train_subset: 1.0,
            smooth_sigma: 0.0,
            pixel_pooling: PixelPooling::Global,
            pixel_include_normals: true,
            threshold: None,
            cache_dir: None,
            bank: None,
            out_dir: None,
            workers: 0,
        }
    }
}

fn in_unit(v: f64) -> bool {
    v > 0.0 && v <= 1.0
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.side < MIN_SIDE {
            return bad(format!("side must be ≥ {MIN_SIDE}, got {}", self.side));
        }
        if !in_unit(self.coreset_fraction) {
            return bad(format!(
                "coreset_fraction must lie in (0, 1], got {}",
                self.coreset_fraction
            ));
        }
        if !in_unit(self.train_subset) {
            return bad(format!("train_subset must lie in (0, 1], got {}", self.train_subset));
        }
        if !(self.jl_eps > 0.0 && self.jl_eps < 1.5) {
            return bad(format!("jl_eps must lie in (0, 1.5), got {}", self.jl_eps));
        }
        if self.attention_block_rows == 0 {
            return bad("attention_block_rows must be ≥ 1".into());
        }
        if !(self.smooth_sigma >= 0.0 && self.smooth_sigma.is_finite()) {
            return bad(format!("smooth_sigma must be ≥ 0, got {}", self.smooth_sigma));
        }
        if self.normalization.std.iter().any(|&s| s <= 0.0) {
            return bad("normalization std must be positive".into());
        }
        Ok(())
    }

    pub fn model_source(&self) -> Result<ModelSource> {
        self.model.as_deref().map(ModelSource::parse).ok_or_else(|| {
            Error::InvalidConfig("no model configured (an .onnx path or `builtin:color-pyramid`)".into())
        })
    }

    pub fn resc_config(&self) -> ResCConfig {
        ResCConfig {
            radius: self.region_radius,
            block_rows: self.attention_block_rows,
            mode: self.resc,
        }
    }

    pub fn coreset_start(&self) -> CoresetStart {
        self.coreset_seed.map_or(CoresetStart::First, CoresetStart::Seeded)
    }

    pub fn threshold_policy(&self) -> ThresholdPolicy {
        self.threshold
            .map_or(ThresholdPolicy::MaxBalanced, ThresholdPolicy::Fixed)
    }

    pub fn data_root(&self) -> Result<&Path> {
        self.data_root
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("no data root configured".into()))
    }
}

/// Summary printed after a bank build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildStats {
    pub train_images: usize,
    pub source_rows: usize,
    pub rows: usize,
    pub channels: usize,
    pub projected_dim: usize,
    pub covering_radius: f32,
    pub grid: (usize, usize),
}

/// Outcome of scoring one image; `error` is set when it was skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub image: PathBuf,
    pub image_score: Option<f32>,
    pub heatmap: Option<PathBuf>,
    pub raw: Option<PathBuf>,
    pub error: Option<String>,
}

/// Errors that mean "this one file is unusable" rather than "the run is
/// misconfigured".
fn is_per_image(e: &Error) -> bool {
    matches!(e, Error::Io { .. } | Error::Decode { .. } | Error::UnsupportedFormat(_))
}

/// Backbone plus configuration.
pub struct Pipeline {
    cfg: PipelineConfig,
    backbone: Arc<dyn Backbone>,
    pool: rayon::ThreadPool,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("cfg", &self.cfg)
            .field("backbone", &self.backbone.fingerprint())
            .finish()
    }
}

impl Pipeline {
    /// Validate the configuration and open the configured model.
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let backbone = cfg.model_source()?.open(cfg.side, None)?;
        Self::with_backbone(cfg, backbone)
    }

    pub fn with_backbone(cfg: PipelineConfig, backbone: Arc<dyn Backbone>) -> Result<Self> {
        cfg.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
        Ok(Self { cfg, backbone, pool })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn backbone(&self) -> &Arc<dyn Backbone> {
        &self.backbone
    }

    /// Same backbone, different settings (ablation rows).
    pub fn reconfigured(&self, cfg: PipelineConfig) -> Result<Self> {
        Self::with_backbone(cfg, Arc::clone(&self.backbone))
    }

    pub fn fingerprint(&self) -> Fingerprint {
        Fingerprint {
            backbone: self.backbone.fingerprint().to_string(),
            side: self.cfg.side,
            region_radius: self.cfg.region_radius,
            resc: self.cfg.resc,
            normalization: self.cfg.normalization,
        }
    }

    fn cache_key(&self, image_bytes: &[u8]) -> String {
        let mut h = Sha256::new();
        h.update(image_bytes);
        h.update(self.backbone.fingerprint().as_bytes());
        h.update((self.cfg.side as u64).to_le_bytes());
        for v in self.cfg.normalization.mean.iter().chain(&self.cfg.normalization.std) {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Fused multi-level features (before ReSC), served from the disk cache
    /// when one is configured.
    pub fn fused_features(&self, image: &Path) -> Result<FeatureMap> {
        let bytes = std::fs::read(image).map_err(|e| Error::io(image, e))?;
        let cached = self
            .cfg
            .cache_dir
            .as_ref()
            .map(|d| d.join(format!("{}.rsft", self.cache_key(&bytes))));
        if let Some(path) = &cached {
            if path.is_file() {
                match rsft::load_array(path) {
                    Ok(a) => {
                        if let Ok(a3) = a.into_dimensionality() {
                            return FeatureMap::new(a3, Level::Fused);
                        }
                    }
                    Err(e) => log::warn!("ignoring unreadable cache entry {}: {e}", path.display()),
                }
            }
        }
        let img = load_image(image)?;
        let x = preprocess(&img, self.cfg.side, &self.cfg.normalization)?;
        let (f2, f3) = extract_features(self.backbone.as_ref(), &x)?;
        let fused = fuse_levels(&f2, &f3)?;
        if let Some(path) = &cached {
            if let Err(e) = write_cache(path, &fused) {
                log::warn!("could not write feature cache {}: {e}", path.display());
            }
        }
        Ok(fused)
    }

    /// ReSC-combined features for one image.
    pub fn features(&self, image: &Path) -> Result<FeatureMap> {
        resc::apply(&self.fused_features(image)?, &self.cfg.resc_config())
    }

    /// Training entries after applying `train_subset` (a prefix of the
    /// sorted manifest).
    pub fn train_entries<'a>(&self, index: &'a DatasetIndex) -> Vec<&'a Entry> {
        let train: Vec<&Entry> = index.split(Split::Train).collect();
        let keep = ((self.cfg.train_subset * train.len() as f64).round() as usize).clamp(1, train.len().max(1));
        train.into_iter().take(keep).collect()
    }

    pub fn build_bank(&self, index: &DatasetIndex) -> Result<(CompressedBank, BuildStats)> {
        let train = self.train_entries(index);
        if train.is_empty() {
            return Err(Error::EmptySplit("train".into()));
        }
        log::info!("extracting features from {} training images", train.len());
        let maps = self.pool.install(|| {
            train
                .par_iter()
                .map(|e| self.features(&e.image_path))
                .collect::<Result<Vec<_>>>()
        })?;
        let bank = collect_features(&maps)?;
        drop(maps);
        let proj = fit_projection(&bank, self.cfg.jl_eps, self.cfg.projection_seed)?;
        log::info!(
            "memory bank {} × {}, projecting to {} dims for coreset selection",
            bank.len(),
            bank.channels(),
            proj.target_dim()
        );
        let compressed = self
            .pool
            .install(|| coreset_select(&bank, &proj, self.cfg.coreset_fraction, self.cfg.coreset_start()))?
            .with_fingerprint(self.fingerprint());
        let stats = BuildStats {
            train_images: train.len(),
            source_rows: bank.len(),
            rows: compressed.len(),
            channels: compressed.channels(),
            projected_dim: proj.target_dim(),
            covering_radius: compressed.covering_radius(),
            grid: bank.grid(),
        };
        Ok((compressed, stats))
    }

    /// Anomaly map at `side × side` for one image.
    pub fn score_image(&self, bank: &BankIndex<'_>, image: &Path) -> Result<AnomalyMap> {
        let features = self.features(image)?;
        let d = bank.distance_map(&features)?;
        upsample_scores(&d, self.cfg.side, self.cfg.side, self.cfg.smooth_sigma)
    }

    fn score_all(&self, bank: &CompressedBank, images: &[PathBuf]) -> Result<Vec<Result<AnomalyMap>>> {
        let index = BankIndex::new(bank)?;
        let out: Vec<Result<AnomalyMap>> = self.pool.install(|| {
            images
                .par_iter()
                .map(|p| self.score_image(&index, p))
                .collect::<Vec<_>>()
        });
        let mut out = out;
        if let Some(pos) = out.iter().position(|r| matches!(r, Err(e) if !is_per_image(e))) {
            out.swap_remove(pos)?;
        }
        Ok(out)
    }

    /// Score images and write heatmaps into `out_dir`. Unreadable images are
    /// skipped and reported in their record.
    pub fn score_images(&self, bank: &CompressedBank, images: &[PathBuf], out_dir: &Path) -> Result<Vec<ScoreRecord>> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let results = self.score_all(bank, images)?;
        let mut used = HashSet::new();
        let mut records = Vec::with_capacity(images.len());
        for (path, result) in images.iter().zip(results) {
            let base = path
                .file_stem()
                .map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
            let mut stem = base.clone();
            let mut k = 1;
            while !used.insert(stem.clone()) {
                stem = format!("{base}-{k}");
                k += 1;
            }
            records.push(match result {
                Ok(map) => {
                    let files = export_heatmap(&map, out_dir, &stem)?;
                    ScoreRecord {
                        image: path.clone(),
                        image_score: Some(map.image_score()),
                        heatmap: Some(files.png),
                        raw: Some(files.raw),
                        error: None,
                    }
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    ScoreRecord {
                        image: path.clone(),
                        image_score: None,
                        heatmap: None,
                        raw: None,
                        error: Some(e.to_string()),
                    }
                }
            });
        }
        Ok(records)
    }

    /// Score the test split and compute pixel- and image-level metrics.
    pub fn evaluate(&self, bank: &CompressedBank, index: &DatasetIndex) -> Result<EvalReport> {
        let test: Vec<&Entry> = index.split(Split::Test).collect();
        let paths: Vec<PathBuf> = test.iter().map(|e| e.image_path.clone()).collect();
        let results = self.score_all(bank, &paths)?;
        let side = self.cfg.side;

        let mut skipped = Vec::new();
        let mut image_scores = Vec::new();
        let mut image_labels = Vec::new();
        let mut maps = Vec::new();
        let mut masks: Vec<BinaryMask> = Vec::new();
        for (entry, result) in test.iter().zip(results) {
            let map = match result {
                Ok(m) => m,
                Err(e) => {
                    log::warn!("skipping {}: {e}", entry.image_path.display());
                    skipped.push(entry.image_path.display().to_string());
                    continue;
                }
            };
            let abnormal = entry.label == Label::Abnormal;
            image_scores.push(map.image_score());
            image_labels.push(u8::from(abnormal));
            if abnormal && !entry.mask_paths.is_empty() {
                let paths: Vec<&Path> = entry.mask_paths.iter().map(|m| m.path.as_path()).collect();
                masks.push(load_union_mask(&paths, side)?);
                maps.push(map);
            } else if !abnormal && self.cfg.pixel_include_normals {
                masks.push(BinaryMask::zeros(side, side));
                maps.push(map);
            }
        }
        let policy = self.cfg.threshold_policy();
        let image = evaluate_image(&image_scores, &image_labels, policy)?;
        let pixel = match evaluate_pixel(&maps, &masks, self.cfg.pixel_pooling, policy) {
            Ok(p) => Some(p),
            Err(Error::DegenerateLabels) => {
                log::warn!("pixel metrics unavailable: masks contain a single class");
                None
            }
            Err(e) => return Err(e),
        };
        Ok(EvalReport {
            pixel,
            image,
            test_images: image_scores.len(),
            skipped,
            config: self.config_echo(),
        })
    }

    /// Resolved configuration plus bank fingerprint, embedded in reports.
    pub fn config_echo(&self) -> serde_json::Value {
        serde_json::json!({
            "pipeline": self.cfg,
            "fingerprint": self.fingerprint(),
            "backbone": self.backbone.fingerprint(),
        })
    }

    /// Build a bank and evaluate it.
    pub fn run(&self, index: &DatasetIndex) -> Result<(CompressedBank, BuildStats, EvalReport)> {
        let (bank, stats) = self.build_bank(index)?;
        let report = self.evaluate(&bank, index)?;
        Ok((bank, stats, report))
    }
}

fn write_cache(path: &Path, fused: &FeatureMap) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    let (h, w, c) = (fused.height(), fused.width(), fused.channels());
    rsft::save(&tmp, &[h, w, c], fused.as_slice())?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// One configuration of an ablation grid, expressed as overrides of a base
/// configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationVariant {
    pub name: String,
    #[serde(default)]
    pub resc: Option<ResCMode>,
    #[serde(default)]
    pub train_subset: Option<f64>,
    #[serde(default)]
    pub region_radius: Option<usize>,
    #[serde(default)]
    pub coreset_fraction: Option<f64>,
}

impl AblationVariant {
    pub fn mode(mode: ResCMode) -> Self {
        Self {
            name: mode.label().to_string(),
            resc: Some(mode),
            train_subset: None,
            region_radius: None,
            coreset_fraction: None,
        }
    }

    pub fn subset(fraction: f64) -> Self {
        Self {
            name: format!("{:.0}% train", fraction * 100.0),
            resc: Some(ResCMode::Full),
            train_subset: Some(fraction),
            region_radius: None,
            coreset_fraction: None,
        }
    }

    pub fn apply(&self, base: &PipelineConfig) -> PipelineConfig {
        let mut cfg = base.clone();
        if let Some(m) = self.resc {
            cfg.resc = m;
        }
        if let Some(t) = self.train_subset {
            cfg.train_subset = t;
        }
        if let Some(r) = self.region_radius {
            cfg.region_radius = r;
        }
        if let Some(f) = self.coreset_fraction {
            cfg.coreset_fraction = f;
        }
        cfg
    }
}

/// The data-efficiency and module ablation grid: training subsets of 10%,
/// 40% and 70%, then full data without ReSC, without each module, and with
/// ReSC.
pub fn default_grid() -> Vec<AblationVariant> {
    let mut grid: Vec<AblationVariant> = [0.1, 0.4, 0.7].into_iter().map(AblationVariant::subset).collect();
    grid.extend(
        [
            ResCMode::Off,
            ResCMode::SpatialOnly,
            ResCMode::RegionOnly,
            ResCMode::Full,
        ]
        .into_iter()
        .map(AblationVariant::mode),
    );
    grid
}

/// Build and evaluate one bank per variant, in grid order.
pub fn run_ablation(base: &Pipeline, index: &DatasetIndex, grid: &[AblationVariant]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(grid.len());
    for v in grid {
        log::info!("ablation: {}", v.name);
        let p = base.reconfigured(v.apply(base.config()))?;
        let (_, _, report) = p.run(index)?;
        rows.push(AblationRow {
            name: v.name.clone(),
            report,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ColorPyramid;
    use crate::synth::{generate, SynthConfig};

    fn tiny_dataset() -> (tempfile::TempDir, DatasetIndex) {
        let dir = tempfile::tempdir().unwrap();
        generate(
            dir.path(),
            &SynthConfig {
                train_normal: 4,
                test_normal: 1,
                test_abnormal: 2,
                size: 96,
                seed: 3,
            },
        )
        .unwrap();
        let index = crate::dataset::index_dataset(dir.path(), Layout::Generic).unwrap();
        (dir, index)
    }

    fn config(cache: Option<PathBuf>) -> PipelineConfig {
        PipelineConfig {
            model: Some(ColorPyramid::NAME.into()),
            side: 64,
            region_radius: 2,
            coreset_fraction: 0.5,
            cache_dir: cache,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn defaults_and_validation() {
        let d = PipelineConfig::default();
        assert_eq!(
            (d.side, d.region_radius, d.jl_eps, d.coreset_fraction, d.train_subset),
            (784, 12, 0.90, 0.10, 1.0)
        );
        assert_eq!(d.smooth_sigma, 0.0);
        d.validate().unwrap();
        for bad in [
            PipelineConfig { side: 16, ..d.clone() },
            PipelineConfig {
                coreset_fraction: 0.0,
                ..d.clone()
            },
            PipelineConfig {
                train_subset: 1.5,
                ..d.clone()
            },
            PipelineConfig {
                attention_block_rows: 0,
                ..d.clone()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        }
        assert!(matches!(d.model_source(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn partial_config_files_fill_defaults() {
        let cfg: PipelineConfig = serde_json::from_str(r#"{"side": 224, "resc": "region-only"}"#).unwrap();
        assert_eq!(cfg.side, 224);
        assert_eq!(cfg.resc, ResCMode::RegionOnly);
        assert_eq!(cfg.jl_eps, 0.90);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"sidee": 1}"#).is_err());
    }

    #[test]
    fn train_subset_takes_sorted_prefix() {
        let (_dir, index) = tiny_dataset();
        let p = Pipeline::new(PipelineConfig {
            train_subset: 0.5,
            ..config(None)
        })
        .unwrap();
        let names: Vec<_> = p
            .train_entries(&index)
            .iter()
            .map(|e| e.image_path.file_name().unwrap().to_owned())
            .collect();
        assert_eq!(names, ["normal_000.png", "normal_001.png"]);
    }

    #[test]
    fn end_to_end_and_cache_agree() {
        let (dir, index) = tiny_dataset();
        let cache = dir.path().join("cache");
        let cached = Pipeline::new(config(Some(cache.clone()))).unwrap();
        let (bank_a, stats, report_a) = cached.run(&index).unwrap();
        assert_eq!(stats.train_images, 4);
        assert_eq!(stats.rows, (stats.source_rows as f64 * 0.5).round() as usize);
        assert!(std::fs::read_dir(&cache).unwrap().count() >= 7);
        // Second pass reads every feature map from the cache.
        let (bank_b, _, report_b) = cached.run(&index).unwrap();
        let plain = Pipeline::new(config(None)).unwrap();
        let (bank_c, _, report_c) = plain.run(&index).unwrap();
        assert_eq!(bank_a.vectors(), bank_b.vectors());
        assert_eq!(bank_a.vectors(), bank_c.vectors());
        assert_eq!(report_a.image, report_b.image);
        assert_eq!(report_a.image, report_c.image);
        assert!(report_a.pixel.is_some());
        assert_eq!(report_a.test_images, 3);
    }

    #[test]
    fn scoring_skips_unreadable_images() {
        let (dir, index) = tiny_dataset();
        let p = Pipeline::new(config(None)).unwrap();
        let (bank, _) = p.build_bank(&index).unwrap();
        let broken = dir.path().join("broken.png");
        std::fs::write(&broken, b"not a png").unwrap();
        let good = index.split(Split::Test).next().unwrap().image_path.clone();
        let out = dir.path().join("out/nested");
        let records = p.score_images(&bank, &[good, broken.clone()], &out).unwrap();
        assert!(records[0].error.is_none() && records[0].heatmap.as_ref().unwrap().is_file());
        assert_eq!(records[1].image, broken);
        assert!(records[1].error.is_some() && records[1].image_score.is_none());
    }

    #[test]
    fn training_images_score_low() {
        let (_dir, index) = tiny_dataset();
        let p = Pipeline::new(PipelineConfig {
            coreset_fraction: 1.0,
            ..config(None)
        })
        .unwrap();
        let (bank, _) = p.build_bank(&index).unwrap();
        let bi = BankIndex::new(&bank).unwrap();
        let own = p
            .score_image(&bi, &index.split(Split::Train).next().unwrap().image_path)
            .unwrap();
        assert!(own.image_score() < 1e-3);
    }

    #[test]
    fn grid_order_and_overrides() {
        let grid = default_grid();
        let names: Vec<_> = grid.iter().map(|v| v.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "10% train",
                "40% train",
                "70% train",
                "wo ReSC",
                "wo Region Module",
                "wo Spatial Module",
                "with ReSC"
            ]
        );
        let base = PipelineConfig::default();
        assert_eq!(grid[0].apply(&base).train_subset, 0.1);
        assert_eq!(grid[3].apply(&base).resc, ResCMode::Off);
    }

    #[test]
    fn ablation_emits_one_row_per_variant() {
        let (_dir, index) = tiny_dataset();
        let p = Pipeline::new(config(None)).unwrap();
        let rows = run_ablation(&p, &index, &[AblationVariant::mode(ResCMode::Off)]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].name, "wo ReSC");
        assert_eq!(rows[0].report.config["pipeline"]["resc"], "off");
    }
}
