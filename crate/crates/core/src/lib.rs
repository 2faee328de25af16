//! Unsupervised anomaly detection for fundus images.
//!
//! Multi-level features from a frozen backbone are enriched by a
//! region-aware filter and a parameter-free spatial self-attention, stored
//! in a memory bank of normal patches, compressed with a greedy coreset, and
//! compared to test features by exact nearest-neighbour search.
//!
//! ```no_run
//! use resad_core::{index_dataset, Layout, Pipeline, PipelineConfig};
//!
//! let cfg = PipelineConfig {
//!     model: Some("builtin:color-pyramid".into()),
//!     side: 224,
//!     ..PipelineConfig::default()
//! };
//! let index = index_dataset("data/synthetic", Layout::Generic)?;
//! let (bank, stats, report) = Pipeline::new(cfg)?.run(&index)?;
//! println!("{} rows, pixel AUC {:?}", stats.rows, report.pixel_auc());
//! # Ok::<(), resad_core::Error>(())
//! ```

pub mod backbone;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod feature;
pub mod interp;
pub mod memory_bank;
pub mod pipeline;
pub mod resc;
pub mod rsft;
pub mod scorer;
pub mod synth;

pub use backbone::{check_fixture, Backbone, ColorPyramid, ExportManifest, ModelSource, ParityReport};
#[cfg(feature = "onnx")]
pub use backbone::{load_model, BackboneHandle};
pub use dataset::{index_dataset, BinaryMask, DatasetIndex, Entry, Label, Layout, LesionKind, Normalization, Split};
pub use error::{Error, Result};
pub use evaluation::{AblationRow, Counts, EvalReport, MetricBlock, PixelPooling, ScoredSet, ThresholdPolicy};
pub use feature::{FeatureMap, Level};
pub use memory_bank::{load_bank, save_bank, CompressedBank, CoresetStart, Fingerprint, MemoryBank, Projection};
pub use pipeline::{AblationVariant, BuildStats, Pipeline, PipelineConfig, ScoreRecord};
pub use resc::{ResCConfig, ResCMode};
pub use scorer::{AnomalyMap, BankIndex, DistanceMap};
