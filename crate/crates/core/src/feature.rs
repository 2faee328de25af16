use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which stage of the pipeline produced a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    F2,
    F3,
    Fused,
    Region,
    Spatial,
    Combined,
}

/// Dense `height × width × channels` feature tensor (channel-last, row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    data: Array3<f32>,
    level: Level,
}

impl FeatureMap {
    pub fn new(data: Array3<f32>, level: Level) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Shape(format!("feature map has an empty axis: {h}×{w}×{c}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("feature map contains non-finite values".into()));
        }
        Ok(Self::from_parts(data, level))
    }

    /// Skips the finiteness scan; callers guarantee the invariant.
    pub(crate) fn from_parts(data: Array3<f32>, level: Level) -> Self {
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().into_owned()
        };
        Self { data, level }
    }

    /// Builds a map from positions in scan order (`rows = h·w`, `cols = c`).
    pub fn from_rows(rows: Array2<f32>, height: usize, width: usize, level: Level) -> Result<Self> {
        let c = rows.ncols();
        let data = rows
            .into_shape_with_order((height, width, c))
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(data, level)
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn with_level(mut self, level: Level) -> Self {
        self.level = level;
        self
    }

    pub fn view(&self) -> ArrayView3<'_, f32> {
        self.data.view()
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    /// Positions flattened in scan order: `(h·w) × c`.
    pub fn rows(&self) -> ArrayView2<'_, f32> {
        let (h, w, c) = self.data.dim();
        self.data
            .view()
            .into_shape_with_order((h * w, c))
            .expect("standard layout")
    }

    pub fn as_slice(&self) -> &[f32] {
        self.data.as_slice().expect("standard layout")
    }
}
