//! Frozen feature extractors and multi-level feature fusion.
//!
//! A backbone maps a preprocessed image to two feature maps: `stage2`
//! (stride 8) and `stage3` (stride 16). [`fuse_levels`] upsamples the coarser
//! map onto the finer grid and concatenates channels.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{concatenate, s, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::InputTensor;
use crate::error::{Error, Result};
use crate::feature::{FeatureMap, Level};
use crate::interp;
use crate::rsft;

pub const STAGE2: &str = "stage2";
pub const STAGE3: &str = "stage3";

/// Channel counts of the reference WideResNet-50 exports.
pub const REFERENCE_CHANNELS: (usize, usize) = (512, 1024);

/// A frozen extractor producing `(stage2, stage3)` feature maps.
pub trait Backbone: Send + Sync {
    fn extract(&self, x: &InputTensor) -> Result<(FeatureMap, FeatureMap)>;

    /// Stable content hash identifying the weights; recorded in bank metadata.
    fn fingerprint(&self) -> &str;

    /// Input side the model was exported for, if it is fixed.
    fn input_side(&self) -> Option<usize>;

    /// `(c2, c3)`.
    fn channels(&self) -> (usize, usize);
}

pub fn extract_features(backbone: &dyn Backbone, x: &InputTensor) -> Result<(FeatureMap, FeatureMap)> {
    if let Some(side) = backbone.input_side() {
        if x.side() != (side, side) {
            return Err(Error::Shape(format!(
                "model expects {side}×{side} input, got {:?}",
                x.side()
            )));
        }
    }
    backbone.extract(x)
}

/// `concat(f2, upscale(f3))` along channels. `f3` must sit on the half-resolution
/// grid of `f2` (`ceil(h2 / 2) × ceil(w2 / 2)`).
pub fn fuse_levels(f2: &FeatureMap, f3: &FeatureMap) -> Result<FeatureMap> {
    let (h2, w2, _) = f2.dim();
    let (h3, w3, _) = f3.dim();
    if h3 != h2.div_ceil(2) || w3 != w2.div_ceil(2) {
        return Err(Error::Shape(format!(
            "stage3 grid {h3}×{w3} is not the half-resolution grid of stage2 {h2}×{w2}"
        )));
    }
    let up = interp::resize_bilinear(f3.view(), h2, w2);
    let fused = concatenate(Axis(2), &[f2.view(), up.view()]).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(FeatureMap::from_parts(fused, Level::Fused))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Expectations checked while loading an interchange model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExpectedOutputs {
    /// Input side to bind when the model leaves spatial dims symbolic.
    pub side: Option<usize>,
    pub channels: Option<(usize, usize)>,
}

impl ExpectedOutputs {
    pub fn reference(side: usize) -> Self {
        Self {
            side: Some(side),
            channels: Some(REFERENCE_CHANNELS),
        }
    }
}

/// Converts an `N=1, C, H, W` buffer to a channel-last feature map.
pub fn nchw_to_feature_map(shape: &[usize], data: &[f32], level: Level) -> Result<FeatureMap> {
    let &[n, c, h, w] = shape else {
        return Err(Error::Shape(format!("expected rank-4 NCHW tensor, got {shape:?}")));
    };
    if n != 1 {
        return Err(Error::Shape(format!("expected batch size 1, got {n}")));
    }
    let chw = ArrayView3::from_shape((c, h, w), data).map_err(|e| Error::Shape(e.to_string()))?;
    FeatureMap::new(chw.permuted_axes([1, 2, 0]).as_standard_layout().into_owned(), level)
}

#[cfg(feature = "onnx")]
pub use onnx::{load_model, BackboneHandle};

#[cfg(feature = "onnx")]
mod onnx {
    use super::*;
    use tract_onnx::prelude::*;

    use tract_onnx::tract_hir::infer::Factoid;
    use tract_onnx::tract_hir::internal::DimLike;

    type Plan = TypedRunnableModel;

    /// A validated, optimized ONNX backbone. Read-only after load.
    pub struct BackboneHandle {
        plan: Arc<Plan>,
        model_path: PathBuf,
        input_name: String,
        side: usize,
        channels: (usize, usize),
        grids: [(usize, usize); 2],
        fingerprint: String,
    }

    impl std::fmt::Debug for BackboneHandle {
        fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
            f.debug_struct("BackboneHandle")
                .field("model_path", &self.model_path)
                .field("input_name", &self.input_name)
                .field("side", &self.side)
                .field("channels", &self.channels)
                .field("grids", &self.grids)
                .finish()
        }
    }

    impl BackboneHandle {
        pub fn model_path(&self) -> &Path {
            &self.model_path
        }

        pub fn input_name(&self) -> &str {
            &self.input_name
        }

        pub fn side(&self) -> usize {
            self.side
        }

        /// Spatial grids of `stage2` and `stage3`.
        pub fn grids(&self) -> [(usize, usize); 2] {
            self.grids
        }

        /// `(stride2, stride3)` relative to the input side.
        pub fn strides(&self) -> (usize, usize) {
            (self.side / self.grids[0].0, self.side / self.grids[1].0)
        }
    }

    fn load_err(path: &Path, e: impl std::fmt::Display) -> Error {
        Error::ModelLoad {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }

    /// Load an ONNX model exposing `stage2` and `stage3` outputs.
    pub fn load_model(path: impl AsRef<Path>, expect: &ExpectedOutputs) -> Result<BackboneHandle> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| load_err(path, e))?;
        let mut model = tract_onnx::onnx()
            .model_for_read(&mut &bytes[..])
            .map_err(|e| load_err(path, e))?;

        let labels: Vec<String> = model
            .output_outlets()
            .map_err(|e| load_err(path, e))?
            .iter()
            .filter_map(|o| model.outlet_label(*o).map(str::to_owned))
            .collect();
        for needed in [STAGE2, STAGE3] {
            if !labels.iter().any(|l| l == needed) {
                return Err(Error::OutputMismatch(format!(
                    "output `{needed}` missing; model declares {labels:?}"
                )));
            }
        }
        model
            .select_outputs_by_name([STAGE2, STAGE3])
            .map_err(|e| Error::OutputMismatch(e.to_string()))?;

        let input_outlet = model.input_outlets().map_err(|e| load_err(path, e))?[0];
        let input_name = model.node(input_outlet.node).name.clone();
        let declared = model
            .input_fact(0)
            .ok()
            .and_then(|f| f.shape.concretize())
            .and_then(|dims| {
                let dims: Vec<usize> = dims.iter().filter_map(|d| d.to_usize().ok()).collect();
                (dims.len() == 4 && dims[2] == dims[3]).then_some(dims[2])
            });
        let side = match (declared, expect.side) {
            (Some(d), Some(e)) if d != e => {
                return Err(Error::Shape(format!(
                    "model was exported for side {d}, configured side is {e}"
                )))
            }
            (Some(d), _) => d,
            (None, Some(e)) => e,
            (None, None) => {
                return Err(load_err(
                    path,
                    "model input has symbolic spatial dims and no side was configured",
                ))
            }
        };
        model
            .set_input_fact(0, f32::fact([1, 3, side, side]).into())
            .map_err(|e| load_err(path, e))?;

        let typed = model.into_optimized().map_err(|e| load_err(path, e))?;
        let mut shapes = Vec::with_capacity(2);
        for ix in 0..2 {
            let fact = typed.output_fact(ix).map_err(|e| load_err(path, e))?;
            let dims = fact
                .shape
                .as_concrete()
                .ok_or_else(|| load_err(path, "output shape is not concrete"))?
                .to_vec();
            if dims.len() != 4 || dims[0] != 1 {
                return Err(Error::OutputMismatch(format!(
                    "output {ix} has shape {dims:?}, expected 1×C×H×W"
                )));
            }
            shapes.push(dims);
        }
        let channels = (shapes[0][1], shapes[1][1]);
        if let Some(want) = expect.channels {
            if want != channels {
                return Err(Error::ChannelMismatch(format!(
                    "expected {want:?}, model produces {channels:?}"
                )));
            }
        }
        let grids = [(shapes[0][2], shapes[0][3]), (shapes[1][2], shapes[1][3])];
        if grids[1] != (grids[0].0.div_ceil(2), grids[0].1.div_ceil(2)) {
            return Err(Error::OutputMismatch(format!(
                "stage3 grid {:?} is not half of stage2 grid {:?}",
                grids[1], grids[0]
            )));
        }
        let plan = typed.into_runnable().map_err(|e| load_err(path, e))?;
        Ok(BackboneHandle {
            plan,
            model_path: path.to_path_buf(),
            input_name,
            side,
            channels,
            grids,
            fingerprint: sha256_hex(&bytes),
        })
    }

    impl Backbone for BackboneHandle {
        fn extract(&self, x: &InputTensor) -> Result<(FeatureMap, FeatureMap)> {
            let data = x.data();
            let (_, h, w) = data.dim();
            let slice = data.as_slice().expect("input tensors are standard layout");
            let input = Tensor::from_shape(&[1, 3, h, w], slice).map_err(|e| Error::Inference(e.to_string()))?;
            let outputs = self
                .plan
                .run(tvec!(input.into()))
                .map_err(|e| Error::Inference(e.to_string()))?;
            let mut maps = Vec::with_capacity(2);
            for (out, level) in outputs.iter().zip([Level::F2, Level::F3]) {
                let view = out
                    .to_plain_array_view::<f32>()
                    .map_err(|e| Error::Inference(e.to_string()))?;
                let shape = view.shape().to_vec();
                let flat: Vec<f32> = view.iter().copied().collect();
                maps.push(nchw_to_feature_map(&shape, &flat, level)?);
            }
            let f3 = maps.pop().expect("two outputs");
            let f2 = maps.pop().expect("two outputs");
            Ok((f2, f3))
        }

        fn fingerprint(&self) -> &str {
            &self.fingerprint
        }

        fn input_side(&self) -> Option<usize> {
            Some(self.side)
        }

        fn channels(&self) -> (usize, usize) {
            self.channels
        }
    }
}

/// Summary written next to an exported model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub architecture: String,
    #[serde(default)]
    pub weights: Option<String>,
    pub opset: u32,
    pub input_shape: Vec<usize>,
    pub outputs: std::collections::BTreeMap<String, Vec<usize>>,
    #[serde(default)]
    pub export_date: Option<String>,
}

impl ExportManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Metadata(format!("{}: {e}", path.display())))
    }

    /// Output names are exactly `{stage2, stage3}` on stride-8 and stride-16
    /// grids of the declared input.
    pub fn validate(&self) -> Result<()> {
        let names: Vec<&str> = self.outputs.keys().map(String::as_str).collect();
        if names != [STAGE2, STAGE3] {
            return Err(Error::OutputMismatch(format!("manifest outputs {names:?}")));
        }
        if self.opset < 11 {
            return Err(Error::InvalidConfig(format!("opset {} is below 11", self.opset)));
        }
        let &[_, 3, h, w] = self.input_shape.as_slice() else {
            return Err(Error::Shape(format!("manifest input shape {:?}", self.input_shape)));
        };
        for (name, stride) in [(STAGE2, 8), (STAGE3, 16)] {
            let dims = &self.outputs[name];
            if dims.len() != 4 || dims[2] != h.div_ceil(stride) || dims[3] != w.div_ceil(stride) {
                return Err(Error::Shape(format!(
                    "{name} shape {dims:?} is not stride {stride} of {h}×{w}"
                )));
            }
        }
        Ok(())
    }
}

/// Outcome of comparing a runtime against exporter fixtures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParityReport {
    pub max_abs_err_stage2: f32,
    pub max_abs_err_stage3: f32,
    pub tolerance: f32,
}

impl ParityReport {
    pub fn passed(&self) -> bool {
        self.max_abs_err_stage2 <= self.tolerance && self.max_abs_err_stage3 <= self.tolerance
    }
}

pub const PARITY_TOLERANCE: f32 = 1e-4;

/// Run `backbone` on `fixture_input.rsft` and compare with
/// `fixture_stage2.rsft` / `fixture_stage3.rsft` (all NCHW).
pub fn check_fixture(backbone: &dyn Backbone, dir: impl AsRef<Path>) -> Result<ParityReport> {
    let dir = dir.as_ref();
    let (in_shape, in_data) = rsft::load(dir.join("fixture_input.rsft"))?;
    let &[1, 3, h, w] = in_shape.as_slice() else {
        return Err(Error::Shape(format!("fixture input shape {in_shape:?}")));
    };
    let input =
        InputTensor::from_chw(Array3::from_shape_vec((3, h, w), in_data).map_err(|e| Error::Shape(e.to_string()))?)?;
    let (f2, f3) = extract_features(backbone, &input)?;
    let mut errs = [0f32; 2];
    for (i, (name, got)) in [("fixture_stage2.rsft", &f2), ("fixture_stage3.rsft", &f3)]
        .into_iter()
        .enumerate()
    {
        let (shape, data) = rsft::load(dir.join(name))?;
        let want = nchw_to_feature_map(&shape, &data, got.level())?;
        if want.dim() != got.dim() {
            return Err(Error::Shape(format!(
                "{name}: expected {:?}, runtime gave {:?}",
                want.dim(),
                got.dim()
            )));
        }
        errs[i] = want
            .as_slice()
            .iter()
            .zip(got.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
    }
    Ok(ParityReport {
        max_abs_err_stage2: errs[0],
        max_abs_err_stage3: errs[1],
        tolerance: PARITY_TOLERANCE,
    })
}

/// Deterministic hand-crafted extractor used when no exported network is
/// available (tests, synthetic data, smoke runs).
///
/// Each cell of the stride-8 (`stage2`) and stride-16 (`stage3`) grids is
/// described by per-channel mean, standard deviation and mean absolute
/// horizontal/vertical gradients of the normalized input, i.e. 12 channels
/// per stage.
#[derive(Debug, Clone)]
pub struct ColorPyramid {
    fingerprint: String,
}

impl ColorPyramid {
    pub const NAME: &'static str = "builtin:color-pyramid";
    const VERSION: u32 = 1;
    const CHANNELS: usize = 12;

    pub fn new() -> Self {
        Self {
            fingerprint: sha256_hex(format!("{}@{}", Self::NAME, Self::VERSION).as_bytes()),
        }
    }

    fn pool(x: ArrayView3<'_, f32>, stride: usize) -> Array3<f32> {
        let (_, h, w) = x.dim();
        let (gh, gw) = (h.div_ceil(stride), w.div_ceil(stride));
        let mut out = Array3::<f32>::zeros((gh, gw, Self::CHANNELS));
        for gy in 0..gh {
            for gx in 0..gw {
                let (y0, x0) = (gy * stride, gx * stride);
                let (y1, x1) = ((y0 + stride).min(h), (x0 + stride).min(w));
                for ch in 0..3 {
                    let cell = x.slice(s![ch, y0..y1, x0..x1]);
                    let n = cell.len() as f32;
                    let mean = cell.sum() / n;
                    let var = cell.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / n;
                    let mut gxs = 0.0f32;
                    let mut gys = 0.0f32;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            let v = x[(ch, y, xx)];
                            gxs += (x[(ch, y, (xx + 1).min(w - 1))] - v).abs();
                            gys += (x[(ch, (y + 1).min(h - 1), xx)] - v).abs();
                        }
                    }
                    let px = out.slice_mut(s![gy, gx, ..]);
                    let mut px = px;
                    px[ch] = mean;
                    px[3 + ch] = var.sqrt();
                    px[6 + ch] = gxs / n;
                    px[9 + ch] = gys / n;
                }
            }
        }
        out
    }
}

impl Default for ColorPyramid {
    fn default() -> Self {
        Self::new()
    }
}

impl Backbone for ColorPyramid {
    fn extract(&self, x: &InputTensor) -> Result<(FeatureMap, FeatureMap)> {
        let f2 = FeatureMap::new(Self::pool(x.data().view(), 8), Level::F2)?;
        let f3 = FeatureMap::new(Self::pool(x.data().view(), 16), Level::F3)?;
        Ok((f2, f3))
    }

    fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    fn input_side(&self) -> Option<usize> {
        None
    }

    fn channels(&self) -> (usize, usize) {
        (Self::CHANNELS, Self::CHANNELS)
    }
}

/// Where feature extraction comes from: an ONNX export or the built-in
/// extractor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSource {
    Onnx(PathBuf),
    Builtin,
}

impl ModelSource {
    pub fn parse(s: &str) -> Self {
        if s == ColorPyramid::NAME || s == "builtin" {
            ModelSource::Builtin
        } else {
            ModelSource::Onnx(PathBuf::from(s))
        }
    }

    pub fn open(&self, side: usize, channels: Option<(usize, usize)>) -> Result<Arc<dyn Backbone>> {
        match self {
            ModelSource::Builtin => Ok(Arc::new(ColorPyramid::new())),
            #[cfg(feature = "onnx")]
            ModelSource::Onnx(path) => Ok(Arc::new(load_model(
                path,
                &ExpectedOutputs {
                    side: Some(side),
                    channels,
                },
            )?)),
            #[cfg(not(feature = "onnx"))]
            ModelSource::Onnx(path) => {
                let _ = (side, channels);
                Err(Error::ModelLoad {
                    path: path.clone(),
                    message: "built without ONNX support".into(),
                })
            }
        }
    }
}

impl std::fmt::Display for ModelSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelSource::Onnx(p) => write!(f, "{}", p.display()),
            ModelSource::Builtin => f.write_str(ColorPyramid::NAME),
        }
    }
}
