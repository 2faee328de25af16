//! Image and mask loading, model-input preprocessing and dataset indexing.
//!
//! Three on-disk layouts are understood:
//!
//! * `generic`: `train/normal/`, `test/normal/` (optional), `test/abnormal/`
//!   and an optional `test/masks/` tree. A mask belongs to an abnormal image
//!   when its file stem equals the image stem or starts with `<stem>_`; the
//!   lesion kind is taken from the mask's parent directory name when that
//!   names a known lesion.
//! * `idrid`: the official IDRiD release. Normal images are the grading-set
//!   images with retinopathy grade 0 and macular-edema risk 0 (training
//!   labels feed the train split, testing labels the test split). Abnormal
//!   test images are all segmentation-set images, with their MA/HE/EX/SE
//!   masks (optic-disc masks are ignored).
//! * `adam`: images under `AMD/` and `Non-AMD/`, lesion masks under
//!   `Lesion_Masks/<kind>/<stem>.*`. An image is abnormal (test) iff it has
//!   at least one lesion mask; every other image is a normal training image.

use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{ImageError, ImageReader};
use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp;

pub type RgbImage = image::RgbImage;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "tif", "tiff", "bmp"];

/// Decode an image file into 8-bit RGB; grayscale is replicated to 3 channels.
pub fn load_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    Ok(decode(path.as_ref())?.to_rgb8())
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let mut head = Vec::with_capacity(64);
    File::open(path)
        .and_then(|f| f.take(64).read_to_end(&mut head))
        .map_err(|e| Error::io(path, e))?;
    // The extension alone is not trusted: the content must carry a known signature.
    if image::guess_format(&head).is_err() {
        return Err(Error::UnsupportedFormat(path.to_path_buf()));
    }
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| match e {
        ImageError::Unsupported(_) => Error::UnsupportedFormat(path.to_path_buf()),
        other => Error::Decode {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}

/// Per-channel normalization constants applied after scaling to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    pub const IMAGENET: Normalization = Normalization {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };

    pub const IDENTITY: Normalization = Normalization {
        mean: [0.0; 3],
        std: [1.0; 3],
    };
}

impl Default for Normalization {
    fn default() -> Self {
        Self::IMAGENET
    }
}

/// Channel-first `3 × side × side` model input.
#[derive(Debug, Clone, PartialEq)]
pub struct InputTensor {
    data: Array3<f32>,
}

impl InputTensor {
    pub fn from_chw(data: Array3<f32>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 3 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("expected 3×H×W input, got {c}×{h}×{w}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("input tensor contains non-finite values".into()));
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
        })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn side(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }
}

pub const MIN_SIDE: usize = 32;

/// Resize to `side × side` (bilinear, anisotropic), scale to `[0, 1]`, then
/// apply `(x − mean) / std` per channel. Output is channel-first.
pub fn preprocess(img: &RgbImage, side: usize, norm: &Normalization) -> Result<InputTensor> {
    if side < MIN_SIDE {
        return Err(Error::InvalidConfig(format!(
            "side {side} is below the minimum {MIN_SIDE}"
        )));
    }
    if norm.std.iter().any(|s| *s == 0.0 || !s.is_finite()) || norm.mean.iter().any(|m| !m.is_finite()) {
        return Err(Error::InvalidConfig(format!("bad normalization constants {norm:?}")));
    }
    let (w, h) = img.dimensions();
    let hwc = Array3::from_shape_vec(
        (h as usize, w as usize, 3),
        img.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
    )
    .map_err(|e| Error::Shape(e.to_string()))?;
    let resized = interp::resize_bilinear(hwc.view(), side, side);
    let mut chw = resized.permuted_axes([2, 0, 1]).as_standard_layout().into_owned();
    for (ch, mut plane) in chw.axis_iter_mut(Axis(0)).enumerate() {
        let (m, s) = (norm.mean[ch], norm.std[ch]);
        plane.mapv_inplace(|v| (v - m) / s);
    }
    InputTensor::from_chw(chw)
}

/// Lesion categories found in the supported datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LesionKind {
    /// Microaneurysms.
    Ma,
    /// Soft exudates.
    Se,
    /// Hard exudates.
    Ex,
    /// Haemorrhages (IDRiD).
    He,
    Drusen,
    Exudate,
    Hemorrhage,
    Scar,
    Other,
    Union,
}

impl LesionKind {
    fn parse_loose(name: &str) -> Option<Self> {
        let n = name.to_ascii_lowercase();
        let n = n.trim_start_matches(|c: char| c.is_ascii_digit() || c == '.' || c == ' ');
        Some(match n {
            "ma" | "microaneurysms" => Self::Ma,
            "se" | "soft exudates" => Self::Se,
            "ex" | "hard exudates" => Self::Ex,
            "he" | "haemorrhages" => Self::He,
            "drusen" => Self::Drusen,
            "exudate" | "exudates" => Self::Exudate,
            "hemorrhage" | "hemorrhages" => Self::Hemorrhage,
            "scar" | "scars" => Self::Scar,
            "other" | "others" => Self::Other,
            _ => return None,
        })
    }
}

/// Binary `side × side` lesion mask with values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    data: Array2<u8>,
    kind: LesionKind,
}

impl BinaryMask {
    pub fn new(data: Array2<u8>, kind: LesionKind) -> Result<Self> {
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Shape("mask values must be 0 or 1".into()));
        }
        Ok(Self { data, kind })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Array2::zeros((height, width)),
            kind: LesionKind::Union,
        }
    }

    pub fn data(&self) -> &Array2<u8> {
        &self.data
    }

    pub fn kind(&self) -> LesionKind {
        self.kind
    }

    pub fn dim(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn positives(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Pixelwise OR.
    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        if self.dim() != other.dim() {
            return Err(Error::Shape(format!(
                "cannot union masks of shape {:?} and {:?}",
                self.dim(),
                other.dim()
            )));
        }
        let mut data = self.data.clone();
        data.zip_mut_with(&other.data, |a, &b| *a |= b);
        Ok(BinaryMask {
            data,
            kind: LesionKind::Union,
        })
    }
}

/// Load one lesion mask: nearest-neighbor resize to `side × side`, any nonzero
/// source pixel (in any channel) becomes 1.
pub fn load_mask(path: impl AsRef<Path>, side: usize, kind: LesionKind) -> Result<BinaryMask> {
    let path = path.as_ref();
    let img = decode(path)?.to_rgb16();
    let (w, h) = img.dimensions();
    let src = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        let p = img.get_pixel(x as u32, y as u32);
        u8::from(p.0.iter().any(|&v| v != 0))
    });
    BinaryMask::new(interp::resize_nearest(src.view(), side, side), kind)
}

/// Load several masks for the same image and OR them together. With no
/// paths the result is an all-zero mask.
pub fn load_union_mask<P: AsRef<Path>>(paths: &[P], side: usize) -> Result<BinaryMask> {
    let mut acc = BinaryMask::zeros(side, side);
    for p in paths {
        acc = acc.union(&load_mask(p, side, LesionKind::Union)?)?;
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Abnormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Idrid,
    Adam,
    Generic,
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "idrid" => Ok(Layout::Idrid),
            "adam" => Ok(Layout::Adam),
            "generic" => Ok(Layout::Generic),
            other => Err(Error::InvalidConfig(format!("unknown layout `{other}`"))),
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layout::Idrid => "idrid",
            Layout::Adam => "adam",
            Layout::Generic => "generic",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPath {
    pub path: PathBuf,
    pub kind: LesionKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub image_path: PathBuf,
    pub split: Split,
    pub label: Label,
    pub mask_paths: Vec<MaskPath>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train_normal: usize,
    pub test_normal: usize,
    pub test_abnormal: usize,
}

/// Sorted dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub entries: Vec<Entry>,
}

impl DatasetIndex {
    /// Sorts by `(split, label, image_path)` and checks the split invariants.
    pub fn new(mut entries: Vec<Entry>) -> Result<Self> {
        for e in &mut entries {
            e.mask_paths.sort_by(|a, b| a.path.cmp(&b.path));
        }
        entries.sort_by(|a, b| (a.split, a.label, &a.image_path).cmp(&(b.split, b.label, &b.image_path)));
        if let Some(bad) = entries
            .iter()
            .find(|e| e.split == Split::Train && e.label == Label::Abnormal)
        {
            return Err(Error::Layout(format!(
                "abnormal image in the training split: {}",
                bad.image_path.display()
            )));
        }
        let index = Self { entries };
        if index.split(Split::Train).next().is_none() {
            return Err(Error::EmptySplit("train".into()));
        }
        if index.split(Split::Test).next().is_none() {
            return Err(Error::EmptySplit("test".into()));
        }
        Ok(index)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn counts(&self) -> SplitCounts {
        let mut c = SplitCounts::default();
        for e in &self.entries {
            match (e.split, e.label) {
                (Split::Train, _) => c.train_normal += 1,
                (Split::Test, Label::Normal) => c.test_normal += 1,
                (Split::Test, Label::Abnormal) => c.test_abnormal += 1,
            }
        }
        c
    }

    /// Pixel-level evaluation needs a mask for every abnormal test image.
    pub fn check_masks(&self) -> Result<()> {
        match self
            .split(Split::Test)
            .find(|e| e.label == Label::Abnormal && e.mask_paths.is_empty())
        {
            Some(e) => Err(Error::Layout(format!(
                "abnormal test image without lesion mask: {}",
                e.image_path.display()
            ))),
            None => Ok(()),
        }
    }

    /// One JSON object per line, UTF-8.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }

    pub fn read_jsonl(text: &str) -> Result<Self> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Metadata(e.to_string())))
            .collect::<Result<Vec<Entry>>>()?;
        Self::new(entries)
    }
}

/// Build a deterministic manifest for a dataset root.
pub fn index_dataset(root: impl AsRef<Path>, layout: Layout) -> Result<DatasetIndex> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::Layout(format!("{} is not a directory", root.display())));
    }
    let is_empty = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .next()
        .is_none();
    if is_empty {
        return Err(Error::EmptySplit("train".into()));
    }
    let entries = match layout {
        Layout::Generic => index_generic(root)?,
        Layout::Idrid => index_idrid(root)?,
        Layout::Adam => index_adam(root)?,
    };
    DatasetIndex::new(entries)
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        && !path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with('.'))
}

/// Image files directly inside `dir`, sorted.
fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Image files anywhere below `dir`, sorted.
fn walk_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if is_image(&path) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn require_dir(path: PathBuf) -> Result<PathBuf> {
    if path.is_dir() {
        Ok(path)
    } else {
        Err(Error::Layout(format!("missing directory {}", path.display())))
    }
}

fn entries_for(images: Vec<PathBuf>, split: Split, label: Label) -> impl Iterator<Item = Entry> {
    images.into_iter().map(move |image_path| Entry {
        image_path,
        split,
        label,
        mask_paths: Vec::new(),
    })
}

fn index_generic(root: &Path) -> Result<Vec<Entry>> {
    let train = require_dir(root.join("train").join("normal"))?;
    let abnormal = require_dir(root.join("test").join("abnormal"))?;
    let mut entries: Vec<Entry> = entries_for(list_images(&train)?, Split::Train, Label::Normal).collect();
    let test_normal = root.join("test").join("normal");
    if test_normal.is_dir() {
        entries.extend(entries_for(list_images(&test_normal)?, Split::Test, Label::Normal));
    }
    let masks_dir = root.join("test").join("masks");
    let masks = if masks_dir.is_dir() {
        walk_images(&masks_dir)?
    } else {
        Vec::new()
    };
    for image_path in list_images(&abnormal)? {
        let s = stem(&image_path);
        let prefix = format!("{s}_");
        let mask_paths = masks
            .iter()
            .filter(|m| {
                let ms = stem(m);
                ms == s || ms.starts_with(&prefix)
            })
            .map(|m| MaskPath {
                kind: m
                    .parent()
                    .filter(|p| *p != masks_dir)
                    .and_then(|p| p.file_name())
                    .and_then(|n| LesionKind::parse_loose(&n.to_string_lossy()))
                    .unwrap_or(LesionKind::Other),
                path: m.clone(),
            })
            .collect();
        entries.push(Entry {
            image_path,
            split: Split::Test,
            label: Label::Abnormal,
            mask_paths,
        });
    }
    Ok(entries)
}

/// First child directory whose lowercase name contains every needle.
fn child_dir(parent: &Path, needles: &[&str]) -> Result<PathBuf> {
    let mut candidates = Vec::new();
    for entry in std::fs::read_dir(parent).map_err(|e| Error::io(parent, e))? {
        let path = entry.map_err(|e| Error::io(parent, e))?.path();
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if path.is_dir() && needles.iter().all(|n| name.contains(n)) {
            candidates.push(path);
        }
    }
    candidates.sort();
    candidates
        .into_iter()
        .next()
        .ok_or_else(|| Error::Layout(format!("no directory matching {needles:?} under {}", parent.display())))
}

fn child_file(parent: &Path, needles: &[&str], ext: &str) -> Result<PathBuf> {
    let mut candidates = Vec::new();
    for entry in std::fs::read_dir(parent).map_err(|e| Error::io(parent, e))? {
        let path = entry.map_err(|e| Error::io(parent, e))?.path();
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if path.is_file() && name.ends_with(ext) && needles.iter().all(|n| name.contains(n)) {
            candidates.push(path);
        }
    }
    candidates.sort();
    candidates
        .into_iter()
        .next()
        .ok_or_else(|| Error::Layout(format!("no {ext} file matching {needles:?} under {}", parent.display())))
}

/// Image names with retinopathy grade 0 and edema risk 0 from an IDRiD
/// grading label file (`Image name, Retinopathy grade, Risk of macular edema`).
fn idrid_normal_names(csv_path: &Path) -> Result<Vec<String>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(csv_path)
        .map_err(|e| Error::Layout(format!("{}: {e}", csv_path.display())))?;
    let mut names = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Layout(format!("{}: {e}", csv_path.display())))?;
        let (Some(name), Some(grade), Some(edema)) = (record.get(0), record.get(1), record.get(2)) else {
            continue;
        };
        if name.is_empty() {
            continue;
        }
        if grade == "0" && edema == "0" {
            names.push(name.to_string());
        }
    }
    Ok(names)
}

fn index_idrid(root: &Path) -> Result<Vec<Entry>> {
    let seg = child_dir(root, &["segmentation"])?;
    let grading = child_dir(root, &["grading"])?;
    let mut entries = Vec::new();

    let grading_images = child_dir(&grading, &["original"])?;
    let grading_gt = child_dir(&grading, &["groundtruth"])?;
    for (split, split_needle) in [(Split::Train, "training"), (Split::Test, "testing")] {
        let image_dir = child_dir(&grading_images, &[split_needle])?;
        let csv_path = child_file(&grading_gt, &[split_needle], ".csv")?;
        let normals = idrid_normal_names(&csv_path)?;
        let available = list_images(&image_dir)?;
        for name in normals {
            let path = available
                .iter()
                .find(|p| stem(p) == name)
                .ok_or_else(|| Error::Layout(format!("labelled image {name} not found in {}", image_dir.display())))?;
            entries.push(Entry {
                image_path: path.clone(),
                split,
                label: Label::Normal,
                mask_paths: Vec::new(),
            });
        }
    }

    let seg_images = child_dir(&seg, &["original"])?;
    let seg_gt = child_dir(&seg, &["groundtruth"])?;
    for split_needle in ["training", "testing"] {
        let image_dir = child_dir(&seg_images, &[split_needle])?;
        let masks = walk_images(&child_dir(&seg_gt, &[split_needle])?)?;
        for image_path in list_images(&image_dir)? {
            let prefix = format!("{}_", stem(&image_path));
            let mask_paths = masks
                .iter()
                .filter_map(|m| {
                    let ms = stem(m);
                    let suffix = ms.strip_prefix(&prefix)?;
                    // Optic-disc masks mark anatomy, not lesions.
                    let kind = LesionKind::parse_loose(suffix)?;
                    Some(MaskPath { path: m.clone(), kind })
                })
                .collect();
            entries.push(Entry {
                image_path,
                split: Split::Test,
                label: Label::Abnormal,
                mask_paths,
            });
        }
    }
    Ok(entries)
}

fn index_adam(root: &Path) -> Result<Vec<Entry>> {
    let lesion_root = child_dir(root, &["lesion"])?;
    let mut lesion_masks: Vec<(String, MaskPath)> = Vec::new();
    for kind_dir in std::fs::read_dir(&lesion_root).map_err(|e| Error::io(&lesion_root, e))? {
        let kind_dir = kind_dir.map_err(|e| Error::io(&lesion_root, e))?.path();
        if !kind_dir.is_dir() {
            continue;
        }
        let kind = kind_dir
            .file_name()
            .and_then(|n| LesionKind::parse_loose(&n.to_string_lossy()))
            .unwrap_or(LesionKind::Other);
        for m in walk_images(&kind_dir)? {
            lesion_masks.push((stem(&m), MaskPath { path: m, kind }));
        }
    }

    let mut images = Vec::new();
    for dir in ["AMD", "Non-AMD"] {
        let d = root.join(dir);
        if d.is_dir() {
            images.extend(walk_images(&d)?);
        }
    }
    if images.is_empty() {
        return Err(Error::Layout(format!(
            "no images under {}/AMD or {}/Non-AMD",
            root.display(),
            root.display()
        )));
    }
    Ok(images
        .into_iter()
        .map(|image_path| {
            let s = stem(&image_path);
            let mask_paths: Vec<MaskPath> = lesion_masks
                .iter()
                .filter(|(ms, _)| *ms == s)
                .map(|(_, m)| m.clone())
                .collect();
            let (split, label) = if mask_paths.is_empty() {
                (Split::Train, Label::Normal)
            } else {
                (Split::Test, Label::Abnormal)
            };
            Entry {
                image_path,
                split,
                label,
                mask_paths,
            }
        })
        .collect())
}
