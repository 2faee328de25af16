//! Seeded synthetic fundus-like dataset in the `generic` layout.
//!
//! Normal images are textured orange disks on black with an optic disc and
//! a dark vessel tree. Abnormal images add bright yellow blob lesions whose
//! masks are written under `test/masks/exudate/`.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub train_normal: usize,
    pub test_normal: usize,
    pub test_abnormal: usize,
    /// Written image side in pixels.
    pub size: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train_normal: 14,
            test_normal: 6,
            test_abnormal: 10,
            size: 256,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub images: Vec<PathBuf>,
    pub masks: Vec<PathBuf>,
}

struct Blob {
    cx: f32,
    cy: f32,
    r: f32,
}

/// Render one fundus. Returns the image and the lesion mask (all zero when
/// `lesions` is 0).
fn render(size: u32, rng: &mut ChaCha8Rng, lesions: usize) -> (RgbImage, GrayImage) {
    let s = size as f32;
    let c = s / 2.0;
    let radius = s * rng.random_range(0.44..0.47);
    let tint = [
        rng.random_range(0.75..0.85f32),
        rng.random_range(0.33..0.40f32),
        rng.random_range(0.12..0.17f32),
    ];
    // Low-frequency texture: a few random plane waves.
    let waves: Vec<(f32, f32, f32, f32)> = (0..4)
        .map(|_| {
            let a: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            let f = rng.random_range(2.0..6.0f32) / s;
            (
                a.cos() * f,
                a.sin() * f,
                rng.random_range(0.0..std::f32::consts::TAU),
                rng.random_range(0.02..0.05f32),
            )
        })
        .collect();
    let disc_angle: f32 = rng.random_range(-0.4..0.4f32)
        + if rng.random_bool(0.5) {
            0.0
        } else {
            std::f32::consts::PI
        };
    let disc = (
        c + 0.55 * radius * disc_angle.cos(),
        c + 0.55 * radius * disc_angle.sin(),
    );
    let disc_r = s * 0.065;

    let mut vessel = vec![0f32; (size * size) as usize];
    for _ in 0..rng.random_range(5..8) {
        let mut angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
        let (mut x, mut y) = disc;
        let mut width = s * 0.012;
        for _ in 0..(s as usize) {
            angle += rng.random_range(-0.12..0.12f32);
            x += angle.cos();
            y += angle.sin();
            width = (width * 0.997).max(s * 0.004);
            if (x - c).hypot(y - c) > radius {
                break;
            }
            stamp(&mut vessel, size, x, y, width, 1.0);
        }
    }

    let mut blobs = Vec::new();
    while blobs.len() < lesions {
        let a: f32 = rng.random_range(0.0..std::f32::consts::TAU);
        let d = rng.random_range(0.1..0.75f32) * radius;
        let b = Blob {
            cx: c + d * a.cos(),
            cy: c + d * a.sin(),
            r: s * rng.random_range(0.025..0.045f32),
        };
        if (b.cx - disc.0).hypot(b.cy - disc.1) > disc_r + b.r + 4.0 {
            blobs.push(b);
        }
    }

    let mut img = RgbImage::new(size, size);
    let mut mask = GrayImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            let rr = (fx - c).hypot(fy - c) / radius;
            if rr > 1.0 {
                continue;
            }
            let texture: f32 = waves
                .iter()
                .map(|&(kx, ky, ph, amp)| {
                    amp * (kx * fx * std::f32::consts::TAU + ky * fy * std::f32::consts::TAU + ph).sin()
                })
                .sum();
            let vignette = 1.0 - 0.35 * rr * rr;
            let mut px = tint.map(|t| t * vignette + texture);
            let v = vessel[(y * size + x) as usize];
            px = [
                px[0] * (1.0 - 0.35 * v),
                px[1] * (1.0 - 0.6 * v),
                px[2] * (1.0 - 0.5 * v),
            ];
            let dd = (fx - disc.0).hypot(fy - disc.1) / disc_r;
            if dd < 1.0 {
                let k = 1.0 - dd * dd;
                px = [
                    px[0] + (0.98 - px[0]) * k,
                    px[1] + (0.85 - px[1]) * k,
                    px[2] + (0.70 - px[2]) * k,
                ];
            }
            for b in &blobs {
                if (fx - b.cx).hypot(fy - b.cy) <= b.r {
                    px = [0.97, 0.92, 0.25];
                    mask.put_pixel(x, y, Luma([255]));
                }
            }
            img.put_pixel(x, y, Rgb(px.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)));
        }
    }
    (img, mask)
}

fn stamp(buf: &mut [f32], size: u32, cx: f32, cy: f32, r: f32, value: f32) {
    let lo = |v: f32| (v - r).floor().max(0.0) as u32;
    let hi = |v: f32| ((v + r).ceil() as u32).min(size - 1);
    for y in lo(cy)..=hi(cy) {
        for x in lo(cx)..=hi(cx) {
            if (x as f32 + 0.5 - cx).hypot(y as f32 + 0.5 - cy) <= r {
                let p = &mut buf[(y * size + x) as usize];
                *p = p.max(value);
            }
        }
    }
}

fn save(img: &image::DynamicImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Write the dataset under `root` (`train/normal`, `test/normal`,
/// `test/abnormal`, `test/masks/exudate`).
pub fn generate(root: impl AsRef<Path>, cfg: &SynthConfig) -> Result<SynthSummary> {
    let root = root.as_ref();
    if cfg.size < 64 {
        return Err(Error::InvalidConfig(format!(
            "synthetic image size must be ≥ 64, got {}",
            cfg.size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = SynthSummary::default();
    let groups = [
        ("train/normal", "normal", cfg.train_normal, false),
        ("test/normal", "normal_test", cfg.test_normal, false),
        ("test/abnormal", "lesion", cfg.test_abnormal, true),
    ];
    for (dir, prefix, count, abnormal) in groups {
        for i in 0..count {
            let lesions = if abnormal { rng.random_range(1..4) } else { 0 };
            let (img, mask) = render(cfg.size, &mut rng, lesions);
            let name = format!("{prefix}_{i:03}.png");
            let path = root.join(dir).join(&name);
            save(&img.into(), &path)?;
            out.images.push(path);
            if abnormal {
                let mpath = root.join("test/masks/exudate").join(&name);
                save(&mask.into(), &mpath)?;
                out.masks.push(mpath);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{index_dataset, Label, Layout, LesionKind, Split};

    #[test]
    fn generated_tree_indexes_as_generic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            train_normal: 3,
            test_normal: 1,
            test_abnormal: 2,
            size: 96,
            seed: 1,
        };
        let summary = generate(dir.path(), &cfg).unwrap();
        assert_eq!(summary.images.len(), 6);
        assert_eq!(summary.masks.len(), 2);
        let index = index_dataset(dir.path(), Layout::Generic).unwrap();
        let counts = index.counts();
        assert_eq!(
            (counts.train_normal, counts.test_normal, counts.test_abnormal),
            (3, 1, 2)
        );
        for e in index.split(Split::Test).filter(|e| e.label == Label::Abnormal) {
            assert_eq!(e.mask_paths.len(), 1);
            assert_eq!(e.mask_paths[0].kind, LesionKind::Exudate);
        }
    }

    #[test]
    fn generation_is_seeded() {
        let cfg = SynthConfig {
            size: 64,
            ..SynthConfig::default()
        };
        let mut a = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut b = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (ia, ma) = render(cfg.size, &mut a, 2);
        let (ib, mb) = render(cfg.size, &mut b, 2);
        assert_eq!(ia, ib);
        assert_eq!(ma, mb);
        assert!(ma.pixels().any(|p| p.0[0] == 255));
    }
}
