//! Region-and-spatial-aware feature combination.
//!
//! `C = P + R`, where `R` is the fused feature map filtered depthwise by a
//! fixed radially decaying kernel and `P` is a parameter-free spatial
//! self-attention over all positions of the same map.

use ndarray::{s, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::{FeatureMap, Level};

pub const DEFAULT_RADIUS: usize = 12;
pub const DEFAULT_BLOCK_ROWS: usize = 512;

/// Normalized `(2r+1) × (2r+1)` filter whose pre-normalization weight at
/// offset `d` is `max(0, 1 − ‖d‖₂ / (r + 1))`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionKernel {
    radius: usize,
    weights: Array2<f32>,
}

impl RegionKernel {
    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn weights(&self) -> &Array2<f32> {
        &self.weights
    }

    /// Nonzero taps as `(dy, dx, weight)`.
    fn taps(&self) -> Vec<(isize, isize, f32)> {
        let r = self.radius as isize;
        self.weights
            .indexed_iter()
            .filter(|(_, &w)| w > 0.0)
            .map(|((y, x), &w)| (y as isize - r, x as isize - r, w))
            .collect()
    }
}

pub fn make_region_kernel(radius: usize) -> RegionKernel {
    let side = 2 * radius + 1;
    let r = radius as f64;
    let raw = Array2::from_shape_fn((side, side), |(y, x)| {
        let dy = y as f64 - r;
        let dx = x as f64 - r;
        (1.0 - (dy * dy + dx * dx).sqrt() / (r + 1.0)).max(0.0)
    });
    let total = raw.sum();
    RegionKernel {
        radius,
        weights: raw.mapv(|w| (w / total) as f32),
    }
}

/// Depthwise 2-D correlation with replicate padding; output shape equals input.
pub fn region_filter(features: &FeatureMap, kernel: &RegionKernel) -> FeatureMap {
    if kernel.radius == 0 {
        return features.clone().with_level(Level::Region);
    }
    let (h, w, c) = features.dim();
    let src = features.as_slice();
    let taps = kernel.taps();
    let mut out = vec![0f32; h * w * c];
    out.par_chunks_mut(w * c).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let acc = &mut row[x * c..(x + 1) * c];
            for &(dy, dx, wt) in &taps {
                let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                let s = &src[(sy * w + sx) * c..(sy * w + sx + 1) * c];
                for (a, b) in acc.iter_mut().zip(s) {
                    *a += wt * b;
                }
            }
        }
    });
    let data = ndarray::Array3::from_shape_vec((h, w, c), out).expect("sized above");
    FeatureMap::from_parts(data, Level::Region)
}

/// Row-stochastic `(h·w) × (h·w)` attention matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    data: Array2<f32>,
}

impl AttentionMap {
    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }
}

/// Max-shifted softmax over each row, in place.
fn softmax_rows(logits: &mut Array2<f32>) {
    for mut row in logits.axis_iter_mut(Axis(0)) {
        let max = row.fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0f64;
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e as f64;
            e
        });
        let inv = (1.0 / sum) as f32;
        row.mapv_inplace(|v| v * inv);
    }
}

/// Softmax(X·Xᵀ) for rows `start..end` of `x`.
fn attention_block(x: ndarray::ArrayView2<'_, f32>, start: usize, end: usize) -> Result<Array2<f32>> {
    let mut logits = x.slice(s![start..end, ..]).dot(&x.t());
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::OverflowGuard);
    }
    softmax_rows(&mut logits);
    Ok(logits)
}

/// Full attention matrix. Quadratic in `h·w`; meant for inspection and tests.
pub fn attention_map(features: &FeatureMap) -> Result<AttentionMap> {
    let x = features.rows();
    Ok(AttentionMap {
        data: attention_block(x, 0, x.nrows())?,
    })
}

/// `P = softmax(X·Xᵀ)·X` over the flattened positions `X ∈ ℝ^{(h·w)×c}`,
/// computed `block_rows` query rows at a time so at most
/// `block_rows × h·w` logits are live per worker.
pub fn spatial_attention(features: &FeatureMap, block_rows: usize) -> Result<FeatureMap> {
    if block_rows == 0 {
        return Err(Error::InvalidConfig("attention block rows must be positive".into()));
    }
    let x = features.rows();
    let n = x.nrows();
    let starts: Vec<usize> = (0..n).step_by(block_rows).collect();
    let blocks = starts
        .par_iter()
        .map(|&start| {
            let end = (start + block_rows).min(n);
            Ok(attention_block(x, start, end)?.dot(&x))
        })
        .collect::<Result<Vec<Array2<f32>>>>()?;
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let rows = ndarray::concatenate(Axis(0), &views).expect("blocks share column count");
    FeatureMap::from_rows(rows, features.height(), features.width(), Level::Spatial).map_err(|_| Error::OverflowGuard)
}

/// Elementwise `P + R`.
pub fn combine(spatial: &FeatureMap, region: &FeatureMap) -> Result<FeatureMap> {
    if spatial.dim() != region.dim() {
        return Err(Error::Shape(format!(
            "cannot combine {:?} with {:?}",
            spatial.dim(),
            region.dim()
        )));
    }
    Ok(FeatureMap::from_parts(spatial.data() + region.data(), Level::Combined))
}

/// Which branches contribute to the banked feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ResCMode {
    /// `C = P + R`.
    #[default]
    Full,
    /// `C = R` (spatial branch disabled).
    RegionOnly,
    /// `C = P` (region branch disabled).
    SpatialOnly,
    /// `C = F`, the fused backbone features.
    Off,
}

impl ResCMode {
    pub fn from_flags(disable_resc: bool, disable_region: bool, disable_spatial: bool) -> Result<Self> {
        match (disable_resc, disable_region, disable_spatial) {
            (true, _, _) | (false, true, true) => Ok(ResCMode::Off),
            (false, true, false) => Ok(ResCMode::SpatialOnly),
            (false, false, true) => Ok(ResCMode::RegionOnly),
            (false, false, false) => Ok(ResCMode::Full),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ResCMode::Full => "with ReSC",
            ResCMode::RegionOnly => "wo Spatial Module",
            ResCMode::SpatialOnly => "wo Region Module",
            ResCMode::Off => "wo ReSC",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResCConfig {
    pub radius: usize,
    pub block_rows: usize,
    pub mode: ResCMode,
}

impl Default for ResCConfig {
    fn default() -> Self {
        Self {
            radius: DEFAULT_RADIUS,
            block_rows: DEFAULT_BLOCK_ROWS,
            mode: ResCMode::Full,
        }
    }
}

/// Apply the configured combination to a fused feature map.
pub fn apply(features: &FeatureMap, cfg: &ResCConfig) -> Result<FeatureMap> {
    let region = || region_filter(features, &make_region_kernel(cfg.radius));
    let out = match cfg.mode {
        ResCMode::Full => combine(&spatial_attention(features, cfg.block_rows)?, &region())?,
        ResCMode::RegionOnly => region(),
        ResCMode::SpatialOnly => spatial_attention(features, cfg.block_rows)?,
        ResCMode::Off => features.clone(),
    };
    Ok(out.with_level(Level::Combined))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn fmap(h: usize, w: usize, c: usize, data: Vec<f32>) -> FeatureMap {
        FeatureMap::new(Array3::from_shape_vec((h, w, c), data).unwrap(), Level::Fused).unwrap()
    }

    #[test]
    fn radius_zero_is_identity() {
        let k = make_region_kernel(0);
        assert_eq!(k.weights(), &Array2::from_elem((1, 1), 1.0));
        let f = fmap(
            2,
            3,
            2,
            vec![1.0, -0.0, 3.5, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0],
        );
        let r = region_filter(&f, &k);
        let bits = |m: &FeatureMap| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&r), bits(&f));
    }

    #[test]
    fn radius_one_kernel_matches_hand_values() {
        let k = make_region_kernel(1);
        let corner = 1.0 - 2f64.sqrt() / 2.0;
        let total = 1.0 + 4.0 * 0.5 + 4.0 * corner;
        let w = k.weights();
        assert!((w[(1, 1)] as f64 - 1.0 / total).abs() < 1e-7);
        assert!((w[(0, 1)] as f64 - 0.5 / total).abs() < 1e-7);
        assert!((w[(0, 0)] as f64 - corner / total).abs() < 1e-7);
        assert!((corner - 0.292_893).abs() < 1e-6);
    }

    #[test]
    fn radius_twelve_kernel_is_normalized_and_monotone() {
        let k = make_region_kernel(12);
        assert_eq!(k.weights().dim(), (25, 25));
        assert!((k.weights().sum() - 1.0).abs() < 1e-6);
        // Weights never increase moving away from the center along a row.
        let row = k.weights().row(12);
        for x in 12..24 {
            assert!(row[x + 1] <= row[x]);
        }
        assert_eq!(k.weights()[(0, 0)], 0.0);
    }

    #[test]
    fn impulse_stamps_the_kernel() {
        let k = make_region_kernel(1);
        let mut data = vec![0.0; 25];
        data[12] = 1.0;
        let r = region_filter(&fmap(5, 5, 1, data), &k);
        for y in 0..5 {
            for x in 0..5 {
                let got = r.data()[(y, x, 0)];
                let (dy, dx) = (y as isize - 2, x as isize - 2);
                let want = if dy.abs() <= 1 && dx.abs() <= 1 {
                    k.weights()[((dy + 1) as usize, (dx + 1) as usize)]
                } else {
                    0.0
                };
                assert!((got - want).abs() < 1e-7, "({y},{x}) {got} vs {want}");
            }
        }
    }

    #[test]
    fn border_uses_replicate_padding() {
        // Left column 1, rest 0: a zero-padded filter would dim the corner.
        let f = fmap(3, 3, 1, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let k = make_region_kernel(1);
        let r = region_filter(&f, &k);
        let w = k.weights();
        let left_column_share = w.column(0).sum() + w.column(1).sum();
        assert!((r.data()[(0, 0, 0)] - left_column_share).abs() < 1e-6);
    }

    #[test]
    fn single_position_attention_is_identity() {
        let f = fmap(1, 1, 3, vec![5.0, -1.0, 2.0]);
        let a = attention_map(&f).unwrap();
        assert_eq!(a.data(), &Array2::from_elem((1, 1), 1.0));
        assert_eq!(spatial_attention(&f, 4).unwrap().as_slice(), f.as_slice());
    }

    #[test]
    fn identical_positions_give_uniform_rows() {
        let f = fmap(1, 2, 2, vec![0.3, 0.7, 0.3, 0.7]);
        let a = attention_map(&f).unwrap();
        assert!(a.data().iter().all(|v| (v - 0.5).abs() < 1e-7));
        let p = spatial_attention(&f, 1).unwrap();
        for (x, y) in p.as_slice().iter().zip(f.as_slice()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn orthonormal_pair_matches_hand_softmax() {
        let f = fmap(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let e = std::f64::consts::E;
        let hi = (e / (e + 1.0)) as f32;
        let lo = (1.0 / (e + 1.0)) as f32;
        assert!((hi - 0.7311).abs() < 1e-4 && (lo - 0.2689).abs() < 1e-4);
        let a = attention_map(&f).unwrap();
        assert!((a.data()[(0, 0)] - hi).abs() < 1e-6 && (a.data()[(0, 1)] - lo).abs() < 1e-6);
        let p = spatial_attention(&f, 2).unwrap();
        assert!((p.data()[(0, 0, 0)] - hi).abs() < 1e-6);
        assert!((p.data()[(0, 0, 1)] - lo).abs() < 1e-6);
        assert!((p.data()[(0, 1, 0)] - lo).abs() < 1e-6);
    }

    #[test]
    fn huge_logits_stay_finite_but_overflow_is_reported() {
        let big = fmap(1, 2, 1, vec![300.0, 299.0]);
        let p = spatial_attention(&big, 8).unwrap();
        assert!(p.as_slice().iter().all(|v| v.is_finite()));
        let overflow = fmap(1, 2, 1, vec![1e20, 1e20]);
        assert!(matches!(spatial_attention(&overflow, 8), Err(Error::OverflowGuard)));
        assert!(matches!(spatial_attention(&big, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn combine_is_elementwise_sum() {
        let p = fmap(1, 2, 1, vec![1.0, 2.0]);
        let zero = fmap(1, 2, 1, vec![0.0, 0.0]);
        assert_eq!(combine(&zero, &p).unwrap().as_slice(), p.as_slice());
        assert_eq!(combine(&p, &zero).unwrap().as_slice(), p.as_slice());
        let other = fmap(2, 1, 1, vec![0.0, 0.0]);
        assert!(matches!(combine(&p, &other), Err(Error::Shape(_))));
    }

    #[test]
    fn modes_route_branches() {
        let f = fmap(3, 3, 2, (0..18).map(|v| (v as f32 * 0.37).sin()).collect());
        let cfg = |mode| ResCConfig {
            radius: 1,
            block_rows: 4,
            mode,
        };
        let off = apply(&f, &cfg(ResCMode::Off)).unwrap();
        assert_eq!(off.as_slice(), f.as_slice());
        let region = apply(&f, &cfg(ResCMode::RegionOnly)).unwrap();
        let spatial = apply(&f, &cfg(ResCMode::SpatialOnly)).unwrap();
        let full = apply(&f, &cfg(ResCMode::Full)).unwrap();
        for i in 0..18 {
            let sum = region.as_slice()[i] + spatial.as_slice()[i];
            assert!((full.as_slice()[i] - sum).abs() < 1e-6);
        }
        assert_eq!(ResCMode::from_flags(false, true, false).unwrap(), ResCMode::SpatialOnly);
        assert_eq!(ResCMode::from_flags(true, false, false).unwrap(), ResCMode::Off);
    }

    fn random_map(h: usize, w: usize, c: usize) -> impl Strategy<Value = FeatureMap> {
        proptest::collection::vec(-2.0f32..2.0, h * w * c).prop_map(move |v| fmap(h, w, c, v))
    }

    proptest! {
        #[test]
        fn region_filter_is_linear(
            (f, g) in (1usize..7, 1usize..7, 1usize..4).prop_flat_map(|(h, w, c)| (random_map(h, w, c), random_map(h, w, c))),
            a in -3.0f32..3.0,
            b in -3.0f32..3.0,
            r in 0usize..4,
        ) {
            let k = make_region_kernel(r);
            let mix = FeatureMap::new(f.data() * a + g.data() * b, Level::Fused).unwrap();
            let lhs = region_filter(&mix, &k);
            let rf = region_filter(&f, &k);
            let rg = region_filter(&g, &k);
            for i in 0..lhs.as_slice().len() {
                let rhs = a * rf.as_slice()[i] + b * rg.as_slice()[i];
                prop_assert!((lhs.as_slice()[i] - rhs).abs() < 1e-5);
            }
        }

        #[test]
        fn attention_is_permutation_equivariant(
            f in (1usize..5, 1usize..5, 1usize..4).prop_flat_map(|(h, w, c)| random_map(h, w, c)),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let n = f.height() * f.width();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let rows = f.rows();
            let permuted = Array2::from_shape_fn((n, f.channels()), |(i, k)| rows[(perm[i], k)]);
            let g = FeatureMap::from_rows(permuted, 1, n, Level::Fused).unwrap();
            let pf = spatial_attention(&f, 3).unwrap();
            let pg = spatial_attention(&g, 3).unwrap();
            let (pf, pg) = (pf.rows(), pg.rows());
            for i in 0..n {
                for k in 0..f.channels() {
                    prop_assert!((pg[(i, k)] - pf[(perm[i], k)]).abs() < 1e-5);
                }
            }
        }
    }
}
