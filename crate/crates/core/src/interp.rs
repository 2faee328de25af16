//! Resampling kernels shared by image preprocessing, level fusion and score
//! upsampling. All of them use half-pixel centers (no corner alignment).

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use rayon::prelude::*;

/// Source taps for one output coordinate: `(i0, i1, weight of i1)`.
fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

/// Bilinear resize of a channel-last `h × w × c` array.
///
/// Same-size resizes reproduce the input exactly, and convex weights mean the
/// output never leaves the input's `[min, max]` range.
pub fn resize_bilinear(src: ArrayView3<'_, f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (in_h, in_w, c) = src.dim();
    assert!(in_h > 0 && in_w > 0 && out_h > 0 && out_w > 0, "empty resize");
    if (in_h, in_w) == (out_h, out_w) {
        return src.to_owned();
    }
    let ys = bilinear_taps(out_h, in_h);
    let xs = bilinear_taps(out_w, in_w);
    let mut out = Array3::<f32>::zeros((out_h, out_w, c));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(ys.par_iter())
        .for_each(|(mut row, &(y0, y1, wy))| {
            for (mut px, &(x0, x1, wx)) in row.axis_iter_mut(Axis(0)).zip(xs.iter()) {
                let w00 = (1.0 - wy) * (1.0 - wx);
                let w01 = (1.0 - wy) * wx;
                let w10 = wy * (1.0 - wx);
                let w11 = wy * wx;
                for ch in 0..c {
                    px[ch] = w00 * src[(y0, x0, ch)]
                        + w01 * src[(y0, x1, ch)]
                        + w10 * src[(y1, x0, ch)]
                        + w11 * src[(y1, x1, ch)];
                }
            }
        });
    out
}

pub fn resize_bilinear_2d(src: ArrayView2<'_, f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    let src3 = src.into_shape_with_order((h, w, 1)).expect("contiguous 2-D view");
    resize_bilinear(src3, out_h, out_w)
        .into_shape_with_order((out_h, out_w))
        .expect("single channel")
}

/// Nearest-neighbor resize; used for masks so they stay binary.
pub fn resize_nearest<T: Copy + Default>(src: ArrayView2<'_, T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (in_h, in_w) = src.dim();
    let pick = |o: usize, out_len: usize, in_len: usize| {
        let s = ((o as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize;
        s.min(in_len - 1)
    };
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        src[(pick(y, out_h, in_h), pick(x, out_w, in_w))]
    })
}

/// Separable Gaussian blur with replicate borders; kernel radius `ceil(4σ)`.
pub fn gaussian_blur(src: ArrayView2<'_, f32>, sigma: f32) -> Array2<f32> {
    if sigma <= 0.0 {
        return src.to_owned();
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * (sigma as f64).powi(2))).exp())
        .collect();
    let sum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= sum);

    let (h, w) = src.dim();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let horizontal = Array2::from_shape_fn((h, w), |(y, x)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, wt)| wt * src[(y, clamp(x as isize + k as isize - radius, w))] as f64)
            .sum::<f64>() as f32
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, wt)| wt * horizontal[(clamp(y as isize + k as isize - radius, h), x)] as f64)
            .sum::<f64>() as f32
    })
}
