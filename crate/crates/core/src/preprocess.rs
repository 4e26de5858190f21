//! Image conditioning ahead of the networks.
//!
//! ROI-net inputs go through percentile clipping, an 8-bit rescale, CLAHE,
//! square padding with nearest-neighbour resizing and windowed
//! normalisation. Segmentation-net inputs skip the clipping and CLAHE.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stacklab::{one_hot, Class, Grid, Image, LabelMask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub target_size: usize,
    pub clip_limit: f64,
    /// Tile grid as (rows, cols).
    pub tile_grid: (usize, usize),
    /// Percentile window used for clipping and normalisation statistics.
    pub percentiles: (f64, f64),
}

impl PreprocessConfig {
    pub fn roi_net() -> Self {
        PreprocessConfig {
            target_size: 128,
            clip_limit: 3.0,
            tile_grid: (8, 8),
            percentiles: (5.0, 95.0),
        }
    }

    pub fn segmentation_net() -> Self {
        PreprocessConfig {
            target_size: 192,
            ..PreprocessConfig::roi_net()
        }
    }

    pub fn with_target(mut self, target_size: usize) -> Self {
        self.target_size = target_size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_size == 0 || self.target_size % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "target size must be positive and even, got {}",
                self.target_size
            )));
        }
        if self.clip_limit < 1.0 {
            return Err(Error::InvalidArgument(format!(
                "clip limit must be at least 1, got {}",
                self.clip_limit
            )));
        }
        let (lo, hi) = self.percentiles;
        if !(0.0..=100.0).contains(&lo) || !(0.0..=100.0).contains(&hi) || lo > hi {
            return Err(Error::InvalidArgument(format!("bad percentile window {lo}..{hi}")));
        }
        Ok(())
    }
}

/// Linearly interpolated percentile of an already sorted sample.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = p / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn sorted_values(image: &Grid<f64>) -> Vec<f64> {
    let mut v = image.data().to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// `(p_lo, p_hi)` of the pixel values.
pub fn percentile_window(image: &Grid<f64>, window: (f64, f64)) -> (f64, f64) {
    let sorted = sorted_values(image);
    (
        percentile_sorted(&sorted, window.0),
        percentile_sorted(&sorted, window.1),
    )
}

pub fn clip_percentiles(image: &Grid<f64>, window: (f64, f64)) -> Grid<f64> {
    let (lo, hi) = percentile_window(image, window);
    image.map(|v| v.clamp(lo, hi))
}

/// Linear min-max rescale onto integer levels 0..=255.
pub fn rescale_to_u8(image: &Grid<f64>) -> Grid<u8> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in image.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi <= lo {
        return image.map(|_| 0);
    }
    let scale = 255.0 / (hi - lo);
    image.map(|v| ((v - lo) * scale).round().clamp(0.0, 255.0) as u8)
}

/// Tile boundaries `[start, end)` splitting `len` into `n` near-equal parts.
pub(crate) fn tile_bounds(len: usize, n: usize) -> Vec<(usize, usize)> {
    (0..n).map(|t| (t * len / n, (t + 1) * len / n)).collect()
}

/// Clipped, redistributed histogram turned into an equalisation table.
fn tile_lut(hist: &mut [u32; 256], area: usize, clip_limit: f64) -> [u8; 256] {
    let clip = ((clip_limit * area as f64 / 256.0) as u32).max(1);
    let mut excess = 0u32;
    for h in hist.iter_mut() {
        if *h > clip {
            excess += *h - clip;
            *h = clip;
        }
    }
    let batch = excess / 256;
    let mut residual = excess - batch * 256;
    for h in hist.iter_mut() {
        *h += batch;
    }
    if residual > 0 {
        let step = (256 / residual as usize).max(1);
        let mut i = 0;
        while i < 256 && residual > 0 {
            hist[i] += 1;
            residual -= 1;
            i += step;
        }
    }
    let scale = 255.0 / area as f64;
    let mut lut = [0u8; 256];
    let mut sum = 0u64;
    for (l, &h) in lut.iter_mut().zip(hist.iter()) {
        sum += h as u64;
        *l = (sum as f64 * scale).round().clamp(0.0, 255.0) as u8;
    }
    lut
}

/// Interpolation anchors for one axis: for each coordinate, the two tile
/// indices and the weight of the second.
fn axis_weights(len: usize, bounds: &[(usize, usize)]) -> Vec<(usize, usize, f64)> {
    let centers: Vec<f64> = bounds
        .iter()
        .map(|&(s, e)| (s + e) as f64 / 2.0 - 0.5)
        .collect();
    let last = centers.len() - 1;
    (0..len)
        .map(|x| {
            let x = x as f64;
            if x <= centers[0] {
                (0, 0, 0.0)
            } else if x >= centers[last] {
                (last, last, 0.0)
            } else {
                let j = centers.iter().rposition(|&c| c <= x).unwrap_or(0).min(last - 1);
                let w = (x - centers[j]) / (centers[j + 1] - centers[j]);
                (j, j + 1, w)
            }
        })
        .collect()
}

/// Contrast-limited adaptive histogram equalisation on 8-bit data.
pub fn clahe(image: &Grid<u8>, clip_limit: f64, tile_grid: (usize, usize)) -> Result<Grid<u8>> {
    let (rows, cols) = image.dims();
    let (gy, gx) = tile_grid;
    if gy == 0 || gx == 0 || rows < gy || cols < gx {
        return Err(Error::InvalidArgument(format!(
            "image {rows}x{cols} is smaller than the {gy}x{gx} tile grid"
        )));
    }
    let ybounds = tile_bounds(rows, gy);
    let xbounds = tile_bounds(cols, gx);
    let mut luts = vec![[0u8; 256]; gy * gx];
    for (ty, &(y0, y1)) in ybounds.iter().enumerate() {
        for (tx, &(x0, x1)) in xbounds.iter().enumerate() {
            let mut hist = [0u32; 256];
            for y in y0..y1 {
                for x in x0..x1 {
                    hist[image.get(y, x) as usize] += 1;
                }
            }
            luts[ty * gx + tx] = tile_lut(&mut hist, (y1 - y0) * (x1 - x0), clip_limit);
        }
    }
    let yw = axis_weights(rows, &ybounds);
    let xw = axis_weights(cols, &xbounds);
    Ok(Grid::from_fn(rows, cols, |y, x| {
        let v = image.get(y, x) as usize;
        let (ty1, ty2, ya) = yw[y];
        let (tx1, tx2, xa) = xw[x];
        let l = |ty: usize, tx: usize| luts[ty * gx + tx][v] as f64;
        let top = l(ty1, tx1) * (1.0 - xa) + l(ty1, tx2) * xa;
        let bottom = l(ty2, tx1) * (1.0 - xa) + l(ty2, tx2) * xa;
        (top * (1.0 - ya) + bottom * ya).round().clamp(0.0, 255.0) as u8
    }))
}

/// Zero-pads to a centred square (odd remainders go to the bottom/right) and
/// resamples to `target x target` by nearest neighbour.
pub fn pad_resize<T: Copy + Default>(raster: &Grid<T>, target: usize) -> Grid<T> {
    let padded = pad_square(raster);
    resize_nearest(&padded, target, target)
}

pub fn pad_square<T: Copy + Default>(raster: &Grid<T>) -> Grid<T> {
    let (rows, cols) = raster.dims();
    let side = rows.max(cols);
    let top = (side - rows) / 2;
    let left = (side - cols) / 2;
    Grid::from_fn(side, side, |r, c| {
        if r >= top && r < top + rows && c >= left && c < left + cols {
            raster.get(r - top, c - left)
        } else {
            T::default()
        }
    })
}

/// Inverse of [`pad_resize`]: resamples back to the padded square and cuts
/// out the original `rows x cols` window.
pub fn unpad_resize<T: Copy + Default>(raster: &Grid<T>, rows: usize, cols: usize) -> Grid<T> {
    let side = rows.max(cols);
    let square = resize_nearest(raster, side, side);
    square.window((side - rows) / 2, (side - cols) / 2, rows, cols)
}

/// Nearest-neighbour resampling with aligned pixel centres: destination pixel
/// `i` reads source `floor((i + 0.5) * src / dst)`, so a down/up round trip
/// does not drift.
pub fn resize_nearest<T: Copy + Default>(raster: &Grid<T>, rows: usize, cols: usize) -> Grid<T> {
    let (sr, sc) = raster.dims();
    if (sr, sc) == (rows, cols) {
        return raster.clone();
    }
    Grid::from_fn(rows, cols, |r, c| {
        raster.get((2 * r + 1) * sr / (2 * rows), (2 * c + 1) * sc / (2 * cols))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub image: Grid<f64>,
    pub mean: f64,
    pub std: f64,
    /// The windowed standard deviation was zero, so the image was only shifted.
    pub std_fallback: bool,
}

/// Shift and scale by the mean and standard deviation of the pixels lying
/// inside the percentile window.
pub fn normalize(image: &Grid<f64>, window: (f64, f64)) -> Normalized {
    let (lo, hi) = percentile_window(image, window);
    let inside: Vec<f64> = image
        .data()
        .iter()
        .copied()
        .filter(|&v| v >= lo && v <= hi)
        .collect();
    let n = inside.len().max(1) as f64;
    let mean = inside.iter().sum::<f64>() / n;
    let var = inside.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let std_fallback = !(std > 1e-12);
    let div = if std_fallback { 1.0 } else { std };
    Normalized {
        image: image.map(|v| (v - mean) / div),
        mean,
        std,
        std_fallback,
    }
}

pub fn to_f64(image: &Image) -> Grid<f64> {
    image.map(|v| v as f64)
}

/// ROI-net recipe: clip, 8-bit rescale, CLAHE, pad/resize, normalise.
pub fn prepare_roi_input(image: &Image, cfg: &PreprocessConfig) -> Result<Grid<f64>> {
    cfg.validate()?;
    let clipped = clip_percentiles(&to_f64(image), cfg.percentiles);
    let eq = clahe(&rescale_to_u8(&clipped), cfg.clip_limit, cfg.tile_grid)?;
    let resized = pad_resize(&eq.map(|v| v as f64), cfg.target_size);
    Ok(normalize(&resized, cfg.percentiles).image)
}

/// Segmentation-net recipe: pad/resize then normalise.
pub fn prepare_seg_input(image: &Image, cfg: &PreprocessConfig) -> Result<Grid<f64>> {
    cfg.validate()?;
    let resized = pad_resize(&to_f64(image), cfg.target_size);
    Ok(normalize(&resized, cfg.percentiles).image)
}

/// Mask padded to a square and resized to `target` by nearest neighbour.
pub fn resize_mask(mask: &LabelMask, target: usize) -> LabelMask {
    let g = pad_resize(mask.grid(), target);
    LabelMask::new(target, target, g.into_data()).expect("codes preserved")
}

/// Context-mask channels at network resolution. `None` and all-background
/// (null) masks encode as zeros; with three classes RVC folds into BG.
pub fn encode_context_mask(mask: Option<&LabelMask>, classes: usize, target: usize) -> Result<Vec<f64>> {
    match mask.filter(|m| !m.is_background()) {
        None => Ok(vec![0.0; classes * target * target]),
        Some(m) => {
            let mut m = resize_mask(m, target);
            if classes <= Class::Rvc.code() as usize {
                m.relabel(Class::Rvc, Class::Bg);
            }
            Ok(one_hot(&m, classes)?.into_data())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    /// Second CLAHE written from the definition, pixel by pixel.
    fn reference_clahe(image: &Grid<u8>, clip_limit: f64, grid: (usize, usize)) -> Grid<u8> {
        let (rows, cols) = image.dims();
        let row_tiles: Vec<(usize, usize)> =
            (0..grid.0).map(|t| (t * rows / grid.0, (t + 1) * rows / grid.0)).collect();
        let col_tiles: Vec<(usize, usize)> =
            (0..grid.1).map(|t| (t * cols / grid.1, (t + 1) * cols / grid.1)).collect();

        // Equalised level of `v` within tile (ty, tx).
        let mapped = |ty: usize, tx: usize, v: u8| -> f64 {
            let (y0, y1) = row_tiles[ty];
            let (x0, x1) = col_tiles[tx];
            let area = (y1 - y0) * (x1 - x0);
            let mut counts = vec![0i64; 256];
            for y in y0..y1 {
                for x in x0..x1 {
                    counts[image.get(y, x) as usize] += 1;
                }
            }
            let limit = ((clip_limit * area as f64 / 256.0).floor() as i64).max(1);
            let excess: i64 = counts.iter().map(|&c| (c - limit).max(0)).sum();
            let uniform = excess / 256;
            let leftover = excess % 256;
            let bump: BTreeSet<usize> = if leftover > 0 {
                let step = (256 / leftover as usize).max(1);
                (0..leftover as usize).map(|k| k * step).filter(|&i| i < 256).collect()
            } else {
                BTreeSet::new()
            };
            let cdf: i64 = (0..=v as usize)
                .map(|b| counts[b].min(limit) + uniform + i64::from(bump.contains(&b)))
                .sum();
            (cdf as f64 * 255.0 / area as f64).round().min(255.0)
        };

        let anchor = |pos: usize, tiles: &[(usize, usize)]| -> (usize, usize, f64) {
            let centers: Vec<f64> =
                tiles.iter().map(|&(s, e)| (s as f64 + e as f64 - 1.0) / 2.0).collect();
            let p = pos as f64;
            let n = centers.len();
            if p <= centers[0] {
                return (0, 0, 0.0);
            }
            if p >= centers[n - 1] {
                return (n - 1, n - 1, 0.0);
            }
            for j in 0..n - 1 {
                if p >= centers[j] && p < centers[j + 1] {
                    return (j, j + 1, (p - centers[j]) / (centers[j + 1] - centers[j]));
                }
            }
            unreachable!()
        };

        Grid::from_fn(rows, cols, |y, x| {
            let v = image.get(y, x);
            let (a, b, wy) = anchor(y, &row_tiles);
            let (c, d, wx) = anchor(x, &col_tiles);
            let val = (1.0 - wy) * ((1.0 - wx) * mapped(a, c, v) + wx * mapped(a, d, v))
                + wy * ((1.0 - wx) * mapped(b, c, v) + wx * mapped(b, d, v));
            val.round() as u8
        })
    }

    fn entropy(image: &Grid<u8>) -> f64 {
        let mut h = [0usize; 256];
        for &v in image.data() {
            h[v as usize] += 1;
        }
        let n = image.data().len() as f64;
        h.iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.log2()
            })
            .sum()
    }

    #[test]
    fn percentiles_of_ramp() {
        let ramp = Grid::from_fn(10, 10, |r, c| (r * 10 + c) as f64);
        let (lo, hi) = percentile_window(&ramp, (5.0, 95.0));
        assert!((lo - 4.95).abs() < 1e-12 && (hi - 94.05).abs() < 1e-12);
        let clipped = clip_percentiles(&ramp, (5.0, 95.0));
        assert_eq!(clipped.get(0, 0), lo);
        assert_eq!(clipped.get(9, 9), hi);
        assert_eq!(clipped.get(5, 5), 55.0);
    }

    #[test]
    fn constant_image_unchanged_by_clipping() {
        let img = Grid::filled(4, 4, 3.5);
        assert_eq!(clip_percentiles(&img, (5.0, 95.0)), img);
    }

    #[test]
    fn outlier_pulled_to_p95() {
        let mut img = Grid::from_fn(10, 10, |r, c| ((r * 10 + c) % 7) as f64);
        img.set(3, 3, 1e6);
        let sorted = sorted_values(&img);
        let p95 = percentile_sorted(&sorted, 95.0);
        let out = clip_percentiles(&img, (5.0, 95.0));
        assert_eq!(out.get(3, 3), p95);
        assert!(p95 < 10.0);
    }

    #[test]
    fn clahe_constant_is_constant() {
        let img = Grid::filled(32, 32, 77u8);
        let out = clahe(&img, 3.0, (8, 8)).unwrap();
        let first = out.get(0, 0);
        assert!(out.data().iter().all(|&v| v == first));
    }

    #[test]
    fn clahe_rejects_tiny_image() {
        assert!(clahe(&Grid::filled(4, 16, 0u8), 3.0, (8, 8)).is_err());
    }

    #[test]
    fn clahe_matches_reference_on_two_level_fixture() {
        let img = Grid::from_fn(64, 64, |r, c| {
            if (r as i32 - 30).pow(2) + (c as i32 - 36).pow(2) < 300 { 180 } else { 60 }
        });
        let fast = clahe(&img, 3.0, (8, 8)).unwrap();
        let slow = reference_clahe(&img, 3.0, (8, 8));
        assert_eq!(fast, slow);
    }

    #[test]
    fn clahe_matches_reference_on_uneven_tiles() {
        let img = Grid::from_fn(45, 37, |r, c| ((r * 7 + c * 13 + r * c) % 256) as u8);
        assert_eq!(clahe(&img, 2.0, (8, 8)).unwrap(), reference_clahe(&img, 2.0, (8, 8)));
    }

    #[test]
    fn clahe_does_not_lower_entropy_on_ramp() {
        // diagonal ramp over a narrow band of grey levels
        let img = Grid::from_fn(64, 64, |r, c| (80 + (r + c) / 4) as u8);
        let out = clahe(&img, 3.0, (8, 8)).unwrap();
        assert!(entropy(&out) >= entropy(&img));

        // quadratic ramp with tiles large enough for the clip limit to bite
        let img = Grid::from_fn(128, 128, |_, c| {
            let t = c as f64 / 127.0;
            (100.0 + 40.0 * t * t).round() as u8
        });
        let out = clahe(&img, 3.0, (8, 8)).unwrap();
        assert!(entropy(&out) >= entropy(&img));
    }

    #[test]
    fn unpad_inverts_pad_resize() {
        let g = Grid::from_fn(5, 3, |r, c| (r * 3 + c) as u8);
        assert_eq!(unpad_resize(&pad_resize(&g, 10), 5, 3), g);
        assert_eq!(unpad_resize(&pad_resize(&g, 5), 5, 3), g);
    }

    #[test]
    fn pad_resize_identity_and_centering() {
        let sq = Grid::from_fn(4, 4, |r, c| (r * 4 + c) as u8);
        assert_eq!(pad_resize(&sq, 4), sq);

        let wide = Grid::filled(3, 5, 1u8);
        let padded = pad_square(&wide);
        assert_eq!(padded.dims(), (5, 5));
        assert!((0..5).all(|c| padded.get(0, c) == 0 && padded.get(4, c) == 0));
        assert!((1..4).all(|r| (0..5).all(|c| padded.get(r, c) == 1)));

        let tall = Grid::filled(4, 1, 1u8);
        let padded = pad_square(&tall);
        // three padding columns: one left, two right
        assert_eq!(padded.get(0, 1), 1);
        assert_eq!(padded.get(0, 0), 0);
        assert_eq!(padded.get(0, 2), 0);
    }

    #[test]
    fn nearest_upscale_makes_blocks() {
        let m = Grid::new(2, 2, vec![0u8, 1, 2, 3]).unwrap();
        let up = pad_resize(&m, 4);
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(up.get(r, c), m.get(r / 2, c / 2));
            }
        }
    }

    #[test]
    fn normalize_constant_falls_back() {
        let n = normalize(&Grid::filled(3, 3, 5.0), (5.0, 95.0));
        assert!(n.std_fallback);
        assert!(n.image.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_gaussian_sample() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let img = Grid::from_fn(64, 64, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            10.0 + 3.0 * z
        });
        let n = normalize(&img, (5.0, 95.0));
        let (lo, hi) = percentile_window(&n.image, (5.0, 95.0));
        let inside: Vec<f64> = n.image.data().iter().copied().filter(|&v| v >= lo && v <= hi).collect();
        let m = inside.iter().sum::<f64>() / inside.len() as f64;
        let s = (inside.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / inside.len() as f64).sqrt();
        assert!(m.abs() < 1e-9);
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn normalize_excludes_outliers_from_statistics() {
        let mut img = Grid::from_fn(10, 10, |r, c| ((r + c) % 4) as f64);
        img.set(0, 0, 1000.0);
        let n = normalize(&img, (5.0, 95.0));
        let (lo, hi) = percentile_window(&img, (5.0, 95.0));
        let inside: Vec<f64> = img.data().iter().copied().filter(|&v| v >= lo && v <= hi).collect();
        let mean = inside.iter().sum::<f64>() / inside.len() as f64;
        assert!((n.mean - mean).abs() < 1e-12);
        assert!(n.mean < 2.0);
        assert!((n.image.get(0, 0) - (1000.0 - mean) / n.std).abs() < 1e-9);
    }

    #[test]
    fn mask_resize_keeps_alphabet() {
        let m = Grid::from_fn(7, 3, |r, c| ((r + c) % 3) as u8 + 1);
        let out = pad_resize(&m, 10);
        let inputs: BTreeSet<u8> = m.data().iter().copied().chain([0]).collect();
        assert!(out.data().iter().all(|v| inputs.contains(v)));
    }

    #[test]
    fn roi_pipeline_deterministic_and_offset_invariant() {
        let img: Image = Grid::from_fn(40, 48, |r, c| ((r * 31 + c * 17) % 97) as f32 + 0.25 * r as f32);
        let cfg = PreprocessConfig::roi_net().with_target(32);
        let a = prepare_roi_input(&img, &cfg).unwrap();
        assert_eq!(a, prepare_roi_input(&img, &cfg).unwrap());
        let shifted = img.map(|v| v + 64.0);
        let b = prepare_roi_input(&shifted, &cfg).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}
