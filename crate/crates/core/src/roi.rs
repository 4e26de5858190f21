//! Region-of-interest determination: segment the heart on a band of ED
//! slices, take the union of the largest components, cover it with a
//! square, pad and clip it to the image, then crop both phases.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Checkpoint;
use crate::netbuilder::NetKind;
use crate::nn::{Mode, Network, Tensor};
use crate::preprocess::{prepare_roi_input, unpad_resize, PreprocessConfig};
use crate::stacklab::{largest_true_component, CardiacStack, Class, Grid, Image, LabelMask};

/// Fraction of the covering square's side added as margin on each side.
pub const PAD_FRACTION: f64 = 0.3;
pub const THRESHOLD: f64 = 0.5;
/// Band of ED slices, as fractions of the stack, searched for the heart.
pub const DEFAULT_RANGE: (f64, f64) = (0.2, 0.6);
/// Band for stacks that start well above the base.
pub const ACDC_RANGE: (f64, f64) = (0.1, 0.5);

/// Square crop window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiBox {
    pub top: usize,
    pub left: usize,
    pub side: usize,
}

impl RoiBox {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.top && r < self.top + self.side && c >= self.left && c < self.left + self.side
    }

    /// Whether every `true` pixel lies inside the box.
    pub fn covers(&self, g: &Grid<bool>) -> bool {
        let cols = g.cols();
        g.data()
            .iter()
            .enumerate()
            .all(|(i, &on)| !on || self.contains(i / cols, i % cols))
    }

    fn check(&self, rows: usize, cols: usize) -> Result<()> {
        if self.side == 0 || self.top + self.side > rows || self.left + self.side > cols {
            return Err(Error::InvalidArgument(format!(
                "box {self:?} outside a {rows}x{cols} image"
            )));
        }
        Ok(())
    }
}

/// Inclusive bounding box `(r0, c0, r1, c1)` of the `true` pixels.
pub fn bounding_box(g: &Grid<bool>) -> Option<(usize, usize, usize, usize)> {
    let cols = g.cols();
    let mut bb: Option<(usize, usize, usize, usize)> = None;
    for (i, _) in g.data().iter().enumerate().filter(|(_, &on)| on) {
        let (r, c) = (i / cols, i % cols);
        bb = Some(match bb {
            None => (r, c, r, c),
            Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
        });
    }
    bb
}

/// Margin added per side for a covering square of side `s`.
pub fn pad_for(side: usize) -> usize {
    ((PAD_FRACTION * side as f64).round() as usize).max(1)
}

/// Minimal covering square of the union, padded and clipped to the image.
///
/// The square is centred on the bounding box. When it sticks out of the
/// image it is shifted back inside; it only shrinks when the image itself is
/// smaller than the padded side.
pub fn box_from_union(union: &Grid<bool>) -> Result<RoiBox> {
    let (r0, c0, r1, c1) = bounding_box(union).ok_or(Error::NoRoi)?;
    let (h, w) = (r1 - r0 + 1, c1 - c0 + 1);
    let s = h.max(w);
    let pad = pad_for(s);
    let side = s + 2 * pad;
    let top = r0 as i64 - ((s - h) / 2) as i64 - pad as i64;
    let left = c0 as i64 - ((s - w) / 2) as i64 - pad as i64;

    let (rows, cols) = union.dims();
    let side = side.min(rows).min(cols);
    let place = |start: i64, len: usize| start.clamp(0, (len - side) as i64) as usize;
    Ok(RoiBox {
        top: place(top, rows),
        left: place(left, cols),
        side,
    })
}

/// Heart detector run slice by slice.
pub trait HeartDetector {
    /// Binary heart mask at the slice's own resolution.
    fn heart_mask(&mut self, image: &Image) -> Result<Grid<bool>>;
}

/// ROI-net wrapper: ROI preprocessing, sigmoid output, threshold 0.5.
pub struct RoiNet {
    network: Network,
    preprocess: PreprocessConfig,
}

impl RoiNet {
    pub fn new(checkpoint: &Checkpoint) -> Result<Self> {
        if checkpoint.spec.kind != NetKind::Roi {
            return Err(Error::InvalidArgument(format!(
                "ROI determination needs a roi checkpoint, got {}",
                checkpoint.spec.kind
            )));
        }
        let size = checkpoint.spec.inputs[0].size;
        Ok(RoiNet {
            network: checkpoint.network()?,
            preprocess: PreprocessConfig::roi_net().with_target(size),
        })
    }

    /// Heart probabilities at network resolution.
    pub fn probabilities(&mut self, image: &Image) -> Result<Grid<f64>> {
        let x = prepare_roi_input(image, &self.preprocess)?;
        let size = self.preprocess.target_size;
        let t = Tensor::new(vec![1, 1, size, size], x.into_data())?;
        let mut out = self
            .network
            .forward(HashMap::from([("image".to_string(), t)]), Mode::Eval)?;
        self.network.clear_cache();
        let probs = out.remove("probs").expect("declared output");
        Grid::new(size, size, probs.into_data())
    }
}

impl HeartDetector for RoiNet {
    fn heart_mask(&mut self, image: &Image) -> Result<Grid<bool>> {
        let p = self.probabilities(image)?;
        let (rows, cols) = image.dims();
        Ok(unpad_resize(&p.map(|v| v > THRESHOLD), rows, cols))
    }
}

/// Union of the largest heart component of every slice in `S[lo·N, hi·N]`.
pub fn heart_union(
    ed: &CardiacStack,
    detector: &mut dyn HeartDetector,
    range: (f64, f64),
) -> Result<Grid<bool>> {
    let n = ed.len() as f64;
    let sub = ed.substack(range.0 * n, range.1 * n)?;
    let (rows, cols) = ed.dims();
    let mut union = Grid::filled(rows, cols, false);
    for slice in &sub.slices {
        let m = largest_true_component(&detector.heart_mask(slice)?);
        for (u, &v) in union.data_mut().iter_mut().zip(m.data()) {
            *u |= v;
        }
    }
    Ok(union)
}

pub fn determine_roi(
    ed: &CardiacStack,
    detector: &mut dyn HeartDetector,
    range: (f64, f64),
) -> Result<RoiBox> {
    if !(0.0..=1.0).contains(&range.0) || !(0.0..=1.0).contains(&range.1) || range.0 >= range.1 {
        return Err(Error::InvalidArgument(format!(
            "ROI range must satisfy 0 <= lo < hi <= 1, got {range:?}"
        )));
    }
    box_from_union(&heart_union(ed, detector, range)?)
}

/// Box derived from ground-truth masks (union of all non-BG pixels) with
/// the same padding rule.
pub fn box_from_masks(masks: &[LabelMask]) -> Result<RoiBox> {
    let (rows, cols) = masks
        .first()
        .map(|m| m.dims())
        .ok_or_else(|| Error::InvalidArgument("no masks".into()))?;
    let mut union = Grid::filled(rows, cols, false);
    for m in masks {
        for (u, &c) in union.data_mut().iter_mut().zip(m.codes()) {
            *u |= c != 0;
        }
    }
    box_from_union(&union)
}

/// Crops every slice and mask to the box; metadata is kept.
pub fn crop(stack: &CardiacStack, b: &RoiBox) -> Result<CardiacStack> {
    let (rows, cols) = stack.dims();
    b.check(rows, cols)?;
    let slices = stack
        .slices()
        .iter()
        .map(|s| s.window(b.top, b.left, b.side, b.side))
        .collect();
    let masks = stack.masks().map(|ms| {
        ms.iter()
            .map(|m| m.window(b.top, b.left, b.side, b.side))
            .collect()
    });
    CardiacStack::new(
        slices,
        stack.spacing,
        stack.thickness,
        stack.phase,
        stack.base_index(),
        masks,
    )
}

/// Places masks predicted on a crop back into a `rows`×`cols` background.
pub fn uncrop(masks: &[LabelMask], b: &RoiBox, rows: usize, cols: usize) -> Result<Vec<LabelMask>> {
    b.check(rows, cols)?;
    masks
        .iter()
        .map(|m| {
            if m.dims() != (b.side, b.side) {
                return Err(Error::InvalidArgument(format!(
                    "mask is {:?}, box side is {}",
                    m.dims(),
                    b.side
                )));
            }
            Ok(LabelMask::from_fn(rows, cols, |r, c| {
                if b.contains(r, c) {
                    m.get(r - b.top, c - b.left)
                } else {
                    Class::Bg
                }
            }))
        })
        .collect()
}
