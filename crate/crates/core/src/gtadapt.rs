//! Basal-slice detection from ground-truth masks and the matching
//! ground-truth adaptation (clear slices above the base, strip RVC on it).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stacklab::{edge, CardiacStack, Class, LabelMask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasalDetectionParams {
    /// Upper bound on the RVC overlap ratio with the slice below.
    pub overlap_threshold: f64,
    /// Upper bound on the RVC area ratio with the slice below.
    pub area_threshold: f64,
}

impl Default for BasalDetectionParams {
    fn default() -> Self {
        BasalDetectionParams {
            overlap_threshold: 0.75,
            area_threshold: 0.8,
        }
    }
}

impl BasalDetectionParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("overlap threshold", self.overlap_threshold),
            ("area threshold", self.area_threshold),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::InvalidArgument(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// LVC touches BG or RVC somewhere, i.e. it is not enclosed by LVM.
pub fn lvc_open(mask: &LabelMask) -> bool {
    edge(mask, Class::Lvc, Class::Bg) + edge(mask, Class::Lvc, Class::Rvc) > 0
}

/// The RVC of `mask` shrinks substantially relative to `below`. False when
/// `below` has no RVC.
pub fn rvc_shrinks(mask: &LabelMask, below: &LabelMask, params: &BasalDetectionParams) -> bool {
    let below_area = below.count(Class::Rvc);
    if below_area == 0 {
        return false;
    }
    let rvc = Class::Rvc.code();
    let overlap = mask
        .codes()
        .iter()
        .zip(below.codes())
        .filter(|(&a, &b)| a == rvc && b == rvc)
        .count();
    let area = mask.count(Class::Rvc);
    overlap as f64 / below_area as f64 <= params.overlap_threshold
        && area as f64 / below_area as f64 <= params.area_threshold
}

/// Scans masks from the apex (last index) towards the base and returns the
/// first slice whose LVC is open or whose RVC shrinks against the slice
/// below it; `-1` when no slice qualifies.
pub fn detect_basal_slice_in(masks: &[LabelMask], params: &BasalDetectionParams) -> i32 {
    for i in (0..masks.len()).rev() {
        if lvc_open(&masks[i]) {
            return i as i32;
        }
        if let Some(below) = masks.get(i + 1) {
            if rvc_shrinks(&masks[i], below, params) {
                return i as i32;
            }
        }
    }
    -1
}

pub fn detect_basal_slice(stack: &CardiacStack, params: &BasalDetectionParams) -> Result<i32> {
    params.validate()?;
    let masks = stack.masks().ok_or(Error::MissingMask(0))?;
    Ok(detect_basal_slice_in(masks, params))
}

/// Applies the adaptation rule to a mask sequence.
pub fn adapt_masks(masks: &[LabelMask], base: i32) -> Result<Vec<LabelMask>> {
    if base < -1 || base >= masks.len() as i32 {
        return Err(Error::InvalidArgument(format!(
            "base {base} outside [-1, {}]",
            masks.len() as i32 - 1
        )));
    }
    Ok(masks
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let i = i as i32;
            if i < base {
                LabelMask::background(m.rows(), m.cols())
            } else if i == base {
                let mut m = m.clone();
                m.relabel(Class::Rvc, Class::Bg);
                m
            } else {
                m.clone()
            }
        })
        .collect())
}

/// Returns a copy of the stack with adapted masks and the base recorded.
pub fn adapt_ground_truth(stack: &CardiacStack, base: i32) -> Result<CardiacStack> {
    let masks = stack.masks().ok_or(Error::MissingMask(0))?;
    let adapted = adapt_masks(masks, base)?;
    let mut out = stack.clone().with_masks(Some(adapted))?;
    out.set_base_index(Some(base))?;
    Ok(out)
}
