//! Slice-by-slice segmentation with contextual input.
//!
//! Each prediction is checked for LV consistency: the LVM must be present
//! and the LVC mostly surrounded by it. Failing masks are reset to all-BG,
//! and a reset mask is passed on as a null (all-zero) context.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Checkpoint;
use crate::netbuilder::NetKind;
use crate::nn::{Mode, Network, Tensor};
use crate::preprocess::{encode_context_mask, prepare_seg_input, unpad_resize, PreprocessConfig};
use crate::stacklab::{edge, largest_component, Class, Grid, Image, LabelMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// Base to apex, each slice seeing the one above.
    TopDown,
    /// Middle slice first, then outwards in both directions.
    MidStart,
    /// Every slice on its own.
    Independent,
}

impl std::str::FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "propagate" | "top-down" => Ok(Direction::TopDown),
            "mid-start" => Ok(Direction::MidStart),
            "independent" => Ok(Direction::Independent),
            other => Err(Error::InvalidArgument(format!("unknown propagation mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropagationConfig {
    pub direction: Direction,
    /// A mask passes when `edge(LVC,BG) + edge(LVC,RVC) <= ratio * edge(LVC,LVM)`.
    pub success_ratio: f64,
    /// Extra clean-up rules for data whose basal slices are poorly aligned.
    pub acdc_rules: bool,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        PropagationConfig {
            direction: Direction::TopDown,
            success_ratio: 0.5,
            acdc_rules: false,
        }
    }
}

impl PropagationConfig {
    pub fn with_direction(mut self, direction: Direction) -> Self {
        self.direction = direction;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.success_ratio > 0.0 && self.success_ratio.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "success ratio must be positive, got {}",
                self.success_ratio
            )));
        }
        Ok(())
    }
}

/// LVM present and LVC mostly enclosed by it.
pub fn is_successful(mask: &LabelMask, ratio: f64) -> bool {
    if !mask.contains(Class::Lvm) {
        return false;
    }
    let open = edge(mask, Class::Lvc, Class::Bg) + edge(mask, Class::Lvc, Class::Rvc);
    open as f64 <= ratio * edge(mask, Class::Lvc, Class::Lvm) as f64
}

/// Resets unsuccessful masks to all-BG; otherwise keeps only the largest
/// RVC component.
pub fn postprocess(mask: &LabelMask, cfg: &PropagationConfig) -> LabelMask {
    let mask = if cfg.acdc_rules {
        acdc_postprocess(mask)
    } else {
        mask.clone()
    };
    if !is_successful(&mask, cfg.success_ratio) {
        return LabelMask::background(mask.rows(), mask.cols());
    }
    largest_component(&mask, Class::Rvc)
}

/// Requires both LVC and LVM, keeps their largest components and turns BG
/// pixels 4-adjacent to the LVC into LVM.
pub fn acdc_postprocess(mask: &LabelMask) -> LabelMask {
    let (rows, cols) = mask.dims();
    if !(mask.contains(Class::Lvc) && mask.contains(Class::Lvm)) {
        return LabelMask::background(rows, cols);
    }
    let m = largest_component(mask, Class::Lvc);
    let mut m = largest_component(&m, Class::Lvm);
    let lvc = m.select(|c| c == Class::Lvc);
    let touches = |r: usize, c: usize| {
        (r > 0 && lvc.get(r - 1, c))
            || (r + 1 < rows && lvc.get(r + 1, c))
            || (c > 0 && lvc.get(r, c - 1))
            || (c + 1 < cols && lvc.get(r, c + 1))
    };
    for r in 0..rows {
        for c in 0..cols {
            if m.get(r, c) == Class::Bg && touches(r, c) {
                m.set(r, c, Class::Lvm);
            }
        }
    }
    m
}

/// Contextual input for one prediction. Missing parts are null (zeros).
#[derive(Debug, Clone, Copy, Default)]
pub struct Context<'a> {
    pub image: Option<&'a Image>,
    pub mask: Option<&'a LabelMask>,
}

/// Anything that maps a slice (plus optional context) to a label mask.
pub trait SlicePredictor {
    fn kind(&self) -> NetKind;
    fn predict(&mut self, image: &Image, context: Option<Context<'_>>) -> Result<LabelMask>;
}

/// Network-backed predictor for the segmentation kinds.
pub struct NetPredictor {
    network: Network,
    preprocess: PreprocessConfig,
}

impl NetPredictor {
    pub fn new(checkpoint: &Checkpoint) -> Result<Self> {
        if checkpoint.spec.kind == NetKind::Roi {
            return Err(Error::InvalidArgument(
                "segmentation needs an lvrv/lv checkpoint, got roi".into(),
            ));
        }
        let size = checkpoint.spec.inputs[0].size;
        Ok(NetPredictor {
            network: checkpoint.network()?,
            preprocess: PreprocessConfig::segmentation_net().with_target(size),
        })
    }

    /// Network input tensors for one slice and its context.
    pub fn encode(
        kind: NetKind,
        preprocess: &PreprocessConfig,
        image: &Image,
        context: Option<Context<'_>>,
    ) -> Result<HashMap<String, Tensor>> {
        let size = preprocess.target_size;
        let x = prepare_seg_input(image, preprocess)?;
        let mut inputs = HashMap::from([(
            "image".to_string(),
            Tensor::new(vec![1, 1, size, size], x.into_data())?,
        )]);
        if kind.has_context() {
            let ctx = context.unwrap_or_default();
            let mut data = match ctx.image {
                Some(img) => prepare_seg_input(img, preprocess)?.into_data(),
                None => vec![0.0; size * size],
            };
            data.extend(encode_context_mask(ctx.mask, kind.context_channels() - 1, size)?);
            inputs.insert(
                "context".to_string(),
                Tensor::new(vec![1, kind.context_channels(), size, size], data)?,
            );
        }
        Ok(inputs)
    }
}

/// Per-pixel argmax of `[1, classes, h, w]` probabilities.
pub fn argmax_mask(probs: &Tensor) -> Result<Grid<u8>> {
    let [_, classes, h, w] = probs.dims4()?;
    let d = probs.data();
    let hw = h * w;
    Grid::new(
        h,
        w,
        (0..hw)
            .map(|i| {
                let mut best = 0;
                for k in 1..classes {
                    if d[k * hw + i] > d[best * hw + i] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect(),
    )
}

impl SlicePredictor for NetPredictor {
    fn kind(&self) -> NetKind {
        self.network.spec().kind
    }

    fn predict(&mut self, image: &Image, context: Option<Context<'_>>) -> Result<LabelMask> {
        let inputs = Self::encode(self.kind(), &self.preprocess, image, context)?;
        let mut out = self.network.forward(inputs, Mode::Eval)?;
        self.network.clear_cache();
        let probs = out.remove("probs").expect("declared output");
        let (rows, cols) = image.dims();
        let g = unpad_resize(&argmax_mask(&probs)?, rows, cols);
        LabelMask::new(rows, cols, g.into_data())
    }
}

fn check_kind(kind: NetKind, direction: Direction) -> Result<()> {
    let ok = match direction {
        Direction::Independent => !kind.has_context(),
        Direction::TopDown | Direction::MidStart => kind.has_context(),
    };
    if !ok {
        return Err(Error::InvalidArgument(format!(
            "network kind {kind} cannot run in {direction:?} mode"
        )));
    }
    Ok(())
}

fn as_context(mask: &LabelMask) -> Option<&LabelMask> {
    (!mask.is_background()).then_some(mask)
}

/// Segments every slice; output order follows the input order whatever the
/// propagation direction.
pub fn segment_stack(
    slices: &[Image],
    predictor: &mut dyn SlicePredictor,
    cfg: &PropagationConfig,
) -> Result<Vec<LabelMask>> {
    cfg.validate()?;
    check_kind(predictor.kind(), cfg.direction)?;
    let n = slices.len();
    let mut out: Vec<Option<LabelMask>> = vec![None; n];
    let mut step = |i: usize, ctx: Option<Context<'_>>| -> Result<LabelMask> {
        Ok(postprocess(&predictor.predict(&slices[i], ctx)?, cfg))
    };
    match cfg.direction {
        Direction::Independent => {
            for i in 0..n {
                out[i] = Some(step(i, None)?);
            }
        }
        Direction::TopDown => {
            for i in 0..n {
                let ctx = Context {
                    image: i.checked_sub(1).map(|j| &slices[j]),
                    mask: i
                        .checked_sub(1)
                        .and_then(|j| out[j].as_ref())
                        .and_then(as_context),
                };
                let m = step(i, Some(ctx))?;
                out[i] = Some(m);
            }
        }
        Direction::MidStart => {
            if n > 0 {
                let mid = n / 2;
                let first = Context {
                    image: mid.checked_sub(1).map(|j| &slices[j]),
                    mask: None,
                };
                out[mid] = Some(step(mid, Some(first))?);
                for i in mid + 1..n {
                    let ctx = Context {
                        image: Some(&slices[i - 1]),
                        mask: out[i - 1].as_ref().and_then(as_context),
                    };
                    out[i] = Some(step(i, Some(ctx))?);
                }
                for i in (0..mid).rev() {
                    let ctx = Context {
                        image: Some(&slices[i + 1]),
                        mask: out[i + 1].as_ref().and_then(as_context),
                    };
                    out[i] = Some(step(i, Some(ctx))?);
                }
            }
        }
    }
    Ok(out.into_iter().map(|m| m.expect("every slice visited")).collect())
}
