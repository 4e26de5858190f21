//! Dice losses, augmentation and the training loop.
//!
//! Contextual networks are trained with teacher forcing: the context mask is
//! the (adapted) ground truth of the neighbouring slice rather than a
//! prediction.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gtadapt::{adapt_masks, detect_basal_slice_in, BasalDetectionParams};
use crate::io::{Checkpoint, TrainingMeta};
use crate::netbuilder::{build_with, NetConfig, NetKind};
use crate::nn::{AdamState, Mode, Network, ParamStore, Tensor};
use crate::preprocess::{
    encode_context_mask, prepare_roi_input, prepare_seg_input, resize_mask, PreprocessConfig,
};
use crate::stacklab::{one_hot, substack_range, CardiacStack, Class, Grid, LabelMask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Smoothing term added to numerator and denominator.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { epsilon: 1.0 }
    }
}

fn check_pair(p: &[f64], g: &[f64], eps: f64) -> Result<()> {
    if p.len() != g.len() {
        return Err(Error::Shape {
            location: "dice loss".into(),
            expected: vec![g.len()],
            actual: vec![p.len()],
        });
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {eps}")));
    }
    Ok(())
}

/// `-(2·Σpg + ε) / (Σp + Σg + ε)`.
pub fn dice_loss_binary(p: &[f64], g: &[f64], eps: f64) -> Result<f64> {
    check_pair(p, g, eps)?;
    let (i, sp, sg) = sums(p.iter().copied(), g.iter().copied());
    Ok(-(2.0 * i + eps) / (sp + sg + eps))
}

fn sums(p: impl Iterator<Item = f64>, g: impl Iterator<Item = f64>) -> (f64, f64, f64) {
    let (mut i, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (a, b) in p.zip(g) {
        i += a * b;
        sp += a;
        sg += b;
    }
    (i, sp, sg)
}

/// Binary Dice loss and its gradient with respect to `p`.
pub fn dice_loss_binary_grad(p: &[f64], g: &[f64], eps: f64) -> Result<(f64, Vec<f64>)> {
    check_pair(p, g, eps)?;
    let (i, sp, sg) = sums(p.iter().copied(), g.iter().copied());
    let num = 2.0 * i + eps;
    let den = sp + sg + eps;
    let grad = g.iter().map(|&gj| -(2.0 * gj * den - num) / (den * den)).collect();
    Ok((-num / den, grad))
}

fn class_view(t: &Tensor, class: usize) -> impl Iterator<Item = f64> + '_ {
    let s = t.shape();
    let (b, c) = (s[0], s[1]);
    let hw: usize = s[2..].iter().product();
    (0..b).flat_map(move |n| t.data()[(n * c + class) * hw..(n * c + class + 1) * hw].iter().copied())
}

fn check_multiclass(p: &Tensor, g: &Tensor, classes: &[usize], eps: f64) -> Result<()> {
    if p.shape() != g.shape() || p.shape().len() < 3 {
        return Err(Error::Shape {
            location: "multi-class dice loss".into(),
            expected: g.shape().to_vec(),
            actual: p.shape().to_vec(),
        });
    }
    if classes.is_empty() || classes.iter().any(|&c| c >= p.shape()[1]) {
        return Err(Error::InvalidArgument(format!(
            "class set {classes:?} does not fit {} channels",
            p.shape()[1]
        )));
    }
    check_pair(&[], &[], eps)
}

/// Mean of the per-class Dice terms over `classes`, negated. Tensors are
/// `[batch, channels, ...]`; sums run over batch and pixels.
pub fn dice_loss_classes(p: &Tensor, g: &Tensor, classes: &[usize], eps: f64) -> Result<f64> {
    check_multiclass(p, g, classes, eps)?;
    let total: f64 = classes
        .iter()
        .map(|&c| {
            let (i, sp, sg) = sums(class_view(p, c), class_view(g, c));
            (2.0 * i + eps) / (sp + sg + eps)
        })
        .sum();
    Ok(-total / classes.len() as f64)
}

/// Multi-class Dice loss over all `classes` channels; the channel count
/// must match.
pub fn dice_loss_multiclass(p: &Tensor, g: &Tensor, classes: usize, eps: f64) -> Result<f64> {
    if p.shape().get(1) != Some(&classes) {
        return Err(Error::InvalidArgument(format!(
            "expected {classes} class channels, got shape {:?}",
            p.shape()
        )));
    }
    dice_loss_classes(p, g, &(0..classes).collect::<Vec<_>>(), eps)
}

/// Multi-class loss and gradient with respect to `p` (all channels).
pub fn dice_loss_multiclass_grad(p: &Tensor, g: &Tensor, eps: f64) -> Result<(f64, Tensor)> {
    let classes = p.shape().get(1).copied().unwrap_or(0);
    let loss = dice_loss_multiclass(p, g, classes, eps)?;
    let s = p.shape();
    let (b, c) = (s[0], s[1]);
    let hw: usize = s[2..].iter().product();
    let mut grad = vec![0.0; p.numel()];
    for k in 0..c {
        let (i, sp, sg) = sums(class_view(p, k), class_view(g, k));
        let num = 2.0 * i + eps;
        let den = sp + sg + eps;
        for n in 0..b {
            let off = (n * c + k) * hw;
            for j in off..off + hw {
                grad[j] = -(2.0 * g.data()[j] * den - num) / (den * den) / c as f64;
            }
        }
    }
    Ok((loss, Tensor::new(s.to_vec(), grad)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
    /// Maximum shift as a fraction of the raster size.
    pub shift: f64,
    /// Per-axis zoom range.
    pub zoom: [f64; 2],
    pub flip_horizontal: f64,
    pub flip_vertical: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            rotation_deg: 30.0,
            shift: 0.1,
            zoom: [0.9, 1.1],
            flip_horizontal: 0.5,
            flip_vertical: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.rotation_deg, self.shift, self.zoom[0], self.zoom[1]];
        if finite.iter().any(|v| !v.is_finite()) || self.shift < 0.0 || self.rotation_deg < 0.0 {
            return Err(Error::InvalidArgument("augmentation ranges must be finite and non-negative".into()));
        }
        if !(self.zoom[0] > 0.0 && self.zoom[0] <= self.zoom[1]) {
            return Err(Error::InvalidArgument(format!("bad zoom range {:?}", self.zoom)));
        }
        for p in [self.flip_horizontal, self.flip_vertical] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("flip probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// One concrete random transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub rotation_deg: f64,
    /// (row, col) zoom factors.
    pub zoom: [f64; 2],
    /// (row, col) shift in pixels.
    pub shift: [f64; 2],
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
}

impl AugmentDraw {
    pub fn identity() -> Self {
        AugmentDraw {
            rotation_deg: 0.0,
            zoom: [1.0, 1.0],
            shift: [0.0, 0.0],
            flip_horizontal: false,
            flip_vertical: false,
        }
    }

    pub fn sample(cfg: &AugmentConfig, size: usize, rng: &mut impl Rng) -> Self {
        if !cfg.enabled {
            return AugmentDraw::identity();
        }
        let sym = |rng: &mut dyn rand::RngCore, r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        let zoom = |rng: &mut dyn rand::RngCore| {
            if cfg.zoom[1] > cfg.zoom[0] {
                rng.gen_range(cfg.zoom[0]..=cfg.zoom[1])
            } else {
                cfg.zoom[0]
            }
        };
        let max_shift = cfg.shift * size as f64;
        AugmentDraw {
            rotation_deg: sym(rng, cfg.rotation_deg),
            zoom: [zoom(rng), zoom(rng)],
            shift: [sym(rng, max_shift), sym(rng, max_shift)],
            flip_horizontal: rng.gen_bool(cfg.flip_horizontal),
            flip_vertical: rng.gen_bool(cfg.flip_vertical),
        }
    }

    /// Source coordinates (row, col) read by destination pixel `(r, c)`.
    fn source(&self, r: usize, c: usize, rows: usize, cols: usize) -> (f64, f64) {
        let (cy, cx) = ((rows as f64 - 1.0) / 2.0, (cols as f64 - 1.0) / 2.0);
        let mut y = r as f64;
        let mut x = c as f64;
        if self.flip_vertical {
            y = rows as f64 - 1.0 - y;
        }
        if self.flip_horizontal {
            x = cols as f64 - 1.0 - x;
        }
        let (y, x) = (y - cy - self.shift[0], x - cx - self.shift[1]);
        // inverse rotation: forward is x' = x cos + y sin, y' = -x sin + y cos
        let (s, co) = self.rotation_deg.to_radians().sin_cos();
        let (xs, ys) = (x * co - y * s, x * s + y * co);
        (ys / self.zoom[0] + cy, xs / self.zoom[1] + cx)
    }

    pub fn apply_image(&self, img: &Grid<f64>) -> Grid<f64> {
        let (rows, cols) = img.dims();
        Grid::from_fn(rows, cols, |r, c| {
            let (y, x) = self.source(r, c, rows, cols);
            let (y0, x0) = (y.floor(), x.floor());
            let (fy, fx) = (y - y0, x - x0);
            let at = |yy: f64, xx: f64| {
                if yy < 0.0 || xx < 0.0 || yy > rows as f64 - 1.0 || xx > cols as f64 - 1.0 {
                    0.0
                } else {
                    img.get(yy as usize, xx as usize)
                }
            };
            let mut v = 0.0;
            for (wy, yy) in [(1.0 - fy, y0), (fy, y0 + 1.0)] {
                for (wx, xx) in [(1.0 - fx, x0), (fx, x0 + 1.0)] {
                    let w = wy * wx;
                    if w != 0.0 {
                        v += w * at(yy, xx);
                    }
                }
            }
            v
        })
    }

    pub fn apply_mask(&self, mask: &LabelMask) -> LabelMask {
        let (rows, cols) = mask.dims();
        LabelMask::from_fn(rows, cols, |r, c| {
            let (y, x) = self.source(r, c, rows, cols);
            let (yy, xx) = (y.round(), x.round());
            if yy < 0.0 || xx < 0.0 || yy > rows as f64 - 1.0 || xx > cols as f64 - 1.0 {
                Class::Bg
            } else {
                mask.get(yy as usize, xx as usize)
            }
        })
    }
}

/// Perturbation of the teacher-forced context mask so that the network
/// also copes with the imperfect, predicted mask it sees at inference. The
/// context image is exact at inference and stays untouched.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContextNoise {
    /// Probability of replacing the context mask with the null mask.
    pub drop_mask: f64,
    /// Maximum extra shift of the context mask, pixels.
    pub shift: f64,
    /// Maximum extra rotation of the context mask, degrees.
    pub rotation_deg: f64,
}

impl Default for ContextNoise {
    fn default() -> Self {
        ContextNoise {
            drop_mask: 0.1,
            shift: 1.5,
            rotation_deg: 5.0,
        }
    }
}

impl ContextNoise {
    pub fn none() -> Self {
        ContextNoise {
            drop_mask: 0.0,
            shift: 0.0,
            rotation_deg: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.drop_mask) {
            return Err(Error::InvalidArgument(format!("context drop probability {} outside [0, 1]", self.drop_mask)));
        }
        if !(self.shift >= 0.0 && self.shift.is_finite() && self.rotation_deg >= 0.0 && self.rotation_deg.is_finite()) {
            return Err(Error::InvalidArgument("context shift and rotation must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Applies the perturbation to the context mask of a sample.
    pub fn apply(&self, sample: &mut Sample, rng: &mut impl Rng) {
        let Some(mask) = &mut sample.context_mask else {
            return;
        };
        let sym = |rng: &mut dyn rand::RngCore, r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        let draw = AugmentDraw {
            rotation_deg: sym(rng, self.rotation_deg),
            shift: [sym(rng, self.shift), sym(rng, self.shift)],
            ..AugmentDraw::identity()
        };
        if rng.gen_bool(self.drop_mask) {
            sample.context_mask = None;
        } else {
            *mask = draw.apply_mask(mask);
        }
    }
}

/// A training example at network resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Grid<f64>,
    pub context_image: Option<Grid<f64>>,
    pub context_mask: Option<LabelMask>,
    pub target: LabelMask,
}

/// Applies one transform identically to all rasters of a sample.
pub fn augment(sample: &Sample, draw: &AugmentDraw) -> Sample {
    Sample {
        image: draw.apply_image(&sample.image),
        context_image: sample.context_image.as_ref().map(|i| draw.apply_image(i)),
        context_mask: sample.context_mask.as_ref().map(|m| draw.apply_mask(m)),
        target: draw.apply_mask(&sample.target),
    }
}

/// Slice range each kind trains on, for a stack of `n` slices with the
/// given base.
pub fn training_range(kind: NetKind, n: usize, base: i32) -> Result<std::ops::Range<usize>> {
    let b = base as f64;
    match kind {
        NetKind::Roi => substack_range(n, b + 1.0, b + 1.0 + 0.4 * n as f64),
        NetKind::Lv => substack_range(n, b, n as f64),
        NetKind::Lvrv | NetKind::LvrvNoProp | NetKind::LvrvMidStart => {
            substack_range(n, b + 1.0, n as f64)
        }
    }
}

/// Preprocessing recipe for a kind at the given input size.
pub fn preprocess_for(kind: NetKind, size: usize) -> PreprocessConfig {
    match kind {
        NetKind::Roi => PreprocessConfig::roi_net(),
        _ => PreprocessConfig::segmentation_net(),
    }
    .with_target(size)
}

/// Builds teacher-forced samples from stacks with ground truth. Masks are
/// adapted to the stack's base (detected when unknown).
pub fn build_samples(kind: NetKind, stacks: &[CardiacStack], size: usize) -> Result<Vec<Sample>> {
    let pre = preprocess_for(kind, size);
    let mut out = Vec::new();
    for stack in stacks {
        let raw = stack.require_masks()?;
        let base = match stack.base_index() {
            Some(b) => b,
            None => detect_basal_slice_in(raw, &BasalDetectionParams::default()),
        };
        let masks = adapt_masks(raw, base)?;
        let range = training_range(kind, stack.len(), base)?;
        let prep = |i: usize| -> Result<Grid<f64>> {
            match kind {
                NetKind::Roi => prepare_roi_input(&stack.slices()[i], &pre),
                _ => prepare_seg_input(&stack.slices()[i], &pre),
            }
        };
        let images: Vec<Grid<f64>> = range.clone().map(prep).collect::<Result<_>>()?;
        let targets: Vec<LabelMask> = range.clone().map(|i| resize_mask(&masks[i], size)).collect();
        let local = |i: usize| i - range.start;
        for i in range.clone() {
            let sample = |ctx: Option<usize>, with_mask: bool| Sample {
                image: images[local(i)].clone(),
                context_image: ctx.map(|j| images[local(j)].clone()),
                context_mask: ctx.filter(|_| with_mask).map(|j| targets[local(j)].clone()),
                target: targets[local(i)].clone(),
            };
            let above = (i > range.start).then(|| i - 1);
            let below = (i + 1 < range.end).then(|| i + 1);
            match kind {
                NetKind::Roi | NetKind::LvrvNoProp => out.push(sample(None, false)),
                NetKind::Lvrv | NetKind::Lv => out.push(sample(above, true)),
                NetKind::LvrvMidStart => {
                    out.push(sample(above, true));
                    if below.is_some() {
                        out.push(sample(below, true));
                    }
                    if local(i) == range.len() / 2 {
                        out.push(sample(above, false));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Stacks samples into network inputs and targets.
pub fn batch_tensors(kind: NetKind, samples: &[&Sample]) -> Result<(HashMap<String, Tensor>, Tensor)> {
    let b = samples.len();
    let size = samples
        .first()
        .map(|s| s.image.rows())
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let px = size * size;
    let mut image = Vec::with_capacity(b * px);
    let mut context = Vec::new();
    let mut target = Vec::with_capacity(b * kind.classes() * px);
    for s in samples {
        image.extend_from_slice(s.image.data());
        if kind.has_context() {
            match &s.context_image {
                Some(ci) => context.extend_from_slice(ci.data()),
                None => context.extend(std::iter::repeat(0.0).take(px)),
            }
            context.extend(encode_context_mask(
                s.context_mask.as_ref(),
                kind.context_channels() - 1,
                size,
            )?);
        }
        match kind {
            NetKind::Roi => target.extend(s.target.codes().iter().map(|&c| (c != 0) as u8 as f64)),
            NetKind::Lv => {
                let mut m = s.target.clone();
                m.relabel(Class::Rvc, Class::Bg);
                target.extend(one_hot(&m, 3)?.into_data());
            }
            _ => target.extend(one_hot(&s.target, 4)?.into_data()),
        }
    }
    let mut inputs = HashMap::from([(
        "image".to_string(),
        Tensor::new(vec![b, 1, size, size], image)?,
    )]);
    if kind.has_context() {
        inputs.insert(
            "context".to_string(),
            Tensor::new(vec![b, kind.context_channels(), size, size], context)?,
        );
    }
    let target = Tensor::new(vec![b, kind.classes(), size, size], target)?;
    Ok((inputs, target))
}

/// Loss for a kind: binary Dice for the ROI-net, multi-class otherwise.
pub fn kind_loss_grad(kind: NetKind, probs: &Tensor, target: &Tensor, eps: f64) -> Result<(f64, Tensor)> {
    match kind {
        NetKind::Roi => {
            let (l, g) = dice_loss_binary_grad(probs.data(), target.data(), eps)?;
            Ok((l, Tensor::new(probs.shape().to_vec(), g)?))
        }
        _ => dice_loss_multiclass_grad(probs, target, eps),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub width_multiplier: f64,
    /// Network input size; the kind's default when absent.
    pub input_size: Option<usize>,
    pub augment: AugmentConfig,
    /// Applied to contextual kinds only.
    pub context_noise: ContextNoise,
    pub loss: LossConfig,
    /// Re-estimate batch-norm running statistics over the training set
    /// (without augmentation) before emitting each checkpoint.
    pub recalibrate_batchnorm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-4,
            seed: 0,
            width_multiplier: 0.5,
            input_size: None,
            augment: AugmentConfig::default(),
            context_noise: ContextNoise::default(),
            loss: LossConfig::default(),
            recalibrate_batchnorm: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("bad learning rate {}", self.learning_rate)));
        }
        if !(self.loss.epsilon > 0.0) {
            return Err(Error::InvalidArgument("loss epsilon must be positive".into()));
        }
        self.context_noise.validate()?;
        self.augment.validate()
    }

    pub fn net_config(&self, kind: NetKind) -> NetConfig {
        let cfg = NetConfig::new(kind, self.width_multiplier);
        match self.input_size {
            Some(s) => cfg.with_input_size(s),
            None => cfg,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: Checkpoint,
    /// Weights from the epoch with the lowest mean training loss.
    pub best_checkpoint: Checkpoint,
    pub loss_curve: Vec<f64>,
}

/// Replaces batch-norm running statistics by their average over the
/// samples, taken batch by batch.
pub fn recalibrate_batchnorm(net: &mut Network, kind: NetKind, samples: &[Sample], batch: usize) -> Result<()> {
    let refs: Vec<&Sample> = samples.iter().collect();
    for (k, chunk) in refs.chunks(batch.max(1)).enumerate() {
        let (inputs, _) = batch_tensors(kind, chunk)?;
        net.forward(inputs, Mode::Recalibrate(1.0 / (k + 1) as f64))?;
    }
    net.clear_cache();
    Ok(())
}

pub fn fit(kind: NetKind, stacks: &[CardiacStack], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let size = cfg.net_config(kind).input_size;
    let samples = build_samples(kind, stacks, size)?;
    fit_samples(kind, &samples, cfg)
}

pub fn fit_samples(kind: NetKind, samples: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let spec = build_with(kind, &cfg.net_config(kind))?;
    let size = spec.inputs[0].size;
    if samples.iter().any(|s| s.image.dims() != (size, size)) {
        return Err(Error::InvalidArgument(format!("samples must be {size}x{size}")));
    }
    let mut net = Network::new(spec.clone(), cfg.seed)?;
    let mut adam = AdamState::new(cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore)> = None;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let augmented: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    let mut s = augment(&samples[i], &AugmentDraw::sample(&cfg.augment, size, &mut rng));
                    if kind.has_context() {
                        cfg.context_noise.apply(&mut s, &mut rng);
                    }
                    s
                })
                .collect();
            let refs: Vec<&Sample> = augmented.iter().collect();
            let (inputs, target) = batch_tensors(kind, &refs)?;
            let out = net.forward(inputs, Mode::Train)?;
            let (loss, grad) = kind_loss_grad(kind, &out["probs"], &target, cfg.loss.epsilon)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            net.backward(&[("probs".to_string(), grad)].into_iter().collect())?;
            adam.step(net.params_mut())?;
            total += loss;
            batches += 1;
        }
        net.clear_cache();
        let mean = total / batches as f64;
        curve.push(mean);
        if best.as_ref().map_or(true, |(_, l, _)| mean < *l) {
            best = Some((epoch, mean, net.params().clone()));
        }
    }

    let meta = |epoch: usize| TrainingMeta {
        seed: cfg.seed,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        width_multiplier: cfg.width_multiplier,
        loss_curve: curve.clone(),
        epoch,
        samples: samples.len(),
    };
    let (best_epoch, _, best_params) = best.expect("at least one epoch");
    let mut best_net = Network::with_params(spec.clone(), best_params)?;
    if cfg.recalibrate_batchnorm {
        recalibrate_batchnorm(&mut net, kind, samples, cfg.batch_size)?;
        recalibrate_batchnorm(&mut best_net, kind, samples, cfg.batch_size)?;
    }
    Ok(TrainOutcome {
        final_checkpoint: Checkpoint::new(spec.clone(), net.params(), meta(cfg.epochs - 1)),
        best_checkpoint: Checkpoint::new(spec, best_net.params(), meta(best_epoch)),
        loss_curve: curve,
    })
}
