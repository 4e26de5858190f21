//! Seeded synthetic short-axis phantoms.
//!
//! Each slice holds an LV cavity disk inside a myocardial annulus and an RV
//! crescent (a disk minus the LV outer disk) hugging it. Radii taper from
//! base to apex. Slices at and above the configured base have a gap in the
//! myocardium so the cavity touches background there. Optionally an
//! LV-like ring appears off-heart on apical slices to tempt slice-wise
//! segmenters.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stacklab::{CardiacStack, Class, Grid, Image, LabelMask, Phase};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub size: usize,
    pub slices: usize,
    /// mm per pixel, (row, col)
    pub spacing: [f64; 2],
    pub thickness: f64,
    pub phase: Phase,
    /// LV epicardial radius in pixels at the first slice below the base and at the apex.
    pub lv_outer_radius: [f64; 2],
    /// Myocardial wall thickness in pixels, base and apex.
    pub lv_wall: [f64; 2],
    /// RV disk radius in pixels, base and apex.
    pub rv_radius: [f64; 2],
    /// Distance between LV and RV centres as a fraction of the radius sum.
    pub rv_offset: f64,
    /// Index of the basal slice; slices above it are above-base. `-1`: none.
    pub base_index: i32,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    pub blur_sigma: f64,
    /// Per-slice in-plane misalignment, pixels (uniform in ±jitter).
    pub jitter: f64,
    /// Heart centre offset from the image centre, pixels (uniform in ±).
    pub center_spread: f64,
    /// Long-axis tilt: in-plane drift of the LV centre from the first
    /// below-base slice to the apex, pixels, in a random direction.
    pub apex_shift: f64,
    /// Fraction of the below-base slices (from the first one) on which the
    /// RV is visible; the apical rest has no RV.
    pub rv_extent: f64,
    /// LV-like ring on apical slices, sized like the slice's own LV and
    /// placed at a random angle next to it.
    pub distractor: bool,
    /// Cavity scale at end-systole.
    pub es_scale: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            size: 64,
            slices: 10,
            spacing: [1.5, 1.5],
            thickness: 8.0,
            phase: Phase::Ed,
            lv_outer_radius: [10.0, 4.5],
            lv_wall: [3.0, 2.0],
            rv_radius: [9.0, 4.0],
            rv_offset: 0.7,
            base_index: 1,
            noise: 0.04,
            blur_sigma: 0.7,
            jitter: 0.5,
            center_spread: 5.0,
            apex_shift: 0.0,
            rv_extent: 1.0,
            distractor: false,
            es_scale: 0.8,
            seed: 0,
        }
    }
}

const BLOOD: f64 = 0.9;
const MUSCLE: f64 = 0.3;
const TISSUE: f64 = 0.5;
const AIR: f64 = 0.05;

/// Fraction of the stack (from the apex) on which the distractor appears.
const DISTRACTOR_EXTENT: f64 = 0.4;
/// Range of the gap between the LV and the distractor ring, pixels.
const DISTRACTOR_GAP: [f64; 2] = [3.0, 5.0];

impl PhantomConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_phase(mut self, phase: Phase) -> Self {
        self.phase = phase;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InfeasibleGeometry(m));
        if self.size < 16 || self.slices < 2 {
            return bad(format!("need size >= 16 and >= 2 slices, got {} and {}", self.size, self.slices));
        }
        if self.base_index < -1 || self.base_index > self.slices as i32 - 2 {
            return bad(format!(
                "base index {} leaves no slice below the base in {} slices",
                self.base_index, self.slices
            ));
        }
        let [ob, oa] = self.lv_outer_radius;
        let [wb, wa] = self.lv_wall;
        let [rb, ra] = self.rv_radius;
        let finite = [ob, oa, wb, wa, rb, ra, self.rv_offset, self.noise, self.blur_sigma, self.jitter, self.center_spread, self.apex_shift, self.es_scale];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("non-finite parameter".into());
        }
        if !(oa > 0.0 && ob >= oa && ra > 0.0 && rb >= ra) {
            return bad(format!("radii must be positive and taper towards the apex: LV {ob}->{oa}, RV {rb}->{ra}"));
        }
        if !(wb >= 1.0 && wa >= 1.0) {
            return bad("myocardial wall must be at least one pixel".into());
        }
        let (cavity_b, cavity_a) = (ob - wb, oa - wa);
        if cavity_a * self.es_scale.min(1.0) < 1.0 || cavity_b < cavity_a {
            return bad(format!("cavity radius {cavity_a} too small at the apex"));
        }
        if !(self.rv_offset > 0.0 && self.rv_offset < 1.0) {
            return bad(format!("rv offset must lie in (0, 1), got {}", self.rv_offset));
        }
        if !(self.rv_extent > 0.0 && self.rv_extent <= 1.0) {
            return bad(format!("rv extent must lie in (0, 1], got {}", self.rv_extent));
        }
        if !(self.es_scale > 0.0 && self.es_scale <= 1.0) {
            return bad(format!("es scale must lie in (0, 1], got {}", self.es_scale));
        }
        if self.noise < 0.0 || self.blur_sigma < 0.0 || self.jitter < 0.0 || self.center_spread < 0.0 || self.apex_shift < 0.0 {
            return bad("noise, blur, jitter, spread and apex shift must be non-negative".into());
        }
        let from = distractor_from(self);
        let extent = (0..self.slices)
            .map(|k| {
                let sh = slice_shape(self, k);
                let heart = if sh.rv > 0.0 {
                    self.rv_offset * (sh.outer + sh.rv) + sh.rv
                } else {
                    sh.outer
                };
                let ring = if self.distractor && k >= from {
                    3.0 * sh.outer + DISTRACTOR_GAP[1]
                } else {
                    0.0
                };
                heart.max(ring) + self.apex_shift * sh.depth
            })
            .fold(0.0, f64::max);
        let reach = extent + self.center_spread + self.jitter + 2.0;
        if reach > self.size as f64 / 2.0 {
            return bad(format!("heart reaches {reach:.1} px from the centre of a {}-pixel image", self.size));
        }
        if !(self.spacing[0] > 0.0 && self.spacing[1] > 0.0 && self.thickness > 0.0) {
            return bad("spacing and thickness must be positive".into());
        }
        Ok(())
    }
}

/// First slice showing the distractor.
fn distractor_from(cfg: &PhantomConfig) -> usize {
    let first_below = (cfg.base_index + 1).max(0) as usize;
    cfg.slices - ((cfg.slices - first_below) as f64 * DISTRACTOR_EXTENT).ceil() as usize
}

/// Case layout shared by both phases.
struct Layout {
    center: (f64, f64),
    rv_angle: f64,
    gap_angle: f64,
    offsets: Vec<(f64, f64)>,
    /// Unit direction of the long-axis tilt.
    tilt: (f64, f64),
    /// Angle and gap of the distractor relative to the LV.
    distractor: Option<(f64, f64)>,
    gain: f64,
    blobs: Vec<(f64, f64, f64)>,
}

fn draw_layout(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Layout {
    let half = cfg.size as f64 / 2.0 - 0.5;
    let s = cfg.center_spread;
    let center = (
        half + rng.gen_range(-s..=s),
        half + rng.gen_range(-s..=s),
    );
    let rv_angle = PI + rng.gen_range(-0.4..=0.4);
    let gap_angle = rv_angle + PI / 2.0 + rng.gen_range(-0.5..=0.5);
    let j = cfg.jitter;
    let offsets = (0..cfg.slices)
        .map(|_| (rng.gen_range(-j..=j), rng.gen_range(-j..=j)))
        .collect();
    let tilt_angle = rng.gen_range(0.0..2.0 * PI);
    let tilt = (tilt_angle.sin(), tilt_angle.cos());
    let d_angle = rng.gen_range(0.0..2.0 * PI);
    let d_gap = rng.gen_range(DISTRACTOR_GAP[0]..=DISTRACTOR_GAP[1]);
    let distractor = cfg.distractor.then_some((d_angle, d_gap));
    let gain = rng.gen_range(0.8..=1.2);
    let blobs = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.0..cfg.size as f64),
                rng.gen_range(0.0..cfg.size as f64),
                rng.gen_range(3.0..7.0),
            )
        })
        .collect();
    Layout {
        center,
        rv_angle,
        gap_angle,
        offsets,
        tilt,
        distractor,
        gain,
        blobs,
    }
}

/// Geometry of one slice after phase scaling.
struct SliceShape {
    cavity: f64,
    outer: f64,
    rv: f64,
    /// Half-angle of the myocardial gap; 0 below the base.
    gap: f64,
    /// Position along the long axis: 0 down to the first below-base slice, 1 at the apex.
    depth: f64,
}

fn slice_shape(cfg: &PhantomConfig, k: usize) -> SliceShape {
    let first = (cfg.base_index + 1).max(0) as usize;
    let span = (cfg.slices - 1 - first).max(1) as f64;
    let t = (k.saturating_sub(first)) as f64 / span;
    let t = t.clamp(0.0, 1.0);
    let lerp = |[a, b]: [f64; 2]| a + (b - a) * t;
    let (outer, wall, rv) = (lerp(cfg.lv_outer_radius), lerp(cfg.lv_wall), lerp(cfg.rv_radius));
    let below = cfg.slices - first;
    let rv_slices = ((below as f64 * cfg.rv_extent).ceil() as usize).max(1);
    let rv = if k >= first + rv_slices { 0.0 } else { rv };
    let (mut cavity, mut outer, mut rv) = (outer - wall, outer, rv);
    if cfg.phase == Phase::Es {
        cavity *= cfg.es_scale;
        outer *= (1.0 + cfg.es_scale) / 2.0;
        rv *= cfg.es_scale;
    }
    let gap = match (k as i32).cmp(&cfg.base_index) {
        std::cmp::Ordering::Less => PI / 3.0,
        std::cmp::Ordering::Equal => PI / 6.0,
        std::cmp::Ordering::Greater => 0.0,
    };
    SliceShape { cavity, outer, rv, gap, depth: t }
}

fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

fn gaussian_blur(img: &Grid<f64>, sigma: f64) -> Grid<f64> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let (rows, cols) = img.dims();
    let pass = |src: &Grid<f64>, horizontal: bool| {
        Grid::from_fn(rows, cols, |r, c| {
            let mut acc = 0.0;
            for (i, w) in kernel.iter().enumerate() {
                let o = i as i64 - radius;
                let (rr, cc) = if horizontal {
                    (r as i64, (c as i64 + o).clamp(0, cols as i64 - 1))
                } else {
                    ((r as i64 + o).clamp(0, rows as i64 - 1), c as i64)
                };
                acc += w * src.get(rr as usize, cc as usize);
            }
            acc / norm
        })
    };
    pass(&pass(img, true), false)
}

/// Generates one stack with full (unadapted) ground truth and its base index.
pub fn generate(cfg: &PhantomConfig) -> Result<CardiacStack> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let layout = draw_layout(cfg, &mut rng);
    // Phase-specific draws come from their own stream so both phases share the layout.
    let phase_tag = match cfg.phase {
        Phase::Ed => 0x0ed,
        Phase::Es => 0x0e5,
    };
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (phase_tag << 48));
    let normal = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).expect("valid sigma");

    let n = cfg.size;
    let half = n as f64 / 2.0 - 0.5;
    let distractor_from = distractor_from(cfg);
    let mut slices = Vec::with_capacity(cfg.slices);
    let mut masks = Vec::with_capacity(cfg.slices);
    for k in 0..cfg.slices {
        let shape = slice_shape(cfg, k);
        let drift = cfg.apex_shift * shape.depth;
        let (cy, cx) = (
            layout.center.0 + layout.offsets[k].0 + drift * layout.tilt.0,
            layout.center.1 + layout.offsets[k].1 + drift * layout.tilt.1,
        );
        let d = cfg.rv_offset * (shape.outer + shape.rv);
        let (ry, rx) = (
            cy + d * layout.rv_angle.sin(),
            cx + d * layout.rv_angle.cos(),
        );
        let mask = LabelMask::from_fn(n, n, |r, c| {
            let (y, x) = (r as f64 - cy, c as f64 - cx);
            let rho = (y * y + x * x).sqrt();
            let in_gap = shape.gap > 0.0 && angle_diff(y.atan2(x), layout.gap_angle) <= shape.gap;
            if rho <= shape.cavity {
                Class::Lvc
            } else if rho <= shape.outer {
                if in_gap {
                    Class::Bg
                } else {
                    Class::Lvm
                }
            } else {
                let (vy, vx) = (r as f64 - ry, c as f64 - rx);
                if shape.rv > 0.0 && vy * vy + vx * vx <= shape.rv * shape.rv {
                    Class::Rvc
                } else {
                    Class::Bg
                }
            }
        });

        let distract = layout
            .distractor
            .filter(|_| k >= distractor_from)
            .map(|(angle, gap)| {
                let d = 2.0 * shape.outer + gap;
                (cy + d * angle.sin(), cx + d * angle.cos())
            });
        let body_r = 0.45 * n as f64;
        let base_img = Grid::from_fn(n, n, |r, c| {
            let (y, x) = (r as f64 - half, c as f64 - half);
            let mut v = if y * y + x * x <= body_r * body_r {
                TISSUE
            } else {
                AIR
            };
            for &(by, bx, br) in &layout.blobs {
                let (dy, dx) = (r as f64 - by, c as f64 - bx);
                if dy * dy + dx * dx <= br * br {
                    v = 0.65;
                }
            }
            if let Some((dy0, dx0)) = distract {
                let (dy, dx) = (r as f64 - dy0, c as f64 - dx0);
                let rho = (dy * dy + dx * dx).sqrt();
                if rho <= shape.cavity {
                    v = BLOOD;
                } else if rho <= shape.outer {
                    v = MUSCLE;
                }
            }
            match mask.get(r, c) {
                Class::Lvc | Class::Rvc => BLOOD,
                Class::Lvm => MUSCLE,
                Class::Bg => {
                    let (y, x) = (r as f64 - cy, c as f64 - cx);
                    // The myocardial gap opens onto blood-filled outflow tract.
                    if shape.gap > 0.0 && (y * y + x * x).sqrt() <= shape.outer + 1.0 {
                        0.8
                    } else {
                        v
                    }
                }
            }
        });
        let blurred = gaussian_blur(&base_img, cfg.blur_sigma);
        let mut img: Image = Grid::filled(n, n, 0.0);
        for (o, &v) in img.data_mut().iter_mut().zip(blurred.data()) {
            let noisy = if cfg.noise > 0.0 {
                v + normal.sample(&mut noise_rng)
            } else {
                v
            };
            *o = (noisy * layout.gain * 1000.0) as f32;
        }
        slices.push(img);
        masks.push(mask);
    }
    CardiacStack::new(
        slices,
        cfg.spacing,
        cfg.thickness,
        cfg.phase,
        Some(cfg.base_index),
        Some(masks),
    )
}

/// ED and ES stacks of one case sharing the layout.
pub fn generate_pair(cfg: &PhantomConfig) -> Result<(CardiacStack, CardiacStack)> {
    Ok((
        generate(&cfg.clone().with_phase(Phase::Ed))?,
        generate(&cfg.clone().with_phase(Phase::Es))?,
    ))
}
