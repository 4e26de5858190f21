//! Acceptance run: one PASS/FAIL line per criterion, each with the measured
//! values. Exact checks compare the library against brute-force oracles
//! written here from the definitions; training checks run desk-scale
//! protocols on synthetic phantoms.
//!
//! Exits nonzero when any criterion fails.

use std::collections::{BTreeSet, HashSet};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cardioprop_core::gradcheck::{random_probabilities, restricted_matches_three_class, run_suite, LAYER_KINDS};
use cardioprop_core::gtadapt::{adapt_masks, detect_basal_slice_in, BasalDetectionParams};
use cardioprop_core::io::Checkpoint;
use cardioprop_core::metrics::{
    apd_points, dice, evaluate_case, hausdorff_points, mann_whitney_u, summarize, CaseInput, MetricsReport,
    Point, Structure,
};
use cardioprop_core::netbuilder::NetKind;
use cardioprop_core::nn::Tensor;
use cardioprop_core::phantom::{generate_pair, PhantomConfig};
use cardioprop_core::propagate::{postprocess, segment_stack, Direction, NetPredictor, PropagationConfig};
use cardioprop_core::roi::{box_from_masks, crop, determine_roi, HeartDetector, RoiBox, RoiNet, DEFAULT_RANGE};
use cardioprop_core::stacklab::{substack_range, CardiacStack, Class, Grid, Image, LabelMask, Phase};
use cardioprop_core::train::{
    dice_loss_binary, dice_loss_classes, dice_loss_multiclass, fit, training_range, TrainConfig,
};
use cardioprop_core::Result;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        pass,
        detail: detail.into(),
    })
}

// ---------------------------------------------------------------------------
// Oracles
// ---------------------------------------------------------------------------

/// Unordered 4-neighbour pairs with one pixel of class `a` and one of `b`.
fn edge_oracle(m: &LabelMask, a: Class, b: Class) -> usize {
    let (rows, cols) = m.dims();
    let mut n = 0;
    for r in 0..rows {
        for c in 0..cols {
            for (dr, dc) in [(0usize, 1usize), (1, 0)] {
                let (r2, c2) = (r + dr, c + dc);
                if r2 >= rows || c2 >= cols {
                    continue;
                }
                let (x, y) = (m.get(r, c), m.get(r2, c2));
                if (x == a && y == b) || (x == b && y == a) {
                    n += 1;
                }
            }
        }
    }
    n
}

fn pixels_of(m: &LabelMask, class: Class) -> HashSet<(usize, usize)> {
    let (rows, cols) = m.dims();
    (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .filter(|&(r, c)| m.get(r, c) == class)
        .collect()
}

/// Basal slice by direct evaluation of the two triggers, apex first.
fn basal_oracle(masks: &[LabelMask], t_overlap: f64, t_area: f64) -> i32 {
    for i in (0..masks.len()).rev() {
        let m = &masks[i];
        let open = edge_oracle(m, Class::Lvc, Class::Bg) + edge_oracle(m, Class::Lvc, Class::Rvc) > 0;
        if open {
            return i as i32;
        }
        if i + 1 < masks.len() {
            let here = pixels_of(m, Class::Rvc);
            let below = pixels_of(&masks[i + 1], Class::Rvc);
            if !below.is_empty() {
                let overlap = here.intersection(&below).count() as f64 / below.len() as f64;
                let area = here.len() as f64 / below.len() as f64;
                if overlap <= t_overlap && area <= t_area {
                    return i as i32;
                }
            }
        }
    }
    -1
}

fn eq4_oracle(m: &LabelMask) -> bool {
    let has_lvm = !pixels_of(m, Class::Lvm).is_empty();
    let open = edge_oracle(m, Class::Lvc, Class::Bg) + edge_oracle(m, Class::Lvc, Class::Rvc);
    has_lvm && (open as f64) <= 0.5 * edge_oracle(m, Class::Lvc, Class::Lvm) as f64
}

/// Largest 4-connected RVC component by breadth-first search (ties: the
/// component found first in raster order).
fn largest_rvc_oracle(m: &LabelMask) -> HashSet<(usize, usize)> {
    let all = pixels_of(m, Class::Rvc);
    let mut seen = HashSet::new();
    let mut best: HashSet<(usize, usize)> = HashSet::new();
    let (rows, cols) = m.dims();
    for r in 0..rows {
        for c in 0..cols {
            if !all.contains(&(r, c)) || seen.contains(&(r, c)) {
                continue;
            }
            let mut comp = HashSet::new();
            let mut queue = vec![(r, c)];
            seen.insert((r, c));
            while let Some((y, x)) = queue.pop() {
                comp.insert((y, x));
                let nbrs = [
                    (y.wrapping_sub(1), x),
                    (y + 1, x),
                    (y, x.wrapping_sub(1)),
                    (y, x + 1),
                ];
                for p in nbrs {
                    if all.contains(&p) && seen.insert(p) {
                        queue.push(p);
                    }
                }
            }
            if comp.len() > best.len() {
                best = comp;
            }
        }
    }
    best
}

fn dist(p: &Point, q: &Point) -> f64 {
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
}

fn nearest_brute(from: &[Point], to: &[Point]) -> Vec<f64> {
    from.iter()
        .map(|p| to.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min))
        .collect()
}

fn dice_oracle(a: &[Grid<bool>], b: &[Grid<bool>]) -> f64 {
    let set = |s: &[Grid<bool>]| -> HashSet<(usize, usize, usize)> {
        let mut out = HashSet::new();
        for (k, g) in s.iter().enumerate() {
            for r in 0..g.rows() {
                for c in 0..g.cols() {
                    if g.get(r, c) {
                        out.insert((k, r, c));
                    }
                }
            }
        }
        out
    };
    let (sa, sb) = (set(a), set(b));
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64
}

/// Exact two-sided Mann-Whitney p by enumerating every split of the pooled
/// (tie-free) sample into groups of the original sizes.
fn mann_whitney_oracle(a: &[f64], b: &[f64]) -> (f64, f64) {
    let u_of = |x: &[f64], y: &[f64]| -> usize {
        x.iter().map(|&p| y.iter().filter(|&&q| p > q).count()).sum()
    };
    let u_obs = u_of(a, b);
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let total_len = pooled.len();
    let (mut total, mut le, mut ge) = (0u64, 0u64, 0u64);
    for bits in 0u32..(1 << total_len) {
        if bits.count_ones() as usize != a.len() {
            continue;
        }
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for (i, &v) in pooled.iter().enumerate() {
            if bits >> i & 1 == 1 {
                x.push(v);
            } else {
                y.push(v);
            }
        }
        let u = u_of(&x, &y);
        total += 1;
        le += u64::from(u <= u_obs);
        ge += u64::from(u >= u_obs);
    }
    let p = (2.0 * le.min(ge) as f64 / total as f64).min(1.0);
    (u_obs as f64, p)
}

/// `-(2·Σpg + ε) / (Σp + Σg + ε)` per class, averaged and negated.
fn dice_loss_oracle(p: &Tensor, g: &Tensor, classes: &[usize], eps: f64) -> f64 {
    let s = p.shape();
    let (b, c) = (s[0], s[1]);
    let hw: usize = s[2..].iter().product();
    let mut total = 0.0;
    for &k in classes {
        let (mut i, mut sp, mut sg) = (0.0, 0.0, 0.0);
        for n in 0..b {
            for j in 0..hw {
                let idx = (n * c + k) * hw + j;
                i += p.data()[idx] * g.data()[idx];
                sp += p.data()[idx];
                sg += g.data()[idx];
            }
        }
        total += (2.0 * i + eps) / (sp + sg + eps);
    }
    -total / classes.len() as f64
}

// ---------------------------------------------------------------------------
// Random inputs
// ---------------------------------------------------------------------------

/// A slice with an optional LV (closed ring, ring with a gap, or bare
/// cavity) and an optional RVC rectangle of random size.
fn random_slice(rng: &mut impl Rng, n: usize) -> LabelMask {
    let mut m = LabelMask::background(n, n);
    let cy = rng.gen_range(3..n - 3);
    let cx = rng.gen_range(3..n - 3);
    let lv = rng.gen_range(0..4);
    if lv > 0 {
        for r in cy - 2..=cy + 2 {
            for c in cx - 2..=cx + 2 {
                let ring = r == cy - 2 || r == cy + 2 || c == cx - 2 || c == cx + 2;
                m.set(r, c, if ring { Class::Lvm } else { Class::Lvc });
            }
        }
        match lv {
            2 => m.set(cy, cx + 2, Class::Bg),
            3 => {
                for r in cy - 2..=cy + 2 {
                    for c in cx - 2..=cx + 2 {
                        if m.get(r, c) == Class::Lvm && rng.gen_bool(0.3) {
                            m.set(r, c, Class::Bg);
                        }
                    }
                }
            }
            _ => {}
        }
    }
    if rng.gen_bool(0.75) {
        let h = rng.gen_range(1..=n / 2);
        let w = rng.gen_range(1..=n / 2);
        let top = rng.gen_range(0..=n - h);
        let left = rng.gen_range(0..=n - w);
        for r in top..top + h {
            for c in left..left + w {
                if m.get(r, c) == Class::Bg {
                    m.set(r, c, Class::Rvc);
                }
            }
        }
    }
    m
}

/// Stacks biased towards the interesting cases: no cavity at all (only the
/// RVC can trigger), no RVC at all, and random mixtures.
fn random_stack(rng: &mut impl Rng) -> Vec<LabelMask> {
    let n = 10;
    let len = rng.gen_range(1..=7);
    let style = rng.gen_range(0..3);
    (0..len)
        .map(|_| {
            let mut m = random_slice(rng, n);
            if style == 1 {
                let lvc = pixels_of(&m, Class::Lvc);
                for (r, c) in lvc {
                    m.set(r, c, Class::Lvm);
                }
            }
            if style == 2 {
                m.relabel(Class::Rvc, Class::Bg);
            }
            m
        })
        .collect()
}

fn random_points(rng: &mut impl Rng) -> Vec<Point> {
    let n = rng.gen_range(1..=500);
    let lattice = rng.gen_bool(0.5);
    (0..n)
        .map(|_| {
            if lattice {
                [
                    rng.gen_range(0..6) as f64 * 8.0,
                    rng.gen_range(0..40) as f64 * 1.25,
                    rng.gen_range(0..40) as f64 * 1.25,
                ]
            } else {
                [rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0), rng.gen_range(0.0..50.0)]
            }
        })
        .collect()
}

fn random_bool_stack(rng: &mut impl Rng) -> (Vec<Grid<bool>>, Vec<Grid<bool>>) {
    let k = rng.gen_range(1..4);
    let (r, c) = (rng.gen_range(1..12), rng.gen_range(1..12));
    let density = rng.gen_range(0.0..1.0);
    let mut make = || -> Vec<Grid<bool>> {
        (0..k)
            .map(|_| Grid::from_fn(r, c, |_, _| rng.gen_bool(density)))
            .collect()
    };
    (make(), make())
}

// ---------------------------------------------------------------------------
// Phantom data
// ---------------------------------------------------------------------------

fn pair(cfg: &PhantomConfig) -> [CardiacStack; 2] {
    let (ed, es) = generate_pair(cfg).expect("valid phantom");
    [ed, es]
}

fn clean(seeds: std::ops::Range<u64>) -> Vec<CardiacStack> {
    seeds
        .flat_map(|s| pair(&PhantomConfig::default().with_seed(s)))
        .collect()
}

/// Phantoms with an apical LV-like distractor, a tilted long axis and an
/// RV that stops halfway to the apex.
fn distracted(seeds: std::ops::Range<u64>) -> Vec<CardiacStack> {
    seeds
        .flat_map(|s| {
            pair(&PhantomConfig {
                distractor: true,
                rv_extent: 0.5,
                apex_shift: 3.0,
                center_spread: 1.5,
                ..PhantomConfig::default().with_seed(s)
            })
        })
        .collect()
}

fn cropped(stacks: &[CardiacStack]) -> Result<Vec<CardiacStack>> {
    stacks
        .iter()
        .map(|s| crop(s, &box_from_masks(s.require_masks()?)?))
        .collect()
}

/// Segments the slices below the base of every (cropped) stack and scores
/// them against the adapted ground truth.
fn evaluate_below_base(checkpoint: &Checkpoint, stacks: &[CardiacStack], direction: Direction) -> Result<MetricsReport> {
    let mut predictor = NetPredictor::new(checkpoint)?;
    let cfg = PropagationConfig::default().with_direction(direction);
    let mut cases = Vec::new();
    for (i, s) in stacks.iter().enumerate() {
        let base = s.base_index().expect("phantoms record their base");
        let truth = adapt_masks(s.require_masks()?, base)?;
        let lo = (base + 1) as usize;
        let predicted = segment_stack(&s.slices()[lo..], &mut predictor, &cfg)?;
        cases.push(evaluate_case(&CaseInput {
            case: format!("case {i}"),
            phase: s.phase,
            predicted: &predicted,
            truth: &truth[lo..],
            spacing: s.spacing,
            thickness: s.thickness,
            base: -1,
        })?);
    }
    Ok(summarize(cases))
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

fn gradients() -> Result<Outcome> {
    let t = Instant::now();
    let results = run_suite(0, 2)?;
    let elapsed = t.elapsed();
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.case.as_str()).collect();
    let covered = |prefix: &str| results.iter().any(|r| r.case.starts_with(prefix));
    let kinds_ok = LAYER_KINDS.iter().all(|k| covered(k)) && ["DL1", "DL2", "DL3"].iter().all(|k| covered(k));
    let shapes: BTreeSet<&str> = results.iter().map(|r| r.case.as_str()).collect();
    outcome(
        failed.is_empty() && kinds_ok && shapes.len() >= 20 && worst < 1e-4 && elapsed < Duration::from_secs(120),
        format!(
            "{} randomized cases over {} layer kinds + 3 losses, worst rel err {worst:.2e} (< 1e-4), {:.1}s (< 120s){}",
            shapes.len(),
            LAYER_KINDS.len(),
            elapsed.as_secs_f64(),
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
        ),
    )
}

fn losses() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let eps = 1.0;
    let (mut in_range, mut oracle_ok, mut worst_gap) = (0, 0, 0.0f64);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for k in 0..1000 {
        let b = rng.gen_range(1..=3);
        let size = rng.gen_range(2..=6);
        let (value, oracle) = match k % 3 {
            0 => {
                let p = Tensor::new(vec![b, 1, size, size], (0..b * size * size).map(|_| rng.gen_range(0.0..1.0)).collect())?;
                let g = Tensor::new(vec![b, 1, size, size], (0..b * size * size).map(|_| rng.gen_bool(0.5) as u8 as f64).collect())?;
                (dice_loss_binary(p.data(), g.data(), eps)?, dice_loss_oracle(&p, &g, &[0], eps))
            }
            r => {
                let classes = if r == 1 { 4 } else { 3 };
                let (p, g) = random_probabilities(&mut rng, &[b, classes, size, size]);
                let all: Vec<usize> = (0..classes).collect();
                (dice_loss_multiclass(&p, &g, classes, eps)?, dice_loss_oracle(&p, &g, &all, eps))
            }
        };
        in_range += usize::from((-1.0..0.0).contains(&value));
        let gap = (value - oracle).abs();
        worst_gap = worst_gap.max(gap);
        oracle_ok += usize::from(gap <= 1e-12);
        lo = lo.min(value);
        hi = hi.max(value);
    }

    let mut perfect = true;
    for _ in 0..100 {
        let b = rng.gen_range(1..=3);
        let size = rng.gen_range(1..=6);
        let g1: Vec<f64> = (0..b * size * size).map(|_| rng.gen_bool(0.5) as u8 as f64).collect();
        perfect &= dice_loss_binary(&g1, &g1, eps)? == -1.0;
        for classes in [4, 3] {
            let (_, g) = random_probabilities(&mut rng, &[b, classes, size, size]);
            perfect &= dice_loss_multiclass(&g, &g, classes, eps)? == -1.0;
        }
    }

    let mut restricted_ok = 0;
    for _ in 0..200 {
        let b = rng.gen_range(1..=3);
        let size = rng.gen_range(2..=6);
        let (p, g) = random_probabilities(&mut rng, &[b, 4, size, size]);
        let (restricted, three) = restricted_matches_three_class(&p, &g, eps)?;
        let direct = dice_loss_classes(&p, &g, &[0, 1, 2], eps)?;
        let oracle = dice_loss_oracle(&p, &g, &[0, 1, 2], eps);
        restricted_ok += usize::from(restricted == three && direct == three && (three - oracle).abs() <= 1e-12);
    }
    outcome(
        in_range == 1000 && oracle_ok == 1000 && perfect && restricted_ok == 200,
        format!(
            "{in_range}/1000 in [-1, 0) (range [{lo:.4}, {hi:.4}]), {oracle_ok}/1000 match the direct formula (max gap {worst_gap:.1e}), \
             perfect prediction = -1 exactly: {perfect}, DL2 on 3 classes == DL3: {restricted_ok}/200"
        ),
    )
}

fn basal_detection() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let params = BasalDetectionParams::default();
    let (mut agree, mut none, mut empty_rvc, mut by_rvc) = (0, 0, 0, 0);
    let mut mismatches = Vec::new();
    for k in 0..500 {
        let stack = random_stack(&mut rng);
        let expected = basal_oracle(&stack, 0.75, 0.8);
        let got = detect_basal_slice_in(&stack, &params);
        if got == expected {
            agree += 1;
        } else if mismatches.len() < 3 {
            mismatches.push(format!("stack {k}: got {got}, oracle {expected}"));
        }
        none += usize::from(expected == -1);
        empty_rvc += usize::from(stack.iter().all(|m| !m.contains(Class::Rvc)));
        by_rvc += usize::from(
            expected >= 0
                && edge_oracle(&stack[expected as usize], Class::Lvc, Class::Bg)
                    + edge_oracle(&stack[expected as usize], Class::Lvc, Class::Rvc)
                    == 0,
        );
    }
    let thresholds = params.overlap_threshold == 0.75 && params.area_threshold == 0.8;
    outcome(
        agree == 500 && none > 0 && empty_rvc > 0 && by_rvc > 0 && thresholds,
        format!(
            "{agree}/500 agree with the brute-force evaluator ({none} no-trigger, {empty_rvc} empty-RVC, \
             {by_rvc} RVC-shrink triggers; thresholds {}/{}){}",
            params.overlap_threshold,
            params.area_threshold,
            if mismatches.is_empty() { String::new() } else { format!("; {}", mismatches.join("; ")) }
        ),
    )
}

fn substack_example() -> Result<Outcome> {
    let n = 10;
    let range = substack_range(n, 0.2 * n as f64, 0.6 * n as f64)?;
    let slices: Vec<Image> = (0..n).map(|i| Grid::filled(2, 2, i as f32)).collect();
    let stack = CardiacStack::new(slices, [1.0, 1.0], 1.0, Phase::Ed, None, None)?;
    let sub = stack.substack(0.2 * n as f64, 0.6 * n as f64)?;
    let picked: Vec<f32> = sub.slices.iter().map(|s| s.get(0, 0)).collect();
    let indices: Vec<usize> = range.clone().collect();
    outcome(
        indices == [2, 3, 4, 5] && picked == [2.0, 3.0, 4.0, 5.0] && sub.indices() == range,
        format!("N=10, S[2, 6] -> slices {indices:?}"),
    )
}

fn metric_oracles() -> Result<Outcome> {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (mut hd_ok, mut apd_ok, mut max_points) = (0, 0, 0);
    for _ in 0..200 {
        let a = random_points(&mut rng);
        let b = random_points(&mut rng);
        max_points = max_points.max(a.len()).max(b.len());
        let ab = nearest_brute(&a, &b);
        let ba = nearest_brute(&b, &a);
        let hd = ab.iter().chain(&ba).copied().fold(0.0, f64::max);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let apd = 0.5 * (mean(&ab) + mean(&ba));
        hd_ok += usize::from(hausdorff_points(&a, &b)? == hd);
        apd_ok += usize::from(apd_points(&a, &b)? == apd);
    }
    let mut dice_ok = 0;
    for _ in 0..200 {
        let (a, b) = random_bool_stack(&mut rng);
        dice_ok += usize::from(dice(&a, &b)? == dice_oracle(&a, &b));
    }
    let (mut mw_ok, mut mw_cases) = (0, 0);
    while mw_cases < 200 {
        let n = rng.gen_range(1..=8);
        let m = rng.gen_range(1..=8);
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..100.0)).collect();
        let b: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..100.0)).collect();
        let distinct: HashSet<u64> = a.iter().chain(&b).map(|v| v.to_bits()).collect();
        if distinct.len() != n + m {
            continue;
        }
        mw_cases += 1;
        let got = mann_whitney_u(&a, &b)?;
        let (u, p) = mann_whitney_oracle(&a, &b);
        mw_ok += usize::from(got.exact && got.u == u && (got.p_value - p).abs() <= 1e-12);
    }
    let elapsed = t.elapsed();
    outcome(
        hd_ok == 200 && apd_ok == 200 && dice_ok == 200 && mw_ok == 200 && elapsed < Duration::from_secs(120),
        format!(
            "Hausdorff {hd_ok}/200 and APD {apd_ok}/200 equal brute force (up to {max_points} points), \
             Dice {dice_ok}/200 equals set counting, Mann-Whitney {mw_ok}/200 exact p match enumeration, {:.1}s (< 120s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn post_processing() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let cfg = PropagationConfig::default();
    let (mut decision_ok, mut rvc_ok, mut idempotent, mut successes) = (0, 0, 0, 0);
    for _ in 0..500 {
        let m = if rng.gen_bool(0.5) {
            random_slice(&mut rng, 12)
        } else {
            let codes = (0..144).map(|_| rng.gen_range(0u8..4)).collect();
            LabelMask::new(12, 12, codes)?
        };
        let success = eq4_oracle(&m);
        successes += usize::from(success);
        let out = postprocess(&m, &cfg);
        decision_ok += usize::from(out.is_background() != success);
        let keeps = if success {
            let lv_same = [Class::Lvc, Class::Lvm].iter().all(|&c| pixels_of(&out, c) == pixels_of(&m, c));
            lv_same && pixels_of(&out, Class::Rvc) == largest_rvc_oracle(&m)
        } else {
            true
        };
        rvc_ok += usize::from(keeps);
        idempotent += usize::from(postprocess(&out, &cfg) == out);
    }
    outcome(
        decision_ok == 500 && rvc_ok == 500 && idempotent == 500 && successes > 0 && successes < 500,
        format!(
            "decision matches the direct predicate on {decision_ok}/500 ({successes} successes), \
             kept masks correct {rvc_ok}/500, idempotent {idempotent}/500"
        ),
    )
}

/// Trains the ROI-net used by the sanity and containment checks.
fn train_roi() -> Result<(Checkpoint, Duration)> {
    let train = clean(0..100);
    let cfg = TrainConfig {
        epochs: 4,
        learning_rate: 1e-3,
        input_size: Some(64),
        ..TrainConfig::default()
    };
    let t = Instant::now();
    let out = fit(NetKind::Roi, &train, &cfg)?;
    Ok((out.final_checkpoint, t.elapsed()))
}

fn training_sanity(roi: &Checkpoint, roi_time: Duration) -> Result<Outcome> {
    let mut net = RoiNet::new(roi)?;
    let (mut predicted, mut truth) = (Vec::new(), Vec::new());
    for s in clean(5000..5010) {
        let base = s.base_index().expect("phantoms record their base");
        let masks = s.require_masks()?;
        for i in training_range(NetKind::Roi, s.len(), base)? {
            predicted.push(net.heart_mask(&s.slices()[i])?);
            truth.push(Structure::Heart.select(&masks[i]));
        }
    }
    let heart = dice(&predicted, &truth)?;

    let cfg = TrainConfig {
        epochs: 8,
        learning_rate: 1e-3,
        input_size: Some(48),
        ..TrainConfig::default()
    };
    let lvrv = fit(NetKind::Lvrv, &cropped(&clean(0..20))?, &cfg)?;
    let test = cropped(&clean(1000..1010))?;
    let mut predictor = NetPredictor::new(&lvrv.final_checkpoint)?;
    let prop = PropagationConfig::default();
    let mut pooled: Vec<(Vec<Grid<bool>>, Vec<Grid<bool>>)> = vec![Default::default(); Structure::REPORTED.len()];
    for s in &test {
        let base = s.base_index().expect("phantoms record their base");
        let gt = adapt_masks(s.require_masks()?, base)?;
        let lo = (base + 1) as usize;
        let pred = segment_stack(&s.slices()[lo..], &mut predictor, &prop)?;
        for (k, st) in Structure::REPORTED.iter().enumerate() {
            for (p, g) in pred.iter().zip(&gt[lo..]) {
                pooled[k].0.push(st.select(p));
                pooled[k].1.push(st.select(g));
            }
        }
    }
    let mut per_structure = Vec::new();
    let mut lvrv_ok = true;
    for (st, (p, g)) in Structure::REPORTED.iter().zip(&pooled) {
        let d = dice(p, g)?;
        lvrv_ok &= d >= 0.80;
        per_structure.push(format!("{} {d:.3}", st.name()));
    }
    outcome(
        heart >= 0.90 && roi_time < Duration::from_secs(1800) && lvrv_ok,
        format!(
            "ROI-net heart Dice {heart:.3} (>= 0.90) on 20 held-out stacks after {:.0}s training on 200 (< 1800s); \
             LVRV-net Dice {} (each >= 0.80)",
            roi_time.as_secs_f64(),
            per_structure.join(", ")
        ),
    )
}

fn ablation() -> Result<Outcome> {
    let train = cropped(&distracted(0..20))?;
    let test = cropped(&distracted(2000..2025))?;
    let cfg = TrainConfig {
        epochs: 12,
        seed: 0,
        learning_rate: 1e-3,
        input_size: Some(48),
        ..TrainConfig::default()
    };
    let prop = fit(NetKind::Lvrv, &train, &cfg)?;
    let noprop = fit(NetKind::LvrvNoProp, &train, &cfg)?;
    let with = evaluate_below_base(&prop.final_checkpoint, &test, Direction::TopDown)?;
    let without = evaluate_below_base(&noprop.final_checkpoint, &test, Direction::Independent)?;

    let mut pass = true;
    let mut parts = Vec::new();
    for st in [Structure::Lvm, Structure::Lvc, Structure::LvEpi] {
        let std_of = |r: &MetricsReport| r.summary[&st].hausdorff_mm.as_ref().map(|s| s.std);
        let (a, b) = (std_of(&with), std_of(&without));
        let hd = |r: &MetricsReport| -> Vec<f64> {
            r.cases.iter().filter_map(|c| c.structures[&st].hausdorff_mm).collect()
        };
        let p = mann_whitney_u(&hd(&with), &hd(&without))?.p_value;
        let ok = matches!((a, b), (Some(a), Some(b)) if a <= b);
        pass &= ok;
        parts.push(format!(
            "{} HD std {:.2} vs {:.2} mm (p = {p:.3})",
            st.name(),
            a.unwrap_or(f64::NAN),
            b.unwrap_or(f64::NAN)
        ));
    }
    let g5 = |r: &MetricsReport| r.summary[&Structure::Heart].group_presence_rate.get(4).copied().flatten();
    let (a, b) = (g5(&with), g5(&without));
    pass &= matches!((a, b), (Some(a), Some(b)) if a >= b);
    parts.push(format!(
        "G5 heart presence {:.3} vs {:.3}",
        a.unwrap_or(f64::NAN),
        b.unwrap_or(f64::NAN)
    ));
    outcome(pass, format!("propagation vs independent on {} stacks: {}", test.len(), parts.join("; ")))
}

fn reproducibility() -> Result<Outcome> {
    let train = cropped(&clean(0..3))?;
    let test = cropped(&clean(900..901))?;
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        learning_rate: 1e-3,
        seed: 5,
        input_size: Some(32),
        ..TrainConfig::default()
    };
    let run = || -> Result<(Vec<u8>, Vec<u8>, Vec<LabelMask>)> {
        let out = fit(NetKind::Lvrv, &train, &cfg)?;
        let roi = fit(NetKind::Roi, &clean(0..2), &TrainConfig { epochs: 1, ..cfg.clone() })?;
        let mut predictor = NetPredictor::new(&out.final_checkpoint)?;
        let masks = segment_stack(test[0].slices(), &mut predictor, &PropagationConfig::default())?;
        Ok((out.final_checkpoint.to_bytes(), roi.final_checkpoint.to_bytes(), masks))
    };
    let (a, b) = (run()?, run()?);
    let seg = a.0 == b.0;
    let roi = a.1 == b.1;
    let pred = a.2 == b.2;
    outcome(
        seg && roi && pred,
        format!("identical runs: LVRV checkpoint {seg} ({} bytes), ROI checkpoint {roi}, predictions {pred}", a.0.len()),
    )
}

fn roi_containment(roi: &Checkpoint) -> Result<Outcome> {
    let mut net = RoiNet::new(roi)?;
    let contains = |b: &RoiBox, s: &CardiacStack| -> Result<bool> {
        let (rows, cols) = s.dims();
        Ok(s.require_masks()?.iter().all(|m| {
            (0..rows).all(|r| {
                (0..cols).all(|c| {
                    m.get(r, c) == Class::Bg
                        || (r >= b.top && r < b.top + b.side && c >= b.left && c < b.left + b.side)
                })
            })
        }))
    };
    let (mut ed_ok, mut es_ok) = (0, 0);
    let cases = 100;
    for seed in 7000..7000 + cases {
        let [ed, es] = pair(&PhantomConfig::default().with_seed(seed));
        let b = determine_roi(&ed, &mut net, DEFAULT_RANGE)?;
        ed_ok += usize::from(contains(&b, &ed)?);
        es_ok += usize::from(contains(&b, &es)?);
    }
    outcome(
        ed_ok == cases as usize && es_ok == cases as usize,
        format!("ED-derived box holds the whole heart at ED {ed_ok}/{cases}, at ES {es_ok}/{cases}"),
    )
}

fn report(name: &str, start: Instant, result: Result<Outcome>) -> bool {
    let secs = start.elapsed().as_secs_f64();
    match result {
        Ok(o) => {
            println!("{} {name}: {} [{secs:.1}s]", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            o.pass
        }
        Err(e) => {
            println!("FAIL {name}: error {e} [{secs:.1}s]");
            false
        }
    }
}

fn main() -> ExitCode {
    let mut passed = Vec::new();
    let checks: [(&str, fn() -> Result<Outcome>); 6] = [
        ("gradient correctness", gradients),
        ("loss range and identities", losses),
        ("basal-slice detection", basal_detection),
        ("sub-stack indexing", substack_example),
        ("metric oracles", metric_oracles),
        ("post-processing decision", post_processing),
    ];
    for (name, check) in checks {
        let t = Instant::now();
        passed.push(report(name, t, check()));
    }

    let t = Instant::now();
    match train_roi() {
        Ok((roi, roi_time)) => {
            passed.push(report("desk-scale training sanity", t, training_sanity(&roi, roi_time)));
            let t = Instant::now();
            passed.push(report("directional ablation", t, ablation()));
            let t = Instant::now();
            passed.push(report("reproducibility", t, reproducibility()));
            let t = Instant::now();
            passed.push(report("ROI containment", t, roi_containment(&roi)));
        }
        Err(e) => {
            for name in ["desk-scale training sanity", "ROI containment"] {
                println!("FAIL {name}: ROI-net training failed: {e}");
                passed.push(false);
            }
            let t = Instant::now();
            passed.push(report("directional ablation", t, ablation()));
            let t = Instant::now();
            passed.push(report("reproducibility", t, reproducibility()));
        }
    }

    let ok = passed.iter().filter(|&&p| p).count();
    println!("{ok}/{} criteria passed", passed.len());
    if ok == passed.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
