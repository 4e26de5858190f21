//! Evaluation metrics: Dice, Hausdorff distance, average perpendicular
//! distance (APD), percentage of good contours (PGC), presence rate, slice
//! groups and the Mann-Whitney U test.
//!
//! Distances are measured between boundary points in physical coordinates.
//! A boundary point is a mask pixel with at least one 4-neighbour outside
//! the mask (pixels on the raster border count as boundary). For stacks the
//! third coordinate is `slice index * thickness`.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stacklab::{Class, Grid, LabelMask, Phase};

pub type Point = [f64; 3];

/// Anatomical structures scored by the metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Structure {
    #[serde(rename = "LVM")]
    Lvm,
    #[serde(rename = "LVC")]
    Lvc,
    #[serde(rename = "LV-epi")]
    LvEpi,
    #[serde(rename = "RVC")]
    Rvc,
    #[serde(rename = "heart")]
    Heart,
}

impl Structure {
    pub const REPORTED: [Structure; 4] =
        [Structure::Lvm, Structure::Lvc, Structure::LvEpi, Structure::Rvc];

    pub fn includes(self, class: Class) -> bool {
        match self {
            Structure::Lvm => class == Class::Lvm,
            Structure::Lvc => class == Class::Lvc,
            Structure::LvEpi => matches!(class, Class::Lvc | Class::Lvm),
            Structure::Rvc => class == Class::Rvc,
            Structure::Heart => class != Class::Bg,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Structure::Lvm => "LVM",
            Structure::Lvc => "LVC",
            Structure::LvEpi => "LV-epi",
            Structure::Rvc => "RVC",
            Structure::Heart => "heart",
        }
    }

    pub fn select(self, mask: &LabelMask) -> Grid<bool> {
        mask.select(|c| self.includes(c))
    }

    pub fn present(self, mask: &LabelMask) -> bool {
        mask.codes()
            .iter()
            .any(|&c| self.includes(Class::from_code(c).expect("valid code")))
    }
}

/// `2|A∩B| / (|A|+|B|)` over any number of slices; 1 when both are empty.
pub fn dice(a: &[Grid<bool>], b: &[Grid<bool>]) -> Result<f64> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.dims() != y.dims()) {
        return Err(Error::InvalidArgument("dice operands differ in shape".into()));
    }
    let (mut inter, mut total) = (0usize, 0usize);
    for (x, y) in a.iter().zip(b) {
        for (&p, &q) in x.data().iter().zip(y.data()) {
            inter += (p && q) as usize;
            total += p as usize + q as usize;
        }
    }
    Ok(if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    })
}

/// Boundary pixels of a 2D mask as (row, col) pairs.
pub fn boundary_pixels(mask: &Grid<bool>) -> Vec<(usize, usize)> {
    let (rows, cols) = mask.dims();
    let mut out = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if !mask.get(r, c) {
                continue;
            }
            let edge = r == 0
                || c == 0
                || r + 1 == rows
                || c + 1 == cols
                || !mask.get(r - 1, c)
                || !mask.get(r + 1, c)
                || !mask.get(r, c - 1)
                || !mask.get(r, c + 1);
            if edge {
                out.push((r, c));
            }
        }
    }
    out
}

/// Boundary points of every slice in physical coordinates `(z, y, x)`.
pub fn boundary_points(slices: &[Grid<bool>], spacing: [f64; 2], thickness: f64) -> Vec<Point> {
    let mut pts = Vec::new();
    for (k, s) in slices.iter().enumerate() {
        let z = k as f64 * thickness;
        pts.extend(
            boundary_pixels(s)
                .into_iter()
                .map(|(r, c)| [z, r as f64 * spacing[0], c as f64 * spacing[1]]),
        );
    }
    pts
}

fn dist2(p: &Point, q: &Point) -> f64 {
    let a = p[0] - q[0];
    let b = p[1] - q[1];
    let c = p[2] - q[2];
    a * a + b * b + c * c
}

/// Distance from every point of `from` to its nearest point of `to`.
///
/// `to` is sorted along the last axis; each query scans outwards from its
/// insertion position and stops once the axis gap alone exceeds the best
/// distance found.
pub fn nearest_distances(from: &[Point], to: &[Point]) -> Vec<f64> {
    let mut sorted = to.to_vec();
    sorted.sort_by(|p, q| p[2].total_cmp(&q[2]));
    from.iter()
        .map(|p| {
            let start = sorted.partition_point(|q| q[2] < p[2]);
            let mut best = f64::INFINITY;
            for q in &sorted[start..] {
                let gap = q[2] - p[2];
                if gap * gap > best {
                    break;
                }
                best = best.min(dist2(p, q));
            }
            for q in sorted[..start].iter().rev() {
                let gap = p[2] - q[2];
                if gap * gap > best {
                    break;
                }
                best = best.min(dist2(p, q));
            }
            best.sqrt()
        })
        .collect()
}

fn require_nonempty(a: &[Point], b: &[Point]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::UndefinedDistance("empty point set"));
    }
    Ok(())
}

/// Symmetric Hausdorff distance between point sets.
pub fn hausdorff_points(a: &[Point], b: &[Point]) -> Result<f64> {
    require_nonempty(a, b)?;
    let ab = nearest_distances(a, b).into_iter().fold(0.0, f64::max);
    let ba = nearest_distances(b, a).into_iter().fold(0.0, f64::max);
    Ok(ab.max(ba))
}

/// Mean of the two directed mean nearest-point distances.
pub fn apd_points(a: &[Point], b: &[Point]) -> Result<f64> {
    require_nonempty(a, b)?;
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    Ok(0.5 * (mean(nearest_distances(a, b)) + mean(nearest_distances(b, a))))
}

/// Hausdorff distance between two masks (one slice or a stack).
pub fn hausdorff(
    a: &[Grid<bool>],
    b: &[Grid<bool>],
    spacing: [f64; 2],
    thickness: f64,
) -> Result<f64> {
    hausdorff_points(
        &boundary_points(a, spacing, thickness),
        &boundary_points(b, spacing, thickness),
    )
}

/// APD between the contours of two 2D masks.
pub fn apd(predicted: &Grid<bool>, truth: &Grid<bool>, spacing: [f64; 2]) -> Result<f64> {
    apd_points(
        &boundary_points(std::slice::from_ref(predicted), spacing, 1.0),
        &boundary_points(std::slice::from_ref(truth), spacing, 1.0),
    )
}

pub const GOOD_CONTOUR_MM: f64 = 5.0;

/// Fraction of contours whose APD is defined and below 5 mm; `None` entries
/// (missing predictions) count as bad.
pub fn pgc(apds: &[Option<f64>]) -> Result<f64> {
    if apds.is_empty() {
        return Err(Error::InvalidArgument("PGC over an empty contour list".into()));
    }
    let good = apds
        .iter()
        .filter(|a| a.is_some_and(|d| d < GOOD_CONTOUR_MM))
        .count();
    Ok(good as f64 / apds.len() as f64)
}

/// A predicted/ground-truth contour pair in physical coordinates.
#[derive(Debug, Clone)]
pub struct ContourPair {
    pub predicted: Option<Vec<Point>>,
    pub truth: Vec<Point>,
}

pub fn pgc_pairs(pairs: &[ContourPair]) -> Result<f64> {
    let apds: Vec<Option<f64>> = pairs
        .iter()
        .map(|p| {
            p.predicted
                .as_ref()
                .and_then(|pred| apd_points(pred, &p.truth).ok())
        })
        .collect();
    pgc(&apds)
}

/// Fraction of slices whose prediction contains the structure.
pub fn presence_rate(predictions: &[LabelMask], structure: Structure) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("presence rate over an empty sub-stack".into()));
    }
    let hits = predictions.iter().filter(|m| structure.present(m)).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Splits slices `base+1 ..= last slice containing the structure` into five
/// contiguous groups whose sizes differ by at most one, larger groups first.
pub fn slice_groups(truth: &[LabelMask], base: i32, structure: Structure) -> Result<[Range<usize>; 5]> {
    let first = (base + 1).max(0) as usize;
    let last = truth
        .iter()
        .rposition(|m| structure.present(m))
        .filter(|&l| l >= first)
        .ok_or_else(|| {
            Error::InvalidArgument(format!("{} absent below the base", structure.name()))
        })?;
    let n = last + 1 - first;
    let mut groups: [Range<usize>; 5] = Default::default();
    let mut start = first;
    for (g, slot) in groups.iter_mut().enumerate() {
        let size = n / 5 + usize::from(g < n % 5);
        *slot = start..start + size;
        start += size;
    }
    Ok(groups)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// U statistic of the first sample.
    pub u: f64,
    /// Two-sided p-value.
    pub p_value: f64,
    /// Whether the exact null distribution was used.
    pub exact: bool,
}

/// Largest smaller-sample size for which the exact distribution is used.
pub const MANN_WHITNEY_EXACT_MAX: usize = 8;

/// Average ranks (1-based) of the pooled sample and the tie-group sizes.
fn ranks(pooled: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&i, &j| pooled[i].total_cmp(&pooled[j]));
    let mut r = vec![0.0; pooled.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pooled[order[j + 1]] == pooled[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        if j > i {
            ties.push(j - i + 1);
        }
        i = j + 1;
    }
    (r, ties)
}

/// Number of rank arrangements giving each value of U, for samples of
/// sizes `n` and `m`: the coefficients of the Gaussian binomial `[n+m, n]_q`.
pub fn u_distribution(n: usize, m: usize) -> Vec<i128> {
    let mut poly: Vec<i128> = vec![1];
    for i in 1..=n {
        // multiply by (1 - q^(m+i))
        let shift = m + i;
        let mut next = vec![0i128; poly.len() + shift];
        for (k, &c) in poly.iter().enumerate() {
            next[k] += c;
            next[k + shift] -= c;
        }
        // divide by (1 - q^i): r[k] = p[k] + r[k-i]
        for k in i..next.len() {
            next[k] += next[k - i];
        }
        next.truncate(n * m + 1);
        poly = next;
    }
    poly.resize(n * m + 1, 0);
    poly
}

/// Complementary error function (rational Chebyshev approximation,
/// fractional error below 1.2e-7).
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let poly = -z * z - 1.265_512_23
        + t * (1.000_023_68
            + t * (0.374_091_96
                + t * (0.096_784_18
                    + t * (-0.186_288_06
                        + t * (0.278_868_07
                            + t * (-1.135_203_98
                                + t * (1.488_515_87 + t * (-0.822_152_23 + t * 0.170_872_77))))))));
    let r = t * poly.exp();
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

/// Two-sided Mann-Whitney U test. Exact for small tie-free samples, normal
/// approximation with tie and continuity corrections otherwise.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("Mann-Whitney needs two non-empty samples".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("Mann-Whitney samples must be finite".into()));
    }
    let (n, m) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (r, ties) = ranks(&pooled);
    let rank_sum_a: f64 = r[..n].iter().sum();
    let u = rank_sum_a - (n * (n + 1)) as f64 / 2.0;

    if n.min(m) <= MANN_WHITNEY_EXACT_MAX && ties.is_empty() {
        let dist = u_distribution(n, m);
        let total: f64 = dist.iter().map(|&c| c as f64).sum();
        let u_int = u.round() as usize;
        let le: f64 = dist[..=u_int].iter().map(|&c| c as f64).sum::<f64>() / total;
        let ge: f64 = dist[u_int..].iter().map(|&c| c as f64).sum::<f64>() / total;
        return Ok(MannWhitney {
            u,
            p_value: (2.0 * le.min(ge)).min(1.0),
            exact: true,
        });
    }

    let (nf, mf) = (n as f64, m as f64);
    let total = nf + mf;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (total * (total - 1.0));
    let var = nf * mf / 12.0 * ((total + 1.0) - tie_term);
    let p_value = if var <= 0.0 {
        1.0
    } else {
        let z = ((u - nf * mf / 2.0).abs() - 0.5).max(0.0) / var.sqrt();
        erfc(z / std::f64::consts::SQRT_2).min(1.0)
    };
    Ok(MannWhitney {
        u,
        p_value,
        exact: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    /// Slice indices within the evaluated stack.
    pub slices: Vec<usize>,
    pub presence_rate: Option<f64>,
    /// Per-slice 2D Hausdorff distances (missing when either mask is empty).
    pub hausdorff_2d_mm: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureMetrics {
    pub dice: f64,
    pub hausdorff_mm: Option<f64>,
    /// Mean APD over slices where the ground truth has the structure and
    /// the prediction does too.
    pub apd_mm: Option<f64>,
    /// Over slices where the ground truth has the structure.
    pub pgc: Option<f64>,
    pub presence_rate: Option<f64>,
    pub groups: Vec<GroupMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case: String,
    pub phase: Phase,
    pub structures: BTreeMap<Structure, StructureMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

impl SummaryStats {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(SummaryStats {
            count: values.len(),
            mean,
            std: var.sqrt(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureSummary {
    pub dice: Option<SummaryStats>,
    pub hausdorff_mm: Option<SummaryStats>,
    /// Cases whose Hausdorff distance was undefined.
    pub hausdorff_missing: usize,
    pub apd_mm: Option<SummaryStats>,
    pub pgc: Option<SummaryStats>,
    pub presence_rate: Option<SummaryStats>,
    /// Presence rate per slice group G1..G5, pooled over slices of all cases.
    pub group_presence_rate: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cases: Vec<CaseMetrics>,
    pub summary: BTreeMap<Structure, StructureSummary>,
}

/// One evaluated stack: predictions and ground truth over the same slices.
pub struct CaseInput<'a> {
    pub case: String,
    pub phase: Phase,
    pub predicted: &'a [LabelMask],
    pub truth: &'a [LabelMask],
    pub spacing: [f64; 2],
    pub thickness: f64,
    /// Base index relative to these slices (`-1` when the first slice is below the base).
    pub base: i32,
}

const SCORED: [Structure; 5] = [
    Structure::Lvm,
    Structure::Lvc,
    Structure::LvEpi,
    Structure::Rvc,
    Structure::Heart,
];

pub fn evaluate_case(input: &CaseInput<'_>) -> Result<CaseMetrics> {
    if input.predicted.len() != input.truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} ground-truth slices",
            input.predicted.len(),
            input.truth.len()
        )));
    }
    let mut structures = BTreeMap::new();
    for s in SCORED {
        let pred: Vec<Grid<bool>> = input.predicted.iter().map(|m| s.select(m)).collect();
        let truth: Vec<Grid<bool>> = input.truth.iter().map(|m| s.select(m)).collect();
        if !truth.iter().any(|g| g.data().contains(&true)) {
            continue;
        }
        let dice = dice(&pred, &truth)?;
        let hausdorff_mm = hausdorff(&pred, &truth, input.spacing, input.thickness).ok();

        let mut apds = Vec::new();
        for (p, t) in pred.iter().zip(&truth) {
            if t.data().contains(&true) {
                apds.push(apd(p, t, input.spacing).ok());
            }
        }
        let defined: Vec<f64> = apds.iter().flatten().copied().collect();
        let apd_mm = SummaryStats::of(&defined).map(|s| s.mean);
        let pgc = pgc(&apds).ok();
        let presence_rate = presence_rate(input.predicted, s).ok();

        let groups = match slice_groups(input.truth, input.base, s) {
            Ok(gs) => gs
                .iter()
                .map(|g| GroupMetrics {
                    slices: g.clone().collect(),
                    presence_rate: presence_rate_range(input.predicted, g.clone(), s),
                    hausdorff_2d_mm: g
                        .clone()
                        .map(|i| {
                            hausdorff(
                                std::slice::from_ref(&pred[i]),
                                std::slice::from_ref(&truth[i]),
                                input.spacing,
                                input.thickness,
                            )
                            .ok()
                        })
                        .collect(),
                })
                .collect(),
            Err(_) => Vec::new(),
        };
        structures.insert(
            s,
            StructureMetrics {
                dice,
                hausdorff_mm,
                apd_mm,
                pgc,
                presence_rate,
                groups,
            },
        );
    }
    Ok(CaseMetrics {
        case: input.case.clone(),
        phase: input.phase,
        structures,
    })
}

fn presence_rate_range(pred: &[LabelMask], range: Range<usize>, s: Structure) -> Option<f64> {
    presence_rate(&pred[range], s).ok()
}

pub fn summarize(cases: Vec<CaseMetrics>) -> MetricsReport {
    let mut summary = BTreeMap::new();
    for s in SCORED {
        let per: Vec<&StructureMetrics> = cases.iter().filter_map(|c| c.structures.get(&s)).collect();
        if per.is_empty() {
            continue;
        }
        let collect = |f: &dyn Fn(&StructureMetrics) -> Option<f64>| -> Vec<f64> {
            per.iter().filter_map(|m| f(m)).collect()
        };
        let mut group_presence_rate = Vec::new();
        for g in 0..5 {
            let (mut hit, mut total) = (0.0, 0usize);
            for m in &per {
                if let Some(gm) = m.groups.get(g) {
                    if let Some(pr) = gm.presence_rate {
                        hit += pr * gm.slices.len() as f64;
                        total += gm.slices.len();
                    }
                }
            }
            group_presence_rate.push((total > 0).then(|| hit / total as f64));
        }
        summary.insert(
            s,
            StructureSummary {
                dice: SummaryStats::of(&collect(&|m| Some(m.dice))),
                hausdorff_mm: SummaryStats::of(&collect(&|m| m.hausdorff_mm)),
                hausdorff_missing: per.iter().filter(|m| m.hausdorff_mm.is_none()).count(),
                apd_mm: SummaryStats::of(&collect(&|m| m.apd_mm)),
                pgc: SummaryStats::of(&collect(&|m| m.pgc)),
                presence_rate: SummaryStats::of(&collect(&|m| m.presence_rate)),
                group_presence_rate,
            },
        );
    }
    MetricsReport { cases, summary }
}

impl MetricsReport {
    /// Plain-text table of the per-structure summary.
    pub fn table(&self) -> String {
        let fmt = |s: &Option<SummaryStats>| match s {
            Some(s) => format!("{:.3} ({:.3})", s.mean, s.std),
            None => "-".to_string(),
        };
        let mut out = format!(
            "{:<8} {:>16} {:>18} {:>16} {:>16} {:>16}\n",
            "struct", "Dice", "Hausdorff mm", "APD mm", "PGC", "presence"
        );
        for (s, m) in &self.summary {
            out.push_str(&format!(
                "{:<8} {:>16} {:>18} {:>16} {:>16} {:>16}\n",
                s.name(),
                fmt(&m.dice),
                fmt(&m.hausdorff_mm),
                fmt(&m.apd_mm),
                fmt(&m.pgc),
                fmt(&m.presence_rate)
            ));
        }
        out
    }
}
