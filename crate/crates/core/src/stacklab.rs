//! Image stacks, label masks and the small amount of raster topology the
//! method relies on: sub-stack indexing, 4-neighbour edge counts, one-hot
//! encoding and connected components.

use std::collections::VecDeque;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Segmentation classes with their on-disk codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Class {
    Bg = 0,
    Lvc = 1,
    Lvm = 2,
    Rvc = 3,
}

impl Class {
    pub const ALL: [Class; 4] = [Class::Bg, Class::Lvc, Class::Lvm, Class::Rvc];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Class> {
        Class::ALL.get(code as usize).copied()
    }
}

/// Row-major 2D raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Copy + Default> Grid<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape {
                location: "Grid::new".into(),
                expected: vec![rows, cols],
                actual: vec![data.len()],
            });
        }
        Ok(Grid { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Grid {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Grid { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn transpose(&self) -> Self {
        Grid::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Copies the `height x width` window whose top-left corner is `(top, left)`.
    pub fn window(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        Grid::from_fn(height, width, |r, c| self.get(top + r, left + c))
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

pub type Image = Grid<f32>;

/// Per-pixel class raster over {BG, LVC, LVM, RVC}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    grid: Grid<u8>,
}

impl LabelMask {
    pub fn new(rows: usize, cols: usize, codes: Vec<u8>) -> Result<Self> {
        if let Some(&bad) = codes.iter().find(|&&c| Class::from_code(c).is_none()) {
            return Err(Error::LabelOutOfRange {
                code: bad,
                classes: Class::ALL.len(),
            });
        }
        Ok(LabelMask {
            grid: Grid::new(rows, cols, codes)?,
        })
    }

    pub fn background(rows: usize, cols: usize) -> Self {
        LabelMask {
            grid: Grid::filled(rows, cols, Class::Bg.code()),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Class) -> Self {
        LabelMask {
            grid: Grid::from_fn(rows, cols, |r, c| f(r, c).code()),
        }
    }

    pub fn rows(&self) -> usize {
        self.grid.rows
    }

    pub fn cols(&self) -> usize {
        self.grid.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        self.grid.dims()
    }

    pub fn codes(&self) -> &[u8] {
        &self.grid.data
    }

    pub fn grid(&self) -> &Grid<u8> {
        &self.grid
    }

    pub fn get(&self, r: usize, c: usize) -> Class {
        Class::from_code(self.grid.get(r, c)).expect("validated code")
    }

    pub fn set(&mut self, r: usize, c: usize, class: Class) {
        self.grid.set(r, c, class.code());
    }

    pub fn count(&self, class: Class) -> usize {
        self.grid.data.iter().filter(|&&c| c == class.code()).count()
    }

    pub fn contains(&self, class: Class) -> bool {
        self.grid.data.contains(&class.code())
    }

    pub fn is_background(&self) -> bool {
        self.grid.data.iter().all(|&c| c == Class::Bg.code())
    }

    /// Replaces every pixel of `from` by `to`.
    pub fn relabel(&mut self, from: Class, to: Class) {
        for c in self.grid.data.iter_mut() {
            if *c == from.code() {
                *c = to.code();
            }
        }
    }

    pub fn transpose(&self) -> Self {
        LabelMask {
            grid: self.grid.transpose(),
        }
    }

    pub fn window(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        LabelMask {
            grid: self.grid.window(top, left, height, width),
        }
    }

    /// Boolean raster of the pixels whose class satisfies `pred`.
    pub fn select(&self, pred: impl Fn(Class) -> bool) -> Grid<bool> {
        self.grid.map(|c| pred(Class::from_code(c).expect("validated code")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "ED")]
    Ed,
    #[serde(rename = "ES")]
    Es,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Ed => "ED",
            Phase::Es => "ES",
        })
    }
}

/// Ordered base-to-apex slice stack.
#[derive(Debug, Clone, PartialEq)]
pub struct CardiacStack {
    slices: Vec<Image>,
    /// In-plane spacing in mm per pixel, (row, col).
    pub spacing: [f64; 2],
    pub thickness: f64,
    pub phase: Phase,
    base_index: Option<i32>,
    masks: Option<Vec<LabelMask>>,
}

impl CardiacStack {
    pub fn new(
        slices: Vec<Image>,
        spacing: [f64; 2],
        thickness: f64,
        phase: Phase,
        base_index: Option<i32>,
        masks: Option<Vec<LabelMask>>,
    ) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack needs at least one slice".into()))?;
        let dims = first.dims();
        if slices.iter().any(|s| s.dims() != dims) {
            return Err(Error::InvalidArgument("slices differ in dimensions".into()));
        }
        if !(spacing[0] > 0.0 && spacing[1] > 0.0 && thickness > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "spacing {spacing:?} and thickness {thickness} must be positive"
            )));
        }
        if let Some(b) = base_index {
            if b < -1 || b >= slices.len() as i32 {
                return Err(Error::InvalidArgument(format!(
                    "base index {b} outside [-1, {}]",
                    slices.len() - 1
                )));
            }
        }
        if let Some(m) = &masks {
            if m.len() != slices.len() || m.iter().any(|m| m.dims() != dims) {
                return Err(Error::InvalidArgument(
                    "masks must match slices in count and dimensions".into(),
                ));
            }
        }
        Ok(CardiacStack {
            slices,
            spacing,
            thickness,
            phase,
            base_index,
            masks,
        })
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.slices.first().map(Grid::dims).unwrap_or((0, 0))
    }

    pub fn slices(&self) -> &[Image] {
        &self.slices
    }

    pub fn masks(&self) -> Option<&[LabelMask]> {
        self.masks.as_deref()
    }

    pub fn base_index(&self) -> Option<i32> {
        self.base_index
    }

    pub fn set_base_index(&mut self, base: Option<i32>) -> Result<()> {
        if let Some(b) = base {
            if b < -1 || b >= self.len() as i32 {
                return Err(Error::InvalidArgument(format!("base index {b} out of range")));
            }
        }
        self.base_index = base;
        Ok(())
    }

    /// All masks, or an error naming the first slice without one.
    pub fn require_masks(&self) -> Result<&[LabelMask]> {
        self.masks.as_deref().ok_or(Error::MissingMask(0))
    }

    pub fn with_masks(mut self, masks: Option<Vec<LabelMask>>) -> Result<Self> {
        if let Some(m) = &masks {
            if m.len() != self.len() || m.iter().any(|m| m.dims() != self.dims()) {
                return Err(Error::InvalidArgument(
                    "masks must match slices in count and dimensions".into(),
                ));
            }
        }
        self.masks = masks;
        Ok(self)
    }

    /// Sub-stack `S[a, b]`: slices with indices in `[round(a), round(b))`.
    ///
    /// The result may hold zero slices. The base index is dropped since it
    /// refers to the parent's numbering.
    pub fn substack(&self, a: f64, b: f64) -> Result<SubStack> {
        let range = substack_range(self.len(), a, b)?;
        Ok(SubStack {
            start: range.start,
            slices: self.slices[range.clone()].to_vec(),
            masks: self.masks.as_ref().map(|m| m[range].to_vec()),
        })
    }

    /// Builds a stack that shares this one's metadata.
    pub fn derive(&self, slices: Vec<Image>, masks: Option<Vec<LabelMask>>) -> Result<Self> {
        CardiacStack::new(
            slices,
            self.spacing,
            self.thickness,
            self.phase,
            None,
            masks,
        )
    }
}

/// A contiguous run of slices cut out of a parent stack.
#[derive(Debug, Clone, PartialEq)]
pub struct SubStack {
    /// Index of the first slice in the parent stack.
    pub start: usize,
    pub slices: Vec<Image>,
    pub masks: Option<Vec<LabelMask>>,
}

impl SubStack {
    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn indices(&self) -> Range<usize> {
        self.start..self.start + self.len()
    }
}

/// Nearest-integer rounding with ties away from zero.
pub fn round_index(x: f64) -> i64 {
    x.round() as i64
}

/// Index range `[round(a), round(b))` clamped into `[0, n]`.
pub fn substack_range(n: usize, a: f64, b: f64) -> Result<Range<usize>> {
    if !(a.is_finite() && b.is_finite()) || a > b {
        return Err(Error::InvalidArgument(format!(
            "sub-stack bounds must satisfy a <= b, got a = {a}, b = {b}"
        )));
    }
    let clamp = |v: i64| v.clamp(0, n as i64) as usize;
    let lo = clamp(round_index(a));
    let hi = clamp(round_index(b)).max(lo);
    Ok(lo..hi)
}

/// Unordered pair of distinct classes.
#[derive(Debug, Clone, Copy)]
pub struct ClassPair(Class, Class);

impl ClassPair {
    pub fn new(a: Class, b: Class) -> Result<Self> {
        if a == b {
            return Err(Error::InvalidArgument(format!(
                "class pair needs distinct classes, got {a:?} twice"
            )));
        }
        Ok(if a <= b { ClassPair(a, b) } else { ClassPair(b, a) })
    }

    pub fn classes(&self) -> (Class, Class) {
        (self.0, self.1)
    }
}

impl PartialEq for ClassPair {
    fn eq(&self, other: &Self) -> bool {
        (self.0, self.1) == (other.0, other.1)
    }
}

impl Eq for ClassPair {}

/// Number of 4-neighbour pixel pairs labelled with exactly the pair's classes.
pub fn edge_count(mask: &LabelMask, pair: ClassPair) -> usize {
    let (a, b) = (pair.0.code(), pair.1.code());
    let hit = |x: u8, y: u8| (x == a && y == b) || (x == b && y == a);
    let (rows, cols) = mask.dims();
    let d = mask.codes();
    let mut n = 0;
    for r in 0..rows {
        for c in 0..cols {
            let v = d[r * cols + c];
            if c + 1 < cols && hit(v, d[r * cols + c + 1]) {
                n += 1;
            }
            if r + 1 < rows && hit(v, d[(r + 1) * cols + c]) {
                n += 1;
            }
        }
    }
    n
}

/// `edge(a, b)` for distinct classes.
pub fn edge(mask: &LabelMask, a: Class, b: Class) -> usize {
    edge_count(mask, ClassPair::new(a, b).expect("distinct classes"))
}

/// Channels-first one-hot encoding, shape `[num_classes, rows, cols]`.
pub fn one_hot(mask: &LabelMask, num_classes: usize) -> Result<Tensor> {
    let (rows, cols) = mask.dims();
    let hw = rows * cols;
    let mut data = vec![0.0; num_classes * hw];
    for (i, &code) in mask.codes().iter().enumerate() {
        if code as usize >= num_classes {
            return Err(Error::LabelOutOfRange {
                code,
                classes: num_classes,
            });
        }
        data[code as usize * hw + i] = 1.0;
    }
    Tensor::new(vec![num_classes, rows, cols], data)
}

/// 4-connected components of the `true` pixels, each as a list of flat
/// indices. Components are ordered by their first pixel in row-major order.
pub fn components(grid: &Grid<bool>) -> Vec<Vec<usize>> {
    let (rows, cols) = grid.dims();
    let data = grid.data();
    let mut seen = vec![false; data.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for seed in 0..data.len() {
        if !data[seed] || seen[seed] {
            continue;
        }
        seen[seed] = true;
        queue.push_back(seed);
        let mut comp = Vec::new();
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            let (r, c) = (p / cols, p % cols);
            let mut visit = |q: usize| {
                if data[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if r > 0 {
                visit(p - cols);
            }
            if r + 1 < rows {
                visit(p + cols);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < cols {
                visit(p + 1);
            }
        }
        out.push(comp);
    }
    out
}

/// Keeps only the largest 4-connected component of a binary raster (ties go
/// to the component seeded first).
pub fn largest_true_component(grid: &Grid<bool>) -> Grid<bool> {
    let comps = components(grid);
    let mut out = Grid::filled(grid.rows(), grid.cols(), false);
    let mut best: Option<&Vec<usize>> = None;
    for comp in &comps {
        if best.map_or(true, |b| comp.len() > b.len()) {
            best = Some(comp);
        }
    }
    if let Some(comp) = best {
        for &p in comp {
            out.data[p] = true;
        }
    }
    out
}

/// Relabels to BG every pixel of `class` outside its largest 4-connected
/// component. Equal sizes resolve to the component seeded first in
/// row-major order.
pub fn largest_component(mask: &LabelMask, class: Class) -> LabelMask {
    let comps = components(&mask.select(|c| c == class));
    let mut out = mask.clone();
    if comps.len() <= 1 {
        return out;
    }
    let mut keep = 0;
    for (i, comp) in comps.iter().enumerate() {
        if comp.len() > comps[keep].len() {
            keep = i;
        }
    }
    for (i, comp) in comps.iter().enumerate() {
        if i != keep {
            for &p in comp {
                out.grid.data[p] = Class::Bg.code();
            }
        }
    }
    out
}
