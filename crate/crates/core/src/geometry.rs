//! Box algebra: anchors, overlap, delta encoding and label assignment.
//!
//! Coordinates are continuous frame pixels with the origin at the top-left,
//! x to the right and y downward. Pixel `(row, col)` has its center at
//! `(col, row)` and covers `[col - 0.5, col + 0.5] x [row - 0.5, row + 0.5]`.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Largest magnitude accepted for the log-scale deltas before `exp`.
pub const DEFAULT_LOG_SCALE_BOUND: f64 = 4.0;

/// Axis-aligned box in center format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        if !b.is_valid() {
            return Err(Error::InvalidInput(format!("degenerate box {b:?}")));
        }
        Ok(b)
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Self::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    /// Top-left corner plus size, as used by most benchmark annotation files.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x + w / 2.0, y + h / 2.0, w, h)
    }

    pub fn is_valid(&self) -> bool {
        self.cx.is_finite()
            && self.cy.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
            && self.w > 0.0
            && self.h > 0.0
    }

    pub fn x0(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn y0(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn x1(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn y1(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn corners(&self) -> [(f64, f64); 4] {
        [
            (self.x0(), self.y0()),
            (self.x1(), self.y0()),
            (self.x1(), self.y1()),
            (self.x0(), self.y1()),
        ]
    }

    /// Area of overlap with another box.
    pub fn intersection(&self, other: &BBox) -> f64 {
        let iw = (self.x1().min(other.x1()) - self.x0().max(other.x0())).max(0.0);
        let ih = (self.y1().min(other.y1()) - self.y0().max(other.y0())).max(0.0);
        iw * ih
    }
}

/// Rotated rectangle given by four ordered corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotatedBox {
    pub corners: [(f64, f64); 4],
}

impl RotatedBox {
    pub fn new(corners: [(f64, f64); 4]) -> Result<Self> {
        let b = Self { corners };
        if corners.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) || b.area() <= 0.0 {
            return Err(Error::InvalidInput(format!("degenerate rotated box {corners:?}")));
        }
        Ok(b)
    }

    pub fn area(&self) -> f64 {
        polygon_area(&self.corners).abs()
    }

    /// Tightest axis-aligned box around the corners.
    pub fn bounds(&self) -> BBox {
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for &(x, y) in &self.corners {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        BBox {
            cx: (x0 + x1) / 2.0,
            cy: (y0 + y1) / 2.0,
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    /// Whether a point lies inside or on the boundary, with tolerance `eps`.
    pub fn contains(&self, x: f64, y: f64, eps: f64) -> bool {
        let sign = polygon_area(&self.corners).signum();
        (0..4).all(|i| {
            let (ax, ay) = self.corners[i];
            let (bx, by) = self.corners[(i + 1) % 4];
            let cross = (bx - ax) * (y - ay) - (by - ay) * (x - ax);
            let len = ((bx - ax).powi(2) + (by - ay).powi(2)).sqrt();
            sign * cross >= -eps * len
        })
    }
}

/// Signed shoelace area; positive for counter-clockwise in a y-up frame.
pub fn polygon_area(points: &[(f64, f64)]) -> f64 {
    let n = points.len();
    let mut acc = 0.0;
    for i in 0..n {
        let (x0, y0) = points[i];
        let (x1, y1) = points[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    acc / 2.0
}

/// Regression offsets of a box relative to an anchor.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxDelta {
    pub fn new(tx: f64, ty: f64, tw: f64, th: f64) -> Self {
        Self { tx, ty, tw, th }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }
}

/// Intersection over union of two axis-aligned boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

pub fn encode(anchor: &BBox, target: &BBox) -> BoxDelta {
    BoxDelta {
        tx: (target.cx - anchor.cx) / anchor.w,
        ty: (target.cy - anchor.cy) / anchor.h,
        tw: (target.w / anchor.w).ln(),
        th: (target.h / anchor.h).ln(),
    }
}

/// Result of [`decode`]; `clamped` is set when a log-scale term hit the bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decoded {
    pub bbox: BBox,
    pub clamped: bool,
}

pub fn decode(anchor: &BBox, delta: &BoxDelta) -> Decoded {
    decode_bounded(anchor, delta, DEFAULT_LOG_SCALE_BOUND)
}

pub fn decode_bounded(anchor: &BBox, delta: &BoxDelta, bound: f64) -> Decoded {
    let tw = delta.tw.clamp(-bound, bound);
    let th = delta.th.clamp(-bound, bound);
    Decoded {
        bbox: BBox {
            cx: delta.tx * anchor.w + anchor.cx,
            cy: delta.ty * anchor.h + anchor.cy,
            w: anchor.w * tw.exp(),
            h: anchor.h * th.exp(),
        },
        clamped: tw != delta.tw || th != delta.th,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    /// Height-over-width ratio of each anchor at a lattice position.
    pub ratios: Vec<f64>,
    pub scale: f64,
    /// Lattice spacing in search-image pixels.
    pub stride: f64,
    /// Lattice side length.
    pub size: usize,
    /// Side of the square search image the lattice is centered in.
    pub search_size: usize,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            ratios: vec![0.33, 0.5, 1.0, 2.0, 3.0],
            scale: 8.0,
            stride: 8.0,
            size: 25,
            search_size: 255,
        }
    }
}

impl AnchorConfig {
    pub fn k(&self) -> usize {
        self.ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratios.is_empty() {
            return Err(Error::InvalidConfig("at least one anchor ratio required".into()));
        }
        if let Some(r) = self.ratios.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
            return Err(Error::InvalidConfig(format!("anchor ratio {r} must be positive")));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::InvalidConfig(format!("anchor scale {} must be positive", self.scale)));
        }
        if !(self.stride.is_finite() && self.stride > 0.0) {
            return Err(Error::InvalidConfig(format!("anchor stride {} must be positive", self.stride)));
        }
        if self.size == 0 || self.search_size == 0 {
            return Err(Error::InvalidConfig("lattice and search sizes must be non-zero".into()));
        }
        Ok(())
    }
}

/// All anchors of the response lattice, flat-indexed as
/// `(row * size + col) * k + anchor`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    pub config: AnchorConfig,
    anchors: Vec<BBox>,
}

pub fn make_anchor_grid(config: &AnchorConfig) -> Result<AnchorGrid> {
    config.validate()?;
    let base = config.scale * config.stride;
    let shapes: Vec<(f64, f64)> = config
        .ratios
        .iter()
        .map(|r| (base / r.sqrt(), base * r.sqrt()))
        .collect();
    let center = (config.search_size as f64 - 1.0) / 2.0;
    let offset = (config.size as f64 - 1.0) / 2.0;
    let mut anchors = Vec::with_capacity(config.size * config.size * shapes.len());
    for row in 0..config.size {
        for col in 0..config.size {
            let cx = center + (col as f64 - offset) * config.stride;
            let cy = center + (row as f64 - offset) * config.stride;
            anchors.extend(shapes.iter().map(|&(w, h)| BBox { cx, cy, w, h }));
        }
    }
    Ok(AnchorGrid {
        config: config.clone(),
        anchors,
    })
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn k(&self) -> usize {
        self.config.k()
    }

    pub fn positions(&self) -> usize {
        self.config.size * self.config.size
    }

    pub fn anchors(&self) -> &[BBox] {
        &self.anchors
    }

    pub fn get(&self, index: usize) -> &BBox {
        &self.anchors[index]
    }

    pub fn index(&self, row: usize, col: usize, anchor: usize) -> usize {
        (row * self.config.size + col) * self.k() + anchor
    }

    /// Lattice position (flat `row * size + col`) of an anchor index.
    pub fn position_of(&self, index: usize) -> usize {
        index / self.k()
    }

    /// Center of a lattice position in search-image pixels.
    pub fn position_center(&self, position: usize) -> (f64, f64) {
        let a = &self.anchors[position * self.k()];
        (a.cx, a.cy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

/// Thresholds and per-sample caps used when labelling anchors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelPolicy {
    pub positive_iou: f64,
    pub negative_iou: f64,
    pub max_positive: usize,
    pub max_labeled: usize,
}

impl Default for LabelPolicy {
    fn default() -> Self {
        Self {
            positive_iou: 0.6,
            negative_iou: 0.3,
            max_positive: 16,
            max_labeled: 48,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorLabels {
    pub labels: Vec<AnchorLabel>,
    /// Regression target for every positive anchor; `None` elsewhere.
    pub targets: Vec<Option<BoxDelta>>,
    /// Set when no anchor cleared the positive threshold and the best one was promoted.
    pub promoted: bool,
}

impl AnchorLabels {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices(AnchorLabel::Positive)
    }

    pub fn negatives(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices(AnchorLabel::Negative)
    }

    fn indices(&self, which: AnchorLabel) -> impl Iterator<Item = usize> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter(move |(_, l)| **l == which)
            .map(|(i, _)| i)
    }

    pub fn count(&self, which: AnchorLabel) -> usize {
        self.labels.iter().filter(|l| **l == which).count()
    }
}

/// Pure threshold pass: positive above `positive_iou`, negative below
/// `negative_iou`, ignore otherwise. No caps and no promotion.
pub fn threshold_labels(grid: &AnchorGrid, gt: &BBox, policy: &LabelPolicy) -> AnchorLabels {
    let mut labels = Vec::with_capacity(grid.len());
    let mut targets = Vec::with_capacity(grid.len());
    for anchor in grid.anchors() {
        let overlap = iou(anchor, gt);
        if overlap > policy.positive_iou {
            labels.push(AnchorLabel::Positive);
            targets.push(Some(encode(anchor, gt)));
        } else {
            labels.push(if overlap < policy.negative_iou {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            });
            targets.push(None);
        }
    }
    AnchorLabels {
        labels,
        targets,
        promoted: false,
    }
}

/// Labels every anchor against `gt`, promoting the best anchor when none
/// is positive, then caps positives and subsamples negatives at random.
pub fn assign_anchor_labels<R: Rng + ?Sized>(
    grid: &AnchorGrid,
    gt: &BBox,
    policy: &LabelPolicy,
    rng: &mut R,
) -> AnchorLabels {
    let mut out = threshold_labels(grid, gt, policy);

    if out.count(AnchorLabel::Positive) == 0 {
        // Lowest index wins ties.
        let mut best = 0;
        let mut best_iou = f64::NEG_INFINITY;
        for (i, a) in grid.anchors().iter().enumerate() {
            let o = iou(a, gt);
            if o > best_iou {
                best = i;
                best_iou = o;
            }
        }
        out.labels[best] = AnchorLabel::Positive;
        out.targets[best] = Some(encode(grid.get(best), gt));
        out.promoted = true;
    }

    let positives: Vec<usize> = out.positives().collect();
    if positives.len() > policy.max_positive {
        let keep = keep_mask(positives.len(), policy.max_positive, rng);
        for (slot, &idx) in positives.iter().enumerate() {
            if !keep[slot] {
                out.labels[idx] = AnchorLabel::Ignore;
                out.targets[idx] = None;
            }
        }
    }

    let n_pos = out.count(AnchorLabel::Positive);
    let neg_budget = policy.max_labeled.saturating_sub(n_pos);
    let negatives: Vec<usize> = out.negatives().collect();
    if negatives.len() > neg_budget {
        let keep = keep_mask(negatives.len(), neg_budget, rng);
        for (slot, &idx) in negatives.iter().enumerate() {
            if !keep[slot] {
                out.labels[idx] = AnchorLabel::Ignore;
            }
        }
    }
    out
}

fn keep_mask<R: Rng + ?Sized>(len: usize, amount: usize, rng: &mut R) -> Vec<bool> {
    let mut keep = vec![false; len];
    for i in sample(rng, len, amount.min(len)) {
        keep[i] = true;
    }
    keep
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoxMode {
    AxisAligned,
    MinArea,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskBox {
    Axis(BBox),
    Rotated(RotatedBox),
}

impl MaskBox {
    pub fn area(&self) -> f64 {
        match self {
            MaskBox::Axis(b) => b.area(),
            MaskBox::Rotated(r) => r.area(),
        }
    }

    pub fn corners(&self) -> [(f64, f64); 4] {
        match self {
            MaskBox::Axis(b) => b.corners(),
            MaskBox::Rotated(r) => r.corners,
        }
    }
}

pub fn box_from_mask(mask: &BinaryMask, mode: BoxMode) -> Result<MaskBox> {
    match mode {
        BoxMode::AxisAligned => axis_box_from_mask(mask).map(MaskBox::Axis),
        BoxMode::MinArea => min_area_box_from_mask(mask).map(MaskBox::Rotated),
    }
}

/// Tightest axis-aligned box covering every foreground pixel square.
pub fn axis_box_from_mask(mask: &BinaryMask) -> Result<BBox> {
    let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
    for r in 0..mask.height {
        for c in 0..mask.width {
            if mask.get(r, c) {
                r0 = r0.min(r);
                c0 = c0.min(c);
                r1 = r1.max(r);
                c1 = c1.max(c);
            }
        }
    }
    if r0 == usize::MAX {
        return Err(Error::EmptyTarget);
    }
    BBox::from_corners(
        c0 as f64 - 0.5,
        r0 as f64 - 0.5,
        c1 as f64 + 0.5,
        r1 as f64 + 0.5,
    )
}

/// Minimum-area rectangle enclosing every foreground pixel square, by
/// rotating calipers over the convex hull of the pixel corners.
pub fn min_area_box_from_mask(mask: &BinaryMask) -> Result<RotatedBox> {
    let mut points = Vec::new();
    for r in 0..mask.height {
        let row = &mask.data[r * mask.width..(r + 1) * mask.width];
        let first = row.iter().position(|&v| v != 0);
        let last = row.iter().rposition(|&v| v != 0);
        if let (Some(a), Some(b)) = (first, last) {
            let (y0, y1) = (r as f64 - 0.5, r as f64 + 0.5);
            for x in [a as f64 - 0.5, b as f64 + 0.5] {
                points.push((x, y0));
                points.push((x, y1));
            }
        }
    }
    if points.is_empty() {
        return Err(Error::EmptyTarget);
    }
    let hull = convex_hull(points);
    RotatedBox::new(min_area_rect(&hull))
}

/// Andrew's monotone chain; returns hull vertices without repetition.
pub fn convex_hull(mut points: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    points.sort_by(|a, b| a.partial_cmp(b).expect("finite points"));
    points.dedup();
    if points.len() < 3 {
        return points;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in &points {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in points.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn min_area_rect(hull: &[(f64, f64)]) -> [(f64, f64); 4] {
    let n = hull.len();
    let mut best: Option<(f64, [(f64, f64); 4])> = None;
    for i in 0..n {
        let (ax, ay) = hull[i];
        let (bx, by) = hull[(i + 1) % n];
        let len = ((bx - ax).powi(2) + (by - ay).powi(2)).sqrt();
        if len == 0.0 {
            continue;
        }
        let (ux, uy) = ((bx - ax) / len, (by - ay) / len);
        let (vx, vy) = (-uy, ux);
        let (mut u0, mut u1, mut v0, mut v1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for &(px, py) in hull {
            let u = px * ux + py * uy;
            let v = px * vx + py * vy;
            u0 = u0.min(u);
            u1 = u1.max(u);
            v0 = v0.min(v);
            v1 = v1.max(v);
        }
        let area = (u1 - u0) * (v1 - v0);
        if best.as_ref().is_none_or(|(a, _)| area < *a) {
            let at = |u: f64, v: f64| (u * ux + v * vx, u * uy + v * vy);
            best = Some((area, [at(u0, v0), at(u1, v0), at(u1, v1), at(u0, v1)]));
        }
    }
    match best {
        Some((_, corners)) => corners,
        // Fewer than two distinct hull points cannot happen for pixel squares.
        None => [hull[0]; 4],
    }
}
