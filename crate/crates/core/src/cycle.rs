//! Cropping, single tracking steps and the forward-backward tracking cycle
//! whose return to the start frame supplies the training targets.

use image::RgbImage;
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{assign_anchor_labels, decode, AnchorGrid, AnchorLabels, BBox, LabelPolicy};
use crate::losses::MaskTarget;
use crate::mask::BinaryMask;
use crate::model::{self, MaskRequest, ModelParams, ResponseMap, Tape, SEARCH_SIZE, TEMPLATE_SIZE};
use crate::patch::{CropMapping, Patch};

/// Smallest side a predicted box may have, in frame pixels.
pub const MIN_BOX_SIDE: f64 = 2.0;

/// Side, in search-patch pixels, of the square a position's mask covers.
pub const MASK_WINDOW: f64 = TEMPLATE_SIZE as f64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    /// Padding added around the box as a fraction of `w + h`.
    pub context_margin: f64,
    pub template_size: usize,
    pub search_size: usize,
}

impl Default for CropSpec {
    fn default() -> Self {
        Self {
            context_margin: 0.5,
            template_size: TEMPLATE_SIZE,
            search_size: SEARCH_SIZE,
        }
    }
}

impl CropSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.context_margin >= 0.0 && self.context_margin.is_finite()) {
            return Err(Error::InvalidConfig(format!("context margin {} must be >= 0", self.context_margin)));
        }
        if self.template_size != TEMPLATE_SIZE || self.search_size != SEARCH_SIZE {
            return Err(Error::InvalidConfig(format!(
                "crop sizes are fixed at {TEMPLATE_SIZE} and {SEARCH_SIZE}"
            )));
        }
        Ok(())
    }

    pub fn search_scale(&self) -> f64 {
        self.search_size as f64 / self.template_size as f64
    }

    /// Side of the square template crop, `sqrt((w + p)(h + p))` with `p = margin (w + h)`.
    pub fn template_side(&self, b: &BBox) -> f64 {
        let p = self.context_margin * (b.w + b.h);
        ((b.w + p) * (b.h + p)).sqrt()
    }

    pub fn search_side(&self, b: &BBox) -> f64 {
        self.template_side(b) * self.search_scale()
    }
}

/// Mean color of a frame in `[0, 1]`.
pub fn frame_mean(frame: &RgbImage) -> [f64; 3] {
    let mut sum = [0.0; 3];
    for p in frame.pixels() {
        for c in 0..3 {
            sum[c] += p[c] as f64;
        }
    }
    let n = (frame.width() as f64 * frame.height() as f64).max(1.0) * 255.0;
    sum.map(|s| s / n)
}

fn overlaps_frame(b: &BBox, width: u32, height: u32) -> bool {
    b.x1() > -0.5 && b.y1() > -0.5 && b.x0() < width as f64 - 0.5 && b.y0() < height as f64 - 0.5
}

/// Resamples the square `mapping` region of `frame` bilinearly. Samples
/// that fall outside the frame take the frame's mean color.
pub fn crop_patch(frame: &RgbImage, mapping: CropMapping) -> Patch {
    let (w, h) = (frame.width() as usize, frame.height() as usize);
    let size = mapping.size;
    let mut data = vec![0.0; size * size * 3];
    let mut mean: Option<[f64; 3]> = None;
    let raw = frame.as_raw();
    let px = |x: usize, y: usize, c: usize| raw[(y * w + x) * 3 + c] as f64 / 255.0;
    for r in 0..size {
        for col in 0..size {
            let (x, y) = mapping.to_frame(col as f64, r as f64);
            let out = &mut data[(r * size + col) * 3..(r * size + col) * 3 + 3];
            if x < -0.5 || y < -0.5 || x > w as f64 - 0.5 || y > h as f64 - 0.5 {
                let m = *mean.get_or_insert_with(|| frame_mean(frame));
                out.copy_from_slice(&m);
                continue;
            }
            let x = x.clamp(0.0, (w - 1) as f64);
            let y = y.clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (x.floor() as usize, y.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (x - x0 as f64, y - y0 as f64);
            for (c, o) in out.iter_mut().enumerate() {
                let top = px(x0, y0, c) * (1.0 - fx) + px(x1, y0, c) * fx;
                let bottom = px(x0, y1, c) * (1.0 - fx) + px(x1, y1, c) * fx;
                *o = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Patch { size, data, mapping }
}

fn crop_checked(frame: &RgbImage, b: &BBox, side: f64, size: usize) -> Result<Patch> {
    if !b.is_valid() {
        return Err(Error::InvalidInput(format!("degenerate box {b:?}")));
    }
    if !overlaps_frame(b, frame.width(), frame.height()) {
        return Err(Error::TrackingLost(format!("box {b:?} lies outside the frame")));
    }
    Ok(crop_patch(frame, CropMapping { cx: b.cx, cy: b.cy, side, size }))
}

/// Template crop: the box plus context, resampled to 127 x 127.
pub fn crop_template(frame: &RgbImage, b: &BBox, spec: &CropSpec) -> Result<Patch> {
    crop_checked(frame, b, spec.template_side(b), spec.template_size)
}

/// Search crop centered on `center_box`, `255 / 127` times the template side.
pub fn crop_search(frame: &RgbImage, center_box: &BBox, spec: &CropSpec) -> Result<Patch> {
    crop_checked(frame, center_box, spec.search_side(center_box), spec.search_size)
}

/// Keeps a predicted box usable as the next prior: the center stays in the
/// frame and each side within `[MIN_BOX_SIDE, frame side]`.
pub fn sanitize_box(b: BBox, width: u32, height: u32) -> (BBox, bool) {
    let (fw, fh) = (width as f64, height as f64);
    let out = BBox {
        cx: b.cx.clamp(0.0, fw - 1.0),
        cy: b.cy.clamp(0.0, fh - 1.0),
        w: b.w.clamp(MIN_BOX_SIDE, fw.max(MIN_BOX_SIDE)),
        h: b.h.clamp(MIN_BOX_SIDE, fh.max(MIN_BOX_SIDE)),
    };
    (out, out != b)
}

pub struct StepOutput {
    /// Prediction in frame pixels.
    pub bbox: BBox,
    /// Object probability of the selected anchor.
    pub score: f64,
    /// Flat index of the selected anchor.
    pub best: usize,
    /// Set when the decoded box had to be clamped.
    pub clamped: bool,
    pub search: Patch,
    pub response: ResponseMap,
    pub tape: Option<Tape>,
}

/// One tracking step: search around `prior`, take the anchor with the
/// highest object probability and map its decoded box back to the frame.
pub fn track_step(
    params: &ModelParams,
    grid: &AnchorGrid,
    spec: &CropSpec,
    template: &Patch,
    frame: &RgbImage,
    prior: &BBox,
    request: &MaskRequest,
    record_tape: bool,
) -> Result<StepOutput> {
    let search = crop_search(frame, prior, spec)?;
    let (response, tape) = if record_tape {
        let (r, t) = model::forward_train(params, template, &search, request)?;
        (r, Some(t))
    } else {
        (model::forward(params, template, &search, request)?, None)
    };
    if !response.all_finite() {
        return Err(Error::NonFinite("response map".into()));
    }
    if response.len() != grid.len() {
        return Err(Error::ShapeMismatch(format!(
            "response has {} anchors, grid {}",
            response.len(),
            grid.len()
        )));
    }
    let (best, score) = response.best();
    let decoded = decode(grid.get(best), &response.delta(best));
    let in_frame = search.mapping.box_to_frame(&decoded.bbox);
    let (bbox, clamped) = sanitize_box(in_frame, frame.width(), frame.height());
    Ok(StepOutput {
        bbox,
        score,
        best,
        clamped: clamped || decoded.clamped,
        search,
        response,
        tape,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CycleOptions {
    /// Supervise backward predictions at intermediate frames with the
    /// forward prediction at the same frame.
    pub intermediate_pairs: bool,
    /// Record tapes so gradients can be taken.
    pub record_tape: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleStep {
    /// Index into the cycle's frame list.
    pub frame: usize,
    pub bbox: BBox,
    pub score: f64,
    pub clamped: bool,
}

/// A backward step kept for loss computation, together with the box it
/// should have found.
pub struct Supervised {
    pub frame: usize,
    pub target: BBox,
    pub search: Patch,
    pub response: ResponseMap,
    pub tape: Option<Tape>,
}

pub struct CycleResult {
    /// The start entry, then forward steps, then backward steps; the
    /// first and last entries are both frame 0.
    pub steps: Vec<CycleStep>,
    pub init_box: BBox,
    pub init_mask: Option<BinaryMask>,
    /// The step that returns to the start frame.
    pub last: Supervised,
    /// Backward steps at intermediate frames, when requested.
    pub pairs: Vec<Supervised>,
}

impl CycleResult {
    pub fn frame_order(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.frame).collect()
    }
}

/// Tracks from `frames[0]` to the last frame and back again, re-cropping
/// the template from each new prediction.
pub fn run_cycle(
    params: &ModelParams,
    grid: &AnchorGrid,
    spec: &CropSpec,
    frames: &[&RgbImage],
    init_box: BBox,
    init_mask: Option<BinaryMask>,
    options: CycleOptions,
) -> Result<CycleResult> {
    let n = frames.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!("a cycle needs at least 2 frames, got {n}")));
    }
    if !init_box.is_valid() {
        return Err(Error::InvalidInput(format!("degenerate initial box {init_box:?}")));
    }
    let order: Vec<usize> = (0..n).chain((0..n - 1).rev()).collect();
    let mut steps = vec![CycleStep { frame: 0, bbox: init_box, score: 1.0, clamped: false }];
    let mut forward_boxes = vec![init_box];
    let mut pairs = Vec::new();
    let mut last = None;
    for w in order.windows(2) {
        let (from, to) = (w[0], w[1]);
        let prev = steps.last().expect("start entry").bbox;
        let template = crop_template(frames[from], &prev, spec)?;
        let backward = to < from;
        let is_last = backward && to == 0;
        let is_pair = backward && !is_last && options.intermediate_pairs;
        let record = options.record_tape && (is_last || is_pair);
        let out = track_step(params, grid, spec, &template, frames[to], &prev, &MaskRequest::None, record)?;
        steps.push(CycleStep { frame: to, bbox: out.bbox, score: out.score, clamped: out.clamped });
        if !backward {
            forward_boxes.push(out.bbox);
        }
        if is_last || is_pair {
            let target = if is_last { init_box } else { forward_boxes[to] };
            let s = Supervised { frame: to, target, search: out.search, response: out.response, tape: out.tape };
            if is_last {
                last = Some(s);
            } else {
                pairs.push(s);
            }
        }
    }
    Ok(CycleResult {
        steps,
        init_box,
        init_mask,
        last: last.expect("cycle ends at frame 0"),
        pairs,
    })
}

/// Labels of a supervised step: its target mapped into the step's search
/// patch and matched against the anchors.
pub fn step_labels<R: Rng + ?Sized>(
    step: &Supervised,
    grid: &AnchorGrid,
    policy: &LabelPolicy,
    rng: &mut R,
) -> Result<(BBox, AnchorLabels)> {
    let gt = step.search.mapping.box_to_patch(&step.target);
    let limit = step.search.size as f64 - 0.5;
    if !(gt.cx >= -0.5 && gt.cy >= -0.5 && gt.cx <= limit && gt.cy <= limit) {
        return Err(Error::Drifted);
    }
    Ok((gt, assign_anchor_labels(grid, &gt, policy, rng)))
}

/// Positions holding at least one positive anchor, ascending.
pub fn positive_positions(labels: &AnchorLabels, grid: &AnchorGrid) -> Vec<usize> {
    let mut positions: Vec<usize> = labels.positives().map(|i| grid.position_of(i)).collect();
    positions.dedup();
    positions
}

/// Center of cell `(row, col)` of a position's `size x size` mask window,
/// in search-patch pixels.
pub fn mask_cell_center(grid: &AnchorGrid, position: usize, size: usize, row: usize, col: usize) -> (f64, f64) {
    let (cx, cy) = grid.position_center(position);
    let cell = MASK_WINDOW / size as f64;
    (
        cx - MASK_WINDOW / 2.0 + (col as f64 + 0.5) * cell,
        cy - MASK_WINDOW / 2.0 + (row as f64 + 0.5) * cell,
    )
}

/// Nearest-neighbour resampling of a frame mask into the mask windows of
/// `positions`; cells outside the frame are background.
pub fn mask_targets(
    mask: &BinaryMask,
    mapping: &CropMapping,
    grid: &AnchorGrid,
    positions: &[usize],
    size: usize,
) -> MaskTarget {
    let mut targets = Array2::from_elem((positions.len(), size * size), -1.0);
    for (t, &pos) in positions.iter().enumerate() {
        for r in 0..size {
            for c in 0..size {
                let (px, py) = mask_cell_center(grid, pos, size, r, c);
                let (x, y) = mapping.to_frame(px, py);
                let (col, row) = (x.round(), y.round());
                if col >= 0.0 && row >= 0.0 && (col as usize) < mask.width && (row as usize) < mask.height
                    && mask.get(row as usize, col as usize)
                {
                    targets[[t, r * size + c]] = 1.0;
                }
            }
        }
    }
    let mut flags = vec![false; grid.positions()];
    for &p in positions {
        flags[p] = true;
    }
    MaskTarget { size, flags, positions: positions.to_vec(), targets }
}

/// Training targets for the step that closes the cycle.
pub struct CycleTargets {
    /// The start box in final search-patch pixels.
    pub gt: BBox,
    pub labels: AnchorLabels,
    pub mask: Option<MaskTarget>,
}

/// Maps the start box into the last search patch and labels the anchors
/// against it; with `mask_size` set and an initial mask present, also
/// builds mask targets for the positive positions.
pub fn cycle_loss_targets<R: Rng + ?Sized>(
    result: &CycleResult,
    grid: &AnchorGrid,
    policy: &LabelPolicy,
    mask_size: Option<usize>,
    rng: &mut R,
) -> Result<CycleTargets> {
    let (gt, labels) = step_labels(&result.last, grid, policy, rng)?;
    let mask = match (mask_size, &result.init_mask) {
        (Some(size), Some(m)) => {
            let positions = positive_positions(&labels, grid);
            Some(mask_targets(m, &result.last.search.mapping, grid, &positions, size))
        }
        _ => None,
    };
    Ok(CycleTargets { gt, labels, mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{iou, make_anchor_grid, threshold_labels, AnchorConfig, AnchorLabel};
    use crate::model::ModelConfig;
    use image::Rgb;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gradient_frame(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x * 2) as u8, (y * 3) as u8, ((x + y) % 256) as u8]))
    }

    #[test]
    fn template_side_follows_context_formula() {
        let spec = CropSpec::default();
        let b = BBox::new(50.0, 50.0, 20.0, 10.0).unwrap();
        let p = 0.5 * 30.0;
        assert!((spec.template_side(&b) - ((20.0 + p) * (10.0 + p) as f64).sqrt()).abs() < 1e-12);
        assert!((spec.search_side(&b) / spec.template_side(&b) - 255.0 / 127.0).abs() < 1e-12);
        let tight = CropSpec { context_margin: 0.0, ..spec };
        assert_eq!(tight.template_side(&BBox::new(5.0, 5.0, 9.0, 9.0).unwrap()), 9.0);
    }

    #[test]
    fn pure_resize_without_context() {
        // A 127 px square box with no context is an identity resample.
        let frame = gradient_frame(200, 160);
        let spec = CropSpec { context_margin: 0.0, ..CropSpec::default() };
        let b = BBox::new(90.0, 70.0, 127.0, 127.0).unwrap();
        let t = crop_template(&frame, &b, &spec).unwrap();
        for (r, c) in [(0, 0), (10, 100), (126, 126)] {
            let src = frame.get_pixel((90 - 63 + c) as u32, (70 - 63 + r) as u32);
            let got = t.pixel(r, c);
            for ch in 0..3 {
                assert!((got[ch] - src[ch] as f64 / 255.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn out_of_frame_fill_uses_mean_color() {
        let frame = gradient_frame(40, 30);
        let mean = frame_mean(&frame);
        let b = BBox::new(0.0, 0.0, 30.0, 30.0).unwrap();
        let s = crop_search(&frame, &b, &CropSpec::default()).unwrap();
        assert_eq!(s.pixel(0, 0), mean);
        let far = BBox::new(-100.0, 10.0, 10.0, 10.0).unwrap();
        assert!(matches!(crop_template(&frame, &far, &CropSpec::default()), Err(Error::TrackingLost(_))));
    }

    #[test]
    fn crop_center_maps_to_patch_center() {
        let frame = gradient_frame(100, 100);
        let b = BBox::new(41.3, 57.8, 12.0, 20.0).unwrap();
        let s = crop_search(&frame, &b, &CropSpec::default()).unwrap();
        let (px, py) = s.mapping.to_patch(b.cx, b.cy);
        assert!((px - 127.0).abs() < 0.5 && (py - 127.0).abs() < 0.5);
        let again = crop_search(&frame, &b, &CropSpec::default()).unwrap();
        assert_eq!(s, again);
        for &(u, v) in &[(-0.5, -0.5), (254.5, -0.5), (254.5, 254.5)] {
            let (x, y) = s.mapping.to_frame(u, v);
            let (u2, v2) = s.mapping.to_patch(x, y);
            assert!((u - u2).abs() < 0.5 && (v - v2).abs() < 0.5);
        }
    }

    fn tiny_model() -> ModelParams {
        ModelParams::init(&ModelConfig {
            channels: [4, 4, 4],
            head_hidden: 4,
            mask_hidden: 4,
            mask_size: 7,
            mask_enabled: true,
            anchors: 5,
            init_seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn cycle_visits_frames_in_mirror_order() {
        let params = tiny_model();
        let grid = make_anchor_grid(&AnchorConfig::default()).unwrap();
        let frames: Vec<RgbImage> = (0..3).map(|_| gradient_frame(64, 64)).collect();
        let refs: Vec<&RgbImage> = frames.iter().collect();
        let b = BBox::new(32.0, 32.0, 12.0, 12.0).unwrap();
        let res = run_cycle(&params, &grid, &CropSpec::default(), &refs, b, None, CycleOptions::default()).unwrap();
        assert_eq!(res.frame_order(), vec![0, 1, 2, 1, 0]);
        assert!(res.pairs.is_empty());
        // Identical frames: the backward visit of frame 1 starts from the
        // same template and prior as the forward visit did.
        let two = run_cycle(&params, &grid, &CropSpec::default(), &refs[..2], b, None, CycleOptions::default()).unwrap();
        assert_eq!(two.frame_order(), vec![0, 1, 0]);
        assert_eq!(two.steps[1].bbox, res.steps[1].bbox);

        let with_pairs = CycleOptions { intermediate_pairs: true, record_tape: true };
        let res = run_cycle(&params, &grid, &CropSpec::default(), &refs, b, None, with_pairs).unwrap();
        assert_eq!(res.pairs.len(), 1);
        assert_eq!(res.pairs[0].target, res.steps[1].bbox);
        assert!(res.last.tape.is_some());
        assert!(run_cycle(&params, &grid, &CropSpec::default(), &refs[..1], b, None, with_pairs).is_err());
    }

    #[test]
    fn targets_agree_with_threshold_oracle() {
        let params = tiny_model();
        let grid = make_anchor_grid(&AnchorConfig::default()).unwrap();
        let frames: Vec<RgbImage> = (0..2).map(|_| gradient_frame(96, 96)).collect();
        let refs: Vec<&RgbImage> = frames.iter().collect();
        let b = BBox::new(48.0, 44.0, 20.0, 24.0).unwrap();
        let mask = BinaryMask::from_fn(96, 96, 1, |r, c| (38..58).contains(&c) && (32..56).contains(&r));
        let res = run_cycle(&params, &grid, &CropSpec::default(), &refs, b, Some(mask), CycleOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let policy = LabelPolicy::default();
        let t = cycle_loss_targets(&res, &grid, &policy, Some(7), &mut rng).unwrap();
        let oracle = threshold_labels(&grid, &t.gt, &policy);
        for (i, label) in t.labels.labels.iter().enumerate() {
            let overlap = iou(grid.get(i), &t.gt);
            match label {
                AnchorLabel::Positive => assert!(overlap > 0.6 || t.labels.promoted),
                AnchorLabel::Negative => assert_eq!(oracle.labels[i], AnchorLabel::Negative),
                AnchorLabel::Ignore => {}
            }
        }
        let m = t.mask.unwrap();
        m.validate().unwrap();
        assert!(m.targets.iter().any(|&v| v == 1.0) && m.targets.iter().any(|&v| v == -1.0));
    }

    #[test]
    fn centered_cycle_targets_zero_offset() {
        // When the final search is centered on the start box, the target
        // sits at the patch center and the best anchor needs no shift.
        let grid = make_anchor_grid(&AnchorConfig::default()).unwrap();
        let frame = gradient_frame(200, 200);
        let b = BBox::new(100.0, 100.0, 40.0, 40.0).unwrap();
        let search = crop_search(&frame, &b, &CropSpec::default()).unwrap();
        let params = tiny_model();
        let template = crop_template(&frame, &b, &CropSpec::default()).unwrap();
        let response = model::forward(&params, &template, &search, &MaskRequest::None).unwrap();
        let step = Supervised { frame: 0, target: b, search, response, tape: None };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (gt, labels) = step_labels(&step, &grid, &LabelPolicy::default(), &mut rng).unwrap();
        assert!((gt.cx - 127.0).abs() < 1e-9 && (gt.cy - 127.0).abs() < 1e-9);
        let center = grid.index(12, 12, 2);
        let t = threshold_labels(&grid, &gt, &LabelPolicy::default()).targets[center].unwrap();
        assert!(t.tx.abs() < 1e-9 && t.ty.abs() < 1e-9);
        assert!(labels.count(AnchorLabel::Positive) >= 1);

        let far = Supervised { target: BBox::new(100.0 + 300.0, 100.0, 40.0, 40.0).unwrap(), ..step };
        assert!(matches!(step_labels(&far, &grid, &LabelPolicy::default(), &mut rng), Err(Error::Drifted)));
    }

    #[test]
    fn sanitize_clamps_and_flags() {
        let (b, flagged) = sanitize_box(BBox { cx: -3.0, cy: 10.0, w: 0.5, h: 500.0 }, 50, 40);
        assert!(flagged);
        assert_eq!(b, BBox { cx: 0.0, cy: 10.0, w: 2.0, h: 40.0 });
        let ok = BBox { cx: 10.0, cy: 10.0, w: 5.0, h: 5.0 };
        assert_eq!(sanitize_box(ok, 50, 40), (ok, false));
    }
}
