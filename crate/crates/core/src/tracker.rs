//! Inference: one network pass per frame, maximum-score selection, mask
//! probabilities in frame coordinates and multi-instance propagation.

use std::sync::atomic::{AtomicUsize, Ordering};

use image::RgbImage;

use crate::cycle::{crop_template, track_step, CropSpec, MASK_WINDOW};
use crate::error::{Error, Result};
use crate::geometry::{axis_box_from_mask, AnchorGrid, BBox};
use crate::mask::{BinaryMask, LabelMap};
use crate::model::{mask_grid, MaskRequest, ModelParams};
use crate::patch::{CropMapping, Patch};

/// Per-target tracking state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackState {
    pub template: Patch,
    pub bbox: BBox,
    pub score: f64,
    /// Frames processed since initialisation.
    pub frame: usize,
}

/// Per-pixel foreground probabilities at frame resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ProbMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }
}

/// Foreground where the probability is strictly above 0.5.
pub fn binarize(prob: &ProbMap, instance: u8) -> BinaryMask {
    BinaryMask {
        width: prob.width,
        height: prob.height,
        data: prob.data.iter().map(|&p| u8::from(p > 0.5)).collect(),
        instance,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Update {
    pub bbox: BBox,
    /// Highest object probability over all anchors.
    pub score: f64,
    pub mask_prob: Option<ProbMap>,
    pub clamped: bool,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Maps an `M x M` grid of mask probabilities covering the mask window of
/// `position` back to frame pixels by bilinear interpolation.
pub fn window_to_frame(
    grid_probs: &ndarray::Array2<f64>,
    grid: &AnchorGrid,
    position: usize,
    mapping: &CropMapping,
    width: usize,
    height: usize,
) -> ProbMap {
    let m = grid_probs.nrows();
    let cell = MASK_WINDOW / m as f64;
    let (pcx, pcy) = grid.position_center(position);
    let (left, top) = (pcx - MASK_WINDOW / 2.0, pcy - MASK_WINDOW / 2.0);
    let mut out = ProbMap::zeros(width, height);
    let (fx0, fy0) = mapping.to_frame(left, top);
    let (fx1, fy1) = mapping.to_frame(left + MASK_WINDOW, top + MASK_WINDOW);
    let c0 = fx0.floor().max(0.0) as usize;
    let r0 = fy0.floor().max(0.0) as usize;
    let c1 = (fx1.ceil().max(0.0) as usize).min(width.saturating_sub(1));
    let r1 = (fy1.ceil().max(0.0) as usize).min(height.saturating_sub(1));
    if c0 > c1 || r0 > r1 {
        return out;
    }
    let sample = |u: f64, v: f64| -> f64 {
        // Continuous cell coordinates, cell centers at integers.
        let gx = (u - left) / cell - 0.5;
        let gy = (v - top) / cell - 0.5;
        if gx < -0.5 || gy < -0.5 || gx > m as f64 - 0.5 || gy > m as f64 - 0.5 {
            return 0.0;
        }
        let gx = gx.clamp(0.0, (m - 1) as f64);
        let gy = gy.clamp(0.0, (m - 1) as f64);
        let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(m - 1), (y0 + 1).min(m - 1));
        let (ax, ay) = (gx - x0 as f64, gy - y0 as f64);
        let top_row = grid_probs[[y0, x0]] * (1.0 - ax) + grid_probs[[y0, x1]] * ax;
        let bottom = grid_probs[[y1, x0]] * (1.0 - ax) + grid_probs[[y1, x1]] * ax;
        top_row * (1.0 - ay) + bottom * ay
    };
    for r in r0..=r1 {
        for c in c0..=c1 {
            let (u, v) = mapping.to_patch(c as f64, r as f64);
            out.data[r * width + c] = sample(u, v);
        }
    }
    out
}

/// Runs a model on frames, one forward pass per update.
pub struct Tracker<'a> {
    pub params: &'a ModelParams,
    pub grid: AnchorGrid,
    pub spec: CropSpec,
    passes: AtomicUsize,
}

impl<'a> Tracker<'a> {
    pub fn new(params: &'a ModelParams, grid: AnchorGrid, spec: CropSpec) -> Result<Self> {
        if grid.k() != params.config.anchors {
            return Err(Error::InvalidConfig(format!(
                "anchor grid has {} anchors per position, model {}",
                grid.k(),
                params.config.anchors
            )));
        }
        Ok(Self { params, grid, spec, passes: AtomicUsize::new(0) })
    }

    /// Network forward passes made so far.
    pub fn forward_passes(&self) -> usize {
        self.passes.load(Ordering::Relaxed)
    }

    pub fn init(&self, frame: &RgbImage, bbox: BBox) -> Result<TrackState> {
        if !bbox.is_valid() {
            return Err(Error::InvalidInput(format!("degenerate initial box {bbox:?}")));
        }
        let template = crop_template(frame, &bbox, &self.spec)?;
        Ok(TrackState { template, bbox, score: 1.0, frame: 0 })
    }

    /// Initialises from a mask's tight axis-aligned box.
    pub fn init_from_mask(&self, frame: &RgbImage, mask: &BinaryMask) -> Result<TrackState> {
        self.init(frame, axis_box_from_mask(mask)?)
    }

    /// Tracks into `frame`. On error the state is left untouched.
    pub fn update(&self, state: &mut TrackState, frame: &RgbImage) -> Result<Update> {
        let masks = self.params.config.mask_enabled;
        let request = if masks { MaskRequest::Best } else { MaskRequest::None };
        let out = track_step(self.params, &self.grid, &self.spec, &state.template, frame, &state.bbox, &request, false)
            .map_err(|e| match e {
                Error::TrackingLost(m) => Error::TrackingLost(format!("frame {}: {m}", state.frame + 1)),
                other => other,
            })?;
        self.passes.fetch_add(1, Ordering::Relaxed);
        let template = crop_template(frame, &out.bbox, &self.spec)?;
        let mask_prob = match &out.response.masks {
            Some(ml) => {
                let position = self.grid.position_of(out.best);
                let logits = mask_grid(ml, position).expect("best position requested");
                let probs = logits.mapv(sigmoid);
                Some(window_to_frame(
                    &probs,
                    &self.grid,
                    position,
                    &out.search.mapping,
                    frame.width() as usize,
                    frame.height() as usize,
                ))
            }
            None => None,
        };
        *state = TrackState { template, bbox: out.bbox, score: out.score, frame: state.frame + 1 };
        Ok(Update { bbox: out.bbox, score: out.score, mask_prob, clamped: out.clamped })
    }
}

/// Tracks a box through all frames; entry 0 is the initial box.
pub fn track_sequence(tracker: &Tracker<'_>, frames: &[&RgbImage], init: BBox) -> Result<Vec<Update>> {
    let first = frames.first().ok_or_else(|| Error::InvalidInput("no frames".into()))?;
    let mut state = tracker.init(first, init)?;
    let mut out = vec![Update { bbox: init, score: 1.0, mask_prob: None, clamped: false }];
    for f in &frames[1..] {
        out.push(tracker.update(&mut state, f)?);
    }
    Ok(out)
}

/// Result of [`propagate_masks`].
#[derive(Debug, Clone, PartialEq)]
pub struct Propagation {
    /// Per frame, one mask per instance (in the order given), disjoint.
    pub masks: Vec<Vec<BinaryMask>>,
    /// Per instance, the frame at which tracking was lost, if it was.
    pub lost: Vec<Option<usize>>,
}

impl Propagation {
    pub fn label_maps(&self) -> Vec<LabelMap> {
        self.masks
            .iter()
            .map(|ms| {
                let (w, h) = ms.first().map_or((0, 0), |m| (m.width, m.height));
                let mut map = LabelMap::new(w, h);
                for m in ms {
                    for (dst, &v) in map.data.iter_mut().zip(&m.data) {
                        if v != 0 {
                            *dst = m.instance;
                        }
                    }
                }
                map
            })
            .collect()
    }
}

/// Propagates first-frame instance masks through the sequence. Each
/// instance is tracked independently; a pixel claimed by several goes to
/// the highest probability. A lost instance stays empty from then on.
pub fn propagate_masks(tracker: &Tracker<'_>, frames: &[&RgbImage], init_masks: &[BinaryMask]) -> Result<Propagation> {
    if !tracker.params.config.mask_enabled {
        return Err(Error::InvalidConfig("mask propagation needs a model with a mask head".into()));
    }
    let first = frames.first().ok_or_else(|| Error::InvalidInput("no frames".into()))?;
    if init_masks.is_empty() {
        return Err(Error::InvalidInput("no instance masks to propagate".into()));
    }
    let (w, h) = (first.width() as usize, first.height() as usize);
    let mut states: Vec<Option<TrackState>> = Vec::with_capacity(init_masks.len());
    for m in init_masks {
        if m.width != w || m.height != h {
            return Err(Error::ShapeMismatch(format!("mask {}x{} for a {w}x{h} frame", m.width, m.height)));
        }
        states.push(Some(tracker.init_from_mask(first, m)?));
    }
    let mut lost = vec![None; init_masks.len()];
    let mut masks = vec![init_masks.to_vec()];
    for (t, frame) in frames.iter().enumerate().skip(1) {
        let mut probs: Vec<Option<ProbMap>> = Vec::with_capacity(states.len());
        for (i, slot) in states.iter_mut().enumerate() {
            let Some(state) = slot.as_mut() else {
                probs.push(None);
                continue;
            };
            match tracker.update(state, frame) {
                Ok(u) => probs.push(u.mask_prob),
                Err(Error::TrackingLost(m)) => {
                    log::warn!("instance {} lost at frame {t}: {m}", init_masks[i].instance);
                    lost[i] = Some(t);
                    *slot = None;
                    probs.push(None);
                }
                Err(e) => return Err(e),
            }
        }
        masks.push(resolve_conflicts(&probs, init_masks, w, h));
    }
    Ok(Propagation { masks, lost })
}

/// Binarises each instance's probabilities, giving contested pixels to the
/// highest probability (lowest instance order on exact ties).
pub fn resolve_conflicts(probs: &[Option<ProbMap>], instances: &[BinaryMask], width: usize, height: usize) -> Vec<BinaryMask> {
    let mut out: Vec<BinaryMask> = instances.iter().map(|m| BinaryMask::new(width, height, m.instance)).collect();
    for px in 0..width * height {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in probs.iter().enumerate() {
            if let Some(p) = p {
                let v = p.data[px];
                if v > 0.5 && best.is_none_or(|(_, b)| v > b) {
                    best = Some((i, v));
                }
            }
        }
        if let Some((i, _)) = best {
            out[i].data[px] = 1;
        }
    }
    out
}
