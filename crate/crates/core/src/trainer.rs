//! Self-supervised training: sample cycles from unlabeled sequences, take
//! the loss where each cycle returns to its start, and update with SGD.

use std::io::Write;
use std::path::{Path, PathBuf};

use image::RgbImage;
use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{render, Assignments};
use crate::cycle::{self, CropSpec, CycleOptions, Supervised};
use crate::data::TrainingView;
use crate::error::{Error, Result};
use crate::geometry::{make_anchor_grid, AnchorConfig, AnchorGrid, BBox, LabelPolicy};
use crate::losses::{response_loss, LossBreakdown, LossWeights};
use crate::mask::BinaryMask;
use crate::model::{self, save_checkpoint, ModelConfig, ModelParams};

/// Where a cycle's initial target comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// The annotation of the cycle's first frame.
    Object,
    /// A random box anywhere in the first frame.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub steps: usize,
    /// Inclusive range of frames per cycle.
    pub cycle_length: [usize; 2],
    /// Largest index gap between consecutive cycle frames.
    pub max_gap: usize,
    pub seed: u64,
    pub mask_enabled: bool,
    pub init_mode: InitMode,
    pub intermediate_pairs: bool,
    /// Global gradient norm limit; 0 disables clipping.
    pub grad_clip: f64,
    /// Checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub weights: LossWeights,
    pub crop: CropSpec,
    pub anchors: AnchorConfig,
    pub labels: LabelPolicy,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 0.0,
            steps: 1000,
            cycle_length: [2, 4],
            max_gap: 10,
            seed: 0,
            mask_enabled: false,
            init_mode: InitMode::Object,
            intermediate_pairs: false,
            grad_clip: 10.0,
            checkpoint_every: 0,
            weights: LossWeights::default(),
            crop: CropSpec::default(),
            anchors: AnchorConfig::default(),
            labels: LabelPolicy::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be finite and >= 0", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return bad("momentum must lie in [0, 1); weight_decay and grad_clip must be >= 0".into());
        }
        let [lo, hi] = self.cycle_length;
        if lo < 2 || hi < lo {
            return bad(format!("cycle_length [{lo}, {hi}] must satisfy 2 <= lo <= hi"));
        }
        if self.max_gap == 0 {
            return bad("max_gap must be at least 1".into());
        }
        self.weights.validate()?;
        self.crop.validate()?;
        self.anchors.validate()?;
        self.model_config().validate()
    }

    /// The model config with the flags this config owns applied.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            mask_enabled: self.mask_enabled,
            anchors: self.anchors.k(),
            ..self.model.clone()
        }
    }

    /// Defaults, then the file (if any), then the overrides.
    pub fn load(path: Option<&Path>, overrides: &Assignments) -> Result<Self> {
        let mut all = match path {
            Some(p) => Assignments::load(p)?,
            None => Assignments::default(),
        };
        all.extend(overrides.clone());
        let config: Self = all.apply(&Self::default())?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_text(&self) -> String {
        render(self)
    }
}

/// One training cycle: a sequence, its frame indices and the start target.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleSample {
    pub sequence: usize,
    pub frames: Vec<usize>,
    pub init_box: BBox,
    pub init_mask: Option<BinaryMask>,
}

const MAX_DRAWS: usize = 1000;

/// Random box covering 1-25% of the frame with aspect ratio in [0.5, 2].
pub fn random_box<R: Rng + ?Sized>(width: u32, height: u32, rng: &mut R) -> BBox {
    let (fw, fh) = (width as f64, height as f64);
    loop {
        let area = rng.random_range(0.01..=0.25) * fw * fh;
        let aspect = rng.random_range(0.5f64.ln()..=2f64.ln()).exp();
        let w = (area / aspect).sqrt();
        let h = area / w;
        if w <= fw && h <= fh {
            let cx = rng.random_range(w / 2.0..=fw - w / 2.0) - 0.5;
            let cy = rng.random_range(h / 2.0..=fh - h / 2.0) - 0.5;
            return BBox { cx, cy, w, h };
        }
    }
}

/// Draws one cycle: a sequence, a length, a start frame with an annotation
/// (object mode) and increasing frames with gaps of at most `max_gap`.
pub fn sample_cycle<R: Rng + ?Sized>(views: &[TrainingView<'_>], config: &TrainConfig, rng: &mut R) -> Result<CycleSample> {
    if views.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let [lo, hi] = config.cycle_length;
    for _ in 0..MAX_DRAWS {
        let sequence = rng.random_range(0..views.len());
        let view = &views[sequence];
        let length = rng.random_range(lo..=hi);
        if view.len() < length {
            continue;
        }
        let starts = match config.init_mode {
            InitMode::Object => view.annotated_starts().min(view.len()),
            InitMode::Random => view.len(),
        };
        if starts == 0 {
            continue;
        }
        let start = rng.random_range(0..starts);
        let mut frames = vec![start];
        for _ in 1..length {
            frames.push(frames.last().unwrap() + rng.random_range(1..=config.max_gap));
        }
        if *frames.last().unwrap() >= view.len() {
            continue;
        }
        let (init_box, init_mask) = match config.init_mode {
            InitMode::Object => {
                let (b, m) = view.start_annotation(start)?;
                (b, if config.mask_enabled { m } else { None })
            }
            InitMode::Random => {
                let (w, h) = view.frame_size()?;
                (random_box(w, h, rng), None)
            }
        };
        return Ok(CycleSample { sequence, frames, init_box, init_mask });
    }
    Err(Error::InvalidInput(format!(
        "no sequence is long enough for cycles of {lo}..{hi} frames"
    )))
}

/// Loss and gradient of one sample, or `None` when the cycle was lost or drifted.
pub struct SampleResult {
    pub loss: LossBreakdown,
    pub grads: ModelParams,
}

fn supervised_loss<R: Rng + ?Sized>(
    params: &ModelParams,
    grid: &AnchorGrid,
    config: &TrainConfig,
    step: &mut Supervised,
    mask: Option<&BinaryMask>,
    rng: &mut R,
) -> Result<(LossBreakdown, ModelParams)> {
    let (_, labels) = cycle::step_labels(step, grid, &config.labels, rng)?;
    let mut target = None;
    if let (true, Some(m)) = (params.config.mask_enabled, mask) {
        let positions = cycle::positive_positions(&labels, grid);
        let tape = step.tape.as_mut().expect("recorded tape");
        model::attach_masks(params, tape, &mut step.response, positions.clone())?;
        target = Some(cycle::mask_targets(m, &step.search.mapping, grid, &positions, params.config.mask_size));
    }
    let (loss, grad) = response_loss(&step.response, &labels, target.as_ref(), &config.weights)?;
    let tape = step.tape.as_ref().expect("recorded tape");
    Ok((loss, model::backward(params, tape, &grad, false).params))
}

fn add_loss(a: &mut LossBreakdown, b: &LossBreakdown) {
    a.score += b.score;
    a.box_ += b.box_;
    a.total += b.total;
    a.mask = match (a.mask, b.mask) {
        (None, None) => None,
        (x, y) => Some(x.unwrap_or(0.0) + y.unwrap_or(0.0)),
    };
}

/// Runs one cycle and differentiates its loss. Lost or drifted cycles give `Ok(None)`.
pub fn sample_gradient<R: Rng + ?Sized>(
    params: &ModelParams,
    grid: &AnchorGrid,
    config: &TrainConfig,
    frames: &[&RgbImage],
    sample: &CycleSample,
    rng: &mut R,
) -> Result<Option<SampleResult>> {
    let options = CycleOptions { intermediate_pairs: config.intermediate_pairs, record_tape: true };
    let mut result = match cycle::run_cycle(params, grid, &config.crop, frames, sample.init_box, sample.init_mask.clone(), options) {
        Ok(r) => r,
        Err(e @ (Error::TrackingLost(_) | Error::Drifted)) => {
            debug!("discarding cycle on sequence {}: {e}", sample.sequence);
            return Ok(None);
        }
        Err(e) => return Err(e),
    };
    let mask = result.init_mask.take();
    let (mut loss, mut grads) = match supervised_loss(params, grid, config, &mut result.last, mask.as_ref(), rng) {
        Ok(v) => v,
        Err(Error::Drifted) => {
            debug!("discarding drifted cycle on sequence {}", sample.sequence);
            return Ok(None);
        }
        Err(e) => return Err(e),
    };
    for pair in result.pairs.iter_mut() {
        match supervised_loss(params, grid, config, pair, None, rng) {
            Ok((l, g)) => {
                add_loss(&mut loss, &l);
                grads.add_scaled(&g, 1.0);
            }
            Err(Error::Drifted) => debug!("skipping drifted pair at frame {}", pair.frame),
            Err(e) => return Err(e),
        }
    }
    Ok(Some(SampleResult { loss, grads }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub score: f64,
    #[serde(rename = "box")]
    pub box_: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<f64>,
    pub total: f64,
    pub samples: usize,
    pub discarded: usize,
    pub grad_norm: f64,
    /// Set when every sample was discarded and the update was skipped.
    #[serde(skip_serializing_if = "std::ops::Not::not", default)]
    pub skipped: bool,
}

/// Optimiser state: parameters plus momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub velocity: ModelParams,
    pub step: usize,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        let velocity = params.zeros_like();
        Self { params, velocity, step: 0 }
    }
}

fn sample_seed(seed: u64, step: usize, index: usize) -> u64 {
    seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Evaluates the batch, averages loss and gradient over the kept samples
/// and applies one SGD-with-momentum update.
pub fn train_step(
    state: &mut TrainState,
    grid: &AnchorGrid,
    config: &TrainConfig,
    views: &[TrainingView<'_>],
    batch: &[CycleSample],
) -> Result<StepMetrics> {
    state.step += 1;
    let step = state.step;
    let params = &state.params;
    let results: Vec<Result<Option<SampleResult>>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, sample)| {
            let view = &views[sample.sequence];
            let frames = sample.frames.iter().map(|&f| view.frame(f)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&RgbImage> = frames.iter().map(|f| f.as_ref()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(config.seed, step, i));
            sample_gradient(params, grid, config, &refs, sample, &mut rng)
        })
        .collect();

    let mut sum = LossBreakdown::default();
    let mut grads = params.zeros_like();
    let mut kept = 0;
    for (i, r) in results.into_iter().enumerate() {
        let Some(r) = r? else { continue };
        if !r.loss.total.is_finite() || !r.grads.all_finite() {
            let s = &batch[i];
            return Err(Error::NonFinite(format!(
                "loss at step {step}, sample {i} (sequence {}, frames {:?})",
                views[s.sequence].id(),
                s.frames
            )));
        }
        add_loss(&mut sum, &r.loss);
        grads.add_scaled(&r.grads, 1.0);
        kept += 1;
    }
    let discarded = batch.len() - kept;
    if kept == 0 {
        warn!("step {step}: every sample was discarded; skipping the update");
        return Ok(StepMetrics {
            step,
            score: 0.0,
            box_: 0.0,
            mask: config.mask_enabled.then_some(0.0),
            total: 0.0,
            samples: 0,
            discarded,
            grad_norm: 0.0,
            skipped: true,
        });
    }
    let inv = 1.0 / kept as f64;
    grads.map_inplace(|g| g * inv);
    let grad_norm = grads.squared_norm().sqrt();
    if config.grad_clip > 0.0 && grad_norm > config.grad_clip {
        let s = config.grad_clip / grad_norm;
        grads.map_inplace(|g| g * s);
    }
    if config.weight_decay > 0.0 {
        grads.add_scaled(&state.params, config.weight_decay);
    }
    state.velocity.map_inplace(|v| v * config.momentum);
    state.velocity.add_scaled(&grads, 1.0);
    state.params.add_scaled(&state.velocity, -config.learning_rate);

    Ok(StepMetrics {
        step,
        score: sum.score * inv,
        box_: sum.box_ * inv,
        mask: config.mask_enabled.then(|| sum.mask.unwrap_or(0.0) * inv),
        total: sum.total * inv,
        samples: kept,
        discarded,
        grad_norm,
        skipped: false,
    })
}

/// Draws a batch of cycles.
pub fn sample_batch<R: Rng + ?Sized>(views: &[TrainingView<'_>], config: &TrainConfig, rng: &mut R) -> Result<Vec<CycleSample>> {
    (0..config.batch_size).map(|_| sample_cycle(views, config, rng)).collect()
}

/// Where [`train`] writes its outputs; everything is optional.
#[derive(Default)]
pub struct TrainOutputs<'a> {
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics: Option<&'a mut dyn Write>,
}

pub struct TrainResult {
    pub params: ModelParams,
    pub metrics: Vec<StepMetrics>,
}

pub fn checkpoint_name(step: usize) -> String {
    format!("step{step:06}.ckpt")
}

/// Full training run: `config.steps` updates on freshly sampled batches,
/// metrics as one JSON object per line, periodic and final checkpoints.
pub fn train(config: &TrainConfig, views: &[TrainingView<'_>], mut outputs: TrainOutputs<'_>) -> Result<TrainResult> {
    config.validate()?;
    let grid = make_anchor_grid(&config.anchors)?;
    let mut state = TrainState::new(ModelParams::init(&config.model_config())?);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let meta = config.to_text();
    if let Some(dir) = &outputs.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut metrics = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let batch = sample_batch(views, config, &mut rng)?;
        let m = train_step(&mut state, &grid, config, views, &batch)?;
        if let Some(w) = outputs.metrics.as_deref_mut() {
            let line = serde_json::to_string(&m).expect("metrics serialise");
            writeln!(w, "{line}").map_err(|e| Error::io("metrics", e))?;
        }
        metrics.push(m);
        if let Some(dir) = &outputs.checkpoint_dir {
            if config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 {
                save_checkpoint(&dir.join(checkpoint_name(state.step)), &state.params, &meta)?;
            }
        }
    }
    if let Some(dir) = &outputs.checkpoint_dir {
        save_checkpoint(&dir.join("final.ckpt"), &state.params, &meta)?;
    }
    Ok(TrainResult { params: state.params, metrics })
}
