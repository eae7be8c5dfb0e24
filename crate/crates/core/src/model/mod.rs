//! Siamese region-proposal network with an optional mask branch.
//!
//! Both patches go through one shared convolutional backbone (three valid
//! 3x3 stride-2 convolutions, total stride 8): 127 px gives a 15x15 map whose
//! central 7x7 window is kept, 255 px gives 31x31. A 1x1 adjust layer per
//! branch precedes depthwise cross-correlation, which yields the 25x25
//! correlation volume shared by the score, box and mask heads.

mod checkpoint;
pub mod layers;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use layers::{depthwise_xcorr, depthwise_xcorr_backward, FeatureMap, Linear};

use crate::error::{Error, Result};
use crate::geometry::BoxDelta;
use crate::patch::Patch;

pub const TEMPLATE_SIZE: usize = 127;
pub const SEARCH_SIZE: usize = 255;
/// Side of the template feature window fed to the correlation.
pub const TEMPLATE_FEATURE: usize = 7;
pub const SEARCH_FEATURE: usize = 31;
pub const RESPONSE_SIZE: usize = SEARCH_FEATURE - TEMPLATE_FEATURE + 1;
/// Total backbone stride in patch pixels.
pub const STRIDE: usize = 8;
const KERNEL: usize = 3;
const CONV_STRIDE: usize = 2;
/// Subtracted from `[0, 1]` pixel values before the backbone.
pub const PIXEL_MEAN: f64 = 0.5;
/// Bumped whenever the parameter layout changes.
pub const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Output widths of the three backbone convolutions; the last is the
    /// correlation channel count.
    pub channels: [usize; 3],
    pub head_hidden: usize,
    pub mask_hidden: usize,
    /// Side of the square mask predicted at each response position.
    pub mask_size: usize,
    pub mask_enabled: bool,
    /// Anchors per response position.
    pub anchors: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64],
            head_hidden: 64,
            mask_hidden: 64,
            mask_size: 63,
            mask_enabled: false,
            anchors: 5,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn feature_channels(&self) -> usize {
        self.channels[2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) || self.head_hidden == 0 || self.anchors == 0 {
            return Err(Error::InvalidConfig("network widths and anchor count must be non-zero".into()));
        }
        if self.mask_enabled && (self.mask_hidden == 0 || self.mask_size == 0) {
            return Err(Error::InvalidConfig("mask head needs non-zero width and size".into()));
        }
        Ok(())
    }
}

/// All learnable weights. The same type doubles as a gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub version: u32,
    pub backbone: [Linear; 3],
    pub adjust_template: Linear,
    pub adjust_search: Linear,
    pub score_hidden: Linear,
    pub score_out: Linear,
    pub box_hidden: Linear,
    pub box_out: Linear,
    pub mask_hidden: Option<Linear>,
    pub mask_out: Option<Linear>,
}

const RELU_GAIN: f64 = 2.0;
const LINEAR_GAIN: f64 = 1.0;

impl ModelParams {
    /// Fan-in scaled Gaussian initialisation from `config.init_seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let [c1, c2, c3] = config.channels;
        let k = config.anchors;
        let h = config.head_hidden;
        let conv = |cin: usize, cout: usize, gain: f64, rng: &mut ChaCha8Rng| {
            Linear::init(KERNEL * KERNEL * cin, cout, gain, rng)
        };
        let backbone = [
            conv(3, c1, RELU_GAIN, &mut rng),
            conv(c1, c2, RELU_GAIN, &mut rng),
            conv(c2, c3, LINEAR_GAIN, &mut rng),
        ];
        let adjust_template = Linear::init(c3, c3, LINEAR_GAIN, &mut rng);
        let adjust_search = Linear::init(c3, c3, LINEAR_GAIN, &mut rng);
        let score_hidden = Linear::init(c3, h, RELU_GAIN, &mut rng);
        let score_out = Linear::init(h, 2 * k, LINEAR_GAIN, &mut rng);
        let box_hidden = Linear::init(c3, h, RELU_GAIN, &mut rng);
        let box_out = Linear::init(h, 4 * k, LINEAR_GAIN, &mut rng);
        let (mask_hidden, mask_out) = if config.mask_enabled {
            let m = config.mask_size * config.mask_size;
            (
                Some(Linear::init(c3, config.mask_hidden, RELU_GAIN, &mut rng)),
                Some(Linear::init(config.mask_hidden, m, LINEAR_GAIN, &mut rng)),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            config: config.clone(),
            version: PARAMS_VERSION,
            backbone,
            adjust_template,
            adjust_search,
            score_hidden,
            score_out,
            box_hidden,
            box_out,
            mask_hidden,
            mask_out,
        })
    }

    /// Same layout as `self`, every value zero.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.map_inplace(|_| 0.0);
        out
    }

    pub fn layers(&self) -> Vec<(&'static str, &Linear)> {
        let mut v = vec![
            ("backbone.conv1", &self.backbone[0]),
            ("backbone.conv2", &self.backbone[1]),
            ("backbone.conv3", &self.backbone[2]),
            ("adjust.template", &self.adjust_template),
            ("adjust.search", &self.adjust_search),
            ("score.hidden", &self.score_hidden),
            ("score.out", &self.score_out),
            ("box.hidden", &self.box_hidden),
            ("box.out", &self.box_out),
        ];
        if let (Some(h), Some(o)) = (&self.mask_hidden, &self.mask_out) {
            v.push(("mask.hidden", h));
            v.push(("mask.out", o));
        }
        v
    }

    pub fn layers_mut(&mut self) -> Vec<(&'static str, &mut Linear)> {
        let [b0, b1, b2] = &mut self.backbone;
        let mut v = vec![
            ("backbone.conv1", b0),
            ("backbone.conv2", b1),
            ("backbone.conv3", b2),
            ("adjust.template", &mut self.adjust_template),
            ("adjust.search", &mut self.adjust_search),
            ("score.hidden", &mut self.score_hidden),
            ("score.out", &mut self.score_out),
            ("box.hidden", &mut self.box_hidden),
            ("box.out", &mut self.box_out),
        ];
        if let (Some(h), Some(o)) = (&mut self.mask_hidden, &mut self.mask_out) {
            v.push(("mask.hidden", h));
            v.push(("mask.out", o));
        }
        v
    }

    /// Named flat views of every tensor, weights before biases.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (name, layer) in self.layers() {
            out.push((format!("{name}.weight"), layer.weight.as_slice().expect("standard layout")));
            out.push((format!("{name}.bias"), layer.bias.as_slice().expect("standard layout")));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (name, layer) in self.layers_mut() {
            let Linear { weight, bias } = layer;
            out.push((format!("{name}.weight"), weight.as_slice_mut().expect("standard layout")));
            out.push((format!("{name}.bias"), bias.as_slice_mut().expect("standard layout")));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn map_inplace(&mut self, mut f: impl FnMut(f64) -> f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = f(*v));
        }
    }

    /// `self += alpha * other`, layouts must match.
    pub fn add_scaled(&mut self, other: &ModelParams, alpha: f64) {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors().iter().flat_map(|(_, t)| t.iter()).map(|v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// Mask logits materialised at selected response positions.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskLogits {
    pub size: usize,
    pub positions: Vec<usize>,
    /// One row of `size * size` logits per entry of `positions`.
    pub logits: Array2<f64>,
}

impl MaskLogits {
    pub fn at(&self, position: usize) -> Option<ndarray::ArrayView1<'_, f64>> {
        self.positions
            .iter()
            .position(|&p| p == position)
            .map(|row| self.logits.row(row))
    }
}

/// Dense network output over the response lattice. Rows are lattice
/// positions `row * size + col`; anchor `a` owns score columns
/// `(2a, 2a + 1)` = `(object, background)` and delta columns `4a..4a + 4`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMap {
    pub size: usize,
    pub anchors: usize,
    pub scores: Array2<f64>,
    pub deltas: Array2<f64>,
    pub masks: Option<MaskLogits>,
}

impl ResponseMap {
    pub fn len(&self) -> usize {
        self.size * self.size * self.anchors
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Logits `(object, background)` of a flat anchor index.
    pub fn logits(&self, index: usize) -> (f64, f64) {
        let (pos, a) = (index / self.anchors, index % self.anchors);
        (self.scores[[pos, 2 * a]], self.scores[[pos, 2 * a + 1]])
    }

    /// Softmax object probability of a flat anchor index.
    pub fn p_obj(&self, index: usize) -> f64 {
        let (obj, back) = self.logits(index);
        1.0 / (1.0 + (back - obj).exp())
    }

    pub fn delta(&self, index: usize) -> BoxDelta {
        let (pos, a) = (index / self.anchors, index % self.anchors);
        BoxDelta::from_slice(&self.deltas.row(pos).as_slice().expect("standard layout")[4 * a..4 * a + 4])
    }

    /// Highest object probability; ties go to the lowest flat index.
    pub fn best(&self) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for i in 0..self.len() {
            let p = self.p_obj(i);
            if p > best.1 {
                best = (i, p);
            }
        }
        best
    }

    pub fn all_finite(&self) -> bool {
        self.scores.iter().chain(self.deltas.iter()).all(|v| v.is_finite())
            && self.masks.as_ref().is_none_or(|m| m.logits.iter().all(|v| v.is_finite()))
    }
}

/// Which response positions get full mask logits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MaskRequest {
    None,
    /// The position of the highest-scoring anchor.
    Best,
    All,
    Positions(Vec<usize>),
}

/// Gradient of a scalar loss with respect to a [`ResponseMap`].
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseGrad {
    pub scores: Array2<f64>,
    pub deltas: Array2<f64>,
    /// Rows aligned with the positions of the response's mask logits.
    pub masks: Option<Array2<f64>>,
}

impl ResponseGrad {
    pub fn zeros_like(resp: &ResponseMap) -> Self {
        Self {
            scores: Array2::zeros(resp.scores.dim()),
            deltas: Array2::zeros(resp.deltas.dim()),
            masks: resp.masks.as_ref().map(|m| Array2::zeros(m.logits.dim())),
        }
    }
}

struct BranchTape {
    /// im2col matrices of each convolution input.
    cols: Vec<Array2<f64>>,
    /// Post-ReLU outputs of the first two convolutions.
    acts: Vec<Array2<f64>>,
    /// `(height, width, channels)` of each convolution input.
    dims: Vec<(usize, usize, usize)>,
    out_hw: (usize, usize),
    /// Input of the adjust layer (cropped for the template branch).
    adjust_in: Array2<f64>,
    crop: Option<usize>,
}

/// Intermediate values kept by [`forward_train`] for [`backward`].
pub struct Tape {
    template: BranchTape,
    search: BranchTape,
    fz: FeatureMap,
    fx: FeatureMap,
    corr_scale: f64,
    head_in: Array2<f64>,
    score_hidden: Array2<f64>,
    box_hidden: Array2<f64>,
    mask_hidden: Option<Array2<f64>>,
    mask_positions: Vec<usize>,
}

impl Tape {
    /// True when every ReLU in both passes was on the same side of its kink.
    /// Finite-difference checks use this to skip perturbations that cross one.
    pub fn same_activation_pattern(&self, other: &Tape) -> bool {
        fn same(a: &Array2<f64>, b: &Array2<f64>) -> bool {
            a.dim() == b.dim() && a.iter().zip(b.iter()).all(|(x, y)| (*x > 0.0) == (*y > 0.0))
        }
        let branches = [(&self.template, &other.template), (&self.search, &other.search)];
        branches
            .iter()
            .all(|(a, b)| a.acts.len() == b.acts.len() && a.acts.iter().zip(&b.acts).all(|(x, y)| same(x, y)))
            && same(&self.score_hidden, &other.score_hidden)
            && same(&self.box_hidden, &other.box_hidden)
            && match (&self.mask_hidden, &other.mask_hidden) {
                (Some(a), Some(b)) => same(a, b),
                (None, None) => true,
                _ => false,
            }
    }
}

fn patch_input(patch: &Patch) -> FeatureMap {
    let n = patch.size;
    FeatureMap {
        height: n,
        width: n,
        data: Array2::from_shape_fn((n * n, 3), |(i, c)| patch.data[i * 3 + c] - PIXEL_MEAN),
    }
}

fn check_patch(patch: &Patch) -> Result<()> {
    if patch.size != TEMPLATE_SIZE && patch.size != SEARCH_SIZE {
        return Err(Error::ShapeMismatch(format!(
            "patch side {} is neither {TEMPLATE_SIZE} nor {SEARCH_SIZE}",
            patch.size
        )));
    }
    if patch.data.len() != patch.size * patch.size * 3 {
        return Err(Error::ShapeMismatch(format!(
            "patch buffer holds {} values for side {}",
            patch.data.len(),
            patch.size
        )));
    }
    Ok(())
}

fn run_branch(params: &ModelParams, patch: &Patch) -> Result<(FeatureMap, BranchTape)> {
    check_patch(patch)?;
    let mut x = patch_input(patch);
    let mut cols = Vec::with_capacity(3);
    let mut acts = Vec::with_capacity(2);
    let mut dims = Vec::with_capacity(3);
    for (i, layer) in params.backbone.iter().enumerate() {
        dims.push((x.height, x.width, x.channels()));
        let (c, oh, ow) = layers::im2col(&x, KERNEL, CONV_STRIDE)?;
        let mut y = layer.forward(&c);
        cols.push(c);
        if i < 2 {
            layers::relu_inplace(&mut y);
            acts.push(y.clone());
        }
        x = FeatureMap { height: oh, width: ow, data: y };
    }
    let out_hw = (x.height, x.width);
    let (adjust, crop) = if patch.size == TEMPLATE_SIZE {
        let top = (x.height - TEMPLATE_FEATURE) / 2;
        (&params.adjust_template, Some(top))
    } else {
        (&params.adjust_search, None)
    };
    let adjust_in = match crop {
        Some(top) => x.crop(top, top, TEMPLATE_FEATURE).data,
        None => x.data,
    };
    let side = crop.map_or(out_hw.0, |_| TEMPLATE_FEATURE);
    let feat = FeatureMap { height: side, width: side, data: adjust.forward(&adjust_in) };
    Ok((feat, BranchTape { cols, acts, dims, out_hw, adjust_in, crop }))
}

/// Shared-weight embedding: 127 px gives a 7x7 map, 255 px a 31x31 map.
pub fn embed(params: &ModelParams, patch: &Patch) -> Result<FeatureMap> {
    run_branch(params, patch).map(|(f, _)| f)
}

struct HeadOutput {
    response: ResponseMap,
    head_in: Array2<f64>,
    corr_scale: f64,
    score_hidden: Array2<f64>,
    box_hidden: Array2<f64>,
    mask_hidden: Option<Array2<f64>>,
}

fn run_heads(
    params: &ModelParams,
    corr: &FeatureMap,
    template_area: usize,
    request: &MaskRequest,
) -> Result<HeadOutput> {
    if corr.height != corr.width || corr.channels() != params.config.feature_channels() {
        return Err(Error::ShapeMismatch(format!(
            "correlation volume {}x{}x{} does not fit the heads",
            corr.height,
            corr.width,
            corr.channels()
        )));
    }
    // Keeps head inputs on the scale of a single feature product.
    let corr_scale = 1.0 / template_area as f64;
    let head_in = &corr.data * corr_scale;
    let mut score_hidden = params.score_hidden.forward(&head_in);
    layers::relu_inplace(&mut score_hidden);
    let scores = params.score_out.forward(&score_hidden);
    let mut box_hidden = params.box_hidden.forward(&head_in);
    layers::relu_inplace(&mut box_hidden);
    let deltas = params.box_out.forward(&box_hidden);
    let mut response = ResponseMap {
        size: corr.height,
        anchors: params.config.anchors,
        scores,
        deltas,
        masks: None,
    };
    let mut mask_hidden = None;
    if let (Some(mh), Some(mo)) = (&params.mask_hidden, &params.mask_out) {
        let positions: Vec<usize> = match request {
            MaskRequest::None => Vec::new(),
            MaskRequest::Best => vec![response.best().0 / response.anchors],
            MaskRequest::All => (0..corr.height * corr.width).collect(),
            MaskRequest::Positions(p) => p.clone(),
        };
        if !positions.is_empty() {
            let mut hidden = mh.forward(&head_in);
            layers::relu_inplace(&mut hidden);
            let rows = hidden.select(Axis(0), &positions);
            response.masks = Some(MaskLogits {
                size: params.config.mask_size,
                positions,
                logits: mo.forward(&rows),
            });
            mask_hidden = Some(hidden);
        }
    }
    Ok(HeadOutput { response, head_in, corr_scale, score_hidden, box_hidden, mask_hidden })
}

/// Score, box and (when enabled and requested) mask heads over a correlation volume.
pub fn heads(params: &ModelParams, corr: &FeatureMap, request: &MaskRequest) -> Result<ResponseMap> {
    run_heads(params, corr, TEMPLATE_FEATURE * TEMPLATE_FEATURE, request).map(|h| h.response)
}

pub fn forward(
    params: &ModelParams,
    template: &Patch,
    search: &Patch,
    request: &MaskRequest,
) -> Result<ResponseMap> {
    let (response, _) = forward_train(params, template, search, request)?;
    Ok(response)
}

/// Forward pass that also records what [`backward`] needs.
pub fn forward_train(
    params: &ModelParams,
    template: &Patch,
    search: &Patch,
    request: &MaskRequest,
) -> Result<(ResponseMap, Tape)> {
    if template.size != TEMPLATE_SIZE || search.size != SEARCH_SIZE {
        return Err(Error::ShapeMismatch(format!(
            "expected {TEMPLATE_SIZE} px template and {SEARCH_SIZE} px search, got {} and {}",
            template.size, search.size
        )));
    }
    let (fz, ttape) = run_branch(params, template)?;
    let (fx, stape) = run_branch(params, search)?;
    let corr = depthwise_xcorr(&fz, &fx)?;
    let h = run_heads(params, &corr, fz.height * fz.width, request)?;
    let mask_positions = h.response.masks.as_ref().map(|m| m.positions.clone()).unwrap_or_default();
    let tape = Tape {
        template: ttape,
        search: stape,
        fz,
        fx,
        corr_scale: h.corr_scale,
        head_in: h.head_in,
        score_hidden: h.score_hidden,
        box_hidden: h.box_hidden,
        mask_hidden: h.mask_hidden,
        mask_positions,
    };
    Ok((h.response, tape))
}

/// Materialises mask logits at `positions` for a response produced by
/// [`forward_train`], replacing any logits it already carried.
pub fn attach_masks(
    params: &ModelParams,
    tape: &mut Tape,
    response: &mut ResponseMap,
    positions: Vec<usize>,
) -> Result<()> {
    let (Some(mh), Some(mo)) = (&params.mask_hidden, &params.mask_out) else {
        return Err(Error::InvalidConfig("model has no mask head".into()));
    };
    let n = tape.head_in.nrows();
    if let Some(bad) = positions.iter().find(|&&p| p >= n) {
        return Err(Error::InvalidInput(format!("mask position {bad} outside the {n}-position lattice")));
    }
    if tape.mask_hidden.is_none() {
        let mut hidden = mh.forward(&tape.head_in);
        layers::relu_inplace(&mut hidden);
        tape.mask_hidden = Some(hidden);
    }
    let hidden = tape.mask_hidden.as_ref().expect("just computed");
    let rows = hidden.select(Axis(0), &positions);
    response.masks = Some(MaskLogits {
        size: params.config.mask_size,
        positions: positions.clone(),
        logits: mo.forward(&rows),
    });
    tape.mask_positions = positions;
    Ok(())
}

/// Gradients of a scalar loss with respect to the parameters and, when
/// `want_inputs` is set, the template and search pixels.
pub struct Gradients {
    pub params: ModelParams,
    pub template: Option<Vec<f64>>,
    pub search: Option<Vec<f64>>,
}

pub fn backward(params: &ModelParams, tape: &Tape, grad: &ResponseGrad, want_inputs: bool) -> Gradients {
    let mut g = params.zeros_like();

    let mut dh = score_branch_backward(&params.score_out, &tape.score_hidden, &grad.scores, &mut g.score_out);
    let mut d_head_in = params.score_hidden.backward(&tape.head_in, &dh, &mut g.score_hidden, true).unwrap();

    dh = score_branch_backward(&params.box_out, &tape.box_hidden, &grad.deltas, &mut g.box_out);
    d_head_in += &params.box_hidden.backward(&tape.head_in, &dh, &mut g.box_hidden, true).unwrap();

    if let (Some(hidden), Some(dm), Some(mh), Some(mo)) =
        (&tape.mask_hidden, &grad.masks, &params.mask_hidden, &params.mask_out)
    {
        let rows = hidden.select(Axis(0), &tape.mask_positions);
        let drows = mo.backward(&rows, dm, g.mask_out.as_mut().expect("mask layout"), true).unwrap();
        let mut dhidden = Array2::zeros(hidden.dim());
        for (r, &pos) in tape.mask_positions.iter().enumerate() {
            let mut dst = dhidden.row_mut(pos);
            dst += &drows.row(r);
        }
        layers::relu_backward_inplace(hidden, &mut dhidden);
        d_head_in += &mh.backward(&tape.head_in, &dhidden, g.mask_hidden.as_mut().expect("mask layout"), true).unwrap();
    }

    let side = RESPONSE_SIZE.min(tape.fx.height - tape.fz.height + 1);
    let dcorr = FeatureMap { height: side, width: side, data: d_head_in * tape.corr_scale };
    let (dfz, dfx) = depthwise_xcorr_backward(&tape.fz, &tape.fx, &dcorr);

    let template = branch_backward(params, &tape.template, &params.adjust_template, &dfz, &mut g, true, want_inputs);
    let search = branch_backward(params, &tape.search, &params.adjust_search, &dfx, &mut g, false, want_inputs);
    Gradients { params: g, template, search }
}

fn score_branch_backward(out: &Linear, hidden: &Array2<f64>, dy: &Array2<f64>, g: &mut Linear) -> Array2<f64> {
    let mut dh = out.backward(hidden, dy, g, true).unwrap();
    layers::relu_backward_inplace(hidden, &mut dh);
    dh
}

fn branch_backward(
    params: &ModelParams,
    tape: &BranchTape,
    adjust: &Linear,
    dfeat: &FeatureMap,
    g: &mut ModelParams,
    is_template: bool,
    want_input: bool,
) -> Option<Vec<f64>> {
    let gadj = if is_template { &mut g.adjust_template } else { &mut g.adjust_search };
    let dadj_in = adjust.backward(&tape.adjust_in, &dfeat.data, gadj, true).unwrap();
    let (oh, ow) = tape.out_hw;
    let mut dx = match tape.crop {
        Some(top) => {
            let window = FeatureMap { height: dfeat.height, width: dfeat.width, data: dadj_in };
            FeatureMap::uncrop(&window, top, top, oh, ow).data
        }
        None => dadj_in,
    };
    for i in (0..3).rev() {
        if i < 2 {
            layers::relu_backward_inplace(&tape.acts[i], &mut dx);
        }
        let need = i > 0 || want_input;
        let dcols = params.backbone[i].backward(&tape.cols[i], &dx, &mut g.backbone[i], need);
        match dcols {
            Some(dc) => {
                let (h, w, c) = tape.dims[i];
                dx = layers::col2im(&dc, h, w, c, KERNEL, CONV_STRIDE).data;
            }
            None => return None,
        }
    }
    // Pixel normalisation is a shift, so the gradient passes through unchanged.
    want_input.then(|| dx.into_raw_vec_and_offset().0)
}

/// Mask logits of one position reshaped to `size x size`.
pub fn mask_grid(masks: &MaskLogits, position: usize) -> Option<Array2<f64>> {
    masks.at(position).map(|row| {
        row.to_owned()
            .into_shape_with_order((masks.size, masks.size))
            .expect("square mask")
    })
}

#[cfg(test)]
mod tests;
