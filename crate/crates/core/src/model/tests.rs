use super::*;
use crate::patch::CropMapping;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_patch(size: usize, seed: u64) -> Patch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Patch {
        size,
        data: (0..size * size * 3).map(|_| rng.random_range(0.0..1.0)).collect(),
        mapping: CropMapping { cx: 0.0, cy: 0.0, side: size as f64, size },
    }
}

fn small_config(mask: bool) -> ModelConfig {
    ModelConfig {
        channels: [3, 4, 5],
        head_hidden: 4,
        mask_hidden: 3,
        mask_size: 5,
        mask_enabled: mask,
        anchors: 2,
        init_seed: 7,
    }
}

#[test]
fn embedding_shapes() {
    let params = ModelParams::init(&small_config(false)).unwrap();
    let z = embed(&params, &random_patch(127, 1)).unwrap();
    assert_eq!((z.height, z.width, z.channels()), (7, 7, 5));
    let x = embed(&params, &random_patch(255, 2)).unwrap();
    assert_eq!((x.height, x.width, x.channels()), (31, 31, 5));
    assert!(embed(&params, &random_patch(128, 3)).is_err());
    assert_eq!(z, embed(&params, &random_patch(127, 1)).unwrap());
}

#[test]
fn default_heads_shapes() {
    let params = ModelParams::init(&ModelConfig { mask_enabled: true, ..ModelConfig::default() }).unwrap();
    let t = random_patch(127, 4);
    let s = random_patch(255, 5);
    let resp = forward(&params, &t, &s, &MaskRequest::All).unwrap();
    assert_eq!(resp.scores.dim(), (625, 10));
    assert_eq!(resp.deltas.dim(), (625, 20));
    let masks = resp.masks.as_ref().unwrap();
    assert_eq!(masks.logits.dim(), (625, 3969));
    assert_eq!(mask_grid(masks, 17).unwrap().dim(), (63, 63));
    assert!(resp.all_finite());
    assert_eq!(resp, forward(&params, &t, &s, &MaskRequest::All).unwrap());

    let best = forward(&params, &t, &s, &MaskRequest::Best).unwrap();
    let pos = best.best().0 / best.anchors;
    assert_eq!(best.masks.as_ref().unwrap().positions, vec![pos]);
    assert_eq!(best.masks.as_ref().unwrap().at(pos), masks.at(pos));
}

#[test]
fn mask_disabled_emits_no_masks() {
    let params = ModelParams::init(&small_config(false)).unwrap();
    let resp = forward(&params, &random_patch(127, 1), &random_patch(255, 2), &MaskRequest::All).unwrap();
    assert!(resp.masks.is_none());
}

#[test]
fn backbone_is_shared_between_branches() {
    let params = ModelParams::init(&small_config(false)).unwrap();
    let (t, s) = (random_patch(127, 8), random_patch(255, 9));
    let (z0, x0) = (embed(&params, &t).unwrap(), embed(&params, &s).unwrap());
    let mut bumped = params.clone();
    bumped.backbone[1].weight[[0, 0]] += 0.5;
    assert_ne!(z0, embed(&bumped, &t).unwrap());
    assert_ne!(x0, embed(&bumped, &s).unwrap());
}

#[test]
fn tie_break_prefers_lowest_index() {
    let resp = ResponseMap {
        size: 1,
        anchors: 3,
        scores: Array2::from_shape_vec((1, 6), vec![0.0, 1.0, 2.0, 0.0, 2.0, 0.0]).unwrap(),
        deltas: Array2::zeros((1, 12)),
        masks: None,
    };
    assert_eq!(resp.best().0, 1);
}

/// Random linear functional of every output, so each parameter matters.
fn probe(resp: &ResponseMap, seed: u64) -> (f64, ResponseGrad) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = ResponseGrad::zeros_like(resp);
    g.scores.mapv_inplace(|_| rng.random_range(-1.0..1.0));
    g.deltas.mapv_inplace(|_| rng.random_range(-1.0..1.0));
    if let Some(m) = g.masks.as_mut() {
        m.mapv_inplace(|_| rng.random_range(-1.0..1.0));
    }
    let mut value = (&resp.scores * &g.scores).sum() + (&resp.deltas * &g.deltas).sum();
    if let (Some(m), Some(gm)) = (&resp.masks, &g.masks) {
        value += (&m.logits * gm).sum();
    }
    (value, g)
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let params = ModelParams::init(&small_config(true)).unwrap();
    let (t, s) = (random_patch(127, 10), random_patch(255, 11));
    let request = MaskRequest::Positions(vec![3, 300, 624]);
    let (resp, tape) = forward_train(&params, &t, &s, &request).unwrap();
    let (_, g) = probe(&resp, 1);
    let grads = backward(&params, &tape, &g, true);

    let eval = |p: &ModelParams| probe(&forward(p, &t, &s, &request).unwrap(), 1).0;
    let analytic: Vec<(String, Vec<f64>)> =
        grads.params.tensors().into_iter().map(|(n, v)| (n, v.to_vec())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // Small step: the first conv feeds thousands of ReLUs, and a larger step
    // crosses enough kinks to bias the central difference.
    let h = 1e-7;
    for (ti, (name, values)) in analytic.iter().enumerate() {
        for _ in 0..4 {
            let j = rng.random_range(0..values.len());
            let mut plus = params.clone();
            plus.tensors_mut()[ti].1[j] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[ti].1[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = values[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2);
            assert!(err < 1e-4, "{name}[{j}]: analytic {a} numeric {numeric}");
        }
    }

    // Input gradients through the pixel normalisation.
    for (patch, grad, is_template) in [(&t, grads.template.as_ref().unwrap(), true), (&s, grads.search.as_ref().unwrap(), false)] {
        for _ in 0..4 {
            let j = rng.random_range(0..patch.data.len());
            let bump = |d: f64| {
                let mut p = patch.clone();
                p.data[j] += d;
                if is_template {
                    eval_inputs(&params, &p, &s, &request)
                } else {
                    eval_inputs(&params, &t, &p, &request)
                }
            };
            let numeric = (bump(h) - bump(-h)) / (2.0 * h);
            let err = (grad[j] - numeric).abs() / grad[j].abs().max(numeric.abs()).max(1e-2);
            assert!(err < 1e-4, "pixel {j}: analytic {} numeric {numeric}", grad[j]);
        }
    }
}

fn eval_inputs(params: &ModelParams, t: &Patch, s: &Patch, request: &MaskRequest) -> f64 {
    probe(&forward(params, t, s, request).unwrap(), 1).0
}

#[test]
fn attach_masks_matches_direct_request() {
    let params = ModelParams::init(&small_config(true)).unwrap();
    let (t, s) = (random_patch(127, 12), random_patch(255, 13));
    let direct = forward(&params, &t, &s, &MaskRequest::Positions(vec![5, 9])).unwrap();
    let (mut resp, mut tape) = forward_train(&params, &t, &s, &MaskRequest::None).unwrap();
    assert!(resp.masks.is_none());
    attach_masks(&params, &mut tape, &mut resp, vec![5, 9]).unwrap();
    assert_eq!(resp, direct);
    assert!(attach_masks(&params, &mut tape, &mut resp, vec![625]).is_err());
}

#[test]
#[ignore = "timing probe"]
fn forward_backward_timing() {
    let params = ModelParams::init(&ModelConfig { channels: [8, 16, 32], head_hidden: 32, ..ModelConfig::default() }).unwrap();
    let (t, s) = (random_patch(127, 1), random_patch(255, 2));
    let start = std::time::Instant::now();
    for _ in 0..10 {
        forward(&params, &t, &s, &MaskRequest::None).unwrap();
    }
    eprintln!("forward: {:?}", start.elapsed() / 10);
    let start = std::time::Instant::now();
    for _ in 0..10 {
        let (resp, tape) = forward_train(&params, &t, &s, &MaskRequest::None).unwrap();
        let (_, g) = probe(&resp, 1);
        backward(&params, &tape, &g, false);
    }
    eprintln!("forward+backward: {:?}", start.elapsed() / 10);
}

