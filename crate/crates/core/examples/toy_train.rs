//! Trains a small model on synthetic data and reports held-out IoU.
//!
//! `cargo run --release -p cycletrack-core --example toy_train -- key=value ...`
//! Keys are training config keys; `heldout=N` sets the evaluation set size.

use std::time::Instant;

use cycletrack_core::config::Assignments;
use cycletrack_core::data::{synth_dataset, SynthConfig, TrainingView};
use cycletrack_core::geometry::{iou, make_anchor_grid};
use cycletrack_core::eval::davis_result;
use cycletrack_core::tracker::{propagate_masks, track_sequence, Tracker};
use cycletrack_core::trainer::{sample_batch, train_step, TrainState};
use cycletrack_core::{ModelParams, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (extra, keys): (Vec<String>, Vec<String>) = args.into_iter().partition(|a| a.starts_with("heldout=") || a.starts_with("eval_every="));
    let get = |name: &str, default: usize| {
        extra.iter().find_map(|a| a.strip_prefix(&format!("{name}=")).map(|v| v.parse().unwrap())).unwrap_or(default)
    };
    let config = TrainConfig::load(None, &Assignments::from_overrides(&keys)?)?;
    let train_data = synth_dataset(&SynthConfig { sequences: 64, seed: 1, ..SynthConfig::default() })?;
    let held = synth_dataset(&SynthConfig { sequences: get("heldout", 16), seed: 2, ..SynthConfig::default() })?;
    let views: Vec<TrainingView> = train_data.iter().map(TrainingView::new).collect();
    let grid = make_anchor_grid(&config.anchors)?;
    let mut state = TrainState::new(ModelParams::init(&config.model_config())?);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let eval_every = get("eval_every", 100);
    let start = Instant::now();
    for step in 1..=config.steps {
        let batch = sample_batch(&views, &config, &mut rng)?;
        let m = train_step(&mut state, &grid, &config, &views, &batch)?;
        if step % 10 == 0 || step == 1 {
            println!(
                "step {step} total {:.4} score {:.4} box {:.4} mask {:?} disc {} gnorm {:.3} t {:.1}s",
                m.total, m.score, m.box_, m.mask, m.discarded, m.grad_norm, start.elapsed().as_secs_f64()
            );
        }
        if step % eval_every == 0 || step == config.steps {
            let tracker = Tracker::new(&state.params, grid.clone(), config.crop.clone())?;
            let (mut sum, mut one, mut still) = (0.0, 0.0, 0.0);
            let mut n = 0;
            for s in &held {
                let frames: Vec<_> = (0..s.len()).map(|i| s.frame(i).unwrap()).collect();
                let refs: Vec<&image::RgbImage> = frames.iter().map(|f| f.as_ref()).collect();
                let out = track_sequence(&tracker, &refs, s.annotations[0].bbox())?;
                for (t, (u, a)) in out.iter().zip(&s.annotations).enumerate().skip(1) {
                    sum += iou(&u.bbox, &a.bbox());
                    still += iou(&s.annotations[0].bbox(), &a.bbox());
                    let mut st = tracker.init(refs[t - 1], s.annotations[t - 1].bbox())?;
                    one += iou(&tracker.update(&mut st, refs[t])?.bbox, &a.bbox());
                    n += 1;
                }
            }
            let n = n as f64;
            println!("eval step {step}: mean IoU {:.4} one-step {:.4} static {:.4}", sum / n, one / n, still / n);
            if config.mask_enabled {
                let (mut j, mut f, mut count) = (0.0, 0.0, 0);
                for s in &held {
                    let frames: Vec<_> = (0..s.len()).map(|i| s.frame(i).unwrap()).collect();
                    let refs: Vec<&image::RgbImage> = frames.iter().map(|f| f.as_ref()).collect();
                    let ids = s.masks[0].instances();
                    let init: Vec<_> = ids.iter().map(|&i| s.masks[0].instance(i)).collect();
                    let out = propagate_masks(&tracker, &refs, &init)?;
                    let gt: Vec<Vec<_>> = s.masks.iter().map(|m| ids.iter().map(|&i| m.instance(i)).collect()).collect();
                    let r = davis_result(&out.masks, &gt, None)?;
                    j += r.j_mean;
                    f += r.f_mean;
                    count += 1;
                }
                println!("eval step {step}: J {:.4} F {:.4}", j / count as f64, f / count as f64);
            }
        }
    }
    Ok(())
}
