use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use cycletrack_core::config::{render as render_config, Assignments};
use cycletrack_core::data::{
    frame_file_name, load_dataset, load_sequence, read_label_png, save_masks, synth_dataset, write_dataset, TrainingView,
};
use cycletrack_core::eval::{
    davis_result, format_prediction, read_predictions, report_text, run_vot_protocol, trace_from_predictions,
    trace_lines, vot_result, write_report, BoxTracker, DavisResult, Metrics, PredictionLine, ReportRow, VotConfig,
};
use cycletrack_core::geometry::{make_anchor_grid, min_area_box_from_mask};
use cycletrack_core::model::load_checkpoint;
use cycletrack_core::tracker::{binarize, propagate_masks, TrackState, Tracker, Update};
use cycletrack_core::trainer::{train as run_training, TrainOutputs};
use cycletrack_core::{Annotation, BinaryMask, ModelParams, Sequence, SynthConfig, TrainConfig};
use image::RgbImage;
use rayon::prelude::*;

use crate::render::overlay;
use crate::{CliError, CliResult, ConfigArgs, EvalArgs, ModelArgs, PropagateArgs, SynthArgs, Task, TrackArgs, TrainArgs};

const SPEED_FILE: &str = "speed.json";

fn require(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} `{}` does not exist", path.display())))
    }
}

fn assignments(args: &ConfigArgs) -> CliResult<Assignments> {
    let mut all = match &args.config {
        Some(p) => {
            require(p, "config file")?;
            Assignments::load(p)?
        }
        None => Assignments::default(),
    };
    all.extend(Assignments::from_overrides(&args.set).map_err(|e| CliError::Usage(e.to_string()))?);
    if let Some(seed) = args.seed {
        all.push("seed", seed);
    }
    Ok(all)
}

/// A single sequence folder or a root holding several.
fn sequences(data: &Path) -> CliResult<Vec<Sequence>> {
    require(data, "data directory")?;
    Ok(if data.join("frames").is_dir() { vec![load_sequence(data)?] } else { load_dataset(data)? })
}

fn frames(seq: &Sequence) -> CliResult<Vec<Arc<RgbImage>>> {
    Ok((0..seq.len()).map(|i| seq.frame(i)).collect::<cycletrack_core::Result<_>>()?)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn save_png(img: &RgbImage, path: &Path) -> CliResult<()> {
    img.save(path).map_err(|e| CliError::io(path, std::io::Error::other(e)))
}

fn thread_pool(jobs: u16) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs as usize)
        .build()
        .map_err(|e| CliError::Usage(format!("--jobs {jobs}: {e}")))
}

pub fn synth(args: &SynthArgs) -> CliResult<()> {
    let config: SynthConfig = assignments(&args.config)?.apply(&SynthConfig::default())?;
    config.validate()?;
    let seqs = synth_dataset(&config)?;
    write_dataset(&args.out, &seqs, Some(&render_config(&config)))?;
    println!("wrote {} sequences to {}", seqs.len(), args.out.display());
    Ok(())
}

pub fn train(args: &TrainArgs) -> CliResult<()> {
    let overrides = assignments(&args.config)?;
    let config = TrainConfig::load(None, &overrides)?;
    let data = sequences(&args.data)?;
    let views: Vec<TrainingView> = data.iter().map(TrainingView::new).collect();
    create_dir(&args.out)?;
    write_file(&args.out.join("train.cfg"), &config.to_text())?;
    let metrics_path = args.out.join("metrics.jsonl");
    let file = File::create(&metrics_path).map_err(|e| CliError::io(&metrics_path, e))?;
    let mut writer = BufWriter::new(file);
    let outputs = TrainOutputs { checkpoint_dir: Some(args.out.clone()), metrics: Some(&mut writer) };
    let result = run_training(&config, &views, outputs)?;
    writer.flush().map_err(|e| CliError::io(&metrics_path, e))?;
    if let Some(last) = result.metrics.last() {
        println!("step {} total loss {:.4}", last.step, last.total);
    }
    println!("wrote {}", args.out.join("final.ckpt").display());
    Ok(())
}

/// The model and the training config stored alongside it.
fn load_model(path: &Path) -> CliResult<(ModelParams, TrainConfig)> {
    require(path, "checkpoint")?;
    let ckpt = load_checkpoint(path)?;
    let config = match Assignments::parse(&ckpt.meta, path).and_then(|a| a.apply(&TrainConfig::default())) {
        Ok(c) => c,
        Err(e) => {
            log::warn!("{}: no usable training config in checkpoint ({e}); using defaults", path.display());
            TrainConfig::default()
        }
    };
    Ok((ckpt.params, config))
}

struct Timing {
    frames: usize,
    seconds: f64,
}

fn write_speed(dir: &Path, timings: &[Timing]) -> CliResult<()> {
    let frames: usize = timings.iter().map(|t| t.frames).sum();
    let seconds: f64 = timings.iter().map(|t| t.seconds).sum();
    let text = serde_json::json!({ "frames": frames, "seconds": seconds }).to_string();
    write_file(&dir.join(SPEED_FILE), &text)
}

fn read_fps(dir: &Path) -> Option<f64> {
    let text = std::fs::read_to_string(dir.join(SPEED_FILE)).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    let (frames, seconds) = (v["frames"].as_f64()?, v["seconds"].as_f64()?);
    (seconds > 0.0).then(|| frames / seconds)
}

fn predicted_region(update: &Update, rotated: bool, instance: u8) -> Annotation {
    if rotated {
        if let Some(prob) = &update.mask_prob {
            if let Ok(r) = min_area_box_from_mask(&binarize(prob, instance)) {
                return Annotation::Polygon(r.corners);
            }
        }
    }
    Annotation::Box(update.bbox)
}

struct SessionTracker<'a> {
    tracker: &'a Tracker<'a>,
    state: Option<TrackState>,
    rotated: bool,
    last: Option<Update>,
}

impl BoxTracker for SessionTracker<'_> {
    fn init(&mut self, frame: &RgbImage, target: &Annotation) -> cycletrack_core::Result<()> {
        self.state = Some(self.tracker.init(frame, target.bbox())?);
        self.last = None;
        Ok(())
    }

    fn update(&mut self, frame: &RgbImage) -> cycletrack_core::Result<Annotation> {
        let state = self.state.as_mut().expect("initialised before update");
        let u = match self.tracker.update(state, frame) {
            Ok(u) => u,
            Err(cycletrack_core::Error::TrackingLost(m)) => {
                log::warn!("{m}; holding the previous box");
                Update { bbox: state.bbox, score: 0.0, mask_prob: None, clamped: true }
            }
            Err(e) => return Err(e),
        };
        let region = predicted_region(&u, self.rotated, 1);
        self.last = Some(u);
        Ok(region)
    }
}

fn track_one(tracker: &Tracker<'_>, seq: &Sequence, args: &TrackArgs) -> CliResult<Timing> {
    let imgs = frames(seq)?;
    let refs: Vec<&RgbImage> = imgs.iter().map(|f| f.as_ref()).collect();
    let first = seq
        .annotations
        .first()
        .ok_or_else(|| cycletrack_core::Error::InvalidInput(format!("{}: no first-frame annotation", seq.id)))?;
    let mut session = SessionTracker { tracker, state: None, rotated: args.rotated, last: None };
    let start = Instant::now();
    let (lines, masks): (Vec<PredictionLine>, Vec<Option<BinaryMask>>) = if args.reset {
        let config = VotConfig::default();
        let trace = run_vot_protocol(&mut session, &seq.id, &refs, &seq.annotations, &config)?;
        (trace_lines(&trace), vec![None; refs.len()])
    } else {
        session.init(refs[0], first)?;
        let mut lines = vec![PredictionLine::Region(first.clone())];
        let mut masks = vec![None];
        for f in &refs[1..] {
            lines.push(PredictionLine::Region(session.update(f)?));
            masks.push(session.last.as_ref().and_then(|u| u.mask_prob.as_ref()).map(|p| binarize(p, 1)));
        }
        (lines, masks)
    };
    let seconds = start.elapsed().as_secs_f64();
    let text: Vec<String> = lines.iter().map(format_prediction).collect();
    write_file(&args.model.out.join(format!("{}.txt", seq.id)), &(text.join("\n") + "\n"))?;
    if args.model.render {
        let dir = args.model.out.join("render").join(&seq.id);
        create_dir(&dir)?;
        for (t, (img, line)) in refs.iter().zip(&lines).enumerate() {
            let region = match line {
                PredictionLine::Region(a) => Some(a),
                PredictionLine::Status(_) => None,
            };
            let m: Vec<&BinaryMask> = masks[t].iter().collect();
            let path = dir.join(frame_file_name(t, "png"));
            save_png(&overlay(img, region, &m), &path)?;
        }
    }
    Ok(Timing { frames: refs.len() - 1, seconds })
}

pub fn track(args: &TrackArgs) -> CliResult<()> {
    let (params, config) = load_model(&args.model.checkpoint)?;
    if args.rotated && !params.config.mask_enabled {
        return Err(CliError::Usage("--rotated needs a checkpoint trained with the mask head".into()));
    }
    let seqs = sequences(&args.model.data)?;
    create_dir(&args.model.out)?;
    let grid = make_anchor_grid(&config.anchors)?;
    let tracker = Tracker::new(&params, grid, config.crop.clone())?;
    let timings: Vec<Timing> = thread_pool(args.model.jobs)?
        .install(|| seqs.par_iter().map(|s| track_one(&tracker, s, args)).collect::<CliResult<_>>())?;
    write_speed(&args.model.out, &timings)?;
    println!("tracked {} sequences into {}", seqs.len(), args.model.out.display());
    Ok(())
}

fn propagate_one(tracker: &Tracker<'_>, seq: &Sequence, args: &ModelArgs) -> CliResult<Timing> {
    let first = seq
        .masks
        .first()
        .ok_or_else(|| cycletrack_core::Error::InvalidInput(format!("{}: no first-frame mask", seq.id)))?;
    let init: Vec<BinaryMask> = first.instances().into_iter().map(|id| first.instance(id)).collect();
    let imgs = frames(seq)?;
    let refs: Vec<&RgbImage> = imgs.iter().map(|f| f.as_ref()).collect();
    let start = Instant::now();
    let result = propagate_masks(tracker, &refs, &init)?;
    let seconds = start.elapsed().as_secs_f64();
    for (i, lost) in result.lost.iter().enumerate() {
        if let Some(t) = lost {
            log::warn!("{}: instance {} lost at frame {}", seq.id, init[i].instance, t + 1);
        }
    }
    save_masks(&args.out.join(&seq.id), &result.label_maps())?;
    if args.render {
        let dir = args.out.join("render").join(&seq.id);
        create_dir(&dir)?;
        for (t, (img, ms)) in refs.iter().zip(&result.masks).enumerate() {
            let m: Vec<&BinaryMask> = ms.iter().collect();
            let path = dir.join(frame_file_name(t, "png"));
            save_png(&overlay(img, None, &m), &path)?;
        }
    }
    Ok(Timing { frames: refs.len() - 1, seconds })
}

pub fn propagate(args: &PropagateArgs) -> CliResult<()> {
    let (params, config) = load_model(&args.model.checkpoint)?;
    if !params.config.mask_enabled {
        return Err(CliError::Usage("propagate needs a checkpoint trained with the mask head".into()));
    }
    let seqs = sequences(&args.model.data)?;
    create_dir(&args.model.out)?;
    let grid = make_anchor_grid(&config.anchors)?;
    let tracker = Tracker::new(&params, grid, config.crop.clone())?;
    let timings: Vec<Timing> = thread_pool(args.model.jobs)?
        .install(|| seqs.par_iter().map(|s| propagate_one(&tracker, s, &args.model)).collect::<CliResult<_>>())?;
    write_speed(&args.model.out, &timings)?;
    println!("propagated {} sequences into {}", seqs.len(), args.model.out.display());
    Ok(())
}

fn parse_range(text: &str) -> CliResult<(usize, usize)> {
    let bad = || CliError::Usage(format!("--eao-range `{text}`: expected LO,HI with 1 <= LO <= HI"));
    let (lo, hi) = text.split_once(',').ok_or_else(bad)?;
    let (lo, hi): (usize, usize) = (lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?);
    if lo == 0 || hi < lo {
        return Err(bad());
    }
    Ok((lo, hi))
}

fn davis_sequence(seq: &Sequence, pred_dir: &Path, tolerance: Option<f64>) -> CliResult<(DavisResult, usize)> {
    if !seq.has_full_masks() {
        return Err(cycletrack_core::Error::InvalidInput(format!("{}: masks are needed for every frame", seq.id)).into());
    }
    let ids = seq.masks[0].instances();
    let gt: Vec<Vec<BinaryMask>> = seq.masks.iter().map(|m| ids.iter().map(|&i| m.instance(i)).collect()).collect();
    let dir = pred_dir.join(&seq.id);
    require(&dir, "prediction directory")?;
    let mut pred = Vec::with_capacity(seq.len());
    for t in 0..seq.len() {
        let map = read_label_png(&dir.join(frame_file_name(t, "png")))?;
        pred.push(ids.iter().map(|&i| map.instance(i)).collect());
    }
    Ok((davis_result(&pred, &gt, tolerance)?, ids.len()))
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    require(&args.pred, "prediction directory")?;
    let seqs = sequences(&args.data)?;
    let out: PathBuf = args.out.clone().unwrap_or_else(|| args.pred.clone());
    let metrics = match args.task {
        Task::Vot => {
            let config = VotConfig { eao_range: parse_range(&args.eao_range)?, ..VotConfig::default() };
            let mut traces = Vec::with_capacity(seqs.len());
            for s in &seqs {
                if !s.has_full_boxes() {
                    return Err(cycletrack_core::Error::InvalidInput(format!("{}: boxes are needed for every frame", s.id)).into());
                }
                let path = args.pred.join(format!("{}.txt", s.id));
                require(&path, "prediction file")?;
                traces.push(trace_from_predictions(&s.id, &read_predictions(&path)?, &s.annotations)?);
            }
            Metrics::Vot(vot_result(&traces, &config)?)
        }
        Task::Davis => {
            let (mut j, mut f, mut n) = (0.0, 0.0, 0usize);
            for s in &seqs {
                let (r, count) = davis_sequence(s, &args.pred, args.tolerance)?;
                j += r.j_mean * count as f64;
                f += r.f_mean * count as f64;
                n += count;
            }
            Metrics::Davis(DavisResult { j_mean: j / n as f64, f_mean: f / n as f64 })
        }
    };
    let rows = vec![ReportRow { name: args.name.clone(), metrics, fps: read_fps(&args.pred) }];
    write_report(&out, &rows)?;
    print!("{}", report_text(&rows)?);
    Ok(())
}
