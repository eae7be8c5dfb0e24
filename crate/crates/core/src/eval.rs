//! Box metrics under the reset protocol (accuracy, robustness, windowed
//! expected average overlap) and mask metrics (Jaccard, boundary F).

use std::fmt::Write as _;
use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::data::{parse_annotation_line, Annotation};
use crate::error::{Error, Result};
use crate::geometry::polygon_area;
use crate::mask::BinaryMask;

/// Convex polygon clipped against another convex polygon.
fn clip(subject: &[(f64, f64)], clipper: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut out = subject.to_vec();
    let n = clipper.len();
    for i in 0..n {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clipper[i], clipper[(i + 1) % n]);
        let side = |p: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (sp, sq) = (side(p), side(q));
            if sp >= 0.0 {
                out.push(p);
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                let t = sp / (sp - sq);
                out.push((p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1)));
            }
        }
    }
    out
}

/// Counter-clockwise (positive signed area in x-right, y-up terms) copy.
fn oriented(poly: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let signed: f64 = (0..poly.len())
        .map(|i| {
            let (p, q) = (poly[i], poly[(i + 1) % poly.len()]);
            p.0 * q.1 - q.0 * p.1
        })
        .sum();
    let mut v = poly.to_vec();
    if signed < 0.0 {
        v.reverse();
    }
    v
}

/// Overlap of two convex polygons (Sutherland-Hodgman intersection).
pub fn polygon_iou(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let (a, b) = (oriented(a), oriented(b));
    let (area_a, area_b) = (polygon_area(&a), polygon_area(&b));
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    let inter = clip(&a, &b);
    let i = if inter.len() >= 3 { polygon_area(&inter) } else { 0.0 };
    let union = area_a + area_b - i;
    if union <= 0.0 {
        0.0
    } else {
        (i / union).clamp(0.0, 1.0)
    }
}

pub fn annotation_iou(a: &Annotation, b: &Annotation) -> f64 {
    match (a, b) {
        (Annotation::Box(x), Annotation::Box(y)) => crate::geometry::iou(x, y),
        _ => polygon_iou(&a.polygon(), &b.polygon()),
    }
}

/// What happened at one frame of a reset-protocol run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FrameEval {
    /// The tracker was (re)initialised from ground truth here.
    Init,
    /// Tracked with this overlap (> 0).
    Tracked(f64),
    /// Overlap dropped to zero.
    Failure,
    /// Not evaluated while waiting to re-initialise.
    Skipped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub sequence: String,
    pub frames: Vec<FrameEval>,
    /// Predictions per frame (`None` at init, skipped and failure frames when unknown).
    pub predictions: Vec<Option<Annotation>>,
}

impl Trace {
    pub fn failures(&self) -> usize {
        self.frames.iter().filter(|f| matches!(f, FrameEval::Failure)).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VotConfig {
    /// Frames after a failure before re-initialising.
    pub skip: usize,
    /// Frames after a re-initialisation left out of accuracy.
    pub burn_in: usize,
    pub reset: bool,
    /// Window lengths averaged by [`eao_simplified`].
    pub eao_range: (usize, usize),
}

impl Default for VotConfig {
    fn default() -> Self {
        Self { skip: 5, burn_in: 10, reset: true, eao_range: (1, 100) }
    }
}

/// A box tracker as seen by the evaluation protocol.
pub trait BoxTracker {
    fn init(&mut self, frame: &RgbImage, target: &Annotation) -> Result<()>;
    fn update(&mut self, frame: &RgbImage) -> Result<Annotation>;
}

/// Runs the reset protocol on one sequence: a zero-overlap frame is a
/// failure; the tracker is re-initialised from ground truth `skip` frames
/// later. With `reset` off the tracker simply runs to the end.
pub fn run_vot_protocol<T: BoxTracker + ?Sized>(
    tracker: &mut T,
    id: &str,
    frames: &[&RgbImage],
    gt: &[Annotation],
    config: &VotConfig,
) -> Result<Trace> {
    if gt.len() != frames.len() || frames.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{id}: protocol needs ground truth for every frame ({} of {})",
            gt.len(),
            frames.len()
        )));
    }
    let n = frames.len();
    let mut out = vec![FrameEval::Skipped; n];
    let mut preds = vec![None; n];
    let mut t = 0;
    let mut init_at = Some(0);
    while t < n {
        if init_at == Some(t) {
            tracker.init(frames[t], &gt[t])?;
            out[t] = FrameEval::Init;
            init_at = None;
            t += 1;
            continue;
        }
        if init_at.is_some() {
            t += 1;
            continue;
        }
        let pred = tracker.update(frames[t])?;
        let overlap = annotation_iou(&pred, &gt[t]);
        preds[t] = Some(pred);
        if overlap > 0.0 {
            out[t] = FrameEval::Tracked(overlap);
        } else {
            out[t] = FrameEval::Failure;
            if config.reset {
                init_at = Some(t + config.skip.max(1));
            }
        }
        t += 1;
    }
    Ok(Trace { sequence: id.to_string(), frames: out, predictions: preds })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VotResult {
    pub accuracy: f64,
    /// Total failures over all sequences.
    pub robustness: usize,
    pub failures_per_sequence: Vec<usize>,
    pub eao: f64,
}

/// Overlaps that count towards accuracy: tracked frames outside the
/// burn-in after a re-initialisation; failures count as zero when the
/// protocol does not reset.
fn accuracy_overlaps(trace: &Trace, config: &VotConfig) -> Vec<f64> {
    let mut out = Vec::new();
    let mut since_reinit: Option<usize> = None;
    for (t, f) in trace.frames.iter().enumerate() {
        match f {
            FrameEval::Init => since_reinit = (t > 0).then_some(0),
            FrameEval::Tracked(o) => {
                let burn = since_reinit.is_some_and(|s| s < config.burn_in);
                if !burn {
                    out.push(*o);
                }
                since_reinit = since_reinit.map(|s| s + 1);
            }
            FrameEval::Failure => {
                if !config.reset {
                    out.push(0.0);
                }
                since_reinit = since_reinit.map(|s| s + 1);
            }
            FrameEval::Skipped => {}
        }
    }
    out
}

/// Mean overlap over the first `len` frames after each (re)initialisation,
/// zero after a failure. A window cut short by the sequence end without a
/// failure is averaged over the frames it has.
fn window_means(trace: &Trace, len: usize) -> Vec<f64> {
    let mut means = Vec::new();
    for (start, f) in trace.frames.iter().enumerate() {
        if !matches!(f, FrameEval::Init) {
            continue;
        }
        let mut sum = 0.0;
        let mut count = 0;
        let mut failed = false;
        for g in trace.frames.iter().skip(start + 1).take(len) {
            match g {
                FrameEval::Tracked(o) if !failed => sum += o,
                FrameEval::Failure => failed = true,
                FrameEval::Init => break,
                _ => {}
            }
            count += 1;
        }
        if failed {
            count = len;
        }
        if count > 0 {
            means.push(sum / count as f64);
        }
    }
    means
}

/// Windowed expected average overlap: for each window length in the range,
/// the per-sequence average of [`window_means`], averaged over sequences;
/// then the mean over window lengths. A simplified stand-in for the
/// benchmark toolkit's definition.
pub fn eao_simplified(traces: &[Trace], range: (usize, usize)) -> Result<f64> {
    if traces.is_empty() || traces.iter().all(|t| t.frames.len() < 2) {
        return Err(Error::InvalidInput("no traces to average".into()));
    }
    let (lo, hi) = (range.0.max(1), range.1.max(range.0.max(1)));
    let mut total = 0.0;
    for len in lo..=hi {
        let mut seq_sum = 0.0;
        let mut seqs = 0;
        for t in traces {
            let w = window_means(t, len);
            if !w.is_empty() {
                seq_sum += w.iter().sum::<f64>() / w.len() as f64;
                seqs += 1;
            }
        }
        total += if seqs > 0 { seq_sum / seqs as f64 } else { 0.0 };
    }
    Ok(total / (hi - lo + 1) as f64)
}

pub fn vot_result(traces: &[Trace], config: &VotConfig) -> Result<VotResult> {
    if traces.is_empty() {
        return Err(Error::InvalidInput("no traces".into()));
    }
    let per_seq: Vec<f64> = traces
        .iter()
        .filter_map(|t| {
            let o = accuracy_overlaps(t, config);
            (!o.is_empty()).then(|| o.iter().sum::<f64>() / o.len() as f64)
        })
        .collect();
    let accuracy = if per_seq.is_empty() { 0.0 } else { per_seq.iter().sum::<f64>() / per_seq.len() as f64 };
    let failures_per_sequence: Vec<usize> = traces.iter().map(Trace::failures).collect();
    Ok(VotResult {
        accuracy,
        robustness: failures_per_sequence.iter().sum(),
        failures_per_sequence,
        eao: eao_simplified(traces, config.eao_range)?,
    })
}

/// Region similarity; 1 when both masks are empty.
pub fn jaccard(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.same_shape(gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        let (a, b) = (a != 0, b != 0);
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Foreground pixels with a 4-neighbour that is background or off-image.
pub fn boundary(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let (w, h) = (mask.width, mask.height);
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let edge = r == 0 || c == 0 || r + 1 == h || c + 1 == w
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

/// Default boundary tolerance: `ceil(0.008 * diagonal)` pixels.
pub fn default_tolerance(width: usize, height: usize) -> f64 {
    (0.008 * ((width * width + height * height) as f64).sqrt()).ceil()
}

fn fraction_matched(from: &[(usize, usize)], to: &BinaryMask, tolerance: f64) -> f64 {
    let t = tolerance.floor() as i64;
    let t2 = tolerance * tolerance;
    let offsets: Vec<(i64, i64)> = (-t..=t)
        .flat_map(|dy| (-t..=t).map(move |dx| (dy, dx)))
        .filter(|&(dy, dx)| ((dy * dy + dx * dx) as f64) <= t2)
        .collect();
    let hits = from
        .iter()
        .filter(|&&(r, c)| {
            offsets.iter().any(|&(dy, dx)| {
                let (rr, cc) = (r as i64 + dy, c as i64 + dx);
                rr >= 0 && cc >= 0 && (rr as usize) < to.height && (cc as usize) < to.width && to.get(rr as usize, cc as usize)
            })
        })
        .count();
    hits as f64 / from.len() as f64
}

fn boundary_mask(mask: &BinaryMask) -> BinaryMask {
    let mut b = BinaryMask::new(mask.width, mask.height, mask.instance);
    for (r, c) in boundary(mask) {
        b.set(r, c, true);
    }
    b
}

/// Boundary F-measure with a pixel distance tolerance.
pub fn boundary_f(pred: &BinaryMask, gt: &BinaryMask, tolerance: f64) -> Result<f64> {
    pred.same_shape(gt)?;
    let (bp, bg) = (boundary(pred), boundary(gt));
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let precision = fraction_matched(&bp, &boundary_mask(gt), tolerance);
    let recall = fraction_matched(&bg, &boundary_mask(pred), tolerance);
    Ok(if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DavisResult {
    pub j_mean: f64,
    pub f_mean: f64,
}

/// Mean J and F per instance over frames after the first, then over
/// instances. `pred[t]` and `gt[t]` hold one mask per instance.
pub fn davis_result(pred: &[Vec<BinaryMask>], gt: &[Vec<BinaryMask>], tolerance: Option<f64>) -> Result<DavisResult> {
    if pred.len() != gt.len() || gt.len() < 2 {
        return Err(Error::InvalidInput(format!("{} predicted frames for {} ground-truth frames", pred.len(), gt.len())));
    }
    let instances = gt[0].len();
    if instances == 0 {
        return Err(Error::InvalidInput("no instances in the first frame".into()));
    }
    let (mut j_total, mut f_total) = (0.0, 0.0);
    for i in 0..instances {
        let (mut j, mut f) = (0.0, 0.0);
        for t in 1..gt.len() {
            let g = gt[t].get(i).ok_or_else(|| Error::InvalidInput(format!("frame {t} lacks instance {i}")))?;
            let p = pred[t].get(i).ok_or_else(|| Error::InvalidInput(format!("prediction {t} lacks instance {i}")))?;
            j += jaccard(p, g)?;
            f += boundary_f(p, g, tolerance.unwrap_or_else(|| default_tolerance(g.width, g.height)))?;
        }
        let frames = (gt.len() - 1) as f64;
        j_total += j / frames;
        f_total += f / frames;
    }
    Ok(DavisResult { j_mean: j_total / instances as f64, f_mean: f_total / instances as f64 })
}

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq)]
pub enum PredictionLine {
    Region(Annotation),
    /// Protocol status codes: 1 initialisation, 2 failure, 0 skipped.
    Status(u8),
}

/// Reads a prediction file: `cx,cy,w,h` boxes, 8-number polygons, or
/// single-number status codes.
pub fn read_predictions(path: &Path) -> Result<Vec<PredictionLine>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed = match fields.len() {
            1 => match fields[0] {
                "0" => Ok(PredictionLine::Status(0)),
                "1" => Ok(PredictionLine::Status(1)),
                "2" => Ok(PredictionLine::Status(2)),
                other => Err(format!("unknown status code `{other}`")),
            },
            4 => fields
                .iter()
                .map(|f| f.parse::<f64>().map_err(|_| format!("`{f}` is not a number")))
                .collect::<std::result::Result<Vec<_>, _>>()
                .and_then(|v| {
                    crate::geometry::BBox::new(v[0], v[1], v[2], v[3])
                        .map(|b| PredictionLine::Region(Annotation::Box(b)))
                        .map_err(|e| e.to_string())
                }),
            8 => parse_annotation_line(line).map(PredictionLine::Region),
            n => Err(format!("expected 1, 4 or 8 fields, found {n}")),
        };
        out.push(parsed.map_err(|m| Error::parse(path, i + 1, m))?);
    }
    Ok(out)
}

pub fn format_prediction(line: &PredictionLine) -> String {
    match line {
        PredictionLine::Status(s) => s.to_string(),
        PredictionLine::Region(Annotation::Box(b)) => format!("{:.4},{:.4},{:.4},{:.4}", b.cx, b.cy, b.w, b.h),
        PredictionLine::Region(Annotation::Polygon(p)) => p
            .iter()
            .map(|(x, y)| format!("{x:.4},{y:.4}"))
            .collect::<Vec<_>>()
            .join(","),
    }
}

/// Rebuilds a protocol trace from a prediction file. Files without status
/// codes are plain runs: the first line is the initialisation and every
/// later frame is scored as tracked or failed.
pub fn trace_from_predictions(id: &str, lines: &[PredictionLine], gt: &[Annotation]) -> Result<Trace> {
    if lines.len() != gt.len() {
        return Err(Error::InvalidInput(format!("{id}: {} prediction lines for {} frames", lines.len(), gt.len())));
    }
    let has_status = lines.iter().any(|l| matches!(l, PredictionLine::Status(_)));
    let mut frames = Vec::with_capacity(lines.len());
    let mut preds = Vec::with_capacity(lines.len());
    for (t, (line, g)) in lines.iter().zip(gt).enumerate() {
        let (f, p) = match line {
            PredictionLine::Status(1) => (FrameEval::Init, None),
            PredictionLine::Status(2) => (FrameEval::Failure, None),
            PredictionLine::Status(_) => (FrameEval::Skipped, None),
            PredictionLine::Region(_) if t == 0 && !has_status => (FrameEval::Init, None),
            PredictionLine::Region(a) => {
                let o = annotation_iou(a, g);
                (if o > 0.0 { FrameEval::Tracked(o) } else { FrameEval::Failure }, Some(a.clone()))
            }
        };
        frames.push(f);
        preds.push(p);
    }
    if frames.first() != Some(&FrameEval::Init) {
        return Err(Error::InvalidInput(format!("{id}: the first frame must be an initialisation")));
    }
    Ok(Trace { sequence: id.to_string(), frames, predictions: preds })
}

/// Lines of a protocol trace in the prediction file format.
pub fn trace_lines(trace: &Trace) -> Vec<PredictionLine> {
    trace
        .frames
        .iter()
        .zip(&trace.predictions)
        .map(|(f, p)| match (f, p) {
            (FrameEval::Init, _) => PredictionLine::Status(1),
            (FrameEval::Failure, _) => PredictionLine::Status(2),
            (FrameEval::Skipped, _) => PredictionLine::Status(0),
            (FrameEval::Tracked(_), Some(a)) => PredictionLine::Region(a.clone()),
            (FrameEval::Tracked(_), None) => PredictionLine::Status(0),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Metrics {
    Vot(VotResult),
    Davis(DavisResult),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub name: String,
    pub metrics: Metrics,
    /// Frames per second, when timed.
    pub fps: Option<f64>,
}

fn row_cells(row: &ReportRow) -> Vec<String> {
    let fps = row.fps.map_or_else(|| "-".to_string(), |f| format!("{f:.1}"));
    match &row.metrics {
        Metrics::Vot(v) => vec![
            row.name.clone(),
            format!("{:.4}", v.accuracy),
            v.robustness.to_string(),
            format!("{:.4}", v.eao),
            fps,
        ],
        Metrics::Davis(d) => vec![row.name.clone(), format!("{:.4}", d.j_mean), format!("{:.4}", d.f_mean), fps],
    }
}

fn header(rows: &[ReportRow]) -> Result<Vec<&'static str>> {
    let first = rows.first().ok_or_else(|| Error::InvalidInput("empty report".into()))?;
    let vot = matches!(first.metrics, Metrics::Vot(_));
    if rows.iter().any(|r| matches!(r.metrics, Metrics::Vot(_)) != vot) {
        return Err(Error::InvalidInput("cannot mix box and mask results in one report".into()));
    }
    Ok(if vot {
        vec!["Tracker", "Accuracy", "Robustness", "EAO", "FPS"]
    } else {
        vec!["Tracker", "J(Mean)", "F(Mean)", "FPS"]
    })
}

/// Aligned plain-text table.
pub fn report_text(rows: &[ReportRow]) -> Result<String> {
    let head = header(rows)?;
    let cells: Vec<Vec<String>> = rows.iter().map(row_cells).collect();
    let widths: Vec<usize> = (0..head.len())
        .map(|i| cells.iter().map(|r| r[i].len()).chain([head[i].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let line = |out: &mut String, items: &[String]| {
        let parts: Vec<String> = items
            .iter()
            .enumerate()
            .map(|(i, s)| if i == 0 { format!("{s:<w$}", w = widths[i]) } else { format!("{s:>w$}", w = widths[i]) })
            .collect();
        writeln!(out, "{}", parts.join("  ").trim_end()).expect("string write");
    };
    line(&mut out, &head.iter().map(|s| s.to_string()).collect::<Vec<_>>());
    for r in &cells {
        line(&mut out, r);
    }
    Ok(out)
}

/// Comma-separated table with the same numbers as [`report_text`].
pub fn report_csv(rows: &[ReportRow]) -> Result<String> {
    let head = header(rows)?;
    let mut out = head.join(",") + "\n";
    for r in rows {
        out.push_str(&row_cells(r).join(","));
        out.push('\n');
    }
    Ok(out)
}

/// Writes `report.txt` and `report.csv` into `dir`.
pub fn write_report(dir: &Path, rows: &[ReportRow]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, text) in [("report.txt", report_text(rows)?), ("report.csv", report_csv(rows)?)] {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
