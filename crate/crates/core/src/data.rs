//! Sequences on disk and in memory, and a synthetic moving-shape generator.
//!
//! Folder layout, frames numbered from 1:
//!
//! ```text
//! frames/00000001.png        (or .jpg)
//! groundtruth.txt            one line per frame: x,y,w,h (top-left) or 8 polygon coordinates
//! masks/00000001.png         optional, paletted: 0 background, 1..N instances
//! ```
//!
//! A `groundtruth.txt` or `masks/` folder covering only the first frame
//! marks the sequence as first-frame-only.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::mask::{BinaryMask, LabelMap};

/// A per-frame annotation: an axis-aligned box or a 4-corner polygon.
#[derive(Debug, Clone, PartialEq)]
pub enum Annotation {
    Box(BBox),
    Polygon([(f64, f64); 4]),
}

impl Annotation {
    /// Axis-aligned bounds, used for training and initialisation.
    pub fn bbox(&self) -> BBox {
        match self {
            Annotation::Box(b) => *b,
            Annotation::Polygon(pts) => {
                let x0 = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
                let x1 = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
                let y0 = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
                let y1 = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
                BBox { cx: (x0 + x1) / 2.0, cy: (y0 + y1) / 2.0, w: x1 - x0, h: y1 - y0 }
            }
        }
    }

    /// Outline as a polygon (boxes give their four corners).
    pub fn polygon(&self) -> Vec<(f64, f64)> {
        match self {
            Annotation::Box(b) => b.corners().to_vec(),
            Annotation::Polygon(pts) => pts.to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
enum Frames {
    Memory(Vec<Arc<RgbImage>>),
    Files(Vec<PathBuf>),
}

#[derive(Debug, Clone)]
pub struct Sequence {
    pub id: String,
    frames: Frames,
    /// One entry per frame, or a single entry for first-frame-only data.
    pub annotations: Vec<Annotation>,
    /// Instance label maps, same coverage rule as `annotations`.
    pub masks: Vec<LabelMap>,
}

impl Sequence {
    pub fn from_frames(id: impl Into<String>, frames: Vec<RgbImage>, annotations: Vec<Annotation>, masks: Vec<LabelMap>) -> Result<Self> {
        let seq = Self {
            id: id.into(),
            frames: Frames::Memory(frames.into_iter().map(Arc::new).collect()),
            annotations,
            masks,
        };
        seq.validate()?;
        Ok(seq)
    }

    fn validate(&self) -> Result<()> {
        let n = self.len();
        if n < 2 {
            return Err(Error::InvalidInput(format!("sequence {} has {n} frames, need at least 2", self.id)));
        }
        for (what, count) in [("annotations", self.annotations.len()), ("masks", self.masks.len())] {
            if count > 1 && count != n {
                return Err(Error::InvalidInput(format!(
                    "sequence {}: {count} {what} for {n} frames",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        match &self.frames {
            Frames::Memory(f) => f.len(),
            Frames::Files(f) => f.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Decodes frame `i` (from memory or disk).
    pub fn frame(&self, i: usize) -> Result<Arc<RgbImage>> {
        match &self.frames {
            Frames::Memory(f) => f
                .get(i)
                .cloned()
                .ok_or_else(|| Error::InvalidInput(format!("frame {i} out of range"))),
            Frames::Files(paths) => {
                let path = paths.get(i).ok_or_else(|| Error::InvalidInput(format!("frame {i} out of range")))?;
                let img = image::open(path).map_err(|e| Error::Image { path: path.clone(), source: e })?;
                Ok(Arc::new(img.to_rgb8()))
            }
        }
    }

    /// Decodes every frame up front.
    pub fn into_memory(self) -> Result<Self> {
        if let Frames::Memory(_) = self.frames {
            return Ok(self);
        }
        let frames = (0..self.len()).map(|i| self.frame(i)).collect::<Result<Vec<_>>>()?;
        Ok(Self { frames: Frames::Memory(frames), ..self })
    }

    pub fn first_frame_only(&self) -> bool {
        self.annotations.len() <= 1 && self.masks.len() <= 1
    }

    pub fn has_full_boxes(&self) -> bool {
        self.annotations.len() == self.len()
    }

    pub fn has_full_masks(&self) -> bool {
        !self.masks.is_empty() && self.masks.len() == self.len()
    }

    pub fn frame_size(&self) -> Result<(u32, u32)> {
        let f = self.frame(0)?;
        Ok((f.width(), f.height()))
    }
}

/// Trainer-facing access to a sequence: frames are free, annotations can
/// only be read for a cycle's start frame, and every such read is recorded.
pub struct TrainingView<'a> {
    seq: &'a Sequence,
    reads: Mutex<BTreeSet<usize>>,
}

impl<'a> TrainingView<'a> {
    pub fn new(seq: &'a Sequence) -> Self {
        Self { seq, reads: Mutex::new(BTreeSet::new()) }
    }

    pub fn id(&self) -> &str {
        &self.seq.id
    }

    pub fn len(&self) -> usize {
        self.seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq.is_empty()
    }

    pub fn frame(&self, i: usize) -> Result<Arc<RgbImage>> {
        self.seq.frame(i)
    }

    pub fn frame_size(&self) -> Result<(u32, u32)> {
        self.seq.frame_size()
    }

    /// Frames whose annotation may start a cycle.
    pub fn annotated_starts(&self) -> usize {
        self.seq.annotations.len().max(self.seq.masks.len())
    }

    /// Box and (first instance) mask of the cycle start frame.
    pub fn start_annotation(&self, start: usize) -> Result<(BBox, Option<BinaryMask>)> {
        self.reads.lock().expect("reads lock").insert(start);
        let mask = self.seq.masks.get(start).and_then(|m| m.instances().first().map(|&id| m.instance(id)));
        let bbox = match self.seq.annotations.get(start) {
            Some(a) => a.bbox(),
            None => match &mask {
                Some(m) => crate::geometry::axis_box_from_mask(m)?,
                None => return Err(Error::InvalidInput(format!("{}: frame {start} is not annotated", self.seq.id))),
            },
        };
        Ok((bbox, mask))
    }

    /// Frames whose annotations have been read so far.
    pub fn annotation_reads(&self) -> BTreeSet<usize> {
        self.reads.lock().expect("reads lock").clone()
    }
}

pub fn frame_file_name(i: usize, ext: &str) -> String {
    format!("{:08}.{ext}", i + 1)
}

fn numbered_files(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if ext.is_some_and(|e| exts.contains(&e.as_str())) {
            files.push(path);
        }
    }
    files.sort();
    for (i, f) in files.iter().enumerate() {
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        if stem.parse::<usize>().ok() != Some(i + 1) {
            return Err(Error::InvalidInput(format!(
                "{}: expected frame {} here (missing or misnamed frame)",
                f.display(),
                i + 1
            )));
        }
    }
    Ok(files)
}

pub fn parse_annotation_line(line: &str) -> std::result::Result<Annotation, String> {
    let values: Vec<f64> = line
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("`{s}` is not a number")))
        .collect::<std::result::Result<_, _>>()?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err("non-finite coordinate".into());
    }
    match values.len() {
        4 => BBox::from_xywh(values[0], values[1], values[2], values[3])
            .map(Annotation::Box)
            .map_err(|e| e.to_string()),
        8 => {
            let pts = [(values[0], values[1]), (values[2], values[3]), (values[4], values[5]), (values[6], values[7])];
            let a = Annotation::Polygon(pts);
            if a.bbox().is_valid() {
                Ok(a)
            } else {
                Err("degenerate polygon".into())
            }
        }
        n => Err(format!("expected 4 or 8 numbers, found {n}")),
    }
}

pub fn read_groundtruth(path: &Path) -> Result<Vec<Annotation>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_annotation_line(line).map_err(|m| Error::parse(path, i + 1, m))?);
    }
    Ok(out)
}

/// Writes boxes as `x,y,w,h` (top-left) and polygons as 8 coordinates.
pub fn write_groundtruth(path: &Path, annotations: &[Annotation]) -> Result<()> {
    let mut text = String::new();
    for a in annotations {
        match a {
            Annotation::Box(b) => text.push_str(&format!("{},{},{},{}\n", b.x0(), b.y0(), b.w, b.h)),
            Annotation::Polygon(p) => {
                let v: Vec<String> = p.iter().flat_map(|(x, y)| [x.to_string(), y.to_string()]).collect();
                text.push_str(&v.join(","));
                text.push('\n');
            }
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    let id = dir.file_name().and_then(|n| n.to_str()).unwrap_or("sequence").to_string();
    let frames = numbered_files(&dir.join("frames"), &["png", "jpg", "jpeg"])?;
    let gt = dir.join("groundtruth.txt");
    let annotations = if gt.exists() { read_groundtruth(&gt)? } else { Vec::new() };
    let mask_dir = dir.join("masks");
    let masks = if mask_dir.is_dir() {
        numbered_files(&mask_dir, &["png"])?
            .iter()
            .map(|p| read_label_png(p))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let seq = Sequence { id, frames: Frames::Files(frames), annotations, masks };
    seq.validate()?;
    if seq.annotations.is_empty() && seq.masks.is_empty() {
        return Err(Error::InvalidInput(format!("{}: no groundtruth.txt and no masks", dir.display())));
    }
    Ok(seq)
}

/// Loads every sequence folder under `root`, sorted by name.
pub fn load_dataset(root: &Path) -> Result<Vec<Sequence>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("frames").is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::InvalidInput(format!("{}: no sequence folders", root.display())));
    }
    dirs.iter().map(|d| load_sequence(d)).collect()
}

/// Palette shared by every mask file: black background, then distinct colours.
pub fn mask_palette() -> Vec<u8> {
    let mut pal = Vec::with_capacity(256 * 3);
    for i in 0..256u32 {
        // Bit-interleaved colour map, as used by common segmentation benchmarks.
        let (mut r, mut g, mut b) = (0u8, 0u8, 0u8);
        let mut c = i;
        for j in 0..8 {
            r |= (((c >> 0) & 1) as u8) << (7 - j);
            g |= (((c >> 1) & 1) as u8) << (7 - j);
            b |= (((c >> 2) & 1) as u8) << (7 - j);
            c >>= 3;
        }
        pal.extend_from_slice(&[r, g, b]);
    }
    pal
}

pub fn write_label_png(path: &Path, labels: &LabelMap) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), labels.width as u32, labels.height as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(mask_palette());
    let png_err = |e: png::EncodingError| Error::Png { path: path.to_path_buf(), message: e.to_string() };
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&labels.data).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Reads a paletted (or 8-bit grayscale) label PNG; pixel values are instance ids.
pub fn read_label_png(path: &Path) -> Result<LabelMap> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let png_err = |m: String| Error::Png { path: path.to_path_buf(), message: m };
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| png_err(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| png_err("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight
        || !matches!(info.color_type, png::ColorType::Indexed | png::ColorType::Grayscale)
    {
        return Err(png_err(format!("expected 8-bit paletted mask, got {:?} {:?}", info.color_type, info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = Vec::with_capacity(w * h);
    for row in buf.chunks(info.line_size).take(h) {
        data.extend_from_slice(&row[..w]);
    }
    Ok(LabelMap { width: w, height: h, data })
}

/// Writes one label PNG per frame into `dir`, numbered from 1.
pub fn save_masks(dir: &Path, masks: &[LabelMap]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, m) in masks.iter().enumerate() {
        write_label_png(&dir.join(frame_file_name(i, "png")), m)?;
    }
    Ok(())
}

/// Writes a sequence in the folder layout read by [`load_sequence`].
pub fn write_sequence(seq: &Sequence, dir: &Path) -> Result<()> {
    let frames = dir.join("frames");
    std::fs::create_dir_all(&frames).map_err(|e| Error::io(&frames, e))?;
    for i in 0..seq.len() {
        let path = frames.join(frame_file_name(i, "png"));
        seq.frame(i)?
            .save_with_format(&path, image::ImageFormat::Png)
            .map_err(|e| Error::Image { path: path.clone(), source: e })?;
    }
    if !seq.annotations.is_empty() {
        write_groundtruth(&dir.join("groundtruth.txt"), &seq.annotations)?;
    }
    if !seq.masks.is_empty() {
        save_masks(&dir.join("masks"), &seq.masks)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Rectangle,
    Ellipse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub width: u32,
    pub height: u32,
    pub length: usize,
    pub objects: usize,
    pub shapes: Vec<Shape>,
    /// Initial object side range in pixels.
    pub min_size: f64,
    pub max_size: f64,
    /// Largest initial speed in pixels per frame along each axis.
    pub max_speed: f64,
    /// Standard deviation of the per-frame positional jitter.
    pub jitter: f64,
    /// Largest relative size change per frame.
    pub scale_rate: f64,
    pub occluder: bool,
    /// Amplitude of the smooth background texture, in `[0, 1]` intensity.
    pub texture: f64,
    /// Number of sequences in a generated dataset.
    pub sequences: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 96,
            height: 96,
            length: 24,
            objects: 1,
            shapes: vec![Shape::Rectangle, Shape::Ellipse],
            min_size: 16.0,
            max_size: 28.0,
            max_speed: 2.0,
            jitter: 0.5,
            scale_rate: 0.01,
            occluder: false,
            texture: 0.08,
            sequences: 64,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.length < 2 {
            return bad(format!("length {} must be at least 2", self.length));
        }
        if self.objects == 0 || self.objects > 255 || self.shapes.is_empty() {
            return bad("need between 1 and 255 objects and at least one shape".into());
        }
        if !(self.min_size > 2.0 && self.max_size >= self.min_size) {
            return bad(format!("object sizes [{}, {}] are invalid", self.min_size, self.max_size));
        }
        let strip = self.width as f64 / self.objects as f64;
        if self.max_size * 1.5 > strip.min(self.height as f64) {
            return bad(format!("objects of {} px do not fit a {strip:.1} px wide lane", self.max_size));
        }
        if self.jitter < 0.0 || self.max_speed < 0.0 || self.scale_rate < 0.0 || !(0.0..=1.0).contains(&self.texture) {
            return bad("motion and texture parameters must be non-negative".into());
        }
        Ok(())
    }
}

/// Per-object state of the generator.
#[derive(Debug, Clone)]
struct Mover {
    shape: Shape,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    vx: f64,
    vy: f64,
    growth: f64,
    color: [f64; 3],
    /// Horizontal lane the object stays in, so objects never overlap.
    lane: (f64, f64),
}

/// Explicit motion for one object, used by tests and examples that need
/// an exactly known trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Motion {
    pub shape: Shape,
    pub start: BBox,
    pub velocity: (f64, f64),
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

struct Background {
    base: [f64; 3],
    waves: Vec<(f64, f64, f64, f64)>,
    amplitude: f64,
}

impl Background {
    fn new<R: Rng>(rng: &mut R, amplitude: f64) -> Self {
        let base = hsv(rng.random_range(0.0..1.0), rng.random_range(0.0..0.3), rng.random_range(0.2..0.4));
        let waves = (0..4)
            .map(|_| {
                let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let freq = rng.random_range(0.03..0.15);
                (angle.cos() * freq, angle.sin() * freq, rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.5..1.0))
            })
            .collect();
        Self { base, waves, amplitude }
    }

    fn at(&self, x: f64, y: f64) -> [f64; 3] {
        let t: f64 = self.waves.iter().map(|(fx, fy, ph, a)| a * (fx * x + fy * y + ph).sin()).sum::<f64>()
            / self.waves.len() as f64;
        self.base.map(|c| (c + self.amplitude * t).clamp(0.0, 1.0))
    }
}

/// Supersampling factor per axis for anti-aliased edges.
const AA: usize = 4;

fn inside(shape: Shape, cx: f64, cy: f64, w: f64, h: f64, x: f64, y: f64) -> bool {
    let (dx, dy) = ((x - cx) / (w / 2.0), (y - cy) / (h / 2.0));
    match shape {
        Shape::Rectangle => dx.abs() <= 1.0 && dy.abs() <= 1.0,
        Shape::Ellipse => dx * dx + dy * dy <= 1.0,
    }
}

fn coverage(shape: Shape, cx: f64, cy: f64, w: f64, h: f64, col: usize, row: usize) -> f64 {
    let mut hits = 0;
    for sy in 0..AA {
        for sx in 0..AA {
            let x = col as f64 - 0.5 + (sx as f64 + 0.5) / AA as f64;
            let y = row as f64 - 0.5 + (sy as f64 + 0.5) / AA as f64;
            if inside(shape, cx, cy, w, h, x, y) {
                hits += 1;
            }
        }
    }
    hits as f64 / (AA * AA) as f64
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

struct Rendered {
    frame: RgbImage,
    labels: LabelMap,
    boxes: Vec<BBox>,
}

fn render(config: &SynthConfig, bg: &Background, movers: &[Mover], occluder: Option<(f64, f64)>) -> Rendered {
    let (w, h) = (config.width as usize, config.height as usize);
    let mut pixels: Vec<[f64; 3]> = (0..w * h).map(|i| bg.at((i % w) as f64, (i / w) as f64)).collect();
    let mut labels = LabelMap::new(w, h);
    for (id, m) in movers.iter().enumerate() {
        let (c0, c1) = ((m.cx - m.w / 2.0 - 1.0).floor().max(0.0) as usize, ((m.cx + m.w / 2.0 + 1.0).ceil() as usize).min(w - 1));
        let (r0, r1) = ((m.cy - m.h / 2.0 - 1.0).floor().max(0.0) as usize, ((m.cy + m.h / 2.0 + 1.0).ceil() as usize).min(h - 1));
        for r in r0..=r1 {
            for c in c0..=c1 {
                let a = coverage(m.shape, m.cx, m.cy, m.w, m.h, c, r);
                if a > 0.0 {
                    let p = &mut pixels[r * w + c];
                    for ch in 0..3 {
                        p[ch] = p[ch] * (1.0 - a) + m.color[ch] * a;
                    }
                }
                if inside(m.shape, m.cx, m.cy, m.w, m.h, c as f64, r as f64) {
                    labels.data[r * w + c] = (id + 1) as u8;
                }
            }
        }
    }
    if let Some((x, bar)) = occluder {
        for r in 0..h {
            for c in 0..w {
                let a = ((bar / 2.0 + 0.5 - (c as f64 - x).abs()).clamp(0.0, 1.0)) * 0.9;
                if a > 0.0 {
                    let p = &mut pixels[r * w + c];
                    for ch in 0..3 {
                        p[ch] = p[ch] * (1.0 - a) + 0.55 * a;
                    }
                    if (c as f64 - x).abs() <= bar / 2.0 {
                        labels.data[r * w + c] = 0;
                    }
                }
            }
        }
    }
    let mut frame = RgbImage::new(config.width, config.height);
    for (i, p) in pixels.iter().enumerate() {
        frame.put_pixel((i % w) as u32, (i / w) as u32, Rgb(p.map(to_u8)));
    }
    let boxes = movers.iter().map(|m| BBox { cx: m.cx, cy: m.cy, w: m.w, h: m.h }).collect();
    Rendered { frame, labels, boxes }
}

fn step_mover<R: Rng>(m: &mut Mover, config: &SynthConfig, jitter: &Normal<f64>, rng: &mut R) {
    let grow = 1.0 + m.growth;
    let (nw, nh) = (m.w * grow, m.h * grow);
    let lane_w = m.lane.1 - m.lane.0;
    if nw.max(nh) <= config.max_size * 1.5 && nw < lane_w && nh < config.height as f64 && nw.min(nh) >= config.min_size * 0.5 {
        m.w = nw;
        m.h = nh;
    } else {
        m.growth = -m.growth;
    }
    m.cx += m.vx + if config.jitter > 0.0 { jitter.sample(rng) } else { 0.0 };
    m.cy += m.vy + if config.jitter > 0.0 { jitter.sample(rng) } else { 0.0 };
    let (lo, hi) = (m.lane.0 + m.w / 2.0, m.lane.1 - m.w / 2.0);
    if m.cx < lo {
        m.cx = 2.0 * lo - m.cx;
        m.vx = m.vx.abs();
    } else if m.cx > hi {
        m.cx = 2.0 * hi - m.cx;
        m.vx = -m.vx.abs();
    }
    m.cx = m.cx.clamp(lo, hi);
    let (lo, hi) = (m.h / 2.0, config.height as f64 - m.h / 2.0);
    if m.cy < lo {
        m.cy = 2.0 * lo - m.cy;
        m.vy = m.vy.abs();
    } else if m.cy > hi {
        m.cy = 2.0 * hi - m.cy;
        m.vy = -m.vy.abs();
    }
    m.cy = m.cy.clamp(lo, hi);
}

/// Renders one synthetic sequence with exact per-frame boxes and instance
/// masks. Deterministic for a given config and generator state.
pub fn synth_sequence<R: Rng>(config: &SynthConfig, id: impl Into<String>, rng: &mut R) -> Result<Sequence> {
    config.validate()?;
    let lane = config.width as f64 / config.objects as f64;
    let mut hue = rng.random_range(0.0..1.0);
    let movers: Vec<Mover> = (0..config.objects)
        .map(|i| {
            let lane = (i as f64 * lane, (i + 1) as f64 * lane);
            let w = rng.random_range(config.min_size..=config.max_size);
            let h = rng.random_range(config.min_size..=config.max_size);
            hue = (hue + 1.0 / (config.objects as f64 + 1.0)) % 1.0;
            Mover {
                shape: config.shapes[rng.random_range(0..config.shapes.len())],
                cx: rng.random_range(lane.0 + w / 2.0..=lane.1 - w / 2.0),
                cy: rng.random_range(h / 2.0..=config.height as f64 - h / 2.0),
                w,
                h,
                vx: rng.random_range(-config.max_speed..=config.max_speed),
                vy: rng.random_range(-config.max_speed..=config.max_speed),
                growth: rng.random_range(-config.scale_rate..=config.scale_rate),
                color: hsv(hue, rng.random_range(0.7..1.0), rng.random_range(0.8..1.0)),
                lane,
            }
        })
        .collect();
    synth_with(config, id, movers, rng)
}

/// Renders objects following exactly the given straight-line motions, with
/// no jitter, scaling or bouncing.
pub fn synth_scripted<R: Rng>(config: &SynthConfig, id: impl Into<String>, motions: &[Motion], rng: &mut R) -> Result<Sequence> {
    let config = SynthConfig { jitter: 0.0, scale_rate: 0.0, objects: motions.len().max(1), ..config.clone() };
    let movers = motions
        .iter()
        .enumerate()
        .map(|(i, m)| Mover {
            shape: m.shape,
            cx: m.start.cx,
            cy: m.start.cy,
            w: m.start.w,
            h: m.start.h,
            vx: m.velocity.0,
            vy: m.velocity.1,
            growth: 0.0,
            color: hsv((0.15 + 0.37 * i as f64) % 1.0, 0.85, 0.95),
            lane: (f64::NEG_INFINITY, f64::INFINITY),
        })
        .collect();
    synth_with(&config, id, movers, rng)
}

fn synth_with<R: Rng>(config: &SynthConfig, id: impl Into<String>, mut movers: Vec<Mover>, rng: &mut R) -> Result<Sequence> {
    let bg = Background::new(rng, config.texture);
    let jitter = Normal::new(0.0, config.jitter.max(1e-12)).expect("valid sigma");
    let bar = (config.width as f64 * 0.08).max(3.0);
    let occ_speed = rng.random_range(1.0..3.0);
    let mut frames = Vec::with_capacity(config.length);
    let mut annotations = Vec::with_capacity(config.length);
    let mut masks = Vec::with_capacity(config.length);
    for t in 0..config.length {
        if t > 0 {
            for m in movers.iter_mut() {
                if m.lane.0.is_finite() {
                    step_mover(m, config, &jitter, rng);
                } else {
                    m.cx += m.vx;
                    m.cy += m.vy;
                }
            }
        }
        let occluder = config.occluder.then(|| {
            let span = config.width as f64 + 2.0 * bar;
            ((t as f64 * occ_speed) % span) - bar
        });
        let r = render(config, &bg, &movers, occluder.map(|x| (x, bar)));
        frames.push(r.frame);
        annotations.push(Annotation::Box(r.boxes[0]));
        masks.push(r.labels);
    }
    // Multi-object sequences carry instance masks; the box file follows the first object.
    Sequence::from_frames(id, frames, annotations, masks)
}

/// Ground-truth box of every instance in every frame, from the masks.
pub fn instance_boxes(seq: &Sequence) -> Vec<Vec<Option<BBox>>> {
    seq.masks
        .iter()
        .map(|m| {
            let ids = m.instances();
            let n = ids.iter().copied().max().unwrap_or(0) as usize;
            (1..=n)
                .map(|id| crate::geometry::axis_box_from_mask(&m.instance(id as u8)).ok())
                .collect()
        })
        .collect()
}

/// Generates `config.sequences` sequences; each sequence draws from its own
/// generator seeded by `(config.seed, index)`.
pub fn synth_dataset(config: &SynthConfig) -> Result<Vec<Sequence>> {
    (0..config.sequences)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64));
            synth_sequence(config, format!("synth{i:04}"), &mut rng)
        })
        .collect()
}

/// Writes sequences into `root/<id>/` plus the generating config.
pub fn write_dataset(root: &Path, sequences: &[Sequence], config_text: Option<&str>) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for s in sequences {
        write_sequence(s, &root.join(&s.id))?;
    }
    if let Some(text) = config_text {
        let path = root.join("synth.cfg");
        let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
