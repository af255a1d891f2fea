//! Synthetic scenes whose event label is carried by small embedded objects,
//! plus RoI proposals and on-disk dataset I/O.
//!
//! Every scene has a low-frequency textured background, sensor noise and a
//! few hollow outline "distractors". Malicious scenes additionally contain
//! solid rigid glyphs (square, disc, triangle) and soft non-rigid blobs
//! (fire-like, smoke-like). The outlines reuse the glyph colors, so colour
//! statistics alone do not separate the two events.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detection::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_RIGID_CLASSES: usize = 3;
pub const NUM_NONRIGID_CLASSES: usize = 2;

const RIGID_COLORS: [[f64; 3]; NUM_RIGID_CLASSES] =
    [[0.9, 0.15, 0.15], [0.15, 0.8, 0.2], [0.2, 0.3, 0.95]];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventLabel {
    Benign,
    Malicious,
}

impl EventLabel {
    /// Class index used by the event head.
    pub fn index(self) -> usize {
        match self {
            EventLabel::Benign => 0,
            EventLabel::Malicious => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Object {
    pub cls: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub event: EventLabel,
    pub rigid: Vec<Object>,
    pub nonrigid: Vec<Object>,
}

impl Annotation {
    pub fn num_objects(&self) -> usize {
        self.rigid.len() + self.nonrigid.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    /// Probability that a malicious scene contains any objects at all.
    pub object_prob: f64,
    pub rigid_count: (usize, usize),
    pub nonrigid_count: (usize, usize),
    /// Nominal glyph sides; each is jittered by up to one pixel.
    pub rigid_sizes: Vec<usize>,
    pub nonrigid_size: (usize, usize),
    pub distractor_count: (usize, usize),
    pub noise_std: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            height: 64,
            width: 64,
            object_prob: 0.98,
            rigid_count: (1, 3),
            nonrigid_count: (0, 2),
            rigid_sizes: vec![8, 16],
            nonrigid_size: (26, 32),
            distractor_count: (1, 4),
            noise_std: 0.03,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::invalid("generate_scene", d));
        if self.height < 8 || self.width < 8 {
            return bad(format!("image {}x{} is too small", self.height, self.width));
        }
        if !(0.0..=1.0).contains(&self.object_prob) {
            return bad(format!("object_prob {} outside [0, 1]", self.object_prob));
        }
        let limit = self.height.min(self.width);
        let largest_rigid = self.rigid_sizes.iter().max().copied().unwrap_or(0) + 1;
        if self.rigid_sizes.is_empty() || self.rigid_sizes.contains(&0) || largest_rigid > limit {
            return bad(format!(
                "rigid sizes {:?} must be nonempty, >= 1 and fit in {} px",
                self.rigid_sizes, limit
            ));
        }
        let (lo, hi) = self.nonrigid_size;
        if lo < 4 || lo > hi || hi > limit / 2 {
            return bad(format!(
                "non-rigid size range {:?} must satisfy 4 <= lo <= hi <= {} (one quadrant)",
                (lo, hi),
                limit / 2
            ));
        }
        for (name, (lo, hi)) in [
            ("rigid_count", self.rigid_count),
            ("nonrigid_count", self.nonrigid_count),
            ("distractor_count", self.distractor_count),
        ] {
            if lo > hi {
                return bad(format!("{} range {:?} is empty", name, (lo, hi)));
            }
        }
        if self.nonrigid_count.1 > 4 {
            return bad(format!(
                "at most 4 non-rigid objects fit, got {:?}",
                self.nonrigid_count
            ));
        }
        if self.rigid_count.1 + self.nonrigid_count.1 == 0 {
            return bad("malicious scenes would never contain objects".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!(
                "noise_std {} must be finite and >= 0",
                self.noise_std
            ));
        }
        Ok(())
    }
}

/// RGB canvas in `[3,H,W]` layout.
struct Canvas {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Canvas {
    fn blend(&mut self, y: usize, x: usize, color: [f64; 3], alpha: f64) {
        let plane = self.h * self.w;
        for (c, &v) in color.iter().enumerate() {
            let p = &mut self.data[c * plane + y * self.w + x];
            *p = (1.0 - alpha) * *p + alpha * v;
        }
    }
}

fn jitter_color(base: [f64; 3], rng: &mut ChaCha8Rng) -> [f64; 3] {
    base.map(|v| (v + rng.random_range(-0.08..0.08)).clamp(0.0, 1.0))
}

#[derive(Clone, Copy)]
enum Glyph {
    Square,
    Disc,
    Triangle,
}

impl Glyph {
    fn of_class(cls: usize) -> Glyph {
        [Glyph::Square, Glyph::Disc, Glyph::Triangle][cls]
    }

    /// Membership of pixel centre `(u, v)`, in `[0,1]^2` box coordinates.
    /// `hollow` keeps only a band near the outline.
    fn covers(self, u: f64, v: f64, band: f64, hollow: bool) -> bool {
        let (inside, depth) = match self {
            Glyph::Square => {
                let d = u.min(v).min(1.0 - u).min(1.0 - v);
                (true, d)
            }
            Glyph::Disc => {
                let r = ((u - 0.5).powi(2) + (v - 0.5).powi(2)).sqrt();
                (r <= 0.5, 0.5 - r)
            }
            Glyph::Triangle => {
                // apex at the top centre, base along the bottom edge
                let half = 0.5 * v;
                let d_side = (half - (u - 0.5).abs()) / (1.0f64 + 0.25).sqrt();
                (half >= (u - 0.5).abs(), d_side.min(1.0 - v))
            }
        };
        inside && (!hollow || depth < band)
    }
}

fn draw_glyph(canvas: &mut Canvas, glyph: Glyph, bbox: &BBox, color: [f64; 3], hollow: bool) {
    let (x0, y0) = (bbox.x0 as usize, bbox.y0 as usize);
    let (x1, y1) = (bbox.x1 as usize, bbox.y1 as usize);
    let band = 1.6 / bbox.width().max(1.0);
    for y in y0..y1 {
        for x in x0..x1 {
            let u = (x as f64 + 0.5 - bbox.x0) / bbox.width();
            let v = (y as f64 + 0.5 - bbox.y0) / bbox.height();
            if glyph.covers(u, v, band, hollow) {
                canvas.blend(y, x, color, 1.0);
            }
        }
    }
}

/// Irregular soft blob; returns its tight bounding box.
fn draw_blob(canvas: &mut Canvas, cls: usize, area: &BBox, rng: &mut ChaCha8Rng) -> Option<BBox> {
    let (cx, cy) = ((area.x0 + area.x1) / 2.0, (area.y0 + area.y1) / 2.0);
    let radius = area.width().min(area.height()) / 2.0;
    let lobes: Vec<(f64, f64, f64)> = (2..5)
        .map(|k| {
            (
                k as f64,
                rng.random_range(0.05..0.15),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let (fx, fy, phase) = (
        rng.random_range(0.3..0.7),
        rng.random_range(0.3..0.7),
        rng.random_range(0.0..2.0 * PI),
    );
    let mut tight: Option<(usize, usize, usize, usize)> = None;
    for y in area.y0 as usize..area.y1 as usize {
        for x in area.x0 as usize..area.x1 as usize {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let theta = dy.atan2(dx);
            let wobble: f64 = lobes
                .iter()
                .map(|&(k, a, p)| a * (k * theta + p).sin())
                .sum();
            let r = (dx * dx + dy * dy).sqrt() / (radius * (0.85 + wobble));
            if r > 1.0 {
                continue;
            }
            let texture = 0.5 + 0.5 * (fx * x as f64 + fy * y as f64 + phase).sin();
            let (color, alpha) = if cls == 0 {
                // fire: saturated warm gradient, opaque core
                ([1.0, 0.35 + 0.45 * texture, 0.05], 0.95 - 0.4 * r * r)
            } else {
                // smoke: translucent gray haze
                let g = 0.55 + 0.25 * texture;
                ([g, g, g], 0.85 - 0.35 * r)
            };
            canvas.blend(y, x, color, alpha);
            tight = Some(match tight {
                None => (x, y, x, y),
                Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
            });
        }
    }
    tight.map(|(a, b, c, d)| BBox {
        x0: a as f64,
        y0: b as f64,
        x1: (c + 1) as f64,
        y1: (d + 1) as f64,
    })
}

fn overlaps_any(b: &BBox, taken: &[BBox]) -> bool {
    taken.iter().any(|t| b.intersection(t) > 0.0)
}

/// A glyph box whose corner sits on the sliding-window grid of its scale,
/// give or take a pixel, so some proposal always overlaps it well.
fn grid_box(size: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Option<BBox> {
    let side = (size as i64 + rng.random_range(-1..=1)).max(2) as usize;
    if side > h.min(w) {
        return None;
    }
    let stride = (size / 2).max(1);
    let pick = |extent: usize, rng: &mut ChaCha8Rng| {
        let cells = (extent - side) / stride;
        let base = (rng.random_range(0..=cells) * stride) as i64 + rng.random_range(-1..=1);
        base.clamp(0, (extent - side) as i64) as f64
    };
    let (x0, y0) = (pick(w, rng), pick(h, rng));
    Some(BBox {
        x0,
        y0,
        x1: x0 + side as f64,
        y1: y0 + side as f64,
    })
}

fn free_box(side: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> BBox {
    let x0 = rng.random_range(0..=w - side) as f64;
    let y0 = rng.random_range(0..=h - side) as f64;
    BBox {
        x0,
        y0,
        x1: x0 + side as f64,
        y1: y0 + side as f64,
    }
}

fn background(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Canvas {
    let (h, w) = (cfg.height, cfg.width);
    let mut data = Vec::with_capacity(3 * h * w);
    let base = rng.random_range(0.3..0.6);
    for _ in 0..3 {
        let tint = base + rng.random_range(-0.08..0.08);
        let (fx, fy) = (rng.random_range(0.02..0.12), rng.random_range(0.02..0.12));
        let (amp, phase) = (rng.random_range(0.04..0.1), rng.random_range(0.0..2.0 * PI));
        for y in 0..h {
            for x in 0..w {
                data.push(tint + amp * (fx * x as f64 + fy * y as f64 + phase).sin());
            }
        }
    }
    Canvas { h, w, data }
}

/// Renders one scene. Deterministic in the rng state.
pub fn generate_scene(
    rng: &mut ChaCha8Rng,
    event: EventLabel,
    cfg: &GeneratorConfig,
) -> Result<(Tensor, Annotation)> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut canvas = background(cfg, rng);
    let mut taken: Vec<BBox> = Vec::new();
    let mut rigid = Vec::new();
    let mut nonrigid = Vec::new();

    if event == EventLabel::Malicious && rng.random_bool(cfg.object_prob) {
        let (mut n_rigid, mut n_nonrigid);
        loop {
            n_rigid = rng.random_range(cfg.rigid_count.0..=cfg.rigid_count.1);
            n_nonrigid = rng.random_range(cfg.nonrigid_count.0..=cfg.nonrigid_count.1);
            if n_rigid + n_nonrigid > 0 {
                break;
            }
        }
        // blobs sit inside distinct quadrants, matching the non-rigid windows
        let mut quadrants = nonrigid_windows(h, w)[1..].to_vec();
        for _ in 0..n_nonrigid {
            let q = quadrants.swap_remove(rng.random_range(0..quadrants.len()));
            let cls = rng.random_range(0..NUM_NONRIGID_CLASSES);
            let side = rng.random_range(cfg.nonrigid_size.0..=cfg.nonrigid_size.1);
            let x0 = q.x0 + rng.random_range(0..=(q.width() as usize).saturating_sub(side)) as f64;
            let y0 = q.y0 + rng.random_range(0..=(q.height() as usize).saturating_sub(side)) as f64;
            let area = BBox {
                x0,
                y0,
                x1: x0 + side as f64,
                y1: y0 + side as f64,
            };
            if let Some(bbox) = draw_blob(&mut canvas, cls, &area, rng) {
                taken.push(bbox);
                nonrigid.push(Object { cls, bbox });
            }
        }
        for _ in 0..n_rigid {
            let cls = rng.random_range(0..NUM_RIGID_CLASSES);
            let size = cfg.rigid_sizes[rng.random_range(0..cfg.rigid_sizes.len())];
            for _ in 0..20 {
                let Some(bbox) = grid_box(size, h, w, rng) else {
                    break;
                };
                if overlaps_any(&bbox, &taken) {
                    continue;
                }
                let color = jitter_color(RIGID_COLORS[cls], rng);
                draw_glyph(&mut canvas, Glyph::of_class(cls), &bbox, color, false);
                taken.push(bbox);
                rigid.push(Object { cls, bbox });
                break;
            }
        }
    }

    let n_distract = rng.random_range(cfg.distractor_count.0..=cfg.distractor_count.1);
    for _ in 0..n_distract {
        let side = rng.random_range(7..=18usize).min(h.min(w));
        for _ in 0..20 {
            let bbox = free_box(side, h, w, rng);
            if overlaps_any(&bbox, &taken) {
                continue;
            }
            let cls = rng.random_range(0..NUM_RIGID_CLASSES);
            let color = jitter_color(RIGID_COLORS[rng.random_range(0..NUM_RIGID_CLASSES)], rng);
            draw_glyph(&mut canvas, Glyph::of_class(cls), &bbox, color, true);
            taken.push(bbox);
            break;
        }
    }

    if cfg.noise_std > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_std).unwrap();
        for v in canvas.data.iter_mut() {
            *v += noise.sample(rng);
        }
    }
    for v in canvas.data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    let image = Tensor::new(vec![3, h, w], canvas.data)?;
    Ok((
        image,
        Annotation {
            event,
            rigid,
            nonrigid,
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProposalMode {
    Rigid,
    NonRigid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProposalConfig {
    /// Square window sides for rigid proposals; stride is half the side.
    pub scales: Vec<usize>,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            scales: vec![8, 16, 32],
        }
    }
}

/// Square windows of each scale at stride `scale / 2`, row-major per scale.
pub fn sliding_windows(height: usize, width: usize, scales: &[usize]) -> Vec<BBox> {
    let mut out = Vec::new();
    for &s in scales {
        if s == 0 || s > height || s > width {
            continue;
        }
        let stride = (s / 2).max(1);
        for y in (0..=height - s).step_by(stride) {
            for x in (0..=width - s).step_by(stride) {
                out.push(BBox {
                    x0: x as f64,
                    y0: y as f64,
                    x1: (x + s) as f64,
                    y1: (y + s) as f64,
                });
            }
        }
    }
    out
}

/// Whole image followed by its four quadrants.
pub fn nonrigid_windows(height: usize, width: usize) -> Vec<BBox> {
    let (w, h) = (width as f64, height as f64);
    let (mx, my) = (w / 2.0, h / 2.0);
    vec![
        BBox::whole(w, h),
        BBox {
            x0: 0.0,
            y0: 0.0,
            x1: mx,
            y1: my,
        },
        BBox {
            x0: mx,
            y0: 0.0,
            x1: w,
            y1: my,
        },
        BBox {
            x0: 0.0,
            y0: my,
            x1: mx,
            y1: h,
        },
        BBox {
            x0: mx,
            y0: my,
            x1: w,
            y1: h,
        },
    ]
}

/// Test-time proposals for a `[3,H,W]` image. Only the size is consulted.
pub fn propose_rois(image: &Tensor, mode: ProposalMode, cfg: &ProposalConfig) -> Vec<BBox> {
    let shape = image.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    match mode {
        ProposalMode::Rigid => sliding_windows(h, w, &cfg.scales),
        ProposalMode::NonRigid => nonrigid_windows(h, w),
    }
}

/// Ground-truth boxes perturbed by up to a quarter of their side, clipped to
/// the image. Used to enrich training proposals with positives.
pub fn jittered_boxes(
    gt: &[Object],
    per_box: usize,
    height: usize,
    width: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<BBox> {
    let mut out = Vec::with_capacity(gt.len() * per_box);
    for obj in gt {
        let b = obj.bbox;
        for _ in 0..per_box {
            let jx = 0.25 * b.width();
            let jy = 0.25 * b.height();
            let mut j = |r: f64| {
                if r > 0.0 {
                    rng.random_range(-r..=r)
                } else {
                    0.0
                }
            };
            let (dx0, dx1, dy0, dy1) = (j(jx), j(jx), j(jy), j(jy));
            if let Ok(bb) = BBox::clipped(
                (b.x0 + dx0).round(),
                (b.y0 + dy0).round(),
                (b.x1 + dx1).round(),
                (b.y1 + dy1).round(),
                width as f64,
                height as f64,
            ) {
                out.push(bb);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub annotation: Annotation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub size: usize,
    pub malicious: usize,
    pub benign: usize,
    pub files: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    /// `[H, W]`; images always have three channels.
    pub image_size: [usize; 2],
    pub generator: GeneratorConfig,
    pub splits: BTreeMap<String, SplitManifest>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Option<&[Sample]> {
        match name {
            "train" => Some(&self.train),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

pub const SPLITS: [&str; 2] = ["train", "test"];

fn image_file(i: usize) -> String {
    format!("images/{:05}.dten", i)
}

fn split_manifest(samples: &[Sample]) -> SplitManifest {
    let malicious = samples
        .iter()
        .filter(|s| s.annotation.event == EventLabel::Malicious)
        .count();
    SplitManifest {
        size: samples.len(),
        malicious,
        benign: samples.len() - malicious,
        files: (0..samples.len()).map(image_file).collect(),
    }
}

/// Generates both splits. Each image draws from its own rng stream, and
/// labels alternate benign/malicious so the split is balanced.
pub fn generate_dataset(
    cfg: &GeneratorConfig,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<Dataset> {
    cfg.validate()?;
    let mut splits = Vec::new();
    for (split_id, n) in [n_train, n_test].into_iter().enumerate() {
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((split_id as u64) << 32) | i as u64);
            let event = if i % 2 == 0 {
                EventLabel::Benign
            } else {
                EventLabel::Malicious
            };
            let (image, annotation) = generate_scene(&mut rng, event, cfg)?;
            samples.push(Sample { image, annotation });
        }
        splits.push(samples);
    }
    let test = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    let manifest = Manifest {
        format_version: 1,
        seed,
        image_size: [cfg.height, cfg.width],
        generator: cfg.clone(),
        splits: [
            ("train".to_string(), split_manifest(&train)),
            ("test".to_string(), split_manifest(&test)),
        ]
        .into_iter()
        .collect(),
    };
    Ok(Dataset {
        manifest,
        train,
        test,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationRecord {
    file: String,
    event: EventLabel,
    rigid: Vec<Object>,
    nonrigid: Vec<Object>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(value).expect("serializable");
    s.push(b'\n');
    s
}

pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    create_dir(dir)?;
    write_file(&dir.join("manifest.json"), &to_json(&dataset.manifest))?;
    for name in SPLITS {
        let samples = dataset.split(name).unwrap();
        let split_dir = dir.join(name);
        create_dir(&split_dir.join("images"))?;
        let mut records = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let file = image_file(i);
            write_file(&split_dir.join(&file), &s.image.to_dten())?;
            records.push(AnnotationRecord {
                file,
                event: s.annotation.event,
                rigid: s.annotation.rigid.clone(),
                nonrigid: s.annotation.nonrigid.clone(),
            });
        }
        write_file(&split_dir.join("annotations.json"), &to_json(&records))?;
    }
    Ok(())
}

fn dataset_error(file: &Path, detail: impl Into<String>) -> Error {
    Error::Dataset {
        file: file.to_path_buf(),
        detail: detail.into(),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => dataset_error(path, "file is missing"),
        _ => Error::io(path, e),
    })?;
    serde_json::from_str(&text).map_err(|e| {
        dataset_error(
            path,
            format!("line {}, column {}: {}", e.line(), e.column(), e),
        )
    })
}

fn check_objects(
    path: &Path,
    entry: usize,
    kind: &str,
    objs: &[Object],
    classes: usize,
    h: usize,
    w: usize,
) -> Result<()> {
    for (j, o) in objs.iter().enumerate() {
        if o.cls >= classes {
            return Err(dataset_error(
                path,
                format!(
                    "entry {}: {} object {} has class {} (expected < {})",
                    entry, kind, j, o.cls, classes
                ),
            ));
        }
        if !o.bbox.within(w as f64, h as f64) {
            return Err(dataset_error(
                path,
                format!(
                    "entry {}: {} object {} box {:?} leaves the {}x{} image",
                    entry, kind, j, o.bbox, w, h
                ),
            ));
        }
    }
    Ok(())
}

fn read_split(dir: &Path, name: &str, manifest: &Manifest) -> Result<Vec<Sample>> {
    let [h, w] = manifest.image_size;
    let split_dir = dir.join(name);
    let ann_path = split_dir.join("annotations.json");
    let records: Vec<AnnotationRecord> = read_json(&ann_path)?;
    let expected = manifest
        .splits
        .get(name)
        .ok_or_else(|| dataset_error(&dir.join("manifest.json"), format!("no split {:?}", name)))?;
    if records.len() != expected.size {
        return Err(dataset_error(
            &ann_path,
            format!(
                "{} entries, manifest lists {}",
                records.len(),
                expected.size
            ),
        ));
    }
    let mut samples = Vec::with_capacity(records.len());
    for (i, r) in records.into_iter().enumerate() {
        if expected.files.get(i) != Some(&r.file) {
            return Err(dataset_error(
                &ann_path,
                format!(
                    "entry {} names {:?}, manifest lists {:?}",
                    i,
                    r.file,
                    expected.files.get(i)
                ),
            ));
        }
        check_objects(&ann_path, i, "rigid", &r.rigid, NUM_RIGID_CLASSES, h, w)?;
        check_objects(
            &ann_path,
            i,
            "nonrigid",
            &r.nonrigid,
            NUM_NONRIGID_CLASSES,
            h,
            w,
        )?;
        let img_path: PathBuf = split_dir.join(&r.file);
        let bytes = fs::read(&img_path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => dataset_error(&img_path, "file is missing"),
            _ => Error::io(&img_path, e),
        })?;
        let (image, used) =
            Tensor::from_dten(&bytes).map_err(|e| dataset_error(&img_path, e.to_string()))?;
        if used != bytes.len() {
            return Err(dataset_error(&img_path, "trailing bytes after tensor"));
        }
        if image.shape() != [3, h, w] {
            return Err(dataset_error(
                &img_path,
                format!(
                    "image shape {:?}, manifest says [3, {}, {}]",
                    image.shape(),
                    h,
                    w
                ),
            ));
        }
        samples.push(Sample {
            image,
            annotation: Annotation {
                event: r.event,
                rigid: r.rigid,
                nonrigid: r.nonrigid,
            },
        });
    }
    Ok(samples)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    let train = read_split(dir, "train", &manifest)?;
    let test = read_split(dir, "test", &manifest)?;
    Ok(Dataset {
        manifest,
        train,
        test,
    })
}
