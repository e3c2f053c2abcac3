//! Synthetic moving-shapes video sequences and their on-disk layout.
//!
//! Every sample shows one shape per foreground class over a static textured
//! background. Shapes translate with a constant per-sample velocity and are
//! painted in class order, so a higher class index occludes a lower one.
//! The label map is the exact rasterisation of the final frame.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pnm::{self, Pnm};
use crate::seed::{derive_seed, rng};
use crate::tensor::{Shape, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPLITS: [&str; 2] = ["train", "val"];
pub const MIN_EXTENT: usize = 16;

const SHAPE_NAMES: [&str; 8] = [
    "circle",
    "rectangle",
    "triangle",
    "ellipse",
    "diamond",
    "ring",
    "cross",
    "hexagon",
];

const PALETTE: [[f32; 3]; 8] = [
    [0.90, 0.20, 0.20],
    [0.20, 0.80, 0.25],
    [0.25, 0.35, 0.95],
    [0.95, 0.85, 0.20],
    [0.85, 0.30, 0.85],
    [0.20, 0.85, 0.90],
    [0.95, 0.55, 0.15],
    [0.55, 0.25, 0.75],
];

// Fractions of the shorter image side.
const RADIUS_RANGE: (f64, f64) = (0.10, 0.18);
const COLOR_JITTER: f32 = 0.06;
const MAX_PLACEMENT_TRIES: usize = 64;

/// One video sequence. Frames are `[1, 3, H, W]` in `[0, 1]`; `label` is the
/// row-major class map of the final frame.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub id: String,
    pub frames: Vec<Tensor<f32>>,
    pub label: Vec<u8>,
    pub height: usize,
    pub width: usize,
}

impl VideoSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let want = Shape::chw(3, self.height, self.width);
        if let Some(f) = self.frames.iter().find(|f| f.shape() != want) {
            return Err(Error::shape(
                "video sample",
                format!("{}: frame {:?}, expected {:?}", self.id, f.shape(), want),
            ));
        }
        if self.label.len() != self.height * self.width {
            return Err(Error::shape(
                "video sample",
                format!(
                    "{}: {} labels for {}x{}",
                    self.id,
                    self.label.len(),
                    self.height,
                    self.width
                ),
            ));
        }
        if let Some(&bad) = self.label.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Invalid(format!(
                "{}: label value {bad} with only {num_classes} classes",
                self.id
            )));
        }
        Ok(())
    }
}

/// Batches `samples` along the batch axis: one `[B, 3, H, W]` tensor per time
/// step and the concatenated final-frame labels.
pub fn collate(samples: &[&VideoSample]) -> Result<(Vec<Tensor<f32>>, Vec<u8>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Invalid("cannot collate an empty batch".into()))?;
    let t = first.len();
    if samples.iter().any(|s| s.len() != t) {
        return Err(Error::Invalid("sequences in a batch must have equal length".into()));
    }
    let mut frames = Vec::with_capacity(t);
    for i in 0..t {
        let items: Vec<Tensor<f32>> = samples.iter().map(|s| s.frames[i].clone()).collect();
        frames.push(Tensor::stack(&items)?);
    }
    let labels = samples.iter().flat_map(|s| s.label.iter().copied()).collect();
    Ok((frames, labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub num_classes: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Largest per-frame displacement along each axis, as a fraction of the shorter side.
    #[serde(default = "default_max_speed")]
    pub max_speed: f64,
}

fn default_max_speed() -> f64 {
    0.02
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            n_train: 200,
            n_val: 50,
            num_classes: 8,
            frames: 4,
            height: 64,
            width: 128,
            max_speed: default_max_speed(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(Error::Config(format!(
                "num_classes must be in 2..=256, got {}",
                self.num_classes
            )));
        }
        if self.frames == 0 {
            return Err(Error::Config("frames must be at least 1".into()));
        }
        if self.height < MIN_EXTENT || self.width < MIN_EXTENT {
            return Err(Error::Config(format!(
                "extents {}x{} are too small for the shapes (minimum {MIN_EXTENT})",
                self.height, self.width
            )));
        }
        if !(self.max_speed.is_finite() && (0.0..=0.1).contains(&self.max_speed)) {
            return Err(Error::Config(format!("max_speed {} outside [0, 0.1]", self.max_speed)));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        class_names(self.num_classes)
    }

    pub fn split_len(&self, split: &str) -> Result<usize> {
        match split {
            "train" => Ok(self.n_train),
            "val" => Ok(self.n_val),
            other => Err(Error::Invalid(format!("unknown split {other:?}"))),
        }
    }
}

pub fn class_names(num_classes: usize) -> Vec<String> {
    let mut names = vec!["background".to_string()];
    for k in 0..num_classes.saturating_sub(1) {
        let base = SHAPE_NAMES[k % SHAPE_NAMES.len()];
        let round = k / SHAPE_NAMES.len();
        names.push(if round == 0 {
            base.to_string()
        } else {
            format!("{base}_{}", round + 1)
        });
    }
    names
}

fn class_color(class: usize) -> [f32; 3] {
    let k = class - 1;
    if k < PALETTE.len() {
        return PALETTE[k];
    }
    // Golden-ratio hue walk at full saturation for the overflow classes.
    let hue = (k as f32 * 0.618_034).fract() * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.15 + 0.8 * r, 0.15 + 0.8 * g, 0.15 + 0.8 * b]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeKind {
    Circle,
    Rectangle,
    Triangle,
    Ellipse,
    Diamond,
    Ring,
    Cross,
    Hexagon,
}

impl ShapeKind {
    const ALL: [ShapeKind; 8] = [
        ShapeKind::Circle,
        ShapeKind::Rectangle,
        ShapeKind::Triangle,
        ShapeKind::Ellipse,
        ShapeKind::Diamond,
        ShapeKind::Ring,
        ShapeKind::Cross,
        ShapeKind::Hexagon,
    ];

    pub fn for_class(class: usize) -> ShapeKind {
        Self::ALL[(class - 1) % Self::ALL.len()]
    }

    /// Membership of the offset `(dx, dy)` from the centre, for half-extent `r`.
    /// Every shape lies inside the square `|dx|, |dy| <= r`.
    pub fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        let (ax, ay) = (dx.abs(), dy.abs());
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Rectangle => ax <= r && ay <= 0.65 * r,
            ShapeKind::Triangle => dy >= -r && dy <= 0.7 * r && ax <= 0.6 * (dy + r),
            ShapeKind::Ellipse => (dx / r).powi(2) + (dy / (0.55 * r)).powi(2) <= 1.0,
            ShapeKind::Diamond => ax + ay <= r,
            ShapeKind::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (0.55 * r).powi(2)
            }
            ShapeKind::Cross => (ax <= 0.3 * r && ay <= r) || (ay <= 0.3 * r && ax <= r),
            ShapeKind::Hexagon => {
                let s3 = 3f64.sqrt();
                ax <= r && ay <= 0.5 * s3 * r && s3 * ax + ay <= s3 * r
            }
        }
    }
}

/// A shape's trajectory: centre at frame `t` is `center + t * velocity`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeInstance {
    pub class: usize,
    pub kind: ShapeKind,
    pub center: (f64, f64),
    pub velocity: (f64, f64),
    pub radius: f64,
    pub color: [f32; 3],
}

impl ShapeInstance {
    pub fn center_at(&self, t: usize) -> (f64, f64) {
        (
            self.center.0 + t as f64 * self.velocity.0,
            self.center.1 + t as f64 * self.velocity.1,
        )
    }

    /// Pixel-centre coverage test at frame `t`.
    pub fn covers(&self, x: usize, y: usize, t: usize) -> bool {
        let (cx, cy) = self.center_at(t);
        self.kind
            .contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, self.radius)
    }

    /// Row-major mask of this shape alone at frame `t`.
    pub fn mask(&self, t: usize, height: usize, width: usize) -> Vec<bool> {
        let mut m = vec![false; height * width];
        for y in 0..height {
            for x in 0..width {
                m[y * width + x] = self.covers(x, y, t);
            }
        }
        m
    }
}

/// Everything needed to render one sequence.
#[derive(Debug, Clone)]
pub struct Scene {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub background: Vec<[f32; 3]>,
    pub shapes: Vec<ShapeInstance>,
}

impl Scene {
    pub fn sample(cfg: &DatasetConfig, rng: &mut ChaCha8Rng) -> Scene {
        let (h, w) = (cfg.height, cfg.width);
        let background = background(h, w, rng);
        let mut scene = Scene {
            height: h,
            width: w,
            frames: cfg.frames,
            background,
            shapes: Vec::new(),
        };
        // Redraw trajectories until every class is visible in the final frame.
        for _ in 0..MAX_PLACEMENT_TRIES {
            scene.shapes = (1..cfg.num_classes)
                .map(|class| sample_shape(class, cfg, rng))
                .collect();
            let label = scene.label(cfg.frames - 1);
            let mut seen = vec![false; cfg.num_classes];
            for &l in &label {
                seen[l as usize] = true;
            }
            if seen.iter().all(|&s| s) {
                break;
            }
        }
        scene
    }

    pub fn label(&self, t: usize) -> Vec<u8> {
        let mut label = vec![0u8; self.height * self.width];
        for s in &self.shapes {
            for y in 0..self.height {
                for x in 0..self.width {
                    if s.covers(x, y, t) {
                        label[y * self.width + x] = s.class as u8;
                    }
                }
            }
        }
        label
    }

    /// Frame `t`, quantised to 8 bits so that it survives a disk round trip.
    pub fn frame(&self, t: usize) -> Tensor<f32> {
        let (h, w) = (self.height, self.width);
        let mut rgb = self.background.clone();
        for s in &self.shapes {
            for y in 0..h {
                for x in 0..w {
                    if s.covers(x, y, t) {
                        rgb[y * w + x] = s.color;
                    }
                }
            }
        }
        Tensor::from_fn(Shape::chw(3, h, w), |_, c, y, x| {
            byte_to_unit(unit_to_byte(rgb[y * w + x][c]))
        })
    }

    pub fn render(&self, id: String) -> VideoSample {
        VideoSample {
            id,
            frames: (0..self.frames).map(|t| self.frame(t)).collect(),
            label: self.label(self.frames - 1),
            height: self.height,
            width: self.width,
        }
    }
}

fn background(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<[f32; 3]> {
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.30..0.50));
    let gratings: Vec<(f64, f64, f64, f32)> = (0..2)
        .map(|_| {
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let period = rng.random_range(6.0..20.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = rng.random_range(0.03..0.08f32);
            (angle, period, phase, amp)
        })
        .collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut v = 0f32;
            for &(angle, period, phase, amp) in &gratings {
                let u = x as f64 * angle.cos() + y as f64 * angle.sin();
                v += amp * (u / period * std::f64::consts::TAU + phase).sin() as f32;
            }
            let grain = rng.random_range(-0.04..0.04f32);
            out.push(std::array::from_fn(|c| (base[c] + v + grain).clamp(0.0, 1.0)));
        }
    }
    out
}

fn sample_shape(class: usize, cfg: &DatasetConfig, rng: &mut ChaCha8Rng) -> ShapeInstance {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let side = h.min(w);
    let radius = rng.random_range(RADIUS_RANGE.0 * side..=RADIUS_RANGE.1 * side);
    let vmax = cfg.max_speed * side;
    let velocity = (rng.random_range(-vmax..=vmax), rng.random_range(-vmax..=vmax));
    let span = (cfg.frames - 1) as f64;
    // Keep the whole trajectory inside the image.
    let range = |extent: f64, v: f64| {
        let lo = radius + (-v * span).max(0.0);
        let hi = extent - radius - (v * span).max(0.0);
        (lo, hi.max(lo))
    };
    let (xl, xh) = range(w, velocity.0);
    let (yl, yh) = range(h, velocity.1);
    let center = (rng.random_range(xl..=xh), rng.random_range(yl..=yh));
    let base = class_color(class);
    let color = std::array::from_fn(|c| (base[c] + rng.random_range(-COLOR_JITTER..=COLOR_JITTER)).clamp(0.0, 1.0));
    ShapeInstance {
        class,
        kind: ShapeKind::for_class(class),
        center,
        velocity,
        radius,
        color,
    }
}

pub fn unit_to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn byte_to_unit(b: u8) -> f32 {
    b as f32 / 255.0
}

fn sample_seed(seed: u64, split: &str, index: usize) -> u64 {
    let code = SPLITS.iter().position(|&s| s == split).unwrap_or(SPLITS.len()) as u64;
    derive_seed(derive_seed(seed, code), index as u64)
}

pub fn sample_id(split: &str, index: usize) -> String {
    format!("{split}_{index:05}")
}

/// Scene `index` of `split`, independent of every other sample.
pub fn generate_scene(cfg: &DatasetConfig, split: &str, index: usize) -> Scene {
    Scene::sample(cfg, &mut rng(sample_seed(cfg.seed, split, index)))
}

pub fn generate_sample(cfg: &DatasetConfig, split: &str, index: usize) -> VideoSample {
    generate_scene(cfg, split, index).render(sample_id(split, index))
}

/// Generates a full split in memory without touching the disk.
pub fn generate_split(cfg: &DatasetConfig, split: &str) -> Result<Vec<VideoSample>> {
    cfg.validate()?;
    let n = cfg.split_len(split)?;
    Ok((0..n).map(|i| generate_sample(cfg, split, i)).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub frames: Vec<String>,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub max_speed: f64,
    pub splits: BTreeMap<String, Vec<SampleEntry>>,
}

impl DatasetManifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if m.class_names.len() != m.num_classes {
            return Err(Error::format(
                &path,
                format!("{} class names for {} classes", m.class_names.len(), m.num_classes),
            ));
        }
        Ok(m)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn split(&self, name: &str) -> Result<&[SampleEntry]> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Invalid(format!("unknown split {name:?}")))
    }

    pub fn split_sizes(&self) -> BTreeMap<String, usize> {
        self.splits.iter().map(|(k, v)| (k.clone(), v.len())).collect()
    }

    /// Checks that every referenced file exists below `root`.
    pub fn check_paths(&self, root: &Path) -> Result<()> {
        for entry in self.splits.values().flatten() {
            for rel in entry.frames.iter().chain(std::iter::once(&entry.label)) {
                let p = root.join(rel);
                if !p.is_file() {
                    return Err(Error::format(
                        root.join(MANIFEST_FILE),
                        format!("missing {}", p.display()),
                    ));
                }
            }
        }
        Ok(())
    }
}

fn entry_for(split: &str, id: &str, frames: usize) -> SampleEntry {
    SampleEntry {
        id: id.to_string(),
        frames: (0..frames).map(|t| format!("{split}/{id}/frame_{t}.ppm")).collect(),
        label: format!("{split}/{id}/label.pgm"),
    }
}

/// Writes `sample` as `frame_{t}.ppm` and `label.pgm` inside `dir`.
pub fn write_sample(dir: &Path, sample: &VideoSample) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = (sample.height, sample.width);
    for (t, frame) in sample.frames.iter().enumerate() {
        let mut data = Vec::with_capacity(3 * h * w);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    data.push(unit_to_byte(frame.at(0, c, y, x)));
                }
            }
        }
        let img = Pnm {
            width: w,
            height: h,
            channels: 3,
            data,
        };
        pnm::write(&dir.join(format!("frame_{t}.ppm")), &img)?;
    }
    let label = Pnm {
        width: w,
        height: h,
        channels: 1,
        data: sample.label.clone(),
    };
    pnm::write(&dir.join("label.pgm"), &label)
}

fn expect_kind(path: &Path, img: &Pnm, channels: usize, h: usize, w: usize) -> Result<()> {
    if img.channels != channels {
        return Err(Error::format(
            path,
            format!("expected {channels} channel(s), found {}", img.channels),
        ));
    }
    if (img.height, img.width) != (h, w) {
        return Err(Error::format(
            path,
            format!("extents {}x{}, expected {h}x{w}", img.height, img.width),
        ));
    }
    Ok(())
}

/// Reads the sample `entry` relative to `root`, validating its extents and labels.
pub fn read_sample(root: &Path, manifest: &DatasetManifest, entry: &SampleEntry) -> Result<VideoSample> {
    let (h, w) = (manifest.height, manifest.width);
    let mut frames = Vec::with_capacity(entry.frames.len());
    for rel in &entry.frames {
        let path = root.join(rel);
        let img = pnm::read(&path)?;
        expect_kind(&path, &img, 3, h, w)?;
        frames.push(Tensor::from_fn(Shape::chw(3, h, w), |_, c, y, x| {
            byte_to_unit(img.data[(y * w + x) * 3 + c])
        }));
    }
    let path = root.join(&entry.label);
    let label = pnm::read(&path)?;
    expect_kind(&path, &label, 1, h, w)?;
    if let Some(&bad) = label.data.iter().find(|&&l| l as usize >= manifest.num_classes) {
        return Err(Error::format(
            &path,
            format!("label value {bad} with only {} classes", manifest.num_classes),
        ));
    }
    Ok(VideoSample {
        id: entry.id.clone(),
        frames,
        label: label.data,
        height: h,
        width: w,
    })
}

pub fn load_split(root: &Path, manifest: &DatasetManifest, split: &str) -> Result<Vec<VideoSample>> {
    manifest
        .split(split)?
        .iter()
        .map(|e| read_sample(root, manifest, e))
        .collect()
}

/// Generates the dataset below `root` and returns its manifest. The manifest
/// is written last, so its presence marks a complete tree.
pub fn generate_dataset(root: &Path, cfg: &DatasetConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    let mut splits = BTreeMap::new();
    for split in SPLITS {
        let mut entries = Vec::new();
        for i in 0..cfg.split_len(split)? {
            let sample = generate_sample(cfg, split, i);
            let entry = entry_for(split, &sample.id, cfg.frames);
            write_sample(&root.join(split).join(&sample.id), &sample)?;
            entries.push(entry);
        }
        splits.insert(split.to_string(), entries);
    }
    let manifest = DatasetManifest {
        seed: cfg.seed,
        num_classes: cfg.num_classes,
        class_names: cfg.class_names(),
        frames: cfg.frames,
        height: cfg.height,
        width: cfg.width,
        max_speed: cfg.max_speed,
        splits,
    };
    manifest.save(root)?;
    Ok(manifest)
}

/// Seeded permutation of `0..n`.
pub fn epoch_order(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng(seed));
    order
}

/// Index batches for epoch `epoch`; the last batch may be short.
pub fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    epoch_order(n, derive_seed(seed, epoch))
        .chunks(batch.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// One shuffled epoch over a split on disk, read lazily batch by batch.
pub struct BatchIter<'a> {
    root: PathBuf,
    manifest: &'a DatasetManifest,
    entries: &'a [SampleEntry],
    batches: std::vec::IntoIter<Vec<usize>>,
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Vec<VideoSample>>;

    fn next(&mut self) -> Option<Self::Item> {
        let idx = self.batches.next()?;
        Some(
            idx.iter()
                .map(|&i| read_sample(&self.root, self.manifest, &self.entries[i]))
                .collect(),
        )
    }
}

pub fn batch_iterator<'a>(
    root: &Path,
    manifest: &'a DatasetManifest,
    split: &str,
    batch: usize,
    seed: u64,
) -> Result<BatchIter<'a>> {
    if batch == 0 {
        return Err(Error::Invalid("batch size must be at least 1".into()));
    }
    let entries = manifest.split(split)?;
    let order = epoch_order(entries.len(), seed);
    let batches: Vec<Vec<usize>> = order.chunks(batch).map(<[usize]>::to_vec).collect();
    Ok(BatchIter {
        root: root.to_path_buf(),
        manifest,
        entries,
        batches: batches.into_iter(),
    })
}
