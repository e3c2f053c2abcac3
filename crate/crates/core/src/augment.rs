//! Seeded image disturbances and the policies that apply them to sequences.
//!
//! All functions are pure in `(input, params, seed)`. Images are `[N, C, H, W]`
//! tensors in `[0, 1]`; each sample of a batch is disturbed independently with
//! a stream derived from the seed.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::VideoSample;
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng};
use crate::tensor::Tensor;

pub const DEFAULT_BRIGHTNESS: f32 = 0.7;
pub const DEFAULT_STREAK: f32 = 0.9;
pub const DEFAULT_SLANT_RANGE: (f64, f64) = (60.0, 120.0);
pub const DEFAULT_SCALE_RANGE: (f64, f64) = (0.75, 1.25);

fn check_unit_range(img: &Tensor<f32>, op: &str) -> Result<()> {
    match img.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(Error::Invalid(format!("{op}: input value {v} outside [0, 1]"))),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RainLevel {
    Light,
    Moderate,
    Heavy,
}

impl std::str::FromStr for RainLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "light" => Ok(RainLevel::Light),
            "moderate" => Ok(RainLevel::Moderate),
            "heavy" => Ok(RainLevel::Heavy),
            other => Err(Error::Invalid(format!("unknown rain level {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RainParams {
    pub n_lines: usize,
    pub line_length: usize,
    /// Degrees from horizontal; `None` draws one slant per image from the slant range.
    #[serde(default)]
    pub slant_deg: Option<f64>,
    #[serde(default = "default_slant_range")]
    pub slant_range: (f64, f64),
    pub brightness_factor: f32,
    pub intensity: f32,
    pub seed: u64,
}

fn default_slant_range() -> (f64, f64) {
    DEFAULT_SLANT_RANGE
}

impl RainParams {
    pub fn new(n_lines: usize, line_length: usize) -> Self {
        RainParams {
            n_lines,
            line_length,
            slant_deg: None,
            slant_range: DEFAULT_SLANT_RANGE,
            brightness_factor: DEFAULT_BRIGHTNESS,
            intensity: DEFAULT_STREAK,
            seed: 0,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        RainParams { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.line_length == 0 {
            return Err(Error::Invalid("rain line length must be at least 1".into()));
        }
        if !(self.brightness_factor > 0.0 && self.brightness_factor <= 1.0) {
            return Err(Error::Invalid(format!(
                "brightness factor {} outside (0, 1]",
                self.brightness_factor
            )));
        }
        if !(0.0..=1.0).contains(&self.intensity) {
            return Err(Error::Invalid(format!(
                "streak intensity {} outside [0, 1]",
                self.intensity
            )));
        }
        let (lo, hi) = self.slant_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Invalid(format!("slant range {lo}..{hi} is empty")));
        }
        Ok(())
    }
}

pub fn rain_preset(level: RainLevel) -> RainParams {
    match level {
        RainLevel::Light => RainParams::new(500, 10),
        RainLevel::Moderate => RainParams::new(1500, 30),
        RainLevel::Heavy => RainParams::new(2500, 60),
    }
}

/// Draws `n_lines` one-pixel streaks at a constant slant, then darkens the
/// whole image, streaks included.
pub fn simulate_rain(img: &Tensor<f32>, p: &RainParams) -> Result<Tensor<f32>> {
    p.validate()?;
    check_unit_range(img, "simulate_rain")?;
    let s = img.shape();
    let mut out = img.clone();
    for n in 0..s.n {
        let mut r = rng(derive_seed(p.seed, n as u64));
        let slant = match p.slant_deg {
            Some(d) => d,
            None if p.slant_range.0 == p.slant_range.1 => p.slant_range.0,
            None => r.random_range(p.slant_range.0..p.slant_range.1),
        };
        let (dx, dy) = (slant.to_radians().cos(), slant.to_radians().sin());
        for _ in 0..p.n_lines {
            let x0 = r.random_range(0.0..s.w as f64);
            let y0 = r.random_range(0.0..s.h as f64);
            for step in 0..p.line_length {
                let x = (x0 + step as f64 * dx).floor();
                let y = (y0 + step as f64 * dy).floor();
                if x < 0.0 || y < 0.0 || x >= s.w as f64 || y >= s.h as f64 {
                    continue;
                }
                for c in 0..s.c {
                    out.set(n, c, y as usize, x as usize, p.intensity);
                }
            }
        }
    }
    let f = p.brightness_factor;
    Ok(out.map(|v| (v * f).clamp(0.0, 1.0)))
}

pub fn adjust_brightness(img: &Tensor<f32>, factor: f32) -> Result<Tensor<f32>> {
    if !(factor.is_finite() && factor >= 0.0) {
        return Err(Error::Invalid(format!(
            "brightness factor {factor} must be nonnegative"
        )));
    }
    check_unit_range(img, "adjust_brightness")?;
    Ok(img.map(|v| (v * factor).clamp(0.0, 1.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseKind {
    Gaussian { sigma: f32 },
    SaltPepper { p: f64 },
}

/// Gaussian noise is drawn per value; salt-and-pepper replaces whole pixels
/// (all channels) with black or white, each with probability `p / 2`.
pub fn add_noise(img: &Tensor<f32>, kind: NoiseKind, seed: u64) -> Result<Tensor<f32>> {
    check_unit_range(img, "add_noise")?;
    let s = img.shape();
    let mut out = img.clone();
    match kind {
        NoiseKind::Gaussian { sigma } => {
            if !(sigma.is_finite() && sigma >= 0.0) {
                return Err(Error::Invalid(format!("noise sigma {sigma} must be nonnegative")));
            }
            if sigma == 0.0 {
                return Ok(out);
            }
            let normal = Normal::new(0.0f32, sigma).map_err(|e| Error::Invalid(e.to_string()))?;
            let mut r = rng(seed);
            for v in out.data_mut() {
                *v = (*v + normal.sample(&mut r)).clamp(0.0, 1.0);
            }
        }
        NoiseKind::SaltPepper { p } => {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Invalid(format!(
                    "salt-and-pepper probability {p} outside [0, 1]"
                )));
            }
            let mut r = rng(seed);
            for n in 0..s.n {
                for y in 0..s.h {
                    for x in 0..s.w {
                        let u: f64 = r.random();
                        let value = if u < p / 2.0 {
                            0.0
                        } else if u < p {
                            1.0
                        } else {
                            continue;
                        };
                        for c in 0..s.c {
                            out.set(n, c, y, x, value);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Fills one convex polygon with white. Its vertices lie on an ellipse
/// inscribed in an integer box of at most `sqrt(f) H` by `sqrt(f) W`, so the
/// covered area never exceeds `f H W`.
pub fn add_white_polygon(
    img: &Tensor<f32>,
    max_vertices: usize,
    max_extent_fraction: f64,
    seed: u64,
) -> Result<Tensor<f32>> {
    if !(max_extent_fraction > 0.0 && max_extent_fraction <= 1.0) {
        return Err(Error::Invalid(format!(
            "polygon extent fraction {max_extent_fraction} outside (0, 1]"
        )));
    }
    if max_vertices < 3 {
        return Err(Error::Invalid(format!(
            "a polygon needs at least 3 vertices, got {max_vertices}"
        )));
    }
    check_unit_range(img, "add_white_polygon")?;
    let s = img.shape();
    let root = max_extent_fraction.sqrt();
    let box_h = ((root * s.h as f64).floor() as usize).max(1);
    let box_w = ((root * s.w as f64).floor() as usize).max(1);
    let mut out = img.clone();
    for n in 0..s.n {
        let mut r = rng(derive_seed(seed, n as u64));
        let bh = r.random_range(1..=box_h);
        let bw = r.random_range(1..=box_w);
        let top = r.random_range(0..=s.h - bh) as f64;
        let left = r.random_range(0..=s.w - bw) as f64;
        let vertices = r.random_range(3..=max_vertices);
        let mut angles: Vec<f64> = (0..vertices)
            .map(|_| r.random_range(0.0..std::f64::consts::TAU))
            .collect();
        angles.sort_by(f64::total_cmp);
        let (cx, cy) = (left + bw as f64 / 2.0, top + bh as f64 / 2.0);
        let pts: Vec<(f64, f64)> = angles
            .iter()
            .map(|a| (cx + a.cos() * bw as f64 / 2.0, cy + a.sin() * bh as f64 / 2.0))
            .collect();
        let y_range = top as usize..top as usize + bh;
        let x_range = left as usize..left as usize + bw;
        for y in y_range {
            for x in x_range.clone() {
                if inside_convex(&pts, x as f64 + 0.5, y as f64 + 0.5) {
                    for c in 0..s.c {
                        out.set(n, c, y, x, 1.0);
                    }
                }
            }
        }
    }
    Ok(out)
}

// Vertices are in counter-clockwise angular order (y down), so the interior
// is on one consistent side of every edge.
fn inside_convex(pts: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut sign = 0f64;
    for i in 0..pts.len() {
        let (ax, ay) = pts[i];
        let (bx, by) = pts[(i + 1) % pts.len()];
        let cross = (bx - ax) * (y - ay) - (by - ay) * (x - ax);
        if cross.abs() < 1e-12 {
            continue;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    // Collinear (degenerate) vertices enclose nothing.
    sign != 0.0
}

pub fn hflip_image(img: &Tensor<f32>) -> Tensor<f32> {
    let s = img.shape();
    Tensor::from_fn(s, |n, c, y, x| img.at(n, c, y, s.w - 1 - x))
}

pub fn hflip_labels(label: &[u8], height: usize, width: usize) -> Vec<u8> {
    (0..height * width)
        .map(|i| label[(i / width) * width + width - 1 - i % width])
        .collect()
}

/// Crop-and-resize window: a `H / scale` by `W / scale` source window whose
/// top-left corner sits at `(top, left)`. Scales above 1 zoom in; below 1
/// the window exceeds the image and edge pixels are replicated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleWindow {
    pub scale: f64,
    pub top: f64,
    pub left: f64,
}

impl ScaleWindow {
    pub fn sample<R: Rng>(height: usize, width: usize, range: (f64, f64), rng: &mut R) -> Result<Self> {
        let (lo, hi) = range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Invalid(format!("scale range {lo}..{hi} is invalid")));
        }
        let scale = if lo == hi { lo } else { rng.random_range(lo..hi) };
        let offset = |extent: usize, rng: &mut R| {
            let slack = extent as f64 - extent as f64 / scale;
            let (a, b) = if slack >= 0.0 { (0.0, slack) } else { (slack, 0.0) };
            if a == b {
                a
            } else {
                rng.random_range(a..b)
            }
        };
        let top = offset(height, rng);
        let left = offset(width, rng);
        Ok(ScaleWindow { scale, top, left })
    }

    fn source(&self, out: usize, origin: f64) -> f64 {
        origin + (out as f64 + 0.5) / self.scale - 0.5
    }

    pub fn apply_image(&self, img: &Tensor<f32>) -> Tensor<f32> {
        let s = img.shape();
        let clamp = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64);
        Tensor::from_fn(s, |n, c, y, x| {
            let sy = clamp(self.source(y, self.top), s.h);
            let sx = clamp(self.source(x, self.left), s.w);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(s.h - 1), (x0 + 1).min(s.w - 1));
            let (fy, fx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
            let top = img.at(n, c, y0, x0) * (1.0 - fx) + img.at(n, c, y0, x1) * fx;
            let bottom = img.at(n, c, y1, x0) * (1.0 - fx) + img.at(n, c, y1, x1) * fx;
            (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0)
        })
    }

    /// Nearest-neighbour resampling so that labels stay valid classes.
    pub fn apply_labels(&self, label: &[u8], height: usize, width: usize) -> Vec<u8> {
        let pick = |v: f64, n: usize| v.round().clamp(0.0, (n - 1) as f64) as usize;
        let mut out = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = pick(self.source(y, self.top), height);
            for x in 0..width {
                let sx = pick(self.source(x, self.left), width);
                out.push(label[sy * width + sx]);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Disturbance {
    Rain(RainParams),
    Noise(NoiseKind),
    Polygon {
        max_vertices: usize,
        max_extent_fraction: f64,
    },
    Brightness {
        factor: f32,
    },
    /// Geometric: mirrors every frame and the label map.
    HorizontalFlip,
    /// Geometric: one random crop-and-resize shared by every frame and the label.
    Scale {
        min: f64,
        max: f64,
    },
}

impl Disturbance {
    pub fn is_geometric(&self) -> bool {
        matches!(self, Disturbance::HorizontalFlip | Disturbance::Scale { .. })
    }

    /// Photometric disturbance of a single image.
    pub fn apply_image(&self, img: &Tensor<f32>, seed: u64) -> Result<Tensor<f32>> {
        match self {
            Disturbance::Rain(p) => simulate_rain(img, &p.clone().with_seed(seed)),
            Disturbance::Noise(kind) => add_noise(img, *kind, seed),
            Disturbance::Polygon {
                max_vertices,
                max_extent_fraction,
            } => add_white_polygon(img, *max_vertices, *max_extent_fraction, seed),
            Disturbance::Brightness { factor } => adjust_brightness(img, *factor),
            Disturbance::HorizontalFlip => Ok(hflip_image(img)),
            Disturbance::Scale { min, max } => {
                let s = img.shape();
                let w = ScaleWindow::sample(s.h, s.w, (*min, *max), &mut rng(seed))?;
                Ok(w.apply_image(img))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "frames", rename_all = "snake_case")]
pub enum DisturbancePolicy {
    LastFrameOnly,
    AllFrames,
    RandomSubset { p: f64 },
}

impl DisturbancePolicy {
    /// Which of `t` frames receive the disturbance.
    pub fn targets(&self, t: usize, seed: u64) -> Result<Vec<bool>> {
        match *self {
            DisturbancePolicy::LastFrameOnly => Ok((0..t).map(|i| i + 1 == t).collect()),
            DisturbancePolicy::AllFrames => Ok(vec![true; t]),
            DisturbancePolicy::RandomSubset { p } => {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Invalid(format!("frame probability {p} outside [0, 1]")));
                }
                let mut r = rng(derive_seed(seed, u64::MAX));
                Ok((0..t).map(|_| r.random_bool(p)).collect())
            }
        }
    }
}

/// Applies `disturbance` to the frames selected by `policy`. Photometric
/// disturbances never touch the label map; geometric ones ignore the policy
/// and transform every frame and the label identically.
pub fn apply_policy(
    seq: &VideoSample,
    policy: DisturbancePolicy,
    disturbance: &Disturbance,
    seed: u64,
) -> Result<VideoSample> {
    if seq.is_empty() {
        return Err(Error::Invalid(format!("sequence {} has no frames", seq.id)));
    }
    let mut out = seq.clone();
    let (h, w) = (seq.height, seq.width);
    match disturbance {
        Disturbance::HorizontalFlip => {
            out.frames = seq.frames.iter().map(hflip_image).collect();
            out.label = hflip_labels(&seq.label, h, w);
        }
        Disturbance::Scale { min, max } => {
            let window = ScaleWindow::sample(h, w, (*min, *max), &mut rng(seed))?;
            out.frames = seq.frames.iter().map(|f| window.apply_image(f)).collect();
            out.label = window.apply_labels(&seq.label, h, w);
        }
        photometric => {
            let targets = policy.targets(seq.len(), seed)?;
            for (t, frame) in out.frames.iter_mut().enumerate() {
                if targets[t] {
                    *frame = photometric.apply_image(frame, derive_seed(seed, t as u64))?;
                }
            }
        }
    }
    Ok(out)
}

/// Training-time augmentation: each photometric disturbance fires with its
/// probability and then hits the last frame, a random subset, or every frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip: bool,
    pub scale: Option<(f64, f64)>,
    pub noise_prob: f64,
    pub gaussian_sigma: f32,
    pub salt_pepper_p: f64,
    pub polygon_prob: f64,
    pub polygon_max_vertices: usize,
    pub polygon_max_extent: f64,
    pub rain_prob: f64,
    pub brightness_prob: f64,
    pub brightness_range: (f32, f32),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip: true,
            scale: Some(DEFAULT_SCALE_RANGE),
            noise_prob: 0.3,
            gaussian_sigma: 0.1,
            salt_pepper_p: 0.1,
            polygon_prob: 0.3,
            polygon_max_vertices: 8,
            polygon_max_extent: 0.25,
            rain_prob: 0.4,
            brightness_prob: 0.3,
            brightness_range: (0.5, 1.0),
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            flip: false,
            scale: None,
            noise_prob: 0.0,
            polygon_prob: 0.0,
            rain_prob: 0.0,
            brightness_prob: 0.0,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("noise_prob", self.noise_prob),
            ("polygon_prob", self.polygon_prob),
            ("rain_prob", self.rain_prob),
            ("brightness_prob", self.brightness_prob),
            ("salt_pepper_p", self.salt_pepper_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if let Some((lo, hi)) = self.scale {
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::Config(format!("scale range {lo}..{hi} is invalid")));
            }
        }
        let (lo, hi) = self.brightness_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("brightness range {lo}..{hi} must lie in (0, 1]")));
        }
        Ok(())
    }
}

/// Applies a random augmentation pipeline to one training sequence.
pub fn augment_sequence(seq: &VideoSample, cfg: &AugmentConfig, seed: u64) -> Result<VideoSample> {
    let mut r = rng(seed);
    let mut out = seq.clone();
    let mut step = 0u64;
    let mut next_seed = || {
        step += 1;
        derive_seed(seed, step)
    };
    if cfg.flip && r.random_bool(0.5) {
        out = apply_policy(
            &out,
            DisturbancePolicy::AllFrames,
            &Disturbance::HorizontalFlip,
            next_seed(),
        )?;
    }
    if let Some((min, max)) = cfg.scale {
        out = apply_policy(
            &out,
            DisturbancePolicy::AllFrames,
            &Disturbance::Scale { min, max },
            next_seed(),
        )?;
    }
    let random_policy = |r: &mut rand_chacha::ChaCha8Rng| match r.random_range(0..3) {
        0 => DisturbancePolicy::LastFrameOnly,
        1 => DisturbancePolicy::RandomSubset { p: 0.5 },
        _ => DisturbancePolicy::AllFrames,
    };
    let mut photometric = Vec::new();
    if r.random_bool(cfg.brightness_prob) {
        let (lo, hi) = cfg.brightness_range;
        let factor = if lo == hi { lo } else { r.random_range(lo..hi) };
        photometric.push(Disturbance::Brightness { factor });
    }
    if r.random_bool(cfg.rain_prob) {
        let level = [RainLevel::Light, RainLevel::Moderate, RainLevel::Heavy][r.random_range(0..3)];
        photometric.push(Disturbance::Rain(rain_preset(level)));
    }
    if r.random_bool(cfg.polygon_prob) {
        photometric.push(Disturbance::Polygon {
            max_vertices: cfg.polygon_max_vertices,
            max_extent_fraction: cfg.polygon_max_extent,
        });
    }
    if r.random_bool(cfg.noise_prob) {
        photometric.push(Disturbance::Noise(if r.random_bool(0.5) {
            NoiseKind::Gaussian {
                sigma: cfg.gaussian_sigma,
            }
        } else {
            NoiseKind::SaltPepper { p: cfg.salt_pepper_p }
        }));
    }
    for d in &photometric {
        let policy = random_policy(&mut r);
        out = apply_policy(&out, policy, d, next_seed())?;
    }
    Ok(out)
}
