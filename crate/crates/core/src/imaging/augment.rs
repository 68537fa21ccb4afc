//! Weak, strong and labeled augmentation pipelines with replayable traces.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{gaussian_blur, Image, ImagingError, Result, MIN_SIDE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Weak,
    Strong,
    Labeled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentOp {
    Resize,
    Crop,
    Rotate,
    ColorJitter,
    GaussianBlur,
    GrayScale,
}

impl AugmentOp {
    pub fn name(self) -> &'static str {
        match self {
            AugmentOp::Resize => "resize",
            AugmentOp::Crop => "crop",
            AugmentOp::Rotate => "rotate",
            AugmentOp::ColorJitter => "color_jitter",
            AugmentOp::GaussianBlur => "gaussian_blur",
            AugmentOp::GrayScale => "gray_scale",
        }
    }
}

/// Sampling ranges of the photometric operators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrongParams {
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub saturation: (f64, f64),
    pub hue: (f64, f64),
    pub blur_sigma: (f64, f64),
    pub gray_probability: f64,
}

impl Default for StrongParams {
    fn default() -> Self {
        Self {
            brightness: (0.6, 1.4),
            contrast: (0.6, 1.4),
            saturation: (0.6, 1.4),
            hue: (-0.1, 0.1),
            blur_sigma: (0.1, 2.0),
            gray_probability: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationPolicy {
    pub kind: AugmentKind,
    pub target_size: (usize, usize),
    pub rng_seed: u64,
    pub enabled_ops: BTreeSet<AugmentOp>,
    pub strong: StrongParams,
}

impl AugmentationPolicy {
    pub fn weak(target_size: (usize, usize), rng_seed: u64) -> Self {
        Self {
            kind: AugmentKind::Weak,
            target_size,
            rng_seed,
            enabled_ops: [AugmentOp::Resize].into(),
            strong: StrongParams::default(),
        }
    }

    pub fn strong(target_size: (usize, usize), rng_seed: u64) -> Self {
        Self {
            kind: AugmentKind::Strong,
            target_size,
            rng_seed,
            enabled_ops: [AugmentOp::Resize, AugmentOp::ColorJitter, AugmentOp::GaussianBlur, AugmentOp::GrayScale]
                .into(),
            strong: StrongParams::default(),
        }
    }

    pub fn labeled(target_size: (usize, usize), rng_seed: u64) -> Self {
        Self {
            kind: AugmentKind::Labeled,
            target_size,
            rng_seed,
            enabled_ops: [AugmentOp::Resize, AugmentOp::Crop, AugmentOp::Rotate].into(),
            strong: StrongParams::default(),
        }
    }

    pub fn with_seed(mut self, rng_seed: u64) -> Self {
        self.rng_seed = rng_seed;
        self
    }

    pub fn with_ops(mut self, ops: &[AugmentOp]) -> Self {
        self.enabled_ops = ops.iter().copied().collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ImagingError::InvalidPolicy(msg));
        let (th, tw) = self.target_size;
        if th < MIN_SIDE || tw < MIN_SIDE {
            return bad(format!("target size {th}x{tw} below {MIN_SIDE}x{MIN_SIDE}"));
        }
        let allowed: &[AugmentOp] = match self.kind {
            AugmentKind::Weak => &[AugmentOp::Resize],
            AugmentKind::Strong => {
                &[AugmentOp::Resize, AugmentOp::ColorJitter, AugmentOp::GaussianBlur, AugmentOp::GrayScale]
            }
            AugmentKind::Labeled => &[AugmentOp::Resize, AugmentOp::Crop, AugmentOp::Rotate],
        };
        if let Some(op) = self.enabled_ops.iter().find(|op| !allowed.contains(op)) {
            return bad(format!("{} not allowed for {:?} policy", op.name(), self.kind));
        }
        if matches!(self.kind, AugmentKind::Weak | AugmentKind::Strong) && !self.enabled_ops.contains(&AugmentOp::Resize)
        {
            return bad(format!("{:?} policy must enable resize", self.kind));
        }
        let s = &self.strong;
        for (name, (lo, hi)) in
            [("brightness", s.brightness), ("contrast", s.contrast), ("saturation", s.saturation)]
        {
            if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
                return bad(format!("{name} range ({lo}, {hi}) invalid"));
            }
        }
        if !(s.hue.0 <= s.hue.1 && s.hue.0 >= -0.5 && s.hue.1 <= 0.5) {
            return bad(format!("hue range {:?} invalid", s.hue));
        }
        if !(s.blur_sigma.0 > 0.0 && s.blur_sigma.0 <= s.blur_sigma.1 && s.blur_sigma.1.is_finite()) {
            return bad(format!("blur sigma range {:?} invalid", s.blur_sigma));
        }
        if !(0.0..=1.0).contains(&s.gray_probability) {
            return bad(format!("gray probability {} invalid", s.gray_probability));
        }
        Ok(())
    }

    fn enabled(&self, op: AugmentOp) -> bool {
        self.enabled_ops.contains(&op)
    }
}

/// One applied operator with its sampled parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub op: String,
    pub params: Vec<(String, String)>,
}

impl TraceRecord {
    fn new(op: AugmentOp, params: &[(&str, String)]) -> Self {
        Self { op: op.name().to_string(), params: params.iter().map(|(k, v)| (k.to_string(), v.clone())).collect() }
    }

    fn param<T: FromStr>(&self, key: &str) -> Result<T> {
        self.params
            .iter()
            .find(|(k, _)| k == key)
            .and_then(|(_, v)| v.parse().ok())
            .ok_or_else(|| ImagingError::InvalidPolicy(format!("trace record {} lacks {key}", self.op)))
    }
}

/// Ordered record of what an augmentation call did; one line per operator.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AugmentTrace {
    pub records: Vec<TraceRecord>,
}

impl AugmentTrace {
    pub fn find(&self, op: AugmentOp) -> Option<&TraceRecord> {
        self.records.iter().find(|r| r.op == op.name())
    }

    /// Crop window `(top, left, height, width)` if a crop was applied.
    pub fn crop_window(&self) -> Option<(usize, usize, usize, usize)> {
        let r = self.find(AugmentOp::Crop)?;
        Some((r.param("top").ok()?, r.param("left").ok()?, r.param("height").ok()?, r.param("width").ok()?))
    }
}

impl fmt::Display for AugmentTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.records {
            write!(f, "{}", r.op)?;
            for (k, v) in &r.params {
                write!(f, " {k}={v}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

impl FromStr for AugmentTrace {
    type Err = ImagingError;

    fn from_str(s: &str) -> Result<Self> {
        let mut records = Vec::new();
        for line in s.lines().filter(|l| !l.trim().is_empty()) {
            let mut parts = line.split_whitespace();
            let op = parts.next().expect("non-empty line").to_string();
            let mut params = Vec::new();
            for p in parts {
                let (k, v) = p
                    .split_once('=')
                    .ok_or_else(|| ImagingError::InvalidPolicy(format!("malformed trace field {p:?}")))?;
                params.push((k.to_string(), v.to_string()));
            }
            records.push(TraceRecord { op, params });
        }
        Ok(Self { records })
    }
}

pub fn augment(x: &Image, policy: &AugmentationPolicy) -> Result<Image> {
    augment_traced(x, policy).map(|(img, _)| img)
}

/// Single-image augmentation (weak, strong, or geometric-only labeled) with its trace.
pub fn augment_traced(x: &Image, policy: &AugmentationPolicy) -> Result<(Image, AugmentTrace)> {
    policy.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(policy.rng_seed);
    let mut trace = AugmentTrace::default();
    if policy.kind == AugmentKind::Labeled {
        let geo = sample_geometry(x, policy, &mut rng, &mut trace)?;
        return Ok((geo.apply(x)?, trace));
    }
    let (th, tw) = policy.target_size;
    let mut img = x.resize(th, tw)?;
    trace.records.push(TraceRecord::new(
        AugmentOp::Resize,
        &[("from", format!("{}x{}", x.height(), x.width())), ("to", format!("{th}x{tw}"))],
    ));
    if policy.kind == AugmentKind::Weak {
        return Ok((img, trace));
    }
    let s = &policy.strong;
    // Draw every parameter up front so the stream does not depend on which ops are enabled.
    let b = sample(&mut rng, s.brightness);
    let c = sample(&mut rng, s.contrast);
    let sat = sample(&mut rng, s.saturation);
    let hue = sample(&mut rng, s.hue);
    let sigma = sample(&mut rng, s.blur_sigma);
    let gray_draw: f64 = rng.gen();
    if policy.enabled(AugmentOp::ColorJitter) {
        img = color_jitter(&img, b, c, sat, hue);
        trace.records.push(TraceRecord::new(
            AugmentOp::ColorJitter,
            &[
                ("brightness", format!("{b}")),
                ("contrast", format!("{c}")),
                ("saturation", format!("{sat}")),
                ("hue", format!("{hue}")),
            ],
        ));
    }
    if policy.enabled(AugmentOp::GaussianBlur) {
        let radius = (2.0 * sigma).ceil() as usize;
        img = gaussian_blur(&img, sigma, radius);
        trace.records.push(TraceRecord::new(
            AugmentOp::GaussianBlur,
            &[("sigma", format!("{sigma}")), ("kernel", format!("{}", 2 * radius + 1))],
        ));
    }
    if policy.enabled(AugmentOp::GrayScale) && gray_draw < s.gray_probability {
        img = grayscale(&img);
        trace.records.push(TraceRecord::new(AugmentOp::GrayScale, &[]));
    }
    Ok((img, trace))
}

/// Applies one sampled geometric transform to an aligned input/target pair.
pub fn augment_pair(x: &Image, y: &Image, policy: &AugmentationPolicy) -> Result<(Image, Image, AugmentTrace)> {
    if policy.kind != AugmentKind::Labeled {
        return Err(ImagingError::InvalidPolicy("paired augmentation requires a labeled policy".into()));
    }
    policy.validate()?;
    x.same_dims(y)?;
    let mut rng = ChaCha8Rng::seed_from_u64(policy.rng_seed);
    let mut trace = AugmentTrace::default();
    let geo = sample_geometry(x, policy, &mut rng, &mut trace)?;
    Ok((geo.apply(x)?, geo.apply(y)?, trace))
}

/// Replays the geometric part (crop, resize, rotate) of a trace on another image.
pub fn apply_geometry(img: &Image, trace: &AugmentTrace) -> Result<Image> {
    let (top, left, h, w) = trace.crop_window().unwrap_or((0, 0, img.height(), img.width()));
    let to = match trace.find(AugmentOp::Resize) {
        Some(r) => parse_size(&r.param::<String>("to")?)?,
        None => (h, w),
    };
    let turns = match trace.find(AugmentOp::Rotate) {
        Some(r) => r.param("quarter_turns")?,
        None => 0,
    };
    Geometry { window: (top, left, h, w), to, turns }.apply(img)
}

struct Geometry {
    window: (usize, usize, usize, usize),
    to: (usize, usize),
    turns: u8,
}

impl Geometry {
    fn apply(&self, img: &Image) -> Result<Image> {
        let (top, left, h, w) = self.window;
        let cropped = if (top, left, h, w) == (0, 0, img.height(), img.width()) {
            img.clone()
        } else {
            img.crop(top, left, h, w)?
        };
        Ok(cropped.resize(self.to.0, self.to.1)?.rotate90(self.turns))
    }
}

fn sample_geometry(
    x: &Image,
    policy: &AugmentationPolicy,
    rng: &mut ChaCha8Rng,
    trace: &mut AugmentTrace,
) -> Result<Geometry> {
    let (th, tw) = policy.target_size;
    let (h, w) = x.dims();
    let top_draw: f64 = rng.gen();
    let left_draw: f64 = rng.gen();
    let turn_draw: u8 = rng.gen_range(0..4);
    let mut window = (0, 0, h, w);
    if policy.enabled(AugmentOp::Crop) && h >= th && w >= tw && (h, w) != (th, tw) {
        let top = ((h - th + 1) as f64 * top_draw) as usize;
        let left = ((w - tw + 1) as f64 * left_draw) as usize;
        window = (top.min(h - th), left.min(w - tw), th, tw);
        trace.records.push(TraceRecord::new(
            AugmentOp::Crop,
            &[
                ("top", window.0.to_string()),
                ("left", window.1.to_string()),
                ("height", th.to_string()),
                ("width", tw.to_string()),
            ],
        ));
    }
    if (window.2, window.3) != (th, tw) {
        if !policy.enabled(AugmentOp::Resize) {
            return Err(ImagingError::InvalidPolicy(format!(
                "input {h}x{w} cannot reach target {th}x{tw} without resize"
            )));
        }
        trace.records.push(TraceRecord::new(
            AugmentOp::Resize,
            &[("from", format!("{}x{}", window.2, window.3)), ("to", format!("{th}x{tw}"))],
        ));
    }
    let mut turns = 0;
    if policy.enabled(AugmentOp::Rotate) {
        // Odd quarter turns would swap the sides of a non-square target.
        turns = if th == tw { turn_draw } else { turn_draw & 2 };
        trace.records.push(TraceRecord::new(AugmentOp::Rotate, &[("quarter_turns", turns.to_string())]));
    }
    Ok(Geometry { window, to: (th, tw), turns })
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    s.split_once('x')
        .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
        .ok_or_else(|| ImagingError::InvalidPolicy(format!("bad size {s:?}")))
}

fn sample(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

fn grayscale(img: &Image) -> Image {
    let lum = img.luminance();
    let n = lum.len();
    let data = (0..3 * n).map(|i| lum[i % n].clamp(0.0, 1.0)).collect();
    Image::new(img.height(), img.width(), data).expect("grayscale keeps dimensions")
}

/// Brightness, contrast, saturation then hue, clamping after each step.
fn color_jitter(img: &Image, brightness: f64, contrast: f64, saturation: f64, hue: f64) -> Image {
    let (h, w) = img.dims();
    let n = h * w;
    let mut d: Vec<f64> = img.data().iter().map(|v| (v * brightness).clamp(0.0, 1.0)).collect();

    let lum_mean = (0..n).map(|i| 0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i]).sum::<f64>() / n as f64;
    d.iter_mut().for_each(|v| *v = (contrast * *v + (1.0 - contrast) * lum_mean).clamp(0.0, 1.0));

    for i in 0..n {
        let l = 0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i];
        for c in 0..3 {
            let v = &mut d[c * n + i];
            *v = (saturation * *v + (1.0 - saturation) * l).clamp(0.0, 1.0);
        }
    }

    if hue != 0.0 {
        for i in 0..n {
            let (hh, s, v) = rgb_to_hsv(d[i], d[n + i], d[2 * n + i]);
            let (r, g, b) = hsv_to_rgb((hh + hue).rem_euclid(1.0), s, v);
            d[i] = r.clamp(0.0, 1.0);
            d[n + i] = g.clamp(0.0, 1.0);
            d[2 * n + i] = b.clamp(0.0, 1.0);
        }
    }
    Image::new(h, w, d).expect("jitter keeps dimensions")
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h * 6.0;
    let sector = (h6.floor() as i64).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let (r, g, b): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-12 && (g - g2).abs() < 1e-12 && (b - b2).abs() < 1e-12);
        }
    }
}
