//! Image container, file I/O and the deterministic pixel operators shared by
//! the network, the quality scorers and the trainer.

mod augment;

pub use augment::{
    apply_geometry, augment, augment_pair, augment_traced, AugmentKind, AugmentOp, AugmentTrace,
    AugmentationPolicy, StrongParams, TraceRecord,
};

use std::path::Path;

use tidewater_autograd::Tensor;

/// Smallest side accepted by the network, the metrics and augmentation targets.
pub const MIN_SIDE: usize = 8;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, thiserror::Error)]
pub enum ImagingError {
    #[error("file not found: {0}")]
    MissingFile(String),
    #[error("cannot decode {path}: {reason}")]
    UndecodableImage { path: String, reason: String },
    #[error("{path} is not an RGB raster ({color})")]
    NonRgbImage { path: String, color: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid pixel data: {0}")]
    InvalidData(String),
    #[error("image {height}x{width} is smaller than the {min}x{min} minimum")]
    TooSmall { height: usize, width: usize, min: usize },
    #[error("alpha {0} outside [0, 1]")]
    InvalidAlpha(f64),
    #[error("invalid augmentation policy: {0}")]
    InvalidPolicy(String),
    #[error("cannot write {path}: {reason}")]
    Write { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, ImagingError>;

/// Three-channel image with values in `[0, 1]`, stored as planar `[c][y][x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(ImagingError::InvalidData("empty image".into()));
        }
        if data.len() != 3 * height * width {
            return Err(ImagingError::InvalidData(format!(
                "{}x{}x3 image needs {} values, got {}",
                height,
                width,
                3 * height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ImagingError::InvalidData(format!("value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    /// Builds an image from arbitrary reals, mapping NaN to 0 and clamping to `[0, 1]`.
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        for v in data.iter_mut() {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        Self::from_fn(height, width, |c, _, _| rgb[c])
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn check_min_size(&self, min: usize) -> Result<()> {
        if self.height < min || self.width < min {
            return Err(ImagingError::TooSmall { height: self.height, width: self.width, min });
        }
        Ok(())
    }

    pub fn same_dims(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(ImagingError::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    pub fn luminance(&self) -> Vec<f64> {
        let n = self.height * self.width;
        (0..n)
            .map(|i| LUMA[0] * self.data[i] + LUMA[1] * self.data[n + i] + LUMA[2] * self.data[2 * n + i])
            .collect()
    }

    /// `[1, 3, H, W]` tensor view of the pixels.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 3, self.height, self.width], self.data.clone()).expect("image tensor shape")
    }

    /// Stacks same-sized images into an `[N, 3, H, W]` tensor.
    pub fn batch_tensor(images: &[&Image]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| ImagingError::InvalidData("empty batch".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            first.same_dims(img)?;
            data.extend_from_slice(&img.data);
        }
        Ok(Tensor::new(vec![images.len(), 3, first.height, first.width], data).expect("batch shape"))
    }

    /// Splits sample `index` of an `[N, 3, H, W]` tensor back into an image, clamping to `[0, 1]`.
    pub fn from_tensor_sample(t: &Tensor, index: usize) -> Result<Self> {
        match t.shape() {
            &[n, 3, h, w] if index < n => {
                Self::from_clamped(h, w, t.data()[index * 3 * h * w..(index + 1) * 3 * h * w].to_vec())
            }
            other => Err(ImagingError::DimensionMismatch(format!("expected [N,3,H,W] tensor, got {other:?}"))),
        }
    }

    /// Rounds every value to the nearest multiple of `1/levels`.
    pub fn quantized(&self, levels: u32) -> Self {
        let l = levels as f64;
        let data = self.data.iter().map(|v| (v * l).round() / l).collect();
        Self { height: self.height, width: self.width, data }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let data = self.data.iter().map(|v| f(*v).clamp(0.0, 1.0)).collect();
        Self { height: self.height, width: self.width, data }
    }

    /// Bilinear resize with corner-aligned sampling.
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(ImagingError::InvalidData("resize to an empty size".into()));
        }
        if (height, width) == self.dims() {
            return Ok(self.clone());
        }
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            data.extend(resize_plane(self.plane(c), self.height, self.width, height, width));
        }
        Self::from_clamped(height, width, data)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(ImagingError::DimensionMismatch(format!(
                "crop {height}x{width}+{top}+{left} outside {}x{}",
                self.height, self.width
            )));
        }
        Self::from_fn(height, width, |c, y, x| self.get(c, top + y, left + x))
    }

    /// Rotates counter-clockwise by `quarter_turns`·90°.
    pub fn rotate90(&self, quarter_turns: u8) -> Self {
        let (h, w) = self.dims();
        let turns = quarter_turns % 4;
        let (nh, nw) = if turns % 2 == 1 { (w, h) } else { (h, w) };
        let mut data = vec![0.0; 3 * nh * nw];
        for c in 0..3 {
            for y in 0..nh {
                for x in 0..nw {
                    let (sy, sx) = match turns {
                        0 => (y, x),
                        1 => (x, w - 1 - y),
                        2 => (h - 1 - y, w - 1 - x),
                        _ => (h - 1 - x, y),
                    };
                    data[(c * nh + y) * nw + x] = self.get(c, sy, sx);
                }
            }
        }
        Self { height: nh, width: nw, data }
    }

    /// Replicate-pads bottom and right edges up to the given size.
    pub fn pad_to(&self, height: usize, width: usize) -> Result<Self> {
        if height < self.height || width < self.width {
            return Err(ImagingError::DimensionMismatch("pad target smaller than image".into()));
        }
        Self::from_fn(height, width, |c, y, x| self.get(c, y.min(self.height - 1), x.min(self.width - 1)))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(3 * self.height * self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    buf.push((self.get(c, y, x) * 255.0).round() as u8);
                }
            }
        }
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, buf).expect("buffer size");
        img.save_with_format(path, image::ImageFormat::Png).map_err(|e| ImagingError::Write {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    /// Lossless 16-bit PNG; values are written at `1/65535` precision.
    pub fn save_png16(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(3 * self.height * self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    buf.push((self.get(c, y, x) * 65535.0).round() as u16);
                }
            }
        }
        let img: image::ImageBuffer<image::Rgb<u16>, Vec<u16>> =
            image::ImageBuffer::from_raw(self.width as u32, self.height as u32, buf).expect("buffer size");
        img.save_with_format(path, image::ImageFormat::Png).map_err(|e| ImagingError::Write {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }
}

pub(crate) fn resize_plane(src: &[f64], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f64> {
    let axis = |s: usize, d: usize| -> Vec<(usize, usize, f64)> {
        (0..d)
            .map(|i| {
                if s == d {
                    return (i, i, 0.0);
                }
                let pos = if d == 1 { 0.0 } else { (i * (s - 1)) as f64 / (d - 1) as f64 };
                let i0 = (pos.floor() as usize).min(s - 1);
                (i0, (i0 + 1).min(s - 1), pos - i0 as f64)
            })
            .collect()
    };
    let ry = axis(h, nh);
    let rx = axis(w, nw);
    let mut out = Vec::with_capacity(nh * nw);
    for &(y0, y1, fy) in &ry {
        for &(x0, x1, fx) in &rx {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Reads an 8- or 16-bit RGB PNG/JPEG and rescales it to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Image> {
    if !path.is_file() {
        return Err(ImagingError::MissingFile(path.display().to_string()));
    }
    let shown = || path.display().to_string();
    let img = image::ImageReader::open(path)
        .map_err(|e| ImagingError::UndecodableImage { path: shown(), reason: e.to_string() })?
        .with_guessed_format()
        .map_err(|e| ImagingError::UndecodableImage { path: shown(), reason: e.to_string() })?
        .decode()
        .map_err(|e| ImagingError::UndecodableImage { path: shown(), reason: e.to_string() })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let interleaved: Vec<f64> = match img {
        image::DynamicImage::ImageRgb8(buf) => buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        image::DynamicImage::ImageRgb16(buf) => buf.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
        other => {
            return Err(ImagingError::NonRgbImage { path: shown(), color: format!("{:?}", other.color()) });
        }
    };
    let n = h * w;
    let mut data = vec![0.0; 3 * n];
    for (i, px) in interleaved.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * n + i] = px[c];
        }
    }
    Image::new(h, w, data)
}

/// Elementwise `alpha·x + (1 − alpha)·y`.
pub fn alpha_blend(x: &Image, y: &Image, alpha: f64) -> Result<Image> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ImagingError::InvalidAlpha(alpha));
    }
    x.same_dims(y)?;
    let beta = 1.0 - alpha;
    let data = x.data.iter().zip(&y.data).map(|(a, b)| (alpha * a + beta * b).clamp(0.0, 1.0)).collect();
    Ok(Image { height: x.height, width: x.width, data })
}

/// Single-channel non-negative map (edge magnitudes).
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl GradientMap {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 1, self.height, self.width], self.data.clone()).expect("map shape")
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0)
    }
}

/// Magnitude of backward first differences of the luminance, replicate boundary:
/// `sqrt((Y[y][x] − Y[y][x−1])² + (Y[y][x] − Y[y−1][x])²)`.
pub fn gradient_map(x: &Image) -> GradientMap {
    let (h, w) = x.dims();
    let lum = x.luminance();
    let mut data = Vec::with_capacity(h * w);
    for yy in 0..h {
        for xx in 0..w {
            let v = lum[yy * w + xx];
            let dx = v - lum[yy * w + xx.saturating_sub(1)];
            let dy = v - lum[yy.saturating_sub(1) * w + xx];
            data.push((dx * dx + dy * dy).sqrt());
        }
    }
    GradientMap { height: h, width: w, data }
}

/// Smooth single-channel ambient-light estimate in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IlluminationMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl IlluminationMap {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 1, self.height, self.width], self.data.clone()).expect("map shape")
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Smoothing scale of the illumination estimator; floored at 1 px so small
/// images stay within the smoothness bound.
pub fn illumination_sigma(height: usize, width: usize) -> f64 {
    (height.min(width) as f64 / 16.0).max(1.0)
}

/// Per-pixel channel maximum followed by a wide Gaussian.
pub fn estimate_illumination(x: &Image) -> IlluminationMap {
    let (h, w) = x.dims();
    let n = h * w;
    let max_rgb: Vec<f64> = (0..n)
        .map(|i| x.data[i].max(x.data[n + i]).max(x.data[2 * n + i]))
        .collect();
    let sigma = illumination_sigma(h, w);
    let smoothed = gaussian_blur_plane(&max_rgb, h, w, sigma, (3.0 * sigma).ceil() as usize);
    IlluminationMap { height: h, width: w, data: smoothed.into_iter().map(|v| v.clamp(0.0, 1.0)).collect() }
}

/// Normalized Gaussian taps over `-radius..=radius`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian with replicate boundary.
pub(crate) fn gaussian_blur_plane(src: &[f64], h: usize, w: usize, sigma: f64, radius: usize) -> Vec<f64> {
    let k = gaussian_kernel(sigma, radius);
    let r = radius as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                acc += kv * src[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Per-channel separable Gaussian with replicate boundary, clamped to `[0, 1]`.
pub fn gaussian_blur(x: &Image, sigma: f64, radius: usize) -> Image {
    let (h, w) = x.dims();
    let mut data = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        data.extend(gaussian_blur_plane(x.plane(c), h, w, sigma, radius));
    }
    Image::from_clamped(h, w, data).expect("blur keeps dimensions")
}
