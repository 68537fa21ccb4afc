//! Full-reference metrics, the synthetic degradation generator and the
//! evaluation reports written by the command-line tool.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::imaging::{gaussian_blur, gaussian_kernel, load_image, Image, ImagingError};
use crate::iqa::QualityScorer;
use crate::model::{ModelWeights, Network};
use crate::trainer::{derive_seed, infer, list_images, TrainError};

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Veiling-light color of the synthetic water column.
pub const AMBIENT: [f64; 3] = [0.05, 0.35, 0.45];
pub const SUMMARY_ID: &str = "mean";
pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("image dimensions differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("image {0:?} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")]
    ImageTooSmall((usize, usize)),
    #[error("{0} does not exist")]
    MissingDirectory(PathBuf),
    #[error("{0} holds no images")]
    EmptyDirectory(PathBuf),
    #[error("{0} has no matching ground truth")]
    UnpairedFile(PathBuf),
    #[error("invalid degradation: {0}")]
    InvalidDegradation(String),
    #[error("malformed report {path}: {reason}")]
    MalformedReport { path: PathBuf, reason: String },
    #[error("i/o failure on {path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> EvalError {
    EvalError::Io { path: path.to_path_buf(), reason: e.to_string() }
}

fn malformed(path: &Path, reason: impl Into<String>) -> EvalError {
    EvalError::MalformedReport { path: path.to_path_buf(), reason: reason.into() }
}

fn same_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dims() == b.dims() {
        Ok(())
    } else {
        Err(EvalError::DimensionMismatch(a.dims(), b.dims()))
    }
}

/// `10·log10(1/MSE)` over all channels, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Mean single-scale SSIM of the luminance planes over every position where
/// the 11×11 Gaussian window (σ = 1.5) fits.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_dims(a, b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(EvalError::ImageTooSmall((h, w)));
    }
    let (la, lb) = (a.luminance(), b.luminance());
    let k = gaussian_kernel(SSIM_SIGMA, SSIM_WINDOW / 2);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for y in 0..oh {
        for x in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (i, ki) in k.iter().enumerate() {
                for (j, kj) in k.iter().enumerate() {
                    let wgt = ki * kj;
                    let p = (y + i) * w + x + j;
                    let (va, vb) = (la[p], lb[p]);
                    ma += wgt * va;
                    mb += wgt * vb;
                    saa += wgt * va * va;
                    sbb += wgt * vb * vb;
                    sab += wgt * (va * vb);
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * (ma * mb) + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

/// Channel gains, then veiling toward [`AMBIENT`], then Gaussian blur.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDegradation {
    pub color_cast: [f64; 3],
    pub haze_strength: f64,
    pub blur_sigma: f64,
    /// Seed the parameters were drawn from.
    pub seed: u64,
}

impl SyntheticDegradation {
    pub fn neutral() -> Self {
        Self { color_cast: [1.0; 3], haze_strength: 0.0, blur_sigma: 0.0, seed: 0 }
    }

    /// Draws a red-attenuating, hazy, mildly blurred water column.
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            color_cast: [rng.gen_range(0.35..0.75), rng.gen_range(0.75..0.95), rng.gen_range(0.85..1.0)],
            haze_strength: rng.gen_range(0.1..0.45),
            blur_sigma: rng.gen_range(0.0..1.2),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.color_cast.iter().any(|g| !(*g > 0.0 && *g <= 1.0)) {
            return Err(EvalError::InvalidDegradation(format!("gains {:?} outside (0, 1]", self.color_cast)));
        }
        if !(0.0..1.0).contains(&self.haze_strength) {
            return Err(EvalError::InvalidDegradation(format!("haze {} outside [0, 1)", self.haze_strength)));
        }
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return Err(EvalError::InvalidDegradation(format!("blur sigma {} is negative", self.blur_sigma)));
        }
        Ok(())
    }
}

pub fn degrade(clean: &Image, d: &SyntheticDegradation) -> Result<Image> {
    d.validate()?;
    let (h, w) = clean.dims();
    let n = h * w;
    let src = clean.data();
    let hz = d.haze_strength;
    let mut data = Vec::with_capacity(3 * n);
    for c in 0..3 {
        data.extend(src[c * n..(c + 1) * n].iter().map(|v| (1.0 - hz) * d.color_cast[c] * v + hz * AMBIENT[c]));
    }
    let img = Image::from_clamped(h, w, data)?;
    Ok(if d.blur_sigma > 0.0 { gaussian_blur(&img, d.blur_sigma, (3.0 * d.blur_sigma).ceil() as usize) } else { img })
}

/// A colorful synthetic scene: a two-color gradient backdrop, soft ellipses
/// and a fine sinusoidal texture.
pub fn procedural_scene(h: usize, w: usize, seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = |rng: &mut ChaCha8Rng| [rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0)];
    let (top, bottom) = (color(&mut rng), color(&mut rng));
    let blobs: Vec<([f64; 3], f64, f64, f64, f64)> = (0..rng.gen_range(3..7))
        .map(|_| {
            let c = color(&mut rng);
            (c, rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.08..0.3), rng.gen_range(0.08..0.3))
        })
        .collect();
    let (fx, fy, amp) = (rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9), rng.gen_range(0.02..0.08));
    let (hf, wf) = (h as f64, w as f64);
    Ok(Image::from_fn(h, w, |c, y, x| {
        let (u, v) = (x as f64 / wf, y as f64 / hf);
        let mut px = (1.0 - v) * top[c] + v * bottom[c];
        for (col, cx, cy, rx, ry) in &blobs {
            let d = ((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2);
            let a = 1.0 / (1.0 + (8.0 * (d - 1.0)).exp());
            px = (1.0 - a) * px + a * col[c];
        }
        (px + amp * (fx * x as f64 + fy * y as f64 + c as f64).sin()).clamp(0.0, 1.0)
    })?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub pair_id: String,
    pub clean_path: String,
    pub degraded_path: String,
    /// JSON form of the [`SyntheticDegradation`].
    pub parameters: String,
}

#[derive(Clone, Debug)]
pub struct SynthOptions {
    /// Source of clean images; procedural scenes when absent.
    pub clean_dir: Option<PathBuf>,
    pub n: usize,
    /// Side of the square output images.
    pub size: usize,
    pub seed: u64,
}

/// Writes `clean/` and `degraded/` pairs plus a manifest under `out_dir`.
/// Clean sources are used cyclically and randomly cropped (or resized when
/// smaller) to the output size.
pub fn make_synth(opts: &SynthOptions, out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    let sources = match &opts.clean_dir {
        Some(dir) => {
            let files = images_in(dir)?;
            if files.is_empty() {
                return Err(EvalError::EmptyDirectory(dir.clone()));
            }
            files
        }
        None => Vec::new(),
    };
    for sub in ["clean", "degraded"] {
        fs::create_dir_all(out_dir.join(sub)).map_err(|e| io_err(out_dir, e))?;
    }
    let s = opts.size;
    let mut entries = Vec::with_capacity(opts.n);
    for k in 0..opts.n {
        let pair_seed = derive_seed(&[opts.seed, k as u64]);
        let clean = if sources.is_empty() {
            procedural_scene(s, s, pair_seed)?
        } else {
            let src = load_image(&sources[k % sources.len()])?;
            let (h, w) = src.dims();
            if h >= s && w >= s {
                let mut rng = ChaCha8Rng::seed_from_u64(pair_seed ^ 0x5eed);
                src.crop(rng.gen_range(0..=h - s), rng.gen_range(0..=w - s), s, s)?
            } else {
                src.resize(s, s)?
            }
        };
        let d = SyntheticDegradation::sample(derive_seed(&[pair_seed, 1]));
        let degraded = degrade(&clean, &d)?;
        let name = format!("s{}_{k:05}.png", opts.seed);
        let (cp, dp) = (format!("clean/{name}"), format!("degraded/{name}"));
        clean.save_png(&out_dir.join(&cp))?;
        degraded.save_png(&out_dir.join(&dp))?;
        entries.push(ManifestEntry {
            pair_id: name,
            clean_path: cp,
            degraded_path: dp,
            parameters: serde_json::to_string(&d).expect("degradation serializes"),
        });
    }
    write_manifest(&entries, &out_dir.join(MANIFEST_FILE))?;
    Ok(entries)
}

fn tsv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::WriterBuilder::new().delimiter(b'\t').from_path(path).map_err(|e| io_err(path, e))
}

pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let mut w = tsv_writer(path)?;
    for e in entries {
        w.serialize(e).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut r = csv::ReaderBuilder::new().delimiter(b'\t').from_path(path).map_err(|e| io_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| malformed(path, e.to_string()))).collect()
}

fn images_in(dir: &Path) -> Result<Vec<PathBuf>> {
    list_images(dir).map_err(|e| match e {
        TrainError::DataRootMissing(p) => EvalError::MissingDirectory(p),
        other => other.into(),
    })
}

/// Anything that maps a degraded image to a restored one.
pub trait Restorer {
    fn restore(&self, x: &Image) -> Result<Image>;
}

/// Returns the input unchanged; evaluates the raw inputs as a baseline.
pub struct Identity;

impl Restorer for Identity {
    fn restore(&self, x: &Image) -> Result<Image> {
        Ok(x.clone())
    }
}

pub struct NetworkRestorer<N: Network> {
    pub net: N,
    pub weights: ModelWeights,
}

impl<N: Network> Restorer for NetworkRestorer<N> {
    fn restore(&self, x: &Image) -> Result<Image> {
        Ok(infer(&self.net, &self.weights, x)?)
    }
}

/// One metric value of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub image_id: String,
    pub metric_name: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrRow {
    pub image_id: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrReport {
    pub rows: Vec<FrRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl FrReport {
    pub fn records(&self) -> Vec<EvalRecord> {
        self.rows
            .iter()
            .flat_map(|r| {
                [("psnr", r.psnr), ("ssim", r.ssim)].map(|(m, v)| EvalRecord {
                    image_id: r.image_id.clone(),
                    metric_name: m.into(),
                    value: v,
                })
            })
            .collect()
    }

    /// `image_id,psnr,ssim` per image, then a `mean` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| io_err(path, e))?;
        }
        w.serialize(FrRow { image_id: SUMMARY_ID.into(), psnr: self.mean_psnr, ssim: self.mean_ssim })
            .map_err(|e| io_err(path, e))?;
        w.flush().map_err(|e| io_err(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
        let mut rows: Vec<FrRow> =
            r.deserialize().collect::<std::result::Result<_, _>>().map_err(|e| malformed(path, e.to_string()))?;
        let summary = rows.pop().filter(|s| s.image_id == SUMMARY_ID).ok_or_else(|| malformed(path, "no summary row"))?;
        Ok(Self { rows, mean_psnr: summary.psnr, mean_ssim: summary.ssim })
    }
}

/// Restores every `degraded/<name>` of `pairs_dir` and compares it with `clean/<name>`.
pub fn evaluate_full_reference(restorer: &dyn Restorer, pairs_dir: &Path) -> Result<FrReport> {
    let deg_dir = pairs_dir.join("degraded");
    let clean_dir = pairs_dir.join("clean");
    if !pairs_dir.is_dir() {
        return Err(EvalError::MissingDirectory(pairs_dir.to_path_buf()));
    }
    let inputs = if deg_dir.is_dir() { images_in(&deg_dir)? } else { Vec::new() };
    if inputs.is_empty() {
        return Err(EvalError::EmptyDirectory(deg_dir));
    }
    let mut rows = Vec::with_capacity(inputs.len());
    for path in inputs {
        let gt_path = clean_dir.join(path.file_name().expect("listed file"));
        if !gt_path.is_file() {
            return Err(EvalError::UnpairedFile(path));
        }
        let gt = load_image(&gt_path)?;
        let out = restorer.restore(&load_image(&path)?)?;
        rows.push(FrRow {
            image_id: path.file_name().expect("listed file").to_string_lossy().into_owned(),
            psnr: psnr(&out, &gt)?,
            ssim: ssim(&out, &gt)?,
        });
    }
    let n = rows.len() as f64;
    let mean_psnr = rows.iter().map(|r| r.psnr).sum::<f64>() / n;
    let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
    Ok(FrReport { rows, mean_psnr, mean_ssim })
}

/// Scores of one image under one scorer, for the restored output and the raw input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NrRow {
    pub image_id: String,
    pub scorer: String,
    pub restored: Option<f64>,
    pub input: Option<f64>,
    /// Failed images for summary rows, 0 or 1 for image rows.
    pub failures: usize,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NrReport {
    pub rows: Vec<NrRow>,
    /// One row per scorer with `image_id` = `mean`; means skip failed images.
    pub summaries: Vec<NrRow>,
}

impl NrReport {
    /// `image_id,scorer,restored,input,failures,error`; summary rows last.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
        for r in self.rows.iter().chain(&self.summaries) {
            w.serialize(r).map_err(|e| io_err(path, e))?;
        }
        w.flush().map_err(|e| io_err(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
        let all: Vec<NrRow> =
            r.deserialize().collect::<std::result::Result<_, _>>().map_err(|e| malformed(path, e.to_string()))?;
        let (summaries, rows) = all.into_iter().partition(|r| r.image_id == SUMMARY_ID);
        Ok(Self { rows, summaries })
    }

    pub fn summary(&self, scorer: &str) -> Option<&NrRow> {
        self.summaries.iter().find(|s| s.scorer == scorer)
    }
}

/// Scores every image of `images_dir` before and after restoration with each
/// scorer. A failing scorer marks the image for that scorer and removes it
/// from both means.
pub fn evaluate_non_reference(
    restorer: &dyn Restorer,
    images_dir: &Path,
    scorers: &[&dyn QualityScorer],
) -> Result<NrReport> {
    let files = images_in(images_dir)?;
    if files.is_empty() {
        return Err(EvalError::EmptyDirectory(images_dir.to_path_buf()));
    }
    let mut per_scorer: Vec<Vec<NrRow>> = vec![Vec::new(); scorers.len()];
    for path in &files {
        let id = path.file_name().expect("listed file").to_string_lossy().into_owned();
        let input = load_image(path)?;
        let restored = restorer.restore(&input)?;
        for (s, rows) in scorers.iter().zip(per_scorer.iter_mut()) {
            let (r, i) = (s.score(&restored), s.score(&input));
            let error = [&r, &i].iter().filter_map(|x| x.as_ref().err().map(|e| e.to_string())).collect::<Vec<_>>();
            rows.push(NrRow {
                image_id: id.clone(),
                scorer: s.name().to_string(),
                restored: r.ok(),
                input: i.ok(),
                failures: usize::from(!error.is_empty()),
                error: error.join("; "),
            });
        }
    }
    let summaries = scorers
        .iter()
        .zip(&per_scorer)
        .map(|(s, rows)| {
            let ok: Vec<&NrRow> = rows.iter().filter(|r| r.failures == 0).collect();
            let mean = |f: fn(&NrRow) -> Option<f64>| {
                (!ok.is_empty()).then(|| ok.iter().filter_map(|r| f(r)).sum::<f64>() / ok.len() as f64)
            };
            NrRow {
                image_id: SUMMARY_ID.into(),
                scorer: s.name().to_string(),
                restored: mean(|r| r.restored),
                input: mean(|r| r.input),
                failures: rows.len() - ok.len(),
                error: String::new(),
            }
        })
        .collect();
    Ok(NrReport { rows: per_scorer.into_iter().flatten().collect(), summaries })
}

/// Pairs of a `degraded/` + `clean/` directory, sorted by name.
pub fn load_pairs(pairs_dir: &Path) -> Result<Vec<(String, Image, Image)>> {
    let deg_dir = pairs_dir.join("degraded");
    let files = images_in(&deg_dir)?;
    if files.is_empty() {
        return Err(EvalError::EmptyDirectory(deg_dir));
    }
    files
        .into_iter()
        .map(|p| {
            let gt = pairs_dir.join("clean").join(p.file_name().expect("listed file"));
            if !gt.is_file() {
                return Err(EvalError::UnpairedFile(p));
            }
            let id = p.file_name().expect("listed file").to_string_lossy().into_owned();
            Ok((id, load_image(&gt)?, load_image(&p)?))
        })
        .collect()
}
