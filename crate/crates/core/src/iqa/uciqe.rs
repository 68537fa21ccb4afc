//! Underwater color image quality evaluation: chroma spread, luminance
//! contrast and mean saturation in CIELab.

use crate::imaging::Image;

pub const UCIQE_WEIGHTS: [f64; 3] = [0.4680, 0.2745, 0.2576];
/// Fraction of pixels in each tail of the luminance contrast term.
pub const UCIQE_TAIL: f64 = 0.01;

/// sRGB (D65) to XYZ.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UciqeComponents {
    pub chroma_std: f64,
    pub luminance_contrast: f64,
    pub mean_saturation: f64,
}

impl UciqeComponents {
    pub fn total(&self) -> f64 {
        UCIQE_WEIGHTS[0] * self.chroma_std
            + UCIQE_WEIGHTS[1] * self.luminance_contrast
            + UCIQE_WEIGHTS[2] * self.mean_saturation
    }
}

pub fn uciqe(x: &Image) -> f64 {
    uciqe_components(x).total()
}

/// Components on the normalized scale: L and chroma divided by 100.
pub fn uciqe_components(x: &Image) -> UciqeComponents {
    let n = x.height() * x.width();
    let (r, g, b) = (x.plane(0), x.plane(1), x.plane(2));
    let mut lum = Vec::with_capacity(n);
    let mut chroma = Vec::with_capacity(n);
    for i in 0..n {
        let (l, a, bb) = srgb_to_lab(r[i], g[i], b[i]);
        lum.push(l / 100.0);
        chroma.push(a.hypot(bb) / 100.0);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mu_c = mean(&chroma);
    let chroma_std = (chroma.iter().map(|c| (c - mu_c) * (c - mu_c)).sum::<f64>() / n as f64).sqrt();

    let saturation: Vec<f64> = lum.iter().zip(&chroma).map(|(l, c)| if *l > 0.0 { c / l } else { 0.0 }).collect();

    let mut sorted = lum;
    sorted.sort_by(f64::total_cmp);
    let tail = ((UCIQE_TAIL * n as f64).round() as usize).max(1);
    let luminance_contrast = mean(&sorted[n - tail..]) - mean(&sorted[..tail]);

    UciqeComponents { chroma_std, luminance_contrast, mean_saturation: mean(&saturation) }
}

fn srgb_to_lab(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let lin = |v: f64| if v <= 0.04045 { v / 12.92 } else { ((v + 0.055) / 1.055).powf(2.4) };
    let rgb = [lin(r), lin(g), lin(b)];
    let xyz: Vec<f64> = RGB_TO_XYZ.iter().map(|row| row.iter().zip(&rgb).map(|(m, c)| m * c).sum()).collect();
    // Reference white is the image of RGB (1, 1, 1) so neutral grays map to a = b = 0.
    let white: Vec<f64> = RGB_TO_XYZ.iter().map(|row| row.iter().sum()).collect();
    let f = |t: f64| {
        const D: f64 = 6.0 / 29.0;
        if t > D * D * D {
            t.cbrt()
        } else {
            t / (3.0 * D * D) + 4.0 / 29.0
        }
    };
    let (fx, fy, fz) = (f(xyz[0] / white[0]), f(xyz[1] / white[1]), f(xyz[2] / white[2]));
    (116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz))
}
