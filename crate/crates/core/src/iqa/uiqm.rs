//! Underwater image quality measure: a weighted sum of colorfulness (UICM),
//! sharpness (UISM) and contrast (UIConM), evaluated on the 0–255 scale.

use crate::imaging::Image;

pub const UIQM_WEIGHTS: [f64; 3] = [0.0282, 0.2953, 3.5753];
pub const UICM_WEIGHTS: [f64; 2] = [-0.0268, 0.1586];
/// Fraction trimmed from each tail of the opponent-color distributions.
pub const UICM_TRIM: f64 = 0.1;
/// Channel weights combining the per-channel sharpness terms.
pub const UISM_CHANNEL_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];
/// Side of the square blocks used by the sharpness and contrast measures.
pub const UIQM_BLOCK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UiqmComponents {
    pub uicm: f64,
    pub uism: f64,
    pub uiconm: f64,
}

impl UiqmComponents {
    pub fn total(&self) -> f64 {
        UIQM_WEIGHTS[0] * self.uicm + UIQM_WEIGHTS[1] * self.uism + UIQM_WEIGHTS[2] * self.uiconm
    }
}

pub fn uiqm(x: &Image) -> f64 {
    uiqm_components(x).total()
}

pub fn uiqm_components(x: &Image) -> UiqmComponents {
    let (h, w) = x.dims();
    let planes: Vec<Vec<f64>> = (0..3).map(|c| x.plane(c).iter().map(|v| v * 255.0).collect()).collect();
    UiqmComponents {
        uicm: uicm(&planes[0], &planes[1], &planes[2]),
        uism: uism(&planes, h, w),
        uiconm: uiconm(&planes, h, w),
    }
}

fn uicm(r: &[f64], g: &[f64], b: &[f64]) -> f64 {
    let rg: Vec<f64> = r.iter().zip(g).map(|(r, g)| r - g).collect();
    let yb: Vec<f64> = r.iter().zip(g).zip(b).map(|((r, g), b)| (r + g) / 2.0 - b).collect();
    let (mu_rg, var_rg) = trimmed_stats(rg);
    let (mu_yb, var_yb) = trimmed_stats(yb);
    UICM_WEIGHTS[0] * (mu_rg * mu_rg + mu_yb * mu_yb).sqrt() + UICM_WEIGHTS[1] * (var_rg + var_yb).sqrt()
}

/// Asymmetric alpha-trimmed mean and the variance of all samples around it.
fn trimmed_stats(mut v: Vec<f64>) -> (f64, f64) {
    let k = v.len();
    let var_about = |v: &[f64], mu: f64| v.iter().map(|p| (p - mu) * (p - mu)).sum::<f64>() / v.len() as f64;
    v.sort_by(f64::total_cmp);
    let lo = (UICM_TRIM * k as f64).ceil() as usize;
    let hi = (UICM_TRIM * k as f64).floor() as usize;
    let kept = &v[lo..k - hi];
    let mu = kept.iter().sum::<f64>() / kept.len() as f64;
    (mu, var_about(&v, mu))
}

fn uism(planes: &[Vec<f64>], h: usize, w: usize) -> f64 {
    (0..3)
        .map(|c| {
            let edges = sobel_magnitude(&planes[c], h, w);
            let max = edges.iter().cloned().fold(0.0, f64::max);
            let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
            let weighted: Vec<f64> = edges.iter().zip(&planes[c]).map(|(e, p)| e * scale * p).collect();
            UISM_CHANNEL_WEIGHTS[c] * eme(&weighted, h, w)
        })
        .sum()
}

/// Sobel gradient magnitude with mirror (half-sample symmetric) boundary.
fn sobel_magnitude(p: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| p[reflect(y, h) * w + reflect(x, w)];
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let dy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            let dx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            out.push(dx.hypot(dy));
        }
    }
    out
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Visits the complete `UIQM_BLOCK`-sided blocks; partial edge blocks are dropped.
fn for_blocks(h: usize, w: usize, mut f: impl FnMut(&mut dyn Iterator<Item = usize>)) -> usize {
    let (k1, k2) = (w / UIQM_BLOCK, h / UIQM_BLOCK);
    for by in 0..k2 {
        for bx in 0..k1 {
            let mut idx = (0..UIQM_BLOCK)
                .flat_map(move |dy| (0..UIQM_BLOCK).map(move |dx| (by * UIQM_BLOCK + dy) * w + bx * UIQM_BLOCK + dx));
            f(&mut idx);
        }
    }
    k1 * k2
}

/// Measure of enhancement: `2/(k1·k2) · Σ ln(max/min)` over blocks, skipping blocks with a zero extreme.
fn eme(p: &[f64], h: usize, w: usize) -> f64 {
    let mut acc = 0.0;
    let blocks = for_blocks(h, w, |idx| {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in idx {
            lo = lo.min(p[i]);
            hi = hi.max(p[i]);
        }
        if lo > 0.0 && hi > 0.0 {
            acc += (hi / lo).ln();
        }
    });
    if blocks == 0 {
        0.0
    } else {
        2.0 / blocks as f64 * acc
    }
}

/// Log-AMEE contrast: `−1/(k1·k2) · Σ (Δ/Σ)·ln(Δ/Σ)` with block extremes taken over all channels.
fn uiconm(planes: &[Vec<f64>], h: usize, w: usize) -> f64 {
    let mut acc = 0.0;
    let blocks = for_blocks(h, w, |idx| {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in idx {
            for p in planes {
                lo = lo.min(p[i]);
                hi = hi.max(p[i]);
            }
        }
        let (top, bot) = (hi - lo, hi + lo);
        if top > 0.0 && bot > 0.0 {
            let r = top / bot;
            acc += r * r.ln();
        }
    });
    if blocks == 0 {
        0.0
    } else {
        -acc / blocks as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_boundary() {
        assert_eq!([reflect(-1, 4), reflect(-2, 4), reflect(4, 4), reflect(5, 4), reflect(2, 4)], [0, 1, 3, 2, 2]);
    }
}
