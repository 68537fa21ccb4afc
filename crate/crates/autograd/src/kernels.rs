//! Forward and backward kernels for the spatial operators.

/// `c = a·b + beta·c` with optional transposition of either operand.
/// `a` is `m×k` (stored `k×m` when `trans_a`), `b` is `k×n` (stored `n×k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds checked above; strides describe the dense layouts of the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub fn out_size(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }

    fn is_pointwise(&self, kh: usize, kw: usize) -> bool {
        kh == 1 && kw == 1 && self.stride == 1 && self.padding == 0
    }
}

pub(crate) struct ConvDims {
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub geo: ConvGeometry,
}

impl ConvDims {
    fn k(&self) -> usize {
        self.ci * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f64], d: &ConvDims, cols: &mut [f64]) {
    let p = d.p();
    let g = d.geo;
    for ci in 0..d.ci {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (ci * d.kh + ki) * d.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..d.ho {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.padding as isize;
                    let seg = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize {
                        seg.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, v) in seg.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj * g.dilation) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= d.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], d: &ConvDims, dx: &mut [f64]) {
    let p = d.p();
    let g = d.geo;
    for ci in 0..d.ci {
        let plane = &mut dx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (ci * d.kh + ki) * d.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..d.ho {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.wo {
                        let ix = (ox * g.stride + kj * g.dilation) as isize - g.padding as isize;
                        if ix >= 0 && ix < d.w as isize {
                            dst[ix as usize] += src[oy * d.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    x: &[f64],
    n: usize,
    weight: &[f64],
    co: usize,
    bias: Option<&[f64]>,
    d: &ConvDims,
) -> Vec<f64> {
    let (k, p) = (d.k(), d.p());
    let in_len = d.ci * d.h * d.w;
    let mut out = vec![0.0; n * co * p];
    let pointwise = d.geo.is_pointwise(d.kh, d.kw);
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; k * p] };
    for s in 0..n {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let os = &mut out[s * co * p..(s + 1) * co * p];
        let b: &[f64] = if pointwise {
            xs
        } else {
            im2col(xs, d, &mut cols);
            &cols
        };
        gemm(co, k, p, weight, false, b, false, 0.0, os);
        if let Some(bias) = bias {
            for (c, bv) in bias.iter().enumerate() {
                os[c * p..(c + 1) * p].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Accumulates conv gradients into whichever of `dx`, `dw`, `db` are present.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    n: usize,
    weight: &[f64],
    co: usize,
    grad: &[f64],
    d: &ConvDims,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let (k, p) = (d.k(), d.p());
    let in_len = d.ci * d.h * d.w;
    let pointwise = d.geo.is_pointwise(d.kh, d.kw);
    let mut cols = vec![0.0; k * p];
    for s in 0..n {
        let gs = &grad[s * co * p..(s + 1) * co * p];
        if let Some(dw) = dw.as_deref_mut() {
            let xs = &x[s * in_len..(s + 1) * in_len];
            let b: &[f64] = if pointwise {
                xs
            } else {
                im2col(xs, d, &mut cols);
                &cols
            };
            // dW[co,k] += g[co,p] · cols[k,p]^T
            gemm(co, p, k, gs, false, b, true, 1.0, dw);
        }
        if let Some(db) = db.as_deref_mut() {
            for (c, acc) in db.iter_mut().enumerate() {
                *acc += gs[c * p..(c + 1) * p].iter().sum::<f64>();
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxs = &mut dx[s * in_len..(s + 1) * in_len];
            if pointwise {
                gemm(k, co, p, weight, true, gs, false, 1.0, dxs);
            } else {
                gemm(k, co, p, weight, true, gs, false, 0.0, &mut cols);
                col2im(&cols, d, dxs);
            }
        }
    }
}

#[inline]
fn pixel(plane: &[f64], h: usize, w: usize, y: isize, x: isize) -> f64 {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        0.0
    } else {
        plane[y as usize * w + x as usize]
    }
}

struct Bilinear {
    y0: isize,
    x0: isize,
    ly: f64,
    lx: f64,
}

impl Bilinear {
    fn at(py: f64, px: f64) -> Self {
        let fy = py.floor();
        let fx = px.floor();
        Self { y0: fy as isize, x0: fx as isize, ly: py - fy, lx: px - fx }
    }

    fn sample(&self, plane: &[f64], h: usize, w: usize) -> f64 {
        let v00 = pixel(plane, h, w, self.y0, self.x0);
        let v01 = pixel(plane, h, w, self.y0, self.x0 + 1);
        let v10 = pixel(plane, h, w, self.y0 + 1, self.x0);
        let v11 = pixel(plane, h, w, self.y0 + 1, self.x0 + 1);
        (1.0 - self.ly) * ((1.0 - self.lx) * v00 + self.lx * v01)
            + self.ly * ((1.0 - self.lx) * v10 + self.lx * v11)
    }

    /// Partial derivatives of the sample w.r.t. (py, px).
    fn slope(&self, plane: &[f64], h: usize, w: usize) -> (f64, f64) {
        let v00 = pixel(plane, h, w, self.y0, self.x0);
        let v01 = pixel(plane, h, w, self.y0, self.x0 + 1);
        let v10 = pixel(plane, h, w, self.y0 + 1, self.x0);
        let v11 = pixel(plane, h, w, self.y0 + 1, self.x0 + 1);
        let dy = (1.0 - self.lx) * (v10 - v00) + self.lx * (v11 - v01);
        let dx = (1.0 - self.ly) * (v01 - v00) + self.ly * (v11 - v10);
        (dy, dx)
    }

    fn scatter(&self, plane: &mut [f64], h: usize, w: usize, g: f64) {
        let corners = [
            (self.y0, self.x0, (1.0 - self.ly) * (1.0 - self.lx)),
            (self.y0, self.x0 + 1, (1.0 - self.ly) * self.lx),
            (self.y0 + 1, self.x0, self.ly * (1.0 - self.lx)),
            (self.y0 + 1, self.x0 + 1, self.ly * self.lx),
        ];
        for (y, x, wt) in corners {
            if y >= 0 && x >= 0 && y < h as isize && x < w as isize {
                plane[y as usize * w + x as usize] += g * wt;
            }
        }
    }
}

/// Sampling position of kernel tap (ki, kj) for output pixel (oy, ox) of a
/// stride-1 deformable convolution. Offsets are laid out as `[2·taps, ho, wo]`
/// with (dy, dx) interleaved per tap.
fn deform_position(d: &ConvDims, offset: &[f64], tap: usize, ki: usize, kj: usize, oy: usize, ox: usize) -> (f64, f64) {
    let p = d.p();
    let o = oy * d.wo + ox;
    let dy = offset[(2 * tap) * p + o];
    let dx = offset[(2 * tap + 1) * p + o];
    let py = (oy + ki * d.geo.dilation) as f64 - d.geo.padding as f64 + dy;
    let px = (ox + kj * d.geo.dilation) as f64 - d.geo.padding as f64 + dx;
    (py, px)
}

fn deform_im2col(x: &[f64], offset: &[f64], d: &ConvDims, cols: &mut [f64]) {
    let p = d.p();
    for ci in 0..d.ci {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let tap = ki * d.kw + kj;
                let row = ci * d.kh * d.kw + tap;
                for oy in 0..d.ho {
                    for ox in 0..d.wo {
                        let (py, px) = deform_position(d, offset, tap, ki, kj, oy, ox);
                        cols[row * p + oy * d.wo + ox] = Bilinear::at(py, px).sample(plane, d.h, d.w);
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn deform_conv_forward(
    x: &[f64],
    offset: &[f64],
    n: usize,
    weight: &[f64],
    co: usize,
    bias: Option<&[f64]>,
    d: &ConvDims,
) -> Vec<f64> {
    let (k, p) = (d.k(), d.p());
    let in_len = d.ci * d.h * d.w;
    let off_len = 2 * d.kh * d.kw * p;
    let mut out = vec![0.0; n * co * p];
    let mut cols = vec![0.0; k * p];
    for s in 0..n {
        deform_im2col(&x[s * in_len..(s + 1) * in_len], &offset[s * off_len..(s + 1) * off_len], d, &mut cols);
        let os = &mut out[s * co * p..(s + 1) * co * p];
        gemm(co, k, p, weight, false, &cols, false, 0.0, os);
        if let Some(bias) = bias {
            for (c, bv) in bias.iter().enumerate() {
                os[c * p..(c + 1) * p].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn deform_conv_backward(
    x: &[f64],
    offset: &[f64],
    n: usize,
    weight: &[f64],
    co: usize,
    grad: &[f64],
    d: &ConvDims,
    mut dx: Option<&mut [f64]>,
    mut doff: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let (k, p) = (d.k(), d.p());
    let in_len = d.ci * d.h * d.w;
    let off_len = 2 * d.kh * d.kw * p;
    let mut cols = vec![0.0; k * p];
    let mut dcols = vec![0.0; k * p];
    for s in 0..n {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let offs = &offset[s * off_len..(s + 1) * off_len];
        let gs = &grad[s * co * p..(s + 1) * co * p];
        if let Some(dw) = dw.as_deref_mut() {
            deform_im2col(xs, offs, d, &mut cols);
            gemm(co, p, k, gs, false, &cols, true, 1.0, dw);
        }
        if let Some(db) = db.as_deref_mut() {
            for (c, acc) in db.iter_mut().enumerate() {
                *acc += gs[c * p..(c + 1) * p].iter().sum::<f64>();
            }
        }
        if dx.is_none() && doff.is_none() {
            continue;
        }
        gemm(k, co, p, weight, true, gs, false, 0.0, &mut dcols);
        for ci in 0..d.ci {
            let plane = &xs[ci * d.h * d.w..(ci + 1) * d.h * d.w];
            for ki in 0..d.kh {
                for kj in 0..d.kw {
                    let tap = ki * d.kw + kj;
                    let row = ci * d.kh * d.kw + tap;
                    for oy in 0..d.ho {
                        for ox in 0..d.wo {
                            let o = oy * d.wo + ox;
                            let g = dcols[row * p + o];
                            if g == 0.0 {
                                continue;
                            }
                            let (py, px) = deform_position(d, offs, tap, ki, kj, oy, ox);
                            let bl = Bilinear::at(py, px);
                            if let Some(dx) = dx.as_deref_mut() {
                                let dplane = &mut dx[s * in_len + ci * d.h * d.w..s * in_len + (ci + 1) * d.h * d.w];
                                bl.scatter(dplane, d.h, d.w, g);
                            }
                            if let Some(doff) = doff.as_deref_mut() {
                                let (sy, sx) = bl.slope(plane, d.h, d.w);
                                doff[s * off_len + (2 * tap) * p + o] += g * sy;
                                doff[s * off_len + (2 * tap + 1) * p + o] += g * sx;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Corner-aligned bilinear sampling table for one axis.
pub(crate) fn resize_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            if src == dst {
                return (i, i, 0.0);
            }
            let pos = if dst == 1 { 0.0 } else { (i * (src - 1)) as f64 / (dst - 1) as f64 };
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

pub(crate) fn resize_forward(x: &[f64], planes: usize, h: usize, w: usize, ho: usize, wo: usize) -> Vec<f64> {
    let ry = resize_axis(h, ho);
    let rx = resize_axis(w, wo);
    let mut out = vec![0.0; planes * ho * wo];
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * ho * wo..(pl + 1) * ho * wo];
        for (oy, &(y0, y1, fy)) in ry.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in rx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * wo + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub(crate) fn resize_backward(grad: &[f64], planes: usize, h: usize, w: usize, ho: usize, wo: usize, dx: &mut [f64]) {
    let ry = resize_axis(h, ho);
    let rx = resize_axis(w, wo);
    for pl in 0..planes {
        let g = &grad[pl * ho * wo..(pl + 1) * ho * wo];
        let d = &mut dx[pl * h * w..(pl + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ry.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in rx.iter().enumerate() {
                let gv = g[oy * wo + ox];
                d[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                d[y0 * w + x1] += gv * (1.0 - fy) * fx;
                d[y1 * w + x0] += gv * fy * (1.0 - fx);
                d[y1 * w + x1] += gv * fy * fx;
            }
        }
    }
}

/// 3×3 mean filter, stride 1, zero padding, divisor 9.
pub(crate) fn box3_forward(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; planes * h * w];
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * h * w..(pl + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        acc += pixel(src, h, w, y as isize + dy, xx as isize + dx);
                    }
                }
                dst[y * w + xx] = acc / 9.0;
            }
        }
    }
    out
}

pub(crate) fn box3_backward(grad: &[f64], planes: usize, h: usize, w: usize, dx: &mut [f64]) {
    // The zero-padded mean filter is self-adjoint.
    let back = box3_forward(grad, planes, h, w);
    dx.iter_mut().zip(back).for_each(|(d, g)| *d += g);
}

/// 2×2 max pooling with stride 2; returns output and flat argmax indices.
pub(crate) fn maxpool2_forward(x: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * ho * wo];
    let mut arg = vec![0usize; planes * ho * wo];
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > best {
                        best = x[i];
                        best_i = i;
                    }
                }
                let o = pl * ho * wo + oy * wo + ox;
                out[o] = best;
                arg[o] = best_i;
            }
        }
    }
    (out, arg)
}
