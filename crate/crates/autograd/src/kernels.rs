//! Raw loops behind the graph operators. Everything here works on plain
//! slices in NCHW layout.

use crate::element::gemm;
use crate::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }
}

/// Unfolds `x` into a `[C·KH·KW, N·OH·OW]` matrix.
fn im2col<T: Element>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncols = g.cols();
    let plane = g.height * g.width;
    for c in 0..g.in_ch {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let src = &x[(n * g.in_ch + c) * plane..(n * g.in_ch + c + 1) * plane];
                    let base = n * oh * ow;
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        let out = &mut dst[base + oy * ow..base + (oy + 1) * ow];
                        if iy < 0 || iy >= g.height as isize {
                            out.fill(T::zero());
                            continue;
                        }
                        let srow = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            *o = if ix < 0 || ix >= g.width as isize {
                                T::zero()
                            } else {
                                srow[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into `dx` (accumulating).
fn col2im<T: Element>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncols = g.cols();
    let plane = g.height * g.width;
    for c in 0..g.in_ch {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let dst = &mut dx[(n * g.in_ch + c) * plane..(n * g.in_ch + c + 1) * plane];
                    let base = n * oh * ow;
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.width as isize {
                                drow[ix as usize] = drow[ix as usize] + src[base + oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation; returns `[N, O, OH, OW]`.
pub fn conv2d_forward<T: Element>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (patch, ncols) = (g.patch(), g.cols());
    let mut cols = vec![T::zero(); patch * ncols];
    im2col(g, x, &mut cols);
    let mut ymat = vec![T::zero(); g.out_ch * ncols];
    gemm(g.out_ch, patch, ncols, w, false, &cols, false, T::zero(), &mut ymat);
    let hw = g.out_h() * g.out_w();
    let mut y = vec![T::zero(); ymat.len()];
    for o in 0..g.out_ch {
        let b = bias.map_or(T::zero(), |b| b[o]);
        for n in 0..g.batch {
            let src = &ymat[o * ncols + n * hw..o * ncols + (n + 1) * hw];
            let dst = &mut y[(n * g.out_ch + o) * hw..(n * g.out_ch + o + 1) * hw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + b;
            }
        }
    }
    y
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> ConvGrads<T> {
    let (patch, ncols) = (g.patch(), g.cols());
    let hw = g.out_h() * g.out_w();
    // dy: [N, O, HW] -> [O, N·HW]
    let mut dymat = vec![T::zero(); g.out_ch * ncols];
    for n in 0..g.batch {
        for o in 0..g.out_ch {
            dymat[o * ncols + n * hw..o * ncols + (n + 1) * hw]
                .copy_from_slice(&dy[(n * g.out_ch + o) * hw..(n * g.out_ch + o + 1) * hw]);
        }
    }
    let db = need_b.then(|| {
        (0..g.out_ch).map(|o| dymat[o * ncols..(o + 1) * ncols].iter().copied().sum()).collect()
    });
    let dw = need_w.then(|| {
        let mut cols = vec![T::zero(); patch * ncols];
        im2col(g, x, &mut cols);
        let mut dw = vec![T::zero(); g.out_ch * patch];
        gemm(g.out_ch, ncols, patch, &dymat, false, &cols, true, T::zero(), &mut dw);
        dw
    });
    let dx = need_x.then(|| {
        let mut dcols = vec![T::zero(); patch * ncols];
        gemm(patch, g.out_ch, ncols, w, true, &dymat, false, T::zero(), &mut dcols);
        let mut dx = vec![T::zero(); x.len()];
        col2im(g, &dcols, &mut dx);
        dx
    });
    ConvGrads { dx, dw, db }
}

/// Nearest-neighbour upsampling by an integer factor on `[N·C, H, W]` planes.
pub fn upsample_nearest<T: Element>(x: &[T], planes: usize, h: usize, w: usize, s: usize) -> Vec<T> {
    let (oh, ow) = (h * s, w * s);
    let mut y = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let srow = &src[(oy / s) * w..(oy / s + 1) * w];
            for ox in 0..ow {
                dst[oy * ow + ox] = srow[ox / s];
            }
        }
    }
    y
}

pub fn upsample_nearest_backward<T: Element>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    s: usize,
) -> Vec<T> {
    let (oh, ow) = (h * s, w * s);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let i = (oy / s) * w + ox / s;
                dst[i] = dst[i] + src[oy * ow + ox];
            }
        }
    }
    dx
}

/// Non-overlapping `k×k` average pooling on `[N·C, H, W]` planes.
pub fn avg_pool<T: Element>(x: &[T], planes: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (oh, ow) = (h / k, w / k);
    let scale = T::one() / T::lit((k * k) as f64);
    let mut y = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for dy in 0..k {
                    for dx in 0..k {
                        acc = acc + src[(oy * k + dy) * w + ox * k + dx];
                    }
                }
                y[(p * oh + oy) * ow + ox] = acc * scale;
            }
        }
    }
    y
}

pub fn avg_pool_backward<T: Element>(dy: &[T], planes: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (oh, ow) = (h / k, w / k);
    let scale = T::one() / T::lit((k * k) as f64);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dy[(p * oh + oy) * ow + ox] * scale;
                for dy_ in 0..k {
                    for dx_ in 0..k {
                        dx[p * h * w + (oy * k + dy_) * w + ox * k + dx_] = g;
                    }
                }
            }
        }
    }
    dx
}
