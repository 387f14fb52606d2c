//! Raw row-major compute kernels shared by forward and backward passes.
//!
//! Every kernel accumulates in a fixed loop order so results are bit-identical
//! across runs.

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Dot product with a fixed lane-split summation order, so it vectorises
/// while staying deterministic.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    const LANES: usize = 8;
    let mut acc = [0.0; LANES];
    let (ac, bc) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ar.iter().zip(br) {
        tail += x * y;
    }
    let mut total = 0.0;
    for v in acc {
        total += v;
    }
    total + tail
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Geometry of a causal dilated 1-D convolution over `[channels × time]` data.
#[derive(Clone, Copy, Debug)]
pub struct Conv1dGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub time: usize,
    pub dilation: usize,
}

impl Conv1dGeom {
    /// Tap `i` reads `x[t - lag(i)]`; the last tap sees the current step.
    #[inline]
    fn lag(&self, i: usize) -> usize {
        (self.kernel - 1 - i) * self.dilation
    }
}

pub fn conv1d_causal(x: &[f64], w: &[f64], g: Conv1dGeom) -> Vec<f64> {
    let t_len = g.time;
    let mut y = vec![0.0; g.c_out * t_len];
    for o in 0..g.c_out {
        let yrow = &mut y[o * t_len..(o + 1) * t_len];
        for c in 0..g.c_in {
            let xrow = &x[c * t_len..(c + 1) * t_len];
            for i in 0..g.kernel {
                let wv = w[(o * g.c_in + c) * g.kernel + i];
                let lag = g.lag(i);
                if lag >= t_len {
                    continue;
                }
                for (yv, &xv) in yrow[lag..].iter_mut().zip(&xrow[..t_len - lag]) {
                    *yv += wv * xv;
                }
            }
        }
    }
    y
}

/// Returns `(grad_x, grad_w)` for [`conv1d_causal`].
pub fn conv1d_causal_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    g: Conv1dGeom,
) -> (Vec<f64>, Vec<f64>) {
    let t_len = g.time;
    let mut gx = vec![0.0; g.c_in * t_len];
    let mut gw = vec![0.0; w.len()];
    for o in 0..g.c_out {
        let grow = &gy[o * t_len..(o + 1) * t_len];
        for c in 0..g.c_in {
            let xrow = &x[c * t_len..(c + 1) * t_len];
            for i in 0..g.kernel {
                let widx = (o * g.c_in + c) * g.kernel + i;
                let lag = g.lag(i);
                if lag >= t_len {
                    continue;
                }
                let wv = w[widx];
                let gsrc = &grow[lag..];
                gw[widx] += dot(gsrc, &xrow[..t_len - lag]);
                let gxrow = &mut gx[c * t_len..c * t_len + t_len - lag];
                for (gxv, &gv) in gxrow.iter_mut().zip(gsrc) {
                    *gxv += wv * gv;
                }
            }
        }
    }
    (gx, gw)
}

/// Geometry of a stride-1 "same" 2-D convolution over `[N × C × H × W]` data.
#[derive(Clone, Copy, Debug)]
pub struct Conv2dGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
}

impl Conv2dGeom {
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Valid output range along one axis for a kernel offset `delta`.
    #[inline]
    fn span(len: usize, delta: isize) -> (usize, usize) {
        let lo = (-delta).max(0) as usize;
        let hi = (len as isize - delta.max(0)).max(0) as usize;
        (lo, hi.max(lo))
    }

    /// Visits every (patch row, output row, x range, source offset) of the
    /// zero-padded unfolding of one image.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let (h, w) = (self.height, self.width);
        let (ph, pw) = ((self.kh / 2) as isize, (self.kw / 2) as isize);
        for c in 0..self.c_in {
            for ky in 0..self.kh {
                let dy = ky as isize - ph;
                let (ylo, yhi) = Conv2dGeom::span(h, dy);
                for kx in 0..self.kw {
                    let dx = kx as isize - pw;
                    let (xlo, xhi) = Conv2dGeom::span(w, dx);
                    let row = (c * self.kh + ky) * self.kw + kx;
                    for yy in ylo..yhi {
                        let src = c * h * w + (yy as isize + dy) as usize * w;
                        let src_lo = (src as isize + xlo as isize + dx) as usize;
                        f(row, yy * w + xlo, yy * w + xhi, src_lo, 0);
                    }
                }
            }
        }
    }

    /// `[patch × plane]` unfolding of one `[C × H × W]` image.
    fn im2col(&self, image: &[f64], col: &mut [f64]) {
        col.fill(0.0);
        let plane = self.plane();
        self.for_each_run(|row, lo, hi, src, _| {
            col[row * plane + lo..row * plane + hi].copy_from_slice(&image[src..src + hi - lo]);
        });
    }

    /// Adjoint of [`Conv2dGeom::im2col`]: scatter-adds `col` into `image`.
    fn col2im(&self, col: &[f64], image: &mut [f64]) {
        let plane = self.plane();
        self.for_each_run(|row, lo, hi, src, _| {
            for (d, s) in image[src..src + hi - lo].iter_mut().zip(&col[row * plane + lo..row * plane + hi]) {
                *d += s;
            }
        });
    }
}

pub fn conv2d_same(x: &[f64], w: &[f64], g: Conv2dGeom) -> Vec<f64> {
    let (plane, patch) = (g.plane(), g.patch());
    let mut col = vec![0.0; patch * plane];
    let mut y = Vec::with_capacity(g.batch * g.c_out * plane);
    for n in 0..g.batch {
        g.im2col(&x[n * g.c_in * plane..(n + 1) * g.c_in * plane], &mut col);
        y.extend(matmul(w, &col, g.c_out, patch, plane));
    }
    y
}

/// Returns `(grad_x, grad_w)` for [`conv2d_same`]. `grad_x` is skipped when
/// `need_x` is false.
pub fn conv2d_same_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    g: Conv2dGeom,
    need_x: bool,
) -> (Option<Vec<f64>>, Vec<f64>) {
    let (plane, patch) = (g.plane(), g.patch());
    let image = g.c_in * plane;
    let mut col = vec![0.0; patch * plane];
    let mut gx = need_x.then(|| vec![0.0; x.len()]);
    let mut gw = vec![0.0; w.len()];
    for n in 0..g.batch {
        let gyn = &gy[n * g.c_out * plane..(n + 1) * g.c_out * plane];
        g.im2col(&x[n * image..(n + 1) * image], &mut col);
        for (acc, v) in gw.iter_mut().zip(matmul_nt(gyn, &col, g.c_out, plane, patch)) {
            *acc += v;
        }
        if let Some(gx) = gx.as_mut() {
            let gcol = matmul_tn(w, gyn, g.c_out, patch, plane);
            g.col2im(&gcol, &mut gx[n * image..(n + 1) * image]);
        }
    }
    (gx, gw)
}

/// 2×2 max pooling with stride 2 over `[planes × H × W]`. Returns the pooled
/// values and, for each output, the flat input index of the selected maximum
/// (first maximum on ties).
pub fn maxpool2(x: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + (2 * oy) * w + 2 * ox;
                let mut best = x[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}
