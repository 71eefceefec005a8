//! Raw numeric kernels behind the autodiff graph: im2col/GEMM convolution
//! (forward, input-gradient, kernel-gradient), batch normalization and
//! softmax cross-entropy. Transposed convolution reuses the convolution
//! trio with the roles of input and output swapped, so the adjoint
//! relation holds by construction.
//!
//! Batches are split into chunks processed in parallel; every chunk writes
//! a disjoint output slice and partial reductions are combined in index
//! order, so results are bitwise reproducible run to run.

use crate::tensor::Scalar;
use crate::{Error, Result};
use rayon::prelude::*;

/// Row-major C(m x n) = alpha * op(A) * op(B) + beta * C.
/// `a_trans`/`b_trans` select the transposed view of the stored buffer:
/// op(A) is m x k, stored either m x k (normal) or k x m (transposed).
pub fn gemm_ex<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: S,
    a: &[S],
    a_trans: bool,
    b: &[S],
    b_trans: bool,
    beta: S,
    c: &mut [S],
) {
    assert_eq!(a.len(), m * k, "gemm_ex: A buffer size");
    assert_eq!(b.len(), k * n, "gemm_ex: B buffer size");
    assert_eq!(c.len(), m * n, "gemm_ex: C buffer size");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    S::gemm_strided(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

/// Shape bookkeeping for one 2-D convolution. `oh`/`ow` are derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        n: usize,
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Shape("conv stride must be positive".into()));
        }
        if k == 0 || c_in == 0 || c_out == 0 || n == 0 {
            return Err(Error::Shape("conv dimensions must be positive".into()));
        }
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::Shape(format!(
                "conv kernel {k}x{k} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let oh = (h + 2 * padding - k) / stride + 1;
        let ow = (w + 2 * padding - k) / stride + 1;
        Ok(ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            padding,
            oh,
            ow,
        })
    }

    fn in_img(&self) -> usize {
        self.c_in * self.h * self.w
    }
    fn out_img(&self) -> usize {
        self.c_out * self.oh * self.ow
    }
    /// Rows of the im2col matrix.
    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

/// Images per parallel chunk. Small feature maps get wide chunks so the
/// GEMM keeps a useful inner width; large maps split into enough chunks
/// to feed the pool while keeping im2col buffers small.
fn batch_chunk(n: usize, out_plane: usize) -> usize {
    let t = rayon::current_num_threads().max(1);
    let by_width = 512usize.div_ceil(out_plane.max(1));
    let by_threads = n.div_ceil(2 * t);
    by_width.max(by_threads).min(n).max(1)
}

/// Valid output-column range [lo, hi) and source start for one kernel
/// column offset: ox in [lo, hi) reads x column ox*stride + kx - padding.
fn valid_ox_range(g: &ConvGeom, kx: usize) -> (usize, usize, usize) {
    let lo = if g.padding > kx {
        (g.padding - kx).div_ceil(g.stride)
    } else {
        0
    };
    let lim = g.w + g.padding;
    let hi = if kx >= lim { 0 } else { ((lim - kx - 1) / g.stride + 1).min(g.ow) };
    let lo = lo.min(hi);
    let start = lo * g.stride + kx - g.padding.min(lo * g.stride + kx);
    // start is only meaningful when hi > lo; recompute exactly then.
    let start = if hi > lo { lo * g.stride + kx - g.padding } else { start };
    (lo, hi, start)
}

/// col(patch_len x b*oh*ow) for a chunk of `b` images in NCHW layout.
fn im2col<S: Scalar>(x: &[S], b: usize, g: &ConvGeom, col: &mut [S]) {
    let bp = b * g.oh * g.ow;
    debug_assert_eq!(col.len(), g.patch_len() * bp);
    for ci in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * bp..(row + 1) * bp];
                let (lo, hi, start) = valid_ox_range(g, kx);
                let mut p = 0usize;
                for img in 0..b {
                    let xin = &x[img * g.in_img() + ci * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        let drow = &mut dst[p..p + g.ow];
                        p += g.ow;
                        if iy < 0 || iy >= g.h as isize {
                            for v in drow.iter_mut() {
                                *v = S::ZERO;
                            }
                            continue;
                        }
                        for v in drow[..lo].iter_mut() {
                            *v = S::ZERO;
                        }
                        for v in drow[hi..].iter_mut() {
                            *v = S::ZERO;
                        }
                        if hi > lo {
                            let src_row = &xin[iy as usize * g.w..][..g.w];
                            if g.stride == 1 {
                                drow[lo..hi].copy_from_slice(&src_row[start..start + (hi - lo)]);
                            } else {
                                let it = src_row[start..].iter().step_by(g.stride);
                                for (d, s) in drow[lo..hi].iter_mut().zip(it) {
                                    *d = *s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatter-add columns back into image layout.
fn col2im_add<S: Scalar>(col: &[S], b: usize, g: &ConvGeom, x: &mut [S]) {
    let bp = b * g.oh * g.ow;
    debug_assert_eq!(col.len(), g.patch_len() * bp);
    for ci in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * bp..(row + 1) * bp];
                let (lo, hi, start) = valid_ox_range(g, kx);
                let mut p = 0usize;
                for img in 0..b {
                    let base = img * g.in_img() + ci * g.h * g.w;
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        let srow = &src[p..p + g.ow];
                        p += g.ow;
                        if iy < 0 || iy >= g.h as isize || hi <= lo {
                            continue;
                        }
                        let dst_row = &mut x[base + iy as usize * g.w..][..g.w];
                        if g.stride == 1 {
                            for (d, s) in dst_row[start..start + (hi - lo)].iter_mut().zip(&srow[lo..hi]) {
                                *d += *s;
                            }
                        } else {
                            let it = dst_row[start..].iter_mut().step_by(g.stride);
                            for (d, s) in it.zip(&srow[lo..hi]) {
                                *d += *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// NCHW chunk -> (c_out x b*oh*ow) channel-major matrix.
fn gather_channel_major<S: Scalar>(y: &[S], b: usize, c: usize, plane: usize, out: &mut [S]) {
    for img in 0..b {
        for ch in 0..c {
            let src = &y[(img * c + ch) * plane..(img * c + ch + 1) * plane];
            out[ch * b * plane + img * plane..ch * b * plane + (img + 1) * plane].copy_from_slice(src);
        }
    }
}

/// Inverse of `gather_channel_major`, optionally adding a per-channel bias.
fn scatter_channel_major<S: Scalar>(m: &[S], b: usize, c: usize, plane: usize, bias: Option<&[S]>, y: &mut [S]) {
    for img in 0..b {
        for ch in 0..c {
            let src = &m[ch * b * plane + img * plane..ch * b * plane + (img + 1) * plane];
            let dst = &mut y[(img * c + ch) * plane..(img * c + ch + 1) * plane];
            match bias {
                Some(bs) => {
                    let bv = bs[ch];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = *s + bv;
                    }
                }
                None => dst.copy_from_slice(src),
            }
        }
    }
}

/// Convolution forward. `kernel` is (c_out, c_in, k, k); `x` is NCHW.
pub fn conv2d_forward<S: Scalar>(x: &[S], kernel: &[S], bias: Option<&[S]>, g: &ConvGeom) -> Vec<S> {
    assert_eq!(x.len(), g.n * g.in_img());
    assert_eq!(kernel.len(), g.c_out * g.patch_len());
    let mut out = vec![S::ZERO; g.n * g.out_img()];
    let plane = g.oh * g.ow;
    let chunk = batch_chunk(g.n, plane);
    out.par_chunks_mut(chunk * g.out_img())
        .zip(x.par_chunks(chunk * g.in_img()))
        .for_each(|(oc, xc)| {
            let b = oc.len() / g.out_img();
            let bp = b * plane;
            let mut col = vec![S::ZERO; g.patch_len() * bp];
            im2col(xc, b, g, &mut col);
            let mut prod = vec![S::ZERO; g.c_out * bp];
            gemm_ex(g.c_out, g.patch_len(), bp, S::ONE, kernel, false, &col, false, S::ZERO, &mut prod);
            scatter_channel_major(&prod, b, g.c_out, plane, bias, oc);
        });
    out
}

/// Gradient of the convolution output w.r.t. its input (the transposed
/// convolution applied to `gout`).
pub fn conv2d_input_grad<S: Scalar>(gout: &[S], kernel: &[S], g: &ConvGeom) -> Vec<S> {
    let (gin, _, _) = conv2d_backward(None, gout, kernel, g, true, false);
    gin.unwrap()
}

/// Gradient w.r.t. the kernel, accumulated over the batch.
pub fn conv2d_kernel_grad<S: Scalar>(x: &[S], gout: &[S], g: &ConvGeom) -> Vec<S> {
    let (_, gk, _) = conv2d_backward(Some(x), gout, &[], g, false, true);
    gk.unwrap()
}

/// Fused convolution backward: one channel-major gather of `gout` feeds
/// the input-gradient GEMM, the kernel-gradient GEMM and the bias sums.
/// `x` is only needed when `need_dk`; `kernel` only when `need_dx`.
/// Returns (dx, dk, db); db is always produced (it is nearly free).
pub fn conv2d_backward<S: Scalar>(
    x: Option<&[S]>,
    gout: &[S],
    kernel: &[S],
    g: &ConvGeom,
    need_dx: bool,
    need_dk: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>, Vec<S>) {
    assert_eq!(gout.len(), g.n * g.out_img());
    if need_dx {
        assert_eq!(kernel.len(), g.c_out * g.patch_len());
    }
    if need_dk {
        assert_eq!(x.expect("x required for kernel grad").len(), g.n * g.in_img());
    }
    let plane = g.oh * g.ow;
    let chunk = batch_chunk(g.n, plane);
    let n_chunks = g.n.div_ceil(chunk);
    let mut gin = vec![S::ZERO; if need_dx { g.n * g.in_img() } else { 0 }];
    let gin_slots: Vec<Option<&mut [S]>> = if need_dx {
        gin.chunks_mut(chunk * g.in_img()).map(Some).collect()
    } else {
        (0..n_chunks).map(|_| None).collect()
    };

    let work: Vec<(Option<Vec<S>>, Vec<S>)> = gin_slots
        .into_par_iter()
        .zip(gout.par_chunks(chunk * g.out_img()))
        .enumerate()
        .map(|(ci, (ic, goc))| {
            let b = goc.len() / g.out_img();
            let bp = b * plane;
            let mut gmat = vec![S::ZERO; g.c_out * bp];
            gather_channel_major(goc, b, g.c_out, plane, &mut gmat);
            if let Some(ic) = ic {
                let mut colg = vec![S::ZERO; g.patch_len() * bp];
                gemm_ex(g.patch_len(), g.c_out, bp, S::ONE, kernel, true, &gmat, false, S::ZERO, &mut colg);
                col2im_add(&colg, b, g, ic);
            }
            let dk = if need_dk {
                let xs = x.unwrap();
                let xc = &xs[ci * chunk * g.in_img()..(ci * chunk + b) * g.in_img()];
                let mut col = vec![S::ZERO; g.patch_len() * bp];
                im2col(xc, b, g, &mut col);
                let mut part = vec![S::ZERO; g.c_out * g.patch_len()];
                gemm_ex(g.c_out, bp, g.patch_len(), S::ONE, &gmat, false, &col, true, S::ZERO, &mut part);
                Some(part)
            } else {
                None
            };
            let mut db = vec![S::ZERO; g.c_out];
            for ch in 0..g.c_out {
                let row = &gmat[ch * bp..(ch + 1) * bp];
                let mut t = S::ZERO;
                for v in row {
                    t += *v;
                }
                db[ch] = t;
            }
            (dk, db)
        })
        .collect();

    let mut dk_acc = if need_dk { Some(vec![S::ZERO; g.c_out * g.patch_len()]) } else { None };
    let mut db_acc = vec![S::ZERO; g.c_out];
    for (dk, db) in work {
        if let (Some(acc), Some(part)) = (dk_acc.as_mut(), dk) {
            for (a, p) in acc.iter_mut().zip(part) {
                *a += p;
            }
        }
        for (a, p) in db_acc.iter_mut().zip(db) {
            *a += p;
        }
    }
    (if need_dx { Some(gin) } else { None }, dk_acc, db_acc)
}

/// Fused backward of the transposed convolution whose underlying
/// convolution is `g`. `x` is the deconv input (conv-output shape), `gy`
/// the upstream gradient (conv-input shape). One im2col of `gy` feeds
/// both GEMMs. Returns (dx, dk, db) where db sums `gy` per channel.
pub fn deconv2d_backward<S: Scalar>(
    x: Option<&[S]>,
    gy: &[S],
    kernel: &[S],
    g: &ConvGeom,
    need_dx: bool,
    need_dk: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>, Vec<S>) {
    assert_eq!(gy.len(), g.n * g.in_img());
    if need_dx {
        assert_eq!(kernel.len(), g.c_out * g.patch_len());
    }
    if need_dk {
        assert_eq!(x.expect("x required for kernel grad").len(), g.n * g.out_img());
    }
    let plane = g.oh * g.ow;
    let chunk = batch_chunk(g.n, plane);
    let n_chunks = g.n.div_ceil(chunk);
    let mut dx = vec![S::ZERO; if need_dx { g.n * g.out_img() } else { 0 }];
    let dx_slots: Vec<Option<&mut [S]>> = if need_dx {
        dx.chunks_mut(chunk * g.out_img()).map(Some).collect()
    } else {
        (0..n_chunks).map(|_| None).collect()
    };

    let work: Vec<(Option<Vec<S>>, Vec<S>)> = dx_slots
        .into_par_iter()
        .zip(gy.par_chunks(chunk * g.in_img()))
        .enumerate()
        .map(|(ci, (dxc, gyc))| {
            let b = gyc.len() / g.in_img();
            let bp = b * plane;
            let mut col = vec![S::ZERO; g.patch_len() * bp];
            im2col(gyc, b, g, &mut col);
            if let Some(dxc) = dxc {
                let mut prod = vec![S::ZERO; g.c_out * bp];
                gemm_ex(g.c_out, g.patch_len(), bp, S::ONE, kernel, false, &col, false, S::ZERO, &mut prod);
                scatter_channel_major(&prod, b, g.c_out, plane, None, dxc);
            }
            let dk = if need_dk {
                let xs = x.unwrap();
                let xc = &xs[ci * chunk * g.out_img()..(ci * chunk + b) * g.out_img()];
                let mut gmat = vec![S::ZERO; g.c_out * bp];
                gather_channel_major(xc, b, g.c_out, plane, &mut gmat);
                let mut part = vec![S::ZERO; g.c_out * g.patch_len()];
                gemm_ex(g.c_out, bp, g.patch_len(), S::ONE, &gmat, false, &col, true, S::ZERO, &mut part);
                Some(part)
            } else {
                None
            };
            let db = channel_sum(gyc, b, g.c_in, g.h * g.w);
            (dk, db)
        })
        .collect();

    let mut dk_acc = if need_dk { Some(vec![S::ZERO; g.c_out * g.patch_len()]) } else { None };
    let mut db_acc = vec![S::ZERO; g.c_in];
    for (dk, db) in work {
        if let (Some(acc), Some(part)) = (dk_acc.as_mut(), dk) {
            for (a, p) in acc.iter_mut().zip(part) {
                *a += p;
            }
        }
        for (a, p) in db_acc.iter_mut().zip(db) {
            *a += p;
        }
    }
    (if need_dx { Some(dx) } else { None }, dk_acc, db_acc)
}

/// Per-output-channel sum of `gout` over batch and spatial positions.
pub fn channel_sum<S: Scalar>(gout: &[S], n: usize, c: usize, plane: usize) -> Vec<S> {
    let mut acc = vec![S::ZERO; c];
    for img in 0..n {
        for ch in 0..c {
            let s = &gout[(img * c + ch) * plane..(img * c + ch + 1) * plane];
            let mut t = S::ZERO;
            for v in s {
                t += *v;
            }
            acc[ch] += t;
        }
    }
    acc
}

/// Padding that makes the transposed convolution map H exactly to
/// stride * H (with the implied output padding absorbed by the geometry).
pub fn deconv_padding(k: usize, stride: usize) -> usize {
    (k - stride + 1) / 2
}

/// Geometry of the convolution underlying deconv2d(c_in -> c_out, x stride).
/// The deconv forward is that convolution's input-gradient.
pub fn deconv_conv_geom(
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
) -> Result<ConvGeom> {
    let padding = deconv_padding(k, stride);
    let g = ConvGeom::new(n, c_out, stride * h, stride * w, c_in, k, stride, padding)?;
    if g.oh != h || g.ow != w {
        return Err(Error::Shape(format!(
            "deconv geometry unsatisfiable: kernel {k}, stride {stride}, input {h}x{w}"
        )));
    }
    Ok(g)
}

/// Saved statistics for batchnorm backward.
#[derive(Debug, Clone)]
pub struct BnStats<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
    pub inv_std: Vec<S>,
}

/// Train-mode batchnorm over NCHW: per-channel normalization by batch
/// statistics (population variance), then scale/shift.
pub fn batchnorm_train_forward<S: Scalar>(
    x: &[S],
    n: usize,
    c: usize,
    plane: usize,
    gamma: &[S],
    beta: &[S],
    eps: S,
) -> (Vec<S>, BnStats<S>) {
    let m = S::from_f64((n * plane) as f64);
    let mut mean = vec![S::ZERO; c];
    let mut var = vec![S::ZERO; c];
    for img in 0..n {
        for ch in 0..c {
            let s = &x[(img * c + ch) * plane..(img * c + ch + 1) * plane];
            let mut t = S::ZERO;
            for v in s {
                t += *v;
            }
            mean[ch] += t;
        }
    }
    for v in mean.iter_mut() {
        *v /= m;
    }
    for img in 0..n {
        for ch in 0..c {
            let s = &x[(img * c + ch) * plane..(img * c + ch + 1) * plane];
            let mu = mean[ch];
            let mut t = S::ZERO;
            for v in s {
                let d = *v - mu;
                t += d * d;
            }
            var[ch] += t;
        }
    }
    for v in var.iter_mut() {
        *v /= m;
    }
    let inv_std: Vec<S> = var.iter().map(|&v| S::ONE / (v + eps).sqrt()).collect();
    let mut y = vec![S::ZERO; x.len()];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * plane;
            let (mu, is, ga, be) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for i in 0..plane {
                y[base + i] = (x[base + i] - mu) * is * ga + be;
            }
        }
    }
    (y, BnStats { mean, var, inv_std })
}

/// Backward of train-mode batchnorm. Returns (dx, dgamma, dbeta).
pub fn batchnorm_train_backward<S: Scalar>(
    x: &[S],
    gout: &[S],
    n: usize,
    c: usize,
    plane: usize,
    gamma: &[S],
    stats: &BnStats<S>,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let m = S::from_f64((n * plane) as f64);
    let mut dbeta = vec![S::ZERO; c];
    let mut dgamma = vec![S::ZERO; c];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * plane;
            let (mu, is) = (stats.mean[ch], stats.inv_std[ch]);
            let mut sb = S::ZERO;
            let mut sg = S::ZERO;
            for i in 0..plane {
                let go = gout[base + i];
                sb += go;
                sg += go * (x[base + i] - mu) * is;
            }
            dbeta[ch] += sb;
            dgamma[ch] += sg;
        }
    }
    let mut dx = vec![S::ZERO; x.len()];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * plane;
            let (mu, is, ga) = (stats.mean[ch], stats.inv_std[ch], gamma[ch]);
            let c1 = dbeta[ch] / m;
            let c2 = dgamma[ch] / m;
            for i in 0..plane {
                let xhat = (x[base + i] - mu) * is;
                dx[base + i] = ga * is * (gout[base + i] - c1 - xhat * c2);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Eval-mode batchnorm: normalize by running statistics only.
pub fn batchnorm_eval_forward<S: Scalar>(
    x: &[S],
    n: usize,
    c: usize,
    plane: usize,
    gamma: &[S],
    beta: &[S],
    running_mean: &[S],
    running_var: &[S],
    eps: S,
) -> Vec<S> {
    let mut y = vec![S::ZERO; x.len()];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * plane;
            let is = S::ONE / (running_var[ch] + eps).sqrt();
            let (mu, ga, be) = (running_mean[ch], gamma[ch], beta[ch]);
            for i in 0..plane {
                y[base + i] = (x[base + i] - mu) * is * ga + be;
            }
        }
    }
    y
}

/// Backward of eval-mode batchnorm (running stats are constants).
/// Returns (dx, dgamma, dbeta).
pub fn batchnorm_eval_backward<S: Scalar>(
    x: &[S],
    gout: &[S],
    n: usize,
    c: usize,
    plane: usize,
    gamma: &[S],
    running_mean: &[S],
    running_var: &[S],
    eps: S,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let mut dx = vec![S::ZERO; x.len()];
    let mut dgamma = vec![S::ZERO; c];
    let mut dbeta = vec![S::ZERO; c];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * plane;
            let is = S::ONE / (running_var[ch] + eps).sqrt();
            let (mu, ga) = (running_mean[ch], gamma[ch]);
            for i in 0..plane {
                let go = gout[base + i];
                dx[base + i] = go * ga * is;
                dgamma[ch] += go * (x[base + i] - mu) * is;
                dbeta[ch] += go;
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Mean over the batch of -log softmax(logits)[label], max-stabilized.
/// Returns the loss and the softmax probabilities for backward.
pub fn softmax_xent_forward<S: Scalar>(logits: &[S], n: usize, k: usize, labels: &[usize]) -> Result<(S, Vec<S>)> {
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
    }
    let mut probs = vec![S::ZERO; n * k];
    let mut loss = S::ZERO;
    for i in 0..n {
        let row = &logits[i * k..(i + 1) * k];
        let mut mx = row[0];
        for v in row {
            mx = mx.maxv(*v);
        }
        let mut denom = S::ZERO;
        for j in 0..k {
            let e = (row[j] - mx).exp();
            probs[i * k + j] = e;
            denom += e;
        }
        for j in 0..k {
            probs[i * k + j] /= denom;
        }
        loss += denom.ln() - (row[labels[i]] - mx);
    }
    Ok((loss / S::from_f64(n as f64), probs))
}

/// dlogits = (softmax - onehot) * upstream / n.
pub fn softmax_xent_backward<S: Scalar>(probs: &[S], n: usize, k: usize, labels: &[usize], upstream: S) -> Vec<S> {
    let scale = upstream / S::from_f64(n as f64);
    let mut d = vec![S::ZERO; n * k];
    for i in 0..n {
        for j in 0..k {
            let indicator = if labels[i] == j { S::ONE } else { S::ZERO };
            d[i * k + j] = (probs[i * k + j] - indicator) * scale;
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Six-nested-loop direct convolution, the independent oracle.
    pub fn conv2d_brute<S: Scalar>(x: &[S], kernel: &[S], bias: &[S], g: &ConvGeom) -> Vec<S> {
        let mut out = vec![S::ZERO; g.n * g.c_out * g.oh * g.ow];
        for img in 0..g.n {
            for co in 0..g.c_out {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut acc = bias[co];
                        for ci in 0..g.c_in {
                            for ky in 0..g.k {
                                for kx in 0..g.k {
                                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    let xv = x[((img * g.c_in + ci) * g.h + iy as usize) * g.w + ix as usize];
                                    let kv = kernel[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                                    acc += xv * kv;
                                }
                            }
                        }
                        out[((img * g.c_out + co) * g.oh + oy) * g.ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn lcg(state: &mut u64) -> f64 {
        // Small deterministic generator for test data.
        *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn randv(n: usize, state: &mut u64) -> Vec<f64> {
        (0..n).map(|_| lcg(state)).collect()
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let g = ConvGeom::new(1, 1, 4, 4, 1, 1, 1, 0).unwrap();
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let out = conv2d_forward(&x, &[1.0], Some(&[0.0]), &g);
        assert_eq!(out, x);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let g = ConvGeom::new(2, 3, 6, 6, 4, 3, 1, 1).unwrap();
        let mut s = 7u64;
        let k = randv(4 * 3 * 9, &mut s);
        let out = conv2d_forward(&vec![0.0f64; 2 * 3 * 36], &k, Some(&[0.0; 4]), &g);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn strided_padded_conv_matches_brute_force() {
        let g = ConvGeom::new(1, 2, 8, 8, 4, 3, 2, 1).unwrap();
        let mut s = 42u64;
        let x = randv(g.n * g.in_img(), &mut s);
        let k = randv(g.c_out * g.patch_len(), &mut s);
        let b = randv(g.c_out, &mut s);
        let got = conv2d_forward(&x, &k, Some(&b), &g);
        let want = conv2d_brute(&x, &k, &b, &g);
        for (a, w) in got.iter().zip(&want) {
            assert!((a - w).abs() < 1e-6, "{a} vs {w}");
        }
    }

    #[test]
    fn conv_matches_brute_force_on_many_shapes() {
        let mut s = 1u64;
        for (n, ci, h, w, co, k, stride, pad) in [
            (1, 1, 5, 7, 2, 3, 1, 0),
            (3, 2, 8, 8, 3, 3, 2, 1),
            (2, 3, 4, 4, 2, 5, 2, 2),
            (4, 1, 6, 5, 1, 1, 1, 0),
            (2, 2, 7, 7, 5, 5, 1, 2),
            (1, 4, 2, 2, 3, 5, 2, 2),
        ] {
            let g = ConvGeom::new(n, ci, h, w, co, k, stride, pad).unwrap();
            let x = randv(g.n * g.in_img(), &mut s);
            let kn = randv(g.c_out * g.patch_len(), &mut s);
            let b = randv(g.c_out, &mut s);
            let got = conv2d_forward(&x, &kn, Some(&b), &g);
            let want = conv2d_brute(&x, &kn, &b, &g);
            for (a, wv) in got.iter().zip(&want) {
                assert!((a - wv).abs() < 1e-12, "geom {g:?}");
            }
        }
    }

    #[test]
    fn input_grad_is_adjoint_of_forward() {
        // <conv(x), y> == <x, input_grad(y)> for random x, y.
        let g = ConvGeom::new(2, 3, 8, 8, 4, 5, 2, 2).unwrap();
        let mut s = 99u64;
        let x = randv(g.n * g.in_img(), &mut s);
        let k = randv(g.c_out * g.patch_len(), &mut s);
        let y = randv(g.n * g.out_img(), &mut s);
        let fx = conv2d_forward(&x, &k, None, &g);
        let aty = conv2d_input_grad(&y, &k, &g);
        let lhs: f64 = fx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn kernel_grad_matches_finite_difference() {
        let g = ConvGeom::new(1, 2, 5, 5, 2, 3, 2, 1).unwrap();
        let mut s = 5u64;
        let x = randv(g.n * g.in_img(), &mut s);
        let mut k = randv(g.c_out * g.patch_len(), &mut s);
        let gout = randv(g.n * g.out_img(), &mut s);
        let kg = conv2d_kernel_grad(&x, &gout, &g);
        let eps = 1e-6;
        for idx in [0, 3, 11, k.len() - 1] {
            let orig = k[idx];
            k[idx] = orig + eps;
            let fp: f64 = conv2d_forward(&x, &k, None, &g).iter().zip(&gout).map(|(a, b)| a * b).sum();
            k[idx] = orig - eps;
            let fm: f64 = conv2d_forward(&x, &k, None, &g).iter().zip(&gout).map(|(a, b)| a * b).sum();
            k[idx] = orig;
            let num = (fp - fm) / (2.0 * eps);
            assert!((num - kg[idx]).abs() < 1e-6 * num.abs().max(1.0), "{num} vs {}", kg[idx]);
        }
    }

    #[test]
    fn deconv_geometry_doubles_spatial_size() {
        let g = deconv_conv_geom(1, 8, 4, 4, 4, 5, 2).unwrap();
        assert_eq!((g.h, g.w), (8, 8));
        assert_eq!((g.oh, g.ow), (4, 4));
        let g1 = deconv_conv_geom(1, 8, 4, 4, 4, 5, 1).unwrap();
        assert_eq!((g1.h, g1.w), (4, 4));
    }

    #[test]
    fn batchnorm_train_normalizes_per_channel() {
        let (n, c, plane) = (4, 3, 16);
        let mut s = 12u64;
        let x = randv(n * c * plane, &mut s);
        let gamma = vec![1.0f64; c];
        let beta = vec![0.0f64; c];
        let (y, _) = batchnorm_train_forward(&x, n, c, plane, &gamma, &beta, 1e-5);
        for ch in 0..c {
            let mut mean = 0.0;
            let mut var = 0.0;
            let m = (n * plane) as f64;
            for img in 0..n {
                for i in 0..plane {
                    mean += y[(img * c + ch) * plane + i];
                }
            }
            mean /= m;
            for img in 0..n {
                for i in 0..plane {
                    let d = y[(img * c + ch) * plane + i] - mean;
                    var += d * d;
                }
            }
            var /= m;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn softmax_xent_uniform_logits() {
        let (loss, _) = softmax_xent_forward(&vec![0.5f64; 2 * 10], 2, 10, &[3, 7]).unwrap();
        assert!((loss - 10.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn softmax_xent_saturated_logit() {
        let mut logits = vec![0.0f64; 10];
        logits[4] = 50.0;
        let (loss, _) = softmax_xent_forward(&logits, 1, 10, &[4]).unwrap();
        assert!(loss < 1e-9);
    }

    #[test]
    fn softmax_xent_matches_direct_formula() {
        let mut s = 3u64;
        let logits = randv(12, &mut s);
        let labels = [1usize, 0, 3];
        let (loss, _) = softmax_xent_forward(&logits, 3, 4, &labels).unwrap();
        let mut want = 0.0;
        for i in 0..3 {
            let row = &logits[i * 4..(i + 1) * 4];
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            want += -(row[labels[i]].exp() / denom).ln();
        }
        want /= 3.0;
        assert!((loss - want).abs() < 1e-6);
    }

    #[test]
    fn softmax_xent_rejects_bad_label() {
        let err = softmax_xent_forward(&vec![0.0f64; 4], 1, 4, &[4]).unwrap_err();
        assert!(matches!(err, crate::Error::Data(_)));
    }
}

// Internal benchmarking hooks (not part of the public surface).
#[doc(hidden)]
pub fn test_im2col<S: Scalar>(x: &[S], b: usize, g: &ConvGeom, col: &mut [S]) {
    im2col(x, b, g, col)
}
#[doc(hidden)]
pub fn test_col2im<S: Scalar>(col: &[S], b: usize, g: &ConvGeom, x: &mut [S]) {
    col2im_add(col, b, g, x)
}
#[doc(hidden)]
pub fn test_gather<S: Scalar>(y: &[S], b: usize, c: usize, plane: usize, out: &mut [S]) {
    gather_channel_major(y, b, c, plane, out)
}
