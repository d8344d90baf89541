//! Forward and backward kernels for the layers of the U-Net.
//!
//! Activations are NCHW `Array4`s in standard layout. Convolutions go through
//! im2col + GEMM per batch item; batch items are processed in parallel and
//! per-item weight gradients are reduced in item order so results do not
//! depend on the thread count.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView2, ArrayViewMut2, Axis, Ix2, Ix4};
use rand::RngCore;
use rayon::prelude::*;

use crate::rng;
use crate::Real;

const BN_EPS: f64 = 1e-5;

fn view2<T>(data: &[T], rows: usize, cols: usize) -> ArrayView2<'_, T> {
    ArrayView2::from_shape((rows, cols), data).expect("contiguous matrix")
}

fn view2_mut<T>(data: &mut [T], rows: usize, cols: usize) -> ArrayViewMut2<'_, T> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("contiguous matrix")
}

fn weight_matrix<T: Real>(w: &ArrayD<T>) -> ArrayView2<'_, T> {
    let s = w.shape();
    let rows = s[0];
    let cols: usize = s[1..].iter().product();
    w.view()
        .into_shape_with_order((rows, cols))
        .expect("weights are contiguous")
        .into_dimensionality::<Ix2>()
        .unwrap()
}

/// Range of output columns `[lo, hi)` whose source column `ox + shift` is in bounds.
#[inline]
fn valid_range(w: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (w as isize - shift).clamp(0, w as isize) as usize;
    (lo.min(hi), hi)
}

fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let (lo, hi) = valid_range(w, dx);
                let row = ((ci * k + ky) * k + kx) * hw;
                let dst = &mut col[row..row + hw];
                for oy in 0..h {
                    let iy = oy as isize + dy;
                    let drow = &mut dst[oy * w..(oy + 1) * w];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let srow = &plane[iy as usize * w..(iy as usize + 1) * w];
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    let s0 = (lo as isize + dx) as usize;
                    drow[lo..hi].copy_from_slice(&srow[s0..s0 + (hi - lo)]);
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, k: usize, x: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    x.fill(T::zero());
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let (lo, hi) = valid_range(w, dx);
                let row = ((ci * k + ky) * k + kx) * hw;
                let src = &col[row..row + hw];
                for oy in 0..h {
                    let iy = oy as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let s0 = (lo as isize + dx) as usize;
                    let prow = &mut plane[iy as usize * w + s0..iy as usize * w + s0 + (hi - lo)];
                    let crow = &src[oy * w + lo..oy * w + hi];
                    for (p, &v) in prow.iter_mut().zip(crow) {
                        *p += v;
                    }
                }
            }
        }
    }
}

/// Stride-1 "same" convolution. `w` is `[out, in, k, k]` with odd `k`.
pub fn conv2d_forward<T: Real>(x: &Array4<T>, w: &ArrayD<T>, b: Option<&ArrayD<T>>) -> Array4<T> {
    let (n, cin, h, wd) = x.dim();
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    debug_assert_eq!(w.shape()[1], cin);
    let hw = h * wd;
    let kk = cin * k * k;
    let wm = weight_matrix(w);
    let mut y = Array4::<T>::zeros((n, cout, h, wd));
    let xs = x.as_slice().expect("standard layout");
    y.as_slice_mut()
        .unwrap()
        .par_chunks_mut(cout * hw)
        .enumerate()
        .for_each(|(i, yn)| {
            let xn = &xs[i * cin * hw..(i + 1) * cin * hw];
            let mut out = view2_mut(yn, cout, hw);
            if k == 1 {
                general_mat_mul(T::one(), &wm, &view2(xn, cin, hw), T::zero(), &mut out);
            } else {
                let mut col = vec![T::zero(); kk * hw];
                im2col(xn, cin, h, wd, k, &mut col);
                general_mat_mul(T::one(), &wm, &view2(&col, kk, hw), T::zero(), &mut out);
            }
            if let Some(b) = b {
                for (co, row) in out.outer_iter_mut().enumerate() {
                    let bv = b[[co]];
                    row.into_slice().unwrap().iter_mut().for_each(|v| *v += bv);
                }
            }
        });
    y
}

pub struct ConvGrads<T> {
    pub dx: Option<Array4<T>>,
    pub dw: ArrayD<T>,
    pub db: Option<ArrayD<T>>,
}

pub fn conv2d_backward<T: Real>(
    x: &Array4<T>,
    w: &ArrayD<T>,
    gy: &Array4<T>,
    need_dx: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let (n, cin, h, wd) = x.dim();
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let hw = h * wd;
    let kk = cin * k * k;
    let wm = weight_matrix(w);
    let xs = x.as_slice().expect("standard layout");
    let gs = gy.as_slice().expect("standard layout");

    let per_item: Vec<(Array2<T>, Option<Vec<T>>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xn = &xs[i * cin * hw..(i + 1) * cin * hw];
            let gn = view2(&gs[i * cout * hw..(i + 1) * cout * hw], cout, hw);
            let mut dw = Array2::<T>::zeros((cout, kk));
            let dx = if k == 1 {
                general_mat_mul(T::one(), &gn, &view2(xn, cin, hw).t(), T::zero(), &mut dw);
                need_dx.then(|| {
                    let mut dxn = vec![T::zero(); cin * hw];
                    general_mat_mul(T::one(), &wm.t(), &gn, T::zero(), &mut view2_mut(&mut dxn, cin, hw));
                    dxn
                })
            } else {
                let mut col = vec![T::zero(); kk * hw];
                im2col(xn, cin, h, wd, k, &mut col);
                general_mat_mul(T::one(), &gn, &view2(&col, kk, hw).t(), T::zero(), &mut dw);
                need_dx.then(|| {
                    general_mat_mul(T::one(), &wm.t(), &gn, T::zero(), &mut view2_mut(&mut col, kk, hw));
                    let mut dxn = vec![T::zero(); cin * hw];
                    col2im(&col, cin, h, wd, k, &mut dxn);
                    dxn
                })
            };
            (dw, dx)
        })
        .collect();

    let mut dw = Array2::<T>::zeros((cout, kk));
    let mut dx = need_dx.then(|| Array4::<T>::zeros((n, cin, h, wd)));
    for (i, (dwi, dxi)) in per_item.into_iter().enumerate() {
        dw += &dwi;
        if let (Some(dx), Some(dxi)) = (dx.as_mut(), dxi) {
            dx.as_slice_mut().unwrap()[i * cin * hw..(i + 1) * cin * hw].copy_from_slice(&dxi);
        }
    }
    let db = need_db.then(|| channel_sums(gy).into_dyn());
    ConvGrads { dx, dw: dw.into_shape_with_order(w.raw_dim()).unwrap(), db }
}

fn channel_sums<T: Real>(g: &Array4<T>) -> Array1<T> {
    let (n, c, h, w) = g.dim();
    let hw = h * w;
    let gs = g.as_slice().unwrap();
    Array1::from_shape_fn(c, |ci| {
        let mut acc = 0.0f64;
        for i in 0..n {
            acc += gs[(i * c + ci) * hw..(i * c + ci + 1) * hw].iter().map(|v| v.f64()).sum::<f64>();
        }
        T::of(acc)
    })
}

/// 2×2 stride-2 transposed convolution. `w` is `[in, out, 2, 2]`.
pub fn conv_transpose2x2_forward<T: Real>(x: &Array4<T>, w: &ArrayD<T>, b: &ArrayD<T>) -> Array4<T> {
    let (n, cin, h, wd) = x.dim();
    let cout = w.shape()[1];
    let hw = h * wd;
    let wm = weight_matrix(w); // [cin, cout*4]
    let xs = x.as_slice().unwrap();
    let mut y = Array4::<T>::zeros((n, cout, 2 * h, 2 * wd));
    y.as_slice_mut()
        .unwrap()
        .par_chunks_mut(cout * 4 * hw)
        .enumerate()
        .for_each(|(i, yn)| {
            let xn = view2(&xs[i * cin * hw..(i + 1) * cin * hw], cin, hw);
            let mut z = Array2::<T>::zeros((cout * 4, hw));
            general_mat_mul(T::one(), &wm.t(), &xn, T::zero(), &mut z);
            let ow = 2 * wd;
            for co in 0..cout {
                let bv = b[[co]];
                for a in 0..2 {
                    for bb in 0..2 {
                        let zr = z.row(co * 4 + a * 2 + bb);
                        let zr = zr.as_slice().unwrap();
                        for iy in 0..h {
                            let base = co * 4 * hw + (2 * iy + a) * ow + bb;
                            for ix in 0..wd {
                                yn[base + 2 * ix] = zr[iy * wd + ix] + bv;
                            }
                        }
                    }
                }
            }
        });
    y
}

pub fn conv_transpose2x2_backward<T: Real>(
    x: &Array4<T>,
    w: &ArrayD<T>,
    gy: &Array4<T>,
) -> (Array4<T>, ArrayD<T>, ArrayD<T>) {
    let (n, cin, h, wd) = x.dim();
    let cout = w.shape()[1];
    let hw = h * wd;
    let wm = weight_matrix(w);
    let xs = x.as_slice().unwrap();
    let gs = gy.as_slice().unwrap();
    let ow = 2 * wd;

    let per_item: Vec<(Array2<T>, Array2<T>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let gn = &gs[i * cout * 4 * hw..(i + 1) * cout * 4 * hw];
            let mut dz = Array2::<T>::zeros((cout * 4, hw));
            for co in 0..cout {
                for a in 0..2 {
                    for bb in 0..2 {
                        let mut zr = dz.row_mut(co * 4 + a * 2 + bb);
                        let zr = zr.as_slice_mut().unwrap();
                        for iy in 0..h {
                            let base = co * 4 * hw + (2 * iy + a) * ow + bb;
                            for ix in 0..wd {
                                zr[iy * wd + ix] = gn[base + 2 * ix];
                            }
                        }
                    }
                }
            }
            let xn = view2(&xs[i * cin * hw..(i + 1) * cin * hw], cin, hw);
            let mut dw = Array2::<T>::zeros((cin, cout * 4));
            general_mat_mul(T::one(), &xn, &dz.t(), T::zero(), &mut dw);
            let mut dx = Array2::<T>::zeros((cin, hw));
            general_mat_mul(T::one(), &wm, &dz, T::zero(), &mut dx);
            (dw, dx)
        })
        .collect();

    let mut dw = Array2::<T>::zeros((cin, cout * 4));
    let mut dx = Array4::<T>::zeros((n, cin, h, wd));
    for (i, (dwi, dxi)) in per_item.into_iter().enumerate() {
        dw += &dwi;
        dx.as_slice_mut().unwrap()[i * cin * hw..(i + 1) * cin * hw]
            .copy_from_slice(dxi.as_slice().unwrap());
    }
    let db = channel_sums(gy).into_dyn();
    (dx, dw.into_shape_with_order(w.raw_dim()).unwrap(), db)
}

/// Saved state of a train-mode batch-norm + ReLU unit.
pub struct BnCache<T> {
    pub xhat: Array4<T>,
    pub inv_std: Vec<T>,
}

pub struct BnStats<T> {
    pub mean: Array1<T>,
    /// Unbiased batch variance, the value folded into the running estimate.
    pub var: Array1<T>,
}

/// Batch-norm with batch statistics followed by ReLU.
pub fn bn_relu_forward_train<T: Real>(
    x: &Array4<T>,
    gamma: &ArrayD<T>,
    beta: &ArrayD<T>,
) -> (BnCache<T>, BnStats<T>, Array4<T>) {
    let (n, c, h, w) = x.dim();
    let hw = h * w;
    let m = (n * hw) as f64;
    let xs = x.as_slice().unwrap();
    let mut xhat = Array4::<T>::zeros(x.raw_dim());
    let mut out = Array4::<T>::zeros(x.raw_dim());
    let mut inv_std = vec![T::zero(); c];
    let mut mean_v = Array1::<T>::zeros(c);
    let mut var_v = Array1::<T>::zeros(c);
    {
        let xh = xhat.as_slice_mut().unwrap();
        let os = out.as_slice_mut().unwrap();
        for ci in 0..c {
            let planes = (0..n).map(|i| (i * c + ci) * hw);
            let mut sum = 0.0f64;
            for p in planes.clone() {
                sum += xs[p..p + hw].iter().map(|v| v.f64()).sum::<f64>();
            }
            let mean = sum / m;
            let mut sq = 0.0f64;
            for p in planes.clone() {
                sq += xs[p..p + hw].iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>();
            }
            let var = sq / m;
            let istd = 1.0 / (var + BN_EPS).sqrt();
            let (meant, istdt) = (T::of(mean), T::of(istd));
            let (g, b) = (gamma[[ci]], beta[[ci]]);
            for p in planes {
                for j in p..p + hw {
                    let xn = (xs[j] - meant) * istdt;
                    xh[j] = xn;
                    let y = g * xn + b;
                    os[j] = if y > T::zero() { y } else { T::zero() };
                }
            }
            inv_std[ci] = istdt;
            mean_v[ci] = meant;
            var_v[ci] = T::of(if m > 1.0 { sq / (m - 1.0) } else { var });
        }
    }
    (BnCache { xhat, inv_std }, BnStats { mean: mean_v, var: var_v }, out)
}

/// Batch-norm with running statistics followed by ReLU.
pub fn bn_relu_forward_eval<T: Real>(
    x: &Array4<T>,
    gamma: &ArrayD<T>,
    beta: &ArrayD<T>,
    running_mean: &ArrayD<T>,
    running_var: &ArrayD<T>,
) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    let hw = h * w;
    let mut out = x.clone();
    let os = out.as_slice_mut().unwrap();
    for ci in 0..c {
        let istd = T::of(1.0 / (running_var[[ci]].f64() + BN_EPS).sqrt());
        let scale = gamma[[ci]] * istd;
        let shift = beta[[ci]] - running_mean[[ci]] * scale;
        for i in 0..n {
            let p = (i * c + ci) * hw;
            for v in &mut os[p..p + hw] {
                let y = *v * scale + shift;
                *v = if y > T::zero() { y } else { T::zero() };
            }
        }
    }
    out
}

/// Returns `(dx, dgamma, dbeta)`. The ReLU mask is recomputed from the
/// normalized input with the same expression as the forward pass.
pub fn bn_relu_backward<T: Real>(
    cache: &BnCache<T>,
    gamma: &ArrayD<T>,
    beta: &ArrayD<T>,
    gy: &Array4<T>,
) -> (Array4<T>, ArrayD<T>, ArrayD<T>) {
    let (n, c, h, w) = gy.dim();
    let hw = h * w;
    let m = (n * hw) as f64;
    let gs = gy.as_slice().unwrap();
    let xh = cache.xhat.as_slice().unwrap();
    let mut dx = Array4::<T>::zeros(gy.raw_dim());
    let mut dgamma = Array1::<T>::zeros(c);
    let mut dbeta = Array1::<T>::zeros(c);
    let dxs = dx.as_slice_mut().unwrap();
    for ci in 0..c {
        let planes = (0..n).map(|i| (i * c + ci) * hw);
        let (gm, bt) = (gamma[[ci]], beta[[ci]]);
        let active = |j: usize| gm * xh[j] + bt > T::zero();
        let (mut sg, mut sgx) = (0.0f64, 0.0f64);
        for p in planes.clone() {
            for j in p..p + hw {
                if active(j) {
                    sg += gs[j].f64();
                    sgx += (gs[j] * xh[j]).f64();
                }
            }
        }
        dgamma[ci] = T::of(sgx);
        dbeta[ci] = T::of(sg);
        let scale = T::of(gamma[[ci]].f64() * cache.inv_std[ci].f64() / m);
        let (mt, sgt, sgxt) = (T::of(m), T::of(sg), T::of(sgx));
        for p in planes {
            for j in p..p + hw {
                let g = if active(j) { gs[j] } else { T::zero() };
                dxs[j] = scale * (mt * g - sgt - xh[j] * sgxt);
            }
        }
    }
    (dx, dgamma.into_dyn(), dbeta.into_dyn())
}

/// 2×2 max pooling; returns the pooled map and the argmax position (0..4) per output.
pub fn maxpool2_forward<T: Real>(x: &Array4<T>) -> (Array4<T>, Vec<u8>) {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let xs = x.as_slice().unwrap();
    let mut y = Array4::<T>::zeros((n, c, oh, ow));
    let mut arg = vec![0u8; n * c * oh * ow];
    let ys = y.as_slice_mut().unwrap();
    for plane in 0..n * c {
        let src = &xs[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let o = plane * oh * ow + oy * ow + ox;
                let mut best = src[2 * oy * w + 2 * ox];
                let mut bi = 0u8;
                for (k, (dy, dx)) in [(0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                    let v = src[(2 * oy + dy) * w + 2 * ox + dx];
                    if v > best {
                        best = v;
                        bi = k as u8 + 1;
                    }
                }
                ys[o] = best;
                arg[o] = bi;
            }
        }
    }
    (y, arg)
}

pub fn maxpool2_backward<T: Real>(gy: &Array4<T>, arg: &[u8]) -> Array4<T> {
    let (n, c, oh, ow) = gy.dim();
    let (h, w) = (oh * 2, ow * 2);
    let gs = gy.as_slice().unwrap();
    let mut dx = Array4::<T>::zeros((n, c, h, w));
    let ds = dx.as_slice_mut().unwrap();
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = plane * oh * ow + oy * ow + ox;
                let (dy, ddx) = [(0, 0), (0, 1), (1, 0), (1, 1)][arg[o] as usize];
                ds[plane * h * w + (2 * oy + dy) * w + 2 * ox + ddx] = gs[o];
            }
        }
    }
    dx
}

pub fn upsample2_forward<T: Real>(x: &Array4<T>) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    Array4::from_shape_fn((n, c, 2 * h, 2 * w), |(i, ci, y, xx)| x[[i, ci, y / 2, xx / 2]])
}

pub fn upsample2_backward<T: Real>(gy: &Array4<T>) -> Array4<T> {
    let (n, c, h, w) = gy.dim();
    let mut dx = Array4::<T>::zeros((n, c, h / 2, w / 2));
    for ((i, ci, y, xx), &g) in gy.indexed_iter() {
        dx[[i, ci, y / 2, xx / 2]] += g;
    }
    dx
}

/// Inverted-dropout mask: entries are 0 or `1/(1-p)`.
pub fn dropout_mask<T: Real>(dim: (usize, usize, usize, usize), p: f64, seed: u64, layer: u64) -> Array4<T> {
    if p <= 0.0 {
        return Array4::from_elem(dim, T::one());
    }
    let mut r = rng::stream(seed, &[layer]);
    let keep = T::of(1.0 / (1.0 - p));
    let threshold = (p * 4_294_967_296.0) as u64;
    Array4::from_shape_simple_fn(dim, || {
        if (r.next_u32() as u64) >= threshold {
            keep
        } else {
            T::zero()
        }
    })
}

pub fn concat_channels<T: Real>(a: &Array4<T>, b: &Array4<T>) -> Array4<T> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()])
        .unwrap()
        .into_dimensionality::<Ix4>()
        .unwrap()
        .as_standard_layout()
        .into_owned()
}

pub fn split_channels<T: Real>(g: &Array4<T>, first: usize) -> (Array4<T>, Array4<T>) {
    let a = g.slice(ndarray::s![.., ..first, .., ..]).as_standard_layout().into_owned();
    let b = g.slice(ndarray::s![.., first.., .., ..]).as_standard_layout().into_owned();
    (a, b)
}
