//! im2col convolution, pooling, and the deterministic parallel GEMM helpers
//! the network kernels are built on.
//!
//! Parallel work is split into fixed, shape-derived chunks so results are
//! bitwise reproducible regardless of thread scheduling: every output element
//! is written by exactly one task and every reduction runs in a fixed order.

use super::Element;
use ndarray::linalg::general_mat_mul;
use ndarray::prelude::*;
use rayon::prelude::*;

/// Fixed fan-out for parallel GEMM splits. Chunk boundaries depend only on
/// shapes, never on the runtime thread count.
const GEMM_CHUNKS: usize = 4;

/// Memory cap (in elements) for one im2col buffer; batches are processed in
/// groups small enough to stay under it.
const COLS_CAP_ELEMS: usize = 16 * 1024 * 1024;

pub fn conv_out_dim(d: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(d + 2 * pad >= k, "kernel larger than padded input");
    (d + 2 * pad - k) / stride + 1
}

/// C[m,n] = A[m,k] · B[k,n], rows of A/C split across fixed chunks.
pub(crate) fn gemm_split_m<T: Element>(a: &ArrayView2<T>, b: &ArrayView2<T>, c: &mut Array2<T>) {
    let m = a.nrows();
    let chunk = m.div_ceil(GEMM_CHUNKS).max(8);
    if m <= chunk {
        general_mat_mul(T::one(), a, b, T::zero(), c);
        return;
    }
    let tasks: Vec<(ArrayView2<T>, ArrayViewMut2<T>)> = a
        .axis_chunks_iter(Axis(0), chunk)
        .zip(c.axis_chunks_iter_mut(Axis(0), chunk))
        .collect();
    tasks.into_par_iter().for_each(|(av, mut cv)| {
        general_mat_mul(T::one(), &av, b, T::zero(), &mut cv);
    });
}

/// C[m,n] = A[m,k] · B[k,n], columns of B/C split across fixed chunks.
pub(crate) fn gemm_split_n<T: Element>(a: &ArrayView2<T>, b: &ArrayView2<T>, c: &mut Array2<T>) {
    let n = b.ncols();
    let chunk = n.div_ceil(GEMM_CHUNKS).max(8);
    if n <= chunk {
        general_mat_mul(T::one(), a, b, T::zero(), c);
        return;
    }
    let tasks: Vec<(ArrayView2<T>, ArrayViewMut2<T>)> = b
        .axis_chunks_iter(Axis(1), chunk)
        .zip(c.axis_chunks_iter_mut(Axis(1), chunk))
        .collect();
    tasks.into_par_iter().for_each(|(bv, mut cv)| {
        general_mat_mul(T::one(), a, &bv, T::zero(), &mut cv);
    });
}

/// Parallel GEMM that splits the larger output axis, so the repeatedly
/// packed operand is the smaller one.
pub(crate) fn gemm_parallel<T: Element>(a: &ArrayView2<T>, b: &ArrayView2<T>, c: &mut Array2<T>) {
    let (m, n) = c.dim();
    if m >= n && m >= 64 {
        gemm_split_m(a, b, c);
    } else if n > m && n >= 64 {
        gemm_split_n(a, b, c);
    } else {
        general_mat_mul(T::one(), a, b, T::zero(), c);
    }
}

struct ConvGeom {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

fn geometry<T: Element>(x: &ArrayD<T>, wgt: &ArrayD<T>, stride: usize, pad: usize) -> ConvGeom {
    let xs = x.shape();
    let ws = wgt.shape();
    assert_eq!(xs.len(), 4, "conv input must be NCHW");
    assert_eq!(ws.len(), 4, "conv weight must be OIHW");
    assert_eq!(xs[1], ws[1], "channel mismatch: input {} vs weight {}", xs[1], ws[1]);
    ConvGeom {
        n: xs[0],
        c_in: xs[1],
        h: xs[2],
        w: xs[3],
        c_out: ws[0],
        kh: ws[2],
        kw: ws[3],
        oh: conv_out_dim(xs[2], ws[2], stride, pad),
        ow: conv_out_dim(xs[3], ws[3], stride, pad),
        stride,
        pad,
    }
}

fn group_size(g: &ConvGeom) -> usize {
    let kk = g.c_in * g.kh * g.kw;
    let per_sample = kk * g.oh * g.ow;
    (COLS_CAP_ELEMS / per_sample.max(1)).clamp(1, g.n)
}

/// Valid `ox` span for one kernel column: `ix = ox·s + kx − pad ∈ [0, w)`.
fn ox_bounds(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = if g.pad > kx {
        (g.pad - kx).div_ceil(g.stride)
    } else {
        0
    };
    // ox·s < w + pad − kx; saturate for kernels overhanging tiny maps
    let hi_excl = (g.w + g.pad).saturating_sub(kx);
    let hi = hi_excl.div_ceil(g.stride).min(g.ow);
    (lo.min(hi), hi)
}

/// Uninitialized matrix whose every element the caller promises to write.
fn uninit_matrix<T: Element>(rows: usize, cols: usize) -> Array2<T> {
    // Element types are plain scalars; treating the uninitialized buffer as
    // written-before-read is upheld by the fill logic of each user below.
    let v: Vec<T> = {
        let mut v = Vec::with_capacity(rows * cols);
        #[allow(clippy::uninit_vec)]
        unsafe {
            v.set_len(rows * cols);
        }
        v
    };
    Array2::from_shape_vec((rows, cols), v).expect("shape matches length")
}

/// Patch matrix in [C*KH*KW, group_rows] layout (rows over kernel positions,
/// columns over `(sample, oy, ox)` in order). Zero padding is materialized;
/// every element of the buffer is written (values or explicit zeros).
fn im2col<T: Element>(x: &ArrayD<T>, g: &ConvGeom, n0: usize, n1: usize) -> Array2<T> {
    let kk = g.c_in * g.kh * g.kw;
    let gr = (n1 - n0) * g.oh * g.ow;
    let mut cols = uninit_matrix::<T>(kk, gr);
    let xs = x.as_slice().expect("conv input must be standard layout");
    let (h, w, oh, ow, stride, pad) = (g.h, g.w, g.oh, g.ow, g.stride, g.pad);
    let plane = h * w;
    let sample_stride = g.c_in * plane;
    let zero = T::zero();

    let rows: Vec<(usize, &mut [T])> = cols
        .as_slice_mut()
        .unwrap()
        .chunks_mut(gr)
        .enumerate()
        .collect();
    rows.into_par_iter().for_each(|(j, dst)| {
        let ci = j / (g.kh * g.kw);
        let ky = (j / g.kw) % g.kh;
        let kx = j % g.kw;
        let (ox_lo, ox_hi) = ox_bounds(g, kx);
        for nl in 0..(n1 - n0) {
            let src_base = (n0 + nl) * sample_stride + ci * plane;
            for oy in 0..oh {
                let row_base = (nl * oh + oy) * ow;
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize || ox_hi <= ox_lo {
                    dst[row_base..row_base + ow].fill(zero);
                    continue;
                }
                // explicit zero padding outside the valid ox span
                dst[row_base..row_base + ox_lo].fill(zero);
                dst[row_base + ox_hi..row_base + ow].fill(zero);
                let src_row = src_base + iy as usize * w;
                if stride == 1 {
                    let ix0 = ox_lo + kx - pad;
                    dst[row_base + ox_lo..row_base + ox_hi]
                        .copy_from_slice(&xs[src_row + ix0..src_row + ix0 + (ox_hi - ox_lo)]);
                } else {
                    for ox in ox_lo..ox_hi {
                        let ix = ox * stride + kx - pad;
                        dst[row_base + ox] = xs[src_row + ix];
                    }
                }
            }
        }
    });
    cols
}

/// Forward convolution, no bias. Returns NCHW output in standard layout.
pub fn conv2d_forward<T: Element>(
    x: &ArrayD<T>,
    wgt: &ArrayD<T>,
    stride: usize,
    pad: usize,
) -> ArrayD<T> {
    let g = geometry(x, wgt, stride, pad);
    let kk = g.c_in * g.kh * g.kw;
    let w_mat = wgt.view().into_shape_with_order((g.c_out, kk)).unwrap();
    // every element is written by the per-sample copies below
    let mut out = uninit_matrix::<T>(g.n * g.c_out, g.oh * g.ow)
        .into_shape_with_order((g.n, g.c_out, g.oh, g.ow))
        .unwrap();
    let ohow = g.oh * g.ow;
    let gsz = group_size(&g);

    let mut n0 = 0;
    while n0 < g.n {
        let n1 = (n0 + gsz).min(g.n);
        let cols = im2col(x, &g, n0, n1);
        let gr = (n1 - n0) * ohow;
        // beta = 0 writes every element; no initialization needed
        let mut out_g = uninit_matrix::<T>(g.c_out, gr);
        gemm_parallel(&w_mat, &cols.view(), &mut out_g);
        // copy sample blocks (rows strided by gr) into contiguous output
        let src = out_g.as_slice().unwrap();
        let dst = out.as_slice_mut().unwrap();
        for nl in 0..(n1 - n0) {
            for co in 0..g.c_out {
                let s0 = co * gr + nl * ohow;
                let d0 = ((n0 + nl) * g.c_out + co) * ohow;
                dst[d0..d0 + ohow].copy_from_slice(&src[s0..s0 + ohow]);
            }
        }
        n0 = n1;
    }
    out.into_dyn()
}

/// Backward convolution. Returns `(dx, dw)`; `dx` is skipped when
/// `need_dx` is false (first layer of a network).
pub fn conv2d_backward<T: Element>(
    x: &ArrayD<T>,
    wgt: &ArrayD<T>,
    dy: &ArrayD<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> (Option<ArrayD<T>>, ArrayD<T>) {
    let g = geometry(x, wgt, stride, pad);
    let kk = g.c_in * g.kh * g.kw;
    let ohow = g.oh * g.ow;
    debug_assert_eq!(dy.shape(), [g.n, g.c_out, g.oh, g.ow]);
    let w_mat = wgt.view().into_shape_with_order((g.c_out, kk)).unwrap();
    let dys = dy.as_slice().expect("grad must be standard layout");

    let mut dw = Array2::<T>::zeros((g.c_out, kk));
    let mut dx = if need_dx {
        Some(ArrayD::<T>::zeros(x.raw_dim()))
    } else {
        None
    };
    let gsz = group_size(&g);

    let mut n0 = 0;
    while n0 < g.n {
        let n1 = (n0 + gsz).min(g.n);
        let gr = (n1 - n0) * ohow;
        // dy block as [c_out, group_rows], columns per sample in order;
        // fully written by the row copies
        let mut dy_g = uninit_matrix::<T>(g.c_out, gr);
        {
            let dst = dy_g.as_slice_mut().unwrap();
            for nl in 0..(n1 - n0) {
                for co in 0..g.c_out {
                    let s0 = ((n0 + nl) * g.c_out + co) * ohow;
                    let d0 = co * gr + nl * ohow;
                    dst[d0..d0 + ohow].copy_from_slice(&dys[s0..s0 + ohow]);
                }
            }
        }

        // weight gradient: dW += dy_g · cols^T (fixed per-group order)
        let cols = im2col(x, &g, n0, n1);
        let mut dw_g = uninit_matrix::<T>(g.c_out, kk);
        gemm_parallel(&dy_g.view(), &cols.t(), &mut dw_g);
        {
            let acc = dw.as_slice_mut().unwrap();
            let part = dw_g.as_slice().unwrap();
            for (a, p) in acc.iter_mut().zip(part) {
                *a = *a + *p;
            }
        }

        // input gradient: col2im(w^T · dy_g)
        if let Some(dx) = dx.as_mut() {
            let mut dx_cols = uninit_matrix::<T>(kk, gr);
            gemm_parallel(&w_mat.t(), &dy_g.view(), &mut dx_cols);
            let dxs = dx.as_slice_mut().unwrap();
            let plane = g.h * g.w;
            let sample_stride = g.c_in * plane;
            let dxc = dx_cols.as_slice().unwrap();
            let samples: Vec<(usize, &mut [T])> = dxs
                [n0 * sample_stride..n1 * sample_stride]
                .chunks_mut(sample_stride)
                .enumerate()
                .collect();
            samples.into_par_iter().for_each(|(nl, dst)| {
                for j in 0..kk {
                    let ci = j / (g.kh * g.kw);
                    let ky = (j / g.kw) % g.kh;
                    let kx = j % g.kw;
                    let (ox_lo, ox_hi) = ox_bounds(&g, kx);
                    if ox_hi <= ox_lo {
                        continue;
                    }
                    let src_row_base = j * gr + nl * ohow;
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = ci * plane + iy as usize * g.w;
                        let src_row = src_row_base + oy * g.ow;
                        if g.stride == 1 {
                            let ix0 = ox_lo + kx - g.pad;
                            let d = &mut dst[dst_row + ix0..dst_row + ix0 + (ox_hi - ox_lo)];
                            let s = &dxc[src_row + ox_lo..src_row + ox_hi];
                            for (dv, &sv) in d.iter_mut().zip(s) {
                                *dv = *dv + sv;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = ox * g.stride + kx - g.pad;
                                dst[dst_row + ix] = dst[dst_row + ix] + dxc[src_row + ox];
                            }
                        }
                    }
                }
            });
        }
        n0 = n1;
    }

    let dw = dw.into_shape_with_order((g.c_out, g.c_in, g.kh, g.kw)).unwrap();
    (dx, dw.into_dyn())
}

/// Max pooling forward. Returns the pooled map and per-output argmax indices
/// (linear `iy * W + ix` within each N×C plane). Ties pick the first element
/// in scan order.
pub fn maxpool_forward<T: Element>(
    x: &ArrayD<T>,
    k: usize,
    stride: usize,
    pad: usize,
) -> (ArrayD<T>, Vec<u32>) {
    let xs = x.shape();
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    let mut out = Array4::<T>::zeros((n, c, oh, ow));
    let mut idx = vec![0u32; n * c * oh * ow];
    let xsl = x.as_slice().expect("standard layout");
    let osl = out.as_slice_mut().unwrap();

    let planes: Vec<(usize, (&mut [T], &mut [u32]))> = osl
        .chunks_mut(oh * ow)
        .zip(idx.chunks_mut(oh * ow))
        .enumerate()
        .map(|(p, pair)| (p, pair))
        .collect();
    planes.into_par_iter().for_each(|(p, (oplane, iplane))| {
        let src = &xsl[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = 0u32;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let v = src[iy as usize * w + ix as usize];
                        if v > best {
                            best = v;
                            best_i = (iy as usize * w + ix as usize) as u32;
                        }
                    }
                }
                oplane[oy * ow + ox] = best;
                iplane[oy * ow + ox] = best_i;
            }
        }
    });
    (out.into_dyn(), idx)
}

pub fn maxpool_backward<T: Element>(
    dy: &ArrayD<T>,
    idx: &[u32],
    x_shape: &[usize],
) -> ArrayD<T> {
    let (h, w) = (x_shape[2], x_shape[3]);
    let dys = dy.as_slice().expect("standard layout");
    let ohow = dy.shape()[2] * dy.shape()[3];
    let mut dx = ArrayD::<T>::zeros(ndarray::IxDyn(x_shape));
    let dxs = dx.as_slice_mut().unwrap();
    let planes: Vec<(usize, &mut [T])> = dxs.chunks_mut(h * w).enumerate().collect();
    planes.into_par_iter().for_each(|(p, dplane)| {
        let g = &dys[p * ohow..(p + 1) * ohow];
        let ids = &idx[p * ohow..(p + 1) * ohow];
        for (gi, &target) in g.iter().zip(ids) {
            dplane[target as usize] = dplane[target as usize] + *gi;
        }
    });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn naive_conv(x: &ArrayD<f64>, w: &ArrayD<f64>, stride: usize, pad: usize) -> ArrayD<f64> {
        let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (co, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let oh = conv_out_dim(h, kh, stride, pad);
        let ow = conv_out_dim(wd, kw, stride, pad);
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[n, co, oh, ow]));
        for ni in 0..n {
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0
                                        && iy < h as isize
                                        && ix >= 0
                                        && ix < wd as isize
                                    {
                                        acc += x[[ni, c, iy as usize, ix as usize]]
                                            * w[[o, c, ky as usize, kx as usize]];
                                    }
                                }
                            }
                        }
                        out[[ni, o, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize]) -> ArrayD<f64> {
        let len: usize = shape.iter().product();
        ArrayD::from_shape_vec(
            IxDyn(shape),
            (0..len).map(|i| ((i * 37 % 19) as f64 - 9.0) / 7.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn conv_matches_naive_reference() {
        for &(stride, pad) in &[(1usize, 1usize), (2, 1), (2, 3), (1, 0), (1, 3), (3, 2)] {
            let x = ramp(&[2, 3, 9, 8]);
            let w = ramp(&[4, 3, 3, 3]);
            let got = conv2d_forward(&x, &w, stride, pad);
            let want = naive_conv(&x, &w, stride, pad);
            assert_eq!(got.shape(), want.shape());
            let err = (&got - &want).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-12, "stride={stride} pad={pad} err={err}");
        }
        // 7x7 stem-style kernel
        let x = ramp(&[1, 3, 16, 16]);
        let w = ramp(&[2, 3, 7, 7]);
        let got = conv2d_forward(&x, &w, 2, 3);
        let want = naive_conv(&x, &w, 2, 3);
        let err = (&got - &want).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-12, "stem case err={err}");
        // kernel overhanging a tiny map (attention conv on 2x2 features)
        let x = ramp(&[2, 2, 2, 2]);
        let w = ramp(&[1, 2, 7, 7]);
        let got = conv2d_forward(&x, &w, 1, 3);
        let want = naive_conv(&x, &w, 1, 3);
        let err = (&got - &want).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-12, "tiny-map case err={err}");
        let dy = ArrayD::from_elem(got.raw_dim(), 0.7);
        let (dx, _) = conv2d_backward(&x, &w, &dy, 1, 3, true);
        assert_eq!(dx.unwrap().shape(), x.shape());
    }

    #[test]
    fn backward_input_matches_transposed_scatter_reference() {
        // dL/dx for L = sum(conv(x, w)) equals conv of ones-grad; verify
        // against a scatter reference
        let x = ramp(&[2, 2, 7, 6]);
        let w = ramp(&[3, 2, 3, 3]);
        for &(stride, pad) in &[(1usize, 1usize), (2, 1)] {
            let y = conv2d_forward(&x, &w, stride, pad);
            let dy = ArrayD::from_elem(y.raw_dim(), 1.0);
            let (dx, dw) = conv2d_backward(&x, &w, &dy, stride, pad, true);
            let dx = dx.unwrap();
            // scatter reference
            let mut dx_ref = ArrayD::<f64>::zeros(x.raw_dim());
            let mut dw_ref = ArrayD::<f64>::zeros(w.raw_dim());
            let (oh, ow) = (y.shape()[2], y.shape()[3]);
            for ni in 0..2 {
                for o in 0..3 {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            for c in 0..2 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if iy >= 0 && iy < 7 && ix >= 0 && ix < 6 {
                                            dx_ref[[ni, c, iy as usize, ix as usize]] +=
                                                w[[o, c, ky, kx]];
                                            dw_ref[[o, c, ky, kx]] +=
                                                x[[ni, c, iy as usize, ix as usize]];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let ex = (&dx - &dx_ref).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let ew = (&dw - &dw_ref).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(ex < 1e-10 && ew < 1e-10, "stride={stride} ex={ex} ew={ew}");
        }
    }

    #[test]
    fn maxpool_matches_scalar_reference() {
        let x = ramp(&[2, 4, 7, 7]);
        let (out, idx) = maxpool_forward(&x, 3, 2, 1);
        assert_eq!(out.shape(), [2, 4, 4, 4]);
        // every recorded index points at a value equal to the output
        let xs = x.as_slice().unwrap();
        for (p, o) in out.iter().enumerate() {
            let plane = p / 16;
            let src = &xs[plane * 49..(plane + 1) * 49];
            assert_eq!(src[idx[p] as usize], *o);
        }
    }

    #[test]
    fn batch_grouping_is_transparent() {
        // force multi-group path by a batch larger than one group
        let x = ramp(&[5, 2, 6, 6]);
        let w = ramp(&[3, 2, 3, 3]);
        let full = conv2d_forward(&x, &w, 1, 1);
        for n in 0..5 {
            let xn = x
                .slice(s![n..n + 1, .., .., ..])
                .to_owned()
                .into_dyn();
            let single = conv2d_forward(&xn, &w, 1, 1);
            let err = (&single - &full.slice(s![n..n + 1, .., .., ..]))
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-12);
        }
    }
}
