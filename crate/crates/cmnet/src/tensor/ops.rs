//! Tape operations. Each constructor computes the value eagerly, pushes a
//! node, and registers a backward closure capturing parent ids plus whatever
//! small context the gradient needs (pooling argmaxes, batch-norm stats).
//!
//! Every tape value is kept in standard layout, so the hot elementwise
//! kernels run over contiguous slices.

use super::conv::{
    conv2d_backward, conv2d_forward, gemm_split_m, maxpool_backward, maxpool_forward,
};
use super::{Element, GradStore, NodeId, Tape};
use ndarray::prelude::*;
use ndarray::{ArrayD, IxDyn};
use rayon::prelude::*;
use std::rc::Rc;

fn val<'a, T: Element>(vals: &'a [Rc<ArrayD<T>>], id: NodeId) -> &'a ArrayD<T> {
    &vals[id.0]
}

/// Contiguous view of a standard-layout tape value.
fn vs<T: Element>(a: &ArrayD<T>) -> &[T] {
    a.as_slice().expect("tape values are standard layout")
}

fn vs_mut<T: Element>(a: &mut ArrayD<T>) -> &mut [T] {
    a.as_slice_mut().expect("tape values are standard layout")
}

fn scalar_node<T: Element>(v: T) -> ArrayD<T> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

/// Minimum element count before elementwise kernels go parallel.
const PAR_ELEMWISE: usize = 1 << 16;
const PAR_CHUNK: usize = 1 << 15;

fn binary_map<T: Element>(
    a: &ArrayD<T>,
    b: &ArrayD<T>,
    f: impl Fn(T, T) -> T + Sync + Send,
) -> ArrayD<T> {
    debug_assert_eq!(a.shape(), b.shape());
    let mut y = a.clone();
    let ys = vs_mut(&mut y);
    let bs = vs(b);
    if ys.len() >= PAR_ELEMWISE {
        ys.par_chunks_mut(PAR_CHUNK)
            .zip(bs.par_chunks(PAR_CHUNK))
            .for_each(|(yc, bc)| {
                for (yv, bv) in yc.iter_mut().zip(bc) {
                    *yv = f(*yv, *bv);
                }
            });
    } else {
        for (yv, bv) in ys.iter_mut().zip(bs) {
            *yv = f(*yv, *bv);
        }
    }
    y
}

fn unary_map_into<T: Element>(y: &mut ArrayD<T>, f: impl Fn(T) -> T + Sync + Send) {
    let ys = vs_mut(y);
    if ys.len() >= PAR_ELEMWISE {
        ys.par_chunks_mut(PAR_CHUNK).for_each(|c| {
            for v in c {
                *v = f(*v);
            }
        });
    } else {
        for v in ys {
            *v = f(*v);
        }
    }
}

pub fn add<T: Element>(tape: &mut Tape<T>, a: NodeId, b: NodeId) -> NodeId {
    assert_eq!(tape.value(a).shape(), tape.value(b).shape(), "add shape mismatch");
    let y = binary_map(tape.value(a), tape.value(b), |x, z| x + z);
    tape.push(
        y,
        Some(Box::new(move |_vals, g, grads: &mut GradStore<T>| {
            grads.add(a, g.clone());
            grads.add(b, g.clone());
        })),
    )
}

pub fn sub<T: Element>(tape: &mut Tape<T>, a: NodeId, b: NodeId) -> NodeId {
    assert_eq!(tape.value(a).shape(), tape.value(b).shape(), "sub shape mismatch");
    let y = binary_map(tape.value(a), tape.value(b), |x, z| x - z);
    tape.push(
        y,
        Some(Box::new(move |_vals, g, grads: &mut GradStore<T>| {
            grads.add(a, g.clone());
            let mut nb = g.clone();
            unary_map_into(&mut nb, |v| -v);
            grads.add(b, nb);
        })),
    )
}

pub fn mul<T: Element>(tape: &mut Tape<T>, a: NodeId, b: NodeId) -> NodeId {
    assert_eq!(tape.value(a).shape(), tape.value(b).shape(), "mul shape mismatch");
    let y = binary_map(tape.value(a), tape.value(b), |x, z| x * z);
    tape.push(
        y,
        Some(Box::new(move |vals, g, grads: &mut GradStore<T>| {
            grads.add(a, binary_map(g, val(vals, b), |gv, bv| gv * bv));
            grads.add(b, binary_map(g, val(vals, a), |gv, av| gv * av));
        })),
    )
}

pub fn scale<T: Element>(tape: &mut Tape<T>, x: NodeId, c: T) -> NodeId {
    let mut y = tape.value(x).clone();
    unary_map_into(&mut y, |v| v * c);
    tape.push(
        y,
        Some(Box::new(move |_vals, g, grads: &mut GradStore<T>| {
            let mut dx = g.clone();
            unary_map_into(&mut dx, |v| v * c);
            grads.add(x, dx);
        })),
    )
}

pub fn relu<T: Element>(tape: &mut Tape<T>, x: NodeId) -> NodeId {
    let mut y = tape.value(x).clone();
    unary_map_into(&mut y, |v| if v < T::zero() { T::zero() } else { v });
    tape.push(
        y,
        Some(Box::new(move |vals, g, grads: &mut GradStore<T>| {
            let dx = binary_map(g, val(vals, x), |gv, xv| {
                if xv <= T::zero() {
                    T::zero()
                } else {
                    gv
                }
            });
            grads.add(x, dx);
        })),
    )
}

pub fn sigmoid<T: Element>(tape: &mut Tape<T>, x: NodeId) -> NodeId {
    let mut y = tape.value(x).clone();
    unary_map_into(&mut y, stable_sigmoid);
    let y_rc = Rc::new(y);
    let y_for_back = Rc::clone(&y_rc);
    tape.push_shared(
        y_rc,
        Some(Box::new(move |_vals, g, grads: &mut GradStore<T>| {
            grads.add(
                x,
                binary_map(g, &y_for_back, |gv, yv| gv * yv * (T::one() - yv)),
            );
        })),
    )
}

pub(crate) fn stable_sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn exp<T: Element>(tape: &mut Tape<T>, x: NodeId) -> NodeId {
    let mut y = tape.value(x).clone();
    for v in vs_mut(&mut y) {
        *v = v.exp();
    }
    let y_rc = Rc::new(y);
    let y_for_back = Rc::clone(&y_rc);
    tape.push_shared(
        y_rc,
        Some(Box::new(move |_vals, g, grads: &mut GradStore<T>| {
            grads.add(x, binary_map(g, &y_for_back, |gv, yv| gv * yv));
        })),
    )
}

pub fn ln<T: Element>(tape: &mut Tape<T>, x: NodeId) -> NodeId {
    let mut y = tape.value(x).clone();
    for v in vs_mut(&mut y) {
        *v = v.ln();
    }
    tape.push(
        y,
        Some(Box::new(move |vals, g, grads: &mut GradStore<T>| {
            grads.add(x, binary_map(g, val(vals, x), |gv, xv| gv / xv));
        })),
    )
}

/// Elementwise maximum. Ties route the gradient to `a`.
pub fn maximum<T: Element>(tape: &mut Tape<T>, a: NodeId, b: NodeId) -> NodeId {
    assert_eq!(tape.value(a).shape(), tape.value(b).shape());
    let y = binary_map(tape.value(a), tape.value(b), |x, z| if z > x { z } else { x });
    tape.push(
        y,
        Some(Box::new(move |vals, g, grads: &mut GradStore<T>| {
            let av = vs(val(vals, a));
            let bv = vs(val(vals, b));
            let gsl = vs(g);
            let mut da = g.clone();
            let mut db = g.clone();
            {
                let das = vs_mut(&mut da);
                let dbs = vs_mut(&mut db);
                for i in 0..gsl.len() {
                    if av[i] >= bv[i] {
                        dbs[i] = T::zero();
                    } else {
                        das[i] = T::zero();
                    }
                }
            }
            grads.add(a, da);
            grads.add(b, db);
        })),
    )
}

/// 2-D convolution, no bias. `need_dx = false` skips the input gradient
/// (used by stem layers when nothing upstream is differentiated).
pub fn conv2d<T: Element>(
    tape: &mut Tape<T>,
    x: NodeId,
    w: NodeId,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> NodeId {
    let y = conv2d_forward(tape.value(x), tape.value(w), stride, pad);
    tape.push(
        y,
        Some(Box::new(move |vals, g, grads: &mut GradStore<T>| {
            let (dx, dw) = conv2d_backward(val(vals, x), val(vals, w), g, stride, pad, need_dx);
            if let Some(dx) = dx {
                grads.add(x, dx);
            }
            grads.add(w, dw);
        })),
    )
}

/// Affine map on 2-D activations: `y = x·wᵀ + b` with `w: [out, in]`.
pub fn linear<T: Element>(tape: &mut Tape<T>, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
    let xv = tape.value(x).view().into_dimensionality::<Ix2>().unwrap();
    let wv = tape.value(w).view().into_dimensionality::<Ix2>().unwrap();
    let bv = tape.value(b).view().into_dimensionality::<Ix1>().unwrap();
    let mut y = Array2::<T>::zeros((xv.nrows(), wv.nrows()));
    gemm_split_m(&xv, &wv.t(), &mut y);
    y += &bv;
    tape.push(
        y.into_dyn(),
        Some(Box::new(move |vals, g, grads: &mut GradStore<T>| {
            let gv = g.view().into_dimensionality::<Ix2>().unwrap();
            let xv = val(vals, x).view().into_dimensionality::<Ix2>().unwrap();
            let wv = val(vals, w).view().into_dimensionality::<Ix2>().unwrap();
            let mut dx = Array2::<T>::zeros(xv.raw_dim());
            gemm_split_m(&gv, &wv, &mut dx);
            let mut dw = Array2::<T>::zeros(wv.raw_dim());
            gemm_split_m(&gv.t(), &xv, &mut dw);
            let db = gv.sum_axis(Axis(0));
            grads.add(x, dx.into_dyn());
            grads.add(w, dw.into_dyn());
            grads.add(b, db.into_dyn());
        })),
    )
}

/// Batch statistics produced by a training-mode batch norm, used by the
/// layer to update its running buffers.
pub struct BnBatchStats<T> {
    pub mean: Array1<T>,
    pub var_biased: Array1<T>,
    pub var_unbiased: Array1<T>,
}

struct PlaneDims {
    n: usize,
    c: usize,
    plane: usize,
}

fn plane_dims<T: Element>(x: &ArrayD<T>) -> PlaneDims {
    let s = x.shape();
    PlaneDims {
        n: s[0],
        c: s[1],
        plane: s[2] * s[3],
    }
}

/// Training-mode batch normalization (normalizes with batch statistics).
pub fn batchnorm_train<T: Element>(
    tape: &mut Tape<T>,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    eps: f64,
) -> (NodeId, BnBatchStats<T>) {
    let xv = tape.value(x);
    let d = plane_dims(xv);
    let m = (d.n * d.plane) as f64;
    let xs = vs(xv);

    // per-channel batch statistics: parallel per-plane partial sums, then a
    // fixed-order per-channel reduction (deterministic)
    let partials: Vec<(f64, f64)> = xs
        .par_chunks(d.plane)
        .map(|plane| {
            let mut sum = 0.0f64;
            let mut sumsq = 0.0f64;
            for &v in plane {
                let v = v.as_f64();
                sum += v;
                sumsq += v * v;
            }
            (sum, sumsq)
        })
        .collect();
    let mut mean = vec![0.0f64; d.c];
    let mut var = vec![0.0f64; d.c];
    for ci in 0..d.c {
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for ni in 0..d.n {
            let (s, sq) = partials[ni * d.c + ci];
            sum += s;
            sumsq += sq;
        }
        let mu = sum / m;
        mean[ci] = mu;
        var[ci] = (sumsq / m - mu * mu).max(0.0);
    }
    let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

    let gv = tape.value(gamma).view().into_dimensionality::<Ix1>().unwrap().to_owned();
    let bv = tape.value(beta).view().into_dimensionality::<Ix1>().unwrap().to_owned();
    let scale: Vec<T> = (0..d.c)
        .map(|ci| T::cast(gv[ci].as_f64() * invstd[ci]))
        .collect();
    let shift: Vec<T> = (0..d.c)
        .map(|ci| T::cast(bv[ci].as_f64() - gv[ci].as_f64() * invstd[ci] * mean[ci]))
        .collect();
    let mut y = ArrayD::<T>::zeros(xv.raw_dim());
    {
        let ys = vs_mut(&mut y);
        ys.par_chunks_mut(d.plane).enumerate().for_each(|(p, out)| {
            let ci = p % d.c;
            let (a, b) = (scale[ci], shift[ci]);
            let src = &xs[p * d.plane..(p + 1) * d.plane];
            for (yv, &xv) in out.iter_mut().zip(src) {
                *yv = xv * a + b;
            }
        });
    }

    let mean_b = mean.clone();
    let invstd_b = invstd.clone();
    let node = tape.push(
        y,
        Some(Box::new(move |vals, g, grads: &mut GradStore<T>| {
            let xv = val(vals, x);
            let d = plane_dims(xv);
            let m = (d.n * d.plane) as f64;
            let gamma_v = val(vals, gamma).view().into_dimensionality::<Ix1>().unwrap();
            let xs = vs(xv);
            let gs = vs(g);
            let mut dgamma = Array1::<T>::zeros(d.c);
            let mut dbeta = Array1::<T>::zeros(d.c);
            // pass 1: parallel per-plane partials of Σdy and Σdy·x,
            // fixed-order per-channel combine
            let partials: Vec<(f64, f64)> = gs
                .par_chunks(d.plane)
                .zip(xs.par_chunks(d.plane))
                .map(|(gp, xp)| {
                    let mut s = 0.0f64;
                    let mut sx = 0.0f64;
                    for (gv_i, xv_i) in gp.iter().zip(xp) {
                        let dy = gv_i.as_f64();
                        s += dy;
                        sx += dy * xv_i.as_f64();
                    }
                    (s, sx)
                })
                .collect();
            let mut coef = vec![(T::zero(), T::zero(), T::zero()); d.c];
            for ci in 0..d.c {
                let mu = mean_b[ci];
                let inv = invstd_b[ci];
                let mut sum_dy = 0.0f64;
                let mut sum_dyx = 0.0f64;
                for ni in 0..d.n {
                    let (s, sx) = partials[ni * d.c + ci];
                    sum_dy += s;
                    sum_dyx += sx;
                }
                let sum_dy_xhat = inv * (sum_dyx - mu * sum_dy);
                dgamma[ci] = T::cast(sum_dy_xhat);
                dbeta[ci] = T::cast(sum_dy);
                let k = gamma_v[ci].as_f64() * inv;
                coef[ci] = (
                    T::cast(k),
                    T::cast(-k * inv * sum_dy_xhat / m),
                    T::cast(-k * sum_dy / m + k * inv * mu * sum_dy_xhat / m),
                );
            }
            // pass 2: dx = A·dy + B·x + C, parallel per plane
            let mut dx = ArrayD::<T>::zeros(xv.raw_dim());
            {
                let dxs = vs_mut(&mut dx);
                dxs.par_chunks_mut(d.plane).enumerate().for_each(|(p, out)| {
                    let (a, b, c0) = coef[p % d.c];
                    let gp = &gs[p * d.plane..(p + 1) * d.plane];
                    let xp = &xs[p * d.plane..(p + 1) * d.plane];
                    for i in 0..out.len() {
                        out[i] = a * gp[i] + b * xp[i] + c0;
                    }
                });
            }
            grads.add(x, dx);
            grads.add(gamma, dgamma.into_dyn());
            grads.add(beta, dbeta.into_dyn());
        })),
    );

    let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
    let stats = BnBatchStats {
        mean: Array1::from_vec(mean.iter().map(|&v| T::cast(v)).collect()),
        var_biased: Array1::from_vec(var.iter().map(|&v| T::cast(v)).collect()),
        var_unbiased: Array1::from_vec(var.iter().map(|&v| T::cast(v * unbias)).collect()),
    };
    (node, stats)
}

/// Inference-mode batch normalization using running statistics.
pub fn batchnorm_eval<T: Element>(
    tape: &mut Tape<T>,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    running_mean: &Array1<T>,
    running_var: &Array1<T>,
    eps: f64,
) -> NodeId {
    let xv = tape.value(x);
    let d = plane_dims(xv);
    let xs = vs(xv);
    let gv = tape.value(gamma).view().into_dimensionality::<Ix1>().unwrap().to_owned();
    let bv = tape.value(beta).view().into_dimensionality::<Ix1>().unwrap().to_owned();
    let invstd: Vec<f64> = running_var
        .iter()
        .map(|v| 1.0 / (v.as_f64() + eps).sqrt())
        .collect();
    let mean: Vec<f64> = running_mean.iter().map(|v| v.as_f64()).collect();

    let mut y = ArrayD::<T>::zeros(xv.raw_dim());
    {
        let ys = vs_mut(&mut y);
        for ni in 0..d.n {
            for ci in 0..d.c {
                let base = (ni * d.c + ci) * d.plane;
                let a = T::cast(gv[ci].as_f64() * invstd[ci]);
                let b = T::cast(bv[ci].as_f64() - gv[ci].as_f64() * invstd[ci] * mean[ci]);
                for (yv, &xv) in ys[base..base + d.plane].iter_mut().zip(&xs[base..base + d.plane]) {
                    *yv = xv * a + b;
                }
            }
        }
    }

    let invstd_b = invstd;
    let mean_b = mean;
    tape.push(
        y,
        Some(Box::new(move |vals, g, grads: &mut GradStore<T>| {
            let xv = val(vals, x);
            let d = plane_dims(xv);
            let gamma_v = val(vals, gamma).view().into_dimensionality::<Ix1>().unwrap();
            let xs = vs(xv);
            let gs = vs(g);
            let mut dgamma = Array1::<T>::zeros(d.c);
            let mut dbeta = Array1::<T>::zeros(d.c);
            let mut dx = ArrayD::<T>::zeros(xv.raw_dim());
            let dxs = vs_mut(&mut dx);
            for ci in 0..d.c {
                let inv = invstd_b[ci];
                let mu = mean_b[ci];
                let k = T::cast(gamma_v[ci].as_f64() * inv);
                let mut sum_dy = 0.0f64;
                let mut sum_dyx = 0.0f64;
                for ni in 0..d.n {
                    let base = (ni * d.c + ci) * d.plane;
                    for i in base..base + d.plane {
                        let dy = gs[i].as_f64();
                        sum_dy += dy;
                        sum_dyx += dy * xs[i].as_f64();
                        dxs[i] = k * gs[i];
                    }
                }
                dgamma[ci] = T::cast(inv * (sum_dyx - mu * sum_dy));
                dbeta[ci] = T::cast(sum_dy);
            }
            grads.add(x, dx);
            grads.add(gamma, dgamma.into_dyn());
            grads.add(beta, dbeta.into_dyn());
        })),
    )
}

pub fn maxpool<T: Element>(
    tape: &mut Tape<T>,
    x: NodeId,
    k: usize,
    stride: usize,
    pad: usize,
) -> NodeId {
    let (y, idx) = maxpool_forward(tape.value(x), k, stride, pad);
    let x_shape: Vec<usize> = tape.value(x).shape().to_vec();
    tape.push(
        y,
        Some(Box::new(move |_vals, g, grads: &mut GradStore<T>| {
            grads.add(x, maxpool_backward(g, &idx, &x_shape));
        })),
    )
}

/// Global average pooling: N×C×H×W → N×C.
pub fn gap<T: Element>(tape: &mut Tape<T>, x: NodeId) -> NodeId {
    let xv = tape.value(x);
    let d = plane_dims(xv);
    let area = T::cast(d.plane as f64);
    let xs = vs(xv);
    let mut y = Array2::<T>::zeros((d.n, d.c));
    for p in 0..d.n * d.c {
        let sum: T = xs[p * d.plane..(p + 1) * d.plane].iter().copied().sum();
        y[[p / d.c, p % d.c]] = sum / area;
    }
    let x_shape = xv.shape().to_vec();
    tape.push(
        y.into_dyn(),
        Some(Box::new(move |_vals, g, grads: &mut GradStore<T>| {
            let gv = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut dx = ArrayD::<T>::zeros(IxDyn(&x_shape));
            let plane = x_shape[2] * x_shape[3];
            let c = x_shape[1];
            let dxs = vs_mut(&mut dx);
            for p in 0..x_shape[0] * c {
                let gval = gv[[p / c, p % c]] / area;
                for v in &mut dxs[p * plane..(p + 1) * plane] {
                    *v = gval;
                }
            }
            grads.add(x, dx);
        })),
    )
}

/// Global max pooling: N×C×H×W → N×C. Ties pick the first element.
pub fn global_max_pool<T: Element>(tape: &mut Tape<T>, x: NodeId) -> NodeId {
    let xv = tape.value(x);
    let d = plane_dims(xv);
    let xs = vs(xv);
    let mut y = Array2::<T>::zeros((d.n, d.c));
    let mut idx = vec![0u32; d.n * d.c];
    for p in 0..d.n * d.c {
        let src = &xs[p * d.plane..(p + 1) * d.plane];
        let mut best = src[0];
        let mut bi = 0u32;
        for (i, &v) in src.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                bi = i as u32;
            }
        }
        y[[p / d.c, p % d.c]] = best;
        idx[p] = bi;
    }
    let x_shape = xv.shape().to_vec();
    tape.push(
        y.into_dyn(),
        Some(Box::new(move |_vals, g, grads: &mut GradStore<T>| {
            let gv = g.view().into_dimensionality::<Ix2>().unwrap();
            let mut dx = ArrayD::<T>::zeros(IxDyn(&x_shape));
            let plane = x_shape[2] * x_shape[3];
            let c = x_shape[1];
            let dxs = vs_mut(&mut dx);
            for p in 0..x_shape[0] * c {
                dxs[p * plane + idx[p] as usize] = gv[[p / c, p % c]];
            }
            grads.add(x, dx);
        })),
    )
}

/// Mean over channels, keeping the axis: N×C×H×W → N×1×H×W.
pub fn channel_mean<T: Element>(tape: &mut Tape<T>, x: NodeId) -> NodeId {
    let xv = tape.value(x);
    let d = plane_dims(xv);
    let inv = T::cast(1.0 / d.c as f64);
    let xs = vs(xv);
    let mut y = Array4::<T>::zeros((d.n, 1, xv.shape()[2], xv.shape()[3]));
    {
        let ys = y.as_slice_mut().unwrap();
        for ni in 0..d.n {
            let out = &mut ys[ni * d.plane..(ni + 1) * d.plane];
            for ci in 0..d.c {
                let base = (ni * d.c + ci) * d.plane;
                for (o, &v) in out.iter_mut().zip(&xs[base..base + d.plane]) {
                    *o = *o + v * inv;
                }
            }
        }
    }
    let x_shape = xv.shape().to_vec();
    tape.push(
        y.into_dyn(),
        Some(Box::new(move |_vals, g, grads: &mut GradStore<T>| {
            let gs = vs(g);
            let mut dx = ArrayD::<T>::zeros(IxDyn(&x_shape));
            let (c, plane) = (x_shape[1], x_shape[2] * x_shape[3]);
            let dxs = vs_mut(&mut dx);
            for ni in 0..x_shape[0] {
                let gplane = &gs[ni * plane..(ni + 1) * plane];
                for ci in 0..c {
                    let base = (ni * c + ci) * plane;
                    for (d, &gv) in dxs[base..base + plane].iter_mut().zip(gplane) {
                        *d = gv * inv;
                    }
                }
            }
            grads.add(x, dx);
        })),
    )
}

/// Max over channels, keeping the axis: N×C×H×W → N×1×H×W.
pub fn channel_max<T: Element>(tape: &mut Tape<T>, x: NodeId) -> NodeId {
    let xv = tape.value(x);
    let d = plane_dims(xv);
    let xs = vs(xv);
    let mut y = Array4::<T>::zeros((d.n, 1, xv.shape()[2], xv.shape()[3]));
    let mut idx = vec![0u32; d.n * d.plane];
    {
        let ys = y.as_slice_mut().unwrap();
        for ni in 0..d.n {
            for off in 0..d.plane {
                let mut best = xs[(ni * d.c) * d.plane + off];
                let mut bc = 0u32;
                for ci in 1..d.c {
                    let v = xs[(ni * d.c + ci) * d.plane + off];
                    if v > best {
                        best = v;
                        bc = ci as u32;
                    }
                }
                ys[ni * d.plane + off] = best;
                idx[ni * d.plane + off] = bc;
            }
        }
    }
    let x_shape = xv.shape().to_vec();
    tape.push(
        y.into_dyn(),
        Some(Box::new(move |_vals, g, grads: &mut GradStore<T>| {
            let gs = vs(g);
            let mut dx = ArrayD::<T>::zeros(IxDyn(&x_shape));
            let (c, plane) = (x_shape[1], x_shape[2] * x_shape[3]);
            let dxs = vs_mut(&mut dx);
            for ni in 0..x_shape[0] {
                for off in 0..plane {
                    let bc = idx[ni * plane + off] as usize;
                    dxs[(ni * c + bc) * plane + off] = gs[ni * plane + off];
                }
            }
            grads.add(x, dx);
        })),
    )
}

/// Concatenate along `axis`.
pub fn concat<T: Element>(tape: &mut Tape<T>, axis: usize, parts: &[NodeId]) -> NodeId {
    assert!(!parts.is_empty());
    let views: Vec<_> = parts.iter().map(|&p| tape.value(p).view()).collect();
    let y = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
    let parts_owned: Vec<NodeId> = parts.to_vec();
    let widths: Vec<usize> = parts.iter().map(|&p| tape.value(p).shape()[axis]).collect();
    let y = y.as_standard_layout().to_owned();
    tape.push(
        y,
        Some(Box::new(move |_vals, g, grads: &mut GradStore<T>| {
            let mut off = 0;
            for (pid, width) in parts_owned.iter().zip(&widths) {
                let part = g
                    .slice_axis(Axis(axis), ndarray::Slice::from(off..off + width))
                    .as_standard_layout()
                    .to_owned();
                grads.add(*pid, part);
                off += width;
            }
        })),
    )
}

/// Hyperrectangle slice `x[lo..hi]` along every axis.
pub fn slice<T: Element>(tape: &mut Tape<T>, x: NodeId, lo: &[usize], hi: &[usize]) -> NodeId {
    let xv = tape.value(x);
    assert_eq!(lo.len(), xv.ndim());
    assert_eq!(hi.len(), xv.ndim());
    let info: Vec<ndarray::SliceInfoElem> = lo
        .iter()
        .zip(hi)
        .map(|(&l, &h)| ndarray::SliceInfoElem::Slice {
            start: l as isize,
            end: Some(h as isize),
            step: 1,
        })
        .collect();
    let y = xv.slice(info.as_slice()).as_standard_layout().to_owned();
    let x_shape = xv.shape().to_vec();
    let lo_v = lo.to_vec();
    let hi_v = hi.to_vec();
    tape.push(
        y,
        Some(Box::new(move |_vals, g, grads: &mut GradStore<T>| {
            let mut dx = ArrayD::<T>::zeros(IxDyn(&x_shape));
            let info: Vec<ndarray::SliceInfoElem> = lo_v
                .iter()
                .zip(&hi_v)
                .map(|(&l, &h)| ndarray::SliceInfoElem::Slice {
                    start: l as isize,
                    end: Some(h as isize),
                    step: 1,
                })
                .collect();
            dx.slice_mut(info.as_slice()).assign(g);
            grads.add(x, dx);
        })),
    )
}

pub fn sum_all<T: Element>(tape: &mut Tape<T>, x: NodeId) -> NodeId {
    let s: T = vs(tape.value(x)).iter().copied().sum();
    let shape = tape.value(x).raw_dim();
    tape.push(
        scalar_node(s),
        Some(Box::new(move |_vals, g, grads: &mut GradStore<T>| {
            let gv = *g.iter().next().unwrap();
            grads.add(x, ArrayD::from_elem(shape.clone(), gv));
        })),
    )
}

pub fn mean_all<T: Element>(tape: &mut Tape<T>, x: NodeId) -> NodeId {
    let len = tape.value(x).len();
    let inv = T::cast(1.0 / len as f64);
    let s: T = vs(tape.value(x)).iter().copied().sum();
    let shape = tape.value(x).raw_dim();
    tape.push(
        scalar_node(s * inv),
        Some(Box::new(move |_vals, g, grads: &mut GradStore<T>| {
            let gv = *g.iter().next().unwrap() * inv;
            grads.add(x, ArrayD::from_elem(shape.clone(), gv));
        })),
    )
}

/// Per-channel gating: `y[n,c,h,w] = x[n,c,h,w] · gate[n,c]`.
pub fn scale_channels<T: Element>(tape: &mut Tape<T>, x: NodeId, gate: NodeId) -> NodeId {
    let xv = tape.value(x);
    let d = plane_dims(xv);
    let gatev = tape.value(gate).view().into_dimensionality::<Ix2>().unwrap();
    assert_eq!(gatev.dim(), (d.n, d.c));
    let xs = vs(xv);
    let mut y = ArrayD::<T>::zeros(xv.raw_dim());
    {
        let ys = vs_mut(&mut y);
        for p in 0..d.n * d.c {
            let gv = gatev[[p / d.c, p % d.c]];
            for (o, &v) in ys[p * d.plane..(p + 1) * d.plane].iter_mut().zip(&xs[p * d.plane..(p + 1) * d.plane]) {
                *o = v * gv;
            }
        }
    }
    tape.push(
        y,
        Some(Box::new(move |vals, g, grads: &mut GradStore<T>| {
            let xv = val(vals, x);
            let d = plane_dims(xv);
            let gatev = val(vals, gate).view().into_dimensionality::<Ix2>().unwrap();
            let xs = vs(xv);
            let gs = vs(g);
            let mut dx = ArrayD::<T>::zeros(xv.raw_dim());
            let mut dgate = Array2::<T>::zeros((d.n, d.c));
            {
                let dxs = vs_mut(&mut dx);
                for p in 0..d.n * d.c {
                    let gv = gatev[[p / d.c, p % d.c]];
                    let mut acc = T::zero();
                    for i in p * d.plane..(p + 1) * d.plane {
                        dxs[i] = gs[i] * gv;
                        acc = acc + gs[i] * xs[i];
                    }
                    dgate[[p / d.c, p % d.c]] = acc;
                }
            }
            grads.add(x, dx);
            grads.add(gate, dgate.into_dyn());
        })),
    )
}

/// Per-location gating: `y[n,c,h,w] = x[n,c,h,w] · gate[n,0,h,w]`.
pub fn scale_spatial<T: Element>(tape: &mut Tape<T>, x: NodeId, gate: NodeId) -> NodeId {
    let xv = tape.value(x);
    let d = plane_dims(xv);
    let gshape = tape.value(gate).shape().to_vec();
    assert_eq!(gshape, [d.n, 1, xv.shape()[2], xv.shape()[3]]);
    let xs = vs(xv);
    let gs = vs(tape.value(gate));
    let mut y = ArrayD::<T>::zeros(xv.raw_dim());
    {
        let ys = vs_mut(&mut y);
        for ni in 0..d.n {
            let splane = &gs[ni * d.plane..(ni + 1) * d.plane];
            for ci in 0..d.c {
                let base = (ni * d.c + ci) * d.plane;
                for (i, &sv) in splane.iter().enumerate() {
                    ys[base + i] = xs[base + i] * sv;
                }
            }
        }
    }
    tape.push(
        y,
        Some(Box::new(move |vals, g, grads: &mut GradStore<T>| {
            let xv = val(vals, x);
            let d = plane_dims(xv);
            let gatev = val(vals, gate);
            let xs = vs(xv);
            let ss = vs(gatev);
            let gs = vs(g);
            let mut dx = ArrayD::<T>::zeros(xv.raw_dim());
            let mut dgate = ArrayD::<T>::zeros(gatev.raw_dim());
            {
                let dxs = vs_mut(&mut dx);
                let dss = vs_mut(&mut dgate);
                for ni in 0..d.n {
                    let splane = &ss[ni * d.plane..(ni + 1) * d.plane];
                    let dsplane = &mut dss[ni * d.plane..(ni + 1) * d.plane];
                    for ci in 0..d.c {
                        let base = (ni * d.c + ci) * d.plane;
                        for i in 0..d.plane {
                            dxs[base + i] = gs[base + i] * splane[i];
                            dsplane[i] = dsplane[i] + gs[base + i] * xs[base + i];
                        }
                    }
                }
            }
            grads.add(x, dx);
            grads.add(gate, dgate);
        })),
    )
}

/// Mean cross-entropy over the batch with a stable log-sum-exp.
pub fn cross_entropy<T: Element>(tape: &mut Tape<T>, logits: NodeId, labels: &[usize]) -> NodeId {
    let lv = tape.value(logits).view().into_dimensionality::<Ix2>().unwrap();
    let (n, k) = lv.dim();
    assert_eq!(labels.len(), n, "labels/batch mismatch");
    assert!(labels.iter().all(|&y| y < k), "label out of range");
    let mut total = 0.0f64;
    for (row, &y) in lv.outer_iter().zip(labels) {
        let mx = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let lse = mx
            + row
                .iter()
                .map(|v| (v.as_f64() - mx).exp())
                .sum::<f64>()
                .ln();
        total += lse - row[y].as_f64();
    }
    let labels_v = labels.to_vec();
    tape.push(
        scalar_node(T::cast(total / n as f64)),
        Some(Box::new(move |vals, g, grads: &mut GradStore<T>| {
            let lv = val(vals, logits).view().into_dimensionality::<Ix2>().unwrap();
            let gscale = g.iter().next().unwrap().as_f64() / lv.nrows() as f64;
            let mut dl = Array2::<T>::zeros(lv.raw_dim());
            for (i, (row, &y)) in lv.outer_iter().zip(&labels_v).enumerate() {
                let mx = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
                let denom: f64 = row.iter().map(|v| (v.as_f64() - mx).exp()).sum();
                for (j, v) in row.iter().enumerate() {
                    let p = (v.as_f64() - mx).exp() / denom;
                    let delta = if j == y { 1.0 } else { 0.0 };
                    dl[[i, j]] = T::cast((p - delta) * gscale);
                }
            }
            grads.add(logits, dl.into_dyn());
        })),
    )
}

/// Sum of one logit column over the batch; the saliency target score.
pub fn column_sum<T: Element>(tape: &mut Tape<T>, logits: NodeId, class: usize) -> NodeId {
    let lv = tape.value(logits).view().into_dimensionality::<Ix2>().unwrap();
    assert!(class < lv.ncols());
    let s: T = lv.column(class).iter().copied().sum();
    let shape = lv.raw_dim();
    tape.push(
        scalar_node(s),
        Some(Box::new(move |_vals, g, grads: &mut GradStore<T>| {
            let gv = *g.iter().next().unwrap();
            let mut dl = Array2::<T>::zeros(shape.clone());
            dl.column_mut(class).fill(gv);
            grads.add(logits, dl.into_dyn());
        })),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check::{numeric_gradient, rel_err};
    use ndarray::IxDyn;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        let len: usize = shape.iter().product();
        ArrayD::from_shape_vec(
            IxDyn(shape),
            (0..len).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect(),
        )
        .unwrap()
    }

    /// Generic gradient check: builds `g(x)` on a tape, compares analytic
    /// grads at sampled coordinates against central differences.
    fn check_op(
        shape: &[usize],
        seed: u64,
        tol: f64,
        build: impl Fn(&mut Tape<f64>, NodeId) -> NodeId,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = randn(&mut rng, shape);
        let mut tape = Tape::new(true);
        let x = tape.leaf(x0.clone());
        let y = build(&mut tape, x);
        assert_eq!(tape.value(y).ndim(), 0, "check target must be scalar");
        let grads = tape.backward(y);
        let analytic = grads.get(x).expect("grad at input");

        let f = |arr: &ArrayD<f64>| {
            let mut t = Tape::new(false);
            let xi = t.leaf(arr.clone());
            let yi = build(&mut t, xi);
            t.scalar_value(yi)
        };
        let coords: Vec<usize> = (0..x0.len()).step_by((x0.len() / 11).max(1)).collect();
        let numeric = numeric_gradient(&f, &x0, &coords, 1e-6);
        for (ci, &coord) in coords.iter().enumerate() {
            let a = analytic.as_slice().unwrap()[coord];
            let e = rel_err(a, numeric[ci]);
            assert!(e < tol, "coord {coord}: analytic {a} vs numeric {} ({e})", numeric[ci]);
        }
    }

    #[test]
    fn grad_relu_sigmoid_exp_ln_chain() {
        check_op(&[3, 4], 1, 1e-6, |t, x| {
            let a = sigmoid(t, x);
            let b = exp(t, a);
            let c = ln(t, b); // = a
            let d = relu(t, c);
            mean_all(t, d)
        });
    }

    #[test]
    fn grad_mul_add_sub_maximum() {
        check_op(&[5, 3], 2, 1e-6, |t, x| {
            let a = scale(t, x, 0.7);
            let b = mul(t, x, a);
            let c = sub(t, b, x);
            let d = add(t, c, b);
            let e = maximum(t, d, c);
            sum_all(t, e)
        });
    }

    #[test]
    fn grad_conv_full() {
        // d(sum(conv(x, w)))/dx and /dw
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = randn(&mut rng, &[2, 3, 6, 5]);
        let w0 = randn(&mut rng, &[4, 3, 3, 3]);
        for target in 0..2 {
            let build = |t: &mut Tape<f64>, xi: NodeId, wi: NodeId| {
                let y = conv2d(t, xi, wi, 2, 1, true);
                let y = sigmoid(t, y);
                sum_all(t, y)
            };
            let mut tape = Tape::new(true);
            let xi = tape.leaf(x0.clone());
            let wi = tape.leaf(w0.clone());
            let y = build(&mut tape, xi, wi);
            let grads = tape.backward(y);
            let (probe0, analytic) = if target == 0 {
                (x0.clone(), grads.get(xi).unwrap().clone())
            } else {
                (w0.clone(), grads.get(wi).unwrap().clone())
            };
            let f = |arr: &ArrayD<f64>| {
                let mut t = Tape::new(false);
                let (a, b) = if target == 0 {
                    (t.leaf(arr.clone()), t.leaf(w0.clone()))
                } else {
                    (t.leaf(x0.clone()), t.leaf(arr.clone()))
                };
                let y = build(&mut t, a, b);
                t.scalar_value(y)
            };
            let coords: Vec<usize> = (0..probe0.len()).step_by(17).collect();
            let numeric = numeric_gradient(&f, &probe0, &coords, 1e-6);
            for (ci, &coord) in coords.iter().enumerate() {
                let a = analytic.as_slice().unwrap()[coord];
                assert!(
                    rel_err(a, numeric[ci]) < 1e-5,
                    "target {target} coord {coord}: {a} vs {}",
                    numeric[ci]
                );
            }
        }
    }

    #[test]
    fn grad_batchnorm_train() {
        check_op(&[3, 4, 5, 2], 4, 1e-5, |t, x| {
            let gamma = t.leaf(ArrayD::from_elem(IxDyn(&[4]), 1.3));
            let beta = t.leaf(ArrayD::from_elem(IxDyn(&[4]), -0.2));
            let (y, _) = batchnorm_train(t, x, gamma, beta, 1e-5);
            let y = sigmoid(t, y);
            sum_all(t, y)
        });
    }

    #[test]
    fn grad_batchnorm_eval() {
        check_op(&[2, 3, 4, 4], 8, 1e-5, |t, x| {
            let gamma = t.leaf(ArrayD::from_elem(IxDyn(&[3]), 0.8));
            let beta = t.leaf(ArrayD::from_elem(IxDyn(&[3]), 0.1));
            let rm = Array1::from_vec(vec![0.1, -0.2, 0.3]);
            let rv = Array1::from_vec(vec![1.1, 0.9, 1.4]);
            let y = batchnorm_eval(t, x, gamma, beta, &rm, &rv, 1e-5);
            let y = sigmoid(t, y);
            sum_all(t, y)
        });
    }

    #[test]
    fn grad_pool_gap_linear_ce() {
        check_op(&[2, 4, 8, 8], 5, 1e-5, |t, x| {
            let p = maxpool(t, x, 3, 2, 1);
            let v = gap(t, p);
            let w = t.leaf(ArrayD::from_shape_vec(IxDyn(&[3, 4]), (0..12).map(|i| 0.1 * i as f64 - 0.5).collect()).unwrap());
            let b = t.leaf(ArrayD::from_elem(IxDyn(&[3]), 0.05));
            let logits = linear(t, v, w, b);
            cross_entropy(t, logits, &[0, 2])
        });
    }

    #[test]
    fn grad_attention_pooling_ops() {
        check_op(&[2, 4, 3, 3], 9, 1e-5, |t, x| {
            let gm = global_max_pool(t, x);
            let cm = channel_mean(t, x);
            let cx = channel_max(t, x);
            let cat = concat(t, 1, &[cm, cx]);
            let s = gap(t, cat);
            let s2 = sigmoid(t, s);
            let gm2 = sigmoid(t, gm);
            let a = sum_all(t, s2);
            let b = sum_all(t, gm2);
            let ab = mul(t, a, b);
            sum_all(t, ab)
        });
    }

    #[test]
    fn grad_concat_slice_gates() {
        check_op(&[2, 4, 4, 6], 6, 1e-6, |t, x| {
            let left = slice(t, x, &[0, 0, 0, 0], &[2, 4, 4, 3]);
            let right = slice(t, x, &[0, 0, 0, 3], &[2, 4, 4, 6]);
            let cat = concat(t, 3, &[left, right]);
            let g2 = gap(t, cat);
            let g2 = sigmoid(t, g2);
            let gated = scale_channels(t, cat, g2);
            // single-channel spatial gate from first channel
            let sg = slice(t, gated, &[0, 0, 0, 0], &[2, 1, 4, 6]);
            let sg = sigmoid(t, sg);
            let y = scale_spatial(t, gated, sg);
            mean_all(t, y)
        });
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let mut tape = Tape::<f64>::new(false);
        let logits = tape.leaf(ArrayD::zeros(IxDyn(&[3, 7])));
        let l = cross_entropy(&mut tape, logits, &[0, 3, 6]);
        assert!((tape.scalar_value(l) - (7.0f64).ln()).abs() < 1e-12);
    }
}
