//! Grad-CAM++ saliency maps over the refined feature maps.
//!
//! Channel weights follow the second-order formulation: with `g = ∂S/∂A`
//! for target score `S` (the raw class logit) and activation `A`,
//! `α = g² / (2g² + Σ_{hw}A·g³)` and `w_k = Σ_{hw} α·relu(g)`; the map is
//! `relu(Σ_k w_k A_k)`, rectified, upsampled to the input size and min-max
//! normalized.

use crate::data::{preprocess, ImageSample};
use crate::error::{Error, Result};
use crate::model::{Batch, CmNet, FwdOptions};
use crate::nn::Mode;
use crate::tensor::{ops, Element, Tape};
use ndarray::prelude::*;
use ndarray::ArrayD;

/// A saliency result: the heatmap in `[0,1]` at input resolution plus a
/// degeneracy flag (all-zero gradient field or flat map).
pub struct SaliencyMap {
    pub heatmap: Array2<f32>,
    pub degenerate: bool,
}

pub fn saliency_map<T: Element>(
    model: &mut CmNet<T>,
    image: &ImageSample,
    target_class: usize,
) -> Result<SaliencyMap> {
    if target_class >= model.cfg.num_classes {
        return Err(Error::Evaluation(format!(
            "target class {target_class} out of range for {} classes",
            model.cfg.num_classes
        )));
    }
    let size = model.cfg.input_size;
    let img = preprocess(image, size, true)?;
    let mut whole = ArrayD::<T>::zeros(ndarray::IxDyn(&[1, 3, size, size]));
    for c in 0..3 {
        let mean = model.cfg.norm_mean[c];
        let std = model.cfg.norm_std[c];
        for y in 0..size {
            for x in 0..size {
                whole[[0, c, y, x]] = T::cast((img[[y, x, c]] as f64 - mean) / std);
            }
        }
    }
    let batch = Batch::from_whole(whole, vec![0], &model.cfg)?;

    let mut tape = Tape::new(true);
    let arts = model.forward(&mut tape, &batch, Mode::Eval, FwdOptions::default())?;
    let score = ops::column_sum(&mut tape, arts.logits, target_class);
    let grads = tape.backward_keep(score, &[arts.refined]);

    let activ = tape
        .value(arts.refined)
        .view()
        .into_dimensionality::<Ix4>()
        .unwrap()
        .to_owned();
    let grad = match grads.get(arts.refined) {
        Some(g) => g.view().into_dimensionality::<Ix4>().unwrap().to_owned(),
        None => {
            log::warn!("zero gradient field; returning a flat saliency map");
            return Ok(SaliencyMap {
                heatmap: Array2::zeros((size, size)),
                degenerate: true,
            });
        }
    };

    let (_, c, h, w) = activ.dim();
    if grad.iter().all(|v| v.as_f64() == 0.0) {
        log::warn!("zero gradient field; returning a flat saliency map");
        return Ok(SaliencyMap {
            heatmap: Array2::zeros((size, size)),
            degenerate: true,
        });
    }

    // Grad-CAM++ channel weights
    let mut cam = Array2::<f64>::zeros((h, w));
    for k in 0..c {
        let a_sum: f64 = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| activ[[0, k, y, x]].as_f64())
            .sum();
        let mut w_k = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                let g = grad[[0, k, y, x]].as_f64();
                if g == 0.0 {
                    continue;
                }
                let g2 = g * g;
                let g3 = g2 * g;
                let denom = 2.0 * g2 + a_sum * g3;
                if denom.abs() < 1e-12 {
                    continue;
                }
                let alpha = g2 / denom;
                w_k += alpha * g.max(0.0);
            }
        }
        for y in 0..h {
            for x in 0..w {
                cam[[y, x]] += w_k * activ[[0, k, y, x]].as_f64();
            }
        }
    }
    cam.mapv_inplace(|v| v.max(0.0));

    let up = bilinear_upsample(&cam.mapv(|v| v as f32), size, size);
    let (mn, mx) = up
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    if !(mx > mn) || mx == 0.0 {
        log::warn!("degenerate saliency map (flat response)");
        return Ok(SaliencyMap {
            heatmap: Array2::zeros((size, size)),
            degenerate: true,
        });
    }
    let heatmap = up.mapv(|v| (v - mn) / (mx - mn));
    Ok(SaliencyMap {
        heatmap,
        degenerate: false,
    })
}

/// Center-aligned bilinear upsampling.
pub fn bilinear_upsample(src: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    if h == out_h && w == out_w {
        return src.clone();
    }
    let mut out = Array2::<f32>::zeros((out_h, out_w));
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    for oy in 0..out_h {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f32;
        for ox in 0..out_w {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f32;
            let top = src[[y0, x0]] * (1.0 - tx) + src[[y0, x1]] * tx;
            let bot = src[[y1, x0]] * (1.0 - tx) + src[[y1, x1]] * tx;
            out[[oy, ox]] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Write a heatmap as an 8-bit grayscale PNG.
pub fn save_heatmap(path: &std::path::Path, heatmap: &Array2<f32>) -> Result<()> {
    let (h, w) = heatmap.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (heatmap[[y, x]] * 255.0).round().clamp(0.0, 255.0) as u8;
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img.save(path).map_err(Error::from)
}
