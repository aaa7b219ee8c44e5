//! Half-face alignment optimization: the symmetry loss over globally pooled
//! half-face features, the cross-entropy global loss, and their α-weighted
//! combination.

use crate::error::{Error, Result};
use crate::tensor::{ops, Element, NodeId, Tape};
use serde::{Deserialize, Serialize};

/// Loss decomposition for one batch.
#[derive(Copy, Clone, Debug, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_sl: f64,
    pub l_gl: f64,
    pub total: f64,
    pub alpha: f64,
}

/// Global average pooling of both half-face feature maps. Errors when the
/// two maps disagree in shape.
pub fn pooled_vectors<T: Element>(
    tape: &mut Tape<T>,
    f_left: NodeId,
    f_right: NodeId,
) -> Result<(NodeId, NodeId)> {
    let ls = tape.value(f_left).shape().to_vec();
    let rs = tape.value(f_right).shape().to_vec();
    if ls != rs {
        return Err(Error::Input(format!(
            "half-face feature shapes differ: {ls:?} vs {rs:?}"
        )));
    }
    if ls.len() != 4 {
        return Err(Error::Input(format!(
            "expected N\u{d7}C\u{d7}H\u{d7}W half-face features, got {ls:?}"
        )));
    }
    Ok((ops::gap(tape, f_left), ops::gap(tape, f_right)))
}

/// Elementwise two-way log-softmax across the (left, right) pair at each
/// (sample, channel) position, computed with max-subtraction for stability.
pub fn pairwise_log_softmax<T: Element>(
    tape: &mut Tape<T>,
    v_l: NodeId,
    v_r: NodeId,
) -> Result<(NodeId, NodeId)> {
    if tape.value(v_l).shape() != tape.value(v_r).shape() {
        return Err(Error::Input("pooled vector shapes differ".into()));
    }
    for &side in &[v_l, v_r] {
        if tape.value(side).iter().any(|v| !v.is_finite()) {
            return Err(Error::Input(
                "non-finite value in pooled half-face features".into(),
            ));
        }
    }
    let m = ops::maximum(tape, v_l, v_r);
    let dl = ops::sub(tape, v_l, m);
    let dr = ops::sub(tape, v_r, m);
    let el = ops::exp(tape, dl);
    let er = ops::exp(tape, dr);
    let sum = ops::add(tape, el, er);
    let lnsum = ops::ln(tape, sum);
    let lse = ops::add(tape, m, lnsum);
    let x_l = ops::sub(tape, v_l, lse);
    let x_r = ops::sub(tape, v_r, lse);
    Ok((x_l, x_r))
}

/// Symmetry loss: `(2/(N·C)) Σ (x_l − x_r)²` with `x` the pairwise
/// log-softmaxed, globally pooled half-face features.
pub fn symmetry_loss<T: Element>(
    tape: &mut Tape<T>,
    f_left: NodeId,
    f_right: NodeId,
) -> Result<NodeId> {
    let (v_l, v_r) = pooled_vectors(tape, f_left, f_right)?;
    let (x_l, x_r) = pairwise_log_softmax(tape, v_l, v_r)?;
    let d = ops::sub(tape, x_l, x_r);
    let sq = ops::mul(tape, d, d);
    let mean = ops::mean_all(tape, sq);
    Ok(ops::scale(tape, mean, T::cast(2.0)))
}

/// Batch-mean cross-entropy on classifier logits.
pub fn global_loss<T: Element>(
    tape: &mut Tape<T>,
    logits: NodeId,
    labels: &[usize],
) -> Result<NodeId> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::Input(format!("logits must be N\u{d7}K, got {shape:?}")));
    }
    if labels.len() != shape[0] {
        return Err(Error::Input(format!(
            "{} labels for batch of {}",
            labels.len(),
            shape[0]
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= shape[1]) {
        return Err(Error::Input(format!(
            "label {bad} out of range for {} classes",
            shape[1]
        )));
    }
    Ok(ops::cross_entropy(tape, logits, labels))
}

/// `(1−α)·L_sl + α·L_gl`. At the boundaries the dropped term is removed
/// from the graph entirely, so an α of exactly 1 provably contributes zero
/// gradient from the symmetry term (and bitwise-identical training).
pub fn total_loss<T: Element>(
    tape: &mut Tape<T>,
    l_sl: Option<NodeId>,
    l_gl: NodeId,
    alpha: f64,
) -> Result<NodeId> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0,1], got {alpha}")));
    }
    let l_sl = match l_sl {
        Some(n) => n,
        None => return Ok(l_gl),
    };
    if alpha == 1.0 {
        return Ok(l_gl);
    }
    if alpha == 0.0 {
        return Ok(l_sl);
    }
    let a = ops::scale(tape, l_sl, T::cast(1.0 - alpha));
    let b = ops::scale(tape, l_gl, T::cast(alpha));
    Ok(ops::add(tape, a, b))
}

/// Assemble the bundle from already-evaluated scalars.
pub fn bundle(l_sl: f64, l_gl: f64, alpha: f64) -> LossBundle {
    LossBundle {
        l_sl,
        l_gl,
        total: (1.0 - alpha) * l_sl + alpha * l_gl,
        alpha,
    }
}
