//! Cross-modal enhancement: split a face into halves, run the three branch
//! bodies, and fuse with width-concatenation plus residual addition.

use crate::backbones::Branches;
use crate::error::{Error, Result};
use crate::nn::Fwd;
use crate::tensor::{ops, Element, NodeId};
use ndarray::prelude::*;
use ndarray::Slice;

/// Split an H×W×3 pixel image into left/right halves along the width.
/// Odd widths give the extra column to the right half. With `mirror_right`
/// the right half is flipped horizontally.
pub fn split_face(
    image: &Array3<f32>,
    mirror_right: bool,
) -> Result<(Array3<f32>, Array3<f32>)> {
    let (_, w, _) = image.dim();
    if w < 2 {
        return Err(Error::Input(format!(
            "cannot split a face {w} pixels wide"
        )));
    }
    let mid = w / 2;
    let left = image.slice_axis(Axis(1), Slice::from(..mid)).to_owned();
    let mut right = image.slice_axis(Axis(1), Slice::from(mid..)).to_owned();
    if mirror_right {
        right.invert_axis(Axis(1));
        right = right.as_standard_layout().to_owned();
    }
    Ok((left, right))
}

/// Same split on an N×C×H×W batch tensor (width is the last axis).
pub fn split_batch<T: Element>(
    whole: &ArrayD<T>,
    mirror_right: bool,
) -> Result<(ArrayD<T>, ArrayD<T>)> {
    let shape = whole.shape();
    if shape.len() != 4 {
        return Err(Error::Input("expected an N\u{d7}C\u{d7}H\u{d7}W batch".into()));
    }
    let w = shape[3];
    if w < 2 {
        return Err(Error::Input(format!("cannot split width {w}")));
    }
    let mid = w / 2;
    let left = whole
        .slice_axis(Axis(3), Slice::from(..mid))
        .as_standard_layout()
        .to_owned();
    let mut right = whole.slice_axis(Axis(3), Slice::from(mid..)).to_owned();
    if mirror_right {
        right.invert_axis(Axis(3));
    }
    Ok((left, right.as_standard_layout().to_owned()))
}

/// Branch outputs of one cross-modal pass.
pub struct CmemOutput {
    /// `SB(whole) + concat_width(UB(left), LB(right))`
    pub fused: NodeId,
    pub f_left: NodeId,
    pub f_right: NodeId,
}

/// Run the three branches and fuse. The half-face feature maps keep their
/// half width; width-concatenation restores the whole-face geometry, which
/// is what makes the residual addition well-typed without extra layers.
pub fn cmem_forward<T: Element>(
    fx: &mut Fwd<'_, T>,
    whole: NodeId,
    left: NodeId,
    right: NodeId,
    branches: &Branches,
) -> Result<CmemOutput> {
    let f = branches.sb.forward(fx, whole)?;
    let f_left = branches.ub.forward(fx, left)?;
    let f_right = branches.lb.forward(fx, right)?;

    let fs = fx.tape.value(f).shape().to_vec();
    let ls = fx.tape.value(f_left).shape().to_vec();
    let rs = fx.tape.value(f_right).shape().to_vec();
    if ls[3] + rs[3] != fs[3] || ls[2] != fs[2] || rs[2] != fs[2] {
        return Err(Error::Input(format!(
            "fusion error: half feature widths {}+{} do not match whole-face feature width {}",
            ls[3], rs[3], fs[3]
        )));
    }
    let f_con = ops::concat(fx.tape, 3, &[f_left, f_right]);
    let fused = ops::add(fx.tape, f, f_con);
    Ok(CmemOutput {
        fused,
        f_left,
        f_right,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn image(h: usize, w: usize) -> Array3<f32> {
        Array3::from_shape_fn((h, w, 3), |(y, x, c)| (y * 1000 + x * 3 + c) as f32)
    }

    #[test]
    fn even_split_widths() {
        let img = image(224, 224);
        let (l, r) = split_face(&img, false).unwrap();
        assert_eq!(l.dim(), (224, 112, 3));
        assert_eq!(r.dim(), (224, 112, 3));
    }

    #[test]
    fn odd_width_gives_extra_column_to_right() {
        let img = image(224, 225);
        let (l, r) = split_face(&img, false).unwrap();
        assert_eq!(l.dim(), (224, 112, 3));
        assert_eq!(r.dim(), (224, 113, 3));
    }

    #[test]
    fn narrow_image_is_an_error() {
        let img = image(8, 1);
        assert!(matches!(split_face(&img, false), Err(Error::Input(_))));
    }

    #[test]
    fn split_then_concat_is_identity() {
        let img = image(32, 31);
        let (l, r) = split_face(&img, false).unwrap();
        let back = ndarray::concatenate(Axis(1), &[l.view(), r.view()]).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn mirror_symmetric_image_halves_agree_under_mirroring() {
        // build a mirror-symmetric image: x and W-1-x share values
        let w = 64;
        let img = Array3::from_shape_fn((32, w, 3), |(y, x, c)| {
            let xm = x.min(w - 1 - x);
            (y * 37 + xm * 5 + c) as f32
        });
        let (l, r) = split_face(&img, true).unwrap();
        assert_eq!(l, r);
    }
}
