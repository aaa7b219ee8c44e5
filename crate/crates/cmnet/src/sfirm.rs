//! Salient-information refinement: Basic Network II, then spatial-quadrant
//! division with per-tile channel attention, then channel-group division
//! with per-group spatial attention, each fused multiplicatively with the
//! running feature.

use crate::backbones::FeatureExtractor;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Fwd, Linear, ParamStore};
use crate::tensor::{ops, Element, NodeId, Tape};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Division counts for the two refinement phases.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DivisionSpec {
    pub spatial_parts: usize,
    pub channel_groups: usize,
}

impl Default for DivisionSpec {
    fn default() -> Self {
        Self {
            spatial_parts: 4,
            channel_groups: 4,
        }
    }
}

impl DivisionSpec {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.spatial_parts, 1 | 4 | 9) {
            return Err(Error::Config(format!(
                "spatial_parts must be 1, 4 or 9, got {}",
                self.spatial_parts
            )));
        }
        if self.channel_groups == 0 {
            return Err(Error::Config("channel_groups must be positive".into()));
        }
        Ok(())
    }
}

/// Contiguous partition of `d` into `g` spans: `⌊d/g⌋` each, remainder
/// distributed one-per-span to the last spans.
pub fn partition_bounds(d: usize, g: usize) -> Result<Vec<(usize, usize)>> {
    if g == 0 || d < g {
        return Err(Error::Config(format!(
            "cannot partition extent {d} into {g} parts"
        )));
    }
    let base = d / g;
    let rem = d % g;
    let mut bounds = Vec::with_capacity(g);
    let mut lo = 0;
    for i in 0..g {
        let size = if i >= g - rem { base + 1 } else { base };
        bounds.push((lo, lo + size));
        lo += size;
    }
    Ok(bounds)
}

/// Central-point spatial division into a √parts × √parts grid of tiles,
/// row-major. `parts` must be 4 or 9.
pub fn spatial_division<T: Element>(
    tape: &mut Tape<T>,
    map: NodeId,
    parts: usize,
) -> Result<Vec<NodeId>> {
    if !matches!(parts, 4 | 9) {
        return Err(Error::Config(format!(
            "spatial division supports 4 or 9 parts, got {parts}"
        )));
    }
    let grid = (parts as f64).sqrt() as usize;
    let shape = tape.value(map).shape().to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let hb = partition_bounds(h, grid)?;
    let wb = partition_bounds(w, grid)?;
    let mut tiles = Vec::with_capacity(parts);
    for &(hy0, hy1) in &hb {
        for &(wx0, wx1) in &wb {
            tiles.push(ops::slice(
                tape,
                map,
                &[0, 0, hy0, wx0],
                &[n, c, hy1, wx1],
            ));
        }
    }
    Ok(tiles)
}

/// Inverse of [`spatial_division`]: rejoin a row-major grid of tiles.
pub fn spatial_join<T: Element>(tape: &mut Tape<T>, tiles: &[NodeId]) -> Result<NodeId> {
    let grid = (tiles.len() as f64).sqrt() as usize;
    if grid * grid != tiles.len() || tiles.is_empty() {
        return Err(Error::Input(format!(
            "join error: {} tiles do not form a square grid",
            tiles.len()
        )));
    }
    // validate grid consistency: equal N/C everywhere, row heights and
    // column widths consistent
    let get = |i: usize| tape.value(tiles[i]).shape().to_vec();
    let (n, c) = (get(0)[0], get(0)[1]);
    for i in 0..tiles.len() {
        let s = get(i);
        if s[0] != n || s[1] != c {
            return Err(Error::Input(
                "join error: tiles disagree on batch or channel count".into(),
            ));
        }
        if s[2] != get((i / grid) * grid)[2] {
            return Err(Error::Input("join error: inconsistent tile heights".into()));
        }
        if s[3] != get(i % grid)[3] {
            return Err(Error::Input("join error: inconsistent tile widths".into()));
        }
    }
    let mut rows = Vec::with_capacity(grid);
    for r in 0..grid {
        rows.push(ops::concat(tape, 3, &tiles[r * grid..(r + 1) * grid]));
    }
    Ok(ops::concat(tape, 2, &rows))
}

/// Contiguous channel slices of size `C/groups`; errors unless `groups`
/// divides the channel count.
pub fn channel_division<T: Element>(
    tape: &mut Tape<T>,
    map: NodeId,
    groups: usize,
) -> Result<Vec<NodeId>> {
    let shape = tape.value(map).shape().to_vec();
    let c = shape[1];
    if groups == 0 || c % groups != 0 {
        return Err(Error::Config(format!(
            "channel count {c} is not divisible into {groups} groups"
        )));
    }
    Ok(channel_slices(tape, map, groups)?)
}

/// Contiguous channel partition allowing uneven groups (floor sizes,
/// remainder to the last groups). Used by the refinement pipeline for group
/// counts that do not divide the channel count (e.g. 9 groups over 512).
pub fn channel_slices<T: Element>(
    tape: &mut Tape<T>,
    map: NodeId,
    groups: usize,
) -> Result<Vec<NodeId>> {
    let shape = tape.value(map).shape().to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let bounds = partition_bounds(c, groups)?;
    Ok(bounds
        .iter()
        .map(|&(c0, c1)| ops::slice(tape, map, &[0, c0, 0, 0], &[n, c1, h, w]))
        .collect())
}

/// Inverse of [`channel_division`] / [`channel_slices`].
pub fn channel_join<T: Element>(tape: &mut Tape<T>, parts: &[NodeId]) -> Result<NodeId> {
    if parts.is_empty() {
        return Err(Error::Input("join error: no channel parts".into()));
    }
    let first = tape.value(parts[0]).shape().to_vec();
    for &p in parts {
        let s = tape.value(p).shape();
        if s[0] != first[0] || s[2] != first[2] || s[3] != first[3] {
            return Err(Error::Input(
                "join error: channel parts disagree on batch or spatial dims".into(),
            ));
        }
    }
    Ok(ops::concat(tape, 1, parts))
}

/// Channel attention (squeeze-excite style, CBAM convention): a shared
/// two-layer MLP over average- and max-pooled channel vectors produces a
/// per-channel sigmoid gate; returns the reweighted map.
#[derive(Clone)]
pub struct ChannelAttention {
    fc1: Linear,
    fc2: Linear,
    pub channels: usize,
}

impl ChannelAttention {
    pub const REDUCTION: usize = 16;

    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        channels: usize,
    ) -> Result<Self> {
        if channels < Self::REDUCTION {
            return Err(Error::Config(format!(
                "channel attention needs at least {} channels, got {channels}",
                Self::REDUCTION
            )));
        }
        let hidden = channels / Self::REDUCTION;
        Ok(Self {
            fc1: Linear::new(store, rng, &format!("{prefix}.fc1"), channels, hidden),
            fc2: Linear::new(store, rng, &format!("{prefix}.fc2"), hidden, channels),
            channels,
        })
    }

    fn mlp<T: Element>(&self, fx: &mut Fwd<'_, T>, v: NodeId) -> NodeId {
        let h = self.fc1.forward(fx, v);
        let h = ops::relu(fx.tape, h);
        self.fc2.forward(fx, h)
    }

    /// Returns `(part ⊙ gate, gate)`.
    pub fn forward_with_gate<T: Element>(
        &self,
        fx: &mut Fwd<'_, T>,
        part: NodeId,
    ) -> (NodeId, NodeId) {
        let avg = ops::gap(fx.tape, part);
        let mx = ops::global_max_pool(fx.tape, part);
        let a = self.mlp(fx, avg);
        let m = self.mlp(fx, mx);
        let s = ops::add(fx.tape, a, m);
        let gate = ops::sigmoid(fx.tape, s);
        (ops::scale_channels(fx.tape, part, gate), gate)
    }

    pub fn forward<T: Element>(&self, fx: &mut Fwd<'_, T>, part: NodeId) -> NodeId {
        self.forward_with_gate(fx, part).0
    }
}

/// Spatial attention (CBAM convention): a 7×7 convolution over stacked
/// channel-average and channel-max planes produces a per-location sigmoid
/// gate; returns the reweighted map.
#[derive(Clone)]
pub struct SpatialAttention {
    conv: Conv2d,
}

impl SpatialAttention {
    pub const KERNEL: usize = 7;

    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
    ) -> Self {
        let conv = Conv2d::new(
            store,
            rng,
            &format!("{prefix}.conv.weight"),
            2,
            1,
            Self::KERNEL,
            1,
            Self::KERNEL / 2,
        );
        Self { conv }
    }

    /// Returns `(group ⊙ gate, gate)`; the gate has shape N×1×H×W.
    pub fn forward_with_gate<T: Element>(
        &self,
        fx: &mut Fwd<'_, T>,
        group: NodeId,
    ) -> (NodeId, NodeId) {
        let avg = ops::channel_mean(fx.tape, group);
        let mx = ops::channel_max(fx.tape, group);
        let cat = ops::concat(fx.tape, 1, &[avg, mx]);
        let pre = self.conv.forward(fx, cat);
        let gate = ops::sigmoid(fx.tape, pre);
        (ops::scale_spatial(fx.tape, group, gate), gate)
    }

    pub fn forward<T: Element>(&self, fx: &mut Fwd<'_, T>, group: NodeId) -> NodeId {
        self.forward_with_gate(fx, group).0
    }
}

/// Which attention refinement follows Basic Network II.
#[derive(Clone)]
pub enum Attention {
    /// Refinement network only.
    None,
    /// Published block attention as-is: channel gate then spatial gate on
    /// the whole map.
    PlainCbam {
        ca: ChannelAttention,
        sa: SpatialAttention,
    },
    /// Division pipeline: per-tile channel attention joined and fused with
    /// the running feature, then per-group spatial attention likewise.
    Divided {
        ca: Vec<ChannelAttention>,
        sa: Vec<SpatialAttention>,
        spec: DivisionSpec,
        /// Pass the joined map through a sigmoid before multiplying
        /// (bounded weights). The raw variant is kept for experiments.
        sigmoid_gates: bool,
    },
}

/// Basic Network II plus the attention refinement.
#[derive(Clone)]
pub struct Sfirm {
    pub refine: FeatureExtractor,
    pub attention: Attention,
}

/// Outputs of the refinement pipeline.
pub struct SfirmOutput {
    /// Final refined map (N×512×H'×W').
    pub refined: NodeId,
    /// Intermediate after the channel-attention phase.
    pub o_se: NodeId,
    /// Basic Network II output before any attention.
    pub r: NodeId,
}

impl Sfirm {
    pub fn forward<T: Element>(&self, fx: &mut Fwd<'_, T>, o_cmem: NodeId) -> Result<SfirmOutput> {
        let r = self.refine.forward(fx, o_cmem)?;
        if fx.gates_to_one {
            // test hook: all gates forced to one makes every phase the identity
            return Ok(SfirmOutput {
                refined: r,
                o_se: r,
                r,
            });
        }
        match &self.attention {
            Attention::None => Ok(SfirmOutput {
                refined: r,
                o_se: r,
                r,
            }),
            Attention::PlainCbam { ca, sa } => {
                let o_se = ca.forward(fx, r);
                let refined = sa.forward(fx, o_se);
                Ok(SfirmOutput { refined, o_se, r })
            }
            Attention::Divided {
                ca,
                sa,
                spec,
                sigmoid_gates,
            } => {
                // phase 2: channel attention per spatial tile
                let attended: Vec<NodeId> = if spec.spatial_parts == 1 {
                    vec![ca[0].forward(fx, r)]
                } else {
                    let tiles = spatial_division(fx.tape, r, spec.spatial_parts)?;
                    tiles
                        .iter()
                        .zip(ca)
                        .map(|(&tile, att)| att.forward(fx, tile))
                        .collect()
                };
                let a = if attended.len() == 1 {
                    attended[0]
                } else {
                    spatial_join(fx.tape, &attended)?
                };
                let o_se = fuse(fx, a, r, *sigmoid_gates);

                // phase 3: spatial attention per channel group
                let attended: Vec<NodeId> = if spec.channel_groups == 1 {
                    vec![sa[0].forward(fx, o_se)]
                } else {
                    let groups = channel_slices(fx.tape, o_se, spec.channel_groups)?;
                    groups
                        .iter()
                        .zip(sa)
                        .map(|(&g, att)| att.forward(fx, g))
                        .collect()
                };
                let b = if attended.len() == 1 {
                    attended[0]
                } else {
                    channel_join(fx.tape, &attended)?
                };
                let refined = fuse(fx, b, o_se, *sigmoid_gates);
                Ok(SfirmOutput { refined, o_se, r })
            }
        }
    }
}

/// The "common attention" fusion: the joined map acts as attention weights
/// on the running feature, bounded through a sigmoid unless disabled.
fn fuse<T: Element>(fx: &mut Fwd<'_, T>, joined: NodeId, running: NodeId, sig: bool) -> NodeId {
    let weights = if sig {
        ops::sigmoid(fx.tape, joined)
    } else {
        joined
    };
    ops::mul(fx.tape, weights, running)
}

/// Build the attention modules for a configuration.
pub fn build_attention<T: Element>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    kind: &crate::config::AttentionKind,
    spec: DivisionSpec,
    sigmoid_gates: bool,
    channels: usize,
) -> Result<Attention> {
    match kind {
        crate::config::AttentionKind::None => Ok(Attention::None),
        crate::config::AttentionKind::Cbam => Ok(Attention::PlainCbam {
            ca: ChannelAttention::new(store, rng, "sfirm.cbam.ca", channels)?,
            sa: SpatialAttention::new(store, rng, "sfirm.cbam.sa"),
        }),
        crate::config::AttentionKind::Divided => {
            spec.validate()?;
            let mut ca = Vec::new();
            for i in 0..spec.spatial_parts {
                ca.push(ChannelAttention::new(
                    store,
                    rng,
                    &format!("sfirm.ca.{i}"),
                    channels,
                )?);
            }
            let mut sa = Vec::new();
            for i in 0..spec.channel_groups {
                sa.push(SpatialAttention::new(store, rng, &format!("sfirm.sa.{i}")));
            }
            Ok(Attention::Divided {
                ca,
                sa,
                spec,
                sigmoid_gates,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use ndarray::{ArrayD, IxDyn};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randu(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        let len = shape.iter().product();
        ArrayD::from_shape_vec(
            IxDyn(shape),
            (0..len).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn partition_bounds_follow_floor_then_remainder_policy() {
        assert_eq!(partition_bounds(4, 2).unwrap(), vec![(0, 2), (2, 4)]);
        assert_eq!(partition_bounds(7, 2).unwrap(), vec![(0, 3), (3, 7)]);
        assert_eq!(
            partition_bounds(7, 3).unwrap(),
            vec![(0, 2), (2, 4), (4, 7)]
        );
        assert_eq!(
            partition_bounds(512, 9).unwrap().iter().map(|(a, b)| b - a).collect::<Vec<_>>(),
            vec![56, 57, 57, 57, 57, 57, 57, 57, 57]
        );
        assert!(partition_bounds(1, 2).is_err());
    }

    #[test]
    fn spatial_division_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::<f64>::new(false);
        let x = tape.leaf(randu(&mut rng, &[1, 8, 4, 4]));
        let tiles = spatial_division(&mut tape, x, 4).unwrap();
        assert_eq!(tiles.len(), 4);
        for &t in &tiles {
            assert_eq!(tape.value(t).shape(), [1, 8, 2, 2]);
        }

        let x7 = tape.leaf(randu(&mut rng, &[1, 8, 7, 7]));
        let tiles7 = spatial_division(&mut tape, x7, 4).unwrap();
        let dims: Vec<(usize, usize)> = tiles7
            .iter()
            .map(|&t| (tape.value(t).shape()[2], tape.value(t).shape()[3]))
            .collect();
        assert_eq!(dims, vec![(3, 3), (3, 4), (4, 3), (4, 4)]);

        assert!(spatial_division(&mut tape, x7, 5).is_err());
    }

    #[test]
    fn division_join_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::<f64>::new(false);
        for shape in [[2usize, 8, 7, 7], [1, 512, 7, 7], [3, 16, 6, 9]] {
            let v = randu(&mut rng, &shape);
            let x = tape.leaf(v.clone());
            for parts in [4usize, 9] {
                if shape[2] >= 3 && shape[3] >= 3 {
                    let tiles = spatial_division(&mut tape, x, parts).unwrap();
                    let back = spatial_join(&mut tape, &tiles).unwrap();
                    assert_eq!(*tape.value(back), v, "spatial round trip {parts}");
                }
            }
            let groups = channel_slices(&mut tape, x, 4).unwrap();
            let back = channel_join(&mut tape, &groups).unwrap();
            assert_eq!(*tape.value(back), v, "channel round trip");
        }
    }

    #[test]
    fn channel_division_strictness() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::<f64>::new(false);
        let x8 = tape.leaf(randu(&mut rng, &[1, 8, 7, 7]));
        let parts = channel_division(&mut tape, x8, 4).unwrap();
        assert_eq!(parts.len(), 4);
        for &p in &parts {
            assert_eq!(tape.value(p).shape(), [1, 2, 7, 7]);
        }
        let x6 = tape.leaf(randu(&mut rng, &[1, 6, 7, 7]));
        assert!(matches!(
            channel_division(&mut tape, x6, 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn join_rejects_mismatched_tiles() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::<f64>::new(false);
        let a = tape.leaf(randu(&mut rng, &[1, 8, 2, 2]));
        let b = tape.leaf(randu(&mut rng, &[1, 4, 2, 2]));
        assert!(spatial_join(&mut tape, &[a, b, a, b]).is_err());
        assert!(channel_join(&mut tape, &[]).is_err());
    }

    #[test]
    fn channel_attention_gates_bounded_and_zero_fixed_point() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ca = ChannelAttention::new(&mut store, &mut rng, "ca", 32).unwrap();
        assert!(ChannelAttention::new(&mut store, &mut rng, "ca_small", 8).is_err());

        let mut tape = Tape::new(false);
        let mut fx = Fwd::new(&mut tape, &mut store, Mode::Eval);
        let x = fx.tape.leaf(randu(&mut rng, &[2, 32, 5, 5]));
        let (_, gate) = ca.forward_with_gate(&mut fx, x);
        assert!(tape.value(gate).iter().all(|&g| g > 0.0 && g < 1.0));

        let mut tape = Tape::new(false);
        let mut fx = Fwd::new(&mut tape, &mut store, Mode::Eval);
        let z = fx.tape.leaf(ArrayD::zeros(IxDyn(&[1, 32, 4, 4])));
        let (out, _) = ca.forward_with_gate(&mut fx, z);
        assert!(tape.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_attention_constant_input_doubles_mlp_path() {
        // spatially constant per channel: avg pool == max pool, so the
        // pre-sigmoid activation is exactly 2·MLP(v)
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ca = ChannelAttention::new(&mut store, &mut rng, "ca", 32).unwrap();
        let v: Vec<f64> = (0..32).map(|i| (i as f64) / 31.0 - 0.4).collect();
        let mut x = ArrayD::zeros(IxDyn(&[1, 32, 3, 3]));
        for c in 0..32 {
            x.slice_mut(ndarray::s![0, c, .., ..]).fill(v[c]);
        }

        let mut tape = Tape::new(false);
        let mut fx = Fwd::new(&mut tape, &mut store, Mode::Eval);
        let xid = fx.tape.leaf(x);
        let (_, gate) = ca.forward_with_gate(&mut fx, xid);
        let gate_v = tape.value(gate).clone();

        // hand evaluation of sigmoid(2·MLP(v))
        let mut tape2 = Tape::new(false);
        let mut fx2 = Fwd::new(&mut tape2, &mut store, Mode::Eval);
        let vid = fx2
            .tape
            .leaf(ArrayD::from_shape_vec(IxDyn(&[1, 32]), v).unwrap());
        let m = ca.mlp(&mut fx2, vid);
        let m2 = ops::scale(fx2.tape, m, 2.0);
        let expect = ops::sigmoid(fx2.tape, m2);
        let expect_v = tape2.value(expect).clone();
        let err = (&gate_v - &expect_v)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-12, "max err {err}");
    }

    #[test]
    fn spatial_attention_gate_shape_range_and_uniform_planes() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sa = SpatialAttention::new(&mut store, &mut rng, "sa");

        let mut tape = Tape::new(false);
        let mut fx = Fwd::new(&mut tape, &mut store, Mode::Eval);
        let x = fx.tape.leaf(randu(&mut rng, &[2, 16, 6, 5]));
        let (_, gate) = sa.forward_with_gate(&mut fx, x);
        assert_eq!(tape.value(gate).shape(), [2, 1, 6, 5]);
        assert!(tape.value(gate).iter().all(|&g| g > 0.0 && g < 1.0));

        // all-zero input maps to zero output
        let mut tape = Tape::new(false);
        let mut fx = Fwd::new(&mut tape, &mut store, Mode::Eval);
        let z = fx.tape.leaf(ArrayD::zeros(IxDyn(&[1, 16, 4, 4])));
        let (out, _) = sa.forward_with_gate(&mut fx, z);
        assert!(tape.value(out).iter().all(|&v| v == 0.0));

        // channel-uniform input: avg and max channel planes agree
        let mut tape = Tape::new(false);
        let u = ArrayD::from_shape_fn(IxDyn(&[1, 16, 3, 3]), |ix| {
            (ix[2] * 3 + ix[3]) as f64 * 0.1
        });
        let xid = tape.leaf(u);
        let avg = ops::channel_mean(&mut tape, xid);
        let mx = ops::channel_max(&mut tape, xid);
        let err = (tape.value(avg) - tape.value(mx))
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-12, "uniform-channel planes differ by {err}");
    }
}
