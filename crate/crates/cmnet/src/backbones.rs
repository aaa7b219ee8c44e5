//! Residual feature extractors.
//!
//! Basic Network I is the stem plus the first three stages of the 18-layer
//! residual reference network; Basic Network II is its final stage (two
//! blocks, four 3×3 convolutions). Parameter names follow the reference
//! network's published naming (`conv1`, `bn1`, `layerN.M.convK`, ...) under
//! an instance prefix, so externally converted 18-layer weight tables map in
//! without renaming logic on the caller's side.

use crate::error::{Error, Result};
use crate::nn::{load_tensor_checked, BatchNorm2d, Conv2d, Fwd, ParamStore};
use crate::tensor::{ops, Element, NodeId};
use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Which of the three branch bodies share one parameter set.
#[derive(Copy, Clone, PartialEq, Eq, Debug, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SharingPolicy {
    /// SB, UB and LB reference a single parameter set (default; the only
    /// policy whose parameter count matches the published model size).
    #[default]
    AllShared,
    /// UB and LB share one set, SB owns another.
    HalvesShared,
    /// Three independent parameter sets.
    Independent,
}

impl SharingPolicy {
    /// Instance prefixes that own distinct Basic Network I parameter sets.
    pub fn instance_prefixes(self) -> &'static [&'static str] {
        match self {
            SharingPolicy::AllShared => &["backbone"],
            SharingPolicy::HalvesShared => &["sb", "half"],
            SharingPolicy::Independent => &["sb", "ub", "lb"],
        }
    }
}

/// One basic residual block: two 3×3 convolutions with batch norms and an
/// identity or projected shortcut.
#[derive(Clone)]
pub struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
    ) -> Self {
        let conv1 = Conv2d::new(
            store,
            rng,
            &format!("{prefix}.conv1.weight"),
            in_ch,
            out_ch,
            3,
            stride,
            1,
        );
        let bn1 = BatchNorm2d::new(store, &format!("{prefix}.bn1"), out_ch);
        let conv2 = Conv2d::new(
            store,
            rng,
            &format!("{prefix}.conv2.weight"),
            out_ch,
            out_ch,
            3,
            1,
            1,
        );
        let bn2 = BatchNorm2d::new(store, &format!("{prefix}.bn2"), out_ch);
        let downsample = if stride != 1 || in_ch != out_ch {
            let conv = Conv2d::new(
                store,
                rng,
                &format!("{prefix}.downsample.0.weight"),
                in_ch,
                out_ch,
                1,
                stride,
                0,
            );
            let bn = BatchNorm2d::new(store, &format!("{prefix}.downsample.1"), out_ch);
            Some((conv, bn))
        } else {
            None
        };
        Self {
            conv1,
            bn1,
            conv2,
            bn2,
            downsample,
        }
    }

    fn forward<T: Element>(&self, fx: &mut Fwd<'_, T>, x: NodeId) -> NodeId {
        let mut y = self.conv1.forward(fx, x);
        y = self.bn1.forward(fx, y);
        y = ops::relu(fx.tape, y);
        y = self.conv2.forward(fx, y);
        y = self.bn2.forward(fx, y);
        let shortcut = match &self.downsample {
            Some((conv, bn)) => {
                let s = conv.forward(fx, x);
                bn.forward(fx, s)
            }
            None => x,
        };
        let y = ops::add(fx.tape, y, shortcut);
        ops::relu(fx.tape, y)
    }
}

/// Staged residual feature extractor.
#[derive(Clone)]
pub struct FeatureExtractor {
    stem: Option<(Conv2d, BatchNorm2d)>,
    blocks: Vec<BasicBlock>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride_product: usize,
}

impl FeatureExtractor {
    /// Basic Network I: stem convolution plus the first three stages of the
    /// 18-layer residual reference network. 3-channel input, 256 output
    /// channels, total spatial downsampling 16.
    pub fn basic_network_i<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        input_channels: usize,
    ) -> Result<Self> {
        if input_channels != 3 {
            return Err(Error::Config(format!(
                "Basic Network I expects 3 input channels, got {input_channels}"
            )));
        }
        let mut stem_conv = Conv2d::new(
            store,
            rng,
            &format!("{prefix}.conv1.weight"),
            3,
            64,
            7,
            2,
            3,
        );
        stem_conv.is_stem = true;
        let stem_bn = BatchNorm2d::new(store, &format!("{prefix}.bn1"), 64);

        let mut blocks = Vec::new();
        let stages: [(usize, usize, usize); 3] = [(64, 64, 1), (64, 128, 2), (128, 256, 2)];
        for (si, &(in_ch, out_ch, stride)) in stages.iter().enumerate() {
            let layer = si + 1;
            blocks.push(BasicBlock::new(
                store,
                rng,
                &format!("{prefix}.layer{layer}.0"),
                in_ch,
                out_ch,
                stride,
            ));
            blocks.push(BasicBlock::new(
                store,
                rng,
                &format!("{prefix}.layer{layer}.1"),
                out_ch,
                out_ch,
                1,
            ));
        }
        Ok(Self {
            stem: Some((stem_conv, stem_bn)),
            blocks,
            in_channels: 3,
            out_channels: 256,
            stride_product: 16,
        })
    }

    /// Basic Network II: the final stage of the reference network (two
    /// residual blocks, four 3×3 convolutions). 256 → 512 channels,
    /// downsampling 2.
    pub fn basic_network_ii<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
    ) -> Self {
        let blocks = vec![
            BasicBlock::new(store, rng, &format!("{prefix}.0"), 256, 512, 2),
            BasicBlock::new(store, rng, &format!("{prefix}.1"), 512, 512, 1),
        ];
        Self {
            stem: None,
            blocks,
            in_channels: 256,
            out_channels: 512,
            stride_product: 2,
        }
    }

    pub fn forward<T: Element>(&self, fx: &mut Fwd<'_, T>, x: NodeId) -> Result<NodeId> {
        let shape = fx.tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::Input(format!(
                "feature extractor expects N\u{d7}{}\u{d7}H\u{d7}W input, got {shape:?}",
                self.in_channels
            )));
        }
        let mut y = x;
        if let Some((conv, bn)) = &self.stem {
            y = conv.forward(fx, y);
            y = bn.forward(fx, y);
            y = ops::relu(fx.tape, y);
            y = ops::maxpool(fx.tape, y, 3, 2, 1);
        }
        for block in &self.blocks {
            y = block.forward(fx, y);
        }
        Ok(y)
    }
}

/// The three branch bodies. Under a sharing policy some (or all) of them
/// hold identical parameter ids.
#[derive(Clone)]
pub struct Branches {
    pub sb: FeatureExtractor,
    pub ub: FeatureExtractor,
    pub lb: FeatureExtractor,
    pub policy: SharingPolicy,
}

pub fn build_branches<T: Element>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    policy: SharingPolicy,
    input_channels: usize,
) -> Result<Branches> {
    let branches = match policy {
        SharingPolicy::AllShared => {
            let shared = FeatureExtractor::basic_network_i(store, rng, "backbone", input_channels)?;
            Branches {
                sb: shared.clone(),
                ub: shared.clone(),
                lb: shared,
                policy,
            }
        }
        SharingPolicy::HalvesShared => {
            let sb = FeatureExtractor::basic_network_i(store, rng, "sb", input_channels)?;
            let half = FeatureExtractor::basic_network_i(store, rng, "half", input_channels)?;
            Branches {
                sb,
                ub: half.clone(),
                lb: half,
                policy,
            }
        }
        SharingPolicy::Independent => Branches {
            sb: FeatureExtractor::basic_network_i(store, rng, "sb", input_channels)?,
            ub: FeatureExtractor::basic_network_i(store, rng, "ub", input_channels)?,
            lb: FeatureExtractor::basic_network_i(store, rng, "lb", input_channels)?,
            policy,
        },
    };
    Ok(branches)
}

fn bn_suffixes(prefix: &str) -> Vec<String> {
    ["weight", "bias", "running_mean", "running_var"]
        .iter()
        .map(|s| format!("{prefix}.{s}"))
        .collect()
}

/// Keys of the reference network's stem + stages 1–3, in documented order.
pub fn reference_backbone_keys() -> Vec<String> {
    let mut keys = vec!["conv1.weight".to_string()];
    keys.extend(bn_suffixes("bn1"));
    for layer in 1..=3 {
        for block in 0..2 {
            let p = format!("layer{layer}.{block}");
            keys.push(format!("{p}.conv1.weight"));
            keys.extend(bn_suffixes(&format!("{p}.bn1")));
            keys.push(format!("{p}.conv2.weight"));
            keys.extend(bn_suffixes(&format!("{p}.bn2")));
            if layer > 1 && block == 0 {
                keys.push(format!("{p}.downsample.0.weight"));
                keys.extend(bn_suffixes(&format!("{p}.downsample.1")));
            }
        }
    }
    keys
}

/// Keys of the reference network's final stage, in documented order.
pub fn reference_stage4_keys() -> Vec<String> {
    let mut keys = Vec::new();
    for block in 0..2 {
        let p = format!("layer4.{block}");
        keys.push(format!("{p}.conv1.weight"));
        keys.extend(bn_suffixes(&format!("{p}.bn1")));
        keys.push(format!("{p}.conv2.weight"));
        keys.extend(bn_suffixes(&format!("{p}.bn2")));
        if block == 0 {
            keys.push(format!("{p}.downsample.0.weight"));
            keys.extend(bn_suffixes(&format!("{p}.downsample.1")));
        }
    }
    keys
}

/// Copy an 18-layer reference weight table into the model: stem + stages 1–3
/// into every Basic Network I instance of the policy, stage 4 into the Basic
/// Network II instance under `refine_prefix`. Classifier weights in the
/// table (`fc.*`) are ignored; the head stays freshly initialized. Returns
/// the number of tensors copied.
pub fn load_pretrained<T: Element>(
    store: &mut ParamStore<T>,
    policy: SharingPolicy,
    refine_prefix: Option<&str>,
    table: &indexmap::IndexMap<String, ArrayD<f32>>,
) -> Result<usize> {
    let mut copied = 0usize;
    let fetch = |key: &str| -> Result<&ArrayD<f32>> {
        table
            .get(key)
            .ok_or_else(|| Error::Load(format!("weight table is missing required key `{key}`")))
    };

    for instance in policy.instance_prefixes() {
        for key in reference_backbone_keys() {
            let src = fetch(&key)?;
            let dst_name = format!("{instance}.{key}");
            let id = store.lookup(&dst_name).ok_or_else(|| {
                Error::Load(format!("model has no parameter `{dst_name}` to load into"))
            })?;
            load_tensor_checked(store, id, &dst_name, src.mapv(|v| T::cast(v as f64)))?;
            copied += 1;
        }
    }

    if let Some(refine) = refine_prefix {
        for key in reference_stage4_keys() {
            let src = fetch(&key)?;
            let suffix = key.strip_prefix("layer4.").unwrap();
            let dst_name = format!("{refine}.{suffix}");
            let id = store.lookup(&dst_name).ok_or_else(|| {
                Error::Load(format!("model has no parameter `{dst_name}` to load into"))
            })?;
            load_tensor_checked(store, id, &dst_name, src.mapv(|v| T::cast(v as f64)))?;
            copied += 1;
        }
    }
    Ok(copied)
}
