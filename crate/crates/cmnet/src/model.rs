//! Full network assembly: branch bodies → cross-modal fusion → refinement →
//! global-average-pooled affine head, with every ablation variant
//! constructible from a [`ModelConfig`].

use crate::backbones::{build_branches, Branches, FeatureExtractor};
use crate::cmem::{cmem_forward, split_batch};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{FlopRecorder, Fwd, Linear, Mode, ParamStore};
use crate::sfirm::{build_attention, Sfirm};
use crate::tensor::{ops, Element, NodeId, Tape};
use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One preprocessed batch. `left`/`right` are present when the model uses
/// the half-face branches.
pub struct Batch<T: Element> {
    pub whole: ArrayD<T>,
    pub left: Option<ArrayD<T>>,
    pub right: Option<ArrayD<T>>,
    pub labels: Vec<usize>,
}

impl<T: Element> Batch<T> {
    /// Build a batch from a whole-face tensor, splitting per configuration.
    pub fn from_whole(whole: ArrayD<T>, labels: Vec<usize>, cfg: &ModelConfig) -> Result<Self> {
        let (left, right) = if cfg.use_cmem {
            let (l, r) = split_batch(&whole, cfg.mirror_right)?;
            (Some(l), Some(r))
        } else {
            (None, None)
        };
        Ok(Self {
            whole,
            left,
            right,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.whole.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Tape handles produced by one forward pass.
pub struct Artifacts {
    pub logits: NodeId,
    /// Feature map feeding the head (refinement output, or fusion output
    /// when the refinement stage is off).
    pub refined: NodeId,
    /// Intermediate after the channel-attention phase, when present.
    pub o_se: Option<NodeId>,
    /// Basic Network II output before attention, when present.
    pub r: Option<NodeId>,
    /// Cross-modal fusion output (whole-branch output when fusion is off).
    pub fused: NodeId,
    pub f_left: Option<NodeId>,
    pub f_right: Option<NodeId>,
    pub input_whole: NodeId,
    pub input_left: Option<NodeId>,
    pub input_right: Option<NodeId>,
    /// Tape leaves of the parameters used in this pass, keyed by raw
    /// parameter index. Gradients are read from these after a backward.
    pub param_leaves: std::collections::HashMap<usize, NodeId>,
}

#[derive(Default, Clone, Copy)]
pub struct FwdOptions {
    pub need_input_grads: bool,
    pub gates_to_one: bool,
}

/// The assembled network.
pub struct CmNet<T: Element> {
    pub store: ParamStore<T>,
    pub cfg: ModelConfig,
    branches: Option<Branches>,
    solo_backbone: Option<FeatureExtractor>,
    sfirm: Option<Sfirm>,
    head: Linear,
    /// Basic Network I instance prefixes actually constructed.
    pub instance_prefixes: Vec<String>,
}

impl<T: Element> CmNet<T> {
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let (branches, solo_backbone, instance_prefixes) = if cfg.use_cmem {
            let br = build_branches(&mut store, &mut rng, cfg.sharing, cfg.input_channels)?;
            let prefixes = cfg
                .sharing
                .instance_prefixes()
                .iter()
                .map(|s| s.to_string())
                .collect();
            (Some(br), None, prefixes)
        } else {
            let solo =
                FeatureExtractor::basic_network_i(&mut store, &mut rng, "backbone", cfg.input_channels)?;
            (None, Some(solo), vec!["backbone".to_string()])
        };

        let sfirm = if cfg.use_refine {
            let refine = FeatureExtractor::basic_network_ii(&mut store, &mut rng, "refine");
            let attention = build_attention(
                &mut store,
                &mut rng,
                &cfg.attention,
                cfg.division(),
                cfg.sigmoid_gates,
                refine.out_channels,
            )?;
            Some(Sfirm { refine, attention })
        } else {
            None
        };

        let head_in = if cfg.use_refine { 512 } else { 256 };
        let head = Linear::new(&mut store, &mut rng, "head", head_in, cfg.num_classes);

        Ok(Self {
            store,
            cfg: cfg.clone(),
            branches,
            solo_backbone,
            sfirm,
            head,
            instance_prefixes,
        })
    }

    pub fn head_in_features(&self) -> usize {
        self.head.in_features
    }

    pub fn sfirm_module(&self) -> Option<&Sfirm> {
        self.sfirm.as_ref()
    }

    pub fn branches_ref(&self) -> Option<&Branches> {
        self.branches.as_ref()
    }

    /// Prefix of the Basic Network II parameters, when the stage exists.
    pub fn refine_prefix(&self) -> Option<&'static str> {
        self.sfirm.as_ref().map(|_| "refine")
    }

    /// Reinitialize the classifier head for a new class count (fine-tuning
    /// on a dataset with different classes).
    pub fn replace_head(&mut self, num_classes: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head_in = self.head.in_features;
        let head = Linear::new(
            &mut self.store,
            &mut rng,
            &format!("head_{num_classes}c"),
            head_in,
            num_classes,
        );
        self.head = head;
        self.cfg.num_classes = num_classes;
    }

    pub fn parameter_count(&self) -> usize {
        self.store.num_trainable_scalars()
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        batch: &Batch<T>,
        mode: Mode,
        opts: FwdOptions,
    ) -> Result<Artifacts> {
        self.forward_recorded(tape, batch, mode, opts, None)
    }

    pub fn forward_recorded(
        &mut self,
        tape: &mut Tape<T>,
        batch: &Batch<T>,
        mode: Mode,
        opts: FwdOptions,
        flops: Option<&mut FlopRecorder>,
    ) -> Result<Artifacts> {
        let mut fx = Fwd::new(tape, &mut self.store, mode);
        fx.need_input_grads = opts.need_input_grads;
        fx.gates_to_one = opts.gates_to_one;
        fx.flops = flops;

        let input_whole = fx.tape.leaf(batch.whole.clone());
        let (fused, f_left, f_right, input_left, input_right) = match &self.branches {
            Some(branches) => {
                let left = batch
                    .left
                    .as_ref()
                    .ok_or_else(|| Error::Input("model expects half-face inputs".into()))?;
                let right = batch
                    .right
                    .as_ref()
                    .ok_or_else(|| Error::Input("model expects half-face inputs".into()))?;
                let input_left = fx.tape.leaf(left.clone());
                let input_right = fx.tape.leaf(right.clone());
                let out = cmem_forward(&mut fx, input_whole, input_left, input_right, branches)?;
                (
                    out.fused,
                    Some(out.f_left),
                    Some(out.f_right),
                    Some(input_left),
                    Some(input_right),
                )
            }
            None => {
                let solo = self.solo_backbone.as_ref().expect("solo backbone");
                let f = solo.forward(&mut fx, input_whole)?;
                (f, None, None, None, None)
            }
        };

        let (refined, o_se, r) = match &self.sfirm {
            Some(sfirm) => {
                let out = sfirm.forward(&mut fx, fused)?;
                (out.refined, Some(out.o_se), Some(out.r))
            }
            None => (fused, None, None),
        };

        let pooled = ops::gap(fx.tape, refined);
        let logits = self.head.forward(&mut fx, pooled);
        let param_leaves = fx.into_param_leaves();

        Ok(Artifacts {
            logits,
            refined,
            o_se,
            r,
            fused,
            f_left,
            f_right,
            input_whole,
            input_left,
            input_right,
            param_leaves,
        })
    }
}
