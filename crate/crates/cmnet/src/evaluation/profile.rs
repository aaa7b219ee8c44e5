//! Parameter, FLOP, and latency profiling.
//!
//! FLOPs use closed forms per parameterized layer (conv:
//! `Kh·Kw·Cin·Cout·Hout·Wout`, affine: `in·out`), one fused multiply-add
//! counted as one FLOP. Weight-shared modules are counted once, at the
//! shape of their final call in the pass (the half-face branch pass for the
//! shared backbone) — the convention under which the published complexity
//! table reproduces. `flops_all_calls` additionally reports every executed
//! call.

use crate::config::ModelConfig;
use crate::data::synth::synth_generate;
use crate::data::make_batch;
use crate::error::{Error, Result};
use crate::model::{CmNet, FwdOptions};
use crate::nn::{FlopRecorder, Mode};
use crate::tensor::Tape;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub input_size: usize,
    /// Trainable scalar count.
    pub parameter_count: usize,
    /// MACs, shared modules deduplicated at their last-call shape.
    pub flops: u64,
    /// MACs across every executed layer call.
    pub flops_all_calls: u64,
    /// Median wall time (ms) for a batch of `latency_batch`, when measured.
    pub latency_ms: Option<f64>,
    pub latency_batch: usize,
    pub convention: String,
}

pub struct LatencyOpts {
    pub batch: usize,
    pub reps: usize,
    pub warmups: usize,
}

impl Default for LatencyOpts {
    fn default() -> Self {
        Self {
            batch: 32,
            reps: 5,
            warmups: 2,
        }
    }
}

/// Profile a model configuration at one of the published input sizes.
pub fn profile(
    cfg: &ModelConfig,
    input_size: usize,
    seed: u64,
    latency: Option<LatencyOpts>,
) -> Result<ComplexityReport> {
    if !matches!(input_size, 128 | 224 | 512) {
        return Err(Error::Config(format!(
            "profile input size must be 128, 224 or 512, got {input_size}"
        )));
    }
    let mut cfg = cfg.clone();
    cfg.input_size = input_size;
    let mut model = CmNet::<f32>::build(&cfg, seed)?;
    let parameter_count = model.parameter_count();

    // single recorded forward at batch 1
    let ds = synth_generate(seed, 1, cfg.num_classes.max(2), 0.0, input_size, crate::config::SynthLayout::Faces)?;
    let batch = make_batch::<f32>(&ds, &[0], &cfg)?;
    let mut recorder = FlopRecorder::default();
    let mut tape = Tape::new(false);
    model.forward_recorded(
        &mut tape,
        &batch,
        Mode::Eval,
        FwdOptions::default(),
        Some(&mut recorder),
    )?;
    drop(tape);

    let latency_batch = latency.as_ref().map(|l| l.batch).unwrap_or(0);
    let latency_ms = match latency {
        None => None,
        Some(opts) => {
            let ds = synth_generate(
                seed.wrapping_add(1),
                opts.batch.div_ceil(cfg.num_classes.max(2)),
                cfg.num_classes.max(2),
                0.0,
                input_size,
                crate::config::SynthLayout::Faces,
            )?;
            let idx: Vec<usize> = (0..opts.batch.min(ds.len())).collect();
            let timed_batch = make_batch::<f32>(&ds, &idx, &cfg)?;
            for _ in 0..opts.warmups {
                let mut tape = Tape::new(false);
                model.forward(&mut tape, &timed_batch, Mode::Eval, FwdOptions::default())?;
            }
            let mut times = Vec::with_capacity(opts.reps);
            for _ in 0..opts.reps.max(1) {
                let t0 = std::time::Instant::now();
                let mut tape = Tape::new(false);
                model.forward(&mut tape, &timed_batch, Mode::Eval, FwdOptions::default())?;
                times.push(t0.elapsed().as_secs_f64() * 1e3);
            }
            times.sort_by(|a, b| a.partial_cmp(b).unwrap());
            Some(times[times.len() / 2])
        }
    };

    Ok(ComplexityReport {
        input_size,
        parameter_count,
        flops: recorder.macs_unique_last_call(),
        flops_all_calls: recorder.macs_all_calls(),
        latency_ms,
        latency_batch,
        convention: "MACs; conv Kh*Kw*Cin*Cout*Hout*Wout, affine in*out; \
                     shared modules counted once at final-call shape"
            .to_string(),
    })
}
