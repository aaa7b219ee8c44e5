//! Accuracy, confusion matrices, cross-database evaluation, and the
//! ablation-matrix runner.

pub mod profile;
pub mod saliency;

use crate::config::RunConfig;
use crate::data::{make_batch, Dataset};
use crate::error::{Error, Result};
use crate::model::{CmNet, FwdOptions};
use crate::nn::Mode;
use crate::tensor::{Element, Tape};
use ndarray::Array2;

/// Row-per-true-class, column-per-predicted-class tallies.
#[derive(Clone, Debug)]
pub struct ConfusionMatrix {
    pub counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            counts: Array2::zeros((k, k)),
        }
    }

    pub fn record(&mut self, true_class: usize, predicted: usize) {
        self.counts[[true_class, predicted]] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let trace: u64 = (0..self.counts.nrows()).map(|i| self.counts[[i, i]]).sum();
        trace as f64 / total as f64
    }

    /// Row-normalized rates; rows without samples stay zero.
    pub fn normalized(&self) -> Array2<f64> {
        let k = self.counts.nrows();
        let mut out = Array2::zeros((k, k));
        for i in 0..k {
            let row_sum: u64 = self.counts.row(i).sum();
            if row_sum > 0 {
                for j in 0..k {
                    out[[i, j]] = self.counts[[i, j]] as f64 / row_sum as f64;
                }
            }
        }
        out
    }

    /// Delimited text: header row of class names, then one row per true
    /// class with counts.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("true\\pred");
        for name in class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (i, name) in class_names.iter().enumerate() {
            out.push_str(name);
            for j in 0..class_names.len() {
                out.push_str(&format!(",{}", self.counts[[i, j]]));
            }
            out.push('\n');
        }
        out
    }

    /// Simple cell-shaded rendering of the normalized matrix.
    pub fn render_png(&self, path: &std::path::Path) -> Result<()> {
        let k = self.counts.nrows();
        let cell = 32u32;
        let norm = self.normalized();
        let mut img = image::RgbImage::new(k as u32 * cell, k as u32 * cell);
        for i in 0..k {
            for j in 0..k {
                let v = norm[[i, j]];
                let shade = (v * 255.0).round().clamp(0.0, 255.0) as u8;
                let color = image::Rgb([255 - shade, 255 - shade, 255u8.saturating_sub(shade / 4)]);
                for y in 0..cell {
                    for x in 0..cell {
                        img.put_pixel(j as u32 * cell + x, i as u32 * cell + y, color);
                    }
                }
            }
        }
        img.save(path).map_err(Error::from)
    }
}

/// Batched argmax evaluation. Deterministic; class counts must agree.
pub fn evaluate<T: Element>(
    model: &mut CmNet<T>,
    dataset: &Dataset,
    batch_size: usize,
) -> Result<(f64, ConfusionMatrix)> {
    if dataset.num_classes() != model.cfg.num_classes {
        return Err(Error::Evaluation(format!(
            "dataset has {} classes but the head produces {}",
            dataset.num_classes(),
            model.cfg.num_classes
        )));
    }
    let k = model.cfg.num_classes;
    let mut matrix = ConfusionMatrix::new(k);
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = make_batch::<T>(dataset, chunk, &model.cfg)?;
        let mut tape = Tape::new(false);
        let arts = model.forward(&mut tape, &batch, Mode::Eval, FwdOptions::default())?;
        let logits = tape
            .value(arts.logits)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        for (row, &y) in logits.outer_iter().zip(&batch.labels) {
            let mut best = (T::neg_infinity(), 0usize);
            for (j, v) in row.iter().enumerate() {
                if *v > best.0 {
                    best = (*v, j);
                }
            }
            matrix.record(y, best.1);
        }
    }
    Ok((matrix.accuracy(), matrix))
}

/// Evaluate on a foreign dataset after remapping its labels into the
/// model's classes. `label_map` must be a total injection from the foreign
/// labels present in the dataset.
pub fn cross_evaluate<T: Element>(
    model: &mut CmNet<T>,
    foreign: &Dataset,
    label_map: &[(usize, usize)],
    batch_size: usize,
) -> Result<(f64, ConfusionMatrix)> {
    let k = model.cfg.num_classes;
    let mut map = std::collections::HashMap::new();
    let mut used_targets = std::collections::HashSet::new();
    for &(from, to) in label_map {
        if to >= k {
            return Err(Error::Evaluation(format!(
                "label map target {to} out of range for {k} classes"
            )));
        }
        if map.insert(from, to).is_some() {
            return Err(Error::Evaluation(format!(
                "label map lists foreign label {from} twice"
            )));
        }
        if !used_targets.insert(to) {
            return Err(Error::Evaluation(format!(
                "label map is not injective: target {to} repeated"
            )));
        }
    }
    let mut remapped_samples = Vec::with_capacity(foreign.len());
    for s in &foreign.samples {
        let to = *map.get(&s.label).ok_or_else(|| {
            Error::Evaluation(format!(
                "foreign label {} (`{}`) has no mapping",
                s.label, foreign.class_names[s.label]
            ))
        })?;
        let mut s = s.clone();
        s.label = to;
        remapped_samples.push(s);
    }
    let remapped = Dataset {
        samples: remapped_samples,
        class_names: (0..k).map(|c| format!("model_class{c}")).collect(),
        split_tag: foreign.split_tag,
    };
    evaluate(model, &remapped, batch_size)
}

/// Train and evaluate each requested ablation row on the given datasets.
/// Returns `(row, accuracy)` pairs in the requested order.
pub fn ablation_run<T: Element>(
    base: &RunConfig,
    rows: &[char],
    train_ds: &Dataset,
    eval_ds: &Dataset,
) -> Result<Vec<(char, f64)>> {
    let mut results = Vec::with_capacity(rows.len());
    for &row in rows {
        let mut cfg = base.clone();
        cfg.train.ablation_row = Some(row.to_string());
        let model_cfg = cfg.effective_model()?;
        let mut model = CmNet::<T>::build(&model_cfg, cfg.train.seed)?;
        crate::engine::train(&mut model, train_ds, None, &cfg, |_| {})?;
        let (acc, _) = evaluate(&mut model, eval_ds, cfg.train.batch_size)?;
        log::info!("ablation row {row}: accuracy {acc:.4}");
        results.push((row, acc));
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::{ImageSample, SplitTag};
    use ndarray::Array3;

    #[test]
    fn hand_built_three_sample_confusion() {
        // true {0,1,1}, pred {0,1,0} → accuracy 2/3, counts [[1,0],[1,1]]
        let mut m = ConfusionMatrix::new(2);
        m.record(0, 0);
        m.record(1, 1);
        m.record(1, 0);
        assert!((m.accuracy() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.counts[[0, 0]], 1);
        assert_eq!(m.counts[[0, 1]], 0);
        assert_eq!(m.counts[[1, 0]], 1);
        assert_eq!(m.counts[[1, 1]], 1);
    }

    #[test]
    fn normalized_rows_sum_to_one() {
        let mut m = ConfusionMatrix::new(3);
        for (t, p) in [(0, 0), (0, 1), (1, 1), (1, 1), (1, 2), (2, 0)] {
            m.record(t, p);
        }
        let n = m.normalized();
        for i in 0..3 {
            let s: f64 = n.row(i).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let mut perfect = ConfusionMatrix::new(2);
        perfect.record(0, 0);
        perfect.record(1, 1);
        assert_eq!(perfect.accuracy(), 1.0);
        assert_eq!(perfect.counts[[0, 1]] + perfect.counts[[1, 0]], 0);

        // all-class-0 predictions on a balanced set
        let mut constant = ConfusionMatrix::new(2);
        for _ in 0..5 {
            constant.record(0, 0);
            constant.record(1, 0);
        }
        assert!((constant.accuracy() - 0.5).abs() < 1e-12);
        assert_eq!(constant.counts.column(1).sum(), 0);
    }

    #[test]
    fn class_count_mismatch_is_an_error() {
        let cfg = ModelConfig {
            num_classes: 3,
            input_size: 64,
            ..Default::default()
        };
        let mut model = CmNet::<f32>::build(&cfg, 0).unwrap();
        let ds = Dataset {
            samples: vec![ImageSample {
                pixels: Array3::zeros((64, 64, 3)),
                label: 0,
                path: None,
            }],
            class_names: vec!["a".into(), "b".into()],
            split_tag: SplitTag::Test,
        };
        assert!(matches!(
            evaluate(&mut model, &ds, 4),
            Err(Error::Evaluation(_))
        ));
    }

    #[test]
    fn cross_evaluate_validates_the_map_and_identity_matches_evaluate() {
        let cfg = ModelConfig {
            num_classes: 2,
            input_size: 64,
            ..Default::default()
        };
        let mut model = CmNet::<f32>::build(&cfg, 1).unwrap();
        let ds = crate::data::synth::synth_generate(
            3,
            3,
            2,
            0.0,
            64,
            crate::config::SynthLayout::Faces,
        )
        .unwrap();
        let (direct, cm_direct) = evaluate(&mut model, &ds, 4).unwrap();
        let (via_map, cm_map) =
            cross_evaluate(&mut model, &ds, &[(0, 0), (1, 1)], 4).unwrap();
        assert_eq!(direct, via_map);
        assert_eq!(cm_direct.counts, cm_map.counts);

        // missing mapping
        assert!(cross_evaluate(&mut model, &ds, &[(0, 0)], 4).is_err());
        // non-injective
        assert!(cross_evaluate(&mut model, &ds, &[(0, 0), (1, 0)], 4).is_err());
    }
}
