//! Dataset ingestion and preprocessing. Images are pre-cropped, aligned
//! faces; anything upstream of that (detection, alignment) is out of scope.

pub mod sampler;
pub mod synth;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Batch;
use crate::tensor::Element;
use ndarray::prelude::*;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// One decoded image: H×W×C pixels in [0,1] (C is 1 or 3) plus its label.
#[derive(Clone)]
pub struct ImageSample {
    pub pixels: Array3<f32>,
    pub label: usize,
    pub path: Option<PathBuf>,
}

#[derive(Copy, Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

/// An ordered, label-indexed image collection.
pub struct Dataset {
    pub samples: Vec<ImageSample>,
    pub class_names: Vec<String>,
    pub split_tag: SplitTag,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.class_names.len()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Deterministic head/tail split (used for validation hold-outs): every
    /// k-th sample per class goes to the second set.
    pub fn split_val(mut self, val_fraction: f64) -> (Dataset, Option<Dataset>) {
        if val_fraction <= 0.0 {
            return (self, None);
        }
        let stride = (1.0 / val_fraction).round().max(2.0) as usize;
        let mut per_class_seen = vec![0usize; self.class_names.len()];
        let mut train = Vec::new();
        let mut val = Vec::new();
        for s in self.samples.drain(..) {
            let k = per_class_seen[s.label];
            per_class_seen[s.label] += 1;
            if k % stride == stride - 1 {
                val.push(s);
            } else {
                train.push(s);
            }
        }
        let val_ds = Dataset {
            samples: val,
            class_names: self.class_names.clone(),
            split_tag: SplitTag::Val,
        };
        let train_ds = Dataset {
            samples: train,
            class_names: self.class_names,
            split_tag: SplitTag::Train,
        };
        (train_ds, if val_ds.is_empty() { None } else { Some(val_ds) })
    }

    /// Write a `path,label` manifest (one line per sample, stable order).
    pub fn export_manifest(&self, path: &Path) -> Result<()> {
        let mut out = String::from("path,label\n");
        for (i, s) in self.samples.iter().enumerate() {
            let p = s
                .path
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| format!("synth/{i:05}"));
            out.push_str(&format!("{p},{}\n", s.label));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Ingest a directory-per-class image tree. Classes and files are ordered
/// lexicographically so label assignment is stable across runs.
pub fn ingest_folder(root: &Path) -> Result<Dataset> {
    let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::Data(format!("cannot read dataset root {}: {e}", root.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!(
            "no class directories under {}",
            root.display()
        )));
    }

    let mut class_names = Vec::new();
    let mut samples = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        class_names.push(name.clone());
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        if files.is_empty() {
            log::warn!("class directory {} is empty", dir.display());
            continue;
        }
        for file in files {
            match image::open(&file) {
                Ok(img) => {
                    let rgb = img.to_rgb32f();
                    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
                    let pixels =
                        Array3::from_shape_vec((h, w, 3), rgb.into_raw())
                            .expect("decoded buffer matches dims");
                    samples.push(ImageSample {
                        pixels,
                        label,
                        path: Some(file),
                    });
                }
                Err(e) => {
                    log::warn!("skipping undecodable file {}: {e}", file.display());
                }
            }
        }
    }
    Ok(Dataset {
        samples,
        class_names,
        split_tag: SplitTag::Train,
    })
}

/// Resize to `size`×`size` (bilinear), replicate single-channel input to
/// three channels when `grayscale_expand`, and return H×W×3 pixels still in
/// image units (normalization happens at batch assembly).
pub fn preprocess(sample: &ImageSample, size: usize, grayscale_expand: bool) -> Result<Array3<f32>> {
    let (h, w, c) = sample.pixels.dim();
    if h == 0 || w == 0 {
        return Err(Error::Input("zero-area image".into()));
    }
    let rgb: Array3<f32> = match c {
        3 => sample.pixels.clone(),
        1 if grayscale_expand => {
            let mut out = Array3::zeros((h, w, 3));
            for ch in 0..3 {
                out.slice_mut(s![.., .., ch])
                    .assign(&sample.pixels.slice(s![.., .., 0]));
            }
            out
        }
        other => {
            return Err(Error::Input(format!(
                "expected 1 or 3 channels (with grayscale_expand for 1), got {other}"
            )))
        }
    };
    if h == size && w == size {
        return Ok(rgb);
    }
    let mut buf = image::Rgb32FImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([rgb[[y, x, 0]], rgb[[y, x, 1]], rgb[[y, x, 2]]]),
            );
        }
    }
    let resized = image::imageops::resize(
        &buf,
        size as u32,
        size as u32,
        image::imageops::FilterType::Triangle,
    );
    let out = Array3::from_shape_vec((size, size, 3), resized.into_raw())
        .expect("resized buffer matches dims");
    Ok(out)
}

/// Assemble a normalized NCHW batch and split halves per model config.
pub fn make_batch<T: Element>(
    dataset: &Dataset,
    indices: &[usize],
    cfg: &ModelConfig,
) -> Result<Batch<T>> {
    let size = cfg.input_size;
    let n = indices.len();
    let mut whole = ArrayD::<T>::zeros(IxDyn(&[n, 3, size, size]));
    let mut labels = Vec::with_capacity(n);
    for (bi, &si) in indices.iter().enumerate() {
        let sample = &dataset.samples[si];
        let img = preprocess(sample, size, true)?;
        for ch in 0..3 {
            let mean = cfg.norm_mean[ch];
            let std = cfg.norm_std[ch];
            for y in 0..size {
                for x in 0..size {
                    whole[[bi, ch, y, x]] =
                        T::cast((img[[y, x, ch]] as f64 - mean) / std);
                }
            }
        }
        labels.push(sample.label);
    }
    Batch::from_whole(whole, labels, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray_sample(h: usize, w: usize, v: f32) -> ImageSample {
        ImageSample {
            pixels: Array3::from_elem((h, w, 1), v),
            label: 0,
            path: None,
        }
    }

    #[test]
    fn grayscale_expansion_replicates_channels() {
        let s = gray_sample(48, 48, 0.37);
        let out = preprocess(&s, 224, true).unwrap();
        assert_eq!(out.dim(), (224, 224, 3));
        for v in out.iter() {
            assert!((v - 0.37).abs() < 1e-6);
        }
    }

    #[test]
    fn same_size_preprocess_is_identity() {
        let px = Array3::from_shape_fn((224, 224, 3), |(y, x, c)| {
            ((y * 7 + x * 3 + c) % 11) as f32 / 11.0
        });
        let s = ImageSample {
            pixels: px.clone(),
            label: 0,
            path: None,
        };
        let out = preprocess(&s, 224, false).unwrap();
        assert_eq!(out, px);
    }

    #[test]
    fn constant_image_stays_constant_through_resize() {
        let s = ImageSample {
            pixels: Array3::from_elem((100, 80, 3), 0.6),
            label: 0,
            path: None,
        };
        let out = preprocess(&s, 64, false).unwrap();
        for v in out.iter() {
            assert!((v - 0.6).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_area_image_is_an_error() {
        let s = ImageSample {
            pixels: Array3::zeros((0, 10, 3)),
            label: 0,
            path: None,
        };
        assert!(preprocess(&s, 64, false).is_err());
    }

    #[test]
    fn val_split_is_per_class_and_deterministic() {
        let samples: Vec<ImageSample> = (0..20)
            .map(|i| ImageSample {
                pixels: Array3::zeros((4, 4, 3)),
                label: i % 2,
                path: None,
            })
            .collect();
        let ds = Dataset {
            samples,
            class_names: vec!["a".into(), "b".into()],
            split_tag: SplitTag::Train,
        };
        let (train, val) = ds.split_val(0.25);
        let val = val.unwrap();
        assert_eq!(train.len(), 16);
        assert_eq!(val.len(), 4);
        assert_eq!(val.class_counts(), vec![2, 2]);
    }
}
