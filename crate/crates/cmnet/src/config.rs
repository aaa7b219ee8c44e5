//! Run configuration: a flat TOML document with three tables (`model`,
//! `train`, `data`), dotted-key overrides, and the ablation-row presets.

use crate::backbones::SharingPolicy;
use crate::error::{Error, Result};
use crate::sfirm::DivisionSpec;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    None,
    /// Published block attention applied to the whole map.
    Cbam,
    /// Division pipeline (per-tile channel attention, per-group spatial
    /// attention).
    #[default]
    Divided,
}

fn default_classes() -> usize {
    7
}
fn default_input_channels() -> usize {
    3
}
fn default_input_size() -> usize {
    224
}
fn default_alpha() -> f64 {
    0.9
}
fn default_spatial_parts() -> usize {
    4
}
fn default_channel_groups() -> usize {
    4
}
fn default_norm_mean() -> [f64; 3] {
    // statistics the externally supplied pretrained weights expect
    [0.485, 0.456, 0.406]
}
fn default_norm_std() -> [f64; 3] {
    [0.229, 0.224, 0.225]
}

/// Architecture switches.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub input_channels: usize,
    /// Nominal square input resolution (preprocessing target; the network
    /// itself is size-agnostic).
    pub input_size: usize,
    pub sharing: SharingPolicy,
    /// Flip the right half horizontally before the lower branch.
    pub mirror_right: bool,
    /// Three-branch fusion on; off leaves only the whole-face branch.
    pub use_cmem: bool,
    /// Basic Network II refinement stage on.
    pub use_refine: bool,
    pub attention: AttentionKind,
    pub spatial_parts: usize,
    pub channel_groups: usize,
    /// Bound the division-attention fusion weights through a sigmoid.
    pub sigmoid_gates: bool,
    /// Couple the half-face symmetry loss into training.
    pub use_symmetry_loss: bool,
    /// Weight of the global loss in the compound loss.
    pub alpha: f64,
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: default_classes(),
            input_channels: default_input_channels(),
            input_size: default_input_size(),
            sharing: SharingPolicy::AllShared,
            mirror_right: false,
            use_cmem: true,
            use_refine: true,
            attention: AttentionKind::Divided,
            spatial_parts: default_spatial_parts(),
            channel_groups: default_channel_groups(),
            sigmoid_gates: true,
            use_symmetry_loss: true,
            alpha: default_alpha(),
            norm_mean: default_norm_mean(),
            norm_std: default_norm_std(),
        }
    }
}

impl ModelConfig {
    pub fn division(&self) -> DivisionSpec {
        DivisionSpec {
            spatial_parts: self.spatial_parts,
            channel_groups: self.channel_groups,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha must lie in [0,1], got {}",
                self.alpha
            )));
        }
        if self.input_size < 32 {
            return Err(Error::Config("input_size must be at least 32".into()));
        }
        if self.attention != AttentionKind::None && !self.use_refine {
            return Err(Error::Config(
                "attention refinement requires the refinement stage (use_refine)".into(),
            ));
        }
        if self.use_symmetry_loss && !self.use_cmem {
            return Err(Error::Config(
                "symmetry loss needs the half-face branches (use_cmem)".into(),
            ));
        }
        if self.attention == AttentionKind::Divided {
            self.division().validate()?;
        }
        Ok(())
    }

    /// Apply one of the ablation presets a–i. Row h is the full default
    /// configuration.
    pub fn apply_ablation_row(&mut self, row: char) -> Result<()> {
        let base = ModelConfig {
            num_classes: self.num_classes,
            input_channels: self.input_channels,
            input_size: self.input_size,
            sharing: self.sharing,
            mirror_right: self.mirror_right,
            norm_mean: self.norm_mean,
            norm_std: self.norm_std,
            alpha: self.alpha,
            ..ModelConfig::default()
        };
        *self = base;
        match row {
            'a' => {
                self.use_cmem = false;
                self.use_refine = false;
                self.attention = AttentionKind::None;
                self.use_symmetry_loss = false;
            }
            'b' => {
                self.use_cmem = false;
                self.attention = AttentionKind::None;
                self.use_symmetry_loss = false;
            }
            'c' => {
                self.attention = AttentionKind::None;
                self.use_symmetry_loss = false;
            }
            'd' => {
                self.attention = AttentionKind::None;
            }
            'e' => {
                self.attention = AttentionKind::Cbam;
            }
            'f' => {
                self.attention = AttentionKind::Divided;
                self.spatial_parts = 4;
                self.channel_groups = 1;
            }
            'g' => {
                self.attention = AttentionKind::Divided;
                self.spatial_parts = 1;
                self.channel_groups = 4;
            }
            'h' => {
                self.attention = AttentionKind::Divided;
                self.spatial_parts = 4;
                self.channel_groups = 4;
            }
            'i' => {
                self.attention = AttentionKind::Divided;
                self.spatial_parts = 9;
                self.channel_groups = 9;
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation row `{other}` (expected a..i)"
                )))
            }
        }
        Ok(())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    SgdMomentum,
    AdaptiveMoment,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    None,
    Step,
    HalveEvery,
}

/// Optimization settings.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: ScheduleKind,
    /// Multiplier for `schedule = "step"`.
    pub schedule_factor: f64,
    /// Period (epochs) for `step` and `halve_every`.
    pub schedule_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Optional ablation preset applied on top of the model table.
    pub ablation_row: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::SgdMomentum,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: ScheduleKind::Step,
            schedule_factor: 0.1,
            schedule_every: 15,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            ablation_row: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.schedule != ScheduleKind::None && self.schedule_every == 0 {
            return Err(Error::Config("schedule_every must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate at a 0-based epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            ScheduleKind::None => self.lr,
            ScheduleKind::Step => {
                self.lr * self.schedule_factor.powi((epoch / self.schedule_every) as i32)
            }
            ScheduleKind::HalveEvery => self.lr * 0.5f64.powi((epoch / self.schedule_every) as i32),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synth,
    Folder,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SynthLayout {
    /// Mirror-symmetric face-like patterns, class-dependent layouts.
    #[default]
    Faces,
    /// Class-discriminative blob in one quadrant (saliency benchmarks).
    Quadrants,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplerPolicy {
    #[default]
    None,
    Balance,
}

/// Dataset settings.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Class-per-subdirectory root for `source = "folder"`.
    pub path: String,
    pub layout: SynthLayout,
    pub classes: usize,
    pub n_per_class: usize,
    pub asymmetry: f64,
    /// Fraction of samples held out for validation (0 disables).
    pub val_fraction: f64,
    pub sampler: SamplerPolicy,
    /// Replicate single-channel images to three channels at ingestion.
    pub grayscale_expand: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synth,
            path: String::new(),
            layout: SynthLayout::Faces,
            classes: 2,
            n_per_class: 32,
            asymmetry: 0.0,
            val_fraction: 0.0,
            sampler: SamplerPolicy::None,
            grayscale_expand: true,
        }
    }
}

/// The full run configuration: one TOML document, three tables.
#[derive(Clone, Debug, Serialize, Deserialize, Default, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Model config with the ablation row (if any) applied.
    pub fn effective_model(&self) -> Result<ModelConfig> {
        let mut m = self.model.clone();
        if let Some(row) = &self.train.ablation_row {
            let mut chars = row.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => m.apply_ablation_row(c)?,
                _ => {
                    return Err(Error::Config(format!(
                        "ablation_row must be a single letter a..i, got `{row}`"
                    )))
                }
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse failure: {e}")))
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    /// Parse and apply `key.path=value` overrides on the TOML tree before
    /// deserializing, so overrides behave exactly like edits to the file.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value = toml::from_str(text)
            .map_err(|e| Error::Config(format!("config parse failure: {e}")))?;
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{ov}` is not key=value")))?;
            let parsed: toml::Value = match raw.parse::<toml::Value>() {
                Ok(v) => v,
                Err(_) => toml::Value::String(raw.to_string()),
            };
            set_dotted(&mut value, key.trim(), parsed)?;
        }
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e| Error::Config(format!("config field error: {e}")))?;
        Ok(cfg)
    }
}

fn set_dotted(root: &mut toml::Value, dotted: &str, new: toml::Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = dotted.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path `{dotted}` hits a non-table")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), new);
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert(toml::Value::Table(Default::default()));
    }
    Err(Error::Config(format!("empty override path `{dotted}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn row_h_is_the_default_configuration() {
        let mut m = ModelConfig::default();
        m.apply_ablation_row('h').unwrap();
        assert_eq!(m, ModelConfig::default());
    }

    #[test]
    fn row_presets_toggle_expected_flags() {
        let mut m = ModelConfig::default();
        m.apply_ablation_row('a').unwrap();
        assert!(!m.use_cmem && !m.use_refine && !m.use_symmetry_loss);
        m.apply_ablation_row('e').unwrap();
        assert_eq!(m.attention, AttentionKind::Cbam);
        assert!(m.use_symmetry_loss);
        m.apply_ablation_row('i').unwrap();
        assert_eq!((m.spatial_parts, m.channel_groups), (9, 9));
        assert!(m.apply_ablation_row('z').is_err());
    }

    #[test]
    fn overrides_follow_dotted_paths() {
        let text = RunConfig::default().to_toml();
        let cfg = RunConfig::from_toml_with_overrides(
            &text,
            &[
                "model.alpha=0.5".to_string(),
                "train.epochs=3".to_string(),
                "data.layout=quadrants".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.model.alpha, 0.5);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.data.layout, SynthLayout::Quadrants);
        assert!(RunConfig::from_toml_with_overrides(&text, &["nonsense".into()]).is_err());
    }

    #[test]
    fn schedules_match_published_settings() {
        let step = TrainConfig {
            lr: 0.01,
            schedule: ScheduleKind::Step,
            schedule_factor: 0.1,
            schedule_every: 15,
            ..Default::default()
        };
        assert!((step.lr_at(14) - 0.01).abs() < 1e-15);
        assert!((step.lr_at(15) - 0.001).abs() < 1e-15);

        let halve = TrainConfig {
            lr: 0.1,
            schedule: ScheduleKind::HalveEvery,
            schedule_every: 50,
            ..Default::default()
        };
        assert!((halve.lr_at(49) - 0.1).abs() < 1e-15);
        assert!((halve.lr_at(50) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn validation_rejects_inconsistent_flags() {
        let mut m = ModelConfig::default();
        m.alpha = 1.5;
        assert!(m.validate().is_err());
        let mut m = ModelConfig::default();
        m.use_refine = false;
        assert!(m.validate().is_err()); // divided attention without refine
        let mut m = ModelConfig::default();
        m.use_cmem = false;
        assert!(m.validate().is_err()); // symmetry loss without halves
    }
}
