//! Synthetic multiscale detection task used to score pyramids.
//!
//! Scenes are noisy single-channel images with bright squares. Each square is
//! marked on the heatmap of exactly one level, chosen by its side length. A
//! small strided backbone feeds the (stacked) pyramid; a 1x1 head per output
//! level predicts presence logits trained with focal loss. The reward is the
//! heatmap AP on a held-out set.

mod data;
mod metric;
mod model;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph_compiler::CompileError;
use crate::micro_tensor::TensorError;
use crate::search_space::Level;

pub use data::{generate_dataset, Dataset, SceneObject, SyntheticScene};
pub use metric::{average_precision, evaluate_ap, focal_loss, focal_loss_scalar};
pub use model::{
    coarse_only_genome, evaluate_early_exit, evaluate_reward, evaluate_reward_on, train_deeply_supervised, train_model,
    EarlyExit, ProxyModel, RewardRecord, TrainLog,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProxyError {
    #[error("invalid-config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("stage-out-of-range: stage {stage} of {stack_n}")]
    StageOutOfRange { stage: usize, stack_n: usize },
    #[error("level-mismatch: task level {0} is not a pyramid output")]
    LevelMismatch(Level),
    #[error("training-diverged: non-finite loss")]
    Diverged,
}

impl ProxyError {
    pub fn code(&self) -> &'static str {
        match self {
            ProxyError::InvalidConfig(_) => "invalid-config",
            ProxyError::Compile(e) => e.code(),
            ProxyError::Tensor(TensorError::ShapeMismatch(_)) => "shape-mismatch",
            ProxyError::Tensor(TensorError::NoForwardPass) => "no-forward-pass",
            ProxyError::Tensor(_) => "tensor-error",
            ProxyError::StageOutOfRange { .. } => "stage-out-of-range",
            ProxyError::LevelMismatch(_) => "level-mismatch",
            ProxyError::Diverged => "training-diverged",
        }
    }
}

/// Everything that defines a proxy run apart from the genome and the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub image_side: usize,
    /// Levels that carry targets and heads. Sorted ascending.
    pub levels: Vec<Level>,
    pub min_objects: usize,
    pub max_objects: usize,
    /// `levels.len() + 1` strictly increasing side lengths; level `i` owns
    /// objects with side in `[t[i], t[i+1])`.
    pub size_thresholds: Vec<usize>,
    pub train_size: usize,
    pub val_size: usize,
    /// Dataset seed. Model init and batch order use the run seed.
    pub data_seed: u64,
    pub noise_std: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Steps over which the learning rate ramps linearly up to `lr`.
    pub warmup_steps: usize,
    /// Fraction of `steps` after which the learning rate drops by 10x.
    pub decay_at: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Width of every backbone stage.
    pub backbone_width: usize,
    /// Deepest level produced by strided convs; coarser inputs are max-pooled.
    pub backbone_top: Level,
    /// Overrides the genome's pyramid width when set.
    pub feature_dim: Option<usize>,
    /// Train batches used to re-estimate BN statistics before evaluation.
    pub bn_calibration_batches: usize,
}

impl TaskConfig {
    /// Three levels at 64 px; the default for search.
    pub fn search_default() -> Self {
        TaskConfig {
            image_side: 64,
            levels: vec![Level(2), Level(3), Level(4)],
            min_objects: 1,
            max_objects: 3,
            size_thresholds: vec![4, 8, 16, 32],
            train_size: 256,
            val_size: 64,
            data_seed: 0,
            noise_std: 0.3,
            steps: 300,
            batch_size: 8,
            lr: 0.1,
            warmup_steps: 30,
            decay_at: 0.8,
            momentum: 0.9,
            weight_decay: 1e-4,
            focal_alpha: 0.25,
            focal_gamma: 1.5,
            backbone_width: 8,
            backbone_top: Level(5),
            feature_dim: Some(8),
            bn_calibration_batches: 8,
        }
    }

    /// P3-P7 at 128 px, matching the 5-level pyramid presets.
    pub fn five_level() -> Self {
        TaskConfig::for_levels(&(3..=7).map(Level).collect::<Vec<_>>())
    }

    /// Search defaults retargeted to `levels`: bands double from 4 px and
    /// the image is the larger of 64 px and the coarsest stride.
    pub fn for_levels(levels: &[Level]) -> Self {
        let top = levels.iter().map(|l| l.0).max().unwrap_or(0);
        TaskConfig {
            image_side: 64usize.max(1 << top),
            levels: levels.to_vec(),
            size_thresholds: (0..=levels.len()).map(|i| 4 << i).collect(),
            ..TaskConfig::search_default()
        }
    }

    pub fn validate(&self) -> Result<(), ProxyError> {
        let bad = |m: String| Err(ProxyError::InvalidConfig(m));
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return bad(format!("focal_alpha {} outside (0, 1)", self.focal_alpha));
        }
        if !(self.focal_gamma >= 0.0) {
            return bad(format!("focal_gamma {} is negative", self.focal_gamma));
        }
        if self.levels.is_empty() || self.levels.windows(2).any(|w| w[0] >= w[1]) {
            return bad("levels must be non-empty and strictly increasing".into());
        }
        if self.size_thresholds.len() != self.levels.len() + 1 {
            return bad(format!("{} thresholds for {} levels", self.size_thresholds.len(), self.levels.len()));
        }
        if self.size_thresholds[0] == 0 || self.size_thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return bad("size thresholds must be positive and strictly increasing".into());
        }
        let top = self.levels.last().expect("non-empty").0;
        if self.image_side == 0 || self.image_side % (1 << top) != 0 {
            return bad(format!("image side {} not divisible by 2^{top}", self.image_side));
        }
        if self.size_thresholds[0] > self.image_side {
            return bad("smallest object band does not fit in the image".into());
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects > max_objects".into());
        }
        if self.steps == 0 || self.batch_size == 0 || self.train_size == 0 || self.val_size == 0 {
            return bad("steps, batch_size and set sizes must be positive".into());
        }
        if self.backbone_width == 0 || self.feature_dim == Some(0) || self.backbone_top.0 == 0 {
            return bad("widths and backbone_top must be positive".into());
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.decay_at) {
            return bad("lr must be positive and decay_at in [0, 1]".into());
        }
        Ok(())
    }

    /// Learning rate at 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.lr * (step + 1) as f64 / (self.warmup_steps + 1) as f64
        } else if (step as f64) < self.decay_at * self.steps as f64 {
            self.lr
        } else {
            self.lr * 0.1
        }
    }

    /// Level whose band contains `side`, if any.
    pub fn level_for_size(&self, side: usize) -> Option<Level> {
        self.size_thresholds
            .windows(2)
            .position(|w| side >= w[0] && side < w[1])
            .map(|i| self.levels[i])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TaskConfig::search_default().validate().unwrap();
        TaskConfig::five_level().validate().unwrap();
        assert_eq!(TaskConfig::five_level().image_side, 128);
        assert_eq!(TaskConfig::five_level().size_thresholds, vec![4, 8, 16, 32, 64, 128]);
        assert_eq!(TaskConfig::for_levels(&[Level(2), Level(3), Level(4)]), TaskConfig::search_default());
        assert_eq!(TaskConfig::search_default().focal_alpha, 0.25);
        assert_eq!(TaskConfig::search_default().focal_gamma, 1.5);
    }

    #[test]
    fn band_membership() {
        let c = TaskConfig::search_default();
        assert_eq!(c.level_for_size(6), Some(Level(2)));
        assert_eq!(c.level_for_size(8), Some(Level(3)));
        assert_eq!(c.level_for_size(31), Some(Level(4)));
        assert_eq!(c.level_for_size(32), None);
    }

    #[test]
    fn invalid_configs() {
        let mut c = TaskConfig::search_default();
        c.focal_alpha = 1.0;
        assert!(c.validate().is_err());
        let mut c = TaskConfig::search_default();
        c.size_thresholds = vec![4, 16, 8, 32];
        assert!(c.validate().is_err());
        let mut c = TaskConfig::search_default();
        c.size_thresholds.pop();
        assert_eq!(c.validate().unwrap_err().to_string().split(':').next(), Some("invalid-config"));
    }

    #[test]
    fn lr_decays_once() {
        let mut c = TaskConfig::search_default();
        c.steps = 10;
        c.lr = 1.0;
        c.warmup_steps = 0;
        assert_eq!(c.lr_at(7), 1.0);
        assert!((c.lr_at(8) - 0.1).abs() < 1e-15);
        c.warmup_steps = 3;
        assert_eq!([c.lr_at(0), c.lr_at(2), c.lr_at(3)], [0.25, 0.75, 1.0]);
    }

    #[test]
    fn config_json_round_trip() {
        let c = TaskConfig::five_level();
        let back: TaskConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }
}
