//! Flat JSON run configuration shared by the command-line tools.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{AugmentConfig, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Readout, Task};
use crate::rotation::Protocol;
use crate::training::TrainConfig;

/// Every key is optional; missing keys take the defaults of the
/// classification setup.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub linear_dim: Option<usize>,
    pub heads: Option<usize>,
    pub head_size: Option<usize>,
    pub blocks: Option<usize>,
    pub knn_k: Option<usize>,
    pub task: Option<Task>,
    pub num_classes: Option<usize>,
    pub num_categories: Option<usize>,
    pub dropout: Option<f64>,
    pub cls_hidden: Option<Vec<usize>>,
    pub seg_hidden: Option<Vec<usize>>,
    pub category_embed: Option<usize>,
    pub readout: Option<Readout>,

    pub lr: Option<f64>,
    pub betas: Option<[f64; 2]>,
    pub eps: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub sched_step: Option<usize>,
    pub sched_gamma: Option<f64>,
    pub seed: Option<u64>,

    pub sample_n: Option<usize>,
    pub scale_range: Option<[f64; 2]>,
    pub shift_range: Option<[f64; 2]>,

    pub synthetic_train: Option<usize>,
    pub synthetic_test: Option<usize>,
    pub synthetic_points: Option<usize>,
    pub synthetic_noise: Option<f64>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Model configuration for `task`. Class and category counts fall back
    /// to the dataset's when the file leaves them out.
    pub fn model(&self, task: Task, num_classes: usize, num_categories: usize) -> Result<ModelConfig> {
        if let Some(t) = self.task {
            if t != task {
                return Err(Error::Config(format!(
                    "config task {t:?} conflicts with requested {task:?}"
                )));
            }
        }
        let base = match task {
            Task::Classification => ModelConfig::classification(num_classes),
            Task::Segmentation => ModelConfig::segmentation(num_classes, num_categories),
        };
        let cfg = ModelConfig {
            linear_dim: self.linear_dim.unwrap_or(base.linear_dim),
            heads: self.heads.unwrap_or(base.heads),
            head_size: self.head_size.unwrap_or(base.head_size),
            blocks: self.blocks.unwrap_or(base.blocks),
            knn_k: self.knn_k.unwrap_or(base.knn_k),
            task,
            num_classes: self.num_classes.unwrap_or(num_classes),
            num_categories: self.num_categories.unwrap_or(base.num_categories),
            dropout: self.dropout.unwrap_or(base.dropout),
            cls_hidden: self.cls_hidden.clone().unwrap_or(base.cls_hidden),
            seg_hidden: self.seg_hidden.clone().unwrap_or(base.seg_hidden),
            category_embed: self.category_embed.unwrap_or(base.category_embed),
            readout: self.readout.unwrap_or(base.readout),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Model configuration using only what the file states, for tools that
    /// have no dataset at hand.
    pub fn standalone_model(&self) -> Result<ModelConfig> {
        let task = self.task.unwrap_or(Task::Classification);
        let classes = self.num_classes.unwrap_or(match task {
            Task::Classification => 40,
            Task::Segmentation => 50,
        });
        let categories = self.num_categories.unwrap_or(16);
        self.model(task, classes, categories)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            lr: self.lr.unwrap_or(d.lr),
            betas: self.betas.unwrap_or(d.betas),
            eps: self.eps.unwrap_or(d.eps),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            epochs: self.epochs.unwrap_or(d.epochs),
            sched_step: self.sched_step.unwrap_or(d.sched_step),
            sched_gamma: self.sched_gamma.unwrap_or(d.sched_gamma),
            seed: self.seed.unwrap_or(d.seed),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn augment(&self, protocol: Protocol) -> Result<AugmentConfig> {
        let d = AugmentConfig::default();
        let cfg = AugmentConfig {
            scale_range: self.scale_range.unwrap_or(d.scale_range),
            shift_range: self.shift_range.unwrap_or(d.shift_range),
            sample_n: self.sample_n.unwrap_or(d.sample_n),
            protocol,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Synthetic set sizes; source clouds default to twice the sample size.
    pub fn synthetic(&self) -> SyntheticSpec {
        let d = SyntheticSpec::default();
        let sample_n = self.sample_n.unwrap_or(AugmentConfig::default().sample_n);
        SyntheticSpec {
            train: self.synthetic_train.unwrap_or(d.train),
            test: self.synthetic_test.unwrap_or(d.test),
            points: self.synthetic_points.unwrap_or(2 * sample_n),
            noise: self.synthetic_noise.unwrap_or(d.noise),
            seed: self.seed.unwrap_or(d.seed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_defaults() {
        let rc = RunConfig::from_json("{}").unwrap();
        let m = rc.model(Task::Classification, 40, 0).unwrap();
        assert_eq!((m.linear_dim, m.heads, m.head_size, m.blocks), (16, 24, 16, 3));
        assert_eq!(rc.train().unwrap(), TrainConfig::default());
        assert_eq!(rc.augment(Protocol::Z).unwrap().sample_n, 1024);
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(RunConfig::from_json(r#"{"linear_dims": 4}"#).is_err());
    }

    #[test]
    fn task_conflict_is_rejected() {
        let rc = RunConfig::from_json(r#"{"task": "seg"}"#).unwrap();
        assert!(rc.model(Task::Classification, 3, 0).is_err());
        assert!(rc.model(Task::Segmentation, 6, 3).is_ok());
    }

    #[test]
    fn invalid_values_are_listed() {
        let rc = RunConfig::from_json(r#"{"blocks": 0, "lr": -1}"#).unwrap();
        assert!(rc.model(Task::Classification, 3, 0).is_err());
        assert!(rc.train().is_err());
    }
}
