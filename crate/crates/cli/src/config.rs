//! JSON run configuration. Every section has defaults, so `{}` is a valid file.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mvx_core::backbone::BackboneConfig;
use mvx_core::explainer::{ExplainParams, Method};
use mvx_core::mvarch::{ArchKind, ModelConfig, PoolMode};
use mvx_core::synthgen::SyntheticSpec;
use mvx_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct RunConfig {
    /// Drives every random stream of the run (generation, split, init,
    /// shuffling, head training, explanation sampling).
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub explain: ExplainSection,
    pub eval: EvalSection,
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Dataset directory for train/explain/eval.
    pub path: Option<PathBuf>,
    /// Spec used by `generate`.
    pub synthetic: SyntheticSpec,
    pub train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            synthetic: SyntheticSpec::default(),
            train_fraction: 0.7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub arch: ArchKind,
    pub pool_mode: PoolMode,
    pub backbone: BackboneConfig,
    pub classifier_hidden: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            arch: ArchKind::Ssg,
            pool_mode: PoolMode::Max,
            backbone: BackboneConfig::default(),
            classifier_hidden: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", untagged)]
pub enum ViewSelection {
    One(usize),
    All(AllViews),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllViews {
    All,
}

impl ViewSelection {
    pub fn parse(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(ViewSelection::All(AllViews::All));
        }
        let k = s
            .parse()
            .with_context(|| format!("--view expects a view index or \"all\", got {s:?}"))?;
        Ok(ViewSelection::One(k))
    }

    pub fn views(&self, num_views: usize) -> Result<Vec<usize>> {
        match *self {
            ViewSelection::All(_) => Ok((0..num_views).collect()),
            ViewSelection::One(k) if k < num_views => Ok(vec![k]),
            ViewSelection::One(k) => anyhow::bail!("view {k} out of range; the schema has {num_views} views"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainSection {
    pub checkpoint: Option<PathBuf>,
    pub method: Method,
    /// Sample ids to explain; empty means every sample of the test split.
    pub samples: Vec<String>,
    pub views: ViewSelection,
    /// Class name to explain; `None` explains the head's predicted class.
    pub target_class: Option<String>,
    /// Optimiser settings for the one-view heads.
    pub head_train: TrainConfig,
    pub params: ExplainParams,
    /// Fraction of pixels eligible for the orange overlay.
    pub overlay_q: f64,
}

impl Default for ExplainSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            method: Method::Lime,
            samples: Vec::new(),
            views: ViewSelection::All(AllViews::All),
            target_class: None,
            head_train: TrainConfig {
                epochs: 30,
                learning_rate: 1e-3,
                ..TrainConfig::default()
            },
            params: ExplainParams::default(),
            overlay_q: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Test,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub checkpoint: Option<PathBuf>,
    pub split: EvalSplit,
    /// Explanation metrics on defective samples that have masks.
    pub explanations: bool,
    pub q: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            split: EvalSplit::Test,
            explanations: true,
            q: 0.2,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Pushes the run seed into every seeded sub-section.
    pub fn resolve_seeds(&mut self) {
        let s = self.seed;
        self.data.synthetic.seed = s;
        self.train.seed = s;
        self.explain.head_train.seed = s;
        self.explain.params.seed = s;
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.model.backbone.clone(),
            pool_mode: self.model.pool_mode,
            classifier_hidden: self.model.classifier_hidden.clone(),
            seed: self.seed,
        }
    }

    pub fn output_dir(&self) -> Result<&Path> {
        self.output_dir
            .as_deref()
            .context("no output directory; pass --out DIR or set output_dir in the config")
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let path = dir.join("resolved_config.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_all_defaults() {
        let c: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.batch_size, 4);
        assert_eq!(c.explain.params.segments.num_segments, 40);
    }

    #[test]
    fn round_trips_and_parses_views() {
        let mut c = RunConfig::default();
        c.explain.views = ViewSelection::One(3);
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let c: RunConfig = serde_json::from_str(r#"{"explain": {"views": "all", "method": "kernel_shap"}}"#).unwrap();
        assert_eq!(c.explain.views.views(5).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(ViewSelection::parse("2").unwrap().views(5).unwrap(), vec![2]);
        assert!(ViewSelection::parse("7").unwrap().views(5).is_err());
        assert!(ViewSelection::parse("x").is_err());
    }

    #[test]
    fn seed_reaches_every_stream() {
        let mut c = RunConfig {
            seed: 42,
            ..Default::default()
        };
        c.resolve_seeds();
        assert_eq!(c.data.synthetic.seed, 42);
        assert_eq!(c.train.seed, 42);
        assert_eq!(c.explain.params.seed, 42);
        assert_eq!(c.model_config().seed, 42);
    }
}
