//! The run configuration: one JSON document with a section per command.
//!
//! Every field has a default, so `{}` is a valid configuration. Relative paths
//! are resolved against the directory containing the configuration file.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::matchpose::MatcherConfig;
use crate::synthdata::DatasetConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// FeatNet on raw night targets with pose and keypoint losses.
    FeatnetOnly,
    /// TransNet with the perceptual losses only; evaluated with a pretrained
    /// FeatNet.
    TransnetOnly,
    /// Both networks, all four losses.
    Joint,
    /// TransNet trained with all four losses in front of a frozen, pretrained
    /// FeatNet.
    Sequential,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::FeatnetOnly, Scheme::TransnetOnly, Scheme::Joint, Scheme::Sequential];

    pub fn uses_transnet(self) -> bool {
        self != Scheme::FeatnetOnly
    }

    pub fn uses_perceptual_losses(self) -> bool {
        self != Scheme::FeatnetOnly
    }

    pub fn uses_feature_losses(self) -> bool {
        self != Scheme::TransnetOnly
    }

    pub fn trains_featnet(self) -> bool {
        matches!(self, Scheme::FeatnetOnly | Scheme::Joint)
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::FeatnetOnly => "featnet_only",
            Scheme::TransnetOnly => "transnet_only",
            Scheme::Joint => "joint",
            Scheme::Sequential => "sequential",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheme {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub style: f64,
    pub content: f64,
    pub pose: f64,
    pub keypoint: f64,
    /// Balance of the rotational term inside the pose loss.
    pub rotation: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            style: 1e-5,
            content: 1e-5,
            pose: 10.0,
            keypoint: 2.0,
            rotation: 1.0,
        }
    }
}

/// FeatNet warm-up: dense correspondence pretraining that stands in for the
/// pretrained encoder FeatNet normally starts from. Without it, a randomly
/// initialized FeatNet rarely produces the three ground-truth inliers a
/// pose/keypoint step needs, so feature training never starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarmupConfig {
    /// Optimizer steps (one pair each); 0 disables the warm-up.
    pub steps: usize,
    pub learning_rate: f64,
    /// Target grid points within `radius · stride` pixels of the true
    /// correspondence count as correct.
    pub radius: f64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            learning_rate: 1e-3,
            radius: 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub scheme: Scheme,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub matcher: MatcherConfig,
    /// FeatNet checkpoint to start from. Required by `transnet_only` and
    /// `sequential`; optional for the other schemes.
    pub pretrained_featnet: Option<PathBuf>,
    /// Runs before the first epoch when FeatNet is trained and no
    /// `pretrained_featnet` is given.
    pub warmup: WarmupConfig,
    /// Use only the first `n` training pairs.
    pub max_train_pairs: Option<usize>,
    /// Validate on only the first `n` test pairs.
    pub max_val_pairs: Option<usize>,
    /// Directory receiving `history.csv` and `epoch_NNN.ckpt`.
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Joint,
            learning_rate: 1e-4,
            epochs: 10,
            seed: 0,
            weights: LossWeights::default(),
            matcher: MatcherConfig::default(),
            pretrained_featnet: None,
            warmup: WarmupConfig::default(),
            max_train_pairs: None,
            max_val_pairs: None,
            out_dir: PathBuf::from("run"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.matcher.validate()?;
        let w = &self.weights;
        if [w.style, w.content, w.pose, w.keypoint, w.rotation].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be non-negative: {w:?}")));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.warmup.learning_rate > 0.0 && self.warmup.radius > 0.0) {
            return Err(Error::Config(format!("invalid warm-up settings {:?}", self.warmup)));
        }
        if matches!(self.scheme, Scheme::TransnetOnly | Scheme::Sequential) && self.pretrained_featnet.is_none() {
            return Err(Error::Config(format!("scheme {} needs `pretrained_featnet`", self.scheme)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub checkpoint: PathBuf,
    /// Replaces the FeatNet parameters of `checkpoint` when given.
    pub featnet_checkpoint: Option<PathBuf>,
    pub matcher: MatcherConfig,
    /// Evaluate only the first `n` test pairs.
    pub max_pairs: Option<usize>,
    /// Per-pair CSV report.
    pub out: PathBuf,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("run/last.ckpt"),
            featnet_checkpoint: None,
            matcher: MatcherConfig::default(),
            max_pairs: None,
            out: PathBuf::from("report.csv"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DumpConfig {
    pub checkpoint: PathBuf,
    pub featnet_checkpoint: Option<PathBuf>,
    /// Pair id; defaults to the first test pair.
    pub pair: Option<String>,
    pub out_dir: PathBuf,
}

impl Default for DumpConfig {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("run/last.ckpt"),
            featnet_checkpoint: None,
            pair: None,
            out_dir: PathBuf::from("dump"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Generator settings for `gen-data`.
    pub dataset: DatasetConfig,
    /// Dataset directory written by `gen-data` and read by the other commands.
    pub dataset_dir: PathBuf,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub dump: DumpConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a configuration file and resolves its relative paths against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset_dir);
        fix(&mut self.train.out_dir);
        if let Some(p) = self.train.pretrained_featnet.as_mut() {
            fix(p);
        }
        fix(&mut self.eval.checkpoint);
        fix(&mut self.eval.out);
        if let Some(p) = self.eval.featnet_checkpoint.as_mut() {
            fix(p);
        }
        fix(&mut self.dump.checkpoint);
        fix(&mut self.dump.out_dir);
        if let Some(p) = self.dump.featnet_checkpoint.as_mut() {
            fix(p);
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.weights.pose, 10.0);
        assert_eq!(c.train.matcher.tau, 20.0);
        assert_eq!(c.train.learning_rate, 1e-4);
    }

    #[test]
    fn json_roundtrip() {
        let mut c = RunConfig::default();
        c.train.scheme = Scheme::Sequential;
        c.train.pretrained_featnet = Some("a/b.ckpt".into());
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(RunConfig::from_json(r#"{"train": {"lr": 1.0}}"#).is_err());
    }

    #[test]
    fn schemes_parse_and_need_pretrained_featnet() {
        for s in Scheme::ALL {
            assert_eq!(s.name().parse::<Scheme>().unwrap(), s);
        }
        let cfg = TrainConfig {
            scheme: Scheme::Sequential,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let mut c = RunConfig::default();
        c.dataset_dir = "data".into();
        c.eval.out = "/abs/r.csv".into();
        c.resolve_paths(Path::new("/tmp/cfg"));
        assert_eq!(c.dataset_dir, PathBuf::from("/tmp/cfg/data"));
        assert_eq!(c.eval.out, PathBuf::from("/abs/r.csv"));
    }
}
