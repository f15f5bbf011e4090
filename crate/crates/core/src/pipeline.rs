//! The assembled networks and the inference path shared by validation,
//! evaluation and artifact dumps.

use std::path::Path;

use dnloc_tensor::{Checkpoint, Tensor};

use crate::camera::StereoCamera;
use crate::error::{Error, Result};
use crate::featnet::{FeatureNetwork, FeatureSet};
use crate::matchpose::{match_features, ransac, solve_pose, MatchSet, MatcherConfig, SE3Pose};
use crate::nn::Module;
use crate::synthdata::FramePair;
use crate::transnet::{LossNetwork, TransformNetwork};

/// Seed of the fixed loss network; shared by every run so perceptual losses
/// are comparable across runs.
pub const LOSSNET_SEED: u64 = 0x10_55;

pub struct Pipeline {
    pub featnet: FeatureNetwork,
    pub transnet: Option<TransformNetwork>,
    pub lossnet: LossNetwork,
}

/// Inference result for one pair.
#[derive(Clone, Debug)]
pub struct Localization {
    pub pose: SE3Pose,
    pub inliers: usize,
    pub matches: usize,
}

impl Pipeline {
    pub fn new(with_transnet: bool, seed: u64) -> Self {
        Self {
            featnet: FeatureNetwork::new(seed),
            transnet: with_transnet.then(|| TransformNetwork::new(seed)),
            lossnet: LossNetwork::new(LOSSNET_SEED),
        }
    }

    /// Rebuilds networks from a checkpoint; a TransNet is present exactly when
    /// the checkpoint has `transnet.` entries.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if !ck.has_namespace("featnet.") {
            return Err(Error::Config("checkpoint has no featnet parameters".into()));
        }
        let p = Self::new(ck.has_namespace("transnet."), 0);
        p.featnet.load_from(ck)?;
        if let Some(t) = &p.transnet {
            t.load_from(ck)?;
        }
        Ok(p)
    }

    /// Loads `path`, optionally replacing FeatNet with the one in
    /// `featnet_path`.
    pub fn load(path: &Path, featnet_path: Option<&Path>) -> Result<Self> {
        let p = Self::from_checkpoint(&Checkpoint::load(path)?)?;
        if let Some(f) = featnet_path {
            p.featnet.load_from(&Checkpoint::load(f)?)?;
        }
        Ok(p)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        self.featnet.save_into(&mut ck);
        if let Some(t) = &self.transnet {
            t.save_into(&mut ck);
        }
        self.lossnet.save_into(&mut ck);
        ck
    }

    pub fn set_trainable(&self, featnet: bool, transnet: bool) {
        self.featnet.set_trainable(featnet);
        if let Some(t) = &self.transnet {
            t.set_trainable(transnet);
        }
    }

    /// Runs `f` with every parameter frozen so no graph is recorded, then
    /// restores the previous flags.
    pub fn without_grad<T>(&self, f: impl FnOnce(&Self) -> T) -> T {
        let flags = |m: &dyn Module| m.named_params().first().is_some_and(|(_, p)| p.requires_grad());
        let feat = flags(&self.featnet);
        let trans = self.transnet.as_ref().is_some_and(|t| flags(t));
        self.set_trainable(false, false);
        let out = f(self);
        self.set_trainable(feat, trans);
        out
    }

    /// Target image as seen by FeatNet: transformed when a TransNet is
    /// present, untouched otherwise.
    pub fn prepare_target(&self, target: &Tensor) -> Result<Tensor> {
        match &self.transnet {
            Some(t) => t.forward(target),
            None => Ok(target.clone()),
        }
    }

    /// Features of both images and their soft matches.
    pub fn match_pair(&self, pair: &FramePair, cam: &StereoCamera, cfg: &MatcherConfig) -> Result<(FeatureSet, FeatureSet, MatchSet)> {
        let src = self.featnet.detect(&pair.source.image_tensor())?;
        let tgt = self.featnet.detect(&self.prepare_target(&pair.target.image_tensor())?)?;
        let m = match_features(
            &src,
            &pair.source.disparity_tensor(),
            &tgt,
            &pair.target.disparity_tensor(),
            cam,
            cfg,
        )?;
        Ok((src, tgt, m))
    }

    /// Full inference: transform → detect → match → RANSAC → weighted solve.
    pub fn localize(&self, pair: &FramePair, cam: &StereoCamera, cfg: &MatcherConfig) -> Result<Localization> {
        self.without_grad(|p| {
            let (_, _, m) = p.match_pair(pair, cam, cfg)?;
            let inl = ransac(&m, &cfg.ransac)?;
            let pose = solve_pose(&inl)?.to_pose();
            Ok(Localization {
                pose,
                inliers: inl.len(),
                matches: m.len(),
            })
        })
    }
}
