//! Adam, the per-pair training step and the epoch loop for the four schemes.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dnloc_tensor::{Checkpoint, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::camera::StereoCamera;
use crate::config::{Scheme, TrainConfig, WarmupConfig};
use crate::error::{io_err, Error, Result};
use crate::eval::{evaluate_pairs, EvalReport};
use crate::featnet::FeatureNetwork;
use crate::matchpose::{keypoint_loss, pose_loss, reject_outliers_gt, solve_pose, target_grid, zncc_matrix, MatcherConfig};
use crate::nn::Module;
use crate::pipeline::Pipeline;
use crate::synthdata::{Dataset, FramePair, Split};
use crate::transnet::{content_loss_from_features, style_loss_from_features, style_targets, CONTENT_STAGE};

pub const HISTORY_HEADER: &str = "epoch,step,style,content,pose,keypoint,total,val_dx,val_dy,val_dtheta,val_inliers";

/// Bias-corrected Adam over a fixed parameter list.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    params: Vec<(String, Tensor)>,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(params: Vec<(String, Tensor)>, lr: f64) -> Self {
        let moments = params.iter().map(|(_, p)| (vec![0.0; p.numel()], vec![0.0; p.numel()])).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            params,
            moments,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Applies one update from the accumulated gradients and clears them.
    /// Parameters without a gradient are left alone. A non-finite gradient
    /// aborts the whole update before anything is modified.
    pub fn step(&mut self) -> Result<()> {
        let grads: Vec<Option<Vec<f64>>> = self.params.iter().map(|(_, p)| p.grad()).collect();
        for ((name, p), g) in self.params.iter().zip(&grads) {
            if g.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                for (_, q) in &self.params {
                    q.zero_grad();
                }
                let _ = p;
                return Err(Error::NonFiniteGradient { param: name.clone() });
            }
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((_, p), g), (m, v)) in self.params.iter().zip(grads).zip(self.moments.iter_mut()) {
            let Some(g) = g else { continue };
            p.update_data(|x| {
                for i in 0..x.len() {
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                    x[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                }
            });
            p.zero_grad();
        }
        Ok(())
    }
}

/// Loss terms of one forward pass. `terms` are unweighted; `weighted` are the
/// contributions to `total`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub style: f64,
    pub content: f64,
    pub pose: f64,
    pub keypoint: f64,
    pub weighted: [f64; 4],
    pub total: f64,
    /// Matches surviving ground-truth rejection.
    pub inliers: usize,
}

/// Constant loss-network quantities of a pair: style Gram targets of the day
/// image and content features of the untransformed night image.
struct PerceptualTargets {
    grams: Vec<Tensor>,
    content: Tensor,
}

pub struct Trainer {
    pub pipeline: Pipeline,
    pub cfg: TrainConfig,
    pub camera: StereoCamera,
    adam: Adam,
    cache: HashMap<String, PerceptualTargets>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, camera: StereoCamera) -> Result<Self> {
        cfg.validate()?;
        let scheme = cfg.scheme;
        let pipeline = Pipeline::new(scheme.uses_transnet(), cfg.seed);
        if let Some(path) = &cfg.pretrained_featnet {
            pipeline.featnet.load_from(&Checkpoint::load(path)?)?;
        }
        Self::with_pipeline(cfg, camera, pipeline)
    }

    /// Trainer around an existing pipeline (its parameters are used as-is).
    pub fn with_pipeline(cfg: TrainConfig, camera: StereoCamera, pipeline: Pipeline) -> Result<Self> {
        let scheme = cfg.scheme;
        if scheme.uses_transnet() != pipeline.transnet.is_some() {
            return Err(Error::Config(format!("scheme {scheme} does not match the supplied networks")));
        }
        pipeline.set_trainable(scheme.trains_featnet(), scheme.uses_transnet());
        let mut params = Vec::new();
        if scheme.trains_featnet() {
            params.extend(pipeline.featnet.named_params());
        }
        if let Some(t) = &pipeline.transnet {
            params.extend(t.named_params());
        }
        let adam = Adam::new(params, cfg.learning_rate);
        Ok(Self {
            pipeline,
            cfg,
            camera,
            adam,
            cache: HashMap::new(),
        })
    }

    pub fn scheme(&self) -> Scheme {
        self.cfg.scheme
    }

    fn targets(&mut self, pair: &FramePair) -> Result<&PerceptualTargets> {
        if !self.cache.contains_key(&pair.id) {
            let lossnet = &self.pipeline.lossnet;
            let grams = style_targets(&pair.source.image_tensor(), lossnet)?;
            let content = lossnet.features(&pair.target.image_tensor())?[CONTENT_STAGE].detach();
            self.cache.insert(pair.id.clone(), PerceptualTargets { grams, content });
        }
        Ok(&self.cache[&pair.id])
    }

    /// Builds the scheme's total loss for one pair. Returns the scalar to
    /// differentiate and its breakdown.
    pub fn forward(&mut self, pair: &FramePair) -> Result<(Tensor, LossBreakdown)> {
        let scheme = self.cfg.scheme;
        let w = self.cfg.weights.clone();
        let target = pair.target.image_tensor();
        let prepared = self.pipeline.prepare_target(&target)?;
        let mut out = LossBreakdown::default();
        let mut terms: Vec<Tensor> = Vec::new();

        if scheme.uses_perceptual_losses() {
            let (grams, content) = {
                let t = self.targets(pair)?;
                (t.grams.clone(), t.content.clone())
            };
            let feats = self.pipeline.lossnet.features(&prepared)?;
            let style = style_loss_from_features(&feats, &grams);
            let content = content_loss_from_features(&feats[CONTENT_STAGE], &content);
            out.style = style.item();
            out.content = content.item();
            terms.push(style.mul_scalar(w.style));
            terms.push(content.mul_scalar(w.content));
            out.weighted[0] = w.style * out.style;
            out.weighted[1] = w.content * out.content;
        }

        if scheme.uses_feature_losses() {
            let p = &self.pipeline;
            let src = p.featnet.detect(&pair.source.image_tensor())?;
            let tgt = p.featnet.detect(&prepared)?;
            let matches = crate::matchpose::match_features(
                &src,
                &pair.source.disparity_tensor(),
                &tgt,
                &pair.target.disparity_tensor(),
                &self.camera,
                &self.cfg.matcher,
            )?;
            let inliers = reject_outliers_gt(&matches, &pair.pose, self.cfg.matcher.gt_inlier_threshold)?;
            let estimate = solve_pose(&inliers)?;
            let pose = pose_loss(&estimate, &pair.pose, w.rotation);
            let kp = keypoint_loss(&inliers, &pair.pose);
            out.pose = pose.item();
            out.keypoint = kp.item();
            out.inliers = inliers.len();
            terms.push(pose.mul_scalar(w.pose));
            terms.push(kp.mul_scalar(w.keypoint));
            out.weighted[2] = w.pose * out.pose;
            out.weighted[3] = w.keypoint * out.keypoint;
        }

        let total = terms.into_iter().reduce(|a, b| a.add(&b)).expect("every scheme has a loss");
        out.total = total.item();
        Ok((total, out))
    }

    /// One optimization step on one pair.
    pub fn step(&mut self, pair: &FramePair) -> Result<LossBreakdown> {
        let (total, report) = self.forward(pair)?;
        total.backward()?;
        self.adam.step()?;
        Ok(report)
    }

    pub fn validate(&self, pairs: &[FramePair]) -> Result<EvalReport> {
        evaluate_pairs(&self.pipeline, pairs, &self.camera, &self.cfg.matcher)
    }
}

/// A target pixel counts as showing the same surface when its disparity is
/// within this fraction of the disparity predicted from the source.
pub const OCCLUSION_TOLERANCE: f64 = 0.1;

/// Ground-truth target location of every source keypoint that is in front of
/// both cameras, inside the target image and not occluded there. Returns
/// `(keypoint index, [u, v])`.
pub fn ground_truth_correspondences(keypoints: &[f64], pair: &FramePair, cam: &StereoCamera, min_disparity: f64) -> Vec<(usize, [f64; 2])> {
    let (w, h) = (pair.target.width as f64, pair.target.height as f64);
    let mut out = Vec::new();
    for (i, kp) in keypoints.chunks_exact(2).enumerate() {
        let d = pair.source.disparity_at(kp[0], kp[1]);
        let Ok(p) = cam.backproject_with_floor(&crate::camera::ImageObservation { u: kp[0], v: kp[1], d }, min_disparity) else {
            continue;
        };
        let Ok(y) = cam.project(pair.pose.transform_array(p)) else { continue };
        if y.u < 0.0 || y.v < 0.0 || y.u > w - 1.0 || y.v > h - 1.0 {
            continue;
        }
        if (pair.target.disparity_at(y.u, y.v) - y.d).abs() > OCCLUSION_TOLERANCE * y.d {
            continue;
        }
        out.push((i, [y.u, y.v]));
    }
    out
}

/// Dense correspondence loss of the warm-up: for each co-visible source
/// keypoint, the negative log of the matching probability mass (the same
/// softmax the matcher uses) that falls within `radius · stride` pixels of
/// the true correspondence. `None` when no keypoint is co-visible.
pub fn correspondence_loss(
    featnet: &FeatureNetwork,
    pair: &FramePair,
    cam: &StereoCamera,
    matcher: &MatcherConfig,
    radius: f64,
) -> Result<Option<Tensor>> {
    let src = featnet.detect(&pair.source.image_tensor())?;
    let tgt = featnet.detect(&pair.target.image_tensor())?;
    let (d, h, w) = (tgt.descriptors.dim(0), tgt.descriptors.dim(1), tgt.descriptors.dim(2));
    let truth = ground_truth_correspondences(&src.keypoints.to_vec(), pair, cam, matcher.min_disparity);
    let (grid_idx, grid_coords) = target_grid(h, w, matcher.stride);
    let coords = grid_coords.to_vec();
    let reach = radius * matcher.stride as f64;
    let m = grid_idx.len();
    let mut rows = Vec::new();
    let mut mask = Vec::new();
    for (i, [u, v]) in truth {
        let near: Vec<f64> = coords
            .chunks_exact(2)
            .map(|q| if (q[0] - u).hypot(q[1] - v) <= reach { 1.0 } else { 0.0 })
            .collect();
        if near.iter().any(|&x| x > 0.0) {
            rows.push(i);
            mask.extend(near);
        }
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let desc = src.descriptors.bilinear_sample(&src.keypoints).index_select(&rows);
    let grid = tgt.descriptors.reshape(&[d, h * w]).t().index_select(&grid_idx);
    let prob = zncc_matrix(&desc, &grid).mul_scalar(matcher.tau).softmax(1);
    let mass = prob.mul(&Tensor::constant(vec![rows.len(), m], mask)).sum_axis(1, true).add_scalar(1e-12);
    Ok(Some(mass.log().mean().neg()))
}

/// Mean warm-up loss over consecutive blocks of steps.
#[derive(Clone, Debug, PartialEq)]
pub struct WarmupRecord {
    pub step: usize,
    pub loss: f64,
}

pub const WARMUP_HEADER: &str = "step,correspondence";
const WARMUP_REPORT_EVERY: usize = 50;

/// Trains FeatNet with [`correspondence_loss`] for `cfg.steps` steps, cycling
/// through `pairs` in seeded shuffled order.
pub fn warm_up_featnet(
    featnet: &FeatureNetwork,
    pairs: &[FramePair],
    cam: &StereoCamera,
    matcher: &MatcherConfig,
    cfg: &WarmupConfig,
    seed: u64,
) -> Result<Vec<WarmupRecord>> {
    if pairs.is_empty() || cfg.steps == 0 {
        return Ok(Vec::new());
    }
    let mut adam = Adam::new(featnet.named_params(), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7761_726d);
    let mut order: Vec<usize> = Vec::new();
    let mut records = Vec::new();
    let (mut acc, mut n) = (0.0, 0usize);
    for step in 1..=cfg.steps {
        if order.is_empty() {
            order = (0..pairs.len()).collect();
            order.shuffle(&mut rng);
        }
        let pair = &pairs[order.pop().expect("refilled above")];
        if let Some(loss) = correspondence_loss(featnet, pair, cam, matcher, cfg.radius)? {
            acc += loss.item();
            n += 1;
            loss.backward()?;
            adam.step()?;
        }
        if step % WARMUP_REPORT_EVERY == 0 || step == cfg.steps {
            records.push(WarmupRecord {
                step,
                loss: if n > 0 { acc / n as f64 } else { f64::NAN },
            });
            (acc, n) = (0.0, 0);
        }
    }
    Ok(records)
}

/// Whether an error means "skip this pair" rather than "abort training".
pub fn is_skippable(e: &Error) -> bool {
    matches!(e, Error::DegenerateMatchSet { .. } | Error::DegenerateGeometry(_))
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub skipped: usize,
    pub style: f64,
    pub content: f64,
    pub pose: f64,
    pub keypoint: f64,
    pub total: f64,
    pub val_dx: f64,
    pub val_dy: f64,
    pub val_dtheta: f64,
    pub val_inliers: f64,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.style,
            self.content,
            self.pose,
            self.keypoint,
            self.total,
            self.val_dx,
            self.val_dy,
            self.val_dtheta,
            self.val_inliers
        )
    }
}

#[derive(Debug)]
pub struct TrainSummary {
    pub warmup: Vec<WarmupRecord>,
    pub history: Vec<EpochRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub last_checkpoint: PathBuf,
    pub final_validation: Option<EvalReport>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in history {
        writeln!(s, "{}", r.csv_row()).expect("writing to a string");
    }
    s
}

/// Runs one epoch over `pairs` in a seeded shuffled order.
pub fn run_epoch(trainer: &mut Trainer, pairs: &[FramePair], epoch: usize) -> Result<(Vec<LossBreakdown>, usize)> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(trainer.cfg.seed ^ (epoch as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
    order.shuffle(&mut rng);
    let mut reports = Vec::with_capacity(pairs.len());
    let mut skipped = 0;
    for i in order {
        match trainer.step(&pairs[i]) {
            Ok(r) => reports.push(r),
            Err(e) if is_skippable(&e) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if reports.is_empty() && !pairs.is_empty() {
        return Err(Error::DegenerateEpoch { epoch });
    }
    Ok((reports, skipped))
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Trains on in-memory pairs, writing `history.csv`, `epoch_NNN.ckpt` and
/// `last.ckpt` into `out_dir`.
pub fn train_on(trainer: &mut Trainer, train: &[FramePair], val: &[FramePair], out_dir: &Path) -> Result<TrainSummary> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let cfg = &trainer.cfg;
    let warmup = if cfg.scheme.trains_featnet() && cfg.pretrained_featnet.is_none() {
        warm_up_featnet(&trainer.pipeline.featnet, train, &trainer.camera, &cfg.matcher, &cfg.warmup, cfg.seed)?
    } else {
        Vec::new()
    };
    if !warmup.is_empty() {
        let mut text = format!("{WARMUP_HEADER}\n");
        for r in &warmup {
            writeln!(text, "{},{}", r.step, r.loss).expect("writing to a string");
        }
        let path = out_dir.join("warmup.csv");
        fs::write(&path, text).map_err(io_err(&path))?;
    }
    let mut history = Vec::new();
    let mut checkpoints = Vec::new();
    let mut last_val = None;
    let history_path = out_dir.join("history.csv");
    for epoch in 1..=trainer.cfg.epochs {
        let (reports, skipped) = run_epoch(trainer, train, epoch)?;
        let (dx, dy, dth, inl) = if val.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN, f64::NAN)
        } else {
            match trainer.validate(val) {
                Ok(r) => {
                    let v = (r.dx.median, r.dy.median, r.dtheta.median, r.inliers.mean);
                    last_val = Some(r);
                    v
                }
                Err(Error::Evaluation(_)) => (f64::NAN, f64::NAN, f64::NAN, 0.0),
                Err(e) => return Err(e),
            }
        };
        history.push(EpochRecord {
            epoch,
            step: trainer.adam.steps() as usize,
            skipped,
            style: mean(reports.iter().map(|r| r.style)),
            content: mean(reports.iter().map(|r| r.content)),
            pose: mean(reports.iter().map(|r| r.pose)),
            keypoint: mean(reports.iter().map(|r| r.keypoint)),
            total: mean(reports.iter().map(|r| r.total)),
            val_dx: dx,
            val_dy: dy,
            val_dtheta: dth,
            val_inliers: inl,
        });
        let ck = trainer.pipeline.checkpoint();
        let path = out_dir.join(format!("epoch_{epoch:03}.ckpt"));
        ck.save(&path)?;
        checkpoints.push(path);
        fs::write(&history_path, history_csv(&history)).map_err(io_err(&history_path))?;
    }
    let last = out_dir.join("last.ckpt");
    trainer.pipeline.checkpoint().save(&last)?;
    Ok(TrainSummary {
        warmup,
        history,
        checkpoints,
        last_checkpoint: last,
        final_validation: last_val,
    })
}

/// Loads the dataset named by `dataset_dir` and trains per `cfg`.
pub fn train(cfg: &TrainConfig, dataset_dir: &Path) -> Result<TrainSummary> {
    let ds = Dataset::open(dataset_dir)?;
    let mut train_pairs = ds.load_split(Split::Train)?;
    if let Some(n) = cfg.max_train_pairs {
        train_pairs.truncate(n);
    }
    let mut val_pairs = ds.load_split(Split::Test)?;
    if let Some(n) = cfg.max_val_pairs {
        val_pairs.truncate(n);
    }
    let mut trainer = Trainer::new(cfg.clone(), ds.camera())?;
    train_on(&mut trainer, &train_pairs, &val_pairs, &cfg.out_dir)
}
