//! Keypoint, score and descriptor network.
//!
//! A four-stage encoder feeds two small decoder heads. The detector head's
//! logits are soft-maxed inside every 16×16 cell and used to average the
//! pixel coordinates of that cell, giving one sub-pixel keypoint per cell.
//! The score head is soft-maxed the same way and sampled at the keypoints.
//! Dense descriptors are the encoder stages upsampled to full resolution and
//! stacked along the channel axis.

use dnloc_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv, Module};

pub const CELL: usize = 16;
pub const ENCODER_CHANNELS: [usize; 4] = [16, 32, 64, 64];
pub const DESCRIPTOR_DIM: usize = 16 + 32 + 64 + 64;
const HEAD_CHANNELS: usize = 8;

/// Output of [`FeatureNetwork::detect`] for one image.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    /// `[N, 2]` rows of `(u, v)` pixel coordinates, one per cell in row-major
    /// cell order.
    pub keypoints: Tensor,
    /// `[N, 1]` scores in `[0, 1]`.
    pub scores: Tensor,
    /// `[D, H, W]`.
    pub descriptors: Tensor,
    /// `[1, H, W]` per-cell softmax of the score logits.
    pub dense_scores: Tensor,
    /// `[1, H, W]` raw detector logits (before the spatial softmax).
    pub detector_logits: Tensor,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.keypoints.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct Head {
    /// One 1×1 projection per encoder stage; their upsampled sum equals a
    /// 1×1 convolution over the concatenated descriptor stack.
    lateral: Vec<Conv>,
    bias: Tensor,
    mid: Conv,
    out: Conv,
}

impl Head {
    fn forward(&self, stages: &[Tensor]) -> Tensor {
        let mut acc: Option<Tensor> = None;
        for (i, (conv, f)) in self.lateral.iter().zip(stages).enumerate() {
            let y = f.conv2d(&conv.weight, None, 1, 0).upsample_nearest(1 << i);
            acc = Some(match acc {
                None => y,
                Some(a) => a.add(&y),
            });
        }
        let c = self.bias.numel();
        let h = acc.expect("four stages").add(&self.bias.reshape(&[c, 1, 1])).relu();
        self.out.forward(&self.mid.forward(&h).relu())
    }

    fn push_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, c) in self.lateral.iter().enumerate() {
            out.push((format!("{prefix}.lateral{i}.weight"), c.weight.clone()));
        }
        out.push((format!("{prefix}.lateral.bias"), self.bias.clone()));
        self.mid.push_params(&format!("{prefix}.mid"), out);
        self.out.push_params(&format!("{prefix}.out"), out);
    }
}

pub struct FeatureNetwork {
    encoder: Vec<Conv>,
    detector: Head,
    scorer: Head,
}

impl FeatureNetwork {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6665_6174_6e65_74);
        let mut inputs = 3;
        let mut encoder = Vec::new();
        for (i, &c) in ENCODER_CHANNELS.iter().enumerate() {
            encoder.push(Conv::he(inputs, c, 3, if i == 0 { 1 } else { 2 }, 1.0, &mut rng));
            inputs = c;
        }
        let head = |rng: &mut ChaCha8Rng| Head {
            lateral: ENCODER_CHANNELS
                .iter()
                .map(|&c| Conv::he(c, HEAD_CHANNELS, 1, 1, 0.5, rng))
                .collect(),
            bias: dnloc_tensor::init::zeros_param(&[HEAD_CHANNELS]),
            mid: Conv::he(HEAD_CHANNELS, HEAD_CHANNELS, 3, 1, 1.0, rng),
            out: Conv::he(HEAD_CHANNELS, 1, 1, 1, 1.0, rng),
        };
        let detector = head(&mut rng);
        let scorer = head(&mut rng);
        Self {
            encoder,
            detector,
            scorer,
        }
    }

    /// Encoder stage outputs (`[C_j, H/2^j, W/2^j]`).
    pub fn encode(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        if image.rank() != 3 || image.dim(0) != 3 {
            return Err(Error::Shape(format!("detect: expected a [3, H, W] image, got {:?}", image.shape())));
        }
        let (h, w) = (image.dim(1), image.dim(2));
        if h % CELL != 0 || w % CELL != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("detect: image {h}x{w} is not divisible by {CELL}")));
        }
        let mut x = image.clone();
        let mut stages = Vec::with_capacity(self.encoder.len());
        for conv in &self.encoder {
            x = conv.forward(&x).relu();
            stages.push(x.clone());
        }
        Ok(stages)
    }

    pub fn detect(&self, image: &Tensor) -> Result<FeatureSet> {
        let stages = self.encode(image)?;
        let (h, w) = (image.dim(1), image.dim(2));
        let descriptors = Tensor::concat(
            &stages
                .iter()
                .enumerate()
                .map(|(i, f)| if i == 0 { f.clone() } else { f.upsample_nearest(1 << i) })
                .collect::<Vec<_>>(),
            0,
        );
        let detector_logits = self.detector.forward(&stages);
        let keypoints = keypoints_from_logits(&detector_logits);
        let dense_scores = self.scorer.forward(&stages).cell_softmax(CELL);
        let scores = dense_scores.bilinear_sample(&keypoints);
        debug_assert_eq!(descriptors.shape(), &[DESCRIPTOR_DIM, h, w]);
        Ok(FeatureSet {
            keypoints,
            scores,
            descriptors,
            dense_scores,
            detector_logits,
        })
    }
}

impl Module for FeatureNetwork {
    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut v = Vec::new();
        for (i, c) in self.encoder.iter().enumerate() {
            c.push_params(&format!("featnet.encoder{i}"), &mut v);
        }
        self.detector.push_params("featnet.detector", &mut v);
        self.scorer.push_params("featnet.scorer", &mut v);
        v
    }
}

/// Column (`u`) and row (`v`) coordinate planes of a `[1, H, W]` map.
fn coordinate_planes(h: usize, w: usize) -> (Tensor, Tensor) {
    let u = (0..h * w).map(|i| (i % w) as f64).collect();
    let v = (0..h * w).map(|i| (i / w) as f64).collect();
    (Tensor::constant(vec![1, h, w], u), Tensor::constant(vec![1, h, w], v))
}

/// Soft-argmax of `[1, H, W]` detector logits inside every cell: returns the
/// `[N, 2]` expected `(u, v)` per cell.
pub fn keypoints_from_logits(logits: &Tensor) -> Tensor {
    let (h, w) = (logits.dim(1), logits.dim(2));
    let n = (h / CELL) * (w / CELL);
    let p = logits.cell_softmax(CELL);
    let (u, v) = coordinate_planes(h, w);
    let ku = p.mul(&u).cell_sum(CELL).reshape(&[n, 1]);
    let kv = p.mul(&v).cell_sum(CELL).reshape(&[n, 1]);
    Tensor::concat(&[ku, kv], 1)
}
