//! Night-to-day image transform network, the frozen perceptual loss network,
//! and the content and style losses defined on its feature maps.
//!
//! Images are `[3, H, W]` tensors with values in `[0, 1]`.

use dnloc_tensor::Tensor;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::nn::{Conv, Module};

pub const ENCODER_CHANNELS: [usize; 2] = [16, 32];
pub const RESIDUAL_BLOCKS: usize = 5;
pub const DECODER_CHANNELS: [usize; 2] = [16, 16];
pub const LOSS_CHANNELS: [usize; 4] = [16, 32, 64, 64];
/// Keeps the input logit finite at 0 and 1.
const LOGIT_EPS: f64 = 1e-3;
/// Index into the loss-network stages used for the content loss.
pub const CONTENT_STAGE: usize = 2;

fn check_image(x: &Tensor, multiple: usize, what: &str) -> Result<()> {
    if x.rank() != 3 || x.dim(0) != 3 {
        return Err(Error::Shape(format!("{what}: expected a [3, H, W] image, got {:?}", x.shape())));
    }
    if x.dim(1) % multiple != 0 || x.dim(2) % multiple != 0 {
        return Err(Error::Shape(format!(
            "{what}: image {}x{} is not divisible by {multiple}",
            x.dim(1),
            x.dim(2)
        )));
    }
    Ok(())
}

struct ResidualBlock {
    first: Conv,
    second: Conv,
}

/// Encoder (two stride-2 stages), five residual blocks, decoder (two
/// upsample + conv stages) and a 1×1 output stage with a sigmoid.
///
/// The output stage also sees the input image in logit space,
/// `ln((x + ε) / (1 − x + ε))`. Its weights start as the identity on those
/// channels with a small decoder contribution and zero bias, so a fresh
/// network is a near-exact pass-through and training learns a residual
/// correction. Dark night images in particular reach FeatNet undistorted
/// until the losses ask for a change.
pub struct TransformNetwork {
    encoder: [Conv; 2],
    blocks: Vec<ResidualBlock>,
    decoder: [Conv; 2],
    output: Conv,
}

impl TransformNetwork {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7472_616e_736e_6574);
        let [e1, e2] = ENCODER_CHANNELS;
        let [d1, d2] = DECODER_CHANNELS;
        let encoder = [Conv::he(3, e1, 3, 2, 1.0, &mut rng), Conv::he(e1, e2, 3, 2, 1.0, &mut rng)];
        let blocks = (0..RESIDUAL_BLOCKS)
            .map(|_| ResidualBlock {
                first: Conv::he(e2, e2, 3, 1, 1.0, &mut rng),
                second: Conv::he(e2, e2, 3, 1, 0.1, &mut rng),
            })
            .collect();
        let decoder = [Conv::he(e2, d1, 3, 1, 1.0, &mut rng), Conv::he(d1, d2, 3, 1, 1.0, &mut rng)];

        let normal = StandardNormal;
        let mut w = vec![0.0; 3 * (d2 + 3)];
        for o in 0..3 {
            for c in 0..d2 {
                let z: f64 = normal.sample(&mut rng);
                w[o * (d2 + 3) + c] = 0.01 * z;
            }
            w[o * (d2 + 3) + d2 + o] = 1.0;
        }
        let output = Conv {
            weight: Tensor::param(vec![3, d2 + 3, 1, 1], w),
            bias: Tensor::param(vec![3], vec![0.0; 3]),
            stride: 1,
            pad: 0,
        };
        Self {
            encoder,
            blocks,
            decoder,
            output,
        }
    }

    /// `ŷ = f_t(y)`; image extents must be divisible by 4.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        check_image(image, 4, "transform")?;
        let mut h = self.encoder[0].forward(image).relu();
        h = self.encoder[1].forward(&h).relu();
        for b in &self.blocks {
            let r = b.second.forward(&b.first.forward(&h).relu());
            h = h.add(&r);
        }
        h = self.decoder[0].forward(&h.upsample_nearest(2)).relu();
        h = self.decoder[1].forward(&h.upsample_nearest(2)).relu();
        let logit = image.add_scalar(LOGIT_EPS).log().sub(&image.neg().add_scalar(1.0 + LOGIT_EPS).log());
        let joined = Tensor::concat(&[h, logit], 0);
        Ok(self.output.forward(&joined).sigmoid())
    }
}

impl Module for TransformNetwork {
    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut v = Vec::new();
        for (i, c) in self.encoder.iter().enumerate() {
            c.push_params(&format!("transnet.encoder{i}"), &mut v);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.first.push_params(&format!("transnet.block{i}.conv0"), &mut v);
            b.second.push_params(&format!("transnet.block{i}.conv1"), &mut v);
        }
        for (i, c) in self.decoder.iter().enumerate() {
            c.push_params(&format!("transnet.decoder{i}"), &mut v);
        }
        self.output.push_params("transnet.output", &mut v);
        v
    }
}

/// Fixed four-stage conv net (3×3 kernels, ReLU, stride 2 between stages)
/// whose stage outputs define the perceptual losses. Weights are random
/// matrices with orthonormal rows; nothing in it ever receives a gradient.
pub struct LossNetwork {
    stages: Vec<Conv>,
}

impl LossNetwork {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c6f_7373_6e65_74);
        let mut inputs = 3;
        let mut stages = Vec::with_capacity(LOSS_CHANNELS.len());
        for (i, &outputs) in LOSS_CHANNELS.iter().enumerate() {
            let fan_in = inputs * 9;
            let gauss = DMatrix::<f64>::from_fn(fan_in, outputs, |_, _| StandardNormal.sample(&mut rng));
            // columns of Q are orthonormal; they become the kernel rows
            let q = gauss.qr().q();
            let mut w = Vec::with_capacity(outputs * fan_in);
            for o in 0..outputs {
                w.extend((0..fan_in).map(|j| std::f64::consts::SQRT_2 * q[(j, o)]));
            }
            let bias_dist = Uniform::new(0.0, 0.05).expect("valid range");
            let b: Vec<f64> = (0..outputs).map(|_| bias_dist.sample(&mut rng)).collect();
            let conv = Conv {
                weight: Tensor::constant(vec![outputs, inputs, 3, 3], w),
                bias: Tensor::constant(vec![outputs], b),
                stride: if i == 0 { 1 } else { 2 },
                pad: 1,
            };
            stages.push(conv);
            inputs = outputs;
        }
        Self { stages }
    }

    /// Feature maps `φ_j(y)` of all four stages.
    pub fn features(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        check_image(image, 8, "loss features")?;
        let mut out = Vec::with_capacity(self.stages.len());
        let mut h = image.clone();
        for s in &self.stages {
            h = s.forward(&h).relu();
            out.push(h.clone());
        }
        Ok(out)
    }

    pub fn stage(&self, i: usize) -> &Conv {
        &self.stages[i]
    }
}

impl Module for LossNetwork {
    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut v = Vec::new();
        for (i, c) in self.stages.iter().enumerate() {
            c.push_params(&format!("lossnet.stage{i}"), &mut v);
        }
        v
    }

    fn set_trainable(&self, _flag: bool) {}
}

fn volume(f: &Tensor) -> f64 {
    f.numel() as f64
}

/// `G = φ'ᵀ φ'` where `φ'` is the `(H·W) × C` reshape of a `[C, H, W]` map.
pub fn gram(features: &Tensor) -> Tensor {
    let c = features.dim(0);
    let flat = features.reshape(&[c, features.numel() / c]);
    flat.matmul(&flat.t())
}

/// Mean squared difference of content-stage features.
pub fn content_loss(transformed: &Tensor, original: &Tensor, net: &LossNetwork) -> Result<Tensor> {
    if transformed.shape() != original.shape() {
        return Err(Error::Shape(format!(
            "content loss: {:?} vs {:?}",
            transformed.shape(),
            original.shape()
        )));
    }
    let a = &net.features(transformed)?[CONTENT_STAGE];
    let b = net.features(original)?[CONTENT_STAGE].detach();
    Ok(content_loss_from_features(a, &b))
}

pub fn content_loss_from_features(transformed: &Tensor, original: &Tensor) -> Tensor {
    transformed.sub(original).square().sum().mul_scalar(1.0 / volume(transformed))
}

/// Size-normalized Gram matrices of every loss stage.
pub fn style_targets(image: &Tensor, net: &LossNetwork) -> Result<Vec<Tensor>> {
    Ok(net
        .features(image)?
        .iter()
        .map(|f| gram(f).mul_scalar(1.0 / volume(f)).detach())
        .collect())
}

/// Sum over stages of the Frobenius norm of the normalized Gram difference.
pub fn style_loss(transformed: &Tensor, style: &Tensor, net: &LossNetwork) -> Result<Tensor> {
    let targets = style_targets(style, net)?;
    let feats = net.features(transformed)?;
    Ok(style_loss_from_features(&feats, &targets))
}

pub fn style_loss_from_features(features: &[Tensor], targets: &[Tensor]) -> Tensor {
    features
        .iter()
        .zip(targets)
        .map(|(f, g)| gram(f).mul_scalar(1.0 / volume(f)).sub(g).l2_norm())
        .reduce(|a, b| a.add(&b))
        .expect("at least one stage")
}
