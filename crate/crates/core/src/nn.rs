//! Convolution layers and named-parameter plumbing shared by the networks.

use dnloc_tensor::{init, Checkpoint, Tensor};
use rand::Rng;

use crate::error::Result;

pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// He-initialized `k × k` convolution with "same" padding.
    pub fn he<R: Rng + ?Sized>(inputs: usize, outputs: usize, k: usize, stride: usize, gain: f64, rng: &mut R) -> Self {
        Self {
            weight: init::he_normal(&[outputs, inputs, k, k], inputs * k * k, gain, rng),
            bias: init::zeros_param(&[outputs]),
            stride,
            pad: k / 2,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.conv2d(&self.weight, Some(&self.bias), self.stride, self.pad)
    }

    pub fn push_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Anything with named parameters. Names carry the network namespace
/// (`"featnet."`, `"transnet."`, `"lossnet."`).
pub trait Module {
    fn named_params(&self) -> Vec<(String, Tensor)>;

    fn set_trainable(&self, flag: bool) {
        for (_, p) in self.named_params() {
            p.set_requires_grad(flag);
        }
    }

    fn zero_grad(&self) {
        for (_, p) in self.named_params() {
            p.zero_grad();
        }
    }

    fn save_into(&self, ck: &mut Checkpoint) {
        for (name, p) in self.named_params() {
            ck.insert(name, &p);
        }
    }

    fn load_from(&self, ck: &Checkpoint) -> Result<()> {
        for (name, p) in self.named_params() {
            ck.load_into(&name, &p)?;
        }
        Ok(())
    }

    /// Order-sensitive digest of every parameter bit pattern.
    fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, p) in self.named_params() {
            for b in name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
            }
            for v in p.data().iter() {
                h = (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}
