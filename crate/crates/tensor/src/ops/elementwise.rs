use std::ops;

use super::Op;
use crate::shape::broadcast_shapes;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum UnaryKind {
    Neg,
    Exp,
    Log,
    Sqrt,
    Relu,
    Sigmoid,
    Square,
}

impl Tensor {
    fn binary(&self, other: &Tensor, kind: BinaryKind) -> Tensor {
        let (a, b) = if self.shape() == other.shape() {
            (self.clone(), other.clone())
        } else {
            let shape = broadcast_shapes(self.shape(), other.shape()).unwrap_or_else(|| {
                panic!("cannot broadcast {:?} with {:?}", self.shape(), other.shape())
            });
            (self.broadcast_to(&shape), other.broadcast_to(&shape))
        };
        let data: Vec<f64> = {
            let (x, y) = (a.data(), b.data());
            let f: fn(f64, f64) -> f64 = match kind {
                BinaryKind::Add => |p, q| p + q,
                BinaryKind::Sub => |p, q| p - q,
                BinaryKind::Mul => |p, q| p * q,
                BinaryKind::Div => |p, q| p / q,
            };
            x.iter().zip(y.iter()).map(|(&p, &q)| f(p, q)).collect()
        };
        Tensor::from_op(a.shape().to_vec(), data, Op::Binary { kind, a, b })
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        self.binary(other, BinaryKind::Div)
    }

    fn unary(&self, kind: UnaryKind) -> Tensor {
        let data: Vec<f64> = {
            let x = self.data();
            let f: fn(f64) -> f64 = match kind {
                UnaryKind::Neg => |v| -v,
                UnaryKind::Exp => f64::exp,
                UnaryKind::Log => f64::ln,
                UnaryKind::Sqrt => f64::sqrt,
                UnaryKind::Relu => |v| v.max(0.0),
                UnaryKind::Sigmoid => |v| 1.0 / (1.0 + (-v).exp()),
                UnaryKind::Square => |v| v * v,
            };
            x.iter().map(|&v| f(v)).collect()
        };
        Tensor::from_op(self.shape().to_vec(), data, Op::Unary { kind, x: self.clone() })
    }

    pub fn neg(&self) -> Tensor {
        self.unary(UnaryKind::Neg)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(UnaryKind::Exp)
    }

    pub fn log(&self) -> Tensor {
        self.unary(UnaryKind::Log)
    }

    /// Square root. The gradient at exactly zero is taken as zero.
    pub fn sqrt(&self) -> Tensor {
        self.unary(UnaryKind::Sqrt)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(UnaryKind::Relu)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn square(&self) -> Tensor {
        self.unary(UnaryKind::Square)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v + c).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::AddScalar(self.clone()))
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::MulScalar(self.clone(), c))
    }

    /// Euclidean norm of all elements, as a scalar.
    pub fn l2_norm(&self) -> Tensor {
        self.square().sum().sqrt()
    }
}

pub(super) fn binary_backward(kind: BinaryKind, a: &Tensor, b: &Tensor, g: &[f64]) -> Vec<(Tensor, Vec<f64>)> {
    let mut out = Vec::with_capacity(2);
    match kind {
        BinaryKind::Add => {
            out.push((a.clone(), g.to_vec()));
            out.push((b.clone(), g.to_vec()));
        }
        BinaryKind::Sub => {
            out.push((a.clone(), g.to_vec()));
            out.push((b.clone(), g.iter().map(|v| -v).collect()));
        }
        BinaryKind::Mul => {
            let (x, y) = (a.data(), b.data());
            if a.requires_grad() {
                out.push((a.clone(), g.iter().zip(y.iter()).map(|(g, y)| g * y).collect()));
            }
            if b.requires_grad() {
                out.push((b.clone(), g.iter().zip(x.iter()).map(|(g, x)| g * x).collect()));
            }
        }
        BinaryKind::Div => {
            let (x, y) = (a.data(), b.data());
            if a.requires_grad() {
                out.push((a.clone(), g.iter().zip(y.iter()).map(|(g, y)| g / y).collect()));
            }
            if b.requires_grad() {
                let gb = g
                    .iter()
                    .zip(x.iter().zip(y.iter()))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                out.push((b.clone(), gb));
            }
        }
    }
    out
}

pub(super) fn unary_backward(kind: UnaryKind, x: &Tensor, out: &[f64], g: &[f64]) -> Vec<f64> {
    match kind {
        UnaryKind::Neg => g.iter().map(|v| -v).collect(),
        UnaryKind::Exp => g.iter().zip(out).map(|(g, y)| g * y).collect(),
        UnaryKind::Log => g.iter().zip(x.data().iter()).map(|(g, x)| g / x).collect(),
        UnaryKind::Sqrt => g
            .iter()
            .zip(out)
            .map(|(g, y)| if *y > 0.0 { g / (2.0 * y) } else { 0.0 })
            .collect(),
        UnaryKind::Relu => g
            .iter()
            .zip(x.data().iter())
            .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
            .collect(),
        UnaryKind::Sigmoid => g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect(),
        UnaryKind::Square => g.iter().zip(x.data().iter()).map(|(g, x)| 2.0 * g * x).collect(),
    }
}

macro_rules! impl_binary_operator {
    ($trait:ident, $method:ident, $call:ident) => {
        impl ops::$trait<&Tensor> for &Tensor {
            type Output = Tensor;
            fn $method(self, rhs: &Tensor) -> Tensor {
                self.$call(rhs)
            }
        }
        impl ops::$trait<Tensor> for Tensor {
            type Output = Tensor;
            fn $method(self, rhs: Tensor) -> Tensor {
                (&self).$call(&rhs)
            }
        }
    };
}

impl_binary_operator!(Add, add, add);
impl_binary_operator!(Sub, sub, sub);
impl_binary_operator!(Mul, mul, mul);
impl_binary_operator!(Div, div, div);

impl ops::Neg for &Tensor {
    type Output = Tensor;
    fn neg(self) -> Tensor {
        Tensor::neg(self)
    }
}
