use std::collections::{HashMap, HashSet};

use crate::error::TensorError;
use crate::tensor::Tensor;

impl Tensor {
    /// Back-propagates from this scalar through the recorded graph,
    /// accumulating into the `grad` of every reachable leaf that requires it.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Err(TensorError::NoGradPath);
        }

        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            if let Some(op) = &t.node.op {
                stack.extend(op.inputs().into_iter().filter(|p| p.requires_grad()).cloned());
            }
            order.push(t);
        }
        order.sort_by_key(|t| std::cmp::Reverse(t.id()));

        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for t in &order {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            match &t.node.op {
                None => t.accumulate_grad(&g),
                Some(op) => {
                    let out = t.data();
                    for (parent, pg) in op.backward(&t.node.shape, &out, &g) {
                        if !parent.requires_grad() {
                            continue;
                        }
                        match grads.get_mut(&parent.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(parent.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
