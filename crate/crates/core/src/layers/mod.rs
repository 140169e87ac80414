//! Neural-network layers with explicit forward and backward passes.
//!
//! Every layer is a plain struct of tensors; forward functions are pure and
//! backward functions consume saved activations, so training never relies on
//! hidden state. Parameters are addressed by dotted path names through
//! [`HasParams`], which is what the optimizer, checkpoints and the gradient
//! checker all iterate over.

mod act;
mod conv;
mod dense;
mod norm;
mod pool;
mod resize;
mod seq;

pub use act::{relu_backward, relu_forward, sigmoid_backward, sigmoid_forward};
pub use act::{spatial_softmax_backward, spatial_softmax_forward};
pub use conv::{
    conv2d_backward, conv2d_forward, deconv2d_backward, deconv2d_forward, ConvGrads, ConvLayer,
    DeconvLayer,
};
pub use dense::{dense_backward, dense_forward, DenseGrads, DenseLayer};
pub use norm::{batchnorm_backward, batchnorm_forward, batchnorm_infer, BnCache, BnMode, BatchNormLayer};
pub use pool::{pool_backward, pool_forward, PoolCache, PoolKind};
pub use resize::{upsample_nearest_backward, upsample_nearest_forward};
pub use seq::{GradTape, SeqOp, Sequential};

use crate::error::Result;
use crate::tensor::{Scalar, Tensor};
use std::collections::BTreeMap;

/// Gradient accumulator keyed by dotted parameter path. Iteration order is
/// the sorted key order, which keeps optimizer updates deterministic.
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn new() -> Self {
        Gradients { map: BTreeMap::new() }
    }

    /// Add `grad` into the slot for `name`, creating it if absent.
    pub fn accumulate(&mut self, name: &str, grad: Tensor<T>) -> Result<()> {
        match self.map.get_mut(name) {
            Some(t) => t.acc(&grad),
            None => {
                self.map.insert(name.to_string(), grad);
                Ok(())
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Multiply every stored gradient by `k` (e.g. a loss weight).
    pub fn scale_all(&mut self, k: T) {
        for t in self.map.values_mut() {
            *t = t.scale(k);
        }
    }

    /// Fold `other` into `self`.
    pub fn merge(&mut self, other: Gradients<T>) -> Result<()> {
        for (name, grad) in other.map {
            self.accumulate(&name, grad)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Default for Gradients<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Visitor access to a module's parameters (and, separately, its full
/// persistent state including batch-norm running statistics).
pub trait HasParams<T: Scalar> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    /// Parameters plus non-trained buffers; defaults to parameters only.
    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.visit_params(prefix, f);
    }
    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.visit_params_mut(prefix, f);
    }
}

/// Join a dotted prefix with a leaf name.
pub fn param_name(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}

/// Count of scalar parameters reachable from a module.
pub fn param_count<T: Scalar>(module: &impl HasParams<T>) -> usize {
    let mut count = 0;
    module.visit_params("", &mut |_, t| count += t.shape().count());
    count
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn gradients_accumulate_adds() {
        let mut g: Gradients<f64> = Gradients::new();
        let t = Tensor::filled(Shape::new(1, 1, 1, 2), 1.5);
        g.accumulate("a.weight", t.clone()).unwrap();
        g.accumulate("a.weight", t).unwrap();
        assert_eq!(g.get("a.weight").unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn gradients_iterate_sorted() {
        let mut g: Gradients<f64> = Gradients::new();
        let t = Tensor::filled(Shape::new(1, 1, 1, 1), 1.0);
        g.accumulate("b", t.clone()).unwrap();
        g.accumulate("a", t.clone()).unwrap();
        g.accumulate("c", t).unwrap();
        let names: Vec<&str> = g.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, vec!["a", "b", "c"]);
    }

    #[test]
    fn param_name_joins() {
        assert_eq!(param_name("", "weight"), "weight");
        assert_eq!(param_name("stem.conv", "bias"), "stem.conv.bias");
    }
}
