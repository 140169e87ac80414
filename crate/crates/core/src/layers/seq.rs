//! Sequential composition of primitive layers with a gradient tape.
//!
//! `forward_train` appends one tape entry per executed op, in execution
//! order, holding the activations that op's backward needs. `backward` walks
//! the tape strictly in reverse, so the chain rule is applied in the exact
//! opposite order of execution.

use super::conv::{
    conv2d_backward, conv2d_forward, deconv2d_backward, deconv2d_forward, ConvLayer, DeconvLayer,
};
use super::norm::{batchnorm_backward, batchnorm_forward, batchnorm_infer, BatchNormLayer, BnCache};
use super::act::{relu_backward, relu_forward};
use super::{param_name, Gradients, HasParams};
use crate::error::{invalid, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub enum SeqOp<T: Scalar> {
    Conv(ConvLayer<T>),
    Deconv(DeconvLayer<T>),
    BatchNorm(BatchNormLayer<T>),
    Relu,
}

/// Saved activations for one executed op.
#[derive(Debug, Clone)]
enum TapeEntry<T: Scalar> {
    Conv { x: Tensor<T> },
    Deconv { x: Tensor<T> },
    BatchNorm { cache: BnCache<T> },
    Relu { x: Tensor<T> },
}

/// Ordered record of executed ops with their saved activations.
#[derive(Debug, Clone)]
pub struct GradTape<T: Scalar> {
    entries: Vec<TapeEntry<T>>,
}

impl<T: Scalar> GradTape<T> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Smallest |input| seen by any relu on the tape. Finite-difference
    /// probes use this to reject evaluation points that sit on a kink.
    pub fn relu_kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for entry in &self.entries {
            if let TapeEntry::Relu { x } = entry {
                for &v in x.data() {
                    margin = margin.min(v.as_f64().abs());
                }
            }
        }
        margin
    }
}

/// A named chain of primitive ops applied in order.
#[derive(Debug, Clone)]
pub struct Sequential<T: Scalar> {
    ops: Vec<(String, SeqOp<T>)>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new() -> Self {
        Sequential { ops: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, op: SeqOp<T>) {
        self.ops.push((name.into(), op));
    }

    pub fn ops(&self) -> &[(String, SeqOp<T>)] {
        &self.ops
    }

    pub fn ops_mut(&mut self) -> &mut [(String, SeqOp<T>)] {
        &mut self.ops
    }

    /// Inference path: batch norm uses running statistics.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for (_, op) in &self.ops {
            cur = match op {
                SeqOp::Conv(l) => conv2d_forward(l, &cur)?,
                SeqOp::Deconv(l) => deconv2d_forward(l, &cur)?,
                SeqOp::BatchNorm(l) => batchnorm_infer(l, &cur)?,
                SeqOp::Relu => relu_forward(&cur),
            };
        }
        Ok(cur)
    }

    /// Training path. Batch-norm layers run in their own mode (train mode
    /// updates running stats, which is why this takes `&mut self`).
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, GradTape<T>)> {
        let mut cur = x.clone();
        let mut entries = Vec::with_capacity(self.ops.len());
        for (_, op) in &mut self.ops {
            cur = match op {
                SeqOp::Conv(l) => {
                    let y = conv2d_forward(l, &cur)?;
                    entries.push(TapeEntry::Conv { x: cur });
                    y
                }
                SeqOp::Deconv(l) => {
                    let y = deconv2d_forward(l, &cur)?;
                    entries.push(TapeEntry::Deconv { x: cur });
                    y
                }
                SeqOp::BatchNorm(l) => {
                    let (y, cache) = batchnorm_forward(l, &cur)?;
                    entries.push(TapeEntry::BatchNorm { cache });
                    y
                }
                SeqOp::Relu => {
                    let y = relu_forward(&cur);
                    entries.push(TapeEntry::Relu { x: cur });
                    y
                }
            };
        }
        Ok((cur, GradTape { entries }))
    }

    /// Consume the tape in reverse execution order, accumulating parameter
    /// gradients under `prefix` and returning the input gradient.
    pub fn backward(
        &self,
        tape: &GradTape<T>,
        prefix: &str,
        grad_out: &Tensor<T>,
        grads: &mut Gradients<T>,
    ) -> Result<Tensor<T>> {
        if tape.entries.len() != self.ops.len() {
            return invalid(format!(
                "tape has {} entries for {} ops",
                tape.entries.len(),
                self.ops.len()
            ));
        }
        let mut grad = grad_out.clone();
        for ((name, op), entry) in self.ops.iter().zip(tape.entries.iter()).rev() {
            grad = match (op, entry) {
                (SeqOp::Conv(l), TapeEntry::Conv { x }) => {
                    let g = conv2d_backward(l, x, &grad)?;
                    g.into_input_grad(&param_name(prefix, name), grads)?
                }
                (SeqOp::Deconv(l), TapeEntry::Deconv { x }) => {
                    let g = deconv2d_backward(l, x, &grad)?;
                    g.into_input_grad(&param_name(prefix, name), grads)?
                }
                (SeqOp::BatchNorm(l), TapeEntry::BatchNorm { cache }) => {
                    let (gx, gg, gb) = batchnorm_backward(l, cache, &grad)?;
                    let base = param_name(prefix, name);
                    grads.accumulate(&param_name(&base, "gamma"), gg)?;
                    grads.accumulate(&param_name(&base, "beta"), gb)?;
                    gx
                }
                (SeqOp::Relu, TapeEntry::Relu { x }) => relu_backward(x, &grad)?,
                _ => return invalid("tape entry does not match op kind"),
            };
        }
        Ok(grad)
    }
}

impl<T: Scalar> Default for Sequential<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> HasParams<T> for Sequential<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (name, op) in &self.ops {
            let p = param_name(prefix, name);
            match op {
                SeqOp::Conv(l) => l.visit_params(&p, f),
                SeqOp::Deconv(l) => l.visit_params(&p, f),
                SeqOp::BatchNorm(l) => l.visit_params(&p, f),
                SeqOp::Relu => {}
            }
        }
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (name, op) in &mut self.ops {
            let p = param_name(prefix, name);
            match op {
                SeqOp::Conv(l) => l.visit_params_mut(&p, f),
                SeqOp::Deconv(l) => l.visit_params_mut(&p, f),
                SeqOp::BatchNorm(l) => l.visit_params_mut(&p, f),
                SeqOp::Relu => {}
            }
        }
    }
    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (name, op) in &self.ops {
            let p = param_name(prefix, name);
            match op {
                SeqOp::Conv(l) => l.visit_state(&p, f),
                SeqOp::Deconv(l) => l.visit_state(&p, f),
                SeqOp::BatchNorm(l) => l.visit_state(&p, f),
                SeqOp::Relu => {}
            }
        }
    }
    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (name, op) in &mut self.ops {
            let p = param_name(prefix, name);
            match op {
                SeqOp::Conv(l) => l.visit_state_mut(&p, f),
                SeqOp::Deconv(l) => l.visit_state_mut(&p, f),
                SeqOp::BatchNorm(l) => l.visit_state_mut(&p, f),
                SeqOp::Relu => {}
            }
        }
    }
}
