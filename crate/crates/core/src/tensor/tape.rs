use super::ops::Op;
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node {
    pub value: Tensor,
    pub requires_grad: bool,
    pub op: Op,
}

/// Backward rule for an operation defined outside this module.
///
/// `backward` receives the upstream gradient and the input values, and
/// returns one gradient buffer per input (empty when the input needs none).
pub trait CustomBackward: Send {
    fn name(&self) -> &'static str;
    fn backward(&self, grad: &[f64], inputs: &[&Tensor]) -> Vec<Vec<f64>>;
}

/// Wengert list of recorded operations.
///
/// Each forward pass records into a fresh tape (or one that was [`reset`]);
/// a tape supports exactly one [`backward`] call.
///
/// [`reset`]: Tape::reset
/// [`backward`]: Tape::backward
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.consumed = false;
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let shape = self.shape(v).to_vec();
        self.grad(v)
            .map(|g| Tensor::new(shape, g.to_vec()).expect("gradient shape matches value"))
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, op_name: &'static str) -> Result<Var> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Constant };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an externally defined differentiable operation.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor,
        rule: Box<dyn CustomBackward>,
    ) -> Result<Var> {
        let name = rule.name();
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            name,
        )
    }

    /// Propagates d`loss`/d(node) to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(TensorError::NotScalar(loss_value.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            node.op.backward(&self.nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[i] = None;
            } else if let Some(g) = &grads[i] {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFinite { op: "backward" });
                }
            }
        }
        self.grads = grads;
        Ok(())
    }
}

pub(crate) fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}
