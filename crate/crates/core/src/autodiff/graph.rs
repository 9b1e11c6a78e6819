use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use rustfft::num_complex::Complex;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Recorded operation together with its input node ids and any activations
/// the backward rule needs.
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    ScaleBy(usize, usize),
    AddBias(usize, usize),
    BroadcastMul(usize, usize),
    MatMul(usize, usize),
    Bmm(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Gelu(usize),
    Sigmoid(usize),
    Relu(usize),
    Exp(usize),
    MeanAxis(usize, usize),
    Sum(usize),
    Mean(usize),
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    L2Normalize {
        x: usize,
        norms: Vec<f64>,
    },
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    Concat(usize, usize),
    RfftAmplitude {
        x: usize,
        spectrum: Vec<Complex<f64>>,
    },
    Conv {
        x: usize,
        kernel: usize,
        bias: Option<usize>,
        pad: usize,
    },
    PointwiseMaps {
        x: usize,
        weight: usize,
        bias: usize,
    },
    AvgPool(usize, usize),
    IndexSelect(usize, Vec<usize>),
    Diag(usize),
}

/// Names accepted by [`Graph::inject_backward_fault`].
pub const OP_NAMES: [&str; 31] = [
    "leaf",
    "add",
    "sub",
    "mul",
    "scale",
    "scale_by",
    "add_bias",
    "broadcast_mul",
    "matmul",
    "bmm",
    "permute",
    "reshape",
    "gelu",
    "sigmoid",
    "relu",
    "exp",
    "mean_axis",
    "sum",
    "mean",
    "softmax",
    "log_softmax",
    "layer_norm",
    "l2_normalize",
    "dropout",
    "concat",
    "rfft_amplitude",
    "conv",
    "pointwise_maps",
    "avg_pool",
    "index_select",
    "diag",
];

/// The static name of op `name`, if it is one.
pub fn op_name(name: &str) -> Option<&'static str> {
    OP_NAMES.iter().copied().find(|&n| n == name)
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::AddBias(..) => "add_bias",
            Op::BroadcastMul(..) => "broadcast_mul",
            Op::MatMul(..) => "matmul",
            Op::Bmm(..) => "bmm",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::Gelu(..) => "gelu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::MeanAxis(..) => "mean_axis",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Dropout { .. } => "dropout",
            Op::Concat(..) => "concat",
            Op::RfftAmplitude { .. } => "rfft_amplitude",
            Op::Conv { .. } => "conv",
            Op::PointwiseMaps { .. } => "pointwise_maps",
            Op::AvgPool(..) => "avg_pool",
            Op::IndexSelect(..) => "index_select",
            Op::Diag(..) => "diag",
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Rc<Tensor>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

#[derive(Default)]
pub(crate) struct Inner {
    pub(crate) nodes: Vec<Node>,
    pub(crate) fault: Option<(&'static str, f64)>,
}

/// A single-owner computation graph.
#[derive(Default)]
pub struct Graph {
    pub(crate) inner: RefCell<Inner>,
    consumed: Cell<bool>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) graph: &'g Graph,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_unchecked(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Multiplies the backward output of every op named `op` by `factor`.
    ///
    /// Only used to check that gradient verification notices a broken rule.
    pub fn inject_backward_fault(&self, op: &'static str, factor: f64) {
        self.inner.borrow_mut().fault = Some((op, factor));
    }

    fn push_unchecked(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: inner.nodes.len() - 1,
        }
    }

    pub(crate) fn push(&self, value: Tensor, op: Op) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NumericFault {
                op: op.name().to_string(),
            });
        }
        let requires_grad = {
            let inner = self.inner.borrow();
            op_inputs(&op).iter().any(|&i| inner.nodes[i].requires_grad)
        };
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    pub(crate) fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.inner.borrow().nodes[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    /// Reverse sweep from a scalar `loss`. The graph can be differentiated
    /// only once.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.graph, self) {
            return Err(Error::Contract("loss belongs to a different graph".into()));
        }
        if self.consumed.get() {
            return Err(Error::GraphState(
                "backward already ran on this graph".into(),
            ));
        }
        let inner = self.inner.borrow();
        let loss_value = &inner.nodes[loss.id].value;
        if loss_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Tensor>> = (0..inner.nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(loss_value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let node = &inner.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let mut contributions = super::backward::input_grads(&inner.nodes, id, &grad);
            if let Some((name, factor)) = inner.fault {
                if node.op.name() == name {
                    for (_, g) in &mut contributions {
                        g.data_mut().iter_mut().for_each(|v| *v *= factor);
                    }
                }
            }
            for (input, g) in contributions {
                if !inner.nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            // Keep gradients of leaves only; interior gradients are dropped
            // once propagated.
        }
        let grads = grads
            .into_iter()
            .zip(inner.nodes.iter())
            .map(|(g, n)| match n.op {
                Op::Leaf if n.requires_grad => g,
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

pub(crate) fn op_inputs(op: &Op) -> Vec<usize> {
    match *op {
        Op::Leaf => vec![],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::ScaleBy(a, b)
        | Op::AddBias(a, b)
        | Op::BroadcastMul(a, b)
        | Op::MatMul(a, b)
        | Op::Bmm(a, b)
        | Op::Concat(a, b) => vec![a, b],
        Op::Scale(a, _)
        | Op::Permute(a, _)
        | Op::Reshape(a)
        | Op::Gelu(a)
        | Op::Sigmoid(a)
        | Op::Relu(a)
        | Op::Exp(a)
        | Op::MeanAxis(a, _)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::Softmax(a, _)
        | Op::LogSoftmax(a, _)
        | Op::AvgPool(a, _)
        | Op::IndexSelect(a, _)
        | Op::Diag(a) => vec![a],
        Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
        Op::L2Normalize { x, .. } | Op::Dropout { x, .. } | Op::RfftAmplitude { x, .. } => vec![x],
        Op::Conv {
            x, kernel, bias, ..
        } => {
            let mut v = vec![x, kernel];
            v.extend(bias);
            v
        }
        Op::PointwiseMaps { x, weight, bias } => vec![x, weight, bias],
    }
}

/// Gradients of the leaves of a differentiated graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `var`, or `None` when nothing reached it (which means the
    /// gradient is identically zero).
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Like [`get`](Self::get) but materializes zeros for unreached leaves.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

impl<'g> Var<'g> {
    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.borrow().nodes[self.id]
            .value
            .shape()
            .to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad(self.id)
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    /// Same value, cut from the graph: nothing upstream receives gradient
    /// through the returned handle.
    pub fn detach(&self) -> Var<'g> {
        let value = self.value();
        let mut inner = self.graph.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var {
            graph: self.graph,
            id: inner.nodes.len() - 1,
        }
    }
}
