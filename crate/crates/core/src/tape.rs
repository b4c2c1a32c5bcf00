//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! A [`Tape`] owns an append-only arena of nodes. Each node stores its
//! forward value, the operation that produced it, and the ids of its parent
//! nodes (always earlier in the arena). Operations involving at least one
//! gradient-tracked tensor are recorded; everything else is evaluated
//! eagerly without touching the tape, so inference never pays for autodiff.
//!
//! [`Tensor::backward`] runs one reverse sweep from a scalar loss, summing
//! contributions at fan-out, and returns the gradients of every named leaf
//! that the loss actually reaches.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kan::SplineGrid;
use crate::nn::ConvSpec;
use crate::ops;
use crate::tensor::{numel_of, Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Relu,
    Silu,
    Sigmoid,
    Exp,
    Ln,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ReduceKind {
    Sum,
    Mean,
    Max,
}

/// Operation record: parent ids plus whatever the backward pass needs that
/// is not already available as a parent's or the node's own forward value.
pub(crate) enum OpRecord<T: Element> {
    Leaf,
    Unary {
        kind: UnaryKind,
        input: usize,
    },
    Affine {
        input: usize,
        scale: f64,
    },
    ClampMin {
        input: usize,
        min: f64,
    },
    Binary {
        kind: BinaryKind,
        lhs: usize,
        rhs: usize,
    },
    Matmul {
        lhs: usize,
        rhs: usize,
    },
    Softmax {
        input: usize,
        axis: usize,
    },
    Reduce {
        kind: ReduceKind,
        input: usize,
        axes: Vec<usize>,
    },
    Reshape {
        input: usize,
    },
    Permute {
        input: usize,
        perm: Vec<usize>,
    },
    SliceAxis {
        input: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Conv {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        spec: ConvSpec,
    },
    MaxPool3 {
        input: usize,
    },
    Upsample3 {
        input: usize,
    },
    Normalize {
        input: usize,
        gain: usize,
        offset: usize,
        axes: Vec<usize>,
        /// Per-group statistics saved by the forward pass.
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    /// B-spline mixing: `out[n,o] = sum_{i,j} coeffs[o,i,j] * basis_j(x[n,i])`.
    /// The basis values are saved (always evaluated in f64).
    SplineMix {
        input: usize,
        coeffs: usize,
        grid: SplineGrid,
        basis: Vec<f64>,
    },
}

pub(crate) struct Node<T: Element> {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Arc<Vec<T>>,
    pub(crate) requires_grad: bool,
    pub(crate) label: Option<String>,
    pub(crate) record: OpRecord<T>,
}

struct TapeInner<T: Element> {
    nodes: Vec<Node<T>>,
    leaf_names: BTreeSet<String>,
}

/// Cheap-to-clone handle to a shared tape.
pub struct Tape<T: Element>(Rc<RefCell<TapeInner<T>>>);

impl<T: Element> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape(Rc::clone(&self.0))
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) struct NodeRef<T: Element> {
    pub(crate) tape: Tape<T>,
    pub(crate) id: usize,
}

impl<T: Element> Clone for NodeRef<T> {
    fn clone(&self) -> Self {
        NodeRef {
            tape: self.tape.clone(),
            id: self.id,
        }
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape(Rc::new(RefCell::new(TapeInner {
            nodes: Vec::new(),
            leaf_names: BTreeSet::new(),
        })))
    }

    pub(crate) fn same(a: &Tape<T>, b: &Tape<T>) -> bool {
        Rc::ptr_eq(&a.0, &b.0)
    }

    /// Number of recorded nodes (diagnostic).
    pub fn len(&self) -> usize {
        self.0.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a named gradient-tracked leaf holding `value`'s data.
    /// Names must be unique per tape; they key the resulting [`GradientMap`].
    pub fn watch(&self, name: &str, value: &Tensor<T>) -> Result<Tensor<T>> {
        {
            let mut inner = self.0.borrow_mut();
            if !inner.leaf_names.insert(name.to_string()) {
                return Err(Error::DuplicateLeaf(name.to_string()));
            }
            inner.nodes.push(Node {
                shape: value.shape().to_vec(),
                data: value.data_arc(),
                requires_grad: true,
                label: Some(name.to_string()),
                record: OpRecord::Leaf,
            });
        }
        let id = self.len() - 1;
        Ok(Tensor::with_node(
            value.shape().to_vec(),
            value.data_arc(),
            Some(NodeRef {
                tape: self.clone(),
                id,
            }),
        ))
    }

    /// Interns a tensor as a node id, adding an untracked leaf if needed.
    fn intern(&self, value: &Tensor<T>) -> Result<usize> {
        if let Some(node) = &value.node {
            if !Tape::same(&node.tape, self) {
                return Err(Error::TapeMismatch);
            }
            return Ok(node.id);
        }
        let mut inner = self.0.borrow_mut();
        inner.nodes.push(Node {
            shape: value.shape().to_vec(),
            data: value.data_arc(),
            requires_grad: false,
            label: None,
            record: OpRecord::Leaf,
        });
        Ok(inner.nodes.len() - 1)
    }
}

/// Evaluates an op and records it when gradients can flow to any input.
///
/// `build` receives the interned parent ids in the order of `inputs`.
pub(crate) fn record<T: Element>(
    inputs: &[&Tensor<T>],
    out_shape: Vec<usize>,
    out_data: Vec<T>,
    build: impl FnOnce(&[usize]) -> OpRecord<T>,
) -> Result<Tensor<T>> {
    record_arc(inputs, out_shape, Arc::new(out_data), build)
}

/// Like [`record`] but reuses an existing buffer (e.g. reshape).
pub(crate) fn record_arc<T: Element>(
    inputs: &[&Tensor<T>],
    out_shape: Vec<usize>,
    data: Arc<Vec<T>>,
    build: impl FnOnce(&[usize]) -> OpRecord<T>,
) -> Result<Tensor<T>> {
    debug_assert_eq!(numel_of(&out_shape), data.len());
    let mut tape: Option<&Tape<T>> = None;
    let mut requires = false;
    for t in inputs {
        if let Some(node) = &t.node {
            match tape {
                None => tape = Some(&node.tape),
                Some(existing) if !Tape::same(existing, &node.tape) => {
                    return Err(Error::TapeMismatch)
                }
                _ => {}
            }
            requires |= node.tape.0.borrow().nodes[node.id].requires_grad;
        }
    }
    let tape = match tape {
        Some(t) if requires => t.clone(),
        _ => return Ok(Tensor::with_node(out_shape, data, None)),
    };
    let mut ids = Vec::with_capacity(inputs.len());
    for t in inputs {
        ids.push(tape.intern(t)?);
    }
    let record = build(&ids);
    let id = {
        let mut inner = tape.0.borrow_mut();
        inner.nodes.push(Node {
            shape: out_shape.clone(),
            data: Arc::clone(&data),
            requires_grad: true,
            label: None,
            record,
        });
        inner.nodes.len() - 1
    };
    Ok(Tensor::with_node(
        out_shape,
        data,
        Some(NodeRef { tape, id }),
    ))
}

/// Gradients of named leaves, keyed by leaf name.
#[derive(Debug)]
pub struct GradientMap<T: Element> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> GradientMap<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|k| k.as_str())
    }
}

impl<T: Element> Tensor<T> {
    /// Reverse sweep from a scalar. Returns gradients for every named leaf
    /// reached by the sweep; an unreachable leaf has no entry.
    pub fn backward(&self) -> Result<GradientMap<T>> {
        let node = self.node.as_ref().ok_or(Error::NotTracked)?;
        if self.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward() needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        let inner = node.tape.0.borrow();
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[node.id] = Some(vec![T::ONE]);

        for id in (0..=node.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            step_backward(nodes, id, &grad, &mut grads);
            // Leaf gradients are collected below; restore them.
            if matches!(nodes[id].record, OpRecord::Leaf) {
                grads[id] = Some(grad);
            }
        }

        let mut map = BTreeMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if let (Some(name), Some(grad)) = (&node.label, grads[id].take()) {
                if node.requires_grad {
                    map.insert(
                        name.clone(),
                        Tensor::from_vec(&node.shape, grad)
                            .expect("gradient shape matches leaf shape"),
                    );
                }
            }
        }
        Ok(GradientMap { map })
    }
}

/// Lazily materializes the accumulator slot for a parent node.
fn slot<'a, T: Element>(
    grads: &'a mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    id: usize,
) -> &'a mut [T] {
    grads[id]
        .get_or_insert_with(|| vec![T::ZERO; numel_of(&nodes[id].shape)])
        .as_mut_slice()
}

fn needs<T: Element>(nodes: &[Node<T>], id: usize) -> bool {
    nodes[id].requires_grad
}

fn step_backward<T: Element>(
    nodes: &[Node<T>],
    id: usize,
    grad: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    match &nodes[id].record {
        OpRecord::Leaf => {}
        OpRecord::Unary { kind, input } => {
            if needs(nodes, *input) {
                ops::unary_backward(
                    *kind,
                    &nodes[*input].data,
                    &nodes[id].data,
                    grad,
                    slot(grads, nodes, *input),
                );
            }
        }
        OpRecord::Affine { input, scale } => {
            if needs(nodes, *input) {
                let s = T::from_f64(*scale);
                let gx = slot(grads, nodes, *input);
                for (gx_i, &g_i) in gx.iter_mut().zip(grad) {
                    *gx_i += g_i * s;
                }
            }
        }
        OpRecord::ClampMin { input, min } => {
            if needs(nodes, *input) {
                let m = T::from_f64(*min);
                let x = &nodes[*input].data;
                let gx = slot(grads, nodes, *input);
                for i in 0..gx.len() {
                    if x[i] > m {
                        gx[i] += grad[i];
                    }
                }
            }
        }
        OpRecord::Binary { kind, lhs, rhs } => {
            let (a, a_shape) = (&nodes[*lhs].data, nodes[*lhs].shape.as_slice());
            let (b, b_shape) = (&nodes[*rhs].data, nodes[*rhs].shape.as_slice());
            let out_shape = nodes[id].shape.as_slice();
            if needs(nodes, *lhs) {
                ops::binary_backward_lhs(
                    *kind,
                    a,
                    a_shape,
                    b,
                    b_shape,
                    grad,
                    out_shape,
                    slot(grads, nodes, *lhs),
                );
            }
            if needs(nodes, *rhs) {
                ops::binary_backward_rhs(
                    *kind,
                    a,
                    a_shape,
                    b,
                    b_shape,
                    grad,
                    out_shape,
                    slot(grads, nodes, *rhs),
                );
            }
        }
        OpRecord::Matmul { lhs, rhs } => {
            let (a, a_shape) = (&nodes[*lhs].data, nodes[*lhs].shape.as_slice());
            let (b, b_shape) = (&nodes[*rhs].data, nodes[*rhs].shape.as_slice());
            if needs(nodes, *lhs) {
                ops::matmul_backward_lhs(a_shape, b, b_shape, grad, slot(grads, nodes, *lhs));
            }
            if needs(nodes, *rhs) {
                ops::matmul_backward_rhs(a, a_shape, b_shape, grad, slot(grads, nodes, *rhs));
            }
        }
        OpRecord::Softmax { input, axis } => {
            if needs(nodes, *input) {
                ops::softmax_backward(
                    &nodes[id].data,
                    nodes[id].shape.as_slice(),
                    *axis,
                    grad,
                    slot(grads, nodes, *input),
                );
            }
        }
        OpRecord::Reduce { kind, input, axes } => {
            if needs(nodes, *input) {
                ops::reduce_backward(
                    *kind,
                    &nodes[*input].data,
                    nodes[*input].shape.as_slice(),
                    axes,
                    grad,
                    slot(grads, nodes, *input),
                );
            }
        }
        OpRecord::Reshape { input } => {
            if needs(nodes, *input) {
                let gx = slot(grads, nodes, *input);
                for (gx_i, &g_i) in gx.iter_mut().zip(grad) {
                    *gx_i += g_i;
                }
            }
        }
        OpRecord::Permute { input, perm } => {
            if needs(nodes, *input) {
                ops::permute_backward(
                    nodes[*input].shape.as_slice(),
                    perm,
                    grad,
                    slot(grads, nodes, *input),
                );
            }
        }
        OpRecord::SliceAxis { input, axis, start } => {
            if needs(nodes, *input) {
                ops::slice_axis_backward(
                    nodes[*input].shape.as_slice(),
                    nodes[id].shape.as_slice(),
                    *axis,
                    *start,
                    grad,
                    slot(grads, nodes, *input),
                );
            }
        }
        OpRecord::Concat { inputs, axis } => {
            let mut offset = 0usize;
            for &part in inputs {
                let extent = nodes[part].shape[*axis];
                if needs(nodes, part) {
                    ops::concat_backward_part(
                        nodes[id].shape.as_slice(),
                        nodes[part].shape.as_slice(),
                        *axis,
                        offset,
                        grad,
                        slot(grads, nodes, part),
                    );
                }
                offset += extent;
            }
        }
        OpRecord::Conv {
            input,
            weight,
            bias,
            spec,
        } => {
            let x = (&nodes[*input].data, nodes[*input].shape.as_slice());
            let w = (&nodes[*weight].data, nodes[*weight].shape.as_slice());
            let out_shape = nodes[id].shape.as_slice();
            if needs(nodes, *input) {
                crate::nn::conv_backward_input(
                    w.0,
                    w.1,
                    grad,
                    out_shape,
                    spec,
                    x.1,
                    slot(grads, nodes, *input),
                );
            }
            if needs(nodes, *weight) {
                crate::nn::conv_backward_weight(
                    x.0,
                    x.1,
                    grad,
                    out_shape,
                    spec,
                    w.1,
                    slot(grads, nodes, *weight),
                );
            }
            if let Some(bias) = bias {
                if needs(nodes, *bias) {
                    crate::nn::conv_backward_bias(grad, out_shape, slot(grads, nodes, *bias));
                }
            }
        }
        OpRecord::MaxPool3 { input } => {
            if needs(nodes, *input) {
                crate::nn::max_pool3_backward(
                    &nodes[*input].data,
                    nodes[*input].shape.as_slice(),
                    grad,
                    slot(grads, nodes, *input),
                );
            }
        }
        OpRecord::Upsample3 { input } => {
            if needs(nodes, *input) {
                crate::nn::upsample3_backward(
                    nodes[*input].shape.as_slice(),
                    grad,
                    slot(grads, nodes, *input),
                );
            }
        }
        OpRecord::Normalize {
            input,
            gain,
            offset,
            axes,
            mean,
            inv_std,
        } => {
            let (gx, ggain, goffset) = crate::nn::normalize_backward(
                &nodes[*input].data,
                nodes[*input].shape.as_slice(),
                &nodes[*gain].data,
                nodes[*gain].shape.as_slice(),
                axes,
                mean,
                inv_std,
                grad,
                needs(nodes, *input),
                needs(nodes, *gain),
                needs(nodes, *offset),
            );
            for (parent, contribution) in [(*input, gx), (*gain, ggain), (*offset, goffset)] {
                if let Some(contribution) = contribution {
                    let acc = slot(grads, nodes, parent);
                    for (acc_i, c_i) in acc.iter_mut().zip(contribution) {
                        *acc_i += c_i;
                    }
                }
            }
        }
        OpRecord::SplineMix {
            input,
            coeffs,
            grid,
            basis,
        } => {
            let x = (&nodes[*input].data, nodes[*input].shape.as_slice());
            let c = (&nodes[*coeffs].data, nodes[*coeffs].shape.as_slice());
            if needs(nodes, *coeffs) {
                crate::kan::spline_mix_backward_coeffs(
                    basis,
                    x.1,
                    c.1,
                    grad,
                    slot(grads, nodes, *coeffs),
                );
            }
            if needs(nodes, *input) {
                crate::kan::spline_mix_backward_input(
                    grid,
                    x.0,
                    x.1,
                    c.0,
                    c.1,
                    grad,
                    slot(grads, nodes, *input),
                );
            }
        }
    }
}
