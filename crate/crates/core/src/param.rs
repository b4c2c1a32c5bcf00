//! Named trainable parameters, tape binding, and weight initialization.
//!
//! Modules own their parameters as plain tensors. During a training step the
//! forward pass binds each parameter to the step's tape (registering it as a
//! gradient-tracked leaf under its name); during inference it uses the raw
//! value and no graph is recorded.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tape::Tape;
use crate::tensor::{Element, Tensor};

/// A named leaf tensor. Names are unique across a model and double as the
/// keys for gradients, optimizer state, and checkpoints.
#[derive(Debug, Clone)]
pub struct Param<T: Element> {
    pub name: String,
    pub value: Tensor<T>,
}

impl<T: Element> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Param {
            name: name.into(),
            value,
        }
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Resolves parameters for one forward pass.
#[derive(Clone, Copy)]
pub struct Binder<'a, T: Element> {
    tape: Option<&'a Tape<T>>,
}

impl<'a, T: Element> Binder<'a, T> {
    /// Parameters become gradient-tracked leaves of `tape`.
    pub fn training(tape: &'a Tape<T>) -> Self {
        Binder { tape: Some(tape) }
    }

    /// Parameters are used as-is; nothing is recorded.
    pub fn inference() -> Self {
        Binder { tape: None }
    }

    pub fn bind(&self, p: &Param<T>) -> Result<Tensor<T>> {
        match self.tape {
            Some(tape) => tape.watch(&p.name, &p.value),
            None => Ok(p.value.clone()),
        }
    }
}

/// Walks a module tree's parameters in declaration order.
pub trait Visit<T: Element> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));
}

/// Total element count over all parameters of a module.
pub fn param_count<T: Element>(module: &dyn Visit<T>) -> usize {
    let mut n = 0;
    module.visit(&mut |p| n += p.numel());
    n
}

/// All parameter names of a module, in declaration order.
pub fn param_names<T: Element>(module: &dyn Visit<T>) -> Vec<String> {
    let mut names = Vec::new();
    module.visit(&mut |p| names.push(p.name.clone()));
    names
}

/// Uniform init on `[-sqrt(6/fan_in), sqrt(6/fan_in)]`. Draws are made in
/// f64 and cast, so f32 and f64 models see the same stream.
pub fn kaiming_uniform<T: Element>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("init shape is valid")
}

/// Zero-mean gaussian init with the given standard deviation.
pub fn normal_init<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("std is positive and finite");
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("init shape is valid")
}
