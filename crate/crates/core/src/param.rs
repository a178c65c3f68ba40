//! Trainable parameters, module traversal and weight initialization.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::norm::RunningStats;
use crate::tensor::{Shape, Tensor};

/// A trainable tensor slot. The held tensor is a gradient-tracking leaf;
/// [`Param::set_data`] swaps in a fresh leaf, which also clears its gradient.
#[derive(Debug)]
pub struct Param(RefCell<Tensor>);

impl Param {
    pub fn new(value: Tensor) -> Self {
        Param(RefCell::new(value.detach().requires_grad()))
    }

    pub fn get(&self) -> Tensor {
        self.0.borrow().clone()
    }

    pub fn shape(&self) -> Shape {
        self.0.borrow().shape()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().numel()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.borrow().grad()
    }

    pub fn zero_grad(&self) {
        self.0.borrow().zero_grad();
    }

    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        let shape = self.shape();
        *self.0.borrow_mut() = Tensor::param(shape, data)?;
        Ok(())
    }
}

/// One named slot reached while walking a module.
pub enum Entry<'a> {
    Param(&'a Param),
    Stats(&'a RefCell<RunningStats>),
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Anything holding parameters or normalization statistics.
pub trait Module {
    /// Calls `f` on every slot in a fixed order with dotted names.
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Entry<'a>));

    fn parameters(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, e| {
            if let Entry::Param(p) = e {
                out.push((name, p));
            }
        });
        out
    }

    fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|(_, p)| p.numel()).sum()
    }

    fn zero_grad(&self) {
        for (_, p) in self.parameters() {
            p.zero_grad();
        }
    }
}

impl<M: Module> Module for Option<M> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Entry<'a>)) {
        if let Some(m) = self {
            m.visit(prefix, f);
        }
    }
}

/// Seeded weight initializer: He-uniform weights, zero biases.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in `[-sqrt(6 / fan_in), sqrt(6 / fan_in)]`.
    pub fn he_uniform(&mut self, shape: Shape, fan_in: usize) -> Result<Param> {
        if fan_in == 0 {
            return Err(Error::config("fan-in of zero"));
        }
        let limit = (6.0 / fan_in as f64).sqrt();
        let data = (0..shape.numel())
            .map(|_| self.rng.gen_range(-limit..=limit))
            .collect();
        Ok(Param::new(Tensor::new(shape, data)?))
    }

    pub fn constant(&mut self, shape: Shape, value: f64) -> Param {
        Param::new(Tensor::full(shape, value))
    }
}
