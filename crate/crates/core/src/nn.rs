//! Named parameter storage and the two layer types the heads are built from.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{NdArray, Tape, Var};

/// 64-bit FNV-1a, used to derive a per-parameter seed from its name.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Parameters in registration order, addressable by name.
///
/// Each array is initialized from an RNG seeded by `seed ^ hash(name)`, so a
/// parameter's initial value depends only on its name, shape and the seed,
/// not on which other parameters exist.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    values: Vec<NdArray>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: NdArray) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter {name}")));
        }
        if !value.is_finite() {
            return Err(Error::Invalid(format!("parameter {name} is not finite")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        Ok(())
    }

    /// Uniform in `[-sqrt(6 / fan_in), sqrt(6 / fan_in)]`.
    pub fn init_he_uniform(&mut self, seed: u64, name: &str, shape: &[usize], fan_in: usize) -> Result<()> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(name));
        self.insert(name, NdArray::from_fn(shape, |_| rng.gen_range(-bound..bound)))
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.insert(name, NdArray::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn size(&self) -> usize {
        self.values.iter().map(NdArray::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[NdArray] {
        &self.values
    }

    pub fn get(&self, name: &str) -> Option<&NdArray> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut NdArray> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn values_mut(&mut self) -> &mut [NdArray] {
        &mut self.values
    }

    /// Records every parameter as a constant on `tape`, for inference.
    pub fn bind_constant(&self, tape: &Tape) -> Bound<'_> {
        Bound {
            params: self,
            vars: self.values.iter().map(|v| tape.constant(v.clone())).collect(),
        }
    }

    /// Records every parameter as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &Tape) -> Bound<'_> {
        Bound {
            params: self,
            vars: self.values.iter().map(|v| tape.param(v.clone())).collect(),
        }
    }
}

/// Parameters recorded on one tape.
pub struct Bound<'a> {
    params: &'a Params,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Result<&Var> {
        self.params
            .index
            .get(name)
            .map(|&i| &self.vars[i])
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))
    }

    /// Gradients in parameter order; parameters outside the graph get zeros.
    pub fn grads(&self) -> Vec<NdArray> {
        self.vars
            .iter()
            .zip(&self.params.values)
            .map(|(v, p)| v.grad().unwrap_or_else(|| NdArray::zeros(p.shape())))
            .collect()
    }
}

/// Square-kernel convolution with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: String,
    pub bias: String,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        params: &mut Params,
        seed: u64,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let conv = Self {
            weight: format!("{name}.w"),
            bias: format!("{name}.b"),
            stride,
            padding,
        };
        params.init_he_uniform(seed, &conv.weight, &[c_out, c_in, k, k], c_in * k * k)?;
        params.init_zeros(&conv.bias, &[c_out])?;
        Ok(conv)
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        x.conv2d(p.var(&self.weight)?, Some(p.var(&self.bias)?), self.stride, self.padding)
    }
}

/// Fully connected layer on the flattened input.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: String,
    pub bias: String,
}

impl Dense {
    /// `zero` initializes the weight to zero instead of the fan-in rule.
    pub fn register(params: &mut Params, seed: u64, name: &str, n_in: usize, n_out: usize, zero: bool) -> Result<Self> {
        let d = Self {
            weight: format!("{name}.w"),
            bias: format!("{name}.b"),
        };
        if zero {
            params.init_zeros(&d.weight, &[n_out, n_in])?;
        } else {
            params.init_he_uniform(seed, &d.weight, &[n_out, n_in], n_in)?;
        }
        params.init_zeros(&d.bias, &[n_out])?;
        Ok(d)
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        x.linear(p.var(&self.weight)?, p.var(&self.bias)?)
    }
}

/// Checks that `b` has the same names and shapes as `a`, in order.
pub fn check_compatible(a: &Params, b: &Params) -> Result<()> {
    if a.names != b.names {
        return Err(Error::Checkpoint("parameter names differ".into()));
    }
    for ((n, x), y) in a.names.iter().zip(&a.values).zip(&b.values) {
        if x.shape() != y.shape() {
            return shape_err("check_compatible", format!("{n}: {:?} vs {:?}", x.shape(), y.shape()));
        }
    }
    Ok(())
}
