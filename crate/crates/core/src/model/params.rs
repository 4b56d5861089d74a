use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Named parameter tensors in a stable enumeration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut p = Params::new();
        for (name, t) in entries {
            p.insert(name, t)?;
        }
        Ok(p)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(invalid(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    /// Copies every parameter into `g` as a leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound<'_> {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { params: self, vars }
    }
}

/// Parameters bound to graph leaves.
pub struct Bound<'a> {
    params: &'a Params,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.params
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| invalid(format!("missing parameter {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Sequential initializer; parameters are created in call order.
pub(crate) struct Init<'r> {
    pub params: Params,
    rng: &'r mut ChaCha8Rng,
}

impl<'r> Init<'r> {
    pub fn new(rng: &'r mut ChaCha8Rng) -> Self {
        Init {
            params: Params::new(),
            rng,
        }
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        self.params
            .insert(name, Tensor::new(shape.to_vec(), data).expect("init shape"))
            .expect("unique parameter names");
    }

    pub fn fill(&mut self, name: String, shape: &[usize], value: f64) {
        self.params
            .insert(name, Tensor::full(shape, value))
            .expect("unique parameter names");
    }

    pub fn conv(&mut self, prefix: &str, c_out: usize, c_in: usize, k: usize) {
        self.uniform(
            format!("{prefix}.w"),
            &[c_out, c_in, k, k, k],
            c_in * k * k * k,
        );
        self.fill(format!("{prefix}.b"), &[c_out], 0.0);
    }

    pub fn conv_zero(&mut self, prefix: &str, c_out: usize, c_in: usize, k: usize) {
        self.fill(format!("{prefix}.w"), &[c_out, c_in, k, k, k], 0.0);
        self.fill(format!("{prefix}.b"), &[c_out], 0.0);
    }

    /// Transposed conv weights `[c_in, c_out, k, k, k]`.
    pub fn conv_transpose(
        &mut self,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) {
        let fan_in = (c_in * k * k * k / (stride * stride * stride)).max(1);
        self.uniform(format!("{prefix}.w"), &[c_in, c_out, k, k, k], fan_in);
        self.fill(format!("{prefix}.b"), &[c_out], 0.0);
    }

    pub fn linear(&mut self, prefix: &str, out: usize, inp: usize) {
        self.uniform(format!("{prefix}.w"), &[out, inp], inp);
        self.fill(format!("{prefix}.b"), &[out], 0.0);
    }

    pub fn norm(&mut self, prefix: &str, c: usize) {
        self.fill(format!("{prefix}.gamma"), &[c], 1.0);
        self.fill(format!("{prefix}.beta"), &[c], 0.0);
    }
}
