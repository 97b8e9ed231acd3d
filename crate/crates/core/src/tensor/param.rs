use super::{Grads, Real, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng64;

/// A learnable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T: Real> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(T::zero());
    }
}

/// Index of a parameter inside a [`ParamStore`]. When a graph is bound to a
/// store, parameter `i` is leaf `i` of the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a parameter is filled when a store is materialized.
#[derive(Clone, Debug)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    /// Uniform in `[-sqrt(3/fan_in), sqrt(3/fan_in)]`: unit gain, so a
    /// layer preserves the variance of unit-variance inputs.
    FanIn(usize),
    /// Uniform in `[-sqrt(6/fan_in), sqrt(6/fan_in)]`, for layers followed
    /// by a rectifying activation.
    He(usize),
    /// Explicit values in storage order.
    Values(Vec<f64>),
    /// 1x1 or kxk convolution kernel that copies input channel `i` to output
    /// channel `i` through the kernel center.
    Identity,
}

/// Records parameter names, shapes and initializers independently of the
/// scalar type; [`ParamBuilder::materialize`] turns it into a typed store.
#[derive(Clone, Debug, Default)]
pub struct ParamBuilder {
    specs: Vec<(String, Vec<usize>, Init)>,
    prefix: Vec<String>,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_scope(&mut self, name: &str) {
        self.prefix.push(name.to_string());
    }

    pub fn pop_scope(&mut self) {
        self.prefix.pop();
    }

    /// Runs `f` with `name` appended to the scope.
    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.push_scope(name);
        let r = f(self);
        self.pop_scope();
        r
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let mut full = self.prefix.join(".");
        if !full.is_empty() {
            full.push('.');
        }
        full.push_str(name);
        self.specs.push((full, shape.to_vec(), init));
        ParamId(self.specs.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.specs.iter().map(|(n, _, _)| n.as_str())
    }

    /// Draws all initial values as `f64` from `rng` in declaration order, so
    /// single- and double-precision stores built from the same seed agree up
    /// to rounding.
    pub fn materialize<T: Real>(&self, rng: &mut Rng64) -> ParamStore<T> {
        let params = self
            .specs
            .iter()
            .map(|(name, shape, init)| {
                let n: usize = shape.iter().product();
                let values: Vec<f64> = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Const(c) => vec![*c; n],
                    Init::Uniform(b) => (0..n).map(|_| rng.uniform(-b, *b)).collect(),
                    Init::FanIn(fan) => {
                        let b = (3.0 / *fan.max(&1) as f64).sqrt();
                        (0..n).map(|_| rng.uniform(-b, b)).collect()
                    }
                    Init::He(fan) => {
                        let b = (6.0 / *fan.max(&1) as f64).sqrt();
                        (0..n).map(|_| rng.uniform(-b, b)).collect()
                    }
                    Init::Values(v) => {
                        assert_eq!(v.len(), n, "explicit init for {name} has wrong length");
                        v.clone()
                    }
                    Init::Identity => identity_kernel(shape),
                };
                let value = Tensor::new(shape, values.into_iter().map(T::c).collect())
                    .expect("parameter shape/data agree by construction");
                (name.clone(), Param::new(value))
            })
            .collect();
        ParamStore { params }
    }
}

fn identity_kernel(shape: &[usize]) -> Vec<f64> {
    let n: usize = shape.iter().product();
    let mut v = vec![0.0; n];
    match *shape {
        [cout, cin_g, kh, kw] => {
            for o in 0..cout {
                let i = if cin_g == 1 { 0 } else { o };
                if i < cin_g {
                    v[((o * cin_g + i) * kh + kh / 2) * kw + kw / 2] = 1.0;
                }
            }
        }
        [rows, cols] => {
            for i in 0..rows.min(cols) {
                v[i * cols + i] = 1.0;
            }
        }
        _ => {}
    }
    v
}

/// Named, ordered parameters of one model.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Real> {
    params: Vec<(String, Param<T>)>,
}

impl<T: Real> ParamStore<T> {
    pub fn from_named(params: Vec<(String, Tensor<T>)>) -> Self {
        Self {
            params: params.into_iter().map(|(n, v)| (n, Param::new(v))).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].0
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(n, p)| (n.as_str(), p))
    }

    pub fn values(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|(_, p)| p.value.clone()).collect()
    }

    pub fn set_values(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::contract(
                "set_values",
                format!("{} tensors for {} parameters", values.len(), self.params.len()),
            ));
        }
        for ((name, p), v) in self.params.iter_mut().zip(values) {
            if v.shape() != p.value.shape() {
                return Err(Error::Contract {
                    op: "set_values",
                    detail: format!(
                        "{name}: expected shape {:?}, got {:?}",
                        p.value.shape(),
                        v.shape()
                    ),
                });
            }
            p.value = v;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|(_, p)| p.zero_grad());
    }

    /// Adds the gradients of the first `len()` leaves of a bound graph.
    pub fn accumulate(&mut self, grads: &Grads<T>) {
        for (i, (_, p)) in self.params.iter_mut().enumerate() {
            if let Some(g) = grads.get_index(i) {
                for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(n, p)| (n.clone(), Param::new(p.value.cast())))
                .collect(),
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|(_, p)| p.value.len()).sum()
    }

    pub fn grad_norm(&self) -> T {
        self.params
            .iter()
            .flat_map(|(_, p)| p.grad.data().iter())
            .map(|g| *g * *g)
            .sum::<T>()
            .sqrt()
    }
}
