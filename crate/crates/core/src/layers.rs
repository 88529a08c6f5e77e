//! Named parameter storage and the small layers built on it.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Conv2dSpec, Gradients, Scalar, Tape, Tensor, Var};

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered map of named trainable tensors. Insertion order is the
/// checkpoint order and the gradient-reduction order.
#[derive(Debug, Clone)]
pub struct ParamStore<S: Scalar> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name:?}")));
        }
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor<S>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.values
    }

    /// Total element count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Replaces the value of an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))?;
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::Shape {
                op: "param_set",
                lhs: self.values[id.0].shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Binds every parameter to `tape` as a gradient-receiving leaf.
    pub fn leaves<'t>(&self, tape: &'t Tape<S>) -> Bound<'t, S> {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect(),
        }
    }

    /// Binds every parameter as an untracked constant (inference).
    pub fn constants<'t>(&self, tape: &'t Tape<S>) -> Bound<'t, S> {
        Bound {
            vars: self.values.iter().map(|v| tape.constant(v.clone())).collect(),
        }
    }
}

/// Parameters bound to one tape.
pub struct Bound<'t, S: Scalar> {
    vars: Vec<Var<'t, S>>,
}

impl<'t, S: Scalar> Bound<'t, S> {
    /// Wraps already-bound variables, in store order.
    pub fn from_vars(vars: Vec<Var<'t, S>>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var<'t, S>] {
        &self.vars
    }

    pub fn get(&self, id: ParamId) -> &Var<'t, S> {
        &self.vars[id.0]
    }

    /// One gradient per parameter, in store order (zeros where unused).
    pub fn gradients(&self, grads: &Gradients<S>) -> Vec<Tensor<S>> {
        self.vars.iter().map(|v| grads.wrt(v)).collect()
    }
}

/// Uniform `[-bound, bound)` tensor.
pub fn uniform_init<S: Scalar>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<S> {
    Tensor::from_fn(shape.to_vec(), |_| {
        if bound > 0.0 {
            S::c(rng.gen_range(-bound..bound))
        } else {
            S::zero()
        }
    })
}

/// Fully connected layer on the trailing axis. Weight layout `[d_in, d_out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weights and bias drawn from `U(-1/sqrt(d_in), 1/sqrt(d_in))`.
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform_init(&[d_in, d_out], bound, rng))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), uniform_init(&[d_out], bound, rng))?)
        } else {
            None
        };
        Ok(Self { weight, bias, d_in, d_out })
    }

    pub fn forward<'t, S: Scalar>(&self, p: &Bound<'t, S>, x: &Var<'t, S>) -> Result<Var<'t, S>> {
        x.linear(p.get(self.weight), self.bias.map(|b| p.get(b)))
    }

    pub fn numel(&self) -> usize {
        self.d_in * self.d_out + if self.bias.is_some() { self.d_out } else { 0 }
    }
}

/// 2D convolution, kernel layout `[c_out, c_in / groups, k, k]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        spec: Conv2dSpec,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if spec.groups == 0 || c_in % spec.groups != 0 || c_out % spec.groups != 0 {
            return Err(Error::Groups { cin: c_in, groups: spec.groups });
        }
        let fan_in = c_in / spec.groups * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform_init(&[c_out, c_in / spec.groups, kernel, kernel], bound, rng),
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), uniform_init(&[c_out], bound, rng))?)
        } else {
            None
        };
        Ok(Self { weight, bias, c_in, c_out, kernel, spec })
    }

    pub fn forward<'t, S: Scalar>(&self, p: &Bound<'t, S>, x: &Var<'t, S>) -> Result<Var<'t, S>> {
        x.conv2d(p.get(self.weight), self.bias.map(|b| p.get(b)), self.spec)
    }

    /// Multiply-accumulates for one output map of `out_h x out_w`, per sample.
    pub fn macs(&self, out_h: usize, out_w: usize) -> u64 {
        (self.c_out * (self.c_in / self.spec.groups) * self.kernel * self.kernel * out_h * out_w) as u64
    }

    pub fn numel(&self) -> usize {
        self.c_out * (self.c_in / self.spec.groups) * self.kernel * self.kernel
            + if self.bias.is_some() { self.c_out } else { 0 }
    }
}

/// Layer normalization over the trailing axis (gamma = 1, beta = 0 at init).
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(vec![dim]))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![dim]))?,
            dim,
            eps: Self::EPS,
        })
    }

    pub fn forward<'t, S: Scalar>(&self, p: &Bound<'t, S>, x: &Var<'t, S>) -> Result<Var<'t, S>> {
        x.layer_norm(p.get(self.gamma), p.get(self.beta), S::c(self.eps))
    }

    pub fn numel(&self) -> usize {
        2 * self.dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn single_linear_param_count() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Linear::new(&mut store, "fc", 3, 4, true, &mut rng).unwrap();
        assert_eq!(store.numel(), 16);
        assert_eq!(l.numel(), 16);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::zeros(vec![1])).unwrap();
        assert!(store.add("a", Tensor::zeros(vec![1])).is_err());
    }

    #[test]
    fn set_checks_shape() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::zeros(vec![2, 2])).unwrap();
        assert!(store.set("w", Tensor::zeros(vec![4])).is_err());
        store.set("w", Tensor::ones(vec![2, 2])).unwrap();
        assert_eq!(store.get(store.id("w").unwrap()).sum(), 4.0);
    }

    #[test]
    fn bad_groups_rejected_at_construction() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = Conv2dSpec::same(3).with_groups(2);
        assert!(matches!(
            Conv2d::new(&mut store, "c", 3, 3, 3, spec, true, &mut rng),
            Err(Error::Groups { .. })
        ));
    }
}
