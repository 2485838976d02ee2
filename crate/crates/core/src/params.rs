//! Named parameters, their binding onto a tape, and the AdamW update.

use std::collections::HashMap;

use log::warn;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    first_moment: Tensor,
    second_moment: Tensor,
    steps: u64,
}

impl Param {
    fn new(value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Param {
            value,
            grad: None,
            first_moment: Tensor::zeros(&shape),
            second_moment: Tensor::zeros(&shape),
            steps: 0,
        }
    }
}

/// Insertion-ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<(String, Param)>,
    index: HashMap<String, usize>,
}

/// Hyper-parameters of the decoupled-weight-decay Adam update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 1e-4,
            betas: (0.9, 0.999),
            weight_decay: 0.0,
            eps: 1e-8,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push((name, Param::new(value)));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i].1)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.get(name).map(|p| &p.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.params[i].1.value)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(n, p)| (n.as_str(), p))
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|(_, p)| p.value.numel()).sum()
    }

    /// Registers every parameter as a gradient-requiring leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(n, p)| (n.clone(), tape.param(p.value.clone())))
            .collect();
        Bound { vars }
    }

    /// Copies gradients computed by `tape.backward` into the store,
    /// accumulating into any gradient already present.
    pub fn collect_grads(&mut self, tape: &Tape, bound: &Bound) {
        for (name, var) in &bound.vars {
            let Some(g) = tape.grad(*var) else { continue };
            let i = self.index[name];
            let p = &mut self.params[i].1;
            match &mut p.grad {
                Some(acc) => acc.axpy(1.0, g),
                None => p.grad = Some(g.clone()),
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in &mut self.params {
            p.grad = None;
        }
    }

    /// One AdamW update. Parameters without a gradient are skipped.
    pub fn adamw_step(&mut self, opt: &AdamW) {
        let (b1, b2) = opt.betas;
        for (name, p) in &mut self.params {
            let Some(g) = p.grad.as_ref() else {
                warn!("parameter {name} has no gradient; skipped");
                continue;
            };
            p.steps += 1;
            let t = p.steps as i32;
            let bc1 = 1.0 - b1.powi(t);
            let bc2 = 1.0 - b2.powi(t);
            let value = p.value.data_mut();
            let m = p.first_moment.data_mut();
            let v = p.second_moment.data_mut();
            for i in 0..value.len() {
                let gi = g.data()[i];
                value[i] -= opt.lr * opt.weight_decay * value[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
            }
        }
    }

    /// Named snapshot of all parameter values, in store order.
    pub fn to_records(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|(n, p)| (n.clone(), p.value.clone())).collect()
    }

    /// Overwrites values from `records`. Every parameter must be present
    /// with an identical shape.
    pub fn load_records(&mut self, records: &[(String, Tensor)]) -> Result<()> {
        let by_name: HashMap<&str, &Tensor> = records.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, p) in &self.params {
            let Some(t) = by_name.get(name.as_str()) else {
                return Err(Error::invalid(format!("checkpoint is missing parameter {name:?}")));
            };
            if t.shape() != p.value.shape() {
                return Err(Error::invalid(format!(
                    "parameter {name:?}: model expects shape {:?}, checkpoint has {:?}",
                    p.value.shape(),
                    t.shape()
                )));
            }
        }
        for (name, p) in &mut self.params {
            p.value = (*by_name[name.as_str()]).clone();
        }
        Ok(())
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<(String, Var)>,
}

impl Bound {
    /// Handle for `name`. Panics if the store had no such parameter, which
    /// is a wiring bug rather than a runtime condition.
    pub fn var(&self, name: &str) -> Var {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("parameter {name:?} is not bound"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// Convolution weight `out×in×k×k` drawn from `U(-1/√fan_in, 1/√fan_in)`.
pub fn conv_weight(out_ch: usize, in_ch: usize, k: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / ((in_ch * k * k) as f64).sqrt();
    Tensor::uniform(&[out_ch, in_ch, k, k], -bound, bound, rng)
}

pub fn conv_bias(out_ch: usize, in_ch: usize, k: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / ((in_ch * k * k) as f64).sqrt();
    Tensor::uniform(&[out_ch], -bound, bound, rng)
}

/// Identity 1×1 convolution weight.
pub fn identity_1x1(ch: usize) -> Tensor {
    Tensor::from_fn(&[ch, ch, 1, 1], |i| if i / ch == i % ch { 1.0 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(p: f64, g: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(p)).unwrap();
        s.params[0].1.grad = Some(Tensor::scalar(g));
        s
    }

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[1])).unwrap();
        assert!(s.insert("w", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn positive_gradient_decreases_parameter() {
        let mut s = scalar_store(1.0, 1.0);
        s.adamw_step(&AdamW {
            lr: 0.1,
            ..AdamW::default()
        });
        assert!(s.value("p").unwrap().item() < 1.0);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut s = scalar_store(1.0, 0.0);
        s.adamw_step(&AdamW {
            lr: 0.1,
            ..AdamW::default()
        });
        assert!((s.value("p").unwrap().item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_is_skipped() {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(1.0)).unwrap();
        s.adamw_step(&AdamW::default());
        assert_eq!(s.value("p").unwrap().item(), 1.0);
        assert_eq!(s.params[0].1.steps, 0);
    }

    /// Scalar reference of the update rule, written without the store.
    fn reference_adamw(p0: f64, steps: usize, lr: f64, grad: impl Fn(f64) -> f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        for t in 1..=steps {
            let g = grad(p);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            p -= lr * mh / (vh.sqrt() + eps);
        }
        p
    }

    #[test]
    fn ten_steps_on_quadratic_approach_minimum() {
        let grad = |p: f64| 2.0 * (p - 2.0);
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(0.0)).unwrap();
        let opt = AdamW {
            lr: 0.1,
            ..AdamW::default()
        };
        for _ in 0..10 {
            let p = s.value("p").unwrap().item();
            s.params[0].1.grad = Some(Tensor::scalar(grad(p)));
            s.adamw_step(&opt);
        }
        let p = s.value("p").unwrap().item();
        assert!((p - 2.0).abs() < 2.0);
        let r = reference_adamw(0.0, 10, 0.1, grad);
        assert!((p - r).abs() < 1e-12, "{p} vs {r}");
    }

    #[test]
    fn weight_decay_is_decoupled() {
        // grad 0: only the decay term moves the parameter.
        let mut s = scalar_store(2.0, 0.0);
        s.adamw_step(&AdamW {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamW::default()
        });
        assert!((s.value("p").unwrap().item() - 1.9).abs() < 1e-12);
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[2, 2])).unwrap();
        let err = s
            .load_records(&[("w".into(), Tensor::zeros(&[4]))])
            .unwrap_err()
            .to_string();
        assert!(err.contains("[2, 2]") && err.contains("[4]"), "{err}");
    }

    #[test]
    fn identity_weight_is_diagonal() {
        let w = identity_1x1(3);
        assert_eq!(w.data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }
}
