use indexmap::IndexMap;

use super::tape::{Gradients, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Param {
    fn new(value: Tensor) -> Self {
        let n = value.numel();
        Param { value, grad: None, m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn first_moment(&self) -> &[f32] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f32] {
        &self.v
    }
}

/// Named parameters in insertion order, with Adam state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
    step: u64,
}

/// Tape handles for the parameters of one store, keyed like the store.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Parameter(format!("parameter `{name}` is not bound")))
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Parameter(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, Param::new(value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Parameter(format!("unknown parameter `{name}`")))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Parameter(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Puts every parameter on the tape, trainable or frozen.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, p)| {
                let v = if trainable { tape.param(p.value.clone()) } else { tape.constant(p.value.clone()) };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Moves gradients for bound parameters out of `grads`.
    /// Parameters the loss does not depend on get a zero gradient.
    pub fn collect_grads(&mut self, bound: &Bound, grads: &mut Gradients) -> Result<()> {
        for (name, p) in self.params.iter_mut() {
            let var = bound.get(name)?;
            let g = grads.take(var).unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()));
            p.grad = Some(g);
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(|p| p.grad = None);
    }

    /// One Adam update; consumes the stored gradients.
    pub fn adam_step(&mut self, lr: f64) -> Result<()> {
        if let Some((name, _)) = self.params.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(Error::State(format!("parameter `{name}` has no gradient")));
        }
        for (name, p) in &self.params {
            let g = p.grad.as_ref().expect("checked above");
            if g.shape() != p.value.shape() {
                return Err(Error::State(format!(
                    "gradient for `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.value.shape()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for p in self.params.values_mut() {
            let g = p.grad.take().expect("checked above");
            for (((x, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(p.m.iter_mut())
                .zip(p.v.iter_mut())
            {
                let g = g as f64;
                let mn = ADAM_BETA1 * *m as f64 + (1.0 - ADAM_BETA1) * g;
                let vn = ADAM_BETA2 * *v as f64 + (1.0 - ADAM_BETA2) * g * g;
                *m = mn as f32;
                *v = vn as f32;
                let update = lr * (mn / bc1) / ((vn / bc2).sqrt() + ADAM_EPS);
                if update != 0.0 {
                    *x = (*x as f64 - update) as f32;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f32) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::scalar(x)).unwrap();
        s
    }

    fn set_grad(s: &mut ParamStore, g: f32) {
        s.params.get_mut("x").unwrap().grad = Some(Tensor::scalar(g));
    }

    #[test]
    fn missing_gradient_is_state_error() {
        let mut s = scalar_store(1.0);
        assert!(matches!(s.adam_step(0.1), Err(Error::State(_))));
        assert_eq!(s.step_count(), 0);
        assert_eq!(s.value("x").unwrap().item(), 1.0);
    }

    #[test]
    fn zero_gradient_leaves_parameters_and_decays_moments() {
        let mut s = scalar_store(0.7);
        set_grad(&mut s, 1.0);
        s.adam_step(0.01).unwrap();
        let before = s.value("x").unwrap().item();
        let (m0, v0) = (s.get("x").unwrap().m[0], s.get("x").unwrap().v[0]);
        set_grad(&mut s, 0.0);
        s.adam_step(0.01).unwrap();
        let p = s.get("x").unwrap();
        assert!(p.m[0] < m0 && p.v[0] < v0);
        assert_eq!(s.step_count(), 2);
        // nonzero momentum still moves x; a fresh store with zero grads does not
        let _ = before;
        let mut fresh = scalar_store(0.7);
        set_grad(&mut fresh, 0.0);
        fresh.adam_step(0.01).unwrap();
        assert_eq!(fresh.value("x").unwrap().item(), 0.7);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g in [3.0f32, -0.25] {
            let mut s = scalar_store(1.0);
            set_grad(&mut s, g);
            s.adam_step(0.01).unwrap();
            let delta = s.value("x").unwrap().item() as f64 - 1.0;
            assert!((delta + 0.01 * g.signum() as f64).abs() < 1e-6, "delta {delta}");
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut s = scalar_store(1.0);
        let mut hit = None;
        for i in 0..5000 {
            let x = s.value("x").unwrap().item();
            if (x as f64).powi(2) < 1e-3 {
                hit = Some(i);
                break;
            }
            set_grad(&mut s, 2.0 * x);
            s.adam_step(0.01).unwrap();
        }
        assert!(hit.is_some());
    }

    #[test]
    fn moments_match_parameter_shapes() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros([2, 3, 3, 3])).unwrap();
        let p = s.get("w").unwrap();
        assert_eq!(p.first_moment().len(), 54);
        assert_eq!(p.second_moment().len(), 54);
        assert!(s.insert("w", Tensor::zeros([1])).is_err());
    }
}
