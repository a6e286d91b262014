//! Named trainable parameters and their optimizers.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Slot {
    name: String,
    value: Tensor,
    grad: Tensor,
    first_moment: Tensor,
    second_moment: Tensor,
}

/// Named trainable tensors with accumulated gradients and Adam moments.
#[derive(Clone, Debug, Default)]
pub struct ParameterSet {
    slots: Vec<Slot>,
    by_name: HashMap<String, usize>,
    steps: u64,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        let zeros = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), self.slots.len());
        self.slots.push(Slot {
            name,
            grad: zeros.clone(),
            first_moment: zeros.clone(),
            second_moment: zeros,
            value,
        });
        Ok(ParamId(self.slots.len() - 1))
    }

    /// Gaussian initialization with standard deviation `std`.
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.slots[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|s| (s.name.as_str(), &s.value))
    }

    pub fn values(&self) -> Vec<Tensor> {
        self.slots.iter().map(|s| s.value.clone()).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.iter().map(|s| s.value.numel()).sum()
    }

    /// Overwrites the value of `name`, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = *self
            .by_name
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named `{name}`")))?;
        if self.slots[i].value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set-parameter",
                detail: format!(
                    "`{name}` is {:?}, got {:?}",
                    self.slots[i].value.shape(),
                    value.shape()
                ),
            });
        }
        self.slots[i].value = value;
        Ok(())
    }

    /// Places every parameter on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        Bound(
            self.slots
                .iter()
                .map(|s| tape.leaf(s.value.clone(), requires_grad))
                .collect(),
        )
    }

    /// Adds the tape gradients of a bound set into the stored gradients.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound) {
        for (slot, &v) in self.slots.iter_mut().zip(&bound.0) {
            if let Some(g) = tape.grad(v) {
                slot.grad.add_assign(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for s in &mut self.slots {
            s.grad.data_mut().fill(0.0);
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

/// Tape handles for every parameter of a [`ParameterSet`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl From<Vec<Var>> for Bound {
    fn from(v: Vec<Var>) -> Self {
        Bound(v)
    }
}

impl From<&[Var]> for Bound {
    fn from(v: &[Var]) -> Self {
        Bound(v.to_vec())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Applies one update using the stored gradients. Adam uses bias-corrected
/// moments with the constants above.
pub fn optimizer_step(params: &mut ParameterSet, lr: f64, kind: OptimizerKind) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    params.steps += 1;
    let t = params.steps as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for s in &mut params.slots {
        match kind {
            OptimizerKind::Sgd => {
                for (w, g) in s.value.data_mut().iter_mut().zip(s.grad.data()) {
                    *w -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                let (m, v) = (s.first_moment.data_mut(), s.second_moment.data_mut());
                for (((w, g), m), v) in s
                    .value
                    .data_mut()
                    .iter_mut()
                    .zip(s.grad.data())
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64, g: f64) -> (ParameterSet, ParamId) {
        let mut p = ParameterSet::new();
        let id = p.add("w", Tensor::scalar(w)).unwrap();
        p.slots[0].grad = Tensor::scalar(g);
        (p, id)
    }

    #[test]
    fn sgd_step() {
        let (mut p, id) = single(1.0, 2.0);
        optimizer_step(&mut p, 0.1, OptimizerKind::Sgd).unwrap();
        assert!((p.get(id).item().unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_leaves_params() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let (mut p, id) = single(1.5, 0.0);
            optimizer_step(&mut p, 0.1, kind).unwrap();
            assert_eq!(p.get(id).item().unwrap(), 1.5);
        }
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let (mut p, id) = single(0.0, 1.0);
        optimizer_step(&mut p, 0.1, OptimizerKind::Adam).unwrap();
        let expected = -0.1 * 1.0 / (1.0 + ADAM_EPS);
        assert!((p.get(id).item().unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_lr_and_duplicate_names() {
        let (mut p, _) = single(0.0, 1.0);
        assert!(optimizer_step(&mut p, 0.0, OptimizerKind::Sgd).is_err());
        assert!(optimizer_step(&mut p, -1.0, OptimizerKind::Adam).is_err());
        assert!(matches!(
            p.add("w", Tensor::scalar(0.0)),
            Err(Error::DuplicateParameter(_))
        ));
    }

    #[test]
    fn bind_and_collect() {
        let mut p = ParameterSet::new();
        let id = p.add("x", Tensor::row(&[1.0, 2.0])).unwrap();
        let mut tape = Tape::new();
        let b = p.bind(&mut tape, true);
        let sq = tape.mul(b.var(id), b.var(id)).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        p.accumulate_grads(&tape, &b);
        p.accumulate_grads(&tape, &b);
        assert_eq!(p.grad(id).data(), &[4.0, 8.0]);
        p.zero_grad();
        assert_eq!(p.grad(id).data(), &[0.0, 0.0]);
    }
}
