//! Named parameter collections with gradient slots.

use std::collections::BTreeMap;

use crate::autodiff::{Bound, Gradients};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
struct Param {
    value: Tensor,
    grad: Option<Tensor>,
}

/// Ordered map from parameter id to tensor, each with a gradient slot.
///
/// Iteration order is the lexicographic order of ids, which makes every
/// traversal (optimizer, checkpoint) deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter; ids must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, Param { value, grad: None });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|p| p.grad.as_ref())
    }

    pub fn set_grad(&mut self, name: &str, grad: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        p.value.check_same_shape(&grad, "set_grad")?;
        p.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(|p| p.grad = None);
    }

    /// Copies the gradients of the bound leaves into the gradient slots.
    /// Parameters the loss does not reach get zero gradient.
    pub fn collect_grads(&mut self, bound: &Bound<'_>, grads: &Gradients) -> Result<()> {
        for (name, var) in bound.iter() {
            self.set_grad(name, grads.get_or_zeros(var))?;
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// A copy of the values with all gradient slots cleared.
    pub fn snapshot(&self) -> ParamSet {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.clone(),
                            grad: None,
                        },
                    )
                })
                .collect(),
        }
    }

    /// `self ← decay·self + (1 − decay)·other`, parameter by parameter.
    pub fn ema_from(&mut self, other: &ParamSet, decay: f64) -> Result<()> {
        for (name, p) in self.params.iter_mut() {
            let src = other.get(name)?;
            p.value.check_same_shape(src, "ema")?;
            p.value
                .data_mut()
                .iter_mut()
                .zip(src.data())
                .for_each(|(a, b)| *a = decay * *a + (1.0 - decay) * b);
        }
        Ok(())
    }

    /// Global L2 norm over all populated gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .filter_map(|p| p.grad.as_ref())
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn ids_are_unique() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::zeros(vec![2])).unwrap();
        assert!(p.insert("w", Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn gradient_shape_must_match() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::zeros(vec![2])).unwrap();
        assert!(p.set_grad("w", Tensor::zeros(vec![3])).is_err());
        assert!(p.set_grad("w", Tensor::zeros(vec![2])).is_ok());
    }

    #[test]
    fn collect_grads_fills_unreached_with_zeros() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::scalar(3.0)).unwrap();
        p.insert("b", Tensor::scalar(1.0)).unwrap();
        let tape = Tape::new();
        let bound = tape.bind(&p);
        let a = bound.get("a").unwrap();
        let loss = a.mul(a).unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        p.collect_grads(&bound, &grads).unwrap();
        assert_eq!(p.grad("a").unwrap().data(), &[6.0]);
        assert_eq!(p.grad("b").unwrap().data(), &[0.0]);
    }
}
