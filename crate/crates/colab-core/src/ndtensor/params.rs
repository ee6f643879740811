use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

/// Named parameter tensors with deterministic iteration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NetworkParams {
    map: BTreeMap<String, Tensor>,
}

impl NetworkParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Deep copy. The copy shares nothing with the original.
    pub fn clone_params(&self) -> Self {
        self.clone()
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        for (name, t) in &self.map {
            t.check_finite(&format!("{what}.{name}"))?;
        }
        Ok(())
    }
}

/// One SGD step with classical momentum:
/// v <- momentum * v + g, p <- p - lr * v.
///
/// Parameters absent from `grads` are left untouched, velocity included.
/// Velocity slots are created lazily as zeros.
pub fn sgd_step(
    params: &mut NetworkParams,
    grads: &GradMap,
    lr: f64,
    momentum: f64,
    velocity: &mut NetworkParams,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter {name:?}")))?;
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "sgd_step",
                format!("{name}: param {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
        g.check_finite(&format!("gradient of {name}"))?;
        if velocity.get(name).is_none() {
            velocity.insert(name.clone(), Tensor::zeros(p.shape().to_vec()));
        }
        let v = velocity.get_mut(name).unwrap();
        for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = momentum * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}
