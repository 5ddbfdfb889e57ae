use std::collections::BTreeMap;

use crate::tensor::Tensor;

use super::GraphError;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Named parameters, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Ascend,
    Descend,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a trainable parameter. Panics on a duplicate name.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        let prev = self.params.insert(name.clone(), Param { value, trainable: true });
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn value(&self, name: &str) -> &Tensor {
        &self.params[name].value
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.params.remove(name)
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

    pub fn set_trainable(&mut self, name: &str, trainable: bool) {
        if let Some(p) = self.params.get_mut(name) {
            p.trainable = trainable;
        }
    }

    /// Sets every parameter's flag from a predicate on its name.
    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, p) in self.params.iter_mut() {
            p.trainable = pred(name);
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Order-sensitive fingerprint over names and bit patterns.
    pub fn bit_hash(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (name, p) in &self.params {
            name.hash(&mut h);
            p.value.bit_hash().hash(&mut h);
        }
        h.finish()
    }
}

/// One plain gradient step: `p <- p +/- rate * g` for trainable parameters.
///
/// Frozen parameters are left untouched even if a gradient is supplied.
pub fn sgd_step(
    params: &mut ParamSet,
    grads: &BTreeMap<String, Tensor>,
    rate: f64,
    direction: Direction,
) -> Result<(), GraphError> {
    if rate < 0.0 || !rate.is_finite() {
        return Err(GraphError::InvalidRate(rate));
    }
    let sign = match direction {
        Direction::Ascend => 1.0,
        Direction::Descend => -1.0,
    };
    for (name, g) in grads {
        let Some(p) = params.params.get(name) else {
            return Err(GraphError::UnknownParam(name.clone()));
        };
        if !p.value.same_dims(g) {
            return Err(GraphError::ShapeMismatch {
                node: 0,
                op: "sgd",
                detail: format!("{name}: param {:?} vs grad {:?}", p.value.dims(), g.dims()),
            });
        }
    }
    if rate == 0.0 {
        return Ok(());
    }
    for (name, g) in grads {
        let p = params.params.get_mut(name).expect("checked above");
        if !p.trainable {
            continue;
        }
        for (v, d) in p.value.data_mut().iter_mut().zip(g.data()) {
            *v += sign * rate * d;
        }
    }
    Ok(())
}
