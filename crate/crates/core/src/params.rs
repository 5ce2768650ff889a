//! Named parameter storage with per-parameter Adam state.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("unknown parameter `{name}`")]
    UnknownParam { name: String },
    #[error("duplicate parameter `{name}`")]
    DuplicateParam { name: String },
    #[error("parameter `{name}`: shape {expected:?} does not match {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("parameter name sets differ: missing {missing:?}, extra {extra:?}")]
    NameSetMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },
    #[error("polyak factor {tau} outside [0, 1]")]
    TauOutOfRange { tau: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub adam_m: Tensor,
    pub adam_v: Tensor,
    pub adam_t: u64,
}

impl Param {
    fn new(value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Self {
            value,
            adam_m: Tensor::zeros(shape.clone()),
            adam_v: Tensor::zeros(shape),
            adam_t: 0,
        }
    }
}

/// Named map of tensors plus optimiser state. Iteration order is the sorted
/// name order, so walks over a store are deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<(), ParamError> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(ParamError::DuplicateParam { name });
        }
        self.entries.insert(name, Param::new(value));
        Ok(())
    }

    /// Restores a parameter together with saved optimiser state.
    pub fn insert_with_state(
        &mut self,
        name: impl Into<String>,
        param: Param,
    ) -> Result<(), ParamError> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(ParamError::DuplicateParam { name });
        }
        self.entries.insert(name, param);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|p| &mut p.value)
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar entries across all parameters.
    pub fn entry_count(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }
}

/// Loads every parameter of a store onto a tape.
///
/// `Trainable` inserts named leaves (gradients reported); `Frozen` inserts
/// constants. Names on the tape are `prefix/name` so several stores can share
/// a tape without collisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamMode {
    Trainable,
    Frozen,
}

pub struct StoreNodes {
    prefix: String,
    map: BTreeMap<String, NodeId>,
}

impl StoreNodes {
    pub fn get(&self, name: &str) -> NodeId {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("no `{name}` under prefix `{}`", self.prefix))
    }
}

pub fn load_store(tape: &mut Tape, store: &ParamStore, prefix: &str, mode: ParamMode) -> StoreNodes {
    let mut map = BTreeMap::new();
    for (name, param) in store.iter() {
        let id = match mode {
            ParamMode::Trainable => tape.param(format!("{prefix}/{name}"), param.value.clone()),
            ParamMode::Frozen => tape.constant(param.value.clone()),
        };
        map.insert(name.to_string(), id);
    }
    StoreNodes {
        prefix: prefix.to_string(),
        map,
    }
}

/// Adam hyperparameters; defaults follow the (0.9, 0.999, 1e-8) convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam step with bias correction, applied in place.
///
/// Only parameters named in `grads` are touched; each touched parameter's
/// step counter increments exactly once.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    hyper: &AdamHyper,
) -> Result<(), ParamError> {
    for (name, grad) in grads {
        let param = store
            .entries
            .get_mut(name)
            .ok_or_else(|| ParamError::UnknownParam { name: name.clone() })?;
        if param.value.shape() != grad.shape() {
            return Err(ParamError::ShapeMismatch {
                name: name.clone(),
                expected: param.value.shape().to_vec(),
                got: grad.shape().to_vec(),
            });
        }
        param.adam_t += 1;
        let t = param.adam_t as i32;
        let bc1 = 1.0 - hyper.beta1.powi(t);
        let bc2 = 1.0 - hyper.beta2.powi(t);
        let value = param.value.data_mut();
        let m = param.adam_m.data_mut();
        let v = param.adam_v.data_mut();
        for i in 0..value.len() {
            let g = grad.data()[i];
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            value[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

/// `target <- (1 - tau) * target + tau * source`, elementwise over every
/// parameter. Name sets and shapes must match exactly.
pub fn polyak_update(
    target: &mut ParamStore,
    source: &ParamStore,
    tau: f64,
) -> Result<(), ParamError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(ParamError::TauOutOfRange { tau });
    }
    let missing: Vec<String> = source
        .names()
        .filter(|n| !target.entries.contains_key(*n))
        .map(String::from)
        .collect();
    let extra: Vec<String> = target
        .names()
        .filter(|n| source.entries.get(*n).is_none())
        .map(String::from)
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(ParamError::NameSetMismatch { missing, extra });
    }
    if tau == 0.0 {
        return Ok(());
    }
    for (name, tparam) in target.entries.iter_mut() {
        let sparam = &source.entries[name];
        if tparam.value.shape() != sparam.value.shape() {
            return Err(ParamError::ShapeMismatch {
                name: name.clone(),
                expected: tparam.value.shape().to_vec(),
                got: sparam.value.shape().to_vec(),
            });
        }
        if tau == 1.0 {
            tparam.value = sparam.value.clone();
            continue;
        }
        for (t, &s) in tparam.value.data_mut().iter_mut().zip(sparam.value.data()) {
            *t = (1.0 - tau) * *t + tau * s;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(value: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::vector(vec![value])).unwrap();
        s
    }

    #[test]
    fn adam_first_step_is_roughly_lr_times_sign() {
        let mut store = scalar_store(1.0);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::vector(vec![4.0]));
        adam_step(&mut store, &grads, &AdamHyper::with_lr(0.01)).unwrap();
        let p = store.get("p").unwrap().data()[0];
        assert!((p - (1.0 - 0.01)).abs() < 1e-8, "p = {p}");
        assert_eq!(store.param("p").unwrap().adam_t, 1);
    }

    #[test]
    fn adam_zero_gradient_leaves_value_but_ticks_counter() {
        let mut store = scalar_store(2.5);
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::vector(vec![0.0]));
        adam_step(&mut store, &grads, &AdamHyper::with_lr(0.01)).unwrap();
        assert_eq!(store.get("p").unwrap().data()[0], 2.5);
        assert_eq!(store.param("p").unwrap().adam_t, 1);
    }

    #[test]
    fn adam_matches_independent_reference_over_three_steps() {
        // Hand-rolled Adam over gradient sequence [1, -1, 1] on a scalar
        // starting at 0.
        let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
        let mut p_ref = 0.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (step, g) in [1.0f64, -1.0, 1.0].into_iter().enumerate() {
            let t = (step + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            p_ref -= lr * m_hat / (v_hat.sqrt() + eps);
        }

        let mut store = scalar_store(0.0);
        for g in [1.0, -1.0, 1.0] {
            let mut grads = BTreeMap::new();
            grads.insert("p".to_string(), Tensor::vector(vec![g]));
            adam_step(&mut store, &grads, &AdamHyper::with_lr(0.01)).unwrap();
        }
        let p = store.get("p").unwrap().data()[0];
        assert!((p - p_ref).abs() < 1e-12, "{p} vs {p_ref}");
    }

    #[test]
    fn adam_rejects_unknown_names() {
        let mut store = scalar_store(0.0);
        let mut grads = BTreeMap::new();
        grads.insert("q".to_string(), Tensor::vector(vec![1.0]));
        let err = adam_step(&mut store, &grads, &AdamHyper::with_lr(0.01)).unwrap_err();
        assert!(matches!(err, ParamError::UnknownParam { .. }));
    }

    #[test]
    fn adam_is_bit_reproducible() {
        let run = || {
            let mut store = scalar_store(0.3);
            for g in [0.7, -0.2, 1.3, 0.0, -0.9] {
                let mut grads = BTreeMap::new();
                grads.insert("p".to_string(), Tensor::vector(vec![g]));
                adam_step(&mut store, &grads, &AdamHyper::with_lr(0.003)).unwrap();
            }
            store.get("p").unwrap().data()[0]
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn polyak_endpoints_and_formula() {
        let mut target = scalar_store(2.0);
        let source = scalar_store(4.0);

        let mut t0 = target.clone();
        polyak_update(&mut t0, &source, 0.0).unwrap();
        assert_eq!(t0.get("p").unwrap().data()[0], 2.0);

        let mut t1 = target.clone();
        polyak_update(&mut t1, &source, 1.0).unwrap();
        assert_eq!(t1.get("p").unwrap().data()[0], 4.0);

        polyak_update(&mut target, &source, 0.01).unwrap();
        assert!((target.get("p").unwrap().data()[0] - 2.02).abs() < 1e-12);
    }

    #[test]
    fn polyak_is_a_contraction_toward_source() {
        let mut target = ParamStore::new();
        target
            .insert("w", Tensor::vector(vec![2.0, -8.0, 0.5]))
            .unwrap();
        let mut source = ParamStore::new();
        source
            .insert("w", Tensor::vector(vec![4.0, 8.0, 0.5]))
            .unwrap();
        let dist = |a: &ParamStore, b: &ParamStore| {
            a.get("w")
                .unwrap()
                .data()
                .iter()
                .zip(b.get("w").unwrap().data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        };
        let before = dist(&target, &source);
        polyak_update(&mut target, &source, 0.25).unwrap();
        let after = dist(&target, &source);
        assert!((after - 0.75 * before).abs() < 1e-12 * before.max(1.0));
    }

    #[test]
    fn polyak_rejects_name_set_mismatch() {
        let mut target = scalar_store(1.0);
        let mut source = scalar_store(1.0);
        source.insert("extra", Tensor::vector(vec![0.0])).unwrap();
        let err = polyak_update(&mut target, &source, 0.5).unwrap_err();
        assert!(matches!(err, ParamError::NameSetMismatch { .. }));
    }

    #[test]
    fn store_iteration_is_sorted() {
        let mut s = ParamStore::new();
        s.insert("zeta", Tensor::scalar(0.0)).unwrap();
        s.insert("alpha", Tensor::scalar(0.0)).unwrap();
        s.insert("mid", Tensor::scalar(0.0)).unwrap();
        let names: Vec<&str> = s.names().collect();
        assert_eq!(names, vec!["alpha", "mid", "zeta"]);
    }
}
