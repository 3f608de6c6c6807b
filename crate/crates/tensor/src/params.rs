//! Named parameter storage, per-pass binding to graph leaves, and Adam.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use crate::tensor::Tensor;
use crate::var::Var;

/// Parameters keyed by hierarchical dotted names (`enc.conv0.weight`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        let prev = self.params.insert(name.clone(), value);
        assert!(prev.is_none(), "parameter {name} registered twice");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Copies every parameter under `prefix` from `other`, re-rooted at
    /// `new_prefix`.
    pub fn import_prefixed(&mut self, other: &ParamStore, prefix: &str, new_prefix: &str) {
        for (k, v) in other.iter() {
            if let Some(rest) = k.strip_prefix(prefix) {
                self.params.insert(format!("{new_prefix}{rest}"), v.clone());
            }
        }
    }

    /// Parameters whose names start with `prefix`, prefix stripped.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        out.import_prefixed(self, prefix, "");
        out
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.params
    }

    pub fn from_map(params: BTreeMap<String, Tensor>) -> Self {
        Self { params }
    }
}

/// Binds stored parameters to graph variables for one forward/backward pass.
///
/// Parameters selected by the trainable predicate become gradient-tracking
/// leaves; all others enter the graph as constants.
pub struct Binder<'a> {
    store: &'a ParamStore,
    trainable: Box<dyn Fn(&str) -> bool + 'a>,
    bound: RefCell<HashMap<String, Var>>,
}

impl<'a> Binder<'a> {
    /// Every parameter trainable.
    pub fn train(store: &'a ParamStore) -> Self {
        Self::with_filter(store, |_| true)
    }

    /// No parameter trainable; forward passes build no graph.
    pub fn eval(store: &'a ParamStore) -> Self {
        Self::with_filter(store, |_| false)
    }

    pub fn with_filter(store: &'a ParamStore, trainable: impl Fn(&str) -> bool + 'a) -> Self {
        Self {
            store,
            trainable: Box::new(trainable),
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    pub fn param(&self, name: &str) -> Var {
        if let Some(v) = self.bound.borrow().get(name) {
            return v.clone();
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .clone();
        let var = if (self.trainable)(name) {
            Var::leaf(value)
        } else {
            Var::constant(value)
        };
        self.bound.borrow_mut().insert(name.to_string(), var.clone());
        var
    }

    /// Gradients of every bound trainable parameter that received one.
    pub fn grads(&self) -> BTreeMap<String, Tensor> {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(k, v)| v.grad().map(|g| (k.clone(), g)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One bias-corrected Adam update of the parameters named in `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = store
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (((pv, mv), vv), &gv) in pd.iter_mut().zip(md).zip(vd).zip(g.data()) {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mh = *mv / bc1;
                let vh = *vv / bc2;
                *pv -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }

    /// Moment buffers flattened into a store (`m.<name>`, `v.<name>`) plus
    /// the step count, for checkpointing.
    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        for (k, t) in &self.m {
            s.insert(format!("m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            s.insert(format!("v.{k}"), t.clone());
        }
        s.insert("step", Tensor::scalar(self.step as f64));
        s
    }

    pub fn from_store(config: AdamConfig, s: &ParamStore) -> Self {
        let mut opt = Adam::new(config);
        for (k, t) in s.iter() {
            if let Some(n) = k.strip_prefix("m.") {
                opt.m.insert(n.to_string(), t.clone());
            } else if let Some(n) = k.strip_prefix("v.") {
                opt.v.insert(n.to_string(), t.clone());
            } else if k == "step" {
                opt.step = t.item() as u64;
            }
        }
        opt
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binder_tracks_only_trainable() {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::from_vec(&[2], vec![1.0, 2.0]));
        s.insert("b.w", Tensor::from_vec(&[2], vec![3.0, 4.0]));
        let b = Binder::with_filter(&s, |n| n.starts_with("a."));
        let y = b.param("a.w").mul(&b.param("b.w")).sum();
        y.backward();
        let g = b.grads();
        assert_eq!(g.len(), 1);
        assert_eq!(g["a.w"].data(), &[3.0, 4.0]);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::from_vec(&[3], vec![3.0, -2.0, 0.5]));
        let mut opt = Adam::new(AdamConfig {
            lr: 0.05,
            beta1: 0.9,
            ..Default::default()
        });
        for _ in 0..500 {
            let g = {
                let b = Binder::train(&s);
                b.param("x").square().sum().backward();
                b.grads()
            };
            opt.step(&mut s, &g);
        }
        assert!(s.get("x").unwrap().max_abs() < 1e-2);
        let restored = Adam::from_store(opt.config, &opt.to_store());
        assert_eq!(restored, opt);
    }
}
