use std::collections::BTreeMap;

use facedyn_autograd::{Float, Graph, Var};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Named parameter arrays in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<ArrayD<T>>,
    index: BTreeMap<String, usize>,
}

impl<T> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: BTreeMap::new(),
        }
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<T>) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value.as_standard_layout().into_owned());
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[ArrayD<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [ArrayD<T>] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<T>> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<T>> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(ArrayD::len).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| U::cst(x.to_f64())))
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Errors unless names and shapes equal `expected` exactly.
    pub fn check_shapes(&self, expected: &[(String, Vec<usize>)]) -> Result<()> {
        if self.len() != expected.len() {
            return Err(Error::Config(format!(
                "parameter count mismatch: expected {} arrays, found {}",
                expected.len(),
                self.len()
            )));
        }
        for (name, shape) in expected {
            match self.get(name) {
                None => return Err(Error::Config(format!("missing parameter {name}"))),
                Some(v) if v.shape() != shape.as_slice() => {
                    return Err(Error::Config(format!(
                        "parameter {name}: expected shape {shape:?}, found {:?}",
                        v.shape()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Registers every array as a differentiable leaf.
    pub fn bind<'g>(&self, g: &'g Graph<T>) -> Bound<'g, T> {
        Bound {
            vars: self.values.iter().map(|v| g.leaf(v.clone())).collect(),
            index: self.index.clone(),
        }
    }

    /// Registers every array as a constant (frozen parameters).
    pub fn bind_frozen<'g>(&self, g: &'g Graph<T>) -> Bound<'g, T> {
        Bound {
            vars: self.values.iter().map(|v| g.constant(v.clone())).collect(),
            index: self.index.clone(),
        }
    }

    /// Wraps externally created variables (one per parameter, in order).
    pub fn bind_vars<'g>(&self, vars: Vec<Var<'g, T>>) -> Bound<'g, T> {
        assert_eq!(vars.len(), self.len());
        Bound {
            vars,
            index: self.index.clone(),
        }
    }
}

/// Parameters of one store placed on a graph.
#[derive(Debug, Clone)]
pub struct Bound<'g, T: Float> {
    vars: Vec<Var<'g, T>>,
    index: BTreeMap<String, usize>,
}

impl<'g, T: Float> Bound<'g, T> {
    pub fn get(&self, name: &str) -> Var<'g, T> {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("parameter {name} not bound"),
        }
    }

    pub fn vars(&self) -> &[Var<'g, T>] {
        &self.vars
    }
}

/// Seeded parameter registration used while building a model.
#[derive(Debug)]
pub struct Builder {
    rng: ChaCha8Rng,
    store: ParamStore<f64>,
}

impl Builder {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            store: ParamStore::new(),
        }
    }

    pub fn uniform(&mut self, name: String, shape: &[usize], bound: f64) {
        let rng = &mut self.rng;
        let v = ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-bound..=bound));
        self.store.insert(name, v);
    }

    pub fn normal(&mut self, name: String, shape: &[usize], std: f64) {
        let rng = &mut self.rng;
        let v = ArrayD::from_shape_simple_fn(IxDyn(shape), || {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        });
        self.store.insert(name, v);
    }

    pub fn fill(&mut self, name: String, shape: &[usize], value: f64) {
        self.store
            .insert(name, ArrayD::from_elem(IxDyn(shape), value));
    }

    pub fn finish(self) -> ParamStore<f64> {
        self.store
    }
}
