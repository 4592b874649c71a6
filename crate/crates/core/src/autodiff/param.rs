use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::DenseTensor;

/// A named tensor that optimizers may update when `trainable`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub tensor: DenseTensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: DenseTensor) -> Self {
        Self {
            name: name.into(),
            tensor,
            trainable: true,
        }
    }

    pub fn frozen(name: impl Into<String>, tensor: DenseTensor) -> Self {
        Self {
            name: name.into(),
            tensor,
            trainable: false,
        }
    }
}

/// Anything that owns named parameters.
pub trait Parameterized {
    /// Visits every parameter as `(name, tensor, trainable)`.
    fn visit_params(&self, f: &mut dyn FnMut(&str, &DenseTensor, bool));

    /// Mutable visit; shapes must be left unchanged.
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut DenseTensor, bool));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t, _| n += t.len());
        n
    }

    fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t, trainable| {
            if trainable {
                n += t.len()
            }
        });
        n
    }

    fn trainable_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |name, _, trainable| {
            if trainable {
                names.push(name.to_string())
            }
        });
        names
    }
}

/// Flat parameter collection keyed by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, p: Parameter) {
        self.params.insert(p.name.clone(), p);
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }
}

impl Parameterized for ParamStore {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &DenseTensor, bool)) {
        for p in self.params.values() {
            f(&p.name, &p.tensor, p.trainable);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut DenseTensor, bool)) {
        for p in self.params.values_mut() {
            f(&p.name, &mut p.tensor, p.trainable);
        }
    }
}
