use std::collections::BTreeMap;

use crate::data::Container;
use crate::error::{Error, Result};
use crate::rng::{normal_vec, stream_rng};
use crate::tensor::{Real, Tensor};

/// Named weight collection. Names are unique and sorted, which fixes the
/// serialization order.
#[derive(Clone, PartialEq, Debug, Default)]
pub struct ParameterSet<T = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParameterSet<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Fails with a listing of every name or shape that differs from `other`.
    pub fn check_compatible<U: Real>(&self, other: &ParameterSet<U>) -> Result<()> {
        let mut diffs = Vec::new();
        for (name, t) in &self.tensors {
            match other.get(name) {
                None => diffs.push(format!("{name}: missing")),
                Some(o) if o.shape() != t.shape() => diffs.push(format!("{name}: {:?} vs {:?}", t.shape(), o.shape())),
                _ => {}
            }
        }
        for name in other.names() {
            if !self.tensors.contains_key(name) {
                diffs.push(format!("{name}: unexpected"));
            }
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::Incompatible(diffs.join("; ")))
        }
    }
}

impl ParameterSet<f32> {
    pub fn to_entries(&self, prefix: &str) -> Vec<(String, Tensor<f32>)> {
        self.tensors.iter().map(|(k, v)| (format!("{prefix}{k}"), v.clone())).collect()
    }

    /// Collects (and strips) every container entry under `prefix`.
    pub fn from_container(c: &Container, prefix: &str) -> Self {
        let tensors = c.entries.iter().filter_map(|(k, v)| k.strip_prefix(prefix).map(|rest| (rest.to_string(), v.clone()))).collect();
        Self { tensors }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Init {
    /// Normal with standard deviation `1/√fan_in`.
    FanIn(usize),
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn name_stream(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub(crate) fn materialize(specs: &[ParamSpec], seed: u64) -> ParameterSet<f32> {
    let mut set = ParameterSet::new();
    for spec in specs {
        let len: usize = spec.shape.iter().product();
        let data = match spec.init {
            Init::Zeros => vec![0.0; len],
            Init::Ones => vec![1.0; len],
            Init::FanIn(fan_in) => {
                let std = (1.0 / fan_in as f64).sqrt() as f32;
                let mut rng = stream_rng(seed, name_stream(&spec.name));
                normal_vec::<f32>(&mut rng, len).into_iter().map(|v| v * std).collect()
            }
        };
        set.insert(spec.name.clone(), Tensor::from_vec(&spec.shape, data).expect("spec shape"));
    }
    set
}
