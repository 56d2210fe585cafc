use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::{derive_seed, sha256_hex, Rng};

/// Shape and initialisation scale of one trainable tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: [usize; 4],
    /// Effective fan-in; zero marks a bias (initialised to zero).
    pub fan_in: usize,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Named trainable tensors plus the fingerprint of the architecture they
/// belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore {
    tensors: BTreeMap<String, Tensor>,
    fingerprint: String,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    let digest = sha256_hex(name.as_bytes());
    let salt = u64::from_str_radix(&digest[..16], 16).expect("hex digest");
    derive_seed(seed, salt)
}

impl ParameterStore {
    pub fn new(fingerprint: impl Into<String>) -> Self {
        Self {
            tensors: BTreeMap::new(),
            fingerprint: fingerprint.into(),
        }
    }

    /// Fan-in scaled uniform weights in `±1/√fan_in`, zero biases.
    ///
    /// Each tensor draws from a seed derived from its name, so layers shared
    /// between variants start from identical values.
    pub fn initialize(specs: &[ParamSpec], fingerprint: &str, seed: u64) -> Self {
        let mut store = Self::new(fingerprint);
        for spec in specs {
            let tensor = if spec.fan_in == 0 {
                Tensor::zeros(spec.shape)
            } else {
                let bound = 1.0 / (spec.fan_in as f64).sqrt();
                let mut rng = Rng::seed(name_seed(seed, &spec.name));
                Tensor::from_fn(spec.shape, |_| rng.uniform(-bound, bound))
            };
            store.tensors.insert(spec.name.clone(), tensor);
        }
        store
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
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

    /// Sum of element counts of all trainable tensors.
    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn content_hash(&self) -> String {
        let mut bytes = Vec::new();
        for (name, t) in &self.tensors {
            bytes.extend_from_slice(name.as_bytes());
            for d in t.shape() {
                bytes.extend_from_slice(&(d as u64).to_le_bytes());
            }
            bytes.extend_from_slice(&t.to_le_bytes());
        }
        sha256_hex(&bytes)
    }

    /// Checks that the store holds exactly `specs` with matching shapes.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        if specs.len() != self.tensors.len() {
            return Err(Error::Config(format!(
                "store has {} tensors, architecture needs {}",
                self.tensors.len(),
                specs.len()
            )));
        }
        for spec in specs {
            let t = self.get(&spec.name)?;
            if t.shape() != spec.shape {
                return Err(Error::Config(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(())
    }
}

/// Total element count of a spec list.
pub fn param_count(store: &ParameterStore) -> usize {
    store.param_count()
}
