use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::network::{GridConfig, Model, ParameterStore};

use super::{AdamState, RunState, TrainConfig};

/// Everything needed to continue a run: weights, optimizer moments, counters
/// and RNG position, plus the configurations that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointBundle {
    pub grid: GridConfig,
    pub train: TrainConfig,
    pub params: ParameterStore,
    pub adam: AdamState,
    pub state: RunState,
    /// Fingerprint of `train`, for provenance.
    pub train_fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    grid_fingerprint: String,
    train_fingerprint: String,
    adam_steps: u64,
}

const PARAM: &str = "param/";
const ADAM_M: &str = "adam_m/";
const ADAM_V: &str = "adam_v/";

impl CheckpointBundle {
    /// A bundle at epoch 0 with zeroed optimizer moments.
    pub fn fresh(grid: GridConfig, train: TrainConfig, params: ParameterStore) -> Self {
        let adam = AdamState::new(&params);
        let state = RunState::start(&train);
        let train_fingerprint = train.fingerprint();
        Self {
            grid,
            train,
            params,
            adam,
            state,
            train_fingerprint,
        }
    }

    /// Refuses bundles built for a different architecture.
    pub fn expect_grid(&self, grid: &GridConfig) -> Result<()> {
        let expected = grid.fingerprint();
        if self.params.fingerprint() != expected {
            return Err(Error::Fingerprint {
                expected,
                found: self.params.fingerprint().to_string(),
            });
        }
        Ok(())
    }

    pub fn model(&self) -> Result<Model> {
        let model = Model::new(self.grid.clone())?;
        model.check_store(&self.params)?;
        Ok(model)
    }
}

/// Writes `bundle` as one archive.
pub fn save_checkpoint(bundle: &CheckpointBundle, path: &Path) -> Result<()> {
    let mut a = Archive::default();
    a.texts.insert(
        "grid.toml".into(),
        toml::to_string(&bundle.grid).map_err(|e| Error::Format(e.to_string()))?,
    );
    a.texts.insert(
        "train.json".into(),
        serde_json::to_string_pretty(&bundle.train)?,
    );
    a.texts.insert(
        "state.json".into(),
        serde_json::to_string_pretty(&bundle.state)?,
    );
    let header = Header {
        grid_fingerprint: bundle.params.fingerprint().to_string(),
        train_fingerprint: bundle.train_fingerprint.clone(),
        adam_steps: bundle.adam.t,
    };
    a.texts
        .insert("header.json".into(), serde_json::to_string_pretty(&header)?);
    for (k, t) in bundle.params.iter() {
        a.tensors.insert(format!("{PARAM}{k}"), t.clone());
    }
    for (k, t) in &bundle.adam.m {
        a.tensors.insert(format!("{ADAM_M}{k}"), t.clone());
    }
    for (k, t) in &bundle.adam.v {
        a.tensors.insert(format!("{ADAM_V}{k}"), t.clone());
    }
    a.write(path)
}

/// Reads an archive back and checks it against its own configuration.
pub fn load_checkpoint(path: &Path) -> Result<CheckpointBundle> {
    let a = Archive::read(path)?;
    let grid: GridConfig =
        toml::from_str(a.text("grid.toml")?).map_err(|e| Error::Format(e.to_string()))?;
    let train: TrainConfig = serde_json::from_str(a.text("train.json")?)?;
    let state: RunState = serde_json::from_str(a.text("state.json")?)?;
    let header: Header = serde_json::from_str(a.text("header.json")?)?;
    if header.grid_fingerprint != grid.fingerprint() {
        return Err(Error::Fingerprint {
            expected: grid.fingerprint(),
            found: header.grid_fingerprint,
        });
    }
    let mut params = ParameterStore::new(header.grid_fingerprint);
    for (k, t) in a.tensors_under(PARAM) {
        params.insert(k, t.clone());
    }
    Model::new(grid.clone())?.check_store(&params)?;
    let adam = AdamState {
        m: a.tensors_under(ADAM_M)
            .map(|(k, t)| (k.to_string(), t.clone()))
            .collect(),
        v: a.tensors_under(ADAM_V)
            .map(|(k, t)| (k.to_string(), t.clone()))
            .collect(),
        t: header.adam_steps,
    };
    Ok(CheckpointBundle {
        grid,
        train,
        params,
        adam,
        state,
        train_fingerprint: header.train_fingerprint,
    })
}

/// Loads a checkpoint and insists it matches `grid`.
pub fn load_checkpoint_for(path: &Path, grid: &GridConfig) -> Result<CheckpointBundle> {
    let bundle = load_checkpoint(path)?;
    bundle.expect_grid(grid)?;
    Ok(bundle)
}
