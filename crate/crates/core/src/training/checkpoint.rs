use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use super::Phase;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{read_container, write_container, Container, NamedTensor, ParamStore};

const M_PREFIX: &str = "optim.m.";
const V_PREFIX: &str = "optim.v.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    #[serde(default)]
    pub plan_hash: Option<String>,
    #[serde(default)]
    pub phase: Option<Phase>,
    /// Optimizer steps taken so far in the current phase.
    #[serde(default)]
    pub step: u64,
    #[serde(default)]
    pub epoch: usize,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub container: Container,
}

/// Writes parameters, optional optimizer moments and metadata. The file is
/// written next to `path` and renamed into place.
pub fn save_checkpoint(path: &Path, model: &Model, optim: Option<&AdamState>, meta: &CheckpointMeta) -> Result<()> {
    let precision = model.store.precision();
    let mut tensors: Vec<NamedTensor> = model
        .store
        .iter()
        .map(|(_, name, t)| NamedTensor {
            name: name.to_string(),
            precision,
            tensor: t.clone(),
        })
        .collect();
    if let Some(st) = optim {
        for (id, name, t) in model.store.iter() {
            let i = id.index();
            if let (Some(Some(m)), Some(Some(v))) = (st.m.get(i), st.v.get(i)) {
                for (prefix, buf) in [(M_PREFIX, m), (V_PREFIX, v)] {
                    tensors.push(NamedTensor {
                        name: format!("{prefix}{name}"),
                        precision: crate::tensor::Precision::F64,
                        tensor: crate::tensor::Tensor::new(t.shape().to_vec(), buf.clone())?,
                    });
                }
            }
        }
    }
    let container = Container {
        meta: serde_json::to_string(meta)?,
        tensors,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    write_container(&tmp, &container)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let container = read_container(path)?;
    let meta: CheckpointMeta = serde_json::from_str(&container.meta).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        message: format!("checkpoint metadata: {e}"),
    })?;
    Ok(Checkpoint { meta, container })
}

impl Checkpoint {
    fn param_tensors(&self) -> HashMap<&str, &NamedTensor> {
        self.container
            .tensors
            .iter()
            .filter(|t| !t.name.starts_with("optim."))
            .map(|t| (t.name.as_str(), t))
            .collect()
    }

    /// Names the store expects but the checkpoint lacks, and names the
    /// checkpoint holds that the store does not know, both sorted.
    pub fn tensor_name_diff(&self, store: &ParamStore) -> (Vec<String>, Vec<String>) {
        let found = self.param_tensors();
        let mut missing: Vec<String> = store.iter().map(|(_, n, _)| n).filter(|n| !found.contains_key(n)).map(str::to_string).collect();
        let mut unexpected: Vec<String> = found.keys().filter(|n| store.id(n).is_none()).map(|n| n.to_string()).collect();
        missing.sort_unstable();
        unexpected.sort_unstable();
        (missing, unexpected)
    }

    /// Copies stored parameters into `store`. Every parameter of the store
    /// must be present with a matching shape; extra tensors are an error.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        let found = self.param_tensors();
        let expected: Vec<String> = store.iter().map(|(_, n, _)| n.to_string()).collect();
        let missing: Vec<String> = expected.iter().filter(|n| !found.contains_key(n.as_str())).cloned().collect();
        if !missing.is_empty() {
            return Err(Error::MissingTensors(missing));
        }
        let mut unexpected: Vec<&str> = found.keys().copied().filter(|n| store.id(n).is_none()).collect();
        if !unexpected.is_empty() {
            unexpected.sort_unstable();
            return Err(Error::config(format!(
                "checkpoint has tensors the model does not expect: {}",
                unexpected.join(", ")
            )));
        }
        for name in &expected {
            let id = store.id(name).expect("listed from the store");
            let t = &found[name.as_str()].tensor;
            if t.shape() != store.get(id).shape() {
                return Err(Error::Shape {
                    op: "checkpoint",
                    lhs: store.get(id).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            store.set(id, t.data())?;
        }
        Ok(())
    }

    /// Rebuilds the model described by the metadata and loads its parameters.
    pub fn restore_model(&self) -> Result<Model> {
        let mut model = Model::new(self.meta.model.clone(), 0)?;
        self.load_into(&mut model.store)?;
        Ok(model)
    }

    /// Optimizer moments for the parameters of `store`, with the stored step.
    pub fn optimizer_state(&self, store: &ParamStore) -> AdamState {
        let mut st = AdamState::new(store.len());
        st.step = self.meta.step;
        for (id, name, _) in store.iter() {
            let m = self.container.get(&format!("{M_PREFIX}{name}"));
            let v = self.container.get(&format!("{V_PREFIX}{name}"));
            if let (Some(m), Some(v)) = (m, v) {
                st.m[id.index()] = Some(m.tensor.data().to_vec());
                st.v[id.index()] = Some(v.tensor.data().to_vec());
            }
        }
        st
    }
}
