//! Self-describing model files: a manifest (dimensions, vocabularies and
//! their hashes, head registry) plus named parameter tensors, as JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{InputVocab, Vocab};
use crate::error::{Error, Result};
use crate::eval::params_fingerprint;
use crate::numerics::Tensor;
use crate::parser::{ModelConfig, ModelParams};

pub const FORMAT: &str = "stackparse-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct HashedVocab {
    symbols: Vocab,
    hash: String,
}

impl HashedVocab {
    fn new(v: &Vocab) -> Self {
        HashedVocab {
            symbols: v.clone(),
            hash: v.hash(),
        }
    }

    fn verified(self, what: &str) -> Result<Vocab> {
        let actual = self.symbols.hash();
        if actual != self.hash {
            return Err(Error::Checkpoint(format!(
                "{what} vocabulary hash mismatch: manifest {}, contents {actual}",
                self.hash
            )));
        }
        Ok(self.symbols)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct NtEntry {
    key: String,
    labels: HashedVocab,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TaskEntry {
    task: String,
    terminals: HashedVocab,
    nt_key: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    seed: u64,
    words: HashedVocab,
    chars: HashedVocab,
    nt_heads: Vec<NtEntry>,
    tasks: Vec<TaskEntry>,
    params_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct File {
    format: String,
    version: u32,
    manifest: Manifest,
    params: Vec<NamedTensor>,
}

pub fn to_json(model: &ModelParams) -> Result<String> {
    let manifest = Manifest {
        config: model.config.clone(),
        seed: model.seed(),
        words: HashedVocab::new(&model.input.words),
        chars: HashedVocab::new(&model.input.chars),
        nt_heads: model
            .nt_registry()
            .into_iter()
            .map(|(k, v)| NtEntry {
                key: k.into(),
                labels: HashedVocab::new(v),
            })
            .collect(),
        tasks: model
            .task_registry()
            .into_iter()
            .map(|(t, v, k)| TaskEntry {
                task: t.into(),
                terminals: HashedVocab::new(v),
                nt_key: k.into(),
            })
            .collect(),
        params_hash: params_fingerprint(model),
    };
    let file = File {
        format: FORMAT.into(),
        version: VERSION,
        manifest,
        params: model
            .store
            .iter()
            .map(|(_, n, t)| NamedTensor {
                name: n.into(),
                tensor: t.clone(),
            })
            .collect(),
    };
    serde_json::to_string(&file).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn from_json(text: &str) -> Result<ModelParams> {
    let file: File = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if file.format != FORMAT || file.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format `{}` version {}",
            file.format, file.version
        )));
    }
    let m = file.manifest;
    m.config.validate()?;
    let input = InputVocab {
        words: m.words.verified("word")?,
        chars: m.chars.verified("character")?,
    };
    let mut model = ModelParams::new(m.config, input, m.seed)?;
    for e in m.nt_heads {
        let labels = e.labels.verified(&format!("non-terminal `{}`", e.key))?;
        model.add_nt_head(&e.key, labels)?;
    }
    for e in m.tasks {
        let terminals = e.terminals.verified(&format!("terminal `{}`", e.task))?;
        model.add_task(&e.task, terminals, &e.nt_key)?;
    }
    if file.params.len() != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "manifest implies {} parameters, file has {}",
            model.store.len(),
            file.params.len()
        )));
    }
    for p in file.params {
        let id = model
            .store
            .id(&p.name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{}`", p.name)))?;
        model
            .store
            .set(id, p.tensor)
            .map_err(|e| Error::Checkpoint(format!("`{}`: {e}", p.name)))?;
    }
    let actual = params_fingerprint(&model);
    if actual != m.params_hash {
        return Err(Error::Checkpoint(format!(
            "parameter hash mismatch: manifest {}, contents {actual}",
            m.params_hash
        )));
    }
    Ok(model)
}

pub fn save(model: &ModelParams, path: &Path) -> Result<()> {
    std::fs::write(path, to_json(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text)
}
