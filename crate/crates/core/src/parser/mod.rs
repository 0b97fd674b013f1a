//! The full parser: a shared trunk of encoders, attention and feed-forward
//! layers, plus per-task output heads.
//!
//! Parameter names are prefixed by owner: `trunk.*` for shared parameters,
//! `ter.<task>.*` for a task's terminal head and `nt.<key>.*` for a
//! non-terminal head (one per task, or one shared key).

mod session;
mod train;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use session::{parse_greedy, teacher_forced_loss, DecodeResult, Session, StepDistributions};
pub use train::{
    accumulate_batch, accuracy, example_loss, prepare, train, EpochRecord, Prepared, TrainConfig,
    TrainReport,
};

use crate::attention_copy::AttentionParams;
use crate::config::{parse_bool, KvFile};
use crate::data::{InputVocab, Vocab, VocabSet};
use crate::encoders::{BufferEncoder, SeededLstm, WordEncoder, EMBED_INIT};
use crate::error::{Error, Result};
use crate::numerics::{AffineParams, ParamId, ParamStore, Tensor};

/// Network sizes and switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub word_dim: usize,
    pub char_dim: usize,
    pub char_hidden: usize,
    pub buffer_hidden: usize,
    pub stack_hidden: usize,
    pub history_hidden: usize,
    /// Size of stack inputs and action embeddings.
    pub symbol_dim: usize,
    pub attention_dim: usize,
    pub ff_hidden: usize,
    pub dropout: f64,
    pub attention: bool,
    pub copy: bool,
    pub max_actions_base: usize,
    pub max_actions_per_token: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            word_dim: 64,
            char_dim: 16,
            char_hidden: 32,
            buffer_hidden: 64,
            stack_hidden: 64,
            history_hidden: 64,
            symbol_dim: 64,
            attention_dim: 64,
            ff_hidden: 64,
            dropout: 0.3,
            attention: true,
            copy: false,
            max_actions_base: 10,
            max_actions_per_token: 8,
        }
    }
}

impl ModelConfig {
    /// Copy scores come from attention, so copy is off without it.
    pub fn copy_active(&self) -> bool {
        self.copy && self.attention
    }

    pub fn max_actions(&self, sentence_len: usize) -> usize {
        self.max_actions_base + self.max_actions_per_token * sentence_len
    }

    /// Reads any `model.*` keys (the prefix is optional).
    pub fn apply_kv(&mut self, kv: &KvFile) -> Result<()> {
        for (key, value) in kv.entries() {
            let k = key.strip_prefix("model.").unwrap_or(key);
            let num = || -> Result<usize> {
                value
                    .parse()
                    .map_err(|e| Error::Config(format!("`{key} = {value}`: {e}")))
            };
            match k {
                "word_dim" => self.word_dim = num()?,
                "char_dim" => self.char_dim = num()?,
                "char_hidden" => self.char_hidden = num()?,
                "buffer_hidden" => self.buffer_hidden = num()?,
                "stack_hidden" => self.stack_hidden = num()?,
                "history_hidden" => self.history_hidden = num()?,
                "symbol_dim" => self.symbol_dim = num()?,
                "attention_dim" => self.attention_dim = num()?,
                "ff_hidden" => self.ff_hidden = num()?,
                "max_actions_base" => self.max_actions_base = num()?,
                "max_actions_per_token" => self.max_actions_per_token = num()?,
                "dropout" => {
                    self.dropout = value
                        .parse()
                        .map_err(|e| Error::Config(format!("`{key} = {value}`: {e}")))?
                }
                "attention" => self.attention = parse_bool(value)?,
                "copy" => self.copy = parse_bool(value)?,
                _ => {}
            }
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.word_dim,
            self.char_dim,
            self.char_hidden,
            self.buffer_hidden,
            self.stack_hidden,
            self.history_hidden,
            self.symbol_dim,
            self.attention_dim,
            self.ff_hidden,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} not in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Shared parameters.
#[derive(Clone, Debug)]
pub(crate) struct Trunk {
    pub word: WordEncoder,
    pub buffer: BufferEncoder,
    pub copy_proj: AffineParams,
    pub stack: SeededLstm,
    pub history: SeededLstm,
    /// Rows: TER, REDUCE.
    pub kind_emb: ParamId,
    pub compose: AffineParams,
    pub attention: Option<AttentionParams>,
    pub ff: AffineParams,
    pub kind_head: AffineParams,
}

pub(crate) const KIND_EMB_TER: usize = 0;
pub(crate) const KIND_EMB_REDUCE: usize = 1;

/// Generation layer and stack embeddings for one task's terminals.
#[derive(Clone, Debug)]
pub struct TerHead {
    pub terminals: Vocab,
    pub(crate) gen: AffineParams,
    pub(crate) emb: ParamId,
}

/// Label classifier and embeddings for non-terminals.
#[derive(Clone, Debug)]
pub struct NtHead {
    pub labels: Vocab,
    pub(crate) out: AffineParams,
    pub(crate) emb: ParamId,
}

#[derive(Clone, Debug)]
pub struct TaskHeads {
    pub ter: TerHead,
    pub nt_key: String,
}

/// Trunk plus named task heads, all stored in one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub input: InputVocab,
    pub store: ParamStore,
    seed: u64,
    pub(crate) trunk: Trunk,
    tasks: BTreeMap<String, TaskHeads>,
    nt_heads: BTreeMap<String, NtHead>,
}

fn component_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(name.as_bytes());
    let mut k = [0u8; 8];
    k.copy_from_slice(&digest[..8]);
    ChaCha8Rng::seed_from_u64(seed ^ u64::from_le_bytes(k))
}

impl ModelParams {
    /// Registers the trunk; heads are added with [`Self::add_nt_head`] and
    /// [`Self::add_task`].
    pub fn new(config: ModelConfig, input: InputVocab, seed: u64) -> Result<Self> {
        config.validate()?;
        if input.words.unk().is_none() || input.chars.unk().is_none() {
            return Err(Error::Invalid(
                "input vocabularies need an UNK entry".into(),
            ));
        }
        let c = &config;
        let mut store = ParamStore::new();
        let mut rng = component_rng(seed, "trunk");
        let rng = &mut rng;
        let word = WordEncoder::register(
            &mut store,
            "trunk",
            &input,
            c.word_dim,
            c.char_dim,
            c.char_hidden,
            rng,
        )?;
        let wdim = word.output_dim();
        let buffer =
            BufferEncoder::register(&mut store, "trunk.buffer", wdim, c.buffer_hidden, rng)?;
        let copy_proj =
            AffineParams::register(&mut store, "trunk.copy_proj", wdim, c.symbol_dim, rng)?;
        let stack =
            SeededLstm::register(&mut store, "trunk.stack", c.symbol_dim, c.stack_hidden, rng)?;
        let history = SeededLstm::register(
            &mut store,
            "trunk.history",
            c.symbol_dim,
            c.history_hidden,
            rng,
        )?;
        let kind_emb = store.add(
            "trunk.kind_emb",
            Tensor::uniform(&[2, c.symbol_dim], EMBED_INIT, rng),
        )?;
        let compose = AffineParams::register(
            &mut store,
            "trunk.compose",
            2 * c.symbol_dim,
            c.symbol_dim,
            rng,
        )?;
        let attention = if c.attention {
            Some(AttentionParams::register(
                &mut store,
                "trunk.attention",
                c.stack_hidden,
                buffer.output_dim(),
                c.attention_dim,
                rng,
            )?)
        } else {
            None
        };
        let ff_in =
            c.stack_hidden + c.history_hidden + if c.attention { buffer.output_dim() } else { 0 };
        let ff = AffineParams::register(&mut store, "trunk.ff", ff_in, c.ff_hidden, rng)?;
        let kind_head = AffineParams::register(&mut store, "trunk.kind", c.ff_hidden, 3, rng)?;
        Ok(ModelParams {
            trunk: Trunk {
                word,
                buffer,
                copy_proj,
                stack,
                history,
                kind_emb,
                compose,
                attention,
                ff,
                kind_head,
            },
            config,
            input,
            store,
            seed,
            tasks: BTreeMap::new(),
            nt_heads: BTreeMap::new(),
        })
    }

    /// One task with its own heads.
    pub fn single_task(
        config: ModelConfig,
        vocab: &VocabSet,
        task: &str,
        seed: u64,
    ) -> Result<Self> {
        let mut m = ModelParams::new(config, vocab.input.clone(), seed)?;
        m.add_nt_head(task, vocab.output.nonterminals.clone())?;
        m.add_task(task, vocab.output.terminals.clone(), task)?;
        Ok(m)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add_nt_head(&mut self, key: &str, labels: Vocab) -> Result<()> {
        if labels.is_empty() {
            return Err(Error::Empty("non-terminal vocabulary"));
        }
        if self.nt_heads.contains_key(key) {
            return Err(Error::Invalid(format!(
                "duplicate non-terminal head `{key}`"
            )));
        }
        let c = &self.config;
        let mut rng = component_rng(self.seed, &format!("nt.{key}"));
        let out = AffineParams::register(
            &mut self.store,
            &format!("nt.{key}.out"),
            c.ff_hidden,
            labels.len(),
            &mut rng,
        )?;
        let emb = self.store.add(
            format!("nt.{key}.emb"),
            Tensor::uniform(&[labels.len(), c.symbol_dim], EMBED_INIT, &mut rng),
        )?;
        self.nt_heads
            .insert(key.to_string(), NtHead { labels, out, emb });
        Ok(())
    }

    pub fn add_task(&mut self, task: &str, terminals: Vocab, nt_key: &str) -> Result<()> {
        if self.tasks.contains_key(task) {
            return Err(Error::Invalid(format!("duplicate task `{task}`")));
        }
        if !self.nt_heads.contains_key(nt_key) {
            return Err(Error::Unknown {
                kind: "non-terminal head",
                name: nt_key.to_string(),
            });
        }
        let c = &self.config;
        let mut rng = component_rng(self.seed, &format!("ter.{task}"));
        let gen = AffineParams::register(
            &mut self.store,
            &format!("ter.{task}.gen"),
            c.ff_hidden,
            terminals.len(),
            &mut rng,
        )?;
        let emb = self.store.add(
            format!("ter.{task}.emb"),
            Tensor::uniform(&[terminals.len(), c.symbol_dim], EMBED_INIT, &mut rng),
        )?;
        self.tasks.insert(
            task.to_string(),
            TaskHeads {
                ter: TerHead {
                    terminals,
                    gen,
                    emb,
                },
                nt_key: nt_key.to_string(),
            },
        );
        Ok(())
    }

    pub fn task_ids(&self) -> impl Iterator<Item = &str> {
        self.tasks.keys().map(String::as_str)
    }

    pub fn nt_keys(&self) -> impl Iterator<Item = &str> {
        self.nt_heads.keys().map(String::as_str)
    }

    pub fn task(&self, task: &str) -> Result<&TaskHeads> {
        self.tasks.get(task).ok_or_else(|| Error::Unknown {
            kind: "task",
            name: task.to_string(),
        })
    }

    pub fn nt_head(&self, key: &str) -> Result<&NtHead> {
        self.nt_heads.get(key).ok_or_else(|| Error::Unknown {
            kind: "non-terminal head",
            name: key.to_string(),
        })
    }

    pub fn nt_head_for(&self, task: &str) -> Result<&NtHead> {
        self.nt_head(&self.task(task)?.nt_key)
    }

    fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(id, _, _)| id)
            .collect()
    }

    pub fn trunk_ids(&self) -> Vec<ParamId> {
        self.ids_with_prefix("trunk.")
    }

    pub fn ter_head_ids(&self, task: &str) -> Vec<ParamId> {
        self.ids_with_prefix(&format!("ter.{task}."))
    }

    pub fn nt_head_ids(&self, key: &str) -> Vec<ParamId> {
        self.ids_with_prefix(&format!("nt.{key}."))
    }

    /// Both heads used by `task`.
    pub fn task_head_ids(&self, task: &str) -> Result<Vec<ParamId>> {
        let key = &self.task(task)?.nt_key;
        let mut ids = self.ter_head_ids(task);
        ids.extend(self.nt_head_ids(key));
        Ok(ids)
    }

    pub fn trunk_hash(&self) -> String {
        self.store.content_hash(&self.trunk_ids())
    }

    /// Copies every `trunk.*` tensor from `source`. Dimensions must agree.
    pub fn load_trunk_from(&mut self, source: &ModelParams) -> Result<()> {
        for id in self.trunk_ids() {
            let name = self.store.name(id).to_string();
            let sid = source
                .store
                .id(&name)
                .ok_or_else(|| Error::Invalid(format!("source model has no parameter `{name}`")))?;
            self.store
                .set(id, source.store.get(sid).clone())
                .map_err(|e| Error::Invalid(format!("transplanting `{name}`: {e}")))?;
        }
        Ok(())
    }

    /// `(task, terminals, nt key)` in registration-independent order.
    pub fn task_registry(&self) -> Vec<(&str, &Vocab, &str)> {
        self.tasks
            .iter()
            .map(|(t, h)| (t.as_str(), &h.ter.terminals, h.nt_key.as_str()))
            .collect()
    }

    pub fn nt_registry(&self) -> Vec<(&str, &Vocab)> {
        self.nt_heads
            .iter()
            .map(|(k, h)| (k.as_str(), &h.labels))
            .collect()
    }
}
