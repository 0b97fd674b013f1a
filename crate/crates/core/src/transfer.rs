//! Transfer between tasks: multi-task training over a shared trunk, and
//! pre-training on a source task followed by fine-tuning on the target.
//!
//! In setup (a) every task owns a terminal and a non-terminal head; in setup
//! (b) tasks own only a terminal head and share one non-terminal head over
//! the ordered union of their labels. Fine-tuning always starts from fresh
//! target heads: only `trunk.*` parameters are transplanted.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{build_input_vocab, build_output_vocab, build_vocab, Example, Vocab};
use crate::error::{Error, Result};
use crate::numerics::{Adam, Gradients, ParamStore};
use crate::parser::{
    accumulate_batch, accuracy, prepare, train, ModelConfig, ModelParams, Prepared, TrainConfig,
    TrainReport,
};
use crate::registry::Registry;

/// Key of the non-terminal head shared by all tasks in setup (b).
pub const SHARED_NT_KEY: &str = "shared";

/// One task's training and development data.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub id: String,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Setup {
    /// Separate terminal and non-terminal heads per task.
    A,
    /// Separate terminal heads, one shared non-terminal head.
    B,
}

impl FromStr for Setup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" | "A" => Ok(Setup::A),
            "b" | "B" => Ok(Setup::B),
            other => Err(Error::Unknown {
                kind: "multi-task setup",
                name: other.to_string(),
            }),
        }
    }
}

impl fmt::Display for Setup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setup::A => "a",
            Setup::B => "b",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Policy {
    /// Batches per task proportional to its training-set size.
    Proportional,
    /// The same number of batches for every task.
    Uniform,
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proportional" => Ok(Policy::Proportional),
            "uniform" => Ok(Policy::Uniform),
            other => Err(Error::Unknown {
                kind: "sampling policy",
                name: other.to_string(),
            }),
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::Proportional => "proportional",
            Policy::Uniform => "uniform",
        })
    }
}

/// A model with one head set per task, input vocabulary over all tasks'
/// training utterances.
pub fn build_mtl_model(
    config: ModelConfig,
    tasks: &[TaskData],
    setup: Setup,
    min_count: usize,
    seed: u64,
) -> Result<ModelParams> {
    if tasks.is_empty() {
        return Err(Error::Empty("task list"));
    }
    let input = build_input_vocab(
        tasks
            .iter()
            .flat_map(|t| t.train.iter().map(|e| e.tokens.as_slice())),
        min_count,
    );
    let mut model = ModelParams::new(config, input, seed)?;
    let outputs: Vec<_> = tasks.iter().map(|t| build_output_vocab(&t.train)).collect();
    if setup == Setup::B {
        let mut shared = Vocab::new();
        for o in &outputs {
            for l in o.nonterminals.symbols() {
                shared.insert(l);
            }
        }
        model.add_nt_head(SHARED_NT_KEY, shared)?;
    }
    for (t, o) in tasks.iter().zip(outputs) {
        let key = match setup {
            Setup::A => {
                model.add_nt_head(&t.id, o.nonterminals)?;
                t.id.as_str()
            }
            Setup::B => SHARED_NT_KEY,
        };
        model.add_task(&t.id, o.terminals, key)?;
    }
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MtlSchedule {
    pub policy: Policy,
    pub seed: u64,
    pub epochs: usize,
}

/// Task of every update in one epoch, in shuffled order. Every task gets at
/// least one update.
pub fn epoch_plan(
    sizes: &[usize],
    batch_size: usize,
    policy: Policy,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let batches: Vec<usize> = sizes
        .iter()
        .map(|&n| n.div_ceil(batch_size).max(1))
        .collect();
    let counts: Vec<usize> = match policy {
        Policy::Proportional => batches,
        Policy::Uniform => {
            let per = batches.iter().sum::<usize>().div_ceil(sizes.len());
            vec![per; sizes.len()]
        }
    };
    let mut plan: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(t, &c)| std::iter::repeat_n(t, c))
        .collect();
    plan.shuffle(rng);
    plan
}

/// Per-update observation handed to [`mtl_train`]'s callback.
pub struct StepInfo<'a> {
    pub step: usize,
    pub task: &'a str,
    pub grads: &'a Gradients,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MtlEpoch {
    pub epoch: usize,
    /// Mean per-sentence loss of each task's updates.
    pub losses: BTreeMap<String, f64>,
    pub target_dev_em: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MtlReport {
    pub epochs: Vec<MtlEpoch>,
    pub best_epoch: usize,
    pub best_score: f64,
    pub skipped: BTreeMap<String, usize>,
    pub steps: usize,
}

/// Cycles through a task's examples in a freshly shuffled order each pass.
struct BatchStream {
    order: Vec<usize>,
    pos: usize,
}

impl BatchStream {
    fn next_batch(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.order.len()) {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Interleaved training of all `tasks`; each update uses one task's batch
/// and touches the trunk plus that task's heads only. Selection is on the
/// `target` task's dev exact match (training exact match without dev data);
/// `model` ends holding the best parameters. `on_step` sees the model right
/// after every update.
pub fn mtl_train(
    model: &mut ModelParams,
    tasks: &[TaskData],
    target: &str,
    schedule: &MtlSchedule,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepInfo<'_>, &ModelParams) -> Result<()>,
) -> Result<MtlReport> {
    if tasks.len() < 2 {
        return Err(Error::Invalid(
            "multi-task training needs at least two tasks".into(),
        ));
    }
    let target_data = tasks
        .iter()
        .find(|t| t.id == target)
        .ok_or_else(|| Error::Unknown {
            kind: "target task",
            name: target.to_string(),
        })?;
    let mut prepared: Vec<Vec<Prepared>> = Vec::new();
    let mut skipped = BTreeMap::new();
    for t in tasks {
        let (p, s) = prepare(model, &t.id, &t.train)?;
        if p.is_empty() {
            return Err(Error::Invalid(format!(
                "task `{}` has no usable examples",
                t.id
            )));
        }
        skipped.insert(t.id.clone(), s);
        prepared.push(p);
    }
    let select_on: &[Example] = if target_data.dev.is_empty() {
        &target_data.train
    } else {
        &target_data.dev
    };
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut streams: Vec<BatchStream> = prepared
        .iter()
        .map(|p| {
            let mut order: Vec<usize> = (0..p.len()).collect();
            order.shuffle(&mut rng);
            BatchStream { order, pos: 0 }
        })
        .collect();
    let sizes: Vec<usize> = prepared.iter().map(Vec::len).collect();
    let mut adam = Adam::new(cfg.adam());
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut stale = 0;
    let mut step = 0usize;
    for epoch in 0..schedule.epochs {
        let plan = epoch_plan(&sizes, cfg.batch_size, schedule.policy, &mut rng);
        let mut sums = vec![(0.0, 0usize); tasks.len()];
        for t in plan {
            let idx = streams[t].next_batch(cfg.batch_size, &mut rng);
            let batch: Vec<&Prepared> = idx.iter().map(|&i| &prepared[t][i]).collect();
            let (loss, grads) =
                accumulate_batch(model, &tasks[t].id, &batch, schedule.seed, step as u64)?;
            adam.step(&mut model.store, &grads);
            sums[t].0 += loss;
            sums[t].1 += batch.len();
            on_step(
                &StepInfo {
                    step,
                    task: &tasks[t].id,
                    grads: &grads,
                },
                model,
            )?;
            step += 1;
        }
        let score = accuracy(model, target, select_on)?;
        let losses = tasks
            .iter()
            .zip(&sums)
            .map(|(t, (l, n))| (t.id.clone(), if *n > 0 { l / *n as f64 } else { 0.0 }))
            .collect();
        log::info!("mtl epoch {epoch}: target {target} dev {score:.3}");
        epochs.push(MtlEpoch {
            epoch,
            losses,
            target_dev_em: score,
        });
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, epoch, model.store.clone()));
            stale = 0;
        } else {
            stale += 1;
        }
        if (cfg.stop_when_perfect && score >= 1.0) || stale > cfg.patience {
            break;
        }
    }
    let (best_score, best_epoch, store) = best.ok_or(Error::Invalid("zero epochs".into()))?;
    model.store = store;
    Ok(MtlReport {
        epochs,
        best_epoch,
        best_score,
        skipped,
        steps: step,
    })
}

/// A fresh model for `target` on top of `source`'s trunk. The source input
/// vocabulary is kept (target-only words map to UNK); both heads are new and
/// sized to the target's training data.
pub fn transplant(source: &ModelParams, target: &TaskData, seed: u64) -> Result<ModelParams> {
    let out = build_output_vocab(&target.train);
    let mut m = ModelParams::new(source.config.clone(), source.input.clone(), seed)?;
    m.add_nt_head(&target.id, out.nonterminals)?;
    m.add_task(&target.id, out.terminals, &target.id)?;
    m.load_trunk_from(source)?;
    Ok(m)
}

/// Rejects a source model whose network sizes differ from `config`.
pub fn check_compatible(source: &ModelParams, config: &ModelConfig) -> Result<()> {
    let mut a = source.config.clone();
    let mut b = config.clone();
    // switches that do not change parameter shapes may differ
    a.dropout = 0.0;
    b.dropout = 0.0;
    a.copy = false;
    b.copy = false;
    if a != b {
        return Err(Error::Invalid(format!(
            "source model dimensions {:?} do not match configuration {:?}",
            source.config, config
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub source: TrainReport,
    pub target: TrainReport,
}

/// Trains on `source`, transplants the trunk and fine-tunes every parameter
/// on `target`.
pub fn pretrain_finetune(
    config: ModelConfig,
    source: &TaskData,
    target: &TaskData,
    cfg: &TrainConfig,
) -> Result<(ModelParams, PretrainReport)> {
    let vocab = build_vocab(&source.train, cfg.min_count);
    let mut src = ModelParams::single_task(config, &vocab, &source.id, cfg.seed)?;
    let source_report = train(&mut src, &source.id, &source.train, &source.dev, cfg)?;
    let mut tgt = transplant(&src, target, cfg.seed.wrapping_add(1))?;
    let target_report = train(&mut tgt, &target.id, &target.train, &target.dev, cfg)?;
    Ok((
        tgt,
        PretrainReport {
            source: source_report,
            target: target_report,
        },
    ))
}

/// Inputs shared by all transfer regimes.
pub struct TransferInput<'a> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub target: &'a TaskData,
    pub auxiliary: &'a [TaskData],
    pub policy: Policy,
}

pub struct TransferOutcome {
    pub model: ModelParams,
    pub target: String,
    /// Selection score: target dev exact match.
    pub dev_em: f64,
}

/// One way of obtaining a target-task model.
pub trait Regime {
    fn description(&self) -> &'static str;
    fn run(&self, input: &TransferInput<'_>) -> Result<TransferOutcome>;
}

struct Scratch;

impl Regime for Scratch {
    fn description(&self) -> &'static str {
        "target task only"
    }

    fn run(&self, input: &TransferInput<'_>) -> Result<TransferOutcome> {
        let t = input.target;
        let vocab = build_vocab(&t.train, input.train.min_count);
        let mut m = ModelParams::single_task(input.model.clone(), &vocab, &t.id, input.train.seed)?;
        let r = train(&mut m, &t.id, &t.train, &t.dev, &input.train)?;
        Ok(TransferOutcome {
            model: m,
            target: t.id.clone(),
            dev_em: r.best_score,
        })
    }
}

struct MultiTask(Setup);

impl Regime for MultiTask {
    fn description(&self) -> &'static str {
        match self.0 {
            Setup::A => "multi-task, separate TER and NT heads",
            Setup::B => "multi-task, separate TER heads, shared NT head",
        }
    }

    fn run(&self, input: &TransferInput<'_>) -> Result<TransferOutcome> {
        let mut tasks = vec![input.target.clone()];
        tasks.extend(input.auxiliary.iter().cloned());
        let mut m = build_mtl_model(
            input.model.clone(),
            &tasks,
            self.0,
            input.train.min_count,
            input.train.seed,
        )?;
        let schedule = MtlSchedule {
            policy: input.policy,
            seed: input.train.seed,
            epochs: input.train.epochs,
        };
        let r = mtl_train(
            &mut m,
            &tasks,
            &input.target.id,
            &schedule,
            &input.train,
            &mut |_, _| Ok(()),
        )?;
        Ok(TransferOutcome {
            model: m,
            target: input.target.id.clone(),
            dev_em: r.best_score,
        })
    }
}

struct Pretrain;

impl Regime for Pretrain {
    fn description(&self) -> &'static str {
        "pre-train on the auxiliary tasks, fine-tune on the target"
    }

    fn run(&self, input: &TransferInput<'_>) -> Result<TransferOutcome> {
        if input.auxiliary.is_empty() {
            return Err(Error::Invalid(
                "pre-training needs an auxiliary task".into(),
            ));
        }
        let source = TaskData {
            id: input
                .auxiliary
                .iter()
                .map(|t| t.id.as_str())
                .collect::<Vec<_>>()
                .join("+"),
            train: input
                .auxiliary
                .iter()
                .flat_map(|t| t.train.clone())
                .collect(),
            dev: input.auxiliary.iter().flat_map(|t| t.dev.clone()).collect(),
        };
        let (m, r) = pretrain_finetune(input.model.clone(), &source, input.target, &input.train)?;
        Ok(TransferOutcome {
            model: m,
            target: input.target.id.clone(),
            dev_em: r.target.best_score,
        })
    }
}

/// `scratch`, `mtl-a`, `mtl-b`, `pretrain`.
pub fn regimes() -> Registry<dyn Regime> {
    let mut r: Registry<dyn Regime> = Registry::new("transfer regime");
    let entries: [(&str, Box<dyn Regime>); 4] = [
        ("scratch", Box::new(Scratch)),
        ("mtl-a", Box::new(MultiTask(Setup::A))),
        ("mtl-b", Box::new(MultiTask(Setup::B))),
        ("pretrain", Box::new(Pretrain)),
    ];
    for (name, regime) in entries {
        r.register(name, regime).expect("distinct names");
    }
    r
}

/// Target dev score for every auxiliary candidate under `regime`.
pub fn sweep_auxiliary(
    regime: &dyn Regime,
    target: &TaskData,
    candidates: &[TaskData],
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    policy: Policy,
) -> Result<Vec<(String, String, f64)>> {
    candidates
        .iter()
        .filter(|c| c.id != target.id)
        .map(|aux| {
            let out = regime.run(&TransferInput {
                model: model.clone(),
                train: train_cfg.clone(),
                target,
                auxiliary: std::slice::from_ref(aux),
                policy,
            })?;
            Ok((target.id.clone(), aux.id.clone(), out.dev_em))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::parse_overnight_line;

    fn task(id: &str, lines: &[&str]) -> TaskData {
        TaskData {
            id: id.into(),
            train: lines
                .iter()
                .map(|l| parse_overnight_line(l, id).unwrap())
                .collect(),
            dev: Vec::new(),
        }
    }

    fn tasks() -> Vec<TaskData> {
        vec![
            task("cars", &["show red cars\t(find (color red) cars)"]),
            task("rooms", &["count big rooms\t(count (size big) rooms)"]),
        ]
    }

    fn cfg() -> ModelConfig {
        ModelConfig {
            word_dim: 6,
            char_dim: 4,
            char_hidden: 4,
            buffer_hidden: 5,
            stack_hidden: 6,
            history_hidden: 5,
            symbol_dim: 6,
            attention_dim: 5,
            ff_hidden: 6,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn setup_b_has_one_nt_head_over_label_union() {
        let m = build_mtl_model(cfg(), &tasks(), Setup::B, 1, 0).unwrap();
        assert_eq!(m.nt_keys().collect::<Vec<_>>(), vec![SHARED_NT_KEY]);
        let labels = &m.nt_head(SHARED_NT_KEY).unwrap().labels;
        assert_eq!(labels.symbols(), &["find", "color", "count", "size"]);
        let a = build_mtl_model(cfg(), &tasks(), Setup::A, 1, 0).unwrap();
        assert_eq!(a.nt_keys().count(), 2);
    }

    #[test]
    fn plan_gives_every_task_an_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = epoch_plan(&[500, 3], 16, Policy::Proportional, &mut rng);
        assert_eq!(p.iter().filter(|&&t| t == 1).count(), 1);
        assert_eq!(p.len(), 32 + 1);
        let u = epoch_plan(&[500, 3], 16, Policy::Uniform, &mut rng);
        assert_eq!(
            u.iter().filter(|&&t| t == 0).count(),
            u.iter().filter(|&&t| t == 1).count()
        );
    }

    #[test]
    fn transplant_copies_trunk_and_rejects_mismatch() {
        let ts = tasks();
        let src = build_mtl_model(cfg(), &ts[..1], Setup::A, 1, 3).unwrap();
        let t = transplant(&src, &ts[1], 9).unwrap();
        assert_eq!(src.trunk_hash(), t.trunk_hash());
        assert!(t.task("rooms").is_ok());
        let other = ModelConfig {
            word_dim: 7,
            ..cfg()
        };
        assert!(check_compatible(&src, &other).is_err());
        assert!(check_compatible(&src, &cfg()).is_ok());
    }

    #[test]
    fn registry_lists_all_regimes() {
        assert_eq!(
            regimes().names(),
            vec!["mtl-a", "mtl-b", "pretrain", "scratch"]
        );
    }
}
