use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{teacher_forced_loss, ModelParams, Session};
use crate::config::{parse_bool, KvFile};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Gradients};
use crate::transition::{oracle_actions, Action};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epochs without improvement before stopping.
    pub patience: usize,
    /// Sentences whose gradients are averaged per update.
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Stop as soon as the selection set is parsed perfectly.
    pub stop_when_perfect: bool,
    pub min_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            patience: 5,
            batch_size: 16,
            lr: 1e-3,
            clip_norm: 5.0,
            seed: 0,
            stop_when_perfect: false,
            min_count: 1,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            clip_norm: self.clip_norm,
            ..AdamConfig::default()
        }
    }

    /// Reads `train.*` keys (the prefix is optional).
    pub fn apply_kv(&mut self, kv: &KvFile) -> Result<()> {
        for (key, value) in kv.entries() {
            let k = key.strip_prefix("train.").unwrap_or(key);
            let bad = |e: &dyn std::fmt::Display| Error::Config(format!("`{key} = {value}`: {e}"));
            match k {
                "epochs" => self.epochs = value.parse().map_err(|e| bad(&e))?,
                "patience" => self.patience = value.parse().map_err(|e| bad(&e))?,
                "batch_size" => self.batch_size = value.parse().map_err(|e| bad(&e))?,
                "lr" => self.lr = value.parse().map_err(|e| bad(&e))?,
                "clip_norm" => self.clip_norm = value.parse().map_err(|e| bad(&e))?,
                "seed" => self.seed = value.parse().map_err(|e| bad(&e))?,
                "min_count" => self.min_count = value.parse().map_err(|e| bad(&e))?,
                "stop_when_perfect" => self.stop_when_perfect = parse_bool(value)?,
                _ => {}
            }
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// An example with its oracle action sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub tokens: Vec<String>,
    pub actions: Vec<Action>,
}

/// Oracle sequences for `examples` under `task`'s heads. Examples whose
/// leaves cannot be produced, or whose labels the head does not know, are
/// skipped; the count is returned.
pub fn prepare(
    model: &ModelParams,
    task: &str,
    examples: &[Example],
) -> Result<(Vec<Prepared>, usize)> {
    let heads = model.task(task)?;
    let labels = &model.nt_head(&heads.nt_key)?.labels;
    let copy = model.config.copy_active();
    let mut out = Vec::with_capacity(examples.len());
    let mut skipped = 0;
    for e in examples {
        if let Some(l) = e.gold.labels().into_iter().find(|l| !labels.contains(l)) {
            log::warn!("skipping example with unknown label `{l}`: {}", e.raw);
            skipped += 1;
            continue;
        }
        match oracle_actions(&e.gold, &e.tokens, &heads.ter.terminals, copy) {
            Ok(actions) => out.push(Prepared {
                tokens: e.tokens.clone(),
                actions,
            }),
            Err(err) => {
                log::warn!("skipping example: {err}: {}", e.raw);
                skipped += 1;
            }
        }
    }
    Ok((out, skipped))
}

/// Loss and gradients for one prepared example.
pub fn example_loss(
    model: &ModelParams,
    task: &str,
    p: &Prepared,
    dropout: Option<ChaCha8Rng>,
) -> Result<(f64, Gradients)> {
    let mut s = Session::new(model, task, &p.tokens, dropout)?;
    let loss = teacher_forced_loss(&mut s, &p.actions)?;
    Ok((s.graph.scalar(loss), s.graph.backward(loss)?))
}

fn dropout_rng(seed: u64, step: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_mul(1 << 20).wrapping_add(index as u64));
    rng
}

/// Summed loss and averaged gradients over a batch. `step` only decorrelates
/// dropout masks between updates.
pub fn accumulate_batch(
    model: &ModelParams,
    task: &str,
    batch: &[&Prepared],
    seed: u64,
    step: u64,
) -> Result<(f64, Gradients)> {
    let mut total = Gradients::empty(model.store.len());
    let mut loss = 0.0;
    for (i, p) in batch.iter().enumerate() {
        let (l, g) = example_loss(model, task, p, Some(dropout_rng(seed, step, i)))?;
        loss += l;
        total.accumulate(&g);
    }
    if !batch.is_empty() {
        total.scale(1.0 / batch.len() as f64);
    }
    Ok((loss, total))
}

/// Fraction of examples whose greedy parse equals the gold tree.
pub fn accuracy(model: &ModelParams, task: &str, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for e in examples {
        let d = super::parse_greedy(model, task, &e.tokens)?;
        if d.tree.as_ref() == Some(&e.gold) {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sentence training loss.
    pub loss: f64,
    pub train_em: Option<f64>,
    pub dev_em: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_score: f64,
    pub skipped: usize,
}

/// Trains `task` on `train`, selecting on dev exact match (training exact
/// match when `dev` is empty). `model` ends holding the best parameters.
pub fn train(
    model: &mut ModelParams,
    task: &str,
    train: &[Example],
    dev: &[Example],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let (prepared, skipped) = prepare(model, task, train)?;
    if prepared.is_empty() {
        return Err(Error::Invalid(format!(
            "all {} training examples of `{task}` are uncopyable",
            train.len()
        )));
    }
    let mut adam = Adam::new(cfg.adam());
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::new();
    let mut best: Option<(f64, usize, crate::numerics::ParamStore)> = None;
    let mut stale = 0;
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &prepared[i]).collect();
            let (l, grads) = accumulate_batch(model, task, &batch, cfg.seed, step)?;
            adam.step(&mut model.store, &grads);
            loss += l;
            step += 1;
        }
        let loss = loss / prepared.len() as f64;
        let dev_em = if dev.is_empty() {
            None
        } else {
            Some(accuracy(model, task, dev)?)
        };
        let train_em = if dev.is_empty() {
            Some(accuracy(model, task, train)?)
        } else {
            None
        };
        let score = dev_em.or(train_em).unwrap_or(0.0);
        log::info!("{task} epoch {epoch}: loss {loss:.4} train {train_em:?} dev {dev_em:?}");
        records.push(EpochRecord {
            epoch,
            loss,
            train_em,
            dev_em,
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
    let (best_score, best_epoch, store) = best.expect("at least one epoch");
    model.store = store;
    Ok(TrainReport {
        epochs: records,
        best_epoch,
        best_score,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, parse_overnight_line};
    use crate::parser::ModelConfig;

    fn corpus() -> Vec<Example> {
        [
            "show red cars\t(find (color red) cars)",
            "count blue cars\t(count (color blue))",
        ]
        .iter()
        .map(|l| parse_overnight_line(l, "t").unwrap())
        .collect()
    }

    fn cfg() -> ModelConfig {
        ModelConfig {
            word_dim: 8,
            char_dim: 4,
            char_hidden: 6,
            buffer_hidden: 8,
            stack_hidden: 8,
            history_hidden: 8,
            symbol_dim: 8,
            attention_dim: 8,
            ff_hidden: 12,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn overfits_two_examples_and_is_deterministic() {
        let data = corpus();
        let v = build_vocab(&data, 1);
        let tc = TrainConfig {
            epochs: 300,
            batch_size: 2,
            lr: 0.01,
            patience: 300,
            stop_when_perfect: true,
            ..TrainConfig::default()
        };
        let mut a = ModelParams::single_task(cfg(), &v, "t", 0).unwrap();
        let ra = train(&mut a, "t", &data, &[], &tc).unwrap();
        assert_eq!(ra.best_score, 1.0, "{:?}", ra.epochs.last());
        assert!(ra.epochs[2].loss < ra.epochs[0].loss);

        let mut b = ModelParams::single_task(cfg(), &v, "t", 0).unwrap();
        train(&mut b, "t", &data, &[], &tc).unwrap();
        let ids: Vec<_> = a.store.ids().collect();
        assert_eq!(a.store.content_hash(&ids), b.store.content_hash(&ids));
    }

    #[test]
    fn all_uncopyable_rejected() {
        let data = corpus();
        let v = build_vocab(&data, 1);
        let m = ModelParams::single_task(cfg(), &v, "t", 0).unwrap();
        let odd = vec![parse_overnight_line("what\t(find zebra)", "t").unwrap()];
        let (p, skipped) = prepare(&m, "t", &odd).unwrap();
        assert!(p.is_empty());
        assert_eq!(skipped, 1);
        let mut m = m;
        assert!(train(&mut m, "t", &odd, &[], &TrainConfig::default()).is_err());
    }
}
