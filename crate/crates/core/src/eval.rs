//! Metrics, evaluation reports and the ablation harness.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::delex::delexicalize_tokens;
use crate::data::{build_vocab, delexicalize, relexicalize_tree, Example, Gazetteer, Tree};
use crate::error::{Error, Result};
use crate::parser::{parse_greedy, train, ModelConfig, ModelParams, TrainConfig};
use crate::variants::{variants, Variant};

/// True iff the prediction is complete and equals the gold tree.
pub fn exact_match(pred: Option<&Tree>, gold: &Tree) -> bool {
    pred.is_some_and(|p| p.linearize() == gold.linearize())
}

/// Multiset F1 over linearisation tokens, parentheses excluded.
pub fn token_f1(pred: &[&str], gold: &[&str]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, isize> = HashMap::new();
    for g in gold {
        *counts.entry(g).or_insert(0) += 1;
    }
    let mut overlap = 0usize;
    for p in pred {
        if let Some(c) = counts.get_mut(p) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / pred.len() as f64;
    let r = overlap as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Status {
    Parsed,
    /// The action budget ran out; scored on the partial tree.
    Incomplete,
    /// Decoding failed outright (e.g. an empty utterance).
    Skipped,
}

impl Status {
    fn as_str(self) -> &'static str {
        match self {
            Status::Parsed => "parsed",
            Status::Incomplete => "incomplete",
            Status::Skipped => "skipped",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub utterance: String,
    pub gold: String,
    pub predicted: String,
    pub status: Status,
    pub exact: bool,
    pub f1: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub parsed: usize,
    pub incomplete: usize,
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    /// Ordered `key, value` pairs written as the `#` header.
    pub metadata: Vec<(String, String)>,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn exact_match(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().filter(|r| r.exact).count() as f64 / self.rows.len() as f64
    }

    pub fn token_f1(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.f1).sum::<f64>() / self.rows.len() as f64
    }

    pub fn counts(&self) -> Counts {
        let mut c = Counts::default();
        for r in &self.rows {
            match r.status {
                Status::Parsed => c.parsed += 1,
                Status::Incomplete => c.incomplete += 1,
                Status::Skipped => c.skipped += 1,
            }
        }
        c
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.push((key.to_string(), value.to_string()));
        self
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.metadata {
            let _ = writeln!(s, "# {k}\t{v}");
        }
        let c = self.counts();
        let _ = writeln!(s, "# exact_match\t{:.6}", self.exact_match());
        let _ = writeln!(s, "# token_f1\t{:.6}", self.token_f1());
        let _ = writeln!(
            s,
            "# total\t{}\n# parsed\t{}\n# incomplete\t{}\n# skipped\t{}",
            self.rows.len(),
            c.parsed,
            c.incomplete,
            c.skipped
        );
        s.push_str("utterance\tgold\tpredicted\tstatus\texact\tf1\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{:.6}",
                r.utterance,
                r.gold,
                r.predicted,
                r.status.as_str(),
                u8::from(r.exact),
                r.f1
            );
        }
        s
    }
}

/// Stable digest of everything that shapes a run.
pub fn config_fingerprint(model: &ModelConfig, train: &TrainConfig) -> String {
    let json = serde_json::to_string(&(model, train)).expect("plain data serialises");
    hex::encode(&Sha256::digest(json.as_bytes())[..8])
}

pub fn params_fingerprint(model: &ModelParams) -> String {
    let ids: Vec<_> = model.store.ids().collect();
    model.store.content_hash(&ids)
}

/// Greedy-decodes every example. With a gazetteer, utterances are
/// delexicalised before parsing and predictions relexicalised before scoring.
pub fn evaluate(
    model: &ModelParams,
    task: &str,
    examples: &[Example],
    gazetteer: Option<&Gazetteer>,
) -> Result<EvalReport> {
    model.task(task)?;
    let mut rows = Vec::with_capacity(examples.len());
    for ex in examples {
        let (tokens, alignment) = match gazetteer {
            Some(g) => {
                let (t, a) = delexicalize_tokens(&ex.tokens, g);
                (t, Some(a))
            }
            None => (ex.tokens.clone(), None),
        };
        let relex = |t: &Tree| match &alignment {
            Some(a) => relexicalize_tree(t, a),
            None => t.clone(),
        };
        let gold_syms = ex.gold.symbols();
        let row = match parse_greedy(model, task, &tokens) {
            Ok(d) => {
                let tree = d.tree.as_ref().map(relex);
                let shown = tree.clone().or_else(|| d.partial.as_ref().map(relex));
                let predicted = shown.as_ref().map(Tree::linearize).unwrap_or_default();
                let f1 = shown
                    .as_ref()
                    .map_or(0.0, |t| token_f1(&t.symbols(), &gold_syms));
                EvalRow {
                    utterance: ex.tokens.join(" "),
                    gold: ex.gold.linearize(),
                    predicted,
                    status: if tree.is_some() {
                        Status::Parsed
                    } else {
                        Status::Incomplete
                    },
                    exact: exact_match(tree.as_ref(), &ex.gold),
                    f1,
                }
            }
            Err(e) => {
                log::warn!("skipping `{}`: {e}", ex.tokens.join(" "));
                EvalRow {
                    utterance: ex.tokens.join(" "),
                    gold: ex.gold.linearize(),
                    predicted: String::new(),
                    status: Status::Skipped,
                    exact: false,
                    f1: 0.0,
                }
            }
        };
        rows.push(row);
    }
    Ok(EvalReport {
        metadata: vec![("task".into(), task.into())],
        rows,
    })
}

/// A trained ablation variant, with the gazetteer it was trained under.
pub struct Trained {
    pub model: ModelParams,
    pub gazetteer: Option<Gazetteer>,
}

/// Trains one variant from scratch on `train`, selecting on `dev`.
pub fn train_variant(
    variant: &dyn Variant,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    task: &str,
    train_set: &[Example],
    dev: &[Example],
    gazetteer: Option<&Gazetteer>,
) -> Result<Trained> {
    let mut cfg = model_cfg.clone();
    variant.configure(&mut cfg);
    let gaz = if variant.delexicalizes() {
        Some(
            gazetteer
                .ok_or_else(|| Error::Invalid(format!("{} needs a gazetteer", variant.column())))?,
        )
    } else {
        None
    };
    let prep = |xs: &[Example]| -> Vec<Example> {
        match gaz {
            Some(g) => xs.iter().map(|e| delexicalize(e, g).0).collect(),
            None => xs.to_vec(),
        }
    };
    let (tr, dv) = (prep(train_set), prep(dev));
    let vocab = build_vocab(&tr, train_cfg.min_count);
    let mut model = ModelParams::single_task(cfg, &vocab, task, train_cfg.seed)?;
    train(&mut model, task, &tr, &dv, train_cfg)?;
    Ok(Trained {
        model,
        gazetteer: gaz.cloned(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationCell {
    pub variant: String,
    pub seed: u64,
    /// `None` when the variant could not run (no gazetteer for delex).
    pub exact_match: Option<f64>,
    pub token_f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub task: String,
    pub fingerprint: String,
    pub seeds: Vec<u64>,
    pub variants: Vec<String>,
    pub cells: Vec<AblationCell>,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

impl AblationTable {
    /// Median test exact match of a variant over seeds.
    pub fn median_em(&self, variant: &str) -> Option<f64> {
        let mut v: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.variant == variant)
            .filter_map(|c| c.exact_match)
            .collect();
        median(&mut v)
    }

    pub fn median_f1(&self, variant: &str) -> Option<f64> {
        let mut v: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.variant == variant)
            .filter_map(|c| c.token_f1)
            .collect();
        median(&mut v)
    }

    /// One summary row (median exact match, percent) in table layout, then
    /// per-seed cells.
    pub fn to_tsv(&self) -> String {
        let reg = variants();
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{:.1}", 100.0 * x));
        let mut s = String::new();
        let _ = writeln!(s, "# task\t{}", self.task);
        let _ = writeln!(s, "# config\t{}", self.fingerprint);
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "# seeds\t{}", seeds.join(","));
        let _ = writeln!(s, "# metric\tmedian exact match (%)");
        let cols: Vec<&str> = self
            .variants
            .iter()
            .map(|v| reg.get(v).map(|x| x.column()).unwrap_or(v.as_str()))
            .collect();
        let _ = writeln!(s, "task\t{}", cols.join("\t"));
        let meds: Vec<String> = self
            .variants
            .iter()
            .map(|v| fmt(self.median_em(v)))
            .collect();
        let _ = writeln!(s, "{}\t{}", self.task, meds.join("\t"));
        let _ = writeln!(s, "# per seed: variant\tseed\texact_match\ttoken_f1");
        for c in &self.cells {
            let _ = writeln!(
                s,
                "# {}\t{}\t{}\t{}",
                c.variant,
                c.seed,
                fmt(c.exact_match),
                c.token_f1.map_or("n/a".into(), |f| format!("{f:.4}"))
            );
        }
        s
    }
}

pub struct AblationData<'a> {
    pub task: &'a str,
    pub train: &'a [Example],
    pub dev: &'a [Example],
    pub test: &'a [Example],
    pub gazetteer: Option<&'a Gazetteer>,
}

/// Trains and tests every named variant once per seed.
pub fn run_ablation(
    data: &AblationData<'_>,
    names: &[&str],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<AblationTable> {
    let reg = variants();
    let mut cells = Vec::new();
    for &name in names {
        let variant = reg.get(name)?;
        for &seed in seeds {
            if variant.delexicalizes() && data.gazetteer.is_none() {
                log::warn!("{name}: no gazetteer, column left n/a");
                cells.push(AblationCell {
                    variant: name.into(),
                    seed,
                    exact_match: None,
                    token_f1: None,
                });
                continue;
            }
            let cfg = TrainConfig {
                seed,
                ..train_cfg.clone()
            };
            let t = train_variant(
                variant,
                model_cfg,
                &cfg,
                data.task,
                data.train,
                data.dev,
                data.gazetteer,
            )?;
            let r = evaluate(&t.model, data.task, data.test, t.gazetteer.as_ref())?;
            log::info!(
                "{name} seed {seed}: test exact match {:.3}",
                r.exact_match()
            );
            cells.push(AblationCell {
                variant: name.into(),
                seed,
                exact_match: Some(r.exact_match()),
                token_f1: Some(r.token_f1()),
            });
        }
    }
    Ok(AblationTable {
        task: data.task.into(),
        fingerprint: config_fingerprint(model_cfg, train_cfg),
        seeds: seeds.to_vec(),
        variants: names.iter().map(|s| s.to_string()).collect(),
        cells,
    })
}
