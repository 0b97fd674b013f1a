#![allow(dead_code)]

use rand::Rng;
use stackparse::data::{parse_overnight_line, Example, Tree};
use stackparse::parser::ModelConfig;

pub const LABELS: [&str; 6] = ["and", "or", "count", "filter", "max", "near"];
pub const LEAVES: [&str; 8] = ["a", "b", "c", "d", "x", "y", "z", "w"];

/// Random tree with depth (leaf level included) at most `max_depth` and at
/// most `max_branch` children per node.
pub fn random_tree<R: Rng>(rng: &mut R, max_depth: usize, max_branch: usize) -> Tree {
    let label = LABELS[rng.gen_range(0..LABELS.len())];
    let n = rng.gen_range(1..=max_branch);
    let children = (0..n)
        .map(|_| {
            if max_depth > 2 && rng.gen_bool(0.4) {
                random_tree(rng, max_depth - 1, max_branch)
            } else {
                Tree::leaf(LEAVES[rng.gen_range(0..LEAVES.len())])
            }
        })
        .collect();
    Tree::node(label, children)
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        word_dim: 4,
        char_dim: 3,
        char_hidden: 3,
        buffer_hidden: 4,
        stack_hidden: 4,
        history_hidden: 3,
        symbol_dim: 4,
        attention_dim: 3,
        ff_hidden: 4,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

pub fn examples(task: &str, lines: &[&str]) -> Vec<Example> {
    lines
        .iter()
        .map(|l| parse_overnight_line(l, task).unwrap())
        .collect()
}

/// Central-difference check of `grad` against `loss` over every scalar of
/// every parameter. Returns the largest relative error, with denominators
/// floored at `floor` so that gradients that are both ~0 compare absolutely.
pub fn finite_difference_check<L, G>(
    store: &mut stackparse::numerics::ParamStore,
    loss: L,
    grad: G,
    h: f64,
    floor: f64,
) -> f64
where
    L: Fn(&stackparse::numerics::ParamStore) -> f64,
    G: Fn(&stackparse::numerics::ParamStore) -> stackparse::numerics::Gradients,
{
    let analytic = grad(store);
    let ids: Vec<_> = store.ids().collect();
    let mut worst = 0.0f64;
    for id in ids {
        let dense = analytic.dense(id, store);
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + h;
            let up = loss(store);
            store.get_mut(id).data_mut()[k] = orig - h;
            let down = loss(store);
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = dense.data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Central differences at h = 1e-5 on a loss of magnitude ~10 carry ~1e-10
/// of roundoff, so gradients below this are compared absolutely.
pub const PARSER_FD_FLOOR: f64 = 1e-5;

/// Worst relative error of the full teacher-forced loss gradient (attention
/// and copy on) on a 3-token example.
pub fn parser_gradient_error(seed: u64) -> f64 {
    use stackparse::data::build_vocab;
    use stackparse::parser::{example_loss, prepare, ModelParams};

    let train = examples("t", &["show red cars\t(find (color red) cars)"]);
    let mut cfg = tiny_config();
    cfg.copy = true;
    let mut model = ModelParams::single_task(cfg, &build_vocab(&train, 1), "t", seed).unwrap();
    let (prepared, _) = prepare(&model, "t", &train).unwrap();
    let p = prepared[0].clone();
    let mut store = std::mem::take(&mut model.store);
    let with = |m: &ModelParams, s: &stackparse::numerics::ParamStore| {
        let mut m = m.clone();
        m.store = s.clone();
        example_loss(&m, "t", &p, None).unwrap()
    };
    finite_difference_check(
        &mut store,
        |s| with(&model, s).0,
        |s| with(&model, s).1,
        1e-5,
        PARSER_FD_FLOOR,
    )
}

pub struct MtlAudit {
    pub steps: usize,
    /// Steps after which some task's view of the trunk disagreed.
    pub trunk_mismatches: usize,
    /// Steps that changed another task's head tensors.
    pub head_leaks: usize,
    /// Tasks whose updates put gradient on the shared NT head.
    pub shared_nt_contributors: std::collections::BTreeSet<String>,
}

pub fn two_small_tasks() -> Vec<stackparse::transfer::TaskData> {
    use stackparse::synth::{generate, SynthConfig};
    use stackparse::transfer::TaskData;
    let a = SynthConfig {
        sentences: 24,
        task_id: "alpha".into(),
        ..SynthConfig::default()
    };
    let b = SynthConfig {
        sentences: 12,
        task_id: "beta".into(),
        namespace: "bt".into(),
        seed: 5,
        ..SynthConfig::default()
    };
    vec![
        TaskData {
            id: "alpha".into(),
            train: generate(&a).unwrap(),
            dev: Vec::new(),
        },
        TaskData {
            id: "beta".into(),
            train: generate(&b).unwrap(),
            dev: Vec::new(),
        },
    ]
}

/// Runs `steps` multi-task updates and checks the sharing invariants after
/// each one.
pub fn audit_mtl(setup: stackparse::transfer::Setup, steps: usize) -> MtlAudit {
    use stackparse::parser::TrainConfig;
    use stackparse::transfer::{
        build_mtl_model, mtl_train, transplant, MtlSchedule, Policy, SHARED_NT_KEY,
    };
    use std::collections::{BTreeMap, BTreeSet};

    let tasks = two_small_tasks();
    let mut model = build_mtl_model(tiny_config(), &tasks, setup, 1, 0).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        patience: usize::MAX,
        epochs: steps.div_ceil(9),
        ..TrainConfig::default()
    };
    let schedule = MtlSchedule {
        policy: Policy::Proportional,
        seed: 0,
        epochs: cfg.epochs,
    };
    let head_hash = |m: &stackparse::parser::ModelParams, t: &str| {
        m.store.content_hash(&m.task_head_ids(t).unwrap())
    };
    let mut prev: BTreeMap<String, String> = tasks
        .iter()
        .map(|t| (t.id.clone(), head_hash(&model, &t.id)))
        .collect();
    let shared_nt = if setup == stackparse::transfer::Setup::B {
        model.nt_head_ids(SHARED_NT_KEY)
    } else {
        Vec::new()
    };
    let mut audit = MtlAudit {
        steps: 0,
        trunk_mismatches: 0,
        head_leaks: 0,
        shared_nt_contributors: BTreeSet::new(),
    };
    mtl_train(
        &mut model,
        &tasks,
        "alpha",
        &schedule,
        &cfg,
        &mut |info, m| {
            if audit.steps >= steps {
                return Ok(());
            }
            audit.steps += 1;
            let live = m.trunk_hash();
            for t in &tasks {
                // each task's own single-task view of the shared trunk
                if transplant(m, t, 0)?.trunk_hash() != live {
                    audit.trunk_mismatches += 1;
                }
            }
            for t in &tasks {
                let h = head_hash(m, &t.id);
                // setup (b) heads include the shared NT head, which every task updates
                if t.id != info.task && setup == stackparse::transfer::Setup::A && h != prev[&t.id]
                {
                    audit.head_leaks += 1;
                }
                prev.insert(t.id.clone(), h);
            }
            if shared_nt
                .iter()
                .any(|&id| info.grads.get(id).is_some_and(|g| g.sq_norm() > 0.0))
            {
                audit.shared_nt_contributors.insert(info.task.to_string());
            }
            Ok(())
        },
    )
    .unwrap();
    audit
}
