use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use stackparse::checkpoint;
use stackparse::config::KvFile;
use stackparse::data::{
    build_output_vocab, build_vocab, delexicalize, load_dataset, load_task_registry,
    write_overnight, Example, Format, Gazetteer,
};
use stackparse::eval::{
    config_fingerprint, evaluate, params_fingerprint, run_ablation, AblationData,
};
use stackparse::parser::{parse_greedy, train, ModelConfig, ModelParams, TrainConfig, TrainReport};
use stackparse::synth::{generate, SynthConfig};
use stackparse::transfer::{
    build_mtl_model, check_compatible, mtl_train, regimes, sweep_auxiliary, transplant,
    MtlSchedule, Policy, Setup, TaskData,
};
use stackparse::transition::{format_actions, oracle_actions};
use stackparse::variants::{variants, ABLATION_ORDER};
use stackparse::{Error, Result};

#[derive(Parser)]
#[command(
    name = "stackparse",
    version,
    about = "Transition-based semantic parser"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    task: Option<String>,
    /// Multi-task setup: separate NT heads (a) or a shared one (b).
    #[arg(long, global = true)]
    setup: Option<Setup>,
    #[arg(long, global = true)]
    no_attention: bool,
    #[arg(long, global = true, value_enum)]
    copy: Option<Switch>,
    /// Gazetteer for delexicalisation.
    #[arg(long, global = true)]
    delex: Option<PathBuf>,
    /// Print oracle action sequences instead of training.
    #[arg(long, global = true)]
    dump_oracle: bool,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Ablation variant (bl, no-att, delex, copy).
    #[arg(long, global = true)]
    variant: Option<String>,
    /// Write the report here instead of standard output.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Train a single-task model; saves to --checkpoint.
    Train {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Multi-task training over the tasks listed in --config.
    MtlTrain {
        #[arg(long)]
        policy: Option<Policy>,
    },
    /// Fine-tune the --checkpoint model's trunk on a new task.
    Finetune {
        #[command(flatten)]
        data: DataArgs,
        /// Where to save the fine-tuned model.
        #[arg(long)]
        save: PathBuf,
    },
    /// Score the --checkpoint model on a test file.
    Eval {
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value = "overnight-tsv")]
        format: Format,
    },
    /// Parse one utterance and print its linearised tree.
    Parse { utterance: Vec<String> },
    /// Convert tagged SLU data to `utterance<TAB>tree` lines.
    ConvertSlu {
        #[arg(long)]
        input: PathBuf,
    },
    /// Target dev score for every auxiliary task in --config.
    SweepAux {
        #[arg(long, default_value = "mtl-b")]
        regime: String,
        #[arg(long)]
        policy: Option<Policy>,
    },
    /// Emit a synthetic corpus (`synth.*` config keys).
    GenSynth,
    /// Train and test every ablation variant over several seeds.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
}

#[derive(clap::Args)]
struct DataArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long, default_value = "overnight-tsv")]
    format: Format,
}

struct Ctx {
    cli: Cli,
    kv: KvFile,
}

impl Ctx {
    fn model_config(&self) -> Result<ModelConfig> {
        let mut c = ModelConfig::default();
        c.apply_kv(&self.kv)?;
        if let Some(v) = &self.cli.variant {
            variants().get(v)?.configure(&mut c);
        }
        if self.cli.no_attention {
            c.attention = false;
        }
        match self.cli.copy {
            Some(Switch::On) => c.copy = true,
            Some(Switch::Off) => c.copy = false,
            None => {}
        }
        c.validate()?;
        Ok(c)
    }

    fn train_config(&self) -> Result<TrainConfig> {
        let mut c = TrainConfig::default();
        c.apply_kv(&self.kv)?;
        if let Some(s) = self.cli.seed {
            c.seed = s;
        }
        Ok(c)
    }

    fn task_id(&self) -> String {
        self.cli.task.clone().unwrap_or_else(|| "main".into())
    }

    fn gazetteer(&self) -> Result<Option<Gazetteer>> {
        let wants = self
            .cli
            .variant
            .as_deref()
            .map(|v| variants().get(v).map(|x| x.delexicalizes()))
            .transpose()?
            .unwrap_or(false);
        match (&self.cli.delex, wants) {
            (Some(p), _) => Gazetteer::load(p).map(Some),
            (None, true) => Err(Error::Config(
                "this variant needs --delex <gazetteer>".into(),
            )),
            (None, false) => Ok(None),
        }
    }

    fn policy(&self, flag: Option<Policy>) -> Result<Policy> {
        match flag {
            Some(p) => Ok(p),
            None => match self.kv.get("mtl.policy").or(self.kv.get("policy")) {
                Some(p) => p.parse(),
                None => Ok(Policy::Proportional),
            },
        }
    }

    fn setup(&self) -> Result<Setup> {
        match self.cli.setup {
            Some(s) => Ok(s),
            None => match self.kv.get("mtl.setup").or(self.kv.get("setup")) {
                Some(s) => s.parse(),
                None => Ok(Setup::B),
            },
        }
    }

    fn target(&self) -> Result<String> {
        self.cli
            .task
            .clone()
            .or_else(|| self.kv.get("mtl.target").map(str::to_string))
            .ok_or_else(|| Error::Config("no target task: pass --task or set mtl.target".into()))
    }

    fn registry_tasks(&self, seed: u64) -> Result<Vec<TaskData>> {
        let sources = load_task_registry(&self.kv)?;
        if sources.is_empty() {
            return Err(Error::Config(
                "--config lists no tasks (`<id>.path = ...`)".into(),
            ));
        }
        sources
            .iter()
            .map(|s| {
                let split = s.load(seed)?;
                Ok(TaskData {
                    id: s.id.clone(),
                    train: split.train,
                    dev: split.dev,
                })
            })
            .collect()
    }

    fn checkpoint_path(&self) -> Result<&Path> {
        self.cli
            .checkpoint
            .as_deref()
            .ok_or_else(|| Error::Config("--checkpoint <path> is required".into()))
    }

    fn load_model(&self) -> Result<ModelParams> {
        checkpoint::load(self.checkpoint_path()?)
    }

    fn model_task(&self, model: &ModelParams) -> Result<String> {
        if let Some(t) = &self.cli.task {
            return Ok(t.clone());
        }
        let ids: Vec<&str> = model.task_ids().collect();
        match ids.as_slice() {
            [one] => Ok(one.to_string()),
            _ => Err(Error::Config(format!(
                "model has tasks {}; choose one with --task",
                ids.join(", ")
            ))),
        }
    }

    fn emit(&self, text: &str) -> Result<()> {
        match &self.cli.out {
            Some(p) => {
                std::fs::write(p, text).map_err(|e| Error::Invalid(format!("{}: {e}", p.display())))
            }
            None => {
                let mut so = std::io::stdout().lock();
                so.write_all(text.as_bytes())
                    .and_then(|_| so.flush())
                    .map_err(|e| Error::Invalid(format!("stdout: {e}")))
            }
        }
    }
}

fn load_pair(data: &DataArgs, task: &str) -> Result<(Vec<Example>, Vec<Example>)> {
    let train = load_dataset(&data.train, data.format, task)?;
    let dev = match &data.dev {
        Some(p) => load_dataset(p, data.format, task)?,
        None => Vec::new(),
    };
    Ok((train, dev))
}

fn header(lines: &[(&str, String)]) -> String {
    let mut s = String::new();
    for (k, v) in lines {
        let _ = writeln!(s, "# {k}\t{v}");
    }
    s
}

fn opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.6}"))
}

fn train_report(meta: &[(&str, String)], r: &TrainReport) -> String {
    let mut s = header(meta);
    let _ = writeln!(
        s,
        "# best_epoch\t{}\n# best_score\t{:.6}\n# skipped\t{}",
        r.best_epoch, r.best_score, r.skipped
    );
    s.push_str("epoch\tloss\ttrain_em\tdev_em\n");
    for e in &r.epochs {
        let _ = writeln!(
            s,
            "{}\t{:.6}\t{}\t{}",
            e.epoch,
            e.loss,
            opt(e.train_em),
            opt(e.dev_em)
        );
    }
    s
}

fn dump_oracle(examples: &[Example], copy: bool) -> Result<String> {
    let vocab = build_output_vocab(examples);
    let mut s = String::new();
    for e in examples {
        let _ = writeln!(s, "# {}\t{}", e.tokens.join(" "), e.gold.linearize());
        match oracle_actions(&e.gold, &e.tokens, &vocab.terminals, copy) {
            Ok(a) => s.push_str(&format_actions(&a)),
            Err(err) => {
                let _ = writeln!(s, "# error: {err}");
            }
        }
        s.push('\n');
    }
    Ok(s)
}

fn run(ctx: &Ctx) -> Result<()> {
    match &ctx.cli.command {
        Command::Train { data } => {
            let task = ctx.task_id();
            let (mut tr, mut dv) = load_pair(data, &task)?;
            let mc = ctx.model_config()?;
            if ctx.cli.dump_oracle {
                return ctx.emit(&dump_oracle(&tr, mc.copy_active())?);
            }
            if let Some(g) = ctx.gazetteer()? {
                tr = tr.iter().map(|e| delexicalize(e, &g).0).collect();
                dv = dv.iter().map(|e| delexicalize(e, &g).0).collect();
            }
            let tc = ctx.train_config()?;
            let mut model = ModelParams::single_task(
                mc.clone(),
                &build_vocab(&tr, tc.min_count),
                &task,
                tc.seed,
            )?;
            let r = train(&mut model, &task, &tr, &dv, &tc)?;
            if let Some(p) = &ctx.cli.checkpoint {
                checkpoint::save(&model, p)?;
            }
            ctx.emit(&train_report(
                &[
                    ("command", "train".into()),
                    ("task", task),
                    ("seed", tc.seed.to_string()),
                    ("config", config_fingerprint(&mc, &tc)),
                    ("params", params_fingerprint(&model)),
                ],
                &r,
            ))
        }
        Command::MtlTrain { policy } => {
            let tc = ctx.train_config()?;
            let mc = ctx.model_config()?;
            let tasks = ctx.registry_tasks(tc.seed)?;
            let target = ctx.target()?;
            let setup = ctx.setup()?;
            let policy = ctx.policy(*policy)?;
            let mut model = build_mtl_model(mc.clone(), &tasks, setup, tc.min_count, tc.seed)?;
            let schedule = MtlSchedule {
                policy,
                seed: tc.seed,
                epochs: tc.epochs,
            };
            let r = mtl_train(&mut model, &tasks, &target, &schedule, &tc, &mut |_, _| {
                Ok(())
            })?;
            if let Some(p) = &ctx.cli.checkpoint {
                checkpoint::save(&model, p)?;
            }
            let mut s = header(&[
                ("command", "mtl-train".into()),
                ("target", target.clone()),
                ("setup", setup.to_string()),
                ("policy", policy.to_string()),
                ("seed", tc.seed.to_string()),
                ("config", config_fingerprint(&mc, &tc)),
                ("params", params_fingerprint(&model)),
                ("best_epoch", r.best_epoch.to_string()),
                ("best_score", format!("{:.6}", r.best_score)),
                ("steps", r.steps.to_string()),
            ]);
            let ids: Vec<&str> = tasks.iter().map(|t| t.id.as_str()).collect();
            let _ = writeln!(
                s,
                "epoch\ttarget_dev_em\t{}",
                ids.iter()
                    .map(|i| format!("loss_{i}"))
                    .collect::<Vec<_>>()
                    .join("\t")
            );
            for e in &r.epochs {
                let losses: Vec<String> =
                    ids.iter().map(|i| format!("{:.6}", e.losses[*i])).collect();
                let _ = writeln!(
                    s,
                    "{}\t{:.6}\t{}",
                    e.epoch,
                    e.target_dev_em,
                    losses.join("\t")
                );
            }
            ctx.emit(&s)
        }
        Command::Finetune { data, save } => {
            let source = ctx.load_model()?;
            if ctx.cli.config.is_some() {
                check_compatible(&source, &ctx.model_config()?)?;
            }
            let task = ctx.task_id();
            let (tr, dv) = load_pair(data, &task)?;
            let tc = ctx.train_config()?;
            let target = TaskData {
                id: task.clone(),
                train: tr,
                dev: dv,
            };
            let mut model = transplant(&source, &target, tc.seed)?;
            let r = train(&mut model, &task, &target.train, &target.dev, &tc)?;
            checkpoint::save(&model, save)?;
            ctx.emit(&train_report(
                &[
                    ("command", "finetune".into()),
                    ("task", task),
                    ("source", params_fingerprint(&source)),
                    ("seed", tc.seed.to_string()),
                    ("config", config_fingerprint(&model.config, &tc)),
                    ("params", params_fingerprint(&model)),
                ],
                &r,
            ))
        }
        Command::Eval { test, format } => {
            let model = ctx.load_model()?;
            let task = ctx.model_task(&model)?;
            let examples = load_dataset(test, *format, &task)?;
            let gaz = ctx.gazetteer()?;
            let r = evaluate(&model, &task, &examples, gaz.as_ref())?;
            let mut r = r
                .with_meta("command", "eval")
                .with_meta("seed", model.seed())
                .with_meta(
                    "config",
                    config_fingerprint(&model.config, &TrainConfig::default()),
                )
                .with_meta("params", params_fingerprint(&model));
            if let Some(p) = &ctx.cli.delex {
                r = r.with_meta("gazetteer", p.display());
            }
            ctx.emit(&r.to_tsv())
        }
        Command::Parse { utterance } => {
            let model = ctx.load_model()?;
            let task = ctx.model_task(&model)?;
            let words: Vec<String> = utterance
                .iter()
                .flat_map(|u| u.split_whitespace())
                .map(str::to_string)
                .collect();
            let gaz = ctx.gazetteer()?;
            let (tokens, alignment) = match &gaz {
                Some(g) => {
                    let (t, a) = stackparse::data::delex::delexicalize_tokens(&words, g);
                    (t, Some(a))
                }
                None => (words, None),
            };
            let d = parse_greedy(&model, &task, &tokens)?;
            let tree = d.tree.as_ref().or(d.partial.as_ref());
            let tree = match (tree, &alignment) {
                (Some(t), Some(a)) => Some(stackparse::data::relexicalize_tree(t, a)),
                (t, _) => t.cloned(),
            };
            if !d.is_complete() {
                log::warn!("action budget exhausted; printing the partial tree");
            }
            ctx.emit(&format!(
                "{}\n",
                tree.map(|t| t.linearize()).unwrap_or_default()
            ))
        }
        Command::ConvertSlu { input } => {
            let task = ctx.task_id();
            let examples = load_dataset(input, Format::SluTsv, &task)?;
            ctx.emit(&write_overnight(&examples))
        }
        Command::SweepAux { regime, policy } => {
            let tc = ctx.train_config()?;
            let mc = ctx.model_config()?;
            let tasks = ctx.registry_tasks(tc.seed)?;
            let target_id = ctx.target()?;
            let target =
                tasks
                    .iter()
                    .find(|t| t.id == target_id)
                    .ok_or_else(|| Error::Unknown {
                        kind: "target task",
                        name: target_id.clone(),
                    })?;
            let reg = regimes();
            let policy = ctx.policy(*policy)?;
            let rows = sweep_auxiliary(reg.get(regime)?, target, &tasks, &mc, &tc, policy)?;
            let mut s = header(&[
                ("command", "sweep-aux".into()),
                ("regime", regime.clone()),
                ("policy", policy.to_string()),
                ("seed", tc.seed.to_string()),
                ("config", config_fingerprint(&mc, &tc)),
            ]);
            s.push_str("target\tauxiliary\tdev_em\n");
            for (t, a, em) in rows {
                let _ = writeln!(s, "{t}\t{a}\t{em:.6}");
            }
            ctx.emit(&s)
        }
        Command::GenSynth => {
            let mut sc = SynthConfig::default();
            sc.apply_kv(&ctx.kv)?;
            if let Some(s) = ctx.cli.seed {
                sc.seed = s;
            }
            if let Some(t) = &ctx.cli.task {
                sc.task_id = t.clone();
            }
            ctx.emit(&write_overnight(&generate(&sc)?))
        }
        Command::Ablate { data, test, seeds } => {
            let task = ctx.task_id();
            let (tr, dv) = load_pair(data, &task)?;
            let te = load_dataset(test, data.format, &task)?;
            let gaz = match &ctx.cli.delex {
                Some(p) => Some(Gazetteer::load(p)?),
                None => None,
            };
            // variant switches are applied per column, not globally
            let mut mc = ModelConfig::default();
            mc.apply_kv(&ctx.kv)?;
            let tc = ctx.train_config()?;
            let names: Vec<&str> = match &ctx.cli.variant {
                Some(v) => vec![v.as_str()],
                None => ABLATION_ORDER.to_vec(),
            };
            let table = run_ablation(
                &AblationData {
                    task: &task,
                    train: &tr,
                    dev: &dv,
                    test: &te,
                    gazetteer: gaz.as_ref(),
                },
                &names,
                &mc,
                &tc,
                seeds,
            )?;
            ctx.emit(&table.to_tsv())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let kv = match &cli.config {
        Some(p) => match KvFile::load(p) {
            Ok(kv) => kv,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::FAILURE;
            }
        },
        None => KvFile::default(),
    };
    let ctx = Ctx { cli, kv };
    match run(&ctx) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
