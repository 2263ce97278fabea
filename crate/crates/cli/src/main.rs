mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use selfq_core::evalharness::{
    evaluate, render_markdown_report, run_ablation, AblationCell, AblationSpec, AblationTable, EvalMode,
};
use selfq_core::inference::CachedModel;
use selfq_core::model::Vocabulary;
use selfq_core::taskgen::{generate_dataset, read_dataset, write_dataset, AnswerType, Dataset};
use selfq_core::trainer::{load_checkpoint, metrics_line, save_checkpoint, AblationMode, Trainer};

use config::RunConfig;

const CONFIG_ECHO: &str = "config.txt";
const CHECKPOINT: &str = "checkpoint.sqcl";
const METRICS: &str = "metrics.jsonl";

#[derive(Parser)]
#[command(
    name = "selfq",
    version,
    about = "Self-questioning VQA: data, training, evaluation and ablations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key = value config file; flags override it.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Root seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory (defaults to the matching *_dir config key).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, value_name = "N", default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    workers: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train.jsonl and eval.jsonl.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train on <data_dir>/train.jsonl, writing a checkpoint and per-step metrics.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Training variant.
        #[arg(long, value_name = "NAME", value_parser = AblationMode::ALL.map(AblationMode::name))]
        ablation_mode: Option<String>,
    },
    /// Evaluate a checkpoint on <data_dir>/eval.jsonl.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Inference mode.
        #[arg(long, value_name = "MODE", default_value = "self_question", value_parser = ["self_question", "direct"])]
        mode: String,
        /// Checkpoint file (defaults to <ckpt_dir>/checkpoint.sqcl).
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate every variant over n_seeds seeds starting at --seed.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Re-render report.md from a finished ablation directory.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<selfq_core::Error> for Failure {
    fn from(e: selfq_core::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn io<T>(r: std::io::Result<T>, what: &Path) -> Result<T, Failure> {
    r.map_err(|e| Failure::Runtime(format!("{}: {e}", what.display())))
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = io(fs::read_to_string(path), path)?;
            RunConfig::parse(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn prepare_out(dir: &Path, cfg: &RunConfig) -> Result<(), Failure> {
    io(fs::create_dir_all(dir), dir)?;
    let echo = dir.join(CONFIG_ECHO);
    io(fs::write(&echo, cfg.render()), &echo)
}

fn histogram(name: &str, data: &Dataset) {
    let mut depths: BTreeMap<usize, usize> = BTreeMap::new();
    let mut types: BTreeMap<AnswerType, usize> = AnswerType::ALL.iter().map(|&t| (t, 0)).collect();
    for e in &data.examples {
        *depths.entry(e.depth).or_default() += 1;
        *types.entry(e.answer_type).or_default() += 1;
    }
    println!("{name}: {} examples", data.len());
    for (d, c) in &depths {
        println!("  depth {d:<9} {c:>6}");
    }
    for (t, c) in &types {
        println!("  {:<15} {c:>6}", t.name());
    }
}

fn gen_data(common: &Common) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    cfg.validate()?;
    let out = common.out.clone().unwrap_or_else(|| cfg.data_dir.clone());
    prepare_out(&out, &cfg)?;
    for (split, n) in [("train", cfg.n_train), ("eval", cfg.n_eval)] {
        let data = generate_dataset(&cfg.data_config(n, split), cfg.data_seed(&format!("{split}-data")))?;
        let path = out.join(format!("{split}.jsonl"));
        write_dataset(&data, &path)?;
        histogram(&path.display().to_string(), &data);
    }
    Ok(())
}

fn train(common: &Common, resume: bool, ablation_mode: Option<&str>) -> Result<(), Failure> {
    let mut cfg = load_config(common)?;
    if let Some(mode) = ablation_mode {
        cfg.train.ablation_mode = AblationMode::from_name(mode)?;
    }
    cfg.validate()?;
    let out = common.out.clone().unwrap_or_else(|| cfg.ckpt_dir.clone());
    let vocab = Vocabulary::default();
    let data = read_dataset(cfg.data_dir.join("train.jsonl"), cfg.model.image_side)?;
    let ckpt_path = out.join(CHECKPOINT);
    let metrics_path = out.join(METRICS);

    let mut trainer = if resume {
        let mut ckpt = load_checkpoint(&ckpt_path)?;
        ckpt.train_config.max_steps = cfg.train.max_steps;
        if ckpt.model_config() != &cfg.model_config() || ckpt.train_config != cfg.train_config() {
            return Err(Failure::Runtime(format!(
                "{} was written by a different configuration",
                ckpt_path.display()
            )));
        }
        Trainer::resume(ckpt, &data, &vocab)?
    } else {
        Trainer::new(cfg.train_config(), &cfg.model_config(), &data, &vocab)?
    };
    trainer = trainer.with_workers(common.workers as usize);
    prepare_out(&out, &cfg)?;

    let start = trainer.step_count();
    let kept: String = if resume && start > 0 {
        let text = io(fs::read_to_string(&metrics_path), &metrics_path)?;
        text.lines().take(start).map(|l| format!("{l}\n")).collect()
    } else {
        String::new()
    };
    let file = io(fs::File::create(&metrics_path), &metrics_path)?;
    let mut metrics = BufWriter::new(file);
    io(metrics.write_all(kept.as_bytes()), &metrics_path)?;

    let every = cfg.checkpoint_every;
    let result = trainer.run(|t, m| {
        writeln!(metrics, "{}", metrics_line(m)).map_err(selfq_core::Error::from)?;
        let done = m.step + 1;
        if done % every == 0 || done == t.config().max_steps {
            metrics.flush().map_err(selfq_core::Error::from)?;
            save_checkpoint(&t.checkpoint(), &ckpt_path)?;
            println!("step {done:>6}  loss {:.4}  token_acc {:.4}", m.total, m.token_acc);
        }
        Ok(ControlFlow::Continue(()))
    });
    io(metrics.flush(), &metrics_path)?;
    result?;
    if trainer.step_count() == start {
        save_checkpoint(&trainer.checkpoint(), &ckpt_path)?;
    }
    println!("checkpoint {}", ckpt_path.display());
    Ok(())
}

fn eval(common: &Common, mode: &str, checkpoint: Option<&Path>) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    cfg.validate()?;
    let mode = EvalMode::from_name(mode)?;
    let ckpt_path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.ckpt_dir.join(CHECKPOINT));
    let ckpt = load_checkpoint(&ckpt_path)?;
    let data = read_dataset(cfg.data_dir.join("eval.jsonl"), ckpt.model_config().image_side)?;
    let vocab = Vocabulary::default();
    let model = CachedModel {
        params: &ckpt.params,
        strict: ckpt.train_config.strict_conditioning,
    };
    let evaluation = evaluate(
        &model,
        &vocab,
        &data,
        mode,
        cfg.k_max,
        common.workers as usize,
        cfg.seed,
    )?;
    evaluation.report.validate()?;

    let out = common.out.clone().unwrap_or_else(|| cfg.report_dir.clone());
    prepare_out(&out, &cfg)?;
    let report_path = out.join(format!("report_{mode}.json"));
    let report = serde_json::to_string_pretty(&evaluation.report).expect("report serializes");
    io(fs::write(&report_path, report + "\n"), &report_path)?;
    let traces_path = out.join(format!("traces_{mode}.jsonl"));
    let traces: String = evaluation
        .traces
        .iter()
        .map(|t| serde_json::to_string(t).expect("trace serializes") + "\n")
        .collect();
    io(fs::write(&traces_path, traces), &traces_path)?;

    let r = &evaluation.report;
    println!(
        "{mode}: accuracy {:.4} over {} examples",
        r.overall_accuracy, r.n_examples
    );
    for (d, a) in &r.by_depth {
        println!("  depth {d:<9} {a:.4}  (n={})", r.depth_counts[d]);
    }
    for (t, a) in &r.by_answer_type {
        println!("  {:<15} {a:.4}  (n={})", t.name(), r.type_counts[t]);
    }
    println!(
        "  chain steps     {:.4}  (n={})",
        r.chain_step_accuracy, r.chain_steps_scored
    );
    println!("  well formed     {:.4}", r.well_formed_rate);
    println!("report {}", report_path.display());
    Ok(())
}

fn write_ablation(out: &Path, table: &AblationTable) -> Result<(), Failure> {
    let files = [
        ("ablation.json", table.to_json() + "\n"),
        ("ablation.jsonl", table.jsonl()),
        ("ablation.txt", table.render_text()),
        (
            "report.md",
            render_markdown_report(table, AblationMode::Full.name(), AblationMode::FinalOnly.name())?,
        ),
    ];
    for (name, body) in files {
        let path = out.join(name);
        io(fs::write(&path, body), &path)?;
    }
    Ok(())
}

fn ablate(common: &Common) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    cfg.validate()?;
    let out = common.out.clone().unwrap_or_else(|| cfg.report_dir.clone());
    prepare_out(&out, &cfg)?;
    let spec = AblationSpec::standard(
        cfg.ablation_seeds(),
        cfg.n_train,
        cfg.n_eval,
        cfg.train.lambda_ans,
        cfg.train.lambda_final,
    );
    let progress = |c: &AblationCell| {
        let outcome = match (&c.report, &c.error) {
            (Some(r), _) => format!("accuracy {:.4}", r.overall_accuracy),
            (None, Some(e)) => format!("failed: {e}"),
            (None, None) => "no report".into(),
        };
        println!(
            "{:<24} seed {:<6} {outcome}  wallclock {:.1} s",
            c.variant,
            c.seed,
            c.wallclock_ms as f64 / 1000.0
        );
    };
    let data_config = cfg.data_config(cfg.n_train, "train");
    let table = run_ablation(
        &spec,
        &cfg.model,
        &cfg.train,
        &data_config,
        cfg.k_max,
        common.workers as usize,
        &progress,
    )?;
    write_ablation(&out, &table)?;
    print!("{}", table.render_text());
    println!("tables and report in {}", out.display());
    Ok(())
}

fn report(common: &Common) -> Result<(), Failure> {
    let cfg = load_config(common)?;
    let out = common.out.clone().unwrap_or_else(|| cfg.report_dir.clone());
    let path = out.join("ablation.json");
    let table = AblationTable::from_json(&io(fs::read_to_string(&path), &path)?)?;
    let md = render_markdown_report(&table, AblationMode::Full.name(), AblationMode::FinalOnly.name())?;
    let md_path = out.join("report.md");
    io(fs::write(&md_path, &md), &md_path)?;
    print!("{md}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::GenData { common } => gen_data(common),
        Command::Train {
            common,
            resume,
            ablation_mode,
        } => train(common, *resume, ablation_mode.as_deref()),
        Command::Eval {
            common,
            mode,
            checkpoint,
        } => eval(common, mode, checkpoint.as_deref()),
        Command::Ablate { common } => ablate(common),
        Command::Report { common } => report(common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
