use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use transevolve::harness::bench::{bench_costs, fit_exponent, stack_logit_costs, to_csv};
use transevolve::harness::train::{evaluate, predict_class, train, RunConfig, TrainConfig};
use transevolve::harness::{Checkpoint, Task};
use transevolve::model::{count_params, Architecture, Model, ModelConfig};
use transevolve::mutation::{self, Mutation};
use transevolve::oracles::{format_table, Suite};
use transevolve::{Error, Result};

#[derive(Parser)]
#[command(name = "transevolve", version, about = "Depth-evolving attention transformers on a CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Inject a named fault (for mutation tests only).
    #[arg(long, global = true, hide = true)]
    mutate: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a synthetic task.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the training seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on held-out samples.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        task: Task,
        /// Run config supplying task settings; defaults are used otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Greedy-decode (or classify) one comma-separated token sequence.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: String,
        /// Longest output; defaults to the model's limit.
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Print trainable parameter counts by component.
    CountParams {
        #[arg(long)]
        config: PathBuf,
    },
    /// Measure logit-construction costs over sequence lengths.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "128,256,512,1024")]
        lengths: Vec<usize>,
        /// CSV destination.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the brute-force verification suites.
    Verify {
        #[arg(long, value_enum, default_value = "all")]
        suite: Suite,
        /// JSON report destination.
        #[arg(long, default_value = "verify_report.json")]
        report: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(name) = &cli.mutate {
        match Mutation::parse(name) {
            Some(m) => mutation::set(m),
            None => {
                eprintln!("error: unknown mutation {name}");
                return ExitCode::from(2);
            }
        }
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// Reads either a `{model, train}` file or a bare model config.
fn load_model_config(path: &Path) -> Result<ModelConfig> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let config: ModelConfig = if value.get("model").is_some() {
        serde_json::from_value::<RunConfig>(value)?.model
    } else {
        serde_json::from_value(value)?
    };
    config.validate()?;
    Ok(config)
}

fn parse_ids(input: &str) -> Result<Vec<usize>> {
    input
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| Error::Input(format!("bad token id {s:?}"))))
        .collect()
}

fn default_train_config(model: &ModelConfig, task: Task) -> TrainConfig {
    let longest = if task.is_seq2seq() { model.max_len.saturating_sub(1) } else { model.max_len };
    TrainConfig {
        lr_max: 1.0,
        warmup_steps: 1,
        batch_size: 1,
        total_steps: 0,
        label_smoothing: 0.0,
        adam_beta1: 0.9,
        adam_beta2: 0.98,
        adam_eps: 1e-9,
        seed: 0,
        eval_every: 0,
        checkpoint_every: 0,
        task_min_len: 1,
        task_max_len: longest.clamp(1, 16),
        listops_depth: 3,
        eval_samples: 200,
        decode_samples: 50,
        target_accuracy: None,
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Train {
            config,
            task,
            out,
            seed,
            resume,
        } => {
            let mut run = RunConfig::load(&config)?;
            if let Some(seed) = seed {
                run.train.seed = seed;
            }
            let outcome = train(&run, task, &out, resume.as_deref(), |line| eprintln!("{line}"))?;
            let last = outcome.history.last();
            println!(
                "trained to step {} (loss {}), target {}",
                outcome.last_step,
                last.map_or("n/a".into(), |r| format!("{:.4}", r.loss)),
                if outcome.reached_target { "reached" } else { "not reached" }
            );
        }
        Command::Eval { checkpoint, task, config } => {
            let ckpt = Checkpoint::load(&checkpoint, None)?;
            let model: Model<f32> = ckpt.restore()?;
            let t = match config {
                Some(p) => RunConfig::load(&p)?.train,
                None => default_train_config(model.config(), task),
            };
            RunConfig {
                model: model.config().clone(),
                train: t.clone(),
            }
            .check_task(task)?;
            let report = evaluate(&model, task, &t, ckpt.step, task.is_seq2seq())?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Decode {
            checkpoint,
            input,
            max_len,
        } => {
            let model: Model<f32> = Checkpoint::load(&checkpoint, None)?.restore()?;
            let ids = parse_ids(&input)?;
            if let Some(bad) = ids.iter().find(|&&t| t >= model.config().vocab_size) {
                return Err(Error::Input(format!("token {bad} outside vocabulary of {}", model.config().vocab_size)));
            }
            match model.config().architecture {
                Architecture::EncoderDecoder => {
                    let out = model.greedy_decode(&ids, max_len.unwrap_or(usize::MAX))?;
                    println!("{}", out.iter().map(ToString::to_string).collect::<Vec<_>>().join(","));
                }
                Architecture::EncoderOnly => println!("{}", predict_class(&model, &ids)?),
            }
        }
        Command::CountParams { config } => {
            let c = load_model_config(&config)?;
            let b = count_params(&c)?;
            for (name, v) in [
                ("embedding", b.embedding),
                ("operators", b.operators),
                ("attention_layers", b.attention_layers),
                ("feed_forward", b.feed_forward),
                ("head", b.head),
                ("total", b.total),
            ] {
                println!("{name:<18}{v:>12}");
            }
        }
        Command::Bench { config, lengths, out } => {
            let c = load_model_config(&config)?;
            let rows = bench_costs(&c, &lengths)?;
            fs::write(&out, to_csv(&rows))?;
            print!("{}", to_csv(&rows));
            let ns: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
            let series = |f: fn(&transevolve::harness::bench::CostRow) -> u64| -> Vec<f64> {
                rows.iter().map(|r| f(r) as f64).collect()
            };
            if rows.len() >= 2 {
                println!(
                    "exponents: baseline {:.3}, initial {:.3}, per-depth {:.3}",
                    fit_exponent(&ns, &series(|r| r.baseline_measured))?,
                    fit_exponent(&ns, &series(|r| r.initial_measured))?,
                    fit_exponent(&ns, &series(|r| r.per_depth_measured))?
                );
            }
            let depth = c.depth_per_block;
            for &n in &lengths {
                let (te, base) = stack_logit_costs(n, c.d, c.d_prime, c.heads, depth);
                println!("n={n}: {depth}-deep stack logits evolving {te}, baseline {base}, ratio {:.3}", base as f64 / te as f64);
            }
            if !rows.iter().all(|r| r.counts_match()) {
                return Err(Error::Input("measured counts differ from the closed forms".into()));
            }
        }
        Command::Verify { suite, report } => {
            let reports = suite.run();
            print!("{}", format_table(&reports));
            for r in &reports {
                for line in &r.diagnostics {
                    println!("  [{}] {line}", r.suite);
                }
            }
            fs::write(&report, serde_json::to_string_pretty(&reports)?)?;
            let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.suite.as_str()).collect();
            if !failed.is_empty() {
                eprintln!("verify failed: {}", failed.join(", "));
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
