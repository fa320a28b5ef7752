use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use flowlab::config::{RunConfig, Task};
use flowlab::run::run;

#[derive(Parser)]
#[command(name = "flowlab", version, about = "Flow-matching teachers, consistency and distribution-matching distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: config `out_dir`, else `runs/<task>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config teacher checkpoint.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Overrides the config student checkpoint.
    #[arg(long)]
    student: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a flow-matching teacher.
    TrainTeacher(Common),
    /// Distill a teacher into a consistency student.
    DistillCm(Common),
    /// Fine-tune a consistency student with distribution matching.
    DistillDmd(Common),
    /// Draw samples from a checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Sampling steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Compare a student against its teacher.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Also time Euler against consistency sampling.
        #[arg(long)]
        speedup: bool,
    },
    /// Build, dump and verify a small packed composition dataset.
    PackDemo(Common),
}

fn execute(cli: Cli) -> Result<()> {
    let (task, common, steps, speedup) = match cli.command {
        Command::TrainTeacher(c) => (Task::TrainTeacher, c, None, false),
        Command::DistillCm(c) => (Task::DistillCm, c, None, false),
        Command::DistillDmd(c) => (Task::DistillDmd, c, None, false),
        Command::Sample { common, steps } => (Task::Sample, common, steps, false),
        Command::Eval { common, speedup } => (Task::Eval, common, None, speedup),
        Command::PackDemo(c) => (Task::PackDemo, c, None, false),
    };
    let mut config = RunConfig::load(&common.config).with_context(|| format!("reading {}", common.config.display()))?;
    if let Some(t) = config.task {
        anyhow::ensure!(t == task, "config is for `{}` but `{}` was requested", t.name(), task.name());
    }
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if common.teacher.is_some() {
        config.teacher = common.teacher;
    }
    if common.student.is_some() {
        config.student = common.student;
    }
    if let Some(steps) = steps {
        config.sample.steps = steps;
    }
    config.eval.speedup |= speedup;
    let out = common
        .out
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(task.name()));
    let outcome = run(&config, task, &out).with_context(|| format!("{} failed", task.name()))?;
    print!("{}", outcome.summary);
    for a in &outcome.artifacts {
        println!("wrote {}", a.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
