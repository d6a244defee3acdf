use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use prismvau_core::ape::Task;
use prismvau_core::demo::write_demo;
use prismvau_core::par::Exec;
use prismvau_core::pipeline::{
    cmd_fuse_eval, cmd_optimize, cmd_refine, cmd_report, cmd_score_coarse, OptimizeSummary, PipelineError,
    RunConfig, StageOptions,
};
use prismvau_review::AppState;

/// Weakly-supervised video anomaly detection and understanding pipeline.
#[derive(Debug, Parser)]
#[command(name = "prismvau", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct StageArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Recompute outputs that already exist.
    #[arg(long)]
    force: bool,
    /// Worker threads for per-video work; 1 runs sequentially.
    #[arg(long, value_name = "N", value_parser = clap::value_parser!(u32).range(1..))]
    jobs: Option<u32>,
}

impl StageArgs {
    fn options(&self) -> StageOptions {
        let jobs = self.jobs.map(|j| j as usize);
        let exec = if jobs == Some(1) { Exec::Sequential } else { Exec::Parallel };
        StageOptions { force: self.force, jobs, exec }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score every video against the textual anchors.
    ScoreCoarse(StageArgs),
    /// Optimize the normal/abnormal anchor texts on the train split.
    OptimizeAnchors(StageArgs),
    /// Optimize the VAU system/user prompts on the train split.
    OptimizeVau(StageArgs),
    /// Query the multimodal model segment by segment.
    Refine(StageArgs),
    /// Fuse coarse and refined curves and evaluate them.
    FuseEval(StageArgs),
    /// Print the evaluation report.
    Report {
        #[arg(long)]
        config: PathBuf,
    },
    /// Serve the review API (and console bundle) over the run directory.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Directory with the built console.
        #[arg(long = "static", value_name = "DIR")]
        static_dir: Option<PathBuf>,
    },
    /// Write the synthetic mini-dataset, mock LLM script and config.
    Demo {
        #[arg(long, default_value = "prismvau-demo")]
        out: PathBuf,
    },
}

fn print_optimize(s: &OptimizeSummary) {
    let (la, lb) = s.task.labels();
    println!(
        "optimize-{}: {} iterations run (last {}), best fitness {:.2}{}{}",
        s.task.as_str(),
        s.iterations_run,
        s.last_iteration,
        s.best.fitness.unwrap_or(f64::NAN),
        if s.stopped_early { ", stopped early" } else { "" },
        if s.resumed { ", resumed" } else { "" },
    );
    println!("{la}: {}\n{lb}: {}", s.best.field_a, s.best.field_b);
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::ScoreCoarse(a) => println!("{}", cmd_score_coarse(&RunConfig::load(&a.config)?, a.options())?),
        Command::Refine(a) => println!("{}", cmd_refine(&RunConfig::load(&a.config)?, a.options())?),
        Command::FuseEval(a) => println!("{}", cmd_fuse_eval(&RunConfig::load(&a.config)?, a.options())?),
        Command::OptimizeAnchors(a) => print_optimize(&cmd_optimize(&RunConfig::load(&a.config)?, Task::Anchors, a.options())?),
        Command::OptimizeVau(a) => print_optimize(&cmd_optimize(&RunConfig::load(&a.config)?, Task::Vau, a.options())?),
        Command::Report { config } => print!("{}", cmd_report(&RunConfig::load(&config)?)?),
        Command::Serve { config, port, static_dir } => {
            let state = AppState::from_config(&RunConfig::load(&config)?)?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| PipelineError::io(Path::new("tokio runtime"), e))?;
            rt.block_on(prismvau_review::serve(state, static_dir, port))
                .map_err(|e| PipelineError::io(Path::new(&format!("port {port}")), e))?;
        }
        Command::Demo { out } => {
            let paths = write_demo(&out)?;
            println!("demo written to {}", paths.root.display());
            println!("next: prismvau score-coarse --config {}", paths.config.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
