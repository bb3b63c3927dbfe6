use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use mmcl::config::RunConfig;
use mmcl::evaluation::render4;
use mmcl::{experiment, ErrorKind};

#[derive(Parser)]
#[command(name = "mmcl", version, about = "Continual learning lab for a toy multimodal LLM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override such as `data=3`; repeatable.
    #[arg(long = "seed-override", value_name = "K=V")]
    seed_override: Vec<String>,
    /// Overwrite existing artifacts.
    #[arg(long)]
    force: bool,
    /// Cap on pretraining steps.
    #[arg(long = "steps-cap")]
    steps_cap: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate every dataset and the manifest.
    GenData(Common),
    /// Train the base language model and record its NL baselines.
    Pretrain(Common),
    /// Run the configured two-task or continual sequence.
    Run(Common),
    /// Run every sweep variant and tabulate them side by side.
    Sweep(Common),
    /// Render plots from one or more run directories.
    Plot {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
}

fn load(c: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    for kv in &c.seed_override {
        let Some((k, v)) = kv.split_once('=') else {
            bail!(mmcl::Error::Config(format!("seed override {kv:?} is not K=V")));
        };
        let v: u64 = v.trim().parse().map_err(|_| mmcl::Error::Config(format!("seed override {kv:?} is not an integer")))?;
        cfg.seeds.set(k.trim(), v)?;
    }
    if let Some(cap) = c.steps_cap {
        if cap == 0 {
            bail!(mmcl::Error::Config("--steps-cap must be positive".into()));
        }
        cfg.pretrain.max_steps = cap;
        cfg.pretrain.min_steps = cfg.pretrain.min_steps.min(cap);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exec(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = load(&c)?;
            let m = experiment::gen_data(&cfg, c.force)?;
            println!("{} datasets in {} (manifest {})", m.files.len(), cfg.data_dir().display(), m.content_hash);
        }
        Command::Pretrain(c) => {
            let cfg = load(&c)?;
            let r = experiment::pretrain(&cfg, c.force)?;
            println!("base model after {} steps in {}", r.steps, cfg.base_dir().display());
            for e in &r.nl {
                println!("  {:<10} {}", e.dataset, render4(&e.accuracy_exact()));
            }
        }
        Command::Run(c) => {
            let cfg = load(&c)?;
            let art = experiment::run(&cfg, c.force)?;
            for row in &art.matrix.rows {
                let vl = row.mean_vl_accuracy().map_or("-".to_string(), |a| render4(&a));
                println!("after task {}: NL delta {}  mean VL accuracy {}", row.after_task, render4(&row.nl_delta()), vl);
            }
            println!("reports in {}", art.dir.display());
        }
        Command::Sweep(c) => {
            let cfg = load(&c)?;
            let dir = experiment::sweep(&cfg, c.force)?;
            let table = std::fs::read_to_string(dir.join("sweep.md")).context("reading sweep table")?;
            print!("{table}");
        }
        Command::Plot { runs, out } => {
            for f in experiment::plot(&runs, &out)? {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<mmcl::Error>().map(mmcl::Error::kind) {
        Some(ErrorKind::Numeric) => 2,
        Some(ErrorKind::Io) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match exec(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
