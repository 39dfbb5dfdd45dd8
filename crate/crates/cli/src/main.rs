use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fedda_core::ablation::{run_ablation, write_table_csv, Grid};
use fedda_core::alignment::KlForm;
use fedda_core::config::{runs_root, ExperimentConfig, RUNS_DIR_ENV};
use fedda_core::experiment::{rerun_importance, rerun_qq, rerun_thresholds, run_to_dir, IMPORTANCE, QQ, THRESHOLDS};
use fedda_core::federation::{PolicyKind, SigmoidSign};
use fedda_core::{Error, Result};

#[derive(Parser)]
#[command(name = "fedda", version, about = "Federated domain adaptation experiments on ROI matrices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    Fedavg,
    Uncertainty,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kl {
    Reduced,
    Textbook,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightSign {
    Corrected,
    Literal,
}

#[derive(clap::Args)]
struct Overrides {
    /// Root seed, replacing `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Train clients on worker threads; results are unchanged.
    #[arg(long)]
    parallel_clients: bool,
    #[arg(long, value_enum)]
    policy: Option<Policy>,
    #[arg(long, value_enum)]
    kl: Option<Kl>,
    /// Direction of the uncertainty sigmoid in aggregation.
    #[arg(long, value_enum)]
    weight_sign: Option<WeightSign>,
}

#[derive(Subcommand)]
enum Command {
    /// Train, evaluate and write a run directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Run directory; defaults to a name under the runs root.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a grid of module or loss ablations and write a comparison table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// `modules`, `losses`, or a TOML grid file.
        #[arg(long)]
        grid: String,
        /// Comma-separated seeds, replacing the grid's.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute Q-Q diagnostics for a run directory.
    Qq { run_dir: PathBuf },
    /// Recompute the joint feature-importance ranking for a run directory.
    Importance { run_dir: PathBuf },
    /// Recompute the uncertainty-threshold table for a run directory.
    Thresholds { run_dir: PathBuf },
}

fn load_config(path: &Path, o: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = o.seed {
        cfg.run.seed = seed;
    }
    if let Some(p) = o.policy {
        cfg.federation.policy.kind = match p {
            Policy::Fedavg => PolicyKind::Fedavg,
            Policy::Uncertainty => PolicyKind::Uncertainty,
        };
    }
    if let Some(k) = o.kl {
        cfg.federation.kl_form = match k {
            Kl::Reduced => KlForm::Reduced,
            Kl::Textbook => KlForm::Textbook,
        };
    }
    if let Some(s) = o.weight_sign {
        cfg.federation.policy.sign = match s {
            WeightSign::Corrected => SigmoidSign::Corrected,
            WeightSign::Literal => SigmoidSign::Literal,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned())
}

fn run(config: &Path, o: &Overrides, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config, o)?;
    let dir = out.unwrap_or_else(|| {
        let name = cfg
            .run
            .name
            .clone()
            .unwrap_or_else(|| format!("{}-seed{}", stem(config), cfg.run.seed));
        runs_root().join(name)
    });
    let metrics = run_to_dir(&cfg, &dir, o.parallel_clients)?;
    for (site, m) in &metrics.sites {
        println!("site {site}: acc {:.4} auc {}", m.acc, m.auc.map_or("n/a".into(), |a| format!("{a:.4}")));
    }
    println!("{}", dir.display());
    Ok(())
}

fn ablate(config: &Path, grid: &str, seeds: Vec<u64>, o: &Overrides, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config, o)?;
    let mut g = match grid {
        "modules" => Grid::modules(vec![cfg.run.seed]),
        "losses" => Grid::losses(vec![cfg.run.seed]),
        path => {
            let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read grid {path}: {e}")))?;
            Grid::from_toml_str(&text)?
        }
    };
    if !seeds.is_empty() {
        g.seeds = seeds;
    }
    let rows = run_ablation(&cfg, &g, o.parallel_clients)?;
    let dir = out.unwrap_or_else(|| runs_root().join(format!("{}-ablation", stem(config))));
    fs::create_dir_all(&dir)?;
    write_table_csv(fs::File::create(dir.join("ablation.csv"))?, &rows)?;
    fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(&rows)?)?;
    for r in &rows {
        println!("{:<16} {:<12} acc {:.4}", r.name, r.losses, r.acc);
    }
    println!("{}", dir.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, overrides, out } => run(&config, &overrides, out),
        Command::Ablate {
            config,
            grid,
            seeds,
            overrides,
            out,
        } => ablate(&config, &grid, seeds, &overrides, out),
        Command::Qq { run_dir } => {
            let r = rerun_qq(&run_dir)?;
            for c in &r.components {
                println!("PC{}: correlation {:.4}", c.pc, c.correlation);
            }
            println!("{}", run_dir.join(QQ).display());
            Ok(())
        }
        Command::Importance { run_dir } => {
            let ranked = rerun_importance(&run_dir)?;
            for (i, e) in ranked.iter().take(10).enumerate() {
                println!("{:>2} {}[{}] joint {:.3}", i + 1, e.template_name, e.region, e.joint);
            }
            println!("{}", run_dir.join(IMPORTANCE).display());
            Ok(())
        }
        Command::Thresholds { run_dir } => {
            for r in rerun_thresholds(&run_dir)? {
                let acc = r.accuracy.map_or("n/a".into(), |a| format!("{a:.4}"));
                println!("u <= {:.1}: {} samples, acc {acc}", r.threshold, r.count);
            }
            println!("{}", run_dir.join(THRESHOLDS).display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    log::debug!("run directories default to ${RUNS_DIR_ENV} or ./runs");
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
