use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cdma_core::data::generate_dataset;
use cdma_core::data::load_split;
use cdma_core::graph::Fault;
use cdma_core::inference::{evaluate_split, BranchSelector};
use cdma_core::losses::Variant;
use cdma_core::selfcheck::run_selfcheck;
use cdma_core::trainer::{load_params, Trainer};
use cdma_core::{Arm, Result, RunConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Semi-supervised slide segmentation with a tri-branch attention network.
#[derive(Parser, Debug)]
#[command(name = "cdma", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// JSON run configuration; unspecified fields take preset values.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Base configuration when no --config is given: desk, paper, fast or smoke.
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic slides and the labeled/unlabeled split.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Fraction of training slides that carry masks.
        #[arg(long)]
        ratio: Option<f64>,
        /// Overwrite a non-empty dataset directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a network and write metrics and checkpoints.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Loss variant: cdma, cdkd, argmax, t1, um-prime, no-cdkd or sl.
        #[arg(long)]
        variant: Option<String>,
        /// Ablation arm applied on top of the configuration.
        #[arg(long)]
        arm: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Branch used for validation: csa, ca, sa, none, ensemble or an index.
        #[arg(long)]
        branch: Option<String>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Segment the test slides and write per-slide DSC/JI.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Defaults to `best.tnsr` in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// csa (default), ca, sa, none, ensemble or a branch index.
        #[arg(long)]
        branch: Option<String>,
        #[arg(long, value_enum, default_value_t = Subset::Test)]
        split: Subset,
        /// Also write one PPM overlay per slide.
        #[arg(long)]
        overlays: bool,
        /// Defaults to `eval_<split>_<branch>.csv` in the output directory.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Finite-difference gradient checks and loss oracles.
    Selfcheck {
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Print the resolved configuration as JSON.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        arm: Option<String>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Subset {
    Val,
    Test,
}

fn resolve(args: &ConfigArgs) -> Result<RunConfig> {
    let mut c = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::preset(&args.preset)?,
    };
    if let Some(s) = args.seed {
        c.seed = s;
    }
    if let Some(d) = &args.dataset {
        c.dataset_dir = d.clone();
    }
    if let Some(o) = &args.out {
        c.output_dir = o.clone();
    }
    Ok(c)
}

fn apply_arm(c: RunConfig, arm: Option<&str>) -> Result<RunConfig> {
    match arm {
        Some(a) => {
            let mut armed = c.with_arm(a.parse::<Arm>()?);
            // An explicit output directory is kept as given.
            armed.output_dir = c.output_dir;
            Ok(armed)
        }
        None => Ok(c),
    }
}

fn gen_data(c: &RunConfig, force: bool) -> Result<()> {
    c.data.validate()?;
    let split = generate_dataset(&c.dataset_dir, c.seed, &c.data, force)?;
    println!(
        "wrote {} slides to {} ({} labeled, {} unlabeled, {} val, {} test)",
        split.all_ids().count(),
        c.dataset_dir.display(),
        split.train_labeled.len(),
        split.train_unlabeled.len(),
        split.val.len(),
        split.test.len()
    );
    Ok(())
}

fn train(c: RunConfig, resume: Option<&Path>) -> Result<()> {
    let mut t = match resume {
        Some(p) => Trainer::resume(c, p)?,
        None => Trainer::new(c)?,
    };
    println!(
        "training {} for {} epochs ({} steps each) into {}",
        t.cfg.loss.variant.label(),
        t.cfg.optimizer.epochs,
        t.steps_per_epoch(),
        t.cfg.output_dir.display()
    );
    let outcome = t.run(|r| {
        println!(
            "epoch {:>3}  lr {:.1e}  loss {:.4} (sup {:.4} cdkd {:.4} um {:.4})  val dsc {:.4} ji {:.4}",
            r.epoch, r.lr, r.loss_total, r.loss_sup, r.loss_cdkd, r.loss_um, r.val_dsc, r.val_ji
        );
    })?;
    if let Some(b) = outcome.best_val_dsc {
        println!("best val dsc {b:.4}");
    }
    Ok(())
}

fn eval(c: &RunConfig, checkpoint: Option<&Path>, subset: Subset, overlays: bool, csv: Option<&Path>) -> Result<()> {
    c.validate()?;
    let ck = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| c.output_dir.join("best.tnsr"));
    let params = load_params(&ck, &c.arch)?;
    let split = load_split(&c.dataset_dir)?;
    let (ids, name) = match subset {
        Subset::Val => (&split.val, "val"),
        Subset::Test => (&split.test, "test"),
    };
    let overlay_dir = overlays.then(|| c.output_dir.join(format!("overlays_{name}")));
    let m = evaluate_split(&c.arch, &params, &c.dataset_dir, ids, &c.inference, overlay_dir.as_deref())?;
    let csv = csv
        .map(Path::to_path_buf)
        .unwrap_or_else(|| c.output_dir.join(format!("eval_{name}_{}.csv", c.inference.branch)));
    if let Some(dir) = csv.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&csv, m.to_csv())?;
    println!(
        "{name}: dsc {:.4} ± {:.4}  ji {:.4} ± {:.4} over {} slides -> {}",
        m.mean_dsc,
        m.std_dsc,
        m.mean_ji,
        m.std_ji,
        m.per_slide.len(),
        csv.display()
    );
    Ok(())
}

fn selfcheck(inject: bool) -> Result<bool> {
    let report = run_selfcheck(inject.then_some(Fault::ConvBackward))?;
    for r in &report.results {
        println!("{} {:<40} {}", if r.passed { "ok  " } else { "FAIL" }, r.name, r.detail);
    }
    let failed = report.failures().count();
    println!(
        "{} checks, {failed} failed, {:.2} s",
        report.results.len(),
        report.seconds
    );
    Ok(failed == 0)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { cfg, ratio, force } => {
            let mut c = resolve(&cfg)?;
            if let Some(r) = ratio {
                c.data.annotation_ratio = r;
            }
            gen_data(&c, force)?;
        }
        Command::Train {
            cfg,
            variant,
            arm,
            epochs,
            branch,
            resume,
        } => {
            let mut c = apply_arm(resolve(&cfg)?, arm.as_deref())?;
            if let Some(v) = variant {
                c.loss.variant = v.parse::<Variant>()?;
            }
            if let Some(e) = epochs {
                c.optimizer.epochs = e;
            }
            if let Some(b) = branch {
                c.inference.branch = b.parse::<BranchSelector>()?;
            }
            train(c, resume.as_deref())?;
        }
        Command::Eval {
            cfg,
            checkpoint,
            branch,
            split,
            overlays,
            csv,
        } => {
            let mut c = resolve(&cfg)?;
            if let Some(b) = branch {
                c.inference.branch = b.parse::<BranchSelector>()?;
            }
            eval(&c, checkpoint.as_deref(), split, overlays, csv.as_deref())?;
        }
        Command::Selfcheck { inject_fault } => return selfcheck(inject_fault),
        Command::Config { cfg, arm } => {
            let c = apply_arm(resolve(&cfg)?, arm.as_deref())?;
            c.validate()?;
            print!("{}", c.to_json());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
