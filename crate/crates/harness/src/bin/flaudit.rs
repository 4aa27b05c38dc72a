//! Command-line front end: generate federations, train them, audit
//! snapshots, run end-to-end experiments, and sweep config grids.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use flaudit_attacks::collect_traces;
use flaudit_core::fed::{train_federation, FedRun};
use flaudit_core::synth::{build_federation, Federation};
use flaudit_harness::experiment::{attack_report, AttackKind};
use flaudit_harness::reportio::{write_atomic, write_attack_csvs, write_report};
use flaudit_harness::{run_experiment, ExperimentConfig, GridSpec};

#[derive(Parser)]
#[command(name = "flaudit", about = "Federated-learning privacy audit simulator", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum AttackArg {
    /// Count losses under a tuned cutoff at one round.
    LossThreshold,
    /// Count round-over-round drops of summed losses.
    LossAcrossRounds,
    Both,
}

impl AttackArg {
    fn includes(self, kind: AttackKind) -> bool {
        match self {
            AttackArg::LossThreshold => kind == AttackKind::LossThreshold,
            AttackArg::LossAcrossRounds => kind == AttackKind::LossAcrossRounds,
            AttackArg::Both => true,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a federation and save it with a summary.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate, train, and save per-round snapshots.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Audit a snapshot directory (data is regenerated from the config).
    Attack {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory holding round_*.ckpt files from `train`.
        #[arg(long)]
        snapshots: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = AttackArg::Both)]
        attack: AttackArg,
    },
    /// End-to-end: generate, train, audit, report.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = AttackArg::Both)]
        attack: AttackArg,
    },
    /// Sweep a config grid (default: the built-in 16-point grid).
    Grid {
        /// Grid spec JSON; omit for the built-in grid.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run single-seeded at this master seed instead of the spec's seed list.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        parallelism: usize,
    },
    /// Rebuild grid.csv from finished reports and summarize.
    Report {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ExperimentConfig::from_json(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_grid_spec(path: &Option<PathBuf>, seed: Option<u64>) -> Result<GridSpec> {
    let mut spec = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            GridSpec::from_json(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => GridSpec::default(),
    };
    if let Some(s) = seed {
        spec.base.seed = s;
        spec.seeds = vec![s];
    }
    Ok(spec)
}

fn generate(cfg: &ExperimentConfig) -> Result<Federation> {
    Ok(build_federation(&cfg.gen_params(), cfg.effective_seed())?)
}

fn save_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    write_atomic(&dir.join("config.json"), serde_json::to_string_pretty(cfg)?.as_bytes())?;
    Ok(())
}

fn train(cfg: &ExperimentConfig, out: &Path) -> Result<(Federation, FedRun)> {
    let fed = generate(cfg)?;
    let run = train_federation(&fed, &cfg.mlp_spec(), &cfg.train_config(), cfg.effective_seed())?;
    fs::create_dir_all(out)?;
    save_config(out, cfg)?;
    run.save_snapshots(&out.join("snapshots"))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["round", "train_loss"])?;
    for log in &run.round_logs {
        w.write_record([log.round.to_string(), format!("{:.6}", log.mean_train_loss)])?;
    }
    write_atomic(&out.join("train_log.csv"), &w.into_inner().expect("vec"))?;
    Ok((fed, run))
}

fn audit_snapshots(
    cfg: &ExperimentConfig,
    snapshots: &[flaudit_core::model::Mlp],
    fed: &Federation,
    out: &Path,
    which: AttackArg,
) -> Result<()> {
    let rounds = snapshots.len().checked_sub(1).context("snapshot directory is empty")?;
    let traces = collect_traces(snapshots, &fed.attack);
    let (validation, test) = flaudit_harness::experiment::split_validation(
        &traces,
        cfg.validation_subject_count,
        cfg.effective_seed(),
    )?;
    fs::create_dir_all(out)?;
    let mut summary = serde_json::Map::new();
    for (kind, stem) in [
        (AttackKind::LossThreshold, "loss_threshold"),
        (AttackKind::LossAcrossRounds, "loss_across_rounds"),
    ] {
        if !which.includes(kind) {
            continue;
        }
        let report = attack_report(kind, &validation, &test, rounds, cfg.tune_objective);
        println!(
            "{stem}: test F1 {:.4} (precision {:.4}, recall {:.4})",
            report.test.f1, report.test.precision, report.test.recall
        );
        write_attack_csvs(out, stem, &report)?;
        summary.insert(stem.into(), serde_json::to_value(&report)?);
    }
    write_atomic(
        &out.join("attacks.json"),
        serde_json::to_string_pretty(&serde_json::Value::Object(summary))?.as_bytes(),
    )?;
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Gen { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            let fed = generate(&cfg)?;
            fs::create_dir_all(&out)?;
            save_config(&out, &cfg)?;
            fed.save(&out.join("federation.fed"))?;
            println!(
                "federation: {} users, {} member / {} non-member attack subjects, dim {}",
                fed.users.len(),
                fed.members.len(),
                fed.attack.iter().filter(|s| !s.member).count(),
                fed.dim
            );
            println!("written to {}", out.display());
        }
        Cmd::Train { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            let (_, run) = train(&cfg, &out)?;
            let last = run.round_logs.last().map(|l| l.mean_train_loss);
            match last {
                Some(loss) => println!("trained {} rounds, final train loss {loss:.6}", cfg.rounds),
                None => println!("trained 0 rounds (initial snapshot only)"),
            }
            println!("snapshots in {}", out.join("snapshots").display());
        }
        Cmd::Attack { config, seed, snapshots, out, attack } => {
            let cfg = load_config(&config, seed)?;
            let snaps = FedRun::load_snapshots(&snapshots)?;
            let fed = generate(&cfg)?;
            audit_snapshots(&cfg, &snaps, &fed, &out, attack)?;
            println!("attack outputs in {}", out.display());
        }
        Cmd::Run { config, seed, out, attack } => {
            let cfg = load_config(&config, seed)?;
            let report = run_experiment(&cfg)?;
            write_report(&out, &report)?;
            println!("final accuracy {:.4}", report.final_accuracy);
            if attack.includes(AttackKind::LossThreshold) {
                println!(
                    "loss_threshold: test F1 {:.4} (precision {:.4}, recall {:.4})",
                    report.lt.test.f1, report.lt.test.precision, report.lt.test.recall
                );
            }
            if attack.includes(AttackKind::LossAcrossRounds) {
                println!(
                    "loss_across_rounds: test F1 {:.4} (precision {:.4}, recall {:.4})",
                    report.lar.test.f1, report.lar.test.precision, report.lar.test.recall
                );
            }
            if let Some(p) = &report.privacy {
                println!("epsilon {:.4} at RDP order {:.2}", p.epsilon, p.order);
            }
            println!("report in {}", out.display());
        }
        Cmd::Grid { config, seed, out, parallelism } => {
            let spec = load_grid_spec(&config, seed)?;
            let rows = flaudit_harness::run_grid(&spec, &out, parallelism)?;
            for row in &rows {
                match (&row.lt_f1, &row.lar_f1) {
                    (Some(lt), Some(lar)) => {
                        println!("{}: {} lt_f1 {lt:.4} lar_f1 {lar:.4}", row.name, row.status)
                    }
                    _ => println!(
                        "{}: {} ({})",
                        row.name,
                        row.status,
                        row.error.as_deref().unwrap_or("no metrics")
                    ),
                }
            }
            summarize(&rows);
            println!("grid.csv in {}", out.display());
        }
        Cmd::Report { config, out } => {
            let spec = load_grid_spec(&config, None)?;
            let rows = flaudit_harness::grid::rows_from_dir(&spec, &out);
            flaudit_harness::grid::write_grid_csv(&out.join("grid.csv"), &rows)?;
            println!("{} finished reports under {}", rows.len(), out.display());
            summarize(&rows);
        }
    }
    Ok(())
}

fn summarize(rows: &[flaudit_harness::grid::GridRow]) {
    let pairs: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| match (r.lt_f1, r.lar_f1) {
            (Some(a), Some(b)) => Some((a, b)),
            _ => None,
        })
        .collect();
    if pairs.len() >= 2 {
        let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        println!(
            "attack correlation over {} configs: pearson {:.4}",
            pairs.len(),
            flaudit_harness::pearson(&xs, &ys)
        );
    }
}
