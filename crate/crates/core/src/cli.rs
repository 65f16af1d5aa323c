//! Command-line interface: build splits, train, evaluate, search weights.
//!
//! Every command is driven by one TOML experiment config and emits artifacts
//! into an output directory. Outputs are byte-identical across reruns with
//! the same inputs and seeds; wall-clock metadata lives only in
//! `run_meta.json`.

use crate::config::{ExperimentConfig, GaFitnessKind, TaskKind};
use crate::data::{build_longtail_split, group_classes, synth_gaussian_task, LongTailSpec};
use crate::error::{Error, Result};
use crate::ga::{search, FineTuneFitness, Fitness, QuadraticSurrogate, SearchResult};
use crate::metrics::MetricsReport;
use crate::plot::{bar_chart, line_chart, Series};
use crate::trainer::{write_history_csv, Checkpoint, EpochRecord};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

/// Environment variable holding the default output root.
pub const OUT_ROOT_ENV: &str = "LONGTAIL_OUT_ROOT";

#[derive(Parser)]
#[command(
    name = "longtail",
    about = "Long-tail recognition training toolkit",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args)]
pub struct CommonArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; defaults to the config's output_dir, then
    /// $LONGTAIL_OUT_ROOT/<task>, then ./runs/<task>.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override the command's seed (data seed for make-lt, training seed for
    /// train, search seed for ga).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Override the number of training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from `checkpoint.json` in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Subcommand)]
pub enum Command {
    /// Build a long-tail split and write its manifest and summary.
    MakeLt(CommonArgs),
    /// Train from a config; emits checkpoints, history CSV, report, plots.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the config's test split.
    Eval(EvalArgs),
    /// Genetic search over the contrastive/margin loss weights.
    Ga(CommonArgs),
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeLt(args) => {
            let mut cfg = ExperimentConfig::from_path(&args.config)?;
            if let Some(seed) = args.seed {
                cfg.data.seed = seed;
            }
            let out = resolve_out_dir(&cfg, args.out.as_deref())?;
            cmd_make_lt(&cfg, &out)
        }
        Command::Train(args) => {
            let mut cfg = ExperimentConfig::from_path(&args.common.config)?;
            if let Some(seed) = args.common.seed {
                cfg.train.seed = seed;
            }
            if let Some(epochs) = args.epochs {
                cfg.train.epochs = epochs;
                cfg.train.t_th = cfg.train.t_th.min(epochs);
                cfg.train.warmup_epochs = cfg.train.warmup_epochs.min(epochs);
                cfg.train.step_milestones.retain(|&m| m < epochs);
                cfg.validate()?;
            }
            let out = resolve_out_dir(&cfg, args.common.out.as_deref())?;
            cmd_train(&cfg, &out, args.resume)
        }
        Command::Eval(args) => {
            let cfg = ExperimentConfig::from_path(&args.common.config)?;
            let out = resolve_out_dir(&cfg, args.common.out.as_deref())?;
            cmd_eval(&cfg, &args.checkpoint, &out)
        }
        Command::Ga(args) => {
            let mut cfg = ExperimentConfig::from_path(&args.config)?;
            if let Some(seed) = args.seed {
                if let Some(ga) = &mut cfg.ga {
                    ga.ga.seed = seed;
                }
            }
            let out = resolve_out_dir(&cfg, args.out.as_deref())?;
            cmd_ga(&cfg, &out)
        }
    }
}

fn resolve_out_dir(cfg: &ExperimentConfig, flag: Option<&Path>) -> Result<PathBuf> {
    let dir = if let Some(dir) = flag {
        dir.to_path_buf()
    } else if let Some(dir) = &cfg.output_dir {
        dir.clone()
    } else if let Ok(root) = std::env::var(OUT_ROOT_ENV) {
        PathBuf::from(root).join(cfg.task.name())
    } else {
        PathBuf::from("runs").join(cfg.task.name())
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    Ok(dir)
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_run_meta(out: &Path, command: &str, started: std::time::Instant) -> Result<()> {
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let meta = serde_json::json!({
        "command": command,
        "finished_unix": now,
        "duration_secs": started.elapsed().as_secs_f64(),
    });
    write_json(&meta, &out.join("run_meta.json"))
}

/// Build the long-tail split, write `manifest.json` and `summary.json`.
pub fn cmd_make_lt(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let started = std::time::Instant::now();
    let spec = cfg.longtail_spec()?;
    let manifest = match cfg.task {
        TaskKind::Synthetic => {
            // balanced synthetic source, then the same down-sampling path
            // the on-disk datasets go through
            let balanced = LongTailSpec::new(cfg.data.n_max, 1.0, cfg.data.num_classes)?;
            let mut synth_cfg = crate::data::SyntheticTaskConfig {
                num_classes: cfg.data.num_classes,
                feature_dim: cfg.data.feature_dim,
                class_separation: cfg.data.class_separation,
                within_class_std: cfg.data.within_class_std,
                spec: balanced,
                seed: cfg.data.seed,
                test_per_class: cfg.data.test_per_class,
            };
            synth_cfg.spec.counts = vec![cfg.data.n_max; cfg.data.num_classes];
            let (source, _) = synth_gaussian_task(&synth_cfg)?;
            let (_, manifest) =
                build_longtail_split(&source, &spec, cfg.data.seed, cfg.data.class_order.as_deref())?;
            manifest
        }
        _ => {
            let source = cfg.load_source()?;
            let (_, manifest) =
                build_longtail_split(&source, &spec, cfg.data.seed, cfg.data.class_order.as_deref())?;
            manifest
        }
    };
    write_json(&manifest, &out.join("manifest.json"))?;

    let groups = group_classes(&spec.counts)?;
    let summary = serde_json::json!({
        "task": cfg.task.name(),
        "beta": spec.beta,
        "n_max": spec.n_max,
        "counts": spec.counts,
        "total": spec.total(),
        "groups": groups,
    });
    write_json(&summary, &out.join("summary.json"))?;
    write_run_meta(out, "make-lt", started)?;
    println!(
        "wrote split manifest for {} classes, {} samples -> {}",
        spec.num_classes,
        spec.total(),
        out.display()
    );
    println!("counts: {:?}", spec.counts);
    println!(
        "groups: many={:?} medium={:?} few={:?}",
        groups.many, groups.medium, groups.few
    );
    Ok(())
}

fn read_history_rows(path: &Path) -> Vec<String> {
    match std::fs::read_to_string(path) {
        Ok(text) => text.lines().skip(1).map(str::to_string).collect(),
        Err(_) => Vec::new(),
    }
}

fn emit_training_plots(history_rows: &[EpochRecord], out: &Path) -> Result<()> {
    let take = |f: fn(&EpochRecord) -> Option<(f64, f64)>| -> Vec<(f64, f64)> {
        history_rows.iter().filter_map(f).collect()
    };
    let acc_series = vec![
        Series::new("overall", take(|r| Some((r.epoch as f64, r.overall)))),
        Series::new(
            "many",
            take(|r| r.many.map(|v| (r.epoch as f64, v))),
        ),
        Series::new(
            "medium",
            take(|r| r.medium.map(|v| (r.epoch as f64, v))),
        ),
        Series::new("few", take(|r| r.few.map(|v| (r.epoch as f64, v)))),
    ];
    let acc_svg = line_chart("validation accuracy", "epoch", "top-1", &acc_series);
    std::fs::write(out.join("accuracy.svg"), acc_svg)
        .map_err(|e| Error::io(out.join("accuracy.svg").display().to_string(), e))?;

    let loss_series = vec![
        Series::new("scl", take(|r| Some((r.epoch as f64, r.loss_scl)))),
        Series::new("ldam", take(|r| Some((r.epoch as f64, r.loss_ldam)))),
        Series::new("cesc", take(|r| Some((r.epoch as f64, r.loss_cesc)))),
        Series::new("mv", take(|r| Some((r.epoch as f64, r.loss_mv)))),
        Series::new("total", take(|r| Some((r.epoch as f64, r.loss_total)))),
    ];
    let loss_svg = line_chart("loss terms", "epoch", "loss", &loss_series);
    std::fs::write(out.join("loss_parts.svg"), loss_svg)
        .map_err(|e| Error::io(out.join("loss_parts.svg").display().to_string(), e))?;
    Ok(())
}

/// Train (or resume) and emit checkpoint, history, report, and plots.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, resume: bool) -> Result<()> {
    let started = std::time::Instant::now();
    let mut trainer = cfg.build_trainer()?;
    let history_path = out.join("history.csv");
    let mut prior_rows = Vec::new();
    if resume {
        let ckpt_path = out.join("checkpoint.json");
        if !ckpt_path.exists() {
            return Err(Error::Checkpoint(format!(
                "--resume given but {} does not exist",
                ckpt_path.display()
            )));
        }
        let ckpt = Checkpoint::load(&ckpt_path)?;
        trainer.restore(&ckpt)?;
        prior_rows = read_history_rows(&history_path);
        prior_rows.truncate(trainer.next_epoch());
    }

    let report = trainer.fit(Some(out))?;

    // history: previously written rows (when resuming) plus this run's rows
    let mut csv = String::from(
        "epoch,lr,loss_scl,loss_ldam,loss_cesc,loss_mv,loss_total,b_n,overall,many,medium,few,avg_icd\n",
    );
    for row in &prior_rows {
        csv.push_str(row);
        csv.push('\n');
    }
    write_history_csv(&trainer.history, &out.join(".history_tail.tmp"))?;
    let tail = std::fs::read_to_string(out.join(".history_tail.tmp"))
        .map_err(|e| Error::io("history tail", e))?;
    std::fs::remove_file(out.join(".history_tail.tmp")).ok();
    for line in tail.lines().skip(1) {
        csv.push_str(line);
        csv.push('\n');
    }
    std::fs::write(&history_path, csv)
        .map_err(|e| Error::io(history_path.display().to_string(), e))?;

    write_json(&report, &out.join("metrics.json"))?;
    emit_training_plots(&trainer.history, out)?;
    write_run_meta(out, "train", started)?;
    println!(
        "trained {} epochs; overall top-1 = {:.4} -> {}",
        trainer.next_epoch(),
        report.overall_top1,
        out.display()
    );
    Ok(())
}

fn icd_table_csv(report: &MetricsReport) -> String {
    let mut header = String::from("label");
    let mut row = String::from("icd");
    for (j, v) in report.per_class_icd.iter().enumerate() {
        header.push_str(&format!(",{j}"));
        match v {
            Some(v) => row.push_str(&format!(",{v}")),
            None => row.push(','),
        }
    }
    header.push_str(",avg");
    row.push_str(&format!(",{}", report.avg_icd));
    format!("{header}\n{row}\n")
}

/// Evaluate a checkpoint against the config's test split.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    let started = std::time::Instant::now();
    let mut trainer = cfg.build_trainer()?;
    let ckpt = Checkpoint::load(checkpoint)?;
    trainer.restore(&ckpt)?;
    let report = trainer.evaluate(trainer.next_epoch().saturating_sub(1))?;
    write_json(&report, &out.join("eval_metrics.json"))?;
    std::fs::write(out.join("icd_table.csv"), icd_table_csv(&report))
        .map_err(|e| Error::io(out.join("icd_table.csv").display().to_string(), e))?;
    write_run_meta(out, "eval", started)?;
    println!(
        "overall top-1 = {:.4}  many = {}  medium = {}  few = {}",
        report.overall_top1,
        fmt_opt(report.group_top1.many),
        fmt_opt(report.group_top1.medium),
        fmt_opt(report.group_top1.few),
    );
    print!("{}", icd_table_csv(&report).replace(',', "\t"));
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn write_search_outputs(result: &SearchResult, out: &Path) -> Result<()> {
    let mut log = String::new();
    for record in &result.records {
        log.push_str(&serde_json::to_string(record)?);
        log.push('\n');
    }
    std::fs::write(out.join("search_log.jsonl"), log)
        .map_err(|e| Error::io(out.join("search_log.jsonl").display().to_string(), e))?;

    let top = result.top_k(10);
    let mut csv = String::from("rank,alpha,lambda,fitness\n");
    for (rank, r) in top.iter().enumerate() {
        csv.push_str(&format!("{},{},{},{}\n", rank + 1, r.alpha, r.lambda, r.fitness));
    }
    std::fs::write(out.join("top10.csv"), csv)
        .map_err(|e| Error::io(out.join("top10.csv").display().to_string(), e))?;

    let labels: Vec<String> = top
        .iter()
        .map(|r| format!("LDAM_{:.3}_SCL_{:.3}", r.lambda, r.alpha))
        .collect();
    let values: Vec<f64> = top.iter().map(|r| r.fitness).collect();
    let svg = bar_chart("top-10 weight combinations", "fitness", &labels, &values);
    std::fs::write(out.join("ga_top10.svg"), svg)
        .map_err(|e| Error::io(out.join("ga_top10.svg").display().to_string(), e))?;
    Ok(())
}

/// Run the weight search and emit the log, top-10 table, and plot.
pub fn cmd_ga(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let started = std::time::Instant::now();
    let section = cfg
        .ga
        .as_ref()
        .ok_or_else(|| Error::Config("config has no [ga] section".into()))?;
    let mut fitness: Box<dyn Fitness> = match section.fitness {
        GaFitnessKind::Surrogate => Box::new(QuadraticSurrogate::default()),
        GaFitnessKind::Finetune => {
            let path = section.pretrained_checkpoint.as_ref().ok_or_else(|| {
                Error::Config("ga.fitness = \"finetune\" requires ga.pretrained_checkpoint".into())
            })?;
            let ckpt = Checkpoint::load(path)?;
            Box::new(FineTuneFitness::new(
                cfg.clone(),
                ckpt,
                section.ga.eval_epochs,
            ))
        }
    };
    let result = search(&section.ga, fitness.as_mut())?;
    write_search_outputs(&result, out)?;
    write_run_meta(out, "ga", started)?;
    if let Some(best) = result.best() {
        println!(
            "best weights: alpha = {:.3}, lambda = {:.3} (fitness {:.4}) -> {}",
            best.alpha,
            best.lambda,
            best.fitness,
            out.display()
        );
    }
    Ok(())
}
