//! Command-line front end.
//!
//! Every command reads an optional JSON experiment config, applies flag
//! overrides and writes its artifacts under `--out`.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::allocation::{validate_plan, BudgetPlan, Policy};
use crate::error::{Error, Result};
use crate::harness::{
    compare_methods, evaluate_needle, evaluate_reasoning, memory_reports, reference_case,
    write_memory_summary, Budget, ExperimentConfig, Method, ResultTable,
};
use crate::importance::ImportanceScores;
use crate::selection::{compress_with_scores, write_retained_json};

#[derive(Debug, Parser)]
#[command(
    name = "headkv",
    version,
    about = "Head-level KV cache compression experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON experiment config; the desk-scale defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "headkv-out")]
    pub out: PathBuf,
    /// Corpus seed override.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Allocation policy: headkv, uniform, pyramid or ada.
    #[arg(long, global = true)]
    pub policy: Option<String>,
    /// Per-head budget (a count, or "full").
    #[arg(long, global = true)]
    pub budget: Option<String>,
    /// Pool divisor: each head gives b/beta to the shared pool (must exceed 1).
    #[arg(long, global = true)]
    pub beta: Option<f64>,
    /// Observation window length.
    #[arg(long, global = true)]
    pub alpha: Option<usize>,
    /// Importance estimator: R, ER or R2.
    #[arg(long, global = true)]
    pub estimator: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate head importance; writes scores.json and scores_heatmap.csv.
    Estimate,
    /// Allocate per-head budgets; writes plan.json and plan_heatmap.csv.
    Allocate,
    /// Compress one reference prompt; writes memory.csv, memory_summary.csv and retained.json.
    Compress,
    /// Needle-in-a-haystack grid; writes results.csv.
    EvalNeedle,
    /// Multi-needle reasoning suite; writes results.csv.
    EvalReason,
    /// All methods on paired corpora; writes results.csv, reasoning.csv, memory.csv and memory_summary.csv.
    Compare,
    /// Mean accuracy per method and budget from results.csv.
    Report,
}

/// 1 for configuration errors, 2 for everything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 1,
        _ => 2,
    }
}

pub fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::config(format!("invalid config: {e}")))?
        }
        None => ExperimentConfig::desk_default(),
    };
    if let Some(seed) = cli.seed {
        cfg.corpus_seed = seed;
    }
    if let Some(p) = &cli.policy {
        cfg.allocation.policy = p.parse()?;
    }
    if let Some(b) = &cli.budget {
        let budget: Budget = b.parse()?;
        if let Budget::Entries(n) = budget {
            cfg.allocation.b = n;
        }
        cfg.budgets = Some(vec![budget]);
    }
    if let Some(beta) = cli.beta {
        cfg.allocation.beta = beta;
        cfg.betas = None;
    }
    if let Some(a) = cli.alpha {
        cfg.allocation.alpha = a;
        cfg.pooling.alpha = a;
    }
    if let Some(e) = &cli.estimator {
        cfg.estimator = e.parse()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_json<T: serde::Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Scores from `scores.json` in the output directory when it matches the
/// configured estimator and shape, otherwise a fresh estimate.
fn scores_for(cfg: &ExperimentConfig, dir: &Path) -> Result<ImportanceScores> {
    if let Ok(text) = fs::read_to_string(dir.join("scores.json")) {
        if let Ok(s) = serde_json::from_str::<ImportanceScores>(&text) {
            if s.estimator_tag == cfg.estimator && s.shape == cfg.shape() {
                return Ok(s);
            }
        }
    }
    crate::harness::run_estimation(cfg)
}

fn config_method(cfg: &ExperimentConfig, dir: &Path) -> Result<Method> {
    Ok(match cfg.allocation.policy {
        Policy::HeadKv => Method::headkv(scores_for(cfg, dir)?, cfg.allocation.beta),
        p => Method::baseline(p, cfg.allocation.beta),
    })
}

fn plan_for(cfg: &ExperimentConfig, dir: &Path) -> Result<BudgetPlan> {
    let method = config_method(cfg, dir)?;
    let case = reference_case(cfg)?;
    let alloc = cfg.allocation;
    let plan = crate::allocation::allocate(
        &alloc,
        cfg.shape(),
        method.scores.as_ref(),
        Some(&case.pooled),
    )?;
    let check = validate_plan(&plan, &alloc, cfg.shape(), method.scores.as_ref());
    if !check.passed() {
        return Err(Error::invalid(format!(
            "allocation broke an invariant: {check:?}"
        )));
    }
    Ok(plan)
}

fn write_results(dir: &Path, name: &str, table: &ResultTable) -> Result<()> {
    let mut w = create(dir, name)?;
    table.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn summarize(table: &ResultTable, out: &mut dyn Write) -> Result<()> {
    let mut budgets: Vec<Budget> = Vec::new();
    for r in &table.rows {
        if !budgets.contains(&r.b) {
            budgets.push(r.b);
        }
    }
    for m in table.methods() {
        for &b in &budgets {
            if let Some(acc) = table.mean_accuracy(&m, b) {
                writeln!(out, "{m:<20} b={b:<6} mean accuracy {acc:.4}")?;
            }
        }
    }
    Ok(())
}

fn read_results(path: &Path) -> Result<ResultTable> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut table = ResultTable::default();
    for rec in rdr.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize| {
            field(i).parse::<f64>().map_err(|_| {
                Error::invalid(format!("bad number '{}' in {}", field(i), path.display()))
            })
        };
        table.rows.push(crate::harness::ResultRow {
            method: field(0).to_string(),
            b: field(1).parse()?,
            length: field(2).parse().map_err(|_| {
                Error::invalid(format!("bad length '{}' in {}", field(2), path.display()))
            })?,
            depth: num(3)?,
            accuracy: num(4)?,
            retained_fraction: num(5)?,
        });
    }
    Ok(table)
}

/// Parses `args` (program name first) and runs the command, writing
/// human-readable progress to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::config(e.to_string()))?;
    execute(&cli, out)
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let dir = cli.out.as_path();
    if let Command::Report = cli.command {
        let path = dir.join("results.csv");
        if !path.exists() {
            return Err(Error::config(format!(
                "{} not found; run a grid first",
                path.display()
            )));
        }
        summarize(&read_results(&path)?, out)?;
        let reasoning = dir.join("reasoning.csv");
        if reasoning.exists() {
            writeln!(out, "reasoning suite:")?;
            summarize(&read_results(&reasoning)?, out)?;
        }
        return Ok(());
    }
    let cfg = load_config(cli)?;
    fs::create_dir_all(dir)?;
    match cli.command {
        Command::Estimate => {
            let scores = crate::harness::run_estimation(&cfg)?;
            write_json(dir, "scores.json", &scores)?;
            let mut w = create(dir, "scores_heatmap.csv")?;
            scores.write_heatmap_csv(&mut w)?;
            w.flush()?;
            let zeros = scores.raw.values().iter().filter(|&&x| x == 0.0).count();
            writeln!(
                out,
                "estimated {} scores over {} heads ({zeros} zero)",
                scores.estimator_tag,
                scores.shape.n_heads()
            )?;
        }
        Command::Allocate => {
            let plan = plan_for(&cfg, dir)?;
            write_json(dir, "plan.json", &plan)?;
            let mut w = create(dir, "plan_heatmap.csv")?;
            plan.write_heatmap_csv(&mut w)?;
            w.flush()?;
            writeln!(
                out,
                "{} plan: {} entries plus a window of {}",
                cfg.allocation.policy, plan.total, plan.alpha
            )?;
        }
        Command::Compress => {
            let case = reference_case(&cfg)?;
            let plan =
                crate::allocation::clamp_to_sequence(&plan_for(&cfg, dir)?, case.prompt_len)?;
            let (caches, report) =
                compress_with_scores(&case.full_caches()?, &case.pooled, &plan, case.prompt_len)?;
            let mut w = create(dir, "memory.csv")?;
            report.write_csv(&mut w)?;
            w.flush()?;
            let mut w = create(dir, "retained.json")?;
            write_retained_json(&caches, &mut w)?;
            w.flush()?;
            let method = config_method(&cfg, dir)?;
            let entries = memory_reports(&cfg, &[method], &[Budget::Entries(cfg.allocation.b)])?;
            let mut w = create(dir, "memory_summary.csv")?;
            write_memory_summary(&entries, &mut w)?;
            w.flush()?;
            writeln!(
                out,
                "kept {} of {} entries (ratio {:.6})",
                report.total_entries, report.full_entries, report.compression_ratio
            )?;
        }
        Command::EvalNeedle | Command::EvalReason => {
            let method = config_method(&cfg, dir)?;
            let budgets = cfg.budgets();
            let table = if matches!(cli.command, Command::EvalNeedle) {
                evaluate_needle(&cfg, &[method], &budgets)?
            } else {
                evaluate_reasoning(&cfg, &[method], &budgets)?
            };
            write_results(dir, "results.csv", &table)?;
            summarize(&table, out)?;
        }
        Command::Compare => {
            let cmp = compare_methods(&cfg)?;
            write_results(dir, "results.csv", &cmp.needle)?;
            write_results(dir, "reasoning.csv", &cmp.reasoning)?;
            let mut w = create(dir, "memory_summary.csv")?;
            write_memory_summary(&cmp.memory, &mut w)?;
            w.flush()?;
            let label = format!("headkv-{}", cfg.estimator);
            if let Some(e) = cmp
                .memory
                .iter()
                .find(|e| e.method.starts_with(&label))
                .or(cmp.memory.first())
            {
                let mut w = create(dir, "memory.csv")?;
                e.report.write_csv(&mut w)?;
                w.flush()?;
            }
            for s in &cmp.scores {
                write_json(dir, &format!("scores_{}.json", s.estimator_tag), s)?;
            }
            summarize(&cmp.needle, out)?;
            writeln!(out, "reasoning suite:")?;
            summarize(&cmp.reasoning, out)?;
        }
        Command::Report => unreachable!("handled above"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::importance::Estimator;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(args).unwrap()
    }

    #[test]
    fn flags_override_config() {
        let cli = parse(&[
            "headkv",
            "allocate",
            "--seed",
            "9",
            "--policy",
            "pyramid",
            "--budget",
            "32",
            "--beta",
            "2",
            "--alpha",
            "4",
            "--estimator",
            "ER",
        ]);
        let cfg = load_config(&cli).unwrap();
        assert_eq!(cfg.corpus_seed, 9);
        assert_eq!(cfg.allocation.policy, Policy::Pyramid);
        assert_eq!(cfg.allocation.b, 32);
        assert_eq!(cfg.allocation.beta, 2.0);
        assert_eq!((cfg.allocation.alpha, cfg.pooling.alpha), (4, 4));
        assert_eq!(cfg.estimator, Estimator::ER);
    }

    #[test]
    fn config_errors_exit_one() {
        let mut sink = Vec::new();
        for args in [
            vec!["headkv", "estimate", "--policy", "fifo"],
            vec!["headkv", "estimate", "--beta", "1"],
            vec!["headkv", "estimate", "--config", "/nonexistent/cfg.json"],
            vec!["headkv", "frobnicate"],
        ] {
            let err = run(args.clone(), &mut sink).unwrap_err();
            assert_eq!(exit_code(&err), 1, "{args:?}: {err}");
        }
        assert_eq!(exit_code(&Error::invalid("x")), 2);
    }
}
