//! `dcr <verb> [--config PATH] [--set key=value]... [--out DIR] [--seed N]`
//!
//! Exit status is 0 when everything requested succeeded, 1 when a run
//! diverged or a theory check failed, and 2 for usage or configuration
//! errors. Usage errors are detected before anything is written.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use dcr_core::checkpoint;
use dcr_core::config::{load_config, parse_override, RunConfig};
use dcr_core::error::Error;
use dcr_core::harness::{
    compare, make_teacher, ranking_table, run_experiment, write_atomic, write_run, RunStatus,
};
use dcr_core::metrics::{fmt_sig9, parse_metrics_csv, MetricsRow};
use dcr_core::model::{Backbone, Model, ModelSpec};
use dcr_core::theory::verify_all;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "dcr",
    version,
    about = "Replacement experiments and theory checks"
)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// Train the students of one method against the teacher.
    Train(Common),
    /// Run every theory check and write a summary.
    VerifyTheory(Common),
    /// Train and freeze the reference teacher.
    MakeTeacher(Common),
    /// Merge the metrics of finished run directories into one table.
    Export {
        #[command(flatten)]
        common: Common,
        /// Run directories written by `train` or `compare`.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Run the method grid with a shared seed and rank the methods.
    Compare(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one key; applied after the file, in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "dcr-out")]
    out: PathBuf,
    /// Shorthand for `--set seed=N`, applied last.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

/// A failure mapped to an exit status.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn failed(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_FAILED,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::usage(e.to_string()),
            other => Failure::failed(other.to_string()),
        }
    }
}

type Outcome = std::result::Result<i32, Failure>;

/// Parses `argv` (program name first), runs the verb and returns the exit
/// status. Messages go to stdout and stderr.
pub fn parse_and_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.verb) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn resolve(common: &Common) -> std::result::Result<RunConfig, Failure> {
    let mut overrides = common
        .set
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    Ok(load_config(common.config.as_deref(), &overrides)?)
}

fn dispatch(verb: Verb) -> Outcome {
    match verb {
        Verb::Train(c) => train(&c),
        Verb::VerifyTheory(c) => verify_theory(&c),
        Verb::MakeTeacher(c) => teacher_only(&c),
        Verb::Export { common, runs } => export(&common, &runs),
        Verb::Compare(c) => compare_grid(&c),
    }
}

/// Reads the teacher named by the `teacher` key, checking that it matches
/// the configured architecture.
fn load_teacher(cfg: &RunConfig) -> std::result::Result<Option<Backbone>, Failure> {
    let Some(path) = &cfg.teacher else {
        return Ok(None);
    };
    let model = checkpoint::load(path).map_err(|e| {
        Failure::usage(format!(
            "key `teacher`: cannot load {}: {e}",
            path.display()
        ))
    })?;
    if model.spec != teacher_spec(cfg) {
        return Err(Failure::usage(format!(
            "key `teacher`: {} was trained for a different model.* or task configuration",
            path.display()
        )));
    }
    Ok(Some(model.backbone))
}

fn teacher_spec(cfg: &RunConfig) -> ModelSpec {
    ModelSpec {
        replaced: Default::default(),
        ..cfg.model.clone()
    }
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> std::result::Result<(), Failure> {
    std::fs::create_dir_all(out)
        .map_err(|e| Failure::failed(format!("cannot create {}: {e}", out.display())))?;
    write_atomic(&out.join("config.txt"), &cfg.to_text())?;
    Ok(())
}

/// The configured teacher, or a freshly trained one saved as
/// `teacher.txt` in `out`.
fn obtain_teacher(
    cfg: &RunConfig,
    loaded: Option<Backbone>,
    out: &Path,
) -> std::result::Result<Backbone, Failure> {
    if let Some(t) = loaded {
        return Ok(t);
    }
    eprintln!("training teacher ({} epochs)", cfg.teacher_training.epochs);
    let outcome = make_teacher(cfg)?;
    let model = Model::with_students(teacher_spec(cfg), outcome.backbone.clone(), 0)?;
    checkpoint::save(&out.join("teacher.txt"), &model)?;
    eprintln!("teacher val_acc {:.4}", outcome.val_acc);
    Ok(outcome.backbone)
}

fn train(c: &Common) -> Outcome {
    let cfg = resolve(c)?;
    let loaded = load_teacher(&cfg)?;
    prepare_out(&c.out, &cfg)?;
    let teacher = obtain_teacher(&cfg, loaded, &c.out)?;
    let record = run_experiment(&cfg, &teacher)?;
    write_run(&c.out, &record)?;
    print!("{}", record.summary.to_text());
    Ok(match &record.summary.status {
        RunStatus::Completed => EXIT_OK,
        RunStatus::Diverged(msg) => {
            eprintln!("run diverged: {msg}");
            EXIT_FAILED
        }
    })
}

fn compare_grid(c: &Common) -> Outcome {
    let cfg = resolve(c)?;
    if cfg.compare_methods.is_empty() {
        return Err(Failure::usage("key `compare.methods` is empty"));
    }
    let loaded = load_teacher(&cfg)?;
    prepare_out(&c.out, &cfg)?;
    let teacher = obtain_teacher(&cfg, loaded, &c.out)?;
    let records = compare(&cfg, &teacher)?;
    let mut code = EXIT_OK;
    for r in &records {
        write_run(&c.out.join(r.summary.method.name()), r)?;
        if let RunStatus::Diverged(msg) = &r.summary.status {
            eprintln!("{} diverged: {msg}", r.summary.method);
            code = EXIT_FAILED;
        }
    }
    let table = ranking_table(&records);
    write_atomic(&c.out.join("ranking.txt"), &format!("{table}\n"))?;
    println!("{table}");
    Ok(code)
}

fn teacher_only(c: &Common) -> Outcome {
    let cfg = resolve(c)?;
    prepare_out(&c.out, &cfg)?;
    let outcome = make_teacher(&cfg)?;
    let model = Model::with_students(teacher_spec(&cfg), outcome.backbone, 0)?;
    checkpoint::save(&c.out.join("teacher.txt"), &model)?;
    let mut log = String::from("step,train_loss,val_acc\n");
    for (s, l, a) in &outcome.log {
        let _ = writeln!(log, "{s},{},{}", fmt_sig9(*l), fmt_sig9(*a));
    }
    write_atomic(&c.out.join("teacher_log.csv"), &log)?;
    println!("teacher val_acc = {}", fmt_sig9(outcome.val_acc));
    Ok(EXIT_OK)
}

fn verify_theory(c: &Common) -> Outcome {
    let cfg = resolve(c)?;
    let loaded = load_teacher(&cfg)?;
    prepare_out(&c.out, &cfg)?;
    let teacher = obtain_teacher(&cfg, loaded, &c.out)?;
    let report = verify_all(&cfg, &teacher)?;
    write_atomic(&c.out.join("theory_summary.csv"), &report.summary_csv())?;
    write_atomic(&c.out.join("theory_report.txt"), &report.tables())?;
    print!("{}", report.summary_csv());
    let failed: Vec<&str> = report
        .records
        .iter()
        .filter(|r| !r.pass)
        .map(|r| r.name)
        .collect();
    if failed.is_empty() {
        Ok(EXIT_OK)
    } else {
        eprintln!("failed: {}", failed.join(", "));
        Ok(EXIT_FAILED)
    }
}

/// `key = value` lines of a run summary.
fn read_summary(dir: &Path) -> std::result::Result<BTreeMap<String, String>, Failure> {
    let path = dir.join("summary.txt");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect())
}

fn export(c: &Common, runs: &[PathBuf]) -> Outcome {
    let cfg = resolve(c)?;
    let mut header: Option<String> = None;
    let mut merged = String::new();
    let mut table =
        String::from("run,method,seed,steps_to_threshold,final_student_val_acc,status\n");
    for dir in runs {
        let summary = read_summary(dir)?;
        let path = dir.join("metrics.csv");
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
        let rows = parse_metrics_csv(&text)
            .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        let this_header = text.lines().next().unwrap_or_default().to_string();
        match &header {
            None => header = Some(this_header),
            Some(h) if *h != this_header => {
                return Err(Failure::usage(format!(
                    "{} has different columns from the first run",
                    path.display()
                )))
            }
            Some(_) => {}
        }
        let run = dir.display().to_string();
        let method = summary.get("method").cloned().unwrap_or_default();
        for row in &rows {
            let _ = writeln!(merged, "{run},{method},{}", row.to_csv());
        }
        let get = |k: &str| summary.get(k).cloned().unwrap_or_default();
        let _ = writeln!(
            table,
            "{run},{method},{},{},{},{}",
            get("seed"),
            get("steps_to_threshold"),
            get("final_student_val_acc"),
            get("status")
        );
    }
    let header = header.unwrap_or_else(|| MetricsRow::header(&[]));
    prepare_out(&c.out, &cfg)?;
    write_atomic(
        &c.out.join("combined_metrics.csv"),
        &format!("run,method,{header}\n{merged}"),
    )?;
    write_atomic(&c.out.join("runs.csv"), &table)?;
    print!("{table}");
    Ok(EXIT_OK)
}
