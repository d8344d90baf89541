//! The `mtseg` command line: `train`, `eval`, `synth` and `report`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{self, RunConfig};
use crate::data::{self, SplitData};
use crate::metrics::{aggregate, table_csv, table_text, TableRow, PUBLISHED_SEMI_SUPERVISED, PUBLISHED_SUPERVISED};
use crate::plot;
use crate::trainer::{
    evaluate_checkpoint, fit, fit_trainer, multi_run, Checkpoint, EpochLog, ModelChoice, Reports, TrainMode, Trainer,
    LATEST_CHECKPOINT, LOG_FILE,
};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "test_metrics.json";

#[derive(Debug, Parser)]
#[command(name = "mtseg", version, about = "Mean-teacher semi-supervised segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model, or several seeds with --runs.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test (or validation) pool.
    Eval(EvalArgs),
    /// Write a synthetic dataset to disk.
    Synth(SynthArgs),
    /// Aggregate finished runs into a results table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Named preset (paper-semi, paper-supervised, synth-smoke, desk-semi, desk-supervised).
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a key, e.g. `--set train.seed=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    fn given(&self) -> bool {
        self.preset.is_some() || self.config.is_some()
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let base = match (&self.preset, &self.config) {
            (Some(p), _) => config::preset(p)?,
            (None, Some(path)) => config::load(path)?,
            (None, None) => return Err(Error::config("pass --preset or --config")),
        };
        config::apply_overrides(&base, &self.overrides)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Run directory (created if missing).
    #[arg(long, default_value = "runs/latest")]
    pub out: PathBuf,
    /// Number of seeds (seed, seed+1, ...).
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    /// Continue the run in `--out` from its latest checkpoint.
    #[arg(long)]
    pub resume: bool,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Student,
    Teacher,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Test,
    Validation,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint file.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Data configuration; defaults to the config.toml next to the checkpoint.
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, value_enum, default_value = "teacher")]
    pub model: ModelArg,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Also write the metrics as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories, or directories holding `run-*` subdirectories.
    #[arg(required = true)]
    pub dirs: Vec<PathBuf>,
    /// Use at most this many runs per model row.
    #[arg(long)]
    pub n: Option<usize>,
    /// Write table.csv and table.txt here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Leave out the published reference rows.
    #[arg(long)]
    pub no_reference: bool,
}

/// Parse arguments, run the command and map errors to exit codes.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Diverged(_) => EXIT_DIVERGED,
        _ => EXIT_CONFIG,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(CONFIG_FILE), config::to_toml(cfg))?;
    Ok(())
}

/// Read the CSV training log of a run directory.
pub fn read_log(dir: &Path) -> Result<Vec<EpochLog>> {
    let path = dir.join(LOG_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    text.lines().skip(1).filter(|l| !l.trim().is_empty()).map(EpochLog::parse_csv_line).collect()
}

fn finish_run(dir: &Path, test: Option<&Reports>) -> Result<()> {
    plot::write_curves(&read_log(dir)?, dir)?;
    if let Some(t) = test {
        println!("test  student: {}", t.student);
        println!("test  teacher: {}", t.teacher);
    }
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    if a.resume {
        let cfg = config::load(&a.out.join(CONFIG_FILE))?;
        println!("{}", config::echo(&cfg));
        let data = cfg.data.load()?;
        let ckpt = Checkpoint::load(&a.out.join(LATEST_CHECKPOINT))?;
        println!("resuming at epoch {} step {}", ckpt.state.epoch, ckpt.state.step);
        let out = fit_trainer(Trainer::from_checkpoint(ckpt, &data)?, Some(&a.out))?;
        return finish_run(&a.out, out.test.as_ref());
    }
    let cfg = a.cfg.resolve()?;
    println!("{}", config::echo(&cfg));
    if a.dry_run {
        print!("{}", config::to_toml(&cfg));
        return Ok(());
    }
    let data = cfg.data.load()?;
    write_config(&a.out, &cfg)?;
    if a.runs <= 1 {
        let out = fit(&cfg.train, &data, Some(&a.out))?;
        return finish_run(&a.out, out.test.as_ref());
    }
    let report = multi_run(&cfg.train, &data, a.runs, Some(&a.out))?;
    for r in &report.runs {
        if let Some(dir) = &r.run_dir {
            let mut c = cfg.clone();
            c.train.seed = r.seed;
            write_config(dir, &c)?;
            if dir.join(LOG_FILE).exists() {
                plot::write_curves(&read_log(dir)?, dir)?;
            }
        }
        match (&r.test, &r.error) {
            (_, Some(e)) => println!("seed {}: FAILED: {e}", r.seed),
            (Some(t), None) => println!("seed {}: teacher Dice {:.3}, student Dice {:.3}", r.seed, t.teacher.dice, t.student.dice),
            (None, None) => {}
        }
    }
    let mut rows = Vec::new();
    for (which, name) in [(ModelChoice::Teacher, "teacher"), (ModelChoice::Student, "student")] {
        if let Some(agg) = report.get(which) {
            rows.push(TableRow { label: format!("{:?} ({name})", cfg.train.mode), aggregate: *agg });
        }
    }
    std::fs::write(a.out.join("table.csv"), table_csv(&rows))?;
    std::fs::write(a.out.join("table.txt"), table_text(&rows))?;
    print!("{}", table_text(&rows));
    if report.failures() > 0 {
        println!("{} of {} runs failed", report.failures(), report.runs.len());
    }
    Ok(())
}

fn load_data_for(cfg_args: &ConfigArgs, checkpoint: &Path) -> Result<SplitData> {
    let cfg = if cfg_args.given() {
        cfg_args.resolve()?
    } else {
        let sibling = checkpoint.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE);
        if !sibling.exists() {
            return Err(Error::config(format!("no {CONFIG_FILE} next to the checkpoint; pass --preset or --config")));
        }
        config::apply_overrides(&config::load(&sibling)?, &cfg_args.overrides)?
    };
    cfg.data.load()
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    if !a.checkpoint.is_file() {
        return Err(Error::Checkpoint(format!("{}: no such file", a.checkpoint.display())));
    }
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let data = load_data_for(&a.cfg, &a.checkpoint)?;
    let slices = match a.split {
        SplitArg::Test => &data.test,
        SplitArg::Validation => &data.validation,
    };
    let reports = evaluate_checkpoint(&ckpt, slices)?;
    let json = match a.model {
        ModelArg::Student => {
            println!("student: {}", reports.student);
            serde_json::to_string_pretty(&reports.student)
        }
        ModelArg::Teacher => {
            println!("teacher: {}", reports.teacher);
            serde_json::to_string_pretty(&reports.teacher)
        }
        ModelArg::Both => {
            println!("student: {}", reports.student);
            println!("teacher: {}", reports.teacher);
            serde_json::to_string_pretty(&reports)
        }
    }
    .expect("metrics serialize");
    if let Some(out) = &a.out {
        std::fs::write(out, json)?;
    }
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let cfg = if a.cfg.given() { a.cfg.resolve()? } else { config::apply_overrides(&config::preset("desk-semi")?, &a.cfg.overrides)? };
    let split = data::synth_split(&cfg.data.synth, cfg.data.seed)?;
    let manifest = data::save_synth(&a.out, &split, &cfg.data.synth, cfg.data.seed)
        .map_err(|e| Error::config(format!("cannot write {}: {e}", a.out.display())))?;
    println!(
        "wrote {} labeled, {} unlabeled, {} validation, {} test slices to {}",
        manifest.counts.labeled,
        manifest.counts.unlabeled,
        manifest.counts.validation,
        manifest.counts.test,
        a.out.display()
    );
    Ok(())
}

/// A finished run found on disk.
struct FoundRun {
    mode: TrainMode,
    selection: ModelChoice,
    reports: Reports,
}

fn find_runs(dir: &Path, out: &mut Vec<FoundRun>) -> Result<()> {
    let metrics = dir.join(METRICS_FILE);
    if metrics.is_file() {
        let cfg_path = [dir.join(CONFIG_FILE), dir.parent().unwrap_or(dir).join(CONFIG_FILE)]
            .into_iter()
            .find(|p| p.is_file())
            .ok_or_else(|| Error::config(format!("{}: no {CONFIG_FILE} for this run", dir.display())))?;
        let cfg = config::load(&cfg_path)?;
        let text = std::fs::read_to_string(&metrics)?;
        let reports: Reports = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: mismatched metric set: {e}", metrics.display())))?;
        out.push(FoundRun { mode: cfg.train.mode, selection: cfg.train.eval.selection, reports });
        return Ok(());
    }
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::config(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("run-")))
        .collect();
    subdirs.sort();
    for d in subdirs {
        find_runs(&d, out)?;
    }
    Ok(())
}

/// Build the results table rows (supervised first) from finished runs.
pub fn report_rows(dirs: &[PathBuf], n: Option<usize>, reference: bool) -> Result<Vec<TableRow>> {
    let mut runs = Vec::new();
    for d in dirs {
        find_runs(d, &mut runs)?;
    }
    if runs.is_empty() {
        return Err(Error::config("no finished runs (test_metrics.json) found"));
    }
    let mut rows = Vec::new();
    for (mode, label) in [(TrainMode::Supervised, "Supervised"), (TrainMode::SemiSupervised, "Semi-supervised")] {
        let mut reports: Vec<_> = runs.iter().filter(|r| r.mode == mode).map(|r| *r.reports.get(r.selection)).collect();
        if let Some(n) = n {
            reports.truncate(n);
        }
        if !reports.is_empty() {
            rows.push(TableRow { label: format!("{label} (this run)"), aggregate: aggregate(&reports)? });
        }
    }
    if reference {
        rows.push(TableRow::published("Supervised (published)", PUBLISHED_SUPERVISED));
        rows.push(TableRow::published("Semi-supervised (published)", PUBLISHED_SEMI_SUPERVISED));
    }
    Ok(rows)
}

pub fn cmd_report(a: &ReportArgs) -> Result<()> {
    let rows = report_rows(&a.dirs, a.n, !a.no_reference)?;
    print!("{}", table_text(&rows));
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("table.csv"), table_csv(&rows))?;
        std::fs::write(out.join("table.txt"), table_text(&rows))?;
    }
    Ok(())
}
