//! Command-line driver.
//!
//! Run directory layout:
//!
//! ```text
//! <out>/config.toml           canonical copy of the run config
//! <out>/data/train.tsv        training records
//! <out>/data/eval_manifest.json
//! <out>/checkpoints/step-NNNNNNN.ckpt
//! <out>/logs/loss.tsv
//! <out>/reports/              eval reports, score dumps, trajectories
//! ```
//!
//! Every file carries the config hash. Exit codes: 0 success, 1 I/O and
//! other failures, 2 invalid configuration, 3 missing or mismatched
//! artifacts, 4 numeric failure.

mod config;
mod grid;

pub use config::{DataSection, EvalSection, ObjectivesSection, OutputSection, RunConfig, TrainSection};
pub use grid::{parse_grid, GridRow};

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::dynamics::{all_pairs, correlate_tasks, trajectory_from_checkpoints, TrajectoryTable, DEFAULT_EMA_FACTOR};
use crate::error::{Error, Result};
use crate::evalharness::{generate_eval_set, parse_manifest, run_benchmark, write_score_dump, EvalReport, ModelScorer};
use crate::model::{load_checkpoint, save_checkpoint, VlmModel};
use crate::objectives::{parse_loss_log, LossArm, LossLog, TrainData, TrainingRun};
use crate::synthdata::{read_dataset, verify_dataset, write_dataset};

/// Position-bin count given to position-token arms when the base config
/// sets none.
pub const DEFAULT_POSITION_BINS: usize = 16;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_DEPENDENCY: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Validation { .. } | Error::Configuration(_) | Error::UnknownSubtask(_) => EXIT_VALIDATION,
        Error::Dependency { .. } | Error::HashMismatch { .. } => EXIT_DEPENDENCY,
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_OTHER,
    }
}

#[derive(Parser, Debug)]
#[command(name = "finevl", version, about = "Fine-grained vision-language pretraining at desk scale")]
#[command(after_help = "Exit codes: 0 ok, 1 io/other, 2 invalid config, 3 missing or mismatched artifact, 4 numeric")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Run config file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Run directory; overrides `[output] dir`.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate training records and the evaluation manifest.
    GenData(Common),
    /// Train and write checkpoints plus the loss log.
    Train(Common),
    /// Evaluate one checkpoint (the latest by default).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate every checkpoint and correlate the metric trajectories.
    Dynamics(Common),
    /// Run one full pipeline per grid row and summarize.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// e.g. `losses=A,full;sources=all|captions+region_descriptions`
        #[arg(long, value_name = "SPEC")]
        grid: String,
    },
    /// Summarize the eval reports of a run directory.
    Report(Common),
}

/// Parses `args` (without the program name) and runs the command,
/// returning the process exit code.
pub fn main_with<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(std::iter::once("finevl".into()).chain(args.into_iter().map(Into::into))) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            e.print().ok();
            return code;
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: &Command) -> Result<()> {
    match cmd {
        Command::GenData(c) => cmd_gen_data(&Run::open(c)?).map(drop),
        Command::Train(c) => cmd_train(&Run::open(c)?).map(drop),
        Command::Eval { common, checkpoint } => {
            let report = cmd_eval(&Run::open(common)?, checkpoint.as_deref())?;
            print!("{}", crate::evalharness::render_report_tsv(&report));
            Ok(())
        }
        Command::Dynamics(c) => cmd_dynamics(&Run::open(c)?).map(drop),
        Command::Ablate { common, grid } => {
            let cfg = load_config(common)?;
            let out = common.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
            let summary = cmd_ablate(&cfg, &parse_grid(grid)?, &out)?;
            print!("{summary}");
            Ok(())
        }
        Command::Report(c) => {
            let dir = match (&c.out, &c.config) {
                (Some(d), _) => d.clone(),
                (None, Some(_)) => load_config(c)?.output.dir,
                (None, None) => return Err(Error::Configuration("report needs --out or --config".into())),
            };
            print!("{}", cmd_report(&dir)?);
            Ok(())
        }
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let path = c
        .config
        .as_ref()
        .ok_or_else(|| Error::Configuration("--config is required".into()))?;
    RunConfig::load(path)
}

fn dependency(path: &Path, reason: impl Into<String>) -> Error {
    Error::Dependency {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Value of the `config_hash` comment in a file's leading `#` lines.
pub fn embedded_hash(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path).map_err(|e| dependency(path, e.to_string()))?;
    text.lines()
        .take_while(|l| l.starts_with('#') || l.trim_start().starts_with('{') || l.trim_start().starts_with('"'))
        .find_map(|l| {
            let l = l.trim_start_matches('#').trim();
            l.strip_prefix("config_hash=")
                .or_else(|| l.strip_prefix("\"config_hash\": \""))
                .map(|h| h.trim_end_matches(['"', ',']).to_string())
        })
        .ok_or_else(|| dependency(path, "no config hash"))
}

/// A config bound to its run directory.
pub struct Run {
    pub config: RunConfig,
    pub dir: PathBuf,
    pub hash: String,
}

impl Run {
    pub fn new(config: RunConfig, dir: PathBuf) -> Self {
        Self {
            hash: config.hash(),
            config,
            dir,
        }
    }

    fn open(c: &Common) -> Result<Run> {
        let cfg = load_config(c)?;
        let dir = c.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
        Ok(Run::new(cfg, dir))
    }

    pub fn config_path(&self) -> PathBuf {
        self.dir.join("config.toml")
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dir.join("data").join("train.tsv")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join("data").join("eval_manifest.json")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.dir.join("checkpoints")
    }

    pub fn checkpoint_path(&self, step: usize) -> PathBuf {
        self.checkpoint_dir().join(format!("step-{step:07}.ckpt"))
    }

    pub fn loss_log_path(&self) -> PathBuf {
        self.dir.join("logs").join("loss.tsv")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.dir.join("reports")
    }

    /// Fails on a hash-mismatched artifact.
    fn check_hash(&self, path: &Path) -> Result<()> {
        let found = embedded_hash(path)?;
        if found != self.hash {
            return Err(Error::HashMismatch {
                path: path.to_path_buf(),
                expected: self.hash.clone(),
                found,
            });
        }
        Ok(())
    }

    /// Creates the layout and the config copy, refusing a directory that
    /// belongs to another config.
    fn prepare(&self) -> Result<()> {
        let cfg_path = self.config_path();
        if cfg_path.exists() {
            let other = RunConfig::load(&cfg_path)?;
            if other.hash() != self.hash {
                return Err(Error::HashMismatch {
                    path: cfg_path,
                    expected: self.hash.clone(),
                    found: other.hash(),
                });
            }
        }
        for sub in ["data", "checkpoints", "logs", "reports"] {
            fs::create_dir_all(self.dir.join(sub))?;
        }
        fs::write(&cfg_path, format!("# config_hash={}\n{}", self.hash, self.config.render()))?;
        Ok(())
    }

    /// Saved checkpoints as `(step, path)` in step order.
    pub fn checkpoints(&self) -> Result<Vec<(usize, PathBuf)>> {
        let dir = self.checkpoint_dir();
        if !dir.is_dir() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if let Some(step) = name
                .strip_prefix("step-")
                .and_then(|s| s.strip_suffix(".ckpt"))
                .and_then(|s| s.parse().ok())
            {
                out.push((step, path));
            }
        }
        out.sort();
        Ok(out)
    }
}

pub fn cmd_gen_data(run: &Run) -> Result<usize> {
    run.prepare()?;
    let cfg = &run.config;
    let records = TrainData::generate_records(cfg.data_seed(), cfg.data.scenes, cfg.model.patch_grid, &cfg.ablation());
    let header = format!(
        "config_hash={}\ndata_seed={} scenes={} sources={}",
        run.hash,
        cfg.data_seed(),
        cfg.data.scenes,
        cfg.objectives.sources
    );
    write_dataset(&run.dataset_path(), &header, &records)?;
    verify_dataset(&read_dataset(&run.dataset_path())?)?;
    let mut manifest = serde_json::to_value(cfg.manifest()).map_err(|e| Error::parse("manifest", e.to_string()))?;
    let mut doc = serde_json::Map::new();
    doc.insert("config_hash".into(), run.hash.clone().into());
    doc.append(manifest.as_object_mut().expect("manifest is an object"));
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::parse("manifest", e.to_string()))?;
    fs::write(run.manifest_path(), text + "\n")?;
    Ok(records.len())
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(dependency(path, format!("{what} not found; run gen-data first")))
    }
}

/// Trains to `train.steps`, resuming from the latest checkpoint when one
/// exists. Returns the number of steps run now.
pub fn cmd_train(run: &Run) -> Result<usize> {
    run.prepare()?;
    let data_path = run.dataset_path();
    require(&data_path, "training data")?;
    run.check_hash(&data_path)?;
    let cfg = &run.config;
    let settings = cfg.train_settings();
    let data = TrainData::from_records(&read_dataset(&data_path)?, &settings.ablation)?;

    let latest = run.checkpoints()?.into_iter().rev().find(|(s, _)| *s <= settings.steps);
    let log_path = run.loss_log_path();
    let (mut tr, mut log) = match latest {
        Some((step, path)) => {
            let ck = load_checkpoint(&path)?;
            if ck.config_hash != run.hash {
                return Err(Error::HashMismatch {
                    path,
                    expected: run.hash.clone(),
                    found: ck.config_hash,
                });
            }
            let model = VlmModel::from_checkpoint(&ck)?;
            require(&log_path, "loss log")?;
            run.check_hash(&log_path)?;
            let kept = parse_loss_log(&fs::read_to_string(&log_path)?)?;
            let mut log = LossLog::create(&log_path, &run.hash)?;
            for (s, kind, b) in kept.iter().filter(|(s, _, _)| *s < step) {
                log.record(*s, *kind, b)?;
            }
            (TrainingRun::resume(model, settings, data, step)?, log)
        }
        None => {
            let model = VlmModel::new(cfg.model.clone(), cfg.seed)?;
            (TrainingRun::new(model, settings, data)?, LossLog::create(&log_path, &run.hash)?)
        }
    };
    let start = tr.step();
    while !tr.is_done() {
        let (step, kind, losses) = tr.advance()?;
        log.record(step, kind, &losses)?;
        let done = step + 1;
        if done % cfg.train.cadence == 0 {
            log.flush()?;
            save_checkpoint(&run.checkpoint_path(done), &tr.model.to_checkpoint(&run.hash, done))?;
        }
    }
    log.flush()?;
    Ok(tr.step() - start)
}

fn load_eval_set(run: &Run) -> Result<crate::evalharness::EvalSet> {
    let path = run.manifest_path();
    require(&path, "evaluation manifest")?;
    run.check_hash(&path)?;
    let manifest = parse_manifest(&fs::read_to_string(&path)?)?;
    generate_eval_set(&manifest)
}

/// Evaluates `checkpoint` (default: the latest) and writes
/// `reports/eval-step-N.{tsv,json}` and `reports/scores-step-N.tsv`.
pub fn cmd_eval(run: &Run, checkpoint: Option<&Path>) -> Result<EvalReport> {
    let path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => run
            .checkpoints()?
            .pop()
            .map(|(_, p)| p)
            .ok_or_else(|| dependency(&run.checkpoint_dir(), "no checkpoints; run train first"))?,
    };
    if !path.exists() {
        return Err(dependency(&path, "checkpoint not found"));
    }
    let ck = load_checkpoint(&path)?;
    if ck.config_hash != run.hash {
        return Err(Error::HashMismatch {
            path,
            expected: run.hash.clone(),
            found: ck.config_hash,
        });
    }
    let set = load_eval_set(run)?;
    let model = VlmModel::from_checkpoint(&ck)?;
    let (report, scores) = run_benchmark(&ModelScorer(&model), &set, ck.step, &run.hash)?;
    let reports = run.reports_dir();
    fs::create_dir_all(&reports)?;
    report.write(&reports, &format!("eval-step-{:07}", ck.step))?;
    write_score_dump(&reports.join(format!("scores-step-{:07}.tsv", ck.step)), &run.hash, &scores)?;
    Ok(report)
}

/// Writes `reports/trajectory.tsv`, its smoothed display copy and
/// `reports/correlations.tsv`.
pub fn cmd_dynamics(run: &Run) -> Result<TrajectoryTable> {
    let paths: Vec<PathBuf> = run.checkpoints()?.into_iter().map(|(_, p)| p).collect();
    if paths.is_empty() {
        return Err(dependency(&run.checkpoint_dir(), "no checkpoints; run train first"));
    }
    let set = load_eval_set(run)?;
    let table = trajectory_from_checkpoints(&paths, &set, &run.hash)?;
    let reports = run.reports_dir();
    fs::create_dir_all(&reports)?;
    fs::write(reports.join("trajectory.tsv"), table.to_tsv(&run.hash))?;
    fs::write(
        reports.join("trajectory_smoothed.tsv"),
        table.smoothed(DEFAULT_EMA_FACTOR)?.to_tsv(&run.hash),
    )?;
    let corr = correlate_tasks(&table, &all_pairs(&table))?;
    fs::write(reports.join("correlations.tsv"), corr.to_tsv(&run.hash))?;
    Ok(table)
}

/// Config of one grid row derived from `base`.
pub fn arm_config(base: &RunConfig, row: &GridRow, dir: &Path) -> RunConfig {
    let mut c = base.clone();
    c.objectives.loss = row.loss;
    c.objectives.sources = row.sources;
    c.model.position_bins = if row.loss == LossArm::Pevl {
        Some(base.model.position_bins.unwrap_or(DEFAULT_POSITION_BINS))
    } else {
        None
    };
    c.output.dir = dir.to_path_buf();
    c
}

/// Runs gen-data, train and eval per row under `out`, then writes
/// `out/ablation_summary.tsv`. Returns the summary text.
pub fn cmd_ablate(base: &RunConfig, rows: &[GridRow], out: &Path) -> Result<String> {
    fs::create_dir_all(out)?;
    let mut reports = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let name = row.dir_name(i);
        let dir = out.join(&name);
        let cfg = arm_config(base, row, Path::new(&name));
        let text = cfg.render();
        let cfg = RunConfig::parse(&text, &format!("grid row {i}"))?;
        let run = Run::new(cfg, dir);
        cmd_gen_data(&run)?;
        cmd_train(&run)?;
        reports.push((row, run.hash.clone(), cmd_eval(&run, None)?));
    }
    let summary = render_ablation_summary(&base.hash(), &reports);
    fs::write(out.join("ablation_summary.tsv"), &summary)?;
    Ok(summary)
}

/// Source flags, then loss flags, then every metric of the first report.
fn render_ablation_summary(base_hash: &str, rows: &[(&GridRow, String, EvalReport)]) -> String {
    let keys: Vec<String> = rows
        .first()
        .map(|(_, _, r)| r.metrics.iter().map(|m| m.key()).collect())
        .unwrap_or_default();
    let mut out = format!(
        "# config_hash={base_hash}\nrow\tcaptions\tobject_labels\tattribute_labels\tregion_descriptions\tvma\tbbox\tpevl\tloss\tconfig_hash"
    );
    for k in &keys {
        write!(out, "\t{k}").ok();
    }
    out.push('\n');
    for (i, (row, hash, report)) in rows.iter().enumerate() {
        let s = row.sources;
        let a = row.loss.config(s);
        let flags = [
            s.captions,
            s.object_labels,
            s.attribute_labels,
            s.region_descriptions,
            a.use_vma,
            a.use_bbox,
            a.use_pevl_tokens,
        ];
        write!(out, "{i}").ok();
        for f in flags {
            write!(out, "\t{}", f as u8).ok();
        }
        write!(out, "\t{}\t{hash}", row.loss.name()).ok();
        for k in &keys {
            let v = report.metrics.iter().find(|m| &m.key() == k).map(|m| m.value);
            match v {
                Some(v) => write!(out, "\t{v}").ok(),
                None => write!(out, "\tNA").ok(),
            };
        }
        out.push('\n');
    }
    out
}

/// Collects `reports/eval-step-*.json` into `reports/summary.tsv`
/// (step × metric); falls back to an ablation summary in `dir`.
pub fn cmd_report(dir: &Path) -> Result<String> {
    let ablation = dir.join("ablation_summary.tsv");
    let reports_dir = dir.join("reports");
    if !reports_dir.is_dir() {
        if ablation.exists() {
            return Ok(fs::read_to_string(ablation)?);
        }
        return Err(dependency(&reports_dir, "no reports; run eval first"));
    }
    let mut names: Vec<PathBuf> = fs::read_dir(&reports_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("eval-step-") && n.ends_with(".json"))
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(dependency(&reports_dir, "no eval reports; run eval first"));
    }
    let mut table = TrajectoryTable::new();
    let mut hash = String::new();
    for p in &names {
        let r = EvalReport::from_json(&fs::read_to_string(p)?)?;
        if hash.is_empty() {
            hash = r.config_hash.clone();
        } else if r.config_hash != hash {
            return Err(Error::HashMismatch {
                path: p.clone(),
                expected: hash,
                found: r.config_hash,
            });
        }
        table.push_report(&r)?;
    }
    let text = table.to_tsv(&hash);
    fs::write(reports_dir.join("summary.tsv"), &text)?;
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct() {
        let v = Error::Validation {
            path: "c".into(),
            line: 1,
            message: "m".into(),
        };
        let d = dependency(Path::new("x"), "gone");
        let n = Error::Numeric("nan".into());
        let codes = [exit_code(&v), exit_code(&d), exit_code(&n), exit_code(&Error::Empty("x"))];
        assert_eq!(codes, [EXIT_VALIDATION, EXIT_DEPENDENCY, EXIT_NUMERIC, EXIT_OTHER]);
    }

    #[test]
    fn finds_embedded_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.tsv");
        fs::write(&p, "# config_hash=abc\n# other\nx\n").unwrap();
        assert_eq!(embedded_hash(&p).unwrap(), "abc");
        fs::write(&p, "{\n  \"config_hash\": \"def\",\n  \"seed\": 1\n}\n").unwrap();
        assert_eq!(embedded_hash(&p).unwrap(), "def");
        fs::write(&p, "x\n").unwrap();
        assert!(embedded_hash(&p).is_err());
    }

    #[test]
    fn arm_configs_follow_invariants() {
        let base = RunConfig::new(3);
        for row in parse_grid("losses=A,A+VMA,A+bbox,full,pevl;sources=all").unwrap() {
            let c = arm_config(&base, &row, Path::new("d"));
            RunConfig::parse(&c.render(), "t").unwrap();
            assert_eq!(c.model.position_bins.is_some(), row.loss == LossArm::Pevl);
        }
    }
}
