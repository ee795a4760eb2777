//! `dfcon` command-line interface.
//!
//! Exit codes: 0 success, 1 check failure, 2 configuration or input error,
//! 3 data precondition failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::config::RunConfig;
use crate::consistency::CrossLossMode;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::gradcheck::{run_gradient_checks, GradCheckConfig};
use crate::metrics::{evaluate_categories, write_score_csv, ScoreRow};
use crate::model::ConsistencyModel;
use crate::motion::{load_landmark_dir, run_probe, synth_landmarks};
use crate::scorer::{explain, score_stream, verdict, ScoreReport};
use crate::streams::StreamTriple;
use crate::synthgen::write_synth_output;
use crate::trainer::train;

#[derive(Debug, Parser)]
#[command(name = "dfcon", version, about = "Deepfake detection from identity and audio-visual consistency")]
pub struct Cli {
    /// TOML config file; command-line flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every seeded stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long)]
    pub print_config: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic training corpus, evaluation set and truth.csv.
    Synth(SynthArgs),
    /// Train the intra and cross models.
    Train(TrainArgs),
    /// Score stream triples.
    Score(ScoreArgs),
    /// Compute AP/AUC tables from score CSVs.
    Eval(EvalArgs),
    /// Verdict plus least consistent windows for one stream or report.
    Explain(ExplainArgs),
    /// Identity classification from landmark motion.
    MotionProbe(MotionProbeArgs),
    /// Finite-difference check of every analytic gradient.
    CheckGrad(CheckGradArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub identities: Option<usize>,
    #[arg(long)]
    pub eval_streams: Option<usize>,
    #[arg(long)]
    pub drift_magnitude: Option<f64>,
    #[arg(long)]
    pub desync_offset: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus directory (for synthetic data, the `train/` folder).
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub loss_mode: Option<CrossLossMode>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Directory holding intra.ckpt and cross.ckpt.
    #[arg(long)]
    pub checkpoints: PathBuf,
}

impl ModelArgs {
    fn load(&self) -> Result<(ConsistencyModel, ConsistencyModel)> {
        Ok((
            ConsistencyModel::load(self.checkpoints.join("intra.ckpt"))?,
            ConsistencyModel::load(self.checkpoints.join("cross.ckpt"))?,
        ))
    }
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Stream directories (or their identity.json manifests).
    pub streams: Vec<PathBuf>,
    /// Score every stream listed in a synth truth.csv instead.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Write a score CSV (path, category, label, scores) for `eval`.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Add a verdict: fake if the combined score is below this.
    #[arg(long, allow_hyphen_values = true)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Score CSVs; each may hold several fake categories.
    pub inputs: Vec<PathBuf>,
    /// Also write the table as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    /// A report JSON from `score`, or a stream directory (needs --checkpoints).
    pub input: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    pub threshold: f64,
    #[arg(long)]
    pub checkpoints: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MotionProbeArgs {
    /// Directory of landmark manifests.
    #[arg(long, conflicts_with = "synth")]
    pub landmarks: Option<PathBuf>,
    /// Use the synthetic landmark generator.
    #[arg(long)]
    pub synth: bool,
    #[arg(long)]
    pub identities: Option<usize>,
    /// Permute identity labels first (chance-level control).
    #[arg(long)]
    pub shuffle_labels: bool,
}

#[derive(Debug, Args)]
pub struct CheckGradArgs {
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    #[arg(long, default_value_t = 3)]
    pub identities: usize,
    #[arg(long, default_value_t = 3)]
    pub samples: usize,
    #[arg(long, default_value_t = 6)]
    pub dim: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, hide = true)]
    pub inject_bug: bool,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    match &cli.command {
        Some(Command::Synth(a)) => {
            set(&mut cfg.synth.num_identities, a.identities);
            set(&mut cfg.synth.eval_streams, a.eval_streams);
            set(&mut cfg.synth.drift_magnitude, a.drift_magnitude);
            set(&mut cfg.synth.desync_offset_windows, a.desync_offset);
        }
        Some(Command::Train(a)) => {
            set(&mut cfg.train.total_steps, a.steps);
            set(&mut cfg.train.lr_peak, a.lr);
            set(&mut cfg.train.loss_mode, a.loss_mode);
        }
        Some(Command::MotionProbe(a)) => set(&mut cfg.probe.landmarks.num_identities, a.identities),
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn print_json(value: &impl serde::Serialize) {
    emit(&(serde_json::to_string_pretty(value).expect("serializes") + "\n"));
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = effective_config(&cli)?;
    if cli.print_config {
        emit(&cfg.to_toml());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(Error::config("command", "no command given (try --help)"));
    };
    match command {
        Command::Synth(a) => {
            write_synth_output(&cfg.synth, &a.out)?;
            emit(&format!("wrote {}\n", a.out.display()));
            Ok(())
        }
        Command::Train(a) => {
            let corpus = Corpus::load_dir(&a.corpus)?;
            let out = train(&corpus, &cfg.train, &a.out)?;
            emit(&format!("wrote {} and {}\n", out.intra_checkpoint.display(), out.cross_checkpoint.display()));
            Ok(())
        }
        Command::Score(a) => cmd_score(&cfg, a),
        Command::Eval(a) => cmd_eval(a),
        Command::Explain(a) => cmd_explain(&cfg, a),
        Command::MotionProbe(a) => cmd_motion_probe(&cfg, a),
        Command::CheckGrad(a) => cmd_check_grad(a),
    }
}

fn stream_dir(path: &Path) -> PathBuf {
    if path.is_file() {
        path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf)
    } else {
        path.to_path_buf()
    }
}

#[derive(Debug, Deserialize)]
struct TruthRow {
    path: String,
    label: u8,
    corruption: String,
}

fn read_truth(path: &Path) -> Result<Vec<TruthRow>> {
    let csv_err = |e| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().collect::<std::result::Result<Vec<TruthRow>, _>>().map_err(csv_err)
}

fn cmd_score(cfg: &RunConfig, a: ScoreArgs) -> Result<()> {
    // (display path, directory, category, label)
    let mut jobs: Vec<(String, PathBuf, String, u8)> = Vec::new();
    if let Some(truth) = &a.truth {
        let base = truth.parent().unwrap_or(Path::new("."));
        for row in read_truth(truth)? {
            jobs.push((row.path.clone(), base.join(&row.path), row.corruption, row.label));
        }
    }
    for s in &a.streams {
        jobs.push((s.display().to_string(), stream_dir(s), "unknown".into(), 1));
    }
    if jobs.is_empty() {
        return Err(Error::config("streams", "no streams given"));
    }
    let (intra, cross) = a.model.load()?;
    let mut reports: Vec<ScoreReport> = Vec::with_capacity(jobs.len());
    let mut rows = Vec::with_capacity(jobs.len());
    for (name, dir, category, label) in &jobs {
        let triple = StreamTriple::load(dir)?;
        let mut report = score_stream(&triple, &intra, &cross, &cfg.scoring)?;
        if let Some(t) = a.threshold {
            report.verdict = Some(verdict(report.score_combined, t));
        }
        rows.push(ScoreRow {
            path: name.clone(),
            category: category.clone(),
            label: *label,
            score_intra: report.score_intra,
            score_cross: report.score_cross,
            score_combined: report.score_combined,
        });
        reports.push(report);
    }
    if let Some(csv) = &a.csv {
        write_score_csv(&rows, csv)?;
        emit(&format!("scored {} streams into {}\n", rows.len(), csv.display()));
    } else if reports.len() == 1 {
        print_json(&reports[0]);
    } else {
        print_json(&reports);
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    for p in a.inputs.iter().filter(|p| p.exists()) {
        if crate::metrics::read_score_csv(p)?.is_empty() {
            return Err(Error::config("inputs", format!("{} has no rows", p.display())));
        }
    }
    let table = evaluate_categories(&a.inputs)?;
    emit(&table.to_text());
    if let Some(out) = &a.out {
        table.write_csv(out)?;
    }
    Ok(())
}

fn cmd_explain(cfg: &RunConfig, a: ExplainArgs) -> Result<()> {
    let report: ScoreReport = if a.input.is_file() && a.input.extension().is_some_and(|x| x == "json") && a.checkpoints.is_none() {
        let text = std::fs::read_to_string(&a.input).map_err(|e| Error::io(&a.input, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&a.input, e.to_string()))?
    } else {
        let Some(ck) = &a.checkpoints else {
            return Err(Error::config("checkpoints", "needed to explain a stream directory"));
        };
        let (intra, cross) = ModelArgs { checkpoints: ck.clone() }.load()?;
        score_stream(&StreamTriple::load(stream_dir(&a.input))?, &intra, &cross, &cfg.scoring)?
    };
    print_json(&explain(&report, a.threshold));
    Ok(())
}

fn cmd_motion_probe(cfg: &RunConfig, a: MotionProbeArgs) -> Result<()> {
    let seqs = match (&a.landmarks, a.synth) {
        (Some(dir), _) => load_landmark_dir(dir)?,
        (None, true) => synth_landmarks(&cfg.probe.landmarks)?,
        (None, false) => return Err(Error::config("landmarks", "give --landmarks DIR or --synth")),
    };
    let report = run_probe(&seqs, &cfg.probe.classifier, a.shuffle_labels)?;
    print_json(&report);
    Ok(())
}

fn cmd_check_grad(a: CheckGradArgs) -> Result<()> {
    let cfg = GradCheckConfig {
        seeds: a.seeds,
        identities: a.identities,
        samples: a.samples,
        dim: a.dim,
        tolerance: a.tolerance,
        inject_bug: a.inject_bug,
        ..GradCheckConfig::default()
    };
    let report = run_gradient_checks(&cfg)?;
    for g in &report.groups {
        emit(&format!(
            "{:<4} {:<28} {:<8} max_rel_error {:.3e} (seed {})\n",
            if g.passed { "ok" } else { "FAIL" },
            g.check,
            g.group,
            g.max_rel_error,
            g.worst_seed
        ));
    }
    if report.passed {
        Ok(())
    } else {
        Err(Error::CheckFailed(format!(
            "max relative error {:.3e} >= {:.1e}",
            report.max_rel_error(),
            cfg.tolerance
        )))
    }
}
