//! The `bdistil` command line.
//!
//! Exit codes: 0 success or bound pass, 1 bound violation, 2 usage or
//! configuration error, 3 input/output failure, 4 theorem premise violated.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::data::{accuracy, gen_cube, gen_ellipsoid, model_logits, split, train_teacher, DatasetMeta, LabeledDataset};
use crate::distill::{run, teacher_hash, Ensemble};
use crate::error::{Error, Result};
use crate::eval::{
    anytime_curve, baseline_noresched, baseline_resched, models_curve, summarize_early_exit, verify_bound, BoundStatus,
};
use crate::io;
use crate::learner::LearnerParams;
use crate::train::SgdConfig;

pub const EXIT_VIOLATION: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_PREMISE: u8 = 4;

pub const DATA_FILE: &str = "data.csv";
pub const META_FILE: &str = "meta.json";
pub const TRAIN_FILE: &str = "train.csv";
pub const TEST_FILE: &str = "test.csv";
pub const TRAIN_LOGITS_FILE: &str = "train_logits.csv";
pub const TEST_LOGITS_FILE: &str = "test_logits.csv";

#[derive(Debug, Parser)]
#[command(
    name = "bdistil",
    version,
    about = "Progressive distillation onto a boosted ensemble of small students"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetKind {
    Ellipsoid,
    Cube,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Anytime,
    EarlyExit,
    Resched,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with an 80/20 train/test split.
    GenData {
        #[arg(long, value_enum)]
        dataset: DatasetKind,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        d: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 16)]
        vertices: usize,
    },
    /// Train an MLP teacher and cache its logits next to the data.
    TrainTeacher {
        #[arg(long)]
        data: PathBuf,
        /// Layer widths, e.g. `32,64,64,2`.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        spec: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = SgdConfig::recipe().lr)]
        lr: f64,
        #[arg(long, default_value_t = SgdConfig::recipe().momentum)]
        momentum: f64,
        #[arg(long, default_value_t = SgdConfig::recipe().weight_decay)]
        weight_decay: f64,
        #[arg(long, default_value_t = SgdConfig::recipe().epochs)]
        epochs: usize,
        #[arg(long, default_value_t = SgdConfig::recipe().batch_size)]
        batch_size: usize,
    },
    /// Grow an ensemble of students around the teacher.
    Distill {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: PathBuf,
        /// Overrides the configuration's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score an ensemble on the test split.
    Eval {
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long, value_enum)]
        mode: EvalMode,
        #[arg(long)]
        out: PathBuf,
        /// Confidence needed to stop early (early-exit mode).
        #[arg(long)]
        threshold: Option<f64>,
        /// Training configuration for the baselines (resched mode).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check the convergence bound for a finished run.
    Verify {
        #[arg(long)]
        history: PathBuf,
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "g-inf")]
        g_inf: f64,
        /// Report path; defaults to `bound_report.json` beside the history file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Exit status for a library error.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_IO,
    }
}

/// Parse arguments, run, and map the outcome to an exit code.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn read_meta(dir: &Path) -> Result<DatasetMeta> {
    io::read_json(&dir.join(META_FILE))
}

fn read_split(dir: &Path, file: &str, meta: &DatasetMeta) -> Result<LabeledDataset> {
    io::read_dataset(&dir.join(file), meta.classes)
}

fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            RunConfig::from_json(&text).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("{}: {msg}", p.display())),
                other => other,
            })
        }
    }
}

fn read_model(path: &Path) -> Result<LearnerParams> {
    io::read_json(path)
}

pub fn execute(command: Command) -> Result<u8> {
    match command {
        Command::GenData {
            dataset,
            n,
            seed,
            out,
            d,
            classes,
            vertices,
        } => {
            let (ds, meta) = match dataset {
                DatasetKind::Ellipsoid => gen_ellipsoid(seed, n, d)?,
                DatasetKind::Cube => gen_cube(seed, n, d, classes, vertices)?,
            };
            let (train, test) = split(&ds, 0.8, seed)?;
            ensure_dir(&out)?;
            io::write_dataset(&out.join(DATA_FILE), &ds)?;
            io::write_json(&out.join(META_FILE), &meta)?;
            io::write_dataset(&out.join(TRAIN_FILE), &train)?;
            io::write_dataset(&out.join(TEST_FILE), &test)?;
            println!(
                "wrote {} rows ({} train, {} test) to {}",
                ds.len(),
                train.len(),
                test.len(),
                out.display()
            );
            Ok(0)
        }
        Command::TrainTeacher {
            data,
            spec,
            out,
            seed,
            lr,
            momentum,
            weight_decay,
            epochs,
            batch_size,
        } => {
            let recipe = SgdConfig {
                lr,
                momentum,
                weight_decay,
                epochs,
                batch_size,
                ..SgdConfig::recipe()
            };
            recipe.validate()?;
            let meta = read_meta(&data)?;
            let train = read_split(&data, TRAIN_FILE, &meta)?;
            let test = read_split(&data, TEST_FILE, &meta)?;
            let teacher = train_teacher(&train, &spec, &recipe, seed)?;
            let train_logits = model_logits(&teacher, &train.x)?;
            let test_logits = model_logits(&teacher, &test.x)?;
            io::write_json(&out, &teacher)?;
            io::write_logits(&data.join(TRAIN_LOGITS_FILE), &train_logits)?;
            io::write_logits(&data.join(TEST_LOGITS_FILE), &test_logits)?;
            println!(
                "teacher: train accuracy {:.4}, test accuracy {:.4}, {} FLOPs",
                accuracy(&train_logits, &train.labels),
                accuracy(&test_logits, &test.labels),
                teacher.flops()
            );
            Ok(0)
        }
        Command::Distill {
            data,
            teacher,
            config,
            out,
            history,
            seed,
        } => {
            let mut run_cfg = read_config(config.as_deref())?;
            if let Some(s) = seed {
                run_cfg.seed = s;
            }
            let meta = read_meta(&data)?;
            let train = read_split(&data, TRAIN_FILE, &meta)?;
            let teacher = read_model(&teacher)?;
            let g = model_logits(&teacher, &train.x)?;
            let cfg = run_cfg.distill_config(train.dim(), g.cols())?;
            let (ens, hist) = run(&cfg, &train.x, &g)?;
            io::write_json(&out, &ens)?;
            io::write_history(&history, &hist.rows())?;
            let status = if ens.len() < cfg.rounds {
                "class expansions exhausted"
            } else {
                "complete"
            };
            println!(
                "ensemble: {} of {} members, {} escalation(s), {status}",
                ens.len(),
                cfg.rounds,
                hist.escalations.len()
            );
            Ok(0)
        }
        Command::Eval {
            ensemble,
            data,
            teacher,
            mode,
            out,
            threshold,
            config,
            seed,
        } => {
            if mode == EvalMode::EarlyExit && threshold.is_none() {
                eprintln!("error: --threshold is required with --mode early-exit");
                return Ok(EXIT_USAGE);
            }
            let ens: Ensemble = io::read_json(&ensemble)?;
            ens.validate()?;
            let teacher = read_model(&teacher)?;
            let meta = read_meta(&data)?;
            let test = read_split(&data, TEST_FILE, &meta)?;
            let teacher_flops = teacher.flops();
            match mode {
                EvalMode::Anytime => {
                    let curve = anytime_curve(&ens, &test.x, &test.labels, teacher_flops)?;
                    io::write_curve(&out, &curve)?;
                    let last = curve.last().expect("non-empty ensemble");
                    println!(
                        "anytime: {} prefixes, final accuracy {:.4} at {:.4} of teacher FLOPs",
                        curve.len(),
                        last.accuracy,
                        last.cum_flops_fraction
                    );
                }
                EvalMode::EarlyExit => {
                    let threshold = threshold.expect("checked above");
                    let (decisions, summary) =
                        summarize_early_exit(&ens, &test.x, &test.labels, threshold, teacher_flops)?;
                    io::write_exits(&out, &decisions)?;
                    println!(
                        "early exit at {threshold}: accuracy {:.4} (full {:.4}), mean members {:.3}, mean FLOPs fraction {:.4}",
                        summary.accuracy, summary.full_accuracy, summary.mean_members_evaluated, summary.mean_flops_fraction
                    );
                }
                EvalMode::Resched => {
                    let mut run_cfg = read_config(config.as_deref())?;
                    if let Some(s) = seed {
                        run_cfg.seed = s;
                    }
                    let train = read_split(&data, TRAIN_FILE, &meta)?;
                    let g = model_logits(&teacher, &train.x)?;
                    let findwl = run_cfg.findwl();
                    let specs: Vec<_> = ens.members.iter().map(|m| m.class.clone()).collect();
                    let models = baseline_resched(&specs, &train.x, &g, &findwl, run_cfg.seed)?;
                    let curve = models_curve(&models, &test.x, &test.labels, teacher_flops)?;
                    io::write_curve(&out, &curve)?;
                    let budgets: Vec<u64> = (1..=ens.len()).map(|k| ens.prefix_flops(k)).collect();
                    let upper = baseline_noresched(
                        &specs[0],
                        &budgets,
                        &train.x,
                        &g,
                        &test.x,
                        &test.labels,
                        teacher_flops,
                        &findwl,
                        run_cfg.seed,
                    )?;
                    let upper_path = sibling(&out, "noresched");
                    io::write_curve(&upper_path, &upper)?;
                    let last = curve.last().expect("non-empty ensemble");
                    println!(
                        "resched: final accuracy {:.4} at {:.4} of teacher FLOPs; no-resched curve in {}",
                        last.accuracy,
                        last.cum_flops_fraction,
                        upper_path.display()
                    );
                }
            }
            Ok(0)
        }
        Command::Verify {
            history,
            ensemble,
            data,
            g_inf,
            out,
        } => {
            let rows = io::read_history(&history)?;
            let ens: Ensemble = io::read_json(&ensemble)?;
            ens.validate()?;
            let meta = read_meta(&data)?;
            let train = read_split(&data, TRAIN_FILE, &meta)?;
            let g = io::read_logits(&data.join(TRAIN_LOGITS_FILE))?;
            if teacher_hash(&g) != ens.meta.teacher_hash {
                return Err(Error::Data(format!(
                    "{} does not match the teacher logits the ensemble was trained on",
                    data.join(TRAIN_LOGITS_FILE).display()
                )));
            }
            let report = verify_bound(&rows, &ens, &train.x, &g, g_inf)?;
            let out = out.unwrap_or_else(|| history.with_file_name("bound_report.json"));
            io::write_json(&out, &report)?;
            for line in &report.diagnostics {
                eprintln!("{line}");
            }
            println!(
                "verify: {:?}; error {:.6} vs bound {:.6} (T={}, N={}, eta={})",
                report.status, report.measured_error, report.theorem_bound, report.rounds, report.samples, report.eta
            );
            Ok(match report.status {
                BoundStatus::Pass => 0,
                BoundStatus::Violation => EXIT_VIOLATION,
                BoundStatus::PremiseViolated => EXIT_PREMISE,
            })
        }
    }
}

/// `dir/stem_tag.ext` for `dir/stem.ext`.
fn sibling(path: &Path, tag: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}_{tag}.{}", ext.to_string_lossy()),
        None => format!("{stem}_{tag}"),
    };
    path.with_file_name(name)
}
