use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use agcl_core::config::RunConfig;
use agcl_core::data::{self, Sample};
use agcl_core::metrics::{self, MetricReport};
use agcl_core::trainer::{self, RunOutput, StepReport, TrainOutcome, LOG_HEADER};
use agcl_core::verify::{self, Fault};
use agcl_core::Error;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_VERIFY: u8 = 3;

/// Affinity-graph-guided semi-supervised contrastive segmentation.
#[derive(Parser)]
#[command(name = "agcl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset seed (overrides `dataset.seed`).
        #[arg(long)]
        seed: Option<u64>,
        /// Destination directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a student/teacher pair.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Disable a loss term; repeatable.
        #[arg(long, value_parser = ["pl", "rw", "reg"])]
        ablate: Vec<String>,
        /// Positive-patch sampler: entropy, cosine, class_confidence or random.
        #[arg(long)]
        sampler: Option<String>,
        /// Trainer seed (overrides `trainer.seed`).
        #[arg(long)]
        seed: Option<u64>,
        /// Number of steps (overrides `trainer.iterations`).
        #[arg(long)]
        iterations: Option<u64>,
        /// Output directory (overrides `output.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint for `trainer.iterations` more steps.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory (as written by `generate`).
        #[arg(long)]
        data: PathBuf,
        /// Evaluate the teacher instead of the student.
        #[arg(long)]
        teacher: bool,
        /// Also write predicted masks here.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Compare predicted masks against ground truth.
    Metrics {
        /// Directory of predicted `.agm` masks.
        #[arg(long)]
        pred: PathBuf,
        /// Dataset directory or directory of ground-truth `.agm` masks.
        #[arg(long)]
        truth: PathBuf,
        /// Number of foreground classes (default: largest label in the truth).
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Run the built-in oracle checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file of dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set trainer.lr=1e-3`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self, extra: Vec<(String, String)>) -> Result<RunConfig, Error> {
        let mut overrides = Vec::new();
        for item in &self.set {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got {item:?}")))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        overrides.extend(extra);
        let cfg = RunConfig::load(self.config.as_deref(), &overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Validation problems exit 1; everything else that goes wrong at run time exits 2.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::Parameter(_) => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_VALIDATION);
    }
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("AGCL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Usage(format!("AGCL_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Usage(format!("cannot configure thread pool: {e}")))
}

fn run(command: Command) -> Result<u8, Error> {
    match command {
        Command::Generate { config, seed, out } => {
            let extra = seed.map(|s| ("dataset.seed".into(), s.to_string())).into_iter().collect();
            let cfg = config.load(extra)?;
            cfg.dataset.validate()?;
            let samples = data::generate(&cfg.dataset)?;
            data::write_dataset(&out, &samples)?;
            let labeled = samples.iter().filter(|s| s.labeled).count();
            println!(
                "wrote {} samples ({labeled} labeled, {} unlabeled) to {}",
                samples.len(),
                samples.len() - labeled,
                out.display()
            );
            Ok(0)
        }
        Command::Train {
            config,
            ablate,
            sampler,
            seed,
            iterations,
            out,
            resume,
        } => {
            let mut extra: Vec<(String, String)> = ablate.iter().map(|t| (format!("ablate.{t}"), "true".into())).collect();
            if let Some(s) = sampler {
                extra.push(("trainer.sampler".into(), format!("{s:?}")));
            }
            if let Some(s) = seed {
                extra.push(("trainer.seed".into(), s.to_string()));
            }
            if let Some(n) = iterations {
                extra.push(("trainer.iterations".into(), n.to_string()));
            }
            if let Some(dir) = out {
                extra.push(("output.dir".into(), format!("{:?}", dir.to_string_lossy())));
            }
            let cfg = config.load(extra)?;
            if let Some(path) = &resume {
                if !path.is_file() {
                    return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
                }
            }
            train(&cfg, resume.as_deref())
        }
        Command::Eval {
            checkpoint,
            data,
            teacher,
            predictions,
            json,
        } => eval(&checkpoint, &data, teacher, predictions.as_deref(), json),
        Command::Metrics {
            pred,
            truth,
            classes,
            json,
        } => compare(&pred, &truth, classes, json),
        Command::Verify {
            seed,
            json,
            inject_fault,
        } => {
            let fault = inject_fault.map(|f| f.parse::<Fault>()).transpose()?;
            let results = verify::run(seed, fault)?;
            let all = results.iter().all(|r| r.passed);
            if json {
                println!("{}", serde_json::to_string_pretty(&results).expect("serializable"));
            } else {
                println!("{:<22} {:<6} {:>6} {:>12} {:>10}", "check", "status", "cases", "worst", "tolerance");
                for r in &results {
                    let status = if r.passed { "ok" } else { "FAIL" };
                    println!(
                        "{:<22} {:<6} {:>6} {:>12.3e} {:>10.0e}",
                        r.name, status, r.cases, r.worst, r.tolerance
                    );
                }
                for r in results.iter().filter(|r| !r.passed) {
                    println!("\n{} failed (seed {seed}): {}", r.name, r.detail.as_deref().unwrap_or(""));
                }
            }
            Ok(if all { 0 } else { EXIT_VERIFY })
        }
    }
}

fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<u8, Error> {
    let data = cfg.load_data()?;
    let train_cfg = cfg.train_config();
    let dir = cfg.output.dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    write(&dir.join("config.toml"), &cfg.to_toml())?;
    let out = RunOutput { dir: Some(dir.clone()) };
    let outcome: TrainOutcome = match resume {
        Some(path) => {
            let state = trainer::load_checkpoint(path)?;
            let channels = data.train.first().map(|s| s.image.channels()).unwrap_or(1);
            if state.arch.in_channels != channels || state.arch.classes != data.classes() + 1 {
                return Err(Error::Config(format!(
                    "checkpoint expects {} channels and {} classes; dataset has {channels} and {}",
                    state.arch.in_channels,
                    state.arch.classes,
                    data.classes() + 1
                )));
            }
            trainer::train_from(state, &train_cfg, &data, cfg.trainer.iterations, &out)?
        }
        None => trainer::train(&train_cfg, &data, &out)?,
    };
    write(&dir.join("steps.csv"), &steps_csv(&outcome.steps))?;
    println!("{LOG_HEADER}");
    for row in &outcome.log {
        println!("{}", row.csv());
    }
    println!("wrote checkpoints and logs to {}", dir.display());
    Ok(0)
}

/// Per-step diagnostics, including the positives chosen by the sampler.
fn steps_csv(steps: &[StepReport]) -> String {
    let mut s = String::from("step,loss_total,sigma,diag_mean,hard_count,bank_len,queries,positives\n");
    for r in steps {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let positives: Vec<String> = r
            .positives
            .iter()
            .map(|(img, class, idx)| {
                let idx: Vec<String> = idx.iter().map(|i| i.to_string()).collect();
                format!("{img}:{class}:{}", idx.join(" "))
            })
            .collect();
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.step,
            r.losses.total,
            opt(r.sigma),
            opt(r.diag_mean),
            r.hard_count,
            r.bank_len,
            r.queries,
            positives.join("|")
        )
        .expect("string write");
    }
    s
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

#[derive(Serialize)]
struct SampleScore {
    id: String,
    #[serde(flatten)]
    report: MetricReport,
}

#[derive(Serialize)]
struct ScoreTable {
    samples: Vec<SampleScore>,
    mean: MetricReport,
}

fn print_scores(table: &ScoreTable, json: bool) {
    if json {
        println!("{}", serde_json::to_string_pretty(table).expect("serializable"));
        return;
    }
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "nan".into());
    println!("id,dsc,jaccard,hd95,asd");
    let mean = "mean".to_string();
    for (id, r) in table.samples.iter().map(|s| (&s.id, &s.report)).chain([(&mean, &table.mean)]) {
        println!("{id},{},{},{},{}", r.dsc, r.jaccard, opt(r.hd95), opt(r.asd));
    }
}

/// A dataset directory must list at least one sample before anything is loaded.
fn check_dataset_dir(dir: &Path) -> Result<(), Error> {
    let split = dir.join("split.txt");
    let text = std::fs::read_to_string(&split)
        .map_err(|_| Error::Config(format!("{} is not a dataset directory (no readable split.txt)", dir.display())))?;
    if text.trim().is_empty() {
        return Err(Error::Config(format!("dataset {} is empty", dir.display())));
    }
    Ok(())
}

fn eval(checkpoint: &Path, data_dir: &Path, teacher: bool, predictions: Option<&Path>, json: bool) -> Result<u8, Error> {
    if !checkpoint.is_file() {
        return Err(Error::Config(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    check_dataset_dir(data_dir)?;
    let state = trainer::load_checkpoint(checkpoint)?;
    let samples: Vec<Sample> = data::read_dataset(data_dir)?;
    let params = if teacher { &state.teacher } else { &state.student };
    let classes = state.arch.classes - 1;
    let mut scores = Vec::with_capacity(samples.len());
    for s in &samples {
        let pred = trainer::predict(state.arch, params, &s.image)?;
        if let Some(dir) = predictions {
            data::write_mask(&pred, &dir.join(format!("{:04}.agm", s.id)))?;
        }
        scores.push(SampleScore {
            id: format!("{:04}", s.id),
            report: metrics::evaluate(&pred, &s.mask, classes)?,
        });
    }
    let mean = MetricReport::average(&scores.iter().map(|s| s.report.clone()).collect::<Vec<_>>())?;
    print_scores(&ScoreTable { samples: scores, mean }, json);
    Ok(0)
}

fn compare(pred_dir: &Path, truth: &Path, classes: Option<usize>, json: bool) -> Result<u8, Error> {
    let truth_dir = if truth.join("masks").is_dir() {
        truth.join("masks")
    } else {
        truth.to_path_buf()
    };
    let mut names: Vec<PathBuf> = std::fs::read_dir(pred_dir)
        .map_err(|e| Error::Io {
            path: pred_dir.to_path_buf(),
            source: e,
        })?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "agm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Data(format!("no .agm masks in {}", pred_dir.display())));
    }
    let mut pairs = Vec::with_capacity(names.len());
    for p in &names {
        let file = p.file_name().expect("file name");
        let pred = data::read_mask(p)?;
        let gt = data::read_mask(&truth_dir.join(file))?;
        pairs.push((p.file_stem().expect("stem").to_string_lossy().into_owned(), pred, gt));
    }
    let k = classes.unwrap_or_else(|| pairs.iter().map(|(_, _, t)| t.max_label() as usize).max().unwrap_or(1).max(1));
    let scores = pairs
        .iter()
        .map(|(id, pred, gt)| {
            Ok(SampleScore {
                id: id.clone(),
                report: metrics::evaluate(pred, gt, k)?,
            })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let mean = MetricReport::average(&scores.iter().map(|s| s.report.clone()).collect::<Vec<_>>())?;
    print_scores(&ScoreTable { samples: scores, mean }, json);
    Ok(0)
}
