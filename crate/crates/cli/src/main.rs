use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use afusion::data::{load_trials, parse_annotations, read_manifest, DataError, Partition};
use afusion::folds::{make_folds, FoldError, FoldPlan};
use afusion::fusion::{clip, Predictions};
use afusion::metrics::ccc;
use afusion::model::ModelError;
use afusion::synth::{generate_synth, SynthError, SynthSpec};
use afusion::train::{train_fold, FoldModel, MergeMethod, TrainConfig, TrainError};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "afusion", version, about = "Multimodal continuous valence/arousal regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split manifest trials into subject-disjoint folds.
    Folds {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one fold; writes model.afwt, config.toml and log.csv.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        folds: PathBuf,
        #[arg(long)]
        fold: usize,
        /// Training config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-checkpoint predictions for every manifest trial.
    Predict {
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint files or directories written by `train`.
        #[arg(long, num_args = 1.., required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge the per-checkpoint predictions and clip to [-1, 1].
    Center {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::Ccc)]
        method: Method,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against the manifest labels.
    Eval {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Ccc,
    Ewe,
}

/// Bad input detected before any real work; exits with status 2.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn is_validation(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<Invalid>()
            || matches!(e.downcast_ref(), Some(SynthError::Invalid(_)))
            || matches!(
                e.downcast_ref(),
                Some(TrainError::Config(_) | TrainError::EmptyFold(..) | TrainError::Unlabelled(_))
            )
            || matches!(
                e.downcast_ref(),
                Some(ModelError::Config(_) | ModelError::CheckpointMismatch(_))
            )
            || matches!(
                e.downcast_ref(),
                Some(DataError::Manifest(_) | DataError::MalformedRow { .. })
            )
            || matches!(
                e.downcast_ref(),
                Some(
                    FoldError::SubjectSplitImpossible { .. }
                        | FoldError::SubjectInBothPartitions(_)
                        | FoldError::DuplicateTrial(_)
                        | FoldError::BadFold(_)
                )
            )
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if is_validation(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { spec, out } => synth(&spec, &out),
        Command::Folds { manifest, seed, out } => folds(&manifest, seed, &out),
        Command::Train {
            manifest,
            folds,
            fold,
            config,
            out,
        } => train(&manifest, &folds, fold, config.as_deref(), &out),
        Command::Predict {
            manifest,
            checkpoints,
            out,
        } => predict(&manifest, &checkpoints, &out),
        Command::Center { preds, method, out } => center(&preds, method, &out),
        Command::Eval { preds, manifest, out } => eval(&preds, &manifest, &out),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn synth(spec_path: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(spec_path).with_context(|| format!("reading {}", spec_path.display()))?;
    let spec = SynthSpec::from_toml(&text)?;
    let manifest = generate_synth(&spec, out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn folds(manifest: &Path, seed: u64, out: &Path) -> Result<()> {
    let rows = read_manifest(manifest)?;
    let plan = make_folds(&rows, seed)?;
    plan.save(out)?;
    log::info!("fold sizes {:?}", plan.sizes());
    Ok(())
}

fn train(manifest: &Path, folds: &Path, fold: usize, config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = match config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let plan = FoldPlan::load(folds)?;
    if fold >= plan.folds.len() {
        bail!(Invalid(format!("fold {fold} out of range, plan has {}", plan.folds.len())));
    }
    let rows = read_manifest(manifest)?;
    let rows: Vec<_> = rows.into_iter().filter(|r| r.partition != Partition::Test).collect();
    let trials = load_trials(&rows)?;
    let outcome = train_fold(&trials, &plan, fold, &cfg)?;
    create_dir(out)?;
    outcome.best.save(out.join("model.afwt"))?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    outcome.save_log(out.join("log.csv"))?;
    println!("best validation CCC {:.4} ({:?})", outcome.best_val_ccc, outcome.stop);
    Ok(())
}

/// Resolves a checkpoint argument to its weights file and model config.
/// A `config.toml` next to the weights is used when present.
fn load_fold_model(path: &Path) -> Result<(FoldModel, TrainConfig)> {
    let file = if path.is_dir() { path.join("model.afwt") } else { path.to_path_buf() };
    let cfg_path = file.with_file_name("config.toml");
    let cfg = if cfg_path.exists() {
        TrainConfig::load(&cfg_path)?
    } else {
        TrainConfig::default()
    };
    let model = FoldModel::load(&file, cfg.model.clone()).with_context(|| format!("loading {}", file.display()))?;
    Ok((model, cfg))
}

fn predict(manifest: &Path, checkpoints: &[PathBuf], out: &Path) -> Result<()> {
    let models = checkpoints
        .iter()
        .map(|p| load_fold_model(p))
        .collect::<Result<Vec<_>>>()?;
    let trials = load_trials(&read_manifest(manifest)?)?;
    for (k, (model, cfg)) in models.iter().enumerate() {
        let dir = out.join(format!("model{k}"));
        create_dir(&dir)?;
        for t in &trials {
            model
                .predict(t, &cfg.window())?
                .save(dir.join(format!("{}.csv", t.trial_id)))?;
        }
        log::info!("{} trials predicted with {}", trials.len(), checkpoints[k].display());
    }
    Ok(())
}

fn csv_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| Ok(e?.path()))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    files.sort();
    Ok(files)
}

fn center(preds: &Path, method: Method, out: &Path) -> Result<()> {
    let mut model_dirs: Vec<PathBuf> = fs::read_dir(preds)
        .with_context(|| format!("reading {}", preds.display()))?
        .map(|e| Ok(e?.path()))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    model_dirs.sort();
    if model_dirs.is_empty() {
        bail!(Invalid(format!("{} holds no prediction directories", preds.display())));
    }
    let method = match method {
        Method::Ccc => MergeMethod::Ccc,
        Method::Ewe => MergeMethod::Ewe,
    };
    create_dir(out)?;
    let mut weights = String::from("trial_id,target");
    for d in &model_dirs {
        write!(weights, ",{}", d.file_name().unwrap_or_default().to_string_lossy())?;
    }
    weights.push('\n');
    for file in csv_files(&model_dirs[0])? {
        let name = file.file_name().expect("listed file");
        let raters = model_dirs
            .iter()
            .map(|d| Predictions::load(d.join(name)).with_context(|| format!("{}", d.join(name).display())))
            .collect::<Result<Vec<_>>>()?;
        let v = method.merge(&raters.iter().map(|p| p.valence.clone()).collect::<Vec<_>>())?;
        let a = method.merge(&raters.iter().map(|p| p.arousal.clone()).collect::<Vec<_>>())?;
        Predictions {
            valence: clip(&v.values)?,
            arousal: clip(&a.values)?,
        }
        .save(out.join(name))?;
        let id = Path::new(name).file_stem().unwrap_or_default().to_string_lossy().into_owned();
        for (target, w) in [("valence", &v.weights), ("arousal", &a.weights)] {
            write!(weights, "{id},{target}")?;
            for x in w {
                write!(weights, ",{x}")?;
            }
            weights.push('\n');
        }
    }
    fs::write(out.join("weights.txt"), weights)?;
    Ok(())
}

fn eval(preds: &Path, manifest: &Path, out: &Path) -> Result<()> {
    let rows = read_manifest(manifest)?;
    let mut report = String::from("trial_id,ccc_valence,ccc_arousal,mean\n");
    let mut means = Vec::new();
    for row in rows.iter().filter(|r| r.is_labelled()) {
        let path = preds.join(format!("{}.csv", row.trial_id));
        if !path.exists() {
            log::warn!("no predictions for {}", row.trial_id);
            continue;
        }
        let pred = Predictions::load(&path)?;
        let text = fs::read_to_string(&row.annotation_path)
            .with_context(|| format!("reading {}", row.annotation_path.display()))?;
        let ann = parse_annotations(&text)?;
        if ann.labels.len() != pred.valence.len() {
            bail!(
                "{}: {} predictions for {} labelled frames",
                row.trial_id,
                pred.valence.len(),
                ann.labels.len()
            );
        }
        let gv: Vec<f64> = ann.labels.iter().map(|l| l[0]).collect();
        let ga: Vec<f64> = ann.labels.iter().map(|l| l[1]).collect();
        let (cv, ca) = (ccc(&pred.valence, &gv)?, ccc(&pred.arousal, &ga)?);
        let mean = (cv + ca) / 2.0;
        means.push(mean);
        writeln!(report, "{},{cv},{ca},{mean}", row.trial_id)?;
    }
    if means.is_empty() {
        bail!(Invalid("no labelled trial has predictions".into()));
    }
    fs::write(out, report).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "{} trials, mean CCC {:.4}",
        means.len(),
        means.iter().sum::<f64>() / means.len() as f64
    );
    Ok(())
}
