//! `ctcaps` command-line front end: dataset generation, stage-wise training,
//! inference, cross-validation, paired statistics, and attribution maps.
//!
//! Every command that writes artifacts also drops a `run_config.json`
//! receipt with the fully resolved configuration next to its outputs.
//! Runtime failures print one `error: ...` line on stderr and exit 1;
//! usage errors exit 2.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use ctcaps::data::{
    encode_clinical, generate_phantom, load_dataset, preprocess_slice, ClassLabel,
    ClinicalScaling, PatientRecord, PhantomConfig,
};
use ctcaps::gradcam::{gradcam_stage1, gradcam_stage2, write_heatmap};
use ctcaps::pipeline::{
    infer_fusion, infer_stage1, infer_stage2, run_crossval, select_candidates, train_fusion_mlp,
    train_stage1, train_stage2, BundleConfig, CandidateSet, CrossvalConfig, FusionInput,
    ModelBundle, ParamSet, SliceSample, Stage1Config, Stage2Config, Stage2Sample, TrainHistory,
    TrainSpec,
};
use ctcaps::stats::{logistic_fit, mcnemar_exact};
use ctcaps::tensor::Tensor;
use ctcaps::{Error, Result};

#[derive(Parser)]
#[command(name = "ctcaps", version, about = "Two-stage capsule pipeline for chest-CT triage")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Phantom(PhantomArgs),
    /// Train the stage-1 slice classifier.
    TrainStage1(TrainStage1Args),
    /// Train the stage-2 patient classifier on stage-1 candidates.
    TrainStage2(TrainStage2Args),
    /// Train the clinical-fusion head on stage-2 outputs.
    TrainFusion(TrainFusionArgs),
    /// Run the pipeline over a dataset and emit per-patient predictions.
    Infer(InferArgs),
    /// Stratified k-fold cross-validation with per-fold artifacts.
    Crossval(CrossvalArgs),
    /// Paired-comparison statistics.
    #[command(subcommand)]
    Stats(StatsCommand),
    /// Grad-CAM attribution maps as PGM images.
    Gradcam(GradcamArgs),
}

#[derive(Args)]
struct PhantomArgs {
    /// Directory the dataset is written to.
    #[arg(long)]
    out_dir: PathBuf,
    /// JSON file with the generator configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainStage1Args {
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// JSON file with `{"stage1": ..., "train": ...}` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainStage2Args {
    #[arg(long)]
    data_dir: PathBuf,
    /// Checkpoint holding the trained stage-1 model.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// JSON file with `{"stage2": ..., "train": ...}` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainFusionArgs {
    #[arg(long)]
    data_dir: PathBuf,
    /// Checkpoint holding trained stage-1 and stage-2 models.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// JSON file with a `{"train": ...}` section.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Fusion,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Write `predictions.json` here instead of printing to stdout.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Deepest stage to run; defaults to fusion when the model carries one.
    #[arg(long, value_enum)]
    stage: Option<StageArg>,
}

#[derive(Args)]
struct CrossvalArgs {
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// JSON file with the full cross-validation configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured fold count.
    #[arg(long)]
    k: Option<usize>,
    /// Override the configured fold seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum StatsCommand {
    /// Exact two-sided McNemar test on discordant counts.
    Mcnemar {
        /// Pairs the first classifier got wrong and the second right.
        #[arg(long, allow_hyphen_values = true)]
        b: i64,
        /// Pairs the first classifier got right and the second wrong.
        #[arg(long, allow_hyphen_values = true)]
        c: i64,
    },
    /// Logistic regression with Wald tests on a CSV file.
    Logit {
        /// CSV with a header row; first column is the 0/1 outcome, the
        /// remaining columns are predictors.
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Copy, Clone, ValueEnum)]
enum ClassArg {
    Covid,
    Cap,
    Normal,
}

impl From<ClassArg> for ClassLabel {
    fn from(c: ClassArg) -> ClassLabel {
        match c {
            ClassArg::Covid => ClassLabel::Covid,
            ClassArg::Cap => ClassLabel::Cap,
            ClassArg::Normal => ClassLabel::Normal,
        }
    }
}

#[derive(Args)]
struct GradcamArgs {
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Patient id within the dataset.
    #[arg(long)]
    patient: String,
    /// Stage to attribute; stage 1 maps one slice, stage 2 maps the
    /// candidate set for a class.
    #[arg(long, value_enum, default_value = "2")]
    stage: StageArg,
    /// Slice index for stage-1 maps.
    #[arg(long, default_value_t = 0)]
    slice: usize,
    /// Target class for stage-2 maps.
    #[arg(long, value_enum, default_value = "covid")]
    class: ClassArg,
    /// Conv layer name; defaults to the last conv layer.
    #[arg(long)]
    layer: Option<String>,
    /// Side of the rendered PGM images.
    #[arg(long, default_value_t = 256)]
    render_side: usize,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom(args) => cmd_phantom(args),
        Command::TrainStage1(args) => cmd_train_stage1(args),
        Command::TrainStage2(args) => cmd_train_stage2(args),
        Command::TrainFusion(args) => cmd_train_fusion(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Crossval(args) => cmd_crossval(args),
        Command::Stats(args) => cmd_stats(args),
        Command::Gradcam(args) => cmd_gradcam(args),
    }
}

/// Parse a JSON config file into `T`, or fall back to `T::default()` when
/// no file is given. Unknown keys are rejected by the config types.
fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::format(p, format!("invalid config: {}", e)))
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::contract(format!("cannot serialize output: {}", e)))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_receipt<T: Serialize>(out_dir: &Path, config: &T) -> Result<()> {
    write_json(&out_dir.join("run_config.json"), config)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::contract(format!("cannot serialize output: {}", e)))?;
    println!("{}", text);
    Ok(())
}

fn cmd_phantom(args: PhantomArgs) -> Result<()> {
    let mut cfg: PhantomConfig = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    ensure_dir(&args.out_dir)?;
    let set = generate_phantom(&cfg, Some(&args.out_dir))?;
    write_receipt(&args.out_dir, &cfg)?;
    println!(
        "wrote {} patients ({} slices each, side {}) to {}",
        set.records.len(),
        cfg.slices_per_patient,
        cfg.side,
        args.out_dir.display()
    );
    Ok(())
}

/// Two-section config for the stage trainers; missing sections take their
/// defaults.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Stage1RunConfig {
    stage1: Stage1Config,
    train: TrainSpec,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Stage2RunConfig {
    stage2: Stage2Config,
    train: TrainSpec,
}

impl Default for Stage2RunConfig {
    fn default() -> Self {
        Stage2RunConfig {
            stage2: Stage2Config::default(),
            train: TrainSpec::stage2_default(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FusionRunConfig {
    train: TrainSpec,
}

impl Default for FusionRunConfig {
    fn default() -> Self {
        FusionRunConfig {
            train: TrainSpec::fusion_default(),
        }
    }
}

fn load_records(dir: &Path) -> Result<Vec<PatientRecord>> {
    let records = load_dataset(dir)?;
    if records.is_empty() {
        return Err(Error::data(format!(
            "dataset at {} holds no patients",
            dir.display()
        )));
    }
    Ok(records)
}

fn preprocessed(records: &[PatientRecord], side: usize) -> Result<Vec<Vec<Tensor>>> {
    records
        .iter()
        .map(|r| {
            r.slices
                .iter()
                .zip(&r.masks)
                .map(|(s, m)| preprocess_slice(s, m, side))
                .collect()
        })
        .collect()
}

fn save_history(out_dir: &Path, history: &TrainHistory) -> Result<()> {
    write_json(&out_dir.join("history.json"), history)
}

fn cmd_train_stage1(args: TrainStage1Args) -> Result<()> {
    let mut cfg: Stage1RunConfig = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let records = load_records(&args.data_dir)?;
    let pre = preprocessed(&records, cfg.stage1.input_side)?;

    let mut samples = Vec::new();
    for (p, record) in records.iter().enumerate() {
        let flags = record.slice_infection_labels.as_ref().ok_or_else(|| {
            Error::data(format!(
                "patient {} carries no slice infection labels; stage-1 training needs them",
                record.id
            ))
        })?;
        for (pixels, infected) in pre[p].iter().zip(flags) {
            samples.push(SliceSample {
                patient: p,
                pixels: pixels.clone(),
                infected: *infected,
            });
        }
    }

    let model = train_stage1(&samples, &cfg.stage1, &cfg.train)?;
    ensure_dir(&args.out_dir)?;
    let bundle = ModelBundle {
        stage1: Some(model.params),
        stage2: None,
        fusion: None,
        config: BundleConfig {
            stage1: Some(cfg.stage1.clone()),
            ..BundleConfig::default()
        },
    };
    let path = args.out_dir.join("stage1.cvcp");
    bundle.save(&path)?;
    save_history(&args.out_dir, &model.history)?;
    write_receipt(&args.out_dir, &cfg)?;
    println!(
        "stage-1 model trained on {} slices (best epoch {}); saved to {}",
        samples.len(),
        model.history.best_epoch,
        path.display()
    );
    Ok(())
}

/// Load a bundle section or fail with the missing-piece name.
fn need<T>(part: Option<T>, what: &str, path: &Path) -> Result<T> {
    part.ok_or_else(|| {
        Error::data(format!(
            "checkpoint {} does not hold {}",
            path.display(),
            what
        ))
    })
}

/// Run stage 1 over every preprocessed slice of each patient and pick the
/// top-k candidates.
fn candidates_for(
    records: &[PatientRecord],
    pre: &[Vec<Tensor>],
    stage1: &ParamSet,
    cfg1: &Stage1Config,
    k: usize,
) -> Result<Vec<CandidateSet>> {
    records
        .iter()
        .zip(pre)
        .map(|(record, slices)| {
            let mut p_infs = Vec::with_capacity(slices.len());
            for slice in slices {
                p_infs.push(infer_stage1(stage1, cfg1, slice)?.p_inf);
            }
            select_candidates(&record.id, slices, &p_infs, k)
        })
        .collect()
}

fn cmd_train_stage2(args: TrainStage2Args) -> Result<()> {
    let mut cfg: Stage2RunConfig = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let bundle = ModelBundle::load(&args.model)?;
    let stage1 = need(bundle.stage1, "a stage-1 model", &args.model)?;
    let cfg1 = need(bundle.config.stage1, "a stage-1 config", &args.model)?;
    if cfg1.input_side != cfg.stage2.input_side {
        return Err(Error::config(format!(
            "stage-1 model expects side {}, stage-2 config asks for {}",
            cfg1.input_side, cfg.stage2.input_side
        )));
    }

    let records = load_records(&args.data_dir)?;
    let pre = preprocessed(&records, cfg1.input_side)?;
    let candidates = candidates_for(&records, &pre, &stage1, &cfg1, cfg.stage2.candidate_count)?;
    let samples: Vec<Stage2Sample> = records
        .iter()
        .zip(candidates)
        .map(|(r, c)| Stage2Sample {
            candidates: c,
            label: r.label,
        })
        .collect();

    let model = train_stage2(&samples, &cfg.stage2, &cfg.train)?;
    ensure_dir(&args.out_dir)?;
    let out = ModelBundle {
        stage1: Some(stage1),
        stage2: Some(model.params),
        fusion: None,
        config: BundleConfig {
            stage1: Some(cfg1),
            stage2: Some(cfg.stage2.clone()),
            scaling: None,
        },
    };
    let path = args.out_dir.join("stage2.cvcp");
    out.save(&path)?;
    save_history(&args.out_dir, &model.history)?;
    write_receipt(&args.out_dir, &cfg)?;
    println!(
        "stage-2 model trained on {} patients (best epoch {}); saved to {}",
        samples.len(),
        model.history.best_epoch,
        path.display()
    );
    Ok(())
}

fn cmd_train_fusion(args: TrainFusionArgs) -> Result<()> {
    let mut cfg: FusionRunConfig = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let bundle = ModelBundle::load(&args.model)?;
    let stage1 = need(bundle.stage1, "a stage-1 model", &args.model)?;
    let cfg1 = need(bundle.config.stage1, "a stage-1 config", &args.model)?;
    let stage2 = need(bundle.stage2, "a stage-2 model", &args.model)?;
    let cfg2 = need(bundle.config.stage2, "a stage-2 config", &args.model)?;

    let records = load_records(&args.data_dir)?;
    let pre = preprocessed(&records, cfg1.input_side)?;
    let candidates = candidates_for(&records, &pre, &stage1, &cfg1, cfg2.candidate_count)?;

    let clinicals: Vec<_> = records.iter().map(|r| &r.clinical).collect();
    let scaling = ClinicalScaling::fit(&clinicals)?;
    let mut samples = Vec::with_capacity(records.len());
    for (record, cands) in records.iter().zip(&candidates) {
        let inference = infer_stage2(&stage2, &cfg2, cands)?;
        let input = FusionInput::new(
            inference.gated.probs,
            encode_clinical(&record.clinical, &scaling),
        )?;
        samples.push((input, record.label));
    }

    let model = train_fusion_mlp(&samples, &cfg.train)?;
    ensure_dir(&args.out_dir)?;
    let out = ModelBundle {
        stage1: Some(stage1),
        stage2: Some(stage2),
        fusion: Some(model.params),
        config: BundleConfig {
            stage1: Some(cfg1),
            stage2: Some(cfg2),
            scaling: Some(scaling),
        },
    };
    let path = args.out_dir.join("model.cvcp");
    out.save(&path)?;
    save_history(&args.out_dir, &model.history)?;
    write_receipt(&args.out_dir, &cfg)?;
    println!(
        "fusion head trained on {} patients (best epoch {}); saved to {}",
        samples.len(),
        model.history.best_epoch,
        path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct Prediction {
    patient: String,
    truth: &'static str,
    mean_p_inf: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    stage2_decision: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stage2_probs: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fusion_decision: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fusion_probs: Option<[f64; 3]>,
}

fn cmd_infer(args: InferArgs) -> Result<()> {
    let bundle = ModelBundle::load(&args.model)?;
    let stage1 = need(bundle.stage1, "a stage-1 model", &args.model)?;
    let cfg1 = need(bundle.config.stage1, "a stage-1 config", &args.model)?;
    let depth = args.stage.unwrap_or({
        if bundle.fusion.is_some() {
            StageArg::Fusion
        } else if bundle.stage2.is_some() {
            StageArg::Two
        } else {
            StageArg::One
        }
    });
    if depth != StageArg::One && bundle.stage2.is_none() {
        return Err(Error::data(format!(
            "checkpoint {} does not hold a stage-2 model",
            args.model.display()
        )));
    }
    if depth == StageArg::Fusion && bundle.fusion.is_none() {
        return Err(Error::data(format!(
            "checkpoint {} does not hold a fusion model",
            args.model.display()
        )));
    }

    let records = load_records(&args.data_dir)?;
    let pre = preprocessed(&records, cfg1.input_side)?;
    let mut predictions = Vec::with_capacity(records.len());
    for (record, slices) in records.iter().zip(&pre) {
        let mut p_infs = Vec::with_capacity(slices.len());
        for slice in slices {
            p_infs.push(infer_stage1(&stage1, &cfg1, slice)?.p_inf);
        }
        let mean_p_inf = p_infs.iter().sum::<f64>() / p_infs.len() as f64;
        let mut prediction = Prediction {
            patient: record.id.clone(),
            truth: record.label.name(),
            mean_p_inf,
            stage2_decision: None,
            stage2_probs: None,
            fusion_decision: None,
            fusion_probs: None,
        };

        if depth != StageArg::One {
            let stage2 = bundle.stage2.as_ref().expect("checked above");
            let cfg2 = need(bundle.config.stage2.clone(), "a stage-2 config", &args.model)?;
            let cands = select_candidates(&record.id, slices, &p_infs, cfg2.candidate_count)?;
            let inference = infer_stage2(stage2, &cfg2, &cands)?;
            prediction.stage2_decision =
                Some(ClassLabel::from_index(inference.gated.decision)?.name());
            prediction.stage2_probs = Some(inference.gated.probs);

            if depth == StageArg::Fusion {
                let fusion = bundle.fusion.as_ref().expect("checked above");
                let scaling = need(bundle.config.scaling.clone(), "clinical scaling", &args.model)?;
                let input = FusionInput::new(
                    inference.gated.probs,
                    encode_clinical(&record.clinical, &scaling),
                )?;
                let out = infer_fusion(fusion, &input)?;
                prediction.fusion_decision = Some(ClassLabel::from_index(out.decision)?.name());
                prediction.fusion_probs = Some(out.probs);
            }
        }
        predictions.push(prediction);
    }

    match &args.out_dir {
        Some(dir) => {
            ensure_dir(dir)?;
            write_json(&dir.join("predictions.json"), &predictions)?;
            println!(
                "wrote {} predictions to {}",
                predictions.len(),
                dir.join("predictions.json").display()
            );
        }
        None => print_json(&predictions)?,
    }
    Ok(())
}

fn cmd_crossval(args: CrossvalArgs) -> Result<()> {
    let mut cfg: CrossvalConfig = load_config(args.config.as_deref())?;
    if let Some(k) = args.k {
        cfg.k = k;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let records = load_records(&args.data_dir)?;
    ensure_dir(&args.out_dir)?;
    write_receipt(&args.out_dir, &cfg)?;
    let report = run_crossval(&records, &cfg, Some(&args.out_dir))?;
    let agg = &report.aggregate;
    println!(
        "crossval k={}: stage-1 slice acc {:.4} (sd {:.4}), stage-2 acc {:.4} (sd {:.4}), \
         fusion acc {:.4} (sd {:.4}), McNemar b={} c={} p={:.4}",
        report.k,
        agg.stage1_slice_accuracy.mean,
        agg.stage1_slice_accuracy.sd,
        agg.stage2_accuracy.mean,
        agg.stage2_accuracy.sd,
        agg.fusion_accuracy.mean,
        agg.fusion_accuracy.sd,
        agg.mcnemar_b,
        agg.mcnemar_c,
        agg.mcnemar_p
    );
    println!("artifacts in {}", args.out_dir.display());
    Ok(())
}

fn cmd_stats(cmd: StatsCommand) -> Result<()> {
    match cmd {
        StatsCommand::Mcnemar { b, c } => {
            let p = mcnemar_exact(b, c)?;
            print_json(&serde_json::json!({ "b": b, "c": c, "p_value": p }))
        }
        StatsCommand::Logit { input } => {
            let (rows, outcomes, names) = read_logit_csv(&input)?;
            let fit = logistic_fit(&rows, &outcomes)?;
            print_json(&serde_json::json!({ "predictors": names, "fit": fit }))
        }
    }
}

/// Parse a logit CSV: header row, outcome in the first column as 0/1, one
/// predictor per remaining column.
fn read_logit_csv(path: &Path) -> Result<(Vec<Vec<f64>>, Vec<bool>, Vec<String>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::format(path, "empty file"))?;
    let names: Vec<String> = header.split(',').skip(1).map(|s| s.trim().into()).collect();
    if names.is_empty() {
        return Err(Error::format(path, "header needs an outcome and at least one predictor"));
    }
    let mut rows = Vec::new();
    let mut outcomes = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != names.len() + 1 {
            return Err(Error::format(
                path,
                format!(
                    "line {}: expected {} fields, got {}",
                    lineno + 1,
                    names.len() + 1,
                    fields.len()
                ),
            ));
        }
        let outcome = match fields[0].trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::format(
                    path,
                    format!("line {}: outcome must be 0 or 1, got '{}'", lineno + 1, other),
                ))
            }
        };
        let mut row = Vec::with_capacity(names.len());
        for field in &fields[1..] {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::format(
                    path,
                    format!("line {}: '{}' is not a number", lineno + 1, field),
                )
            })?;
            row.push(v);
        }
        outcomes.push(outcome);
        rows.push(row);
    }
    Ok((rows, outcomes, names))
}

fn cmd_gradcam(args: GradcamArgs) -> Result<()> {
    let bundle = ModelBundle::load(&args.model)?;
    let stage1 = need(bundle.stage1, "a stage-1 model", &args.model)?;
    let cfg1 = need(bundle.config.stage1, "a stage-1 config", &args.model)?;
    let records = load_records(&args.data_dir)?;
    let record = records
        .iter()
        .find(|r| r.id == args.patient)
        .ok_or_else(|| Error::data(format!("patient '{}' not in dataset", args.patient)))?;
    let slices: Vec<Tensor> = record
        .slices
        .iter()
        .zip(&record.masks)
        .map(|(s, m)| preprocess_slice(s, m, cfg1.input_side))
        .collect::<Result<_>>()?;
    ensure_dir(&args.out_dir)?;

    match args.stage {
        StageArg::One => {
            let slice = slices.get(args.slice).ok_or_else(|| {
                Error::data(format!(
                    "patient {} has {} slices, asked for index {}",
                    record.id,
                    slices.len(),
                    args.slice
                ))
            })?;
            let map = gradcam_stage1(&stage1, &cfg1, slice, args.layer.as_deref())?;
            let path = args
                .out_dir
                .join(format!("cam_stage1_{}_s{}.pgm", record.id, args.slice));
            write_heatmap(&map, args.render_side, &path)?;
            println!("wrote {}", path.display());
        }
        StageArg::Two => {
            let stage2 = need(bundle.stage2, "a stage-2 model", &args.model)?;
            let cfg2 = need(bundle.config.stage2, "a stage-2 config", &args.model)?;
            let mut p_infs = Vec::with_capacity(slices.len());
            for slice in &slices {
                p_infs.push(infer_stage1(&stage1, &cfg1, slice)?.p_inf);
            }
            let cands = select_candidates(&record.id, &slices, &p_infs, cfg2.candidate_count)?;
            let class: ClassLabel = args.class.into();
            let maps = gradcam_stage2(&stage2, &cfg2, &cands, class, args.layer.as_deref())?;
            for (i, map) in maps.iter().enumerate() {
                let path = args.out_dir.join(format!(
                    "cam_{}_{}_cand{}_s{}.pgm",
                    class.name(),
                    record.id,
                    i,
                    cands.slice_indices[i]
                ));
                write_heatmap(map, args.render_side, &path)?;
                println!("wrote {}", path.display());
            }
        }
        StageArg::Fusion => {
            return Err(Error::config(
                "gradcam works on conv stages; pass --stage 1 or --stage 2",
            ));
        }
    }
    Ok(())
}
