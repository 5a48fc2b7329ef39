//! Subcommands of `sacd-lab`. Results go to the supplied writer; diagnostics
//! are the caller's business.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use sacd_core::checkpoint::Checkpoint;
use sacd_core::datagen::{load_dataset, save_dataset, stage_index, Dataset, AHI_NAMES, STAGE_NAMES};
use sacd_core::encoders::Modality;
use sacd_core::evalkit::{
    fmt_g6, metrics_csv, select_channels, spearman_ahi, stage_profiles, AhiTarget, MetricsReport,
};
use sacd_core::trainer::{
    ablation_csv, classifier_from_checkpoint, evaluate, log_jsonl, mean_accuracy, run_ablation, student_checkpoint,
    teacher_checkpoint, train_student, train_teacher, Variant,
};
use sacd_core::{Error, Result};

use crate::config::RunConfig;
use crate::gradsuite::{self, SuiteModule};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_MISSING: i32 = 4;
pub const EXIT_NON_FINITE: i32 = 5;
pub const EXIT_GRADCHECK: i32 = 6;
pub const THREADS_ENV: &str = "SACD_LAB_THREADS";

#[derive(Debug, Parser)]
#[command(name = "sacd-lab", version, about = "Synthetic cross-modal distillation lab")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; defaults apply to absent keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides both the data and the training seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output location of the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired dataset.
    GenData,
    /// Train the EEG teacher.
    TrainTeacher {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Distill the teacher into a video student.
    Distill {
        #[arg(long, default_value = "full")]
        variant: Variant,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
    },
    /// Train every variant for k seeds.
    Ablate {
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: SuiteModule,
        /// Corrupts analytic gradients; the run must fail.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Spearman correlation of per-channel features with AHI.
    AnalyzeAhi {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        stage: String,
        #[arg(long)]
        threshold: Option<f64>,
    },
}

/// Exit status of a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => EXIT_CONFIG,
        Error::Io { .. } | Error::Format { .. } => EXIT_IO,
        Error::MissingArtifact(_) => EXIT_MISSING,
        Error::NonFinite { .. } => EXIT_NON_FINITE,
        _ => 1,
    }
}

/// Sizes the global worker pool from the environment, once.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config {
            field: THREADS_ENV.into(),
            message: format!("expected a positive integer, found {raw:?}"),
        })?;
    // a pool that already exists keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(io_err(Path::new("<stdout>")))
}

fn metrics_line(m: &MetricsReport) -> String {
    format!(
        "acc={} mf1={} kappa={}\n",
        fmt_g6(m.acc),
        fmt_g6(m.mf1),
        fmt_g6(m.kappa)
    )
}

fn modality_of(ck: &Checkpoint) -> Modality {
    if ck.kind == "teacher" {
        Modality::Eeg
    } else {
        Modality::Video
    }
}

fn load_teacher(path: &Path) -> Result<(sacd_core::encoders::Classifier, String)> {
    let ck = Checkpoint::load(path)?;
    if ck.kind != "teacher" {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("expected a teacher checkpoint, found {}", ck.kind),
        });
    }
    Ok((classifier_from_checkpoint(&ck)?, ck.hash()))
}

/// Runs one parsed invocation and returns its exit status.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    let cfg = RunConfig::load_or_default(cli.common.config.as_deref())?.with_seed(cli.common.seed);
    cfg.validate()?;
    let target = cli.common.out.clone();
    let data_dir = |d: &Option<PathBuf>| d.clone().unwrap_or_else(|| cfg.paths.data_dir.clone());
    let teacher_dir = |t: &Option<PathBuf>| t.clone().unwrap_or_else(|| cfg.paths.teacher());
    match &cli.command {
        Command::GenData => gen_data(&cfg, &target.unwrap_or_else(|| cfg.paths.data_dir.clone()), out),
        Command::TrainTeacher { data } => train_teacher_cmd(
            &cfg,
            &data_dir(data),
            &target.unwrap_or_else(|| cfg.paths.teacher()),
            out,
        ),
        Command::Distill { variant, data, teacher } => {
            let dir = target.unwrap_or_else(|| cfg.paths.output_dir.join(variant.name()));
            distill(&cfg, *variant, &data_dir(data), &teacher_dir(teacher), &dir, out)
        }
        Command::Eval {
            checkpoint,
            data,
            split,
        } => eval(checkpoint, &data_dir(data), *split, target.as_deref(), out),
        Command::Ablate { seeds, data, teacher } => {
            let dir = target.unwrap_or_else(|| cfg.paths.output_dir.join("ablation"));
            ablate(&cfg, *seeds, &data_dir(data), &teacher_dir(teacher), &dir, out)
        }
        Command::Gradcheck { module, inject_fault } => gradcheck(*module, *inject_fault, out),
        Command::AnalyzeAhi {
            checkpoint,
            data,
            stage,
            threshold,
        } => {
            let threshold = threshold.unwrap_or(cfg.analysis.threshold);
            let csv = target.unwrap_or_else(|| cfg.paths.output_dir.join(format!("ahi_{stage}.csv")));
            analyze_ahi(checkpoint, data, stage, threshold, &csv, out)
        }
    }
}

fn gen_data(cfg: &RunConfig, dir: &Path, out: &mut dyn Write) -> Result<i32> {
    let data = Dataset::synthesize(&cfg.synthetic).map_err(|e| match e {
        Error::InvalidInput(message) => Error::Config {
            field: "synthetic".into(),
            message,
        },
        other => other,
    })?;
    save_dataset(dir, &data)?;
    let meta = data.meta();
    let mut text = String::from("kind,name,count,fraction\n");
    for (name, &c) in STAGE_NAMES.iter().zip(&meta.stage_counts) {
        text += &format!("stage,{name},{c},{}\n", fmt_g6(c as f64 / meta.num_clips as f64));
    }
    for (name, &c) in AHI_NAMES.iter().zip(&meta.ahi_counts) {
        text += &format!("ahi,{name},{c},{}\n", fmt_g6(c as f64 / meta.num_subjects as f64));
    }
    emit(out, &text)?;
    Ok(0)
}

fn train_teacher_cmd(cfg: &RunConfig, data_dir: &Path, dir: &Path, out: &mut dyn Write) -> Result<i32> {
    let data = load_dataset(data_dir)?;
    let outcome = train_teacher(&data, &cfg.train)?;
    teacher_checkpoint(&outcome.teacher).save(dir)?;
    let log: String = outcome
        .epochs
        .iter()
        .map(|e| serde_json::to_string(e).expect("epoch log serializes") + "\n")
        .collect();
    write_file(&dir.join("train_log.jsonl"), &log)?;
    let test = data.subjects_in(&data.split.test);
    emit(out, &metrics_line(&evaluate(&outcome.teacher, &test, Modality::Eeg)?))?;
    Ok(0)
}

fn distill(
    cfg: &RunConfig,
    variant: Variant,
    data_dir: &Path,
    teacher_dir: &Path,
    dir: &Path,
    out: &mut dyn Write,
) -> Result<i32> {
    let data = load_dataset(data_dir)?;
    let (teacher, _) = load_teacher(teacher_dir)?;
    let mut train = cfg.train.clone();
    train.ablation_variant = variant;
    let outcome = train_student(&data, &teacher, &train)?;
    student_checkpoint(&outcome.student).save(&dir.join("student"))?;
    write_file(&dir.join("steps.jsonl"), &log_jsonl(&outcome.log))?;
    write_file(&dir.join("teacher.sha256"), &format!("{}\n", outcome.teacher_hash))?;
    let test = data.subjects_in(&data.split.test);
    let m = evaluate(&outcome.student.classifier, &test, Modality::Video)?;
    write_file(
        &dir.join("metrics.csv"),
        &metrics_csv(&[(variant.name().to_string(), m.clone())]),
    )?;
    emit(out, &metrics_line(&m))?;
    Ok(0)
}

fn eval(checkpoint: &Path, data_dir: &Path, split: SplitName, csv: Option<&Path>, out: &mut dyn Write) -> Result<i32> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = classifier_from_checkpoint(&ck)?;
    let data = load_dataset(data_dir)?;
    let ids = match split {
        SplitName::Train => &data.split.train,
        SplitName::Val => &data.split.val,
        SplitName::Test => &data.split.test,
    };
    let m = evaluate(&model, &data.subjects_in(ids), modality_of(&ck))?;
    if let Some(path) = csv {
        write_file(path, &metrics_csv(&[(ck.kind.clone(), m.clone())]))?;
    }
    emit(out, &metrics_line(&m))?;
    Ok(0)
}

fn ablate(
    cfg: &RunConfig,
    k: u64,
    data_dir: &Path,
    teacher_dir: &Path,
    dir: &Path,
    out: &mut dyn Write,
) -> Result<i32> {
    if k == 0 {
        return Err(Error::Config {
            field: "seeds".into(),
            message: "must be at least 1".into(),
        });
    }
    let data = load_dataset(data_dir)?;
    let (teacher, hash) = load_teacher(teacher_dir)?;
    let base = cfg.train.seed;
    let seeds: Vec<u64> = (base..base + k).collect();
    let rows = run_ablation(&data, &teacher, &cfg.train, &seeds)?;
    write_file(&dir.join("ablation.csv"), &ablation_csv(&rows))?;
    write_file(&dir.join("teacher.sha256"), &format!("{hash}\n"))?;
    let mut structural = String::from("variant,seed,structural_first,structural_last\n");
    for r in &rows {
        write_file(
            &dir.join("logs").join(format!("{}-seed{}.jsonl", r.variant, r.seed)),
            &log_jsonl(&r.log),
        )?;
        if let (Some(a), Some(b)) = (r.structural_first, r.structural_last) {
            structural += &format!("{},{},{},{}\n", r.variant, r.seed, fmt_g6(a), fmt_g6(b));
        }
    }
    write_file(&dir.join("structural.csv"), &structural)?;
    let mut text = String::from("variant,mean_acc\n");
    for (v, acc) in mean_accuracy(&rows) {
        text += &format!("{v},{}\n", fmt_g6(acc));
    }
    emit(out, &text)?;
    Ok(0)
}

fn gradcheck(module: SuiteModule, fault: bool, out: &mut dyn Write) -> Result<i32> {
    let results = gradsuite::run(module, fault)?;
    let mut text = String::from("module,loss,max_rel_err,coords,status\n");
    for r in &results {
        text += &format!(
            "{},{},{:.3e},{},{}\n",
            r.module,
            r.name,
            r.report.max_rel_err,
            r.report.checked,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    emit(out, &text)?;
    let failing: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    if failing.is_empty() {
        Ok(0)
    } else {
        eprintln!("gradcheck failed: {}", failing.join(", "));
        Ok(EXIT_GRADCHECK)
    }
}

fn analyze_ahi(
    checkpoint: &Path,
    data_dir: &Path,
    stage: &str,
    threshold: f64,
    csv: &Path,
    out: &mut dyn Write,
) -> Result<i32> {
    let stage_id = stage_index(stage).ok_or_else(|| Error::Config {
        field: "stage".into(),
        message: format!("unknown stage {stage:?}; expected one of {}", STAGE_NAMES.join(", ")),
    })? as u8;
    if !(threshold > -1.0 && threshold < 1.0) {
        return Err(Error::Config {
            field: "threshold".into(),
            message: "must lie in (-1, 1)".into(),
        });
    }
    let ck = Checkpoint::load(checkpoint)?;
    let model = classifier_from_checkpoint(&ck)?;
    let data = load_dataset(data_dir)?;
    let subjects: Vec<_> = data.subjects.iter().collect();
    let profiles = stage_profiles(&model.encoder, &subjects, modality_of(&ck))?;

    let mut table = String::from("stage,target,channel,rho,p_value,threshold,selected\n");
    let mut summary = String::from("target,selected_channels\n");
    for target in AhiTarget::all() {
        let r = spearman_ahi(&profiles, stage_id, target)?;
        let label = target.label();
        for (ch, (rho, p)) in r.rho.iter().zip(&r.p_value).enumerate() {
            table += &format!(
                "{stage},{label},{ch},{},{},{},{}\n",
                fmt_g6(*rho),
                fmt_g6(*p),
                fmt_g6(threshold),
                u8::from(*rho > threshold)
            );
        }
        let picked: Vec<String> = select_channels(&r.rho, threshold)
            .iter()
            .map(usize::to_string)
            .collect();
        summary += &format!("{label},{}\n", picked.join(" "));
    }
    write_file(csv, &table)?;
    emit(out, &summary)?;
    Ok(0)
}
