//! `hcd`: train and inspect hierarchy-constrained cognitive diagnosis
//! models from the command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric divergence during training.

mod config;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use hcd_core::cdm::{predict, random_diagnoser, BaseModel, ExerciseParams};
use hcd_core::data::{
    assign_hierarchy_over, export_canonical, export_ground_truth, import_canonical, ingest_logs,
    split, synth_generate, write_atomic, Dataset, SynthConfig,
};
use hcd_core::error::HcdError;
use hcd_core::metrics::{
    distribution_csv, distribution_export, doa, metric_block, EvalRecord, MetricReport,
};
use hcd_core::model::Diagnosis;
use hcd_core::train::{cross_validate, fit, Checkpoint, TrainConfig};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "hcd",
    version,
    about = "Hierarchy-constrained cognitive diagnosis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Convert a response log and Q-matrix into a canonical dataset directory
    Ingest(IngestArgs),
    /// Generate a synthetic dataset with known ground truth
    Synth(SynthArgs),
    /// Train a model (single split or k-fold cross-validation)
    Train(TrainArgs),
    /// Export per-student knowledge states and a case-study table
    Diagnose(DiagnoseArgs),
    /// Evaluate a checkpoint: test metrics, DOA, and distribution exports
    Eval(EvalArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Response log CSV with header student_id,exercise_id,response
    #[arg(long)]
    logs: PathBuf,
    /// Q-matrix CSV, one row per exercise, one binary column per concept
    #[arg(long)]
    q: PathBuf,
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    /// Drop students with fewer usable records than this
    #[arg(long, default_value_t = 30)]
    min_records: usize,
    /// Number of ability levels
    #[arg(long, default_value_t = 6)]
    levels: usize,
    /// Seed for the split backing the hierarchy statistics
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    students: usize,
    #[arg(long, default_value_t = 50)]
    exercises: usize,
    #[arg(long, default_value_t = 10)]
    concepts: usize,
    #[arg(long, default_value_t = 6)]
    levels: usize,
    /// Guess probability in [0, 0.5)
    #[arg(long, default_value_t = 0.1)]
    guess: f64,
    /// Slip probability in [0, 0.5)
    #[arg(long, default_value_t = 0.1)]
    slip: f64,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Canonical dataset directory (from `ingest` or `synth`)
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint.json and metrics.json
    #[arg(long)]
    out: PathBuf,
    /// Key-value configuration file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base interaction function: irt | mirt | dina | ncdm
    #[arg(long)]
    base: Option<String>,
    /// Replace a hierarchy layer with plain averaging: full | no_cea | no_rsa
    #[arg(long)]
    ablation: Option<String>,
    /// Train the bare base model without hierarchy wrapping
    #[arg(long)]
    plain: bool,
    /// Run k-fold cross-validation instead of a single split
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Comma-separated odd convolution widths, one per head
    #[arg(long)]
    kernel_widths: Option<String>,
    /// RSA mode during training: all | sample-1
    #[arg(long)]
    rsa_mode: Option<String>,
    #[arg(long)]
    hidden1: Option<usize>,
    #[arg(long)]
    hidden2: Option<usize>,
    /// CEA score activation: sigmoid | softmax
    #[arg(long)]
    attention: Option<String>,
    #[arg(long)]
    disc_scale: Option<f64>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated student ids; default all
    #[arg(long)]
    students: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Score a random diagnoser instead of the trained proficiencies
    #[arg(long)]
    random_baseline: bool,
    /// Seed for the random baseline
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(1);
        }
        Err(e) => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = match err.downcast_ref::<HcdError>() {
                Some(HcdError::Divergence { .. }) => 3,
                Some(HcdError::Config(_)) => 1,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Ingest(args) => cmd_ingest(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Diagnose(args) => cmd_diagnose(args),
        Command::Eval(args) => cmd_eval(args),
    }
}

fn cmd_ingest(args: IngestArgs) -> anyhow::Result<()> {
    let seed = config::resolve_seed(args.seed, None)?;
    let mut dataset = ingest_logs(&args.logs, &args.q, args.min_records)
        .with_context(|| format!("ingesting {}", args.logs.display()))?;
    // hierarchy statistics come from the training split only
    let (train, _, _) = split(&dataset, (0.7, 0.1, 0.2), seed)?;
    let hierarchy = assign_hierarchy_over(&train.interactions, dataset.n, args.levels)?;
    let empty = hierarchy.empty_levels();
    if !empty.is_empty() {
        eprintln!("warning: degenerate binning, empty levels {empty:?}");
    }
    dataset.hierarchy = Some(hierarchy);
    export_canonical(&dataset, &args.out)?;
    println!(
        "ingested {} interactions from {} students into {}",
        dataset.interactions.len(),
        dataset.n,
        args.out.display()
    );
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<()> {
    let seed = config::resolve_seed(args.seed, None)?;
    let cfg = SynthConfig {
        n: args.students,
        m: args.exercises,
        k: args.concepts,
        g: args.levels,
        seed,
        guess: args.guess,
        slip: args.slip,
    };
    let (dataset, truth) = synth_generate(&cfg)?;
    export_canonical(&dataset, &args.out)?;
    export_ground_truth(&truth, &args.out)?;
    println!(
        "wrote synthetic dataset ({} students, {} interactions) to {}",
        dataset.n,
        dataset.interactions.len(),
        args.out.display()
    );
    Ok(())
}

fn build_train_config(args: &TrainArgs) -> anyhow::Result<(TrainConfig, Option<usize>)> {
    let mut cfg = TrainConfig::default();
    let file = match &args.config {
        Some(path) => config::Overrides::from_file(path)?,
        None => config::Overrides::default(),
    };
    file.apply(&mut cfg);

    let mut flags = config::Overrides {
        learning_rate: args.learning_rate,
        batch_size: args.batch_size,
        max_epochs: args.max_epochs,
        patience: args.patience,
        heads: args.heads,
        hidden1: args.hidden1,
        hidden2: args.hidden2,
        disc_scale: args.disc_scale,
        plain: args.plain.then_some(true),
        ..config::Overrides::default()
    };
    if let Some(raw) = &args.base {
        flags.base = Some(raw.parse::<BaseModel>()?);
    }
    if let Some(raw) = &args.ablation {
        flags.ablation = Some(raw.parse::<hcd_core::hierarchy::Ablation>()?);
    }
    if let Some(raw) = &args.rsa_mode {
        flags.rsa_mode = Some(raw.parse::<hcd_core::hierarchy::RsaMode>()?);
    }
    if let Some(raw) = &args.attention {
        flags.attention = Some(raw.parse::<hcd_core::hierarchy::CeaAttention>()?);
    }
    if let Some(raw) = &args.kernel_widths {
        flags.kernel_widths = Some(config::parse_kernel_widths(raw)?);
    }
    flags.apply(&mut cfg);

    cfg.seed = config::resolve_seed(args.seed, file.seed)?;
    cfg.validate()?;
    Ok((cfg, args.folds.or(file.folds)))
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let dataset = import_canonical(&args.data)
        .with_context(|| format!("loading dataset {}", args.data.display()))?;
    let (cfg, folds) = build_train_config(&args)?;
    std::fs::create_dir_all(&args.out)?;

    let (checkpoint, report) = match folds {
        Some(folds) => {
            let (summary, mut checkpoints) = cross_validate(&dataset, folds, &cfg)?;
            println!(
                "{folds}-fold CV: AUC {:.4} +- {:.4}, ACC {:.4} +- {:.4}, RMSE {:.4} +- {:.4}",
                summary.mean.auc,
                summary.sd.auc,
                summary.mean.acc,
                summary.sd.acc,
                summary.mean.rmse,
                summary.sd.rmse
            );
            let best = checkpoints.swap_remove(summary.best_fold);
            let report = MetricReport {
                auc: summary.mean.auc,
                acc: summary.mean.acc,
                rmse: summary.mean.rmse,
                doa: None,
                per_fold: summary.folds,
            };
            (best, report)
        }
        None => {
            let checkpoint = fit(&dataset, &cfg)?;
            // test metrics on the held-out 20% of the same seeded split
            let (_, _, test) = split(&dataset, (0.7, 0.1, 0.2), cfg.seed)?;
            let spec = cfg.model_spec(&dataset)?;
            let records = eval_records(&spec, &checkpoint, &test)?;
            let block = metric_block(&records)?;
            println!(
                "test AUC {:.4}, ACC {:.4}, RMSE {:.4} (best epoch {})",
                block.auc, block.acc, block.rmse, checkpoint.epoch
            );
            let report = MetricReport {
                auc: block.auc,
                acc: block.acc,
                rmse: block.rmse,
                doa: None,
                per_fold: Vec::new(),
            };
            (checkpoint, report)
        }
    };

    checkpoint.save(&args.out.join("checkpoint.json"))?;
    write_atomic(
        &args.out.join("metrics.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    Ok(())
}

fn eval_records(
    spec: &hcd_core::model::ModelSpec,
    checkpoint: &Checkpoint,
    data: &Dataset,
) -> anyhow::Result<Vec<EvalRecord>> {
    let preds = spec.predict_interactions(&checkpoint.params, data, &data.interactions)?;
    Ok(preds
        .iter()
        .zip(&data.interactions)
        .map(|(&p, it)| EvalRecord {
            prediction: p,
            label: it.response,
            student: it.student,
            exercise: it.exercise,
        })
        .collect())
}

fn parse_student_filter(raw: &Option<String>, n: usize) -> anyhow::Result<Vec<usize>> {
    match raw {
        None => Ok((0..n).collect()),
        Some(list) => list
            .split(',')
            .map(|tok| {
                let id: usize = tok
                    .trim()
                    .parse()
                    .map_err(|_| HcdError::Config(format!("invalid student id `{tok}`")))?;
                if id >= n {
                    return Err(HcdError::Index {
                        what: "student",
                        id,
                        len: n,
                    }
                    .into());
                }
                Ok(id)
            })
            .collect(),
    }
}

/// Per-exercise difficulty summary for the case-study table: the Q-masked
/// mean of per-concept difficulty for NCDM, the location parameter mapped
/// into (0,1) for IRT/MIRT, and a guess/slip midpoint proxy for DINA.
fn item_difficulty(params: &ExerciseParams, exercise: usize, q: &hcd_core::data::QMatrix) -> f64 {
    match params {
        ExerciseParams::Ncdm { diff, .. } => {
            let mask = q.row(exercise).expect("exercise id validated");
            let mut sum = 0.0;
            let mut count = 0.0;
            for (j, &m) in mask.iter().enumerate() {
                if m == 1 {
                    sum += diff.get(exercise, j);
                    count += 1.0;
                }
            }
            if count > 0.0 {
                sum / count
            } else {
                0.5
            }
        }
        ExerciseParams::Irt { b, .. } | ExerciseParams::Mirt { b, .. } => {
            hcd_core::array::sigmoid(b[exercise])
        }
        ExerciseParams::Dina { guess, slip } => (1.0 - guess[exercise] + slip[exercise]) / 2.0,
    }
}

fn masked_mean(values: &[f64], mask: &[u8]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0.0;
    for (v, &m) in values.iter().zip(mask) {
        if m == 1 {
            sum += v;
            count += 1.0;
        }
    }
    if count > 0.0 {
        sum / count
    } else {
        0.0
    }
}

fn cmd_diagnose(args: DiagnoseArgs) -> anyhow::Result<()> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let dataset = import_canonical(&args.data)?;
    checkpoint.verify_fingerprint(&dataset)?;
    let spec = checkpoint.config.model_spec(&dataset)?;
    let levels = dataset
        .hierarchy
        .as_ref()
        .map(|h| h.levels.clone())
        .unwrap_or_default();
    let diagnosis = spec.diagnose(&checkpoint.params, &levels)?;
    let students = parse_student_filter(&args.students, dataset.n)?;
    std::fs::create_dir_all(&args.out)?;

    write_students_csv(&args.out, &diagnosis, &levels, &students, dataset.k)?;
    write_students_json(&args.out, &diagnosis, &levels, &students)?;
    write_case_study(
        &args.out,
        &spec,
        &checkpoint,
        &dataset,
        &diagnosis,
        &students,
    )?;
    println!(
        "diagnosis for {} students written to {}",
        students.len(),
        args.out.display()
    );
    Ok(())
}

fn write_students_csv(
    out: &Path,
    diagnosis: &Diagnosis,
    levels: &[usize],
    students: &[usize],
    k: usize,
) -> anyhow::Result<()> {
    let mut csv = String::from("student_id,level,alpha");
    for prefix in ["theta_person", "theta_hierarchy", "theta"] {
        for j in 0..k {
            csv.push_str(&format!(",{prefix}_{j}"));
        }
    }
    csv.push('\n');
    for &s in students {
        let (level, alpha) = match &diagnosis.hierarchy {
            Some(h) => (levels[s], h.alpha[s]),
            None => (0, f64::NAN),
        };
        csv.push_str(&format!("{s},{level},{alpha}"));
        for v in diagnosis.theta_person.row(s) {
            csv.push_str(&format!(",{v}"));
        }
        match &diagnosis.hierarchy {
            Some(h) => {
                for v in h.theta_hierarchy.row(levels[s]) {
                    csv.push_str(&format!(",{v}"));
                }
            }
            None => {
                for v in diagnosis.theta_person.row(s) {
                    csv.push_str(&format!(",{v}"));
                }
            }
        }
        for v in diagnosis.fused.row(s) {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    write_atomic(&out.join("students.csv"), csv.as_bytes())?;
    Ok(())
}

fn write_students_json(
    out: &Path,
    diagnosis: &Diagnosis,
    levels: &[usize],
    students: &[usize],
) -> anyhow::Result<()> {
    let rows: Vec<serde_json::Value> = students
        .iter()
        .map(|&s| {
            let mut obj = serde_json::json!({
                "student_id": s,
                "theta_person": diagnosis.theta_person.row(s),
                "theta": diagnosis.fused.row(s),
            });
            if let Some(h) = &diagnosis.hierarchy {
                obj["level"] = serde_json::json!(levels[s]);
                obj["alpha"] = serde_json::json!(h.alpha[s]);
                obj["theta_hierarchy"] = serde_json::json!(h.theta_hierarchy.row(levels[s]));
            }
            obj
        })
        .collect();
    write_atomic(
        &out.join("students.json"),
        serde_json::to_string_pretty(&rows)?.as_bytes(),
    )?;
    Ok(())
}

fn write_case_study(
    out: &Path,
    spec: &hcd_core::model::ModelSpec,
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    diagnosis: &Diagnosis,
    students: &[usize],
) -> anyhow::Result<()> {
    let wanted: std::collections::HashSet<usize> = students.iter().copied().collect();
    let params = spec.exercise_params(&checkpoint.params)?;
    let levels = dataset
        .hierarchy
        .as_ref()
        .map(|h| h.levels.clone())
        .unwrap_or_default();
    let mut csv = String::from(
        "student_id,exercise_id,theta_person_mean,theta_hierarchy_mean,theta_mean,difficulty,prediction,label\n",
    );
    for it in &dataset.interactions {
        if !wanted.contains(&it.student) {
            continue;
        }
        let mask = dataset.q.row(it.exercise)?;
        let theta = diagnosis.fused.row(it.student);
        let person_mean = masked_mean(diagnosis.theta_person.row(it.student), mask);
        let hier_mean = match &diagnosis.hierarchy {
            Some(h) => masked_mean(h.theta_hierarchy.row(levels[it.student]), mask),
            None => person_mean,
        };
        let theta_mean = masked_mean(theta, mask);
        let difficulty = item_difficulty(&params, it.exercise, &dataset.q);
        let prediction = predict(&params, theta, it.exercise, &dataset.q, spec.disc_scale)?;
        csv.push_str(&format!(
            "{},{},{person_mean},{hier_mean},{theta_mean},{difficulty},{prediction},{}\n",
            it.student, it.exercise, it.response
        ));
    }
    write_atomic(&out.join("case_study.csv"), csv.as_bytes())?;
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let dataset = import_canonical(&args.data)?;
    checkpoint.verify_fingerprint(&dataset)?;
    let spec = checkpoint.config.model_spec(&dataset)?;
    let levels = dataset
        .hierarchy
        .as_ref()
        .map(|h| h.levels.clone())
        .unwrap_or_default();
    let diagnosis = spec.diagnose(&checkpoint.params, &levels)?;
    std::fs::create_dir_all(&args.out)?;

    let proficiency = if args.random_baseline {
        let seed = config::resolve_seed(args.seed, None)?;
        random_diagnoser(dataset.n, dataset.k, seed)
    } else {
        diagnosis.fused.clone()
    };

    // test metrics on the held-out part of the training split
    let (_, _, test) = split(&dataset, (0.7, 0.1, 0.2), checkpoint.config.seed)?;
    let params = spec.exercise_params(&checkpoint.params)?;
    let records: Vec<EvalRecord> = test
        .interactions
        .iter()
        .map(|it| {
            predict(
                &params,
                proficiency.row(it.student),
                it.exercise,
                &dataset.q,
                spec.disc_scale,
            )
            .map(|p| EvalRecord {
                prediction: p,
                label: it.response,
                student: it.student,
                exercise: it.exercise,
            })
        })
        .collect::<hcd_core::Result<_>>()?;
    let block = metric_block(&records)?;
    let doa_value = doa(&proficiency, &dataset)?;

    let report = MetricReport {
        auc: block.auc,
        acc: block.acc,
        rmse: block.rmse,
        doa: Some(doa_value),
        per_fold: Vec::new(),
    };
    write_atomic(
        &args.out.join("metrics.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;

    if let Some(h) = &dataset.hierarchy {
        let rows = distribution_export(&proficiency, h);
        write_atomic(
            &args.out.join("distribution.csv"),
            distribution_csv(&rows).as_bytes(),
        )?;
    }
    if let Some(hd) = &diagnosis.hierarchy {
        let mut grid = String::from("level");
        for j in 0..dataset.k {
            grid.push_str(&format!(",theta_{j}"));
        }
        grid.push('\n');
        for l in 0..hd.theta_hierarchy.rows() {
            grid.push_str(&l.to_string());
            for v in hd.theta_hierarchy.row(l) {
                grid.push_str(&format!(",{v}"));
            }
            grid.push('\n');
        }
        write_atomic(&args.out.join("hierarchy_grid.csv"), grid.as_bytes())?;
    }

    println!(
        "AUC {:.4}, ACC {:.4}, RMSE {:.4}, DOA {:.4}{}",
        block.auc,
        block.acc,
        block.rmse,
        doa_value,
        if args.random_baseline {
            " (random baseline)"
        } else {
            ""
        }
    );
    Ok(())
}
