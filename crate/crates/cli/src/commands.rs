//! Subcommand implementations, generic over the scalar type.

use std::path::{Path, PathBuf};

use sparsedistill::checkpoint::{load_checkpoint, save_checkpoint};
use sparsedistill::data::{
    load_csv, load_idx, make_synthetic, split_train_val, write_manifest, Dataset, DatasetBundle,
    SplitTag,
};
use sparsedistill::error::{Error, Result};
use sparsedistill::importance::{load_scores, save_scores, ScoreMeta};
use sparsedistill::metrics::{MetricsRow, MetricsSink};
use sparsedistill::models::{Architecture, ModelConfig};
use sparsedistill::pipeline::{
    compare, prune_model, ExperimentPlan, MethodTag, RunRecord, COMPARE_CSV_HEADER,
};
use sparsedistill::pruning::{load_mask, measure_sparsity, save_mask};
use sparsedistill::retrain::{evaluate, retrain_kd, retrain_plain, TrainOptions};
use sparsedistill::Scalar;

use crate::config::{DatasetSpec, ExperimentConfig};

pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub seed: u64,
}

impl Ctx {
    pub fn new(cfg: ExperimentConfig, out: Option<PathBuf>, seed: Option<u64>) -> Self {
        let out = out.unwrap_or_else(|| cfg.out.clone());
        let seed = seed.unwrap_or_else(|| cfg.seeds.first().copied().unwrap_or(0));
        Self { cfg, out, seed }
    }

    fn sink(&self) -> Result<MetricsSink> {
        MetricsSink::create(&self.out.join("metrics.csv"))
    }

    fn require(&self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Ok(())
    }
}

fn build_bundle<T: Scalar>(spec: &DatasetSpec) -> Result<DatasetBundle<T>> {
    match spec {
        DatasetSpec::Synthetic {
            classes,
            per_class,
            shape,
            delta,
            seed,
        } => make_synthetic(*classes, *per_class, shape, *delta, *seed),
        DatasetSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            val_fraction,
            split_seed,
        } => {
            let full = load_idx::<T>(train_images, train_labels)?;
            let test = load_idx::<T>(test_images, test_labels)?.with_split(SplitTag::Test);
            let (train, val) = split_train_val(&full, *val_fraction, *split_seed)?;
            Ok(DatasetBundle { train, val, test })
        }
        DatasetSpec::Csv {
            train,
            test,
            shape,
            has_header,
            val_fraction,
            split_seed,
        } => {
            let full = load_csv::<T>(train, shape, *has_header)?;
            let test = load_csv::<T>(test, shape, *has_header)?.with_split(SplitTag::Test);
            let (train, val) = split_train_val(&full, *val_fraction, *split_seed)?;
            Ok(DatasetBundle { train, val, test })
        }
    }
}

fn dataset_manifest(spec: &DatasetSpec, out: &Path, sizes: (usize, usize, usize)) -> Result<()> {
    let mut entries = vec![
        ("train_size".to_string(), sizes.0.to_string()),
        ("val_size".to_string(), sizes.1.to_string()),
        ("test_size".to_string(), sizes.2.to_string()),
    ];
    match spec {
        DatasetSpec::Synthetic { seed, delta, .. } => {
            entries.insert(0, ("kind".to_string(), "synthetic".to_string()));
            entries.push(("generation_seed".to_string(), seed.to_string()));
            entries.push(("delta".to_string(), delta.to_string()));
        }
        DatasetSpec::Idx { split_seed, .. } => {
            entries.insert(0, ("kind".to_string(), "idx".to_string()));
            entries.push(("split_seed".to_string(), split_seed.to_string()));
        }
        DatasetSpec::Csv { split_seed, .. } => {
            entries.insert(0, ("kind".to_string(), "csv".to_string()));
            entries.push(("split_seed".to_string(), split_seed.to_string()));
        }
    }
    write_manifest(&out.join("dataset-manifest.txt"), &entries)
}

fn model_config_for<T: Scalar>(arch: &str, sample: &Dataset<T>) -> Result<ModelConfig> {
    Ok(ModelConfig {
        arch: arch.parse::<Architecture>()?,
        input_shape: sample.sample_shape().to_vec(),
        classes: sample.class_count,
    })
}

fn plan_for<T: Scalar>(cfg: &ExperimentConfig, bundle: &DatasetBundle<T>) -> Result<ExperimentPlan> {
    Ok(ExperimentPlan {
        teacher: model_config_for(&cfg.teacher_arch, &bundle.train)?,
        student: model_config_for(&cfg.student_arch, &bundle.train)?,
        finetune: cfg.finetune.to_distill_config()?,
        score: cfg.score.to_distill_config()?,
        retrain: cfg.retrain.to_distill_config()?,
        gamma: cfg.gamma,
        score_epochs: cfg.score_epochs,
        optim: cfg.optim(),
        teacher_epochs: cfg.teacher_epochs,
        finetune_epochs: cfg.finetune_epochs,
        retrain_epochs: cfg.retrain_epochs,
        warmup_epochs: cfg.warmup_epochs,
        patience: cfg.patience,
        sparsities: cfg.sparsities.clone(),
        seeds: cfg.seeds.clone(),
        teacher_seed: cfg.seeds.first().copied().unwrap_or(0),
    })
}

fn prepare<T: Scalar>(ctx: &Ctx) -> Result<(DatasetBundle<T>, ExperimentPlan)> {
    std::fs::create_dir_all(&ctx.out)?;
    std::fs::write(ctx.out.join("config.resolved"), ctx.cfg.to_file_string())?;
    let bundle = build_bundle::<T>(&ctx.cfg.dataset)?;
    dataset_manifest(
        &ctx.cfg.dataset,
        &ctx.out,
        (bundle.train.len(), bundle.val.len(), bundle.test.len()),
    )?;
    let plan = plan_for(&ctx.cfg, &bundle)?;
    Ok((bundle, plan))
}

pub fn cmd_train_teacher<T: Scalar>(ctx: &Ctx) -> Result<()> {
    let (bundle, mut plan) = prepare::<T>(ctx)?;
    plan.teacher_seed = ctx.seed;
    let mut sink = ctx.sink()?;
    let teacher = sparsedistill::pipeline::train_teacher(&plan, &bundle, Some(&mut sink))?;
    let path = ctx.out.join("teacher.ckpt");
    save_checkpoint(&teacher, &path)?;
    let acc = evaluate(&teacher, &bundle.test)?;
    println!("teacher trained: test accuracy {acc:.4}, checkpoint {}", path.display());
    Ok(())
}

pub fn cmd_distill<T: Scalar>(ctx: &Ctx, teacher_path: &Path) -> Result<()> {
    ctx.require(teacher_path)?;
    let (bundle, plan) = prepare::<T>(ctx)?;
    let teacher = load_checkpoint::<T>(teacher_path)?;
    let mut sink = ctx.sink()?;
    let (student, _) =
        sparsedistill::pipeline::distill_student(&plan, &bundle, &teacher, ctx.seed, Some(&mut sink))?;
    let path = ctx.out.join(format!("student-dense-s{}.ckpt", ctx.seed));
    save_checkpoint(&student, &path)?;
    let acc = evaluate(&student, &bundle.test)?;
    println!("student distilled: test accuracy {acc:.4}, checkpoint {}", path.display());
    Ok(())
}

pub fn cmd_score<T: Scalar>(ctx: &Ctx, teacher_path: &Path, student_path: &Path) -> Result<()> {
    ctx.require(teacher_path)?;
    ctx.require(student_path)?;
    let (bundle, plan) = prepare::<T>(ctx)?;
    let teacher = load_checkpoint::<T>(teacher_path)?;
    let mut student = load_checkpoint::<T>(student_path)?;
    let ckpt_before = std::fs::read(student_path)?;

    let scores =
        sparsedistill::pipeline::score_student(&plan, &bundle, &teacher, &mut student, ctx.seed)?;
    let batches_per_epoch = bundle.train.len().div_ceil(ctx.cfg.batch_size);
    let meta = ScoreMeta {
        gamma: plan.gamma,
        batch_count: (batches_per_epoch * plan.score_epochs) as u64,
        epochs: plan.score_epochs as u32,
        distill: plan.score,
    };
    let path = ctx.out.join(format!("scores-s{}.sdis", ctx.seed));
    save_scores(&scores, &meta, &path)?;

    let ckpt_after = std::fs::read(student_path)?;
    if ckpt_before != ckpt_after {
        return Err(Error::contract(
            "student checkpoint changed on disk during scoring",
        ));
    }
    println!(
        "scores for {} parameters ({} weights) written to {}",
        scores.len(),
        scores.total_count(),
        path.display()
    );
    Ok(())
}

pub fn cmd_prune<T: Scalar>(
    ctx: &Ctx,
    student_path: &Path,
    scores_path: &Path,
    sparsity: Option<f64>,
) -> Result<()> {
    ctx.require(student_path)?;
    ctx.require(scores_path)?;
    std::fs::create_dir_all(&ctx.out)?;
    let p = match sparsity.or_else(|| ctx.cfg.sparsities.first().copied()) {
        Some(p) => p,
        None => return Err(Error::config("no sparsity target given")),
    };
    let student = load_checkpoint::<T>(student_path)?;
    let (scores, _meta) = load_scores::<T>(scores_path)?;
    let (pruned, mask) = prune_model(&student, &scores, p)?;

    let tag = format!("s{}-p{p}", ctx.seed);
    let ckpt_path = ctx.out.join(format!("pruned-{tag}.ckpt"));
    let mask_path = ctx.out.join(format!("mask-{tag}.sdmk"));
    save_checkpoint(&pruned, &ckpt_path)?;
    save_mask(&mask, &mask_path)?;
    println!(
        "pruned to sparsity {:.6} (kept {} of {}), threshold {:.3e}; wrote {} and {}",
        measure_sparsity(&pruned),
        mask.retained,
        mask.total,
        mask.threshold,
        ckpt_path.display(),
        mask_path.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetrainMode {
    Plain,
    Kd,
}

pub fn cmd_retrain<T: Scalar>(
    ctx: &Ctx,
    pruned_path: &Path,
    mask_path: &Path,
    mode: RetrainMode,
    teacher_path: Option<&Path>,
) -> Result<()> {
    ctx.require(pruned_path)?;
    ctx.require(mask_path)?;
    let (bundle, plan) = prepare::<T>(ctx)?;
    let mut model = load_checkpoint::<T>(pruned_path)?;
    let mask = load_mask(mask_path)?;
    let mut sink = ctx.sink()?;
    let opts = TrainOptions::new(plan.optim, plan.retrain_epochs, plan.patience, ctx.seed);

    let start = std::time::Instant::now();
    let (method, report) = match mode {
        RetrainMode::Plain => {
            let run_id = format!("ours-no-kd-s{}-p{}", ctx.seed, mask.target_sparsity);
            let report = retrain_plain(
                &mut model,
                &mask,
                &bundle.train,
                &bundle.val,
                &opts,
                &run_id,
                Some(&mut sink),
            )?;
            (MethodTag::OursNoKd, report)
        }
        RetrainMode::Kd => {
            let teacher_path =
                teacher_path.ok_or_else(|| Error::config("--teacher required for kd retraining"))?;
            ctx.require(teacher_path)?;
            let teacher = load_checkpoint::<T>(teacher_path)?;
            let run_id = format!(
                "ours-kd-s{}-p{}",
                ctx.seed, mask.target_sparsity
            );
            let report = retrain_kd(
                &mut model,
                &teacher,
                &mask,
                &bundle.train,
                &bundle.val,
                &plan.retrain,
                &opts,
                &run_id,
                Some(&mut sink),
            )?;
            (
                MethodTag::OursKd {
                    temperature: plan.retrain.temperature,
                },
                report,
            )
        }
    };
    let retrain_secs = start.elapsed().as_secs_f64();
    let accuracy = evaluate(&model, &bundle.test)?;

    let path = ctx.out.join(format!(
        "final-{method}-s{}-p{}.ckpt",
        ctx.seed, mask.target_sparsity
    ));
    save_checkpoint(&model, &path)?;

    let record = RunRecord {
        run_id: format!("{method}-s{}-p{}", ctx.seed, mask.target_sparsity),
        method,
        seed: ctx.seed,
        target_sparsity: mask.target_sparsity,
        achieved_sparsity: measure_sparsity(&model),
        retained: mask.retained,
        total_prunable: mask.total,
        accuracy,
        retrain_epochs: report.epochs_run,
        phases: vec![("retrain".into(), retrain_secs)],
    };
    append_record(&ctx.out.join("records.csv"), &record)?;
    println!(
        "retrained ({method}) to accuracy {accuracy:.4} at sparsity {:.6} in {} epochs; {}",
        record.achieved_sparsity,
        report.epochs_run,
        path.display()
    );
    Ok(())
}

fn append_record(path: &Path, r: &RunRecord) -> Result<()> {
    use std::io::Write;
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    if fresh {
        writeln!(f, "{COMPARE_CSV_HEADER}")?;
    }
    writeln!(
        f,
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        r.run_id,
        r.method,
        r.seed,
        r.target_sparsity,
        r.achieved_sparsity,
        r.retained,
        r.total_prunable,
        r.accuracy,
        r.retrain_epochs,
        r.phase("distill"),
        r.phase("score"),
        r.phase("warmup"),
        r.phase("prune"),
        r.phase("retrain"),
        r.phase("eval"),
        r.total_secs(),
    )?;
    Ok(())
}

pub fn cmd_eval<T: Scalar>(ctx: &Ctx, ckpt: &Path, split: &str) -> Result<()> {
    ctx.require(ckpt)?;
    let (bundle, _plan) = prepare::<T>(ctx)?;
    let ds = match split {
        "train" => &bundle.train,
        "val" => &bundle.val,
        "test" => &bundle.test,
        other => {
            return Err(Error::config(format!(
                "unknown split {other:?}; expected train, val, or test"
            )))
        }
    };
    let model = load_checkpoint::<T>(ckpt)?;
    let start = std::time::Instant::now();
    let accuracy = evaluate(&model, ds)?;
    let mut sink = ctx.sink()?;
    sink.append(&MetricsRow {
        run_id: ckpt.display().to_string(),
        phase: format!("eval-{split}"),
        epoch: 0,
        train_loss: f64::NAN,
        val_loss: f64::NAN,
        val_acc: accuracy,
        sparsity: measure_sparsity(&model),
        wall_clock_s: start.elapsed().as_secs_f64(),
    })?;
    println!("accuracy on {split}: {accuracy:.4}");
    Ok(())
}

pub fn cmd_compare<T: Scalar>(ctx: &Ctx) -> Result<()> {
    let (bundle, plan) = prepare::<T>(ctx)?;
    let mut sink = ctx.sink()?;
    let report = compare(&plan, &bundle, ctx.cfg.efficiency, Some(&mut sink))?;
    std::fs::write(ctx.out.join("compare.csv"), report.to_csv())?;
    let text = report.to_text();
    std::fs::write(ctx.out.join("compare.txt"), &text)?;
    println!("{text}");
    println!(
        "comparison finished: {} records, outputs in {}",
        report.records.len(),
        ctx.out.display()
    );
    Ok(())
}
