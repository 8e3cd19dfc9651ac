//! Stage runners behind the command line: each one reads an
//! [`ExperimentConfig`], writes its artifacts under
//! `<out_dir>/<stage>/seed_<n>/` and finishes with an atomically written
//! `summary.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::Serialize;
use serde_json::{json, Value};

use crate::checkpoint::{code_version, Checkpoint, Checkpointable, LoadedModel};
use crate::config::{seeded_path, ExperimentConfig, SweepAxis};
use crate::data::{load_dataset, Dataset, DatasetSplit};
use crate::distill::{hook_by_name, run_distillation, DistillConfig, DistillScheme};
use crate::error::{Error, Result};
use crate::eval::{
    cka_similarity, correlation_matrix_difference, default_noise_grid, knowledge_similarity, noise_robustness_sweep,
    top1_accuracy, transfer_finetune, NoiseCurve, RepresentationMatrix,
};
use crate::math::{early_loss_stability, Granularity, LogitsBatch};
use crate::model::{attach_branches, to_logits, NativeModel, Network, StudentBundle, TeacherBundle};
use crate::self_analyze::{branch_agreement, run_self_analysis, SelfAnalyzeConfig};
use crate::train::{train_network, write_metrics_csv, MetricsRecord};

/// Prefix fraction used for the early validation-loss stability metric.
pub const STABILITY_FRACTION: f64 = 0.25;

pub fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    let d = &cfg.dataset;
    load_dataset(&d.source, d.normalization.as_ref(), &d.split, None)
}

pub fn stage_dir(cfg: &ExperimentConfig, stage: &str, seed: u64) -> PathBuf {
    cfg.out_dir.join(stage).join(format!("seed_{seed}"))
}

/// Config hash, seed list and code version embedded in every report.
pub fn provenance(cfg: &ExperimentConfig) -> Value {
    json!({ "config_hash": cfg.hash(), "seeds": cfg.seeds, "code_version": code_version() })
}

fn prepare_dir(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml_string()?)?;
    Ok(())
}

/// Writes through a temporary file and renames into place.
pub fn write_json_atomic(path: &Path, value: &impl Serialize) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(value)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn with_provenance(cfg: &ExperimentConfig, mut body: Value) -> Value {
    if let (Value::Object(map), Value::Object(p)) = (&mut body, provenance(cfg)) {
        map.extend(p);
    }
    body
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn eval_split(data: &Dataset) -> &DatasetSplit {
    if data.test.is_empty() {
        &data.val
    } else {
        &data.test
    }
}

pub fn teacher_checkpoint_path(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    match &cfg.teacher.checkpoint {
        Some(p) => seeded_path(p, seed),
        None => stage_dir(cfg, "teacher", seed).join("teacher.ckpt"),
    }
}

pub fn t_sa_checkpoint_path(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    match cfg.distill.as_ref().and_then(|d| d.teacher_checkpoint.as_ref()) {
        Some(p) => seeded_path(p, seed),
        None => stage_dir(cfg, "self_analyze", seed).join("t_sa.ckpt"),
    }
}

/// Supervised teacher pretraining.
pub fn train_teacher(cfg: &ExperimentConfig, data: &Dataset, seed: u64) -> Result<Network> {
    let schedule = cfg.teacher_schedule()?;
    let dir = stage_dir(cfg, "teacher", seed);
    prepare_dir(&dir, cfg)?;
    let mut net = Network::new(cfg.teacher.arch.clone(), cfg.num_classes(), seed)?;
    let records = train_network(&mut net, &data.train, Some(&data.val), &schedule, cfg.dataset.augment, seed)?;
    write_metrics_csv(&dir.join("metrics.csv"), &records)?;
    let path = dir.join("teacher.ckpt");
    net.to_checkpoint(seed).save(&path)?;
    let acc = top1_accuracy(&net, eval_split(data))?;
    let summary = with_provenance(
        cfg,
        json!({ "stage": "teacher", "seed": seed, "test_accuracy": acc, "checkpoint": path, "checksum": net.checksum() }),
    );
    write_json_atomic(&dir.join("summary.json"), &summary)?;
    Ok(net)
}

/// Loads the configured teacher, optionally training it when absent.
pub fn teacher_network(cfg: &ExperimentConfig, data: &Dataset, seed: u64, train_if_missing: bool) -> Result<Network> {
    let path = teacher_checkpoint_path(cfg, seed);
    if !path.exists() && train_if_missing && cfg.teacher.checkpoint.is_none() {
        return train_teacher(cfg, data, seed);
    }
    let net = match LoadedModel::load(&path)? {
        LoadedModel::Network(n) => n,
        LoadedModel::Teacher(t) => t.network(),
        LoadedModel::Student(s) => s.strip(),
    };
    if net.num_classes() != cfg.num_classes() {
        return Err(Error::invalid(format!(
            "teacher checkpoint has {} classes but the dataset has {}",
            net.num_classes(),
            cfg.num_classes()
        )));
    }
    Ok(net)
}

pub struct SelfAnalyzeOutcome {
    pub bundle: TeacherBundle,
    pub records: Vec<MetricsRecord>,
    pub dir: PathBuf,
}

/// Attaches branches to the teacher, trains them and writes the frozen result.
pub fn self_analyze(cfg: &ExperimentConfig, data: &Dataset, seed: u64, train_teacher: bool) -> Result<SelfAnalyzeOutcome> {
    let (tau_akb, tau_dkb) = cfg.branch_temperatures()?;
    let sa = SelfAnalyzeConfig {
        tau_akb,
        tau_dkb,
        schedule: cfg.self_analyze_schedule()?,
        seed,
        cache_features: cfg.self_analyze.as_ref().is_some_and(|s| s.cache_features),
        augment: cfg.dataset.augment,
    };
    let teacher = teacher_network(cfg, data, seed, train_teacher)?;
    let dir = stage_dir(cfg, "self_analyze", seed);
    prepare_dir(&dir, cfg)?;
    let bundle = attach_branches(&teacher, cfg.spec(), seed)?;
    let frozen_before = bundle.checksum_parts(&[crate::model::Part::Backbone, crate::model::Part::Classifier]);
    let run = run_self_analysis(bundle, &data.train, &sa)?;
    write_metrics_csv(&dir.join("metrics.csv"), &run.records)?;
    let mut ckpt = run.bundle.to_checkpoint(seed);
    ckpt.meta.temperatures.insert("tau_akb".into(), tau_akb.get());
    ckpt.meta.temperatures.insert("tau_dkb".into(), tau_dkb.get());
    let path = dir.join("t_sa.ckpt");
    ckpt.save(&path)?;
    let train_agree = branch_agreement(&run.bundle, &data.train)?;
    let test_agree = branch_agreement(&run.bundle, eval_split(data))?;
    write_json_atomic(&dir.join("agreement.json"), &json!({ "train": train_agree, "test": test_agree }))?;
    let frozen_after = run.bundle.checksum_parts(&[crate::model::Part::Backbone, crate::model::Part::Classifier]);
    let summary = with_provenance(
        cfg,
        json!({
            "stage": "self_analyze",
            "seed": seed,
            "agreement": { "train": train_agree, "test": test_agree },
            "frozen_checksum_before": frozen_before,
            "frozen_checksum_after": frozen_after,
            "frozen_unchanged": frozen_before == frozen_after,
            "checkpoint": path,
        }),
    );
    write_json_atomic(&dir.join("summary.json"), &summary)?;
    Ok(SelfAnalyzeOutcome { bundle: run.bundle, records: run.records, dir })
}

pub fn load_t_sa(cfg: &ExperimentConfig, seed: u64) -> Result<TeacherBundle> {
    let path = t_sa_checkpoint_path(cfg, seed);
    TeacherBundle::from_checkpoint(&Checkpoint::load(&path)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct DistillSummary {
    pub scheme: DistillScheme,
    pub hook: String,
    pub seed: u64,
    pub test_accuracy: f64,
    pub stripped_test_accuracy: f64,
    pub final_val_accuracy: f64,
    pub final_val_loss: f64,
    pub early_loss_stability: f64,
    /// Final-epoch mean training value of every loss term.
    pub loss_decomposition: BTreeMap<String, f64>,
    pub teacher_checksum_unchanged: bool,
}

pub struct DistillOutcome {
    pub summary: DistillSummary,
    pub student: StudentBundle,
    pub records: Vec<MetricsRecord>,
    pub dir: PathBuf,
}

pub fn distill_dir(cfg: &ExperimentConfig, scheme: DistillScheme, hook: &str, seed: u64) -> PathBuf {
    stage_dir(cfg, &format!("distill/{}_{}", scheme.name(), hook.to_ascii_lowercase()), seed)
}

/// Trains a fresh student against `t_sa` and writes full and stripped checkpoints.
pub fn distill_with_teacher(cfg: &ExperimentConfig, data: &Dataset, seed: u64, t_sa: &TeacherBundle) -> Result<DistillOutcome> {
    let section = cfg.distill_section()?;
    let temps = cfg.distill_temperatures()?;
    let hook = hook_by_name(&section.hook, temps.tau_nk, section.include_ce)?;
    let dcfg = DistillConfig {
        scheme: section.scheme,
        temps,
        schedule: cfg.distill_schedule()?,
        seed,
        weights: section.weights,
        augment: cfg.dataset.augment,
    };
    let student = StudentBundle::new(cfg.student_arch()?.clone(), cfg.spec(), seed.wrapping_add(1_000_003))?;
    let dir = distill_dir(cfg, section.scheme, &section.hook, seed);
    prepare_dir(&dir, cfg)?;
    let before = t_sa.checksum();
    let run = run_distillation(t_sa, student, hook.as_ref(), &dcfg, &data.train, &data.val)?;
    write_metrics_csv(&dir.join("metrics.csv"), &run.records)?;
    let mut ckpt = run.student.to_checkpoint(seed);
    for (k, v) in [("tau_ak", temps.tau_ak), ("tau_nk", temps.tau_nk), ("tau_dk", temps.tau_dk)] {
        ckpt.meta.temperatures.insert(k.into(), v.get());
    }
    ckpt.meta.extra.insert("scheme".into(), section.scheme.name().into());
    ckpt.meta.extra.insert("hook".into(), hook.name().into());
    ckpt.save(&dir.join("student.ckpt"))?;
    let stripped = run.student.clone().strip();
    let mut sck = stripped.to_checkpoint(seed);
    sck.meta.extra.insert("stripped_from".into(), "student".into());
    sck.save(&dir.join("student_stripped.ckpt"))?;

    let split = eval_split(data);
    let last = run.records.last().expect("at least one epoch");
    let loss_decomposition = last
        .values
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("train_").map(|t| (t.to_string(), *v)))
        .filter(|(k, _)| k != "acc")
        .collect();
    let summary = DistillSummary {
        scheme: section.scheme,
        hook: hook.name().to_string(),
        seed,
        test_accuracy: top1_accuracy(&run.student, split)?,
        stripped_test_accuracy: top1_accuracy(&stripped, split)?,
        final_val_accuracy: last.get("val_acc").unwrap_or(f64::NAN),
        final_val_loss: *run.val_losses.last().expect("one entry per epoch"),
        early_loss_stability: early_loss_stability(&run.val_losses, STABILITY_FRACTION)?,
        loss_decomposition,
        teacher_checksum_unchanged: t_sa.checksum() == before,
    };
    let body = with_provenance(cfg, serde_json::to_value(&summary)?);
    write_json_atomic(&dir.join("summary.json"), &body)?;
    Ok(DistillOutcome { summary, student: run.student, records: run.records, dir })
}

pub fn distill(cfg: &ExperimentConfig, data: &Dataset, seed: u64) -> Result<DistillOutcome> {
    let t_sa = load_t_sa(cfg, seed)?;
    distill_with_teacher(cfg, data, seed, &t_sa)
}

#[derive(Debug, Clone, Serialize)]
pub struct HeadComparison {
    pub head: String,
    pub similarity: crate::eval::SimilarityReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct CkaEntry {
    pub layer: String,
    pub value: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluationReport {
    pub teacher_accuracy: f64,
    pub student_accuracy: f64,
    pub heads: Vec<HeadComparison>,
    pub cka: Vec<CkaEntry>,
    pub cka_kernel: crate::eval::CkaKernel,
    pub cka_estimator: String,
    pub correlation_constant_columns: bool,
    pub correlation_abs_mean: f64,
    pub noise_teacher: NoiseCurve,
    pub noise_student: NoiseCurve,
}

fn head_outputs(model: &LoadedModel, x: &Array2<f32>) -> Result<BTreeMap<Granularity, LogitsBatch>> {
    match model.outputs(x)? {
        Some(o) => Ok(o.heads()),
        None => {
            let nk = to_logits(&model.as_native().native_logits(x)?, "classifier")?;
            Ok([(Granularity::Nk, nk)].into_iter().collect())
        }
    }
}

fn write_noise_csv(path: &Path, c: &NoiseCurve) -> Result<()> {
    let rows: Vec<Vec<f64>> = (0..c.sigmas.len()).map(|i| vec![c.sigmas[i], c.accuracy[i], c.accuracy_delta[i]]).collect();
    write_csv(path, &["sigma".into(), "accuracy".into(), "accuracy_delta".into()], &rows)
}

/// Compares a teacher and a student checkpoint on the evaluation split.
pub fn evaluate(
    cfg: &ExperimentConfig,
    data: &Dataset,
    teacher_path: &Path,
    student_path: &Path,
    out: &Path,
) -> Result<EvaluationReport> {
    let ev = cfg.evaluate.clone().unwrap_or_default();
    let teacher = LoadedModel::load(teacher_path)?;
    let student = LoadedModel::load(student_path)?;
    let split = eval_split(data);
    fs::create_dir_all(out)?;
    let n = split.len().min(ev.cka_samples);
    if n < 2 {
        return Err(Error::invalid("evaluation split needs at least 2 samples"));
    }
    let idx: Vec<usize> = (0..n).collect();
    let (x, _) = split.batch(&idx);
    let t_heads = head_outputs(&teacher, &x)?;
    let s_heads = head_outputs(&student, &x)?;

    let mut heads = Vec::new();
    for (k, t) in &t_heads {
        let Some(s) = s_heads.get(k) else { continue };
        if t.cols() != s.cols() {
            return Err(Error::invalid(format!(
                "head {} has {} outputs in the teacher but {} in the student",
                k.name(),
                t.cols(),
                s.cols()
            )));
        }
        let similarity = knowledge_similarity(
            &RepresentationMatrix::new(t.values().clone(), format!("teacher {}", k.name()))?,
            &RepresentationMatrix::new(s.values().clone(), format!("student {}", k.name()))?,
        )?;
        heads.push(HeadComparison { head: k.name().to_string(), similarity });
    }

    let mut cka = Vec::new();
    let tf = teacher.as_native().features(&x)?;
    let sf = student.as_native().features(&x)?;
    let t_nk = &t_heads[&Granularity::Nk];
    let s_nk = &s_heads[&Granularity::Nk];
    for (layer, a, b) in [
        ("flatten", tf.mapv(f64::from), sf.mapv(f64::from)),
        ("nk_logits", t_nk.values().clone(), s_nk.values().clone()),
    ] {
        let r = RepresentationMatrix::new(a, "teacher")
            .and_then(|a| Ok((a, RepresentationMatrix::new(b, "student")?)))
            .and_then(|(a, b)| cka_similarity(&a, &b, ev.cka_kernel));
        let (value, error) = match r {
            Ok(v) => (Some(v), None),
            Err(e) => (None, Some(e.to_string())),
        };
        cka.push(CkaEntry { layer: layer.into(), value, error });
    }

    let diff = correlation_matrix_difference(t_nk, s_nk)?;
    let c = diff.matrix.ncols();
    let header: Vec<String> = (0..c).map(|j| format!("class_{j}")).collect();
    let rows: Vec<Vec<f64>> = diff.matrix.axis_iter(Axis(0)).map(|r| r.to_vec()).collect();
    write_csv(&out.join("correlation_diff.csv"), &header, &rows)?;

    let sigmas = ev.noise_sigmas.clone().unwrap_or_else(default_noise_grid);
    let noise_teacher = noise_robustness_sweep(teacher.as_native(), split, &sigmas, ev.noise_seed)?;
    let noise_student = noise_robustness_sweep(student.as_native(), split, &sigmas, ev.noise_seed)?;
    write_noise_csv(&out.join("noise_teacher.csv"), &noise_teacher)?;
    write_noise_csv(&out.join("noise_student.csv"), &noise_student)?;

    let report = EvaluationReport {
        teacher_accuracy: top1_accuracy(teacher.as_native(), split)?,
        student_accuracy: top1_accuracy(student.as_native(), split)?,
        heads,
        cka,
        cka_kernel: ev.cka_kernel,
        cka_estimator: "biased HSIC with centered kernels; rbf bandwidth = median pairwise distance".into(),
        correlation_constant_columns: diff.constant_columns,
        correlation_abs_mean: diff.matrix.mapv(f64::abs).mean().unwrap_or(0.0),
        noise_teacher,
        noise_student,
    };
    let mut body = with_provenance(cfg, serde_json::to_value(&report)?);
    body["teacher_checkpoint"] = json!(teacher_path);
    body["student_checkpoint"] = json!(student_path);
    write_json_atomic(&out.join("report.json"), &body)?;
    Ok(report)
}

/// Noise-robustness curve for a single checkpoint.
pub fn noise(cfg: &ExperimentConfig, data: &Dataset, model_path: &Path, out: &Path) -> Result<NoiseCurve> {
    let ev = cfg.evaluate.clone().unwrap_or_default();
    let model = LoadedModel::load(model_path)?;
    fs::create_dir_all(out)?;
    let sigmas = ev.noise_sigmas.clone().unwrap_or_else(default_noise_grid);
    let curve = noise_robustness_sweep(model.as_native(), eval_split(data), &sigmas, ev.noise_seed)?;
    write_noise_csv(&out.join("noise_curve.csv"), &curve)?;
    let mut body = with_provenance(cfg, serde_json::to_value(&curve)?);
    body["checkpoint"] = json!(model_path);
    write_json_atomic(&out.join("noise.json"), &body)?;
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub dim_ak: usize,
    pub dim_dk: usize,
    pub tau_akb: f64,
    pub tau_dkb: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub point: SweepPoint,
    pub mean_accuracy: f64,
    pub accuracies: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPlan {
    pub valid: Vec<SweepPoint>,
    pub rejected: Vec<(SweepPoint, String)>,
}

/// Expands the grid and sorts points into valid and rejected.
pub fn plan_sweep(cfg: &ExperimentConfig) -> Result<SweepPlan> {
    let sweep = cfg.sweep.clone().unwrap_or_default();
    let g = &cfg.granularity;
    let points: Vec<SweepPoint> = match sweep.axis {
        SweepAxis::Dims => sweep
            .dim_ak
            .iter()
            .flat_map(|&a| sweep.dim_dk.iter().map(move |&d| (a, d)))
            .map(|(dim_ak, dim_dk)| SweepPoint { dim_ak, dim_dk, tau_akb: g.tau_akb, tau_dkb: g.tau_dkb })
            .collect(),
        SweepAxis::Temperatures => sweep
            .tau_akb
            .iter()
            .flat_map(|&a| sweep.tau_dkb.iter().map(move |&d| (a, d)))
            .map(|(tau_akb, tau_dkb)| SweepPoint { dim_ak: g.dim_ak, dim_dk: g.dim_dk, tau_akb, tau_dkb })
            .collect(),
    };
    let (mut valid, mut rejected) = (Vec::new(), Vec::new());
    for p in points {
        let spec = crate::model::GranularitySpec { dim_ak: p.dim_ak, num_classes: cfg.num_classes(), dim_dk: p.dim_dk };
        let check = crate::model::validate_spec(&spec)
            .and_then(|_| crate::self_analyze::validate_branch_temperatures(p.tau_akb, p.tau_dkb));
        match check {
            Ok(()) => valid.push(p),
            Err(e) => rejected.push((p, e.to_string())),
        }
    }
    Ok(SweepPlan { valid, rejected })
}

/// One self-analysis + distillation run per valid grid point and seed.
pub fn sweep(cfg: &ExperimentConfig, data: &Dataset) -> Result<(SweepPlan, Vec<SweepRow>)> {
    cfg.distill_section()?;
    let plan = plan_sweep(cfg)?;
    if plan.valid.is_empty() {
        return Err(Error::Config(format!("no valid sweep points; {} rejected", plan.rejected.len())));
    }
    let seeds = cfg
        .sweep
        .as_ref()
        .and_then(|s| s.seeds.clone())
        .unwrap_or_else(|| cfg.seeds.iter().copied().take(2).collect());
    let base_out = cfg.out_dir.join("sweep");
    let mut rows = Vec::new();
    for (i, p) in plan.valid.iter().enumerate() {
        let mut point_cfg = cfg.clone();
        point_cfg.granularity.dim_ak = p.dim_ak;
        point_cfg.granularity.dim_dk = p.dim_dk;
        point_cfg.granularity.tau_akb = p.tau_akb;
        point_cfg.granularity.tau_dkb = p.tau_dkb;
        // explicit distill temperatures would pin the swept values
        if let Some(d) = point_cfg.distill.as_mut() {
            d.tau_ak = None;
            d.tau_dk = None;
            d.teacher_checkpoint = None;
        }
        point_cfg.out_dir = base_out.join(format!("point_{i}"));
        let mut accuracies = Vec::new();
        for &seed in &seeds {
            let teacher_ckpt = teacher_checkpoint_path(cfg, seed);
            if !teacher_ckpt.exists() && cfg.teacher.checkpoint.is_none() {
                train_teacher(cfg, data, seed)?;
            }
            point_cfg.teacher.checkpoint = Some(teacher_ckpt);
            let sa = self_analyze(&point_cfg, data, seed, false)?;
            let d = distill_with_teacher(&point_cfg, data, seed, &sa.bundle)?;
            accuracies.push(d.summary.test_accuracy);
        }
        let mean_accuracy = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
        rows.push(SweepRow { point: p.clone(), mean_accuracy, accuracies });
    }
    fs::create_dir_all(&base_out)?;
    let table: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| vec![r.point.dim_ak as f64, r.point.dim_dk as f64, r.point.tau_akb, r.point.tau_dkb, r.mean_accuracy])
        .collect();
    let header: Vec<String> =
        ["dim_ak", "dim_dk", "tau_akb", "tau_dkb", "mean_accuracy"].iter().map(|s| s.to_string()).collect();
    write_csv(&base_out.join("sweep.csv"), &header, &table)?;
    let body = with_provenance(cfg, json!({ "rows": rows, "rejected": plan.rejected, "seeds_averaged": seeds }));
    write_json_atomic(&base_out.join("summary.json"), &body)?;
    Ok((plan, rows))
}

#[derive(Debug, Clone, Serialize)]
pub struct TransferReport {
    pub source_accuracy: f64,
    pub target_accuracy: f64,
    pub backbone_checksum_before: String,
    pub backbone_checksum_after: String,
    pub backbone_unchanged: bool,
}

/// Freezes the checkpoint's backbone and fits a new classifier on the target dataset.
pub fn transfer(cfg: &ExperimentConfig, data: &Dataset, model_path: &Path, seed: u64, out: &Path) -> Result<TransferReport> {
    let section = cfg.transfer.as_ref().ok_or_else(|| Error::Config("the [transfer] table is missing".into()))?;
    let net = match LoadedModel::load(model_path)? {
        LoadedModel::Network(n) => n,
        LoadedModel::Teacher(t) => t.network(),
        LoadedModel::Student(s) => s.strip(),
    };
    let t = &section.target;
    let target = load_dataset(&t.source, t.normalization.as_ref(), &t.split, None)?;
    let schedule = section.schedule.resolve(crate::train::TrainSchedule::teacher_branches(), cfg.scale)?;
    let source_accuracy = top1_accuracy(&net, eval_split(data))?;
    let result = transfer_finetune(&net, &target.train, eval_split(&target), None, &schedule, seed)?;
    fs::create_dir_all(out)?;
    let report = TransferReport {
        source_accuracy,
        target_accuracy: result.accuracy,
        backbone_unchanged: result.backbone_checksum_before == result.backbone_checksum_after,
        backbone_checksum_before: result.backbone_checksum_before,
        backbone_checksum_after: result.backbone_checksum_after,
    };
    let mut body = with_provenance(cfg, serde_json::to_value(&report)?);
    body["checkpoint"] = json!(model_path);
    body["seed"] = json!(seed);
    write_json_atomic(&out.join("transfer.json"), &body)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(dir: &Path) -> ExperimentConfig {
        let text = format!(
            r#"
seeds = [3]
out_dir = "{}"

[dataset.source]
kind = "blobs"
classes = 4
dim = 8
train_per_class = 40
test_per_class = 10

[teacher]
arch = {{ kind = "mlp", input_dim = 8, hidden = [16, 16] }}
schedule = {{ epochs = 4, milestones = [], initial_lr = 0.02 }}

[granularity]
dim_ak = 2
dim_dk = 8

[self_analyze]
schedule = {{ epochs = 3, milestones = [2], initial_lr = 0.02 }}

[student]
arch = {{ kind = "mlp", input_dim = 8, hidden = [8, 8] }}

[distill]
scheme = "se"
schedule = {{ epochs = 4, milestones = [3], initial_lr = 0.02 }}

[evaluate]
cka_samples = 30

[transfer.target.source]
kind = "blobs"
classes = 3
dim = 8
train_per_class = 30
test_per_class = 10
"#,
            dir.display()
        );
        ExperimentConfig::from_toml_str(&text).unwrap()
    }

    fn files(dir: &Path) -> Vec<String> {
        let mut v: Vec<String> =
            fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
        v.sort();
        v
    }

    #[test]
    fn full_pipeline_artifacts() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = config(tmp.path());
        let data = load_data(&cfg).unwrap();
        assert!(matches!(load_t_sa(&cfg, 3), Err(Error::NotFound { .. })));
        let sa = self_analyze(&cfg, &data, 3, true).unwrap();
        assert_eq!(files(&sa.dir), ["agreement.json", "config.toml", "metrics.csv", "summary.json", "t_sa.ckpt"]);
        let d = distill(&cfg, &data, 3).unwrap();
        assert_eq!(
            files(&d.dir),
            ["config.toml", "metrics.csv", "student.ckpt", "student_stripped.ckpt", "summary.json"]
        );
        assert!(d.summary.loss_decomposition.contains_key("l_en"));
        assert!(!d.summary.loss_decomposition.contains_key("lh_nk"));
        assert_eq!(d.summary.test_accuracy, d.summary.stripped_test_accuracy);
        assert!(d.summary.teacher_checksum_unchanged);

        let ckpt = d.dir.join("student.ckpt");
        let out = tmp.path().join("eval");
        let r = evaluate(&cfg, &data, &ckpt, &ckpt, &out).unwrap();
        assert!(r.heads.iter().all(|h| h.similarity.l2 == 0.0));
        assert_eq!(r.heads.len(), 3);
        assert!(r.cka.iter().all(|c| c.value.is_some_and(|v| (v - 1.0).abs() < 1e-9)), "{:?}", r.cka);
        assert_eq!(r.correlation_abs_mean, 0.0);
        let noise_csv = fs::read_to_string(out.join("noise_student.csv")).unwrap();
        assert_eq!(noise_csv.lines().count(), 17);
        let report: Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
        assert_eq!(report["config_hash"], json!(cfg.hash()));
        assert_eq!(report["seeds"], json!([3]));

        let t = transfer(&cfg, &data, &ckpt, 3, &tmp.path().join("transfer")).unwrap();
        assert!(t.backbone_unchanged);
    }

    #[test]
    fn sweep_rejects_invalid_points_up_front() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = config(tmp.path());
        cfg.sweep = Some(crate::config::SweepSection {
            dim_ak: vec![2, 3, 4],
            dim_dk: vec![4, 6],
            ..Default::default()
        });
        let plan = plan_sweep(&cfg).unwrap();
        assert_eq!(plan.valid, [(2, 6), (3, 6)].map(|(a, d)| SweepPoint { dim_ak: a, dim_dk: d, tau_akb: 2.5, tau_dkb: 8.0 }));
        assert_eq!(plan.rejected.len(), 4);
        cfg.sweep.as_mut().unwrap().axis = SweepAxis::Temperatures;
        let plan = plan_sweep(&cfg).unwrap();
        assert_eq!(plan.valid.len(), 24);
        assert_eq!((plan.rejected[0].0.tau_akb, plan.rejected[0].0.tau_dkb), (4.0, 4.0));
    }

    #[test]
    fn sweep_runs_valid_points() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = config(tmp.path());
        cfg.sweep = Some(crate::config::SweepSection { dim_ak: vec![2, 4], dim_dk: vec![6], ..Default::default() });
        let data = load_data(&cfg).unwrap();
        let (plan, rows) = sweep(&cfg, &data).unwrap();
        assert_eq!(rows.len(), plan.valid.len());
        assert_eq!(rows.len(), 1);
        let csv = fs::read_to_string(tmp.path().join("sweep/sweep.csv")).unwrap();
        assert_eq!(csv.lines().count(), 2);
    }
}
