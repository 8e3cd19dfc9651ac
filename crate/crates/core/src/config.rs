//! TOML experiment configuration.
//!
//! One file describes the dataset, the teacher, the granularity heads and any
//! of the pipeline stages. A stage runs when its table is present. Every
//! problem is reported at once, before any training starts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Augment, DatasetSource, Normalization, SplitConfig};
use crate::distill::{DistillScheme, DistillTemperatures, HOOK_NAMES};
use crate::error::{Error, Result};
use crate::eval::CkaKernel;
use crate::math::{Temperature, TermWeights};
use crate::model::{validate_spec, BackboneArch, GranularitySpec};
use crate::self_analyze::validate_branch_temperatures;
use crate::train::TrainSchedule;

/// Desk-scale schedule multiplier: 60 → 10 branch epochs, 240 → 40 student epochs.
pub const DESK_SCALE: f64 = 1.0 / 6.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Multiplier applied to the full-length default schedules before overrides.
    #[serde(default = "default_scale")]
    pub scale: f64,
    pub dataset: DatasetSection,
    pub teacher: TeacherSection,
    pub granularity: GranularitySection,
    pub self_analyze: Option<SelfAnalyzeSection>,
    pub student: Option<StudentSection>,
    pub distill: Option<DistillSection>,
    pub evaluate: Option<EvaluateSection>,
    pub sweep: Option<SweepSection>,
    pub transfer: Option<TransferSection>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_scale() -> f64 {
    DESK_SCALE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub source: DatasetSource,
    #[serde(default)]
    pub split: SplitConfig,
    pub normalization: Option<Normalization>,
    #[serde(default)]
    pub augment: Augment,
}

/// Optional per-field overrides on top of a stage's default schedule.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleOverrides {
    pub initial_lr: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub lr_decay_factor: Option<f64>,
    pub milestones: Option<Vec<usize>>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub grad_clip: Option<f64>,
}

impl ScheduleOverrides {
    /// Scales `base` by `scale`, then applies the explicit overrides verbatim.
    pub fn resolve(&self, base: TrainSchedule, scale: f64) -> Result<TrainSchedule> {
        let mut s = base.scaled(scale)?;
        if let Some(v) = self.initial_lr {
            s.initial_lr = v;
        }
        if let Some(v) = self.momentum {
            s.momentum = v;
        }
        if let Some(v) = self.weight_decay {
            s.weight_decay = v;
        }
        if let Some(v) = self.lr_decay_factor {
            s.lr_decay_factor = v;
        }
        if let Some(v) = &self.milestones {
            s.milestones = v.clone();
        }
        if let Some(v) = self.epochs {
            s.epochs = v;
            if self.milestones.is_none() {
                s.milestones.retain(|&m| m < v);
            }
        }
        if let Some(v) = self.batch_size {
            s.batch_size = v;
        }
        if self.grad_clip.is_some() {
            s.grad_clip = self.grad_clip;
        }
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSection {
    pub arch: BackboneArch,
    /// Pretrained teacher; `{seed}` is replaced by the run seed.
    pub checkpoint: Option<PathBuf>,
    /// Supervised pretraining when no checkpoint exists.
    #[serde(default)]
    pub schedule: ScheduleOverrides,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GranularitySection {
    pub dim_ak: usize,
    pub dim_dk: usize,
    #[serde(default = "default_tau_akb")]
    pub tau_akb: f64,
    #[serde(default = "default_tau_dkb")]
    pub tau_dkb: f64,
}

fn default_tau_akb() -> f64 {
    2.5
}

fn default_tau_dkb() -> f64 {
    8.0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelfAnalyzeSection {
    #[serde(default)]
    pub schedule: ScheduleOverrides,
    #[serde(default)]
    pub cache_features: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentSection {
    pub arch: BackboneArch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSection {
    #[serde(default = "default_scheme")]
    pub scheme: DistillScheme,
    #[serde(default = "default_hook")]
    pub hook: String,
    /// Adds ground-truth cross-entropy to the hkd hook.
    #[serde(default = "yes")]
    pub include_ce: bool,
    pub tau_ak: Option<f64>,
    pub tau_nk: Option<f64>,
    pub tau_dk: Option<f64>,
    #[serde(default)]
    pub weights: TermWeights,
    #[serde(default)]
    pub schedule: ScheduleOverrides,
    /// Self-analyzed teacher; `{seed}` is replaced by the run seed.
    pub teacher_checkpoint: Option<PathBuf>,
}

fn default_scheme() -> DistillScheme {
    DistillScheme::Se
}

fn default_hook() -> String {
    "hkd".into()
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    pub noise_sigmas: Option<Vec<f64>>,
    #[serde(default)]
    pub noise_seed: u64,
    #[serde(default = "default_kernel")]
    pub cka_kernel: CkaKernel,
    /// Samples used for CKA (the kernel matrices are N × N).
    #[serde(default = "default_cka_samples")]
    pub cka_samples: usize,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self { noise_sigmas: None, noise_seed: 0, cka_kernel: default_kernel(), cka_samples: default_cka_samples() }
    }
}

fn default_kernel() -> CkaKernel {
    CkaKernel::Rbf
}

fn default_cka_samples() -> usize {
    500
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Dims,
    Temperatures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default = "default_axis")]
    pub axis: SweepAxis,
    #[serde(default = "default_sweep_ak_dims")]
    pub dim_ak: Vec<usize>,
    #[serde(default = "default_sweep_dk_dims")]
    pub dim_dk: Vec<usize>,
    #[serde(default = "default_sweep_tau_akb")]
    pub tau_akb: Vec<f64>,
    #[serde(default = "default_sweep_tau_dkb")]
    pub tau_dkb: Vec<f64>,
    /// Seeds averaged per grid point; defaults to the first two run seeds.
    pub seeds: Option<Vec<u64>>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            axis: default_axis(),
            dim_ak: default_sweep_ak_dims(),
            dim_dk: default_sweep_dk_dims(),
            tau_akb: default_sweep_tau_akb(),
            tau_dkb: default_sweep_tau_dkb(),
            seeds: None,
        }
    }
}

fn default_axis() -> SweepAxis {
    SweepAxis::Dims
}

pub fn default_sweep_ak_dims() -> Vec<usize> {
    vec![16, 32, 64, 100]
}

pub fn default_sweep_dk_dims() -> Vec<usize> {
    vec![100, 160, 200, 256, 512]
}

pub fn default_sweep_tau_akb() -> Vec<f64> {
    vec![1.5, 2.0, 2.5, 3.0, 4.0]
}

pub fn default_sweep_tau_dkb() -> Vec<f64> {
    vec![4.0, 6.0, 8.0, 10.0, 15.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSection {
    pub target: DatasetSection,
    #[serde(default)]
    pub schedule: ScheduleOverrides,
}

/// Replaces `{seed}` in a configured path.
pub fn seeded_path(path: &Path, seed: u64) -> PathBuf {
    PathBuf::from(path.to_string_lossy().replace("{seed}", &seed.to_string()))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::NotFound { path: path.to_path_buf() })
            }
            Err(e) => return Err(e.into()),
        };
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form, so formatting does not matter.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.dataset.source.class_count()
    }

    pub fn spec(&self) -> GranularitySpec {
        GranularitySpec {
            dim_ak: self.granularity.dim_ak,
            num_classes: self.num_classes(),
            dim_dk: self.granularity.dim_dk,
        }
    }

    pub fn branch_temperatures(&self) -> Result<(Temperature, Temperature)> {
        validate_branch_temperatures(self.granularity.tau_akb, self.granularity.tau_dkb)?;
        Ok((Temperature::new(self.granularity.tau_akb)?, Temperature::new(self.granularity.tau_dkb)?))
    }

    pub fn teacher_schedule(&self) -> Result<TrainSchedule> {
        self.teacher.schedule.resolve(TrainSchedule::student(), self.scale)
    }

    pub fn self_analyze_schedule(&self) -> Result<TrainSchedule> {
        let section = self.self_analyze.clone().unwrap_or_default();
        section.schedule.resolve(TrainSchedule::teacher_branches(), self.scale)
    }

    pub fn distill_section(&self) -> Result<&DistillSection> {
        self.distill.as_ref().ok_or_else(|| Error::Config("the [distill] table is missing".into()))
    }

    pub fn student_arch(&self) -> Result<&BackboneArch> {
        self.student
            .as_ref()
            .map(|s| &s.arch)
            .ok_or_else(|| Error::Config("the [student] table is missing".into()))
    }

    pub fn distill_schedule(&self) -> Result<TrainSchedule> {
        self.distill_section()?.schedule.resolve(TrainSchedule::student(), self.scale)
    }

    /// Explicit temperatures, falling back to the branch temperatures and 4.0.
    pub fn distill_temperatures(&self) -> Result<DistillTemperatures> {
        let d = self.distill_section()?;
        let (a, b) = self.branch_temperatures()?;
        let base = DistillTemperatures::from_branches(a, b);
        Ok(DistillTemperatures {
            tau_ak: d.tau_ak.map(Temperature::new).transpose()?.unwrap_or(base.tau_ak),
            tau_nk: d.tau_nk.map(Temperature::new).transpose()?.unwrap_or(base.tau_nk),
            tau_dk: d.tau_dk.map(Temperature::new).transpose()?.unwrap_or(base.tau_dk),
        })
    }

    /// Checks every field and reports all problems together.
    pub fn validate(&self) -> Result<()> {
        let mut problems: Vec<String> = Vec::new();
        let mut check = |field: &str, r: Result<()>| {
            if let Err(e) = r {
                problems.push(format!("{field}: {e}"));
            }
        };
        if self.seeds.is_empty() {
            check("seeds", Err(Error::invalid("at least one seed is required")));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            check("scale", Err(Error::invalid(format!("must be positive, got {}", self.scale))));
        }
        let shape = self.dataset.source.shape();
        check("dataset.split.val_fraction", {
            let f = self.dataset.split.val_fraction;
            if (0.0..1.0).contains(&f) { Ok(()) } else { Err(Error::invalid(format!("must be in [0, 1), got {f}"))) }
        });
        if let Some(n) = &self.dataset.normalization {
            check("dataset.normalization", n.check(shape.channels));
        }
        let arch_fits = |arch: &BackboneArch| -> Result<()> {
            arch.validate()?;
            if arch.input_len() != shape.len() {
                return Err(Error::invalid(format!(
                    "architecture expects {} input values but the dataset provides {}",
                    arch.input_len(),
                    shape.len()
                )));
            }
            Ok(())
        };
        check("teacher.arch", arch_fits(&self.teacher.arch));
        check("teacher.schedule", self.teacher_schedule().map(|_| ()));
        check("granularity", validate_spec(&self.spec()));
        check("granularity", validate_branch_temperatures(self.granularity.tau_akb, self.granularity.tau_dkb));
        if self.self_analyze.is_some() {
            check("self_analyze.schedule", self.self_analyze_schedule().map(|_| ()));
        }
        if let Some(s) = &self.student {
            check("student.arch", arch_fits(&s.arch));
        }
        if let Some(d) = &self.distill {
            if self.student.is_none() {
                check("student", Err(Error::invalid("the [distill] stage needs a [student] table")));
            }
            if !HOOK_NAMES.contains(&d.hook.to_ascii_lowercase().as_str()) {
                check(
                    "distill.hook",
                    Err(Error::invalid(format!("unknown hook '{}'; valid options: {{{}}}", d.hook, HOOK_NAMES.join(", ")))),
                );
            }
            check("distill.temperatures", self.distill_temperatures().map(|_| ()));
            check("distill.schedule", self.distill_schedule().map(|_| ()));
            let w = d.weights;
            if [w.ak, w.nk, w.dk, w.en, w.base].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                check("distill.weights", Err(Error::invalid("weights must be finite and >= 0")));
            }
        }
        if let Some(e) = &self.evaluate {
            if let Some(s) = &e.noise_sigmas {
                let ok = s.first() == Some(&0.0) && s.windows(2).all(|w| w[0] < w[1]) && s.iter().all(|v| *v >= 0.0);
                if !ok {
                    check(
                        "evaluate.noise_sigmas",
                        Err(Error::invalid("must start at 0, be strictly increasing and non-negative")),
                    );
                }
            }
            if e.cka_samples < 2 {
                check("evaluate.cka_samples", Err(Error::invalid("needs at least 2 samples")));
            }
        }
        if let Some(t) = &self.transfer {
            let target_shape = t.target.source.shape();
            if target_shape != shape {
                check(
                    "transfer.target",
                    Err(Error::invalid(format!("target images {target_shape:?} differ from source images {shape:?}"))),
                );
            }
            check("transfer.schedule", t.schedule.resolve(TrainSchedule::teacher_branches(), self.scale).map(|_| ()));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seeds = [1, 2]
out_dir = "out"

[dataset.source]
kind = "blobs"
classes = 4
dim = 8

[teacher]
arch = { kind = "mlp", input_dim = 8, hidden = [16, 16] }

[granularity]
dim_ak = 2
dim_dk = 8

[self_analyze]
cache_features = true

[student]
arch = { kind = "mlp", input_dim = 8, hidden = [8, 8] }

[distill]
scheme = "gwd"
schedule = { epochs = 5, milestones = [3] }
"#;

    #[test]
    fn parses_and_resolves_defaults() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.scale, DESK_SCALE);
        assert_eq!(cfg.spec(), GranularitySpec { dim_ak: 2, num_classes: 4, dim_dk: 8 });
        let sa = cfg.self_analyze_schedule().unwrap();
        assert_eq!((sa.epochs, sa.milestones.clone(), sa.initial_lr), (10, vec![5, 8], 0.1));
        let d = cfg.distill_schedule().unwrap();
        assert_eq!((d.epochs, d.milestones.clone()), (5, vec![3]));
        let t = cfg.distill_temperatures().unwrap();
        assert_eq!((t.tau_ak.get(), t.tau_nk.get(), t.tau_dk.get()), (2.5, 4.0, 8.0));
        assert_eq!(cfg.distill.as_ref().unwrap().hook, "hkd");
    }

    #[test]
    fn hash_ignores_formatting_but_not_values() {
        let a = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        let b = ExperimentConfig::from_toml_str(&MINIMAL.replace("seeds = [1, 2]", "seeds=[1,2]   # same")).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig::from_toml_str(&MINIMAL.replace("seeds = [1, 2]", "seeds = [1, 3]")).unwrap();
        assert_ne!(a.hash(), c.hash());
        let round = ExperimentConfig::from_toml_str(&a.to_toml_string().unwrap()).unwrap();
        assert_eq!(round, a);
    }

    #[test]
    fn reports_every_problem() {
        let bad = MINIMAL
            .replace("dim_ak = 2", "dim_ak = 4")
            .replace("[granularity]", "[granularity]\ntau_akb = 9.0")
            .replace("input_dim = 8, hidden = [8, 8]", "input_dim = 7, hidden = [8, 8]");
        let e = ExperimentConfig::from_toml_str(&bad).unwrap_err();
        let msg = e.to_string();
        assert!(matches!(e, Error::Config(_)));
        assert!(msg.contains("dim_ak < C"), "{msg}");
        assert!(msg.contains("tau_akb < tau_dkb"), "{msg}");
        assert!(msg.contains("student.arch"), "{msg}");
    }

    #[test]
    fn unknown_fields_and_hooks_rejected() {
        assert!(ExperimentConfig::from_toml_str(&format!("{MINIMAL}\nbogus = 1")).is_err());
        let e = ExperimentConfig::from_toml_str(&MINIMAL.replace("scheme = \"gwd\"", "hook = \"crd\"")).unwrap_err();
        assert!(e.to_string().contains("{null, hkd}"), "{e}");
    }

    #[test]
    fn seeded_paths() {
        assert_eq!(seeded_path(Path::new("runs/s{seed}/t.ckpt"), 7), PathBuf::from("runs/s7/t.ckpt"));
    }
}
