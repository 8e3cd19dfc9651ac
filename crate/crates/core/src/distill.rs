//! Student training against a self-analyzed teacher.
//!
//! `Gwd` distills each of the three heads separately. `Se` distills the
//! abstracted and detailed heads directly and the native head against the
//! average of the teacher's two branches and its native logits. `Plain`
//! trains on the base hook alone and serves as the baseline arm.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{shuffled_batches, Augment, DatasetSplit};
use crate::error::{Error, Result};
use crate::math::{
    cross_entropy_with_grad, gwd_terms, hkd_loss_with_grad, se_terms, Granularity, HeadMap, LabelBatch,
    SchemeLoss, Temperature, TermWeights,
};
use crate::model::{GranularityOutputs, Part, StudentBundle, TeacherBundle};
use crate::train::{check_finite, correct, Averages, MetricsRecord, Sgd, TrainSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillScheme {
    Gwd,
    Se,
    Plain,
}

impl DistillScheme {
    pub const ALL: [DistillScheme; 3] = [DistillScheme::Gwd, DistillScheme::Se, DistillScheme::Plain];

    pub fn name(self) -> &'static str {
        match self {
            DistillScheme::Gwd => "gwd",
            DistillScheme::Se => "se",
            DistillScheme::Plain => "plain",
        }
    }
}

impl fmt::Display for DistillScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistillScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s.to_ascii_lowercase()).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|v| v.name()).collect();
            Error::invalid(format!("unknown scheme '{s}'; valid options: {{{}}}", names.join(", ")))
        })
    }
}

/// Per-head distillation temperatures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillTemperatures {
    pub tau_ak: Temperature,
    pub tau_nk: Temperature,
    pub tau_dk: Temperature,
}

impl DistillTemperatures {
    pub const DEFAULT_TAU_NK: f64 = 4.0;

    pub fn new(tau_ak: f64, tau_nk: f64, tau_dk: f64) -> Result<Self> {
        Ok(Self { tau_ak: Temperature::new(tau_ak)?, tau_nk: Temperature::new(tau_nk)?, tau_dk: Temperature::new(tau_dk)? })
    }

    /// Encoder heads reuse the branch temperatures; the native head uses 4.0.
    pub fn from_branches(tau_akb: Temperature, tau_dkb: Temperature) -> Self {
        Self { tau_ak: tau_akb, tau_nk: Temperature::new(Self::DEFAULT_TAU_NK).expect("positive"), tau_dk: tau_dkb }
    }

    pub fn as_map(&self) -> HeadMap<Temperature> {
        [(Granularity::Ak, self.tau_ak), (Granularity::Nk, self.tau_nk), (Granularity::Dk, self.tau_dk)]
            .into_iter()
            .collect()
    }
}

/// Value and per-head gradients of a base distillation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct HookLoss {
    pub value: f64,
    /// Named components summing to `value`, for metrics.
    pub parts: Vec<(String, f64)>,
    pub grads: HeadMap<Array2<f64>>,
}

/// A conventional distillation loss plugged in next to the granularity terms.
pub trait BaseKdHook: Send + Sync {
    fn name(&self) -> &str;

    fn loss(&self, teacher: &GranularityOutputs, student: &GranularityOutputs, labels: &LabelBatch) -> Result<HookLoss>;
}

/// Contributes nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullHook;

impl BaseKdHook for NullHook {
    fn name(&self) -> &str {
        "null"
    }

    fn loss(&self, _: &GranularityOutputs, _: &GranularityOutputs, _: &LabelBatch) -> Result<HookLoss> {
        Ok(HookLoss { value: 0.0, parts: vec![], grads: HeadMap::new() })
    }
}

/// Tempered KL between the native heads, optionally plus cross-entropy on the
/// student's native head. The teacher signal is its native logits.
#[derive(Debug, Clone, Copy)]
pub struct HkdHook {
    pub tau_nk: Temperature,
    pub include_ce: bool,
}

impl BaseKdHook for HkdHook {
    fn name(&self) -> &str {
        "hkd"
    }

    fn loss(&self, teacher: &GranularityOutputs, student: &GranularityOutputs, labels: &LabelBatch) -> Result<HookLoss> {
        let (kd, mut grad) = hkd_loss_with_grad(&teacher.f_nk, &student.f_nk, self.tau_nk)?;
        let mut parts = vec![("hook_kd".to_string(), kd)];
        let mut value = kd;
        if self.include_ce {
            let (ce, g) = cross_entropy_with_grad(&student.f_nk, labels)?;
            grad += &g;
            value += ce;
            parts.push(("hook_ce".to_string(), ce));
        }
        Ok(HookLoss { value, parts, grads: [(Granularity::Nk, grad)].into_iter().collect() })
    }
}

/// HKD on the native heads plus ground-truth cross-entropy.
pub fn hkd_reference_hook(tau_nk: Temperature) -> HkdHook {
    HkdHook { tau_nk, include_ce: true }
}

pub const HOOK_NAMES: [&str; 2] = ["null", "hkd"];

/// Looks up a hook by name.
pub fn hook_by_name(name: &str, tau_nk: Temperature, include_ce: bool) -> Result<Box<dyn BaseKdHook>> {
    match name.to_ascii_lowercase().as_str() {
        "null" => Ok(Box::new(NullHook)),
        "hkd" => Ok(Box::new(HkdHook { tau_nk, include_ce })),
        _ => Err(Error::invalid(format!("unknown hook '{name}'; valid options: {{{}}}", HOOK_NAMES.join(", ")))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub scheme: DistillScheme,
    pub temps: DistillTemperatures,
    pub schedule: TrainSchedule,
    pub seed: u64,
    #[serde(default)]
    pub weights: TermWeights,
    #[serde(default)]
    pub augment: Augment,
}

/// Full objective for one batch: scheme terms plus the hook.
#[derive(Debug, Clone)]
pub struct Objective {
    pub scheme: SchemeLoss,
    pub hook: HookLoss,
    pub total: f64,
}

impl Objective {
    /// Named values: every scheme term, `base_kd`, hook parts and `loss_total`.
    pub fn decomposition(&self) -> Vec<(String, f64)> {
        let mut v: Vec<(String, f64)> =
            self.scheme.terms.iter().map(|t| (t.kind.name().to_string(), t.value)).collect();
        v.push(("base_kd".into(), self.hook.value));
        v.extend(self.hook.parts.iter().cloned());
        v.push(("loss_total".into(), self.total));
        v
    }

    /// Gradients per student head of the weighted total.
    pub fn head_grads(&self, w: &TermWeights) -> HeadMap<Array2<f64>> {
        let mut grads = self.scheme.head_grads(w);
        for (k, g) in &self.hook.grads {
            let scaled = g * w.base;
            grads.entry(*k).and_modify(|acc| *acc += &scaled).or_insert(scaled);
        }
        grads
    }
}

/// Evaluates the weighted objective of `scheme` on one batch.
pub fn objective(
    scheme: DistillScheme,
    teacher: &GranularityOutputs,
    student: &GranularityOutputs,
    labels: &LabelBatch,
    temps: &DistillTemperatures,
    hook: &dyn BaseKdHook,
    weights: &TermWeights,
) -> Result<Objective> {
    let hook_loss = hook.loss(teacher, student, labels)?;
    if !(hook_loss.value.is_finite() && hook_loss.value >= 0.0) {
        return Err(Error::NumericFailure(format!(
            "hook '{}' returned {} (must be finite and >= 0)",
            hook.name(),
            hook_loss.value
        )));
    }
    let temps = temps.as_map();
    let scheme_loss = match scheme {
        DistillScheme::Gwd => gwd_terms(&teacher.heads(), &student.heads(), &temps, hook_loss.value)?,
        DistillScheme::Se => {
            let branches = teacher
                .branches()
                .ok_or_else(|| Error::invalid("stable excitation needs teacher branch outputs"))?;
            se_terms(&teacher.heads(), &branches, &student.heads(), &temps, hook_loss.value)?
        }
        DistillScheme::Plain => SchemeLoss { terms: vec![], base_kd: hook_loss.value },
    };
    let total = scheme_loss.total_weighted(weights);
    Ok(Objective { scheme: scheme_loss, hook: hook_loss, total })
}

#[derive(Debug, Clone)]
pub struct DistillRun {
    pub student: StudentBundle,
    pub records: Vec<MetricsRecord>,
    /// Total objective on the validation split, one entry per epoch.
    pub val_losses: Vec<f64>,
}

fn check_pairing(t_sa: &TeacherBundle, student: &StudentBundle) -> Result<()> {
    let all = [Part::Backbone, Part::Classifier, Part::Ake, Part::Dke, Part::AkAdapter, Part::DkAdapter];
    if let Some(p) = all.iter().find(|&&p| !t_sa.is_frozen(p)) {
        return Err(Error::invalid(format!("teacher part {p} is not frozen; run self-analysis first")));
    }
    let (ts, ss) = (t_sa.spec(), student.spec());
    if ts != ss {
        return Err(Error::invalid(format!(
            "teacher heads (ak {}, nk {}, dk {}) do not match student heads (ak {}, nk {}, dk {})",
            ts.dim_ak, ts.num_classes, ts.dim_dk, ss.dim_ak, ss.num_classes, ss.dim_dk
        )));
    }
    Ok(())
}

/// Mean objective decomposition and native-head accuracy over a split.
pub fn evaluate_objective(
    t_sa: &TeacherBundle,
    student: &StudentBundle,
    split: &DatasetSplit,
    cfg: &DistillConfig,
    hook: &dyn BaseKdHook,
) -> Result<(Vec<(String, f64)>, f64)> {
    if split.is_empty() {
        return Err(Error::invalid(format!("split '{}' is empty", split.name)));
    }
    let mut avg = Averages::default();
    let mut hits = 0;
    for idx in split.sequential_batches(256) {
        let (x, y) = split.batch(&idx);
        let t = t_sa.forward(&x)?;
        let s = student.forward(&x)?;
        let obj = objective(cfg.scheme, &t, &s, &y, &cfg.temps, hook, &cfg.weights)?;
        hits += s.f_nk.argmax().iter().zip(y.as_slice()).filter(|(a, b)| a == b).count();
        avg.add(&obj.decomposition(), idx.len());
    }
    let mut rec = MetricsRecord::new(0, 0.0);
    avg.into_record(&mut rec, "");
    Ok((rec.values.into_iter().collect(), hits as f64 / split.len() as f64))
}

/// Trains `student` against the frozen `t_sa`. The teacher is only borrowed,
/// so its parameters cannot change.
pub fn run_distillation(
    t_sa: &TeacherBundle,
    mut student: StudentBundle,
    hook: &dyn BaseKdHook,
    cfg: &DistillConfig,
    train: &DatasetSplit,
    val: &DatasetSplit,
) -> Result<DistillRun> {
    check_pairing(t_sa, &student)?;
    cfg.schedule.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("distillation needs non-empty train and validation splits"));
    }
    let schedule = &cfg.schedule;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(schedule);
    let mut records = Vec::with_capacity(schedule.epochs);
    let mut val_losses = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        let lr = schedule.lr_at(epoch);
        let mut avg = Averages::default();
        let mut hits = 0;
        for idx in shuffled_batches(train.len(), schedule.batch_size, &mut rng) {
            let (x, y) = train.batch(&idx);
            let x = cfg.augment.apply(&x, train.shape, &mut rng);
            let t_out = t_sa.forward(&x)?;
            let (s_out, pass) = student.forward_train(&x)?;
            let obj = objective(cfg.scheme, &t_out, &s_out, &y, &cfg.temps, hook, &cfg.weights)
                .map_err(|e| match e {
                    Error::NumericFailure(m) => Error::NumericFailure(format!("epoch {epoch}: {m}")),
                    other => other,
                })?;
            check_finite(obj.total, "distillation loss", epoch)?;
            let logits = s_out.f_nk.values().mapv(|v| v as f32);
            hits += correct(&logits, y.as_slice());
            student.backward(pass, &obj.head_grads(&cfg.weights));
            opt.step(student.named_params_mut(), lr);
            avg.add(&obj.decomposition(), idx.len());
        }
        let mut rec = MetricsRecord::new(epoch, lr);
        avg.into_record(&mut rec, "train_");
        rec.set("train_acc", hits as f64 / train.len() as f64);
        let (val_terms, val_acc) = evaluate_objective(t_sa, &student, val, cfg, hook)?;
        for (k, v) in &val_terms {
            rec.set(format!("val_{k}"), *v);
        }
        let val_total = rec.get("val_loss_total").expect("total is always recorded");
        check_finite(val_total, "validation loss", epoch)?;
        rec.set("val_acc", val_acc);
        val_losses.push(val_total);
        records.push(rec);
    }
    Ok(DistillRun { student, records, val_losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{ensemble_average, hkd_loss, LogitsBatch, TermKind};
    use crate::model::{attach_branches, BackboneArch, GranularitySpec, Network};
    use ndarray::array;

    fn outputs(ak: Array2<f64>, nk: Array2<f64>, dk: Array2<f64>, branches: Option<(Array2<f64>, Array2<f64>)>) -> GranularityOutputs {
        let (f_akb, f_dkb) = match branches {
            Some((a, d)) => (Some(LogitsBatch::new(a).unwrap()), Some(LogitsBatch::new(d).unwrap())),
            None => (None, None),
        };
        GranularityOutputs {
            f_ak: LogitsBatch::new(ak).unwrap(),
            f_nk: LogitsBatch::new(nk).unwrap(),
            f_dk: LogitsBatch::new(dk).unwrap(),
            f_akb,
            f_dkb,
        }
    }

    fn temps() -> DistillTemperatures {
        DistillTemperatures::new(2.0, 4.0, 8.0).unwrap()
    }

    #[test]
    fn names_and_errors() {
        assert_eq!("SE".parse::<DistillScheme>().unwrap(), DistillScheme::Se);
        let e = "crd".parse::<DistillScheme>().unwrap_err().to_string();
        assert!(e.contains("gwd") && e.contains("se"), "{e}");
        let tau = Temperature::new(4.0).unwrap();
        let e = hook_by_name("crd", tau, true).err().unwrap().to_string();
        assert!(e.contains("{null, hkd}"), "{e}");
        assert_eq!(hook_by_name("hkd", tau, true).unwrap().name(), "hkd");
        let d = DistillTemperatures::from_branches(Temperature::new(2.5).unwrap(), Temperature::new(8.0).unwrap());
        assert_eq!((d.tau_ak.get(), d.tau_nk.get(), d.tau_dk.get()), (2.5, 4.0, 8.0));
    }

    #[test]
    fn gwd_zero_at_match_with_null_hook() {
        let t = outputs(
            array![[1.0, -1.0]],
            array![[0.3, 0.2, -0.5]],
            array![[1.0, 2.0, 3.0, 4.0]],
            Some((array![[0.0, 1.0, 0.0]], array![[2.0, 0.0, 0.0]])),
        );
        let s = GranularityOutputs { f_akb: None, f_dkb: None, ..t.clone() };
        let y = LabelBatch::new(vec![0]);
        let o = objective(DistillScheme::Gwd, &t, &s, &y, &temps(), &NullHook, &TermWeights::default()).unwrap();
        assert!(o.total.abs() < 1e-6);
    }

    #[test]
    fn se_ensemble_reduces_to_native_when_branches_match() {
        let nk = array![[0.3, 0.2, -0.5], [1.0, -2.0, 0.1]];
        let t = outputs(array![[1.0, -1.0], [0.0, 0.5]], nk.clone(), Array2::zeros((2, 4)), Some((nk.clone(), nk.clone())));
        let s = outputs(array![[0.0, 0.0], [1.0, 1.0]], array![[0.1, 0.0, 0.0], [0.0, 0.3, 0.0]], Array2::ones((2, 4)), None);
        let y = LabelBatch::new(vec![0, 2]);
        let o = objective(DistillScheme::Se, &t, &s, &y, &temps(), &NullHook, &TermWeights::default()).unwrap();
        let expected = hkd_loss(&t.f_nk, &s.f_nk, Temperature::new(4.0).unwrap()).unwrap();
        assert_eq!(o.scheme.value(TermKind::Ensemble).unwrap(), expected);
        let fe = ensemble_average(t.f_akb.as_ref().unwrap(), &t.f_nk, t.f_dkb.as_ref().unwrap()).unwrap();
        assert!((fe.values() - &nk).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn hook_decomposes_into_kd_and_ce() {
        let e = std::f64::consts::E;
        let t = outputs(array![[0.0, 1.0]], array![[1.0, 0.0]], array![[0.0, 0.0, 0.0]], None);
        let s = outputs(array![[0.0, 1.0]], array![[0.0, 1.0]], array![[0.0, 0.0, 0.0]], None);
        let y = LabelBatch::new(vec![1]);
        let h = hkd_reference_hook(Temperature::new(1.0).unwrap()).loss(&t, &s, &y).unwrap();
        assert!((h.parts[0].1 - (e - 1.0) / (e + 1.0)).abs() < 1e-12);
        assert!((h.parts[1].1 - (1.0 + 1.0 / e).ln()).abs() < 1e-12);
        assert!((h.parts[0].1 + h.parts[1].1 - h.value).abs() < 1e-15);

        // uniform student against a matching uniform teacher: only the CE term remains
        let flat = outputs(array![[0.0, 1.0]], array![[0.0, 0.0]], array![[0.0, 0.0, 0.0]], None);
        let h = hkd_reference_hook(Temperature::new(4.0).unwrap()).loss(&flat, &flat, &y).unwrap();
        assert!((h.value - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn scheme_separation_and_hook_isolation() {
        let t = outputs(
            array![[1.0, -1.0], [0.2, 0.4]],
            array![[0.3, 0.2, -0.5], [1.0, 0.0, 0.0]],
            array![[1.0, 2.0, 3.0, 4.0], [0.0, 0.0, 1.0, 0.0]],
            Some((array![[0.0, 1.0, 0.0], [0.5, 0.5, 0.0]], array![[2.0, 0.0, 0.0], [0.0, 0.0, 1.0]])),
        );
        let s = outputs(
            array![[0.5, 0.5], [0.0, 1.0]],
            array![[0.0, 0.2, 0.1], [0.0, 1.0, 0.0]],
            array![[0.0, 1.0, 0.0, 1.0], [1.0, 0.0, 0.0, 0.0]],
            None,
        );
        let y = LabelBatch::new(vec![0, 1]);
        let w = TermWeights::default();
        let g = objective(DistillScheme::Gwd, &t, &s, &y, &temps(), &NullHook, &w).unwrap();
        let e = objective(DistillScheme::Se, &t, &s, &y, &temps(), &NullHook, &w).unwrap();
        assert_eq!(g.scheme.value(TermKind::HeadAk), e.scheme.value(TermKind::HeadAk));
        assert_eq!(g.scheme.value(TermKind::HeadDk), e.scheme.value(TermKind::HeadDk));
        assert!(g.scheme.value(TermKind::HeadNk).is_some() && g.scheme.value(TermKind::Ensemble).is_none());
        assert!(e.scheme.value(TermKind::Ensemble).is_some() && e.scheme.value(TermKind::HeadNk).is_none());

        let hook = hkd_reference_hook(Temperature::new(4.0).unwrap());
        let gh = objective(DistillScheme::Gwd, &t, &s, &y, &temps(), &hook, &w).unwrap();
        for (a, b) in g.scheme.terms.iter().zip(&gh.scheme.terms) {
            assert_eq!(a.value, b.value);
        }
        assert!((gh.total - g.total - gh.hook.value).abs() < 1e-12);
    }

    fn tiny_setup() -> (TeacherBundle, StudentBundle, DatasetSplit) {
        use crate::data::{load_dataset, DatasetSource, SplitConfig, VectorBlobs};
        let src = DatasetSource::Blobs(VectorBlobs { classes: 4, ..VectorBlobs::default() });
        let data = load_dataset(&src, None, &SplitConfig::default(), None).unwrap().train;
        let spec = GranularitySpec::new(2, 4, 8).unwrap();
        let net = Network::new(BackboneArch::mlp(8, [16, 16]), 4, 0).unwrap();
        let mut t = attach_branches(&net, spec, 1).unwrap();
        t.freeze_all();
        let s = StudentBundle::new(BackboneArch::mlp(8, [8, 8]), spec, 2).unwrap();
        (t, s, data)
    }

    fn cfg(scheme: DistillScheme) -> DistillConfig {
        DistillConfig {
            scheme,
            temps: temps(),
            schedule: TrainSchedule { epochs: 3, milestones: vec![2], batch_size: 32, ..TrainSchedule::student() },
            seed: 5,
            weights: TermWeights::default(),
            augment: Augment::default(),
        }
    }

    #[test]
    fn teacher_untouched_and_records_complete() {
        let (t, s, data) = tiny_setup();
        let before = t.checksum();
        let hook = hkd_reference_hook(Temperature::new(4.0).unwrap());
        let run = run_distillation(&t, s, &hook, &cfg(DistillScheme::Se), &data, &data).unwrap();
        assert_eq!(t.checksum(), before);
        assert_eq!(run.val_losses.len(), 3);
        let r = &run.records[0];
        for key in ["train_l_en", "train_lh_ak", "train_lh_dk", "val_loss_total", "val_acc", "train_hook_ce"] {
            assert!(r.get(key).is_some(), "missing {key}");
        }
        assert!(r.get("train_lh_nk").is_none());
    }

    #[test]
    fn rejects_unfrozen_teacher_and_mismatched_student() {
        let (t, s, data) = tiny_setup();
        let net = Network::new(BackboneArch::mlp(8, [16, 16]), 4, 0).unwrap();
        let open = attach_branches(&net, t.spec(), 1).unwrap();
        assert!(run_distillation(&open, s, &NullHook, &cfg(DistillScheme::Gwd), &data, &data).is_err());
        let other = StudentBundle::new(BackboneArch::mlp(8, [8, 8]), GranularitySpec::new(3, 4, 8).unwrap(), 2).unwrap();
        let e = run_distillation(&t, other, &NullHook, &cfg(DistillScheme::Gwd), &data, &data).unwrap_err();
        assert!(e.to_string().contains("do not match"), "{e}");
    }

    struct Exploding;

    impl BaseKdHook for Exploding {
        fn name(&self) -> &str {
            "exploding"
        }
        fn loss(&self, _: &GranularityOutputs, _: &GranularityOutputs, _: &LabelBatch) -> Result<HookLoss> {
            Ok(HookLoss { value: f64::NAN, parts: vec![], grads: HeadMap::new() })
        }
    }

    #[test]
    fn non_finite_hook_aborts() {
        let (t, s, data) = tiny_setup();
        let e = run_distillation(&t, s, &Exploding, &cfg(DistillScheme::Gwd), &data, &data).unwrap_err();
        assert!(matches!(e, Error::NumericFailure(_)), "{e}");
    }

    #[test]
    fn deterministic_under_seed() {
        let (t, s, data) = tiny_setup();
        let a = run_distillation(&t, s.clone(), &NullHook, &cfg(DistillScheme::Gwd), &data, &data).unwrap();
        let b = run_distillation(&t, s, &NullHook, &cfg(DistillScheme::Gwd), &data, &data).unwrap();
        assert_eq!(a.student.checksum(), b.student.checksum());
        assert_eq!(a.val_losses, b.val_losses);
    }
}
