//! Fits the teacher's abstracted and detailed branches to its own native
//! logits and the ground truth while the backbone and classifier stay frozen.

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{shuffled_batches, Augment, DatasetSplit};
use crate::error::{Error, Result};
use crate::math::{self_analyze_loss, self_analyze_loss_with_grad, LabelBatch, Temperature};
use crate::model::{to_logits, Part, TeacherBundle};
use crate::train::{check_finite, Averages, MetricsRecord, Sgd, TrainSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfAnalyzeConfig {
    pub tau_akb: Temperature,
    pub tau_dkb: Temperature,
    pub schedule: TrainSchedule,
    pub seed: u64,
    /// Compute the frozen flatten features once per run instead of per batch.
    /// Only honoured when augmentation is off.
    #[serde(default)]
    pub cache_features: bool,
    #[serde(default)]
    pub augment: Augment,
}

impl SelfAnalyzeConfig {
    pub fn new(tau_akb: f64, tau_dkb: f64, schedule: TrainSchedule, seed: u64) -> Result<Self> {
        let cfg = Self {
            tau_akb: Temperature::new(tau_akb)?,
            tau_dkb: Temperature::new(tau_dkb)?,
            schedule,
            seed,
            cache_features: false,
            augment: Augment::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Teacher defaults: τ_AKB = 2.5, τ_DKB = 8.0 with the 60-epoch schedule.
    pub fn teacher_defaults(seed: u64) -> Self {
        Self::new(2.5, 8.0, TrainSchedule::teacher_branches(), seed).expect("defaults are valid")
    }

    pub fn validate(&self) -> Result<()> {
        validate_branch_temperatures(self.tau_akb.get(), self.tau_dkb.get())?;
        self.schedule.validate()
    }
}

/// Requires `0 < τ_AKB < τ_DKB`.
pub fn validate_branch_temperatures(tau_akb: f64, tau_dkb: f64) -> Result<()> {
    Temperature::new(tau_akb)?;
    Temperature::new(tau_dkb)?;
    if tau_akb >= tau_dkb {
        return Err(Error::invalid(format!(
            "tau_akb < tau_dkb violated: tau_akb = {tau_akb}, tau_dkb = {tau_dkb}"
        )));
    }
    Ok(())
}

/// Fraction of samples where each branch's argmax equals the classifier's.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BranchAgreement {
    pub akb_agreement: f64,
    pub dkb_agreement: f64,
}

pub fn branch_agreement(bundle: &TeacherBundle, split: &DatasetSplit) -> Result<BranchAgreement> {
    if split.is_empty() {
        return Err(Error::invalid(format!("split '{}' is empty", split.name)));
    }
    let (mut akb, mut dkb) = (0usize, 0usize);
    for idx in split.sequential_batches(256) {
        let out = bundle.forward(&split.batch(&idx).0)?;
        let nk = out.f_nk.argmax();
        let count = |b: &Option<crate::math::LogitsBatch>| {
            b.as_ref().expect("teacher outputs carry branches").argmax().iter().zip(&nk).filter(|(a, b)| a == b).count()
        };
        akb += count(&out.f_akb);
        dkb += count(&out.f_dkb);
    }
    let n = split.len() as f64;
    Ok(BranchAgreement { akb_agreement: akb as f64 / n, dkb_agreement: dkb as f64 / n })
}

/// Sum of both branch objectives on a fixed batch.
pub fn branch_loss(
    bundle: &TeacherBundle,
    x: &Array2<f32>,
    y: &LabelBatch,
    tau_akb: Temperature,
    tau_dkb: Temperature,
) -> Result<f64> {
    let out = bundle.forward(x)?;
    let a = self_analyze_loss(&out.f_nk, out.f_akb.as_ref().expect("branches"), tau_akb, y)?;
    let d = self_analyze_loss(&out.f_nk, out.f_dkb.as_ref().expect("branches"), tau_dkb, y)?;
    Ok(a + d)
}

#[derive(Debug, Clone)]
pub struct SelfAnalysisRun {
    /// Fully frozen self-analyzed teacher.
    pub bundle: TeacherBundle,
    pub records: Vec<MetricsRecord>,
}

/// Trains both branches on `data`. Each batch takes one optimizer step on the
/// sum of the two branch objectives; the branches share no parameters, so
/// this equals updating them one after the other on the same batch.
pub fn run_self_analysis(
    mut teacher: TeacherBundle,
    data: &DatasetSplit,
    cfg: &SelfAnalyzeConfig,
) -> Result<SelfAnalysisRun> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("self-analysis needs a non-empty training split"));
    }
    if !(teacher.is_frozen(Part::Backbone) && teacher.is_frozen(Part::Classifier)) {
        return Err(Error::invalid("teacher backbone and classifier must be frozen"));
    }
    if [Part::Ake, Part::Dke, Part::AkAdapter, Part::DkAdapter].iter().any(|&p| teacher.is_frozen(p)) {
        return Err(Error::invalid("teacher branches are frozen; nothing to train"));
    }
    let (tau_a, tau_d) = (cfg.tau_akb, cfg.tau_dkb);
    let schedule = &cfg.schedule;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(schedule);
    let cached = if cfg.cache_features && cfg.augment.is_identity() {
        let parts = data
            .sequential_batches(256)
            .into_iter()
            .map(|idx| teacher.backbone().forward(&data.batch(&idx).0))
            .collect::<Result<Vec<_>>>()?;
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        Some(ndarray::concatenate(Axis(0), &views).expect("consistent widths"))
    } else {
        None
    };

    let mut records = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        let lr = schedule.lr_at(epoch);
        let mut avg = Averages::default();
        for idx in shuffled_batches(data.len(), schedule.batch_size, &mut rng) {
            let (x, y) = data.batch(&idx);
            let f = match &cached {
                Some(all) => all.select(Axis(0), &idx),
                None => teacher.backbone().forward(&cfg.augment.apply(&x, data.shape, &mut rng))?,
            };
            let nk = teacher.head(Part::Classifier).expect("classifier").forward(&f);
            let nk = to_logits(&nk, "classifier")?;
            let pass = teacher.branch_forward(&f);
            let (ta, ga) = self_analyze_loss_with_grad(&nk, &to_logits(&pass.akb, "ak branch")?, tau_a, &y)?;
            let (td, gd) = self_analyze_loss_with_grad(&nk, &to_logits(&pass.dkb, "dk branch")?, tau_d, &y)?;
            check_finite(ta.total() + td.total(), "self-analysis loss", epoch)?;
            teacher.branch_backward(&f, &pass, &ga.mapv(|v| v as f32), &gd.mapv(|v| v as f32))?;
            opt.step(teacher.trainable_params_mut(), lr);
            avg.add(
                &[
                    ("l_ga_akb".into(), ta.ga),
                    ("l_ce_akb".into(), ta.ce),
                    ("l_ga_dkb".into(), td.ga),
                    ("l_ce_dkb".into(), td.ce),
                ],
                idx.len(),
            );
        }
        let mut rec = MetricsRecord::new(epoch, lr);
        avg.into_record(&mut rec, "");
        let agree = branch_agreement(&teacher, data)?;
        rec.set("akb_agreement", agree.akb_agreement);
        rec.set("dkb_agreement", agree.dkb_agreement);
        records.push(rec);
    }
    teacher.freeze_all();
    Ok(SelfAnalysisRun { bundle: teacher, records })
}
