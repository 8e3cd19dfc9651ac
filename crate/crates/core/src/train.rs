//! Schedules, the SGD optimizer, per-epoch metrics and plain supervised training.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{shuffled_batches, Augment, DatasetSplit};
use crate::error::{Error, Result};
use crate::math::cross_entropy_with_grad;
use crate::model::{to_logits, Network, Param};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
}

/// Step-decay learning-rate schedule with SGD + momentum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub initial_lr: f64,
    pub lr_decay_factor: f64,
    pub milestones: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Rescales the combined gradient of each step to at most this L2 norm.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
}

impl TrainSchedule {
    /// Branch training on the teacher: 60 epochs, ×0.1 at 30 and 45.
    pub fn teacher_branches() -> Self {
        Self::sgd(60, vec![30, 45])
    }

    /// Student distillation: 240 epochs, ×0.1 at 150, 180 and 210.
    pub fn student() -> Self {
        Self::sgd(240, vec![150, 180, 210])
    }

    fn sgd(epochs: usize, milestones: Vec<usize>) -> Self {
        Self {
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            weight_decay: 5e-4,
            initial_lr: 0.1,
            lr_decay_factor: 0.1,
            milestones,
            epochs,
            batch_size: 64,
            grad_clip: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad(format!("initial_lr must be positive, got {}", self.initial_lr));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return bad(format!("lr_decay_factor must be in (0, 1), got {}", self.lr_decay_factor));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be >= 0".into());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("milestones must be strictly increasing: {:?}", self.milestones));
        }
        if let Some(m) = self.milestones.iter().find(|&&m| m >= self.epochs) {
            return bad(format!("milestone {m} is not below the epoch count {}", self.epochs));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.initial_lr * self.lr_decay_factor.powi(drops as i32)
    }

    /// Shrinks (or stretches) epochs and milestones by `multiplier`.
    pub fn scaled(&self, multiplier: f64) -> Result<Self> {
        if !(multiplier > 0.0 && multiplier.is_finite()) {
            return Err(Error::invalid(format!("schedule multiplier must be positive, got {multiplier}")));
        }
        let epochs = ((self.epochs as f64 * multiplier).round() as usize).max(1);
        let mut milestones: Vec<usize> = self
            .milestones
            .iter()
            .map(|&m| (m as f64 * multiplier).round() as usize)
            .filter(|&m| m > 0 && m < epochs)
            .collect();
        milestones.dedup();
        Ok(Self { epochs, milestones, ..self.clone() })
    }
}

/// SGD with classical momentum and L2 weight decay.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    momentum: f32,
    weight_decay: f32,
    grad_clip: Option<f32>,
    velocity: HashMap<String, Array2<f32>>,
}

impl Sgd {
    pub fn new(schedule: &TrainSchedule) -> Self {
        Self {
            momentum: schedule.momentum as f32,
            weight_decay: schedule.weight_decay as f32,
            grad_clip: schedule.grad_clip.map(|c| c as f32),
            velocity: HashMap::new(),
        }
    }

    /// Applies one update to every given parameter and clears its gradient.
    pub fn step(&mut self, params: Vec<(String, &mut Param)>, lr: f64) {
        let lr = lr as f32;
        let scale = match self.grad_clip {
            Some(c) => {
                let norm = params.iter().map(|(_, p)| p.grad.iter().map(|g| g * g).sum::<f32>()).sum::<f32>().sqrt();
                if norm > c { c / norm } else { 1.0 }
            }
            None => 1.0,
        };
        for (name, p) in params {
            let v = self.velocity.entry(name).or_insert_with(|| Array2::zeros(p.value.raw_dim()));
            let wd = self.weight_decay;
            let m = self.momentum;
            ndarray::Zip::from(&mut *v).and(&p.grad).and(&p.value).for_each(|vel, &g, &w| {
                *vel = m * *vel + scale * g + wd * w;
            });
            p.value.scaled_add(-lr, v);
            p.zero_grad();
        }
    }
}

/// Scalar observations for one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub lr: f64,
    pub values: BTreeMap<String, f64>,
}

impl MetricsRecord {
    pub fn new(epoch: usize, lr: f64) -> Self {
        Self { epoch, lr, values: BTreeMap::new() }
    }

    pub fn set(&mut self, key: impl Into<String>, v: f64) {
        self.values.insert(key.into(), v);
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied()
    }
}

/// Writes records as CSV with columns `epoch,lr,<sorted value keys>`.
pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let keys: Vec<&String> = {
        let mut k: Vec<&String> = records.iter().flat_map(|r| r.values.keys()).collect();
        k.sort();
        k.dedup();
        k
    };
    let mut out = String::from("epoch,lr");
    for k in &keys {
        out.push(',');
        out.push_str(k);
    }
    out.push('\n');
    for r in records {
        out.push_str(&format!("{},{}", r.epoch, r.lr));
        for k in &keys {
            out.push(',');
            if let Some(v) = r.values.get(*k) {
                out.push_str(&v.to_string());
            }
        }
        out.push('\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Running mean accumulator weighted by batch size.
#[derive(Debug, Default, Clone)]
pub(crate) struct Averages {
    sums: BTreeMap<String, f64>,
    count: f64,
}

impl Averages {
    pub fn add(&mut self, values: &[(String, f64)], weight: usize) {
        for (k, v) in values {
            *self.sums.entry(k.clone()).or_default() += v * weight as f64;
        }
        self.count += weight as f64;
    }

    pub fn into_record(self, record: &mut MetricsRecord, prefix: &str) {
        for (k, v) in self.sums {
            record.set(format!("{prefix}{k}"), v / self.count.max(1.0));
        }
    }
}

pub(crate) fn correct(logits: &Array2<f32>, labels: &[usize]) -> usize {
    logits
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| crate::math::argmax_slice(row.iter().map(|&v| v as f64)) == y)
        .count()
}

pub(crate) fn check_finite(v: f64, what: &str, epoch: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NumericFailure(format!("{what} became non-finite ({v}) in epoch {epoch}")))
    }
}

/// Supervised cross-entropy training of a backbone + classifier network.
pub fn train_network(
    net: &mut Network,
    train: &DatasetSplit,
    val: Option<&DatasetSplit>,
    schedule: &TrainSchedule,
    augment: Augment,
    seed: u64,
) -> Result<Vec<MetricsRecord>> {
    schedule.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Sgd::new(schedule);
    let mut records = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        let lr = schedule.lr_at(epoch);
        let mut avg = Averages::default();
        let mut hits = 0;
        for idx in shuffled_batches(train.len(), schedule.batch_size, &mut rng) {
            let (x, y) = train.batch(&idx);
            let x = augment.apply(&x, train.shape, &mut rng);
            let (logits, feats, cache) = net.forward_train(&x)?;
            hits += correct(&logits, y.as_slice());
            let (loss, grad) = cross_entropy_with_grad(&to_logits(&logits, "classifier")?, &y)?;
            check_finite(loss, "cross-entropy", epoch)?;
            net.backward(&feats, cache, &grad.mapv(|v| v as f32));
            opt.step(net.named_params_mut(), lr);
            avg.add(&[("loss".into(), loss)], idx.len());
        }
        let mut rec = MetricsRecord::new(epoch, lr);
        avg.into_record(&mut rec, "train_");
        rec.set("train_acc", hits as f64 / train.len() as f64);
        if let Some(v) = val.filter(|v| !v.is_empty()) {
            let (loss, acc) = crate::eval::loss_and_accuracy(net, v)?;
            rec.set("val_loss", loss);
            rec.set("val_acc", acc);
        }
        records.push(rec);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_and_defaults() {
        let s = TrainSchedule::teacher_branches();
        s.validate().unwrap();
        assert_eq!((s.initial_lr, s.momentum, s.batch_size), (0.1, 0.9, 64));
        assert_eq!(s.lr_at(0), 0.1);
        assert!((s.lr_at(30) - 0.01).abs() < 1e-12);
        assert!((s.lr_at(59) - 0.001).abs() < 1e-12);
        let st = TrainSchedule::student();
        assert_eq!((st.epochs, st.milestones.clone()), (240, vec![150, 180, 210]));
    }

    #[test]
    fn scaling_by_one_sixth() {
        let s = TrainSchedule::teacher_branches().scaled(1.0 / 6.0).unwrap();
        assert_eq!((s.epochs, s.milestones.clone()), (10, vec![5, 8]));
        let st = TrainSchedule::student().scaled(1.0 / 6.0).unwrap();
        assert_eq!((st.epochs, st.milestones.clone()), (40, vec![25, 30, 35]));
        st.validate().unwrap();
        assert_eq!(TrainSchedule::student().scaled(1.0).unwrap(), TrainSchedule::student());
    }

    #[test]
    fn invalid_schedules() {
        let mut s = TrainSchedule::teacher_branches();
        s.milestones = vec![45, 30];
        assert!(s.validate().is_err());
        s.milestones = vec![30, 60];
        assert!(s.validate().is_err());
        let mut s = TrainSchedule::teacher_branches();
        s.lr_decay_factor = 1.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn sgd_momentum_update() {
        let sched = TrainSchedule { weight_decay: 0.0, ..TrainSchedule::teacher_branches() };
        let mut opt = Sgd::new(&sched);
        let mut p = Param::new(Array2::from_elem((1, 1), 1.0));
        p.grad.fill(1.0);
        opt.step(vec![("w".into(), &mut p)], 0.1);
        assert!((p.value[[0, 0]] - 0.9).abs() < 1e-7);
        assert_eq!(p.grad[[0, 0]], 0.0);
        p.grad.fill(1.0);
        opt.step(vec![("w".into(), &mut p)], 0.1);
        // v = 0.9 * 1 + 1 = 1.9
        assert!((p.value[[0, 0]] - (0.9 - 0.19)).abs() < 1e-6);
    }

    #[test]
    fn grad_clip_rescales_the_joint_norm() {
        let sched = TrainSchedule { weight_decay: 0.0, momentum: 0.0, grad_clip: Some(1.0), ..TrainSchedule::student() };
        let mut opt = Sgd::new(&sched);
        let mut a = Param::new(Array2::zeros((1, 1)));
        let mut b = Param::new(Array2::zeros((1, 1)));
        a.grad.fill(3.0);
        b.grad.fill(4.0);
        opt.step(vec![("a".into(), &mut a), ("b".into(), &mut b)], 1.0);
        assert!((a.value[[0, 0]] + 0.6).abs() < 1e-6);
        assert!((b.value[[0, 0]] + 0.8).abs() < 1e-6);
        // below the threshold nothing changes
        a.grad.fill(0.5);
        opt.step(vec![("a".into(), &mut a)], 1.0);
        assert!((a.value[[0, 0]] + 1.1).abs() < 1e-6);
        assert!(TrainSchedule { grad_clip: Some(0.0), ..sched }.validate().is_err());
    }

    #[test]
    fn metrics_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = MetricsRecord::new(0, 0.1);
        r.set("b", 2.0);
        r.set("a", 1.0);
        let path = dir.path().join("m.csv");
        write_metrics_csv(&path, &[r]).unwrap();
        assert_eq!(fs::read_to_string(path).unwrap(), "epoch,lr,a,b\n0,0.1,1,2\n");
    }
}
