//! Distillation losses and their analytic gradients.
//!
//! Every loss here takes a teacher-side (supervision) argument and a
//! student-side argument. Gradients are returned only for the student side;
//! supervision is treated as a constant.
//!
//! All quantities are `f64`. Models run in `f32` and convert at the boundary.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp applied to the student probability inside `ln(p / q)`.
pub const KL_EPSILON: f64 = 1e-12;

/// Tolerance for the row-sum check on [`ProbBatch`].
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// N×d matrix of pre-softmax scores.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsBatch(Array2<f64>);

impl LogitsBatch {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (n, d) = values.dim();
        if n < 1 {
            return Err(Error::invalid("logits batch must have at least one row"));
        }
        if d < 2 {
            return Err(Error::invalid(format!(
                "logits batch must have at least two columns, got {d}"
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite logit at flat index {pos}"
            )));
        }
        Ok(Self(values))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(rows_to_array(rows)?)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    /// Per-row index of the largest logit (first wins on ties).
    pub fn argmax(&self) -> Vec<usize> {
        self.0.rows().into_iter().map(|r| argmax_slice(r.iter().copied())).collect()
    }
}

/// N×d row-stochastic matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbBatch(Array2<f64>);

impl ProbBatch {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() < 1 || values.ncols() < 1 {
            return Err(Error::invalid("probability batch must be non-empty"));
        }
        for (i, row) in values.rows().into_iter().enumerate() {
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::invalid(format!("row {i} has an entry outside [0, 1]")));
            }
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::invalid(format!("row {i} sums to {sum}, not 1")));
            }
        }
        Ok(Self(values))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(rows_to_array(rows)?)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }
}

/// Integer class labels, one per sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelBatch(Vec<usize>);

impl LabelBatch {
    pub fn new(labels: Vec<usize>) -> Self {
        Self(labels)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn check(&self, rows: usize, classes: usize) -> Result<()> {
        if self.0.len() != rows {
            return Err(Error::invalid(format!(
                "label count {} does not match batch size {rows}",
                self.0.len()
            )));
        }
        if let Some((i, &y)) = self.0.iter().enumerate().find(|(_, &y)| y >= classes) {
            return Err(Error::invalid(format!(
                "label {y} at index {i} is out of range for {classes} classes"
            )));
        }
        Ok(())
    }
}

/// Softmax temperature; always strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if tau.is_finite() && tau > 0.0 {
            Ok(Self(tau))
        } else {
            Err(Error::invalid(format!("temperature must be positive and finite, got {tau}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Temperature {
    type Error = Error;

    fn try_from(tau: f64) -> Result<Self> {
        Temperature::new(tau)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

impl fmt::Display for Temperature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Knowledge granularity of a head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Ak,
    Nk,
    Dk,
}

impl Granularity {
    pub const ALL: [Granularity; 3] = [Granularity::Ak, Granularity::Nk, Granularity::Dk];

    pub fn name(self) -> &'static str {
        match self {
            Granularity::Ak => "ak",
            Granularity::Nk => "nk",
            Granularity::Dk => "dk",
        }
    }
}

/// Teacher-side adapter branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Branch {
    Akb,
    Dkb,
}

pub type HeadMap<T> = BTreeMap<Granularity, T>;
pub type BranchMap<T> = BTreeMap<Branch, T>;

fn rows_to_array(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("ragged rows"));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((n, d), flat).map_err(|e| Error::invalid(e.to_string()))
}

pub(crate) fn argmax_slice(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

fn same_shape(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!(
            "{what}: shape mismatch {}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

fn softmax_rows(x: &Array2<f64>, tau: f64) -> Array2<f64> {
    let mut out = x.mapv(|v| v / tau);
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Row-wise `softmax(logits / tau)` in max-subtracted form.
pub fn softmax_temp(logits: &LogitsBatch, tau: Temperature) -> ProbBatch {
    ProbBatch(softmax_rows(&logits.0, tau.0))
}

/// Mean over rows of `KL(p_i || q_i)`, with `p` the teacher distribution.
pub fn kl_divergence(p: &ProbBatch, q: &ProbBatch) -> Result<f64> {
    same_shape(p.dim(), q.dim(), "kl_divergence")?;
    Ok(kl_rows(&p.0, &q.0))
}

fn kl_rows(p: &Array2<f64>, q: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    Zip::from(p).and(q).for_each(|&pc, &qc| {
        if pc > 0.0 {
            total += pc * (pc / qc.max(KL_EPSILON)).ln();
        }
    });
    // Rounding can push an exact-zero KL slightly negative.
    (total / p.nrows() as f64).max(0.0)
}

/// Temperature-scaled distillation loss `tau^2 * mean_i KL(phi(t_i/tau) || phi(s_i/tau))`.
pub fn hkd_loss(f_t: &LogitsBatch, f_s: &LogitsBatch, tau: Temperature) -> Result<f64> {
    hkd_loss_with_grad(f_t, f_s, tau).map(|(v, _)| v)
}

/// [`hkd_loss`] plus its gradient with respect to `f_s`.
///
/// d/ds = tau / N * (phi(s/tau) - phi(t/tau))
pub fn hkd_loss_with_grad(
    f_t: &LogitsBatch,
    f_s: &LogitsBatch,
    tau: Temperature,
) -> Result<(f64, Array2<f64>)> {
    same_shape(f_t.dim(), f_s.dim(), "hkd_loss")?;
    let t = tau.0;
    let p = softmax_rows(&f_t.0, t);
    let q = softmax_rows(&f_s.0, t);
    let value = t * t * kl_rows(&p, &q);
    let scale = t / f_s.rows() as f64;
    let grad = (&q - &p) * scale;
    Ok((value, grad))
}

/// Mean negative log-likelihood of the labelled class under `softmax(f)`.
pub fn cross_entropy(f: &LogitsBatch, y: &LabelBatch) -> Result<f64> {
    cross_entropy_with_grad(f, y).map(|(v, _)| v)
}

pub fn cross_entropy_with_grad(f: &LogitsBatch, y: &LabelBatch) -> Result<(f64, Array2<f64>)> {
    let (n, c) = f.dim();
    y.check(n, c)?;
    let mut total = 0.0;
    let mut grad = Array2::zeros((n, c));
    for (i, (row, &label)) in f.0.rows().into_iter().zip(y.as_slice()).enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let log_sum = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        total += log_sum - row[label];
        for (j, &v) in row.iter().enumerate() {
            grad[[i, j]] = (v - log_sum).exp();
        }
        grad[[i, label]] -= 1.0;
    }
    grad /= n as f64;
    Ok((total / n as f64, grad))
}

/// Branch-versus-native granularity analysis loss. Same value as [`hkd_loss`].
pub fn granularity_analysis_loss(
    f_nk_t: &LogitsBatch,
    f_b_t: &LogitsBatch,
    tau_b: Temperature,
) -> Result<f64> {
    hkd_loss(f_nk_t, f_b_t, tau_b)
}

pub fn granularity_analysis_loss_with_grad(
    f_nk_t: &LogitsBatch,
    f_b_t: &LogitsBatch,
    tau_b: Temperature,
) -> Result<(f64, Array2<f64>)> {
    hkd_loss_with_grad(f_nk_t, f_b_t, tau_b)
}

/// The two parts of a branch's self-analysis objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelfAnalyzeTerms {
    pub ga: f64,
    pub ce: f64,
}

impl SelfAnalyzeTerms {
    pub fn total(&self) -> f64 {
        self.ga + self.ce
    }
}

/// Granularity analysis loss plus ground-truth cross-entropy on the branch output.
pub fn self_analyze_loss(
    f_nk_t: &LogitsBatch,
    f_b_t: &LogitsBatch,
    tau_b: Temperature,
    y: &LabelBatch,
) -> Result<f64> {
    self_analyze_loss_with_grad(f_nk_t, f_b_t, tau_b, y).map(|(t, _)| t.total())
}

pub fn self_analyze_loss_with_grad(
    f_nk_t: &LogitsBatch,
    f_b_t: &LogitsBatch,
    tau_b: Temperature,
    y: &LabelBatch,
) -> Result<(SelfAnalyzeTerms, Array2<f64>)> {
    let (ga, g_ga) = granularity_analysis_loss_with_grad(f_nk_t, f_b_t, tau_b)?;
    let (ce, g_ce) = cross_entropy_with_grad(f_b_t, y)?;
    Ok((SelfAnalyzeTerms { ga, ce }, g_ga + g_ce))
}

/// Elementwise mean of three equally shaped logit batches.
pub fn ensemble_average(a: &LogitsBatch, n: &LogitsBatch, d: &LogitsBatch) -> Result<LogitsBatch> {
    same_shape(a.dim(), n.dim(), "ensemble_average")?;
    same_shape(a.dim(), d.dim(), "ensemble_average")?;
    let mut out = a.0.clone();
    Zip::from(&mut out).and(&n.0).and(&d.0).for_each(|o, &nv, &dv| {
        *o = (*o + nv + dv) / 3.0;
    });
    Ok(LogitsBatch(out))
}

/// Per-term multipliers for the composite distillation objectives. All default to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TermWeights {
    pub ak: f64,
    pub nk: f64,
    pub dk: f64,
    pub en: f64,
    pub base: f64,
}

impl Default for TermWeights {
    fn default() -> Self {
        Self { ak: 1.0, nk: 1.0, dk: 1.0, en: 1.0, base: 1.0 }
    }
}

/// Named term of a composite objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TermKind {
    /// `L_H` on the abstracted head.
    HeadAk,
    /// `L_H` on the native head (granularity-wise scheme only).
    HeadNk,
    /// `L_H` on the detailed head.
    HeadDk,
    /// `L_H` of the teacher ensemble against the student native head.
    Ensemble,
}

impl TermKind {
    pub fn name(self) -> &'static str {
        match self {
            TermKind::HeadAk => "lh_ak",
            TermKind::HeadNk => "lh_nk",
            TermKind::HeadDk => "lh_dk",
            TermKind::Ensemble => "l_en",
        }
    }

    fn weight(self, w: &TermWeights) -> f64 {
        match self {
            TermKind::HeadAk => w.ak,
            TermKind::HeadNk => w.nk,
            TermKind::HeadDk => w.dk,
            TermKind::Ensemble => w.en,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossTerm {
    pub kind: TermKind,
    /// Student head the gradient belongs to.
    pub head: Granularity,
    pub value: f64,
    pub grad: Array2<f64>,
}

/// Decomposed composite loss: per-term values and student-head gradients.
#[derive(Debug, Clone)]
pub struct SchemeLoss {
    pub terms: Vec<LossTerm>,
    pub base_kd: f64,
}

impl SchemeLoss {
    pub fn total(&self) -> f64 {
        self.total_weighted(&TermWeights::default())
    }

    pub fn total_weighted(&self, w: &TermWeights) -> f64 {
        self.terms.iter().map(|t| t.kind.weight(w) * t.value).sum::<f64>() + w.base * self.base_kd
    }

    pub fn value(&self, kind: TermKind) -> Option<f64> {
        self.terms.iter().find(|t| t.kind == kind).map(|t| t.value)
    }

    /// Weighted gradient per student head, excluding the base term.
    pub fn head_grads(&self, w: &TermWeights) -> HeadMap<Array2<f64>> {
        let mut out: HeadMap<Array2<f64>> = BTreeMap::new();
        for t in &self.terms {
            let scaled = &t.grad * t.kind.weight(w);
            match out.get_mut(&t.head) {
                Some(g) => *g += &scaled,
                None => {
                    out.insert(t.head, scaled);
                }
            }
        }
        out
    }
}

fn head<'a, T>(map: &'a HeadMap<T>, k: Granularity, which: &str) -> Result<&'a T> {
    map.get(&k)
        .ok_or_else(|| Error::invalid(format!("{which} is missing the {} entry", k.name())))
}

fn check_base(base_kd: f64) -> Result<()> {
    if !base_kd.is_finite() || base_kd < 0.0 {
        return Err(Error::invalid(format!("base KD loss must be finite and >= 0, got {base_kd}")));
    }
    Ok(())
}

fn head_term(
    kind: TermKind,
    k: Granularity,
    teacher: &HeadMap<LogitsBatch>,
    student: &HeadMap<LogitsBatch>,
    temps: &HeadMap<Temperature>,
) -> Result<LossTerm> {
    let (value, grad) = hkd_loss_with_grad(
        head(teacher, k, "teacher outputs")?,
        head(student, k, "student outputs")?,
        *head(temps, k, "temperatures")?,
    )?;
    Ok(LossTerm { kind, head: k, value, grad })
}

/// Granularity-wise objective, decomposed.
pub fn gwd_terms(
    teacher_outs: &HeadMap<LogitsBatch>,
    student_outs: &HeadMap<LogitsBatch>,
    temps: &HeadMap<Temperature>,
    base_kd: f64,
) -> Result<SchemeLoss> {
    check_base(base_kd)?;
    let terms = [
        (TermKind::HeadAk, Granularity::Ak),
        (TermKind::HeadNk, Granularity::Nk),
        (TermKind::HeadDk, Granularity::Dk),
    ]
    .into_iter()
    .map(|(kind, k)| head_term(kind, k, teacher_outs, student_outs, temps))
    .collect::<Result<Vec<_>>>()?;
    Ok(SchemeLoss { terms, base_kd })
}

/// Sum of `L_H` over the AK, NK and DK heads plus the base KD loss.
pub fn gwd_loss(
    teacher_outs: &HeadMap<LogitsBatch>,
    student_outs: &HeadMap<LogitsBatch>,
    temps: &HeadMap<Temperature>,
    base_kd: f64,
) -> Result<f64> {
    gwd_terms(teacher_outs, student_outs, temps, base_kd).map(|l| l.total())
}

/// Stable-excitation objective, decomposed.
///
/// The native head is supervised by the ensemble average of the teacher's
/// two adapter branches and its classifier, at the NK temperature.
pub fn se_terms(
    teacher_outs: &HeadMap<LogitsBatch>,
    teacher_branch_outs: &BranchMap<LogitsBatch>,
    student_outs: &HeadMap<LogitsBatch>,
    temps: &HeadMap<Temperature>,
    base_kd: f64,
) -> Result<SchemeLoss> {
    check_base(base_kd)?;
    let akb = teacher_branch_outs
        .get(&Branch::Akb)
        .ok_or_else(|| Error::invalid("teacher branch outputs are missing AKB"))?;
    let dkb = teacher_branch_outs
        .get(&Branch::Dkb)
        .ok_or_else(|| Error::invalid("teacher branch outputs are missing DKB"))?;
    let nk_t = head(teacher_outs, Granularity::Nk, "teacher outputs")?;
    let ensemble = ensemble_average(akb, nk_t, dkb)?;
    let (en, en_grad) = hkd_loss_with_grad(
        &ensemble,
        head(student_outs, Granularity::Nk, "student outputs")?,
        *head(temps, Granularity::Nk, "temperatures")?,
    )?;
    let terms = vec![
        head_term(TermKind::HeadAk, Granularity::Ak, teacher_outs, student_outs, temps)?,
        head_term(TermKind::HeadDk, Granularity::Dk, teacher_outs, student_outs, temps)?,
        LossTerm { kind: TermKind::Ensemble, head: Granularity::Nk, value: en, grad: en_grad },
    ];
    Ok(SchemeLoss { terms, base_kd })
}

/// `L_H` over the AK and DK heads, plus the ensemble term, plus the base KD loss.
pub fn se_loss(
    teacher_outs: &HeadMap<LogitsBatch>,
    teacher_branch_outs: &BranchMap<LogitsBatch>,
    student_outs: &HeadMap<LogitsBatch>,
    temps: &HeadMap<Temperature>,
    base_kd: f64,
) -> Result<f64> {
    se_terms(teacher_outs, teacher_branch_outs, student_outs, temps, base_kd).map(|l| l.total())
}

/// Population variance of the first `ceil(fraction * len)` entries.
pub fn early_loss_stability(records: &[f64], fraction: f64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::invalid("loss record sequence is empty"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let k = ((fraction * records.len() as f64).ceil() as usize).clamp(1, records.len());
    let prefix = &records[..k];
    let mean = prefix.iter().sum::<f64>() / k as f64;
    Ok(prefix.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k as f64)
}
