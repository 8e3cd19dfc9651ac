//! Accuracy, representation similarity, noise robustness and transfer probes.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{add_gaussian_noise, shuffled_batches, DatasetSplit};
use crate::error::{Error, Result};
use crate::math::{cross_entropy, softmax_temp, LogitsBatch, Temperature};
use crate::model::{checksum, to_logits, Linear, NativeModel, Network};
use crate::train::{correct, Sgd, TrainSchedule};

const EVAL_BATCH: usize = 256;

/// Feature matrix over a fixed, ordered sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationMatrix {
    values: Array2<f64>,
    role: String,
}

impl RepresentationMatrix {
    pub fn new(values: Array2<f64>, role: impl Into<String>) -> Result<Self> {
        if values.nrows() < 2 {
            return Err(Error::invalid(format!("need at least 2 samples, got {}", values.nrows())));
        }
        if values.ncols() == 0 {
            return Err(Error::invalid("representation has no features"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("representation contains non-finite values"));
        }
        Ok(Self { values, role: role.into() })
    }

    pub fn from_f32(values: &Array2<f32>, role: impl Into<String>) -> Result<Self> {
        Self::new(values.mapv(f64::from), role)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn role(&self) -> &str {
        &self.role
    }
}

/// Native logits for every sample of a split, in order.
pub fn predict(model: &dyn NativeModel, split: &DatasetSplit) -> Result<Array2<f32>> {
    let parts = split
        .sequential_batches(EVAL_BATCH)
        .into_iter()
        .map(|idx| model.native_logits(&split.batch(&idx).0))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("consistent widths"))
}

/// Fraction of samples whose native argmax matches the label.
pub fn top1_accuracy(model: &dyn NativeModel, split: &DatasetSplit) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::invalid(format!("split '{}' is empty", split.name)));
    }
    let logits = predict(model, split)?;
    Ok(correct(&logits, &split.labels) as f64 / split.len() as f64)
}

/// Mean cross-entropy and top-1 accuracy of the native head.
pub fn loss_and_accuracy(model: &dyn NativeModel, split: &DatasetSplit) -> Result<(f64, f64)> {
    if split.is_empty() {
        return Err(Error::invalid(format!("split '{}' is empty", split.name)));
    }
    let (mut loss, mut hits) = (0.0, 0);
    for idx in split.sequential_batches(EVAL_BATCH) {
        let (x, y) = split.batch(&idx);
        let logits = model.native_logits(&x)?;
        hits += correct(&logits, y.as_slice());
        loss += cross_entropy(&to_logits(&logits, "classifier")?, &y)? * idx.len() as f64;
    }
    Ok((loss / split.len() as f64, hits as f64 / split.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CkaKernel {
    Linear,
    /// Gaussian kernel with bandwidth set to the median pairwise distance.
    Rbf,
}

fn center_columns(x: &Array2<f64>) -> Array2<f64> {
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    x - &mean
}

fn squared_distances(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let v: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len().is_multiple_of(2) {
        (v[m - 1] + v[m]) / 2.0
    } else {
        v[m]
    }
}

fn gram(x: &Array2<f64>, kernel: CkaKernel) -> Result<Array2<f64>> {
    let xc = center_columns(x);
    match kernel {
        CkaKernel::Linear => Ok(xc.dot(&xc.t())),
        CkaKernel::Rbf => {
            let d2 = squared_distances(&xc);
            let n = d2.nrows();
            let pairs: Vec<f64> =
                (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).map(|(i, j)| d2[[i, j]].sqrt()).collect();
            let bw = median(pairs);
            if bw <= 0.0 {
                return Err(Error::NumericFailure("rbf bandwidth is zero (median pairwise distance)".into()));
            }
            Ok(d2.mapv(|v| (-v / (2.0 * bw * bw)).exp()))
        }
    }
}

/// `tr(K H L H)` with `H` the centering matrix (without the `1/(n-1)^2` factor,
/// which cancels in the CKA ratio).
fn hsic(k: &Array2<f64>, l: &Array2<f64>) -> f64 {
    let center = |m: &Array2<f64>| {
        let row = m.mean_axis(Axis(1)).expect("non-empty");
        let col = m.mean_axis(Axis(0)).expect("non-empty");
        let all = m.mean().expect("non-empty");
        let mut c = m.clone();
        for ((i, j), v) in c.indexed_iter_mut() {
            *v += all - row[i] - col[j];
        }
        c
    };
    (&center(k) * l).sum()
}

/// Centered kernel alignment between two representations of the same samples.
pub fn cka_similarity(x: &RepresentationMatrix, y: &RepresentationMatrix, kernel: CkaKernel) -> Result<f64> {
    if x.values.nrows() != y.values.nrows() {
        return Err(Error::invalid(format!(
            "cka needs the same samples: {} rows vs {} rows",
            x.values.nrows(),
            y.values.nrows()
        )));
    }
    let k = gram(&x.values, kernel)?;
    let l = gram(&y.values, kernel)?;
    let kl = hsic(&k, &l);
    let kk = hsic(&k, &k);
    let ll = hsic(&l, &l);
    let scale = k.iter().chain(l.iter()).fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    if kk <= 1e-24 * scale * scale || ll <= 1e-24 * scale * scale {
        return Err(Error::NumericFailure(format!(
            "cka undefined for degenerate input ({} vs {}): zero variance after centering",
            x.role, y.role
        )));
    }
    Ok((kl / (kk * ll).sqrt()).clamp(0.0, 1.0))
}

/// Row-averaged similarity between teacher and student outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub ssim: f64,
    pub cosine: f64,
    pub pearson: f64,
    pub l2: f64,
    pub rows: usize,
    pub skipped_cosine: usize,
    pub skipped_pearson: usize,
    pub skipped_ssim: usize,
}

fn mean_of(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ma, mb) = (mean_of(a), mean_of(b));
    let ca: Vec<f64> = a.iter().map(|v| v - ma).collect();
    let cb: Vec<f64> = b.iter().map(|v| v - mb).collect();
    cosine(&ca, &cb)
}

/// Single-window SSIM of two vectors; the dynamic range comes from `t`.
fn vector_ssim(t: &[f64], s: &[f64]) -> Option<f64> {
    let lo = t.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range <= 0.0 {
        return None;
    }
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let n = t.len() as f64;
    let (mt, ms) = (mean_of(t), mean_of(s));
    let vt = t.iter().map(|v| (v - mt).powi(2)).sum::<f64>() / n;
    let vs = s.iter().map(|v| (v - ms).powi(2)).sum::<f64>() / n;
    let cov = t.iter().zip(s).map(|(a, b)| (a - mt) * (b - ms)).sum::<f64>() / n;
    Some(((2.0 * mt * ms + c1) * (2.0 * cov + c2)) / ((mt * mt + ms * ms + c1) * (vt + vs + c2)))
}

/// SSIM, cosine, Pearson and L2 between matching rows, averaged over rows.
/// Rows where a metric is undefined are skipped for that metric and counted.
pub fn knowledge_similarity(t: &RepresentationMatrix, s: &RepresentationMatrix) -> Result<SimilarityReport> {
    if t.values.dim() != s.values.dim() {
        return Err(Error::invalid(format!(
            "shape mismatch between {} {:?} and {} {:?}",
            t.role,
            t.values.dim(),
            s.role,
            s.values.dim()
        )));
    }
    let (mut ssim, mut cos, mut pr, mut l2) = (vec![], vec![], vec![], vec![]);
    for (a, b) in t.values.rows().into_iter().zip(s.values.rows()) {
        let (a, b) = (a.to_vec(), b.to_vec());
        ssim.extend(vector_ssim(&a, &b));
        cos.extend(cosine(&a, &b));
        pr.extend(pearson(&a, &b));
        l2.push(a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt());
    }
    let rows = l2.len();
    Ok(SimilarityReport {
        ssim: mean_of(&ssim),
        cosine: mean_of(&cos),
        pearson: mean_of(&pr),
        l2: mean_of(&l2),
        rows,
        skipped_cosine: rows - cos.len(),
        skipped_pearson: rows - pr.len(),
        skipped_ssim: rows - ssim.len(),
    })
}

/// Teacher-minus-student difference of class correlation matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationDiff {
    pub matrix: Array2<f64>,
    /// Set when any probability column was constant; those entries are 0.
    pub constant_columns: bool,
}

fn column_correlation(p: &Array2<f64>) -> (Array2<f64>, bool) {
    let c = p.ncols();
    let centered = center_columns(p);
    let norms: Array1<f64> = centered.map_axis(Axis(0), |col| col.iter().map(|v| v * v).sum::<f64>().sqrt());
    let mut out = Array2::zeros((c, c));
    let mut flagged = false;
    for i in 0..c {
        for j in 0..c {
            if norms[i] <= 1e-300 || norms[j] <= 1e-300 {
                flagged = true;
                continue;
            }
            let dot: f64 = centered.column(i).iter().zip(centered.column(j)).map(|(a, b)| a * b).sum();
            out[[i, j]] = dot / (norms[i] * norms[j]);
        }
    }
    (out, flagged)
}

/// Pearson correlations between softmax class columns, teacher minus student.
pub fn correlation_matrix_difference(t: &LogitsBatch, s: &LogitsBatch) -> Result<CorrelationDiff> {
    if t.dim() != s.dim() {
        return Err(Error::invalid(format!("logit shapes differ: {:?} vs {:?}", t.dim(), s.dim())));
    }
    if t.rows() < 2 {
        return Err(Error::invalid("correlation needs at least 2 samples"));
    }
    let one = Temperature::new(1.0)?;
    let (ct, ft) = column_correlation(softmax_temp(t, one).values());
    let (cs, fs) = column_correlation(softmax_temp(s, one).values());
    Ok(CorrelationDiff { matrix: ct - cs, constant_columns: ft || fs })
}

/// Accuracy under additive Gaussian noise at each noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseCurve {
    pub sigmas: Vec<f64>,
    pub accuracy: Vec<f64>,
    /// Accuracy minus the σ = 0 accuracy.
    pub accuracy_delta: Vec<f64>,
    /// Population variance of `accuracy_delta` over all points.
    pub variance: f64,
}

/// `{0, 0.02, ..., 0.30}`.
pub fn default_noise_grid() -> Vec<f64> {
    (0..16).map(|i| i as f64 * 0.02).collect()
}

pub fn noise_robustness_sweep(
    model: &dyn NativeModel,
    split: &DatasetSplit,
    sigmas: &[f64],
    seed: u64,
) -> Result<NoiseCurve> {
    if let Some(s) = sigmas.iter().find(|s| !s.is_finite() || **s < 0.0) {
        return Err(Error::invalid(format!("noise sigma must be >= 0, got {s}")));
    }
    if sigmas.first() != Some(&0.0) {
        return Err(Error::invalid("noise grid must start at sigma = 0"));
    }
    if sigmas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("noise grid must be strictly increasing"));
    }
    let accuracy = sigmas
        .iter()
        .enumerate()
        .map(|(i, &sigma)| {
            let noisy = add_gaussian_noise(split, sigma, seed.wrapping_add(i as u64))?;
            top1_accuracy(model, &noisy)
        })
        .collect::<Result<Vec<_>>>()?;
    let accuracy_delta: Vec<f64> = accuracy.iter().map(|a| a - accuracy[0]).collect();
    let mean = mean_of(&accuracy_delta);
    let variance = accuracy_delta.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / accuracy_delta.len() as f64;
    Ok(NoiseCurve { sigmas: sigmas.to_vec(), accuracy, accuracy_delta, variance })
}

#[derive(Debug, Clone)]
pub struct TransferResult {
    pub accuracy: f64,
    pub network: Network,
    pub backbone_checksum_before: String,
    pub backbone_checksum_after: String,
}

/// Trains only a classifier on top of a frozen backbone and reports target accuracy.
///
/// Without a provided classifier a fresh one sized to the target classes is drawn from `seed`.
pub fn transfer_finetune(
    source: &Network,
    target_train: &DatasetSplit,
    target_test: &DatasetSplit,
    classifier: Option<Linear>,
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<TransferResult> {
    schedule.validate()?;
    if target_train.is_empty() || target_test.is_empty() {
        return Err(Error::invalid("transfer splits must be non-empty"));
    }
    let flat = source.backbone.flatten_dim();
    let classes = target_train.class_count;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut head = match classifier {
        Some(c) if c.output_dim() != classes || c.input_dim() != flat => {
            return Err(Error::invalid(format!(
                "classifier maps {} -> {} but the target needs {} -> {}",
                c.input_dim(),
                c.output_dim(),
                flat,
                classes
            )))
        }
        Some(c) => c,
        None => Linear::new(flat, classes, crate::model::Init::FanIn, &mut rng),
    };
    let backbone = &source.backbone;
    let before = checksum(backbone.named_params());
    let features = {
        let parts = target_train
            .sequential_batches(EVAL_BATCH)
            .into_iter()
            .map(|idx| backbone.forward(&target_train.batch(&idx).0))
            .collect::<Result<Vec<_>>>()?;
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("consistent widths")
    };
    let mut opt = Sgd::new(schedule);
    for epoch in 0..schedule.epochs {
        let lr = schedule.lr_at(epoch);
        for idx in shuffled_batches(target_train.len(), schedule.batch_size, &mut rng) {
            let f = features.select(Axis(0), &idx);
            let y = crate::math::LabelBatch::new(idx.iter().map(|&i| target_train.labels[i]).collect());
            let logits = to_logits(&head.forward(&f), "transfer classifier")?;
            let (loss, grad) = crate::math::cross_entropy_with_grad(&logits, &y)?;
            crate::train::check_finite(loss, "transfer cross-entropy", epoch)?;
            head.backward(&f, &grad.mapv(|v| v as f32), false);
            opt.step(head.params_mut().into_iter().map(|(n, p)| (n.to_string(), p)).collect(), lr);
        }
    }
    let network = Network { backbone: backbone.clone(), classifier: head };
    let accuracy = top1_accuracy(&network, target_test)?;
    let after = checksum(network.backbone.named_params());
    Ok(TransferResult { accuracy, network, backbone_checksum_before: before, backbone_checksum_after: after })
}
