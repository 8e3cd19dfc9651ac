//! Backbones, classifier heads, granularity encoders/adapters and the
//! teacher/student bundles that tie them together.

mod backbone;
pub mod layers;

use std::collections::BTreeSet;
use std::fmt;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use backbone::{Backbone, BackboneArch};
use backbone::BackboneCache;
pub use layers::{Init, Linear, Param};

use crate::error::{Error, Result};
use crate::math::{Branch, BranchMap, Granularity, HeadMap, LogitsBatch};

/// Head dimensions `(dim_ak, C, dim_dk)`; requires `dim_ak < C < dim_dk`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GranularitySpec {
    pub dim_ak: usize,
    pub num_classes: usize,
    pub dim_dk: usize,
}

impl GranularitySpec {
    pub fn new(dim_ak: usize, num_classes: usize, dim_dk: usize) -> Result<Self> {
        let spec = Self { dim_ak, num_classes, dim_dk };
        validate_spec(&spec)?;
        Ok(spec)
    }

    pub fn dim(&self, k: Granularity) -> usize {
        match k {
            Granularity::Ak => self.dim_ak,
            Granularity::Nk => self.num_classes,
            Granularity::Dk => self.dim_dk,
        }
    }
}

/// Checks the strict ordering `dim_ak < C < dim_dk`.
///
/// The abstracted head also needs at least two outputs; a softmax over a
/// single logit carries no information.
pub fn validate_spec(spec: &GranularitySpec) -> Result<()> {
    let GranularitySpec { dim_ak, num_classes: c, dim_dk } = *spec;
    if dim_ak < 2 {
        return Err(Error::invalid(format!("dim_ak = {dim_ak} must be at least 2")));
    }
    if dim_ak >= c {
        return Err(Error::invalid(format!(
            "dim_ak < C violated: dim_ak = {dim_ak}, C = {c} (required dim_ak < C < dim_dk)"
        )));
    }
    if c >= dim_dk {
        return Err(Error::invalid(format!(
            "C < dim_dk violated: C = {c}, dim_dk = {dim_dk} (required dim_ak < C < dim_dk)"
        )));
    }
    Ok(())
}

/// Stable part names used in parameter and checkpoint keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Backbone,
    Classifier,
    Ake,
    Dke,
    AkAdapter,
    DkAdapter,
}

impl Part {
    pub fn name(self) -> &'static str {
        match self {
            Part::Backbone => "backbone",
            Part::Classifier => "classifier",
            Part::Ake => "ake",
            Part::Dke => "dke",
            Part::AkAdapter => "ak_adapter",
            Part::DkAdapter => "dk_adapter",
        }
    }
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// SHA-256 over parameter names, shapes and little-endian values.
pub fn checksum<'a>(params: impl IntoIterator<Item = (String, &'a Param)>) -> String {
    let mut h = Sha256::new();
    for (name, p) in params {
        h.update(name.as_bytes());
        for d in p.value.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in p.value.iter() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn linear_params<'a>(prefix: &str, l: &'a Linear) -> Vec<(String, &'a Param)> {
    l.params().into_iter().map(|(n, p)| (format!("{prefix}.{n}"), p)).collect()
}

fn linear_params_mut<'a>(prefix: &str, l: &'a mut Linear) -> Vec<(String, &'a mut Param)> {
    l.params_mut().into_iter().map(|(n, p)| (format!("{prefix}.{n}"), p)).collect()
}

fn backbone_params(b: &Backbone) -> Vec<(String, &Param)> {
    b.named_params().into_iter().map(|(n, p)| (format!("backbone.{n}"), p)).collect()
}

fn backbone_params_mut(b: &mut Backbone) -> Vec<(String, &mut Param)> {
    b.named_params_mut().into_iter().map(|(n, p)| (format!("backbone.{n}"), p)).collect()
}

pub(crate) fn to_logits(x: &Array2<f32>, what: &str) -> Result<LogitsBatch> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericFailure(format!("non-finite values in {what} output")));
    }
    LogitsBatch::new(x.mapv(f64::from))
}

/// Anything that produces native (classifier) logits and a flatten representation.
pub trait NativeModel {
    fn features(&self, x: &Array2<f32>) -> Result<Array2<f32>>;
    fn native_from_features(&self, features: &Array2<f32>) -> Array2<f32>;
    fn num_classes(&self) -> usize;

    fn native_logits(&self, x: &Array2<f32>) -> Result<Array2<f32>> {
        Ok(self.native_from_features(&self.features(x)?))
    }
}

/// Backbone plus classifier: a pretrained teacher before branches are
/// attached, or a student with its encoders stripped.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub backbone: Backbone,
    pub classifier: Linear,
}

impl Network {
    pub fn new(arch: BackboneArch, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("a classifier needs at least 2 classes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(arch, &mut rng)?;
        let classifier = Linear::new(backbone.flatten_dim(), num_classes, Init::FanIn, &mut rng);
        Ok(Self { backbone, classifier })
    }

    pub fn named_params(&self) -> Vec<(String, &Param)> {
        let mut v = backbone_params(&self.backbone);
        v.extend(linear_params(Part::Classifier.name(), &self.classifier));
        v
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut v = backbone_params_mut(&mut self.backbone);
        v.extend(linear_params_mut(Part::Classifier.name(), &mut self.classifier));
        v
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    pub fn checksum(&self) -> String {
        checksum(self.named_params())
    }

    /// Training forward: returns logits and the state needed for backward.
    pub(crate) fn forward_train(&self, x: &Array2<f32>) -> Result<(Array2<f32>, Array2<f32>, BackboneCache)> {
        let (f, cache) = self.backbone.forward_train(x)?;
        Ok((self.classifier.forward(&f), f, cache))
    }

    pub(crate) fn backward(&mut self, features: &Array2<f32>, cache: BackboneCache, grad_logits: &Array2<f32>) {
        let gf = self.classifier.backward(features, grad_logits, true).expect("input grad requested");
        self.backbone.backward(cache, gf);
    }
}

impl NativeModel for Network {
    fn features(&self, x: &Array2<f32>) -> Result<Array2<f32>> {
        self.backbone.forward(x)
    }

    fn native_from_features(&self, f: &Array2<f32>) -> Array2<f32> {
        self.classifier.forward(f)
    }

    fn num_classes(&self) -> usize {
        self.classifier.output_dim()
    }
}

/// Outputs of every head for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct GranularityOutputs {
    pub f_ak: LogitsBatch,
    pub f_nk: LogitsBatch,
    pub f_dk: LogitsBatch,
    /// Teacher only.
    pub f_akb: Option<LogitsBatch>,
    /// Teacher only.
    pub f_dkb: Option<LogitsBatch>,
}

impl GranularityOutputs {
    pub fn head(&self, k: Granularity) -> &LogitsBatch {
        match k {
            Granularity::Ak => &self.f_ak,
            Granularity::Nk => &self.f_nk,
            Granularity::Dk => &self.f_dk,
        }
    }

    pub fn heads(&self) -> HeadMap<LogitsBatch> {
        Granularity::ALL.into_iter().map(|k| (k, self.head(k).clone())).collect()
    }

    pub fn branches(&self) -> Option<BranchMap<LogitsBatch>> {
        Some(
            [(Branch::Akb, self.f_akb.clone()?), (Branch::Dkb, self.f_dkb.clone()?)]
                .into_iter()
                .collect(),
        )
    }

    pub fn rows(&self) -> usize {
        self.f_nk.rows()
    }
}

/// Self-analyzing teacher: frozen backbone and classifier plus two branches
/// (encoder followed by an adapter back to `C` outputs).
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherBundle {
    backbone: Backbone,
    classifier: Linear,
    ake: Linear,
    dke: Linear,
    ak_adapter: Linear,
    dk_adapter: Linear,
    spec: GranularitySpec,
    frozen_parts: BTreeSet<Part>,
}

/// Branch activations kept for the self-analysis backward pass.
pub(crate) struct BranchPass {
    pub ak: Array2<f32>,
    pub dk: Array2<f32>,
    pub akb: Array2<f32>,
    pub dkb: Array2<f32>,
}

/// Builds a teacher bundle around a trained network with freshly initialized
/// encoders and adapters. Backbone and classifier are copied unchanged and frozen.
pub fn attach_branches(teacher: &Network, spec: GranularitySpec, seed: u64) -> Result<TeacherBundle> {
    validate_spec(&spec)?;
    if teacher.num_classes() != spec.num_classes {
        return Err(Error::invalid(format!(
            "teacher classifier has {} outputs but the spec says C = {}",
            teacher.num_classes(),
            spec.num_classes
        )));
    }
    let flat = teacher.classifier.input_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ake = Linear::new(flat, spec.dim_ak, Init::FanIn, &mut rng);
    let ak_adapter = Linear::new(spec.dim_ak, spec.num_classes, Init::FanIn, &mut rng);
    let dke = Linear::new(flat, spec.dim_dk, Init::FanIn, &mut rng);
    let dk_adapter = Linear::new(spec.dim_dk, spec.num_classes, Init::FanIn, &mut rng);
    Ok(TeacherBundle {
        backbone: teacher.backbone.clone(),
        classifier: teacher.classifier.clone(),
        ake,
        dke,
        ak_adapter,
        dk_adapter,
        spec,
        frozen_parts: [Part::Backbone, Part::Classifier].into_iter().collect(),
    })
}

impl TeacherBundle {
    pub(crate) fn from_parts(
        network: Network,
        heads: [Linear; 4],
        spec: GranularitySpec,
        frozen_parts: BTreeSet<Part>,
    ) -> Result<Self> {
        let [ake, dke, ak_adapter, dk_adapter] = heads;
        let flat = network.classifier.input_dim();
        let shapes_ok = ake.input_dim() == flat
            && dke.input_dim() == flat
            && ake.output_dim() == spec.dim_ak
            && dke.output_dim() == spec.dim_dk
            && ak_adapter.input_dim() == spec.dim_ak
            && dk_adapter.input_dim() == spec.dim_dk
            && ak_adapter.output_dim() == spec.num_classes
            && dk_adapter.output_dim() == spec.num_classes
            && network.num_classes() == spec.num_classes;
        if !shapes_ok {
            return Err(Error::invalid("teacher bundle parts do not match the granularity spec"));
        }
        Ok(Self {
            backbone: network.backbone,
            classifier: network.classifier,
            ake,
            dke,
            ak_adapter,
            dk_adapter,
            spec,
            frozen_parts,
        })
    }

    pub fn spec(&self) -> GranularitySpec {
        self.spec
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn frozen_parts(&self) -> &BTreeSet<Part> {
        &self.frozen_parts
    }

    pub fn is_frozen(&self, part: Part) -> bool {
        self.frozen_parts.contains(&part)
    }

    /// Freezes every part; used once self-analysis is complete.
    pub fn freeze_all(&mut self) {
        self.frozen_parts = [
            Part::Backbone,
            Part::Classifier,
            Part::Ake,
            Part::Dke,
            Part::AkAdapter,
            Part::DkAdapter,
        ]
        .into_iter()
        .collect();
    }

    /// Affine head for one of the non-backbone parts.
    pub fn head(&self, part: Part) -> Option<&Linear> {
        match part {
            Part::Backbone => None,
            Part::Classifier => Some(&self.classifier),
            Part::Ake => Some(&self.ake),
            Part::Dke => Some(&self.dke),
            Part::AkAdapter => Some(&self.ak_adapter),
            Part::DkAdapter => Some(&self.dk_adapter),
        }
    }

    /// Mutable access to a non-frozen head; frozen parts are refused.
    pub fn head_mut(&mut self, part: Part) -> Result<&mut Linear> {
        if self.is_frozen(part) {
            return Err(Error::invalid(format!("part {part} is frozen")));
        }
        match part {
            Part::Backbone => Err(Error::invalid("backbone is not an affine head")),
            Part::Classifier => Ok(&mut self.classifier),
            Part::Ake => Ok(&mut self.ake),
            Part::Dke => Ok(&mut self.dke),
            Part::AkAdapter => Ok(&mut self.ak_adapter),
            Part::DkAdapter => Ok(&mut self.dk_adapter),
        }
    }

    /// Backbone and classifier as a plain network.
    pub fn network(&self) -> Network {
        Network { backbone: self.backbone.clone(), classifier: self.classifier.clone() }
    }

    pub fn part_params(&self, part: Part) -> Vec<(String, &Param)> {
        match part {
            Part::Backbone => backbone_params(&self.backbone),
            _ => linear_params(part.name(), self.head(part).expect("affine part")),
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Param)> {
        [Part::Backbone, Part::Classifier, Part::Ake, Part::Dke, Part::AkAdapter, Part::DkAdapter]
            .into_iter()
            .flat_map(|p| self.part_params(p))
            .collect()
    }

    pub(crate) fn named_params_mut_unchecked(&mut self) -> Vec<(String, &mut Param)> {
        let mut v = backbone_params_mut(&mut self.backbone);
        v.extend(linear_params_mut(Part::Classifier.name(), &mut self.classifier));
        v.extend(linear_params_mut(Part::Ake.name(), &mut self.ake));
        v.extend(linear_params_mut(Part::Dke.name(), &mut self.dke));
        v.extend(linear_params_mut(Part::AkAdapter.name(), &mut self.ak_adapter));
        v.extend(linear_params_mut(Part::DkAdapter.name(), &mut self.dk_adapter));
        v
    }

    /// Parameters of every part that is not frozen.
    pub fn trainable_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut v = Vec::new();
        if !self.frozen_parts.contains(&Part::Backbone) {
            v.extend(backbone_params_mut(&mut self.backbone));
        }
        let frozen = self.frozen_parts.clone();
        for (part, lin) in [
            (Part::Classifier, &mut self.classifier),
            (Part::Ake, &mut self.ake),
            (Part::Dke, &mut self.dke),
            (Part::AkAdapter, &mut self.ak_adapter),
            (Part::DkAdapter, &mut self.dk_adapter),
        ] {
            if !frozen.contains(&part) {
                v.extend(linear_params_mut(part.name(), lin));
            }
        }
        v
    }

    pub fn checksum_parts(&self, parts: &[Part]) -> String {
        checksum(parts.iter().flat_map(|&p| self.part_params(p)))
    }

    pub fn checksum(&self) -> String {
        checksum(self.named_params())
    }

    /// All five head outputs computed from one shared flatten representation.
    pub fn forward(&self, x: &Array2<f32>) -> Result<GranularityOutputs> {
        let f = self.backbone.forward(x)?;
        self.outputs_from_features(&f)
    }

    pub fn outputs_from_features(&self, f: &Array2<f32>) -> Result<GranularityOutputs> {
        let ak = self.ake.forward(f);
        let dk = self.dke.forward(f);
        Ok(GranularityOutputs {
            f_nk: to_logits(&self.classifier.forward(f), "classifier")?,
            f_akb: Some(to_logits(&self.ak_adapter.forward(&ak), "ak_adapter")?),
            f_dkb: Some(to_logits(&self.dk_adapter.forward(&dk), "dk_adapter")?),
            f_ak: to_logits(&ak, "ake")?,
            f_dk: to_logits(&dk, "dke")?,
        })
    }

    pub(crate) fn branch_forward(&self, f: &Array2<f32>) -> BranchPass {
        let ak = self.ake.forward(f);
        let dk = self.dke.forward(f);
        let akb = self.ak_adapter.forward(&ak);
        let dkb = self.dk_adapter.forward(&dk);
        BranchPass { ak, dk, akb, dkb }
    }

    /// Accumulates gradients into the encoders and adapters only.
    pub(crate) fn branch_backward(
        &mut self,
        f: &Array2<f32>,
        pass: &BranchPass,
        g_akb: &Array2<f32>,
        g_dkb: &Array2<f32>,
    ) -> Result<()> {
        for part in [Part::Ake, Part::Dke, Part::AkAdapter, Part::DkAdapter] {
            if self.is_frozen(part) {
                return Err(Error::invalid(format!("cannot train frozen part {part}")));
            }
        }
        let g_ak = self.ak_adapter.backward(&pass.ak, g_akb, true).expect("input grad");
        self.ake.backward(f, &g_ak, false);
        let g_dk = self.dk_adapter.backward(&pass.dk, g_dkb, true).expect("input grad");
        self.dke.backward(f, &g_dk, false);
        Ok(())
    }
}

impl NativeModel for TeacherBundle {
    fn features(&self, x: &Array2<f32>) -> Result<Array2<f32>> {
        self.backbone.forward(x)
    }

    fn native_from_features(&self, f: &Array2<f32>) -> Array2<f32> {
        self.classifier.forward(f)
    }

    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }
}

/// Student network with its two granularity encoders (no adapters).
#[derive(Debug, Clone, PartialEq)]
pub struct StudentBundle {
    backbone: Backbone,
    classifier: Linear,
    ake: Linear,
    dke: Linear,
    spec: GranularitySpec,
}

pub(crate) struct StudentPass {
    features: Array2<f32>,
    cache: BackboneCache,
}

impl StudentBundle {
    /// Randomly initialized student; backbone, classifier and encoders all drawn from `seed`.
    pub fn new(arch: BackboneArch, spec: GranularitySpec, seed: u64) -> Result<Self> {
        validate_spec(&spec)?;
        let net = Network::new(arch, spec.num_classes, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_E4C0_DE25);
        let flat = net.classifier.input_dim();
        let ake = Linear::new(flat, spec.dim_ak, Init::FanIn, &mut rng);
        let dke = Linear::new(flat, spec.dim_dk, Init::FanIn, &mut rng);
        Ok(Self { backbone: net.backbone, classifier: net.classifier, ake, dke, spec })
    }

    pub fn from_parts(network: Network, ake: Linear, dke: Linear, spec: GranularitySpec) -> Result<Self> {
        validate_spec(&spec)?;
        let flat = network.classifier.input_dim();
        if network.num_classes() != spec.num_classes
            || ake.input_dim() != flat
            || dke.input_dim() != flat
            || ake.output_dim() != spec.dim_ak
            || dke.output_dim() != spec.dim_dk
        {
            return Err(Error::invalid("student parts do not match the granularity spec"));
        }
        Ok(Self { backbone: network.backbone, classifier: network.classifier, ake, dke, spec })
    }

    pub fn spec(&self) -> GranularitySpec {
        self.spec
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn head(&self, part: Part) -> Option<&Linear> {
        match part {
            Part::Classifier => Some(&self.classifier),
            Part::Ake => Some(&self.ake),
            Part::Dke => Some(&self.dke),
            _ => None,
        }
    }

    pub fn head_mut(&mut self, part: Part) -> Option<&mut Linear> {
        match part {
            Part::Classifier => Some(&mut self.classifier),
            Part::Ake => Some(&mut self.ake),
            Part::Dke => Some(&mut self.dke),
            _ => None,
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Param)> {
        let mut v = backbone_params(&self.backbone);
        v.extend(linear_params(Part::Classifier.name(), &self.classifier));
        v.extend(linear_params(Part::Ake.name(), &self.ake));
        v.extend(linear_params(Part::Dke.name(), &self.dke));
        v
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut v = backbone_params_mut(&mut self.backbone);
        v.extend(linear_params_mut(Part::Classifier.name(), &mut self.classifier));
        v.extend(linear_params_mut(Part::Ake.name(), &mut self.ake));
        v.extend(linear_params_mut(Part::Dke.name(), &mut self.dke));
        v
    }

    pub fn checksum(&self) -> String {
        checksum(self.named_params())
    }

    pub fn forward(&self, x: &Array2<f32>) -> Result<GranularityOutputs> {
        let f = self.backbone.forward(x)?;
        self.outputs_from_features(&f)
    }

    fn outputs_from_features(&self, f: &Array2<f32>) -> Result<GranularityOutputs> {
        Ok(GranularityOutputs {
            f_ak: to_logits(&self.ake.forward(f), "student ake")?,
            f_nk: to_logits(&self.classifier.forward(f), "student classifier")?,
            f_dk: to_logits(&self.dke.forward(f), "student dke")?,
            f_akb: None,
            f_dkb: None,
        })
    }

    pub(crate) fn forward_train(&self, x: &Array2<f32>) -> Result<(GranularityOutputs, StudentPass)> {
        let (features, cache) = self.backbone.forward_train(x)?;
        let outs = self.outputs_from_features(&features)?;
        Ok((outs, StudentPass { features, cache }))
    }

    /// Backpropagates per-head gradients (missing heads contribute nothing).
    pub(crate) fn backward(&mut self, pass: StudentPass, grads: &HeadMap<Array2<f64>>) {
        let f = &pass.features;
        let mut gf = Array2::<f32>::zeros(f.raw_dim());
        for (k, g) in grads {
            let g = g.mapv(|v| v as f32);
            let lin = match k {
                Granularity::Ak => &mut self.ake,
                Granularity::Nk => &mut self.classifier,
                Granularity::Dk => &mut self.dke,
            };
            gf += &lin.backward(f, &g, true).expect("input grad");
        }
        self.backbone.backward(pass.cache, gf);
    }

    /// Drops the encoders, keeping backbone and classifier.
    pub fn strip(self) -> Network {
        Network { backbone: self.backbone, classifier: self.classifier }
    }
}

impl NativeModel for StudentBundle {
    fn features(&self, x: &Array2<f32>) -> Result<Array2<f32>> {
        self.backbone.forward(x)
    }

    fn native_from_features(&self, f: &Array2<f32>) -> Array2<f32> {
        self.classifier.forward(f)
    }

    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }
}

/// Deployable copy of a student: backbone and classifier only.
pub fn strip_encoders(student: &StudentBundle) -> Network {
    student.clone().strip()
}
