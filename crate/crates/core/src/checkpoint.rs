//! Single-file checkpoint archive.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "MGKDCKPT"
//! version      u32      FORMAT_VERSION
//! entry_count  u32
//! entry*       repeated entry_count times:
//!   name_len   u32
//!   name       name_len bytes, UTF-8
//!   kind       u8       0 = JSON document, 1 = f32 tensor
//!   ndim       u32
//!   dims       ndim × u64   (JSON: ndim = 1, dims = [byte length])
//!   payload    JSON bytes, or prod(dims) × f32
//! ```
//!
//! The first entry is always `metadata.json`. Tensor entries follow in
//! lexicographic name order, so saving the same checkpoint twice produces
//! identical bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BackboneArch, GranularitySpec, Linear, Network, Param, Part, StudentBundle, TeacherBundle};

pub const MAGIC: &[u8; 8] = b"MGKDCKPT";
pub const FORMAT_VERSION: u32 = 1;
const METADATA_ENTRY: &str = "metadata.json";

/// Version string embedded in checkpoints and reports.
pub fn code_version() -> String {
    match option_env!("MGKD_GIT_DESCRIBE") {
        Some(g) => format!("{} ({g})", env!("CARGO_PKG_VERSION")),
        None => env!("CARGO_PKG_VERSION").to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Backbone and classifier only.
    Network,
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub kind: ModelKind,
    pub arch: BackboneArch,
    pub num_classes: usize,
    pub spec: Option<GranularitySpec>,
    #[serde(default)]
    pub temperatures: BTreeMap<String, f64>,
    pub seed: u64,
    pub code_version: String,
    #[serde(default)]
    pub frozen_parts: Vec<Part>,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

impl CheckpointMeta {
    pub fn new(kind: ModelKind, arch: BackboneArch, num_classes: usize, seed: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind,
            arch,
            num_classes,
            spec: None,
            temperatures: BTreeMap::new(),
            seed,
            code_version: code_version(),
            frozen_parts: Vec::new(),
            extra: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    fn from_param(p: &Param) -> Self {
        Self { shape: p.value.shape().to_vec(), data: p.value.iter().copied().collect() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new<'a>(meta: CheckpointMeta, params: impl IntoIterator<Item = (String, &'a Param)>) -> Self {
        let tensors = params.into_iter().map(|(n, p)| (n, Tensor::from_param(p))).collect();
        Self { meta, tensors }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&((self.tensors.len() + 1) as u32).to_le_bytes());
        write_header(&mut out, METADATA_ENTRY, 0, &[meta.len()]);
        out.extend_from_slice(&meta);
        for (name, t) in &self.tensors {
            write_header(&mut out, name, 1, &t.shape);
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint archive (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::IncompatibleVersion { found: version, expected: FORMAT_VERSION });
        }
        let count = r.u32()? as usize;
        let mut meta = None;
        let mut tensors = BTreeMap::new();
        for i in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format(format!("entry {i}: name is not UTF-8")))?
                .to_string();
            let kind = r.take(1)?[0];
            let ndim = r.u32()? as usize;
            let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            match kind {
                0 if name == METADATA_ENTRY && ndim == 1 => {
                    let m: CheckpointMeta = serde_json::from_slice(r.take(dims[0])?)
                        .map_err(|e| Error::Format(format!("metadata: {e}")))?;
                    meta = Some(m);
                }
                1 => {
                    let n: usize = dims.iter().product();
                    let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
                    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
                    tensors.insert(name, Tensor { shape: dims, data });
                }
                other => return Err(Error::Format(format!("entry {i} ({name}): unknown kind {other}"))),
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last entry".into()));
        }
        let meta = meta.ok_or_else(|| Error::Format("missing metadata entry".into()))?;
        Ok(Self { meta, tensors })
    }

    /// Writes atomically through a temporary file in the same directory.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::NotFound { path: path.to_path_buf() });
        }
        Self::from_bytes(&fs::read(path)?)
    }

    /// Copies stored tensors into a model's named parameters; the name sets must match exactly.
    fn fill(&self, params: Vec<(String, &mut Param)>) -> Result<()> {
        let wanted: BTreeSet<&str> = params.iter().map(|(n, _)| n.as_str()).collect();
        let have: BTreeSet<&str> = self.tensors.keys().map(String::as_str).collect();
        if wanted != have {
            let missing: Vec<_> = wanted.difference(&have).collect();
            let unexpected: Vec<_> = have.difference(&wanted).collect();
            return Err(Error::Format(format!(
                "parameter names do not match the architecture (missing {missing:?}, unexpected {unexpected:?})"
            )));
        }
        for (name, p) in params {
            let t = &self.tensors[&name];
            if t.shape != p.value.shape() {
                return Err(Error::Format(format!(
                    "{name}: stored shape {:?} but model expects {:?}",
                    t.shape,
                    p.value.shape()
                )));
            }
            p.value = Array2::from_shape_vec(p.value.raw_dim(), t.data.clone()).expect("shape checked");
            p.zero_grad();
        }
        Ok(())
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.meta.kind != kind {
            return Err(Error::invalid(format!(
                "checkpoint holds a {:?} model, expected {:?}",
                self.meta.kind, kind
            )));
        }
        Ok(())
    }

    fn spec(&self) -> Result<GranularitySpec> {
        self.meta.spec.ok_or_else(|| Error::Format("checkpoint metadata has no granularity spec".into()))
    }
}

fn write_header(out: &mut Vec<u8>, name: &str, kind: u8, dims: &[usize]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(kind);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(*d as u64).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated archive: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Model conversions to and from checkpoints.
pub trait Checkpointable: Sized {
    fn to_checkpoint(&self, seed: u64) -> Checkpoint;
    fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self>;
}

impl Checkpointable for Network {
    fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        use crate::model::NativeModel;
        let meta = CheckpointMeta::new(ModelKind::Network, self.backbone.arch().clone(), self.num_classes(), seed);
        Checkpoint::new(meta, self.named_params())
    }

    fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(ModelKind::Network)?;
        let mut net = Network::new(ckpt.meta.arch.clone(), ckpt.meta.num_classes, 0)?;
        ckpt.fill(net.named_params_mut())?;
        Ok(net)
    }
}

impl Checkpointable for TeacherBundle {
    fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        let spec = self.spec();
        let mut meta = CheckpointMeta::new(ModelKind::Teacher, self.backbone().arch().clone(), spec.num_classes, seed);
        meta.spec = Some(spec);
        meta.frozen_parts = self.frozen_parts().iter().copied().collect();
        Checkpoint::new(meta, self.named_params())
    }

    fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(ModelKind::Teacher)?;
        let spec = ckpt.spec()?;
        let net = Network::new(ckpt.meta.arch.clone(), spec.num_classes, 0)?;
        let flat = net.classifier.input_dim();
        let heads = [
            Linear::zeros(flat, spec.dim_ak),
            Linear::zeros(flat, spec.dim_dk),
            Linear::zeros(spec.dim_ak, spec.num_classes),
            Linear::zeros(spec.dim_dk, spec.num_classes),
        ];
        let frozen = ckpt.meta.frozen_parts.iter().copied().collect();
        let mut bundle = TeacherBundle::from_parts(net, heads, spec, frozen)?;
        ckpt.fill(bundle.named_params_mut_unchecked())?;
        Ok(bundle)
    }
}

impl Checkpointable for StudentBundle {
    fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        let spec = self.spec();
        let mut meta = CheckpointMeta::new(ModelKind::Student, self.backbone().arch().clone(), spec.num_classes, seed);
        meta.spec = Some(spec);
        Checkpoint::new(meta, self.named_params())
    }

    fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(ModelKind::Student)?;
        let spec = ckpt.spec()?;
        let net = Network::new(ckpt.meta.arch.clone(), spec.num_classes, 0)?;
        let flat = net.classifier.input_dim();
        let mut s = StudentBundle::from_parts(net, Linear::zeros(flat, spec.dim_ak), Linear::zeros(flat, spec.dim_dk), spec)?;
        ckpt.fill(s.named_params_mut())?;
        Ok(s)
    }
}

/// Any model a checkpoint can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum LoadedModel {
    Network(Network),
    Teacher(TeacherBundle),
    Student(StudentBundle),
}

impl LoadedModel {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(match ckpt.meta.kind {
            ModelKind::Network => LoadedModel::Network(Network::from_checkpoint(ckpt)?),
            ModelKind::Teacher => LoadedModel::Teacher(TeacherBundle::from_checkpoint(ckpt)?),
            ModelKind::Student => LoadedModel::Student(StudentBundle::from_checkpoint(ckpt)?),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn as_native(&self) -> &dyn crate::model::NativeModel {
        match self {
            LoadedModel::Network(m) => m,
            LoadedModel::Teacher(m) => m,
            LoadedModel::Student(m) => m,
        }
    }

    /// Head outputs, when the model has granularity heads.
    pub fn outputs(&self, x: &Array2<f32>) -> Result<Option<crate::model::GranularityOutputs>> {
        match self {
            LoadedModel::Network(_) => Ok(None),
            LoadedModel::Teacher(t) => t.forward(x).map(Some),
            LoadedModel::Student(s) => s.forward(x).map(Some),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{attach_branches, NativeModel};

    fn net() -> Network {
        Network::new(BackboneArch::cnn(1, 8, 8, [2, 3, 4]), 5, 3).unwrap()
    }

    #[test]
    fn network_round_trip_bit_exact() {
        let n = net();
        let ck = n.to_checkpoint(3);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let m = Network::from_checkpoint(&back).unwrap();
        assert_eq!(m, n);
        let x = Array2::from_shape_fn((4, 64), |(i, j)| ((i * 64 + j) as f32).sin());
        assert_eq!(m.native_logits(&x).unwrap(), n.native_logits(&x).unwrap());
    }

    #[test]
    fn teacher_round_trip_keeps_frozen_parts() {
        let spec = GranularitySpec::new(2, 5, 9).unwrap();
        let mut t = attach_branches(&net(), spec, 1).unwrap();
        t.freeze_all();
        let back = TeacherBundle::from_checkpoint(&Checkpoint::from_bytes(&t.to_checkpoint(0).to_bytes().unwrap()).unwrap())
            .unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn bumped_version_names_both_versions() {
        let mut bytes = net().to_checkpoint(0).to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::IncompatibleVersion { found: 7, expected: 1 }));
        let msg = err.to_string();
        assert!(msg.contains('7') && msg.contains('1'), "{msg}");
    }

    #[test]
    fn truncated_file_is_format_error() {
        let bytes = net().to_checkpoint(0).to_bytes().unwrap();
        for cut in [4, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
    }

    #[test]
    fn wrong_kind_and_missing_file() {
        let ck = net().to_checkpoint(0);
        assert!(StudentBundle::from_checkpoint(&ck).is_err());
        assert!(matches!(Checkpoint::load(Path::new("/nope/x.ckpt")), Err(Error::NotFound { .. })));
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        net().to_checkpoint(0).save(&a).unwrap();
        Checkpoint::load(&a).unwrap().save(&b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }
}
