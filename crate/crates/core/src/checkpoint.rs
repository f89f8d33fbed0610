//! Binary container shared by backbone, branch and SVM files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "PDPT"
//! version    u32
//! payload    u8       1 = backbone, 2 = branch, 3 = svm
//! header     payload-specific, see `Header`
//! count      u32      number of tensors
//! tensor*    name_len u32, name utf-8, ndim u32, dims u32*ndim, data f32*numel
//! ```
//!
//! Strings are a `u32` byte length followed by UTF-8. Reading stops with an
//! integrity error on truncation or trailing bytes.

use std::fs;
use std::path::Path;

use crate::adapters::{
    AdapterArch, AdapterConfig, AdapterSite, BranchMetadata, HeadMode, L1Branch, Nonlinearity, SiteKind,
};
use crate::autodiff::GeluKind;
use crate::error::CheckpointError;
use crate::gpt2::{Backbone, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"PDPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PayloadType {
    Backbone = 1,
    Branch = 2,
    Svm = 3,
}

impl PayloadType {
    pub fn name(self) -> &'static str {
        match self {
            PayloadType::Backbone => "backbone",
            PayloadType::Branch => "branch",
            PayloadType::Svm => "svm",
        }
    }

    fn from_byte(b: u8) -> Result<Self, CheckpointError> {
        match b {
            1 => Ok(PayloadType::Backbone),
            2 => Ok(PayloadType::Branch),
            3 => Ok(PayloadType::Svm),
            other => Err(CheckpointError::Integrity(format!("unknown payload type {other}"))),
        }
    }
}

/// Header of an SVM model file.
#[derive(Clone, Debug, PartialEq)]
pub struct SvmHeader {
    pub labels: Vec<String>,
    pub vocabulary: Vec<String>,
    pub min_df: u32,
    pub lambda: f64,
    pub epochs: u32,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Header {
    Backbone(ModelConfig),
    Branch {
        model: ModelConfig,
        label: String,
        adapter: AdapterConfig,
        metadata: BranchMetadata,
    },
    Svm(SvmHeader),
}

impl Header {
    fn payload(&self) -> PayloadType {
        match self {
            Header::Backbone(_) => PayloadType::Backbone,
            Header::Branch { .. } => PayloadType::Branch,
            Header::Svm(_) => PayloadType::Svm,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Container {
    pub header: Header,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn payload(&self) -> PayloadType {
        self.header.payload()
    }

    pub fn take(&mut self, name: &str) -> Option<Tensor> {
        let idx = self.tensors.iter().position(|(n, _)| n == name)?;
        Some(self.tensors.swap_remove(idx).1)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn model(&mut self, c: &ModelConfig) {
        for v in [c.n_layers, c.d_model, c.n_heads, c.d_ffn, c.vocab_size, c.max_seq_len] {
            self.u32(v as u32);
        }
        self.u8(match c.gelu {
            GeluKind::Tanh => 0,
            GeluKind::Erf => 1,
        });
        self.u8(u8::from(c.tie_lm_head));
    }
    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.str(name);
        self.u32(t.ndim() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        self.0.reserve(t.numel() * 4);
        for v in t.data() {
            self.f32(*v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Integrity(format!(
                "file truncated: needed {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.bytes(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }
    fn f32(&mut self) -> Result<f32, CheckpointError> {
        Ok(f32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        let b = self.bytes(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| CheckpointError::Integrity("string is not valid UTF-8".into()))
    }
    fn model(&mut self) -> Result<ModelConfig, CheckpointError> {
        let mut v = [0usize; 6];
        for slot in &mut v {
            *slot = self.u32()? as usize;
        }
        let gelu = match self.u8()? {
            0 => GeluKind::Tanh,
            1 => GeluKind::Erf,
            other => return Err(CheckpointError::Integrity(format!("unknown gelu tag {other}"))),
        };
        let tie_lm_head = match self.u8()? {
            0 => false,
            1 => true,
            other => return Err(CheckpointError::Integrity(format!("bad tie flag {other}"))),
        };
        Ok(ModelConfig {
            n_layers: v[0],
            d_model: v[1],
            n_heads: v[2],
            d_ffn: v[3],
            vocab_size: v[4],
            max_seq_len: v[5],
            gelu,
            tie_lm_head,
        })
    }
    fn tensor(&mut self) -> Result<(String, Tensor), CheckpointError> {
        let name = self.str()?;
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(CheckpointError::Integrity(format!("tensor {name} claims rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CheckpointError::Integrity(format!("tensor {name} shape overflows")))?;
        let raw = self.bytes(
            numel
                .checked_mul(4)
                .ok_or_else(|| CheckpointError::Integrity(format!("tensor {name} too large")))?,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Integrity(e.to_string()))?;
        Ok((name, t))
    }
}

fn arch_tag(a: AdapterArch) -> u8 {
    match a {
        AdapterArch::Houlsby => 0,
        AdapterArch::Pfeiffer => 1,
    }
}

pub fn encode(header: &Header, tensors: &[(String, &Tensor)]) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(&MAGIC);
    w.u32(FORMAT_VERSION);
    w.u8(header.payload() as u8);
    match header {
        Header::Backbone(cfg) => w.model(cfg),
        Header::Branch {
            model,
            label,
            adapter,
            metadata,
        } => {
            w.model(model);
            w.str(label);
            w.u8(arch_tag(adapter.architecture));
            w.u32(adapter.reduction_factor as u32);
            w.u8(match adapter.nonlinearity {
                Nonlinearity::Gelu => 0,
                Nonlinearity::Relu => 1,
            });
            w.u8(match adapter.head_mode {
                HeadMode::UntiedLmHead => 0,
            });
            w.u32(metadata.trained_epochs);
            match metadata.best_val_loss {
                Some(v) => {
                    w.u8(1);
                    w.f32(v);
                }
                None => {
                    w.u8(0);
                    w.f32(0.0);
                }
            }
            w.u64(metadata.created_at);
        }
        Header::Svm(h) => {
            w.u32(h.labels.len() as u32);
            for l in &h.labels {
                w.str(l);
            }
            w.u32(h.vocabulary.len() as u32);
            for v in &h.vocabulary {
                w.str(v);
            }
            w.u32(h.min_df);
            w.f64(h.lambda);
            w.u32(h.epochs);
            w.u64(h.seed);
        }
    }
    w.u32(tensors.len() as u32);
    for (name, t) in tensors {
        w.tensor(name, t);
    }
    w.0
}

pub fn decode(bytes: &[u8]) -> Result<Container, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.bytes(4)?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic });
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let payload = PayloadType::from_byte(r.u8()?)?;
    let header = match payload {
        PayloadType::Backbone => Header::Backbone(r.model()?),
        PayloadType::Branch => {
            let model = r.model()?;
            let label = r.str()?;
            let architecture = match r.u8()? {
                0 => AdapterArch::Houlsby,
                1 => AdapterArch::Pfeiffer,
                other => return Err(CheckpointError::Integrity(format!("unknown adapter architecture {other}"))),
            };
            let reduction_factor = r.u32()? as usize;
            let nonlinearity = match r.u8()? {
                0 => Nonlinearity::Gelu,
                1 => Nonlinearity::Relu,
                other => return Err(CheckpointError::Integrity(format!("unknown nonlinearity {other}"))),
            };
            let head_mode = match r.u8()? {
                0 => HeadMode::UntiedLmHead,
                other => return Err(CheckpointError::Integrity(format!("unknown head mode {other}"))),
            };
            let trained_epochs = r.u32()?;
            let has_best = r.u8()?;
            let best = r.f32()?;
            let created_at = r.u64()?;
            Header::Branch {
                model,
                label,
                adapter: AdapterConfig {
                    architecture,
                    reduction_factor,
                    nonlinearity,
                    head_mode,
                },
                metadata: BranchMetadata {
                    trained_epochs,
                    best_val_loss: (has_best == 1).then_some(best),
                    created_at,
                },
            }
        }
        PayloadType::Svm => {
            let n = r.u32()? as usize;
            let labels = (0..n).map(|_| r.str()).collect::<Result<_, _>>()?;
            let n = r.u32()? as usize;
            let vocabulary = (0..n).map(|_| r.str()).collect::<Result<_, _>>()?;
            Header::Svm(SvmHeader {
                labels,
                vocabulary,
                min_df: r.u32()?,
                lambda: r.f64()?,
                epochs: r.u32()?,
                seed: r.u64()?,
            })
        }
    };
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        tensors.push(r.tensor()?);
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Integrity(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(Container { header, tensors })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<u64, CheckpointError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| CheckpointError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(bytes.len() as u64)
}

pub fn read_file(path: &Path) -> Result<Container, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}

fn expect_payload(c: &Container, expected: PayloadType) -> Result<(), CheckpointError> {
    if c.payload() != expected {
        return Err(CheckpointError::PayloadType {
            expected: expected.name(),
            found: c.payload().name(),
        });
    }
    Ok(())
}

pub fn encode_backbone(backbone: &Backbone) -> Vec<u8> {
    encode(&Header::Backbone(*backbone.config()), &backbone.named_tensors())
}

pub fn save_backbone(backbone: &Backbone, path: &Path) -> Result<u64, CheckpointError> {
    write_file(path, &encode_backbone(backbone))
}

pub fn decode_backbone(bytes: &[u8]) -> Result<Backbone, CheckpointError> {
    let mut c = decode(bytes)?;
    expect_payload(&c, PayloadType::Backbone)?;
    let Header::Backbone(cfg) = c.header else {
        unreachable!("payload checked")
    };
    let backbone = Backbone::from_named(cfg, |n| c.take(n))?;
    if let Some((name, _)) = c.tensors.first() {
        return Err(CheckpointError::Integrity(format!("unexpected tensor {name} in backbone file")));
    }
    Ok(backbone)
}

pub fn load_backbone(path: &Path) -> Result<Backbone, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_backbone(&bytes)
}

pub fn encode_branch(branch: &L1Branch) -> Vec<u8> {
    let header = Header::Branch {
        model: *branch.model_config(),
        label: branch.label().to_string(),
        adapter: *branch.config(),
        metadata: branch.metadata.clone(),
    };
    encode(&header, &branch.named_tensors())
}

pub fn save_branch(branch: &L1Branch, path: &Path) -> Result<u64, CheckpointError> {
    write_file(path, &encode_branch(branch))
}

/// Decodes a branch and checks it against `backbone` and, when given, the
/// adapter configuration of the current session.
pub fn decode_branch(
    bytes: &[u8],
    backbone: &Backbone,
    expected_adapter: Option<&AdapterConfig>,
) -> Result<L1Branch, CheckpointError> {
    let mut c = decode(bytes)?;
    expect_payload(&c, PayloadType::Branch)?;
    let Header::Branch {
        model,
        label,
        adapter,
        metadata,
    } = c.header.clone()
    else {
        unreachable!("payload checked")
    };
    if &model != backbone.config() {
        return Err(CheckpointError::ConfigMismatch(format!(
            "branch {label:?} was saved for model [{model}], backbone is [{}]",
            backbone.config()
        )));
    }
    if let Some(exp) = expected_adapter {
        if exp != &adapter {
            return Err(CheckpointError::ConfigMismatch(format!(
                "branch {label:?} uses adapter config {} (reduction {}), session expects {} (reduction {})",
                adapter.architecture, adapter.reduction_factor, exp.architecture, exp.reduction_factor
            )));
        }
    }
    let mut sites = Vec::new();
    for layer in 0..model.n_layers {
        for &kind in adapter.architecture.sites() {
            let k = match kind {
                SiteKind::Attention => "attn",
                SiteKind::Ffn => "ffn",
            };
            let mut get = |n: &str| {
                let name = format!("adapter.{layer}.{k}.{n}");
                c.take(&name)
                    .ok_or_else(|| CheckpointError::Integrity(format!("branch file lacks tensor {name}")))
            };
            sites.push(AdapterSite {
                layer,
                kind,
                down_w: get("down.weight")?,
                down_b: get("down.bias")?,
                up_w: get("up.weight")?,
                up_b: get("up.bias")?,
            });
        }
    }
    let head = c
        .take("head.weight")
        .ok_or_else(|| CheckpointError::Integrity("branch file lacks head.weight".into()))?;
    if let Some((name, _)) = c.tensors.first() {
        return Err(CheckpointError::Integrity(format!("unexpected tensor {name} in branch file")));
    }
    let mut branch = L1Branch::from_parts(label, adapter, model, sites, head, metadata)?;
    branch.set_trainable(false);
    Ok(branch)
}

pub fn load_branch(path: &Path, backbone: &Backbone) -> Result<L1Branch, CheckpointError> {
    load_branch_checked(path, backbone, None)
}

pub fn load_branch_checked(
    path: &Path,
    backbone: &Backbone,
    expected_adapter: Option<&AdapterConfig>,
) -> Result<L1Branch, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_branch(&bytes, backbone, expected_adapter)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn backbone() -> Backbone {
        Backbone::init(ModelConfig::default(), 3).unwrap()
    }

    #[test]
    fn backbone_bytes_roundtrip_exactly() {
        let b = backbone();
        let bytes = encode_backbone(&b);
        assert_eq!(&bytes[..4], b"PDPT");
        let back = decode_backbone(&bytes).unwrap();
        assert_eq!(back.frozen_hash(), b.frozen_hash());
        assert_eq!(encode_backbone(&back), bytes);
    }

    #[test]
    fn branch_roundtrip_and_payload_check() {
        let b = backbone();
        let branch = L1Branch::init(AdapterConfig::default(), &b, "KOR", 1).unwrap();
        let bytes = encode_branch(&branch);
        let back = decode_branch(&bytes, &b, None).unwrap();
        assert_eq!(encode_branch(&back), bytes);
        assert_eq!(back.label(), "KOR");
        assert!(matches!(
            decode_backbone(&bytes),
            Err(CheckpointError::PayloadType { .. })
        ));
    }

    #[test]
    fn truncation_is_an_integrity_error() {
        let b = backbone();
        let branch = L1Branch::init(AdapterConfig::default(), &b, "KOR", 1).unwrap();
        let bytes = encode_branch(&branch);
        for cut in [5usize, 20, bytes.len() / 2, bytes.len() - 1] {
            let err = decode_branch(&bytes[..cut], &b, None).unwrap_err();
            assert!(matches!(err, CheckpointError::Integrity(_)), "cut {cut}: {err}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_branch(&extra, &b, None), Err(CheckpointError::Integrity(_))));
    }

    #[test]
    fn wrong_magic_and_version() {
        let b = backbone();
        let mut bytes = encode_backbone(&b);
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(CheckpointError::BadMagic { .. })));
        let mut bytes = encode_backbone(&b);
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(CheckpointError::Version { found: 9, .. })));
    }

    #[test]
    fn branch_for_other_model_is_rejected() {
        let b = backbone();
        let other = Backbone::init(
            ModelConfig {
                n_layers: 3,
                ..ModelConfig::default()
            },
            3,
        )
        .unwrap();
        let branch = L1Branch::init(AdapterConfig::default(), &other, "X", 0).unwrap();
        let err = decode_branch(&encode_branch(&branch), &b, None).unwrap_err();
        assert!(matches!(err, CheckpointError::ConfigMismatch(_)));
    }
}
