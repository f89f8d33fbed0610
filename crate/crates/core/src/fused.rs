//! Fused multi-branch inference over one shared backbone.
//!
//! The backbone is walked once up to the first injection site any branch
//! uses. There the activations are replicated into one row block per branch
//! and the walk continues over the stack: layernorms, projections and the
//! feed-forward run once over all blocks with the shared weights, while
//! adapters, attention and heads stay within each block. Every row sees the
//! same arithmetic as a standalone forward pass. Under the parallel
//! schedule the branches are split into one stack per worker thread; the
//! merge keeps insertion order.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::adapters::{L1Branch, SiteKind};
use crate::autodiff::Tape;
use crate::checkpoint;
use crate::error::{CheckpointError, EngineError, ModelError};
use crate::gpt2::{
    finish_stacked, shifted_targets, start, step, step_stacked, Backbone, Cursor, DocumentLoss, Progress,
    TokenSequence, WindowAccumulator, IGNORE_INDEX,
};
use crate::tensor::Tensor;

/// How branch continuations are scheduled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Schedule {
    #[default]
    Parallel,
    Serial,
}

/// One attached branch and the file it came from, if any.
#[derive(Clone, Debug)]
pub struct BranchSlot {
    pub branch: Arc<L1Branch>,
    pub source: Option<PathBuf>,
}

/// A shared backbone with N attached branches in insertion order.
#[derive(Clone, Debug)]
pub struct FusedModel {
    backbone: Arc<Backbone>,
    slots: Vec<BranchSlot>,
}

/// Per-label losses in branch insertion order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossMap(pub Vec<(String, f32)>);

impl LossMap {
    pub fn get(&self, label: &str) -> Option<f32> {
        self.0.iter().find(|(l, _)| l == label).map(|(_, v)| *v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(|(l, _)| l.as_str())
    }

    pub fn values(&self) -> Vec<f32> {
        self.0.iter().map(|(_, v)| *v).collect()
    }

    /// Largest relative difference against `other`, label by label.
    pub fn max_rel_diff(&self, other: &LossMap) -> Option<f32> {
        if self.len() != other.len() {
            return None;
        }
        let mut worst = 0.0f32;
        for ((la, a), (lb, b)) in self.0.iter().zip(&other.0) {
            if la != lb {
                return None;
            }
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(f32::MIN_POSITIVE);
            worst = worst.max(rel);
        }
        Some(worst)
    }

    pub fn bit_eq(&self, other: &LossMap) -> bool {
        self.len() == other.len()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|((la, a), (lb, b))| la == lb && a.to_bits() == b.to_bits())
    }
}

/// Outcome of the argmin over branch losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decision {
    pub index: usize,
    /// Runner-up loss minus winning loss; 0 with a single branch.
    pub margin: f32,
    /// Another branch reached exactly the winning loss.
    pub tie: bool,
}

/// Argmin with the first index winning ties.
pub fn argmin(losses: &[f32]) -> Option<Decision> {
    let (index, &best) = losses
        .iter()
        .enumerate()
        .reduce(|acc, cur| if cur.1 < acc.1 { cur } else { acc })?;
    let runner_up = losses
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != index)
        .map(|(_, &v)| v)
        .reduce(f32::min);
    Some(Decision {
        index,
        margin: runner_up.map_or(0.0, |r| r - best),
        tie: runner_up == Some(best),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct InferenceResult {
    pub losses: LossMap,
    pub predicted: String,
    pub margin: f32,
    pub tie: bool,
    /// Wall-clock time of the loss computation only.
    #[serde(serialize_with = "serialize_secs")]
    pub elapsed: Duration,
}

fn serialize_secs<S: serde::Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(d.as_secs_f64())
}

impl FusedModel {
    pub fn new(backbone: Arc<Backbone>) -> Self {
        Self {
            backbone,
            slots: Vec::new(),
        }
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn shared_backbone(&self) -> Arc<Backbone> {
        Arc::clone(&self.backbone)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn labels(&self) -> Vec<String> {
        self.slots.iter().map(|s| s.branch.label().to_string()).collect()
    }

    pub fn slots(&self) -> &[BranchSlot] {
        &self.slots
    }

    pub fn branch(&self, label: &str) -> Option<&L1Branch> {
        self.slots
            .iter()
            .find(|s| s.branch.label() == label)
            .map(|s| s.branch.as_ref())
    }

    /// Appends a branch. Labels must be unique and the branch must match
    /// the backbone configuration.
    pub fn attach(&mut self, branch: L1Branch, source: Option<PathBuf>) -> Result<(), EngineError> {
        branch.check_compatible(&self.backbone)?;
        if self.branch(branch.label()).is_some() {
            return Err(EngineError::Contract(format!(
                "a branch labelled {:?} is already attached",
                branch.label()
            )));
        }
        self.slots.push(BranchSlot {
            branch: Arc::new(branch),
            source,
        });
        Ok(())
    }

    pub fn detach(&mut self, label: &str) -> Option<BranchSlot> {
        let idx = self.slots.iter().position(|s| s.branch.label() == label)?;
        Some(self.slots.remove(idx))
    }

    /// SHA-256 binding the backbone weights to the attached branches'
    /// labels and configurations.
    pub fn binding_checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.backbone.frozen_hash().as_bytes());
        for s in &self.slots {
            let b = &s.branch;
            h.update(b.label().as_bytes());
            h.update([0]);
            h.update(b.model_config().to_string().as_bytes());
            h.update(format!("{}/{}", b.config().architecture, b.config().reduction_factor).as_bytes());
        }
        hex::encode(h.finalize())
    }

    fn ensure_nonempty(&self) -> Result<(), EngineError> {
        if self.slots.is_empty() {
            return Err(EngineError::Contract("the fused model has no branches".into()));
        }
        Ok(())
    }

    fn windows<'t>(&self, tokens: &'t TokenSequence) -> Result<Vec<&'t [u32]>, EngineError> {
        tokens.check_vocab(self.backbone.config().vocab_size)?;
        let windows = tokens.windows(self.backbone.config().max_seq_len);
        if windows.is_empty() {
            return Err(ModelError::SequenceTooShort {
                len: tokens.len(),
                min: 2,
            }
            .into());
        }
        Ok(windows)
    }

    /// Whether any attached branch injects at `(layer, kind)`.
    fn site_used(&self, layer: usize, kind: SiteKind) -> bool {
        self.slots.iter().any(|s| s.branch.site(layer, kind).is_some())
    }

    /// Loss of every branch on `tokens`, sharing the backbone prefix.
    pub fn fused_losses(&self, tokens: &TokenSequence) -> Result<LossMap, EngineError> {
        self.fused_losses_with(tokens, Schedule::Parallel)
    }

    pub fn fused_losses_with(&self, tokens: &TokenSequence, schedule: Schedule) -> Result<LossMap, EngineError> {
        self.ensure_nonempty()?;
        let windows = self.windows(tokens)?;
        let mut acc = vec![WindowAccumulator::default(); self.slots.len()];
        for w in windows {
            let prefix = self.shared_prefix(w)?;
            let chunk = match schedule {
                Schedule::Parallel => self.slots.len().div_ceil(rayon::current_num_threads().max(1)),
                Schedule::Serial => self.slots.len(),
            };
            let per_chunk: Vec<Result<Vec<f32>, EngineError>> = match schedule {
                Schedule::Parallel => self
                    .slots
                    .par_chunks(chunk)
                    .map(|c| self.continue_stacked(c, &prefix, w))
                    .collect(),
                Schedule::Serial => vec![self.continue_stacked(&self.slots, &prefix, w)],
            };
            let mut losses = Vec::with_capacity(self.slots.len());
            for c in per_chunk {
                losses.extend(c?);
            }
            for (a, loss) in acc.iter_mut().zip(losses) {
                a.push(loss, w.len() - 1);
            }
        }
        self.collect(acc.into_iter().map(WindowAccumulator::finish))
    }

    fn collect(&self, losses: impl Iterator<Item = DocumentLoss>) -> Result<LossMap, EngineError> {
        let mut out = Vec::with_capacity(self.slots.len());
        for (s, l) in self.slots.iter().zip(losses) {
            if !l.loss.is_finite() {
                return Err(EngineError::NonFinite {
                    label: s.branch.label().to_string(),
                    loss: l.loss,
                });
            }
            out.push((s.branch.label().to_string(), l.loss));
        }
        Ok(LossMap(out))
    }

    /// Walks the backbone until the first site some branch uses and
    /// returns the activations there.
    fn shared_prefix(&self, window: &[u32]) -> Result<SharedPrefix, EngineError> {
        let mut tape = Tape::new();
        let vars = self.backbone.register(&mut tape);
        let mut cursor = start(&mut tape, &self.backbone, &vars, window)?;
        loop {
            if self.site_used(cursor.layer, cursor.site) {
                break;
            }
            match step(&mut tape, &self.backbone, &vars, cursor, None)? {
                Progress::At(c) => cursor = c,
                Progress::Done(x) => {
                    // No branch injects anywhere; only the heads differ.
                    return Ok(SharedPrefix::Final(tape.value(x).clone()));
                }
            }
        }
        Ok(SharedPrefix::At {
            layer: cursor.layer,
            site: cursor.site,
            residual: tape.value(cursor.residual).clone(),
            sublayer: tape.value(cursor.sublayer).clone(),
        })
    }

    /// Continues the walk for `slots` stacked along rows and returns one
    /// window loss per slot.
    fn continue_stacked(&self, slots: &[BranchSlot], prefix: &SharedPrefix, window: &[u32]) -> Result<Vec<f32>, EngineError> {
        let n = slots.len();
        let mut tape = Tape::new();
        let vars = self.backbone.register(&mut tape);
        let bvars: Vec<_> = slots.iter().map(|s| s.branch.register(&mut tape, false)).collect();
        let heads: Vec<_> = bvars.iter().map(|b| b.head).collect();
        let x = match prefix {
            SharedPrefix::At {
                layer,
                site,
                residual,
                sublayer,
            } => {
                let mut progress = Progress::At(Cursor {
                    layer: *layer,
                    site: *site,
                    residual: tape.constant(&replicate(residual, n)?),
                    sublayer: tape.constant(&replicate(sublayer, n)?),
                });
                loop {
                    match progress {
                        Progress::At(c) => {
                            let adapters: Vec<_> = slots
                                .iter()
                                .zip(&bvars)
                                .map(|(s, bv)| bv.site(c.layer, c.site).map(|v| (v, s.branch.config().nonlinearity)))
                                .collect();
                            progress = step_stacked(&mut tape, &self.backbone, &vars, c, &adapters)?;
                        }
                        Progress::Done(x) => break x,
                    }
                }
            }
            SharedPrefix::Final(x) => tape.constant(&replicate(x, n)?),
        };
        let logits = finish_stacked(&mut tape, &vars, &heads, x)?;
        let targets = shifted_targets(window);
        logits
            .into_iter()
            .map(|l| {
                // Loss on a fresh tape, as the standalone path computes it.
                let mut t = Tape::new();
                let l = t.constant(tape.value(l));
                let ce = t.cross_entropy(l, &targets, IGNORE_INDEX).map_err(ModelError::from)?;
                Ok(t.value(ce.loss).item().map_err(ModelError::from)?)
            })
            .collect()
    }

    /// Branches evaluated strictly one after another through the standalone
    /// path. With `simulate_reload` each branch is first re-read from its
    /// checkpoint file.
    pub fn sequential_losses(&self, tokens: &TokenSequence, simulate_reload: bool) -> Result<LossMap, EngineError> {
        self.ensure_nonempty()?;
        self.windows(tokens)?;
        let mut losses = Vec::with_capacity(self.slots.len());
        for s in &self.slots {
            let loss = if simulate_reload {
                let path = s.source.as_ref().ok_or_else(|| EngineError::MissingCheckpoint {
                    label: s.branch.label().to_string(),
                })?;
                let reloaded = checkpoint::load_branch_checked(path, &self.backbone, Some(s.branch.config()))?;
                if reloaded.label() != s.branch.label() {
                    return Err(EngineError::Contract(format!(
                        "{} holds branch {:?}, expected {:?}",
                        path.display(),
                        reloaded.label(),
                        s.branch.label()
                    )));
                }
                crate::gpt2::document_loss(&self.backbone, tokens, Some(&reloaded))?
            } else {
                crate::gpt2::document_loss(&self.backbone, tokens, Some(&s.branch))?
            };
            losses.push(loss);
        }
        self.collect(losses.into_iter())
    }

    pub fn classify(&self, tokens: &TokenSequence) -> Result<InferenceResult, EngineError> {
        let t0 = Instant::now();
        let losses = self.fused_losses(tokens)?;
        let elapsed = t0.elapsed();
        Ok(self.decide(losses, elapsed))
    }

    /// Builds the result for precomputed losses.
    pub fn decide(&self, losses: LossMap, elapsed: Duration) -> InferenceResult {
        let d = argmin(&losses.values()).expect("loss map is non-empty");
        InferenceResult {
            predicted: losses.0[d.index].0.clone(),
            margin: d.margin,
            tie: d.tie,
            losses,
            elapsed,
        }
    }

    pub fn classify_batch(&self, docs: &[TokenSequence]) -> Result<Vec<InferenceResult>, EngineError> {
        if docs.is_empty() {
            return Err(EngineError::Contract("classify_batch needs at least one document".into()));
        }
        docs.iter().map(|d| self.classify(d)).collect()
    }
}

/// `n` copies of `t` stacked along rows.
fn replicate(t: &Tensor, n: usize) -> Result<Tensor, EngineError> {
    let mut shape = t.shape().to_vec();
    shape[0] *= n;
    let data = t.data().repeat(n);
    Ok(Tensor::new(&shape, data).map_err(ModelError::from)?)
}

enum SharedPrefix {
    At {
        layer: usize,
        site: SiteKind,
        residual: Tensor,
        sublayer: Tensor,
    },
    Final(Tensor),
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_sha256(path: &Path) -> Result<String, EngineError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

const MANIFEST_HEADER: &str = "# prodapt bundle v1";

/// A bundle manifest: the backbone and every branch file with checksums.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub backbone: ManifestEntry,
    pub branches: Vec<(String, ManifestEntry)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub sha256: String,
    pub path: PathBuf,
}

impl Manifest {
    /// Hashes the given files. Paths are stored as given.
    pub fn build(backbone: &Path, branches: &[(String, PathBuf)]) -> Result<Self, EngineError> {
        let entry = |p: &Path| -> Result<ManifestEntry, EngineError> {
            Ok(ManifestEntry {
                sha256: file_sha256(p)?,
                path: p.to_path_buf(),
            })
        };
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(branches.len());
        for (label, p) in branches {
            if label.is_empty() || label.contains(['\t', '\n']) {
                return Err(EngineError::Manifest(format!("label {label:?} cannot be stored in a manifest")));
            }
            if !seen.insert(label.clone()) {
                return Err(EngineError::Manifest(format!("duplicate label {label:?}")));
            }
            out.push((label.clone(), entry(p)?));
        }
        Ok(Self {
            backbone: entry(backbone)?,
            branches: out,
        })
    }

    /// Tab-separated lines: `backbone <sha> <path>` and
    /// `branch <label> <sha> <path>`.
    pub fn render(&self) -> String {
        let mut s = format!("{MANIFEST_HEADER}\n");
        s.push_str(&format!(
            "backbone\t{}\t{}\n",
            self.backbone.sha256,
            self.backbone.path.display()
        ));
        for (label, e) in &self.branches {
            s.push_str(&format!("branch\t{label}\t{}\t{}\n", e.sha256, e.path.display()));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, EngineError> {
        let bad = |n: usize, msg: &str| EngineError::Manifest(format!("line {n}: {msg}"));
        let mut backbone = None;
        let mut branches: Vec<(String, ManifestEntry)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.as_slice() {
                ["backbone", sha, path] => {
                    if backbone.is_some() {
                        return Err(bad(n, "second backbone entry"));
                    }
                    backbone = Some(ManifestEntry {
                        sha256: sha.to_string(),
                        path: PathBuf::from(path),
                    });
                }
                ["branch", label, sha, path] => {
                    if branches.iter().any(|(l, _)| l == label) {
                        return Err(bad(n, &format!("duplicate label {label:?}")));
                    }
                    branches.push((
                        label.to_string(),
                        ManifestEntry {
                            sha256: sha.to_string(),
                            path: PathBuf::from(path),
                        },
                    ));
                }
                _ => return Err(bad(n, "expected `backbone<TAB>sha<TAB>path` or `branch<TAB>label<TAB>sha<TAB>path`")),
            }
        }
        let backbone = backbone.ok_or_else(|| EngineError::Manifest("no backbone entry".into()))?;
        if branches.is_empty() {
            return Err(EngineError::Manifest("no branch entries".into()));
        }
        Ok(Self { backbone, branches })
    }

    /// Rewrites entry paths under `base` as paths relative to it, so a
    /// manifest written into `base` survives moving the directory.
    pub fn relative_to(mut self, base: &Path) -> Self {
        let abs = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
        let b = abs(base);
        let rel = |p: &Path| {
            let t = abs(p);
            t.strip_prefix(&b).map(Path::to_path_buf).unwrap_or(t)
        };
        self.backbone.path = rel(&self.backbone.path);
        for (_, e) in &mut self.branches {
            e.path = rel(&e.path);
        }
        self
    }

    pub fn write(&self, path: &Path) -> Result<(), EngineError> {
        fs::write(path, self.render()).map_err(|source| {
            CheckpointError::Io {
                path: path.to_path_buf(),
                source,
            }
            .into()
        })
    }

    pub fn read(path: &Path) -> Result<Self, EngineError> {
        let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }
}

fn resolve(base: Option<&Path>, p: &Path) -> PathBuf {
    match base {
        Some(dir) if p.is_relative() => dir.join(p),
        _ => p.to_path_buf(),
    }
}

fn verify(entry: &ManifestEntry, path: &Path) -> Result<(), EngineError> {
    let actual = file_sha256(path)?;
    if actual != entry.sha256 {
        return Err(EngineError::Checksum {
            path: path.to_path_buf(),
            expected: entry.sha256.clone(),
            actual,
        });
    }
    Ok(())
}

/// Loads and checks every file named by the manifest at `path`. Relative
/// entries are resolved against the manifest's directory.
pub fn assemble_from_manifest(path: &Path) -> Result<FusedModel, EngineError> {
    let manifest = Manifest::read(path)?;
    let base = path.parent();
    let bpath = resolve(base, &manifest.backbone.path);
    verify(&manifest.backbone, &bpath)?;
    let backbone = Arc::new(checkpoint::load_backbone(&bpath)?);
    let mut model = FusedModel::new(backbone);
    for (label, entry) in &manifest.branches {
        let p = resolve(base, &entry.path);
        verify(entry, &p)?;
        let branch = checkpoint::load_branch(&p, model.backbone())?;
        if branch.label() != label {
            return Err(EngineError::Manifest(format!(
                "{} holds branch {:?}, manifest says {label:?}",
                p.display(),
                branch.label()
            )));
        }
        model.attach(branch, Some(p))?;
    }
    Ok(model)
}
