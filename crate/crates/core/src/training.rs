//! Frozen-backbone training of a single L1 branch.
//!
//! Only branch tensors are registered as gradient leaves; the backbone is
//! registered as constants, so its weights can neither receive gradients
//! nor change. Validation runs once per epoch and the branch returned is
//! the best-validation snapshot.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterConfig, L1Branch};
use crate::autodiff::Tape;
use crate::error::{ModelError, TrainError};
use crate::gpt2::{self, document_loss, Backbone, TokenSequence, IGNORE_INDEX};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub early_stop_patience: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub val_fraction: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            learning_rate: 1e-4,
            batch_size: 4,
            early_stop_patience: 3,
            adam: AdamConfig::default(),
            seed: 0,
            val_fraction: 0.1,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(TrainError::InvalidConfig(format!(
                "val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if self.early_stop_patience == 0 {
            return Err(TrainError::InvalidConfig("early_stop_patience must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Outcome of feeding one validation loss to an [`EarlyStopper`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    NoImprovement,
    Stop,
}

/// Patience-based early stopping over a stream of validation losses.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<(usize, f32)>,
    stale: usize,
    seen: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
            seen: 0,
        }
    }

    /// Records the validation loss of the next epoch (1-based numbering).
    pub fn observe(&mut self, val_loss: f32) -> Verdict {
        self.seen += 1;
        let improved = match self.best {
            None => true,
            Some((_, best)) => val_loss < best,
        };
        if improved {
            self.best = Some((self.seen, val_loss));
            self.stale = 0;
            Verdict::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                Verdict::Stop
            } else {
                Verdict::NoImprovement
            }
        }
    }

    /// `(epoch, loss)` of the best validation so far.
    pub fn best(&self) -> Option<(usize, f32)> {
        self.best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Token-weighted mean training loss over the epoch's batches.
    pub train_loss: f32,
    pub val_loss: f32,
    pub best_val_loss: f32,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub label: String,
    pub train_docs: usize,
    pub val_docs: usize,
    /// Validation loss of the untrained branch.
    pub initial_val_loss: f32,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f32,
    pub stopped_early: bool,
    pub total_steps: usize,
    /// True when no backbone tensor received a gradient at any step.
    pub backbone_grads_absent: bool,
    pub backbone_hash_before: String,
    pub backbone_hash_after: String,
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum ReportLine<'a> {
    Epoch(&'a EpochRecord),
    Summary {
        label: &'a str,
        train_docs: usize,
        val_docs: usize,
        initial_val_loss: f32,
        best_epoch: usize,
        best_val_loss: f32,
        stopped_early: bool,
        total_steps: usize,
        backbone_grads_absent: bool,
        backbone_hash_before: &'a str,
        backbone_hash_after: &'a str,
    },
}

impl TrainReport {
    /// One JSON record per epoch followed by a summary record.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for e in &self.epochs {
            serde_json::to_writer(&mut out, &ReportLine::Epoch(e))?;
            out.write_all(b"\n")?;
        }
        let summary = ReportLine::Summary {
            label: &self.label,
            train_docs: self.train_docs,
            val_docs: self.val_docs,
            initial_val_loss: self.initial_val_loss,
            best_epoch: self.best_epoch,
            best_val_loss: self.best_val_loss,
            stopped_early: self.stopped_early,
            total_steps: self.total_steps,
            backbone_grads_absent: self.backbone_grads_absent,
            backbone_hash_before: &self.backbone_hash_before,
            backbone_hash_after: &self.backbone_hash_after,
        };
        serde_json::to_writer(&mut out, &summary)?;
        out.write_all(b"\n")
    }

    pub fn first_train_loss(&self) -> Option<f32> {
        self.epochs.first().map(|e| e.train_loss)
    }

    pub fn last_train_loss(&self) -> Option<f32> {
        self.epochs.last().map(|e| e.train_loss)
    }
}

/// Mean over documents of the windowed document loss.
pub fn validate(backbone: &Backbone, branch: Option<&L1Branch>, val_set: &[TokenSequence]) -> Result<f32, TrainError> {
    if val_set.is_empty() {
        return Err(TrainError::Contract("validation set is empty".into()));
    }
    let mut total = 0.0f64;
    for doc in val_set {
        total += f64::from(document_loss(backbone, doc, branch)?.loss);
    }
    Ok((total / val_set.len() as f64) as f32)
}

/// Seeded train/validation split. A single-document corpus validates on
/// its own training document.
pub fn split_train_val(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    if n < 2 {
        return (idx.clone(), idx);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed_5eed_5eed);
    idx.shuffle(&mut rng);
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

struct Adam {
    cfg: AdamConfig,
    lr: f32,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    fn new(cfg: AdamConfig, lr: f32, shapes: &[usize]) -> Self {
        Self {
            cfg,
            lr,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    fn update(&mut self, params: Vec<&mut crate::tensor::Tensor>, grads: &[Vec<f32>]) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step);
        let bc2 = 1.0 - beta2.powi(self.step);
        for (i, p) in params.into_iter().enumerate() {
            let g = &grads[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Clips a set of gradient buffers to a global L2 norm; returns the norm
/// before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f32) -> f32 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| f64::from(*v) * f64::from(*v))
        .sum::<f64>()
        .sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Loss and gradients of one batch: the mean over every predicted token in
/// the batch, across all windows of all documents.
pub struct BatchGradients {
    pub loss: f32,
    pub predicted: usize,
    /// One buffer per branch tensor, in [`L1Branch::params`] order.
    pub grads: Vec<Vec<f32>>,
    pub backbone_grads_absent: bool,
}

pub fn batch_gradients(
    backbone: &Backbone,
    branch: &L1Branch,
    docs: &[&TokenSequence],
) -> Result<BatchGradients, TrainError> {
    let max_len = backbone.config().max_seq_len;
    let windows: Vec<&[u32]> = docs.iter().flat_map(|d| d.windows(max_len)).collect();
    let predicted: usize = windows.iter().map(|w| w.len() - 1).sum();
    if predicted == 0 {
        return Err(TrainError::Contract("batch has no next-token pairs".into()));
    }
    let mut tape = Tape::new();
    let bvars = backbone.register(&mut tape);
    let brvars = branch.register(&mut tape, true);
    let mut total = None;
    for w in &windows {
        let logits = gpt2::logits_on_tape(&mut tape, backbone, &bvars, Some((branch, &brvars)), w)?;
        let ce = tape
            .cross_entropy(logits, &gpt2::shifted_targets(w), IGNORE_INDEX)
            .map_err(ModelError::from)?;
        let weighted = tape
            .scale(ce.loss, (w.len() - 1) as f32 / predicted as f32)
            .map_err(ModelError::from)?;
        total = Some(match total {
            None => weighted,
            Some(acc) => tape.add(acc, weighted).map_err(ModelError::from)?,
        });
    }
    let loss_var = total.expect("at least one window");
    let loss = tape.value(loss_var).item().map_err(ModelError::from)?;
    tape.backward(loss_var).map_err(ModelError::from)?;
    let grads = brvars
        .vars()
        .into_iter()
        .zip(branch.params())
        .map(|(v, p)| tape.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    let backbone_grads_absent = bvars.all_vars().into_iter().all(|v| tape.grad(v).is_none());
    Ok(BatchGradients {
        loss,
        predicted,
        grads,
        backbone_grads_absent,
    })
}

/// Trains one branch for `label` on `corpus` with the backbone frozen.
pub fn train_branch(
    backbone: &Backbone,
    corpus: &[TokenSequence],
    label: &str,
    adapter: AdapterConfig,
    config: &TrainConfig,
) -> Result<(L1Branch, TrainReport), TrainError> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::Contract(format!("corpus for {label:?} is empty")));
    }
    for (i, doc) in corpus.iter().enumerate() {
        doc.check_vocab(backbone.config().vocab_size)?;
        if doc.len() < 2 {
            return Err(TrainError::Contract(format!(
                "document {i} for {label:?} has fewer than two tokens"
            )));
        }
    }
    let hash_before = backbone.frozen_hash();
    let (train_idx, val_idx) = split_train_val(corpus.len(), config.val_fraction, config.seed);
    let val_set: Vec<TokenSequence> = val_idx.iter().map(|&i| corpus[i].clone()).collect();
    let mut train_docs: Vec<&TokenSequence> = train_idx.iter().map(|&i| &corpus[i]).collect();

    let mut branch = L1Branch::init(adapter, backbone, label, config.seed)?;
    let shapes: Vec<usize> = branch.params().iter().map(|p| p.numel()).collect();
    let mut adam = Adam::new(config.adam, config.learning_rate, &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));

    let initial_val_loss = validate(backbone, Some(&branch), &val_set)?;
    let mut stopper = EarlyStopper::new(config.early_stop_patience);
    let mut best_branch = branch.clone();
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    let mut total_steps = 0usize;
    let mut grads_absent = true;

    for epoch in 1..=config.epochs {
        train_docs.shuffle(&mut rng);
        let mut weighted = 0.0f64;
        let mut tokens = 0usize;
        let mut steps = 0usize;
        for batch in train_docs.chunks(config.batch_size) {
            let mut bg = batch_gradients(backbone, &branch, batch)?;
            if !bg.loss.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    step: steps + 1,
                    loss: bg.loss,
                });
            }
            grads_absent &= bg.backbone_grads_absent;
            if let Some(max_norm) = config.grad_clip {
                let norm = clip_global_norm(&mut bg.grads, max_norm);
                if !norm.is_finite() {
                    return Err(TrainError::NonFinite {
                        epoch,
                        step: steps + 1,
                        loss: norm,
                    });
                }
            }
            adam.update(branch.params_mut(), &bg.grads);
            weighted += f64::from(bg.loss) * bg.predicted as f64;
            tokens += bg.predicted;
            steps += 1;
        }
        total_steps += steps;
        let val_loss = validate(backbone, Some(&branch), &val_set)?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFinite {
                epoch,
                step: steps,
                loss: val_loss,
            });
        }
        let verdict = stopper.observe(val_loss);
        if verdict == Verdict::Improved {
            best_branch = branch.clone();
            best_branch.metadata.trained_epochs = epoch as u32;
            best_branch.metadata.best_val_loss = Some(val_loss);
        }
        let (_, best) = stopper.best().expect("observed at least once");
        epochs.push(EpochRecord {
            epoch,
            train_loss: (weighted / tokens.max(1) as f64) as f32,
            val_loss,
            best_val_loss: best,
            steps,
        });
        if verdict == Verdict::Stop {
            stopped_early = true;
            break;
        }
    }

    let (best_epoch, best_val_loss) = stopper.best().expect("at least one epoch ran");
    best_branch.set_trainable(false);
    let report = TrainReport {
        label: label.to_string(),
        train_docs: train_idx.len(),
        val_docs: val_idx.len(),
        initial_val_loss,
        epochs,
        best_epoch,
        best_val_loss,
        stopped_early,
        total_steps,
        backbone_grads_absent: grads_absent,
        backbone_hash_before: hash_before,
        backbone_hash_after: backbone.frozen_hash(),
    };
    Ok((best_branch, report))
}
