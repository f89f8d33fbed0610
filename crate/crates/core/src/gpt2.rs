//! Decoder-only transformer (GPT-2 layout) with adapter injection points.
//!
//! The forward pass is expressed as a cursor that walks the residual
//! stream one sublayer at a time. Each sublayer output is an injection
//! site: a branch may transform it before it is added back to the
//! residual. Exposing the walk lets the fused engine compute the shared
//! prefix once and fork per branch at the first injection site.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{BranchVars, L1Branch, SiteKind};
use crate::autodiff::{GeluKind, Tape, Var};
use crate::error::ModelError;
use crate::tensor::Tensor;

pub const LAYERNORM_EPS: f32 = 1e-5;
/// Target value that is skipped by the loss.
pub const IGNORE_INDEX: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// GELU flavour used by the FFN and by GELU adapters.
    pub gelu: GeluKind,
    /// When true the output projection reuses the token embedding.
    pub tie_lm_head: bool,
}

impl Default for ModelConfig {
    /// Desk-scale default: 2 layers, 64 wide, byte vocabulary plus BOS/EOS.
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ffn: 256,
            vocab_size: 258,
            max_seq_len: 128,
            gelu: GeluKind::Tanh,
            tie_lm_head: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(ModelError::InvalidConfig(format!(
                "max_seq_len must be at least 2, got {}",
                self.max_seq_len
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form backbone parameter count.
    pub fn backbone_parameters(&self) -> usize {
        let d = self.d_model;
        let f = self.d_ffn;
        let per_layer = 2 * d // ln_1
            + d * 3 * d + 3 * d // qkv
            + d * d + d // attention output
            + 2 * d // ln_2
            + d * f + f // fc
            + f * d + d; // fc projection
        let head = if self.tie_lm_head { 0 } else { d * self.vocab_size };
        self.vocab_size * d + self.max_seq_len * d + self.n_layers * per_layer + 2 * d + head
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "layers={} d_model={} heads={} d_ffn={} vocab={} ctx={} gelu={:?} tied={}",
            self.n_layers,
            self.d_model,
            self.n_heads,
            self.d_ffn,
            self.vocab_size,
            self.max_seq_len,
            self.gelu,
            self.tie_lm_head
        )
    }
}

/// Validated token ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        Self(ids)
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<(), ModelError> {
        for (position, &id) in self.0.iter().enumerate() {
            if id as usize >= vocab {
                return Err(ModelError::TokenOutOfVocab {
                    id,
                    position,
                    vocab,
                });
            }
        }
        Ok(())
    }

    /// Non-overlapping windows of at most `max_len` tokens. Trailing windows
    /// shorter than two tokens carry no next-token pair and are dropped.
    pub fn windows(&self, max_len: usize) -> Vec<&[u32]> {
        self.0.chunks(max_len).filter(|w| w.len() >= 2).collect()
    }
}

impl From<Vec<u32>> for TokenSequence {
    fn from(ids: Vec<u32>) -> Self {
        Self(ids)
    }
}

#[derive(Clone, Debug)]
pub struct LayerWeights {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    /// `[d_model × 3·d_model]`, columns ordered Q | K | V.
    pub qkv_w: Tensor,
    pub qkv_b: Tensor,
    pub attn_proj_w: Tensor,
    pub attn_proj_b: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub fc_w: Tensor,
    pub fc_b: Tensor,
    pub fc_proj_w: Tensor,
    pub fc_proj_b: Tensor,
}

/// Frozen transformer weights.
#[derive(Clone, Debug)]
pub struct Backbone {
    config: ModelConfig,
    pub wte: Tensor,
    pub wpe: Tensor,
    pub layers: Vec<LayerWeights>,
    pub ln_f_gain: Tensor,
    pub ln_f_bias: Tensor,
    /// Present only when the head is untied, `[d_model × vocab]`.
    pub lm_head: Option<Tensor>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub trainable: usize,
}

impl std::ops::Add for ParamCount {
    type Output = ParamCount;
    fn add(self, rhs: Self) -> Self {
        ParamCount {
            total: self.total + rhs.total,
            trainable: self.trainable + rhs.trainable,
        }
    }
}

pub fn count_tensors<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> ParamCount {
    tensors.into_iter().fold(ParamCount::default(), |acc, t| ParamCount {
        total: acc.total + t.numel(),
        trainable: acc.trainable + if t.requires_grad() { t.numel() } else { 0 },
    })
}

impl Backbone {
    /// GPT-2 style random init: N(0, 0.02²) weights, residual projections
    /// scaled by 1/√(2·n_layers), zero biases, unit layernorm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let std = 0.02f32;
        let proj_std = std / ((2 * config.n_layers) as f32).sqrt();
        let wte = Tensor::randn(&[config.vocab_size, d], std, &mut rng);
        let wpe = Tensor::randn(&[config.max_seq_len, d], 0.01, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                ln1_gain: Tensor::full(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                qkv_w: Tensor::randn(&[d, 3 * d], std, &mut rng),
                qkv_b: Tensor::zeros(&[3 * d]),
                attn_proj_w: Tensor::randn(&[d, d], proj_std, &mut rng),
                attn_proj_b: Tensor::zeros(&[d]),
                ln2_gain: Tensor::full(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
                fc_w: Tensor::randn(&[d, config.d_ffn], std, &mut rng),
                fc_b: Tensor::zeros(&[config.d_ffn]),
                fc_proj_w: Tensor::randn(&[config.d_ffn, d], proj_std, &mut rng),
                fc_proj_b: Tensor::zeros(&[d]),
            })
            .collect();
        let lm_head = (!config.tie_lm_head).then(|| Tensor::randn(&[d, config.vocab_size], std, &mut rng));
        Ok(Self {
            config,
            wte,
            wpe,
            layers,
            ln_f_gain: Tensor::full(&[d], 1.0),
            ln_f_bias: Tensor::zeros(&[d]),
            lm_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Canonical `(name, tensor)` listing used for serialization and hashing.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("wte".to_string(), &self.wte), ("wpe".to_string(), &self.wpe)];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("h.{i}.{s}");
            out.extend([
                (p("ln_1.weight"), &l.ln1_gain),
                (p("ln_1.bias"), &l.ln1_bias),
                (p("attn.c_attn.weight"), &l.qkv_w),
                (p("attn.c_attn.bias"), &l.qkv_b),
                (p("attn.c_proj.weight"), &l.attn_proj_w),
                (p("attn.c_proj.bias"), &l.attn_proj_b),
                (p("ln_2.weight"), &l.ln2_gain),
                (p("ln_2.bias"), &l.ln2_bias),
                (p("mlp.c_fc.weight"), &l.fc_w),
                (p("mlp.c_fc.bias"), &l.fc_b),
                (p("mlp.c_proj.weight"), &l.fc_proj_w),
                (p("mlp.c_proj.bias"), &l.fc_proj_b),
            ]);
        }
        out.push(("ln_f.weight".to_string(), &self.ln_f_gain));
        out.push(("ln_f.bias".to_string(), &self.ln_f_bias));
        if let Some(h) = &self.lm_head {
            out.push(("lm_head.weight".to_string(), h));
        }
        out
    }

    /// Rebuilds a backbone from named tensors, checking every shape.
    pub fn from_named(
        config: ModelConfig,
        mut take: impl FnMut(&str) -> Option<Tensor>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.d_model;
        let f = config.d_ffn;
        let mut get = |name: &str, shape: &[usize]| -> Result<Tensor, ModelError> {
            let t = take(name).ok_or_else(|| ModelError::Contract(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(ModelError::ConfigMismatch(format!(
                    "tensor {name} has shape {:?}, config implies {:?}",
                    t.shape(),
                    shape
                )));
            }
            Ok(t.with_requires_grad(false))
        };
        let wte = get("wte", &[config.vocab_size, d])?;
        let wpe = get("wpe", &[config.max_seq_len, d])?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = |s: &str| format!("h.{i}.{s}");
            layers.push(LayerWeights {
                ln1_gain: get(&p("ln_1.weight"), &[d])?,
                ln1_bias: get(&p("ln_1.bias"), &[d])?,
                qkv_w: get(&p("attn.c_attn.weight"), &[d, 3 * d])?,
                qkv_b: get(&p("attn.c_attn.bias"), &[3 * d])?,
                attn_proj_w: get(&p("attn.c_proj.weight"), &[d, d])?,
                attn_proj_b: get(&p("attn.c_proj.bias"), &[d])?,
                ln2_gain: get(&p("ln_2.weight"), &[d])?,
                ln2_bias: get(&p("ln_2.bias"), &[d])?,
                fc_w: get(&p("mlp.c_fc.weight"), &[d, f])?,
                fc_b: get(&p("mlp.c_fc.bias"), &[f])?,
                fc_proj_w: get(&p("mlp.c_proj.weight"), &[f, d])?,
                fc_proj_b: get(&p("mlp.c_proj.bias"), &[d])?,
            });
        }
        let ln_f_gain = get("ln_f.weight", &[d])?;
        let ln_f_bias = get("ln_f.bias", &[d])?;
        let lm_head = if config.tie_lm_head {
            None
        } else {
            Some(get("lm_head.weight", &[d, config.vocab_size])?)
        };
        Ok(Self {
            config,
            wte,
            wpe,
            layers,
            ln_f_gain,
            ln_f_bias,
            lm_head,
        })
    }

    /// The output projection as a `[d_model × vocab]` tensor.
    pub fn output_projection(&self) -> Tensor {
        match &self.lm_head {
            Some(h) => h.clone().with_requires_grad(false),
            None => self.wte.transpose2d().expect("wte is 2-D"),
        }
    }

    pub fn count_parameters(&self) -> ParamCount {
        count_tensors(self.named_tensors().into_iter().map(|(_, t)| t))
    }

    /// SHA-256 over config and every tensor's name, shape and bytes.
    pub fn frozen_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config.to_string().as_bytes());
        for (name, t) in self.named_tensors() {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            for &dim in t.shape() {
                h.update((dim as u32).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn register(&self, tape: &mut Tape) -> BackboneVars {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerVars {
                ln1_gain: tape.constant(&l.ln1_gain),
                ln1_bias: tape.constant(&l.ln1_bias),
                qkv_w: tape.constant(&l.qkv_w),
                qkv_b: tape.constant(&l.qkv_b),
                attn_proj_w: tape.constant(&l.attn_proj_w),
                attn_proj_b: tape.constant(&l.attn_proj_b),
                ln2_gain: tape.constant(&l.ln2_gain),
                ln2_bias: tape.constant(&l.ln2_bias),
                fc_w: tape.constant(&l.fc_w),
                fc_b: tape.constant(&l.fc_b),
                fc_proj_w: tape.constant(&l.fc_proj_w),
                fc_proj_b: tape.constant(&l.fc_proj_b),
            })
            .collect();
        BackboneVars {
            wte: tape.constant(&self.wte),
            wpe: tape.constant(&self.wpe),
            layers,
            ln_f_gain: tape.constant(&self.ln_f_gain),
            ln_f_bias: tape.constant(&self.ln_f_bias),
            lm_head: self.lm_head.as_ref().map(|h| tape.constant(h)),
        }
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        if tokens.len() > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if tokens.is_empty() {
            return Err(ModelError::SequenceTooShort { len: 0, min: 1 });
        }
        for (position, &id) in tokens.iter().enumerate() {
            if id as usize >= self.config.vocab_size {
                return Err(ModelError::TokenOutOfVocab {
                    id,
                    position,
                    vocab: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }
}

pub struct LayerVars {
    ln1_gain: Var,
    ln1_bias: Var,
    qkv_w: Var,
    qkv_b: Var,
    attn_proj_w: Var,
    attn_proj_b: Var,
    ln2_gain: Var,
    ln2_bias: Var,
    fc_w: Var,
    fc_b: Var,
    fc_proj_w: Var,
    fc_proj_b: Var,
}

/// Backbone tensors registered on one tape (always as constants).
pub struct BackboneVars {
    wte: Var,
    wpe: Var,
    layers: Vec<LayerVars>,
    ln_f_gain: Var,
    ln_f_bias: Var,
    lm_head: Option<Var>,
}

impl BackboneVars {
    pub fn all_vars(&self) -> Vec<Var> {
        let mut out = vec![self.wte, self.wpe];
        for l in &self.layers {
            out.extend([
                l.ln1_gain,
                l.ln1_bias,
                l.qkv_w,
                l.qkv_b,
                l.attn_proj_w,
                l.attn_proj_b,
                l.ln2_gain,
                l.ln2_bias,
                l.fc_w,
                l.fc_b,
                l.fc_proj_w,
                l.fc_proj_b,
            ]);
        }
        out.extend([self.ln_f_gain, self.ln_f_bias]);
        out.extend(self.lm_head);
        out
    }
}

/// Position in the residual walk: `sublayer` is the output of the
/// `site` sublayer of `layer`, not yet added back to `residual`.
#[derive(Clone, Copy, Debug)]
pub struct Cursor {
    pub layer: usize,
    pub site: SiteKind,
    pub residual: Var,
    pub sublayer: Var,
}

pub enum Progress {
    At(Cursor),
    Done(Var),
}

/// Embeds `tokens` and runs the first attention sublayer.
pub fn start(tape: &mut Tape, backbone: &Backbone, vars: &BackboneVars, tokens: &[u32]) -> Result<Cursor, ModelError> {
    backbone.check_tokens(tokens)?;
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..ids.len()).collect();
    let tok = tape.gather_rows(vars.wte, &ids)?;
    let pos = tape.gather_rows(vars.wpe, &positions)?;
    let x = tape.add(tok, pos)?;
    let sublayer = attention(tape, backbone.config(), &vars.layers[0], x, 1)?;
    Ok(Cursor {
        layer: 0,
        site: SiteKind::Attention,
        residual: x,
        sublayer,
    })
}

/// Closes the current sublayer (optionally through an adapter) and opens
/// the next one.
pub fn step(
    tape: &mut Tape,
    backbone: &Backbone,
    vars: &BackboneVars,
    cursor: Cursor,
    adapter: Option<(&crate::adapters::SiteVars, crate::adapters::Nonlinearity)>,
) -> Result<Progress, ModelError> {
    step_stacked(tape, backbone, vars, cursor, &[adapter])
}

/// [`step`] over `adapters.len()` streams stacked along rows: the cursor
/// holds `streams × T` rows, stream `s` owning rows `s·T..(s+1)·T`, and each
/// stream passes through its own adapter. Row-wise backbone ops run once
/// over the whole stack; attention stays within each stream.
pub fn step_stacked(
    tape: &mut Tape,
    backbone: &Backbone,
    vars: &BackboneVars,
    cursor: Cursor,
    adapters: &[Option<(&crate::adapters::SiteVars, crate::adapters::Nonlinearity)>],
) -> Result<Progress, ModelError> {
    let cfg = backbone.config();
    let streams = adapters.len();
    let rows = stream_rows(tape, cursor.sublayer, streams)?;
    let sub = match adapters {
        [single] => apply_adapter(tape, cfg, *single, cursor.sublayer)?,
        _ if adapters.iter().all(Option::is_none) => cursor.sublayer,
        _ => {
            let mut parts = Vec::with_capacity(streams);
            for (s, a) in adapters.iter().enumerate() {
                let part = tape.slice_rows(cursor.sublayer, s * rows, rows)?;
                parts.push(apply_adapter(tape, cfg, *a, part)?);
            }
            tape.concat_rows(&parts)?
        }
    };
    let x = tape.add(cursor.residual, sub)?;
    match cursor.site {
        SiteKind::Attention => {
            let sublayer = ffn(tape, cfg, &vars.layers[cursor.layer], x)?;
            Ok(Progress::At(Cursor {
                layer: cursor.layer,
                site: SiteKind::Ffn,
                residual: x,
                sublayer,
            }))
        }
        SiteKind::Ffn => {
            let next = cursor.layer + 1;
            if next == cfg.n_layers {
                return Ok(Progress::Done(x));
            }
            let sublayer = attention(tape, cfg, &vars.layers[next], x, streams)?;
            Ok(Progress::At(Cursor {
                layer: next,
                site: SiteKind::Attention,
                residual: x,
                sublayer,
            }))
        }
    }
}

fn stream_rows(tape: &Tape, v: Var, streams: usize) -> Result<usize, ModelError> {
    let total = tape.value(v).rows();
    if streams == 0 || total % streams != 0 {
        return Err(ModelError::Contract(format!(
            "{total} rows cannot be split into {streams} streams"
        )));
    }
    Ok(total / streams)
}

fn apply_adapter(
    tape: &mut Tape,
    cfg: &ModelConfig,
    adapter: Option<(&crate::adapters::SiteVars, crate::adapters::Nonlinearity)>,
    h: Var,
) -> Result<Var, ModelError> {
    match adapter {
        Some((site, nl)) => crate::adapters::apply_site_on_tape(tape, site, nl, cfg.gelu, h),
        None => Ok(h),
    }
}

/// Final layernorm and output projection.
pub fn finish(
    tape: &mut Tape,
    vars: &BackboneVars,
    branch_head: Option<Var>,
    x: Var,
) -> Result<Var, ModelError> {
    let h = tape.layernorm(x, vars.ln_f_gain, vars.ln_f_bias, LAYERNORM_EPS)?;
    let logits = match (branch_head, vars.lm_head) {
        (Some(head), _) => tape.matmul(h, head)?,
        (None, Some(head)) => tape.matmul(h, head)?,
        (None, None) => tape.matmul_nt(h, vars.wte)?,
    };
    Ok(logits)
}

/// Final layernorm over a row stack, then one head per stream. Returns the
/// per-stream logits.
pub fn finish_stacked(tape: &mut Tape, vars: &BackboneVars, heads: &[Var], x: Var) -> Result<Vec<Var>, ModelError> {
    let rows = stream_rows(tape, x, heads.len())?;
    let h = tape.layernorm(x, vars.ln_f_gain, vars.ln_f_bias, LAYERNORM_EPS)?;
    if let [head] = heads {
        return Ok(vec![tape.matmul(h, *head)?]);
    }
    let mut out = Vec::with_capacity(heads.len());
    for (s, &head) in heads.iter().enumerate() {
        let part = tape.slice_rows(h, s * rows, rows)?;
        out.push(tape.matmul(part, head)?);
    }
    Ok(out)
}

fn attention(tape: &mut Tape, cfg: &ModelConfig, l: &LayerVars, x: Var, streams: usize) -> Result<Var, ModelError> {
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f32).sqrt();
    let rows = stream_rows(tape, x, streams)?;
    let h = tape.layernorm(x, l.ln1_gain, l.ln1_bias, LAYERNORM_EPS)?;
    let qkv = tape.matmul(h, l.qkv_w)?;
    let qkv = tape.add_bias(qkv, l.qkv_b)?;
    let mut merged = Vec::with_capacity(streams);
    for s in 0..streams {
        let qkv = if streams == 1 { qkv } else { tape.slice_rows(qkv, s * rows, rows)? };
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let q = tape.slice_cols(qkv, head * hd, hd)?;
            let k = tape.slice_cols(qkv, d + head * hd, hd)?;
            let v = tape.slice_cols(qkv, 2 * d + head * hd, hd)?;
            let scores = tape.matmul_nt(q, k)?;
            let scores = tape.scale(scores, scale)?;
            let masked = tape.causal_mask(scores)?;
            let probs = tape.softmax(masked)?;
            heads.push(tape.matmul(probs, v)?);
        }
        merged.push(tape.concat_cols(&heads)?);
    }
    let merged = if streams == 1 { merged[0] } else { tape.concat_rows(&merged)? };
    let out = tape.matmul(merged, l.attn_proj_w)?;
    Ok(tape.add_bias(out, l.attn_proj_b)?)
}

fn ffn(tape: &mut Tape, cfg: &ModelConfig, l: &LayerVars, x: Var) -> Result<Var, ModelError> {
    let h = tape.layernorm(x, l.ln2_gain, l.ln2_bias, LAYERNORM_EPS)?;
    let h = tape.matmul(h, l.fc_w)?;
    let h = tape.add_bias(h, l.fc_b)?;
    let h = tape.gelu(h, cfg.gelu)?;
    let h = tape.matmul(h, l.fc_proj_w)?;
    Ok(tape.add_bias(h, l.fc_proj_b)?)
}

/// Runs the walk from `cursor` to logits, applying `branch` at every site
/// it covers.
pub fn run_from(
    tape: &mut Tape,
    backbone: &Backbone,
    vars: &BackboneVars,
    branch: Option<(&L1Branch, &BranchVars)>,
    cursor: Cursor,
) -> Result<Var, ModelError> {
    let mut progress = Progress::At(cursor);
    loop {
        match progress {
            Progress::At(c) => {
                let adapter = branch.and_then(|(b, bv)| {
                    bv.site(c.layer, c.site).map(|s| (s, b.config().nonlinearity))
                });
                progress = step(tape, backbone, vars, c, adapter)?;
            }
            Progress::Done(x) => {
                return finish(tape, vars, branch.map(|(_, bv)| bv.head), x);
            }
        }
    }
}

/// Logits for one window on an existing tape.
pub fn logits_on_tape(
    tape: &mut Tape,
    backbone: &Backbone,
    vars: &BackboneVars,
    branch: Option<(&L1Branch, &BranchVars)>,
    tokens: &[u32],
) -> Result<Var, ModelError> {
    if let Some((b, _)) = branch {
        b.check_compatible(backbone)?;
    }
    let cursor = start(tape, backbone, vars, tokens)?;
    run_from(tape, backbone, vars, branch, cursor)
}

/// Next-token targets for a window: `tokens[1..]` followed by an ignored slot.
pub fn shifted_targets(tokens: &[u32]) -> Vec<usize> {
    tokens
        .iter()
        .skip(1)
        .map(|&t| t as usize)
        .chain(std::iter::once(IGNORE_INDEX))
        .collect()
}

/// `[T × vocab]` next-token logits, optionally through a branch.
pub fn forward(backbone: &Backbone, tokens: &TokenSequence, branch: Option<&L1Branch>) -> Result<Tensor, ModelError> {
    let mut tape = Tape::new();
    let vars = backbone.register(&mut tape);
    let bvars = branch.map(|b| b.register(&mut tape, false));
    let logits = logits_on_tape(
        &mut tape,
        backbone,
        &vars,
        branch.zip(bvars.as_ref()),
        tokens.ids(),
    )?;
    Ok(tape.value(logits).clone())
}

/// Mean next-token cross-entropy of a single window.
pub fn lm_loss(backbone: &Backbone, tokens: &TokenSequence, branch: Option<&L1Branch>) -> Result<f32, ModelError> {
    if tokens.len() < 2 {
        return Err(ModelError::SequenceTooShort {
            len: tokens.len(),
            min: 2,
        });
    }
    let logits = forward(backbone, tokens, branch)?;
    let mut tape = Tape::new();
    let l = tape.constant(&logits);
    let ce = tape.cross_entropy(l, &shifted_targets(tokens.ids()), IGNORE_INDEX)?;
    Ok(tape.value(ce.loss).item()?)
}

/// Loss of a whole document plus the number of predicted positions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DocumentLoss {
    pub loss: f32,
    pub predicted: usize,
}

/// Accumulates per-window mean losses into a token-weighted document mean.
#[derive(Clone, Copy, Debug, Default)]
pub struct WindowAccumulator {
    weighted: f64,
    predicted: usize,
}

impl WindowAccumulator {
    pub fn push(&mut self, window_mean: f32, predicted: usize) {
        self.weighted += f64::from(window_mean) * predicted as f64;
        self.predicted += predicted;
    }

    pub fn finish(self) -> DocumentLoss {
        let loss = if self.predicted == 0 {
            0.0
        } else {
            (self.weighted / self.predicted as f64) as f32
        };
        DocumentLoss {
            loss,
            predicted: self.predicted,
        }
    }
}

/// Windowed document loss: windows of `max_seq_len`, token-weighted mean.
pub fn document_loss(
    backbone: &Backbone,
    tokens: &TokenSequence,
    branch: Option<&L1Branch>,
) -> Result<DocumentLoss, ModelError> {
    let windows = tokens.windows(backbone.config().max_seq_len);
    if windows.is_empty() {
        return Err(ModelError::SequenceTooShort {
            len: tokens.len(),
            min: 2,
        });
    }
    let mut acc = WindowAccumulator::default();
    for w in windows {
        let window = TokenSequence::new(w.to_vec());
        acc.push(lm_loss(backbone, &window, branch)?, w.len() - 1);
    }
    Ok(acc.finish())
}
