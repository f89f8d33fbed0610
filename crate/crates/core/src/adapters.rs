//! Bottleneck adapters and per-L1 branch packaging.
//!
//! An adapter site maps a sublayer output `h` to
//! `h + up(σ(down(h) + b_down)) + b_up`. With a zero up-projection and zero
//! biases the site is the identity, so a freshly initialized branch
//! reproduces the backbone exactly.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GeluKind, Tape, Var};
use crate::checkpoint;
use crate::error::{CheckpointError, ModelError};
use crate::gpt2::{count_tensors, Backbone, ModelConfig, ParamCount};
use crate::tensor::Tensor;

pub const DOWN_PROJ_INIT_STD: f32 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AdapterArch {
    /// Two sites per layer: after attention and after the FFN.
    Houlsby,
    /// One site per layer, after the FFN.
    Pfeiffer,
}

impl AdapterArch {
    pub fn sites(self) -> &'static [SiteKind] {
        match self {
            AdapterArch::Houlsby => &[SiteKind::Attention, SiteKind::Ffn],
            AdapterArch::Pfeiffer => &[SiteKind::Ffn],
        }
    }

    pub fn sites_per_layer(self) -> usize {
        self.sites().len()
    }

    pub fn covers(self, site: SiteKind) -> bool {
        self.sites().contains(&site)
    }
}

impl fmt::Display for AdapterArch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdapterArch::Houlsby => "houlsby",
            AdapterArch::Pfeiffer => "pfeiffer",
        })
    }
}

impl std::str::FromStr for AdapterArch {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "houlsby" => Ok(AdapterArch::Houlsby),
            "pfeiffer" => Ok(AdapterArch::Pfeiffer),
            other => Err(format!("unknown adapter architecture {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Nonlinearity {
    /// Uses the backbone's GELU flavour.
    #[default]
    Gelu,
    Relu,
}

impl std::str::FromStr for Nonlinearity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "gelu" => Ok(Nonlinearity::Gelu),
            "relu" => Ok(Nonlinearity::Relu),
            other => Err(format!("unknown nonlinearity {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeadMode {
    /// Each branch owns an untied copy of the LM output projection.
    #[default]
    UntiedLmHead,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SiteKind {
    Attention,
    Ffn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub architecture: AdapterArch,
    pub reduction_factor: usize,
    pub nonlinearity: Nonlinearity,
    pub head_mode: HeadMode,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            architecture: AdapterArch::Houlsby,
            reduction_factor: 16,
            nonlinearity: Nonlinearity::Gelu,
            head_mode: HeadMode::UntiedLmHead,
        }
    }
}

impl AdapterConfig {
    pub fn bottleneck(&self, d_model: usize) -> Result<usize, ModelError> {
        if self.reduction_factor == 0 || d_model % self.reduction_factor != 0 {
            return Err(ModelError::Contract(format!(
                "reduction factor {} does not divide d_model {}",
                self.reduction_factor, d_model
            )));
        }
        Ok(d_model / self.reduction_factor)
    }

    /// Closed-form trainable parameter count of one branch.
    pub fn branch_parameters(&self, model: &ModelConfig) -> Result<usize, ModelError> {
        let d = model.d_model;
        let b = self.bottleneck(d)?;
        let sites = model.n_layers * self.architecture.sites_per_layer();
        Ok(sites * (2 * d * b + b + d) + d * model.vocab_size)
    }
}

/// Weights of one injection site.
#[derive(Clone, Debug)]
pub struct AdapterSite {
    pub layer: usize,
    pub kind: SiteKind,
    /// `[d_model × bottleneck]`
    pub down_w: Tensor,
    pub down_b: Tensor,
    /// `[bottleneck × d_model]`
    pub up_w: Tensor,
    pub up_b: Tensor,
}

impl AdapterSite {
    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.down_w, &self.down_b, &self.up_w, &self.up_b]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.down_w, &mut self.down_b, &mut self.up_w, &mut self.up_b]
    }

    /// Applies the residual bottleneck transform to `h[T×d_model]`.
    pub fn apply(&self, h: &Tensor, nonlinearity: Nonlinearity, gelu: GeluKind) -> Result<Tensor, ModelError> {
        let d = self.up_b.numel();
        if h.ndim() != 2 || h.shape()[1] != d {
            return Err(ModelError::Contract(format!(
                "adapter input shape {:?} does not match d_model {d}",
                h.shape()
            )));
        }
        let mut tape = Tape::new();
        let vars = SiteVars::register(&mut tape, self, false);
        let hv = tape.constant(h);
        let out = apply_site_on_tape(&mut tape, &vars, nonlinearity, gelu, hv)?;
        Ok(tape.value(out).clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchMetadata {
    pub trained_epochs: u32,
    pub best_val_loss: Option<f32>,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
}

/// One L1's trainable payload: every adapter site plus its output head.
#[derive(Clone, Debug)]
pub struct L1Branch {
    label: String,
    config: AdapterConfig,
    model: ModelConfig,
    pub sites: Vec<AdapterSite>,
    /// `[d_model × vocab]`
    pub head: Tensor,
    pub metadata: BranchMetadata,
}

impl L1Branch {
    /// Fresh branch: small random down-projections, zero up-projections and
    /// biases (an exact identity at every site), head copied from the
    /// backbone's output projection.
    pub fn init(config: AdapterConfig, backbone: &Backbone, label: &str, seed: u64) -> Result<Self, ModelError> {
        let model = *backbone.config();
        let d = model.d_model;
        let b = config.bottleneck(d)?;
        if label.is_empty() {
            return Err(ModelError::Contract("branch label must be non-empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sites = Vec::new();
        for layer in 0..model.n_layers {
            for &kind in config.architecture.sites() {
                sites.push(AdapterSite {
                    layer,
                    kind,
                    down_w: Tensor::randn(&[d, b], DOWN_PROJ_INIT_STD, &mut rng).with_requires_grad(true),
                    down_b: Tensor::zeros(&[b]).with_requires_grad(true),
                    up_w: Tensor::zeros(&[b, d]).with_requires_grad(true),
                    up_b: Tensor::zeros(&[d]).with_requires_grad(true),
                });
            }
        }
        Ok(Self {
            label: label.to_string(),
            config,
            model,
            sites,
            head: backbone.output_projection().with_requires_grad(true),
            metadata: BranchMetadata {
                trained_epochs: 0,
                best_val_loss: None,
                created_at: 0,
            },
        })
    }

    /// Assembles a branch from parts, validating site coverage and shapes.
    pub fn from_parts(
        label: String,
        config: AdapterConfig,
        model: ModelConfig,
        sites: Vec<AdapterSite>,
        head: Tensor,
        metadata: BranchMetadata,
    ) -> Result<Self, ModelError> {
        let d = model.d_model;
        let b = config.bottleneck(d)?;
        let expected: Vec<(usize, SiteKind)> = (0..model.n_layers)
            .flat_map(|l| config.architecture.sites().iter().map(move |&k| (l, k)))
            .collect();
        let got: Vec<(usize, SiteKind)> = sites.iter().map(|s| (s.layer, s.kind)).collect();
        if expected != got {
            return Err(ModelError::ConfigMismatch(format!(
                "branch {label:?} covers sites {got:?}, {} config needs {expected:?}",
                config.architecture
            )));
        }
        for s in &sites {
            let ok = s.down_w.shape() == [d, b]
                && s.down_b.shape() == [b]
                && s.up_w.shape() == [b, d]
                && s.up_b.shape() == [d];
            if !ok {
                return Err(ModelError::ConfigMismatch(format!(
                    "adapter at layer {} {:?} has wrong shapes for d_model {d}, bottleneck {b}",
                    s.layer, s.kind
                )));
            }
        }
        if head.shape() != [d, model.vocab_size] {
            return Err(ModelError::ConfigMismatch(format!(
                "head shape {:?}, expected {:?}",
                head.shape(),
                [d, model.vocab_size]
            )));
        }
        let mut branch = Self {
            label,
            config,
            model,
            sites,
            head,
            metadata,
        };
        branch.set_trainable(true);
        Ok(branch)
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model
    }

    pub fn check_compatible(&self, backbone: &Backbone) -> Result<(), ModelError> {
        if &self.model != backbone.config() {
            return Err(ModelError::ConfigMismatch(format!(
                "branch {:?} was built for [{}], backbone is [{}]",
                self.label,
                self.model,
                backbone.config()
            )));
        }
        Ok(())
    }

    pub fn site(&self, layer: usize, kind: SiteKind) -> Option<&AdapterSite> {
        self.sites.iter().find(|s| s.layer == layer && s.kind == kind)
    }

    /// Trainable tensors in a fixed order: sites in walk order, then head.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.sites.iter().flat_map(|s| s.tensors()).collect();
        out.push(&self.head);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.sites.iter_mut().flat_map(|s| s.tensors_mut()).collect();
        out.push(&mut self.head);
        out
    }

    /// Named tensors used by the branch file format.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for s in &self.sites {
            let kind = match s.kind {
                SiteKind::Attention => "attn",
                SiteKind::Ffn => "ffn",
            };
            let p = |n: &str| format!("adapter.{}.{kind}.{n}", s.layer);
            out.push((p("down.weight"), &s.down_w));
            out.push((p("down.bias"), &s.down_b));
            out.push((p("up.weight"), &s.up_w));
            out.push((p("up.bias"), &s.up_b));
        }
        out.push(("head.weight".to_string(), &self.head));
        out
    }

    /// Marks every branch tensor trainable (training) or frozen (inference).
    pub fn set_trainable(&mut self, trainable: bool) {
        for t in self.params_mut() {
            t.set_requires_grad(trainable);
        }
    }

    pub fn count_parameters(&self) -> ParamCount {
        count_tensors(self.params())
    }

    /// Registers the branch on a tape. With `trainable` the tensors are
    /// gradient leaves, otherwise constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> BranchVars {
        let sites = self
            .sites
            .iter()
            .map(|s| SiteVars::register(tape, s, trainable))
            .collect();
        let head = if trainable {
            tape.leaf(&self.head.clone().with_requires_grad(true))
        } else {
            tape.constant(&self.head)
        };
        BranchVars { sites, head }
    }

    pub fn save(&self, path: &Path) -> Result<u64, CheckpointError> {
        checkpoint::save_branch(self, path)
    }

    pub fn load(path: &Path, backbone: &Backbone) -> Result<Self, CheckpointError> {
        checkpoint::load_branch(path, backbone)
    }
}

pub struct SiteVars {
    pub layer: usize,
    pub kind: SiteKind,
    pub down_w: Var,
    pub down_b: Var,
    pub up_w: Var,
    pub up_b: Var,
}

impl SiteVars {
    pub fn register(tape: &mut Tape, site: &AdapterSite, trainable: bool) -> Self {
        let mut reg = |t: &Tensor| {
            if trainable {
                tape.leaf(&t.clone().with_requires_grad(true))
            } else {
                tape.constant(t)
            }
        };
        Self {
            layer: site.layer,
            kind: site.kind,
            down_w: reg(&site.down_w),
            down_b: reg(&site.down_b),
            up_w: reg(&site.up_w),
            up_b: reg(&site.up_b),
        }
    }

    pub fn vars(&self) -> [Var; 4] {
        [self.down_w, self.down_b, self.up_w, self.up_b]
    }
}

pub struct BranchVars {
    pub sites: Vec<SiteVars>,
    pub head: Var,
}

impl BranchVars {
    pub fn site(&self, layer: usize, kind: SiteKind) -> Option<&SiteVars> {
        self.sites.iter().find(|s| s.layer == layer && s.kind == kind)
    }

    /// Vars in the same order as [`L1Branch::params`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.sites.iter().flat_map(|s| s.vars()).collect();
        out.push(self.head);
        out
    }
}

pub fn apply_site_on_tape(
    tape: &mut Tape,
    site: &SiteVars,
    nonlinearity: Nonlinearity,
    gelu: GeluKind,
    h: Var,
) -> Result<Var, ModelError> {
    let down = tape.matmul(h, site.down_w)?;
    let down = tape.add_bias(down, site.down_b)?;
    let act = match nonlinearity {
        Nonlinearity::Gelu => tape.gelu(down, gelu)?,
        Nonlinearity::Relu => tape.relu(down)?,
    };
    let up = tape.matmul(act, site.up_w)?;
    let up = tape.add_bias(up, site.up_b)?;
    Ok(tape.add(h, up)?)
}
