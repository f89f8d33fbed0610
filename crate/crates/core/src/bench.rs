//! Storage, parameter and per-document latency accounting for the
//! inference modes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::corpus::tokenize;
use crate::error::{CheckpointError, EngineError, SvmError};
use crate::fused::FusedModel;
use crate::gpt2::{ModelConfig, TokenSequence};
use crate::svm::LinearOvrModel;

/// Fewer timed repetitions than this marks the timings as low confidence.
pub const MIN_CONFIDENT_REPETITIONS: usize = 10;

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub warmup: usize,
    pub repetitions: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            warmup: 10,
            repetitions: 100,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Svm(#[from] SvmError),
    #[error("bench needs {0}")]
    Contract(String),
}

/// Per-document wall-clock statistics over the timed repetitions, seconds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Timing {
    pub median: f64,
    pub p10: f64,
    pub p90: f64,
    pub min: f64,
    pub max: f64,
    /// One per-document mean per repetition, in run order.
    pub samples: Vec<f64>,
}

impl Timing {
    pub fn from_samples(samples: Vec<f64>) -> Self {
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (sorted.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
        };
        Self {
            median: q(0.5),
            p10: q(0.1),
            p90: q(0.9),
            min: sorted[0],
            max: sorted[sorted.len() - 1],
            samples,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub system: String,
    pub storage_bytes: u64,
    pub total_parameters: usize,
    pub trainable_parameters: usize,
    /// Weights plus activation buffers, bytes.
    pub resident_estimate_bytes: u64,
    pub timing: Option<Timing>,
    /// Reference median divided by this row's median.
    pub relative_speed: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Environment {
    pub available_cores: usize,
    pub worker_threads: usize,
    pub os: String,
    pub arch: String,
    pub optimized_build: bool,
}

impl Environment {
    pub fn detect() -> Self {
        Self {
            available_cores: std::thread::available_parallelism().map_or(1, |n| n.get()),
            worker_threads: rayon::current_num_threads(),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            optimized_build: !cfg!(debug_assertions),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Row the relative speeds are measured against (the slowest timed row).
    pub reference: Option<String>,
    pub branches: usize,
    pub documents: usize,
    pub warmup: usize,
    pub repetitions: usize,
    pub low_confidence: bool,
    pub backbone_file_bytes: u64,
    pub branch_file_bytes: u64,
    /// Total branch bytes over N full model copies.
    pub storage_ratio: f64,
    /// Branch over backbone parameters.
    pub parameter_ratio: f64,
    pub environment: Environment,
}

pub const ROW_FULL: &str = "Full models (N copies)";
pub const ROW_RELOAD: &str = "Sequential + reload";
pub const ROW_SEQUENTIAL: &str = "Sequential (resident)";
pub const ROW_FUSED: &str = "Fused";
pub const ROW_SVM: &str = "Unigram SVM";

impl BenchReport {
    pub fn row(&self, system: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.system == system)
    }

    pub fn median(&self, system: &str) -> Option<f64> {
        self.row(system)?.timing.as_ref().map(|t| t.median)
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<24} {:>12} {:>12} {:>12} {:>12} {:>14} {:>9}\n",
            "system", "storage", "params", "trainable", "resident", "ms/doc (p50)", "speed"
        );
        for r in &self.rows {
            let (t, speed) = match (&r.timing, r.relative_speed) {
                (Some(t), Some(x)) => (format!("{:.3}", 1e3 * t.median), format!("{x:.2}x")),
                _ => ("-".into(), "-".into()),
            };
            s.push_str(&format!(
                "{:<24} {:>12} {:>12} {:>12} {:>12} {:>14} {:>9}\n",
                r.system,
                human_bytes(r.storage_bytes),
                r.total_parameters,
                r.trainable_parameters,
                human_bytes(r.resident_estimate_bytes),
                t,
                speed
            ));
        }
        s.push_str(&format!(
            "N = {} branches, {} documents, {} warmup + {} timed repetitions{}\n",
            self.branches,
            self.documents,
            self.warmup,
            self.repetitions,
            if self.low_confidence { " (LOW CONFIDENCE: too few repetitions)" } else { "" }
        ));
        s.push_str(&format!(
            "branch/full storage ratio {:.4}, parameter ratio {:.4}; {} cores, {} worker threads\n",
            self.storage_ratio, self.parameter_ratio, self.environment.available_cores, self.environment.worker_threads
        ));
        s
    }

    /// One JSON record per row, then a summary record.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        #[derive(Serialize)]
        #[serde(tag = "record", rename_all = "lowercase")]
        enum Rec<'a> {
            Row(&'a BenchRow),
            Summary {
                reference: &'a Option<String>,
                branches: usize,
                documents: usize,
                warmup: usize,
                repetitions: usize,
                low_confidence: bool,
                backbone_file_bytes: u64,
                branch_file_bytes: u64,
                storage_ratio: f64,
                parameter_ratio: f64,
                environment: &'a Environment,
            },
        }
        for r in &self.rows {
            serde_json::to_writer(&mut out, &Rec::Row(r))?;
            out.write_all(b"\n")?;
        }
        serde_json::to_writer(
            &mut out,
            &Rec::Summary {
                reference: &self.reference,
                branches: self.branches,
                documents: self.documents,
                warmup: self.warmup,
                repetitions: self.repetitions,
                low_confidence: self.low_confidence,
                backbone_file_bytes: self.backbone_file_bytes,
                branch_file_bytes: self.branch_file_bytes,
                storage_ratio: self.storage_ratio,
                parameter_ratio: self.parameter_ratio,
                environment: &self.environment,
            },
        )?;
        out.write_all(b"\n")
    }
}

pub fn human_bytes(b: u64) -> String {
    const UNITS: [&str; 4] = ["B", "KiB", "MiB", "GiB"];
    let mut v = b as f64;
    let mut u = 0;
    while v >= 1024.0 && u + 1 < UNITS.len() {
        v /= 1024.0;
        u += 1;
    }
    if u == 0 {
        format!("{b} B")
    } else {
        format!("{v:.1} {}", UNITS[u])
    }
}

fn file_len(path: &Path) -> Result<u64, EngineError> {
    fs::metadata(path).map(|m| m.len()).map_err(|source| {
        CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

/// Activation bytes for one stream over a full window.
fn activation_bytes(cfg: &ModelConfig) -> u64 {
    let t = cfg.max_seq_len as u64;
    let per_layer = t * (cfg.d_model as u64 * 8 + cfg.d_ffn as u64 * 2) + cfg.n_heads as u64 * t * t * 2;
    4 * (per_layer * cfg.n_layers as u64 + t * cfg.vocab_size as u64)
}

type Mode<'m> = Box<dyn FnMut(usize) -> Result<(), BenchError> + 'm>;

/// Times every mode over every document. Warmup passes come first; then
/// each repetition runs the modes one after another, so slow drift on the
/// host affects all modes alike. A sample is the mean per-document time of
/// one mode in one repetition.
fn time_interleaved(docs: usize, options: &BenchOptions, modes: &mut [Mode<'_>]) -> Result<Vec<Timing>, BenchError> {
    for f in modes.iter_mut() {
        for _ in 0..options.warmup {
            for d in 0..docs {
                f(d)?;
            }
        }
    }
    let mut samples = vec![Vec::with_capacity(options.repetitions); modes.len()];
    for _ in 0..options.repetitions {
        for (f, out) in modes.iter_mut().zip(&mut samples) {
            let t0 = Instant::now();
            for d in 0..docs {
                f(d)?;
            }
            out.push(t0.elapsed().as_secs_f64() / docs as f64);
        }
    }
    Ok(samples.into_iter().map(Timing::from_samples).collect())
}

pub struct BenchInputs<'a> {
    pub model: &'a FusedModel,
    pub backbone_path: &'a Path,
    pub svm: Option<(&'a LinearOvrModel, PathBuf)>,
    pub texts: &'a [String],
}

/// Runs every mode over `texts`, serially, and assembles the report.
/// Tokenization and featurization happen outside the timed region for the
/// transformer modes; the SVM row times featurization plus scoring since
/// that is its whole inference path.
pub fn bench(inputs: &BenchInputs<'_>, options: &BenchOptions) -> Result<BenchReport, BenchError> {
    if options.repetitions == 0 {
        return Err(BenchError::Contract("at least one repetition".into()));
    }
    if inputs.texts.is_empty() {
        return Err(BenchError::Contract("at least one document".into()));
    }
    let model = inputs.model;
    if model.is_empty() {
        return Err(BenchError::Contract("a model with at least one branch".into()));
    }
    let branch_paths: Vec<&PathBuf> = model
        .slots()
        .iter()
        .map(|s| {
            s.source.as_ref().ok_or_else(|| {
                BenchError::Engine(EngineError::MissingCheckpoint {
                    label: s.branch.label().to_string(),
                })
            })
        })
        .collect::<Result<_, _>>()?;
    let n = model.len();
    let cfg = *model.backbone().config();
    let docs: Vec<TokenSequence> = inputs.texts.iter().map(|t| tokenize(t)).collect();

    let backbone_bytes = file_len(inputs.backbone_path)?;
    let branch_bytes: u64 = branch_paths.iter().map(|p| file_len(p)).sum::<Result<u64, _>>()?;
    let bb_params = model.backbone().count_parameters().total;
    let branch_params: usize = model.slots().iter().map(|s| s.branch.count_parameters().total).sum();
    let one_branch = branch_params / n;
    let act = activation_bytes(&cfg);

    let mut modes: Vec<Mode<'_>> = vec![
        Box::new(|d| {
            model.sequential_losses(&docs[d], true)?;
            Ok(())
        }),
        Box::new(|d| {
            model.sequential_losses(&docs[d], false)?;
            Ok(())
        }),
        Box::new(|d| {
            model.fused_losses(&docs[d])?;
            Ok(())
        }),
    ];
    if let Some((svm, _)) = &inputs.svm {
        modes.push(Box::new(move |d| {
            svm.predict_text(&inputs.texts[d])?;
            Ok(())
        }));
    }
    let mut timings = time_interleaved(docs.len(), options, &mut modes)?.into_iter();
    drop(modes);
    let (Some(reload), Some(sequential), Some(fused)) = (timings.next(), timings.next(), timings.next()) else {
        unreachable!("three transformer modes are always timed");
    };

    let mut rows = vec![
        BenchRow {
            system: ROW_FULL.into(),
            storage_bytes: backbone_bytes * n as u64,
            total_parameters: bb_params * n,
            trainable_parameters: bb_params * n,
            resident_estimate_bytes: 4 * bb_params as u64 + act,
            timing: None,
            relative_speed: None,
        },
        BenchRow {
            system: ROW_RELOAD.into(),
            storage_bytes: backbone_bytes + branch_bytes,
            total_parameters: bb_params + branch_params,
            trainable_parameters: branch_params,
            resident_estimate_bytes: 4 * (bb_params + one_branch) as u64 + act,
            timing: Some(reload),
            relative_speed: None,
        },
        BenchRow {
            system: ROW_SEQUENTIAL.into(),
            storage_bytes: backbone_bytes + branch_bytes,
            total_parameters: bb_params + branch_params,
            trainable_parameters: branch_params,
            resident_estimate_bytes: 4 * (bb_params + branch_params) as u64 + act,
            timing: Some(sequential),
            relative_speed: None,
        },
        BenchRow {
            system: ROW_FUSED.into(),
            storage_bytes: backbone_bytes + branch_bytes,
            total_parameters: bb_params + branch_params,
            trainable_parameters: branch_params,
            resident_estimate_bytes: 4 * (bb_params + branch_params) as u64 + act * n as u64,
            timing: Some(fused),
            relative_speed: None,
        },
    ];
    if let (Some((svm, path)), Some(timing)) = (&inputs.svm, timings.next()) {
        let params = svm.labels.len() * (svm.dim() + 1);
        rows.push(BenchRow {
            system: ROW_SVM.into(),
            storage_bytes: file_len(path)?,
            total_parameters: params,
            trainable_parameters: params,
            resident_estimate_bytes: 4 * params as u64,
            timing: Some(timing),
            relative_speed: None,
        });
    }

    let reference = rows
        .iter()
        .filter_map(|r| r.timing.as_ref().map(|t| (r.system.clone(), t.median)))
        .max_by(|a, b| a.1.total_cmp(&b.1));
    if let Some((_, slowest)) = &reference {
        for r in &mut rows {
            r.relative_speed = r.timing.as_ref().map(|t| slowest / t.median);
        }
    }
    Ok(BenchReport {
        rows,
        reference: reference.map(|(name, _)| name),
        branches: n,
        documents: docs.len(),
        warmup: options.warmup,
        repetitions: options.repetitions,
        low_confidence: options.repetitions < MIN_CONFIDENT_REPETITIONS,
        backbone_file_bytes: backbone_bytes,
        branch_file_bytes: branch_bytes,
        storage_ratio: branch_bytes as f64 / (backbone_bytes * n as u64) as f64,
        parameter_ratio: one_branch as f64 / bb_params as f64,
        environment: Environment::detect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles() {
        let t = Timing::from_samples(vec![5.0, 1.0, 3.0, 2.0, 4.0]);
        assert_eq!((t.median, t.min, t.max), (3.0, 1.0, 5.0));
        assert!((t.p10 - 1.4).abs() < 1e-12);
        assert_eq!(t.samples, vec![5.0, 1.0, 3.0, 2.0, 4.0]);
        let one = Timing::from_samples(vec![0.5]);
        assert_eq!((one.median, one.p10, one.p90), (0.5, 0.5, 0.5));
    }

    #[test]
    fn bytes_are_humanized() {
        assert_eq!(human_bytes(12), "12 B");
        assert_eq!(human_bytes(2048), "2.0 KiB");
    }
}
