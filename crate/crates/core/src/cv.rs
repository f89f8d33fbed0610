//! k-fold cross-validation for the adapter classifier and the SVM baseline.

use std::collections::{BTreeSet, HashSet};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterConfig;
use crate::corpus::{labels_in_order, tokenize, CorpusRecord};
use crate::error::{DataError, EngineError, SvmError, TrainError};
use crate::folds::{make_folds, FoldPlan};
use crate::fused::FusedModel;
use crate::gpt2::{Backbone, TokenSequence};
use crate::svm::{featurize, train_svm, Features, SvmConfig, Vocabulary};
use crate::training::{train_branch, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum System {
    Prodapt,
    Svm,
}

impl std::fmt::Display for System {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            System::Prodapt => "prodapt",
            System::Svm => "svm",
        })
    }
}

impl std::str::FromStr for System {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "prodapt" => Ok(System::Prodapt),
            "svm" => Ok(System::Svm),
            other => Err(format!("unknown system {other:?}; expected prodapt or svm")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CvError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Svm(#[from] SvmError),
    #[error("fold leakage: {0}")]
    Leakage(String),
}

#[derive(Clone, Debug)]
pub struct CvOptions {
    pub k: usize,
    pub seed: u64,
    pub train: TrainConfig,
    pub adapter: AdapterConfig,
    pub svm: SvmConfig,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            k: 10,
            seed: 0,
            train: TrainConfig::default(),
            adapter: AdapterConfig::default(),
            svm: SvmConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvPrediction {
    pub id: String,
    pub fold: usize,
    pub gold: String,
    pub predicted: String,
    pub tie: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    /// Folds whose records the fold's artifacts were trained on.
    pub train_folds: BTreeSet<usize>,
    pub train_records: usize,
    pub test_records: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub system: System,
    pub k: usize,
    pub seed: u64,
    pub labels: Vec<String>,
    pub folds: Vec<FoldResult>,
    pub mean_accuracy: f64,
    pub predictions: Vec<CvPrediction>,
}

impl CvReport {
    /// Fold records, then one record per prediction, then a summary.
    pub fn write_jsonl<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        #[derive(Serialize)]
        #[serde(tag = "record", rename_all = "lowercase")]
        enum Rec<'a> {
            Fold(&'a FoldResult),
            Prediction(&'a CvPrediction),
            Summary {
                system: System,
                k: usize,
                seed: u64,
                labels: &'a [String],
                mean_accuracy: f64,
            },
        }
        for f in &self.folds {
            serde_json::to_writer(&mut out, &Rec::Fold(f))?;
            out.write_all(b"\n")?;
        }
        for p in &self.predictions {
            serde_json::to_writer(&mut out, &Rec::Prediction(p))?;
            out.write_all(b"\n")?;
        }
        serde_json::to_writer(
            &mut out,
            &Rec::Summary {
                system: self.system,
                k: self.k,
                seed: self.seed,
                labels: &self.labels,
                mean_accuracy: self.mean_accuracy,
            },
        )?;
        out.write_all(b"\n")
    }

    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let mut s = format!("{:<8} {:>8} {:>8} {:>10}\n", "fold", "test", "correct", "accuracy");
        for f in &self.folds {
            s.push_str(&format!(
                "{:<8} {:>8} {:>8} {:>9.1}%\n",
                f.fold, f.test_records, f.correct, 100.0 * f.accuracy
            ));
        }
        s.push_str(&format!(
            "{:<8} {:>8} {:>8} {:>9.1}%\n",
            "mean",
            "",
            "",
            100.0 * self.mean_accuracy
        ));
        s
    }
}

/// Per-fold training seed, distinct across folds and labels.
pub fn derive_seed(seed: u64, fold: usize, label: usize) -> u64 {
    seed ^ (fold as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (label as u64).wrapping_add(1).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Runs k-fold cross-validation. The adapter system trains one branch per
/// label on the training folds (labels in parallel) over `backbone`; the
/// SVM builds its vocabulary and weights from the training folds only.
pub fn run_cv(
    records: &[CorpusRecord],
    backbone: &Arc<Backbone>,
    system: System,
    options: &CvOptions,
    on_fold: &mut dyn FnMut(&FoldResult),
) -> Result<CvReport, CvError> {
    let plan = make_folds(records, options.k, options.seed)?;
    let labels = labels_in_order(records);
    let mut folds = Vec::with_capacity(plan.k);
    let mut predictions = Vec::with_capacity(records.len());
    for fold in 0..plan.k {
        let train_idx = plan.train_indices(fold);
        let test_idx = plan.test_indices(fold);
        check_disjoint(records, &plan, fold, &train_idx, &test_idx)?;
        let predicted = match system {
            System::Prodapt => prodapt_fold(records, backbone, &labels, options, fold, &train_idx, &test_idx)?,
            System::Svm => svm_fold(records, &labels, options, fold, &train_idx, &test_idx)?,
        };
        let mut correct = 0;
        for (&i, (label, tie)) in test_idx.iter().zip(predicted) {
            correct += usize::from(label == records[i].label);
            predictions.push(CvPrediction {
                id: records[i].id.clone(),
                fold,
                gold: records[i].label.clone(),
                predicted: label,
                tie,
            });
        }
        let result = FoldResult {
            fold,
            train_folds: plan.train_folds(fold),
            train_records: train_idx.len(),
            test_records: test_idx.len(),
            correct,
            accuracy: correct as f64 / test_idx.len().max(1) as f64,
        };
        on_fold(&result);
        folds.push(result);
    }
    let mean_accuracy = folds.iter().map(|f| f.accuracy).sum::<f64>() / folds.len() as f64;
    Ok(CvReport {
        system,
        k: plan.k,
        seed: options.seed,
        labels,
        folds,
        mean_accuracy,
        predictions,
    })
}

fn check_disjoint(
    records: &[CorpusRecord],
    plan: &FoldPlan,
    fold: usize,
    train_idx: &[usize],
    test_idx: &[usize],
) -> Result<(), CvError> {
    if plan.train_folds(fold).contains(&fold) {
        return Err(CvError::Leakage(format!("fold {fold} is among its own training folds")));
    }
    let train_ids: HashSet<&str> = train_idx.iter().map(|&i| records[i].id.as_str()).collect();
    if let Some(&i) = test_idx.iter().find(|&&i| train_ids.contains(records[i].id.as_str())) {
        return Err(CvError::Leakage(format!(
            "record {:?} is in both the training and test sets of fold {fold}",
            records[i].id
        )));
    }
    Ok(())
}

fn prodapt_fold(
    records: &[CorpusRecord],
    backbone: &Arc<Backbone>,
    labels: &[String],
    options: &CvOptions,
    fold: usize,
    train_idx: &[usize],
    test_idx: &[usize],
) -> Result<Vec<(String, bool)>, CvError> {
    let branches = labels
        .par_iter()
        .enumerate()
        .map(|(li, label)| {
            let docs: Vec<TokenSequence> = train_idx
                .iter()
                .filter(|&&i| &records[i].label == label)
                .map(|&i| tokenize(&records[i].text))
                .collect();
            let config = TrainConfig {
                seed: derive_seed(options.train.seed ^ options.seed, fold, li),
                ..options.train.clone()
            };
            train_branch(backbone, &docs, label, options.adapter, &config).map(|(b, _)| b)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut model = FusedModel::new(Arc::clone(backbone));
    for b in branches {
        model.attach(b, None)?;
    }
    let mut out = Vec::with_capacity(test_idx.len());
    for &i in test_idx {
        let r = model.classify(&tokenize(&records[i].text))?;
        out.push((r.predicted, r.tie));
    }
    Ok(out)
}

fn svm_fold(
    records: &[CorpusRecord],
    labels: &[String],
    options: &CvOptions,
    fold: usize,
    train_idx: &[usize],
    test_idx: &[usize],
) -> Result<Vec<(String, bool)>, CvError> {
    let vocab = Vocabulary::build(train_idx.iter().map(|&i| records[i].text.as_str()), options.svm.min_df);
    let data: Vec<(Features, usize)> = train_idx
        .iter()
        .map(|&i| {
            let y = labels.iter().position(|l| *l == records[i].label).expect("label listed");
            (featurize(&records[i].text, &vocab), y)
        })
        .collect();
    let config = SvmConfig {
        seed: derive_seed(options.svm.seed ^ options.seed, fold, 0),
        ..options.svm.clone()
    };
    let model = train_svm(labels, &data, vocab, &config)?;
    test_idx
        .iter()
        .map(|&i| {
            let p = model.predict_text(&records[i].text)?;
            Ok((p.label, p.tie))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gpt2::ModelConfig;
    use crate::synth::{gen_synthetic, random_sources, SynthConfig};

    fn corpus(per: usize) -> Vec<CorpusRecord> {
        let cfg = SynthConfig::default();
        let sources = random_sources(&cfg, 5).unwrap();
        gen_synthetic(&sources, per, cfg.distinct_floor, 6).unwrap()
    }

    #[test]
    fn svm_beats_chance_and_records_folds() {
        let recs = corpus(60);
        let bb = Arc::new(Backbone::init(ModelConfig::default(), 0).unwrap());
        let mut seen = Vec::new();
        let report = run_cv(&recs, &bb, System::Svm, &CvOptions::default(), &mut |f| seen.push(f.fold)).unwrap();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(report.predictions.len(), recs.len());
        assert!(report.mean_accuracy > 0.3, "{}", report.mean_accuracy);
        for f in &report.folds {
            assert!(!f.train_folds.contains(&f.fold));
            assert_eq!(f.train_records + f.test_records, recs.len());
        }
    }

    #[test]
    fn short_prodapt_run_is_deterministic() {
        let recs = corpus(10);
        let bb = Arc::new(Backbone::init(ModelConfig::default(), 0).unwrap());
        let options = CvOptions {
            k: 2,
            train: TrainConfig {
                epochs: 1,
                ..TrainConfig::default()
            },
            ..CvOptions::default()
        };
        let a = run_cv(&recs, &bb, System::Prodapt, &options, &mut |_| {}).unwrap();
        let b = run_cv(&recs, &bb, System::Prodapt, &options, &mut |_| {}).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.folds.len(), 2);
    }

    #[test]
    fn system_parses() {
        assert_eq!("PRODAPT".parse::<System>().unwrap(), System::Prodapt);
        assert!("x".parse::<System>().is_err());
    }
}
