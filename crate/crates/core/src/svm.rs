//! Bag-of-words one-vs-rest linear SVM baseline.
//!
//! Features are whitespace-delimited word counts, L2 normalized. Each label
//! gets a binary hinge-loss classifier trained with Pegasos updates; the
//! bias is an extra feature fixed at 1 and is regularized with the weights.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Header, SvmHeader};
use crate::error::{CheckpointError, SvmError};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    pub lambda: f64,
    pub epochs: u32,
    pub min_df: u32,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            epochs: 10,
            min_df: 2,
            seed: 0,
        }
    }
}

impl SvmConfig {
    pub fn validate(&self) -> Result<(), SvmError> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(SvmError::InvalidConfig(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.epochs == 0 {
            return Err(SvmError::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.min_df == 0 {
            return Err(SvmError::InvalidConfig("min_df must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn words(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
}

/// Term → dense feature index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    terms: Vec<String>,
    index: HashMap<String, usize>,
    min_df: u32,
}

impl Vocabulary {
    /// Keeps terms appearing in at least `min_df` documents, indexed in
    /// lexicographic order.
    pub fn build<'a>(docs: impl IntoIterator<Item = &'a str>, min_df: u32) -> Self {
        let mut df: BTreeMap<&str, u32> = BTreeMap::new();
        for doc in docs {
            let uniq: HashSet<&str> = words(doc).collect();
            for w in uniq {
                *df.entry(w).or_default() += 1;
            }
        }
        let terms: Vec<String> = df
            .into_iter()
            .filter(|&(_, n)| n >= min_df)
            .map(|(w, _)| w.to_string())
            .collect();
        Self::from_terms(terms, min_df)
    }

    pub fn from_terms(terms: Vec<String>, min_df: u32) -> Self {
        let index = terms.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { terms, index, min_df }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn get(&self, term: &str) -> Option<usize> {
        self.index.get(term).copied()
    }

    pub fn min_df(&self) -> u32 {
        self.min_df
    }
}

/// Sparse L2-normalized feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub dim: usize,
    /// Sorted by index, no duplicates.
    pub entries: Vec<(usize, f32)>,
    /// No in-vocabulary token was found.
    pub empty: bool,
}

impl Features {
    pub fn dense(&self) -> Vec<f32> {
        let mut v = vec![0.0; self.dim];
        for &(i, x) in &self.entries {
            v[i] = x;
        }
        v
    }

    pub fn scaled(&self, c: f32) -> Features {
        Features {
            dim: self.dim,
            entries: self.entries.iter().map(|&(i, x)| (i, x * c)).collect(),
            empty: self.empty,
        }
    }
}

pub fn featurize(text: &str, vocab: &Vocabulary) -> Features {
    let mut counts: BTreeMap<usize, u32> = BTreeMap::new();
    for w in words(text) {
        if let Some(i) = vocab.get(w) {
            *counts.entry(i).or_default() += 1;
        }
    }
    let norm = counts.values().map(|&c| f64::from(c).powi(2)).sum::<f64>().sqrt();
    Features {
        dim: vocab.len(),
        entries: counts
            .into_iter()
            .map(|(i, c)| (i, (f64::from(c) / norm) as f32))
            .collect(),
        empty: norm == 0.0,
    }
}

/// One weight row and bias per label.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearOvrModel {
    pub labels: Vec<String>,
    pub vocabulary: Vocabulary,
    /// `[labels × |vocabulary|]`
    pub weights: Vec<Vec<f32>>,
    pub bias: Vec<f32>,
    pub config: SvmConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SvmPrediction {
    pub label: String,
    pub index: usize,
    pub scores: Vec<f32>,
    pub tie: bool,
}

/// Pegasos weight vector kept as `scale · v` so the shrink step is O(1).
struct Scaled {
    v: Vec<f64>,
    scale: f64,
}

impl Scaled {
    fn dot(&self, x: &[(usize, f32)]) -> f64 {
        self.scale * x.iter().map(|&(i, xi)| self.v[i] * f64::from(xi)).sum::<f64>()
    }

    fn shrink(&mut self, factor: f64) {
        if factor <= 1e-12 {
            self.v.iter_mut().for_each(|w| *w = 0.0);
            self.scale = 1.0;
        } else {
            self.scale *= factor;
        }
    }

    fn add(&mut self, x: &[(usize, f32)], c: f64) {
        let c = c / self.scale;
        for &(i, xi) in x {
            self.v[i] += c * f64::from(xi);
        }
    }

    fn into_weights(self) -> Vec<f64> {
        self.v.into_iter().map(|w| w * self.scale).collect()
    }
}

/// Trains one binary classifier per label. Every label replays the same
/// sample order, so relabelling the data permutes the weight rows.
pub fn train_svm(
    labels: &[String],
    data: &[(Features, usize)],
    vocabulary: Vocabulary,
    config: &SvmConfig,
) -> Result<LinearOvrModel, SvmError> {
    config.validate()?;
    if data.is_empty() {
        return Err(SvmError::Empty);
    }
    let present: HashSet<usize> = data.iter().map(|(_, y)| *y).collect();
    if labels.len() < 2 || present.len() < 2 {
        return Err(SvmError::TooFewLabels(present.len()));
    }
    let dim = vocabulary.len();
    for (x, y) in data {
        if x.dim != dim {
            return Err(SvmError::Dimension { expected: dim, got: x.dim });
        }
        if *y >= labels.len() {
            return Err(SvmError::InvalidConfig(format!("label index {y} out of range")));
        }
    }
    // Augmented inputs: the bias feature sits at index `dim`.
    let augmented: Vec<Vec<(usize, f32)>> = data
        .iter()
        .map(|(x, _)| {
            let mut e = x.entries.clone();
            e.push((dim, 1.0));
            e
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut schedule = Vec::with_capacity(data.len() * config.epochs as usize);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        schedule.extend_from_slice(&order);
    }
    let mut weights = Vec::with_capacity(labels.len());
    let mut bias = Vec::with_capacity(labels.len());
    for k in 0..labels.len() {
        let mut w = Scaled {
            v: vec![0.0; dim + 1],
            scale: 1.0,
        };
        for (t, &i) in schedule.iter().enumerate() {
            let eta = 1.0 / (config.lambda * (t + 1) as f64);
            let y = if data[i].1 == k { 1.0 } else { -1.0 };
            let margin = y * w.dot(&augmented[i]);
            w.shrink(1.0 - eta * config.lambda);
            if margin < 1.0 {
                w.add(&augmented[i], eta * y);
            }
        }
        let mut full = w.into_weights();
        bias.push(full.pop().unwrap_or_default() as f32);
        weights.push(full.into_iter().map(|v| v as f32).collect());
    }
    Ok(LinearOvrModel {
        labels: labels.to_vec(),
        vocabulary,
        weights,
        bias,
        config: config.clone(),
    })
}

impl LinearOvrModel {
    pub fn dim(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn scores(&self, x: &Features) -> Result<Vec<f32>, SvmError> {
        if x.dim != self.dim() {
            return Err(SvmError::Dimension {
                expected: self.dim(),
                got: x.dim,
            });
        }
        Ok(self
            .weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| {
                let s: f64 = x.entries.iter().map(|&(i, xi)| f64::from(w[i]) * f64::from(xi)).sum();
                (s + f64::from(*b)) as f32
            })
            .collect())
    }

    /// Argmax over label scores; the first label wins ties.
    pub fn predict(&self, x: &Features) -> Result<SvmPrediction, SvmError> {
        let scores = self.scores(x)?;
        let (index, best) = scores
            .iter()
            .copied()
            .enumerate()
            .reduce(|acc, cur| if cur.1 > acc.1 { cur } else { acc })
            .ok_or(SvmError::Empty)?;
        let tie = scores.iter().enumerate().any(|(i, &s)| i != index && s == best);
        Ok(SvmPrediction {
            label: self.labels[index].clone(),
            index,
            scores,
            tie,
        })
    }

    pub fn predict_text(&self, text: &str) -> Result<SvmPrediction, SvmError> {
        self.predict(&featurize(text, &self.vocabulary))
    }

    pub fn save(&self, path: &Path) -> Result<u64, CheckpointError> {
        let header = Header::Svm(SvmHeader {
            labels: self.labels.clone(),
            vocabulary: self.vocabulary.terms().to_vec(),
            min_df: self.config.min_df,
            lambda: self.config.lambda,
            epochs: self.config.epochs,
            seed: self.config.seed,
        });
        let flat: Vec<f32> = self.weights.iter().flatten().copied().collect();
        let w = Tensor::new(&[self.labels.len(), self.dim()], flat)
            .map_err(|e| CheckpointError::Integrity(e.to_string()))?;
        let b = Tensor::new(&[self.labels.len()], self.bias.clone())
            .map_err(|e| CheckpointError::Integrity(e.to_string()))?;
        let bytes = checkpoint::encode(&header, &[("weight".into(), &w), ("bias".into(), &b)]);
        checkpoint::write_file(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut c = checkpoint::read_file(path)?;
        let Header::Svm(h) = c.header.clone() else {
            return Err(CheckpointError::PayloadType {
                expected: "svm",
                found: c.payload().name(),
            });
        };
        let w = c
            .take("weight")
            .ok_or_else(|| CheckpointError::Integrity("svm file lacks weight".into()))?;
        let b = c
            .take("bias")
            .ok_or_else(|| CheckpointError::Integrity("svm file lacks bias".into()))?;
        let (n, dim) = (h.labels.len(), h.vocabulary.len());
        if w.shape() != [n, dim] || b.shape() != [n] {
            return Err(CheckpointError::Integrity(format!(
                "svm tensors have shapes {:?} and {:?}, header implies [{n}, {dim}] and [{n}]",
                w.shape(),
                b.shape()
            )));
        }
        let weights = if dim == 0 {
            vec![Vec::new(); n]
        } else {
            w.data().chunks(dim).map(<[f32]>::to_vec).collect()
        };
        Ok(Self {
            labels: h.labels,
            vocabulary: Vocabulary::from_terms(h.vocabulary, h.min_df),
            weights,
            bias: b.data().to_vec(),
            config: SvmConfig {
                lambda: h.lambda,
                epochs: h.epochs,
                min_df: h.min_df,
                seed: h.seed,
            },
        })
    }
}

/// Builds the vocabulary from `(text, label)` pairs and trains on them.
pub fn fit_texts(pairs: &[(&str, &str)], config: &SvmConfig) -> Result<LinearOvrModel, SvmError> {
    let mut labels: Vec<String> = Vec::new();
    for (_, l) in pairs {
        if !labels.iter().any(|x| x == l) {
            labels.push(l.to_string());
        }
    }
    let vocab = Vocabulary::build(pairs.iter().map(|(t, _)| *t), config.min_df);
    let data: Vec<(Features, usize)> = pairs
        .iter()
        .map(|(t, l)| {
            let y = labels.iter().position(|x| x == l).expect("label collected above");
            (featurize(t, &vocab), y)
        })
        .collect();
    train_svm(&labels, &data, vocab, config)
}
