//! Synthetic multi-source corpora.
//!
//! Each source is an order-1 Markov chain over a small character alphabet.
//! Distinct transition matrices give each label its own local statistics,
//! which is the kind of signal a per-label language model can pick up.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::corpus::CorpusRecord;
use crate::error::DataError;

pub const DEFAULT_ALPHABET: &str = "abcdefghijklmnop ";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthRange {
    pub min: usize,
    pub max: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSource {
    pub label: String,
    pub alphabet: Vec<char>,
    /// Row-stochastic `|alphabet| × |alphabet|` matrix.
    pub transition: Vec<Vec<f64>>,
    /// Character count per document, drawn uniformly from the range.
    pub length: LengthRange,
    /// Seed the transition matrix was drawn with.
    pub seed: u64,
}

impl SyntheticSource {
    pub fn new(
        label: &str,
        alphabet: Vec<char>,
        transition: Vec<Vec<f64>>,
        length: LengthRange,
        seed: u64,
    ) -> Result<Self, DataError> {
        let s = Self {
            label: label.to_string(),
            alphabet,
            transition,
            length,
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    /// Rows drawn from a symmetric Dirichlet(`concentration`).
    pub fn random(label: &str, alphabet: &str, concentration: f64, length: LengthRange, seed: u64) -> Result<Self, DataError> {
        let alphabet: Vec<char> = alphabet.chars().collect();
        if concentration <= 0.0 {
            return Err(DataError::InvalidSource(format!(
                "concentration must be positive, got {concentration}"
            )));
        }
        let gamma = Gamma::new(concentration, 1.0).map_err(|e| DataError::InvalidSource(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = alphabet.len();
        let transition = (0..n)
            .map(|_| {
                let mut row: Vec<f64> = (0..n).map(|_| gamma.sample(&mut rng).max(1e-300)).collect();
                let total: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= total);
                row
            })
            .collect();
        Self::new(label, alphabet, transition, length, seed)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.alphabet.len();
        if n < 2 {
            return Err(DataError::InvalidSource(format!("{}: alphabet needs at least two symbols", self.label)));
        }
        if self.transition.len() != n || self.transition.iter().any(|r| r.len() != n) {
            return Err(DataError::InvalidSource(format!(
                "{}: transition matrix must be {n}×{n}",
                self.label
            )));
        }
        for (i, row) in self.transition.iter().enumerate() {
            let total: f64 = row.iter().sum();
            if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                return Err(DataError::InvalidSource(format!(
                    "{}: row {i} is not a probability distribution (sum {total})",
                    self.label
                )));
            }
        }
        if self.length.min == 0 || self.length.min > self.length.max {
            return Err(DataError::InvalidSource(format!(
                "{}: bad length range {}..={}",
                self.label, self.length.min, self.length.max
            )));
        }
        Ok(())
    }

    fn sample_row<R: Rng>(row: &[f64], rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (j, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return j;
            }
        }
        row.len() - 1
    }

    /// Samples one document; the first symbol is uniform over the alphabet.
    pub fn sample_text<R: Rng>(&self, len: usize, rng: &mut R) -> String {
        let n = self.alphabet.len();
        let mut state = rng.random_range(0..n);
        let mut out = String::with_capacity(len);
        out.push(self.alphabet[state]);
        for _ in 1..len {
            state = Self::sample_row(&self.transition[state], rng);
            out.push(self.alphabet[state]);
        }
        out
    }
}

/// Mean over rows of the total-variation distance between the two
/// sources' transition rows.
pub fn source_distance(a: &SyntheticSource, b: &SyntheticSource) -> Result<f64, DataError> {
    if a.alphabet != b.alphabet {
        return Err(DataError::InvalidSource(format!(
            "sources {:?} and {:?} use different alphabets",
            a.label, b.label
        )));
    }
    let n = a.alphabet.len();
    let total: f64 = a
        .transition
        .iter()
        .zip(&b.transition)
        .map(|(ra, rb)| 0.5 * ra.iter().zip(rb).map(|(x, y)| (x - y).abs()).sum::<f64>())
        .sum();
    Ok(total / n as f64)
}

/// Checks every pair of sources against the distinctness floor.
pub fn check_distinct(sources: &[SyntheticSource], floor: f64) -> Result<(), DataError> {
    for (i, a) in sources.iter().enumerate() {
        for b in &sources[i + 1..] {
            if a.label == b.label {
                return Err(DataError::InvalidSource(format!("duplicate source label {:?}", a.label)));
            }
            let distance = source_distance(a, b)?;
            if distance < floor {
                return Err(DataError::SourcesTooSimilar {
                    a: a.label.clone(),
                    b: b.label.clone(),
                    distance,
                    floor,
                });
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub sources: usize,
    pub docs_per_source: usize,
    pub alphabet: String,
    pub concentration: f64,
    pub length: LengthRange,
    pub distinct_floor: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sources: 5,
            docs_per_source: 200,
            alphabet: DEFAULT_ALPHABET.to_string(),
            concentration: 0.3,
            length: LengthRange { min: 60, max: 120 },
            distinct_floor: 0.3,
        }
    }
}

/// Labels `L00`, `L01`, …
pub fn source_label(i: usize) -> String {
    format!("L{i:02}")
}

/// Draws `config.sources` random sources from `seed`.
pub fn random_sources(config: &SynthConfig, seed: u64) -> Result<Vec<SyntheticSource>, DataError> {
    let sources = (0..config.sources)
        .map(|i| {
            SyntheticSource::random(
                &source_label(i),
                &config.alphabet,
                config.concentration,
                config.length,
                seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    check_distinct(&sources, config.distinct_floor)?;
    Ok(sources)
}

/// Samples `docs_per_source` documents from every source, in source order.
pub fn gen_synthetic(
    sources: &[SyntheticSource],
    docs_per_source: usize,
    distinct_floor: f64,
    seed: u64,
) -> Result<Vec<CorpusRecord>, DataError> {
    if sources.len() < 2 {
        return Err(DataError::InvalidSource(format!(
            "need at least two sources, got {}",
            sources.len()
        )));
    }
    for s in sources {
        s.validate()?;
    }
    check_distinct(sources, distinct_floor)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(sources.len() * docs_per_source);
    for s in sources {
        for i in 0..docs_per_source {
            let len = rng.random_range(s.length.min..=s.length.max);
            out.push(CorpusRecord {
                id: format!("{}-{i:04}", s.label),
                text: s.sample_text(len, &mut rng),
                label: s.label.clone(),
                prompt: None,
                proficiency: None,
            });
        }
    }
    Ok(out)
}
