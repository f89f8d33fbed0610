//! Property tests over the decision rule, fold plans, features, the fused
//! engine and the tape.

use std::collections::BTreeMap;
use std::sync::Arc;

use proptest::prelude::*;

use prodapt_core::adapters::{AdapterArch, AdapterConfig, L1Branch};
use prodapt_core::autodiff::Tape;
use prodapt_core::corpus::{detokenize, tokenize, CorpusRecord};
use prodapt_core::folds::make_folds;
use prodapt_core::fused::{argmin, FusedModel, Schedule};
use prodapt_core::gpt2::{Backbone, ModelConfig, TokenSequence};
use prodapt_core::svm::{featurize, Vocabulary};
use prodapt_core::tensor::Tensor;

fn records(counts: &[usize]) -> Vec<CorpusRecord> {
    counts
        .iter()
        .enumerate()
        .flat_map(|(l, &n)| {
            (0..n).map(move |i| CorpusRecord {
                id: format!("r{l}-{i}"),
                text: "x".into(),
                label: format!("L{l}"),
                prompt: None,
                proficiency: None,
            })
        })
        .collect()
}

fn small_model() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ffn: 32,
        vocab_size: 258,
        max_seq_len: 12,
        ..ModelConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn argmin_picks_a_minimum_and_ignores_shifts(
        ints in prop::collection::vec(-50i32..50, 1..12),
        shift in -100i32..100,
    ) {
        let losses: Vec<f32> = ints.iter().map(|&v| v as f32).collect();
        let d = argmin(&losses).unwrap();
        let min = losses.iter().cloned().fold(f32::INFINITY, f32::min);
        prop_assert_eq!(losses[d.index], min);
        prop_assert_eq!(d.index, losses.iter().position(|&v| v == min).unwrap());
        prop_assert!(d.margin >= 0.0);
        prop_assert_eq!(d.tie, losses.iter().filter(|&&v| v == min).count() > 1);
        let shifted: Vec<f32> = losses.iter().map(|v| v + shift as f32).collect();
        let e = argmin(&shifted).unwrap();
        prop_assert_eq!(e.index, d.index);
        prop_assert_eq!(e.margin, d.margin);
    }

    #[test]
    fn argmin_follows_a_permutation(
        ints in prop::collection::hash_set(-1000i32..1000, 2..10),
        rot in 0usize..10,
    ) {
        let losses: Vec<f32> = ints.into_iter().map(|v| v as f32).collect();
        let n = losses.len();
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let permuted: Vec<f32> = perm.iter().map(|&p| losses[p]).collect();
        let d = argmin(&losses).unwrap();
        let e = argmin(&permuted).unwrap();
        prop_assert_eq!(perm[e.index], d.index);
    }

    #[test]
    fn folds_partition_and_stratify(
        counts in prop::collection::vec(3usize..40, 1..6),
        k in 2usize..4,
        seed in any::<u64>(),
    ) {
        let recs = records(&counts);
        let plan = make_folds(&recs, k, seed).unwrap();
        let mut seen = vec![0usize; recs.len()];
        let mut totals = Vec::new();
        for f in 0..k {
            let test = plan.test_indices(f);
            let train = plan.train_indices(f);
            prop_assert_eq!(test.len() + train.len(), recs.len());
            for &i in &test {
                seen[i] += 1;
                prop_assert!(!train.contains(&i));
            }
            totals.push(test.len());
            for (l, &n) in counts.iter().enumerate() {
                let per = test.iter().filter(|&&i| recs[i].label == format!("L{l}")).count();
                prop_assert!(per == n / k || per == n / k + 1);
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        let (lo, hi) = (totals.iter().min().unwrap(), totals.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
        prop_assert_eq!(&make_folds(&recs, k, seed).unwrap(), &plan);
    }

    #[test]
    fn features_ignore_word_order(
        words in prop::collection::vec("[a-e]{1,3}", 1..30),
        rot in 0usize..30,
    ) {
        let text = words.join(" ");
        let vocab = Vocabulary::build([text.as_str(), text.as_str()], 2);
        let n = words.len();
        let rotated: Vec<&str> = (0..n).map(|i| words[(i + rot) % n].as_str()).collect();
        let a = featurize(&text, &vocab);
        let b = featurize(&rotated.join("  \t"), &vocab);
        prop_assert_eq!(&a, &b);
        let norm: f64 = a.entries.iter().map(|(_, v)| f64::from(*v).powi(2)).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-5);
        let mut counts: BTreeMap<&str, f64> = BTreeMap::new();
        for w in &words {
            *counts.entry(w).or_default() += 1.0;
        }
        let l2 = counts.values().map(|c| c * c).sum::<f64>().sqrt();
        prop_assert_eq!(a.entries.len(), counts.len());
        for (term, c) in counts {
            let idx = vocab.get(term).unwrap();
            let v = a.entries.iter().find(|(i, _)| *i == idx).unwrap().1;
            prop_assert!((f64::from(v) - c / l2).abs() < 1e-6);
        }
    }

    #[test]
    fn tokenize_roundtrips(text in "\\PC{0,40}") {
        let t = tokenize(&text);
        prop_assert_eq!(t.len(), text.len() + 2);
        prop_assert_eq!(detokenize(&t).unwrap(), text);
    }

    #[test]
    fn softmax_rows_are_distributions(data in prop::collection::vec(-20.0f32..20.0, 12)) {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(&[3, 4], data).unwrap());
        let p = tape.softmax(x).unwrap();
        for row in tape.value(p).data().chunks(4) {
            let s: f32 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-5);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn fused_matches_sequential(
        ids in prop::collection::vec(0u32..258, 2..30),
        n_branches in 1usize..5,
        seed in any::<u64>(),
        pfeiffer in any::<bool>(),
    ) {
        let bb = Arc::new(Backbone::init(small_model(), seed).unwrap());
        let mut model = FusedModel::new(Arc::clone(&bb));
        for i in 0..n_branches {
            let arch = if pfeiffer && i % 2 == 0 { AdapterArch::Pfeiffer } else { AdapterArch::Houlsby };
            let config = AdapterConfig { architecture: arch, reduction_factor: 4, ..AdapterConfig::default() };
            let mut b = L1Branch::init(config, &bb, &format!("b{i}"), seed.wrapping_add(i as u64)).unwrap();
            for (j, p) in b.params_mut().into_iter().enumerate() {
                for (k, v) in p.data_mut().iter_mut().enumerate() {
                    *v += 0.05 * (((i * 31 + j * 7 + k) % 13) as f32 - 6.0) / 6.0;
                }
            }
            model.attach(b, None).unwrap();
        }
        let doc = TokenSequence::new(ids);
        let seq = model.sequential_losses(&doc, false).unwrap();
        let serial = model.fused_losses_with(&doc, Schedule::Serial).unwrap();
        let parallel = model.fused_losses_with(&doc, Schedule::Parallel).unwrap();
        prop_assert!(serial.bit_eq(&seq));
        prop_assert!(parallel.bit_eq(&seq));
        prop_assert_eq!(serial.labels().collect::<Vec<_>>(), model.labels());
    }
}
