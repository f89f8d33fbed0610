//! Gradient-check cases: each pairs a tape program with an f64 reference.

use prodapt_core::adapters::{AdapterArch, AdapterConfig, L1Branch, Nonlinearity};
use prodapt_core::autodiff::{GeluKind, Tape, Var};
use prodapt_core::gpt2::{Backbone, ModelConfig, TokenSequence};
use prodapt_core::tensor::Tensor;
use prodapt_core::training::batch_gradients;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

type TapeFn = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;
type RefFn = Box<dyn Fn(&[Vec<f64>]) -> Mat>;

pub struct Case {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub scale: f64,
    pub tape: TapeFn,
    pub reference: RefFn,
}

const IGNORE: usize = usize::MAX;
const STEP: f64 = 1e-5;

fn m(buf: &[f64], rows: usize, cols: usize) -> Mat {
    Mat::new(rows, cols, buf.to_vec())
}

fn case(
    name: &'static str,
    shapes: &[&[usize]],
    scale: f64,
    tape: impl Fn(&mut Tape, &[Var]) -> Var + 'static,
    reference: impl Fn(&[Vec<f64>]) -> Mat + 'static,
) -> Case {
    Case {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        scale,
        tape: Box::new(tape),
        reference: Box::new(reference),
    }
}

fn scalar(v: f64) -> Mat {
    Mat::new(1, 1, vec![v])
}

pub fn all_cases() -> Vec<Case> {
    let ce_targets = vec![3usize, 0, IGNORE, 6, 2];
    let ce_ref = ce_targets.clone();
    let toy_targets = vec![1usize, 4, 0, 6, IGNORE];
    let toy_ref = toy_targets.clone();
    vec![
        case(
            "matmul",
            &[&[4, 5], &[5, 3]],
            1.0,
            |t, v| t.matmul(v[0], v[1]).unwrap(),
            |x| matmul(&m(&x[0], 4, 5), &m(&x[1], 5, 3)),
        ),
        case(
            "matmul_nt",
            &[&[4, 5], &[3, 5]],
            1.0,
            |t, v| t.matmul_nt(v[0], v[1]).unwrap(),
            |x| matmul_nt(&m(&x[0], 4, 5), &m(&x[1], 3, 5)),
        ),
        case(
            "add",
            &[&[4, 3], &[4, 3]],
            1.0,
            |t, v| t.add(v[0], v[1]).unwrap(),
            |x| add(&m(&x[0], 4, 3), &m(&x[1], 4, 3)),
        ),
        case(
            "add_bias",
            &[&[4, 3], &[3]],
            1.0,
            |t, v| t.add_bias(v[0], v[1]).unwrap(),
            |x| add_bias(&m(&x[0], 4, 3), &x[1]),
        ),
        case(
            "scale",
            &[&[3, 4]],
            1.0,
            |t, v| t.scale(v[0], 0.7).unwrap(),
            |x| map(&m(&x[0], 3, 4), |z| z * 0.7),
        ),
        case(
            "gelu_tanh",
            &[&[4, 5]],
            2.0,
            |t, v| t.gelu(v[0], GeluKind::Tanh).unwrap(),
            |x| map(&m(&x[0], 4, 5), |z| gelu(z, GeluKind::Tanh)),
        ),
        case(
            "gelu_erf",
            &[&[4, 5]],
            2.0,
            |t, v| t.gelu(v[0], GeluKind::Erf).unwrap(),
            |x| map(&m(&x[0], 4, 5), |z| gelu(z, GeluKind::Erf)),
        ),
        case(
            "relu",
            &[&[4, 5]],
            1.0,
            |t, v| t.relu(v[0]).unwrap(),
            |x| map(&m(&x[0], 4, 5), |z| z.max(0.0)),
        ),
        case(
            "layernorm",
            &[&[4, 6], &[6], &[6]],
            1.0,
            |t, v| t.layernorm(v[0], v[1], v[2], 1e-5).unwrap(),
            |x| layernorm(&m(&x[0], 4, 6), &x[1], &x[2], 1e-5),
        ),
        case(
            "softmax",
            &[&[4, 5]],
            1.5,
            |t, v| t.softmax(v[0]).unwrap(),
            |x| softmax_rows(&m(&x[0], 4, 5)),
        ),
        case(
            "causal_softmax",
            &[&[5, 5]],
            1.5,
            |t, v| {
                let masked = t.causal_mask(v[0]).unwrap();
                t.softmax(masked).unwrap()
            },
            |x| softmax_rows(&causal_mask(&m(&x[0], 5, 5))),
        ),
        case(
            "slice_cols",
            &[&[3, 7]],
            1.0,
            |t, v| t.slice_cols(v[0], 2, 3).unwrap(),
            |x| slice_cols(&m(&x[0], 3, 7), 2, 3),
        ),
        case(
            "concat_cols",
            &[&[3, 2], &[3, 4]],
            1.0,
            |t, v| t.concat_cols(&[v[0], v[1]]).unwrap(),
            |x| concat_cols(&[m(&x[0], 3, 2), m(&x[1], 3, 4)]),
        ),
        case(
            "slice_rows",
            &[&[7, 3]],
            1.0,
            |t, v| t.slice_rows(v[0], 2, 4).unwrap(),
            |x| Mat::new(4, 3, x[0][6..18].to_vec()),
        ),
        case(
            "concat_rows",
            &[&[2, 3], &[4, 3]],
            1.0,
            |t, v| t.concat_rows(&[v[0], v[1], v[0]]).unwrap(),
            |x| Mat::new(8, 3, [x[0].clone(), x[1].clone(), x[0].clone()].concat()),
        ),
        case(
            "gather_rows",
            &[&[6, 3]],
            1.0,
            |t, v| t.gather_rows(v[0], &[0, 2, 2, 5]).unwrap(),
            |x| gather_rows(&m(&x[0], 6, 3), &[0, 2, 2, 5]),
        ),
        case(
            "sum",
            &[&[3, 4]],
            1.0,
            |t, v| t.sum(v[0]).unwrap(),
            |x| scalar(x[0].iter().sum()),
        ),
        case(
            "cross_entropy",
            &[&[5, 7]],
            2.0,
            move |t, v| t.cross_entropy(v[0], &ce_targets, IGNORE).unwrap().loss,
            move |x| scalar(cross_entropy(&m(&x[0], 5, 7), &ce_ref, IGNORE)),
        ),
        case(
            "adapter_site_gelu",
            &[&[6, 8], &[8, 2], &[2], &[2, 8], &[8]],
            1.0,
            |t, v| site_on_tape(t, v, Nonlinearity::Gelu),
            |x| site_ref(x, Nonlinearity::Gelu),
        ),
        case(
            "adapter_site_relu",
            &[&[6, 8], &[8, 2], &[2], &[2, 8], &[8]],
            1.0,
            |t, v| site_on_tape(t, v, Nonlinearity::Relu),
            |x| site_ref(x, Nonlinearity::Relu),
        ),
        case(
            "two_layer_net",
            &[&[5, 6], &[6, 8], &[8], &[8], &[8], &[8, 7], &[7]],
            1.0,
            move |t, v| {
                let h = t.matmul(v[0], v[1]).unwrap();
                let h = t.add_bias(h, v[2]).unwrap();
                let h = t.gelu(h, GeluKind::Tanh).unwrap();
                let h = t.layernorm(h, v[3], v[4], 1e-5).unwrap();
                let h = t.matmul(h, v[5]).unwrap();
                let logits = t.add_bias(h, v[6]).unwrap();
                t.cross_entropy(logits, &toy_targets, IGNORE).unwrap().loss
            },
            move |x| {
                let h = add_bias(&matmul(&m(&x[0], 5, 6), &m(&x[1], 6, 8)), &x[2]);
                let h = map(&h, |z| gelu(z, GeluKind::Tanh));
                let h = layernorm(&h, &x[3], &x[4], 1e-5);
                let logits = add_bias(&matmul(&h, &m(&x[5], 8, 7)), &x[6]);
                scalar(cross_entropy(&logits, &toy_ref, IGNORE))
            },
        ),
    ]
}

fn site_on_tape(t: &mut Tape, v: &[Var], nl: Nonlinearity) -> Var {
    let z = t.matmul(v[0], v[1]).unwrap();
    let z = t.add_bias(z, v[2]).unwrap();
    let a = match nl {
        Nonlinearity::Gelu => t.gelu(z, GeluKind::Tanh).unwrap(),
        Nonlinearity::Relu => t.relu(z).unwrap(),
    };
    let u = t.matmul(a, v[3]).unwrap();
    let u = t.add_bias(u, v[4]).unwrap();
    t.add(v[0], u).unwrap()
}

fn site_ref(x: &[Vec<f64>], nl: Nonlinearity) -> Mat {
    adapter_site(
        &m(&x[0], 6, 8),
        &m(&x[1], 8, 2),
        &x[2],
        &m(&x[3], 2, 8),
        &x[4],
        nl,
        GeluKind::Tanh,
    )
}

/// Relative error between tape and central-difference gradients for one
/// random draw of the inputs (and of the output weighting).
pub fn case_error(c: &Case, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Round inputs through f32 so both paths see the same point.
    let inputs: Vec<Vec<f64>> = c
        .shapes
        .iter()
        .map(|s| {
            randn_vec(s.iter().product(), &mut rng)
                .into_iter()
                .map(|v| (v * c.scale) as f32 as f64)
                .collect()
        })
        .collect();

    let mut tape = Tape::new();
    let leaves: Vec<Var> = c
        .shapes
        .iter()
        .zip(&inputs)
        .map(|(s, x)| {
            let t = Tensor::new(s, x.iter().map(|&v| v as f32).collect())
                .unwrap()
                .with_requires_grad(true);
            tape.leaf(&t)
        })
        .collect();
    let out = (c.tape)(&mut tape, &leaves);
    let shape = tape.value(out).shape().to_vec();
    let (weights_r, weights_c) = if tape.value(out).numel() == 1 {
        (vec![1.0], vec![1.0])
    } else {
        assert_eq!(shape.len(), 2, "{}: output must be a matrix", c.name);
        (
            randn_vec(shape[0], &mut rng).into_iter().map(|v| v as f32 as f64).collect(),
            randn_vec(shape[1], &mut rng).into_iter().map(|v| v as f32 as f64).collect(),
        )
    };
    let loss = if tape.value(out).numel() == 1 {
        tape.sum(out).unwrap()
    } else {
        let r = tape.constant(&Tensor::new(&[1, shape[0]], weights_r.iter().map(|&v| v as f32).collect()).unwrap());
        let col = tape.constant(&Tensor::new(&[shape[1], 1], weights_c.iter().map(|&v| v as f32).collect()).unwrap());
        let left = tape.matmul(r, out).unwrap();
        let both = tape.matmul(left, col).unwrap();
        tape.sum(both).unwrap()
    };
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f32>> = leaves
        .iter()
        .zip(&inputs)
        .map(|(&v, x)| tape.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]))
        .collect();

    let weighted = |x: &[Vec<f64>]| -> f64 {
        let y = (c.reference)(x);
        let mut s = 0.0;
        for i in 0..y.rows {
            for j in 0..y.cols {
                s += weights_r[i] * weights_c[j] * y.at(i, j);
            }
        }
        s
    };
    let forward_ref = weighted(&inputs);
    let forward_tape = tape.value(loss).item().unwrap() as f64;
    assert!(
        (forward_ref - forward_tape).abs() <= 1e-4 * forward_ref.abs().max(1.0),
        "{}: forward mismatch {forward_tape} vs {forward_ref}",
        c.name
    );
    let numeric = numeric_grad(&inputs, STEP, weighted);
    rel_error(&analytic, &numeric)
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ffn: 16,
        vocab_size: 11,
        max_seq_len: 6,
        gelu: GeluKind::Tanh,
        tie_lm_head: true,
    }
}

/// Gradient of the windowed document loss with respect to every branch
/// parameter of a tiny model, tape vs f64 central differences. Even seeds
/// use a Houlsby GELU branch, odd seeds a Pfeiffer ReLU branch.
pub fn gpt_branch_error(seed: u64) -> f64 {
    let cfg = tiny_model_config();
    let backbone = Backbone::init(cfg, seed).unwrap();
    let adapter = if seed % 2 == 0 {
        AdapterConfig {
            architecture: AdapterArch::Houlsby,
            reduction_factor: 4,
            nonlinearity: Nonlinearity::Gelu,
            ..AdapterConfig::default()
        }
    } else {
        AdapterConfig {
            architecture: AdapterArch::Pfeiffer,
            reduction_factor: 2,
            nonlinearity: Nonlinearity::Relu,
            ..AdapterConfig::default()
        }
    };
    let mut branch = L1Branch::init(adapter, &backbone, "x", seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    for p in branch.params_mut() {
        let noise = randn_vec(p.numel(), &mut rng);
        for (v, n) in p.data_mut().iter_mut().zip(noise) {
            *v += (0.5 * n) as f32;
        }
    }
    let len = 9 + (seed as usize % 4);
    let ids: Vec<u32> = (0..len).map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect();
    let doc = TokenSequence::new(ids.clone());

    let analytic = batch_gradients(&backbone, &branch, &[&doc]).unwrap();
    assert!(analytic.backbone_grads_absent);
    let params = flatten_branch(&branch);
    let windows: Vec<&[u32]> = ids.chunks(cfg.max_seq_len).filter(|w| w.len() >= 2).collect();
    let predicted: usize = windows.iter().map(|w| w.len() - 1).sum();
    let loss = |p: &[Vec<f64>]| -> f64 {
        windows
            .iter()
            .map(|w| gpt_window_loss(&backbone, &branch, p, w) * (w.len() - 1) as f64 / predicted as f64)
            .sum()
    };
    let reference_loss = loss(&params);
    assert!(
        (reference_loss - analytic.loss as f64).abs() < 1e-4 * reference_loss.max(1.0),
        "loss {} vs {reference_loss}",
        analytic.loss
    );
    let numeric = numeric_grad(&params, STEP, loss);
    rel_error(&analytic.grads, &numeric)
}
