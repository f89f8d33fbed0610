//! Independent f64 reference implementations and finite-difference helpers
//! shared by the integration tests.
//!
//! Nothing here calls into the tape; each op is written out directly so the
//! reference can serve as an oracle for the autodiff gradients.

#![allow(dead_code)]

pub mod cases;

use prodapt_core::adapters::{AdapterSite, L1Branch, Nonlinearity};
use prodapt_core::autodiff::GeluKind;
use prodapt_core::gpt2::Backbone;
use prodapt_core::tensor::Tensor;
use rand::Rng;

/// Row-major f64 matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let shape = t.shape();
        let (r, c) = match shape.len() {
            1 => (1, shape[0]),
            2 => (shape[0], shape[1]),
            _ => panic!("rank {} not supported", shape.len()),
        };
        Self::new(r, c, t.data().iter().map(|&v| v as f64).collect())
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

pub fn randn_vec<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| {
            // Box-Muller keeps this independent of the library's sampler.
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random::<f64>();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows);
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.at(i, k);
            for j in 0..b.cols {
                out.data[i * b.cols + j] += aik * b.at(k, j);
            }
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    let mut out = Mat::zeros(a.cols, a.rows);
    for i in 0..a.rows {
        for j in 0..a.cols {
            out.data[j * a.rows + i] = a.at(i, j);
        }
    }
    out
}

pub fn matmul_nt(a: &Mat, b: &Mat) -> Mat {
    matmul(a, &transpose(b))
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    assert_eq!((a.rows, a.cols), (b.rows, b.cols));
    Mat::new(a.rows, a.cols, a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect())
}

pub fn add_bias(a: &Mat, bias: &[f64]) -> Mat {
    assert_eq!(a.cols, bias.len());
    let mut out = a.clone();
    for (i, v) in out.data.iter_mut().enumerate() {
        *v += bias[i % a.cols];
    }
    out
}

pub fn map(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    Mat::new(a.rows, a.cols, a.data.iter().map(|&v| f(v)).collect())
}

pub fn gelu(x: f64, kind: GeluKind) -> f64 {
    match kind {
        GeluKind::Tanh => {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
        }
        GeluKind::Erf => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
    }
}

pub fn layernorm(x: &Mat, gain: &[f64], bias: &[f64], eps: f64) -> Mat {
    let d = x.cols;
    let mut out = Mat::zeros(x.rows, d);
    for i in 0..x.rows {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            out.data[i * d + j] = (row[j] - mean) * rs * gain[j] + bias[j];
        }
    }
    out
}

pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for i in 0..x.rows {
        let row = &mut out.data[i * x.cols..(i + 1) * x.cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

pub fn causal_mask(x: &Mat) -> Mat {
    let mut out = x.clone();
    for i in 0..x.rows {
        for j in i + 1..x.cols {
            out.data[i * x.cols + j] = f64::NEG_INFINITY;
        }
    }
    out
}

pub fn slice_cols(x: &Mat, start: usize, len: usize) -> Mat {
    let mut data = Vec::with_capacity(x.rows * len);
    for i in 0..x.rows {
        data.extend_from_slice(&x.row(i)[start..start + len]);
    }
    Mat::new(x.rows, len, data)
}

pub fn concat_cols(parts: &[Mat]) -> Mat {
    let rows = parts[0].rows;
    let cols = parts.iter().map(|p| p.cols).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Mat::new(rows, cols, data)
}

pub fn gather_rows(table: &Mat, ids: &[usize]) -> Mat {
    let mut data = Vec::with_capacity(ids.len() * table.cols);
    for &id in ids {
        data.extend_from_slice(table.row(id));
    }
    Mat::new(ids.len(), table.cols, data)
}

/// Mean negative log-likelihood over rows whose target is not `ignore`.
pub fn cross_entropy(logits: &Mat, targets: &[usize], ignore: usize) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for (i, &t) in targets.iter().enumerate() {
        if t == ignore {
            continue;
        }
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[t];
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Adapter bottleneck with its residual connection.
pub fn adapter_site(h: &Mat, down_w: &Mat, down_b: &[f64], up_w: &Mat, up_b: &[f64], nl: Nonlinearity, kind: GeluKind) -> Mat {
    let z = add_bias(&matmul(h, down_w), down_b);
    let a = match nl {
        Nonlinearity::Gelu => map(&z, |v| gelu(v, kind)),
        Nonlinearity::Relu => map(&z, |v| v.max(0.0)),
    };
    add(h, &add_bias(&matmul(&a, up_w), up_b))
}

/// Branch parameters flattened to f64, in `L1Branch::params` order.
pub fn flatten_branch(branch: &L1Branch) -> Vec<Vec<f64>> {
    branch
        .params()
        .iter()
        .map(|t| t.data().iter().map(|&v| v as f64).collect())
        .collect()
}

fn site_mats(site: &AdapterSite, p: &[Vec<f64>]) -> (Mat, Vec<f64>, Mat, Vec<f64>) {
    let (d, b) = (site.down_w.shape()[0], site.down_w.shape()[1]);
    (
        Mat::new(d, b, p[0].clone()),
        p[1].clone(),
        Mat::new(b, d, p[2].clone()),
        p[3].clone(),
    )
}

/// Mean next-token loss of one window computed entirely in f64, with the
/// branch parameters taken from `params` (same layout as
/// [`flatten_branch`]). The backbone weights are read from `backbone`.
pub fn gpt_window_loss(backbone: &Backbone, branch: &L1Branch, params: &[Vec<f64>], tokens: &[u32]) -> f64 {
    let cfg = backbone.config();
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let eps = 1e-5;
    let v = |t: &Tensor| -> Vec<f64> { t.data().iter().map(|&x| x as f64).collect() };
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let pos: Vec<usize> = (0..ids.len()).collect();
    let mut x = add(
        &gather_rows(&Mat::from_tensor(&backbone.wte), &ids),
        &gather_rows(&Mat::from_tensor(&backbone.wpe), &pos),
    );
    let nl = branch.config().nonlinearity;
    let site_params = |layer: usize, kind| {
        let idx = branch.sites.iter().position(|s| s.layer == layer && s.kind == kind)?;
        Some((&branch.sites[idx], &params[idx * 4..idx * 4 + 4]))
    };
    for (li, l) in backbone.layers.iter().enumerate() {
        let h = layernorm(&x, &v(&l.ln1_gain), &v(&l.ln1_bias), eps);
        let qkv = add_bias(&matmul(&h, &Mat::from_tensor(&l.qkv_w)), &v(&l.qkv_b));
        let mut heads = Vec::new();
        for head in 0..cfg.n_heads {
            let q = slice_cols(&qkv, head * hd, hd);
            let k = slice_cols(&qkv, d + head * hd, hd);
            let vv = slice_cols(&qkv, 2 * d + head * hd, hd);
            let s = map(&matmul_nt(&q, &k), |s| s / (hd as f64).sqrt());
            heads.push(matmul(&softmax_rows(&causal_mask(&s)), &vv));
        }
        let mut attn = add_bias(&matmul(&concat_cols(&heads), &Mat::from_tensor(&l.attn_proj_w)), &v(&l.attn_proj_b));
        if let Some((site, p)) = site_params(li, prodapt_core::adapters::SiteKind::Attention) {
            let (dw, db, uw, ub) = site_mats(site, p);
            attn = adapter_site(&attn, &dw, &db, &uw, &ub, nl, cfg.gelu);
        }
        x = add(&x, &attn);
        let h = layernorm(&x, &v(&l.ln2_gain), &v(&l.ln2_bias), eps);
        let f = add_bias(&matmul(&h, &Mat::from_tensor(&l.fc_w)), &v(&l.fc_b));
        let f = map(&f, |z| gelu(z, cfg.gelu));
        let mut f = add_bias(&matmul(&f, &Mat::from_tensor(&l.fc_proj_w)), &v(&l.fc_proj_b));
        if let Some((site, p)) = site_params(li, prodapt_core::adapters::SiteKind::Ffn) {
            let (dw, db, uw, ub) = site_mats(site, p);
            f = adapter_site(&f, &dw, &db, &uw, &ub, nl, cfg.gelu);
        }
        x = add(&x, &f);
    }
    let h = layernorm(&x, &v(&backbone.ln_f_gain), &v(&backbone.ln_f_bias), eps);
    let head = params.last().expect("head");
    let logits = matmul(&h, &Mat::new(d, cfg.vocab_size, head.clone()));
    let targets: Vec<usize> = ids.iter().skip(1).copied().chain(std::iter::once(usize::MAX)).collect();
    cross_entropy(&logits, &targets, usize::MAX)
}

/// Central-difference gradient of `f` with respect to every coordinate of
/// every buffer in `x`.
pub fn numeric_grad(x: &[Vec<f64>], h: f64, f: impl Fn(&[Vec<f64>]) -> f64) -> Vec<Vec<f64>> {
    let mut work = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for b in 0..x.len() {
        let mut g = vec![0.0; x[b].len()];
        for i in 0..x[b].len() {
            let orig = work[b][i];
            work[b][i] = orig + h;
            let up = f(&work);
            work[b][i] = orig - h;
            let down = f(&work);
            work[b][i] = orig;
            g[i] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)` over all buffers jointly.
pub fn rel_error(analytic: &[Vec<f32>], numeric: &[Vec<f64>]) -> f64 {
    let (mut diff, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.len(), n.len());
        for (&x, &y) in a.iter().zip(n) {
            let x = x as f64;
            diff += (x - y).powi(2);
            na += x * x;
            nb += y * y;
        }
    }
    diff.sqrt() / na.sqrt().max(nb.sqrt()).max(1e-8)
}
