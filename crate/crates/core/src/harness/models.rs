//! Toy models with hand-written backward passes.
//!
//! Activations are stored feature-major: a batch of `B` vectors of width `d`
//! is a `d x B` matrix, so a layer is `H = W X` and its weight gradient is
//! `dH X^T`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::granularity::{Activation, ArchConfig, Registry};
use crate::harness::data::Batch;
use crate::matlin::Matrix;

const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActivationStat {
    pub rms: f64,
    pub absmax: f64,
}

#[derive(Default)]
struct ProbeAcc {
    sumsq: f64,
    count: usize,
    absmax: f64,
}

#[derive(Default)]
struct Probes(BTreeMap<&'static str, ProbeAcc>);

impl Probes {
    fn record(&mut self, name: &'static str, m: &Matrix) {
        let p = self.0.entry(name).or_default();
        for &v in m.as_slice() {
            p.sumsq += v * v;
            p.absmax = p.absmax.max(v.abs());
        }
        p.count += m.as_slice().len();
    }

    fn finish(self) -> BTreeMap<String, ActivationStat> {
        self.0
            .into_iter()
            .map(|(k, p)| {
                let rms = if p.count == 0 { 0.0 } else { (p.sumsq / p.count as f64).sqrt() };
                (k.to_string(), ActivationStat { rms, absmax: p.absmax })
            })
            .collect()
    }
}

/// Loss, one gradient per parameter group, and activation statistics.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub grads: Vec<Matrix>,
    pub probes: BTreeMap<String, ActivationStat>,
}

/// Current fused weights of every group, in forward order.
pub fn group_params(reg: &Registry) -> Vec<Matrix> {
    reg.groups.iter().map(|g| reg.group_weight(g)).collect()
}

fn check_params(arch: &ArchConfig, params: &[Matrix]) -> Result<()> {
    let tensors = arch.tensors();
    if tensors.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameter tensors for a model with {}",
            params.len(),
            tensors.len()
        )));
    }
    for ((name, _, rows, cols, _), p) in tensors.iter().zip(params) {
        if p.shape() != (*rows, *cols) {
            return Err(Error::ShapeMismatch(format!("`{name}` is {:?}, expected {rows}x{cols}", p.shape())));
        }
    }
    Ok(())
}

pub fn evaluate(arch: &ArchConfig, params: &[Matrix], batch: &Batch) -> Result<Evaluation> {
    check_params(arch, params)?;
    match (arch, batch) {
        (ArchConfig::Linear { .. }, Batch::Regression { x, y }) => Ok(linear(&params[0], x, y)),
        (ArchConfig::Mlp { activation, .. }, Batch::Regression { x, y }) => {
            Ok(mlp(&params[0], &params[1], *activation, x, y))
        }
        (ArchConfig::Transformer { n_heads, head_dim, .. }, Batch::Tokens { seqs }) => {
            Ok(transformer(params, *n_heads, *head_dim, seqs))
        }
        _ => Err(Error::ConfigInvalid("batch kind does not match the model".into())),
    }
}

/// Mean squared error over all outputs and its gradient.
fn mse(pred: &Matrix, y: &Matrix) -> (f64, Matrix) {
    let n = pred.as_slice().len() as f64;
    let diff = pred.sub(y);
    let loss = diff.inner(&diff) / n;
    (loss, diff.scale(2.0 / n))
}

fn linear(w: &Matrix, x: &Matrix, y: &Matrix) -> Evaluation {
    let mut probes = Probes::default();
    let pred = w.matmul(x);
    probes.record("output", &pred);
    let (loss, dy) = mse(&pred, y);
    Evaluation {
        loss,
        grads: vec![dy.matmul_t(x)],
        probes: probes.finish(),
    }
}

fn act(kind: Activation, v: f64) -> f64 {
    match kind {
        Activation::Relu => v.max(0.0),
        Activation::Tanh => v.tanh(),
    }
}

fn act_grad(kind: Activation, v: f64) -> f64 {
    match kind {
        Activation::Relu => {
            if v > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Tanh => 1.0 - v.tanh().powi(2),
    }
}

fn mlp(w1: &Matrix, w2: &Matrix, kind: Activation, x: &Matrix, y: &Matrix) -> Evaluation {
    let mut probes = Probes::default();
    let h = w1.matmul(x);
    probes.record("ffn_pre", &h);
    let a = h.map(|v| act(kind, v));
    probes.record("ffn_hidden", &a);
    let pred = w2.matmul(&a);
    let (loss, dy) = mse(&pred, y);
    let g2 = dy.matmul_t(&a);
    let dh = w2.t_matmul(&dy).zip_with(&h, |d, v| d * act_grad(kind, v));
    let g1 = dh.matmul_t(x);
    Evaluation {
        loss,
        grads: vec![g1, g2],
        probes: probes.finish(),
    }
}

/// Column-wise RMSNorm with a gain row: returns (output, normalized, inverse rms).
fn rms_norm(x: &Matrix, gain: &Matrix) -> (Matrix, Matrix, Vec<f64>) {
    let (d, t) = x.shape();
    let mut inv = vec![0.0; t];
    for (j, r) in inv.iter_mut().enumerate() {
        let ms = (0..d).map(|i| x[(i, j)] * x[(i, j)]).sum::<f64>() / d as f64;
        *r = 1.0 / (ms + NORM_EPS).sqrt();
    }
    let n = Matrix::from_fn(d, t, |i, j| x[(i, j)] * inv[j]);
    let g = gain.as_slice();
    let out = Matrix::from_fn(d, t, |i, j| n[(i, j)] * g[i]);
    (out, n, inv)
}

fn rms_norm_backward(dy: &Matrix, n: &Matrix, inv: &[f64], gain: &Matrix, dgain: &mut Matrix) -> Matrix {
    let (d, t) = dy.shape();
    let g = gain.as_slice();
    let dg = dgain.as_mut_slice();
    let mut dx = Matrix::zeros(d, t);
    for j in 0..t {
        let mut proj = 0.0;
        for i in 0..d {
            dg[i] += dy[(i, j)] * n[(i, j)];
            proj += dy[(i, j)] * g[i] * n[(i, j)];
        }
        proj /= d as f64;
        for i in 0..d {
            dx[(i, j)] = (dy[(i, j)] * g[i] - n[(i, j)] * proj) * inv[j];
        }
    }
    dx
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// One pre-norm block: causal multi-head attention and a SwiGLU FFN, each
/// with a residual connection, then a final norm and the output head.
/// Parameters follow [`ArchConfig::tensors`].
fn transformer(params: &[Matrix], n_heads: usize, head_dim: usize, seqs: &[Vec<usize>]) -> Evaluation {
    let [embed, g_attn, w_qkv, w_o, g_ffn, w_gu, w_down, g_final, head] = params else {
        unreachable!("parameter count checked by the caller")
    };
    let mut grads: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
    let mut probes = Probes::default();
    let d = embed.cols();
    let inner = n_heads * head_dim;
    let d_ff = w_down.cols();
    let scale = 1.0 / (head_dim as f64).sqrt();
    let total: usize = seqs.iter().map(|s| s.len() - 1).sum();
    let mut loss = 0.0;

    for seq in seqs {
        let t_len = seq.len() - 1;
        let (inputs, targets) = (&seq[..t_len], &seq[1..]);
        let x0 = Matrix::from_fn(d, t_len, |i, t| embed[(inputs[t], i)]);

        // attention
        let (n1, n1_hat, inv1) = rms_norm(&x0, g_attn);
        let qkv = w_qkv.matmul(&n1);
        let mut o = Matrix::zeros(inner, t_len);
        let mut attn_probs = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let q = qkv.row_block(h * head_dim, head_dim);
            let k = qkv.row_block(inner + h * head_dim, head_dim);
            let v = qkv.row_block(2 * inner + h * head_dim, head_dim);
            let s = q.t_matmul(&k);
            let mut p = Matrix::zeros(t_len, t_len);
            for i in 0..t_len {
                let m = (0..=i).map(|j| s[(i, j)]).fold(f64::NEG_INFINITY, f64::max) * scale;
                let mut z = 0.0;
                for j in 0..=i {
                    let e = (s[(i, j)] * scale - m).exp();
                    p[(i, j)] = e;
                    z += e;
                }
                for j in 0..=i {
                    p[(i, j)] /= z;
                }
            }
            let oh = v.matmul_t(&p);
            for r in 0..head_dim {
                o.row_mut(h * head_dim + r).copy_from_slice(oh.row(r));
            }
            attn_probs.push(p);
        }
        let attn_out = w_o.matmul(&o);
        probes.record("attn_out", &attn_out);
        let x1 = x0.add(&attn_out);

        // SwiGLU
        let (n2, n2_hat, inv2) = rms_norm(&x1, g_ffn);
        let gu = w_gu.matmul(&n2);
        probes.record("ffn_pre", &gu);
        let gate = gu.row_block(0, d_ff);
        let up = gu.row_block(d_ff, d_ff);
        let hidden = gate.zip_with(&up, |g, u| g * sigmoid(g) * u);
        probes.record("ffn_hidden", &hidden);
        let x2 = x1.add(&w_down.matmul(&hidden));

        // head
        let (n3, n3_hat, inv3) = rms_norm(&x2, g_final);
        let logits = head.matmul(&n3);
        let mut dlogits = Matrix::zeros(logits.rows(), t_len);
        for t in 0..t_len {
            let col = logits.column(t);
            let m = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = col.iter().map(|l| (l - m).exp()).sum();
            loss += z.ln() + m - col[targets[t]];
            for (c, l) in col.iter().enumerate() {
                dlogits[(c, t)] = (l - m).exp() / z / total as f64;
            }
            dlogits[(targets[t], t)] -= 1.0 / total as f64;
        }

        // backward
        grads[8].axpy(1.0, &dlogits.matmul_t(&n3));
        let dn3 = head.t_matmul(&dlogits);
        let dx2 = rms_norm_backward(&dn3, &n3_hat, &inv3, g_final, &mut grads[7]);

        grads[6].axpy(1.0, &dx2.matmul_t(&hidden));
        let dhidden = w_down.t_matmul(&dx2);
        let mut dgu = Matrix::zeros(2 * d_ff, t_len);
        for r in 0..d_ff {
            for t in 0..t_len {
                let (g, u) = (gate[(r, t)], up[(r, t)]);
                let sg = sigmoid(g);
                let dh = dhidden[(r, t)];
                dgu[(r, t)] = dh * u * sg * (1.0 + g * (1.0 - sg));
                dgu[(d_ff + r, t)] = dh * g * sg;
            }
        }
        grads[5].axpy(1.0, &dgu.matmul_t(&n2));
        let dn2 = w_gu.t_matmul(&dgu);
        let dx1 = dx2.add(&rms_norm_backward(&dn2, &n2_hat, &inv2, g_ffn, &mut grads[4]));

        grads[3].axpy(1.0, &dx1.matmul_t(&o));
        let d_o = w_o.t_matmul(&dx1);
        let mut dqkv = Matrix::zeros(3 * inner, t_len);
        for (h, p) in attn_probs.iter().enumerate() {
            let q = qkv.row_block(h * head_dim, head_dim);
            let k = qkv.row_block(inner + h * head_dim, head_dim);
            let v = qkv.row_block(2 * inner + h * head_dim, head_dim);
            let doh = d_o.row_block(h * head_dim, head_dim);
            let dv = doh.matmul(p);
            let dp = doh.t_matmul(&v);
            let mut ds = Matrix::zeros(t_len, t_len);
            for i in 0..t_len {
                let dot: f64 = (0..=i).map(|j| p[(i, j)] * dp[(i, j)]).sum();
                for j in 0..=i {
                    ds[(i, j)] = p[(i, j)] * (dp[(i, j)] - dot) * scale;
                }
            }
            let dq = k.matmul_t(&ds);
            let dk = q.matmul(&ds);
            for r in 0..head_dim {
                dqkv.row_mut(h * head_dim + r).copy_from_slice(dq.row(r));
                dqkv.row_mut(inner + h * head_dim + r).copy_from_slice(dk.row(r));
                dqkv.row_mut(2 * inner + h * head_dim + r).copy_from_slice(dv.row(r));
            }
        }
        grads[2].axpy(1.0, &dqkv.matmul_t(&n1));
        let dn1 = w_qkv.t_matmul(&dqkv);
        let dx0 = dx1.add(&rms_norm_backward(&dn1, &n1_hat, &inv1, g_attn, &mut grads[1]));

        for (t, &tok) in inputs.iter().enumerate() {
            let row = grads[0].row_mut(tok);
            for (i, r) in row.iter_mut().enumerate() {
                *r += dx0[(i, t)];
            }
        }
    }

    Evaluation {
        loss: loss / total as f64,
        grads,
        probes: probes.finish(),
    }
}
