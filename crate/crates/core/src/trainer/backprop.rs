//! Packed-batch forward and backward passes for training.
//!
//! Sequences of a batch are stacked row-wise so every dense projection is a
//! single matrix product; attention runs per sequence.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::model::ops::{causal_pattern, gelu, gelu_grad, norm_rows, norm_rows_backward};
use crate::model::Model;
use crate::tokenizer::TokenId;

/// A batch of sequences stacked into one token stream.
#[derive(Debug, Clone, Default)]
pub struct Packed {
    pub tokens: Vec<TokenId>,
    /// Absolute position of each row within its sequence.
    pub positions: Vec<usize>,
    /// `[start, end)` row range of each sequence.
    pub bounds: Vec<(usize, usize)>,
    /// `(row, next token)` pairs that contribute to the loss.
    pub targets: Vec<(usize, TokenId)>,
}

impl Packed {
    /// Appends one sequence; `mask[i]` marks tokens predicted from row `i - 1`.
    pub fn push(&mut self, tokens: &[TokenId], mask: &[bool]) {
        let start = self.tokens.len();
        for (i, &t) in tokens.iter().enumerate() {
            self.tokens.push(t);
            self.positions.push(i);
            if i > 0 && mask[i] {
                self.targets.push((start + i - 1, t));
            }
        }
        self.bounds.push((start, self.tokens.len()));
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }
}

struct LayerTape {
    x: Array2<f32>,
    inv1: Array1<f32>,
    h1: Array2<f32>,
    q: Array2<f32>,
    k: Array2<f32>,
    v: Array2<f32>,
    /// `[seq][head]`
    pats: Vec<Vec<Array2<f32>>>,
    z: Array2<f32>,
    x2: Array2<f32>,
    inv2: Array1<f32>,
    h2: Array2<f32>,
    u: Array2<f32>,
    g: Array2<f32>,
}

/// Activations kept for the backward pass.
pub struct Tape {
    layers: Vec<LayerTape>,
    x_final: Array2<f32>,
    inv_f: Array1<f32>,
    hf: Array2<f32>,
    /// Softmax probabilities at target rows.
    probs: Array2<f32>,
}

fn attention(
    q: ArrayView2<f32>,
    k: ArrayView2<f32>,
    v: ArrayView2<f32>,
    bounds: &[(usize, usize)],
    n_heads: usize,
    dh: usize,
) -> (Array2<f32>, Vec<Vec<Array2<f32>>>) {
    let per_seq: Vec<(Array2<f32>, Vec<Array2<f32>>)> = bounds
        .par_iter()
        .map(|&(a, b)| {
            let mut z = Array2::zeros((b - a, n_heads * dh));
            let mut pats = Vec::with_capacity(n_heads);
            for h in 0..n_heads {
                let cols = s![a..b, h * dh..(h + 1) * dh];
                let p = causal_pattern(q.slice(cols), k.slice(cols));
                z.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&p.dot(&v.slice(cols)));
                pats.push(p);
            }
            (z, pats)
        })
        .collect();
    let mut z = Array2::zeros((q.nrows(), n_heads * dh));
    let mut all = Vec::with_capacity(bounds.len());
    for (&(a, b), (zs, pats)) in bounds.iter().zip(per_seq) {
        z.slice_mut(s![a..b, ..]).assign(&zs);
        all.push(pats);
    }
    (z, all)
}

/// Mean cross-entropy over target rows, plus the tape for [`backward`].
pub fn forward(model: &Model, batch: &Packed) -> (f32, Tape) {
    let c = &model.config;
    let n = batch.rows();
    let mut x = Array2::<f32>::zeros((n, c.d_model));
    for (i, (&t, &p)) in batch.tokens.iter().zip(&batch.positions).enumerate() {
        let mut row = x.row_mut(i);
        row.assign(&model.embed.row(t as usize));
        row += &model.pos.row(p);
    }
    let mut layers = Vec::with_capacity(c.n_layers);
    for lw in &model.layers {
        let (h1, inv1) = norm_rows(x.view(), lw.norm1.view(), c.norm_kind);
        let q = h1.dot(&lw.wq);
        let k = h1.dot(&lw.wk);
        let v = h1.dot(&lw.wv);
        let (z, pats) = attention(q.view(), k.view(), v.view(), &batch.bounds, c.n_heads, c.d_head);
        let x2 = &x + &z.dot(&lw.wo);
        let (h2, inv2) = norm_rows(x2.view(), lw.norm2.view(), c.norm_kind);
        let u = h2.dot(&lw.w_in);
        let g = u.mapv(gelu);
        let x3 = &x2 + &g.dot(&lw.w_out);
        layers.push(LayerTape {
            x: std::mem::replace(&mut x, x3),
            inv1,
            h1,
            q,
            k,
            v,
            pats,
            z,
            x2,
            inv2,
            h2,
            u,
            g,
        });
    }
    let rows: Vec<usize> = batch.targets.iter().map(|&(r, _)| r).collect();
    let x_final = x.select(Axis(0), &rows);
    let (hf, inv_f) = norm_rows(x_final.view(), model.final_norm.view(), c.norm_kind);
    let logits = hf.dot(&model.unembed);
    let mut probs = logits;
    let mut loss = 0f64;
    for (i, &(_, t)) in batch.targets.iter().enumerate() {
        let mut row = probs.row_mut(i);
        let max = row.fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
        loss -= (row[t as usize].max(f32::MIN_POSITIVE) as f64).ln();
    }
    let n_t = batch.targets.len().max(1);
    (
        (loss / n_t as f64) as f32,
        Tape {
            layers,
            x_final,
            inv_f,
            hf,
            probs,
        },
    )
}

/// Gradient of the mean loss with respect to every parameter, laid out as a model.
pub fn backward(model: &Model, batch: &Packed, tape: Tape) -> Model {
    let c = &model.config;
    let mut grad = Model::zeros(c.clone()).expect("validated config");
    let n = batch.rows();
    let n_t = batch.targets.len().max(1) as f32;
    let dh = c.d_head;
    let scale = 1.0 / (dh as f32).sqrt();

    let mut dlogits = tape.probs;
    for (i, &(_, t)) in batch.targets.iter().enumerate() {
        dlogits[[i, t as usize]] -= 1.0;
    }
    dlogits.mapv_inplace(|v| v / n_t);
    grad.unembed = tape.hf.t().dot(&dlogits);
    let dhf = dlogits.dot(&model.unembed.t());
    let dxf = norm_rows_backward(
        tape.x_final.view(),
        model.final_norm.view(),
        tape.inv_f.view(),
        dhf.view(),
        c.norm_kind,
        &mut grad.final_norm,
    );
    let mut dx = Array2::<f32>::zeros((n, c.d_model));
    for (i, &(r, _)) in batch.targets.iter().enumerate() {
        let mut row = dx.row_mut(r);
        row += &dxf.row(i);
    }

    for (l, t) in tape.layers.into_iter().enumerate().rev() {
        let lw = &model.layers[l];
        let gl = &mut grad.layers[l];
        // mlp
        gl.w_out = t.g.t().dot(&dx);
        let mut du = dx.dot(&lw.w_out.t());
        du.zip_mut_with(&t.u, |d, &u| *d *= gelu_grad(u));
        gl.w_in = t.h2.t().dot(&du);
        let dh2 = du.dot(&lw.w_in.t());
        let dx2 = &dx
            + &norm_rows_backward(t.x2.view(), lw.norm2.view(), t.inv2.view(), dh2.view(), c.norm_kind, &mut gl.norm2);
        // attention
        gl.wo = t.z.t().dot(&dx2);
        let dz = dx2.dot(&lw.wo.t());
        let mut dq = Array2::<f32>::zeros((n, c.d_model));
        let mut dk = Array2::<f32>::zeros((n, c.d_model));
        let mut dv = Array2::<f32>::zeros((n, c.d_model));
        let per_seq: Vec<Vec<(Array2<f32>, Array2<f32>, Array2<f32>)>> = batch
            .bounds
            .par_iter()
            .zip(&t.pats)
            .map(|(&(a, b), pats)| {
                (0..c.n_heads)
                    .map(|h| {
                        let cols = s![a..b, h * dh..(h + 1) * dh];
                        let p = &pats[h];
                        let dzs = dz.slice(cols);
                        let dp = dzs.dot(&t.v.slice(cols).t());
                        let dvs = p.t().dot(&dzs);
                        let mut ds = p * &dp;
                        for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                            let dot = row.sum();
                            row.zip_mut_with(&prow, |d, &pv| *d = (*d - pv * dot) * scale);
                        }
                        let dqs = ds.dot(&t.k.slice(cols));
                        let dks = ds.t().dot(&t.q.slice(cols));
                        (dqs, dks, dvs)
                    })
                    .collect()
            })
            .collect();
        for (&(a, b), heads) in batch.bounds.iter().zip(per_seq) {
            for (h, (dqs, dks, dvs)) in heads.into_iter().enumerate() {
                let cols = s![a..b, h * dh..(h + 1) * dh];
                dq.slice_mut(cols).assign(&dqs);
                dk.slice_mut(cols).assign(&dks);
                dv.slice_mut(cols).assign(&dvs);
            }
        }
        let h1t = t.h1.t();
        gl.wq = h1t.dot(&dq);
        gl.wk = h1t.dot(&dk);
        gl.wv = h1t.dot(&dv);
        let dh1 = dq.dot(&lw.wq.t()) + dk.dot(&lw.wk.t()) + dv.dot(&lw.wv.t());
        dx = &dx2
            + &norm_rows_backward(t.x.view(), lw.norm1.view(), t.inv1.view(), dh1.view(), c.norm_kind, &mut gl.norm1);
    }

    for (i, (&tok, &p)) in batch.tokens.iter().zip(&batch.positions).enumerate() {
        let row = dx.row(i);
        let mut e = grad.embed.row_mut(tok as usize);
        e += &row;
        let mut pr = grad.pos.row_mut(p);
        pr += &row;
    }
    grad
}
