//! Row-wise primitives shared by inference and training.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::NormKind;

pub(crate) const NORM_EPS: f32 = 1e-5;
const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

/// Normalises every row of `x` and scales by `gain`. Returns the normalised
/// rows and the per-row inverse scale (needed by the backward pass). A zero
/// row maps to zero under both norm kinds.
pub(crate) fn norm_rows(
    x: ArrayView2<f32>,
    gain: ArrayView1<f32>,
    kind: NormKind,
) -> (Array2<f32>, Array1<f32>) {
    let (n, d) = x.dim();
    let mut out = Array2::zeros((n, d));
    let mut inv = Array1::zeros(n);
    for (i, row) in x.axis_iter(Axis(0)).enumerate() {
        let (mean, inv_scale) = row_stats(row, kind);
        inv[i] = inv_scale;
        let mut o = out.row_mut(i);
        for j in 0..d {
            o[j] = (row[j] - mean) * inv_scale * gain[j];
        }
    }
    (out, inv)
}

fn row_stats(row: ArrayView1<f32>, kind: NormKind) -> (f32, f32) {
    let d = row.len() as f32;
    match kind {
        NormKind::Rms => {
            let ms = row.iter().map(|v| v * v).sum::<f32>() / d;
            (0.0, 1.0 / (ms + NORM_EPS).sqrt())
        }
        NormKind::Layer => {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d;
            (mean, 1.0 / (var + NORM_EPS).sqrt())
        }
    }
}

/// Backward of [`norm_rows`]: given upstream `dy`, returns `dx` and adds the
/// gain gradient into `dgain`.
pub(crate) fn norm_rows_backward(
    x: ArrayView2<f32>,
    gain: ArrayView1<f32>,
    inv: ArrayView1<f32>,
    dy: ArrayView2<f32>,
    kind: NormKind,
    dgain: &mut Array1<f32>,
) -> Array2<f32> {
    let (n, d) = x.dim();
    let df = d as f32;
    let mut dx = Array2::zeros((n, d));
    let mut gy = vec![0f32; d];
    let mut xh = vec![0f32; d];
    for i in 0..n {
        let r = inv[i];
        let xr = x.row(i);
        let dyr = dy.row(i);
        let mean = match kind {
            NormKind::Rms => 0.0,
            NormKind::Layer => xr.sum() / df,
        };
        for j in 0..d {
            xh[j] = (xr[j] - mean) * r;
            gy[j] = dyr[j] * gain[j];
            dgain[j] += dyr[j] * xh[j];
        }
        let dot: f32 = gy.iter().zip(&xh).map(|(a, b)| a * b).sum::<f32>() / df;
        let mut o = dx.row_mut(i);
        match kind {
            NormKind::Rms => {
                for j in 0..d {
                    o[j] = r * (gy[j] - xh[j] * dot);
                }
            }
            NormKind::Layer => {
                let mean_gy = gy.iter().sum::<f32>() / df;
                for j in 0..d {
                    o[j] = r * (gy[j] - mean_gy - xh[j] * dot);
                }
            }
        }
    }
    dx
}

pub(crate) fn gelu(u: f32) -> f32 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

pub(crate) fn gelu_grad(u: f32) -> f32 {
    let inner = GELU_C * (u + 0.044715 * u * u * u);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

/// Causal softmax attention pattern from queries `q` and keys `k`
/// (`[T, d_head]` each). Entries above the diagonal are exactly zero.
pub(crate) fn causal_pattern(q: ArrayView2<f32>, k: ArrayView2<f32>) -> Array2<f32> {
    let t = q.nrows();
    let scale = 1.0 / (q.ncols() as f32).sqrt();
    let mut scores = q.dot(&k.t());
    for i in 0..t {
        let mut row = scores.row_mut(i);
        let mut max = f32::NEG_INFINITY;
        for j in 0..=i {
            row[j] *= scale;
            max = max.max(row[j]);
        }
        let mut sum = 0.0f64;
        for j in 0..=i {
            row[j] = (row[j] - max).exp();
            sum += row[j] as f64;
        }
        for j in 0..=i {
            row[j] = (row[j] as f64 / sum) as f32;
        }
        for j in i + 1..t {
            row[j] = 0.0;
        }
    }
    scores
}

/// Numerically stable log-softmax of one row.
#[cfg(test)]
pub(crate) fn log_softmax(row: ArrayView1<f32>) -> Array1<f32> {
    let max = row.fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f32>().ln() + max;
    row.mapv(|v| v - lse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_row_norms_to_zero() {
        let x = Array2::<f32>::zeros((2, 4));
        let g = Array1::<f32>::ones(4);
        for kind in [NormKind::Rms, NormKind::Layer] {
            let (y, _) = norm_rows(x.view(), g.view(), kind);
            assert!(y.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &u in &[-3.0f32, -1.0, -0.1, 0.0, 0.3, 1.0, 2.5] {
            let h = 1e-3;
            let fd = (gelu(u + h) - gelu(u - h)) / (2.0 * h);
            assert!((fd - gelu_grad(u)).abs() < 2e-3, "u={u}: {fd} vs {}", gelu_grad(u));
        }
    }

    #[test]
    fn norm_backward_matches_finite_difference() {
        let x = array![[0.3f32, -1.2, 0.8, 2.0], [1.0, 0.5, -0.5, 0.1]];
        let g = array![1.1f32, 0.9, -0.7, 1.3];
        let w = array![[0.2f32, -0.4, 0.9, 0.3], [-1.0, 0.6, 0.2, 0.5]];
        for kind in [NormKind::Rms, NormKind::Layer] {
            let f = |x: &Array2<f32>| {
                let (y, _) = norm_rows(x.view(), g.view(), kind);
                (&y * &w).sum() as f64
            };
            let (_, inv) = norm_rows(x.view(), g.view(), kind);
            let mut dg = Array1::zeros(4);
            let dx = norm_rows_backward(x.view(), g.view(), inv.view(), w.view(), kind, &mut dg);
            for i in 0..2 {
                for j in 0..4 {
                    let h = 1e-2;
                    let mut xp = x.clone();
                    xp[[i, j]] += h;
                    let mut xm = x.clone();
                    xm[[i, j]] -= h;
                    let fd = (f(&xp) - f(&xm)) / (2.0 * h as f64);
                    assert!((fd - dx[[i, j]] as f64).abs() < 5e-3, "{kind:?} dx[{i},{j}]");
                }
            }
        }
    }

    #[test]
    fn pattern_rows_are_causal_distributions() {
        let q = array![[1.0f32, 0.0], [0.5, 2.0], [-1.0, 1.0]];
        let k = array![[0.3f32, 1.0], [2.0, -1.0], [0.0, 0.5]];
        let p = causal_pattern(q.view(), k.view());
        for i in 0..3 {
            assert!((p.row(i).sum() - 1.0).abs() < 1e-6);
            for j in i + 1..3 {
                assert_eq!(p[[i, j]], 0.0);
            }
        }
    }
}
