//! Naive reference implementations used to cross-check the fast paths.
//! Nothing here shares code with the kernels it checks.

use std::collections::HashSet;

use crate::tensor::Tensor;

/// Parameters of one window-attention layer, as plain row-major buffers.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    /// `[C, 3C]`
    pub qkv_w: Tensor<f64>,
    /// `[3C]`
    pub qkv_b: Tensor<f64>,
    /// `[C, C]`
    pub proj_w: Tensor<f64>,
    /// `[C]`
    pub proj_b: Tensor<f64>,
    /// `[(2M-1)², heads]`
    pub table: Tensor<f64>,
}

fn affine(x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    (0..cols)
        .map(|j| b.data()[j] + (0..rows).map(|i| x[i] * w.data()[i * cols + j]).sum::<f64>())
        .collect()
}

/// Shifted-window attention on `x: [B, H, W, C]` evaluated token by token:
/// each query attends only to keys that share its shifted window *and* keep
/// the same relative displacement before and after the shift (i.e. did not
/// wrap around the torus differently). Returns `[B, H, W, C]`.
pub fn shifted_window_attention(
    x: &Tensor<f64>,
    p: &AttentionParams,
    heads: usize,
    window: usize,
    shift: usize,
) -> Tensor<f64> {
    let s = x.shape();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let d = c / heads;
    let m = window as isize;
    let side = 2 * window - 1;
    let tok = |bi: usize, i: usize, j: usize| &x.data()[((bi * h + i) * w + j) * c..((bi * h + i) * w + j + 1) * c];
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        let qkv: Vec<Vec<f64>> = (0..h * w)
            .map(|t| affine(tok(bi, t / w, t % w), &p.qkv_w, &p.qkv_b))
            .collect();
        for pi in 0..h {
            for pj in 0..w {
                let (si, sj) = ((pi + h - shift) % h, (pj + w - shift) % w);
                let mut keys = Vec::new();
                for qi in 0..h {
                    for qj in 0..w {
                        let (ti, tj) = ((qi + h - shift) % h, (qj + w - shift) % w);
                        let same_window = ti / window == si / window && tj / window == sj / window;
                        let no_wrap = qi as isize - pi as isize == ti as isize - si as isize
                            && qj as isize - pj as isize == tj as isize - sj as isize;
                        if same_window && no_wrap {
                            keys.push((qi * w + qj, ti as isize, tj as isize));
                        }
                    }
                }
                let q = &qkv[pi * w + pj];
                let mut concat = vec![0.0; c];
                for hh in 0..heads {
                    let logits: Vec<f64> = keys
                        .iter()
                        .map(|&(kt, ti, tj)| {
                            let k = &qkv[kt];
                            let dot: f64 = (0..d).map(|e| q[hh * d + e] * k[c + hh * d + e]).sum();
                            let dh = (si as isize % m) - (ti % m) + m - 1;
                            let dw = (sj as isize % m) - (tj % m) + m - 1;
                            let bias = p.table.data()[(dh as usize * side + dw as usize) * heads + hh];
                            dot / (d as f64).sqrt() + bias
                        })
                        .collect();
                    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    for (&(kt, _, _), e) in keys.iter().zip(&exps) {
                        for dd in 0..d {
                            concat[hh * d + dd] += e / z * qkv[kt][2 * c + hh * d + dd];
                        }
                    }
                }
                let o = affine(&concat, &p.proj_w, &p.proj_b);
                let base = ((bi * h + pi) * w + pj) * c;
                out[base..base + c].copy_from_slice(&o);
            }
        }
    }
    Tensor::new(s.to_vec(), out).unwrap()
}

/// `2|A∩B| / (|A|+|B|)`, 1 when both are empty.
pub fn dice(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let total = a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

fn boundary_set(mask: &[bool], h: usize, w: usize) -> HashSet<(i64, i64)> {
    let inside: HashSet<(i64, i64)> = (0..h * w)
        .filter(|&i| mask[i])
        .map(|i| ((i / w) as i64, (i % w) as i64))
        .collect();
    inside
        .iter()
        .copied()
        .filter(|&(i, j)| {
            [(-1, 0), (1, 0), (0, -1), (0, 1)]
                .iter()
                .any(|(di, dj)| !inside.contains(&(i + di, j + dj)))
        })
        .collect()
}

/// Exact symmetric Hausdorff distance between the 4-connected boundaries of
/// two masks. `None` when exactly one side is empty; `Some(0)` when both are.
pub fn hausdorff(a: &[bool], b: &[bool], h: usize, w: usize) -> Option<f64> {
    let (ba, bb) = (boundary_set(a, h, w), boundary_set(b, h, w));
    match (ba.is_empty(), bb.is_empty()) {
        (true, true) => return Some(0.0),
        (true, false) | (false, true) => return None,
        _ => {}
    }
    let directed = |from: &HashSet<(i64, i64)>, to: &HashSet<(i64, i64)>| {
        from.iter()
            .map(|&(i, j)| {
                to.iter()
                    .map(|&(k, l)| (((i - k).pow(2) + (j - l).pow(2)) as f64).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    };
    Some(directed(&ba, &bb).max(directed(&bb, &ba)))
}

/// Weights of the two fusion gates. Linear weights are `[in, out]`.
#[derive(Clone, Debug)]
pub struct FusionGateParams {
    pub w1: Tensor<f64>,
    pub b1: Tensor<f64>,
    pub w2: Tensor<f64>,
    pub b2: Tensor<f64>,
    pub w4: Tensor<f64>,
    pub b4: Tensor<f64>,
    pub w3: Tensor<f64>,
    pub b3: Tensor<f64>,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Channel gate, token gate and gated output for `z: [B, P, D]`, computed
/// loop by loop. Returns `(w_scale [B*D], w_tokens [B*P], z'' [B*P*D])`.
pub fn fusion_gates(z: &Tensor<f64>, p: &FusionGateParams) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let s = z.shape();
    let (b, n, d) = (s[0], s[1], s[2]);
    let zv = z.data();
    let mut w_scale = Vec::with_capacity(b * d);
    let mut w_tokens = Vec::with_capacity(b * n);
    let mut out = vec![0.0; zv.len()];
    for bi in 0..b {
        let mut gap = vec![0.0; d];
        for t in 0..n {
            for c in 0..d {
                gap[c] += zv[(bi * n + t) * d + c] / n as f64;
            }
        }
        let hidden: Vec<f64> = affine(&gap, &p.w1, &p.b1).into_iter().map(|v| v.max(0.0)).collect();
        let ws: Vec<f64> = affine(&hidden, &p.w2, &p.b2).into_iter().map(sigmoid).collect();
        for t in 0..n {
            let row: Vec<f64> = (0..d).map(|c| zv[(bi * n + t) * d + c] * ws[c]).collect();
            let mean = row.iter().sum::<f64>() / d as f64;
            let h: Vec<f64> = affine(&[mean], &p.w4, &p.b4).into_iter().map(|v| v.max(0.0)).collect();
            let wt = sigmoid(affine(&h, &p.w3, &p.b3)[0]);
            for c in 0..d {
                out[(bi * n + t) * d + c] = row[c] * wt;
            }
            w_tokens.push(wt);
        }
        w_scale.extend(ws);
    }
    (w_scale, w_tokens, out)
}
