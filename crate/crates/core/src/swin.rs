//! Window partitioning, cyclic shifting, relative position bias and
//! (shifted-)window multi-head self-attention, plus the two-block Swin
//! recurrence:
//!
//! ```text
//! ẑ    = W-MSA(LN(z))  + z      z'  = MLP(LN(ẑ))  + ẑ
//! ẑ'   = SW-MSA(LN(z')) + z'    out = MLP(LN(ẑ')) + ẑ'
//! ```

use std::sync::Arc;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Builder, Ctx, LayerNorm, Linear, ParamId};
use crate::tensor::{Element, Tensor};

/// Additive logit value for token pairs that must not attend to each other.
/// Finite so that gradients through masked logits stay finite.
pub const MASK_VALUE: f64 = -100.0;

/// Token grid flowing between stages: `tokens` is `[B, H*W, C]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SwinStageOutput {
    pub tokens: Var,
    pub height: usize,
    pub width: usize,
}

impl SwinStageOutput {
    pub fn new<T: Element>(g: &Graph<T>, tokens: Var, height: usize, width: usize) -> Result<Self> {
        let s = g.shape(tokens);
        if s.len() != 3 || s[1] != height * width {
            return Err(Error::invalid(
                "token grid",
                format!("tokens {s:?} do not form a {height}x{width} grid"),
            ));
        }
        Ok(Self { tokens, height, width })
    }

    pub fn channels<T: Element>(&self, g: &Graph<T>) -> usize {
        g.shape(self.tokens)[2]
    }

    pub fn batch<T: Element>(&self, g: &Graph<T>) -> usize {
        g.shape(self.tokens)[0]
    }
}

/// Window layout of one attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WindowGrid {
    pub height: usize,
    pub width: usize,
    pub window_size: usize,
    pub shift: usize,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl WindowGrid {
    pub fn new(height: usize, width: usize, window_size: usize, shift: usize) -> Result<Self> {
        if window_size == 0 || !height.is_multiple_of(window_size) || !width.is_multiple_of(window_size) {
            return Err(Error::invalid(
                "window grid",
                format!("{height}x{width} grid is not divisible by window size {window_size}"),
            ));
        }
        if shift >= window_size {
            return Err(Error::invalid(
                "window grid",
                format!("shift {shift} must be smaller than window size {window_size}"),
            ));
        }
        Ok(Self {
            height,
            width,
            window_size,
            shift,
        })
    }

    /// Window side actually used for a `height x width` grid when `requested`
    /// is asked for: clamped to the grid, then lowered to the nearest size
    /// that tiles both extents.
    pub fn effective_window(height: usize, width: usize, requested: usize) -> usize {
        let cap = requested.min(height).min(width).max(1);
        let common = gcd(height, width);
        (1..=cap).rev().find(|m| common.is_multiple_of(*m)).unwrap_or(1)
    }

    /// Grids for the unshifted and shifted layer of a block pair.
    pub fn pair(height: usize, width: usize, requested: usize) -> Result<[Self; 2]> {
        let m = Self::effective_window(height, width, requested);
        Ok([Self::new(height, width, m, 0)?, Self::new(height, width, m, m / 2)?])
    }

    pub fn num_windows(&self) -> usize {
        (self.height / self.window_size) * (self.width / self.window_size)
    }

    pub fn window_tokens(&self) -> usize {
        self.window_size * self.window_size
    }
}

/// `[B, H, W, C] -> [B * nW, M*M, C]`; windows row-major over the window
/// grid, tokens row-major within a window.
pub fn window_partition<T: Element>(g: &mut Graph<T>, x: Var, m: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::invalid(
            "window_partition",
            format!("expected [B,H,W,C], got {s:?}"),
        ));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::invalid(
            "window_partition",
            format!("{h}x{w} grid is not divisible by window size {m}"),
        ));
    }
    let x = g.reshape(x, vec![b, h / m, m, w / m, m, c])?;
    let x = g.permute(x, &[0, 1, 3, 2, 4, 5])?;
    g.reshape(x, vec![b * (h / m) * (w / m), m * m, c])
}

/// Inverse of [`window_partition`].
pub fn window_reverse<T: Element>(
    g: &mut Graph<T>,
    windows: Var,
    height: usize,
    width: usize,
    m: usize,
) -> Result<Var> {
    let s = g.shape(windows).to_vec();
    if m == 0 || !height.is_multiple_of(m) || !width.is_multiple_of(m) {
        return Err(Error::invalid(
            "window_reverse",
            format!("{height}x{width} grid is not divisible by window size {m}"),
        ));
    }
    let nw = (height / m) * (width / m);
    if s.len() != 3 || s[1] != m * m || !s[0].is_multiple_of(nw) {
        return Err(Error::invalid(
            "window_reverse",
            format!("windows {s:?} inconsistent with {height}x{width} grid, window {m}"),
        ));
    }
    let (b, c) = (s[0] / nw, s[2]);
    let x = g.reshape(windows, vec![b, height / m, width / m, m, m, c])?;
    let x = g.permute(x, &[0, 1, 3, 2, 4, 5])?;
    g.reshape(x, vec![b, height, width, c])
}

/// Toroidal roll of a `[B, H, W, C]` grid by `(-s, -s)`: the token at
/// `(i, j)` moves to `(i - s, j - s)` modulo the grid. Negative `s` undoes it.
pub fn cyclic_shift<T: Element>(g: &mut Graph<T>, x: Var, s: isize) -> Result<Var> {
    if g.shape(x).len() != 4 {
        return Err(Error::invalid(
            "cyclic_shift",
            format!("expected [B,H,W,C], got {:?}", g.shape(x)),
        ));
    }
    if s == 0 {
        return Ok(x);
    }
    g.roll(x, &[(1, s), (2, s)])
}

/// `index[i * M² + j] = (Δh + M - 1) * (2M - 1) + (Δw + M - 1)` where
/// `(Δh, Δw)` is the coordinate of token `i` minus that of token `j`.
pub fn relative_position_index(m: usize) -> Vec<usize> {
    let n = m * m;
    let side = 2 * m - 1;
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        let (hi, wi) = ((i / m) as isize, (i % m) as isize);
        for j in 0..n {
            let (hj, wj) = ((j / m) as isize, (j % m) as isize);
            let dh = (hi - hj + m as isize - 1) as usize;
            let dw = (wi - wj + m as isize - 1) as usize;
            out.push(dh * side + dw);
        }
    }
    out
}

/// Per-window additive mask of a shifted layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub num_windows: usize,
    pub window_tokens: usize,
    /// `allowed[(w * N + i) * N + j]`: tokens `i`, `j` of window `w` come from
    /// the same contiguous region of the unshifted grid.
    pub allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn value<T: Element>(&self, w: usize, i: usize, j: usize) -> T {
        let n = self.window_tokens;
        if self.allowed[(w * n + i) * n + j] {
            T::zero()
        } else {
            T::from_f64_lossy(MASK_VALUE)
        }
    }

    /// Mask values repeated over heads: `[nW, heads, N, N]`.
    pub fn to_tensor<T: Element>(&self, heads: usize) -> Tensor<T> {
        let n = self.window_tokens;
        let mut data = Vec::with_capacity(self.num_windows * heads * n * n);
        for w in 0..self.num_windows {
            for _ in 0..heads {
                for i in 0..n {
                    for j in 0..n {
                        data.push(self.value(w, i, j));
                    }
                }
            }
        }
        Tensor::new(vec![self.num_windows, heads, n, n], data).expect("mask extents")
    }

    pub fn is_all_allowed(&self) -> bool {
        self.allowed.iter().all(|&a| a)
    }
}

/// Region labels of the shifted frame: slices `[0, H-M)`, `[H-M, H-s)`,
/// `[H-s, H)` per axis, combined into one of nine labels per cell.
pub fn shift_region_labels(grid: &WindowGrid) -> Vec<usize> {
    let WindowGrid {
        height: h,
        width: w,
        window_size: m,
        shift: s,
    } = *grid;
    let band = |i: usize, ext: usize| {
        if i < ext - m {
            0
        } else if i < ext - s {
            1
        } else {
            2
        }
    };
    let mut labels = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            labels.push(band(i, h) * 3 + band(j, w));
        }
    }
    labels
}

pub fn build_shift_mask(grid: &WindowGrid) -> AttentionMask {
    let m = grid.window_size;
    let n = m * m;
    let labels = shift_region_labels(grid);
    let (wh, ww) = (grid.height / m, grid.width / m);
    let mut allowed = Vec::with_capacity(wh * ww * n * n);
    for wi in 0..wh {
        for wj in 0..ww {
            let label = |t: usize| labels[(wi * m + t / m) * grid.width + wj * m + t % m];
            for i in 0..n {
                for j in 0..n {
                    allowed.push(grid.shift == 0 || label(i) == label(j));
                }
            }
        }
    }
    AttentionMask {
        num_windows: wh * ww,
        window_tokens: n,
        allowed,
    }
}

/// Learned `[(2M-1)², heads]` table plus its precomputed lookup index.
#[derive(Clone, Debug)]
pub struct RelativePositionBias {
    pub table: ParamId,
    pub window_size: usize,
    pub heads: usize,
    gather: Arc<[usize]>,
}

impl RelativePositionBias {
    pub fn new<T: Element>(b: &mut Builder<T>, window_size: usize, heads: usize) -> Result<Self> {
        let side = 2 * window_size - 1;
        let table = b.zeros("relative_position_bias_table", vec![side * side, heads])?;
        let n = window_size * window_size;
        let index = relative_position_index(window_size);
        // [h, N, N] <- table[index[i, j], h]
        let mut gather = Vec::with_capacity(heads * n * n);
        for h in 0..heads {
            for &ix in &index {
                gather.push(ix * heads + h);
            }
        }
        Ok(Self {
            table,
            window_size,
            heads,
            gather: gather.into(),
        })
    }

    /// Bias `[heads, N, N]` gathered from the table.
    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>) -> Result<Var> {
        let n = self.window_size * self.window_size;
        let table = cx.p(self.table);
        cx.g.gather(table, vec![self.heads, n, n], self.gather.clone())
    }
}

/// Multi-head self-attention inside windows with relative position bias.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub bias: RelativePositionBias,
    pub dim: usize,
    pub heads: usize,
}

impl WindowAttention {
    pub fn new<T: Element>(b: &mut Builder<T>, dim: usize, heads: usize, window_size: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "channel count {dim} is not divisible by {heads} heads"
            )));
        }
        let bias = RelativePositionBias::new(b, window_size, heads)?;
        Ok(Self {
            qkv: b.linear("qkv", dim, 3 * dim, true)?,
            proj: b.linear("proj", dim, dim, true)?,
            bias,
            dim,
            heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `x: [B * nW, M², C]` -> `(output [B * nW, M², C], weights [B * nW, h, M², M²])`.
    pub fn forward_with_weights<T: Element>(
        &self,
        cx: &mut Ctx<T>,
        x: Var,
        mask: Option<&AttentionMask>,
    ) -> Result<(Var, Var)> {
        let s = cx.g.shape(x).to_vec();
        let n = self.bias.window_size * self.bias.window_size;
        if s.len() != 3 || s[1] != n || s[2] != self.dim {
            return Err(Error::invalid(
                "window_attention",
                format!("expected [_, {n}, {}], got {s:?}", self.dim),
            ));
        }
        let (nw, h, d) = (s[0], self.heads, self.head_dim());
        let qkv = self.qkv.forward(cx, x)?;
        let g = &mut *cx.g;
        let qkv = g.reshape(qkv, vec![nw, n, 3, h, d])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let parts = g.split(qkv, 0, &[1, 1, 1])?;
        let q = g.reshape(parts[0], vec![nw, h, n, d])?;
        let k = g.reshape(parts[1], vec![nw, h, n, d])?;
        let v = g.reshape(parts[2], vec![nw, h, n, d])?;
        let q = g.scale(q, T::one() / T::from_f64_lossy(d as f64).sqrt());
        let kt = g.transpose_last(k)?;
        let logits = g.matmul(q, kt)?;
        let bias = self.bias.forward(cx)?;
        let g = &mut *cx.g;
        let mut logits = g.add(logits, bias)?;
        if let Some(mask) = mask {
            if nw % mask.num_windows != 0 || mask.window_tokens != n {
                return Err(Error::invalid(
                    "window_attention",
                    format!(
                        "mask for {} windows of {} tokens does not fit {s:?}",
                        mask.num_windows, mask.window_tokens
                    ),
                ));
            }
            let batch = nw / mask.num_windows;
            let m = g.constant(mask.to_tensor(h));
            let l = g.reshape(logits, vec![batch, mask.num_windows, h, n, n])?;
            let l = g.add(l, m)?;
            logits = g.reshape(l, vec![nw, h, n, n])?;
        }
        let attn = g.softmax(logits, 3)?;
        let out = g.matmul(attn, v)?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        let out = g.reshape(out, vec![nw, n, self.dim])?;
        let out = self.proj.forward(cx, out)?;
        Ok((out, attn))
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: Var, mask: Option<&AttentionMask>) -> Result<Var> {
        Ok(self.forward_with_weights(cx, x, mask)?.0)
    }

    /// Full (S)W-MSA on a `[B, H, W, C]` grid: shift, partition, attend,
    /// reverse, unshift.
    pub fn forward_grid<T: Element>(
        &self,
        cx: &mut Ctx<T>,
        x: Var,
        grid: &WindowGrid,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let s = grid.shift as isize;
        let shifted = cyclic_shift(cx.g, x, s)?;
        let windows = window_partition(cx.g, shifted, grid.window_size)?;
        let attended = self.forward(cx, windows, mask)?;
        let merged = window_reverse(cx.g, attended, grid.height, grid.width, grid.window_size)?;
        cyclic_shift(cx.g, merged, -s)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Element>(b: &mut Builder<T>, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: b.linear("fc1", dim, hidden, true)?,
            fc2: b.linear("fc2", hidden, dim, true)?,
        })
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(cx, x)?;
        let h = cx.g.gelu(h);
        self.fc2.forward(cx, h)
    }
}

/// One pre-norm transformer block over windows of a fixed grid.
#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub grid: WindowGrid,
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    mask: Option<Arc<AttentionMask>>,
}

impl SwinBlock {
    pub fn new<T: Element>(
        b: &mut Builder<T>,
        grid: WindowGrid,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        let mask = (grid.shift > 0).then(|| Arc::new(build_shift_mask(&grid)));
        Ok(Self {
            grid,
            norm1: b.layernorm("norm1", dim)?,
            attn: WindowAttention::new(&mut b.sub("attn"), dim, heads, grid.window_size)?,
            norm2: b.layernorm("norm2", dim)?,
            mlp: Mlp::new(&mut b.sub("mlp"), dim, dim * mlp_ratio)?,
            mask,
        })
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: SwinStageOutput) -> Result<SwinStageOutput> {
        let WindowGrid { height, width, .. } = self.grid;
        if (x.height, x.width) != (height, width) {
            return Err(Error::invalid(
                "swin block",
                format!("built for a {height}x{width} grid, got {}x{}", x.height, x.width),
            ));
        }
        let (b, c) = (x.batch(cx.g), x.channels(cx.g));
        let h = self.norm1.forward(cx, x.tokens)?;
        let h = cx.g.reshape(h, vec![b, height, width, c])?;
        let h = self.attn.forward_grid(cx, h, &self.grid, self.mask.as_deref())?;
        let h = cx.g.reshape(h, vec![b, height * width, c])?;
        let z = cx.g.add(x.tokens, h)?;
        let h = self.norm2.forward(cx, z)?;
        let h = self.mlp.forward(cx, h)?;
        let z = cx.g.add(z, h)?;
        Ok(SwinStageOutput { tokens: z, ..x })
    }
}

/// W-MSA block followed by an SW-MSA block with shift `floor(M/2)`.
#[derive(Clone, Debug)]
pub struct SwinBlockPair {
    pub blocks: [SwinBlock; 2],
}

impl SwinBlockPair {
    pub fn new<T: Element>(
        b: &mut Builder<T>,
        height: usize,
        width: usize,
        dim: usize,
        heads: usize,
        window_size: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        let [plain, shifted] = WindowGrid::pair(height, width, window_size)?;
        Ok(Self {
            blocks: [
                SwinBlock::new(&mut b.sub("block0"), plain, dim, heads, mlp_ratio)?,
                SwinBlock::new(&mut b.sub("block1"), shifted, dim, heads, mlp_ratio)?,
            ],
        })
    }

    pub fn window_size(&self) -> usize {
        self.blocks[0].grid.window_size
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: SwinStageOutput) -> Result<SwinStageOutput> {
        let x = self.blocks[0].forward(cx, x)?;
        self.blocks[1].forward(cx, x)
    }
}
