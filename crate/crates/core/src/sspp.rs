//! Swin spatial pyramid pooling and cross-contextual attention fusion.
//!
//! The pyramid runs parallel Swin block pairs with different window sizes
//! over the same grid. Fusion concatenates the levels along channels into
//! `z_all: [B, P, M*C]` and applies two sigmoid gates:
//!
//! ```text
//! w_scale  = σ(W2 · δ(W1 · GAP_tokens(z_all)))     z'  = w_scale  ⊙ z_all
//! w_tokens = σ(W3 · δ(W4 · GAP_channels(z')))      z'' = w_tokens ⊙ z'
//! ```
//!
//! with δ = ReLU. The channel gate is shared across tokens, the token gate
//! across channels.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Builder, Ctx, Linear};
use crate::swin::{SwinBlockPair, SwinStageOutput, WindowGrid};
use crate::tensor::Element;

pub const MAX_LEVELS: usize = 4;

/// Requested window sizes for a pyramid of `level` branches.
pub fn default_window_sizes(level: usize) -> Option<Vec<usize>> {
    match level {
        1 => Some(vec![7]),
        2 => Some(vec![2, 7]),
        3 => Some(vec![2, 4, 7]),
        4 => Some(vec![2, 4, 7, 14]),
        _ => None,
    }
}

/// Same-shape token maps `[B, P, C]`, one per pyramid branch.
#[derive(Clone, Debug)]
pub struct PyramidFeatures {
    pub levels: Vec<Var>,
    /// Effective window size of each branch.
    pub window_sizes: Vec<usize>,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct Sspp {
    pub branches: Vec<SwinBlockPair>,
}

impl Sspp {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        b: &mut Builder<T>,
        grid: usize,
        dim: usize,
        heads: usize,
        window_sizes: &[usize],
        mlp_ratio: usize,
    ) -> Result<Self> {
        if window_sizes.is_empty() || window_sizes.len() > MAX_LEVELS {
            return Err(Error::Config(format!(
                "pyramid needs 1..={MAX_LEVELS} levels, got {}",
                window_sizes.len()
            )));
        }
        let branches = window_sizes
            .iter()
            .enumerate()
            .map(|(i, &w)| SwinBlockPair::new(&mut b.sub(format!("branch{i}")), grid, grid, dim, heads, w, mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { branches })
    }

    pub fn effective_window_sizes(grid: usize, requested: &[usize]) -> Vec<usize> {
        requested
            .iter()
            .map(|&w| WindowGrid::effective_window(grid, grid, w))
            .collect()
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: SwinStageOutput) -> Result<PyramidFeatures> {
        let levels = self
            .branches
            .iter()
            .map(|br| br.forward(cx, x).map(|o| o.tokens))
            .collect::<Result<Vec<_>>>()?;
        Ok(PyramidFeatures {
            levels,
            window_sizes: self.branches.iter().map(|b| b.window_size()).collect(),
            height: x.height,
            width: x.width,
        })
    }
}

/// Intermediate values of one fusion pass.
#[derive(Clone, Copy, Debug)]
pub struct FusedFeatures {
    /// `[B, P, M*C]`
    pub z_all: Var,
    /// `[B, 1, M*C]`
    pub w_scale: Var,
    /// `[B, P, 1]`
    pub w_tokens: Var,
    /// `[B, P, M*C]`, `w_tokens ⊙ w_scale ⊙ z_all`
    pub z_out: Var,
}

/// The two sigmoid-gated attentions over a concatenated pyramid.
#[derive(Clone, Debug)]
pub struct CrossContextualAttention {
    pub w1: Linear,
    pub w2: Linear,
    pub w3: Linear,
    pub w4: Linear,
    pub channels: usize,
}

impl CrossContextualAttention {
    /// `channels = M*C`; hidden widths are `channels / reduction`.
    pub fn new<T: Element>(b: &mut Builder<T>, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::Config(format!(
                "fusion width {channels} is not divisible by reduction ratio {reduction}"
            )));
        }
        let hidden = channels / reduction;
        let mut sb = b.sub("scale");
        let w1 = sb.linear("w1", channels, hidden, true)?;
        let w2 = sb.linear("w2", hidden, channels, true)?;
        let mut tb = b.sub("token");
        let w4 = tb.linear("w4", 1, hidden, true)?;
        let w3 = tb.linear("w3", hidden, 1, true)?;
        Ok(Self {
            w1,
            w2,
            w3,
            w4,
            channels,
        })
    }

    fn check(&self, cx: &Ctx<impl Element>, z: Var) -> Result<(usize, usize)> {
        let s = cx.g.shape(z);
        if s.len() != 3 || s[2] != self.channels {
            return Err(Error::invalid(
                "cross-contextual attention",
                format!("expected [B, P, {}], got {s:?}", self.channels),
            ));
        }
        Ok((s[0], s[1]))
    }

    /// Channel gate from the token-averaged descriptor. Returns `(w_scale, z')`.
    pub fn scale_attention<T: Element>(&self, cx: &mut Ctx<T>, z_all: Var) -> Result<(Var, Var)> {
        let (b, p) = self.check(cx, z_all)?;
        let gap = cx.g.mean(z_all, 1)?;
        let h = self.w1.forward(cx, gap)?;
        let h = cx.g.relu(h);
        let s = self.w2.forward(cx, h)?;
        let s = cx.g.sigmoid(s);
        let w_scale = cx.g.reshape(s, vec![b, 1, self.channels])?;
        let wide = cx.g.expand(w_scale, &[b, p, self.channels])?;
        let z = cx.g.mul(z_all, wide)?;
        Ok((w_scale, z))
    }

    /// Per-token gate from the channel-averaged descriptor, applied through
    /// W4 then W3. Returns `(w_tokens, z'')`.
    pub fn token_attention<T: Element>(&self, cx: &mut Ctx<T>, z: Var) -> Result<(Var, Var)> {
        let (b, p) = self.check(cx, z)?;
        let gap = cx.g.mean(z, 2)?;
        let gap = cx.g.reshape(gap, vec![b, p, 1])?;
        let h = self.w4.forward(cx, gap)?;
        let h = cx.g.relu(h);
        let t = self.w3.forward(cx, h)?;
        let w_tokens = cx.g.sigmoid(t);
        let wide = cx.g.expand(w_tokens, &[b, p, self.channels])?;
        let z = cx.g.mul(z, wide)?;
        Ok((w_tokens, z))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FusionMode {
    #[default]
    CrossAttention,
    /// Concatenate and project, no gating.
    Basic,
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub attention: Option<CrossContextualAttention>,
    /// `M*C -> C`
    pub proj: Linear,
    pub levels: usize,
    pub dim: usize,
}

impl Fusion {
    pub fn new<T: Element>(
        b: &mut Builder<T>,
        mode: FusionMode,
        levels: usize,
        dim: usize,
        reduction: usize,
    ) -> Result<Self> {
        let attention = match mode {
            FusionMode::CrossAttention => Some(CrossContextualAttention::new(b, levels * dim, reduction)?),
            FusionMode::Basic => None,
        };
        Ok(Self {
            attention,
            proj: b.linear("proj", levels * dim, dim, true)?,
            levels,
            dim,
        })
    }

    pub fn mode(&self) -> FusionMode {
        if self.attention.is_some() {
            FusionMode::CrossAttention
        } else {
            FusionMode::Basic
        }
    }

    fn concat<T: Element>(&self, cx: &mut Ctx<T>, pyramid: &PyramidFeatures) -> Result<Var> {
        if pyramid.levels.len() != self.levels {
            return Err(Error::invalid(
                "fuse",
                format!("built for {} levels, got {}", self.levels, pyramid.levels.len()),
            ));
        }
        if pyramid.levels.len() == 1 {
            Ok(pyramid.levels[0])
        } else {
            cx.g.concat(&pyramid.levels, 2)
        }
    }

    /// Gated fusion with its intermediates. Errors in basic mode.
    pub fn fuse_detailed<T: Element>(
        &self,
        cx: &mut Ctx<T>,
        pyramid: &PyramidFeatures,
    ) -> Result<(SwinStageOutput, FusedFeatures)> {
        let att = self
            .attention
            .as_ref()
            .ok_or_else(|| Error::Config("fusion was built in basic mode".into()))?;
        let z_all = self.concat(cx, pyramid)?;
        let (w_scale, z1) = att.scale_attention(cx, z_all)?;
        let (w_tokens, z_out) = att.token_attention(cx, z1)?;
        let t = self.proj.forward(cx, z_out)?;
        let out = SwinStageOutput::new(cx.g, t, pyramid.height, pyramid.width)?;
        Ok((
            out,
            FusedFeatures {
                z_all,
                w_scale,
                w_tokens,
                z_out,
            },
        ))
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, pyramid: &PyramidFeatures) -> Result<SwinStageOutput> {
        if self.attention.is_some() {
            return Ok(self.fuse_detailed(cx, pyramid)?.0);
        }
        let z_all = self.concat(cx, pyramid)?;
        let t = self.proj.forward(cx, z_all)?;
        SwinStageOutput::new(cx.g, t, pyramid.height, pyramid.width)
    }
}
