//! Patch embedding, patch merging/expanding, the hierarchical encoder and
//! the decoder that brings fused features back to pixel resolution.

use std::sync::Arc;

use crate::autodiff::{SparseMap, Var};
use crate::error::{Error, Result};
use crate::nn::{Builder, Ctx, LayerNorm, Linear};
use crate::swin::{SwinBlockPair, SwinStageOutput};
use crate::tensor::Element;

pub const PATCH_SIZE: usize = 4;

/// Splits the image into non-overlapping 4x4 patches, flattens each to
/// `4*4*channels` raw features, projects to the embedding width and
/// normalizes.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub norm: LayerNorm,
    pub in_channels: usize,
}

impl PatchEmbed {
    pub fn new<T: Element>(b: &mut Builder<T>, in_channels: usize, embed_dim: usize) -> Result<Self> {
        Ok(Self {
            proj: b.linear("proj", PATCH_SIZE * PATCH_SIZE * in_channels, embed_dim, true)?,
            norm: b.layernorm("norm", embed_dim)?,
            in_channels,
        })
    }

    pub fn raw_dim(&self) -> usize {
        PATCH_SIZE * PATCH_SIZE * self.in_channels
    }

    /// `img: [B, H, W, channels]`, channel-last.
    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, img: Var) -> Result<SwinStageOutput> {
        let s = cx.g.shape(img).to_vec();
        if s.len() != 4 || s[3] != self.in_channels {
            return Err(Error::invalid(
                "patch_embed",
                format!("expected [B, H, W, {}], got {s:?}", self.in_channels),
            ));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        if h % PATCH_SIZE != 0 || w % PATCH_SIZE != 0 {
            return Err(Error::invalid(
                "patch_embed",
                format!("{h}x{w} image is not divisible into {PATCH_SIZE}x{PATCH_SIZE} patches"),
            ));
        }
        let (gh, gw) = (h / PATCH_SIZE, w / PATCH_SIZE);
        let x = cx.g.reshape(img, vec![b, gh, PATCH_SIZE, gw, PATCH_SIZE, c])?;
        let x = cx.g.permute(x, &[0, 1, 3, 2, 4, 5])?;
        let x = cx.g.reshape(x, vec![b, gh * gw, self.raw_dim()])?;
        let x = self.proj.forward(cx, x)?;
        let x = self.norm.forward(cx, x)?;
        SwinStageOutput::new(cx.g, x, gh, gw)
    }
}

/// 2x2 neighbourhood concat (4C) -> LayerNorm -> bias-free linear to 2C.
#[derive(Clone, Debug)]
pub struct PatchMerging {
    pub norm: LayerNorm,
    pub reduction: Linear,
    pub dim: usize,
}

impl PatchMerging {
    pub fn new<T: Element>(b: &mut Builder<T>, dim: usize) -> Result<Self> {
        Ok(Self {
            norm: b.layernorm("norm", 4 * dim)?,
            reduction: b.linear("reduction", 4 * dim, 2 * dim, false)?,
            dim,
        })
    }

    pub fn param_count(dim: usize) -> usize {
        4 * dim * 2 * dim + 2 * 4 * dim
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: SwinStageOutput) -> Result<SwinStageOutput> {
        let (h, w) = (x.height, x.width);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid("patch_merging", format!("odd grid {h}x{w}")));
        }
        let (b, c) = (x.batch(cx.g), x.channels(cx.g));
        let t = cx.g.reshape(x.tokens, vec![b, h / 2, 2, w / 2, 2, c])?;
        // neighbour order (0,0), (1,0), (0,1), (1,1) as (row, col) offsets
        let t = cx.g.permute(t, &[0, 1, 3, 4, 2, 5])?;
        let t = cx.g.reshape(t, vec![b, h * w / 4, 4 * c])?;
        let t = self.norm.forward(cx, t)?;
        let t = self.reduction.forward(cx, t)?;
        SwinStageOutput::new(cx.g, t, h / 2, w / 2)
    }
}

/// Bias-free linear `C -> r² * C_out` followed by rearranging every token
/// into an `r x r` block of `C_out`-channel tokens.
#[derive(Clone, Debug)]
pub struct PatchExpanding {
    pub proj: Linear,
    pub factor: usize,
    pub out_dim: usize,
}

impl PatchExpanding {
    pub fn new<T: Element>(b: &mut Builder<T>, dim: usize, factor: usize) -> Result<Self> {
        Self::with_out_dim(b, dim, factor, Self::default_out_dim(dim, factor)?)
    }

    /// `C/2` for a factor of 2, `C/4` for a factor of 4.
    pub fn default_out_dim(dim: usize, factor: usize) -> Result<usize> {
        if factor != 2 && factor != 4 {
            return Err(Error::Config(format!(
                "patch expanding factor must be 2 or 4, got {factor}"
            )));
        }
        if !dim.is_multiple_of(factor) {
            return Err(Error::Config(format!(
                "patch expanding by {factor} needs channels divisible by {factor}, got {dim}"
            )));
        }
        Ok(dim / factor)
    }

    pub fn with_out_dim<T: Element>(b: &mut Builder<T>, dim: usize, factor: usize, out_dim: usize) -> Result<Self> {
        Self::default_out_dim(dim, factor)?;
        Ok(Self {
            proj: b.linear("proj", dim, factor * factor * out_dim, false)?,
            factor,
            out_dim,
        })
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: SwinStageOutput) -> Result<SwinStageOutput> {
        let (h, w, r, co) = (x.height, x.width, self.factor, self.out_dim);
        let b = x.batch(cx.g);
        let t = self.proj.forward(cx, x.tokens)?;
        let t = cx.g.reshape(t, vec![b, h, w, r, r, co])?;
        let t = cx.g.permute(t, &[0, 1, 3, 2, 4, 5])?;
        let t = cx.g.reshape(t, vec![b, h * r * w * r, co])?;
        SwinStageOutput::new(cx.g, t, h * r, w * r)
    }
}

/// Half-pixel-centred bilinear interpolation taps for one axis.
fn bilinear_taps(input: usize, factor: usize) -> Vec<[(usize, f64); 2]> {
    (0..input * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            let t = src - lo as f64;
            [(lo, 1.0 - t), (hi, t)]
        })
        .collect()
}

/// Parameter-free bilinear upsampling of a token grid; keeps channels.
pub fn bilinear_upsample<T: Element>(cx: &mut Ctx<T>, x: SwinStageOutput, factor: usize) -> Result<SwinStageOutput> {
    let (h, w) = (x.height, x.width);
    let (b, c) = (x.batch(cx.g), x.channels(cx.g));
    let (th, tw) = (bilinear_taps(h, factor), bilinear_taps(w, factor));
    let (oh, ow) = (h * factor, w * factor);
    let mut rows = Vec::with_capacity(b * oh * ow * c);
    for bi in 0..b {
        for row_taps in &th {
            for col_taps in &tw {
                for ch in 0..c {
                    let mut taps = Vec::with_capacity(4);
                    for &(si, wi) in row_taps {
                        for &(sj, wj) in col_taps {
                            let wt = wi * wj;
                            if wt != 0.0 {
                                taps.push((((bi * h + si) * w + sj) * c + ch, T::from_f64_lossy(wt)));
                            }
                        }
                    }
                    rows.push(taps);
                }
            }
        }
    }
    let map = Arc::new(SparseMap::from_rows(rows));
    let t = cx.g.sparse_map(x.tokens, vec![b, oh * ow, c], map)?;
    SwinStageOutput::new(cx.g, t, oh, ow)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum UpsampleMode {
    #[default]
    PatchExpand,
    Bilinear,
}

#[derive(Clone, Debug)]
pub enum Upsample {
    Expand(PatchExpanding),
    Bilinear { factor: usize, channels: usize },
}

impl Upsample {
    pub fn new<T: Element>(b: &mut Builder<T>, mode: UpsampleMode, dim: usize, factor: usize) -> Result<Self> {
        Ok(match mode {
            UpsampleMode::PatchExpand => Upsample::Expand(PatchExpanding::new(b, dim, factor)?),
            UpsampleMode::Bilinear => Upsample::Bilinear { factor, channels: dim },
        })
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Upsample::Expand(e) => e.out_dim,
            Upsample::Bilinear { channels, .. } => *channels,
        }
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: SwinStageOutput) -> Result<SwinStageOutput> {
        match self {
            Upsample::Expand(e) => e.forward(cx, x),
            Upsample::Bilinear { factor, .. } => bilinear_upsample(cx, x, *factor),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub merge: Option<PatchMerging>,
    pub pairs: Vec<SwinBlockPair>,
}

/// Stage-1 features (the decoder's skip input) and the deepest features
/// (the pyramid's input).
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutputs {
    pub low_level: SwinStageOutput,
    pub mid_level: SwinStageOutput,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub embed: PatchEmbed,
    pub stages: Vec<EncoderStage>,
}

/// Shape-level description of one encoder stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageLayout {
    pub grid: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
}

impl Encoder {
    pub fn new<T: Element>(
        b: &mut Builder<T>,
        in_channels: usize,
        stages: &[StageLayout],
        window_size: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        let embed = PatchEmbed::new(&mut b.sub("embed"), in_channels, stages[0].dim)?;
        let mut out = Vec::with_capacity(stages.len());
        for (i, st) in stages.iter().enumerate() {
            let mut sb = b.sub(format!("stage{i}"));
            let merge = if i == 0 {
                None
            } else {
                Some(PatchMerging::new(&mut sb.sub("merge"), stages[i - 1].dim)?)
            };
            let pairs = (0..st.depth / 2)
                .map(|p| {
                    SwinBlockPair::new(
                        &mut sb.sub(format!("pair{p}")),
                        st.grid,
                        st.grid,
                        st.dim,
                        st.heads,
                        window_size,
                        mlp_ratio,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(EncoderStage { merge, pairs });
        }
        Ok(Self { embed, stages: out })
    }

    /// `img: [B, H, W, channels]`.
    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, img: Var) -> Result<EncoderOutputs> {
        let mut x = self.embed.forward(cx, img)?;
        let mut low = None;
        for stage in &self.stages {
            if let Some(m) = &stage.merge {
                x = m.forward(cx, x)?;
            }
            for p in &stage.pairs {
                x = p.forward(cx, x)?;
            }
            low.get_or_insert(x);
        }
        Ok(EncoderOutputs {
            low_level: low.expect("at least one stage"),
            mid_level: x,
        })
    }
}

/// Upsample fused features to the skip resolution, concatenate with the
/// low-level features, project, refine with Swin blocks, upsample to pixels
/// and classify each pixel.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub up_skip: Upsample,
    pub fuse: Linear,
    pub pairs: Vec<SwinBlockPair>,
    pub up_pixels: Upsample,
    pub head: Linear,
    pub num_classes: usize,
}

pub struct DecoderLayout {
    pub fused_dim: usize,
    pub skip_factor: usize,
    pub low_grid: usize,
    pub low_dim: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub window_size: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub upsample: UpsampleMode,
}

impl Decoder {
    pub fn new<T: Element>(b: &mut Builder<T>, s: &DecoderLayout) -> Result<Self> {
        let up_skip = Upsample::new(&mut b.sub("up_skip"), s.upsample, s.fused_dim, s.skip_factor)?;
        let fuse = b.linear("fuse", up_skip.out_dim() + s.low_dim, s.dim, true)?;
        let pairs = (0..s.depth / 2)
            .map(|p| {
                SwinBlockPair::new(
                    &mut b.sub(format!("pair{p}")),
                    s.low_grid,
                    s.low_grid,
                    s.dim,
                    s.heads,
                    s.window_size,
                    s.mlp_ratio,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let up_pixels = Upsample::new(&mut b.sub("up_pixels"), s.upsample, s.dim, PATCH_SIZE)?;
        let head = b.linear("head", up_pixels.out_dim(), s.num_classes, true)?;
        Ok(Self {
            up_skip,
            fuse,
            pairs,
            up_pixels,
            head,
            num_classes: s.num_classes,
        })
    }

    /// Returns channel-first logits `[B, K, H_img, W_img]`.
    pub fn forward<T: Element>(
        &self,
        cx: &mut Ctx<T>,
        fused: SwinStageOutput,
        low_level: SwinStageOutput,
    ) -> Result<Var> {
        let up = self.up_skip.forward(cx, fused)?;
        if (up.height, up.width) != (low_level.height, low_level.width) {
            return Err(Error::invalid(
                "decoder",
                format!(
                    "upsampled grid {}x{} does not meet low-level grid {}x{}",
                    up.height, up.width, low_level.height, low_level.width
                ),
            ));
        }
        let cat = cx.g.concat(&[up.tokens, low_level.tokens], 2)?;
        let t = self.fuse.forward(cx, cat)?;
        let mut x = SwinStageOutput::new(cx.g, t, up.height, up.width)?;
        for p in &self.pairs {
            x = p.forward(cx, x)?;
        }
        let px = self.up_pixels.forward(cx, x)?;
        let logits = self.head.forward(cx, px.tokens)?;
        let b = px.batch(cx.g);
        let logits = cx.g.reshape(logits, vec![b, px.height, px.width, self.num_classes])?;
        cx.g.permute(logits, &[0, 3, 1, 2])
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{gradcheck, GradcheckOptions, Graph};
    use crate::nn::ParamStore;
    use crate::rng;
    use crate::tensor::Tensor;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn store() -> (ParamStore<f64>, ChaCha8Rng) {
        (ParamStore::new(), rng::stream(5, rng::INIT))
    }

    #[test]
    fn patch_embed_token_count_224() {
        let (mut st, mut r) = store();
        let pe = PatchEmbed::new(&mut Builder::new(&mut st, &mut r), 3, 8).unwrap();
        let mut g = Graph::<f32>::new();
        let st = st.cast::<f32>();
        let vars = st.bind(&mut g);
        let mut cx = Ctx::new(&mut g, &vars);
        let img = cx.g.constant(Tensor::zeros(vec![1, 224, 224, 3]));
        let out = pe.forward(&mut cx, img).unwrap();
        assert_eq!((out.height, out.width), (56, 56));
        assert_eq!(g.shape(out.tokens), &[1, 3136, 8]);
    }

    #[test]
    fn patch_embed_identity_projection() {
        let (mut st, mut r) = store();
        let pe = PatchEmbed::new(&mut Builder::new(&mut st, &mut r), 3, 48).unwrap();
        for p in st.iter_mut() {
            if p.name == "proj.weight" {
                for (i, v) in p.tensor.data_mut().iter_mut().enumerate() {
                    *v = if i / 48 == i % 48 { 1.0 } else { 0.0 };
                }
            }
        }
        let img = random(&[1, 8, 8, 3], 1);
        let mut g = Graph::new();
        let vars = st.bind(&mut g);
        let mut cx = Ctx::new(&mut g, &vars);
        let x = cx.g.constant(img.clone());
        let out = pe.forward(&mut cx, x).unwrap();
        let v = g.value(out.tokens);
        // token (1, 0) is the patch at rows 4..8, cols 0..4
        let mut raw = Vec::new();
        for i in 4..8 {
            for j in 0..4 {
                for c in 0..3 {
                    raw.push(img.at(&[0, i, j, c]));
                }
            }
        }
        let mean = raw.iter().sum::<f64>() / 48.0;
        let var = raw.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 48.0;
        for (k, &x) in raw.iter().enumerate() {
            let expect = (x - mean) / (var + 1e-5).sqrt();
            assert!((v.at(&[0, 2, k]) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn patch_embed_rejects_indivisible_image() {
        let (mut st, mut r) = store();
        let pe = PatchEmbed::new(&mut Builder::new(&mut st, &mut r), 3, 8).unwrap();
        let mut g = Graph::new();
        let vars = st.bind(&mut g);
        let mut cx = Ctx::new(&mut g, &vars);
        let img = cx.g.constant(Tensor::zeros(vec![1, 10, 8, 3]));
        assert!(pe.forward(&mut cx, img).is_err());
    }

    #[test]
    fn patch_embed_gradcheck() {
        let (mut st, mut r) = store();
        let pe = PatchEmbed::new(&mut Builder::new(&mut st, &mut r), 3, 4).unwrap();
        let mut inputs: Vec<_> = st.iter().map(|p| p.tensor.clone()).collect();
        inputs.push(random(&[1, 8, 8, 3], 2));
        let probe = random(&[1, 4, 4], 3);
        let rep = gradcheck(
            |g, v| {
                let (params, x) = v.split_at(v.len() - 1);
                let mut cx = Ctx::new(g, params);
                let out = pe.forward(&mut cx, x[0])?;
                let p = cx.g.constant(probe.clone());
                let y = cx.g.mul(out.tokens, p)?;
                Ok(cx.g.sum_all(y))
            },
            &inputs,
            &GradcheckOptions::with_tol(1e-4),
        )
        .unwrap();
        assert!(rep.passed, "{rep}");
    }

    #[test]
    fn merging_shapes_and_count() {
        let (mut st, mut r) = store();
        let pm = PatchMerging::new(&mut Builder::new(&mut st, &mut r), 6).unwrap();
        assert_eq!(st.count(), PatchMerging::param_count(6));
        assert_eq!(st.count(), 24 * 12 + 2 * 24);
        for (h, w) in [(2, 2), (4, 6), (8, 2)] {
            let mut g = Graph::new();
            let vars = st.bind(&mut g);
            let mut cx = Ctx::new(&mut g, &vars);
            let x = cx.g.constant(random(&[2, h * w, 6], 4));
            let grid = SwinStageOutput::new(cx.g, x, h, w).unwrap();
            let y = pm.forward(&mut cx, grid).unwrap();
            assert_eq!((y.height, y.width), (h / 2, w / 2));
            assert_eq!(g.shape(y.tokens), &[2, h * w / 4, 12]);
        }
        let mut g = Graph::new();
        let vars = st.bind(&mut g);
        let mut cx = Ctx::new(&mut g, &vars);
        let x = cx.g.constant(random(&[1, 6, 6], 4));
        let grid = SwinStageOutput::new(cx.g, x, 3, 2).unwrap();
        assert!(pm.forward(&mut cx, grid).is_err());
    }

    #[test]
    fn merging_gathers_2x2_neighbourhoods() {
        let (mut st, mut r) = store();
        let pm = PatchMerging::new(&mut Builder::new(&mut st, &mut r), 1).unwrap();
        let mut g = Graph::new();
        let vars = st.bind(&mut g);
        let cx = Ctx::new(&mut g, &vars);
        // values = row * 4 + col on a 4x4 grid
        let x =
            cx.g.constant(Tensor::new(vec![1, 16, 1], (0..16).map(|v| v as f64).collect()).unwrap());
        let t = cx.g.reshape(x, vec![1, 2, 2, 2, 2, 1]).unwrap();
        let t = cx.g.permute(t, &[0, 1, 3, 4, 2, 5]).unwrap();
        let t = cx.g.reshape(t, vec![1, 4, 4]).unwrap();
        assert_eq!(&g.value(t).data()[..8], &[0., 4., 1., 5., 2., 6., 3., 7.]);
        let _ = pm;
    }

    #[test]
    fn expanding_shapes_and_roundtrip_with_merge() {
        let (mut st, mut r) = store();
        let mut b = Builder::new(&mut st, &mut r);
        let e2 = PatchExpanding::new(&mut b.sub("e2"), 8, 2).unwrap();
        let pm = PatchMerging::new(&mut b.sub("m"), 4).unwrap();
        let e4 = PatchExpanding::new(&mut b.sub("e4"), 32, 4).unwrap();
        assert!(PatchExpanding::new(&mut b.sub("bad"), 6, 4).is_err());
        assert!(PatchExpanding::new(&mut b.sub("bad3"), 6, 3).is_err());
        let mut g = Graph::new();
        let vars = st.bind(&mut g);
        let mut cx = Ctx::new(&mut g, &vars);
        let x = cx.g.constant(random(&[1, 9, 8], 5));
        let grid = SwinStageOutput::new(cx.g, x, 3, 3).unwrap();
        let up = e2.forward(&mut cx, grid).unwrap();
        assert_eq!((up.height, up.width, up.channels(cx.g)), (6, 6, 4));
        let down = pm.forward(&mut cx, up).unwrap();
        assert_eq!((down.height, down.width), (3, 3));

        // 14x14x8C -> x4 -> 56x56x2C with C = 4
        let x = cx.g.constant(random(&[1, 196, 32], 6));
        let grid = SwinStageOutput::new(cx.g, x, 14, 14).unwrap();
        let up = e4.forward(&mut cx, grid).unwrap();
        assert_eq!((up.height, up.width, up.channels(cx.g)), (56, 56, 8));
    }

    #[test]
    fn expanding_places_subtokens_in_blocks() {
        let (mut st, mut r) = store();
        let e = PatchExpanding::with_out_dim(&mut Builder::new(&mut st, &mut r), 2, 2, 1).unwrap();
        // proj writes sub-token k = token value * (k + 1)
        for p in st.iter_mut() {
            p.tensor.data_mut().copy_from_slice(&[1., 2., 3., 4., 0., 0., 0., 0.]);
        }
        let mut g = Graph::new();
        let vars = st.bind(&mut g);
        let mut cx = Ctx::new(&mut g, &vars);
        let x =
            cx.g.constant(Tensor::from_f64(vec![1, 2, 2], &[1., 0., 10., 0.]).unwrap());
        let grid = SwinStageOutput::new(cx.g, x, 1, 2).unwrap();
        let up = e.forward(&mut cx, grid).unwrap();
        assert_eq!((up.height, up.width), (2, 4));
        assert_eq!(g.value(up.tokens).data(), &[1., 2., 10., 20., 3., 4., 30., 40.]);
    }

    #[test]
    fn expanding_gradcheck() {
        let (mut st, mut r) = store();
        let e = PatchExpanding::new(&mut Builder::new(&mut st, &mut r), 8, 4).unwrap();
        let mut inputs: Vec<_> = st.iter().map(|p| p.tensor.clone()).collect();
        inputs.push(random(&[1, 4, 8], 7));
        let probe = random(&[1, 64, 2], 8);
        let rep = gradcheck(
            |g, v| {
                let (params, x) = v.split_at(v.len() - 1);
                let mut cx = Ctx::new(g, params);
                let grid = SwinStageOutput::new(cx.g, x[0], 2, 2)?;
                let out = e.forward(&mut cx, grid)?;
                let p = cx.g.constant(probe.clone());
                let y = cx.g.mul(out.tokens, p)?;
                Ok(cx.g.sum_all(y))
            },
            &inputs,
            &GradcheckOptions::with_tol(1e-4),
        )
        .unwrap();
        assert!(rep.passed, "{rep}");
    }

    #[test]
    fn bilinear_constant_field_stays_constant() {
        let mut g = Graph::<f64>::new();
        let vars = [];
        let mut cx = Ctx::new(&mut g, &vars);
        let x = cx.g.constant(Tensor::full(vec![1, 9, 2], 0.75));
        let grid = SwinStageOutput::new(cx.g, x, 3, 3).unwrap();
        let up = bilinear_upsample(&mut cx, grid, 4).unwrap();
        assert_eq!((up.height, up.width), (12, 12));
        assert!(g.value(up.tokens).data().iter().all(|&v| (v - 0.75).abs() < 1e-12));
    }
}
