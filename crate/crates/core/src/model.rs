//! Full network: encoder, Swin spatial pyramid, fusion and decoder.

use crate::autodiff::{Graph, Var};
use crate::encoder_decoder::{Decoder, DecoderLayout, Encoder, PatchExpanding, StageLayout, UpsampleMode, PATCH_SIZE};
use crate::error::{Error, Result};
use crate::nn::{Builder, Ctx, ParamStore};
use crate::rng;
use crate::sspp::{default_window_sizes, Fusion, FusionMode, Sspp, MAX_LEVELS};
use crate::swin::WindowGrid;
use crate::tensor::{Element, Tensor};

/// Architectural hyperparameters. Everything the model is built from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub img_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub num_heads: Vec<usize>,
    pub window_size: usize,
    pub mlp_ratio: usize,
    pub sspp_level: usize,
    /// Overrides the level's default pyramid windows when set.
    pub sspp_window_sizes: Option<Vec<usize>>,
    pub fusion: FusionMode,
    /// Hidden width divisor of the fusion gates.
    pub fusion_reduction: usize,
    pub decoder_depth: usize,
    pub upsample: UpsampleMode,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// The reference configuration.
    fn default() -> Self {
        Self {
            img_size: 224,
            in_channels: 3,
            num_classes: 9,
            embed_dim: 96,
            depths: vec![2, 2, 6],
            num_heads: vec![3, 6, 12],
            window_size: 7,
            mlp_ratio: 4,
            sspp_level: 2,
            sspp_window_sizes: None,
            fusion: FusionMode::CrossAttention,
            fusion_reduction: 4,
            decoder_depth: 2,
            upsample: UpsampleMode::PatchExpand,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// A small model that trains in seconds on a CPU.
    pub fn tiny() -> Self {
        Self {
            img_size: 32,
            num_classes: 2,
            embed_dim: 8,
            depths: vec![2, 2],
            num_heads: vec![2, 2],
            window_size: 4,
            ..Self::default()
        }
    }

    pub fn num_stages(&self) -> usize {
        self.depths.len()
    }

    /// Channel width of stage `i`.
    pub fn stage_dim(&self, i: usize) -> usize {
        self.embed_dim << i
    }

    /// Token-grid side of stage `i`.
    pub fn stage_grid(&self, i: usize) -> usize {
        (self.img_size / PATCH_SIZE) >> i
    }

    /// Upsampling factor from the deepest grid back to the first.
    pub fn skip_factor(&self) -> usize {
        1 << (self.num_stages() - 1)
    }

    pub fn requested_sspp_windows(&self) -> Vec<usize> {
        self.sspp_window_sizes
            .clone()
            .or_else(|| default_window_sizes(self.sspp_level))
            .unwrap_or_default()
    }

    /// Pyramid windows after clamping to the deepest grid.
    pub fn effective_sspp_windows(&self) -> Vec<usize> {
        Sspp::effective_window_sizes(self.stage_grid(self.num_stages() - 1), &self.requested_sspp_windows())
    }

    pub fn effective_window(&self, stage: usize) -> usize {
        let g = self.stage_grid(stage);
        WindowGrid::effective_window(g, g, self.window_size)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let s = self.num_stages();
        if !(2..=3).contains(&s) {
            return bad(format!("depths must list 2 or 3 stages, got {}", s));
        }
        if self.num_heads.len() != s {
            return bad(format!(
                "depths has {} stages but num_heads has {}",
                s,
                self.num_heads.len()
            ));
        }
        if let Some(i) = self.depths.iter().position(|&d| d == 0 || d % 2 != 0) {
            return bad(format!(
                "depths[{i}] = {} must be a positive even number (blocks come in W-MSA/SW-MSA pairs)",
                self.depths[i]
            ));
        }
        if !self.decoder_depth.is_multiple_of(2) {
            return bad(format!("decoder_depth = {} must be even", self.decoder_depth));
        }
        for (name, v) in [
            ("in_channels", self.in_channels),
            ("embed_dim", self.embed_dim),
            ("window_size", self.window_size),
            ("mlp_ratio", self.mlp_ratio),
            ("fusion_reduction", self.fusion_reduction),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes = {} must be at least 2", self.num_classes));
        }
        let unit = PATCH_SIZE << (s - 1);
        if self.img_size == 0 || !self.img_size.is_multiple_of(unit) {
            return bad(format!(
                "img_size = {} must be a positive multiple of {unit} (patch size {PATCH_SIZE} times 2^{})",
                self.img_size,
                s - 1
            ));
        }
        for (i, &h) in self.num_heads.iter().enumerate() {
            if h == 0 || !self.stage_dim(i).is_multiple_of(h) {
                return bad(format!(
                    "num_heads[{i}] = {h} must divide the stage width {}",
                    self.stage_dim(i)
                ));
            }
        }
        if !(1..=MAX_LEVELS).contains(&self.sspp_level) {
            return bad(format!("sspp_level = {} must be in 1..={MAX_LEVELS}", self.sspp_level));
        }
        if let Some(w) = &self.sspp_window_sizes {
            if w.len() != self.sspp_level {
                return bad(format!(
                    "sspp_window_sizes has {} entries but sspp_level is {}",
                    w.len(),
                    self.sspp_level
                ));
            }
            if w.contains(&0) {
                return bad("sspp_window_sizes entries must be positive".into());
            }
        }
        let deep = self.stage_dim(s - 1);
        if self.fusion == FusionMode::CrossAttention && !(self.sspp_level * deep).is_multiple_of(self.fusion_reduction)
        {
            return bad(format!(
                "fusion_reduction = {} must divide the concatenated pyramid width {}",
                self.fusion_reduction,
                self.sspp_level * deep
            ));
        }
        if self.upsample == UpsampleMode::PatchExpand {
            PatchExpanding::default_out_dim(deep, self.skip_factor())
                .and_then(|_| PatchExpanding::default_out_dim(self.embed_dim, PATCH_SIZE))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub encoder: Encoder,
    pub sspp: Sspp,
    pub fusion: Fusion,
    pub decoder: Decoder,
}

impl<T: Element> Model<T> {
    /// Deterministic construction from `config.seed`.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut params = ParamStore::new();
        let mut r = rng::stream(c.seed, rng::INIT);
        let mut b = Builder::new(&mut params, &mut r);
        let stages: Vec<StageLayout> = (0..c.num_stages())
            .map(|i| StageLayout {
                grid: c.stage_grid(i),
                dim: c.stage_dim(i),
                heads: c.num_heads[i],
                depth: c.depths[i],
            })
            .collect();
        let encoder = Encoder::new(
            &mut b.sub("encoder"),
            c.in_channels,
            &stages,
            c.window_size,
            c.mlp_ratio,
        )?;
        let last = stages.last().expect("validated");
        let sspp = Sspp::new(
            &mut b.sub("sspp"),
            last.grid,
            last.dim,
            last.heads,
            &c.requested_sspp_windows(),
            c.mlp_ratio,
        )?;
        let fusion = Fusion::new(
            &mut b.sub("fusion"),
            c.fusion,
            c.sspp_level,
            last.dim,
            c.fusion_reduction,
        )?;
        let decoder = Decoder::new(
            &mut b.sub("decoder"),
            &DecoderLayout {
                fused_dim: last.dim,
                skip_factor: c.skip_factor(),
                low_grid: stages[0].grid,
                low_dim: stages[0].dim,
                dim: c.embed_dim,
                heads: c.num_heads[0],
                depth: c.decoder_depth,
                window_size: c.window_size,
                mlp_ratio: c.mlp_ratio,
                num_classes: c.num_classes,
                upsample: c.upsample,
            },
        )?;
        Ok(Self {
            config: config.clone(),
            params,
            encoder,
            sspp,
            fusion,
            decoder,
        })
    }

    pub fn count_params(&self) -> usize {
        self.params.count()
    }

    /// Counts per top-level module (`encoder`, `sspp`, `fusion`, `decoder`).
    pub fn breakdown(&self) -> Vec<(String, usize)> {
        self.params.breakdown(1)
    }

    /// Records the forward pass on `cx`. `img: [B, in_channels, H, W]`,
    /// returns logits `[B, K, H, W]`.
    pub fn forward(&self, cx: &mut Ctx<T>, img: Var) -> Result<Var> {
        let s = cx.g.shape(img).to_vec();
        let n = self.config.img_size;
        if s.len() != 4 || s[1] != self.config.in_channels || s[2] != n || s[3] != n {
            return Err(Error::invalid(
                "model",
                format!("expected [B, {}, {n}, {n}] input, got {s:?}", self.config.in_channels),
            ));
        }
        let x = cx.g.permute(img, &[0, 2, 3, 1])?;
        let enc = self.encoder.forward(cx, x)?;
        let pyramid = self.sspp.forward(cx, enc.mid_level)?;
        let fused = self.fusion.forward(cx, &pyramid)?;
        self.decoder.forward(cx, fused, enc.low_level)
    }

    /// Inference on a plain tensor. Parameters enter the tape as constants.
    pub fn predict(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params.iter().map(|p| g.constant(p.tensor.clone())).collect();
        let mut cx = Ctx::new(&mut g, &vars);
        let x = cx.g.constant(img.clone());
        let y = self.forward(&mut cx, x)?;
        Ok(g.value(y).clone())
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            sspp: self.sspp.clone(),
            fusion: self.fusion.clone(),
            decoder: self.decoder.clone(),
        }
    }
}

#[cfg(test)]
mod tests;
