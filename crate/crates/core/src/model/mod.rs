//! Hierarchical backbone: convolutional stem, three stages of blocks at
//! strides 8/16/32, residual patch merging between stages and a pooled
//! linear classifier.

mod config;

pub use config::{ModelConfig, StageConfig, Toggles, VARIANT_NAMES};

use crate::attention::{lightvit_attention, AttentionParams, GlobalTokens};
use crate::error::{Error, Result};
use crate::ffn::{ffn_with_prefix, FfnParams};
use crate::nn::{join, Conv2d, Initializer, LayerNorm, Linear, Module, INIT_STD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::gradcheck::{self, GradCheckOptions, GradCheckReport};
use crate::tensor::{concat, Element, Tensor};

/// Three 3×3 stride-2 convolutions with LayerNorm + GELU between them.
#[derive(Debug, Clone)]
pub struct Stem<E: Element> {
    pub convs: Vec<Conv2d<E>>,
    pub norms: Vec<LayerNorm<E>>,
}

impl<E: Element> Stem<E> {
    pub fn new(init: &mut Initializer, width: usize) -> Result<Self> {
        let half = width / 2;
        Ok(Stem {
            convs: vec![
                Conv2d::new(init, 3, half, 3, 2, 1, true)?,
                Conv2d::new(init, half, half, 3, 2, 1, true)?,
                Conv2d::new(init, half, width, 3, 2, 1, true)?,
            ],
            norms: vec![LayerNorm::new(half)?, LayerNorm::new(half)?],
        })
    }

    /// `[3×H×W]` image to an `(H/8)×(W/8)×C₀` token grid.
    pub fn forward(&self, image: &Tensor<E>) -> Result<Tensor<E>> {
        match *image.shape() {
            [3, h, w] if h % 8 == 0 && w % 8 == 0 && h > 0 && w > 0 => {}
            [3, h, w] => {
                return Err(Error::config(format!(
                    "stem input {h}×{w} must have extents divisible by 8"
                )))
            }
            _ => {
                return Err(Error::dim(format!(
                    "stem expects a 3×H×W image, got {:?}",
                    image.shape()
                )))
            }
        }
        let mut x = image.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&x)?;
            if let Some(norm) = self.norms.get(i) {
                let grid = x.permute(&[1, 2, 0])?;
                x = norm.forward(&grid)?.gelu().permute(&[2, 0, 1])?;
            }
        }
        x.permute(&[1, 2, 0])
    }
}

impl<E: Element> Module<E> for Stem<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&join(prefix, &format!("conv{i}")), f);
        }
        for (i, n) in self.norms.iter().enumerate() {
            n.visit(&join(prefix, &format!("norm{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("conv{i}")), f);
        }
        for (i, n) in self.norms.iter_mut().enumerate() {
            n.visit_mut(&join(prefix, &format!("norm{i}")), f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Block<E: Element> {
    pub norm: LayerNorm<E>,
    pub attn: AttentionParams<E>,
    pub ffn: FfnParams<E>,
}

impl<E: Element> Block<E> {
    pub fn new(init: &mut Initializer, cfg: &ModelConfig, stage: usize) -> Result<Self> {
        let s = cfg.stages[stage];
        Ok(Block {
            norm: LayerNorm::new(s.width)?,
            attn: AttentionParams::new(init, s.width, s.heads)?,
            ffn: FfnParams::new(
                init,
                s.width,
                cfg.expansion,
                cfg.reduction,
                cfg.gate_activation,
                cfg.gate_placement,
                cfg.toggles.ffn(),
            )?,
        })
    }
}

impl<E: Element> Module<E> for Block<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
    }
}

/// Pre-norm block on `x[H×W×C]` and the stage's global tokens.
///
/// Attention sees `LN([G; X])`; both token sets get a residual. The FFN then
/// runs over `[Ĝ'; X₁]` with the global rows excluded from the gate statistics.
pub fn lightvit_block<E: Element>(
    x: &Tensor<E>,
    g: &GlobalTokens<E>,
    p: &Block<E>,
    window: usize,
    toggles: Toggles,
) -> Result<(Tensor<E>, GlobalTokens<E>)> {
    let global = toggles.global && g.count() > 0;
    let normed_g = match g.tensor() {
        Some(t) if global => GlobalTokens::new(p.norm.forward(t)?)?,
        _ => GlobalTokens::none(),
    };
    let (delta, g_hat) = lightvit_attention(&p.norm.forward(x)?, &normed_g, &p.attn, window, toggles.attention())?;
    let x1 = x.add(&delta)?;
    let shape = x.shape().to_vec();
    let n = shape[0] * shape[1];
    let c = shape[2];
    let flat = x1.reshape(&[n, c])?;
    match (g.tensor(), g_hat.tensor()) {
        (Some(g0), Some(gh)) if global => {
            let g1 = g0.add(gh)?;
            let t = g1.shape()[0];
            let out = ffn_with_prefix(&concat(&[g1, flat], 0)?, t, &p.ffn, toggles.ffn())?;
            Ok((
                out.narrow(0, t, n)?.reshape(&shape)?,
                GlobalTokens::new(out.narrow(0, 0, t)?)?,
            ))
        }
        _ => {
            let out = ffn_with_prefix(&flat, 0, &p.ffn, toggles.ffn())?;
            Ok((out.reshape(&shape)?, g.clone()))
        }
    }
}

/// Swin 2×2 merging (concat → LN → 4C→2C) plus an average-pool residual
/// (C→2C, no bias).
#[derive(Debug, Clone)]
pub struct PatchMerging<E: Element> {
    pub norm: LayerNorm<E>,
    pub main: Linear<E>,
    pub residual: Linear<E>,
}

impl<E: Element> PatchMerging<E> {
    pub fn new(init: &mut Initializer, dim: usize) -> Result<Self> {
        Ok(PatchMerging {
            norm: LayerNorm::new(4 * dim)?,
            main: Linear::new(init, 4 * dim, 2 * dim, false)?,
            residual: Linear::new(init, dim, 2 * dim, false)?,
        })
    }

    fn split(x: &Tensor<E>) -> Result<(usize, usize, usize)> {
        match *x.shape() {
            [h, w, c] if h % 2 == 0 && w % 2 == 0 && h > 0 && w > 0 => Ok((h, w, c)),
            [h, w, _] => Err(Error::config(format!(
                "patch merging needs even grid extents, got {h}×{w}"
            ))),
            _ => Err(Error::dim(format!(
                "patch merging expects H×W×C, got {:?}",
                x.shape()
            ))),
        }
    }

    /// `LN(concat 2×2) · W_main`, channel order (0,0), (1,0), (0,1), (1,1).
    pub fn main_branch(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let (h, w, c) = Self::split(x)?;
        let merged = x
            .reshape(&[h / 2, 2, w / 2, 2, c])?
            .permute(&[0, 2, 3, 1, 4])?
            .reshape(&[h / 2, w / 2, 4 * c])?;
        self.main.forward(&self.norm.forward(&merged)?)
    }

    /// `avgpool2×2(x) · W_res`.
    pub fn residual_branch(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let (h, w, c) = Self::split(x)?;
        let pooled = x
            .reshape(&[h / 2, 2, w / 2, 2, c])?
            .permute(&[0, 2, 1, 3, 4])?
            .reshape(&[h / 2, w / 2, 4, c])?
            .mean_axis(2)?;
        self.residual.forward(&pooled)
    }
}

impl<E: Element> Module<E> for PatchMerging<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.main.visit(&join(prefix, "main"), f);
        self.residual.visit(&join(prefix, "residual"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.main.visit_mut(&join(prefix, "main"), f);
        self.residual.visit_mut(&join(prefix, "residual"), f);
    }
}

/// `x[H×W×C] → [(H/2)×(W/2)×2C]`, the sum of both merging branches.
pub fn residual_patch_merging<E: Element>(x: &Tensor<E>, p: &PatchMerging<E>) -> Result<Tensor<E>> {
    p.main_branch(x)?.add(&p.residual_branch(x)?)
}

/// Widens `T×C` global tokens to `T×2C` at a stage boundary.
pub fn project_global_tokens<E: Element>(g: &GlobalTokens<E>, proj: &Linear<E>) -> Result<GlobalTokens<E>> {
    match g.tensor() {
        Some(t) => GlobalTokens::new(proj.forward(t)?),
        None => Ok(GlobalTokens::none()),
    }
}

#[derive(Debug, Clone)]
pub struct Stage<E: Element> {
    /// Present on every stage but the first.
    pub merge: Option<PatchMerging<E>>,
    pub global_proj: Option<Linear<E>>,
    pub blocks: Vec<Block<E>>,
}

impl<E: Element> Module<E> for Stage<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        if let Some(m) = &self.merge {
            m.visit(&join(prefix, "merge"), f);
        }
        if let Some(l) = &self.global_proj {
            l.visit(&join(prefix, "global_proj"), f);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        if let Some(m) = &mut self.merge {
            m.visit_mut(&join(prefix, "merge"), f);
        }
        if let Some(l) = &mut self.global_proj {
            l.visit_mut(&join(prefix, "global_proj"), f);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Head<E: Element> {
    pub norm: LayerNorm<E>,
    pub fc: Linear<E>,
}

impl<E: Element> Module<E> for Head<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.fc.visit(&join(prefix, "fc"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.fc.visit_mut(&join(prefix, "fc"), f);
    }
}

/// Feature maps after each stage (strides 8, 16, 32) and the final global
/// tokens.
#[derive(Debug, Clone)]
pub struct StageOutput<E: Element> {
    pub features: Vec<Tensor<E>>,
    pub global: GlobalTokens<E>,
}

#[derive(Debug, Clone)]
pub struct Model<E: Element = f32> {
    pub config: ModelConfig,
    pub stem: Stem<E>,
    /// Initial `T×C₁` tokens; absent when the global path is unused.
    pub global_tokens: Option<Tensor<E>>,
    pub stages: Vec<Stage<E>>,
    pub head: Head<E>,
}

impl<E: Element> Model<E> {
    /// Deterministic in `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Initializer::new(seed);
        let stem = Stem::new(&mut init, config.stem_width)?;
        let global = config.uses_global();
        let global_tokens = if global {
            Some(init.trunc_normal(&[config.global_tokens, config.stages[0].width], INIT_STD)?)
        } else {
            None
        };
        let mut stages = Vec::with_capacity(config.stages.len());
        for (i, s) in config.stages.iter().enumerate() {
            let (merge, global_proj) = if i == 0 {
                (None, None)
            } else {
                let prev = config.stages[i - 1].width;
                let proj = if global {
                    Some(Linear::new(&mut init, prev, s.width, false)?)
                } else {
                    None
                };
                (Some(PatchMerging::new(&mut init, prev)?), proj)
            };
            let blocks = (0..s.depth)
                .map(|_| Block::new(&mut init, config, i))
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage {
                merge,
                global_proj,
                blocks,
            });
        }
        let last = config.stages[config.stages.len() - 1].width;
        let head = Head {
            norm: LayerNorm::new(last)?,
            fc: Linear::new(&mut init, last, config.num_classes, true)?,
        };
        Ok(Model {
            config: config.clone(),
            stem,
            global_tokens,
            stages,
            head,
        })
    }

    pub fn initial_global_tokens(&self) -> Result<GlobalTokens<E>> {
        match &self.global_tokens {
            Some(t) => GlobalTokens::new(t.clone()),
            None => Ok(GlobalTokens::none()),
        }
    }

    /// Runs stage `index`: merging and token projection (past the first
    /// stage), then its blocks.
    pub fn run_stage(
        &self,
        index: usize,
        x: &Tensor<E>,
        g: &GlobalTokens<E>,
    ) -> Result<(Tensor<E>, GlobalTokens<E>)> {
        let stage = self
            .stages
            .get(index)
            .ok_or_else(|| Error::config(format!("no stage {index}")))?;
        let mut x = match &stage.merge {
            Some(m) => residual_patch_merging(x, m)?,
            None => x.clone(),
        };
        let mut g = match &stage.global_proj {
            Some(p) => project_global_tokens(g, p)?,
            None => g.clone(),
        };
        for block in &stage.blocks {
            (x, g) = lightvit_block(&x, &g, block, self.config.window, self.config.toggles)?;
        }
        Ok((x, g))
    }

    pub fn forward_features(&self, image: &Tensor<E>) -> Result<StageOutput<E>> {
        self.check_image(image)?;
        let mut x = self.stem.forward(image)?;
        let mut g = self.initial_global_tokens()?;
        let mut features = Vec::with_capacity(self.stages.len());
        for i in 0..self.stages.len() {
            (x, g) = self.run_stage(i, &x, &g)?;
            features.push(x.clone());
        }
        Ok(StageOutput { features, global: g })
    }

    /// `LN` over the final image tokens, token mean, linear classifier.
    pub fn head_forward(&self, features: &Tensor<E>) -> Result<Tensor<E>> {
        let c = *features
            .shape()
            .last()
            .ok_or_else(|| Error::dim("classifier input is rank 0"))?;
        let tokens = features.reshape(&[features.numel() / c, c])?;
        let pooled = self.head.norm.forward(&tokens)?.mean_axis(0)?;
        let logits = self.head.fc.forward(&pooled.reshape(&[1, c])?)?;
        logits.reshape(&[self.config.num_classes])
    }

    pub fn classify(&self, image: &Tensor<E>) -> Result<Tensor<E>> {
        let out = self.forward_features(image)?;
        let last = out
            .features
            .last()
            .ok_or_else(|| Error::config("model has no stages"))?;
        self.head_forward(last)
    }

    pub fn check_image(&self, image: &Tensor<E>) -> Result<()> {
        match *image.shape() {
            [3, h, w] => self.config.check_resolution(h, w),
            _ => Err(Error::dim(format!(
                "expected a 3×H×W image, got {:?}",
                image.shape()
            ))),
        }
    }

    /// Names and tensors in visiting order.
    pub fn named_parameters(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n.to_string(), t.clone())));
        out
    }
}

impl<E: Element> Module<E> for Model<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        if let Some(g) = &self.global_tokens {
            f(&join(prefix, "global_tokens"), g);
        }
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("stages.{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        if let Some(g) = &mut self.global_tokens {
            f(&join(prefix, "global_tokens"), g);
        }
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("stages.{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests;

/// Finite-difference result for one parameter tensor (or the input image).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub report: GradCheckReport,
}

/// End-to-end gradient check of a 64-bit model built from `cfg`.
///
/// Every parameter is redrawn uniformly in `±scale` so that zero-initialized
/// gates and biases carry signal, the loss is a fixed random projection of
/// the logits, and at most `opts.max_coords` coordinates per tensor are
/// perturbed. The first entry is the input image.
pub fn gradient_check(
    cfg: &ModelConfig,
    height: usize,
    width: usize,
    seed: u64,
    scale: f64,
    opts: GradCheckOptions,
) -> Result<Vec<ParamCheck>> {
    let mut model = Model::<f64>::build(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut uniform = |shape: &[usize], s: f64| -> Result<Tensor<f64>> {
        let n = shape.iter().product();
        Tensor::from_f64(shape, &(0..n).map(|_| rng.gen_range(-s..s)).collect::<Vec<_>>())
    };
    let mut failure = None;
    model.visit_mut("", &mut |_, t| match uniform(t.shape(), scale) {
        Ok(v) => *t = v,
        Err(e) => failure = Some(e),
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let weights = uniform(&[cfg.num_classes], 1.0)?;
    let mut names = vec!["image".to_string()];
    let mut inputs = vec![uniform(&[3, height, width], 1.0)?];
    model.visit("", &mut |n, t| {
        names.push(n.to_string());
        inputs.push(t.clone());
    });
    let reports = gradcheck::check(
        &inputs,
        |v| {
            let mut m = model.clone();
            let mut i = 1;
            m.visit_mut("", &mut |_, t| {
                *t = v[i].clone();
                i += 1;
            });
            Ok(m.classify(&v[0])?.mul(&weights)?.sum())
        },
        opts,
    )?;
    Ok(names
        .into_iter()
        .zip(reports)
        .map(|(name, report)| ParamCheck { name, report })
        .collect())
}
