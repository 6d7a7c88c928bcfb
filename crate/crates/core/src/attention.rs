//! Windowed local self-attention combined with learnable global tokens.
//!
//! One projection set (Q, K, V, output) serves all three attention passes of
//! a block:
//!
//! * local: image tokens attend within non-overlapping `S×S` windows;
//! * aggregate: global tokens query all image tokens, giving `Ĝ`;
//! * broadcast: image tokens query the keys/values projected from `Ĝ`.
//!
//! The block output is the sum of the local and broadcast results. The
//! output bias is applied once, on the local branch, so the sum decomposes
//! exactly into [`local_attention`] + [`global_broadcast`].

use crate::error::{Error, Result};
use crate::nn::{Initializer, Linear, Module};
use crate::tensor::{concat, Element, Tensor};

/// Geometry of a window partition of an `H×W` token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowLayout {
    pub height: usize,
    pub width: usize,
    pub window_h: usize,
    pub window_w: usize,
}

impl WindowLayout {
    /// Square `S×S` windows; `S` must divide both extents.
    pub fn new(height: usize, width: usize, window: usize) -> Result<Self> {
        if window == 0 || height % window != 0 || width % window != 0 {
            return Err(Error::config(format!(
                "window size S={window} must divide the token grid H={height}, W={width}; \
                 choose an input resolution whose per-stage grids are multiples of {window}"
            )));
        }
        Ok(WindowLayout {
            height,
            width,
            window_h: window,
            window_w: window,
        })
    }

    /// Layout used by local attention. A grid no larger than the window in
    /// either direction is attended as a single window.
    pub fn effective(height: usize, width: usize, window: usize) -> Result<Self> {
        if height <= window && width <= window {
            return Ok(WindowLayout {
                height,
                width,
                window_h: height,
                window_w: width,
            });
        }
        Self::new(height, width, window)
    }

    pub fn num_windows(&self) -> usize {
        (self.height / self.window_h) * (self.width / self.window_w)
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window_h * self.window_w
    }
}

/// Splits `x[H×W×C]` into `[nW × S² × C]` windows, row-major in both the
/// window index and the token order within a window.
pub fn window_partition<E: Element>(x: &Tensor<E>, window: usize) -> Result<(Tensor<E>, WindowLayout)> {
    let (h, w, _) = grid_dims(x)?;
    let layout = WindowLayout::new(h, w, window)?;
    Ok((partition(x, &layout)?, layout))
}

fn partition<E: Element>(x: &Tensor<E>, layout: &WindowLayout) -> Result<Tensor<E>> {
    let c = x.shape()[2];
    let (wh, ww) = (layout.window_h, layout.window_w);
    x.reshape(&[layout.height / wh, wh, layout.width / ww, ww, c])?
        .permute(&[0, 2, 1, 3, 4])?
        .reshape(&[layout.num_windows(), wh * ww, c])
}

/// Inverse of [`window_partition`].
pub fn window_reverse<E: Element>(windows: &Tensor<E>, layout: &WindowLayout) -> Result<Tensor<E>> {
    let s = windows.shape();
    if s.len() != 3 || s[0] != layout.num_windows() || s[1] != layout.tokens_per_window() {
        return Err(Error::dim(format!(
            "window_reverse: windows {s:?} do not match a {}×{} grid of {}×{} windows",
            layout.height, layout.width, layout.window_h, layout.window_w
        )));
    }
    let c = s[2];
    let (wh, ww) = (layout.window_h, layout.window_w);
    windows
        .reshape(&[layout.height / wh, layout.width / ww, wh, ww, c])?
        .permute(&[0, 2, 1, 3, 4])?
        .reshape(&[layout.height, layout.width, c])
}

fn grid_dims<E: Element>(x: &Tensor<E>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::dim(format!(
            "expected an H×W×C token grid, got {:?}",
            x.shape()
        ))),
    }
}

/// Which attention paths a block runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionToggles {
    pub local: bool,
    pub global: bool,
}

impl Default for AttentionToggles {
    fn default() -> Self {
        AttentionToggles {
            local: true,
            global: true,
        }
    }
}

/// Projection weights shared by the local, aggregate and broadcast passes.
#[derive(Debug, Clone)]
pub struct AttentionParams<E: Element> {
    pub dim: usize,
    pub heads: usize,
    /// Multiplier on the query-key logits; `1/√d` by default, `1` for the
    /// unscaled form.
    pub logit_scale: E,
    pub query: Linear<E>,
    pub key: Linear<E>,
    pub value: Linear<E>,
    pub output: Linear<E>,
}

impl<E: Element> AttentionParams<E> {
    pub fn new(init: &mut Initializer, dim: usize, heads: usize) -> Result<Self> {
        check_heads(dim, heads)?;
        Ok(AttentionParams {
            dim,
            heads,
            logit_scale: default_scale(dim, heads),
            query: Linear::new(init, dim, dim, true)?,
            key: Linear::new(init, dim, dim, true)?,
            value: Linear::new(init, dim, dim, true)?,
            output: Linear::new(init, dim, dim, true)?,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn with_unscaled_logits(mut self) -> Self {
        self.logit_scale = E::one();
        self
    }
}

fn default_scale<E: Element>(dim: usize, heads: usize) -> E {
    E::from_f64_lossy(1.0 / ((dim / heads) as f64).sqrt())
}

fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || dim % heads != 0 {
        return Err(Error::config(format!(
            "head count {heads} must divide embedding width {dim}"
        )));
    }
    Ok(())
}

impl<E: Element> Module<E> for AttentionParams<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        self.query.visit(&crate::nn::join(prefix, "query"), f);
        self.key.visit(&crate::nn::join(prefix, "key"), f);
        self.value.visit(&crate::nn::join(prefix, "value"), f);
        self.output.visit(&crate::nn::join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        self.query.visit_mut(&crate::nn::join(prefix, "query"), f);
        self.key.visit_mut(&crate::nn::join(prefix, "key"), f);
        self.value.visit_mut(&crate::nn::join(prefix, "value"), f);
        self.output.visit_mut(&crate::nn::join(prefix, "output"), f);
    }
}

/// The `T` learnable global tokens carried through a stage; `T` may be 0.
#[derive(Debug, Clone)]
pub struct GlobalTokens<E: Element> {
    tokens: Option<Tensor<E>>,
}

impl<E: Element> GlobalTokens<E> {
    pub fn new(tokens: Tensor<E>) -> Result<Self> {
        if tokens.rank() != 2 {
            return Err(Error::dim(format!(
                "global tokens must be T×C, got {:?}",
                tokens.shape()
            )));
        }
        Ok(GlobalTokens {
            tokens: Some(tokens),
        })
    }

    pub fn none() -> Self {
        GlobalTokens { tokens: None }
    }

    pub fn count(&self) -> usize {
        self.tokens.as_ref().map_or(0, |t| t.shape()[0])
    }

    pub fn tensor(&self) -> Option<&Tensor<E>> {
        self.tokens.as_ref()
    }
}

/// `[.., n, C] → [.., heads, n, d]`
fn split_heads<E: Element>(x: &Tensor<E>, heads: usize) -> Result<Tensor<E>> {
    let s = x.shape();
    let r = s.len();
    let (n, c) = (s[r - 2], s[r - 1]);
    let mut shape = s[..r - 2].to_vec();
    shape.extend([n, heads, c / heads]);
    let mut perm: Vec<usize> = (0..r - 2).collect();
    perm.extend([r - 1, r - 2, r]);
    x.reshape(&shape)?.permute(&perm)
}

/// `[.., heads, n, d] → [.., n, C]`
fn merge_heads<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let s = x.shape();
    let r = s.len();
    let (heads, n, d) = (s[r - 3], s[r - 2], s[r - 1]);
    let mut perm: Vec<usize> = (0..r - 3).collect();
    perm.extend([r - 2, r - 3, r - 1]);
    let mut shape = s[..r - 3].to_vec();
    shape.extend([n, heads * d]);
    x.permute(&perm)?.reshape(&shape)
}

/// `softmax(scale · q kᵀ) v` per head on already-projected inputs.
fn attend<E: Element>(q: &Tensor<E>, k: &Tensor<E>, v: &Tensor<E>, heads: usize, scale: E) -> Result<Tensor<E>> {
    let (qh, kh, vh) = (split_heads(q, heads)?, split_heads(k, heads)?, split_heads(v, heads)?);
    let r = kh.rank();
    let logits = qh.matmul(&kh.transpose(r - 2, r - 1)?)?.scale(scale);
    let weights = logits.softmax(r - 1)?;
    merge_heads(&weights.matmul(&vh)?)
}

fn check_width<E: Element>(what: &str, x: &Tensor<E>, dim: usize) -> Result<()> {
    if x.rank() < 2 || x.shape().last() != Some(&dim) {
        return Err(Error::config(format!(
            "{what}: expected width {dim}, got shape {:?}",
            x.shape()
        )));
    }
    Ok(())
}

/// Multi-head attention with Q/K/V projections of `q_in`, `k_in`, `v_in`,
/// per-head scaled logits, concatenated heads and output projection.
pub fn scaled_mha<E: Element>(
    q_in: &Tensor<E>,
    k_in: &Tensor<E>,
    v_in: &Tensor<E>,
    p: &AttentionParams<E>,
) -> Result<Tensor<E>> {
    check_heads(p.dim, p.heads)?;
    check_width("scaled_mha query", q_in, p.dim)?;
    check_width("scaled_mha key", k_in, p.dim)?;
    check_width("scaled_mha value", v_in, p.dim)?;
    let (q, k, v) = (p.query.forward(q_in)?, p.key.forward(k_in)?, p.value.forward(v_in)?);
    p.output.forward(&attend(&q, &k, &v, p.heads, p.logit_scale)?)
}

/// Windowed attention core on projected `[N×C]` queries/keys/values of an
/// `H×W` grid; returns pre-output-projection `[N×C]`.
fn local_core<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    layout: &WindowLayout,
    p: &AttentionParams<E>,
) -> Result<Tensor<E>> {
    let grid = [layout.height, layout.width, p.dim];
    let win = |t: &Tensor<E>| partition(&t.reshape(&grid)?, layout);
    let out = attend(&win(q)?, &win(k)?, &win(v)?, p.heads, p.logit_scale)?;
    window_reverse(&out, layout)?.reshape(&[layout.height * layout.width, p.dim])
}

/// Self-attention restricted to non-overlapping `S×S` windows of `x[H×W×C]`.
pub fn local_attention<E: Element>(x: &Tensor<E>, p: &AttentionParams<E>, window: usize) -> Result<Tensor<E>> {
    let (h, w, c) = grid_dims(x)?;
    check_heads(p.dim, p.heads)?;
    check_width("local_attention", x, p.dim)?;
    let layout = WindowLayout::effective(h, w, window)?;
    let flat = x.reshape(&[h * w, c])?;
    let (q, k, v) = (p.query.forward(&flat)?, p.key.forward(&flat)?, p.value.forward(&flat)?);
    p.output
        .forward(&local_core(&q, &k, &v, &layout, p)?)?
        .reshape(&[h, w, c])
}

/// Global tokens query every image token: `Ĝ = Attention(G_q, X_k, X_v)`.
pub fn global_aggregate<E: Element>(
    g: &GlobalTokens<E>,
    x: &Tensor<E>,
    p: &AttentionParams<E>,
) -> Result<Tensor<E>> {
    let tokens = g.tensor().ok_or_else(|| {
        Error::Contract("global_aggregate needs at least one global token; skip the global path when T = 0".into())
    })?;
    let (h, w, c) = grid_dims(x)?;
    check_width("global_aggregate", tokens, p.dim)?;
    let flat = x.reshape(&[h * w, c])?;
    scaled_mha(tokens, &flat, &flat, p)
}

/// Broadcast core: projected image queries attend over `Ĝ`'s keys/values.
/// Returns pre-output-projection `[N×C]`.
fn broadcast_core<E: Element>(q: &Tensor<E>, g_hat: &Tensor<E>, p: &AttentionParams<E>) -> Result<Tensor<E>> {
    let (gk, gv) = (p.key.forward(g_hat)?, p.value.forward(g_hat)?);
    attend(q, &gk, &gv, p.heads, p.logit_scale)
}

/// Image tokens query the aggregated global tokens:
/// `X_global = Attention(X_q, Ĝ_k, Ĝ_v)`, output weight applied without
/// bias so that it adds onto [`local_attention`].
pub fn global_broadcast<E: Element>(
    x: &Tensor<E>,
    g_hat: &Tensor<E>,
    p: &AttentionParams<E>,
) -> Result<Tensor<E>> {
    let (h, w, c) = grid_dims(x)?;
    check_width("global_broadcast", x, p.dim)?;
    check_width("global_broadcast tokens", g_hat, p.dim)?;
    let q = p.query.forward(&x.reshape(&[h * w, c])?)?;
    p.output
        .forward_no_bias(&broadcast_core(&q, g_hat, p)?)?
        .reshape(&[h, w, c])
}

/// Intermediate features of one [`lightvit_attention`] call.
#[derive(Debug, Clone)]
pub struct AttentionTrace<E: Element> {
    /// `X_local` before the output projection, `[N×C]`.
    pub local: Option<Tensor<E>>,
    /// `X_global` before the output projection, `[N×C]`.
    pub global: Option<Tensor<E>>,
    /// `X_local + X_global`, `[N×C]`.
    pub combined: Tensor<E>,
    /// Output projection of `combined`, `[H×W×C]`.
    pub output: Tensor<E>,
    pub tokens: GlobalTokens<E>,
}

/// Local window attention plus global aggregate/broadcast.
///
/// Returns the new image tokens and the aggregated global tokens `Ĝ`. The
/// two image-token paths are summed before one shared output projection.
/// With the global path off (or `T = 0`) the incoming tokens pass through.
pub fn lightvit_attention<E: Element>(
    x: &Tensor<E>,
    g: &GlobalTokens<E>,
    p: &AttentionParams<E>,
    window: usize,
    toggles: AttentionToggles,
) -> Result<(Tensor<E>, GlobalTokens<E>)> {
    let t = lightvit_attention_trace(x, g, p, window, toggles)?;
    Ok((t.output, t.tokens))
}

/// [`lightvit_attention`] keeping the pre-projection features.
pub fn lightvit_attention_trace<E: Element>(
    x: &Tensor<E>,
    g: &GlobalTokens<E>,
    p: &AttentionParams<E>,
    window: usize,
    toggles: AttentionToggles,
) -> Result<AttentionTrace<E>> {
    if !toggles.local && !toggles.global {
        return Err(Error::config(
            "attention needs the local path, the global path, or both",
        ));
    }
    let (h, w, c) = grid_dims(x)?;
    check_heads(p.dim, p.heads)?;
    check_width("lightvit_attention", x, p.dim)?;
    let n = h * w;
    let flat = x.reshape(&[n, c])?;
    let global = toggles.global && g.count() > 0;
    let t = g.count();

    // Queries over the token-axis concatenation [G; X]; keys and values of
    // the global rows are never read, so only image rows are projected.
    let tokens = match g.tensor() {
        Some(gt) if global => {
            check_width("lightvit_attention tokens", gt, p.dim)?;
            concat(&[gt.clone(), flat.clone()], 0)?
        }
        _ => flat.clone(),
    };
    let q = p.query.forward(&tokens)?;
    let kx = p.key.forward(&flat)?;
    let vx = p.value.forward(&flat)?;
    let qx = if global { q.narrow(0, t, n)? } else { q.clone() };

    let local = if toggles.local {
        let layout = WindowLayout::effective(h, w, window)?;
        Some(local_core(&qx, &kx, &vx, &layout, p)?)
    } else {
        None
    };

    let (broadcast, tokens_out) = if global {
        let qg = q.narrow(0, 0, t)?;
        let g_hat = p
            .output
            .forward(&attend(&qg, &kx, &vx, p.heads, p.logit_scale)?)?;
        let b = broadcast_core(&qx, &g_hat, p)?;
        (Some(b), GlobalTokens::new(g_hat)?)
    } else {
        (None, g.clone())
    };

    let combined = match (&local, &broadcast) {
        (Some(l), Some(b)) => l.add(b)?,
        (Some(l), None) => l.clone(),
        (None, Some(b)) => b.clone(),
        (None, None) => {
            return Err(Error::config(
                "global-only attention needs at least one global token",
            ))
        }
    };
    let output = p.output.forward(&combined)?.reshape(&[h, w, c])?;
    Ok(AttentionTrace {
        local,
        global: broadcast,
        combined,
        output,
        tokens: tokens_out,
    })
}

#[cfg(test)]
mod tests;
