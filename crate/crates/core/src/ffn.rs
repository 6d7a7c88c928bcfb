//! Feed-forward network with bi-dimensional (channel + spatial) attention.
//!
//! Both branches start from one shared linear reduction `C_h → C_h/r`:
//!
//! * channel: `sigmoid(W_c · act(R · mean(x)))`, one gate per channel;
//! * spatial: `sigmoid(w_s · [act(R · x_i) ; act(R · mean(x))])`, one gate per
//!   token.
//!
//! The gates multiply the features at the insertion point (by default the
//! expanded hidden layer between FC1 and FC2).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Initializer, LayerNorm, Linear, Module};
use crate::tensor::{concat, Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply<E: Element>(self, x: &Tensor<E>) -> Tensor<E> {
        match self {
            Activation::Gelu => x.gelu(),
            Activation::Relu => x.relu(),
        }
    }
}

/// Where the gates are applied inside the FFN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatePlacement {
    /// On the `α·C`-wide activations between FC1 and FC2.
    Hidden,
    /// On the normalized `C`-wide input, before FC1.
    Input,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FfnToggles {
    pub spatial: bool,
    pub channel: bool,
}

impl Default for FfnToggles {
    fn default() -> Self {
        FfnToggles {
            spatial: true,
            channel: true,
        }
    }
}

impl FfnToggles {
    pub fn any(&self) -> bool {
        self.spatial || self.channel
    }
}

#[derive(Debug, Clone)]
pub struct BiDimParams<E: Element> {
    pub width: usize,
    pub reduction: usize,
    pub act: Activation,
    pub reduce: Linear<E>,
    pub channel_select: Option<Linear<E>>,
    pub spatial_select: Option<Linear<E>>,
}

impl<E: Element> BiDimParams<E> {
    /// Gate-producing layers start at zero, so fresh gates are all 0.5.
    pub fn new(
        init: &mut Initializer,
        width: usize,
        reduction: usize,
        act: Activation,
        toggles: FfnToggles,
    ) -> Result<Self> {
        if reduction == 0 || width % reduction != 0 {
            return Err(Error::config(format!(
                "reduction ratio r={reduction} must divide width {width}"
            )));
        }
        if !toggles.any() {
            return Err(Error::config("bi-dimensional attention needs at least one branch"));
        }
        let reduced = width / reduction;
        Ok(BiDimParams {
            width,
            reduction,
            act,
            reduce: Linear::new(init, width, reduced, true)?,
            channel_select: if toggles.channel {
                Some(Linear::zeros(reduced, width, true)?)
            } else {
                None
            },
            spatial_select: if toggles.spatial {
                Some(Linear::zeros(2 * reduced, 1, true)?)
            } else {
                None
            },
        })
    }

    pub fn reduced(&self) -> usize {
        self.width / self.reduction
    }

    fn check(&self, x: &Tensor<E>) -> Result<()> {
        if x.rank() != 2 || x.shape()[1] != self.width {
            return Err(Error::dim(format!(
                "bi-dimensional attention of width {} got {:?}",
                self.width,
                x.shape()
            )));
        }
        Ok(())
    }

    /// `act(R · mean)` over rows `stats_from..` of `x`, as `[1 × C_h/r]`.
    fn reduced_mean(&self, x: &Tensor<E>, stats_from: usize) -> Result<Tensor<E>> {
        let rows = x.shape()[0] - stats_from;
        let stats = if stats_from == 0 { x.clone() } else { x.narrow(0, stats_from, rows)? };
        let mean = stats.mean_axis(0)?.reshape(&[1, self.width])?;
        Ok(self.act.apply(&self.reduce.forward(&mean)?))
    }

    fn channel_gates(&self, reduced_mean: &Tensor<E>) -> Result<Tensor<E>> {
        let select = self
            .channel_select
            .as_ref()
            .ok_or_else(|| Error::config("channel attention branch was not built"))?;
        select.forward(reduced_mean)?.sigmoid().reshape(&[self.width])
    }

    fn spatial_gates(&self, x: &Tensor<E>, reduced_mean: &Tensor<E>) -> Result<Tensor<E>> {
        let select = self
            .spatial_select
            .as_ref()
            .ok_or_else(|| Error::config("spatial attention branch was not built"))?;
        let n = x.shape()[0];
        let local = self.act.apply(&self.reduce.forward(x)?);
        let global = reduced_mean.expand(&[n, self.reduced()])?;
        let joined = concat(&[local, global], 1)?;
        select.forward(&joined)?.sigmoid().reshape(&[n])
    }

    /// Gates `x[n × C_h]` with the enabled branches. Token statistics are
    /// taken over rows `stats_from..`; all rows are gated.
    fn apply(&self, x: &Tensor<E>, stats_from: usize, toggles: FfnToggles) -> Result<Tensor<E>> {
        self.check(x)?;
        if !toggles.any() {
            return Ok(x.clone());
        }
        let n = x.shape()[0];
        let rm = self.reduced_mean(x, stats_from)?;
        let mut out = x.clone();
        if toggles.channel {
            let g = self.channel_gates(&rm)?;
            out = out.mul(&g.expand(&[n, self.width])?)?;
        }
        if toggles.spatial {
            let g = self.spatial_gates(x, &rm)?;
            out = out.mul(&g.reshape(&[n, 1])?.expand(&[n, self.width])?)?;
        }
        Ok(out)
    }
}

impl<E: Element> Module<E> for BiDimParams<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        self.reduce.visit(&join(prefix, "reduce"), f);
        if let Some(l) = &self.channel_select {
            l.visit(&join(prefix, "channel_select"), f);
        }
        if let Some(l) = &self.spatial_select {
            l.visit(&join(prefix, "spatial_select"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        self.reduce.visit_mut(&join(prefix, "reduce"), f);
        if let Some(l) = &mut self.channel_select {
            l.visit_mut(&join(prefix, "channel_select"), f);
        }
        if let Some(l) = &mut self.spatial_select {
            l.visit_mut(&join(prefix, "spatial_select"), f);
        }
    }
}

/// Per-channel gates `[C_h]` from the token mean of `x[N × C_h]`.
pub fn channel_attention<E: Element>(x: &Tensor<E>, p: &BiDimParams<E>) -> Result<Tensor<E>> {
    p.check(x)?;
    p.channel_gates(&p.reduced_mean(x, 0)?)
}

/// Per-token gates `[N]` from each token joined with the token mean.
pub fn spatial_attention<E: Element>(x: &Tensor<E>, p: &BiDimParams<E>) -> Result<Tensor<E>> {
    p.check(x)?;
    p.spatial_gates(x, &p.reduced_mean(x, 0)?)
}

#[derive(Debug, Clone)]
pub struct FfnParams<E: Element> {
    pub dim: usize,
    pub hidden: usize,
    pub placement: GatePlacement,
    pub norm: LayerNorm<E>,
    pub fc1: Linear<E>,
    pub fc2: Linear<E>,
    pub bidim: Option<BiDimParams<E>>,
}

impl<E: Element> FfnParams<E> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Initializer,
        dim: usize,
        expansion: usize,
        reduction: usize,
        act: Activation,
        placement: GatePlacement,
        toggles: FfnToggles,
    ) -> Result<Self> {
        if expansion == 0 {
            return Err(Error::config("FFN expansion ratio must be positive"));
        }
        let hidden = dim * expansion;
        let gate_width = match placement {
            GatePlacement::Hidden => hidden,
            GatePlacement::Input => dim,
        };
        Ok(FfnParams {
            dim,
            hidden,
            placement,
            norm: LayerNorm::new(dim)?,
            fc1: Linear::new(init, dim, hidden, true)?,
            fc2: Linear::new(init, hidden, dim, true)?,
            bidim: if toggles.any() {
                Some(BiDimParams::new(init, gate_width, reduction, act, toggles)?)
            } else {
                None
            },
        })
    }
}

impl<E: Element> Module<E> for FfnParams<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
        if let Some(b) = &self.bidim {
            b.visit(&join(prefix, "bidim"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
        if let Some(b) = &mut self.bidim {
            b.visit_mut(&join(prefix, "bidim"), f);
        }
    }
}

/// Residual FFN over `x[N × C]` with the enabled gating branches.
pub fn bidim_ffn<E: Element>(x: &Tensor<E>, p: &FfnParams<E>, toggles: FfnToggles) -> Result<Tensor<E>> {
    ffn_with_prefix(x, 0, p, toggles)
}

/// Same as [`bidim_ffn`] on `[G; X]` where the first `prefix` rows are global
/// tokens: they are gated like image tokens but excluded from the means.
pub(crate) fn ffn_with_prefix<E: Element>(
    x: &Tensor<E>,
    prefix: usize,
    p: &FfnParams<E>,
    toggles: FfnToggles,
) -> Result<Tensor<E>> {
    if x.rank() != 2 || x.shape()[1] != p.dim {
        return Err(Error::dim(format!(
            "FFN of width {} got {:?}",
            p.dim,
            x.shape()
        )));
    }
    let gate = |h: &Tensor<E>| -> Result<Tensor<E>> {
        match (&p.bidim, toggles.any()) {
            (_, false) => Ok(h.clone()),
            (Some(b), true) => b.apply(h, prefix, toggles),
            (None, true) => Err(Error::config(
                "FFN gating requested but no bi-dimensional attention was built",
            )),
        }
    };
    let u = p.norm.forward(x)?;
    let h = match p.placement {
        GatePlacement::Hidden => gate(&p.fc1.forward(&u)?.gelu())?,
        GatePlacement::Input => p.fc1.forward(&gate(&u)?)?.gelu(),
    };
    x.add(&p.fc2.forward(&h)?)
}
