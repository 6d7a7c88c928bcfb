use crate::attention::WindowLayout;
use crate::error::{Error, Result};
use crate::ffn::GatePlacement;
use crate::model::ModelConfig;

use super::{CostNode, CostReport};

/// Closed-form attention-core cost of one block on an `H×W` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionCost {
    /// `2·H·W·S²·C`: logits and weighted sum inside windows.
    pub local: u64,
    /// `2·(H·W·T·C)·2`: aggregate plus broadcast.
    pub global: u64,
}

pub fn attention_cost(height: usize, width: usize, window: usize, tokens: usize, dim: usize, heads: usize) -> Result<AttentionCost> {
    if window == 0 || height % window != 0 || width % window != 0 {
        return Err(Error::config(format!(
            "window size S={window} must divide grid H={height}, W={width}"
        )));
    }
    if heads == 0 || dim % heads != 0 {
        return Err(Error::config(format!("head count {heads} must divide width {dim}")));
    }
    let n = (height * width) as u64;
    let (s, t, c) = (window as u64, tokens as u64, dim as u64);
    Ok(AttentionCost {
        local: 2 * n * s * s * c,
        global: 2 * (n * t * c) * 2,
    })
}

fn linear(name: &str, input: u64, output: u64, bias: bool, rows: u64) -> CostNode {
    CostNode::leaf(name, input * output + if bias { output } else { 0 }, rows * input * output, 0)
}

fn norm(name: &str, dim: u64, rows: u64) -> CostNode {
    CostNode::leaf(name, 2 * dim, 0, rows * dim)
}

struct BlockShape {
    /// Image tokens.
    n: u64,
    /// Active global tokens.
    t: u64,
    c: u64,
    heads: u64,
    /// Tokens per window.
    window_tokens: u64,
}

fn attention_node(cfg: &ModelConfig, s: &BlockShape) -> CostNode {
    let BlockShape { n, t, c, heads, window_tokens } = *s;
    // Queries for every row; keys and values for image rows only.
    let mut children = vec![CostNode::leaf("qkv", 3 * (c * c + c), (3 * n + t) * c * c, 0)];
    if cfg.toggles.local {
        children.push(CostNode::leaf("local_core", 0, 2 * n * window_tokens * c, n * window_tokens * heads));
    }
    if t > 0 {
        children.push(CostNode::leaf("aggregate_core", 0, 2 * t * n * c, t * n * heads));
        children.push(CostNode::leaf("aggregate_proj", 0, t * c * c, 0));
        children.push(CostNode::leaf("global_kv", 0, 2 * t * c * c, 0));
        children.push(CostNode::leaf("broadcast_core", 0, 2 * n * t * c, n * t * heads));
    }
    children.push(CostNode::leaf("proj", c * c + c, n * c * c, 0));
    CostNode::group("attn", children)
}

fn ffn_node(cfg: &ModelConfig, s: &BlockShape) -> CostNode {
    let rows = s.n + s.t;
    let c = s.c;
    let hidden = c * cfg.expansion as u64;
    let mut children = vec![
        norm("norm", c, rows),
        CostNode::leaf("fc1", c * hidden + hidden, rows * c * hidden, rows * hidden),
        linear("fc2", hidden, c, true, rows),
    ];
    let toggles = cfg.toggles.ffn();
    if toggles.any() {
        let w = match cfg.gate_placement {
            GatePlacement::Hidden => hidden,
            GatePlacement::Input => c,
        };
        let red = w / cfg.reduction as u64;
        let reduce_rows = 1 + if toggles.spatial { rows } else { 0 };
        let mut gates = vec![CostNode::leaf("reduce", w * red + red, reduce_rows * w * red, reduce_rows * red)];
        if toggles.channel {
            gates.push(CostNode::leaf("channel_select", red * w + w, red * w, w + rows * w));
        }
        if toggles.spatial {
            gates.push(CostNode::leaf("spatial_select", 2 * red + 1, rows * 2 * red, 2 * rows * w));
        }
        children.push(CostNode::group("bidim", gates));
    }
    CostNode::group("ffn", children)
}

/// Parameter and MAC tree of `cfg` for one `height×width` image.
pub fn cost_of_config(cfg: &ModelConfig, height: usize, width: usize) -> Result<CostReport> {
    cfg.validate()?;
    cfg.check_resolution(height, width)?;
    let c0 = cfg.stem_width as u64;
    let half = c0 / 2;
    let mut top = Vec::new();

    // Stem: three stride-2 3×3 convolutions.
    let (mut h, mut w) = (height, width);
    let mut stem = Vec::new();
    for (i, (cin, cout)) in [(3, half), (half, half), (half, c0)].into_iter().enumerate() {
        h = (h + 2 - 3) / 2 + 1;
        w = (w + 2 - 3) / 2 + 1;
        let spatial = (h * w) as u64;
        stem.push(CostNode::leaf(format!("conv{i}"), cout * cin * 9 + cout, cout * cin * 9 * spatial, 0));
        if i < 2 {
            stem.push(CostNode::leaf(format!("norm{i}"), 2 * cout, 0, 2 * cout * spatial));
        }
    }
    top.push(CostNode::group("stem", stem));

    let t = if cfg.uses_global() { cfg.global_tokens as u64 } else { 0 };
    top.push(CostNode::leaf("global_tokens", t * cfg.stages[0].width as u64, 0, 0));

    for (i, st) in cfg.stages.iter().enumerate() {
        let c = st.width as u64;
        let mut children = Vec::new();
        if i > 0 {
            let prev = c / 2;
            h /= 2;
            w /= 2;
            let n = (h * w) as u64;
            children.push(CostNode::group(
                "merge",
                vec![
                    norm("norm", 4 * prev, n),
                    linear("main", 4 * prev, 2 * prev, false, n),
                    linear("residual", prev, 2 * prev, false, n),
                ],
            ));
            if t > 0 {
                children.push(linear("global_proj", prev, c, false, t));
            }
        }
        let shape = BlockShape {
            n: (h * w) as u64,
            t,
            c,
            heads: st.heads as u64,
            window_tokens: WindowLayout::effective(h, w, cfg.window)?.tokens_per_window() as u64,
        };
        let blocks = (0..st.depth)
            .map(|b| {
                CostNode::group(
                    format!("block{b}"),
                    vec![
                        norm("norm", c, shape.n + t),
                        attention_node(cfg, &shape),
                        ffn_node(cfg, &shape),
                    ],
                )
            })
            .collect();
        children.push(CostNode::group("blocks", blocks));
        top.push(CostNode::group(format!("stage{}", i + 1), children));
    }

    let last = cfg.stages[cfg.stages.len() - 1].width as u64;
    let n = (h * w) as u64;
    top.push(CostNode::group(
        "head",
        vec![norm("norm", last, n), linear("fc", last, cfg.num_classes as u64, true, 1)],
    ));
    Ok(CostReport {
        model: cfg.name.clone(),
        resolution: Some((height, width)),
        root: CostNode::group("total", top),
    })
}
