//! Parameter and multiply-accumulate accounting, the closed-form attention
//! cost model, global-token sweeps and a per-stage timing harness.
//!
//! All FLOP figures are multiply-accumulate counts. They match
//! [`crate::tensor::counter`] readings of a real forward pass exactly.

mod bench;
mod flops;

pub use bench::{bench_stage_throughput, BenchOptions, StageTiming};
pub use flops::{attention_cost, cost_of_config, AttentionCost};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::Module;
use crate::tensor::Element;

/// One node of a cost tree. Group totals are the sums of their children.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostNode {
    pub name: String,
    pub params: u64,
    /// Multiply-accumulates.
    pub flops: u64,
    /// Element-wise work (softmax, normalization, activations, gates) kept
    /// out of the headline count.
    pub aux: u64,
    pub children: Vec<CostNode>,
}

impl CostNode {
    pub fn leaf(name: impl Into<String>, params: u64, flops: u64, aux: u64) -> Self {
        CostNode {
            name: name.into(),
            params,
            flops,
            aux,
            children: Vec::new(),
        }
    }

    pub fn group(name: impl Into<String>, children: Vec<CostNode>) -> Self {
        CostNode {
            name: name.into(),
            params: children.iter().map(|c| c.params).sum(),
            flops: children.iter().map(|c| c.flops).sum(),
            aux: children.iter().map(|c| c.aux).sum(),
            children,
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    /// Child lookup by dotted path relative to this node.
    pub fn find(&self, path: &str) -> Option<&CostNode> {
        path.split('.')
            .try_fold(self, |node, part| node.children.iter().find(|c| c.name == part))
    }

    /// `(dotted path, node)` pairs in pre-order, excluding `self`.
    pub fn walk(&self) -> Vec<(String, &CostNode)> {
        let mut out = Vec::new();
        fn go<'a>(prefix: &str, n: &'a CostNode, out: &mut Vec<(String, &'a CostNode)>) {
            for c in &n.children {
                let path = if prefix.is_empty() {
                    c.name.clone()
                } else {
                    format!("{prefix}.{}", c.name)
                };
                out.push((path.clone(), c));
                go(&path, c, out);
            }
        }
        go("", self, &mut out);
        out
    }

    pub fn leaves(&self) -> Vec<(String, &CostNode)> {
        self.walk().into_iter().filter(|(_, n)| n.is_leaf()).collect()
    }

    /// Whether every group equals the sum of its children.
    pub fn is_consistent(&self) -> bool {
        if self.is_leaf() {
            return true;
        }
        self.params == self.children.iter().map(|c| c.params).sum::<u64>()
            && self.flops == self.children.iter().map(|c| c.flops).sum::<u64>()
            && self.aux == self.children.iter().map(|c| c.aux).sum::<u64>()
            && self.children.iter().all(CostNode::is_consistent)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub model: String,
    /// `None` for parameter-only reports.
    pub resolution: Option<(usize, usize)>,
    pub root: CostNode,
}

/// Names of the attention-core leaves (logits and weighted sums).
pub const ATTENTION_CORE_LEAVES: [&str; 3] = ["local_core", "aggregate_core", "broadcast_core"];

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.root.params
    }

    pub fn total_flops(&self) -> u64 {
        self.root.flops
    }

    /// Sum over leaves whose own name is in `names`.
    pub fn leaf_flops(&self, names: &[&str]) -> u64 {
        self.root
            .leaves()
            .iter()
            .filter(|(_, n)| names.contains(&n.name.as_str()))
            .map(|(_, n)| n.flops)
            .sum()
    }

    /// Query-key and weight-value products of every attention path.
    pub fn attention_core_flops(&self) -> u64 {
        self.leaf_flops(&ATTENTION_CORE_LEAVES)
    }

    /// `(segment, flops)` for stem, each stage and head, in execution order.
    /// Segments with no work (the token embedding) are omitted; the rest sum
    /// to the total.
    pub fn segment_flops(&self) -> Vec<(String, u64)> {
        self.root
            .children
            .iter()
            .filter(|c| c.name != "global_tokens")
            .map(|c| (c.name.clone(), c.flops))
            .collect()
    }

    /// Leaf census: per leaf name, (occurrences, params, flops).
    pub fn census(&self) -> BTreeMap<String, (usize, u64, u64)> {
        let mut out: BTreeMap<String, (usize, u64, u64)> = BTreeMap::new();
        for (_, n) in self.root.leaves() {
            let e = out.entry(n.name.clone()).or_default();
            e.0 += 1;
            e.1 += n.params;
            e.2 += n.flops;
        }
        out
    }

    /// Human-readable table down to `depth` levels (0 = unlimited).
    pub fn to_table(&self, depth: usize) -> String {
        let mut s = String::new();
        let res = match self.resolution {
            Some((h, w)) => format!(" at {h}×{w}"),
            None => String::new(),
        };
        let _ = writeln!(s, "LightViT-{}{res}", self.model);
        let _ = writeln!(s, "{:<44} {:>12} {:>16} {:>14}", "module", "params", "MACs", "aux ops");
        for (path, node) in self.root.walk() {
            let level = path.matches('.').count();
            if depth != 0 && level >= depth {
                continue;
            }
            let label = format!("{}{}", "  ".repeat(level), node.name);
            let _ = writeln!(
                s,
                "{:<44} {:>12} {:>16} {:>14}",
                label, node.params, node.flops, node.aux
            );
        }
        let _ = writeln!(
            s,
            "{:<44} {:>12} {:>16} {:>14}",
            "total", self.root.params, self.root.flops, self.root.aux
        );
        let _ = writeln!(
            s,
            "params {:.3} M, MACs {:.4} G",
            self.root.params as f64 / 1e6,
            self.root.flops as f64 / 1e9
        );
        s
    }

    /// Line-oriented `key = value` dump in tree order, for golden files.
    pub fn to_structured(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model = {}", self.model);
        match self.resolution {
            Some((h, w)) => {
                let _ = writeln!(s, "resolution = {h}x{w}");
            }
            None => {
                let _ = writeln!(s, "resolution = none");
            }
        }
        let _ = writeln!(s, "total.params = {}", self.root.params);
        let _ = writeln!(s, "total.flops = {}", self.root.flops);
        let _ = writeln!(s, "total.aux = {}", self.root.aux);
        for (path, n) in self.root.walk() {
            let _ = writeln!(s, "{path}.params = {}", n.params);
            let _ = writeln!(s, "{path}.flops = {}", n.flops);
            let _ = writeln!(s, "{path}.aux = {}", n.aux);
        }
        s
    }
}

/// Exact element census of the model's tensors, grouped by name path.
pub fn count_params<E: Element>(model: &Model<E>) -> CostReport {
    let mut named = Vec::new();
    model.visit("", &mut |n, t| named.push((n.to_string(), t.numel() as u64)));
    CostReport {
        model: model.config.name.clone(),
        resolution: None,
        root: tree_from_paths("total", &named),
    }
}

fn tree_from_paths(name: &str, entries: &[(String, u64)]) -> CostNode {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<(String, u64)>> = BTreeMap::new();
    let mut leaves: Vec<CostNode> = Vec::new();
    for (path, n) in entries {
        match path.split_once('.') {
            Some((head, rest)) => {
                if !groups.contains_key(head) {
                    order.push(head.to_string());
                }
                groups.entry(head.to_string()).or_default().push((rest.to_string(), *n));
            }
            None => {
                order.push(path.clone());
                leaves.push(CostNode::leaf(path.clone(), *n, 0, 0));
            }
        }
    }
    let children = order
        .into_iter()
        .map(|key| match groups.get(&key) {
            Some(sub) => tree_from_paths(&key, sub),
            None => leaves.iter().find(|l| l.name == key).cloned().expect("leaf recorded"),
        })
        .collect();
    CostNode::group(name, children)
}

/// Analytical parameter and MAC tree for one forward pass at `height×width`.
pub fn count_flops<E: Element>(model: &Model<E>, height: usize, width: usize) -> Result<CostReport> {
    cost_of_config(&model.config, height, width)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepRow {
    pub tokens: usize,
    pub params: u64,
    pub flops: u64,
}

/// Model totals with the global-token count replaced by each entry of `tokens`.
pub fn global_token_overhead(
    config: &ModelConfig,
    tokens: &[usize],
    height: usize,
    width: usize,
) -> Result<Vec<SweepRow>> {
    tokens
        .iter()
        .map(|&t| {
            let cfg = ModelConfig {
                global_tokens: t,
                ..config.clone()
            };
            let r = cost_of_config(&cfg, height, width)?;
            Ok(SweepRow {
                tokens: t,
                params: r.total_params(),
                flops: r.total_flops(),
            })
        })
        .collect()
}

/// Published parameter (millions) and MAC (billions) budgets at 224×224.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Budget {
    pub params_m: f64,
    pub flops_g: f64,
}

pub fn published_budget(variant: &str) -> Option<Budget> {
    match variant {
        "T" => Some(Budget { params_m: 9.4, flops_g: 0.73 }),
        "S" => Some(Budget { params_m: 19.2, flops_g: 1.7 }),
        "B" => Some(Budget { params_m: 35.2, flops_g: 3.9 }),
        _ => None,
    }
}

/// Relative deviations `(params, flops)` of a report from a budget.
pub fn deviation(report: &CostReport, budget: Budget) -> (f64, f64) {
    (
        report.total_params() as f64 / (budget.params_m * 1e6) - 1.0,
        report.total_flops() as f64 / (budget.flops_g * 1e9) - 1.0,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionRow {
    pub expansion: usize,
    /// Per variant: (name, params deviation, flops deviation).
    pub deviations: Vec<(String, f64, f64)>,
    /// Largest absolute deviation over all variants and both columns.
    pub worst: f64,
}

/// Budget deviation of the named variants at 224 for each FFN expansion
/// ratio, and the ratio with the smallest worst-case deviation.
pub fn expansion_sweep(expansions: &[usize]) -> Result<(Vec<ExpansionRow>, usize)> {
    let mut rows = Vec::new();
    for &alpha in expansions {
        let mut devs = Vec::new();
        for name in crate::model::VARIANT_NAMES {
            let cfg = ModelConfig {
                expansion: alpha,
                ..ModelConfig::variant(name)?
            };
            let r = cost_of_config(&cfg, 224, 224)?;
            let (p, f) = deviation(&r, published_budget(name).expect("named variant"));
            devs.push((name.to_string(), p, f));
        }
        let worst = devs.iter().map(|(_, p, f)| p.abs().max(f.abs())).fold(0.0, f64::max);
        rows.push(ExpansionRow {
            expansion: alpha,
            deviations: devs,
            worst,
        });
    }
    let best = rows
        .iter()
        .min_by(|a, b| a.worst.total_cmp(&b.worst))
        .map(|r| r.expansion)
        .ok_or_else(|| Error::config("expansion sweep needs at least one ratio"))?;
    Ok((rows, best))
}
