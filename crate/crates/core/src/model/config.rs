use serde::{Deserialize, Serialize};

use crate::attention::AttentionToggles;
use crate::error::{Error, Result};
use crate::ffn::{Activation, FfnToggles, GatePlacement};

pub const VARIANT_NAMES: [&str; 3] = ["T", "S", "B"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
}

/// Ablation switches for the two attention paths and the two FFN gates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub local: bool,
    pub global: bool,
    pub spatial: bool,
    pub channel: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            local: true,
            global: true,
            spatial: true,
            channel: true,
        }
    }
}

impl Toggles {
    pub fn attention(&self) -> AttentionToggles {
        AttentionToggles {
            local: self.local,
            global: self.global,
        }
    }

    pub fn ffn(&self) -> FfnToggles {
        FfnToggles {
            spatial: self.spatial,
            channel: self.channel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub stem_width: usize,
    pub stages: Vec<StageConfig>,
    pub window: usize,
    pub global_tokens: usize,
    pub expansion: usize,
    pub reduction: usize,
    pub gate_activation: Activation,
    pub gate_placement: GatePlacement,
    pub toggles: Toggles,
    pub num_classes: usize,
}

fn stage(depth: usize, width: usize, heads: usize) -> StageConfig {
    StageConfig { depth, width, heads }
}

impl ModelConfig {
    fn base(name: &str, stem_width: usize, stages: [StageConfig; 3], global_tokens: usize) -> Self {
        ModelConfig {
            name: name.to_string(),
            stem_width,
            stages: stages.to_vec(),
            window: 7,
            global_tokens,
            expansion: 4,
            reduction: 4,
            gate_activation: Activation::Gelu,
            gate_placement: GatePlacement::Hidden,
            toggles: Toggles::default(),
            num_classes: 1000,
        }
    }

    pub fn tiny() -> Self {
        Self::base("T", 64, [stage(2, 64, 2), stage(6, 128, 4), stage(6, 256, 8)], 8)
    }

    pub fn small() -> Self {
        Self::base("S", 96, [stage(2, 96, 3), stage(6, 192, 6), stage(6, 384, 12)], 16)
    }

    pub fn base_variant() -> Self {
        Self::base("B", 128, [stage(3, 128, 4), stage(8, 256, 8), stage(6, 512, 16)], 24)
    }

    /// Small model used for end-to-end gradient checks at 32×32.
    pub fn reduced() -> Self {
        ModelConfig {
            window: 2,
            global_tokens: 2,
            num_classes: 10,
            ..Self::base("reduced", 8, [stage(1, 8, 2), stage(1, 16, 2), stage(1, 32, 4)], 2)
        }
    }

    /// Looks up `T`, `S`, `B` (case-insensitive, optionally `lightvit-` prefixed).
    pub fn variant(name: &str) -> Result<Self> {
        let lower = name.to_ascii_lowercase();
        let key = lower.strip_prefix("lightvit-").unwrap_or(&lower);
        match key {
            "t" | "tiny" => Ok(Self::tiny()),
            "s" | "small" => Ok(Self::small()),
            "b" | "base" => Ok(Self::base_variant()),
            _ => Err(Error::config(format!(
                "unknown variant {name:?}; valid names are {}",
                VARIANT_NAMES.join(", ")
            ))),
        }
    }

    /// One line per stage: `S2  stride=1/16  B=6  C=128  H=4  T=8`.
    pub fn stage_table(&self) -> String {
        let mut out = format!(
            "LightViT-{}  stem C={}  window S={}  global tokens T={}\n",
            self.name, self.stem_width, self.window, self.global_tokens
        );
        for (i, s) in self.stages.iter().enumerate() {
            out.push_str(&format!(
                "S{}  stride=1/{:<3} B={:<3} C={:<4} H={:<3} T={}\n",
                i + 1,
                8usize << i,
                s.depth,
                s.width,
                s.heads,
                self.global_tokens
            ));
        }
        out
    }

    /// Whether any block runs the global aggregate/broadcast path.
    pub fn uses_global(&self) -> bool {
        self.toggles.global && self.global_tokens > 0
    }

    /// Collects every violated constraint into one configuration error.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.stages.len() != 3 {
            problems.push(format!("expected 3 stages, got {}", self.stages.len()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.depth == 0 {
                problems.push(format!("stage {} has depth 0", i + 1));
            }
            if s.heads == 0 || s.width % s.heads != 0 {
                problems.push(format!("stage {}: heads {} do not divide width {}", i + 1, s.heads, s.width));
            }
        }
        for (i, w) in self.stages.windows(2).enumerate() {
            if w[1].width != 2 * w[0].width {
                problems.push(format!(
                    "stage {} width {} is not twice stage {} width {}",
                    i + 2,
                    w[1].width,
                    i + 1,
                    w[0].width
                ));
            }
        }
        if let Some(first) = self.stages.first() {
            if first.width != self.stem_width {
                problems.push(format!(
                    "stem width {} differs from stage 1 width {}",
                    self.stem_width, first.width
                ));
            }
        }
        if self.stem_width < 2 || self.stem_width % 2 != 0 {
            problems.push(format!("stem width {} must be even and positive", self.stem_width));
        }
        if self.window == 0 {
            problems.push("window size must be positive".to_string());
        }
        if self.expansion == 0 {
            problems.push("FFN expansion must be positive".to_string());
        }
        if self.num_classes == 0 {
            problems.push("class count must be positive".to_string());
        }
        if self.toggles.ffn().any() {
            for (i, s) in self.stages.iter().enumerate() {
                let gate_width = match self.gate_placement {
                    GatePlacement::Hidden => s.width * self.expansion,
                    GatePlacement::Input => s.width,
                };
                if self.reduction == 0 || gate_width % self.reduction != 0 {
                    problems.push(format!(
                        "stage {}: reduction {} does not divide gate width {gate_width}",
                        i + 1,
                        self.reduction
                    ));
                }
            }
        }
        if !self.toggles.local && !self.uses_global() {
            problems.push("local attention is off and there is no global path (T = 0 or global off)".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(format!("invalid model config: {}", problems.join("; "))))
        }
    }

    /// Canonical TOML text; the weight-file digest is computed over it.
    pub fn canonical_text(&self) -> String {
        toml::to_string(self).expect("model config serializes to TOML")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("cannot parse model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Input extents must reach stride 32.
    pub fn check_resolution(&self, height: usize, width: usize) -> Result<()> {
        if height == 0 || width == 0 || height % 32 != 0 || width % 32 != 0 {
            return Err(Error::config(format!(
                "input {height}×{width} must be a positive multiple of 32 (stride of the last stage)"
            )));
        }
        for (i, stride) in [8, 16, 32].into_iter().enumerate() {
            let (h, w) = (height / stride, width / stride);
            let single = h <= self.window && w <= self.window;
            if self.toggles.local && !single && (h % self.window != 0 || w % self.window != 0) {
                return Err(Error::config(format!(
                    "stage {} grid {h}×{w} is not divisible by window size S={}; use an input size \
                     whose /8, /16 and /32 grids are multiples of S (e.g. {})",
                    i + 1,
                    self.window,
                    32 * self.window
                )));
            }
        }
        Ok(())
    }
}
