use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the fused attention map modulates a decoder mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModulationMode {
    /// `M' = A ⊙ M`
    Strict,
    /// `M' = (1 + A) ⊙ M`
    Residual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TcmaConfig {
    pub enabled: bool,
    /// Patch sides used for the three partition scales.
    pub patch_sizes: Vec<usize>,
    /// Channels of the embedded input-image features.
    pub image_channels: usize,
    /// Channels of the embedded Sobel edge features.
    pub edge_channels: usize,
    /// Hidden width of the dynamic-weight MLP.
    pub hidden: usize,
    pub mode: ModulationMode,
}

impl Default for TcmaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            patch_sizes: vec![2, 4, 8],
            image_channels: 8,
            edge_channels: 8,
            hidden: 32,
            mode: ModulationMode::Residual,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Square input side.
    pub input_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Channels after patch embedding; doubled at every merge.
    pub embed_dim: usize,
    pub patch_size: usize,
    pub encoder_depths: Vec<usize>,
    pub decoder_depths: Vec<usize>,
    pub state_size: usize,
    /// Rank of the Δ projection; 0 selects ceil(C / 16).
    pub dt_rank: usize,
    pub se_reduction: usize,
    pub encf: bool,
    pub tcma: TcmaConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 64×64 input, three stages of depth 2, C₀ = 32, N = 8.
    pub fn desk() -> Self {
        Self {
            input_size: 64,
            in_channels: 3,
            num_classes: 2,
            embed_dim: 32,
            patch_size: 4,
            encoder_depths: vec![2, 2, 2],
            decoder_depths: vec![2, 2, 2],
            state_size: 8,
            dt_rank: 0,
            se_reduction: 4,
            encf: true,
            tcma: TcmaConfig::default(),
        }
    }

    /// 256×256 input with a VMamba-S-like width; only practical on large hardware.
    pub fn paper_scale() -> Self {
        Self {
            input_size: 256,
            embed_dim: 96,
            encoder_depths: vec![2, 2, 9, 2],
            decoder_depths: vec![2, 9, 2, 2],
            state_size: 16,
            tcma: TcmaConfig {
                image_channels: 16,
                edge_channels: 8,
                hidden: 64,
                ..TcmaConfig::default()
            },
            ..Self::desk()
        }
    }

    pub fn num_stages(&self) -> usize {
        self.encoder_depths.len()
    }

    /// Channels of encoder stage `i` (decoder stage `S-1-i` shares them).
    pub fn stage_channels(&self, i: usize) -> usize {
        self.embed_dim << i
    }

    /// Spatial side of encoder stage `i`.
    pub fn stage_side(&self, i: usize) -> usize {
        (self.input_size / self.patch_size) >> i
    }

    /// Encoder stage index whose resolution decoder stage `i` works at.
    pub fn decoder_level(&self, i: usize) -> usize {
        self.num_stages() - 1 - i
    }

    pub fn effective_dt_rank(&self, channels: usize) -> usize {
        if self.dt_rank > 0 {
            self.dt_rank
        } else {
            channels.div_ceil(16)
        }
    }

    /// Whether decoder stage `i` carries a TCMA unit: TCMA must be enabled and
    /// every patch size must tile the stage grid.
    pub fn tcma_at(&self, i: usize) -> bool {
        let side = self.stage_side(self.decoder_level(i));
        self.tcma.enabled && self.tcma.patch_sizes.iter().all(|&d| d > 0 && side.is_multiple_of(d))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let s = self.num_stages();
        if s == 0 {
            return bad("at least one stage is required".into());
        }
        if self.decoder_depths.len() != s {
            return bad(format!(
                "{} encoder stages but {} decoder stages",
                s,
                self.decoder_depths.len()
            ));
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2 (background + one lesion class)".into());
        }
        if self.num_classes > 255 {
            return bad("num_classes must fit an 8-bit mask".into());
        }
        if self.embed_dim == 0 || self.state_size == 0 || self.in_channels == 0 {
            return bad("embed_dim, state_size and in_channels must be positive".into());
        }
        if self.patch_size == 0 {
            return bad("patch_size must be positive".into());
        }
        let down = self.patch_size << (s - 1);
        if self.input_size == 0 || !self.input_size.is_multiple_of(down) {
            return bad(format!(
                "input_size {} not divisible by total downsampling {down}",
                self.input_size
            ));
        }
        if self.encf {
            for i in 0..s {
                let c = self.stage_channels(i);
                if self.se_reduction == 0 || !c.is_multiple_of(self.se_reduction) {
                    return bad(format!(
                        "se_reduction {} does not divide stage {i} channels {c}",
                        self.se_reduction
                    ));
                }
            }
        }
        if self.tcma.enabled {
            if self.tcma.patch_sizes.is_empty() || self.tcma.patch_sizes.contains(&0) {
                return bad("tcma.patch_sizes must be non-empty and positive".into());
            }
            if self.tcma.image_channels == 0 || self.tcma.edge_channels == 0 || self.tcma.hidden == 0 {
                return bad("tcma channel counts must be positive".into());
            }
            if !(0..s).any(|i| self.tcma_at(i)) {
                return bad(format!(
                    "no decoder stage grid is divisible by every TCMA patch size {:?}",
                    self.tcma.patch_sizes
                ));
            }
        }
        Ok(())
    }
}
