//! Model hyperparameters and named presets.

use serde::{Deserialize, Serialize};

use crate::attention::ScaleMode;
use crate::error::{config_err, geometry_err, Result};

pub const NUM_STAGES: usize = 4;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Spatial window side used by window attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowSize {
    /// Non-overlapping `side x side` windows.
    Side(usize),
    /// One window covering the whole stage grid (plain global attention).
    Global,
}

/// Arrangement of the two sub-blocks inside a dual block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BlockLayout {
    #[default]
    WindowFirst,
    ChannelFirst,
    /// Both sub-blocks read the same input; their residual updates are summed.
    Parallel,
}

/// Full hyperparameter record of a backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub in_chans: usize,
    pub base_dim: usize,
    /// Dual blocks per stage.
    pub depths: [usize; NUM_STAGES],
    /// `N_h = N_g` per stage.
    pub heads: [usize; NUM_STAGES],
    /// `C_h = C_g`.
    pub head_dim: usize,
    pub window: WindowSize,
    pub ffn_ratio: usize,
    pub ffn_enabled: bool,
    /// Depthwise 3x3 positional convolution before each sub-layer.
    #[serde(default = "default_true")]
    pub cpe_enabled: bool,
    pub drop_path_rate: f64,
    pub num_classes: usize,
    pub scale_mode: ScaleMode,
    #[serde(default)]
    pub layout: BlockLayout,
    pub patch_kernels: [usize; NUM_STAGES],
    pub patch_strides: [usize; NUM_STAGES],
    pub patch_pads: [usize; NUM_STAGES],
}

fn default_true() -> bool {
    true
}

/// Resolved geometry of one stage for a given input size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageGeometry {
    pub h: usize,
    pub w: usize,
    pub dim: usize,
    pub in_dim: usize,
    /// Window side actually used at this stage.
    pub window: usize,
}

impl StageGeometry {
    pub fn tokens(&self) -> usize {
        self.h * self.w
    }
}

pub const PRESETS: &[&str] = &[
    "tiny",
    "small",
    "base",
    "large",
    "huge",
    "giant",
    "tiny_no_ffn",
    "small_no_ffn",
    "base_no_ffn",
    "micro",
    "micro_grad",
];

impl ModelConfig {
    fn family(name: &str, base_dim: usize, depths: [usize; 4], drop_path_rate: f64) -> Self {
        let heads = [0, 1, 2, 3].map(|s| (base_dim << s) / 32);
        Self {
            name: name.to_string(),
            in_chans: 3,
            base_dim,
            depths,
            heads,
            head_dim: 32,
            window: WindowSize::Side(7),
            ffn_ratio: 4,
            ffn_enabled: true,
            cpe_enabled: true,
            drop_path_rate,
            num_classes: 1000,
            scale_mode: ScaleMode::InvSqrtCg,
            layout: BlockLayout::WindowFirst,
            patch_kernels: [7, 2, 2, 2],
            patch_strides: [4, 2, 2, 2],
            patch_pads: [3, 0, 0, 0],
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        let no_ffn = |mut c: Self, depths| {
            c.name = name.to_string();
            c.depths = depths;
            c.ffn_enabled = false;
            c
        };
        let scaled = |mut c: Self| {
            c.scale_mode = ScaleMode::InvSqrtP;
            c
        };
        let cfg = match name {
            "tiny" => Self::family(name, 96, [1, 1, 3, 1], 0.1),
            "small" => Self::family(name, 96, [1, 1, 9, 1], 0.2),
            "base" => Self::family(name, 128, [1, 1, 9, 1], 0.4),
            "large" => scaled(Self::family(name, 192, [1, 1, 9, 1], 0.4)),
            "huge" => scaled(Self::family(name, 256, [1, 1, 9, 1], 0.4)),
            "giant" => scaled(Self::family(name, 384, [1, 1, 12, 3], 0.4)),
            "tiny_no_ffn" => no_ffn(Self::preset("tiny")?, [2, 2, 11, 2]),
            "small_no_ffn" => no_ffn(Self::preset("small")?, [2, 2, 28, 2]),
            "base_no_ffn" => no_ffn(Self::preset("base")?, [2, 2, 28, 2]),
            // desk-scale model for the toy dataset at 32x32
            "micro" => {
                let mut c = Self::family(name, 32, [1, 1, 1, 1], 0.1);
                c.window = WindowSize::Side(4);
                c.num_classes = 4;
                c
            }
            // gradient-check model for 8x8 inputs
            "micro_grad" => {
                let mut c = Self::family(name, 16, [1, 1, 1, 1], 0.0);
                c.head_dim = 8;
                c.heads = [2, 4, 8, 16];
                c.window = WindowSize::Side(2);
                c.num_classes = 3;
                c.patch_kernels = [3, 2, 1, 1];
                c.patch_strides = [2, 2, 1, 1];
                c.patch_pads = [1, 0, 0, 0];
                c
            }
            _ => {
                return Err(config_err!(
                    "unknown preset '{name}' (known: {})",
                    PRESETS.join(", ")
                ))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Preset with its window adapted to `resolution`.
    ///
    /// When the configured window does not tile every stage grid and the
    /// resolution is a multiple of 32, the window becomes the last stage's
    /// grid side (12 at 384), so every stage is tiled exactly.
    pub fn preset_for_resolution(name: &str, resolution: usize) -> Result<Self> {
        let mut cfg = Self::preset(name)?;
        if cfg.stage_geometry(resolution, resolution).is_err() && resolution.is_multiple_of(32) {
            let mut adapted = cfg.clone();
            adapted.window = WindowSize::Side(resolution / 32);
            if adapted.stage_geometry(resolution, resolution).is_ok() {
                cfg = adapted;
            }
        }
        Ok(cfg)
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        self.base_dim << stage
    }

    pub fn total_dual_blocks(&self) -> usize {
        self.depths.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_chans == 0 || self.base_dim == 0 || self.head_dim == 0 || self.num_classes == 0 {
            return Err(config_err!(
                "channel counts and num_classes must be positive"
            ));
        }
        for s in 0..NUM_STAGES {
            let dim = self.stage_dim(s);
            if self.heads[s] * self.head_dim != dim {
                return Err(config_err!(
                    "stage {s}: dim {dim} != heads {} x head_dim {}",
                    self.heads[s],
                    self.head_dim
                ));
            }
            if self.patch_kernels[s] == 0 || self.patch_strides[s] == 0 {
                return Err(config_err!(
                    "stage {s}: patch kernel and stride must be positive"
                ));
            }
        }
        if self.ffn_enabled && self.ffn_ratio == 0 {
            return Err(config_err!(
                "ffn_ratio must be positive when FFNs are enabled"
            ));
        }
        if let WindowSize::Side(0) = self.window {
            return Err(config_err!("window side must be positive"));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(config_err!(
                "drop_path_rate must lie in [0, 1), got {}",
                self.drop_path_rate
            ));
        }
        Ok(())
    }

    /// Stage resolutions and window sides for an `h x w` input.
    ///
    /// A stage grid no larger than the window is covered by a single window;
    /// otherwise the window must tile the grid exactly.
    pub fn stage_geometry(&self, h: usize, w: usize) -> Result<Vec<StageGeometry>> {
        self.validate()?;
        let (mut gh, mut gw) = (h, w);
        let mut in_dim = self.in_chans;
        let mut out = Vec::with_capacity(NUM_STAGES);
        for s in 0..NUM_STAGES {
            let (k, st, p) = (
                self.patch_kernels[s],
                self.patch_strides[s],
                self.patch_pads[s],
            );
            if gh + 2 * p < k || gw + 2 * p < k {
                return Err(geometry_err!(
                    "stage {s}: {gh}x{gw} input is smaller than the {k}x{k} patch kernel"
                ));
            }
            gh = (gh + 2 * p - k) / st + 1;
            gw = (gw + 2 * p - k) / st + 1;
            let window = match self.window {
                WindowSize::Global => {
                    if gh != gw {
                        return Err(geometry_err!(
                            "stage {s}: global window needs a square grid, got {gh}x{gw}"
                        ));
                    }
                    gh
                }
                WindowSize::Side(side) if gh <= side && gw <= side => {
                    if gh != gw {
                        return Err(geometry_err!(
                            "stage {s}: grid {gh}x{gw} is smaller than window {side} and not square"
                        ));
                    }
                    gh
                }
                WindowSize::Side(side) => {
                    if gh % side != 0 || gw % side != 0 {
                        return Err(geometry_err!(
                            "stage {s}: grid {gh}x{gw} (input {h}x{w}) is not divisible by window {side}"
                        ));
                    }
                    side
                }
            };
            let dim = self.stage_dim(s);
            out.push(StageGeometry {
                h: gh,
                w: gw,
                dim,
                in_dim,
                window,
            });
            in_dim = dim;
        }
        Ok(out)
    }

    /// Drop probability per sub-block, in depth order, ramping linearly from
    /// 0 to `drop_path_rate`.
    pub fn drop_path_schedule(&self) -> Vec<f64> {
        let n = 2 * self.total_dual_blocks();
        if n <= 1 {
            return vec![0.0; n];
        }
        (0..n)
            .map(|i| self.drop_path_rate * i as f64 / (n - 1) as f64)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_matches_reference_layout() {
        let c = ModelConfig::preset("tiny").unwrap();
        assert_eq!(c.base_dim, 96);
        assert_eq!(c.depths, [1, 1, 3, 1]);
        assert_eq!(c.heads, [3, 6, 12, 24]);
        let g = c.stage_geometry(224, 224).unwrap();
        let sizes: Vec<_> = g.iter().map(|s| (s.h, s.dim, s.window)).collect();
        assert_eq!(
            sizes,
            vec![(56, 96, 7), (28, 192, 7), (14, 384, 7), (7, 768, 7)]
        );
    }

    #[test]
    fn presets_are_consistent() {
        for name in PRESETS {
            let c = ModelConfig::preset(name).unwrap();
            for s in 0..4 {
                assert_eq!(c.heads[s] * c.head_dim, c.stage_dim(s), "{name}");
            }
        }
        assert_eq!(ModelConfig::preset("base").unwrap().heads, [4, 8, 16, 32]);
        assert_eq!(ModelConfig::preset("giant").unwrap().depths, [1, 1, 12, 3]);
        assert_eq!(
            ModelConfig::preset("giant").unwrap().heads,
            [12, 24, 48, 96]
        );
        assert_eq!(
            ModelConfig::preset("tiny_no_ffn").unwrap().depths,
            [2, 2, 11, 2]
        );
        assert_eq!(
            ModelConfig::preset("base_no_ffn").unwrap().depths,
            [2, 2, 28, 2]
        );
        assert_eq!(
            ModelConfig::preset("large").unwrap().scale_mode,
            ScaleMode::InvSqrtP
        );
        assert!(ModelConfig::preset("nano").is_err());
    }

    #[test]
    fn window_adapts_at_384() {
        assert!(ModelConfig::preset("base")
            .unwrap()
            .stage_geometry(384, 384)
            .is_err());
        let c = ModelConfig::preset_for_resolution("base", 384).unwrap();
        assert_eq!(c.window, WindowSize::Side(12));
        let g = c.stage_geometry(384, 384).unwrap();
        assert_eq!(
            g.iter().map(|s| s.h).collect::<Vec<_>>(),
            vec![96, 48, 24, 12]
        );
        assert_eq!(
            ModelConfig::preset_for_resolution("tiny", 224)
                .unwrap()
                .window,
            WindowSize::Side(7)
        );
        assert!(ModelConfig::preset_for_resolution("tiny", 225)
            .unwrap()
            .stage_geometry(225, 225)
            .is_err());
    }

    #[test]
    fn micro_windows_clip_to_small_grids() {
        let c = ModelConfig::preset("micro").unwrap();
        let g = c.stage_geometry(32, 32).unwrap();
        assert_eq!(
            g.iter().map(|s| (s.h, s.window)).collect::<Vec<_>>(),
            vec![(8, 4), (4, 4), (2, 2), (1, 1)]
        );
        let g = ModelConfig::preset("micro_grad")
            .unwrap()
            .stage_geometry(8, 8)
            .unwrap();
        assert_eq!(
            g.iter().map(|s| (s.h, s.window)).collect::<Vec<_>>(),
            vec![(4, 2), (2, 2), (2, 2), (2, 2)]
        );
    }

    #[test]
    fn drop_path_ramp() {
        let c = ModelConfig::preset("tiny").unwrap();
        let r = c.drop_path_schedule();
        assert_eq!(r.len(), 12);
        assert_eq!(r[0], 0.0);
        assert!((r[11] - 0.1).abs() < 1e-15);
        assert!(r.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = ModelConfig::preset("tiny").unwrap();
        c.heads[2] = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::preset("tiny").unwrap();
        c.drop_path_rate = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let c = ModelConfig::preset("large").unwrap();
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"scale_mode\":\"inv_sqrt_p\""));
        assert_eq!(serde_json::from_str::<ModelConfig>(&s).unwrap(), c);
    }
}
