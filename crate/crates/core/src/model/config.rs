use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{BehaviorEvent, Mode, NUM_CHANNELS};

/// Per-frame width of a pose row: position + quaternion.
pub const POSE_DIM: usize = 7;

/// How the command window is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    /// x̂₀-predicting denoiser driven by the reverse diffusion loop.
    Diffusion,
    /// One forward pass; learned window queries regress the commands.
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Past frames (M).
    pub history: usize,
    /// Future frames (N).
    pub horizon: usize,
    /// Command channels (j).
    pub channels: usize,
    pub diffusion_steps: usize,
    pub behavior_classes: usize,
    pub mode_classes: usize,
    pub cond_drop_prob: f64,
    pub guidance_scale: f64,
    pub use_pose_tokens: bool,
    pub use_command_tokens: bool,
    /// Dropout applied to the token sequence after positional encoding.
    pub pe_dropout: f64,
    pub head: Head,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 128,
            ff_dim: 256,
            heads: 2,
            layers: 2,
            history: 15,
            horizon: 25,
            channels: NUM_CHANNELS,
            diffusion_steps: 8,
            behavior_classes: BehaviorEvent::COUNT,
            mode_classes: Mode::COUNT,
            cond_drop_prob: 0.1,
            guidance_scale: 1.0,
            use_pose_tokens: true,
            use_command_tokens: true,
            pe_dropout: 0.0,
            head: Head::Diffusion,
        }
    }
}

impl ModelConfig {
    /// Small configuration used for gradient checks.
    pub fn reduced() -> Self {
        ModelConfig {
            latent_dim: 8,
            ff_dim: 16,
            heads: 1,
            layers: 1,
            history: 3,
            horizon: 4,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.latent_dim,
            self.ff_dim,
            self.heads,
            self.layers,
            self.history,
            self.horizon,
            self.channels,
            self.diffusion_steps,
            self.behavior_classes,
            self.mode_classes,
        ];
        if dims.contains(&0) {
            return Err(Error::config("model dimensions must be positive"));
        }
        if !self.latent_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "latent_dim {} not divisible by heads {}",
                self.latent_dim, self.heads
            )));
        }
        if self.behavior_classes > BehaviorEvent::COUNT || self.mode_classes != Mode::COUNT {
            return Err(Error::config("unsupported class counts"));
        }
        if !(0.0..1.0).contains(&self.cond_drop_prob) || !(0.0..1.0).contains(&self.pe_dropout) {
            return Err(Error::config("dropout probabilities must lie in [0, 1)"));
        }
        if self.channels != NUM_CHANNELS {
            return Err(Error::config(format!("command channels must be {NUM_CHANNELS}")));
        }
        Ok(())
    }

    pub fn is_diffusion(&self) -> bool {
        self.head == Head::Diffusion
    }

    /// Token layout of one sequence.
    pub fn layout(&self) -> Layout {
        let pose = if self.use_pose_tokens { self.history } else { 0 };
        let cmd = if self.use_command_tokens { self.history } else { 0 };
        let step = usize::from(self.is_diffusion());
        let pose_at = 0;
        let cmd_at = pose_at + pose;
        let step_at = cmd_at + cmd;
        let query_at = step_at + step;
        let window_at = query_at + 2;
        Layout {
            pose_at,
            pose,
            cmd_at,
            cmd,
            step_at,
            step,
            query_at,
            window_at,
            window: self.horizon,
            len: window_at + self.horizon,
        }
    }
}

/// Positions of each token group within a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub pose_at: usize,
    pub pose: usize,
    pub cmd_at: usize,
    pub cmd: usize,
    pub step_at: usize,
    pub step: usize,
    /// Behavior query at `query_at`, mode query at `query_at + 1`.
    pub query_at: usize,
    pub window_at: usize,
    pub window: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Ours,
    BaselineTransformer,
    NoHuman,
    NoCommands,
    WithPeDropout,
    Window25,
    Window50,
    Window75,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Ours,
        Variant::BaselineTransformer,
        Variant::NoHuman,
        Variant::NoCommands,
        Variant::WithPeDropout,
        Variant::Window25,
        Variant::Window50,
        Variant::Window75,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Ours => "ours",
            Variant::BaselineTransformer => "baseline_transformer",
            Variant::NoHuman => "no_human",
            Variant::NoCommands => "no_commands",
            Variant::WithPeDropout => "with_pe_dropout",
            Variant::Window25 => "window_25",
            Variant::Window50 => "window_50",
            Variant::Window75 => "window_75",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| Error::config(format!("unknown variant tag {s:?}")))
    }
}

/// Rewires `base` for an ablation variant. Only the wiring changes; every
/// variant trains through the same loop.
pub fn make_variant(variant: Variant, base: &ModelConfig) -> ModelConfig {
    let mut cfg = base.clone();
    match variant {
        Variant::Ours | Variant::Window25 => cfg.horizon = 25,
        Variant::Window50 => cfg.horizon = 50,
        Variant::Window75 => cfg.horizon = 75,
        Variant::NoHuman => cfg.use_pose_tokens = false,
        Variant::NoCommands => cfg.use_command_tokens = false,
        Variant::WithPeDropout => cfg.pe_dropout = 0.1,
        Variant::BaselineTransformer => {
            cfg.head = Head::Direct;
            cfg.use_command_tokens = false;
        }
    }
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_counts() {
        let cfg = ModelConfig::default();
        let l = cfg.layout();
        assert_eq!(l.len, 15 + 15 + 1 + 2 + 25);
        assert_eq!(l.window_at, 33);

        let base = make_variant(Variant::BaselineTransformer, &cfg).layout();
        assert_eq!(base.step, 0);
        assert_eq!(base.cmd, 0);
        assert_eq!(base.len, 15 + 2 + 25);

        assert_eq!(make_variant(Variant::NoHuman, &cfg).layout().pose, 0);
        assert_eq!(make_variant(Variant::Window75, &cfg).horizon, 75);
    }

    #[test]
    fn variant_tags_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.tag().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
    }

    #[test]
    fn validation() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::reduced().validate().unwrap();
        let bad = ModelConfig { latent_dim: 10, heads: 3, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
    }
}
