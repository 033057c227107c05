//! Ancestral sampling with classifier-free guidance on the command history,
//! plus the [`CommandModel`] interface consumed by the controller.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::{ModelConfig, Variant, POSE_DIM};
use super::net::{BatchInput, Network};
use super::params::ParamStore;
use super::schedule::DiffusionSchedule;
use crate::dataset::NormStats;
use crate::error::{Error, Result};
use crate::sim::NUM_CHANNELS;

/// Clean command window plus discrete-head logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    /// `horizon × channels`, row-major.
    pub x0: Vec<f64>,
    pub behavior_logits: Vec<f64>,
    pub mode_logits: Vec<f64>,
}

impl ModelOutput {
    pub fn frame(&self, i: usize) -> &[f64] {
        &self.x0[i * NUM_CHANNELS..(i + 1) * NUM_CHANNELS]
    }

    pub fn horizon(&self) -> usize {
        self.x0.len() / NUM_CHANNELS
    }
}

/// One denoiser evaluation at step `t`.
#[derive(Debug, Clone)]
pub struct Denoised {
    pub cond: Vec<f64>,
    /// `None` when the model has no maskable condition (then `cond` is used).
    pub uncond: Option<Vec<f64>>,
    pub behavior_logits: Vec<f64>,
    pub mode_logits: Vec<f64>,
}

pub trait Denoiser {
    fn denoise(&mut self, x_t: &[f64], t: usize) -> Result<Denoised>;
}

impl<F: FnMut(&[f64], usize) -> Result<Denoised>> Denoiser for F {
    fn denoise(&mut self, x_t: &[f64], t: usize) -> Result<Denoised> {
        self(x_t, t)
    }
}

/// Runs `x_T ~ N(0, I)` down to `t = 1`, re-noising through the posterior
/// `q(x_{t-1} | x_t, x̂₀)` between steps. `noise_scale = 0` removes all
/// sampling noise (deterministic rollouts).
pub fn reverse_diffusion<D: Denoiser>(
    schedule: &DiffusionSchedule,
    len: usize,
    denoiser: &mut D,
    guidance_scale: f64,
    noise_scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ModelOutput> {
    let mut x: Vec<f64> = (0..len).map(|_| noise_scale * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut last = None;
    for t in (1..=schedule.steps()).rev() {
        let out = denoiser.denoise(&x, t)?;
        let x0: Vec<f64> = match &out.uncond {
            Some(u) if guidance_scale != 1.0 => {
                u.iter().zip(&out.cond).map(|(u, c)| u + guidance_scale * (c - u)).collect()
            }
            _ => out.cond.clone(),
        };
        if t > 1 {
            let (c_x0, c_xt, var) = schedule.posterior(t);
            let sd = var.sqrt() * noise_scale;
            for (xi, x0i) in x.iter_mut().zip(&x0) {
                let z: f64 = rng.sample(StandardNormal);
                *xi = c_x0 * x0i + c_xt * *xi + sd * z;
            }
        }
        last = Some((x0, out.behavior_logits, out.mode_logits));
    }
    let (x0, behavior_logits, mode_logits) = last.expect("schedule has at least one step");
    Ok(ModelOutput { x0: x0.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect(), behavior_logits, mode_logits })
}

/// Raw (unnormalized) conditioning history for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub past_human_rel: Vec<[f64; POSE_DIM]>,
    pub past_cmd: Vec<[f64; NUM_CHANNELS]>,
}

/// Anything that maps a conditioning history to a command window.
pub trait CommandModel: Send + Sync {
    fn history(&self) -> usize;
    fn horizon(&self) -> usize;
    fn predict(&self, cond: &Conditioning, rng: &mut ChaCha8Rng) -> Result<ModelOutput>;
}

/// Condition tokens of one sample after embedding and masking.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionTokens {
    /// `history × latent` (empty for `no_human`).
    pub pose: Vec<f32>,
    /// `history × latent` (empty for `no_commands`).
    pub cmd: Vec<f32>,
    /// Diffusion-step token.
    pub step: Vec<f32>,
    pub cmd_masked: bool,
}

/// Trained network bundled with everything inference needs.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub config: ModelConfig,
    pub variant: Variant,
    pub schedule: DiffusionSchedule,
    pub norm: NormStats,
    pub params: ParamStore<f32>,
    pub guidance_scale: f64,
    pub noise_scale: f64,
}

impl TrainedModel {
    pub fn new(config: ModelConfig, variant: Variant, schedule: DiffusionSchedule, norm: NormStats, params: ParamStore<f32>) -> Result<Self> {
        config.validate()?;
        params.check_layout(&config)?;
        if schedule.steps() != config.diffusion_steps {
            return Err(Error::validation("schedule length does not match config"));
        }
        Ok(TrainedModel { guidance_scale: config.guidance_scale, config, variant, schedule, norm, params, noise_scale: 1.0 })
    }

    pub fn network(&self) -> Network<f32> {
        Network::new(&self.config)
    }

    fn flatten(&self, cond: &Conditioning) -> Result<(Vec<f32>, Vec<f32>)> {
        let m = self.config.history;
        if cond.past_human_rel.len() != m || cond.past_cmd.len() != m {
            return Err(Error::validation(format!(
                "conditioning needs {m} frames, got {} poses and {} commands",
                cond.past_human_rel.len(),
                cond.past_cmd.len()
            )));
        }
        let pose = cond
            .past_human_rel
            .iter()
            .flat_map(|p| self.norm.normalize_pose(p))
            .map(|v| v as f32)
            .collect();
        let cmd = cond.past_cmd.iter().flatten().map(|v| *v as f32).collect();
        Ok((pose, cmd))
    }

    /// Embedded condition tokens for one history at diffusion step `t`.
    pub fn encode_conditions(&self, cond: &Conditioning, t: usize, drop_cmd: bool) -> Result<ConditionTokens> {
        self.schedule.check_step(t)?;
        let (pose, cmd) = self.flatten(cond)?;
        let net = self.network();
        let c = &self.config;
        let x_t = vec![0f32; c.horizon * c.channels];
        let input = BatchInput { batch: 1, pose: &pose, cmd: &cmd, drop_cmd: &[drop_cmd], x_t: &x_t, steps: &[t] };
        let h = net.embed_only(&self.params.data, &input)?;
        let lay = net.layout;
        let d = c.latent_dim;
        let rows = |at: usize, n: usize| h[at * d..(at + n) * d].to_vec();
        Ok(ConditionTokens {
            pose: rows(lay.pose_at, lay.pose),
            cmd: rows(lay.cmd_at, lay.cmd),
            step: rows(lay.step_at, lay.step),
            cmd_masked: drop_cmd && c.use_command_tokens,
        })
    }

    /// One guided sample (diffusion head) or one forward pass (direct head).
    pub fn sample_window(&self, cond: &Conditioning, rng: &mut ChaCha8Rng) -> Result<ModelOutput> {
        let (pose, cmd) = self.flatten(cond)?;
        let net = self.network();
        let c = &self.config;
        let p = &self.params.data;
        let len = c.horizon * c.channels;

        if !c.is_diffusion() {
            let input = BatchInput { batch: 1, pose: &pose, cmd: &cmd, drop_cmd: &[false], x_t: &[], steps: &[] };
            let (out, _) = net.forward::<ChaCha8Rng>(p, &input, None)?;
            return Ok(ModelOutput {
                x0: out.x0.iter().map(|v| (*v as f64).clamp(-1.0, 1.0)).collect(),
                behavior_logits: out.behavior.iter().map(|v| *v as f64).collect(),
                mode_logits: out.mode.iter().map(|v| *v as f64).collect(),
            });
        }

        let guided = c.use_command_tokens && self.guidance_scale != 1.0;
        let batch = if guided { 2 } else { 1 };
        let pose2: Vec<f32> = pose.iter().chain(if guided { pose.iter() } else { [].iter() }).copied().collect();
        let cmd2: Vec<f32> = cmd.iter().chain(if guided { cmd.iter() } else { [].iter() }).copied().collect();
        let drop = [false, true];
        let mut denoise = |x_t: &[f64], t: usize| -> Result<Denoised> {
            let xs: Vec<f32> = (0..batch).flat_map(|_| x_t.iter().map(|v| *v as f32)).collect();
            let steps = vec![t; batch];
            let input = BatchInput { batch, pose: &pose2, cmd: &cmd2, drop_cmd: &drop[..batch], x_t: &xs, steps: &steps };
            let (out, _) = net.forward::<ChaCha8Rng>(p, &input, None)?;
            let to64 = |s: &[f32]| s.iter().map(|v| *v as f64).collect::<Vec<_>>();
            Ok(Denoised {
                cond: to64(&out.x0[..len]),
                uncond: guided.then(|| to64(&out.x0[len..])),
                behavior_logits: to64(&out.behavior[..c.behavior_classes]),
                mode_logits: to64(&out.mode[..c.mode_classes]),
            })
        };
        reverse_diffusion(&self.schedule, len, &mut denoise, self.guidance_scale, self.noise_scale, rng)
    }
}

impl CommandModel for TrainedModel {
    fn history(&self) -> usize {
        self.config.history
    }

    fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn predict(&self, cond: &Conditioning, rng: &mut ChaCha8Rng) -> Result<ModelOutput> {
        self.sample_window(cond, rng)
    }
}

/// Returns the same window every call; used to test the runtime loop.
#[derive(Debug, Clone)]
pub struct ConstantModel {
    pub history: usize,
    pub output: ModelOutput,
}

impl CommandModel for ConstantModel {
    fn history(&self) -> usize {
        self.history
    }

    fn horizon(&self) -> usize {
        self.output.horizon()
    }

    fn predict(&self, _cond: &Conditioning, _rng: &mut ChaCha8Rng) -> Result<ModelOutput> {
        Ok(self.output.clone())
    }
}
