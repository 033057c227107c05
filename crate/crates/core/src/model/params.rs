//! Named, flat parameter storage.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, POSE_DIM};
use super::real::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Zeros,
    Ones,
    /// Truncated normal (±2σ) with the given standard deviation.
    TruncNormal(f64),
    /// `N(0, 1/fan_in)`.
    FanIn(usize),
}

/// All learnable tensors of one model laid out in a single buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    pub entries: Vec<ParamEntry>,
    pub data: Vec<T>,
}

/// Offsets of each parameter inside the flat buffer.
#[derive(Debug, Clone)]
pub struct ParamIndex {
    pub pose_w: usize,
    pub pose_b: usize,
    pub cmd_w: usize,
    pub cmd_b: usize,
    pub x_w: usize,
    pub x_b: usize,
    pub step_table: usize,
    pub null_cmd: usize,
    pub query_behavior: usize,
    pub query_mode: usize,
    pub query_window: usize,
    pub layers: Vec<LayerIndex>,
    pub x0_w: usize,
    pub x0_b: usize,
    pub behavior_w: usize,
    pub behavior_b: usize,
    pub mode_w: usize,
    pub mode_b: usize,
}

#[derive(Debug, Clone)]
pub struct LayerIndex {
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub out_w: usize,
    pub out_b: usize,
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub ff1_w: usize,
    pub ff1_b: usize,
    pub ff2_w: usize,
    pub ff2_b: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
}

struct Builder {
    entries: Vec<ParamEntry>,
    inits: Vec<Init>,
    next: usize,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        let offset = self.next;
        let e = ParamEntry { name, shape: shape.to_vec(), offset };
        self.next += e.len();
        self.entries.push(e);
        self.inits.push(init);
        offset
    }
}

const EMBED_STD: f64 = 0.02;

fn build(cfg: &ModelConfig) -> (Vec<ParamEntry>, Vec<Init>, ParamIndex) {
    let d = cfg.latent_dim;
    let f = cfg.ff_dim;
    let j = cfg.channels;
    let mut b = Builder { entries: Vec::new(), inits: Vec::new(), next: 0 };
    let mut idx = ParamIndex {
        pose_w: usize::MAX,
        pose_b: usize::MAX,
        cmd_w: usize::MAX,
        cmd_b: usize::MAX,
        x_w: usize::MAX,
        x_b: usize::MAX,
        step_table: usize::MAX,
        null_cmd: usize::MAX,
        query_behavior: 0,
        query_mode: 0,
        query_window: usize::MAX,
        layers: Vec::new(),
        x0_w: 0,
        x0_b: 0,
        behavior_w: 0,
        behavior_b: 0,
        mode_w: 0,
        mode_b: 0,
    };
    if cfg.use_pose_tokens {
        idx.pose_w = b.add("embed.pose.w".into(), &[POSE_DIM, d], Init::TruncNormal(EMBED_STD));
        idx.pose_b = b.add("embed.pose.b".into(), &[d], Init::Zeros);
    }
    if cfg.use_command_tokens {
        idx.cmd_w = b.add("embed.cmd.w".into(), &[j, d], Init::TruncNormal(EMBED_STD));
        idx.cmd_b = b.add("embed.cmd.b".into(), &[d], Init::Zeros);
        idx.null_cmd = b.add("embed.null_cmd".into(), &[d], Init::TruncNormal(EMBED_STD));
    }
    if cfg.is_diffusion() {
        idx.x_w = b.add("embed.x.w".into(), &[j, d], Init::TruncNormal(EMBED_STD));
        idx.x_b = b.add("embed.x.b".into(), &[d], Init::Zeros);
        idx.step_table = b.add("embed.step".into(), &[cfg.diffusion_steps, d], Init::TruncNormal(EMBED_STD));
    } else {
        idx.query_window = b.add("query.window".into(), &[cfg.horizon, d], Init::TruncNormal(EMBED_STD));
    }
    idx.query_behavior = b.add("query.behavior".into(), &[d], Init::TruncNormal(EMBED_STD));
    idx.query_mode = b.add("query.mode".into(), &[d], Init::TruncNormal(EMBED_STD));
    for l in 0..cfg.layers {
        let p = format!("layers.{l}");
        idx.layers.push(LayerIndex {
            qkv_w: b.add(format!("{p}.attn.qkv.w"), &[d, 3 * d], Init::FanIn(d)),
            qkv_b: b.add(format!("{p}.attn.qkv.b"), &[3 * d], Init::Zeros),
            out_w: b.add(format!("{p}.attn.out.w"), &[d, d], Init::FanIn(d)),
            out_b: b.add(format!("{p}.attn.out.b"), &[d], Init::Zeros),
            ln1_g: b.add(format!("{p}.ln1.g"), &[d], Init::Ones),
            ln1_b: b.add(format!("{p}.ln1.b"), &[d], Init::Zeros),
            ff1_w: b.add(format!("{p}.ff1.w"), &[d, f], Init::FanIn(d)),
            ff1_b: b.add(format!("{p}.ff1.b"), &[f], Init::Zeros),
            ff2_w: b.add(format!("{p}.ff2.w"), &[f, d], Init::FanIn(f)),
            ff2_b: b.add(format!("{p}.ff2.b"), &[d], Init::Zeros),
            ln2_g: b.add(format!("{p}.ln2.g"), &[d], Init::Ones),
            ln2_b: b.add(format!("{p}.ln2.b"), &[d], Init::Zeros),
        });
    }
    idx.x0_w = b.add("head.x0.w".into(), &[d, j], Init::TruncNormal(EMBED_STD));
    idx.x0_b = b.add("head.x0.b".into(), &[j], Init::Zeros);
    idx.behavior_w = b.add("head.behavior.w".into(), &[d, cfg.behavior_classes], Init::TruncNormal(EMBED_STD));
    idx.behavior_b = b.add("head.behavior.b".into(), &[cfg.behavior_classes], Init::Zeros);
    idx.mode_w = b.add("head.mode.w".into(), &[d, cfg.mode_classes], Init::TruncNormal(EMBED_STD));
    idx.mode_b = b.add("head.mode.b".into(), &[cfg.mode_classes], Init::Zeros);
    (b.entries, b.inits, idx)
}

/// Offsets for `cfg` without allocating parameters.
pub fn param_index(cfg: &ModelConfig) -> ParamIndex {
    build(cfg).2
}

fn trunc_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

impl<T: Real> ParamStore<T> {
    /// Fresh parameters: truncated normal (std 0.02) for embeddings, queries
    /// and heads; `N(0, 1/fan_in)` for attention and feed-forward weights.
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let (entries, inits, _) = build(cfg);
        let total = entries.last().map_or(0, |e| e.offset + e.len());
        let mut data = Vec::with_capacity(total);
        for (e, init) in entries.iter().zip(&inits) {
            for _ in 0..e.len() {
                let v = match *init {
                    Init::Zeros => 0.0,
                    Init::Ones => 1.0,
                    Init::TruncNormal(s) => trunc_normal(rng, s),
                    Init::FanIn(n) => {
                        let z: f64 = StandardNormal.sample(rng);
                        z / (n as f64).sqrt()
                    }
                };
                data.push(T::from_f64_lossy(v));
            }
        }
        ParamStore { entries, data }
    }

    pub fn zeros_like(&self) -> Vec<T> {
        vec![T::zero(); self.data.len()]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.entry(name).map(|e| &self.data[e.range()])
    }

    /// Checks that the stored layout matches what `cfg` expects.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let (entries, _, _) = build(cfg);
        if entries != self.entries {
            return Err(Error::validation("parameter layout does not match model config"));
        }
        let total = entries.last().map_or(0, |e| e.offset + e.len());
        if total != self.data.len() {
            return Err(Error::validation("parameter buffer has the wrong size"));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.clone(),
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
