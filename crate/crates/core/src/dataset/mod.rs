//! Recorded episodes, window extraction, augmentation, chunked train/test
//! splitting and input normalization.

mod format;
mod manifest;

pub use format::{episode_to_json, read_episode, read_episode_file, write_episode, write_episode_file, EPISODE_MAGIC, EPISODE_VERSION};
pub use manifest::{split_dataset, split_with_chunk, ChunkEntry, DatasetManifest, Split, CHUNK_FRAMES, MANIFEST_VERSION};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{relative_track, Pose, PoseTrack};
use crate::model::POSE_DIM;
use crate::operator::Mood;
use crate::sim::{BehaviorEvent, CommandVector, Mode, NUM_CHANNELS, RATE_HZ};

pub const DEFAULT_HISTORY: usize = 15;
pub const DEFAULT_HORIZON: usize = 25;
pub const DEFAULT_STRIDE: usize = 5;
pub const HEIGHT_AUGMENT: f64 = 0.3;

/// One 20 ms record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub time: f64,
    pub robot: Pose,
    pub human: Pose,
    pub cmd: CommandVector,
    /// Button press issued on this frame.
    pub event: BehaviorEvent,
    pub mode: Mode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub oracle_version: u32,
    pub profile: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub mood: Mood,
    pub seed: u64,
    pub rate_hz: f64,
    pub frames: Vec<Frame>,
    pub meta: EpisodeMeta,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn robot_track(&self) -> PoseTrack {
        PoseTrack::new(self.frames.iter().map(|f| f.robot).collect(), self.rate_hz)
    }

    pub fn human_track(&self) -> PoseTrack {
        PoseTrack::new(self.frames.iter().map(|f| f.human).collect(), self.rate_hz)
    }

    /// Frames `[start, end)` as a standalone episode.
    pub fn slice(&self, start: usize, end: usize) -> Episode {
        Episode {
            mood: self.mood,
            seed: self.seed,
            rate_hz: self.rate_hz,
            frames: self.frames[start..end.min(self.frames.len())].to_vec(),
            meta: self.meta.clone(),
        }
    }

    pub fn commands(&self) -> Vec<[f64; NUM_CHANNELS]> {
        self.frames.iter().map(|f| f.cmd.0).collect()
    }

    /// Checks monotone 50 Hz timing and pose validity.
    pub fn validate(&self) -> Result<()> {
        if (self.rate_hz - RATE_HZ).abs() > 1e-9 {
            return Err(Error::data(format!("episode rate {} Hz, expected {RATE_HZ}", self.rate_hz)));
        }
        for w in self.frames.windows(2) {
            let dt = w[1].time - w[0].time;
            if (dt - 1.0 / RATE_HZ).abs() > 1e-6 {
                return Err(Error::data(format!("non-uniform frame spacing {dt} s at t={}", w[0].time)));
            }
        }
        for f in &self.frames {
            f.robot.validate()?;
            f.human.validate()?;
        }
        Ok(())
    }
}

/// The training unit: history, future commands, and one label per head.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub past_human_rel: Vec<[f64; POSE_DIM]>,
    pub past_cmd: Vec<[f64; NUM_CHANNELS]>,
    pub future_cmd: Vec<[f64; NUM_CHANNELS]>,
    pub behavior_label: BehaviorEvent,
    pub mode_label: Mode,
}

/// Number of windows [`extract_windows`] produces.
pub fn window_count(len: usize, history: usize, horizon: usize, stride: usize) -> usize {
    let span = history + horizon;
    if len < span || stride == 0 {
        0
    } else {
        (len - span) / stride + 1
    }
}

/// Sliding windows over one episode (or chunk).
pub fn extract_windows(episode: &Episode, history: usize, horizon: usize, stride: usize) -> Result<Vec<WindowSample>> {
    let count = window_count(episode.len(), history, horizon, stride);
    let mut out = Vec::with_capacity(count);
    for w in 0..count {
        let s = w * stride;
        let past = &episode.frames[s..s + history];
        let future = &episode.frames[s + history..s + history + horizon];
        let robot = PoseTrack::new(past.iter().map(|f| f.robot).collect(), episode.rate_hz);
        let human = PoseTrack::new(past.iter().map(|f| f.human).collect(), episode.rate_hz);
        let rel = relative_track(&robot, &human)?;
        let behavior_label = future.iter().map(|f| f.event).find(|e| !e.is_none()).unwrap_or(BehaviorEvent::None);
        let standing = future.iter().filter(|f| f.mode == Mode::Standing).count();
        let walking = horizon - standing;
        let mode_label = match standing.cmp(&walking) {
            std::cmp::Ordering::Greater => Mode::Standing,
            std::cmp::Ordering::Less => Mode::Walking,
            std::cmp::Ordering::Equal => future.last().map_or(Mode::Walking, |f| f.mode),
        };
        out.push(WindowSample {
            past_human_rel: rel.frames.iter().map(|p| p.to_array()).collect(),
            past_cmd: past.iter().map(|f| f.cmd.0).collect(),
            future_cmd: future.iter().map(|f| f.cmd.0).collect(),
            behavior_label,
            mode_label,
        });
    }
    Ok(out)
}

/// Shifts every past human position by `offset` meters along +z.
pub fn augment_height_with(sample: &WindowSample, offset: f64) -> WindowSample {
    let mut out = sample.clone();
    for p in out.past_human_rel.iter_mut() {
        p[2] += offset;
    }
    out
}

/// Random human-height augmentation with `u ~ U(-0.3, 0.3)` m shared by the
/// whole history.
pub fn augment_height<R: Rng>(sample: &WindowSample, rng: &mut R) -> WindowSample {
    augment_height_with(sample, sample_height_offset(rng))
}

pub fn sample_height_offset<R: Rng>(rng: &mut R) -> f64 {
    rng.gen_range(-HEIGHT_AUGMENT..HEIGHT_AUGMENT)
}

/// Fixed workspace scaling of relative positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub position_scale: f64,
    pub clip: f64,
    /// Mean and standard deviation of the scaled x, y, z inputs on the
    /// training windows, recorded for reference only.
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub windows: usize,
}

impl Default for NormStats {
    fn default() -> Self {
        NormStats { position_scale: 5.0, clip: 2.0, mean: [0.0; 3], std: [0.0; 3], windows: 0 }
    }
}

impl NormStats {
    pub fn normalize_pose(&self, p: &[f64; POSE_DIM]) -> [f64; POSE_DIM] {
        let mut out = *p;
        for v in out.iter_mut().take(3) {
            *v = (*v / self.position_scale).clamp(-self.clip, self.clip);
        }
        out
    }
}

pub const MIN_NORMALIZER_WINDOWS: usize = 100;

pub fn fit_normalizer(train: &[WindowSample]) -> Result<NormStats> {
    if train.len() < MIN_NORMALIZER_WINDOWS {
        return Err(Error::data(format!(
            "normalizer needs at least {MIN_NORMALIZER_WINDOWS} windows, got {}",
            train.len()
        )));
    }
    let mut stats = NormStats { windows: train.len(), ..NormStats::default() };
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    let mut n = 0.0;
    for w in train {
        for p in &w.past_human_rel {
            let q = stats.normalize_pose(p);
            for i in 0..3 {
                sum[i] += q[i];
                sq[i] += q[i] * q[i];
            }
            n += 1.0;
        }
    }
    for i in 0..3 {
        stats.mean[i] = sum[i] / n;
        stats.std[i] = (sq[i] / n - stats.mean[i] * stats.mean[i]).max(0.0).sqrt();
    }
    Ok(stats)
}

pub fn apply_normalizer(sample: &WindowSample, stats: &NormStats) -> WindowSample {
    let mut out = sample.clone();
    for p in out.past_human_rel.iter_mut() {
        *p = stats.normalize_pose(p);
    }
    out
}
