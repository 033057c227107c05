//! Receding-horizon runtime: history buffers, replanning, seam smoothing,
//! discrete-event debouncing and an optional inference worker thread.

use std::collections::VecDeque;
use std::sync::mpsc::{self, Receiver, SyncSender, TryRecvError};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{relative_pose, Pose};
use crate::model::sampler::{CommandModel, Conditioning, ModelOutput};
use crate::sim::{BehaviorEvent, CommandVector, EmbodimentProfile, Mode, DT, NUM_CHANNELS};

/// Base velocity channels zeroed while the human pose is stale.
pub const LOCOMOTION_CHANNELS: [usize; 3] = [0, 1, 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    /// Frames consumed between replans (K).
    pub replan_every: usize,
    pub sigma_frames: f64,
    pub behavior_threshold: f64,
    /// Extra cooldown after a clip finishes, seconds.
    pub cooldown_margin: f64,
    /// Consecutive agreeing windows needed to switch mode.
    pub mode_votes: usize,
    /// Seconds for locomotion commands to ramp to zero once the human is stale.
    pub stale_ramp: f64,
    pub dt: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            replan_every: 10,
            sigma_frames: 2.0,
            behavior_threshold: 0.5,
            cooldown_margin: 1.0,
            mode_votes: 3,
            stale_ramp: 0.2,
            dt: DT,
        }
    }
}

impl ControllerConfig {
    // negated comparisons so NaN fails validation
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self, horizon: usize) -> Result<()> {
        if self.replan_every == 0 || self.replan_every > horizon {
            return Err(Error::config(format!("replan_every must lie in 1..={horizon}")));
        }
        if !(self.sigma_frames > 0.0) || !(self.dt > 0.0) || !(self.stale_ramp >= 0.0) {
            return Err(Error::config("sigma_frames and dt must be positive"));
        }
        if !(0.0..1.0).contains(&self.behavior_threshold) || self.mode_votes == 0 {
            return Err(Error::config("invalid debounce parameters"));
        }
        Ok(())
    }
}

/// Discrete Gaussian kernel over offsets `-r..=r`, `r = ceil(3σ)`, summing
/// to one.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-r..=r).map(|k| (-0.5 * (k as f64 / sigma).powi(2)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Per-channel Gaussian smoothing of `window`, with `tail` (oldest first)
/// as left context. Kernel taps that fall outside the available samples
/// are dropped and the remaining weights renormalized.
pub fn gaussian_smooth(window: &[[f64; NUM_CHANNELS]], tail: &[[f64; NUM_CHANNELS]], sigma: f64) -> Vec<[f64; NUM_CHANNELS]> {
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as i64;
    let t = tail.len() as i64;
    let n = window.len() as i64;
    let at = |i: i64| -> &[f64; NUM_CHANNELS] {
        if i < 0 {
            &tail[(t + i) as usize]
        } else {
            &window[i as usize]
        }
    };
    (0..n)
        .map(|i| {
            let mut acc = [0.0; NUM_CHANNELS];
            let mut wsum = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let src = i + k as i64 - r;
                if src < -t || src >= n {
                    continue;
                }
                wsum += w;
                for (a, v) in acc.iter_mut().zip(at(src)) {
                    *a += w * v;
                }
            }
            acc.map(|v| v / wsum)
        })
        .collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Cooldowns and mode votes carried between windows.
#[derive(Debug, Clone, PartialEq)]
pub struct DebounceState {
    pub cooldowns: [f64; BehaviorEvent::COUNT],
    pub mode: Mode,
    pub votes: VecDeque<Mode>,
}

impl Default for DebounceState {
    fn default() -> Self {
        DebounceState { cooldowns: [0.0; BehaviorEvent::COUNT], mode: Mode::Standing, votes: VecDeque::new() }
    }
}

impl DebounceState {
    pub fn advance(&mut self, dt: f64) {
        for c in self.cooldowns.iter_mut() {
            *c = (*c - dt).max(0.0);
        }
    }
}

/// Turns one window's logits into at most one event and a (debounced) mode.
pub fn debounce_discrete(
    behavior_logits: &[f64],
    mode_logits: &[f64],
    state: &DebounceState,
    profile: &EmbodimentProfile,
    cfg: &ControllerConfig,
) -> (BehaviorEvent, Mode, DebounceState) {
    let mut next = state.clone();
    let mut fired = BehaviorEvent::None;
    if behavior_logits.iter().all(|v| v.is_finite()) && !behavior_logits.is_empty() {
        let p = softmax(behavior_logits);
        let best = (1..p.len()).max_by(|a, b| p[*a].total_cmp(&p[*b]));
        if let Some(k) = best {
            if p[k] > cfg.behavior_threshold && next.cooldowns[k] <= 0.0 {
                if let Some(e) = BehaviorEvent::from_index(k) {
                    let playback = profile.clip_duration(e);
                    // no other clip may start while this one plays
                    for c in next.cooldowns.iter_mut() {
                        *c = c.max(playback);
                    }
                    next.cooldowns[k] = playback + cfg.cooldown_margin;
                    fired = e;
                }
            }
        }
    }
    if mode_logits.len() == Mode::COUNT && mode_logits.iter().all(|v| v.is_finite()) {
        let vote = if mode_logits[Mode::Standing.index()] > mode_logits[Mode::Walking.index()] { Mode::Standing } else { Mode::Walking };
        next.votes.push_back(vote);
        while next.votes.len() > cfg.mode_votes {
            next.votes.pop_front();
        }
        if next.votes.len() == cfg.mode_votes && next.votes.iter().all(|v| *v == vote) {
            next.mode = vote;
        }
    }
    let mode = next.mode;
    (fired, mode, next)
}

struct Job {
    tick: u64,
    cond: Conditioning,
    seed: u64,
}

struct JobResult {
    tick: u64,
    output: Result<ModelOutput>,
}

/// Background inference thread with one request in flight at a time.
struct Worker {
    tx: Option<SyncSender<Job>>,
    rx: Receiver<JobResult>,
    handle: Option<JoinHandle<()>>,
    busy: bool,
}

impl Worker {
    fn spawn(model: Arc<dyn CommandModel>) -> Worker {
        let (tx, jobs) = mpsc::sync_channel::<Job>(1);
        let (done, rx) = mpsc::sync_channel::<JobResult>(1);
        let handle = std::thread::Builder::new()
            .name("inference".into())
            .spawn(move || {
                for job in jobs {
                    let mut rng = ChaCha8Rng::seed_from_u64(job.seed);
                    let output = model.predict(&job.cond, &mut rng);
                    if done.send(JobResult { tick: job.tick, output }).is_err() {
                        break;
                    }
                }
            })
            .expect("spawn inference thread");
        Worker { tx: Some(tx), rx, handle: Some(handle), busy: false }
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        self.tx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// What one tick produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TickOutput {
    pub cmd: CommandVector,
    /// Sampled (unsmoothed) frame under the cursor; equals `cmd` when no
    /// window is available.
    pub raw: CommandVector,
    pub mode: Mode,
    pub event: BehaviorEvent,
    /// A new window was installed this tick.
    pub replanned: bool,
}

pub struct Controller {
    cfg: ControllerConfig,
    model: Arc<dyn CommandModel>,
    profile: EmbodimentProfile,
    history: usize,
    horizon: usize,
    robot_hist: VecDeque<Pose>,
    human_hist: VecDeque<Pose>,
    cmd_hist: VecDeque<[f64; NUM_CHANNELS]>,
    smooth_tail: VecDeque<[f64; NUM_CHANNELS]>,
    raw_window: Vec<[f64; NUM_CHANNELS]>,
    window: Vec<[f64; NUM_CHANNELS]>,
    cursor: usize,
    debounce: DebounceState,
    rng: ChaCha8Rng,
    tick: u64,
    last_cmd: CommandVector,
    stale_gain: f64,
    worker: Option<Worker>,
    replans: u64,
}

impl Controller {
    /// Controller that runs inference inline on the calling thread.
    pub fn new(model: Arc<dyn CommandModel>, profile: EmbodimentProfile, cfg: ControllerConfig, seed: u64) -> Result<Self> {
        cfg.validate(model.horizon())?;
        profile.validate()?;
        let history = model.history();
        let horizon = model.horizon();
        let tail_len = (3.0 * cfg.sigma_frames).ceil() as usize;
        Ok(Controller {
            cfg,
            model,
            profile,
            history,
            horizon,
            robot_hist: VecDeque::with_capacity(history + 1),
            human_hist: VecDeque::with_capacity(history + 1),
            cmd_hist: VecDeque::with_capacity(history + 1),
            smooth_tail: VecDeque::with_capacity(tail_len + 1),
            raw_window: Vec::new(),
            window: Vec::new(),
            cursor: 0,
            debounce: DebounceState::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            tick: 0,
            last_cmd: CommandVector::ZERO,
            stale_gain: 1.0,
            worker: None,
            replans: 0,
        })
    }

    /// Same controller with sampling moved to a background thread; a late
    /// window is installed at the next frame boundary after it arrives.
    pub fn with_worker(model: Arc<dyn CommandModel>, profile: EmbodimentProfile, cfg: ControllerConfig, seed: u64) -> Result<Self> {
        let mut c = Self::new(model.clone(), profile, cfg, seed)?;
        c.worker = Some(Worker::spawn(model));
        Ok(c)
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn warmed_up(&self) -> bool {
        self.cmd_hist.len() == self.history
    }

    /// Number of windows installed so far.
    pub fn replans(&self) -> u64 {
        self.replans
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn mode(&self) -> Mode {
        self.debounce.mode
    }

    pub fn set_profile(&mut self, profile: EmbodimentProfile) -> Result<()> {
        profile.validate()?;
        self.profile = profile;
        Ok(())
    }

    pub fn conditioning(&self) -> Result<Conditioning> {
        let past_human_rel = self
            .robot_hist
            .iter()
            .zip(&self.human_hist)
            .map(|(r, h)| relative_pose(r, h).map(|p| p.to_array()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Conditioning { past_human_rel, past_cmd: self.cmd_hist.iter().copied().collect() })
    }

    fn install(&mut self, out: ModelOutput, offset: usize) -> (BehaviorEvent, bool) {
        if out.horizon() != self.horizon {
            return (BehaviorEvent::None, false);
        }
        let raw: Vec<[f64; NUM_CHANNELS]> = (offset.min(self.horizon)..self.horizon)
            .map(|i| {
                let mut f = [0.0; NUM_CHANNELS];
                for (d, s) in f.iter_mut().zip(out.frame(i)) {
                    *d = s.clamp(-1.0, 1.0);
                }
                f
            })
            .collect();
        let tail: Vec<[f64; NUM_CHANNELS]> = self.smooth_tail.iter().copied().collect();
        self.window = gaussian_smooth(&raw, &tail, self.cfg.sigma_frames);
        self.raw_window = raw;
        self.cursor = 0;
        self.replans += 1;
        let (event, _, next) = debounce_discrete(&out.behavior_logits, &out.mode_logits, &self.debounce, &self.profile, &self.cfg);
        self.debounce = next;
        (event, true)
    }

    /// One 50 Hz step. `robot` and `human` are the current poses; `stale`
    /// marks a human pose that has not been refreshed in time.
    pub fn tick(&mut self, robot: &Pose, human: &Pose, stale: bool) -> Result<TickOutput> {
        let dt = self.cfg.dt;
        self.debounce.advance(dt);
        let mut event = BehaviorEvent::None;
        let mut replanned = false;

        let out = if !self.warmed_up() {
            TickOutput { cmd: CommandVector::ZERO, raw: CommandVector::ZERO, mode: Mode::Standing, event, replanned }
        } else {
            let due = self.window.is_empty() || self.cursor >= self.cfg.replan_every;
            match self.worker.as_mut() {
                None => {
                    if due {
                        let cond = self.conditioning()?;
                        let mut rng = ChaCha8Rng::seed_from_u64(self.rng.gen());
                        let out = self.model.predict(&cond, &mut rng)?;
                        (event, replanned) = self.install(out, 0);
                    }
                }
                Some(w) => {
                    let mut arrived = None;
                    if w.busy {
                        match w.rx.try_recv() {
                            Ok(r) => {
                                w.busy = false;
                                arrived = Some(r);
                            }
                            Err(TryRecvError::Empty) => {}
                            Err(TryRecvError::Disconnected) => {
                                return Err(Error::Numeric { location: "controller".into(), detail: "inference worker stopped".into() })
                            }
                        }
                    }
                    if let Some(r) = arrived {
                        let offset = (self.tick - r.tick) as usize;
                        (event, replanned) = self.install(r.output?, offset);
                    }
                    let due = self.window.is_empty() || self.cursor >= self.cfg.replan_every;
                    if due && !self.worker.as_ref().unwrap().busy {
                        let cond = self.conditioning()?;
                        let seed = self.rng.gen();
                        let job = Job { tick: self.tick, cond, seed };
                        let w = self.worker.as_mut().unwrap();
                        if w.tx.as_ref().unwrap().send(job).is_err() {
                            return Err(Error::Numeric { location: "controller".into(), detail: "inference worker stopped".into() });
                        }
                        w.busy = true;
                        if self.window.is_empty() {
                            // first window: wait so warm-up output stays defined
                            let r = w.rx.recv().map_err(|_| Error::Numeric { location: "controller".into(), detail: "inference worker stopped".into() })?;
                            w.busy = false;
                            (event, replanned) = self.install(r.output?, 0);
                        }
                    }
                }
            }
            let (mut cmd, raw) = if self.cursor < self.window.len() {
                let c = CommandVector(self.window[self.cursor]);
                let r = CommandVector(self.raw_window[self.cursor]);
                self.cursor += 1;
                (c, r)
            } else {
                (self.last_cmd, self.last_cmd)
            };
            self.stale_gain = if stale {
                if self.cfg.stale_ramp > 0.0 { (self.stale_gain - dt / self.cfg.stale_ramp).max(0.0) } else { 0.0 }
            } else {
                1.0
            };
            for ch in LOCOMOTION_CHANNELS {
                cmd.0[ch] *= self.stale_gain;
            }
            cmd = cmd.clamped().0;
            TickOutput { cmd, raw, mode: self.debounce.mode, event, replanned }
        };

        self.push_history(robot, human, out.cmd);
        self.last_cmd = out.cmd;
        self.tick += 1;
        Ok(out)
    }

    /// Replaces the model, keeping histories; the next tick replans.
    pub fn swap_model(&mut self, model: Arc<dyn CommandModel>) -> Result<()> {
        if model.history() != self.history {
            return Err(Error::config(format!("model history {} differs from controller history {}", model.history(), self.history)));
        }
        self.cfg.validate(model.horizon())?;
        self.horizon = model.horizon();
        self.window.clear();
        self.raw_window.clear();
        self.cursor = 0;
        if self.worker.is_some() {
            self.worker = Some(Worker::spawn(model.clone()));
        }
        self.model = model;
        Ok(())
    }

    /// Fills the history with an already executed frame without emitting.
    pub fn prime(&mut self, robot: &Pose, human: &Pose, cmd: &CommandVector) -> Result<()> {
        robot.validate()?;
        human.validate()?;
        self.push_history(robot, human, cmd.clamped().0);
        self.last_cmd = cmd.clamped().0;
        self.tick += 1;
        Ok(())
    }

    fn push_history(&mut self, robot: &Pose, human: &Pose, cmd: CommandVector) {
        self.robot_hist.push_back(*robot);
        self.human_hist.push_back(*human);
        self.cmd_hist.push_back(cmd.0);
        while self.cmd_hist.len() > self.history {
            self.robot_hist.pop_front();
            self.human_hist.pop_front();
            self.cmd_hist.pop_front();
        }
        self.smooth_tail.push_back(cmd.0);
        let keep = (3.0 * self.cfg.sigma_frames).ceil() as usize;
        while self.smooth_tail.len() > keep {
            self.smooth_tail.pop_front();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::sampler::ConstantModel;
    use std::time::Duration;

    fn constant_output(horizon: usize, value: impl Fn(usize, usize) -> f64) -> ModelOutput {
        ModelOutput {
            x0: (0..horizon * NUM_CHANNELS).map(|k| value(k / NUM_CHANNELS, k % NUM_CHANNELS)).collect(),
            behavior_logits: vec![0.0; BehaviorEvent::COUNT],
            mode_logits: vec![1.0, 0.0],
        }
    }

    fn stub(value: f64) -> Arc<dyn CommandModel> {
        Arc::new(ConstantModel { history: 15, output: constant_output(25, |_, _| value) })
    }

    fn poses() -> (Pose, Pose) {
        (Pose::IDENTITY, Pose::planar(2.0, 0.0, 1.7, std::f64::consts::PI))
    }

    #[test]
    fn kernel_sums_to_one() {
        for sigma in [0.3, 1.0, 2.0, 3.7, 10.0] {
            let k = gaussian_kernel(sigma);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(k.len(), 2 * (3.0 * sigma).ceil() as usize + 1);
        }
    }

    #[test]
    fn constant_signal_unchanged() {
        let w = vec![[0.37; NUM_CHANNELS]; 25];
        let tail = vec![[0.37; NUM_CHANNELS]; 6];
        for f in gaussian_smooth(&w, &tail, 2.0) {
            assert!(f.iter().all(|v| (v - 0.37).abs() < 1e-12));
        }
    }

    #[test]
    fn impulse_matches_direct_convolution() {
        let sigma = 2.0;
        let mut w = vec![[0.0; NUM_CHANNELS]; 25];
        w[12][3] = 1.0;
        let out = gaussian_smooth(&w, &[], sigma);
        let mass: f64 = out.iter().map(|f| f[3]).sum();
        assert!((mass - 1.0).abs() < 1e-9);
        for (i, f) in out.iter().enumerate() {
            let d = i as f64 - 12.0;
            let expect = if d.abs() <= 6.0 {
                let z: f64 = (-6..=6).map(|k| (-0.5 * (k as f64 / sigma).powi(2)).exp()).sum();
                (-0.5 * (d / sigma).powi(2)).exp() / z
            } else {
                0.0
            };
            assert!((f[3] - expect).abs() < 1e-12, "frame {i}");
            assert_eq!(f[0], 0.0);
        }
    }

    #[test]
    fn tail_smooths_seam() {
        let w = vec![[1.0; NUM_CHANNELS]; 25];
        let tail = vec![[0.0; NUM_CHANNELS]; 6];
        let out = gaussian_smooth(&w, &tail, 2.0);
        assert!(out[0][0] > 0.3 && out[0][0] < 0.8);
        assert!(out.windows(2).all(|p| p[1][0] >= p[0][0]));
    }

    #[test]
    fn cold_start_is_zero_standing() {
        let (r, h) = poses();
        let mut c = Controller::new(stub(0.5), EmbodimentProfile::bipod(), ControllerConfig::default(), 0).unwrap();
        for _ in 0..15 {
            let o = c.tick(&r, &h, false).unwrap();
            assert_eq!(o.cmd, CommandVector::ZERO);
            assert_eq!(o.mode, Mode::Standing);
        }
        assert!(c.warmed_up());
        assert_eq!(c.replans(), 0);
    }

    #[test]
    fn replans_every_k_ticks() {
        let (r, h) = poses();
        let mut c = Controller::new(stub(0.5), EmbodimentProfile::bipod(), ControllerConfig::default(), 0).unwrap();
        for _ in 0..15 + 100 {
            c.tick(&r, &h, false).unwrap();
        }
        assert_eq!(c.replans(), 10);
    }

    #[test]
    fn stub_output_reached_after_convergence() {
        let (r, h) = poses();
        let mut c = Controller::new(stub(0.5), EmbodimentProfile::bipod(), ControllerConfig::default(), 0).unwrap();
        let mut last = CommandVector::ZERO;
        for _ in 0..15 + 60 {
            last = c.tick(&r, &h, false).unwrap().cmd;
        }
        assert!(last.0.iter().all(|v| (v - 0.5).abs() < 1e-9), "{last:?}");
    }

    #[test]
    fn executed_commands_feed_history() {
        let (r, h) = poses();
        let mut c = Controller::new(stub(0.5), EmbodimentProfile::bipod(), ControllerConfig::default(), 0).unwrap();
        let mut emitted = Vec::new();
        for _ in 0..40 {
            emitted.push(c.tick(&r, &h, false).unwrap().cmd.0);
        }
        let cond = c.conditioning().unwrap();
        assert_eq!(cond.past_cmd, emitted[25..].to_vec());
        assert_eq!(cond.past_human_rel.len(), 15);
    }

    #[test]
    fn uniform_logits_fire_nothing() {
        let s = DebounceState::default();
        let (e, _, _) = debounce_discrete(&[0.0; 9], &[0.0, 0.0], &s, &EmbodimentProfile::bipod(), &ControllerConfig::default());
        assert_eq!(e, BehaviorEvent::None);
    }

    #[test]
    fn confident_event_fires_and_cools_down() {
        let profile = EmbodimentProfile::bipod();
        let cfg = ControllerConfig::default();
        let mut logits = [0.0; 9];
        let k = BehaviorEvent::Dance.index();
        logits[k] = (0.9f64 * 8.0 / 0.1).ln();
        let (e, _, s) = debounce_discrete(&logits, &[0.0, 0.0], &DebounceState::default(), &profile, &cfg);
        assert_eq!(e, BehaviorEvent::Dance);
        let expected = profile.clip_duration(BehaviorEvent::Dance) + 1.0;
        assert!((s.cooldowns[k] - expected).abs() < 1e-12);
        let (again, _, _) = debounce_discrete(&logits, &[0.0, 0.0], &s, &profile, &cfg);
        assert_eq!(again, BehaviorEvent::None);
        let mut later = s.clone();
        later.advance(expected + 1e-9);
        assert_eq!(debounce_discrete(&logits, &[0.0, 0.0], &later, &profile, &cfg).0, BehaviorEvent::Dance);
    }

    #[test]
    fn alternating_votes_never_switch() {
        let profile = EmbodimentProfile::bipod();
        let cfg = ControllerConfig::default();
        let mut s = DebounceState { mode: Mode::Walking, ..Default::default() };
        for i in 0..20 {
            let m = if i % 2 == 0 { [0.0, 1.0] } else { [1.0, 0.0] };
            let (_, mode, next) = debounce_discrete(&[0.0; 9], &m, &s, &profile, &cfg);
            assert_eq!(mode, Mode::Walking);
            s = next;
        }
        for i in 0..3 {
            let (_, mode, next) = debounce_discrete(&[0.0; 9], &[0.0, 1.0], &s, &profile, &cfg);
            assert_eq!(mode, if i < 2 { Mode::Walking } else { Mode::Standing });
            s = next;
        }
    }

    #[test]
    fn stale_human_zeroes_locomotion() {
        let (r, h) = poses();
        let mut c = Controller::new(stub(0.5), EmbodimentProfile::bipod(), ControllerConfig::default(), 0).unwrap();
        for _ in 0..80 {
            c.tick(&r, &h, false).unwrap();
        }
        let mut o = c.tick(&r, &h, true).unwrap();
        for _ in 0..12 {
            o = c.tick(&r, &h, true).unwrap();
        }
        assert_eq!(&o.cmd.0[..3], &[0.0; 3]);
        assert!((o.cmd.0[3] - 0.5).abs() < 1e-9);
    }

    struct Slow(ConstantModel, Duration);

    impl CommandModel for Slow {
        fn history(&self) -> usize {
            self.0.history
        }
        fn horizon(&self) -> usize {
            self.0.horizon()
        }
        fn predict(&self, c: &Conditioning, r: &mut ChaCha8Rng) -> Result<ModelOutput> {
            std::thread::sleep(self.1);
            self.0.predict(c, r)
        }
    }

    #[test]
    fn worker_never_blocks_after_first_window() {
        let (r, h) = poses();
        let model = Arc::new(Slow(ConstantModel { history: 15, output: constant_output(25, |i, _| i as f64 / 25.0) }, Duration::from_millis(150)));
        let mut c = Controller::with_worker(model, EmbodimentProfile::bipod(), ControllerConfig::default(), 0).unwrap();
        for _ in 0..16 {
            c.tick(&r, &h, false).unwrap();
        }
        let mut worst = Duration::ZERO;
        for _ in 0..60 {
            let t = std::time::Instant::now();
            let o = c.tick(&r, &h, false).unwrap();
            worst = worst.max(t.elapsed());
            assert!(o.cmd.is_valid());
            std::thread::sleep(Duration::from_millis(20));
        }
        assert!(worst < Duration::from_millis(50), "tick blocked for {worst:?}");
        assert!(c.replans() >= 2);
    }
}
