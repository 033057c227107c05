//! The 50 Hz kinematic arena: robot execution of operator commands, human
//! motion sources and embodiment profiles.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Pose, Quat};

pub const RATE_HZ: f64 = 50.0;
pub const DT: f64 = 1.0 / RATE_HZ;
pub const NUM_CHANNELS: usize = 10;
/// Half extent of the square arena in meters (6 x 6 m).
pub const ARENA_HALF: f64 = 3.0;

/// Operator stick channels, each in `[-1, 1]`.
///
/// | channel | meaning |
/// |---|---|
/// | 0 | forward velocity |
/// | 1 | lateral velocity |
/// | 2 | turn rate |
/// | 3, 4, 5 | head yaw, pitch, roll |
/// | 6 | body height offset |
/// | 7 | speed scale (negative values slow the gait) |
/// | 8, 9 | expression |
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CommandVector(pub [f64; NUM_CHANNELS]);

impl CommandVector {
    pub const ZERO: CommandVector = CommandVector([0.0; NUM_CHANNELS]);

    pub fn from_f32(v: &[f32]) -> Self {
        let mut c = [0.0; NUM_CHANNELS];
        for (dst, src) in c.iter_mut().zip(v) {
            *dst = *src as f64;
        }
        CommandVector(c)
    }

    /// Clamps every channel into range; returns the clamped vector and whether
    /// anything was out of range (non-finite channels become 0).
    pub fn clamped(&self) -> (CommandVector, bool) {
        let mut flagged = false;
        let mut out = self.0;
        for v in out.iter_mut() {
            if !v.is_finite() {
                *v = 0.0;
                flagged = true;
            } else if *v > 1.0 || *v < -1.0 {
                *v = v.clamp(-1.0, 1.0);
                flagged = true;
            }
        }
        (CommandVector(out), flagged)
    }

    pub fn is_valid(&self) -> bool {
        self.0.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v))
    }

    pub fn quantized(&self) -> Self {
        CommandVector(self.0.map(|v| v as f32 as f64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    Walking,
    Standing,
}

impl Mode {
    pub const COUNT: usize = 2;
    pub const ALL: [Mode; 2] = [Mode::Walking, Mode::Standing];

    pub fn index(self) -> usize {
        match self {
            Mode::Walking => 0,
            Mode::Standing => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Mode> {
        Mode::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Walking => "walking",
            Mode::Standing => "standing",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        Mode::ALL.into_iter().find(|m| m.name().eq_ignore_ascii_case(s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BehaviorEvent {
    None,
    HeadShake,
    Dance,
    Jump,
    Spin,
    Wave,
    Growl,
    Sit,
    Chirp,
}

impl BehaviorEvent {
    pub const COUNT: usize = 9;
    pub const ALL: [BehaviorEvent; 9] = [
        BehaviorEvent::None,
        BehaviorEvent::HeadShake,
        BehaviorEvent::Dance,
        BehaviorEvent::Jump,
        BehaviorEvent::Spin,
        BehaviorEvent::Wave,
        BehaviorEvent::Growl,
        BehaviorEvent::Sit,
        BehaviorEvent::Chirp,
    ];

    pub fn index(self) -> usize {
        BehaviorEvent::ALL.iter().position(|e| *e == self).unwrap()
    }

    pub fn from_index(i: usize) -> Option<BehaviorEvent> {
        BehaviorEvent::ALL.get(i).copied()
    }

    pub fn is_none(self) -> bool {
        self == BehaviorEvent::None
    }

    pub fn name(self) -> &'static str {
        match self {
            BehaviorEvent::None => "none",
            BehaviorEvent::HeadShake => "head_shake",
            BehaviorEvent::Dance => "dance",
            BehaviorEvent::Jump => "jump",
            BehaviorEvent::Spin => "spin",
            BehaviorEvent::Wave => "wave",
            BehaviorEvent::Growl => "growl",
            BehaviorEvent::Sit => "sit",
            BehaviorEvent::Chirp => "chirp",
        }
    }

    pub fn parse(s: &str) -> Option<BehaviorEvent> {
        BehaviorEvent::ALL.into_iter().find(|e| e.name().eq_ignore_ascii_case(s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Waveform {
    Const(f64),
    /// `amp * sin(2π f τ)` with τ the time since clip start.
    Sine { amp: f64, freq_hz: f64 },
}

impl Waveform {
    fn eval(&self, tau: f64) -> f64 {
        match *self {
            Waveform::Const(v) => v,
            Waveform::Sine { amp, freq_hz } => amp * (2.0 * PI * freq_hz * tau).sin(),
        }
    }
}

/// Canned command overlay that replaces the operator command while a
/// behavior plays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorClip {
    pub event: BehaviorEvent,
    pub duration: f64,
    pub channels: Vec<(usize, Waveform)>,
}

impl BehaviorClip {
    pub fn command_at(&self, tau: f64) -> CommandVector {
        let mut c = [0.0; NUM_CHANNELS];
        for (ch, w) in &self.channels {
            c[*ch] = w.eval(tau).clamp(-1.0, 1.0);
        }
        CommandVector(c)
    }
}

fn default_clips() -> Vec<BehaviorClip> {
    use BehaviorEvent as E;
    use Waveform::{Const, Sine};
    vec![
        BehaviorClip {
            event: E::HeadShake,
            duration: 1.2,
            channels: vec![(3, Sine { amp: 0.9, freq_hz: 2.5 }), (4, Const(-0.2))],
        },
        BehaviorClip {
            event: E::Dance,
            duration: 3.0,
            channels: vec![
                (1, Sine { amp: 0.4, freq_hz: 1.0 }),
                (5, Sine { amp: 0.8, freq_hz: 2.0 }),
                (6, Sine { amp: 0.6, freq_hz: 2.0 }),
                (8, Const(1.0)),
            ],
        },
        BehaviorClip {
            event: E::Jump,
            duration: 1.0,
            channels: vec![(6, Sine { amp: 1.0, freq_hz: 1.0 }), (8, Const(0.8))],
        },
        BehaviorClip {
            event: E::Spin,
            duration: 2.0,
            channels: vec![(2, Const(1.0)), (8, Const(0.6))],
        },
        BehaviorClip {
            event: E::Wave,
            duration: 2.0,
            channels: vec![(5, Sine { amp: 0.7, freq_hz: 1.5 }), (9, Const(0.8))],
        },
        BehaviorClip {
            event: E::Growl,
            duration: 1.5,
            channels: vec![(0, Const(0.2)), (4, Const(-0.4)), (9, Const(-1.0))],
        },
        BehaviorClip {
            event: E::Sit,
            duration: 3.0,
            channels: vec![(6, Const(-1.0)), (4, Const(-0.3))],
        },
        BehaviorClip {
            event: E::Chirp,
            duration: 1.0,
            channels: vec![(4, Const(0.5)), (9, Sine { amp: 1.0, freq_hz: 3.0 })],
        },
    ]
}

/// Kinematic limits and behavior playback that map the shared command
/// interface onto a specific robot body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbodimentProfile {
    pub name: String,
    pub v_max: f64,
    pub v_lat_max: f64,
    pub omega_max: f64,
    /// Head yaw, pitch and roll slew limits in rad/s.
    pub head_rate: [f64; 3],
    /// Head yaw, pitch and roll ranges reached at full stick deflection.
    pub head_range: [f64; 3],
    pub height_range: f64,
    pub footprint_radius: f64,
    pub clips: Vec<BehaviorClip>,
}

impl EmbodimentProfile {
    pub fn bipod() -> Self {
        EmbodimentProfile {
            name: "bipod".into(),
            v_max: 1.2,
            v_lat_max: 0.4,
            omega_max: 2.0,
            head_rate: [4.0, 3.0, 3.0],
            head_range: [0.9, 0.6, 0.4],
            height_range: 0.08,
            footprint_radius: 0.25,
            clips: default_clips(),
        }
    }

    pub fn humanoid() -> Self {
        EmbodimentProfile {
            name: "humanoid".into(),
            v_max: 0.8,
            v_lat_max: 0.3,
            omega_max: 1.4,
            head_rate: [2.5, 2.0, 2.0],
            head_range: [1.0, 0.5, 0.3],
            height_range: 0.12,
            footprint_radius: 0.35,
            clips: default_clips(),
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "bipod" => Ok(Self::bipod()),
            "humanoid" => Ok(Self::humanoid()),
            other => Err(Error::config(format!("unknown embodiment profile {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let limits = [self.v_max, self.v_lat_max, self.omega_max, self.footprint_radius, self.height_range]
            .into_iter()
            .chain(self.head_rate)
            .chain(self.head_range);
        for v in limits {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("profile {} has non-positive limit", self.name)));
            }
        }
        Ok(())
    }

    pub fn clip(&self, event: BehaviorEvent) -> Option<&BehaviorClip> {
        self.clips.iter().find(|c| c.event == event)
    }

    pub fn clip_duration(&self, event: BehaviorEvent) -> f64 {
        self.clip(event).map_or(0.0, |c| c.duration)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActiveBehavior {
    pub event: BehaviorEvent,
    pub elapsed: f64,
    pub remaining: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub time: f64,
    pub robot: Pose,
    /// Head yaw, pitch, roll offsets in radians.
    pub head: [f64; 3],
    pub body_height: f64,
    pub mode: Mode,
    pub behavior: Option<ActiveBehavior>,
    pub human: Pose,
}

impl WorldState {
    pub fn new(robot: Pose, human: Pose) -> Self {
        WorldState {
            time: 0.0,
            robot,
            head: [0.0; 3],
            body_height: 0.0,
            mode: Mode::Walking,
            behavior: None,
            human,
        }
    }

    pub fn active_event(&self) -> BehaviorEvent {
        self.behavior.map_or(BehaviorEvent::None, |b| b.event)
    }

    pub fn distance(&self) -> f64 {
        self.robot.planar_distance(&self.human)
    }
}

/// Diagnostics from one world step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepReport {
    pub clamped: bool,
    pub rejected_event: Option<BehaviorEvent>,
    pub started_event: Option<BehaviorEvent>,
    pub base_velocity: [f64; 2],
    pub footprint_contact: bool,
}

const HUMAN_RADIUS: f64 = 0.25;

fn slew(current: f64, target: f64, max_delta: f64) -> f64 {
    current + (target - current).clamp(-max_delta, max_delta)
}

/// Advances the world by one explicit Euler step.
pub fn step_world(
    state: &WorldState,
    cmd: &CommandVector,
    mode: Mode,
    event: BehaviorEvent,
    profile: &EmbodimentProfile,
    dt: f64,
) -> (WorldState, StepReport) {
    let mut report = StepReport::default();
    let (cmd, clamped) = cmd.clamped();
    report.clamped = clamped;
    let mut next = state.clone();
    next.mode = mode;

    if !event.is_none() {
        if state.behavior.is_some() {
            report.rejected_event = Some(event);
        } else if let Some(clip) = profile.clip(event) {
            next.behavior = Some(ActiveBehavior { event, elapsed: 0.0, remaining: clip.duration });
            report.started_event = Some(event);
        }
    }

    let effective = match next.behavior {
        Some(b) => profile.clip(b.event).map_or(cmd, |clip| clip.command_at(b.elapsed)),
        None => cmd,
    };
    let c = effective.0;

    if mode == Mode::Walking {
        let speed = 1.0 + 0.5 * c[7].min(0.0);
        let vx = profile.v_max * c[0] * speed;
        let vy = profile.v_lat_max * c[1] * speed;
        let yaw = state.robot.yaw();
        let (s, co) = yaw.sin_cos();
        let wv = [co * vx - s * vy, s * vx + co * vy];
        let p = state.robot.position;
        let new_yaw = wrap_angle(yaw + profile.omega_max * c[2] * dt);
        next.robot = Pose {
            position: [p[0] + wv[0] * dt, p[1] + wv[1] * dt, p[2]],
            orientation: if c[2] == 0.0 { state.robot.orientation } else { Quat::from_yaw(new_yaw) },
        };
        report.base_velocity = wv;
    }

    for i in 0..3 {
        let target = c[3 + i] * profile.head_range[i];
        next.head[i] = slew(state.head[i], target, profile.head_rate[i] * dt);
    }
    next.body_height = slew(state.body_height, c[6] * profile.height_range, 0.5 * dt);

    if let Some(b) = next.behavior.as_mut() {
        b.elapsed += dt;
        b.remaining = (b.remaining - dt).max(0.0);
        if b.remaining <= 1e-12 {
            next.behavior = None;
        }
    }

    next.time = state.time + dt;
    report.footprint_contact =
        next.robot.planar_distance(&next.human) < profile.footprint_radius + HUMAN_RADIUS;
    (next, report)
}

/// Random walker that picks goals in the arena, occasionally approaching or
/// retreating from the robot.
#[derive(Debug, Clone)]
pub struct WaypointWalker {
    rng: ChaCha8Rng,
    pub arena_half: f64,
    pub height: f64,
    goal: [f64; 2],
    speed: f64,
    pause: f64,
    yaw: f64,
}

pub const WALKER_MIN_SPEED: f64 = 0.3;
pub const WALKER_MAX_SPEED: f64 = 1.4;

impl WaypointWalker {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let height = rng.gen_range(1.55..1.85);
        let mut w = WaypointWalker {
            rng,
            arena_half: ARENA_HALF,
            height,
            goal: [0.0, 0.0],
            speed: 0.8,
            pause: 0.0,
            yaw: 0.0,
        };
        w.goal = w.uniform_goal();
        w.speed = w.sample_speed();
        w
    }

    pub fn sample_speed(&mut self) -> f64 {
        self.rng.gen_range(WALKER_MIN_SPEED..=WALKER_MAX_SPEED)
    }

    fn uniform_goal(&mut self) -> [f64; 2] {
        let h = self.arena_half - 0.3;
        [self.rng.gen_range(-h..h), self.rng.gen_range(-h..h)]
    }

    fn clamp_to_arena(&self, p: [f64; 2]) -> [f64; 2] {
        let h = self.arena_half - 0.3;
        [p[0].clamp(-h, h), p[1].clamp(-h, h)]
    }

    /// Initial human pose for a fresh episode.
    pub fn start_pose(&mut self) -> Pose {
        let p = self.uniform_goal();
        self.yaw = self.rng.gen_range(-PI..PI);
        Pose::planar(p[0], p[1], self.height, self.yaw)
    }

    fn next_goal(&mut self, human: [f64; 2], robot: [f64; 2]) {
        let r: f64 = self.rng.gen();
        self.goal = if r < 0.2 {
            // walk straight at the robot and stop just short of it
            let d = [robot[0] - human[0], robot[1] - human[1]];
            let n = d[0].hypot(d[1]).max(1e-6);
            let stop = self.rng.gen_range(0.4..0.9);
            let reach = (n - stop).max(0.0);
            self.clamp_to_arena([human[0] + d[0] / n * reach, human[1] + d[1] / n * reach])
        } else if r < 0.3 {
            let d = [human[0] - robot[0], human[1] - robot[1]];
            let n = d[0].hypot(d[1]).max(1e-6);
            let len = self.rng.gen_range(1.0..2.5);
            self.clamp_to_arena([human[0] + d[0] / n * len, human[1] + d[1] / n * len])
        } else {
            self.uniform_goal()
        };
        self.speed = self.sample_speed();
    }

    pub fn step(&mut self, human: &Pose, robot: &Pose, dt: f64) -> Pose {
        let hp = [human.position[0], human.position[1]];
        let rp = [robot.position[0], robot.position[1]];
        let mut pos = hp;
        let desired_yaw;
        if self.pause > 0.0 {
            self.pause -= dt;
            desired_yaw = (rp[1] - hp[1]).atan2(rp[0] - hp[0]);
            if self.pause <= 0.0 {
                self.next_goal(hp, rp);
            }
        } else {
            let d = [self.goal[0] - hp[0], self.goal[1] - hp[1]];
            let n = d[0].hypot(d[1]);
            let stepl = self.speed * dt;
            if n <= stepl {
                pos = self.goal;
                self.pause = self.rng.gen_range(0.5..3.0);
                desired_yaw = self.yaw;
            } else {
                pos = [hp[0] + d[0] / n * stepl, hp[1] + d[1] / n * stepl];
                desired_yaw = d[1].atan2(d[0]);
            }
        }
        self.yaw = wrap_angle(self.yaw + wrap_angle(desired_yaw - self.yaw).clamp(-3.0 * dt, 3.0 * dt));
        Pose::planar(pos[0], pos[1], self.height, self.yaw)
    }
}

/// Replays a recorded human track frame by frame.
#[derive(Debug, Clone)]
pub struct ReplaySource {
    frames: Vec<Pose>,
    cursor: usize,
}

impl ReplaySource {
    pub fn new(frames: Vec<Pose>) -> Self {
        ReplaySource { frames, cursor: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.frames.len() - self.cursor
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedPose {
    pub t: f64,
    pub pose: Pose,
}

/// Bounded queue of live human poses. Writers drop the oldest entry on
/// overflow; the simulator drains it every step.
#[derive(Debug, Clone)]
pub struct LivePoseQueue {
    inner: Arc<Mutex<VecDeque<TimedPose>>>,
    capacity: usize,
}

impl LivePoseQueue {
    pub fn new(capacity: usize) -> Self {
        LivePoseQueue { inner: Arc::new(Mutex::new(VecDeque::with_capacity(capacity))), capacity: capacity.max(1) }
    }

    pub fn push(&self, pose: TimedPose) {
        let mut q = self.inner.lock().unwrap();
        if q.len() >= self.capacity {
            q.pop_front();
        }
        q.push_back(pose);
    }

    pub fn drain_latest(&self) -> Option<TimedPose> {
        let mut q = self.inner.lock().unwrap();
        let last = q.back().copied();
        q.clear();
        last
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Human fed by an external client through a [`LivePoseQueue`].
#[derive(Debug, Clone)]
pub struct LiveSource {
    pub queue: LivePoseQueue,
    last_update: Option<f64>,
    pub max_gap: f64,
}

impl LiveSource {
    pub fn new(queue: LivePoseQueue) -> Self {
        LiveSource { queue, last_update: None, max_gap: 0.5 }
    }
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum HumanSource {
    Walker(WaypointWalker),
    Replay(ReplaySource),
    Live(LiveSource),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HumanStatus {
    /// Replay exhausted; the episode is over.
    pub ended: bool,
    /// No fresh live pose for longer than the allowed gap.
    pub stale: bool,
}

/// Moves the human by one step according to `source`.
pub fn drive_human(state: &mut WorldState, source: &mut HumanSource, dt: f64) -> HumanStatus {
    let mut status = HumanStatus::default();
    match source {
        HumanSource::Walker(w) => {
            state.human = w.step(&state.human, &state.robot, dt);
        }
        HumanSource::Replay(r) => {
            if r.cursor < r.frames.len() {
                state.human = r.frames[r.cursor];
                r.cursor += 1;
            }
            status.ended = r.cursor >= r.frames.len();
        }
        HumanSource::Live(l) => {
            if let Some(p) = l.queue.drain_latest() {
                if p.pose.validate().is_ok() {
                    state.human = p.pose;
                    l.last_update = Some(state.time);
                }
            }
            status.stale = match l.last_update {
                Some(t) => state.time - t > l.max_gap + 1e-9,
                None => true,
            };
        }
    }
    status
}
