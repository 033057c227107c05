//! Scripted expert operator: mood-specific control laws that stand in for a
//! human at the gamepad when generating training data.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Episode, EpisodeMeta, Frame};
use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Pose};
use crate::sim::{
    drive_human, step_world, BehaviorEvent, CommandVector, EmbodimentProfile, HumanSource, Mode, WaypointWalker,
    WorldState, ARENA_HALF, DT, NUM_CHANNELS, RATE_HZ,
};

/// Bumped whenever a control-law constant changes.
pub const ORACLE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mood {
    Default,
    Angry,
    Sad,
    Shy,
    Happy,
}

impl Mood {
    pub const ALL: [Mood; 5] = [Mood::Default, Mood::Angry, Mood::Sad, Mood::Shy, Mood::Happy];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Mood> {
        Mood::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Mood::Default => "default",
            Mood::Angry => "angry",
            Mood::Sad => "sad",
            Mood::Shy => "shy",
            Mood::Happy => "happy",
        }
    }

    pub fn parse(s: &str) -> Option<Mood> {
        Mood::ALL.into_iter().find(|m| m.name().eq_ignore_ascii_case(s))
    }

    /// Recording length per mood, in minutes.
    pub fn session_minutes(self) -> f64 {
        match self {
            Mood::Default => 8.0,
            Mood::Angry => 6.0,
            Mood::Sad => 8.0,
            Mood::Shy => 7.0,
            Mood::Happy => 8.0,
        }
    }
}

impl std::str::FromStr for Mood {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mood::parse(s).ok_or_else(|| Error::config(format!("unknown mood {s:?}")))
    }
}

/// Time constant of the stick lag filter.
pub const LAG_TAU: f64 = 0.15;
pub const HEADING_GAIN: f64 = 1.5;
pub const DEFAULT_SETPOINT: f64 = 1.2;
pub const RETREAT_RADIUS: f64 = 0.8;
pub const RETREAT_CLOSING_SPEED: f64 = 0.3;
pub const SHY_SETPOINT: f64 = 1.8;
pub const HAPPY_CIRCLE_ENTER: f64 = 0.6;
pub const HAPPY_CIRCLE_EXIT: f64 = 1.0;
pub const ANGRY_FLEE_RADIUS: f64 = 3.5;
pub const SAD_DRIFT_RADIUS: f64 = 2.5;
pub const STANDING_BAND: f64 = 0.3;
pub const STANDING_DWELL: f64 = 3.0;
pub const MODE_HYSTERESIS: f64 = 2.0;
/// Pause after an event ends before the operator presses another button.
pub const EVENT_GAP: f64 = 2.0;
const NOISE_SIGMA: f64 = 0.05;
const NOISE_THETA: f64 = 1.0;
const WALL_MARGIN: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct OperatorState {
    /// Lag-filtered stick output.
    pub cmd: CommandVector,
    /// Seconds until each event may fire again.
    pub cooldowns: [f64; BehaviorEvent::COUNT],
    pub mode: Mode,
    pub since_switch: f64,
    pub in_band: f64,
    rng: ChaCha8Rng,
    noise: [f64; NUM_CHANNELS],
    prev_human: Option<[f64; 2]>,
    human_vel: [f64; 2],
    shy_stop: f64,
    circling: bool,
}

impl OperatorState {
    pub fn new(seed: u64) -> Self {
        OperatorState {
            cmd: CommandVector::ZERO,
            cooldowns: [0.0; BehaviorEvent::COUNT],
            mode: Mode::Walking,
            since_switch: MODE_HYSTERESIS,
            in_band: 0.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            noise: [0.0; NUM_CHANNELS],
            prev_human: None,
            human_vel: [0.0; 2],
            shy_stop: 0.0,
            circling: false,
        }
    }
}

/// Quantities every control law looks at.
#[derive(Debug, Clone, Copy)]
struct Percept {
    distance: f64,
    /// Bearing of the human in the robot frame, radians.
    bearing: f64,
    /// Human speed toward the robot, m/s.
    closing: f64,
    human_speed: f64,
}

fn perceive(world: &WorldState, op: &mut OperatorState, dt: f64) -> Percept {
    let h = [world.human.position[0], world.human.position[1]];
    let r = [world.robot.position[0], world.robot.position[1]];
    if let Some(prev) = op.prev_human {
        let a = dt / 0.2;
        for i in 0..2 {
            let v = (h[i] - prev[i]) / dt;
            op.human_vel[i] += a * (v - op.human_vel[i]);
        }
    }
    op.prev_human = Some(h);
    let d = [r[0] - h[0], r[1] - h[1]];
    let distance = d[0].hypot(d[1]);
    let closing = if distance > 1e-6 { (op.human_vel[0] * d[0] + op.human_vel[1] * d[1]) / distance } else { 0.0 };
    let bearing = wrap_angle((h[1] - r[1]).atan2(h[0] - r[0]) - world.robot.yaw());
    Percept { distance, bearing, closing, human_speed: op.human_vel[0].hypot(op.human_vel[1]) }
}

/// Inward push near the arena walls, zero in the interior.
fn wall_push(p: [f64; 2]) -> [f64; 2] {
    let mut out = [0.0; 2];
    for i in 0..2 {
        let lo = p[i] + ARENA_HALF;
        let hi = ARENA_HALF - p[i];
        if lo < WALL_MARGIN {
            out[i] += (WALL_MARGIN - lo) / WALL_MARGIN;
        }
        if hi < WALL_MARGIN {
            out[i] -= (WALL_MARGIN - hi) / WALL_MARGIN;
        }
    }
    out
}

/// Forward speed and turn commands that head along the world direction `dir`.
fn steer(world: &WorldState, dir: [f64; 2], speed: f64) -> (f64, f64) {
    let n = dir[0].hypot(dir[1]);
    if n < 1e-6 {
        return (0.0, 0.0);
    }
    let err = wrap_angle(dir[1].atan2(dir[0]) - world.robot.yaw());
    let c2 = (HEADING_GAIN * err).clamp(-1.0, 1.0);
    let c0 = speed * err.cos().max(0.0);
    (c0, c2)
}

/// Direction away from the human, bent inward near walls.
fn flee_direction(world: &WorldState) -> [f64; 2] {
    let r = [world.robot.position[0], world.robot.position[1]];
    let h = [world.human.position[0], world.human.position[1]];
    let d = [r[0] - h[0], r[1] - h[1]];
    let n = d[0].hypot(d[1]).max(1e-6);
    let w = wall_push(r);
    let mut dir = [d[0] / n + 2.0 * w[0], d[1] / n + 2.0 * w[1]];
    if dir[0].hypot(dir[1]) < 0.2 {
        // cornered: slide along the wall
        dir = [-d[1] / n, d[0] / n];
    }
    dir
}

fn head_track(p: &Percept) -> f64 {
    (p.bearing / 0.9).clamp(-1.0, 1.0)
}

struct Targets {
    c: [f64; NUM_CHANNELS],
    mode: Mode,
}

fn update_mode(op: &mut OperatorState, p: &Percept, setpoint: f64, dt: f64) {
    op.since_switch += dt;
    let err = (p.distance - setpoint).abs();
    if err < STANDING_BAND && p.bearing.abs() < 0.6 {
        op.in_band += dt;
    } else {
        op.in_band = 0.0;
    }
    if op.since_switch < MODE_HYSTERESIS {
        return;
    }
    let next = match op.mode {
        Mode::Walking if op.in_band >= STANDING_DWELL => Mode::Standing,
        Mode::Standing if err > STANDING_BAND + 0.2 || p.bearing.abs() > 1.0 => Mode::Walking,
        m => m,
    };
    if next != op.mode {
        op.mode = next;
        op.since_switch = 0.0;
    }
}

fn default_law(world: &WorldState, op: &mut OperatorState, p: &Percept, dt: f64) -> Targets {
    update_mode(op, p, DEFAULT_SETPOINT, dt);
    let mut c = [0.0; NUM_CHANNELS];
    c[4] = 0.1;
    c[9] = 0.2;
    if op.mode == Mode::Standing {
        c[3] = head_track(p);
        c[6] = 0.5;
    } else {
        c[2] = (HEADING_GAIN * p.bearing).clamp(-1.0, 1.0);
        c[0] = (0.8 * (p.distance - DEFAULT_SETPOINT)).clamp(-0.5, 1.0) * p.bearing.cos().max(0.0);
        if p.distance < RETREAT_RADIUS && p.closing > RETREAT_CLOSING_SPEED {
            c[0] = -0.8;
        }
        c[3] = 0.5 * head_track(p);
        let w = wall_push([world.robot.position[0], world.robot.position[1]]);
        if w != [0.0, 0.0] && c[0] < 0.0 {
            // never back into a wall
            c[0] = 0.0;
        }
    }
    Targets { c, mode: op.mode }
}

fn angry_law(world: &WorldState, _op: &mut OperatorState, p: &Percept) -> Targets {
    let mut c = [0.0; NUM_CHANNELS];
    if p.distance < ANGRY_FLEE_RADIUS {
        let (c0, c2) = steer(world, flee_direction(world), 1.0);
        c[0] = c0;
        c[2] = c2;
    } else {
        // glare at the human from a distance
        c[2] = (HEADING_GAIN * p.bearing).clamp(-1.0, 1.0) * 0.5;
        c[3] = head_track(p);
    }
    c[4] = -0.1;
    c[7] = 0.2;
    c[8] = -0.6;
    c[9] = -0.5;
    Targets { c, mode: Mode::Walking }
}

fn sad_law(world: &WorldState, _op: &mut OperatorState, p: &Percept) -> Targets {
    let mut c = [0.0; NUM_CHANNELS];
    if p.distance < SAD_DRIFT_RADIUS {
        let (c0, c2) = steer(world, flee_direction(world), 0.3);
        c[0] = c0;
        c[2] = 0.5 * c2;
    }
    c[4] = -0.75;
    c[5] = 0.2;
    c[6] = -0.3;
    c[7] = -0.6;
    c[8] = -0.4;
    c[9] = 0.6;
    Targets { c, mode: Mode::Walking }
}

fn shy_law(_world: &WorldState, op: &mut OperatorState, p: &Percept, dt: f64) -> Targets {
    update_mode(op, p, SHY_SETPOINT, dt);
    let mut c = [0.0; NUM_CHANNELS];
    // look away from the human
    let away = if p.bearing >= 0.0 { -0.7 } else { 0.7 };
    c[3] = away;
    c[4] = -0.55;
    c[5] = 0.3;
    c[8] = 0.3;
    c[9] = -0.3;
    if op.mode == Mode::Standing {
        c[6] = 0.5;
    } else {
        if op.shy_stop > 0.0 {
            op.shy_stop -= dt;
        } else if op.rng.gen_bool(0.3 * dt) {
            op.shy_stop = op.rng.gen_range(1.0..3.0);
        }
        c[2] = (HEADING_GAIN * p.bearing).clamp(-1.0, 1.0);
        if op.shy_stop <= 0.0 {
            c[0] = (0.8 * (p.distance - SHY_SETPOINT)).clamp(-0.4, 0.4) * p.bearing.cos().max(0.0);
        }
        c[7] = -0.3;
    }
    Targets { c, mode: op.mode }
}

fn happy_law(_world: &WorldState, op: &mut OperatorState, p: &Percept) -> Targets {
    let mut c = [0.0; NUM_CHANNELS];
    if op.circling && p.distance > HAPPY_CIRCLE_EXIT {
        op.circling = false;
    } else if !op.circling && p.distance < HAPPY_CIRCLE_ENTER {
        op.circling = true;
    }
    if op.circling {
        c[0] = 0.4;
        c[2] = 0.8;
    } else {
        c[0] = p.bearing.cos().max(0.0);
        c[2] = (HEADING_GAIN * p.bearing).clamp(-1.0, 1.0);
    }
    c[3] = 0.5 * head_track(p);
    c[4] = 0.3;
    c[7] = 0.3;
    c[8] = 0.7;
    c[9] = 0.5;
    Targets { c, mode: Mode::Walking }
}

/// State-gated event hazards in events per second for the current percept.
fn event_hazards(mood: Mood, p: &Percept) -> Vec<(BehaviorEvent, f64)> {
    use BehaviorEvent as E;
    match mood {
        Mood::Happy => {
            if p.distance > 2.0 {
                vec![(E::Spin, 0.6)]
            } else if p.human_speed > 0.9 {
                vec![(E::Jump, 0.5)]
            } else if p.distance < 1.0 {
                vec![(E::Dance, 0.15)]
            } else {
                vec![]
            }
        }
        Mood::Angry => {
            if p.closing > 0.4 && p.distance < 3.0 {
                vec![(E::Growl, 0.6)]
            } else if p.distance < 2.5 {
                vec![(E::HeadShake, 0.2)]
            } else {
                vec![]
            }
        }
        Mood::Sad => {
            if p.closing > 0.3 && p.distance < 2.5 {
                vec![(E::HeadShake, 0.5)]
            } else {
                vec![]
            }
        }
        Mood::Default | Mood::Shy => vec![],
    }
}

/// One operator decision: lag-filtered sticks, an optional button press and
/// the mode selector.
pub fn operator_policy(
    mood: Mood,
    world: &WorldState,
    op: &OperatorState,
    profile: &EmbodimentProfile,
    dt: f64,
) -> (CommandVector, BehaviorEvent, Mode, OperatorState) {
    let mut op = op.clone();
    let p = perceive(world, &mut op, dt);
    let t = match mood {
        Mood::Default => default_law(world, &mut op, &p, dt),
        Mood::Angry => angry_law(world, &mut op, &p),
        Mood::Sad => sad_law(world, &mut op, &p),
        Mood::Shy => shy_law(world, &mut op, &p, dt),
        Mood::Happy => happy_law(world, &mut op, &p),
    };

    let a = (dt / LAG_TAU).min(1.0);
    let k = (2.0 * dt / NOISE_THETA).sqrt() * NOISE_SIGMA;
    for i in 0..NUM_CHANNELS {
        let z: f64 = op.rng.sample(StandardNormal);
        op.noise[i] += -op.noise[i] * dt / NOISE_THETA + k * z;
        let target = (t.c[i] + op.noise[i]).clamp(-1.0, 1.0);
        op.cmd.0[i] += a * (target - op.cmd.0[i]);
        op.cmd.0[i] = op.cmd.0[i].clamp(-1.0, 1.0);
    }

    for c in op.cooldowns.iter_mut() {
        *c = (*c - dt).max(0.0);
    }
    let mut event = BehaviorEvent::None;
    if world.behavior.is_none() {
        for (e, rate) in event_hazards(mood, &p) {
            if op.cooldowns[e.index()] <= 0.0 && profile.clip(e).is_some() && op.rng.gen_bool((rate * dt).min(1.0)) {
                event = e;
                let hold = profile.clip_duration(e) + EVENT_GAP;
                // one button at a time: every event waits out the clip
                for c in op.cooldowns.iter_mut() {
                    *c = c.max(hold);
                }
                break;
            }
        }
    }
    (op.cmd, event, t.mode, op)
}

/// Initial world for a recording: robot and human at random, separated by at
/// least 1.5 m.
pub fn initial_world(walker: &mut WaypointWalker, rng: &mut ChaCha8Rng) -> WorldState {
    let human = walker.start_pose();
    let h = ARENA_HALF - 0.5;
    loop {
        let x = rng.gen_range(-h..h);
        let y = rng.gen_range(-h..h);
        let robot = Pose::planar(x, y, 0.0, rng.gen_range(-PI..PI));
        if robot.planar_distance(&human) >= 1.5 {
            return WorldState::new(robot, human);
        }
    }
}

/// Records `duration` seconds of the oracle interacting with a random walker.
pub fn sample_session(mood: Mood, duration: f64, seed: u64) -> Result<Episode> {
    sample_session_with(mood, duration, seed, &EmbodimentProfile::bipod())
}

pub fn sample_session_with(mood: Mood, duration: f64, seed: u64, profile: &EmbodimentProfile) -> Result<Episode> {
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::validation(format!("session duration {duration} must be positive")));
    }
    let frames_n = (duration * RATE_HZ).round() as usize;
    let mut walker = WaypointWalker::new(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F0F);
    let mut world = initial_world(&mut walker, &mut rng);
    let mut source = HumanSource::Walker(walker);
    let mut op = OperatorState::new(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 1);
    let mut frames = Vec::with_capacity(frames_n);
    for i in 0..frames_n {
        let (cmd, event, mode, next_op) = operator_policy(mood, &world, &op, profile, DT);
        op = next_op;
        frames.push(Frame {
            time: i as f64 * DT,
            robot: world.robot.quantized(),
            human: world.human.quantized(),
            cmd: cmd.quantized(),
            event,
            mode,
        });
        let (next, _) = step_world(&world, &cmd, mode, event, profile, DT);
        world = next;
        drive_human(&mut world, &mut source, DT);
    }
    Ok(Episode {
        mood,
        seed,
        rate_hz: RATE_HZ,
        frames,
        meta: EpisodeMeta { oracle_version: ORACLE_VERSION, profile: profile.name.clone() },
    })
}

/// Drives the oracle against an arbitrary human source, returning the
/// visited world states (used for oracle-in-the-loop evaluation).
pub struct OraclePilot {
    pub mood: Mood,
    pub state: OperatorState,
}

impl OraclePilot {
    pub fn new(mood: Mood, seed: u64) -> Self {
        OraclePilot { mood, state: OperatorState::new(seed) }
    }

    pub fn act(&mut self, world: &WorldState, profile: &EmbodimentProfile) -> (CommandVector, BehaviorEvent, Mode) {
        let (cmd, event, mode, next) = operator_policy(self.mood, world, &self.state, profile, DT);
        self.state = next;
        (cmd, event, mode)
    }
}
