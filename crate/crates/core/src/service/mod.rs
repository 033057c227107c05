//! Live session service: a deterministic per-tick session core and the
//! web-socket server that paces it against wall-clock time.

pub mod protocol;
pub mod server;

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::controller::{Controller, ControllerConfig};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::model::sampler::CommandModel;
use crate::operator::Mood;
use crate::sim::{drive_human, step_world, EmbodimentProfile, HumanSource, LivePoseQueue, LiveSource, TimedPose, WorldState, DT};

pub use protocol::{SessionMessage, WirePose, SCHEMA_VERSION};
pub use server::{serve, ServeConfig, ServerHandle};

/// Models selectable with `set_mood`.
#[derive(Clone)]
pub struct MoodModels {
    pub name: String,
    pub models: BTreeMap<Mood, Arc<dyn CommandModel>>,
}

impl MoodModels {
    pub fn single(name: &str, mood: Mood, model: Arc<dyn CommandModel>) -> Self {
        MoodModels { name: name.into(), models: BTreeMap::from([(mood, model)]) }
    }

    fn get(&self, mood: Mood) -> Result<Arc<dyn CommandModel>> {
        self.models
            .get(&mood)
            .cloned()
            .ok_or_else(|| Error::config(format!("no checkpoint configured for mood {}", mood.name())))
    }
}

pub const DEFAULT_HUMAN: [f64; 3] = [1.5, 0.0, 1.7];
/// Seconds between status messages.
pub const STATUS_PERIOD: f64 = 1.0;

/// Latest client pose plus the arrival time of the oldest unconsumed one.
#[derive(Clone)]
pub struct PoseCell {
    queue: LivePoseQueue,
    received: Arc<Mutex<Option<Instant>>>,
}

impl Default for PoseCell {
    fn default() -> Self {
        PoseCell { queue: LivePoseQueue::new(64), received: Arc::new(Mutex::new(None)) }
    }
}

impl PoseCell {
    pub fn push(&self, t: f64, pose: Pose) {
        self.queue.push(TimedPose { t, pose });
        self.received.lock().unwrap().get_or_insert_with(Instant::now);
    }

    fn take_received(&self) -> Option<Instant> {
        self.received.lock().unwrap().take()
    }
}

/// One robot, one human, one controller; advanced one tick at a time.
pub struct Session {
    models: MoodModels,
    profile: EmbodimentProfile,
    controller_cfg: ControllerConfig,
    async_inference: bool,
    mood: Mood,
    seed: u64,
    world: WorldState,
    cell: PoseCell,
    source: HumanSource,
    controller: Controller,
    last_t: f64,
    latency_ms: f64,
    ticks: u64,
}

impl Session {
    pub fn new(
        models: MoodModels,
        profile: EmbodimentProfile,
        controller_cfg: ControllerConfig,
        mood: Mood,
        seed: u64,
        async_inference: bool,
    ) -> Result<Self> {
        let model = models.get(mood)?;
        let controller = Self::make_controller(model, &profile, &controller_cfg, seed, async_inference)?;
        let cell = PoseCell::default();
        Ok(Session {
            world: Self::start_world(seed),
            source: HumanSource::Live(LiveSource::new(cell.queue.clone())),
            cell,
            models,
            profile,
            controller_cfg,
            async_inference,
            mood,
            seed,
            controller,
            last_t: 0.0,
            latency_ms: 0.0,
            ticks: 0,
        })
    }

    fn make_controller(
        model: Arc<dyn CommandModel>,
        profile: &EmbodimentProfile,
        cfg: &ControllerConfig,
        seed: u64,
        async_inference: bool,
    ) -> Result<Controller> {
        if async_inference {
            Controller::with_worker(model, profile.clone(), cfg.clone(), seed)
        } else {
            Controller::new(model, profile.clone(), cfg.clone(), seed)
        }
    }

    fn start_world(seed: u64) -> WorldState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let human = Pose::planar(DEFAULT_HUMAN[0], DEFAULT_HUMAN[1], DEFAULT_HUMAN[2], std::f64::consts::PI);
        WorldState::new(Pose::planar(0.0, 0.0, 0.0, yaw), human)
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    /// Shared latest-pose cell for a reader thread.
    pub fn pose_cell(&self) -> PoseCell {
        self.cell.clone()
    }

    pub fn mood(&self) -> Mood {
        self.mood
    }

    pub fn hello(&self, resumed: bool) -> SessionMessage {
        SessionMessage::Hello {
            t: self.world.time,
            schema_version: SCHEMA_VERSION,
            model: self.models.name.clone(),
            profile: self.profile.name.clone(),
            mood: self.mood.name().into(),
            resumed,
        }
    }

    fn error(&self, message: String) -> SessionMessage {
        SessionMessage::Error { t: self.world.time, message }
    }

    /// Applies a client message; returns an optional reply.
    pub fn handle(&mut self, msg: SessionMessage) -> Option<SessionMessage> {
        match msg {
            SessionMessage::HumanPose { t, x, y, z, qw, qx, qy, qz } => match (WirePose { x, y, z, qw, qx, qy, qz }).to_pose() {
                Ok(pose) => {
                    self.cell.push(t, pose);
                    None
                }
                Err(e) => Some(self.error(format!("invalid human pose: {e}"))),
            },
            SessionMessage::SetMood { mood, .. } => {
                let parsed = match Mood::parse(&mood) {
                    Some(m) => m,
                    None => return Some(self.error(format!("unknown mood {mood}"))),
                };
                match self.models.get(parsed).and_then(|m| self.controller.swap_model(m)) {
                    Ok(()) => {
                        self.mood = parsed;
                        Some(self.hello(true))
                    }
                    Err(e) => Some(self.error(e.to_string())),
                }
            }
            SessionMessage::Reset { seed, .. } => match self.reset(seed) {
                Ok(()) => Some(self.hello(false)),
                Err(e) => Some(self.error(e.to_string())),
            },
            other => Some(self.error(format!("{} is a server message", other.tag()))),
        }
    }

    pub fn reset(&mut self, seed: u64) -> Result<()> {
        let model = self.models.get(self.mood)?;
        self.controller = Self::make_controller(model, &self.profile, &self.controller_cfg, seed, self.async_inference)?;
        self.seed = seed;
        self.world = Self::start_world(seed);
        self.cell.queue.drain_latest();
        self.cell.take_received();
        self.source = HumanSource::Live(LiveSource::new(self.cell.queue.clone()));
        self.last_t = 0.0;
        self.ticks = 0;
        Ok(())
    }

    /// Advances one frame. Returns `world`, `commands`, and when due
    /// `event` and `status`, all stamped with the new session time.
    pub fn tick(&mut self) -> Result<Vec<SessionMessage>> {
        let status = drive_human(&mut self.world, &mut self.source, DT);
        let received = self.cell.take_received();
        let o = self.controller.tick(&self.world.robot, &self.world.human, status.stale)?;
        let (next, report) = step_world(&self.world, &o.cmd, o.mode, o.event, &self.profile, DT);
        self.world = next;
        if let Some(r) = received {
            self.latency_ms = r.elapsed().as_secs_f64() * 1000.0;
        }
        self.ticks += 1;
        let t = self.world.time.max(self.last_t);
        self.last_t = t;
        let mut out = vec![
            SessionMessage::World {
                t,
                robot: WirePose::from(&self.world.robot),
                head: self.world.head,
                mode: self.world.mode.name().into(),
                active_event: self.world.active_event().name().into(),
                human: WirePose::from(&self.world.human),
            },
            SessionMessage::commands(t, &o.cmd),
        ];
        if let Some(e) = report.started_event {
            out.push(SessionMessage::Event { t, name: e.name().into() });
        }
        if self.ticks.is_multiple_of((STATUS_PERIOD / DT).round() as u64) {
            out.push(SessionMessage::Status {
                t,
                model: self.models.name.clone(),
                profile: self.profile.name.clone(),
                latency_ms: self.latency_ms,
            });
        }
        Ok(out)
    }
}
