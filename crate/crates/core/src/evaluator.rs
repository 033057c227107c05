//! Closed-loop evaluation on replayed human motion, the FAE/TE/MSD metrics,
//! the ablation grid and the diversity probe.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::controller::{Controller, ControllerConfig};
use crate::dataset::{DatasetManifest, Episode, Split, WindowSample, DEFAULT_STRIDE};
use crate::error::{Error, Result};
use crate::geometry::{facing_angle, Pose};
use crate::model::config::{ModelConfig, Variant};
use crate::model::sampler::{CommandModel, Conditioning, TrainedModel};
use crate::operator::{Mood, OraclePilot};
use crate::sim::{
    drive_human, step_world, BehaviorEvent, CommandVector, EmbodimentProfile, HumanSource, Mode, ReplaySource, WorldState, DT,
    NUM_CHANNELS,
};
use crate::trainer::{train, TrainConfig, TrainSinks};

pub const REPORT_VERSION: u32 = 1;
pub const DEFAULT_EVAL_SEEDS: [u64; 3] = [11, 22, 33];

/// Mean facing-angle error in degrees.
pub fn fae(robot: &[Pose], human: &[Pose]) -> f64 {
    let n = robot.len().min(human.len());
    if n == 0 {
        return 0.0;
    }
    robot.iter().zip(human).map(|(r, h)| facing_angle(r, h)).sum::<f64>() / n as f64
}

/// Mean planar human-robot distance in meters.
pub fn te(robot: &[Pose], human: &[Pose]) -> f64 {
    let n = robot.len().min(human.len());
    if n == 0 {
        return 0.0;
    }
    robot.iter().zip(human).map(|(r, h)| r.planar_distance(h)).sum::<f64>() / n as f64
}

/// Mean over channels and consecutive frames of the squared first difference.
pub fn msd(stream: &[[f64; NUM_CHANNELS]]) -> Result<f64> {
    if stream.len() < 2 {
        return Err(Error::validation("msd needs at least 2 frames"));
    }
    let mut s = 0.0;
    for w in stream.windows(2) {
        for (a, b) in w[0].iter().zip(&w[1]) {
            s += (b - a) * (b - a);
        }
    }
    Ok(s / ((stream.len() - 1) * NUM_CHANNELS) as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        if values.is_empty() {
            return Stat { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Stat { mean, std: var.sqrt() }
    }
}

/// One closed-loop run.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub time: Vec<f64>,
    pub robot: Vec<Pose>,
    pub human: Vec<Pose>,
    pub cmd: Vec<[f64; NUM_CHANNELS]>,
    /// Sampled commands before smoothing; equals `cmd` for the oracle.
    pub raw: Vec<[f64; NUM_CHANNELS]>,
    pub modes: Vec<Mode>,
    pub events: Vec<BehaviorEvent>,
}

impl Trace {
    fn push(&mut self, world: &WorldState, cmd: &CommandVector, raw: &CommandVector, mode: Mode, event: BehaviorEvent) {
        self.time.push(world.time);
        self.robot.push(world.robot);
        self.human.push(world.human);
        self.cmd.push(cmd.0);
        self.raw.push(raw.0);
        self.modes.push(mode);
        self.events.push(event);
    }

    /// Frame-per-line text: `t x y yaw human_x human_y mode event c0..c9`.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# t x y yaw human_x human_y mode event c0 c1 c2 c3 c4 c5 c6 c7 c8 c9\n");
        for i in 0..self.time.len() {
            let r = &self.robot[i];
            let h = &self.human[i];
            let _ = write!(
                s,
                "{:.4} {:.5} {:.5} {:.5} {:.5} {:.5} {} {}",
                self.time[i],
                r.position[0],
                r.position[1],
                r.yaw(),
                h.position[0],
                h.position[1],
                self.modes[i].name(),
                self.events[i].name()
            );
            for c in &self.cmd[i] {
                let _ = write!(s, " {c:.5}");
            }
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Who drives the robot during a rollout.
#[allow(clippy::large_enum_variant)]
pub enum Pilot<'a> {
    Model(&'a mut Controller),
    Oracle(OraclePilot),
}

/// Replays the human of `chunk` and lets `pilot` drive the robot from the
/// recorded pose at frame `history`. The controller's buffers are primed
/// with the recorded first `history` frames; metrics cover the rest.
pub fn rollout(chunk: &Episode, history: usize, pilot: &mut Pilot<'_>, profile: &EmbodimentProfile) -> Result<Trace> {
    if chunk.len() < history + 2 {
        return Err(Error::data(format!("chunk of {} frames too short for history {history}", chunk.len())));
    }
    if let Pilot::Model(c) = pilot {
        for f in &chunk.frames[..history] {
            c.prime(&f.robot, &f.human, &f.cmd)?;
        }
    }
    let start = &chunk.frames[history];
    let mut world = WorldState::new(start.robot, start.human);
    world.time = start.time;
    world.mode = start.mode;
    let humans: Vec<Pose> = chunk.frames[history + 1..].iter().map(|f| f.human).collect();
    let mut source = HumanSource::Replay(ReplaySource::new(humans));
    let mut trace = Trace::default();
    loop {
        let (cmd, raw, mode, event) = match pilot {
            Pilot::Model(c) => {
                let o = c.tick(&world.robot, &world.human, false)?;
                (o.cmd, o.raw, o.mode, o.event)
            }
            Pilot::Oracle(o) => {
                let (cmd, event, mode) = o.act(&world, profile);
                (cmd, cmd, mode, event)
            }
        };
        trace.push(&world, &cmd, &raw, mode, event);
        world = step_world(&world, &cmd, mode, event, profile, DT).0;
        if drive_human(&mut world, &mut source, DT).ended {
            break;
        }
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeMetrics {
    pub chunk: usize,
    pub seed: u64,
    pub fae: Option<f64>,
    pub te: f64,
    pub msd: f64,
    pub msd_raw: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub episodes: Vec<EpisodeMetrics>,
    /// Only for default-mood evaluations.
    pub fae_deg: Option<Stat>,
    pub te_m: Stat,
    pub msd: Stat,
}

impl MetricReport {
    pub fn from_episodes(variant: &str, seeds: &[u64], episodes: Vec<EpisodeMetrics>) -> Self {
        let faes: Vec<f64> = episodes.iter().filter_map(|e| e.fae).collect();
        let tes: Vec<f64> = episodes.iter().map(|e| e.te).collect();
        let msds: Vec<f64> = episodes.iter().map(|e| e.msd).collect();
        MetricReport {
            variant: variant.to_string(),
            seeds: seeds.to_vec(),
            fae_deg: (!faes.is_empty() && faes.len() == episodes.len()).then(|| Stat::of(&faes)),
            te_m: Stat::of(&tes),
            msd: Stat::of(&msds),
            episodes,
        }
    }

    pub fn fae_mean(&self) -> f64 {
        self.fae_deg.map_or(f64::NAN, |s| s.mean)
    }
}

fn metrics_of(trace: &Trace, chunk: usize, seed: u64, mood: Mood) -> Result<EpisodeMetrics> {
    Ok(EpisodeMetrics {
        chunk,
        seed,
        fae: (mood == Mood::Default).then(|| fae(&trace.robot, &trace.human)),
        te: te(&trace.robot, &trace.human),
        msd: msd(&trace.cmd)?,
        msd_raw: msd(&trace.raw)?,
    })
}

/// Refuses chunks that overlap any training chunk of `manifest`.
pub fn check_test_chunks(manifest: &DatasetManifest, episodes: &[Episode], chunks: &[Episode]) -> Result<()> {
    let train: Vec<Episode> = manifest.chunk_episodes(episodes, Split::Train)?;
    for c in chunks {
        for t in &train {
            if t.seed == c.seed && t.mood == c.mood {
                let (a0, a1) = (c.frames[0].time, c.frames.last().map_or(0.0, |f| f.time));
                let (b0, b1) = (t.frames[0].time, t.frames.last().map_or(0.0, |f| f.time));
                if a0 <= b1 && b0 <= a1 {
                    return Err(Error::data("evaluation chunk overlaps a training chunk"));
                }
            }
        }
    }
    Ok(())
}

/// Evaluation inputs shared by every variant.
pub struct EvalSetup<'a> {
    pub chunks: &'a [Episode],
    pub seeds: &'a [u64],
    pub profile: &'a EmbodimentProfile,
    pub controller: ControllerConfig,
}

/// Runs `model` through every (chunk, seed) pair.
pub fn run_eval(variant: &str, model: Arc<dyn CommandModel>, setup: &EvalSetup<'_>) -> Result<(MetricReport, Vec<Trace>)> {
    if setup.seeds.is_empty() || setup.chunks.is_empty() {
        return Err(Error::validation("evaluation needs at least one chunk and one seed"));
    }
    let mut eps = Vec::new();
    let mut traces = Vec::new();
    for (ci, chunk) in setup.chunks.iter().enumerate() {
        for &seed in setup.seeds {
            let mut c = Controller::new(model.clone(), setup.profile.clone(), setup.controller.clone(), seed)?;
            let trace = rollout(chunk, model.history(), &mut Pilot::Model(&mut c), setup.profile)?;
            eps.push(metrics_of(&trace, ci, seed, chunk.mood)?);
            traces.push(trace);
        }
    }
    Ok((MetricReport::from_episodes(variant, setup.seeds, eps), traces))
}

/// Scripted oracle in the same loop; the reference band for TE.
pub fn run_oracle_eval(history: usize, setup: &EvalSetup<'_>) -> Result<(MetricReport, Vec<Trace>)> {
    let mut eps = Vec::new();
    let mut traces = Vec::new();
    for (ci, chunk) in setup.chunks.iter().enumerate() {
        for &seed in setup.seeds {
            let mut pilot = Pilot::Oracle(OraclePilot::new(chunk.mood, seed));
            let trace = rollout(chunk, history, &mut pilot, setup.profile)?;
            eps.push(metrics_of(&trace, ci, seed, chunk.mood)?);
            traces.push(trace);
        }
    }
    Ok((MetricReport::from_episodes("oracle", setup.seeds, eps), traces))
}

/// The evaluated variants, in table order.
pub const GRID: [Variant; 7] = [
    Variant::Ours,
    Variant::Window50,
    Variant::Window75,
    Variant::BaselineTransformer,
    Variant::NoHuman,
    Variant::NoCommands,
    Variant::WithPeDropout,
];

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: Variant,
    pub report: MetricReport,
    pub checkpoint_hash: String,
    pub train_seconds: f64,
}

/// Trains and evaluates every grid variant on the same windows, chunks and
/// seeds.
pub fn ablation_grid(
    manifest: &DatasetManifest,
    episodes: &[Episode],
    base: &ModelConfig,
    tc: &TrainConfig,
    stride: usize,
    setup: &EvalSetup<'_>,
) -> Result<Vec<AblationRow>> {
    check_test_chunks(manifest, episodes, setup.chunks)?;
    let mut rows = Vec::new();
    for v in GRID {
        let cfg = crate::model::config::make_variant(v, base);
        let windows = manifest.windows(episodes, Split::Train, cfg.history, cfg.horizon, stride)?;
        let t0 = Instant::now();
        let out = train(&windows, base, tc, v, &manifest.norm, TrainSinks::default())?;
        let train_seconds = t0.elapsed().as_secs_f64();
        let (report, _) = run_eval(v.tag(), Arc::new(out.model), setup)?;
        info!("{}: TE {:.3} MSD {:.5}", v.tag(), report.te_m.mean, report.msd.mean);
        rows.push(AblationRow { variant: v, report, checkpoint_hash: out.checkpoint.content_hash()?, train_seconds });
    }
    Ok(rows)
}

pub fn default_stride() -> usize {
    DEFAULT_STRIDE
}

fn fmt_stat(s: Option<Stat>, prec: usize) -> String {
    match s {
        Some(s) => format!("{:.p$} ± {:.p$}", s.mean, s.std, p = prec),
        None => "-".into(),
    }
}

/// Human-readable comparison table.
pub fn report_table(reports: &[&MetricReport]) -> String {
    let mut s = format!("{:<22} {:>18} {:>16} {:>20}\n", "variant", "FAE [deg]", "TE [m]", "MSD");
    for r in reports {
        let _ = writeln!(
            s,
            "{:<22} {:>18} {:>16} {:>20}",
            r.variant,
            fmt_stat(r.fae_deg, 2),
            fmt_stat(Some(r.te_m), 3),
            fmt_stat(Some(r.msd), 6)
        );
    }
    s
}

/// Versioned key=value document.
pub fn report_kv(reports: &[&MetricReport]) -> String {
    let mut s = format!("format_version={REPORT_VERSION}\n");
    for r in reports {
        let v = &r.variant;
        let seeds: Vec<String> = r.seeds.iter().map(|x| x.to_string()).collect();
        let _ = writeln!(s, "{v}.seeds={}", seeds.join(","));
        let _ = writeln!(s, "{v}.episodes={}", r.episodes.len());
        if let Some(f) = r.fae_deg {
            let _ = writeln!(s, "{v}.fae_deg.mean={}\n{v}.fae_deg.std={}", f.mean, f.std);
        }
        let _ = writeln!(s, "{v}.te_m.mean={}\n{v}.te_m.std={}", r.te_m.mean, r.te_m.std);
        let _ = writeln!(s, "{v}.msd.mean={}\n{v}.msd.std={}", r.msd.mean, r.msd.std);
        for (i, e) in r.episodes.iter().enumerate() {
            let _ = writeln!(
                s,
                "{v}.episode.{i}=chunk:{} seed:{} fae:{} te:{} msd:{} msd_raw:{}",
                e.chunk,
                e.seed,
                e.fae.map_or("-".to_string(), |f| f.to_string()),
                e.te,
                e.msd,
                e.msd_raw
            );
        }
    }
    s
}

/// Parses [`report_kv`] output back into key/value pairs.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::format(format!("bad report line: {l}")))
        })
        .collect()
}

/// Closed-loop rollouts from one fixed start against a standing human.
#[derive(Debug, Clone)]
pub struct DiversityReport {
    pub seeds: Vec<u64>,
    pub traces: Vec<Vec<[f64; 2]>>,
    pub endpoints: Vec<[f64; 2]>,
    pub max_pairwise: f64,
    pub mean_pairwise: f64,
}

pub const PROBE_ROBOT: [f64; 3] = [0.0, 0.0, 0.0];
pub const PROBE_HUMAN: [f64; 3] = [2.0, 1.0, 1.7];

pub fn diversity_probe(model: &TrainedModel, seeds: &[u64], seconds: f64, profile: &EmbodimentProfile, cfg: &ControllerConfig) -> Result<DiversityReport> {
    let model: Arc<dyn CommandModel> = Arc::new(model.clone());
    let robot = Pose::planar(PROBE_ROBOT[0], PROBE_ROBOT[1], 0.0, PROBE_ROBOT[2]);
    let human = Pose::planar(PROBE_HUMAN[0], PROBE_HUMAN[1], PROBE_HUMAN[2], std::f64::consts::PI);
    let steps = (seconds / DT).round() as usize;
    let mut traces = Vec::new();
    for &seed in seeds {
        let mut c = Controller::new(model.clone(), profile.clone(), cfg.clone(), seed)?;
        let mut world = WorldState::new(robot, human);
        let mut xy = Vec::with_capacity(steps);
        for _ in 0..steps {
            let o = c.tick(&world.robot, &world.human, false)?;
            world = step_world(&world, &o.cmd, o.mode, o.event, profile, DT).0;
            xy.push([world.robot.position[0], world.robot.position[1]]);
        }
        traces.push(xy);
    }
    let endpoints: Vec<[f64; 2]> = traces.iter().map(|t| *t.last().unwrap_or(&[robot.position[0], robot.position[1]])).collect();
    let mut pair = Vec::new();
    for i in 0..endpoints.len() {
        for j in i + 1..endpoints.len() {
            pair.push((endpoints[i][0] - endpoints[j][0]).hypot(endpoints[i][1] - endpoints[j][1]));
        }
    }
    Ok(DiversityReport {
        seeds: seeds.to_vec(),
        max_pairwise: pair.iter().copied().fold(0.0, f64::max),
        mean_pairwise: if pair.is_empty() { 0.0 } else { pair.iter().sum::<f64>() / pair.len() as f64 },
        traces,
        endpoints,
    })
}

impl DiversityReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("format_version={REPORT_VERSION}\nmax_pairwise={}\nmean_pairwise={}\n", self.max_pairwise, self.mean_pairwise);
        for (seed, e) in self.seeds.iter().zip(&self.endpoints) {
            let _ = writeln!(s, "endpoint.{seed}={},{}", e[0], e[1]);
        }
        s
    }

    /// `seed x y` per frame, one block per run.
    pub fn traces_text(&self) -> String {
        let mut s = String::from("# seed x y\n");
        for (seed, t) in self.seeds.iter().zip(&self.traces) {
            for p in t {
                let _ = writeln!(s, "{seed} {:.5} {:.5}", p[0], p[1]);
            }
        }
        s
    }
}


/// Discrete-head quality on labelled windows.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub windows: usize,
    pub mode_accuracy: f64,
    /// `(hits, support)` per behavior class index.
    pub behavior: Vec<(usize, usize)>,
}

impl ClassReport {
    /// Mean recall over non-None classes that occur in the labels.
    pub fn macro_recall(&self) -> f64 {
        let r: Vec<f64> = self
            .behavior
            .iter()
            .enumerate()
            .filter(|(i, (_, n))| *i != BehaviorEvent::None.index() && *n > 0)
            .map(|(_, (h, n))| *h as f64 / *n as f64)
            .collect();
        if r.is_empty() {
            0.0
        } else {
            r.iter().sum::<f64>() / r.len() as f64
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, x)| if *x > v[best] { i } else { best })
}

/// Predicts every window once with a rng seeded from `seed` and scores the
/// argmax of each classification head.
pub fn classification_report(model: &dyn CommandModel, windows: &[WindowSample], seed: u64) -> Result<ClassReport> {
    if windows.is_empty() {
        return Err(Error::data("no windows to classify"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut behavior = vec![(0usize, 0usize); BehaviorEvent::COUNT];
    let mut mode_hits = 0usize;
    for w in windows {
        let cond = Conditioning { past_human_rel: w.past_human_rel.clone(), past_cmd: w.past_cmd.clone() };
        let out = model.predict(&cond, &mut rng)?;
        if argmax(&out.mode_logits) == w.mode_label.index() {
            mode_hits += 1;
        }
        let b = &mut behavior[w.behavior_label.index()];
        b.1 += 1;
        if argmax(&out.behavior_logits) == w.behavior_label.index() {
            b.0 += 1;
        }
    }
    Ok(ClassReport { windows: windows.len(), mode_accuracy: mode_hits as f64 / windows.len() as f64, behavior })
}
