//! Python bindings: `import teleop`.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use teleop_core::config::Config;
use teleop_core::controller::ControllerConfig;
use teleop_core::dataset::{episode_to_json, read_episode_file, write_episode_file, Episode, Split};
use teleop_core::evaluator::{self, run_eval, EvalSetup};
use teleop_core::geometry::{relative_pose, Pose};
use teleop_core::model::{make_schedule, q_sample as core_q_sample, Checkpoint, CheckpointMeta, CommandModel, Conditioning, ModelConfig, TrainedModel, Variant};
use teleop_core::operator::Mood;
use teleop_core::pipeline::{generate_sessions, prepare_manifest, TRAIN_FRACTION};
use teleop_core::service::{MoodModels, Session, SessionMessage, SCHEMA_VERSION};
use teleop_core::sim::{EmbodimentProfile, NUM_CHANNELS};
use teleop_core::trainer::{train, TrainConfig, TrainSinks};

fn err(e: teleop_core::Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        3 => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn mood(name: &str) -> PyResult<Mood> {
    name.parse().map_err(err)
}

fn poses(rows: &[[f64; 7]]) -> Vec<Pose> {
    rows.iter().map(|r| Pose::from_array(*r)).collect()
}

fn cmd_rows(rows: &[Vec<f64>]) -> PyResult<Vec<[f64; NUM_CHANNELS]>> {
    rows.iter()
        .map(|r| {
            <[f64; NUM_CHANNELS]>::try_from(r.as_slice()).map_err(|_| PyValueError::new_err(format!("command rows need {NUM_CHANNELS} values")))
        })
        .collect()
}

/// A recorded operator session.
#[pyclass(name = "Episode", module = "teleop", frozen, from_py_object)]
#[derive(Clone)]
struct PyEpisode {
    inner: Episode,
}

#[pymethods]
impl PyEpisode {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyEpisode { inner: read_episode_file(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_episode_file(&path, &self.inner).map_err(err)
    }

    #[getter]
    fn mood(&self) -> &'static str {
        self.inner.mood.name()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn rate_hz(&self) -> f64 {
        self.inner.rate_hz
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn commands(&self) -> Vec<[f64; NUM_CHANNELS]> {
        self.inner.commands()
    }

    /// Robot poses as `[x, y, z, qw, qx, qy, qz]` rows.
    fn robot_poses(&self) -> Vec<[f64; 7]> {
        self.inner.frames.iter().map(|f| f.robot.to_array()).collect()
    }

    fn human_poses(&self) -> Vec<[f64; 7]> {
        self.inner.frames.iter().map(|f| f.human.to_array()).collect()
    }

    fn events(&self) -> Vec<&'static str> {
        self.inner.frames.iter().map(|f| f.event.name()).collect()
    }

    fn modes(&self) -> Vec<&'static str> {
        self.inner.frames.iter().map(|f| f.mode.name()).collect()
    }

    fn slice(&self, start: usize, end: usize) -> PyResult<Self> {
        if start >= end || end > self.inner.len() {
            return Err(PyValueError::new_err("slice out of range"));
        }
        Ok(PyEpisode { inner: self.inner.slice(start, end) })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&episode_to_json(&self.inner)).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!("Episode(mood={}, seed={}, frames={})", self.inner.mood.name(), self.inner.seed, self.inner.len())
    }
}

#[pyfunction]
#[pyo3(signature = (mood_name, minutes, seed, profile = "bipod"))]
fn generate_session(mood_name: &str, minutes: f64, seed: u64, profile: &str) -> PyResult<PyEpisode> {
    let profile = EmbodimentProfile::by_name(profile).map_err(err)?;
    let mut eps = generate_sessions(&[(mood(mood_name)?, minutes)], seed, &profile).map_err(err)?;
    Ok(PyEpisode { inner: eps.remove(0) })
}

/// A trained command model.
/// `(window, behavior_logits, mode_logits)`
type SampledWindow = (Vec<Vec<f64>>, Vec<f64>, Vec<f64>);

#[pyclass(name = "Model", module = "teleop", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: TrainedModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(err)?;
        Ok(PyModel { inner: ck.into_model().map_err(err)? })
    }

    /// Writes a checkpoint and returns its content hash.
    fn save(&self, path: PathBuf) -> PyResult<String> {
        Checkpoint::from_model(&self.inner, CheckpointMeta::default()).save(&path).map_err(err)
    }

    fn content_hash(&self) -> PyResult<String> {
        Checkpoint::from_model(&self.inner, CheckpointMeta::default()).content_hash().map_err(err)
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.variant.tag()
    }

    #[getter]
    fn history(&self) -> usize {
        self.inner.history()
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    #[getter]
    fn guidance_scale(&self) -> f64 {
        self.inner.guidance_scale
    }

    /// Copy with a different guidance weight and noise scale.
    #[pyo3(signature = (guidance_scale, noise_scale = 1.0))]
    fn with_sampling(&self, guidance_scale: f64, noise_scale: f64) -> Self {
        let mut inner = self.inner.clone();
        inner.guidance_scale = guidance_scale;
        inner.noise_scale = noise_scale;
        PyModel { inner }
    }

    /// Samples one window from `history` past robot/human poses and commands.
    /// Returns `(window, behavior_logits, mode_logits)`.
    fn sample_window(&self, robot: Vec<[f64; 7]>, human: Vec<[f64; 7]>, commands: Vec<Vec<f64>>, seed: u64) -> PyResult<SampledWindow> {
        let m = self.inner.history();
        if robot.len() != m || human.len() != m || commands.len() != m {
            return Err(PyValueError::new_err(format!("expected {m} history frames")));
        }
        let past_human_rel = robot
            .iter()
            .zip(&human)
            .map(|(r, h)| relative_pose(&Pose::from_array(*r), &Pose::from_array(*h)).map(|p| p.to_array()))
            .collect::<teleop_core::Result<Vec<_>>>()
            .map_err(err)?;
        let cond = Conditioning { past_human_rel, past_cmd: cmd_rows(&commands)? };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = self.inner.predict(&cond, &mut rng).map_err(err)?;
        let window = out.x0.chunks(NUM_CHANNELS).map(<[f64]>::to_vec).collect();
        Ok((window, out.behavior_logits, out.mode_logits))
    }

    fn __repr__(&self) -> String {
        format!("Model(variant={}, history={}, horizon={})", self.inner.variant.tag(), self.inner.history(), self.inner.horizon())
    }
}

/// Trains one variant on the training chunks of `episodes`. Returns the model
/// and the per-epoch training loss.
#[pyfunction]
#[pyo3(signature = (episodes, variant = "ours", epochs = 2, seed = 0, latent_dim = 16, ff_dim = 32, layers = 1, learning_rate = 1e-3, batch_size = 32, stride = 10))]
#[allow(clippy::too_many_arguments)]
fn train_model(
    py: Python<'_>,
    episodes: Vec<PyEpisode>,
    variant: &str,
    epochs: usize,
    seed: u64,
    latent_dim: usize,
    ff_dim: usize,
    layers: usize,
    learning_rate: f64,
    batch_size: usize,
    stride: usize,
) -> PyResult<(PyModel, Vec<f64>)> {
    let variant: Variant = variant.parse().map_err(err)?;
    let eps: Vec<Episode> = episodes.into_iter().map(|e| e.inner).collect();
    let base = ModelConfig { latent_dim, ff_dim, layers, ..ModelConfig::default() };
    let tc = TrainConfig { epochs, seed, learning_rate, batch_size, ..TrainConfig::default() };
    let out = py
        .detach(|| -> teleop_core::Result<_> {
            let manifest = prepare_manifest(&eps, TRAIN_FRACTION, seed, stride)?;
            let cfg = teleop_core::model::make_variant(variant, &base);
            let windows = manifest.windows(&eps, Split::Train, cfg.history, cfg.horizon, stride)?;
            train(&windows, &base, &tc, variant, &manifest.norm, TrainSinks::default())
        })
        .map_err(err)?;
    let losses = out.history.iter().map(|h| h.loss.total).collect();
    Ok((PyModel { inner: out.model }, losses))
}

/// Closed-loop replay of `chunks` over `seeds`; returns mean metrics.
#[pyfunction]
#[pyo3(signature = (model, chunks, seeds = vec![11, 22, 33], profile = "bipod"))]
fn evaluate(py: Python<'_>, model: &PyModel, chunks: Vec<PyEpisode>, seeds: Vec<u64>, profile: &str) -> PyResult<BTreeMap<String, f64>> {
    let profile = EmbodimentProfile::by_name(profile).map_err(err)?;
    let chunks: Vec<Episode> = chunks.into_iter().map(|e| e.inner).collect();
    let m = model.inner.clone();
    let report = py
        .detach(|| {
            let setup = EvalSetup { chunks: &chunks, seeds: &seeds, profile: &profile, controller: ControllerConfig::default() };
            run_eval(m.variant.tag(), Arc::new(m.clone()), &setup)
        })
        .map_err(err)?
        .0;
    let mut out = BTreeMap::from([("te_m".to_string(), report.te_m.mean), ("msd".to_string(), report.msd.mean)]);
    if let Some(f) = report.fae_deg {
        out.insert("fae_deg".into(), f.mean);
    }
    Ok(out)
}

#[pyfunction]
fn fae(robot: Vec<[f64; 7]>, human: Vec<[f64; 7]>) -> PyResult<f64> {
    if robot.len() != human.len() || robot.is_empty() {
        return Err(PyValueError::new_err("tracks must be non-empty and equally long"));
    }
    Ok(evaluator::fae(&poses(&robot), &poses(&human)))
}

#[pyfunction]
fn te(robot: Vec<[f64; 7]>, human: Vec<[f64; 7]>) -> PyResult<f64> {
    if robot.len() != human.len() || robot.is_empty() {
        return Err(PyValueError::new_err("tracks must be non-empty and equally long"));
    }
    Ok(evaluator::te(&poses(&robot), &poses(&human)))
}

#[pyfunction]
fn msd(commands: Vec<Vec<f64>>) -> PyResult<f64> {
    evaluator::msd(&cmd_rows(&commands)?).map_err(err)
}

/// `(betas, alpha_bars)` of the noise schedule.
#[pyfunction]
#[pyo3(signature = (steps = 8))]
fn diffusion_schedule(steps: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let s = make_schedule(steps).map_err(err)?;
    Ok((s.betas, s.alpha_bars))
}

#[pyfunction]
#[pyo3(signature = (x0, t, eps, steps = 8))]
fn q_sample(x0: Vec<f64>, t: usize, eps: Vec<f64>, steps: usize) -> PyResult<Vec<f64>> {
    let s = make_schedule(steps).map_err(err)?;
    core_q_sample(&s, &x0, t, &eps).map_err(err)
}

/// The live session core driven by JSON lines, without the network.
#[pyclass(name = "Session", module = "teleop", frozen)]
struct PySession {
    inner: Mutex<Session>,
}

#[pymethods]
impl PySession {
    #[new]
    #[pyo3(signature = (model, profile = "bipod", seed = 0, mood_name = "default"))]
    fn new(model: &PyModel, profile: &str, seed: u64, mood_name: &str) -> PyResult<Self> {
        let m = mood(mood_name)?;
        let models = MoodModels::single("python", m, Arc::new(model.inner.clone()));
        let profile = EmbodimentProfile::by_name(profile).map_err(err)?;
        let s = Session::new(models, profile, ControllerConfig::default(), m, seed, false).map_err(err)?;
        Ok(PySession { inner: Mutex::new(s) })
    }

    fn hello(&self) -> String {
        self.inner.lock().unwrap().hello(false).to_line()
    }

    /// Applies one client message; returns the reply line if any.
    fn handle(&self, line: &str) -> Option<String> {
        let mut s = self.inner.lock().unwrap();
        match SessionMessage::parse(line) {
            Ok(m) => s.handle(m).map(|r| r.to_line()),
            Err(e) => Some(SessionMessage::Error { t: s.world().time, message: e.to_string() }.to_line()),
        }
    }

    /// Advances one 20 ms frame; returns the outbound lines.
    fn tick(&self) -> PyResult<Vec<String>> {
        let msgs = self.inner.lock().unwrap().tick().map_err(err)?;
        Ok(msgs.iter().map(SessionMessage::to_line).collect())
    }
}

#[pyfunction]
fn config_template() -> String {
    Config::template()
}

/// Resolved configuration (defaults, then the file, then `TELEOP_*`).
#[pyfunction]
#[pyo3(signature = (path = None))]
fn load_config(path: Option<PathBuf>) -> PyResult<BTreeMap<String, String>> {
    let c = Config::load(path.as_deref()).map_err(err)?;
    Ok(c.entries().map(|(k, v, _)| (k.to_string(), v.to_string())).collect())
}

#[pymodule]
fn teleop(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SCHEMA_VERSION", SCHEMA_VERSION)?;
    m.add("MOODS", Mood::ALL.iter().map(|m| m.name()).collect::<Vec<_>>())?;
    m.add_class::<PyEpisode>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PySession>()?;
    m.add_function(wrap_pyfunction!(generate_session, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(fae, m)?)?;
    m.add_function(wrap_pyfunction!(te, m)?)?;
    m.add_function(wrap_pyfunction!(msd, m)?)?;
    m.add_function(wrap_pyfunction!(diffusion_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(q_sample, m)?)?;
    m.add_function(wrap_pyfunction!(config_template, m)?)?;
    m.add_function(wrap_pyfunction!(load_config, m)?)?;
    Ok(())
}
