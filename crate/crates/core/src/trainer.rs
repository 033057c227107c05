//! Optimization loop, gradient checking and reproducibility helpers.

use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{augment_height_with, sample_height_offset, NormStats, WindowSample};
use crate::error::{Error, Result};
use crate::model::checkpoint::{Checkpoint, CheckpointMeta, INIT_DESCRIPTION};
use crate::model::config::{make_variant, ModelConfig, Variant, POSE_DIM};
use crate::model::loss::{class_weights, losses, LossValue, LossWeights, CLASS_WEIGHT_CLIP};
use crate::model::net::{BatchInput, Network};
use crate::model::params::ParamStore;
use crate::model::real::Real;
use crate::model::sampler::TrainedModel;
use crate::model::schedule::{make_schedule, DiffusionSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Epochs without held-out improvement before stopping; 0 disables.
    pub patience: usize,
    pub checkpoint_every: usize,
    /// Share of training windows held out for early stopping.
    pub holdout_fraction: f64,
    pub loss_weights: LossWeights,
    /// Inverse-frequency class weights; `false` uses unit weights.
    pub class_weighting: bool,
    pub height_augmentation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 128,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            patience: 50,
            checkpoint_every: 50,
            holdout_fraction: 0.1,
            loss_weights: LossWeights::default(),
            class_weighting: true,
            height_augmentation: true,
        }
    }
}

impl TrainConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch size must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::config("invalid optimizer hyperparameters"));
        }
        if !(0.0..0.5).contains(&self.holdout_fraction) {
            return Err(Error::config("holdout fraction must lie in [0, 0.5)"));
        }
        Ok(())
    }
}

/// Inputs and targets of one batch, flattened for [`Network::forward`].
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub size: usize,
    pub pose: Vec<T>,
    pub cmd: Vec<T>,
    pub drop_cmd: Vec<bool>,
    pub x_t: Vec<T>,
    pub steps: Vec<usize>,
    pub target: Vec<T>,
    pub behavior: Vec<usize>,
    pub mode: Vec<usize>,
}

impl<T: Real> Batch<T> {
    pub fn input(&self) -> BatchInput<'_, T> {
        BatchInput { batch: self.size, pose: &self.pose, cmd: &self.cmd, drop_cmd: &self.drop_cmd, x_t: &self.x_t, steps: &self.steps }
    }
}

/// Draws diffusion steps, noise, height offsets and command dropout for
/// `windows` from `rng`.
pub fn make_batch<T: Real>(
    cfg: &ModelConfig,
    schedule: &DiffusionSchedule,
    norm: &NormStats,
    windows: &[&WindowSample],
    rng: &mut ChaCha8Rng,
    augment: bool,
    cond_drop: f64,
) -> Result<Batch<T>> {
    let (m, n, j) = (cfg.history, cfg.horizon, cfg.channels);
    let b = windows.len();
    let mut batch = Batch {
        size: b,
        pose: Vec::with_capacity(b * m * POSE_DIM),
        cmd: Vec::with_capacity(b * m * j),
        drop_cmd: Vec::with_capacity(b),
        x_t: Vec::with_capacity(b * n * j),
        steps: Vec::with_capacity(b),
        target: Vec::with_capacity(b * n * j),
        behavior: Vec::with_capacity(b),
        mode: Vec::with_capacity(b),
    };
    for w in windows {
        if w.past_human_rel.len() != m || w.past_cmd.len() != m || w.future_cmd.len() != n {
            return Err(Error::data(format!(
                "window shape ({}, {}, {}) does not match model ({m}, {m}, {n})",
                w.past_human_rel.len(),
                w.past_cmd.len(),
                w.future_cmd.len()
            )));
        }
        let u = if augment { sample_height_offset(rng) } else { 0.0 };
        let aug;
        let w = if u != 0.0 {
            aug = augment_height_with(w, u);
            &aug
        } else {
            *w
        };
        for p in &w.past_human_rel {
            batch.pose.extend(norm.normalize_pose(p).iter().map(|v| T::from_f64_lossy(*v)));
        }
        batch.cmd.extend(w.past_cmd.iter().flatten().map(|v| T::from_f64_lossy(*v)));
        batch.drop_cmd.push(cond_drop > 0.0 && rng.gen::<f64>() < cond_drop);
        batch.target.extend(w.future_cmd.iter().flatten().map(|v| T::from_f64_lossy(*v)));
        if cfg.is_diffusion() {
            let t = rng.gen_range(1..=cfg.diffusion_steps);
            let ab = schedule.alpha_bar(t);
            let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
            for x0 in w.future_cmd.iter().flatten() {
                let e: f64 = rng.sample(StandardNormal);
                batch.x_t.push(T::from_f64_lossy(sa * x0 + sn * e));
            }
            batch.steps.push(t);
        }
        batch.behavior.push(w.behavior_label.index().min(cfg.behavior_classes - 1));
        batch.mode.push(w.mode_label.index());
    }
    Ok(batch)
}

/// Loss and parameter gradient of one batch.
pub fn loss_and_grad<T: Real>(
    net: &Network<T>,
    params: &[T],
    batch: &Batch<T>,
    weights: &(Vec<f64>, Vec<f64>),
    lambda: LossWeights,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(LossValue, Vec<T>)> {
    let (out, cache) = net.forward(params, &batch.input(), dropout_rng)?;
    let (value, d_out) = losses(&out, &batch.target, &batch.behavior, &batch.mode, &weights.0, &weights.1, lambda)?;
    let mut g = vec![T::zero(); params.len()];
    net.backward(params, &cache, &d_out, &mut g);
    Ok((value, g))
}

pub fn batch_loss<T: Real>(net: &Network<T>, params: &[T], batch: &Batch<T>, weights: &(Vec<f64>, Vec<f64>), lambda: LossWeights) -> Result<LossValue> {
    let (out, _) = net.forward::<ChaCha8Rng>(params, &batch.input(), None)?;
    Ok(losses(&out, &batch.target, &batch.behavior, &batch.mode, &weights.0, &weights.1, lambda)?.0)
}

/// Adaptive-moment optimizer state.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n: usize, cfg: &TrainConfig) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0, lr: cfg.learning_rate, b1: cfg.beta1, b2: cfg.beta2, eps: cfg.adam_eps }
    }

    pub fn step(&mut self, params: &mut [f32], grad: &[f32]) {
        self.t += 1;
        let b1 = self.b1 as f32;
        let b2 = self.b2 as f32;
        let c1 = 1.0 - self.b1.powi(self.t as i32);
        let c2 = 1.0 - self.b2.powi(self.t as i32);
        let step = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            params[i] -= step * self.m[i] / (self.v[i].sqrt() + eps);
        }
    }
}

/// Per-epoch means of the loss components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub loss: LossValue,
    pub holdout: Option<f64>,
}

impl EpochLog {
    /// `epoch,step,loss,mse,wce_b,wce_m`
    pub fn line(&self) -> String {
        let l = &self.loss;
        format!("{},{},{:.6},{:.6},{:.6},{:.6}", self.epoch, self.step, l.total, l.mse, l.wce_behavior, l.wce_mode)
    }
}

pub struct TrainOutcome {
    pub model: TrainedModel,
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Where training writes its artifacts; all optional.
#[derive(Default)]
pub struct TrainSinks<'a> {
    pub log: Option<&'a mut dyn Write>,
    pub checkpoint_dir: Option<PathBuf>,
    pub meta: CheckpointMeta,
}

fn step_seed(seed: u64, epoch: usize, step: u64) -> u64 {
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Trains `variant` of `base` on `windows`. Windows must match the
/// variant's horizon. Single-threaded and bit-reproducible for fixed inputs.
pub fn train(
    windows: &[WindowSample],
    base: &ModelConfig,
    tc: &TrainConfig,
    variant: Variant,
    norm: &NormStats,
    mut sinks: TrainSinks<'_>,
) -> Result<TrainOutcome> {
    tc.validate()?;
    let cfg = make_variant(variant, base);
    cfg.validate()?;
    if windows.is_empty() {
        return Err(Error::data("no training windows"));
    }
    if let Some(dir) = &sinks.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let schedule = make_schedule(cfg.diffusion_steps)?;
    let net = Network::<f32>::new(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut params = ParamStore::<f32>::init(&cfg, &mut rng);
    let mut adam = Adam::new(params.len(), tc);

    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = if tc.patience > 0 { ((windows.len() as f64 * tc.holdout_fraction).round() as usize).min(windows.len() - 1) } else { 0 };
    let (hold_idx, train_idx) = order.split_at(n_hold);
    let train_set: Vec<&WindowSample> = train_idx.iter().map(|&i| &windows[i]).collect();
    let hold_set: Vec<&WindowSample> = hold_idx.iter().map(|&i| &windows[i]).collect();

    let weights = if tc.class_weighting {
        let mut bc = vec![0usize; cfg.behavior_classes];
        let mut mc = vec![0usize; cfg.mode_classes];
        for w in &train_set {
            bc[w.behavior_label.index().min(cfg.behavior_classes - 1)] += 1;
            mc[w.mode_label.index()] += 1;
        }
        (class_weights(&bc, CLASS_WEIGHT_CLIP), class_weights(&mc, CLASS_WEIGHT_CLIP))
    } else {
        (vec![1.0; cfg.behavior_classes], vec![1.0; cfg.mode_classes])
    };

    // fixed noise draws so held-out losses are comparable across epochs
    let hold_batches: Vec<Batch<f32>> = hold_set
        .chunks(tc.batch_size)
        .enumerate()
        .map(|(k, chunk)| {
            let mut r = ChaCha8Rng::seed_from_u64(step_seed(tc.seed ^ 0xA5A5, 0, k as u64));
            make_batch(&cfg, &schedule, norm, chunk, &mut r, false, 0.0)
        })
        .collect::<Result<_>>()?;

    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0usize, params.data.clone());
    let mut step: u64 = 0;
    let mut stopped_early = false;
    let mut shuffled = train_set.clone();
    for epoch in 1..=tc.epochs {
        shuffled.shuffle(&mut rng);
        let mut sum = LossValue::default();
        let mut count = 0.0;
        for chunk in shuffled.chunks(tc.batch_size) {
            step += 1;
            let seed = step_seed(tc.seed, epoch, step);
            let mut brng = ChaCha8Rng::seed_from_u64(seed);
            let batch = make_batch::<f32>(&cfg, &schedule, norm, chunk, &mut brng, tc.height_augmentation, cfg.cond_drop_prob)?;
            let result = loss_and_grad(&net, &params.data, &batch, &weights, tc.loss_weights, Some(&mut brng));
            let (value, grad) = match result {
                Ok(r) => r,
                Err(Error::Numeric { location, detail }) => {
                    return Err(Error::Numeric {
                        location,
                        detail: format!("{detail}; epoch {epoch} step {step} batch seed {seed}"),
                    })
                }
                Err(e) => return Err(e),
            };
            if !value.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric {
                    location: "loss".into(),
                    detail: format!("non-finite loss {} at epoch {epoch} step {step}; batch seed {seed}", value.total),
                });
            }
            adam.step(&mut params.data, &grad);
            sum.total += value.total;
            sum.mse += value.mse;
            sum.wce_behavior += value.wce_behavior;
            sum.wce_mode += value.wce_mode;
            count += 1.0;
        }
        let mean = LossValue { total: sum.total / count, mse: sum.mse / count, wce_behavior: sum.wce_behavior / count, wce_mode: sum.wce_mode / count };
        let holdout = if hold_batches.is_empty() {
            None
        } else {
            let mut tot = 0.0;
            let mut n = 0.0;
            for b in &hold_batches {
                tot += batch_loss(&net, &params.data, b, &weights, tc.loss_weights)?.total * b.size as f64;
                n += b.size as f64;
            }
            Some(tot / n)
        };
        let entry = EpochLog { epoch, step, loss: mean, holdout };
        if let Some(log) = sinks.log.as_mut() {
            writeln!(log, "{}", entry.line())?;
        }
        if epoch == 1 || epoch % 25 == 0 {
            info!("epoch {epoch} step {step} loss {:.5} holdout {:?}", mean.total, holdout);
        }
        history.push(entry);

        let score = holdout.unwrap_or(mean.total);
        if score < best.0 {
            best = (score, epoch, params.data.clone());
        }
        if let Some(dir) = &sinks.checkpoint_dir {
            if tc.checkpoint_every > 0 && epoch % tc.checkpoint_every == 0 {
                let ck = build_checkpoint(&cfg, variant, &schedule, norm, &params, &sinks.meta, tc, epoch, step, mean.total);
                ck.save(&dir.join(format!("epoch_{epoch:05}.aopc")))?;
            }
        }
        if tc.patience > 0 && holdout.is_some() && epoch - best.1 >= tc.patience {
            info!("early stop at epoch {epoch}; best held-out epoch {}", best.1);
            stopped_early = true;
            break;
        }
    }

    let best_epoch = if hold_batches.is_empty() { history.len() } else { best.1 };
    if !hold_batches.is_empty() {
        params.data = best.2;
    }
    let final_loss = history.last().map_or(f64::NAN, |h| h.loss.total);
    let checkpoint = build_checkpoint(&cfg, variant, &schedule, norm, &params, &sinks.meta, tc, history.len(), step, final_loss);
    if let Some(dir) = &sinks.checkpoint_dir {
        checkpoint.save(&dir.join("final.aopc"))?;
    }
    let model = checkpoint.clone().into_model()?;
    Ok(TrainOutcome { model, checkpoint, history, best_epoch, stopped_early })
}

#[allow(clippy::too_many_arguments)]
fn build_checkpoint(
    cfg: &ModelConfig,
    variant: Variant,
    schedule: &DiffusionSchedule,
    norm: &NormStats,
    params: &ParamStore<f32>,
    meta: &CheckpointMeta,
    tc: &TrainConfig,
    epochs: usize,
    steps: u64,
    loss: f64,
) -> Checkpoint {
    Checkpoint {
        config: cfg.clone(),
        variant,
        schedule: schedule.clone(),
        norm: norm.clone(),
        meta: CheckpointMeta { seed: tc.seed, epochs, steps, init: INIT_DESCRIPTION.into(), final_loss: loss, ..meta.clone() },
        params: params.clone(),
    }
}

/// Result of comparing analytic and central-difference gradients on one
/// parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub group: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

/// Relative error with an absolute floor for gradients that are both tiny.
pub fn grad_rel_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-8 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Central-difference check of the full loss in 64-bit arithmetic, probing
/// `per_group` random entries of every parameter tensor (all entries of
/// smaller tensors).
pub fn gradient_check(cfg: &ModelConfig, seed: u64, per_group: usize, h: f64) -> Result<Vec<GradCheck>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Network::<f64>::new(cfg);
    let params = ParamStore::<f64>::init(cfg, &mut rng);
    let schedule = make_schedule(cfg.diffusion_steps)?;
    let b = 3;
    let windows: Vec<WindowSample> = (0..b).map(|k| random_window(cfg, &mut rng, k)).collect();
    let refs: Vec<&WindowSample> = windows.iter().collect();
    let mut batch = make_batch::<f64>(cfg, &schedule, &NormStats::default(), &refs, &mut rng, true, 0.0)?;
    batch.drop_cmd = vec![false, true, false];
    let weights = (
        (0..cfg.behavior_classes).map(|k| 0.5 + 0.1 * k as f64).collect::<Vec<_>>(),
        vec![0.7, 1.3],
    );
    let lambda = LossWeights::default();
    let (_, grad) = loss_and_grad(&net, &params.data, &batch, &weights, lambda, None)?;
    let mut out = Vec::new();
    let mut probe = params.data.clone();
    for e in &params.entries {
        let idx: Vec<usize> = if e.len() <= per_group {
            e.range().collect()
        } else {
            let mut all: Vec<usize> = e.range().collect();
            all.shuffle(&mut rng);
            all.truncate(per_group);
            all
        };
        let mut worst: f64 = 0.0;
        for &i in &idx {
            let orig = probe[i];
            probe[i] = orig + h;
            let lp = batch_loss(&net, &probe, &batch, &weights, lambda)?.total;
            probe[i] = orig - h;
            let lm = batch_loss(&net, &probe, &batch, &weights, lambda)?.total;
            probe[i] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            worst = worst.max(grad_rel_error(grad[i], numeric));
        }
        out.push(GradCheck { group: e.name.clone(), checked: idx.len(), max_rel_error: worst });
    }
    Ok(out)
}

/// Window with random history, commands and labels, used by numerical
/// checks.
pub fn random_window(cfg: &ModelConfig, rng: &mut ChaCha8Rng, k: usize) -> WindowSample {
    use crate::geometry::{Pose, Quat};
    use crate::sim::{BehaviorEvent, Mode};
    let pose = |rng: &mut ChaCha8Rng| {
        let q = Quat::from_axis_angle([rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 1.0], rng.gen_range(-3.0..3.0));
        Pose::new([rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(1.0..2.0)], q).to_array()
    };
    let cmd = |rng: &mut ChaCha8Rng| {
        let mut c = [0.0; crate::sim::NUM_CHANNELS];
        for v in c.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        c
    };
    WindowSample {
        past_human_rel: (0..cfg.history).map(|_| pose(rng)).collect(),
        past_cmd: (0..cfg.history).map(|_| cmd(rng)).collect(),
        future_cmd: (0..cfg.horizon).map(|_| cmd(rng)).collect(),
        behavior_label: BehaviorEvent::from_index(k % cfg.behavior_classes).unwrap(),
        mode_label: Mode::from_index(k % 2).unwrap(),
    }
}

/// Writes `history` as `epoch,step,loss,mse,wce_b,wce_m` lines.
pub fn write_log(path: &Path, history: &[EpochLog]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    for h in history {
        writeln!(f, "{}", h.line())?;
    }
    Ok(())
}

/// Ratio of the last to the first epoch's mean training loss.
pub fn loss_reduction(history: &[EpochLog]) -> Option<f64> {
    let first = history.first()?.loss.total;
    let last = history.last()?.loss.total;
    if first <= 0.0 {
        warn!("first epoch loss is non-positive");
        return None;
    }
    Some(last / first)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_windows(cfg: &ModelConfig, n: usize) -> Vec<WindowSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        (0..n).map(|k| random_window(cfg, &mut rng, k)).collect()
    }

    #[test]
    fn gradient_check_reduced_config() {
        let checks = gradient_check(&ModelConfig::reduced(), 1, 20, 1e-4).unwrap();
        for c in &checks {
            assert!(c.max_rel_error < 1e-3, "{} rel err {}", c.group, c.max_rel_error);
        }
        assert!(checks.iter().any(|c| c.group == "embed.null_cmd"));
    }

    #[test]
    fn gradient_check_direct_head() {
        let cfg = make_variant(Variant::BaselineTransformer, &ModelConfig::reduced());
        for c in gradient_check(&cfg, 2, 20, 1e-4).unwrap() {
            assert!(c.max_rel_error < 1e-3, "{} rel err {}", c.group, c.max_rel_error);
        }
    }

    #[test]
    fn smoke_run_is_finite_and_reproducible() {
        let cfg = ModelConfig { latent_dim: 16, ff_dim: 32, ..ModelConfig::default() };
        let windows = toy_windows(&cfg, 200);
        let tc = TrainConfig { epochs: 2, batch_size: 32, seed: 3, ..TrainConfig::default() };
        let a = train(&windows, &cfg, &tc, Variant::Ours, &NormStats::default(), TrainSinks::default()).unwrap();
        assert!(a.history.iter().all(|h| h.loss.total.is_finite()));
        let b = train(&windows, &cfg, &tc, Variant::Ours, &NormStats::default(), TrainSinks::default()).unwrap();
        assert_eq!(a.checkpoint.content_hash().unwrap(), b.checkpoint.content_hash().unwrap());
        let c = train(&windows, &cfg, &TrainConfig { seed: 4, ..tc }, Variant::Ours, &NormStats::default(), TrainSinks::default()).unwrap();
        assert_ne!(a.checkpoint.content_hash().unwrap(), c.checkpoint.content_hash().unwrap());
    }

    #[test]
    fn log_lines_have_six_fields() {
        let cfg = ModelConfig { latent_dim: 8, ff_dim: 16, heads: 1, layers: 1, ..ModelConfig::default() };
        let windows = toy_windows(&cfg, 40);
        let mut buf = Vec::new();
        let tc = TrainConfig { epochs: 2, batch_size: 16, ..TrainConfig::default() };
        train(&windows, &cfg, &tc, Variant::Ours, &NormStats::default(), TrainSinks { log: Some(&mut buf), ..Default::default() }).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().all(|l| l.split(',').count() == 6));
    }

    #[test]
    fn wrong_window_shape_rejected() {
        let cfg = ModelConfig::reduced();
        let windows = toy_windows(&cfg, 10);
        let tc = TrainConfig { epochs: 1, ..TrainConfig::default() };
        assert!(train(&windows, &cfg, &tc, Variant::Window50, &NormStats::default(), TrainSinks::default()).is_err());
    }

    #[test]
    fn nan_parameters_abort_with_batch_seed() {
        let cfg = ModelConfig::reduced();
        let net = Network::<f32>::new(&cfg);
        let mut p = ParamStore::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        p.data[0] = f32::NAN;
        let windows = toy_windows(&cfg, 4);
        let refs: Vec<&WindowSample> = windows.iter().collect();
        let s = make_schedule(8).unwrap();
        let batch = make_batch::<f32>(&cfg, &s, &NormStats::default(), &refs, &mut ChaCha8Rng::seed_from_u64(1), false, 0.0).unwrap();
        let w = (vec![1.0; 9], vec![1.0; 2]);
        assert!(matches!(loss_and_grad(&net, &p.data, &batch, &w, LossWeights::default(), None), Err(Error::Numeric { .. })));
    }
}
