//! Run configuration: a flat `key = value` file with `include` lines,
//! overridden by `TELEOP_*` environment variables, overridden by flags.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use crate::controller::ControllerConfig;
use crate::error::{Error, Result};
use crate::model::loss::LossWeights;
use crate::model::ModelConfig;
use crate::operator::Mood;
use crate::sim::EmbodimentProfile;
use crate::trainer::TrainConfig;

pub const ENV_PREFIX: &str = "TELEOP_";

/// Every recognised key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("data.seed", "7", "dataset seed; per-mood episode seeds derive from it"),
    ("data.minutes", "", "session length override in minutes; empty uses the per-mood table"),
    ("data.split_fraction", "0.75", "share of chunks assigned to training"),
    ("data.split_seed", "7", "chunk shuffle seed"),
    ("data.stride", "10", "frame stride between training windows"),
    ("model.latent_dim", "128", "transformer width"),
    ("model.ff_dim", "256", "feed-forward width"),
    ("model.heads", "2", "attention heads"),
    ("model.layers", "2", "encoder blocks"),
    ("model.history", "15", "past frames M"),
    ("model.horizon", "25", "predicted frames N"),
    ("model.diffusion_steps", "8", "diffusion steps T"),
    ("model.cond_drop_prob", "0.1", "probability of dropping command tokens in training"),
    ("model.guidance_scale", "1.0", "classifier-free guidance weight at inference"),
    ("model.pe_dropout", "0.0", "dropout after positional encoding"),
    ("train.epochs", "500", "maximum epochs"),
    ("train.batch_size", "128", "windows per step"),
    ("train.learning_rate", "1e-4", "step size"),
    ("train.beta1", "0.9", "first moment decay"),
    ("train.beta2", "0.999", "second moment decay"),
    ("train.adam_eps", "1e-8", "optimizer epsilon"),
    ("train.seed", "0", "initialization and batch seed"),
    ("train.patience", "50", "epochs without held-out improvement before stopping; 0 disables"),
    ("train.checkpoint_every", "50", "epochs between checkpoints"),
    ("train.holdout_fraction", "0.1", "share of training windows held out for early stopping"),
    ("train.behavior_weight", "0.1", "weight of the behavior classification loss"),
    ("train.mode_weight", "0.1", "weight of the mode classification loss"),
    ("train.class_weighting", "true", "inverse-frequency class weights in the classification losses"),
    ("train.height_augmentation", "true", "random human height shift of up to 0.3 m"),
    ("controller.replan_every", "10", "frames consumed between replans (K)"),
    ("controller.sigma_frames", "2.0", "Gaussian smoothing width in frames"),
    ("controller.behavior_threshold", "0.5", "probability needed to fire a behavior"),
    ("controller.cooldown_margin", "1.0", "seconds added to a fired behavior's cooldown"),
    ("controller.mode_votes", "3", "agreeing windows needed to switch mode"),
    ("controller.stale_ramp", "0.2", "seconds for locomotion to ramp to zero on a stale human"),
    ("eval.seeds", "11,22,33", "rollout seeds"),
    ("profile", "bipod", "embodiment profile: bipod or humanoid"),
    ("serve.bind", "127.0.0.1:8765", "listen address"),
    ("serve.mood", "default", "mood active at session start"),
    ("serve.seed", "0", "session seed"),
    ("serve.resume_timeout", "30", "seconds a disconnected session stays resumable"),
    ("serve.async_inference", "true", "run inference on the worker thread"),
    ("serve.outbound_capacity", "256", "outbound message queue bound"),
    ("checkpoint.default", "", "checkpoint for the default mood"),
    ("checkpoint.angry", "", "checkpoint for the angry mood"),
    ("checkpoint.sad", "", "checkpoint for the sad mood"),
    ("checkpoint.shy", "", "checkpoint for the shy mood"),
    ("checkpoint.happy", "", "checkpoint for the happy mood"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Default,
    File,
    Env,
    Flag,
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Env => "env",
            Source::Flag => "flag",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Config {
    values: BTreeMap<String, (String, Source)>,
}

impl Default for Config {
    fn default() -> Self {
        let values = KEYS.iter().map(|(k, v, _)| (k.to_string(), (v.to_string(), Source::Default))).collect();
        Config { values }
    }
}

pub fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.to_ascii_uppercase().replace('.', "_"))
}

impl Config {
    /// Defaults, then `file` if given, then the process environment.
    pub fn load(file: Option<&Path>) -> Result<Self> {
        let mut c = Config::default();
        if let Some(p) = file {
            c.merge_file(p)?;
        }
        c.merge_env(std::env::vars())?;
        Ok(c)
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let mut seen = BTreeSet::new();
        self.merge_file_inner(path, &mut seen)
    }

    fn merge_file_inner(&mut self, path: &Path, seen: &mut BTreeSet<PathBuf>) -> Result<()> {
        let canon = path.canonicalize().map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        if !seen.insert(canon.clone()) {
            return Err(Error::config(format!("include cycle at {}", path.display())));
        }
        let text = std::fs::read_to_string(&canon).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let dir = canon.parent().map(Path::to_path_buf).unwrap_or_default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::config(format!("{}:{}: expected key = value", path.display(), n + 1)))?;
            if k == "include" {
                self.merge_file_inner(&dir.join(v), seen)?;
            } else {
                self.set_from(k, v, Source::File).map_err(|e| Error::config(format!("{}:{}: {e}", path.display(), n + 1)))?;
            }
        }
        seen.remove(&canon);
        Ok(())
    }

    /// Applies `TELEOP_<KEY>` overrides, e.g. `TELEOP_TRAIN_EPOCHS`.
    pub fn merge_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        let by_env: BTreeMap<String, &str> = KEYS.iter().map(|(k, _, _)| (env_name(k), *k)).collect();
        for (name, value) in vars {
            if !name.starts_with(ENV_PREFIX) {
                continue;
            }
            match by_env.get(&name) {
                Some(k) => self.set_from(k, &value, Source::Env)?,
                None => return Err(Error::config(format!("unknown environment override {name}"))),
            }
        }
        Ok(())
    }

    /// Flag override; highest precedence.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_from(key, value, Source::Flag)
    }

    fn set_from(&mut self, key: &str, value: &str, source: Source) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = (value.to_string(), source);
                Ok(())
            }
            None => Err(Error::config(format!("unknown key {key}"))),
        }
    }

    pub fn raw(&self, key: &str) -> Result<&str> {
        self.values.get(key).map(|(v, _)| v.as_str()).ok_or_else(|| Error::config(format!("unknown key {key}")))
    }

    pub fn source(&self, key: &str) -> Option<Source> {
        self.values.get(key).map(|(_, s)| *s)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key)?;
        v.parse().map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")))
    }

    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        if self.raw(key)?.is_empty() {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.raw(key)?
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| Error::config(format!("{key}: cannot parse {s:?}"))))
            .collect()
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let c = ModelConfig {
            latent_dim: self.get("model.latent_dim")?,
            ff_dim: self.get("model.ff_dim")?,
            heads: self.get("model.heads")?,
            layers: self.get("model.layers")?,
            history: self.get("model.history")?,
            horizon: self.get("model.horizon")?,
            diffusion_steps: self.get("model.diffusion_steps")?,
            cond_drop_prob: self.get("model.cond_drop_prob")?,
            guidance_scale: self.get("model.guidance_scale")?,
            pe_dropout: self.get("model.pe_dropout")?,
            ..ModelConfig::default()
        };
        c.validate()?;
        Ok(c)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let c = TrainConfig {
            epochs: self.get("train.epochs")?,
            batch_size: self.get("train.batch_size")?,
            learning_rate: self.get("train.learning_rate")?,
            beta1: self.get("train.beta1")?,
            beta2: self.get("train.beta2")?,
            adam_eps: self.get("train.adam_eps")?,
            seed: self.get("train.seed")?,
            patience: self.get("train.patience")?,
            checkpoint_every: self.get("train.checkpoint_every")?,
            holdout_fraction: self.get("train.holdout_fraction")?,
            loss_weights: LossWeights { behavior: self.get("train.behavior_weight")?, mode: self.get("train.mode_weight")? },
            class_weighting: self.get("train.class_weighting")?,
            height_augmentation: self.get("train.height_augmentation")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn controller_config(&self) -> Result<ControllerConfig> {
        Ok(ControllerConfig {
            replan_every: self.get("controller.replan_every")?,
            sigma_frames: self.get("controller.sigma_frames")?,
            behavior_threshold: self.get("controller.behavior_threshold")?,
            cooldown_margin: self.get("controller.cooldown_margin")?,
            mode_votes: self.get("controller.mode_votes")?,
            stale_ramp: self.get("controller.stale_ramp")?,
            ..ControllerConfig::default()
        })
    }

    pub fn profile(&self) -> Result<EmbodimentProfile> {
        EmbodimentProfile::by_name(self.raw("profile")?)
    }

    pub fn resume_timeout(&self) -> Result<Duration> {
        let s: f64 = self.get("serve.resume_timeout")?;
        if !(s.is_finite() && s >= 0.0) {
            return Err(Error::config("serve.resume_timeout must be non-negative"));
        }
        Ok(Duration::from_secs_f64(s))
    }

    /// Checkpoint paths configured per mood.
    pub fn mood_checkpoints(&self) -> Result<BTreeMap<Mood, PathBuf>> {
        let mut out = BTreeMap::new();
        for m in Mood::ALL {
            let v = self.raw(&format!("checkpoint.{}", m.name()))?;
            if !v.is_empty() {
                out.insert(m, PathBuf::from(v));
            }
        }
        Ok(out)
    }

    /// Resolved entries as `(key, value, source)`.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &str, Source)> {
        self.values.iter().map(|(k, (v, s))| (k.as_str(), v.as_str(), *s))
    }

    /// Resolved `key = value` lines, each tagged with where it came from.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, (v, src)) in &self.values {
            let _ = writeln!(s, "{k} = {v}  # {}", src.name());
        }
        s
    }

    /// Documented template listing every key at its default.
    pub fn template() -> String {
        let mut s = String::new();
        for (k, v, doc) in KEYS {
            let _ = writeln!(s, "# {doc} (env {})\n{k} = {v}", env_name(k));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn defaults_build_valid_configs() {
        let c = Config::default();
        let m = c.model_config().unwrap();
        assert_eq!(m, ModelConfig::default());
        assert_eq!(c.train_config().unwrap(), TrainConfig::default());
        assert_eq!(c.controller_config().unwrap(), ControllerConfig::default());
        assert_eq!(c.get_list::<u64>("eval.seeds").unwrap(), vec![11, 22, 33]);
        assert!(c.mood_checkpoints().unwrap().is_empty());
        assert_eq!(c.resume_timeout().unwrap(), Duration::from_secs(30));
    }

    #[test]
    fn precedence_is_flag_env_file() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "base.conf", "train.epochs = 5\ntrain.seed = 3\nmodel.layers = 1\n");
        let main = write(dir.path(), "main.conf", "include = base.conf\ntrain.seed = 4 # later wins\n");
        let mut c = Config::default();
        c.merge_file(&main).unwrap();
        assert_eq!(c.get::<usize>("train.epochs").unwrap(), 5);
        assert_eq!(c.get::<u64>("train.seed").unwrap(), 4);
        c.merge_env([("TELEOP_TRAIN_EPOCHS".to_string(), "9".to_string()), ("PATH".into(), "/bin".into())]).unwrap();
        assert_eq!(c.get::<usize>("train.epochs").unwrap(), 9);
        assert_eq!(c.source("train.epochs"), Some(Source::Env));
        c.set("train.epochs", "11").unwrap();
        assert_eq!(c.get::<usize>("train.epochs").unwrap(), 11);
        assert_eq!(c.source("model.layers"), Some(Source::File));
        assert!(c.to_text().contains("train.epochs = 11  # flag"));
    }

    #[test]
    fn rejects_bad_input() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "a.conf", "include = b.conf\n");
        write(dir.path(), "b.conf", "include = a.conf\n");
        assert!(matches!(Config::default().merge_file(&a), Err(Error::Config(_))));
        let bad = write(dir.path(), "bad.conf", "train.epoch = 3\n");
        assert!(Config::default().merge_file(&bad).is_err());
        let junk = write(dir.path(), "junk.conf", "just words\n");
        assert!(Config::default().merge_file(&junk).is_err());
        assert!(Config::default().merge_env([("TELEOP_NOPE".to_string(), "1".to_string())]).is_err());
        let mut c = Config::default();
        c.set("model.latent_dim", "abc").unwrap();
        assert!(c.model_config().is_err());
        c.set("model.latent_dim", "129").unwrap();
        assert!(c.model_config().is_err());
    }

    #[test]
    fn template_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "t.conf", &Config::template());
        let mut c = Config::default();
        c.merge_file(&p).unwrap();
        for (k, v, _) in KEYS {
            assert_eq!(c.raw(k).unwrap(), *v);
        }
    }
}
