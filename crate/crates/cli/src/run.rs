use std::fmt::Write as _;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use log::info;
use teleop_core::config::{Config, Source};
use teleop_core::dataset::{episode_to_json, read_episode_file, Split};
use teleop_core::evaluator::{ablation_grid, check_test_chunks, diversity_probe, report_kv, report_table, run_eval, run_oracle_eval, EvalSetup, MetricReport};
use teleop_core::model::{make_variant, Checkpoint, CheckpointMeta, CommandModel, ModelConfig, TrainedModel, Variant};
use teleop_core::operator::Mood;
use teleop_core::pipeline::{generate_sessions, load_dataset, prepare_manifest, write_dataset};
use teleop_core::service::{serve, MoodModels, ServeConfig, SessionMessage};
use teleop_core::trainer::{train, TrainSinks};
use teleop_core::{Error, Result};

use crate::{Cli, Command};

pub const RUN_MANIFEST: &str = "run.manifest";
const RUN_MANIFEST_VERSION: u32 = 1;

const SMOKE: &[(&str, &str)] = &[
    ("model.latent_dim", "16"),
    ("model.ff_dim", "32"),
    ("model.layers", "1"),
    ("data.minutes", "4"),
    ("train.epochs", "2"),
    ("train.batch_size", "32"),
    ("train.checkpoint_every", "1"),
];

/// Collects what a run did; written as `run.manifest` in the output directory.
struct RunRecord {
    dir: PathBuf,
    started: Instant,
    outputs: Vec<(String, String)>,
}

impl RunRecord {
    fn new(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir).map_err(|e| Error::config(format!("cannot create {}: {e}", dir.display())))?;
        Ok(RunRecord { dir, started: Instant::now(), outputs: Vec::new() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn output(&mut self, key: &str, value: impl ToString) {
        self.outputs.push((key.to_string(), value.to_string()));
    }

    fn write(&self, cli: &Cli, sub: &str, cfg: &Config) -> Result<()> {
        let mut s = String::new();
        let _ = writeln!(s, "format_version={RUN_MANIFEST_VERSION}");
        let _ = writeln!(s, "tool_version={}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(s, "subcommand={sub}");
        let _ = writeln!(s, "args={}", std::env::args().skip(1).collect::<Vec<_>>().join(" "));
        let _ = writeln!(s, "smoke={}", cli.smoke);
        let _ = writeln!(s, "elapsed_s={:.3}", self.started.elapsed().as_secs_f64());
        for (k, v, src) in cfg.entries() {
            let _ = writeln!(s, "config.{k}={v}");
            if src != Source::Default {
                let _ = writeln!(s, "source.{k}={}", src.name());
            }
        }
        for (k, v) in &self.outputs {
            let _ = writeln!(s, "output.{k}={v}");
        }
        fs::write(self.path(RUN_MANIFEST), s)?;
        Ok(())
    }
}

fn resolve(cli: &Cli) -> Result<Config> {
    let mut cfg = Config::load(cli.config.as_deref())?;
    if cli.smoke {
        for (k, v) in SMOKE {
            cfg.set(k, v)?;
        }
    }
    let mut flag = |k: &str, v: Option<String>| -> Result<()> {
        match v {
            Some(v) => cfg.set(k, &v),
            None => Ok(()),
        }
    };
    match &cli.command {
        Command::GenData(a) => {
            flag("data.minutes", a.minutes.map(|m| m.to_string()))?;
            flag("data.seed", a.seed.map(|s| s.to_string()))?;
            flag("profile", a.profile.clone())?;
        }
        Command::Train(a) => {
            flag("train.epochs", a.epochs.map(|e| e.to_string()))?;
            flag("train.seed", a.seed.map(|s| s.to_string()))?;
        }
        Command::Eval(a) => {
            flag("eval.seeds", a.seeds.clone())?;
            flag("profile", a.profile.clone())?;
        }
        Command::Ablate(a) => {
            flag("train.epochs", a.epochs.map(|e| e.to_string()))?;
            flag("eval.seeds", a.seeds.clone())?;
        }
        Command::Serve(a) => {
            flag("profile", a.profile.clone())?;
            flag("serve.mood", a.mood.clone())?;
        }
        _ => {}
    }
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    match &cli.command {
        Command::GenData(a) => gen_data(cli, &cfg, &a.mood),
        Command::Train(a) => train_cmd(cli, &cfg, &a.data, &a.variant),
        Command::Eval(a) => eval_cmd(cli, &cfg, a),
        Command::Ablate(a) => ablate_cmd(cli, &cfg, a.data.as_deref()),
        Command::ProbeDiversity(a) => probe_cmd(cli, &cfg, a),
        Command::Serve(a) => serve_cmd(cli, &cfg, a),
        Command::ExportEpisode(a) => export_cmd(cli, &cfg, &a.input, a.output.as_deref()),
        Command::ConfigTemplate => {
            print!("{}", Config::template());
            Ok(())
        }
    }
}

fn moods_for(arg: &str) -> Result<Vec<Mood>> {
    if arg == "all" {
        Ok(Mood::ALL.to_vec())
    } else {
        Ok(vec![arg.parse()?])
    }
}

fn session_plan(cfg: &Config, moods: &[Mood]) -> Result<Vec<(Mood, f64)>> {
    let minutes: Option<f64> = cfg.get_opt("data.minutes")?;
    if let Some(m) = minutes {
        if !(m.is_finite() && m > 0.0) {
            return Err(Error::config("data.minutes must be positive"));
        }
    }
    Ok(moods.iter().map(|&m| (m, minutes.unwrap_or_else(|| m.session_minutes()))).collect())
}

fn gen_data(cli: &Cli, cfg: &Config, mood: &str) -> Result<()> {
    let mut rec = RunRecord::new(out_dir(cli, "data"))?;
    let plan = session_plan(cfg, &moods_for(mood)?)?;
    let profile = cfg.profile()?;
    let eps = generate_sessions(&plan, cfg.get("data.seed")?, &profile)?;
    let manifest = prepare_manifest(&eps, cfg.get("data.split_fraction")?, cfg.get("data.split_seed")?, cfg.get("data.stride")?)?;
    write_dataset(&rec.dir, &eps, &manifest)?;
    for (name, ep) in manifest.episodes.iter().zip(&eps) {
        println!("{name} frames={} mood={} seed={}", ep.len(), ep.mood.name(), ep.seed);
        rec.output(&format!("episode.{name}.frames"), ep.len());
    }
    rec.output("manifest", rec.path(teleop_core::pipeline::DATASET_MANIFEST).display());
    rec.write(cli, "gen-data", cfg)
}

fn train_cmd(cli: &Cli, cfg: &Config, data: &Path, variant: &str) -> Result<()> {
    let variant: Variant = variant.parse()?;
    let mut rec = RunRecord::new(out_dir(cli, &format!("runs/train_{}", variant.tag())))?;
    let (manifest, eps) = load_dataset(data)?;
    let base = cfg.model_config()?;
    let tc = cfg.train_config()?;
    let vcfg = make_variant(variant, &base);
    let windows = manifest.windows(&eps, Split::Train, vcfg.history, vcfg.horizon, cfg.get("data.stride")?)?;
    info!("training {} on {} windows", variant.tag(), windows.len());
    let mut moods: Vec<&str> = eps.iter().map(|e| e.mood.name()).collect();
    moods.dedup();
    let mut log = fs::File::create(rec.path("train.log"))?;
    let sinks = TrainSinks {
        log: Some(&mut log),
        checkpoint_dir: Some(rec.path("checkpoints")),
        meta: CheckpointMeta { mood: moods.join(","), profile: cfg.profile()?.name, ..CheckpointMeta::default() },
    };
    let out = train(&windows, &base, &tc, variant, &manifest.norm, sinks)?;
    let hash = out.checkpoint.save(&rec.path("model.aopc"))?;
    let last = out.history.last().map(|h| h.loss.total).unwrap_or(f64::NAN);
    println!(
        "variant={} epochs={} best_epoch={} final_loss={last:.6} stopped_early={} checkpoint={} hash={hash}",
        variant.tag(),
        out.history.len(),
        out.best_epoch,
        out.stopped_early,
        rec.path("model.aopc").display()
    );
    rec.output("checkpoint", rec.path("model.aopc").display());
    rec.output("checkpoint_hash", hash);
    rec.output("epochs_run", out.history.len());
    rec.output("best_epoch", out.best_epoch);
    rec.write(cli, "train", cfg)
}

const STRUCTURAL_KEYS: &[&str] =
    &["model.latent_dim", "model.ff_dim", "model.heads", "model.layers", "model.history", "model.horizon", "model.diffusion_steps"];

/// Loads a checkpoint, rejecting explicit config values that contradict it.
fn load_model(cfg: &Config, path: &Path) -> Result<TrainedModel> {
    let ck = Checkpoint::load(path)?;
    let c = &ck.config;
    let stored = [c.latent_dim, c.ff_dim, c.heads, c.layers, c.history, c.horizon, c.diffusion_steps];
    for (k, v) in STRUCTURAL_KEYS.iter().zip(stored) {
        let explicit = cfg.source(k) != Some(Source::Default);
        if explicit && cfg.get::<usize>(k)? != v {
            return Err(Error::config(format!("{k}={} does not match checkpoint value {v}", cfg.raw(k)?)));
        }
    }
    let mut model = ck.into_model()?;
    if cfg.source("model.guidance_scale") != Some(Source::Default) {
        model.guidance_scale = cfg.get("model.guidance_scale")?;
    }
    Ok(model)
}

fn seeds(cfg: &Config) -> Result<Vec<u64>> {
    let s: Vec<u64> = cfg.get_list("eval.seeds")?;
    if s.is_empty() {
        return Err(Error::config("eval.seeds is empty"));
    }
    Ok(s)
}

fn eval_cmd(cli: &Cli, cfg: &Config, a: &crate::Eval) -> Result<()> {
    if a.checkpoint.is_none() && !a.oracle {
        return Err(Error::config("eval needs --checkpoint or --oracle"));
    }
    let mut rec = RunRecord::new(out_dir(cli, "runs/eval"))?;
    let (manifest, eps) = load_dataset(&a.data)?;
    let mut chunks = manifest.chunk_episodes(&eps, Split::Test)?;
    check_test_chunks(&manifest, &eps, &chunks)?;
    if cli.smoke {
        chunks.truncate(1);
    }
    let seeds = seeds(cfg)?;
    let profile = cfg.profile()?;
    let setup = EvalSetup { chunks: &chunks, seeds: &seeds, profile: &profile, controller: cfg.controller_config()? };
    let mut reports: Vec<MetricReport> = Vec::new();
    let mut traces = Vec::new();
    if let Some(p) = &a.checkpoint {
        let model = load_model(cfg, p)?;
        let tag = model.variant.tag();
        let (r, t) = run_eval(tag, Arc::new(model), &setup)?;
        reports.push(r);
        traces.extend(t);
    }
    if a.oracle {
        let (r, t) = run_oracle_eval(cfg.get("model.history")?, &setup)?;
        reports.push(r);
        traces.extend(t);
    }
    let refs: Vec<&MetricReport> = reports.iter().collect();
    let table = report_table(&refs);
    print!("{table}");
    fs::write(rec.path("table.txt"), &table)?;
    fs::write(rec.path("report.txt"), report_kv(&refs))?;
    rec.output("report", rec.path("report.txt").display());
    if a.traces {
        let dir = rec.path("traces");
        fs::create_dir_all(&dir)?;
        for (i, t) in traces.iter().enumerate() {
            t.save(&dir.join(format!("rollout_{i:03}.txt")))?;
        }
        rec.output("traces", dir.display());
    }
    rec.write(cli, "eval", cfg)
}

fn ablate_cmd(cli: &Cli, cfg: &Config, data: Option<&Path>) -> Result<()> {
    let mut rec = RunRecord::new(out_dir(cli, "runs/ablate"))?;
    let stride: usize = cfg.get("data.stride")?;
    let (manifest, eps) = match data {
        Some(d) => load_dataset(d)?,
        None => {
            let eps = generate_sessions(&session_plan(cfg, &[Mood::Default])?, cfg.get("data.seed")?, &cfg.profile()?)?;
            let m = prepare_manifest(&eps, cfg.get("data.split_fraction")?, cfg.get("data.split_seed")?, stride)?;
            (m, eps)
        }
    };
    let mut chunks = manifest.chunk_episodes(&eps, Split::Test)?;
    if cli.smoke {
        chunks.truncate(1);
    }
    let seeds = seeds(cfg)?;
    let profile = cfg.profile()?;
    let setup = EvalSetup { chunks: &chunks, seeds: &seeds, profile: &profile, controller: cfg.controller_config()? };
    let base: ModelConfig = cfg.model_config()?;
    let rows = ablation_grid(&manifest, &eps, &base, &cfg.train_config()?, stride, &setup)?;
    let reports: Vec<&MetricReport> = rows.iter().map(|r| &r.report).collect();
    let table = report_table(&reports);
    print!("{table}");
    fs::write(rec.path("ablation.txt"), &table)?;
    fs::write(rec.path("ablation_report.txt"), report_kv(&reports))?;
    let (oracle, _) = run_oracle_eval(base.history, &setup)?;
    fs::write(rec.path("oracle_report.txt"), report_kv(&[&oracle]))?;
    for r in &rows {
        rec.output(&format!("{}.checkpoint_hash", r.variant.tag()), &r.checkpoint_hash);
        rec.output(&format!("{}.train_seconds", r.variant.tag()), format!("{:.1}", r.train_seconds));
    }
    rec.write(cli, "ablate", cfg)
}

fn probe_cmd(cli: &Cli, cfg: &Config, a: &crate::Probe) -> Result<()> {
    let mut rec = RunRecord::new(out_dir(cli, "runs/probe"))?;
    let mut model = load_model(cfg, &a.checkpoint)?;
    if !(a.noise_scale.is_finite() && a.noise_scale >= 0.0) {
        return Err(Error::config("--noise-scale must be non-negative"));
    }
    model.noise_scale = a.noise_scale;
    let seeds: Vec<u64> = a
        .seeds
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| Error::config(format!("bad seed {s:?}"))))
        .collect::<Result<_>>()?;
    let seconds = if cli.smoke { a.seconds.min(2.0) } else { a.seconds };
    let report = diversity_probe(&model, &seeds, seconds, &cfg.profile()?, &cfg.controller_config()?)?;
    println!("max_pairwise={:.4} mean_pairwise={:.4}", report.max_pairwise, report.mean_pairwise);
    fs::write(rec.path("diversity.txt"), report.to_text())?;
    fs::write(rec.path("traces.txt"), report.traces_text())?;
    rec.output("max_pairwise", report.max_pairwise);
    rec.write(cli, "probe-diversity", cfg)
}

fn serve_cmd(cli: &Cli, cfg: &Config, a: &crate::Serve) -> Result<()> {
    let mut rec = RunRecord::new(out_dir(cli, "runs/serve"))?;
    let mood: Mood = cfg.raw("serve.mood")?.parse()?;
    let mut paths = cfg.mood_checkpoints()?;
    if let Some(p) = &a.checkpoint {
        paths.insert(mood, p.clone());
    }
    let start = paths.get(&mood).ok_or_else(|| Error::config(format!("no checkpoint for mood {}", mood.name())))?;
    let name = start.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into());
    let mut models = MoodModels { name, models: Default::default() };
    for (m, p) in &paths {
        let model: Arc<dyn CommandModel> = Arc::new(load_model(cfg, p)?);
        models.models.insert(*m, model);
        rec.output(&format!("checkpoint.{}", m.name()), p.display());
    }
    let mut bind: SocketAddr = cfg.raw("serve.bind")?.parse().map_err(|_| Error::config("serve.bind must be host:port"))?;
    if let Some(p) = a.port {
        bind.set_port(p);
    }
    if cli.smoke {
        bind.set_port(0);
    }
    let scfg = ServeConfig {
        bind: bind.to_string(),
        profile: cfg.profile()?,
        mood,
        seed: cfg.get("serve.seed")?,
        controller: cfg.controller_config()?,
        resume_timeout: cfg.resume_timeout()?,
        async_inference: cfg.get("serve.async_inference")?,
        outbound_capacity: cfg.get("serve.outbound_capacity")?,
    };
    let handle = serve(scfg, models)?;
    rec.output("address", handle.addr);
    rec.write(cli, "serve", cfg)?;
    println!("listening on ws://{}", handle.addr);
    if cli.smoke {
        let n = smoke_client(handle.addr)?;
        println!("smoke client received {n} command frames");
        return handle.stop();
    }
    handle.wait()
}

/// Connects, streams poses for two seconds and counts `commands` replies.
fn smoke_client(addr: SocketAddr) -> Result<usize> {
    use teleop_core::geometry::Pose;
    use tungstenite::Message;
    let (mut ws, _) = tungstenite::connect(format!("ws://{addr}")).map_err(|e| Error::data(format!("smoke client: {e}")))?;
    let t0 = Instant::now();
    let mut count = 0;
    let mut sent = 0usize;
    while t0.elapsed() < Duration::from_secs(2) {
        let msg = ws.read().map_err(|e| Error::data(format!("smoke client: {e}")))?;
        if let Message::Text(t) = msg {
            let m = SessionMessage::parse(t.as_str())?;
            if m.tag() == "commands" {
                count += 1;
                let p = Pose::planar(1.5 + 0.002 * sent as f64, 0.3, 1.7, 3.0);
                ws.send(Message::text(SessionMessage::human_pose(m.t(), &p).to_line())).map_err(|e| Error::data(format!("smoke client: {e}")))?;
                sent += 1;
            }
        }
    }
    let _ = ws.close(None);
    if count == 0 {
        return Err(Error::data("smoke client received no commands"));
    }
    Ok(count)
}

fn export_cmd(cli: &Cli, cfg: &Config, input: &Path, output: Option<&Path>) -> Result<()> {
    let ep = read_episode_file(input)?;
    let out = output.map(Path::to_path_buf).unwrap_or_else(|| input.with_extension("json"));
    fs::write(&out, serde_json::to_string_pretty(&episode_to_json(&ep))?)?;
    println!("{} frames={}", out.display(), ep.len());
    let mut rec = RunRecord::new(out_dir(cli, "runs/export"))?;
    rec.output("json", out.display());
    rec.write(cli, "export-episode", cfg)
}
