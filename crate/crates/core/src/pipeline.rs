//! Glue shared by the command line, the acceptance harness and the Python
//! bindings: session generation, splitting and normalizer fitting.

use std::path::Path;

use crate::dataset::{fit_normalizer, split_dataset, write_episode_file, DatasetManifest, Episode, Split, DEFAULT_HISTORY, DEFAULT_HORIZON};
use crate::error::{Error, Result};
use crate::operator::{sample_session_with, Mood};
use crate::sim::EmbodimentProfile;

pub const TRAIN_FRACTION: f64 = 0.75;

/// Episode seed for `mood` under a dataset seed.
pub fn session_seed(seed: u64, mood: Mood) -> u64 {
    seed.wrapping_mul(1000).wrapping_add(mood.index() as u64)
}

pub fn episode_name(mood: Mood, seed: u64) -> String {
    format!("{}_{seed}.aopd", mood.name())
}

/// One recorded session per entry of `moods`.
pub fn generate_sessions(moods: &[(Mood, f64)], seed: u64, profile: &EmbodimentProfile) -> Result<Vec<Episode>> {
    moods
        .iter()
        .map(|&(mood, minutes)| sample_session_with(mood, minutes * 60.0, session_seed(seed, mood), profile))
        .collect()
}

/// Splits `episodes` into train/test chunks and fits the pose normalizer on
/// the training windows.
pub fn prepare_manifest(episodes: &[Episode], fraction: f64, split_seed: u64, stride: usize) -> Result<DatasetManifest> {
    let names: Vec<(String, usize)> = episodes.iter().map(|e| (episode_name(e.mood, e.seed), e.len())).collect();
    let mut manifest = split_dataset(&names, fraction, split_seed)?;
    let windows = manifest.windows(episodes, Split::Train, DEFAULT_HISTORY, DEFAULT_HORIZON, stride)?;
    manifest.norm = fit_normalizer(&windows)?;
    Ok(manifest)
}

pub const DATASET_MANIFEST: &str = "dataset.manifest";

/// Writes every episode plus `dataset.manifest` into `dir`.
pub fn write_dataset(dir: &Path, episodes: &[Episode], manifest: &DatasetManifest) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, ep) in manifest.episodes.iter().zip(episodes) {
        write_episode_file(&dir.join(name), ep)?;
    }
    std::fs::write(dir.join(DATASET_MANIFEST), manifest.to_text())?;
    Ok(())
}

/// Reads a directory written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Episode>)> {
    let path = dir.join(DATASET_MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    let manifest = DatasetManifest::from_text(&text)?;
    let episodes = manifest.load_episodes(dir)?;
    manifest.check_episodes(&episodes)?;
    Ok((manifest, episodes))
}
