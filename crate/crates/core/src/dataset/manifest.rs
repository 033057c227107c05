//! Chunked train/test assignment and its text form.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{extract_windows, Episode, NormStats, WindowSample};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
/// One minute at 50 Hz.
pub const CHUNK_FRAMES: usize = 3000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Frames `[start, end)` of episode `episode`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkEntry {
    pub episode: usize,
    pub start: usize,
    pub end: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub fraction: f64,
    pub chunk_frames: usize,
    /// Episode file names, relative to the manifest's directory.
    pub episodes: Vec<String>,
    pub chunks: Vec<ChunkEntry>,
    pub norm: NormStats,
}

/// Cuts every episode into one-minute chunks (a trailing remainder of at
/// least half a chunk is kept), shuffles them with `seed` and assigns
/// `round(fraction * n)` to train.
pub fn split_dataset(episodes: &[(String, usize)], fraction: f64, seed: u64) -> Result<DatasetManifest> {
    split_with_chunk(episodes, fraction, seed, CHUNK_FRAMES)
}

pub fn split_with_chunk(episodes: &[(String, usize)], fraction: f64, seed: u64, chunk_frames: usize) -> Result<DatasetManifest> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!("split fraction {fraction} must lie in (0, 1)")));
    }
    if chunk_frames == 0 {
        return Err(Error::config("chunk length must be positive"));
    }
    let mut spans = Vec::new();
    for (i, (_, len)) in episodes.iter().enumerate() {
        let mut start = 0;
        while start < *len {
            let end = (start + chunk_frames).min(*len);
            if end - start >= chunk_frames.div_ceil(2) {
                spans.push((i, start, end));
            }
            start = end;
        }
    }
    let n = spans.len();
    if n < 2 {
        return Err(Error::data(format!("need at least 2 one-minute chunks to split, found {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut chunks: Vec<ChunkEntry> = spans
        .iter()
        .map(|&(episode, start, end)| ChunkEntry { episode, start, end, split: Split::Test })
        .collect();
    for &k in &order[..n_train] {
        chunks[k].split = Split::Train;
    }
    Ok(DatasetManifest {
        version: MANIFEST_VERSION,
        seed,
        fraction,
        chunk_frames,
        episodes: episodes.iter().map(|(n, _)| n.clone()).collect(),
        chunks,
        norm: NormStats::default(),
    })
}

impl DatasetManifest {
    pub fn chunks_in(&self, split: Split) -> impl Iterator<Item = &ChunkEntry> {
        self.chunks.iter().filter(move |c| c.split == split)
    }

    /// Each chunk of `split` as a standalone episode; `episodes` must be in
    /// manifest order.
    pub fn chunk_episodes(&self, episodes: &[Episode], split: Split) -> Result<Vec<Episode>> {
        self.check_episodes(episodes)?;
        Ok(self.chunks_in(split).map(|c| episodes[c.episode].slice(c.start, c.end)).collect())
    }

    /// Windows of every chunk of `split`; no window crosses a chunk boundary.
    pub fn windows(&self, episodes: &[Episode], split: Split, history: usize, horizon: usize, stride: usize) -> Result<Vec<WindowSample>> {
        let mut out = Vec::new();
        for ep in self.chunk_episodes(episodes, split)? {
            out.extend(extract_windows(&ep, history, horizon, stride)?);
        }
        Ok(out)
    }

    pub fn check_episodes(&self, episodes: &[Episode]) -> Result<()> {
        if episodes.len() != self.episodes.len() {
            return Err(Error::data(format!(
                "manifest lists {} episodes, {} supplied",
                self.episodes.len(),
                episodes.len()
            )));
        }
        for c in &self.chunks {
            if c.end > episodes[c.episode].len() {
                return Err(Error::data(format!("chunk {}..{} exceeds episode {}", c.start, c.end, self.episodes[c.episode])));
            }
        }
        Ok(())
    }

    /// Loads every listed episode relative to `dir`.
    pub fn load_episodes(&self, dir: &Path) -> Result<Vec<Episode>> {
        self.episodes.iter().map(|n| super::read_episode_file(&dir.join(n))).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let n = &self.norm;
        let _ = writeln!(s, "format_version={}", self.version);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "fraction={}", self.fraction);
        let _ = writeln!(s, "chunk_frames={}", self.chunk_frames);
        let _ = writeln!(s, "norm.position_scale={}", n.position_scale);
        let _ = writeln!(s, "norm.clip={}", n.clip);
        let _ = writeln!(s, "norm.mean={},{},{}", n.mean[0], n.mean[1], n.mean[2]);
        let _ = writeln!(s, "norm.std={},{},{}", n.std[0], n.std[1], n.std[2]);
        let _ = writeln!(s, "norm.windows={}", n.windows);
        let _ = writeln!(s, "episodes={}", self.episodes.len());
        for (i, e) in self.episodes.iter().enumerate() {
            let _ = writeln!(s, "episode.{i}={e}");
        }
        let _ = writeln!(s, "chunks={}", self.chunks.len());
        for (i, c) in self.chunks.iter().enumerate() {
            let _ = writeln!(s, "chunk.{i}={},{},{},{}", c.episode, c.start, c.end, c.split.name());
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = std::collections::BTreeMap::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("manifest line {}: expected key=value", ln + 1)))?;
            kv.insert(k.trim().to_string(), v.to_string());
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::format(format!("manifest missing key {k}")));
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::format(format!("manifest key {k}: bad value {v:?}")))
        }
        let triple = |k: &str| -> Result<[f64; 3]> {
            let v = get(k)?;
            let parts: Vec<&str> = v.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::format(format!("manifest key {k}: expected 3 values")));
            }
            Ok([num(k, parts[0])?, num(k, parts[1])?, num(k, parts[2])?])
        };
        let version: u32 = num("format_version", get("format_version")?)?;
        if version != MANIFEST_VERSION {
            return Err(Error::format(format!("unsupported manifest version {version}")));
        }
        let n_ep: usize = num("episodes", get("episodes")?)?;
        let episodes = (0..n_ep).map(|i| get(&format!("episode.{i}")).cloned()).collect::<Result<Vec<_>>>()?;
        let n_chunks: usize = num("chunks", get("chunks")?)?;
        let mut chunks = Vec::with_capacity(n_chunks);
        for i in 0..n_chunks {
            let key = format!("chunk.{i}");
            let v = get(&key)?;
            let p: Vec<&str> = v.split(',').collect();
            if p.len() != 4 {
                return Err(Error::format(format!("manifest key {key}: expected episode,start,end,split")));
            }
            let c = ChunkEntry {
                episode: num(&key, p[0])?,
                start: num(&key, p[1])?,
                end: num(&key, p[2])?,
                split: Split::parse(p[3].trim()).ok_or_else(|| Error::format(format!("manifest key {key}: bad split")))?,
            };
            if c.episode >= n_ep || c.start >= c.end {
                return Err(Error::format(format!("manifest key {key}: invalid chunk")));
            }
            chunks.push(c);
        }
        Ok(DatasetManifest {
            version,
            seed: num("seed", get("seed")?)?,
            fraction: num("fraction", get("fraction")?)?,
            chunk_frames: num("chunk_frames", get("chunk_frames")?)?,
            episodes,
            chunks,
            norm: NormStats {
                position_scale: num("norm.position_scale", get("norm.position_scale")?)?,
                clip: num("norm.clip", get("norm.clip")?)?,
                mean: triple("norm.mean")?,
                std: triple("norm.std")?,
                windows: num("norm.windows", get("norm.windows")?)?,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("cannot read manifest {}: {e}", path.display())))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::tests::synthetic_episode;
    use crate::dataset::{window_count, DEFAULT_HISTORY, DEFAULT_HORIZON};

    #[test]
    fn eight_chunks_give_six_two() {
        let m = split_dataset(&[("a".into(), 24000)], 0.75, 3).unwrap();
        assert_eq!(m.chunks.len(), 8);
        assert_eq!(m.chunks_in(Split::Train).count(), 6);
        assert_eq!(m.chunks_in(Split::Test).count(), 2);
        assert_eq!(split_dataset(&[("a".into(), 24000)], 0.75, 3).unwrap(), m);
        let other = (0..20).map(|s| split_dataset(&[("a".into(), 24000)], 0.75, s).unwrap()).any(|o| o.chunks != m.chunks);
        assert!(other);
    }

    #[test]
    fn remainder_and_too_little_data() {
        let m = split_dataset(&[("a".into(), 7600), ("b".into(), 2900)], 0.75, 0).unwrap();
        // a: 3000, 3000, 1600 kept; b: 2900 kept
        assert_eq!(m.chunks.len(), 4);
        let m = split_dataset(&[("a".into(), 7400)], 0.75, 0).unwrap();
        assert_eq!(m.chunks.len(), 2);
        assert!(split_dataset(&[("a".into(), 3000)], 0.75, 0).is_err());
        assert!(split_dataset(&[("a".into(), 9000)], 1.0, 0).is_err());
    }

    #[test]
    fn no_frame_overlap_between_splits() {
        let eps = vec![synthetic_episode(8000), synthetic_episode(4000)];
        let m = split_dataset(&[("a".into(), 8000), ("b".into(), 4000)], 0.75, 9).unwrap();
        let mut owner = [vec![None; 8000], vec![None; 4000]];
        for c in &m.chunks {
            for slot in &mut owner[c.episode][c.start..c.end] {
                assert!(slot.is_none());
                *slot = Some(c.split);
            }
        }
        let train = m.windows(&eps, Split::Train, DEFAULT_HISTORY, DEFAULT_HORIZON, 5).unwrap();
        let expected: usize = m
            .chunks_in(Split::Train)
            .map(|c| window_count(c.end - c.start, DEFAULT_HISTORY, DEFAULT_HORIZON, 5))
            .sum();
        assert_eq!(train.len(), expected);
    }

    #[test]
    fn text_round_trip() {
        let mut m = split_dataset(&[("ep_0.aopd".into(), 9000), ("ep 1.aopd".into(), 6000)], 0.75, 11).unwrap();
        m.norm.mean = [0.1234567890123, -1.0 / 3.0, 2e-17];
        m.norm.std = [0.5, 0.25, 1.0 / 7.0];
        m.norm.windows = 1234;
        let text = m.to_text();
        let back = DatasetManifest::from_text(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_text(), text);
        assert!(DatasetManifest::from_text("format_version=9\n").is_err());
    }
}
