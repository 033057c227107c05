//! Binary episode container.
//!
//! Layout (little endian):
//!
//! ```text
//! "AOPD" | version u32 | frame count u32 | rate f32
//! mood u8 | seed u64 | oracle version u32 | profile name (u16 length + utf8)
//! frames: time f64 | robot 7 x f32 | human 7 x f32 | cmd 10 x f32 | event u8 | mode u8
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde_json::json;

use super::{Episode, EpisodeMeta, Frame};
use crate::error::{Error, Result};
use crate::geometry::{Pose, Quat};
use crate::operator::Mood;
use crate::sim::{BehaviorEvent, CommandVector, Mode, NUM_CHANNELS};

pub const EPISODE_MAGIC: &[u8; 4] = b"AOPD";
pub const EPISODE_VERSION: u32 = 1;

fn put_pose(out: &mut Vec<u8>, p: &Pose) {
    for v in p.to_array() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn write_episode<W: Write>(w: &mut W, ep: &Episode) -> Result<()> {
    let name = ep.meta.profile.as_bytes();
    if name.len() > u16::MAX as usize {
        return Err(Error::format("profile name too long"));
    }
    let frames = u32::try_from(ep.frames.len()).map_err(|_| Error::format("too many frames"))?;
    let mut out = Vec::with_capacity(40 + ep.frames.len() * 126);
    out.extend_from_slice(EPISODE_MAGIC);
    out.extend_from_slice(&EPISODE_VERSION.to_le_bytes());
    out.extend_from_slice(&frames.to_le_bytes());
    out.extend_from_slice(&(ep.rate_hz as f32).to_le_bytes());
    out.push(ep.mood.index() as u8);
    out.extend_from_slice(&ep.seed.to_le_bytes());
    out.extend_from_slice(&ep.meta.oracle_version.to_le_bytes());
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name);
    for f in &ep.frames {
        out.extend_from_slice(&f.time.to_le_bytes());
        put_pose(&mut out, &f.robot);
        put_pose(&mut out, &f.human);
        for v in f.cmd.0 {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.push(f.event.index() as u8);
        out.push(f.mode.index() as u8);
    }
    w.write_all(&out)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(format!("episode truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn pose(&mut self) -> Result<Pose> {
        let mut v = [0.0; 7];
        for x in v.iter_mut() {
            *x = self.f32()?;
        }
        // stored quaternions are kept as written, no re-canonicalization
        Ok(Pose { position: [v[0], v[1], v[2]], orientation: Quat { w: v[3], x: v[4], y: v[5], z: v[6] } })
    }
}

pub fn read_episode<R: Read>(r: &mut R) -> Result<Episode> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4)? != EPISODE_MAGIC {
        return Err(Error::format("not an episode file (bad magic)"));
    }
    let version = c.u32()?;
    if version != EPISODE_VERSION {
        return Err(Error::format(format!("unsupported episode version {version}")));
    }
    let count = c.u32()? as usize;
    let rate_hz = c.f32()?;
    let mood_idx = c.u8()?;
    let mood = Mood::from_index(mood_idx as usize).ok_or_else(|| Error::format(format!("bad mood {mood_idx}")))?;
    let seed = c.u64()?;
    let oracle_version = c.u32()?;
    let name_len = c.u16()? as usize;
    let profile = String::from_utf8(c.take(name_len)?.to_vec()).map_err(|_| Error::format("profile name is not utf-8"))?;
    let mut frames = Vec::with_capacity(count);
    for _ in 0..count {
        let time = c.f64()?;
        let robot = c.pose()?;
        let human = c.pose()?;
        let mut cmd = [0.0; NUM_CHANNELS];
        for v in cmd.iter_mut() {
            *v = c.f32()?;
        }
        let e = c.u8()?;
        let m = c.u8()?;
        let event = BehaviorEvent::from_index(e as usize).ok_or_else(|| Error::format(format!("bad event {e}")))?;
        let mode = Mode::from_index(m as usize).ok_or_else(|| Error::format(format!("bad mode {m}")))?;
        frames.push(Frame { time, robot, human, cmd: CommandVector(cmd), event, mode });
    }
    if c.pos != buf.len() {
        return Err(Error::format(format!("{} trailing bytes after episode", buf.len() - c.pos)));
    }
    Ok(Episode { mood, seed, rate_hz, frames, meta: EpisodeMeta { oracle_version, profile } })
}

pub fn write_episode_file(path: &Path, ep: &Episode) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write_episode(&mut f, ep)
}

pub fn read_episode_file(path: &Path) -> Result<Episode> {
    let mut f = fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open episode {}: {e}", path.display())))?;
    read_episode(&mut f)
}

/// Inspection form: one JSON document with a frame array.
pub fn episode_to_json(ep: &Episode) -> serde_json::Value {
    let frames: Vec<_> = ep
        .frames
        .iter()
        .map(|f| {
            json!({
                "t": f.time,
                "robot": f.robot.to_array(),
                "human": f.human.to_array(),
                "cmd": f.cmd.0,
                "event": f.event.name(),
                "mode": f.mode.name(),
            })
        })
        .collect();
    json!({
        "format": "AOPD",
        "version": EPISODE_VERSION,
        "mood": ep.mood.name(),
        "seed": ep.seed,
        "rate_hz": ep.rate_hz,
        "oracle_version": ep.meta.oracle_version,
        "profile": ep.meta.profile,
        "frames": frames,
    })
}
