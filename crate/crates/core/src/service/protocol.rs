//! Wire messages: one JSON object per line or web-socket text frame, tagged
//! by `type`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Quat};
use crate::sim::{CommandVector, NUM_CHANNELS};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WirePose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub qw: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
}

impl From<&Pose> for WirePose {
    fn from(p: &Pose) -> Self {
        let q = p.orientation;
        WirePose { x: p.position[0], y: p.position[1], z: p.position[2], qw: q.w, qx: q.x, qy: q.y, qz: q.z }
    }
}

impl WirePose {
    /// Validated, canonical pose.
    pub fn to_pose(&self) -> Result<Pose> {
        let p = Pose::new([self.x, self.y, self.z], Quat::new(self.qw, self.qx, self.qy, self.qz));
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SessionMessage {
    // client to server
    HumanPose {
        t: f64,
        x: f64,
        y: f64,
        z: f64,
        qw: f64,
        qx: f64,
        qy: f64,
        qz: f64,
    },
    SetMood {
        t: f64,
        mood: String,
    },
    Reset {
        t: f64,
        seed: u64,
    },
    // server to client
    Hello {
        t: f64,
        schema_version: u32,
        model: String,
        profile: String,
        mood: String,
        resumed: bool,
    },
    World {
        t: f64,
        robot: WirePose,
        head: [f64; 3],
        mode: String,
        active_event: String,
        human: WirePose,
    },
    Commands {
        t: f64,
        c0: f64,
        c1: f64,
        c2: f64,
        c3: f64,
        c4: f64,
        c5: f64,
        c6: f64,
        c7: f64,
        c8: f64,
        c9: f64,
    },
    Event {
        t: f64,
        name: String,
    },
    Status {
        t: f64,
        model: String,
        profile: String,
        latency_ms: f64,
    },
    Error {
        t: f64,
        message: String,
    },
}

impl SessionMessage {
    pub fn parse(line: &str) -> Result<Self> {
        let msg: SessionMessage = serde_json::from_str(line.trim()).map_err(|e| Error::format(format!("bad message: {e}")))?;
        if !msg.t().is_finite() {
            return Err(Error::format("message timestamp must be finite"));
        }
        Ok(msg)
    }

    /// Single-line JSON.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("session messages always serialize")
    }

    pub fn t(&self) -> f64 {
        match self {
            SessionMessage::HumanPose { t, .. }
            | SessionMessage::SetMood { t, .. }
            | SessionMessage::Reset { t, .. }
            | SessionMessage::Hello { t, .. }
            | SessionMessage::World { t, .. }
            | SessionMessage::Commands { t, .. }
            | SessionMessage::Event { t, .. }
            | SessionMessage::Status { t, .. }
            | SessionMessage::Error { t, .. } => *t,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            SessionMessage::HumanPose { .. } => "human_pose",
            SessionMessage::SetMood { .. } => "set_mood",
            SessionMessage::Reset { .. } => "reset",
            SessionMessage::Hello { .. } => "hello",
            SessionMessage::World { .. } => "world",
            SessionMessage::Commands { .. } => "commands",
            SessionMessage::Event { .. } => "event",
            SessionMessage::Status { .. } => "status",
            SessionMessage::Error { .. } => "error",
        }
    }

    pub fn is_client(&self) -> bool {
        matches!(self, SessionMessage::HumanPose { .. } | SessionMessage::SetMood { .. } | SessionMessage::Reset { .. })
    }

    pub fn human_pose(t: f64, p: &Pose) -> Self {
        let w = WirePose::from(p);
        SessionMessage::HumanPose { t, x: w.x, y: w.y, z: w.z, qw: w.qw, qx: w.qx, qy: w.qy, qz: w.qz }
    }

    pub fn commands(t: f64, c: &CommandVector) -> Self {
        let c = c.0;
        SessionMessage::Commands { t, c0: c[0], c1: c[1], c2: c[2], c3: c[3], c4: c[4], c5: c[5], c6: c[6], c7: c[7], c8: c[8], c9: c[9] }
    }

    pub fn command_vector(&self) -> Option<CommandVector> {
        match *self {
            SessionMessage::Commands { c0, c1, c2, c3, c4, c5, c6, c7, c8, c9, .. } => {
                let v: [f64; NUM_CHANNELS] = [c0, c1, c2, c3, c4, c5, c6, c7, c8, c9];
                Some(CommandVector(v))
            }
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CORPUS: &str = include_str!("../../tests/data/protocol_corpus.jsonl");

    #[test]
    fn corpus_round_trips_exactly() {
        let mut tags = std::collections::BTreeSet::new();
        for line in CORPUS.lines().filter(|l| !l.trim().is_empty()) {
            let m = SessionMessage::parse(line).unwrap();
            assert_eq!(m.to_line(), line, "re-serialization differs");
            tags.insert(m.tag());
        }
        assert_eq!(tags.len(), 9);
    }

    #[test]
    fn unknown_tag_and_fields_rejected() {
        assert!(SessionMessage::parse(r#"{"type":"teleport","t":0.0}"#).is_err());
        assert!(SessionMessage::parse(r#"{"type":"reset","t":0.0,"seed":1,"extra":2}"#).is_err());
        assert!(SessionMessage::parse("not json").is_err());
    }

    #[test]
    fn pose_conversion_validates() {
        let m = SessionMessage::parse(r#"{"type":"human_pose","t":1.0,"x":1.0,"y":0.0,"z":1.7,"qw":0.0,"qx":0.0,"qy":0.0,"qz":0.0}"#).unwrap();
        if let SessionMessage::HumanPose { x, y, z, qw, qx, qy, qz, .. } = m {
            assert!(WirePose { x, y, z, qw, qx, qy, qz }.to_pose().is_err());
        }
    }

    #[test]
    fn commands_helper_round_trips() {
        let c = CommandVector([0.1, -0.2, 0.3, 0.0, 0.5, -0.6, 0.7, 0.8, -0.9, 1.0]);
        assert_eq!(SessionMessage::commands(2.0, &c).command_vector(), Some(c));
    }
}
