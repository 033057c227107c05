//! Rigid-body poses and the robot-relative transform used to condition the model.
//!
//! Orientations are unit quaternions stored as `(w, x, y, z)` and kept in the
//! `w >= 0` hemisphere so that consecutive frames of a track stay continuous.

use std::ops::Mul;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }
    }

    /// Rotation of `angle` radians about the world z axis.
    pub fn from_yaw(angle: f64) -> Self {
        let (s, c) = (0.5 * angle).sin_cos();
        Quat::new(c, 0.0, 0.0, s).canonical()
    }

    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Self {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if n == 0.0 {
            return Quat::IDENTITY;
        }
        let (s, c) = (0.5 * angle).sin_cos();
        Quat::new(c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n).canonical()
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn conjugate(&self) -> Self {
        Quat::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Unit norm with `w >= 0`.
    pub fn canonical(self) -> Self {
        let n = self.norm();
        let s = if self.w < 0.0 { -1.0 / n } else { 1.0 / n };
        Quat::new(self.w * s, self.x * s, self.y * s, self.z * s)
    }

    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        // v' = v + 2w (u x v) + 2 u x (u x v)
        let u = [self.x, self.y, self.z];
        let t = cross(u, v);
        let t = [2.0 * t[0], 2.0 * t[1], 2.0 * t[2]];
        let ut = cross(u, t);
        [
            v[0] + self.w * t[0] + ut[0],
            v[1] + self.w * t[1] + ut[1],
            v[2] + self.w * t[2] + ut[2],
        ]
    }

    /// Heading of the body +x axis projected on the ground plane.
    pub fn yaw(&self) -> f64 {
        let f = self.rotate([1.0, 0.0, 0.0]);
        f[1].atan2(f[0])
    }

    /// Angular distance-like measure that treats `q` and `-q` as equal.
    pub fn distance(&self, other: &Quat) -> f64 {
        let dot = self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z;
        1.0 - dot.abs().min(1.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    fn is_finite(&self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Mul for Quat {
    type Output = Quat;

    /// Hamilton product, canonicalized.
    fn mul(self, r: Quat) -> Quat {
        let l = self;
        Quat::new(
            l.w * r.w - l.x * r.x - l.y * r.y - l.z * r.z,
            l.w * r.x + l.x * r.w + l.y * r.z - l.z * r.y,
            l.w * r.y - l.x * r.z + l.y * r.w + l.z * r.x,
            l.w * r.z + l.x * r.y - l.y * r.x + l.z * r.w,
        )
        .canonical()
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// One frame: global position in meters plus orientation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: [f64; 3],
    pub orientation: Quat,
}

impl Default for Pose {
    fn default() -> Self {
        Pose::IDENTITY
    }
}

impl Pose {
    pub const IDENTITY: Pose = Pose { position: [0.0; 3], orientation: Quat::IDENTITY };

    pub fn new(position: [f64; 3], orientation: Quat) -> Self {
        Pose { position, orientation: orientation.canonical() }
    }

    pub fn planar(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Pose { position: [x, y, z], orientation: Quat::from_yaw(yaw) }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.position.iter().all(|v| v.is_finite()) || !self.orientation.is_finite() {
            return Err(Error::validation(format!("non-finite pose {self:?}")));
        }
        let n = self.orientation.norm();
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::validation(format!("quaternion norm {n} is not unit")));
        }
        Ok(())
    }

    /// `[x, y, z, qw, qx, qy, qz]`, the 7-value layout used on disk and by the model.
    pub fn to_array(&self) -> [f64; 7] {
        let q = self.orientation;
        let p = self.position;
        [p[0], p[1], p[2], q.w, q.x, q.y, q.z]
    }

    pub fn from_array(v: [f64; 7]) -> Self {
        Pose::new([v[0], v[1], v[2]], Quat::new(v[3], v[4], v[5], v[6]))
    }

    /// Round every component through `f32` so the pose survives the binary
    /// episode format unchanged.
    pub fn quantized(&self) -> Self {
        let v = self.to_array().map(|x| x as f32 as f64);
        Pose {
            position: [v[0], v[1], v[2]],
            orientation: Quat::new(v[3], v[4], v[5], v[6]),
        }
    }

    pub fn yaw(&self) -> f64 {
        self.orientation.yaw()
    }

    /// `self ∘ other`: applies `other` expressed in this frame.
    pub fn compose(&self, other: &Pose) -> Pose {
        let r = self.orientation.rotate(other.position);
        Pose {
            position: [
                self.position[0] + r[0],
                self.position[1] + r[1],
                self.position[2] + r[2],
            ],
            orientation: self.orientation * other.orientation,
        }
    }

    pub fn planar_distance(&self, other: &Pose) -> f64 {
        let dx = other.position[0] - self.position[0];
        let dy = other.position[1] - self.position[1];
        dx.hypot(dy)
    }
}

/// Human pose expressed in the robot's body frame.
pub fn relative_pose(robot: &Pose, human: &Pose) -> Result<Pose> {
    robot.validate()?;
    human.validate()?;
    let inv = robot.orientation.conjugate();
    let d = [
        human.position[0] - robot.position[0],
        human.position[1] - robot.position[1],
        human.position[2] - robot.position[2],
    ];
    Ok(Pose {
        position: inv.rotate(d),
        orientation: inv * human.orientation,
    })
}

/// Uniformly sampled sequence of poses.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseTrack {
    pub frames: Vec<Pose>,
    pub rate_hz: f64,
}

impl PoseTrack {
    pub fn new(frames: Vec<Pose>, rate_hz: f64) -> Self {
        PoseTrack { frames, rate_hz }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

pub fn relative_track(robot: &PoseTrack, human: &PoseTrack) -> Result<PoseTrack> {
    if robot.len() != human.len() {
        return Err(Error::validation(format!(
            "track length mismatch: robot {} vs human {}",
            robot.len(),
            human.len()
        )));
    }
    if robot.rate_hz != human.rate_hz {
        return Err(Error::validation(format!(
            "track rate mismatch: robot {} Hz vs human {} Hz",
            robot.rate_hz, human.rate_hz
        )));
    }
    let frames = robot
        .frames
        .iter()
        .zip(&human.frames)
        .map(|(r, h)| relative_pose(r, h))
        .collect::<Result<Vec<_>>>()?;
    Ok(PoseTrack::new(frames, robot.rate_hz))
}

/// Angle in degrees between the robot's forward axis and the robot→human
/// bearing, both projected to the ground plane. Coincident positions give 0°.
pub fn facing_angle(robot: &Pose, human: &Pose) -> f64 {
    let dx = human.position[0] - robot.position[0];
    let dy = human.position[1] - robot.position[1];
    let dist = dx.hypot(dy);
    if dist <= 1e-6 {
        return 0.0;
    }
    let f = robot.orientation.rotate([1.0, 0.0, 0.0]);
    let fn_ = f[0].hypot(f[1]);
    if fn_ <= 1e-12 {
        // forward axis is vertical; no meaningful heading
        return 90.0;
    }
    // atan2 of cross and dot keeps full precision near 0 and 180 degrees
    let cross = f[0] * dy - f[1] * dx;
    let dot = f[0] * dx + f[1] * dy;
    cross.abs().atan2(dot).to_degrees()
}

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if r <= -std::f64::consts::PI {
        r += two_pi;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn close(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
        a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn identity_frame_leaves_pose_unchanged() {
        let human = Pose::new([1.0, -2.0, 1.7], Quat::from_axis_angle([0.3, 0.1, 1.0], 0.7));
        let rel = relative_pose(&Pose::IDENTITY, &human).unwrap();
        assert!(close(rel.position, human.position, 1e-12));
        assert!(rel.orientation.distance(&human.orientation) < 1e-12);
    }

    #[test]
    fn self_relative_is_identity() {
        let p = Pose::new([0.4, 2.0, 0.3], Quat::from_axis_angle([1.0, 2.0, 3.0], 2.1));
        let rel = relative_pose(&p, &p).unwrap();
        assert!(close(rel.position, [0.0; 3], 1e-12));
        assert!(rel.orientation.distance(&Quat::IDENTITY) < 1e-12);
    }

    #[test]
    fn yawed_robot_sees_human_on_its_right() {
        let robot = Pose::planar(0.0, 0.0, 0.0, FRAC_PI_2);
        let human = Pose::planar(1.0, 0.0, 0.0, 0.0);
        let rel = relative_pose(&robot, &human).unwrap();
        // component-wise oracle: R_z(-90°) applied to (1, 0, 0)
        let (s, c) = (-FRAC_PI_2).sin_cos();
        let expected = [c * 1.0 - s * 0.0, s * 1.0 + c * 0.0, 0.0];
        assert!(close(rel.position, expected, 1e-12));
        assert!(close(rel.position, [0.0, -1.0, 0.0], 1e-12));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let bad = Pose { position: [f64::NAN, 0.0, 0.0], orientation: Quat::IDENTITY };
        assert!(relative_pose(&bad, &Pose::IDENTITY).is_err());
        assert!(relative_pose(&Pose::IDENTITY, &bad).is_err());
    }

    #[test]
    fn track_length_mismatch_is_rejected() {
        let a = PoseTrack::new(vec![Pose::IDENTITY; 3], 50.0);
        let b = PoseTrack::new(vec![Pose::IDENTITY; 4], 50.0);
        assert!(relative_track(&a, &b).is_err());
    }

    #[test]
    fn identical_tracks_give_identity_poses() {
        let frames: Vec<Pose> =
            (0..15).map(|i| Pose::planar(i as f64 * 0.1, 0.5, 0.2, i as f64 * 0.05)).collect();
        let t = PoseTrack::new(frames, 50.0);
        let rel = relative_track(&t, &t).unwrap();
        for p in rel.frames {
            assert!(close(p.position, [0.0; 3], 1e-12));
            assert!(p.orientation.distance(&Quat::IDENTITY) < 1e-12);
        }
    }

    #[test]
    fn static_identity_robot_leaves_human_track() {
        let human: Vec<Pose> =
            (0..15).map(|i| Pose::planar(1.0, i as f64 * 0.02, 1.7, 0.3)).collect();
        let robot = PoseTrack::new(vec![Pose::IDENTITY; 15], 50.0);
        let rel = relative_track(&robot, &PoseTrack::new(human.clone(), 50.0)).unwrap();
        for (r, h) in rel.frames.iter().zip(&human) {
            assert!(close(r.position, h.position, 1e-12));
        }
    }

    #[test]
    fn facing_angle_cases() {
        let robot = Pose::IDENTITY;
        assert!(facing_angle(&robot, &Pose::planar(2.0, 0.0, 0.0, 0.0)).abs() < 1e-9);
        assert!((facing_angle(&robot, &Pose::planar(-2.0, 0.0, 0.0, 0.0)) - 180.0).abs() < 1e-9);
        let oracle = 1.0f64.atan2(1.0).to_degrees();
        assert!((facing_angle(&robot, &Pose::planar(1.0, 1.0, 0.0, 0.0)) - oracle).abs() < 1e-9);
        assert_eq!(facing_angle(&robot, &Pose::planar(0.0, 0.0, 1.0, 0.0)), 0.0);
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(0.5) - 0.5).abs() < 1e-15);
    }
}
