//! Scripted subject motion.
//!
//! Poses come from forward kinematics on a rigid torso with hinged limbs, so
//! every link length is fixed by the subject's scale. Body frame: +x forward,
//! +y left, +z up, origin on the floor under the pelvis.

use std::f64::consts::{PI, TAU};

use nalgebra::{Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{JointId, Point3, SkeletonPose, NUM_JOINTS};

const NECK: [f64; 3] = [0.0, 0.0, 1.45];
const HEAD_ABOVE_NECK: f64 = 0.25;
const SHOULDER: [f64; 3] = [0.0, 0.19, 1.42];
const HIP: [f64; 3] = [0.0, 0.10, 0.92];
const UPPER_ARM: f64 = 0.30;
const FOREARM: f64 = 0.26;
const THIGH: f64 = 0.44;
const SHANK: f64 = 0.43;
const ARM_ABDUCTION: f64 = 0.10;

/// Per-group sinusoid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Oscillation {
    /// Peak end-effector displacement (m).
    pub amplitude_m: f64,
    pub frequency_hz: f64,
}

impl Oscillation {
    pub const NONE: Oscillation = Oscillation {
        amplitude_m: 0.0,
        frequency_hz: 0.0,
    };

    fn value(&self, t: f64, phase: f64) -> f64 {
        self.amplitude_m * (TAU * self.frequency_hz * t + phase).sin()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MotionScript {
    Static {
        position: [f64; 2],
        #[serde(default)]
        heading_deg: f64,
    },
    Oscillate {
        position: [f64; 2],
        #[serde(default)]
        heading_deg: f64,
        arms: Oscillation,
        legs: Oscillation,
        /// Lateral sway of the whole body.
        sway: Oscillation,
    },
    /// Closed loop through the waypoints at constant speed.
    Walk {
        waypoints: Vec<[f64; 2]>,
        speed: f64,
        /// Distance along the loop at t = 0 (m).
        #[serde(default)]
        start_offset_m: f64,
    },
}

impl MotionScript {
    pub fn validate(&self) -> Result<()> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match self {
            MotionScript::Static { position, heading_deg } => {
                if !finite(position) || !heading_deg.is_finite() {
                    return Err(Error::Config("static motion needs a finite position".into()));
                }
            }
            MotionScript::Oscillate {
                position,
                heading_deg,
                arms,
                legs,
                sway,
            } => {
                if !finite(position) || !heading_deg.is_finite() {
                    return Err(Error::Config("oscillation needs a finite position".into()));
                }
                for o in [arms, legs, sway] {
                    if !(o.amplitude_m >= 0.0 && o.frequency_hz >= 0.0) {
                        return Err(Error::Config("oscillation amplitude and frequency must be >= 0".into()));
                    }
                }
                if arms.amplitude_m > 0.9 * (UPPER_ARM + FOREARM) || legs.amplitude_m > 0.9 * (THIGH + SHANK) {
                    return Err(Error::Config("oscillation amplitude exceeds limb reach".into()));
                }
            }
            MotionScript::Walk {
                waypoints,
                speed,
                start_offset_m,
            } => {
                if waypoints.len() < 2 {
                    return Err(Error::Config("walk needs at least two waypoints".into()));
                }
                if !(*speed > 0.0 && speed.is_finite()) {
                    return Err(Error::Config("walk speed must be positive".into()));
                }
                if !start_offset_m.is_finite() || !waypoints.iter().all(|w| finite(w)) {
                    return Err(Error::Config("walk waypoints must be finite".into()));
                }
                if Loop::new(waypoints).perimeter <= 0.0 {
                    return Err(Error::Config("walk waypoints are all identical".into()));
                }
            }
        }
        Ok(())
    }
}

/// Limb angles (rad); positive swing is forward.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Stance {
    left_arm: f64,
    right_arm: f64,
    left_elbow: f64,
    right_elbow: f64,
    left_hip: f64,
    right_hip: f64,
    left_knee: f64,
    right_knee: f64,
}

/// Scripted subject with a body size.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub scale: f64,
    pub script: MotionScript,
    /// Phase offset (rad) applied to oscillations.
    pub phase: f64,
    path: Option<Loop>,
}

impl Subject {
    pub fn new(id: impl Into<String>, scale: f64, script: MotionScript, phase: f64) -> Result<Self> {
        script.validate()?;
        if !(scale > 0.2 && scale < 3.0) {
            return Err(Error::Config(format!("subject scale {scale} out of range")));
        }
        let path = match &script {
            MotionScript::Walk { waypoints, .. } => Some(Loop::new(waypoints)),
            _ => None,
        };
        Ok(Subject {
            id: id.into(),
            scale,
            script,
            phase,
            path,
        })
    }

    /// Ground-truth skeleton at time t.
    pub fn pose_at(&self, t: f64) -> SkeletonPose {
        let (root, heading, lift, stance) = self.placement(t);
        self.forward_kinematics(root, heading, lift, &stance)
    }

    /// Floor position, heading, vertical lift and limb angles at t.
    fn placement(&self, t: f64) -> (Vector2<f64>, f64, f64, Stance) {
        match &self.script {
            MotionScript::Static { position, heading_deg } => {
                let stance = Stance {
                    left_elbow: 0.15,
                    right_elbow: 0.15,
                    ..Stance::default()
                };
                (Vector2::from(*position), heading_deg.to_radians(), 0.0, stance)
            }
            MotionScript::Oscillate {
                position,
                heading_deg,
                arms,
                legs,
                sway,
            } => {
                let heading = heading_deg.to_radians();
                let arm = arms.value(t, self.phase) / ((UPPER_ARM + FOREARM) * self.scale);
                let leg = legs.value(t, self.phase) / ((THIGH + SHANK) * self.scale);
                let lateral = sway.value(t, self.phase + PI / 2.0);
                let side = Vector2::new(-heading.sin(), heading.cos());
                let stance = Stance {
                    left_arm: arm,
                    right_arm: -arm,
                    left_elbow: 0.2 + arm.max(0.0),
                    right_elbow: 0.2 + (-arm).max(0.0),
                    left_hip: -leg,
                    right_hip: leg,
                    left_knee: 0.1 + 0.5 * leg.abs(),
                    right_knee: 0.1 + 0.5 * leg.abs(),
                };
                (Vector2::from(*position) + side * lateral, heading, 0.0, stance)
            }
            MotionScript::Walk {
                speed, start_offset_m, ..
            } => {
                let path = self.path.as_ref().expect("walk has a path");
                let s = start_offset_m + speed * t;
                let pos = path.smoothed(s, 0.3);
                let ahead = path.smoothed(s + 0.4, 0.3) - path.smoothed(s - 0.4, 0.3);
                let heading = ahead.y.atan2(ahead.x);
                let stride = (0.6 + 0.6 * speed) * self.scale;
                let phase = TAU * s / stride;
                let hip_amp = 0.2 + 0.15 * speed;
                let knee_amp = 0.3 + 0.3 * speed;
                let arm_amp = 0.6 * hip_amp;
                let elbow = 0.15 + 0.1 * speed;
                let knee = |p: f64| 0.05 + knee_amp * (p - 0.4).sin().max(0.0);
                let stance = Stance {
                    left_hip: hip_amp * phase.sin(),
                    right_hip: -hip_amp * phase.sin(),
                    left_knee: knee(phase + PI),
                    right_knee: knee(phase),
                    left_arm: -arm_amp * phase.sin(),
                    right_arm: arm_amp * phase.sin(),
                    left_elbow: elbow + 0.3 * (-phase.sin()).max(0.0),
                    right_elbow: elbow + 0.3 * phase.sin().max(0.0),
                };
                let lift = 0.02 * self.scale * (2.0 * phase).cos();
                (pos, heading, lift, stance)
            }
        }
    }

    fn forward_kinematics(&self, root: Vector2<f64>, heading: f64, lift: f64, stance: &Stance) -> SkeletonPose {
        use JointId::*;
        let k = self.scale;
        let yaw = Rotation3::from_axis_angle(&Vector3::z_axis(), heading);
        let origin = Vector3::new(root.x, root.y, lift);
        let world = |body: Vector3<f64>| origin + yaw * body;
        let down = -Vector3::z();
        // Swing about the body's lateral axis, positive forward.
        let swing = |angle: f64| Rotation3::from_axis_angle(&Vector3::y_axis(), -angle);
        let abduct = |angle: f64| Rotation3::from_axis_angle(&Vector3::x_axis(), angle);

        let neck = Vector3::from(NECK) * k;
        let mirror = |v: [f64; 3]| Vector3::new(v[0], -v[1], v[2]);
        let ls = Vector3::from(SHOULDER) * k;
        let rs = mirror(SHOULDER) * k;
        let lh = Vector3::from(HIP) * k;
        let rh = mirror(HIP) * k;

        let arm = |shoulder: Vector3<f64>, swing_a: f64, elbow_a: f64, side: f64| {
            let a = abduct(-side * ARM_ABDUCTION);
            let elbow = shoulder + a * (swing(swing_a) * down) * UPPER_ARM * k;
            let wrist = elbow + a * (swing(swing_a + elbow_a) * down) * FOREARM * k;
            (elbow, wrist)
        };
        let leg = |hip: Vector3<f64>, hip_a: f64, knee_a: f64| {
            let knee = hip + swing(hip_a) * down * THIGH * k;
            let ankle = knee + swing(hip_a - knee_a) * down * SHANK * k;
            (knee, ankle)
        };
        let (le, lw) = arm(ls, stance.left_arm, stance.left_elbow, 1.0);
        let (re, rw) = arm(rs, stance.right_arm, stance.right_elbow, -1.0);
        let (lk, la) = leg(lh, stance.left_hip, stance.left_knee);
        let (rk, ra) = leg(rh, stance.right_hip, stance.right_knee);

        let mut points = [Point3::zeros(); NUM_JOINTS];
        let mut put = |j: JointId, body: Vector3<f64>| points[j.index()] = world(body);
        put(Neck, neck);
        put(Head, neck + Vector3::z() * HEAD_ABOVE_NECK * k);
        put(LeftShoulder, ls);
        put(RightShoulder, rs);
        put(LeftElbow, le);
        put(RightElbow, re);
        put(LeftWrist, lw);
        put(RightWrist, rw);
        put(LeftHip, lh);
        put(RightHip, rh);
        put(LeftKnee, lk);
        put(RightKnee, rk);
        put(LeftAnkle, la);
        put(RightAnkle, ra);
        put(Chest, (ls + rs + lh + rh) / 4.0);
        SkeletonPose::from_points(points)
    }

    /// Horizontal heading at t, used for self-occlusion.
    pub fn heading_at(&self, t: f64) -> f64 {
        self.placement(t).1
    }
}

/// Closed polyline parameterized by arc length.
#[derive(Debug, Clone, PartialEq)]
struct Loop {
    points: Vec<Vector2<f64>>,
    cumulative: Vec<f64>,
    perimeter: f64,
}

impl Loop {
    fn new(waypoints: &[[f64; 2]]) -> Self {
        let points: Vec<_> = waypoints.iter().map(|w| Vector2::from(*w)).collect();
        let mut cumulative = vec![0.0];
        for i in 0..points.len() {
            let next = points[(i + 1) % points.len()];
            cumulative.push(cumulative[i] + (next - points[i]).norm());
        }
        let perimeter = *cumulative.last().unwrap();
        Loop {
            points,
            cumulative,
            perimeter,
        }
    }

    fn at(&self, s: f64) -> Vector2<f64> {
        let s = s.rem_euclid(self.perimeter);
        let i = match self.cumulative.partition_point(|c| *c <= s) {
            0 => 0,
            i => (i - 1).min(self.points.len() - 1),
        };
        let len = self.cumulative[i + 1] - self.cumulative[i];
        let a = self.points[i];
        let b = self.points[(i + 1) % self.points.len()];
        if len == 0.0 {
            return a;
        }
        a + (b - a) * ((s - self.cumulative[i]) / len)
    }

    /// Mean over a window of arc length, rounding the corners.
    fn smoothed(&self, s: f64, half_width: f64) -> Vector2<f64> {
        const TAPS: usize = 9;
        let mut acc = Vector2::zeros();
        for k in 0..TAPS {
            let u = -half_width + 2.0 * half_width * k as f64 / (TAPS - 1) as f64;
            acc += self.at(s + u);
        }
        acc / TAPS as f64
    }
}

/// Square loop of the given side centered at `center`.
pub fn square_loop(center: [f64; 2], side: f64) -> Vec<[f64; 2]> {
    let h = side / 2.0;
    let [cx, cy] = center;
    vec![[cx - h, cy - h], [cx + h, cy - h], [cx + h, cy + h], [cx - h, cy + h]]
}
