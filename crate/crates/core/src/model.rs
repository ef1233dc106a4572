//! Skeleton topology, the hierarchical body model and rigid transforms.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;

/// Number of tracked joints.
pub const NUM_JOINTS: usize = 15;

/// Tolerance used when validating rotation matrices.
pub const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointId {
    Head,
    Neck,
    Chest,
    LeftShoulder,
    RightShoulder,
    LeftElbow,
    RightElbow,
    LeftWrist,
    RightWrist,
    LeftHip,
    RightHip,
    LeftKnee,
    RightKnee,
    LeftAnkle,
    RightAnkle,
}

impl JointId {
    pub const ALL: [JointId; NUM_JOINTS] = [
        JointId::Head,
        JointId::Neck,
        JointId::Chest,
        JointId::LeftShoulder,
        JointId::RightShoulder,
        JointId::LeftElbow,
        JointId::RightElbow,
        JointId::LeftWrist,
        JointId::RightWrist,
        JointId::LeftHip,
        JointId::RightHip,
        JointId::LeftKnee,
        JointId::RightKnee,
        JointId::LeftAnkle,
        JointId::RightAnkle,
    ];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<JointId> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            JointId::Head => "head",
            JointId::Neck => "neck",
            JointId::Chest => "chest",
            JointId::LeftShoulder => "left_shoulder",
            JointId::RightShoulder => "right_shoulder",
            JointId::LeftElbow => "left_elbow",
            JointId::RightElbow => "right_elbow",
            JointId::LeftWrist => "left_wrist",
            JointId::RightWrist => "right_wrist",
            JointId::LeftHip => "left_hip",
            JointId::RightHip => "right_hip",
            JointId::LeftKnee => "left_knee",
            JointId::RightKnee => "right_knee",
            JointId::LeftAnkle => "left_ankle",
            JointId::RightAnkle => "right_ankle",
        }
    }

    /// True for joints on the subject's left side.
    pub fn is_left(self) -> bool {
        matches!(
            self,
            JointId::LeftShoulder
                | JointId::LeftElbow
                | JointId::LeftWrist
                | JointId::LeftHip
                | JointId::LeftKnee
                | JointId::LeftAnkle
        )
    }

    pub fn is_right(self) -> bool {
        matches!(
            self,
            JointId::RightShoulder
                | JointId::RightElbow
                | JointId::RightWrist
                | JointId::RightHip
                | JointId::RightKnee
                | JointId::RightAnkle
        )
    }
}

impl fmt::Display for JointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for JointId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        JointId::ALL
            .iter()
            .copied()
            .find(|j| j.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown joint `{s}`")))
    }
}

/// A parent→child edge of the body tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Link {
    pub parent: JointId,
    pub child: JointId,
}

impl Link {
    pub const fn new(parent: JointId, child: JointId) -> Self {
        Link { parent, child }
    }

    /// Links ending at Head or Chest are not length-optimized; the chest is
    /// recomputed from shoulders and hips and the head is passed through.
    pub fn is_optimized(&self) -> bool {
        !matches!(self.child, JointId::Head | JointId::Chest)
    }
}

/// Hierarchical body model rooted at the neck.
///
/// Hips hang from the shoulders rather than from the chest, following the
/// tree the tracker was designed around.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyModel {
    links: Vec<Link>,
    optimized: Vec<Link>,
}

impl Default for BodyModel {
    fn default() -> Self {
        Self::standard()
    }
}

impl BodyModel {
    pub const ROOT: JointId = JointId::Neck;

    pub fn standard() -> Self {
        use JointId::*;
        // Already in breadth-first order from the root, so it doubles as the
        // optimization order.
        let links = vec![
            Link::new(Neck, Head),
            Link::new(Neck, Chest),
            Link::new(Neck, LeftShoulder),
            Link::new(Neck, RightShoulder),
            Link::new(LeftShoulder, LeftElbow),
            Link::new(RightShoulder, RightElbow),
            Link::new(LeftElbow, LeftWrist),
            Link::new(RightElbow, RightWrist),
            Link::new(LeftShoulder, LeftHip),
            Link::new(RightShoulder, RightHip),
            Link::new(LeftHip, LeftKnee),
            Link::new(RightHip, RightKnee),
            Link::new(LeftKnee, LeftAnkle),
            Link::new(RightKnee, RightAnkle),
        ];
        Self::from_links(links)
    }

    /// Builds a model from an arbitrary edge list, reordering it so every
    /// parent is visited before its children.
    pub fn from_links(links: Vec<Link>) -> Self {
        let mut ordered = Vec::with_capacity(links.len());
        let mut frontier = vec![Self::ROOT];
        let mut head = 0;
        while head < frontier.len() {
            let joint = frontier[head];
            head += 1;
            for link in links.iter().filter(|l| l.parent == joint) {
                ordered.push(*link);
                frontier.push(link.child);
            }
        }
        let optimized = ordered.iter().copied().filter(Link::is_optimized).collect();
        BodyModel {
            links: ordered,
            optimized,
        }
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    /// Links in traversal order, parents always before children.
    pub fn optimization_order(&self) -> &[Link] {
        &self.links
    }

    /// The twelve links whose lengths are enforced.
    pub fn optimized_links(&self) -> &[Link] {
        &self.optimized
    }

    pub fn parent_of(&self, joint: JointId) -> Option<JointId> {
        self.links.iter().find(|l| l.child == joint).map(|l| l.parent)
    }

    pub fn children_of(&self, joint: JointId) -> impl Iterator<Item = JointId> + '_ {
        self.links
            .iter()
            .filter(move |l| l.parent == joint)
            .map(|l| l.child)
    }
}

/// Rotation plus translation mapping a local frame into the global frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTransform", into = "RawTransform")]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawTransform {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl TryFrom<RawTransform> for RigidTransform {
    type Error = Error;

    fn try_from(raw: RawTransform) -> Result<Self> {
        let r = raw.rotation;
        let rotation = Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        );
        RigidTransform::new(rotation, Vector3::from(raw.translation))
    }
}

impl From<RigidTransform> for RawTransform {
    fn from(t: RigidTransform) -> Self {
        let r = t.rotation;
        RawTransform {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    /// Validates that `rotation` is a proper rotation (RᵀR = I, det = +1).
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let deviation = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det_err = (rotation.determinant() - 1.0).abs();
        let worst = deviation.max(det_err);
        if !(worst <= ORTHONORMAL_TOL) || !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::NotOrthonormal(worst));
        }
        Ok(RigidTransform {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rotation = Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle);
        RigidTransform {
            rotation: rotation.into_inner(),
            translation,
        }
    }

    /// Camera-to-global transform for a camera at `eye` whose optical axis
    /// (+z) points at `target`, with +x to the right and +y down in the image.
    pub fn look_at(eye: &Point3, target: &Point3, world_up: &Vector3<f64>) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() == 0.0 {
            return Err(Error::Config("camera target coincides with its position".into()));
        }
        let z = forward.normalize();
        let x = z.cross(world_up);
        if x.norm() < 1e-12 {
            return Err(Error::Config("optical axis parallel to the up vector".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        Self::new(Matrix3::from_columns(&[x, y, z]), *eye)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    #[inline]
    pub fn apply(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn apply_homogeneous(m: &Matrix4<f64>, p: &Point3) -> Point3 {
        let h = m * Vector4::new(p.x, p.y, p.z, 1.0);
        Vector3::new(h.x, h.y, h.z) / h.w
    }
}

/// Fifteen optional joint positions; absent joints were not detected.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SkeletonPose {
    pub joints: [Option<Point3>; NUM_JOINTS],
}

impl SkeletonPose {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_points(points: [Point3; NUM_JOINTS]) -> Self {
        SkeletonPose {
            joints: points.map(Some),
        }
    }

    #[inline]
    pub fn get(&self, joint: JointId) -> Option<Point3> {
        self.joints[joint.index()]
    }

    #[inline]
    pub fn set(&mut self, joint: JointId, position: Option<Point3>) {
        self.joints[joint.index()] = position;
    }

    pub fn present(&self) -> impl Iterator<Item = (JointId, Point3)> + '_ {
        JointId::ALL
            .iter()
            .filter_map(move |&j| self.get(j).map(|p| (j, p)))
    }

    pub fn count_present(&self) -> usize {
        self.joints.iter().filter(|j| j.is_some()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.joints.iter().all(Option::is_some)
    }

    /// Present joints must have finite coordinates.
    pub fn is_valid(&self) -> bool {
        self.joints
            .iter()
            .flatten()
            .all(|p| p.iter().all(|v| v.is_finite()))
    }

    pub fn transform(&self, t: &RigidTransform) -> SkeletonPose {
        SkeletonPose {
            joints: self.joints.map(|j| j.map(|p| t.apply(&p))),
        }
    }

    /// Mean of the present joint positions.
    pub fn centroid(&self) -> Result<Point3> {
        let (sum, n) = self
            .joints
            .iter()
            .flatten()
            .fold((Vector3::zeros(), 0usize), |(s, n), p| (s + p, n + 1));
        if n == 0 {
            return Err(Error::NoJoints);
        }
        Ok(sum / n as f64)
    }

    /// Mean of both shoulders and both hips.
    pub fn derive_chest(&self) -> Result<Point3> {
        let mut sum = Vector3::zeros();
        for joint in [
            JointId::LeftShoulder,
            JointId::RightShoulder,
            JointId::LeftHip,
            JointId::RightHip,
        ] {
            sum += self
                .get(joint)
                .ok_or(Error::ChestUnderdetermined(joint.name()))?;
        }
        Ok(sum / 4.0)
    }

    pub fn link_length(&self, link: &Link) -> Option<f64> {
        Some((self.get(link.child)? - self.get(link.parent)?).norm())
    }
}

/// Free-function form of [`SkeletonPose::transform`].
pub fn transform_pose(pose: &SkeletonPose, t: &RigidTransform) -> SkeletonPose {
    pose.transform(t)
}
