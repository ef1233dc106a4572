//! Limb-length consistency.
//!
//! Each fused frame is refined link by link down the body tree. For a link
//! with fixed (already refined) parent q_p, Kalman child estimate q_kf and
//! target length l̂, the child position minimizes
//!
//! ```text
//! E(q_c) = (‖q_c − q_p‖ − l̂)² + w ‖θ(q_c) − θ_kf‖²,   θ(q) = (q − q_p)/‖q − q_p‖
//! ```
//!
//! solved with a small Levenberg-Marquardt loop started at q_kf.

use nalgebra::{Matrix3, SMatrix, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BodyModel, JointId, Link, Point3, SkeletonPose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsistencyConfig {
    pub enabled: bool,
    /// Weight w of the orientation term.
    pub orientation_weight: f64,
    /// Smoothing factor α of the running length estimate.
    pub length_alpha: f64,
    /// Complete frames K averaged to initialize the lengths.
    pub init_frames: usize,
    pub lm_max_iters: usize,
    /// Step-norm stopping tolerance (m).
    pub lm_tol: f64,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        ConsistencyConfig {
            enabled: true,
            orientation_weight: 1.0,
            length_alpha: 0.01,
            init_frames: 10,
            lm_max_iters: 50,
            lm_tol: 1e-8,
        }
    }
}

impl ConsistencyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.orientation_weight >= 0.0 && self.orientation_weight.is_finite()) {
            return Err(Error::Config("consistency.orientation_weight must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.length_alpha) {
            return Err(Error::Config("consistency.length_alpha must lie in [0, 1]".into()));
        }
        if self.init_frames == 0 {
            return Err(Error::Config("consistency.init_frames must be at least 1".into()));
        }
        if !(self.lm_tol > 0.0) {
            return Err(Error::Config("consistency.lm_tol must be positive".into()));
        }
        Ok(())
    }
}

/// Stop when an accepted step lowers the energy by less than this.
const ENERGY_DECREASE_TOL: f64 = 1e-12;
const INITIAL_DAMPING: f64 = 1e-3;

/// One link's refinement problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkProblem {
    pub parent: Point3,
    pub kalman_child: Point3,
    pub target_length: f64,
    pub orientation_weight: f64,
    anchor: Vector3<f64>,
}

impl LinkProblem {
    pub fn new(parent: Point3, kalman_child: Point3, target_length: f64, orientation_weight: f64) -> Result<Self> {
        let offset = kalman_child - parent;
        let norm = offset.norm();
        if !(norm > 0.0) {
            return Err(Error::DegenerateLink);
        }
        Ok(LinkProblem {
            parent,
            kalman_child,
            target_length,
            orientation_weight,
            anchor: offset / norm,
        })
    }

    /// θ_kf, the Kalman link direction.
    pub fn anchor_direction(&self) -> Vector3<f64> {
        self.anchor
    }

    /// Residual r with E = ‖r‖²: the length error followed by the scaled
    /// direction difference √w (θ − θ_kf).
    pub fn residual(&self, child: &Point3) -> Result<Vector4<f64>> {
        let u = child - self.parent;
        let len = u.norm();
        if !(len > 0.0) {
            return Err(Error::DegenerateLink);
        }
        let dir = (u / len - self.anchor) * self.orientation_weight.sqrt();
        Ok(Vector4::new(len - self.target_length, dir.x, dir.y, dir.z))
    }

    /// ∂r/∂q_c (4×3).
    pub fn jacobian(&self, child: &Point3) -> Result<SMatrix<f64, 4, 3>> {
        let u = child - self.parent;
        let len = u.norm();
        if !(len > 0.0) {
            return Err(Error::DegenerateLink);
        }
        let theta = u / len;
        let mut j = SMatrix::<f64, 4, 3>::zeros();
        j.fixed_view_mut::<1, 3>(0, 0).copy_from(&theta.transpose());
        let d_theta = (Matrix3::identity() - theta * theta.transpose()) / len;
        j.fixed_view_mut::<3, 3>(1, 0)
            .copy_from(&(d_theta * self.orientation_weight.sqrt()));
        Ok(j)
    }

    /// Closed-form minimizer: the point at the target length along θ_kf.
    pub fn radial_projection(&self) -> Point3 {
        self.parent + self.anchor * self.target_length
    }
}

/// E_i(q_c).
pub fn link_energy(child: &Point3, problem: &LinkProblem) -> Result<f64> {
    Ok(problem.residual(child)?.norm_squared())
}

/// Length-only energy (‖q_c − q_p‖ − l̂)².
pub fn length_energy(child: &Point3, problem: &LinkProblem) -> f64 {
    ((child - problem.parent).norm() - problem.target_length).powi(2)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmReport {
    pub iterations: usize,
    pub converged: bool,
    pub initial_energy: f64,
    pub final_energy: f64,
}

/// Levenberg-Marquardt from the Kalman estimate. Returns the best iterate;
/// `converged` is false when the iteration budget ran out.
pub fn optimize_link(problem: &LinkProblem, cfg: &ConsistencyConfig) -> (Point3, LmReport) {
    let mut x = problem.kalman_child;
    let mut r = problem.residual(&x).expect("anchor is non-degenerate");
    let mut energy = r.norm_squared();
    let initial_energy = energy;
    let mut lambda = INITIAL_DAMPING;
    let mut iterations = 0;
    let mut converged = energy == 0.0;

    while !converged && iterations < cfg.lm_max_iters {
        iterations += 1;
        let j = problem.jacobian(&x).expect("iterates never reach the parent");
        let jtj = j.transpose() * j;
        let g = j.transpose() * r;
        let Some(step) = (jtj + Matrix3::identity() * lambda).cholesky().map(|c| -c.solve(&g)) else {
            lambda *= 10.0;
            continue;
        };
        let candidate = x + step;
        match problem.residual(&candidate) {
            Ok(rc) if rc.norm_squared() < energy => {
                let new_energy = rc.norm_squared();
                let decrease = energy - new_energy;
                x = candidate;
                r = rc;
                energy = new_energy;
                lambda *= 0.1;
                if step.norm() < cfg.lm_tol || decrease < ENERGY_DECREASE_TOL || energy == 0.0 {
                    converged = true;
                }
            }
            _ => {
                lambda *= 10.0;
                if step.norm() < cfg.lm_tol {
                    converged = true;
                }
            }
        }
    }

    (
        x,
        LmReport {
            iterations,
            converged,
            initial_energy,
            final_energy: energy,
        },
    )
}

/// Running limb-length estimates for the optimized links of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct LimbLengths {
    links: Vec<Link>,
    lengths: Vec<f64>,
    sums: Vec<f64>,
    sample_count: usize,
    required: usize,
    initialized: bool,
}

impl LimbLengths {
    pub fn new(model: &BodyModel, required_frames: usize) -> Self {
        let links = model.optimized_links().to_vec();
        let n = links.len();
        LimbLengths {
            links,
            lengths: vec![0.0; n],
            sums: vec![0.0; n],
            sample_count: 0,
            required: required_frames.max(1),
            initialized: false,
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }

    pub fn length_of(&self, link: &Link) -> Option<f64> {
        self.links.iter().position(|l| l == link).map(|i| self.lengths[i])
    }

    /// Feeds one fully tracked frame to the initializer. Returns true once
    /// the estimate is initialized. Incomplete frames are ignored.
    pub fn observe(&mut self, frame: &SkeletonPose) -> bool {
        if self.initialized {
            return true;
        }
        if !frame.is_complete() {
            return false;
        }
        for (sum, link) in self.sums.iter_mut().zip(&self.links) {
            *sum += frame.link_length(link).expect("complete frame");
        }
        self.sample_count += 1;
        if self.sample_count >= self.required {
            let n = self.sample_count as f64;
            for (len, sum) in self.lengths.iter_mut().zip(&self.sums) {
                *len = sum / n;
            }
            self.initialized = self.lengths.iter().all(|l| *l > 0.0);
        }
        self.initialized
    }

    /// l̂ ← (1 − α) l̂ + α ‖q_c − q_p‖ for every link present in `frame`.
    pub fn update(&mut self, frame: &SkeletonPose, alpha: f64) {
        if !self.initialized {
            return;
        }
        for (len, link) in self.lengths.iter_mut().zip(&self.links) {
            if let Some(observed) = frame.link_length(link) {
                *len = (1.0 - alpha) * *len + alpha * observed;
            }
        }
    }
}

/// Per-link mean over the first `k` complete frames.
pub fn initialize_lengths(frames: &[SkeletonPose], model: &BodyModel, k: usize) -> Result<LimbLengths> {
    let mut lengths = LimbLengths::new(model, k);
    for frame in frames {
        if lengths.observe(frame) {
            return Ok(lengths);
        }
    }
    Err(Error::InsufficientSamples(format!(
        "{} complete frames seen, {k} required",
        lengths.sample_count()
    )))
}

/// Functional form of [`LimbLengths::update`].
pub fn update_lengths(lengths: &LimbLengths, frame: &SkeletonPose, alpha: f64) -> LimbLengths {
    let mut next = lengths.clone();
    next.update(frame, alpha);
    next
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Passthrough {
    LengthsNotInitialized,
    MissingJoints,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    /// Set when the frame was returned unrefined.
    pub passthrough: Option<Passthrough>,
    pub links: Vec<(Link, LmReport)>,
}

impl ConsistencyReport {
    pub fn all_converged(&self) -> bool {
        self.links.iter().all(|(_, r)| r.converged)
    }
}

/// Refines a fused frame top-down. The neck stays fixed, each optimized
/// child is solved against its already refined parent, the chest is
/// recomputed from the refined shoulders and hips, and the head is passed
/// through.
pub fn enforce_consistency(
    frame: &SkeletonPose,
    lengths: &LimbLengths,
    model: &BodyModel,
    cfg: &ConsistencyConfig,
) -> (SkeletonPose, ConsistencyReport) {
    let unrefined = |why| {
        (
            *frame,
            ConsistencyReport {
                passthrough: Some(why),
                links: Vec::new(),
            },
        )
    };
    if !lengths.is_initialized() {
        return unrefined(Passthrough::LengthsNotInitialized);
    }
    let needed = std::iter::once(BodyModel::ROOT).chain(model.optimized_links().iter().map(|l| l.child));
    if needed.into_iter().any(|j| frame.get(j).is_none()) {
        return unrefined(Passthrough::MissingJoints);
    }

    let mut out = *frame;
    let mut links = Vec::with_capacity(model.optimized_links().len());
    for link in model.optimization_order().iter().filter(|l| l.is_optimized()) {
        let parent = out.get(link.parent).expect("parents precede children");
        let kalman_child = frame.get(link.child).expect("checked above");
        let Some(target) = lengths.length_of(link) else {
            continue;
        };
        match LinkProblem::new(parent, kalman_child, target, cfg.orientation_weight) {
            Ok(problem) => {
                let (child, report) = optimize_link(&problem, cfg);
                out.set(link.child, Some(child));
                links.push((*link, report));
            }
            // Child sits on its parent: no direction to keep, leave it.
            Err(_) => continue,
        }
    }
    if let Ok(chest) = out.derive_chest() {
        out.set(JointId::Chest, Some(chest));
    }
    (
        out,
        ConsistencyReport {
            passthrough: None,
            links,
        },
    )
}
