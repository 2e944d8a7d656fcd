//! Serial-chain arm: forward kinematics, damped-least-squares inverse
//! kinematics, workspace clamping, and the leaky velocity integrator that
//! turns decoded velocities into a position target.

use std::path::Path;

use nalgebra::{Matrix3, Matrix3x6, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::dataset::BIN_SECONDS;
use crate::error::{Error, Result};

pub const JOINT_COUNT: usize = 6;
pub const DEFAULT_LAMBDA: f64 = 0.95;

/// Fraction of the post-shoulder arm length that bounds the reach shell.
const INNER_FRACTION: f64 = 0.4;
const OUTER_FRACTION: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub axis: [f64; 3],
    /// Radians, `lo ≤ hi`.
    pub limits: (f64, f64),
    /// Offset (mm) from this joint to the next, in this joint's rotated frame.
    pub offset: [f64; 3],
}

pub type JointAngles = [f64; JOINT_COUNT];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KinematicChain {
    joints: Vec<Joint>,
    /// Working height z* (mm) of the planar task.
    pub working_height: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Workspace {
    /// Shoulder position at zero yaw: horizontal radius and height.
    pub shoulder_radius: f64,
    pub shoulder_height: f64,
    pub min_reach: f64,
    pub max_reach: f64,
}

impl Workspace {
    /// Radial bounds of the reachable annulus at height `z`, if any.
    pub fn annulus_at(&self, z: f64) -> Option<(f64, f64)> {
        let dz = z - self.shoulder_height;
        if dz.abs() > self.max_reach {
            return None;
        }
        let inner = (self.min_reach * self.min_reach - dz * dz).max(0.0).sqrt();
        let outer = (self.max_reach * self.max_reach - dz * dz).sqrt();
        Some((self.shoulder_radius + inner, self.shoulder_radius + outer))
    }
}

impl KinematicChain {
    pub fn new(joints: Vec<Joint>, working_height: f64) -> Result<Self> {
        if joints.len() != JOINT_COUNT {
            return Err(Error::InvalidArgument(format!("chain needs {JOINT_COUNT} joints, got {}", joints.len())));
        }
        let mut joints = joints;
        for (i, j) in joints.iter_mut().enumerate() {
            let a = Vector3::from(j.axis);
            let n = a.norm();
            if !(n.is_finite() && n > 1e-12) {
                return Err(Error::InvalidArgument(format!("joint {i} has a degenerate axis")));
            }
            // Accept nearly-unit axes from text files, store them exactly unit.
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!("joint {i} axis is not unit length ({n})")));
            }
            j.axis = (a / n).into();
            if !(j.limits.0 <= j.limits.1) {
                return Err(Error::InvalidArgument(format!("joint {i} limits are inverted")));
            }
            if j.offset.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("joint {i} offset is not finite")));
            }
        }
        let chain = KinematicChain { joints, working_height };
        if chain.total_reach() <= 0.0 {
            return Err(Error::InvalidArgument("chain has zero reach".into()));
        }
        Ok(chain)
    }

    /// Six revolute joints: base yaw; shoulder, elbow, wrist pitch; wrist
    /// roll; gripper. Links of 30, 110, 110, 60 and 30 mm lie along +x at
    /// the home pose. The gripper carries no offset.
    pub fn desk_arm() -> Self {
        let deg = f64::to_radians;
        let joints = vec![
            Joint { axis: [0.0, 0.0, 1.0], limits: (deg(-180.0), deg(180.0)), offset: [30.0, 0.0, 0.0] },
            Joint { axis: [0.0, 1.0, 0.0], limits: (deg(-120.0), deg(120.0)), offset: [110.0, 0.0, 0.0] },
            Joint { axis: [0.0, 1.0, 0.0], limits: (deg(-150.0), deg(150.0)), offset: [110.0, 0.0, 0.0] },
            Joint { axis: [0.0, 1.0, 0.0], limits: (deg(-120.0), deg(120.0)), offset: [60.0, 0.0, 0.0] },
            Joint { axis: [1.0, 0.0, 0.0], limits: (deg(-180.0), deg(180.0)), offset: [30.0, 0.0, 0.0] },
            Joint { axis: [1.0, 0.0, 0.0], limits: (deg(-10.0), deg(90.0)), offset: [0.0, 0.0, 0.0] },
        ];
        KinematicChain::new(joints, 0.0).expect("built-in chain is valid")
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn total_reach(&self) -> f64 {
        self.joints.iter().map(|j| Vector3::from(j.offset).norm()).sum()
    }

    pub fn clamp_angles(&self, q: &mut JointAngles) {
        for (a, j) in q.iter_mut().zip(&self.joints) {
            *a = a.clamp(j.limits.0, j.limits.1);
        }
    }

    pub fn within_limits(&self, q: &JointAngles) -> bool {
        q.iter().zip(&self.joints).all(|(a, j)| *a >= j.limits.0 && *a <= j.limits.1)
    }

    /// End-effector position (mm): rotations and offsets applied joint by joint.
    pub fn forward_kinematics(&self, q: &JointAngles) -> [f64; 3] {
        let mut rot = UnitQuaternion::identity();
        let mut pos = Vector3::zeros();
        for (j, &angle) in self.joints.iter().zip(q) {
            let axis = nalgebra::Unit::new_unchecked(Vector3::from(j.axis));
            rot *= UnitQuaternion::from_axis_angle(&axis, angle);
            pos += rot * Vector3::from(j.offset);
        }
        pos.into()
    }

    /// Shell around the shoulder, bounded by fractions of the arm length
    /// beyond the shoulder.
    pub fn workspace(&self) -> Workspace {
        let shoulder = Vector3::from(self.joints[0].offset);
        let arm: f64 = self.joints[1..].iter().map(|j| Vector3::from(j.offset).norm()).sum();
        Workspace {
            shoulder_radius: (shoulder.x * shoulder.x + shoulder.y * shoulder.y).sqrt(),
            shoulder_height: shoulder.z,
            min_reach: INNER_FRACTION * arm,
            max_reach: OUTER_FRACTION * arm,
        }
    }

    /// Projects `target` into the reachable shell. The bearing about the
    /// base axis is kept; a target on the axis takes `fallback_bearing`.
    pub fn clamp_to_workspace(&self, target: [f64; 3], fallback_bearing: f64) -> [f64; 3] {
        let ws = self.workspace();
        let rho = target[0].hypot(target[1]);
        let bearing = if rho > 1e-9 { target[1].atan2(target[0]) } else { fallback_bearing };
        // In-plane vector from shoulder to target; nothing behind the shoulder.
        let mut u = (rho - ws.shoulder_radius).max(0.0);
        let mut w = target[2] - ws.shoulder_height;
        let d = u.hypot(w);
        if d < ws.min_reach {
            if d < 1e-12 {
                u = ws.min_reach;
                w = 0.0;
            } else {
                u *= ws.min_reach / d;
                w *= ws.min_reach / d;
            }
        } else if d > ws.max_reach {
            u *= ws.max_reach / d;
            w *= ws.max_reach / d;
        }
        if rho - ws.shoulder_radius == u && target[2] - ws.shoulder_height == w && rho > 1e-9 {
            return target;
        }
        let r = ws.shoulder_radius + u;
        let (s, c) = bearing.sin_cos();
        [r * c, r * s, ws.shoulder_height + w]
    }

    /// Planar variant at the working height.
    pub fn clamp_planar(&self, xy: [f64; 2], fallback_bearing: f64) -> [f64; 2] {
        let p = self.clamp_to_workspace([xy[0], xy[1], self.working_height], fallback_bearing);
        [p[0], p[1]]
    }

    fn jacobian(&self, q: &JointAngles, h: f64) -> Matrix3x6<f64> {
        let mut jac = Matrix3x6::zeros();
        let mut qp = *q;
        for i in 0..JOINT_COUNT {
            let orig = qp[i];
            qp[i] = orig + h;
            let up = Vector3::from(self.forward_kinematics(&qp));
            qp[i] = orig - h;
            let down = Vector3::from(self.forward_kinematics(&qp));
            qp[i] = orig;
            jac.set_column(i, &((up - down) / (2.0 * h)));
        }
        jac
    }

    pub fn inverse_kinematics(&self, target: [f64; 3], initial: &JointAngles) -> Result<IkSolution> {
        IkSolver::default().solve(self, target, initial)
    }

    /// A bent, non-singular pose near the middle of the workspace.
    pub fn ready_pose(&self) -> JointAngles {
        let mut q = [0.0, -0.6, 1.2, -0.6, 0.0, 0.0];
        self.clamp_angles(&mut q);
        q
    }

    /// Text format: `height <mm>` then one joint per line as
    /// `ax ay az lo_deg hi_deg ox oy oz`. `#` starts a comment.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        let mut height = 0.0;
        let mut joints = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks[0] == "height" {
                if toks.len() != 2 {
                    return Err(err(i + 1, "expected `height <mm>`".into()));
                }
                height = toks[1]
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(i + 1, format!("bad height {:?}", toks[1])))?;
                continue;
            }
            if toks.len() != 8 {
                return Err(err(i + 1, format!("expected 8 joint fields, found {}", toks.len())));
            }
            let mut v = [0.0; 8];
            for (slot, tok) in v.iter_mut().zip(&toks) {
                *slot = tok
                    .parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| err(i + 1, format!("bad number {tok:?}")))?;
            }
            joints.push(Joint {
                axis: [v[0], v[1], v[2]],
                limits: (v[3].to_radians(), v[4].to_radians()),
                offset: [v[5], v[6], v[7]],
            });
        }
        KinematicChain::new(joints, height).map_err(|e| err(0, e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        KinematicChain::parse(&std::fs::read_to_string(path)?, path)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# axis_x axis_y axis_z  lo_deg hi_deg  offset_x offset_y offset_z (mm)\n");
        s.push_str(&format!("height {}\n", self.working_height));
        for j in &self.joints {
            s.push_str(&format!(
                "{} {} {}  {} {}  {} {} {}\n",
                j.axis[0],
                j.axis[1],
                j.axis[2],
                j.limits.0.to_degrees(),
                j.limits.1.to_degrees(),
                j.offset[0],
                j.offset[1],
                j.offset[2]
            ));
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IkSolution {
    pub angles: JointAngles,
    /// ‖FK(angles) − clamped target‖ in mm.
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IkSolver {
    pub damping: f64,
    pub max_iterations: usize,
    /// Iteration stops once the residual is below this (mm).
    pub tolerance: f64,
    /// Largest residual still reported as success (mm).
    pub accept: f64,
    /// Per-iteration cap on any joint change (rad).
    pub max_step: f64,
    pub jacobian_step: f64,
}

impl Default for IkSolver {
    fn default() -> Self {
        IkSolver {
            damping: 0.01,
            max_iterations: 200,
            tolerance: 1e-3,
            accept: 0.5,
            max_step: 0.3,
            jacobian_step: 1e-6,
        }
    }
}

impl IkSolver {
    /// Iterates from `initial`. If that stalls in a local minimum, retries
    /// from `initial` with the base turned toward the target, then from the
    /// elbow-down and elbow-up ready poses at that bearing.
    pub fn solve(&self, chain: &KinematicChain, target: [f64; 3], initial: &JointAngles) -> Result<IkSolution> {
        if target.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("IK target"));
        }
        let mut q = *initial;
        chain.clamp_angles(&mut q);
        let start = chain.forward_kinematics(&q);
        let goal = chain.clamp_to_workspace(target, start[1].atan2(start[0]));
        let bearing_error = wrap_angle(goal[1].atan2(goal[0]) - start[1].atan2(start[0]));

        let ready = chain.ready_pose();
        let mut mirrored = ready;
        for a in &mut mirrored[1..4] {
            *a = -*a;
        }
        let mut seeds = vec![q];
        for base in [q, ready, mirrored] {
            let mut seed = base;
            seed[0] = q[0] + bearing_error;
            chain.clamp_angles(&mut seed);
            seeds.push(seed);
        }

        let mut failure: Option<(JointAngles, f64)> = None;
        for seed in seeds {
            match self.iterate(chain, goal, seed) {
                Ok(sol) => return Ok(sol),
                Err(Error::IkNoConvergence { angles, residual }) => {
                    if failure.map_or(true, |(_, r)| residual < r) {
                        let mut best = [0.0; JOINT_COUNT];
                        best.copy_from_slice(&angles);
                        failure = Some((best, residual));
                    }
                }
                Err(e) => return Err(e),
            }
        }
        let (angles, residual) = failure.expect("at least one attempt");
        Err(Error::IkNoConvergence {
            angles: angles.to_vec(),
            residual,
        })
    }

    fn iterate(&self, chain: &KinematicChain, goal: [f64; 3], mut q: JointAngles) -> Result<IkSolution> {
        let goal = Vector3::from(goal);

        let residual_of = |q: &JointAngles| (goal - Vector3::from(chain.forward_kinematics(q))).norm();
        let mut best = IkSolution {
            angles: q,
            residual: residual_of(&q),
            iterations: 0,
        };
        let damping_sq = self.damping * self.damping;
        for it in 0..self.max_iterations {
            let err = goal - Vector3::from(chain.forward_kinematics(&q));
            let r = err.norm();
            if r < best.residual {
                best = IkSolution { angles: q, residual: r, iterations: it };
            }
            if r <= self.tolerance {
                return Ok(IkSolution { angles: q, residual: r, iterations: it });
            }
            let mut jac = chain.jacobian(&q, self.jacobian_step);
            // Joints pinned at a limit and pushed further out are dropped
            // from the step, so the rest of the chain takes up the motion.
            let mut dq = nalgebra::Vector6::zeros();
            for _ in 0..JOINT_COUNT {
                let jjt: Matrix3<f64> = jac * jac.transpose() + Matrix3::identity() * damping_sq;
                let Some(y) = jjt.cholesky().map(|c| c.solve(&err)) else {
                    break;
                };
                dq = jac.transpose() * y;
                let mut changed = false;
                for (i, joint) in chain.joints.iter().enumerate() {
                    let pinned = (q[i] <= joint.limits.0 && dq[i] < 0.0) || (q[i] >= joint.limits.1 && dq[i] > 0.0);
                    if pinned && jac.column(i).norm() > 0.0 {
                        jac.column_mut(i).fill(0.0);
                        changed = true;
                    }
                }
                if !changed {
                    break;
                }
            }
            let biggest = dq.amax();
            let scale = if biggest > self.max_step { self.max_step / biggest } else { 1.0 };
            for (a, d) in q.iter_mut().zip(dq.iter()) {
                *a += d * scale;
            }
            chain.clamp_angles(&mut q);
        }
        let r = residual_of(&q);
        if r < best.residual {
            best = IkSolution { angles: q, residual: r, iterations: self.max_iterations };
        }
        if best.residual <= self.accept {
            Ok(best)
        } else {
            Err(Error::IkNoConvergence {
                angles: best.angles.to_vec(),
                residual: best.residual,
            })
        }
    }
}

fn wrap_angle(a: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    (a + std::f64::consts::PI).rem_euclid(tau) - std::f64::consts::PI
}

/// Leaky integrator state: `p ← anchor + λ·((p − anchor) + v·Δt)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmState {
    pub position: [f64; 2],
    pub anchor: [f64; 2],
    lambda: f64,
    pub dt: f64,
    pub angles: JointAngles,
}

impl ArmState {
    pub fn new(anchor: [f64; 2], lambda: f64, angles: JointAngles) -> Result<Self> {
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(Error::InvalidArgument(format!("decay λ = {lambda} outside (0, 1]")));
        }
        if anchor.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("anchor"));
        }
        Ok(ArmState {
            position: anchor,
            anchor,
            lambda,
            dt: BIN_SECONDS,
            angles,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn integrate_velocity(&mut self, v: [f64; 2]) -> Result<[f64; 2]> {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("velocity"));
        }
        for i in 0..2 {
            let offset = self.position[i] - self.anchor[i] + v[i] * self.dt;
            self.position[i] = self.anchor[i] + self.lambda * offset;
        }
        Ok(self.position)
    }

    /// Steady-state offset from the anchor under a constant velocity:
    /// λ·v·Δt / (1 − λ). Infinite for λ = 1 with v ≠ 0.
    pub fn steady_state_offset(&self, v: f64) -> f64 {
        self.lambda * v * self.dt / (1.0 - self.lambda)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn home_pose_is_straight_along_x() {
        let chain = KinematicChain::desk_arm();
        let p = chain.forward_kinematics(&[0.0; 6]);
        assert!((p[0] - 340.0).abs() < 1e-9 && p[1].abs() < 1e-9 && p[2].abs() < 1e-9);
        assert!((chain.total_reach() - 340.0).abs() < 1e-12);
    }

    #[test]
    fn base_yaw_rotates_end_effector() {
        let chain = KinematicChain::desk_arm();
        let q = [0.0, -0.4, 0.9, -0.2, 0.3, 0.1];
        let p0 = chain.forward_kinematics(&q);
        let phi = 0.7;
        let mut qr = q;
        qr[0] += phi;
        let p1 = chain.forward_kinematics(&qr);
        let (s, c) = phi.sin_cos();
        assert!((p1[0] - (c * p0[0] - s * p0[1])).abs() < 1e-9);
        assert!((p1[1] - (s * p0[0] + c * p0[1])).abs() < 1e-9);
        assert!((p1[2] - p0[2]).abs() < 1e-9);
    }

    #[test]
    fn chain_validation() {
        let mut joints = KinematicChain::desk_arm().joints().to_vec();
        joints[2].limits = (1.0, -1.0);
        assert!(KinematicChain::new(joints.clone(), 0.0).is_err());
        joints[2].limits = (-1.0, 1.0);
        joints[1].axis = [0.0, 2.0, 0.0];
        assert!(KinematicChain::new(joints.clone(), 0.0).is_err());
        assert!(KinematicChain::new(joints[..5].to_vec(), 0.0).is_err());
        let zero: Vec<Joint> = joints
            .iter()
            .map(|j| Joint { axis: [0.0, 0.0, 1.0], limits: j.limits, offset: [0.0; 3] })
            .collect();
        assert!(KinematicChain::new(zero, 0.0).is_err());
    }

    #[test]
    fn clamp_examples() {
        let chain = KinematicChain::desk_arm();
        let ws = chain.workspace();
        let (lo, hi) = ws.annulus_at(0.0).unwrap();
        assert_eq!(chain.clamp_planar([200.0, 10.0], 0.0), [200.0, 10.0]);
        let far = chain.clamp_planar([3400.0 * 0.6, 3400.0 * 0.8], 0.0);
        assert!((far[0].hypot(far[1]) - hi).abs() < 1e-9);
        assert!((far[1].atan2(far[0]) - 0.8f64.atan2(0.6)).abs() < 1e-12);
        let inner = chain.clamp_planar([0.0, 0.0], 1.0);
        assert!((inner[0].hypot(inner[1]) - lo).abs() < 1e-9);
        assert!((inner[1].atan2(inner[0]) - 1.0).abs() < 1e-12);
        assert!(lo > 0.0);
    }

    #[test]
    fn ik_fixed_point_and_round_trip() {
        let chain = KinematicChain::desk_arm();
        let q = [0.3, -0.5, 1.1, -0.4, 0.2, 0.0];
        let target = chain.forward_kinematics(&q);
        let sol = chain.inverse_kinematics(target, &q).unwrap();
        assert!(sol.residual <= 1e-6);
        assert_eq!(sol.iterations, 0);

        let goal = [180.0, -90.0, 0.0];
        let sol = chain.inverse_kinematics(goal, &chain.ready_pose()).unwrap();
        let p = chain.forward_kinematics(&sol.angles);
        let dist = ((p[0] - goal[0]).powi(2) + (p[1] - goal[1]).powi(2) + (p[2] - goal[2]).powi(2)).sqrt();
        assert!(dist <= 0.5, "{dist}");
        assert!(chain.within_limits(&sol.angles));
    }

    #[test]
    fn ik_beyond_reach_solves_clamped_target() {
        let chain = KinematicChain::desk_arm();
        let target = [2000.0, 0.0, 0.0];
        let sol = chain.inverse_kinematics(target, &chain.ready_pose()).unwrap();
        let clamped = chain.clamp_to_workspace(target, 0.0);
        let p = chain.forward_kinematics(&sol.angles);
        let d: f64 = (0..3).map(|i| (p[i] - clamped[i]).powi(2)).sum::<f64>().sqrt();
        assert!(d <= 0.5);
    }

    #[test]
    fn ik_rejects_non_finite_target() {
        let chain = KinematicChain::desk_arm();
        assert!(chain.inverse_kinematics([f64::NAN, 0.0, 0.0], &chain.ready_pose()).is_err());
    }

    #[test]
    fn integrator_examples() {
        // Zero input decays geometrically toward the anchor.
        let mut arm = ArmState::new([200.0, 0.0], 0.95, [0.0; 6]).unwrap();
        arm.position = [240.0, 30.0];
        let mut prev = 50.0;
        for _ in 0..10 {
            let p = arm.integrate_velocity([0.0, 0.0]).unwrap();
            let d = (p[0] - 200.0).hypot(p[1]);
            assert!((d / prev - 0.95).abs() < 1e-12);
            prev = d;
        }
        // λ = 1 is a plain integrator: 100 mm/s for 20 ms is 2 mm.
        let mut pure = ArmState::new([0.0, 0.0], 1.0, [0.0; 6]).unwrap();
        for k in 1..=5 {
            let p = pure.integrate_velocity([100.0, 0.0]).unwrap();
            assert!((p[0] - 2.0 * k as f64).abs() < 1e-12);
        }
        assert!(ArmState::new([0.0, 0.0], 0.0, [0.0; 6]).is_err());
        assert!(ArmState::new([0.0, 0.0], 1.1, [0.0; 6]).is_err());
        assert!(arm.integrate_velocity([f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn chain_text_round_trip() {
        let chain = KinematicChain::desk_arm();
        let back = KinematicChain::parse(&chain.to_text(), Path::new("c.txt")).unwrap();
        for (a, b) in chain.joints().iter().zip(back.joints()) {
            assert_eq!(a.axis, b.axis);
            assert_eq!(a.offset, b.offset);
            assert!((a.limits.0 - b.limits.0).abs() < 1e-12);
        }
        let err = KinematicChain::parse("height 0\n0 0 1 -10 10 1 0\n", Path::new("c.txt")).unwrap_err();
        assert!(err.to_string().starts_with("c.txt:2:"), "{err}");
    }
}
