//! Master workspace geometry and the two-stage cable-driven slave robot.
//!
//! Frame convention: x lateral, y craniocaudal (positive cranial), z out of the
//! body with the skin surface at z = 0. The probe's imaging axis is its local
//! -z axis, so the identity orientation points the probe straight into the body.

use nalgebra::{Matrix2, Unit, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tilt beyond the limit by less than this is left alone, which keeps
/// clamping idempotent to the bit.
const TILT_SLACK: f64 = 1e-12;

/// Maximum per-anchor residual accepted by [`forward_kinematics`].
pub const FK_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KinematicsError {
    #[error("pose has non-finite components")]
    InvalidPose,
    #[error("ring position ({x:.4}, {y:.4}) is outside the anchor rectangle")]
    OutOfRig { x: f64, y: f64 },
    #[error("cable lengths are inconsistent (residual {residual:.3e} m)")]
    InconsistentLengths { residual: f64 },
    #[error("invalid rig geometry: {0}")]
    InvalidRig(&'static str),
}

/// 6-dof probe state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl Pose {
    pub fn new(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Result<Self, KinematicsError> {
        let pose = Pose { position, orientation };
        if pose.is_finite() {
            Ok(pose)
        } else {
            Err(KinematicsError::InvalidPose)
        }
    }

    pub fn at(x: f64, y: f64, z: f64) -> Self {
        Pose { position: Vector3::new(x, y, z), orientation: UnitQuaternion::identity() }
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|c| c.is_finite())
            && self.orientation.coords.iter().all(|c| c.is_finite())
    }

    /// Unit vector along which the probe images, in the exam frame.
    pub fn probe_axis(&self) -> Vector3<f64> {
        self.orientation * -Vector3::z()
    }

    /// Angle between the probe axis and the inward vertical (-z).
    pub fn tilt(&self) -> f64 {
        let c = (-self.probe_axis().z).clamp(-1.0, 1.0);
        c.acos()
    }

    /// Direction of tilt in the xy plane, radians from +x.
    pub fn tilt_azimuth(&self) -> f64 {
        let a = self.probe_axis();
        a.y.atan2(a.x)
    }
}

impl Default for Pose {
    fn default() -> Self {
        Pose::at(0.0, 0.0, 0.0)
    }
}

/// Axis-aligned reach of the master device.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub half_extents: Vector3<f64>,
    pub center: Vector3<f64>,
}

impl Default for Workspace {
    /// 16 cm x 13 cm x 13 cm, centered at the origin.
    fn default() -> Self {
        Workspace { half_extents: Vector3::new(0.08, 0.065, 0.065), center: Vector3::zeros() }
    }
}

impl Workspace {
    pub fn min(&self) -> Vector3<f64> {
        self.center - self.half_extents
    }

    pub fn max(&self) -> Vector3<f64> {
        self.center + self.half_extents
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let (lo, hi) = (self.min(), self.max());
        (0..3).all(|i| p[i] >= lo[i] && p[i] <= hi[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FineStageLimits {
    /// Radians from vertical.
    pub max_tilt: f64,
    /// Travel of the Z translation stage, meters, centered on the workspace center.
    pub z_range: f64,
}

impl Default for FineStageLimits {
    fn default() -> Self {
        FineStageLimits { max_tilt: std::f64::consts::FRAC_PI_4, z_range: 0.13 }
    }
}

/// Gross-positioning stage: four straps from fixed anchors to the ring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CableRig {
    /// Anchors in the z = 0 plane, listed in order around the frame.
    pub anchors: [Vector2<f64>; 4],
    /// Straps attach this far from the ring center (0: point attachment).
    pub ring_attach_radius: f64,
}

impl Default for CableRig {
    fn default() -> Self {
        CableRig {
            anchors: [
                Vector2::new(0.20, 0.20),
                Vector2::new(0.20, -0.20),
                Vector2::new(-0.20, -0.20),
                Vector2::new(-0.20, 0.20),
            ],
            ring_attach_radius: 0.0,
        }
    }
}

impl CableRig {
    /// Checks convex position of the anchors and that the workspace XY box
    /// lies strictly inside the anchor polygon.
    pub fn validate(&self, workspace: &Workspace) -> Result<(), KinematicsError> {
        let a = &self.anchors;
        let mut sign = 0.0;
        for i in 0..4 {
            let (p, q, r) = (a[i], a[(i + 1) % 4], a[(i + 2) % 4]);
            let cross = cross2(&(q - p), &(r - q));
            if cross.abs() < 1e-12 {
                return Err(KinematicsError::InvalidRig("three anchors are collinear"));
            }
            if sign != 0.0 && cross.signum() != sign {
                return Err(KinematicsError::InvalidRig("anchors are not in convex position"));
            }
            sign = cross.signum();
        }
        if !(self.ring_attach_radius >= 0.0) {
            return Err(KinematicsError::InvalidRig("negative ring attach radius"));
        }
        let (lo, hi) = (workspace.min(), workspace.max());
        for corner in [
            Vector2::new(lo.x, lo.y),
            Vector2::new(lo.x, hi.y),
            Vector2::new(hi.x, lo.y),
            Vector2::new(hi.x, hi.y),
        ] {
            if !self.contains(&corner) {
                return Err(KinematicsError::InvalidRig("workspace exceeds the anchor polygon"));
            }
        }
        Ok(())
    }

    /// Strict interior test against the (convex) anchor polygon.
    pub fn contains(&self, xy: &Vector2<f64>) -> bool {
        let a = &self.anchors;
        let mut sign = 0.0;
        for i in 0..4 {
            let c = cross2(&(a[(i + 1) % 4] - a[i]), &(xy - a[i]));
            if c == 0.0 || !c.is_finite() {
                return false;
            }
            if sign != 0.0 && c.signum() != sign {
                return false;
            }
            sign = c.signum();
        }
        true
    }

    /// Longest possible strap: the largest anchor-to-anchor distance.
    pub fn diagonal(&self) -> f64 {
        let mut d: f64 = 0.0;
        for i in 0..4 {
            for j in i + 1..4 {
                d = d.max((self.anchors[i] - self.anchors[j]).norm());
            }
        }
        d
    }
}

fn cross2(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

/// The four strap lengths, in anchor order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CableLengths {
    pub l: [f64; 4],
}

/// Solution of [`forward_kinematics`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RingFix {
    pub xy: Vector2<f64>,
    /// Largest per-strap length mismatch at the solution.
    pub residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionLimits {
    /// m/s
    pub v_max: f64,
    /// rad/s
    pub w_max: f64,
}

impl Default for MotionLimits {
    fn default() -> Self {
        MotionLimits { v_max: 0.05, w_max: 0.5 }
    }
}

/// Projects a pose into the reachable set: position into the workspace box
/// (and the Z stage travel), tilt down to `max_tilt` keeping its azimuth and
/// the twist about the probe axis.
pub fn clamp_to_workspace(p: &Pose, w: &Workspace, f: &FineStageLimits) -> Result<Pose, KinematicsError> {
    if !p.is_finite() {
        return Err(KinematicsError::InvalidPose);
    }
    let (lo, mut hi) = (w.min(), w.max());
    let mut lo = lo;
    lo.z = lo.z.max(w.center.z - f.z_range / 2.0);
    hi.z = hi.z.min(w.center.z + f.z_range / 2.0);
    let mut position = p.position;
    for i in 0..3 {
        position[i] = position[i].clamp(lo[i], hi[i]);
    }

    let tilt = p.tilt();
    let orientation = if tilt > f.max_tilt + TILT_SLACK {
        limit_tilt(&p.orientation, f.max_tilt)
    } else {
        p.orientation
    };
    Ok(Pose { position, orientation })
}

/// Swing-twist split about world z: q = swing * twist, with the swing tilting
/// the axis and the twist spinning about it. Shrinking the swing angle to
/// `max_tilt` is exactly a slerp from the vertical (twist-only) orientation.
fn limit_tilt(q: &UnitQuaternion<f64>, max_tilt: f64) -> UnitQuaternion<f64> {
    let z = Vector3::z();
    let axis_now = q * z;
    let swing = UnitQuaternion::rotation_between(&z, &axis_now)
        .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI));
    let twist = swing.inverse() * q;
    let swing_axis = swing.axis().unwrap_or(Vector3::x_axis());
    let limited = UnitQuaternion::from_axis_angle(&swing_axis, max_tilt) * twist;
    UnitQuaternion::new_normalize(limited.into_inner())
}

/// Strap lengths for a ring centered at `xy`.
pub fn inverse_kinematics(xy: &Vector2<f64>, rig: &CableRig) -> Result<CableLengths, KinematicsError> {
    if !rig.contains(xy) {
        return Err(KinematicsError::OutOfRig { x: xy.x, y: xy.y });
    }
    let mut l = [0.0; 4];
    for (li, a) in l.iter_mut().zip(rig.anchors.iter()) {
        *li = (a - xy).norm() - rig.ring_attach_radius;
    }
    Ok(CableLengths { l })
}

/// Least-squares ring position for the given strap lengths.
///
/// A linearised solve (differences of squared range equations) seeds a
/// Gauss-Newton refinement over all four straps.
pub fn forward_kinematics(lengths: &CableLengths, rig: &CableRig) -> Result<RingFix, KinematicsError> {
    if lengths.l.iter().any(|l| !l.is_finite()) {
        return Err(KinematicsError::InconsistentLengths { residual: f64::INFINITY });
    }
    let a = &rig.anchors;
    // Centre-to-anchor ranges.
    let r: Vec<f64> = lengths.l.iter().map(|l| l + rig.ring_attach_radius).collect();

    // 2 (a_i - a_0) . p = |a_i|^2 - |a_0|^2 - r_i^2 + r_0^2
    let mut ata = Matrix2::zeros();
    let mut atb = Vector2::zeros();
    for i in 1..4 {
        let row = 2.0 * (a[i] - a[0]);
        let rhs = a[i].norm_squared() - a[0].norm_squared() - r[i] * r[i] + r[0] * r[0];
        ata += row * row.transpose();
        atb += row * rhs;
    }
    let mut p = ata
        .try_inverse()
        .map(|inv| inv * atb)
        .ok_or(KinematicsError::InconsistentLengths { residual: f64::INFINITY })?;

    for _ in 0..20 {
        let mut jtj = Matrix2::zeros();
        let mut jtr = Vector2::zeros();
        for i in 0..4 {
            let d = p - a[i];
            let n = d.norm();
            if n < 1e-15 {
                continue;
            }
            let g = d / n;
            jtj += g * g.transpose();
            jtr += g * (n - r[i]);
        }
        let Some(inv) = jtj.try_inverse() else { break };
        let step = inv * jtr;
        p -= step;
        if step.norm() < 1e-15 {
            break;
        }
    }

    let residual = (0..4).map(|i| ((p - a[i]).norm() - r[i]).abs()).fold(0.0, f64::max);
    if !(residual <= FK_TOLERANCE) || !rig.contains(&p) {
        return Err(KinematicsError::InconsistentLengths { residual });
    }
    Ok(RingFix { xy: p, residual })
}

/// Rate-limited motion of the slave toward `target`.
///
/// The target is projected into the reachable set first; position then moves
/// along the straight line by at most `v_max * dt`, orientation slerps by at
/// most `w_max * dt`, and either lands exactly on the target once in reach.
pub fn step_toward(
    current: &Pose,
    target: &Pose,
    dt: f64,
    limits: &MotionLimits,
    workspace: &Workspace,
    fine: &FineStageLimits,
) -> Result<Pose, KinematicsError> {
    if !current.is_finite() || !target.is_finite() || !(dt > 0.0) {
        return Err(KinematicsError::InvalidPose);
    }
    let target = clamp_to_workspace(target, workspace, fine)?;
    let delta = target.position - current.position;
    let dist = delta.norm();
    let reach = limits.v_max * dt;
    let position = if dist <= reach {
        target.position
    } else {
        current.position + delta * (reach / dist)
    };

    let angle = current.orientation.angle_to(&target.orientation);
    let turn = limits.w_max * dt;
    let orientation = if angle <= turn {
        target.orientation
    } else {
        current
            .orientation
            .try_slerp(&target.orientation, turn / angle, 1e-12)
            .unwrap_or_else(|| {
                let axis = Unit::new_normalize((current.orientation.inverse() * target.orientation).scaled_axis());
                current.orientation * UnitQuaternion::from_axis_angle(&axis, turn)
            })
    };
    clamp_to_workspace(&Pose { position, orientation }, workspace, fine)
}

/// Orientation tilted by `tilt` radians toward azimuth `azimuth` (radians from +x).
pub fn tilted(tilt: f64, azimuth: f64) -> UnitQuaternion<f64> {
    // Rotating -z toward (cos az, sin az, 0) is a rotation about z x dir.
    let axis = Unit::new_normalize(Vector3::new(azimuth.sin(), -azimuth.cos(), 0.0));
    UnitQuaternion::from_axis_angle(&axis, tilt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn clamp_far_point_to_edge() {
        let p = Pose::at(0.20, 0.0, 0.0);
        let c = clamp_to_workspace(&p, &Workspace::default(), &FineStageLimits::default()).unwrap();
        assert_eq!(c.position, Vector3::new(0.08, 0.0, 0.0));
    }

    #[test]
    fn clamp_interior_unchanged() {
        let p = Pose::at(0.0, 0.0, 0.0);
        let c = clamp_to_workspace(&p, &Workspace::default(), &FineStageLimits::default()).unwrap();
        assert_eq!(c, p);
    }

    #[test]
    fn clamp_tilt_keeps_azimuth() {
        let az = 0.7;
        let mut p = Pose::at(0.01, 0.02, -0.003);
        p.orientation = tilted(60f64.to_radians(), az) * UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 0.3);
        assert!((p.tilt() - 60f64.to_radians()).abs() < 1e-12);
        let c = clamp_to_workspace(&p, &Workspace::default(), &FineStageLimits::default()).unwrap();
        assert!((c.tilt() - PI / 4.0).abs() < 1e-12, "tilt {}", c.tilt().to_degrees());
        assert!((c.tilt_azimuth() - az).abs() < 1e-12);
        assert!((c.orientation.norm() - 1.0).abs() < 1e-9);
        let again = clamp_to_workspace(&c, &Workspace::default(), &FineStageLimits::default()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn clamp_upside_down_probe() {
        let mut p = Pose::at(0.0, 0.0, 0.0);
        p.orientation = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), PI);
        let c = clamp_to_workspace(&p, &Workspace::default(), &FineStageLimits::default()).unwrap();
        assert!((c.tilt() - PI / 4.0).abs() < 1e-9);
    }

    #[test]
    fn clamp_rejects_nan() {
        let p = Pose::at(f64::NAN, 0.0, 0.0);
        assert_eq!(
            clamp_to_workspace(&p, &Workspace::default(), &FineStageLimits::default()),
            Err(KinematicsError::InvalidPose)
        );
    }

    #[test]
    fn ik_center_symmetric() {
        let l = inverse_kinematics(&Vector2::new(0.0, 0.0), &CableRig::default()).unwrap();
        for li in l.l {
            assert!((li - 0.08f64.sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn ik_offset_ring() {
        let l = inverse_kinematics(&Vector2::new(0.05, 0.0), &CableRig::default()).unwrap();
        assert_eq!(l.l[0], 0.25);
        assert_eq!(l.l[1], 0.25);
        assert!((l.l[2] - 0.1025f64.sqrt()).abs() < 1e-15);
        assert!((l.l[3] - 0.1025f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ik_outside_rig() {
        assert!(matches!(
            inverse_kinematics(&Vector2::new(0.30, 0.0), &CableRig::default()),
            Err(KinematicsError::OutOfRig { .. })
        ));
    }

    #[test]
    fn fk_examples() {
        let rig = CableRig::default();
        let s = 0.08f64.sqrt();
        let fix = forward_kinematics(&CableLengths { l: [s; 4] }, &rig).unwrap();
        assert!(fix.xy.norm() < 1e-12);
        let r = 0.1025f64.sqrt();
        let fix = forward_kinematics(&CableLengths { l: [0.25, 0.25, r, r] }, &rig).unwrap();
        assert!((fix.xy - Vector2::new(0.05, 0.0)).norm() < 1e-12);
        assert!(matches!(
            forward_kinematics(&CableLengths { l: [0.01; 4] }, &rig),
            Err(KinematicsError::InconsistentLengths { .. })
        ));
    }

    #[test]
    fn fk_with_ring_radius() {
        let rig = CableRig { ring_attach_radius: 0.015, ..CableRig::default() };
        let p = Vector2::new(-0.031, 0.047);
        let fix = forward_kinematics(&inverse_kinematics(&p, &rig).unwrap(), &rig).unwrap();
        assert!((fix.xy - p).norm() < 1e-12);
    }

    #[test]
    fn default_rig_is_valid() {
        CableRig::default().validate(&Workspace::default()).unwrap();
        let mut bad = CableRig::default();
        bad.anchors.swap(1, 2);
        assert!(bad.validate(&Workspace::default()).is_err());
        let small = CableRig { anchors: CableRig::default().anchors.map(|a| a * 0.3), ring_attach_radius: 0.0 };
        assert!(small.validate(&Workspace::default()).is_err());
    }

    #[test]
    fn step_examples() {
        let ws = Workspace::default();
        let fine = FineStageLimits::default();
        let lim = MotionLimits { v_max: 0.05, w_max: 0.5 };
        let a = Pose::at(0.0, 0.0, 0.0);
        assert_eq!(step_toward(&a, &a, 0.1, &lim, &ws, &fine).unwrap(), a);

        let b = Pose::at(0.01, 0.0, 0.0);
        let s = step_toward(&a, &b, 0.1, &lim, &ws, &fine).unwrap();
        assert!((s.position.x - 0.005).abs() < 1e-15);

        let c = Pose::at(0.001, 0.0, 0.0);
        let s = step_toward(&a, &c, 0.1, &lim, &ws, &fine).unwrap();
        assert_eq!(s, c);
    }

    #[test]
    fn step_rotation_rate_limited() {
        let ws = Workspace::default();
        let fine = FineStageLimits::default();
        let lim = MotionLimits { v_max: 0.05, w_max: 0.5 };
        let a = Pose::at(0.0, 0.0, 0.0);
        let mut b = a;
        b.orientation = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 1.0);
        let s = step_toward(&a, &b, 0.1, &lim, &ws, &fine).unwrap();
        assert!((a.orientation.angle_to(&s.orientation) - 0.05).abs() < 1e-12);
        assert!(step_toward(&a, &b, 0.0, &lim, &ws, &fine).is_err());
    }

    #[test]
    fn tilted_helper() {
        let p = Pose { position: Vector3::zeros(), orientation: tilted(0.3, -1.2) };
        assert!((p.tilt() - 0.3).abs() < 1e-12);
        assert!((p.tilt_azimuth() + 1.2).abs() < 1e-12);
    }
}
