//! Simplified articulated crane: kinematics, gravity loading and a
//! velocity-servo joint model stepped at a fixed 20 ms.
//!
//! The chain is slew (`q1`, yaw about the pillar) → inner boom pitch (`q2`)
//! → outer boom pitch relative to the inner boom (`q3`) → telescope
//! extension (`q4`) → rotator yaw (`q5`) → grapple aperture (`q6`). The
//! grapple hangs from the boom tip on a passive two-angle pendulum.
//!
//! All positions are expressed in the crane frame: origin at the pillar
//! foot on the ground, `z` up, `x` forward along the vehicle.

use nalgebra::{Isometry3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

/// Fixed simulation time step in seconds.
pub const DT: f64 = 0.02;
/// Number of actuated joints.
pub const NUM_JOINTS: usize = 6;
/// Joints whose work counts toward the energy meter (q1..q4).
pub const ENERGY_JOINTS: usize = 4;
/// Standard gravitational acceleration (m/s²).
pub const STANDARD_GRAVITY: f64 = 9.81;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointKind {
    Revolute,
    Prismatic,
}

/// Limits and servo parameters of one actuated joint.
///
/// Units follow the joint kind: radians for revolute joints, metres for
/// prismatic ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActuatorSpec {
    pub joint_id: String,
    pub kind: JointKind,
    pub range_min: f64,
    pub range_max: f64,
    pub v_max: f64,
    pub effort_max: f64,
    pub inertia_eff: f64,
    #[serde(default = "default_rate_fraction")]
    pub rate_fraction: f64,
}

fn default_rate_fraction() -> f64 {
    1.0 / 30.0
}

impl ActuatorSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        joint_id: &str,
        kind: JointKind,
        range_min: f64,
        range_max: f64,
        v_max: f64,
        effort_max: f64,
        inertia_eff: f64,
    ) -> Self {
        Self {
            joint_id: joint_id.to_string(),
            kind,
            range_min,
            range_max,
            v_max,
            effort_max,
            inertia_eff,
            rate_fraction: default_rate_fraction(),
        }
    }

    pub fn range_width(&self) -> f64 {
        self.range_max - self.range_min
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.range_min,
            self.range_max,
            self.v_max,
            self.effort_max,
            self.inertia_eff,
            self.rate_fraction,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(config_err(format!("{}: non-finite parameter", self.joint_id)));
        }
        if self.range_min >= self.range_max {
            return Err(config_err(format!("{}: range_min must be < range_max", self.joint_id)));
        }
        if self.v_max <= 0.0 || self.effort_max <= 0.0 || self.inertia_eff <= 0.0 {
            return Err(config_err(format!(
                "{}: v_max, effort_max and inertia_eff must be positive",
                self.joint_id
            )));
        }
        if !(self.rate_fraction > 0.0 && self.rate_fraction <= 1.0) {
            return Err(config_err(format!(
                "{}: rate_fraction must lie in (0, 1]",
                self.joint_id
            )));
        }
        Ok(())
    }
}

/// Lumped link masses in kilograms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkMasses {
    pub pillar: f64,
    pub inner_boom: f64,
    pub outer_boom: f64,
    pub telescope: f64,
    pub rotator: f64,
    pub grapple: f64,
}

impl LinkMasses {
    pub fn total(&self) -> f64 {
        self.pillar + self.inner_boom + self.outer_boom + self.telescope + self.rotator + self.grapple
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            pillar: self.pillar * s,
            inner_boom: self.inner_boom * s,
            outer_boom: self.outer_boom * s,
            telescope: self.telescope * s,
            rotator: self.rotator * s,
            grapple: self.grapple * s,
        }
    }
}

impl Default for LinkMasses {
    fn default() -> Self {
        Self {
            pillar: 500.0,
            inner_boom: 500.0,
            outer_boom: 400.0,
            telescope: 200.0,
            rotator: 100.0,
            grapple: 300.0,
        }
    }
}

/// Link lengths, pendulum length, masses and centre-of-mass offsets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CraneGeometry {
    pub pillar_height: f64,
    pub inner_boom_length: f64,
    pub outer_boom_length: f64,
    pub telescope_max: f64,
    pub pendulum_length: f64,
    pub masses: LinkMasses,
    /// Height of the pillar centre of mass above the crane foot.
    pub pillar_com: f64,
    /// Distance of the inner boom centre of mass from its pivot.
    pub inner_boom_com: f64,
    /// Distance of the outer boom centre of mass from the elbow.
    pub outer_boom_com: f64,
    /// Distance of the telescope centre of mass from the elbow at zero extension.
    pub telescope_com: f64,
}

impl Default for CraneGeometry {
    fn default() -> Self {
        Self {
            pillar_height: 1.5,
            inner_boom_length: 3.0,
            outer_boom_length: 2.0,
            telescope_max: 2.0,
            pendulum_length: 0.8,
            masses: LinkMasses::default(),
            pillar_com: 0.75,
            inner_boom_com: 1.5,
            outer_boom_com: 1.0,
            telescope_com: 1.0,
        }
    }
}

impl CraneGeometry {
    /// Horizontal reach with every boom straight and the telescope fully out.
    pub fn reach(&self) -> f64 {
        self.inner_boom_length + self.outer_boom_length + self.telescope_max
    }

    pub fn validate(&self) -> Result<()> {
        let lengths = [
            self.pillar_height,
            self.inner_boom_length,
            self.outer_boom_length,
            self.pendulum_length,
        ];
        if lengths.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(config_err("geometry lengths must be positive"));
        }
        if !(self.telescope_max >= 0.0) {
            return Err(config_err("telescope_max must be non-negative"));
        }
        let m = &self.masses;
        let masses = [m.pillar, m.inner_boom, m.outer_boom, m.telescope, m.rotator, m.grapple];
        if masses.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(config_err("link masses must be non-negative"));
        }
        Ok(())
    }
}

/// Default actuator roster q1..q6.
pub fn default_actuators() -> Vec<ActuatorSpec> {
    use JointKind::*;
    vec![
        ActuatorSpec::new("q1", Revolute, -0.5, 3.9, 0.6, 60.0e3, 2.0e4),
        ActuatorSpec::new("q2", Revolute, -0.6, 1.45, 0.4, 100.0e3, 2.0e4),
        ActuatorSpec::new("q3", Revolute, -2.6, 0.4, 0.4, 60.0e3, 6.0e3),
        ActuatorSpec::new("q4", Prismatic, 0.0, 2.0, 0.8, 20.0e3, 600.0),
        ActuatorSpec::new("q5", Revolute, -3.2, 3.2, 1.5, 2.0e3, 40.0),
        ActuatorSpec::new("q6", Prismatic, 0.1, 1.6, 0.5, 10.0e3, 150.0),
    ]
}

/// Geometry, actuators and passive-pendulum damping of one crane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CraneModel {
    pub geometry: CraneGeometry,
    pub actuators: Vec<ActuatorSpec>,
    /// Viscous damping of the grapple pendulum (1/s).
    pub pendulum_damping: f64,
}

impl Default for CraneModel {
    fn default() -> Self {
        Self {
            geometry: CraneGeometry::default(),
            actuators: default_actuators(),
            pendulum_damping: 0.5,
        }
    }
}

impl CraneModel {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.actuators.len() != NUM_JOINTS {
            return Err(config_err(format!(
                "expected {NUM_JOINTS} actuators, got {}",
                self.actuators.len()
            )));
        }
        for a in &self.actuators {
            a.validate()?;
        }
        let tele = &self.actuators[3];
        if tele.range_min < 0.0 || tele.range_max > self.geometry.telescope_max + 1e-12 {
            return Err(config_err("q4 range must lie within [0, telescope_max]"));
        }
        if !(self.pendulum_damping >= 0.0) {
            return Err(config_err("pendulum_damping must be non-negative"));
        }
        Ok(())
    }

    /// Same crane with every link mass and effective inertia multiplied by `s`.
    pub fn with_mass_scale(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.geometry.masses = self.geometry.masses.scaled(s);
        for a in &mut out.actuators {
            a.inertia_eff *= s;
        }
        out
    }

    pub fn clamp_to_range(&self, q: &mut [f64; NUM_JOINTS]) {
        for (qi, a) in q.iter_mut().zip(&self.actuators) {
            *qi = qi.clamp(a.range_min, a.range_max);
        }
    }

    pub fn check_range(&self, q: &[f64; NUM_JOINTS]) -> Result<()> {
        for (i, (&qi, a)) in q.iter().zip(&self.actuators).enumerate() {
            if !qi.is_finite() {
                return Err(Error::NonFinite("joint position"));
            }
            if qi < a.range_min || qi > a.range_max {
                return Err(Error::JointOutOfRange {
                    joint: i + 1,
                    value: qi,
                    min: a.range_min,
                    max: a.range_max,
                });
            }
        }
        Ok(())
    }
}

/// Full dynamic state of the crane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CraneState {
    pub q: [f64; NUM_JOINTS],
    pub qdot: [f64; NUM_JOINTS],
    pub v_target: [f64; NUM_JOINTS],
    pub tau_applied: [f64; NUM_JOINTS],
    /// Pendulum swing angles (α in the x–z plane, β in the y–z plane).
    pub pend: [f64; 2],
    pub pend_rate: [f64; 2],
    /// Boom tip velocity from the last step, used for the pendulum drive.
    pub tip_velocity: Vector3<f64>,
    pub time: f64,
}

impl CraneState {
    pub fn at_rest(q: [f64; NUM_JOINTS]) -> Self {
        Self {
            q,
            qdot: [0.0; NUM_JOINTS],
            v_target: [0.0; NUM_JOINTS],
            tau_applied: [0.0; NUM_JOINTS],
            pend: [0.0; 2],
            pend_rate: [0.0; 2],
            tip_velocity: Vector3::zeros(),
            time: 0.0,
        }
    }

    fn is_finite(&self) -> bool {
        self.q
            .iter()
            .chain(&self.qdot)
            .chain(&self.v_target)
            .chain(&self.tau_applied)
            .chain(&self.pend)
            .chain(&self.pend_rate)
            .all(|v| v.is_finite())
            && self.tip_velocity.iter().all(|v| v.is_finite())
    }
}

/// Poses along the kinematic chain.
#[derive(Clone, Debug, PartialEq)]
pub struct CraneFrames {
    pub pillar_top: Isometry3<f64>,
    pub elbow: Isometry3<f64>,
    pub tip: Isometry3<f64>,
}

/// Grapple centre and yaw of its closing direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GrapplePose {
    pub center: Vector3<f64>,
    pub yaw: f64,
    pub tip: Vector3<f64>,
}

impl GrapplePose {
    /// Horizontal unit vector along which the claws close.
    pub fn closing_dir(&self) -> Vector3<f64> {
        Vector3::new(self.yaw.cos(), self.yaw.sin(), 0.0)
    }

    /// Horizontal normal of the claws' closing plane.
    pub fn plane_normal(&self) -> Vector3<f64> {
        Vector3::new(-self.yaw.sin(), self.yaw.cos(), 0.0)
    }
}

// Positions of the chain points, shared by kinematics and gravity.
struct ChainPoints {
    pillar_top: Vector3<f64>,
    elbow: Vector3<f64>,
    tip: Vector3<f64>,
    inner_dir: Vector3<f64>,
    outer_dir: Vector3<f64>,
}

fn chain_points(q: &[f64; NUM_JOINTS], g: &CraneGeometry) -> ChainPoints {
    let (s1, c1) = q[0].sin_cos();
    let (s2, c2) = q[1].sin_cos();
    let (s23, c23) = (q[1] + q[2]).sin_cos();
    let pillar_top = Vector3::new(0.0, 0.0, g.pillar_height);
    let inner_dir = Vector3::new(c1 * c2, s1 * c2, s2);
    let outer_dir = Vector3::new(c1 * c23, s1 * c23, s23);
    let elbow = pillar_top + inner_dir * g.inner_boom_length;
    let tip = elbow + outer_dir * (g.outer_boom_length + q[3]);
    ChainPoints {
        pillar_top,
        elbow,
        tip,
        inner_dir,
        outer_dir,
    }
}

fn pendulum_rod(pend: &[f64; 2], length: f64) -> Vector3<f64> {
    let (sa, ca) = pend[0].sin_cos();
    let (sb, cb) = pend[1].sin_cos();
    Vector3::new(sa * cb, sb, -ca * cb) * length
}

/// Boom tip position without range checking.
pub(crate) fn tip_position(q: &[f64; NUM_JOINTS], g: &CraneGeometry) -> Vector3<f64> {
    chain_points(q, g).tip
}

/// Frames of the pillar top, elbow and boom tip for joint positions `q`.
///
/// Orientations: the pillar top is yawed by `q1`; the elbow frame's `x`
/// axis points along the inner boom; the tip frame's `x` axis points along
/// the outer boom.
pub fn forward_kinematics(q: &[f64; NUM_JOINTS], model: &CraneModel) -> Result<CraneFrames> {
    model.check_range(q)?;
    let p = chain_points(q, &model.geometry);
    let yaw = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), q[0]);
    // Positive pitch raises the boom, i.e. a negative rotation about local y.
    let pitch = |a: f64| UnitQuaternion::from_axis_angle(&Vector3::y_axis(), -a);
    Ok(CraneFrames {
        pillar_top: Isometry3::from_parts(Translation3::from(p.pillar_top), yaw),
        elbow: Isometry3::from_parts(Translation3::from(p.elbow), yaw * pitch(q[1])),
        tip: Isometry3::from_parts(Translation3::from(p.tip), yaw * pitch(q[1] + q[2])),
    })
}

/// Grapple centre hanging below the boom tip, and its closing yaw.
pub fn grapple_pose(state: &CraneState, model: &CraneModel) -> GrapplePose {
    let tip = tip_position(&state.q, &model.geometry);
    GrapplePose {
        center: tip + pendulum_rod(&state.pend, model.geometry.pendulum_length),
        yaw: state.q[0] + state.q[4],
        tip,
    }
}

/// Generalized gravity effort on each joint, `-∂U/∂q_i`.
///
/// `payload_mass` hangs at the grapple centre. The rod pivots freely at the
/// boom tip, so the swing angles are coordinates of their own and the
/// grapple's weight loads the boom at the tip.
pub fn gravity_forces(
    q: &[f64; NUM_JOINTS],
    _pend: &[f64; 2],
    model: &CraneModel,
    gravity: &Vector3<f64>,
    payload_mass: f64,
) -> [f64; NUM_JOINTS] {
    let g = &model.geometry;
    let m = &g.masses;
    let p = chain_points(q, g);

    let inner_com = p.pillar_top + p.inner_dir * g.inner_boom_com;
    let outer_com = p.elbow + p.outer_dir * g.outer_boom_com;
    let tele_com = p.elbow + p.outer_dir * (g.telescope_com + q[3]);

    // (mass, position) of every body moved by q2 and beyond.
    let distal = [
        (m.inner_boom, inner_com),
        (m.outer_boom, outer_com),
        (m.telescope, tele_com),
        (m.rotator, p.tip),
        (m.grapple + payload_mass, p.tip),
    ];
    let (s1, c1) = q[0].sin_cos();
    let pitch_axis = Vector3::new(s1, -c1, 0.0);
    let z = Vector3::z();

    let mut tau = [0.0; NUM_JOINTS];
    for (k, (mass, pos)) in distal.iter().enumerate() {
        let w = gravity * *mass;
        tau[0] += w.dot(&z.cross(pos));
        tau[1] += w.dot(&pitch_axis.cross(&(pos - p.pillar_top)));
        if k >= 1 {
            tau[2] += w.dot(&pitch_axis.cross(&(pos - p.elbow)));
        }
        if k >= 2 {
            tau[3] += w.dot(&p.outer_dir);
        }
    }
    tau
}

/// Moment of the crane's weight about the crane foot.
pub fn gravity_moment(
    q: &[f64; NUM_JOINTS],
    pend: &[f64; 2],
    model: &CraneModel,
    gravity: &Vector3<f64>,
    payload_mass: f64,
) -> Vector3<f64> {
    let g = &model.geometry;
    let m = &g.masses;
    let p = chain_points(q, g);
    let grapple = p.tip + pendulum_rod(pend, g.pendulum_length);
    let bodies = [
        (m.pillar, Vector3::new(0.0, 0.0, g.pillar_com)),
        (m.inner_boom, p.pillar_top + p.inner_dir * g.inner_boom_com),
        (m.outer_boom, p.elbow + p.outer_dir * g.outer_boom_com),
        (m.telescope, p.elbow + p.outer_dir * (g.telescope_com + q[3])),
        (m.rotator, p.tip),
        (m.grapple + payload_mass, grapple),
    ];
    bodies.iter().map(|(mass, pos)| pos.cross(&(gravity * *mass))).sum()
}

/// Limits the change of a servo target to `rate_fraction · v_max` per
/// simulation step, over `steps` steps.
pub fn clamp_target_rate(prev_target: f64, commanded: f64, spec: &ActuatorSpec, steps: u32) -> f64 {
    let commanded = commanded.clamp(-spec.v_max, spec.v_max);
    let max_delta = spec.rate_fraction * spec.v_max * f64::from(steps);
    prev_target + (commanded - prev_target).clamp(-max_delta, max_delta)
}

/// Positive actuator work of q1..q4 over one step. Braking earns nothing back.
pub fn work_increment(tau_applied: &[f64; NUM_JOINTS], qdot: &[f64; NUM_JOINTS], dt: f64) -> f64 {
    tau_applied
        .iter()
        .zip(qdot)
        .take(ENERGY_JOINTS)
        .map(|(t, v)| (t * v).max(0.0) * dt)
        .sum()
}

/// External inputs to one dynamics step.
#[derive(Clone, Copy, Debug)]
pub struct StepInputs {
    pub gravity: Vector3<f64>,
    pub payload_mass: f64,
}

impl Default for StepInputs {
    fn default() -> Self {
        Self {
            gravity: Vector3::new(0.0, 0.0, -STANDARD_GRAVITY),
            payload_mass: 0.0,
        }
    }
}

/// Advances the crane by one step of length `dt`.
///
/// Each joint's servo asks for the effort that reaches `v_target` within the
/// step on top of holding gravity, saturates it at `effort_max`, and
/// integrates semi-implicitly. Range stops are inelastic. The grapple
/// pendulum is driven by the boom tip's acceleration.
pub fn step_dynamics(
    model: &CraneModel,
    state: &CraneState,
    v_target: &[f64; NUM_JOINTS],
    dt: f64,
    inputs: &StepInputs,
) -> Result<CraneState> {
    if !state.is_finite() || !v_target.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("crane step input"));
    }
    if !(dt > 0.0 && dt.is_finite()) || !inputs.gravity.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("crane step parameters"));
    }
    let geom = &model.geometry;
    let tau_g = gravity_forces(&state.q, &state.pend, model, &inputs.gravity, inputs.payload_mass);

    let mut next = state.clone();
    next.v_target = *v_target;
    for i in 0..NUM_JOINTS {
        let a = &model.actuators[i];
        let required = a.inertia_eff * (v_target[i] - state.qdot[i]) / dt - tau_g[i];
        let applied = required.clamp(-a.effort_max, a.effort_max);
        let mut qd = state.qdot[i] + (applied + tau_g[i]) / a.inertia_eff * dt;
        qd = qd.clamp(-a.v_max, a.v_max);
        let mut q = state.q[i] + qd * dt;
        if q >= a.range_max {
            q = a.range_max;
            qd = qd.min(0.0);
        } else if q <= a.range_min {
            q = a.range_min;
            qd = qd.max(0.0);
        }
        next.q[i] = q;
        next.qdot[i] = qd;
        next.tau_applied[i] = applied;
    }

    let tip_old = tip_position(&state.q, geom);
    let tip_new = tip_position(&next.q, geom);
    let tip_vel = (tip_new - tip_old) / dt;
    let tip_acc = (tip_vel - state.tip_velocity) / dt;
    next.tip_velocity = tip_vel;

    let eff = inputs.gravity - tip_acc;
    let l = geom.pendulum_length;
    let c = model.pendulum_damping;
    // α swings in the x–z plane, β in the y–z plane.
    let drives = [eff.x, eff.y];
    for k in 0..2 {
        let (s, co) = state.pend[k].sin_cos();
        let acc = (drives[k] * co + eff.z * s) / l - c * state.pend_rate[k];
        next.pend_rate[k] = state.pend_rate[k] + acc * dt;
        next.pend[k] = state.pend[k] + next.pend_rate[k] * dt;
    }
    next.time = state.time + dt;

    if !next.is_finite() {
        return Err(Error::NonFinite("crane state after step"));
    }
    Ok(next)
}
