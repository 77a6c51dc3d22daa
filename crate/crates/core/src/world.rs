//! Log, support planes, load bunk, grasp capture and collision checks, and
//! the perturbations applied by the sensitivity suites.
//!
//! Grasping is geometric: the log is captured when its axis crosses the
//! claws' closing plane inside a box below the grapple centre, and becomes
//! attached when the claws close around it.

use nalgebra::{Rotation3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::crane::{gravity_moment, CraneModel, CraneState, GrapplePose, STANDARD_GRAVITY};
use crate::curriculum::{LessonSpec, SamplingRegion};
use crate::error::{config_err, Result};
use crate::geom::{Capsule, OrientedBox};

pub type BunkBox = OrientedBox;

pub fn default_bunk() -> BunkBox {
    OrientedBox {
        center: [-2.5, 0.0, 1.0],
        half_extents: [1.5, 1.2, 0.75],
        yaw: 0.0,
    }
}

/// Training logs are shorter to encourage grasping near the centre of mass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogMode {
    Training,
    Evaluation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogConfig {
    pub training_length: f64,
    pub evaluation_length: f64,
    pub radius: f64,
    pub mass: f64,
    /// Width (rad) of the uniform heading distribution, centred on the
    /// direction tangential to the crane; π gives uniform headings.
    pub heading_spread: f64,
}

impl Default for LogConfig {
    fn default() -> Self {
        Self {
            training_length: 1.5,
            evaluation_length: 3.0,
            radius: 0.08,
            mass: 50.0,
            heading_spread: std::f64::consts::PI,
        }
    }
}

/// Geometric grasp and lift thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraspConfig {
    pub capture_radius: f64,
    pub claw_depth: f64,
    pub grip_slack: f64,
    pub lift_threshold: f64,
    /// Largest angle (rad) between the log axis and the closing-plane normal
    /// at which the claws can still enclose the log.
    pub max_misalignment: f64,
}

impl Default for GraspConfig {
    fn default() -> Self {
        Self {
            capture_radius: 0.25,
            claw_depth: 0.35,
            grip_slack: 0.05,
            lift_threshold: 0.3,
            max_misalignment: std::f64::consts::FRAC_PI_4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogState {
    pub com: Vector3<f64>,
    /// Horizontal heading of the log axis, in [0, π).
    pub heading: f64,
    pub length: f64,
    pub radius: f64,
    pub mass: f64,
    pub attached: bool,
    /// Height of the centre of mass when the log rests on its support.
    pub rest_height: f64,
    pub velocity: Vector3<f64>,
}

impl LogState {
    pub fn axis(&self) -> Vector3<f64> {
        Vector3::new(self.heading.cos(), self.heading.sin(), 0.0)
    }
}

pub fn normalize_heading(psi: f64) -> f64 {
    let h = psi.rem_euclid(std::f64::consts::PI);
    // rem_euclid can round up to exactly π
    if h >= std::f64::consts::PI {
        0.0
    } else {
        h
    }
}

/// Samples a log uniformly (by area) over the lesson's annular sector, lying
/// on the lesson's plane, with a heading uniform over `heading_spread`
/// around the tangential direction.
pub fn sample_log<R: Rng + ?Sized>(
    lesson: &LessonSpec,
    mode: LogMode,
    cfg: &LogConfig,
    rng: &mut R,
) -> Result<LogState> {
    let SamplingRegion {
        r_min,
        r_max,
        theta_min,
        theta_max,
    } = lesson.region;
    lesson.region.validate()?;
    if !(cfg.radius > 0.0) || !(cfg.training_length > 0.0) || !(cfg.evaluation_length > 0.0) {
        return Err(config_err("log dimensions must be positive"));
    }
    if !(0.0..=std::f64::consts::PI).contains(&cfg.heading_spread) {
        return Err(config_err("heading_spread must lie in [0, π]"));
    }
    let u: f64 = rng.random();
    let r = (r_min * r_min + u * (r_max * r_max - r_min * r_min)).sqrt();
    let theta = theta_min + rng.random::<f64>() * (theta_max - theta_min);
    let tangential = theta + std::f64::consts::FRAC_PI_2;
    let heading = normalize_heading(tangential + (rng.random::<f64>() - 0.5) * cfg.heading_spread);
    let rest_height = lesson.plane_height + cfg.radius;
    Ok(LogState {
        com: Vector3::new(r * theta.cos(), r * theta.sin(), rest_height),
        heading,
        length: match mode {
            LogMode::Training => cfg.training_length,
            LogMode::Evaluation => cfg.evaluation_length,
        },
        radius: cfg.radius,
        mass: cfg.mass,
        attached: false,
        rest_height,
        velocity: Vector3::zeros(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GraspStatus {
    None,
    Captured,
    Attached,
}

/// Geometric relation between the log axis and the claws.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CaptureGeometry {
    /// Angle between the log axis and the closing-plane normal, in [0, π/2].
    pub misalignment: f64,
    /// Offset along the log axis of the crossing with the closing plane.
    pub axial: f64,
    /// In-plane horizontal offset of the crossing from the grapple centre.
    pub lateral: f64,
    /// Height of the grapple centre above the crossing.
    pub height: f64,
}

pub fn capture_geometry(grapple: &GrapplePose, log: &LogState) -> Option<CaptureGeometry> {
    let n = grapple.plane_normal();
    let axis = log.axis();
    let cos = axis.dot(&n);
    let misalignment = cos.abs().min(1.0).acos();
    if cos.abs() < 1e-12 {
        return None;
    }
    let axial = (grapple.center - log.com).dot(&n) / cos;
    let crossing = log.com + axis * axial;
    let rel = crossing - grapple.center;
    Some(CaptureGeometry {
        misalignment,
        axial,
        lateral: rel.dot(&grapple.closing_dir()),
        height: -rel.z,
    })
}

/// Classifies the log relative to the grapple.
pub fn detect_grasp(grapple: &GrapplePose, aperture: f64, log: &LogState, cfg: &GraspConfig) -> GraspStatus {
    let Some(c) = capture_geometry(grapple, log) else {
        return GraspStatus::None;
    };
    let captured = c.misalignment <= cfg.max_misalignment
        && c.axial.abs() <= log.length / 2.0
        && c.lateral.abs() <= cfg.capture_radius
        && c.height >= 0.0
        && c.height <= cfg.claw_depth;
    if !captured {
        GraspStatus::None
    } else if aperture <= closed_gap(log, cfg) {
        GraspStatus::Attached
    } else {
        GraspStatus::Captured
    }
}

/// Aperture at or below which the claws hold the log.
pub fn closed_gap(log: &LogState, cfg: &GraspConfig) -> f64 {
    2.0 * log.radius + cfg.grip_slack
}

pub fn check_success(log: &LogState, cfg: &GraspConfig) -> bool {
    log.attached && log.com.z >= log.rest_height + cfg.lift_threshold
}

/// Capsule radii of the crane links and claws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollisionConfig {
    pub pillar_radius: f64,
    pub inner_boom_radius: f64,
    pub outer_boom_radius: f64,
    pub telescope_radius: f64,
    pub grapple_radius: f64,
    pub claw_radius: f64,
}

impl Default for CollisionConfig {
    fn default() -> Self {
        Self {
            pillar_radius: 0.2,
            inner_boom_radius: 0.15,
            outer_boom_radius: 0.12,
            telescope_radius: 0.1,
            grapple_radius: 0.15,
            claw_radius: 0.06,
        }
    }
}

/// Named capsules of the crane in the crane frame.
#[derive(Clone, Debug)]
pub struct CraneCapsules {
    pub parts: Vec<(&'static str, Capsule)>,
    /// Index into `parts` of the claw capsule.
    pub claw: usize,
}

pub fn crane_capsules(
    state: &CraneState,
    model: &CraneModel,
    grapple: &GrapplePose,
    grasp: &GraspConfig,
    cfg: &CollisionConfig,
) -> CraneCapsules {
    let g = &model.geometry;
    let q = &state.q;
    let (s1, c1) = q[0].sin_cos();
    let (s2, c2) = q[1].sin_cos();
    let (s23, c23) = (q[1] + q[2]).sin_cos();
    let foot = Vector3::zeros();
    let top = Vector3::new(0.0, 0.0, g.pillar_height);
    let elbow = top + Vector3::new(c1 * c2, s1 * c2, s2) * g.inner_boom_length;
    let outer = Vector3::new(c1 * c23, s1 * c23, s23);
    let outer_end = elbow + outer * g.outer_boom_length;
    let tip = grapple.tip;
    let half = grapple.closing_dir() * (q[5] / 2.0);
    let drop = Vector3::new(0.0, 0.0, grasp.claw_depth / 2.0);
    let claw_mid = grapple.center - drop;
    let parts = vec![
        ("pillar", Capsule::new(foot, top, cfg.pillar_radius)),
        ("inner_boom", Capsule::new(top, elbow, cfg.inner_boom_radius)),
        ("outer_boom", Capsule::new(elbow, outer_end, cfg.outer_boom_radius)),
        ("telescope", Capsule::new(outer_end, tip, cfg.telescope_radius)),
        (
            "grapple",
            Capsule::new(grapple.center, grapple.center, cfg.grapple_radius),
        ),
        ("claws", Capsule::new(claw_mid - half, claw_mid + half, cfg.claw_radius)),
    ];
    CraneCapsules { claw: 5, parts }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CollisionReport {
    /// Names of the crane parts touching the load bunk.
    pub bunk: Vec<&'static str>,
    pub claw_plane: bool,
    pub claw_ground: bool,
}

impl CollisionReport {
    pub fn bunk_collision(&self) -> bool {
        !self.bunk.is_empty()
    }
}

/// Collision report for one configuration.
///
/// `to_world` maps crane-frame points into the world (identity unless the
/// chassis is compliant); the bunk rides with the crane, while the ground
/// and the artificial plane are world surfaces.
pub fn check_collisions(
    capsules: &CraneCapsules,
    bunk: &BunkBox,
    lesson: &LessonSpec,
    to_world: &Rotation3<f64>,
) -> CollisionReport {
    let mut report = CollisionReport::default();
    for (name, c) in &capsules.parts {
        if *name == "pillar" {
            // the pillar stands on the chassis next to the bunk by construction
            continue;
        }
        if bunk.intersects_capsule(c) {
            report.bunk.push(name);
        }
    }
    let claw = &capsules.parts[capsules.claw].1;
    let lowest = (to_world * claw.a).z.min((to_world * claw.b).z) - claw.radius;
    report.claw_ground = lowest < 0.0;
    report.claw_plane = lesson.plane_collision_enabled && lesson.plane_height > 0.0 && lowest < lesson.plane_height;
    report
}

/// Chassis roll/pitch spring-damper standing in for tyre and terrain
/// flexibility.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseCompliance {
    pub enabled: bool,
    pub stiffness: f64,
    pub damping: f64,
    pub inertia: f64,
}

impl Default for BaseCompliance {
    fn default() -> Self {
        Self {
            enabled: false,
            stiffness: 2.0e5,
            damping: 1.0e4,
            inertia: 3.0e4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationConfig {
    /// Observed log position lies on a sphere of this radius around the truth.
    pub position_noise_radius: f64,
    /// Half-range (rad) of the uniform heading observation error.
    pub heading_noise: f64,
    pub mass_scale: f64,
    /// Uphill grade (rise over run) of the terrain under the vehicle.
    pub slope_grade: f64,
    pub base_compliance: BaseCompliance,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            position_noise_radius: 0.0,
            heading_noise: 0.0,
            mass_scale: 1.0,
            slope_grade: 0.0,
            base_compliance: BaseCompliance::default(),
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        let mags = [self.position_noise_radius, self.heading_noise, self.slope_grade];
        if mags.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(config_err("perturbation magnitudes must be finite and non-negative"));
        }
        if !(self.mass_scale > 0.0 && self.mass_scale.is_finite()) {
            return Err(config_err("mass_scale must be positive"));
        }
        let b = &self.base_compliance;
        if b.enabled && !(b.stiffness > 0.0 && b.damping >= 0.0 && b.inertia > 0.0) {
            return Err(config_err("base compliance needs positive stiffness and inertia"));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        *self
            == Self {
                base_compliance: BaseCompliance {
                    enabled: false,
                    ..self.base_compliance.clone()
                },
                ..Self::default()
            }
    }
}

/// Gravity in the vehicle frame on an uphill grade: rotated about the
/// lateral axis by `atan(grade)`, pulling backwards.
pub fn slope_gravity(grade: f64) -> Vector3<f64> {
    if grade == 0.0 {
        return Vector3::new(0.0, 0.0, -STANDARD_GRAVITY);
    }
    let tilt = grade.atan();
    Vector3::new(-STANDARD_GRAVITY * tilt.sin(), 0.0, -STANDARD_GRAVITY * tilt.cos())
}

/// Uniform point on a sphere surface.
pub fn sample_sphere_surface<R: Rng + ?Sized>(radius: f64, rng: &mut R) -> Vector3<f64> {
    if radius == 0.0 {
        return Vector3::zeros();
    }
    loop {
        let v: Vector3<f64> = Vector3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v * (radius / n);
        }
    }
}

/// What the perturbations change for one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbedView {
    pub position_offset: Vector3<f64>,
    pub heading_offset: f64,
    pub model: CraneModel,
    pub gravity: Vector3<f64>,
    pub compliance: Option<BaseCompliance>,
}

/// Draws the episode's perturbations. With an identity config the result
/// leaves every observation and parameter untouched.
pub fn apply_perturbations<R: Rng + ?Sized>(
    config: &PerturbationConfig,
    model: &CraneModel,
    rng: &mut R,
) -> PerturbedView {
    let position_offset = sample_sphere_surface(config.position_noise_radius, rng);
    let heading_offset = if config.heading_noise > 0.0 {
        rng.random_range(-config.heading_noise..=config.heading_noise)
    } else {
        0.0
    };
    let model = if config.mass_scale == 1.0 {
        model.clone()
    } else {
        model.with_mass_scale(config.mass_scale)
    };
    PerturbedView {
        position_offset,
        heading_offset,
        model,
        gravity: slope_gravity(config.slope_grade),
        compliance: config.base_compliance.enabled.then(|| config.base_compliance.clone()),
    }
}

/// Chassis tilt state driven by changes in the crane's gravity moment.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseState {
    pub params: BaseCompliance,
    /// Roll (about x) and pitch (about y), rad.
    pub angles: [f64; 2],
    pub rates: [f64; 2],
    reference_moment: Vector3<f64>,
}

impl BaseState {
    pub fn new(params: BaseCompliance, reference_moment: Vector3<f64>) -> Self {
        Self {
            params,
            angles: [0.0; 2],
            rates: [0.0; 2],
            reference_moment,
        }
    }

    pub fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_axis_angle(&Vector3::y_axis(), self.angles[1])
            * Rotation3::from_axis_angle(&Vector3::x_axis(), self.angles[0])
    }

    pub fn step(&mut self, moment: &Vector3<f64>, dt: f64) {
        let drive = moment - self.reference_moment;
        let p = &self.params;
        for (k, m) in [drive.x, drive.y].into_iter().enumerate() {
            let acc = (m - p.stiffness * self.angles[k] - p.damping * self.rates[k]) / p.inertia;
            self.rates[k] += acc * dt;
            self.angles[k] += self.rates[k] * dt;
        }
    }
}

/// Everything outside the crane for one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub log: LogState,
    pub lesson: LessonSpec,
    pub bunk: BunkBox,
    /// Gravity in the crane frame before chassis tilt.
    pub gravity: Vector3<f64>,
    pub position_offset: Vector3<f64>,
    pub heading_offset: f64,
    pub base: Option<BaseState>,
    /// Log centre relative to the grapple centre at attachment.
    attach_offset: Vector3<f64>,
    /// Log was captured with open claws on the previous step.
    open_capture: bool,
    pub grasp_initiated: bool,
}

/// What happened to the grasp during one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GraspEvents {
    pub initiated: bool,
    pub attached: bool,
    pub released: bool,
}

impl WorldState {
    pub fn new(log: LogState, lesson: LessonSpec, bunk: BunkBox, view: &PerturbedView, crane: &CraneState) -> Self {
        let base = view.compliance.clone().map(|p| {
            let m = gravity_moment(&crane.q, &crane.pend, &view.model, &view.gravity, 0.0);
            BaseState::new(p, m)
        });
        Self {
            log,
            lesson,
            bunk,
            gravity: view.gravity,
            position_offset: view.position_offset,
            heading_offset: view.heading_offset,
            base,
            attach_offset: Vector3::zeros(),
            open_capture: false,
            grasp_initiated: false,
        }
    }

    pub fn to_world(&self) -> Rotation3<f64> {
        self.base
            .as_ref()
            .map(BaseState::rotation)
            .unwrap_or_else(Rotation3::identity)
    }

    /// Gravity in the (possibly tilted) crane frame.
    pub fn crane_gravity(&self) -> Vector3<f64> {
        self.to_world().inverse() * self.gravity
    }

    /// Grapple pose mapped into the world frame.
    pub fn grapple_in_world(&self, g: &GrapplePose) -> GrapplePose {
        let r = self.to_world();
        GrapplePose {
            center: r * g.center,
            tip: r * g.tip,
            yaw: g.yaw,
        }
    }

    pub fn observed_log_position(&self) -> Vector3<f64> {
        self.log.com + self.position_offset
    }

    pub fn observed_log_heading(&self) -> f64 {
        normalize_heading(self.log.heading + self.heading_offset)
    }

    pub fn payload_mass(&self) -> f64 {
        if self.log.attached {
            self.log.mass
        } else {
            0.0
        }
    }

    /// Advances the chassis tilt after a crane step.
    pub fn step_base(&mut self, crane: &CraneState, model: &CraneModel, dt: f64) {
        let payload = self.payload_mass();
        if let Some(base) = self.base.as_mut() {
            let g = base.rotation().inverse() * self.gravity;
            let m = gravity_moment(&crane.q, &crane.pend, model, &g, payload);
            base.step(&m, dt);
        }
    }

    /// Grasp state machine for one step: grasp initiation, attachment when
    /// the claws close around a captured log, release on reopening, and
    /// log motion.
    pub fn update_grasp(
        &mut self,
        grapple_world: &GrapplePose,
        aperture: f64,
        closing_commanded: bool,
        cfg: &GraspConfig,
        dt: f64,
    ) -> GraspEvents {
        let mut ev = GraspEvents::default();
        let status = detect_grasp(grapple_world, aperture, &self.log, cfg);
        if !self.grasp_initiated && status != GraspStatus::None && closing_commanded {
            self.grasp_initiated = true;
            ev.initiated = true;
        }
        if self.log.attached {
            if aperture > closed_gap(&self.log, cfg) {
                self.log.attached = false;
                ev.released = true;
            }
        } else if status == GraspStatus::Attached && self.open_capture {
            self.log.attached = true;
            self.attach_offset = self.log.com - grapple_world.center;
            self.log.velocity = Vector3::zeros();
            ev.attached = true;
        }
        self.open_capture = status == GraspStatus::Captured;

        if self.log.attached {
            let prev = self.log.com;
            let mut com = grapple_world.center + self.attach_offset;
            com.z = com.z.max(self.log.rest_height);
            self.log.velocity = (com - prev) / dt;
            self.log.com = com;
        } else if self.log.com.z > self.log.rest_height || self.log.velocity.z != 0.0 {
            self.log.velocity.x = 0.0;
            self.log.velocity.y = 0.0;
            self.log.velocity.z -= STANDARD_GRAVITY * dt;
            self.log.com.z += self.log.velocity.z * dt;
            if self.log.com.z <= self.log.rest_height {
                self.log.com.z = self.log.rest_height;
                self.log.velocity = Vector3::zeros();
            }
        }
        ev
    }

    pub fn collisions(
        &self,
        crane: &CraneState,
        model: &CraneModel,
        grapple: &GrapplePose,
        grasp: &GraspConfig,
        cfg: &CollisionConfig,
    ) -> CollisionReport {
        let caps = crane_capsules(crane, model, grapple, grasp, cfg);
        check_collisions(&caps, &self.bunk, &self.lesson, &self.to_world())
    }
}

/// Joint indices q1..q3 whose saturated effort at a range stop ends an episode.
pub const STOP_CHECKED_JOINTS: [usize; 3] = [0, 1, 2];

/// True when one of q1..q3 sits at a range stop with saturated effort.
pub fn effort_at_limit(state: &CraneState, model: &CraneModel) -> bool {
    STOP_CHECKED_JOINTS.iter().any(|&i| {
        let a = &model.actuators[i];
        let at_stop = state.q[i] <= a.range_min || state.q[i] >= a.range_max;
        at_stop && state.tau_applied[i].abs() >= a.effort_max
    })
}
