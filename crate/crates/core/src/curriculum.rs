//! Lesson schedule over artificial-plane heights and log sampling regions,
//! with windowed success-rate advancement.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::crane::CraneModel;
use crate::error::{config_err, Result};

/// Annular sector in crane-base polar coordinates (metres, radians).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingRegion {
    pub r_min: f64,
    pub r_max: f64,
    pub theta_min: f64,
    pub theta_max: f64,
}

impl SamplingRegion {
    pub fn validate(&self) -> Result<()> {
        let vals = [self.r_min, self.r_max, self.theta_min, self.theta_max];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(config_err("sampling region has non-finite bounds"));
        }
        if self.r_min < 0.0 || self.r_min > self.r_max || self.theta_min > self.theta_max {
            return Err(config_err(format!("empty sampling region {self:?}")));
        }
        Ok(())
    }

    pub fn lerp(&self, other: &Self, f: f64) -> Self {
        let l = |a: f64, b: f64| a + (b - a) * f;
        Self {
            r_min: l(self.r_min, other.r_min),
            r_max: l(self.r_max, other.r_max),
            theta_min: l(self.theta_min, other.theta_min),
            theta_max: l(self.theta_max, other.theta_max),
        }
    }

    pub fn contains(&self, r: f64, theta: f64) -> bool {
        r >= self.r_min && r <= self.r_max && theta >= self.theta_min && theta <= self.theta_max
    }
}

/// One curriculum stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LessonSpec {
    pub index: usize,
    pub plane_height: f64,
    pub region: SamplingRegion,
    pub plane_collision_enabled: bool,
    pub advancement_threshold: f64,
    pub window: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumConfig {
    /// Plane height of the first lessons (m); a multiple of `height_step`.
    pub initial_height: f64,
    pub height_step: f64,
    /// Lessons at the initial height over which the region expands.
    pub expansion_lessons: usize,
    /// Small region the expansion starts from (around the grapple's initial
    /// ground projection).
    pub seed_region: SamplingRegion,
    /// Region of the target task.
    pub target_region: SamplingRegion,
    pub advancement_threshold: f64,
    pub window: usize,
    /// Radial margin kept inside the reachable annulus.
    pub reach_margin: f64,
    /// Height of the grapple centre above the plane when grasping.
    pub grasp_clearance: f64,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        use std::f64::consts::PI;
        Self {
            initial_height: 2.5,
            height_step: 0.1,
            expansion_lessons: 4,
            seed_region: SamplingRegion {
                r_min: 2.4,
                r_max: 2.6,
                theta_min: PI - 0.04,
                theta_max: PI + 0.04,
            },
            target_region: SamplingRegion {
                r_min: 3.5,
                r_max: 6.0,
                theta_min: PI / 3.0,
                theta_max: 2.0 * PI / 3.0,
            },
            advancement_threshold: 0.30,
            window: 20,
            reach_margin: 0.3,
            grasp_clearance: 0.23,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.height_step > 0.0) {
            return Err(config_err("height_step must be positive"));
        }
        if !(self.initial_height > 0.0) {
            return Err(config_err("initial plane height must be positive"));
        }
        let ratio = self.initial_height / self.height_step;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return Err(config_err(format!(
                "initial height {} is not a multiple of {}",
                self.initial_height, self.height_step
            )));
        }
        if self.expansion_lessons == 0 {
            return Err(config_err("expansion_lessons must be at least 1"));
        }
        if !(self.advancement_threshold > 0.0 && self.advancement_threshold <= 1.0) {
            return Err(config_err("advancement_threshold must lie in (0, 1]"));
        }
        if self.window == 0 {
            return Err(config_err("window must be positive"));
        }
        self.seed_region.validate()?;
        self.target_region.validate()
    }
}

/// Inner and outer horizontal radius the boom tip reaches at `tip_height`,
/// scanning the joint ranges of q2, q3 and q4. `None` when unreachable.
pub fn reach_annulus(model: &CraneModel, tip_height: f64) -> Option<(f64, f64)> {
    let g = &model.geometry;
    let a = &model.actuators;
    let (q2_lo, q2_hi) = (a[1].range_min, a[1].range_max);
    let (q3_lo, q3_hi) = (a[2].range_min, a[2].range_max);
    let (l_lo, l_hi) = (
        g.outer_boom_length + a[3].range_min,
        g.outer_boom_length + a[3].range_max,
    );
    const N2: usize = 2000;
    const NL: usize = 100;
    let mut best: Option<(f64, f64)> = None;
    for i in 0..=N2 {
        let q2 = q2_lo + (q2_hi - q2_lo) * i as f64 / N2 as f64;
        let ex = g.inner_boom_length * q2.cos();
        let ez = g.pillar_height + g.inner_boom_length * q2.sin();
        for j in 0..=NL {
            let l = l_lo + (l_hi - l_lo) * j as f64 / NL as f64;
            let s = (tip_height - ez) / l;
            if s.abs() > 1.0 {
                continue;
            }
            let base = s.asin();
            for phi in [base, std::f64::consts::PI - base, -std::f64::consts::PI - base] {
                let q3 = phi - q2;
                if q3 < q3_lo || q3 > q3_hi {
                    continue;
                }
                let r = ex + l * phi.cos();
                if r < 0.0 {
                    continue;
                }
                best = Some(match best {
                    None => (r, r),
                    Some((lo, hi)) => (lo.min(r), hi.max(r)),
                });
            }
        }
    }
    best
}

/// Tip height needed to grasp a log on a plane at `plane_height`.
pub fn grasp_tip_height(plane_height: f64, cfg: &CurriculumConfig, model: &CraneModel) -> f64 {
    plane_height + cfg.grasp_clearance + model.geometry.pendulum_length
}

/// Clips a lesson's region to the reachable annulus at its plane height.
pub fn lesson_region(
    region: &SamplingRegion,
    plane_height: f64,
    cfg: &CurriculumConfig,
    model: &CraneModel,
) -> Result<SamplingRegion> {
    let tip_h = grasp_tip_height(plane_height, cfg, model);
    let (r_in, r_out) = reach_annulus(model, tip_h)
        .ok_or_else(|| config_err(format!("plane height {plane_height} is out of reach")))?;
    let slew = &model.actuators[0];
    let out = SamplingRegion {
        r_min: region.r_min.max(r_in + cfg.reach_margin),
        r_max: region.r_max.min(r_out - cfg.reach_margin),
        theta_min: region.theta_min.max(slew.range_min),
        theta_max: region.theta_max.min(slew.range_max),
    };
    out.validate()
        .map_err(|_| config_err(format!("region {region:?} unreachable at plane height {plane_height}")))?;
    Ok(out)
}

/// Builds the ordered lesson list: `expansion_lessons` at the initial height
/// with regions expanding from the seed to the target region, one lesson per
/// `height_step` of descent down to the ground, and a final lesson on the
/// ground with the target region.
pub fn build_schedule(cfg: &CurriculumConfig, model: &CraneModel) -> Result<Vec<LessonSpec>> {
    cfg.validate()?;
    let steps = (cfg.initial_height / cfg.height_step).round() as usize;
    let e = cfg.expansion_lessons;
    let mut raw: Vec<(f64, SamplingRegion)> = Vec::with_capacity(e + steps + 1);
    for k in 1..=e {
        let f = k as f64 / e as f64;
        raw.push((cfg.initial_height, cfg.seed_region.lerp(&cfg.target_region, f)));
    }
    for k in 1..=steps {
        let h = (steps - k) as f64 * cfg.height_step;
        raw.push((h, cfg.target_region));
    }
    raw.push((0.0, cfg.target_region));

    raw.into_iter()
        .enumerate()
        .map(|(index, (plane_height, region))| {
            Ok(LessonSpec {
                index,
                plane_height,
                region: lesson_region(&region, plane_height, cfg, model)?,
                plane_collision_enabled: plane_height <= 0.0,
                advancement_threshold: cfg.advancement_threshold,
                window: cfg.window,
            })
        })
        .collect()
}

/// Writes the schedule as CSV for the run log.
pub fn write_schedule_csv<W: Write>(lessons: &[LessonSpec], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "lesson",
        "plane_height",
        "r_min",
        "r_max",
        "theta_min",
        "theta_max",
        "plane_collision",
    ])?;
    for l in lessons {
        w.write_record([
            l.index.to_string(),
            l.plane_height.to_string(),
            l.region.r_min.to_string(),
            l.region.r_max.to_string(),
            l.region.theta_min.to_string(),
            l.region.theta_max.to_string(),
            l.plane_collision_enabled.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Ring buffer of recent episode outcomes plus the active lesson.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgressTracker {
    pub lesson: usize,
    pub n_lessons: usize,
    pub window: usize,
    pub threshold: f64,
    outcomes: VecDeque<bool>,
}

impl ProgressTracker {
    pub fn new(n_lessons: usize, window: usize, threshold: f64) -> Self {
        Self {
            lesson: 0,
            n_lessons,
            window,
            threshold,
            outcomes: VecDeque::with_capacity(window),
        }
    }

    pub fn for_schedule(lessons: &[LessonSpec]) -> Self {
        let first = &lessons[0];
        Self::new(lessons.len(), first.window, first.advancement_threshold)
    }

    pub fn outcomes(&self) -> impl Iterator<Item = bool> + '_ {
        self.outcomes.iter().copied()
    }

    /// Restores a tracker from persisted parts.
    pub fn from_parts(lesson: usize, n_lessons: usize, window: usize, threshold: f64, outcomes: Vec<bool>) -> Self {
        let mut t = Self::new(n_lessons, window, threshold);
        t.lesson = lesson.min(n_lessons.saturating_sub(1));
        for o in outcomes.into_iter().rev().take(window).rev() {
            t.outcomes.push_back(o);
        }
        t
    }

    pub fn is_final(&self) -> bool {
        self.lesson + 1 >= self.n_lessons
    }

    /// Success rate over the window, once it is full.
    pub fn success_rate(&self) -> Option<f64> {
        (self.outcomes.len() == self.window)
            .then(|| self.outcomes.iter().filter(|o| **o).count() as f64 / self.window as f64)
    }

    /// Records one episode outcome; advances (and clears the window) when
    /// the full window meets the threshold.
    pub fn record_and_maybe_advance(&mut self, success: bool) -> bool {
        if self.outcomes.len() == self.window {
            self.outcomes.pop_front();
        }
        self.outcomes.push_back(success);
        let ready = self.success_rate().is_some_and(|rate| rate >= self.threshold - 1e-12);
        if ready && !self.is_final() {
            self.lesson += 1;
            self.outcomes.clear();
            true
        } else {
            false
        }
    }
}
