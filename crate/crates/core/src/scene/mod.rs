//! Scenario data model and agent-centric preprocessing.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::{Error, Result};

pub mod generator;
pub mod lanes;
pub mod process;

pub use generator::{generate_synthetic_scenario, GenConfig, SHIFT_CITIES, TRAIN_CITIES};
pub use lanes::{segment_lanes, LaneSegment, Segmentation};
pub use process::{build_future_features, build_history_features, normalize_to_focal, ProcessedScene};

pub const SAMPLE_HZ: u32 = 10;
pub const HISTORY_STEPS: usize = 50;
pub const FUTURE_STEPS: usize = 60;
pub const TOTAL_STEPS: usize = HISTORY_STEPS + FUTURE_STEPS;
/// Index of the current (latest history) timestep.
pub const CURRENT_STEP: usize = HISTORY_STEPS - 1;
pub const LANE_POINTS: usize = 20;
pub const SEGMENT_LENGTH: f64 = 20.0;
pub const ROI_RADIUS: f64 = 150.0;

pub const HISTORY_CHANNELS: usize = 4;
pub const FUTURE_CHANNELS: usize = 3;
pub const LANE_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum AgentCategory {
    Vehicle,
    Pedestrian,
    Cyclist,
}

impl AgentCategory {
    pub const ALL: [AgentCategory; 3] = [Self::Vehicle, Self::Pedestrian, Self::Cyclist];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Vehicle => "vehicle",
            Self::Pedestrian => "pedestrian",
            Self::Cyclist => "cyclist",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LaneType {
    Straight,
    Intersection,
    Other,
}

impl LaneType {
    pub const ALL: [LaneType; 3] = [Self::Straight, Self::Intersection, Self::Other];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Straight => "straight",
            Self::Intersection => "intersection",
            Self::Other => "other",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

/// Motion pattern the generator gave the focal agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Behavior {
    Straight,
    Turn,
    Stop,
}

impl Behavior {
    pub const ALL: [Behavior; 3] = [Self::Straight, Self::Turn, Self::Stop];

    pub fn name(self) -> &'static str {
        match self {
            Self::Straight => "straight",
            Self::Turn => "turn",
            Self::Stop => "stop",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    pub const fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentTrack {
    pub category: AgentCategory,
    pub poses: Vec<Pose>,
    pub observed: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanePolyline {
    pub lane_type: LaneType,
    pub points: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawScenario {
    pub scenario_id: String,
    pub hz: u32,
    pub focal_index: usize,
    pub city_tag: String,
    pub focal_behavior: Option<Behavior>,
    pub agents: Vec<AgentTrack>,
    pub lanes: Vec<LanePolyline>,
}

impl RawScenario {
    /// Structural checks shared by loaders and the generator. Observation of
    /// the focal agent is checked later, by [`normalize_to_focal`].
    pub fn validate(&self) -> Result<()> {
        if self.hz != SAMPLE_HZ {
            return Err(Error::InvalidScenario(format!("hz must be {SAMPLE_HZ}, got {}", self.hz)));
        }
        if self.focal_index >= self.agents.len() {
            return Err(Error::InvalidScenario(format!(
                "focal_index {} out of range for {} agents",
                self.focal_index,
                self.agents.len()
            )));
        }
        for (i, a) in self.agents.iter().enumerate() {
            if a.poses.len() != TOTAL_STEPS || a.observed.len() != TOTAL_STEPS {
                return Err(Error::InvalidScenario(format!(
                    "agent {i}: expected {TOTAL_STEPS} poses and flags, got {} / {}",
                    a.poses.len(),
                    a.observed.len()
                )));
            }
            if a.poses.iter().any(|p| !(p.x.is_finite() && p.y.is_finite() && p.theta.is_finite())) {
                return Err(Error::InvalidScenario(format!("agent {i}: non-finite pose")));
            }
        }
        for (i, l) in self.lanes.iter().enumerate() {
            if l.points.len() < 2 {
                return Err(Error::InvalidScenario(format!("lane {i}: fewer than 2 points")));
            }
            if l.points.iter().any(|p| !(p[0].is_finite() && p[1].is_finite())) {
                return Err(Error::InvalidScenario(format!("lane {i}: non-finite point")));
            }
        }
        Ok(())
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    use core::f64::consts::PI;
    let mut t = libm::fmod(theta + PI, 2.0 * PI);
    if t < 0.0 {
        t += 2.0 * PI;
    }
    let t = t - PI;
    if t <= -PI {
        t + 2.0 * PI
    } else {
        t
    }
}

/// Rigid planar transform `p -> R(theta) p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Se2 {
    pub theta: f64,
    pub tx: f64,
    pub ty: f64,
    cos: f64,
    sin: f64,
}

impl Se2 {
    pub fn new(theta: f64, tx: f64, ty: f64) -> Self {
        Self { theta, tx, ty, cos: libm::cos(theta), sin: libm::sin(theta) }
    }

    /// Transform that maps `pose` to the origin with heading 0.
    pub fn to_frame_of(pose: Pose) -> Self {
        let (c, s) = (libm::cos(pose.theta), libm::sin(pose.theta));
        // R(-theta) (p - o)
        Self { theta: -pose.theta, tx: -(c * pose.x + s * pose.y), ty: s * pose.x - c * pose.y, cos: c, sin: -s }
    }

    pub fn apply_point(&self, p: [f64; 2]) -> [f64; 2] {
        [self.cos * p[0] - self.sin * p[1] + self.tx, self.sin * p[0] + self.cos * p[1] + self.ty]
    }

    /// Rotation only.
    pub fn apply_vector(&self, v: [f64; 2]) -> [f64; 2] {
        [self.cos * v[0] - self.sin * v[1], self.sin * v[0] + self.cos * v[1]]
    }

    pub fn apply_pose(&self, p: Pose) -> Pose {
        let [x, y] = self.apply_point([p.x, p.y]);
        Pose { x, y, theta: wrap_angle(p.theta + self.theta) }
    }

    pub fn apply_scenario(&self, raw: &RawScenario) -> RawScenario {
        let mut out = raw.clone();
        for a in &mut out.agents {
            for p in &mut a.poses {
                *p = self.apply_pose(*p);
            }
        }
        for l in &mut out.lanes {
            for p in &mut l.points {
                *p = self.apply_point(*p);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::PI;

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        for k in -5..5 {
            let t = wrap_angle(0.3 + 2.0 * PI * k as f64);
            assert!((t - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_transform_maps_pose_to_origin() {
        let pose = Pose::new(12.0, -3.5, 2.1);
        let t = Se2::to_frame_of(pose);
        let p = t.apply_pose(pose);
        assert!(p.x.abs() < 1e-12 && p.y.abs() < 1e-12 && p.theta.abs() < 1e-12);
        // a point one meter ahead lands on +x
        let ahead = t.apply_point([12.0 + libm::cos(2.1), -3.5 + libm::sin(2.1)]);
        assert!((ahead[0] - 1.0).abs() < 1e-12 && ahead[1].abs() < 1e-12);
    }
}
