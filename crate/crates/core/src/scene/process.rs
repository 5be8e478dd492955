//! Focal-frame normalization and per-agent feature rows.

use alloc::string::String;
use alloc::vec::Vec;

use super::lanes::segment_lanes;
use super::{
    AgentCategory, Behavior, LaneType, Pose, RawScenario, Se2, CURRENT_STEP, FUTURE_CHANNELS, FUTURE_STEPS,
    HISTORY_CHANNELS, HISTORY_STEPS, LANE_CHANNELS, LANE_POINTS, ROI_RADIUS, SAMPLE_HZ,
};
use crate::numerics::Tensor;
use crate::{Error, Result};

/// Model-ready scene in the focal agent's frame. Agent 0 is the focal agent.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessedScene {
    pub scenario_id: String,
    /// `[N, 50, 4]`: (dx, dy, dv, flag).
    pub agent_history: Tensor,
    /// `[N, 60, 3]`: (x, y, flag) relative to each agent's current position.
    pub agent_future: Tensor,
    /// `[M, 20, 3]`: (x, y, flag) relative to the segment centroid.
    pub lanes: Tensor,
    /// `[N, 3]`: (x, y, theta) at the latest observed history step.
    pub agent_anchor: Tensor,
    /// `[M, 3]`: (centroid x, centroid y, chord heading).
    pub lane_anchor: Tensor,
    pub agent_category: Vec<AgentCategory>,
    pub lane_type: Vec<LaneType>,
    pub agent_hist_valid: Vec<bool>,
    pub agent_fut_valid: Vec<bool>,
    /// History step of each agent's anchor pose.
    pub agent_last_observed: Vec<usize>,
    pub lane_valid: Vec<bool>,
    /// Index of each kept agent in the raw scenario.
    pub agent_source: Vec<usize>,
    /// (polyline, chunk) of each kept lane segment.
    pub lane_source: Vec<(usize, usize)>,
    pub focal_behavior: Option<Behavior>,
    pub city_tag: String,
}

impl ProcessedScene {
    pub fn num_agents(&self) -> usize {
        self.agent_category.len()
    }

    pub fn num_lanes(&self) -> usize {
        self.lane_type.len()
    }

    /// Future row `[60, 3]` of agent `i`.
    pub fn future_of(&self, i: usize) -> &[f64] {
        let n = FUTURE_STEPS * FUTURE_CHANNELS;
        &self.agent_future.data()[i * n..(i + 1) * n]
    }

    pub fn history_of(&self, i: usize) -> &[f64] {
        let n = HISTORY_STEPS * HISTORY_CHANNELS;
        &self.agent_history.data()[i * n..(i + 1) * n]
    }

    pub fn lane_of(&self, j: usize) -> &[f64] {
        let n = LANE_POINTS * LANE_CHANNELS;
        &self.lanes.data()[j * n..(j + 1) * n]
    }
}

/// History row `[50 * 4]` from focal-frame poses and observation flags.
pub fn build_history_features(poses: &[Pose], observed: &[bool]) -> Vec<f64> {
    let hz = SAMPLE_HZ as f64;
    let mut out = alloc::vec![0.0; HISTORY_STEPS * HISTORY_CHANNELS];
    let mut prev_speed: Option<f64> = None;
    for t in 1..HISTORY_STEPS {
        if !(observed[t] && observed[t - 1]) {
            prev_speed = None;
            continue;
        }
        let dx = poses[t].x - poses[t - 1].x;
        let dy = poses[t].y - poses[t - 1].y;
        let speed = libm::hypot(dx, dy) * hz;
        // Without a speed at t-1 the difference is taken as zero.
        let dv = prev_speed.map_or(0.0, |p| speed - p);
        out[t * HISTORY_CHANNELS..(t + 1) * HISTORY_CHANNELS].copy_from_slice(&[dx, dy, dv, 1.0]);
        prev_speed = Some(speed);
    }
    out
}

/// Future row `[60 * 3]`, translated so `current` is the origin.
pub fn build_future_features(poses: &[Pose], observed: &[bool], current: Pose) -> Vec<f64> {
    let mut out = alloc::vec![0.0; FUTURE_STEPS * FUTURE_CHANNELS];
    for t in 0..FUTURE_STEPS {
        if observed[t] {
            out[t * FUTURE_CHANNELS..(t + 1) * FUTURE_CHANNELS].copy_from_slice(&[
                poses[t].x - current.x,
                poses[t].y - current.y,
                1.0,
            ]);
        }
    }
    out
}

pub fn normalize_to_focal(raw: &RawScenario) -> Result<ProcessedScene> {
    raw.validate()?;
    let focal = &raw.agents[raw.focal_index];
    if !focal.observed[CURRENT_STEP] {
        return Err(Error::FocalUnobserved);
    }
    let frame = Se2::to_frame_of(focal.poses[CURRENT_STEP]);

    let mut order = Vec::with_capacity(raw.agents.len());
    order.push(raw.focal_index);
    order.extend((0..raw.agents.len()).filter(|&i| i != raw.focal_index));

    let mut hist = Vec::new();
    let mut fut = Vec::new();
    let mut anchors = Vec::new();
    let mut category = Vec::new();
    let mut hist_valid = Vec::new();
    let mut fut_valid = Vec::new();
    let mut agent_source = Vec::new();
    let mut last_observed = Vec::new();
    for &i in &order {
        let a = &raw.agents[i];
        let Some(last) = (0..HISTORY_STEPS).rev().find(|&t| a.observed[t]) else {
            continue;
        };
        let poses: Vec<Pose> = a.poses.iter().map(|&p| frame.apply_pose(p)).collect();
        let current = if i == raw.focal_index { Pose::new(0.0, 0.0, 0.0) } else { poses[last] };
        if libm::hypot(current.x, current.y) > ROI_RADIUS {
            continue;
        }
        let h = build_history_features(&poses[..HISTORY_STEPS], &a.observed[..HISTORY_STEPS]);
        let f = build_future_features(&poses[HISTORY_STEPS..], &a.observed[HISTORY_STEPS..], current);
        hist_valid.push(h.chunks(HISTORY_CHANNELS).any(|r| r[3] == 1.0));
        fut_valid.push(a.observed[HISTORY_STEPS..].iter().any(|&o| o));
        hist.extend(h);
        fut.extend(f);
        anchors.extend([current.x, current.y, current.theta]);
        category.push(a.category);
        agent_source.push(i);
        last_observed.push(last);
    }
    let n = category.len();

    let lanes_focal: Vec<_> = raw
        .lanes
        .iter()
        .map(|l| super::LanePolyline {
            lane_type: l.lane_type,
            points: l.points.iter().map(|&p| frame.apply_point(p)).collect(),
        })
        .collect();
    let seg = segment_lanes(&lanes_focal);
    let mut lanes = Vec::new();
    let mut lane_anchor = Vec::new();
    let mut lane_type = Vec::new();
    let mut lane_source = Vec::new();
    for s in seg.segments {
        if libm::hypot(s.centroid[0], s.centroid[1]) > ROI_RADIUS {
            continue;
        }
        for p in &s.points {
            lanes.extend([p[0], p[1], 1.0]);
        }
        lane_anchor.extend([s.centroid[0], s.centroid[1], s.heading]);
        lane_type.push(s.lane_type);
        lane_source.push((s.source, s.chunk));
    }
    let m = lane_type.len();

    Ok(ProcessedScene {
        scenario_id: raw.scenario_id.clone(),
        agent_history: Tensor::new(&[n, HISTORY_STEPS, HISTORY_CHANNELS], hist)?,
        agent_future: Tensor::new(&[n, FUTURE_STEPS, FUTURE_CHANNELS], fut)?,
        lanes: Tensor::new(&[m, LANE_POINTS, LANE_CHANNELS], lanes)?,
        agent_anchor: Tensor::new(&[n, 3], anchors)?,
        lane_anchor: Tensor::new(&[m, 3], lane_anchor)?,
        agent_category: category,
        lane_type,
        agent_hist_valid: hist_valid,
        agent_fut_valid: fut_valid,
        agent_last_observed: last_observed,
        lane_valid: alloc::vec![true; m],
        agent_source,
        lane_source,
        focal_behavior: raw.focal_behavior,
        city_tag: raw.city_tag.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{AgentTrack, LanePolyline, TOTAL_STEPS};
    use alloc::string::ToString;
    use alloc::vec;

    fn track_along(start: [f64; 2], step: [f64; 2], heading: f64) -> AgentTrack {
        AgentTrack {
            category: AgentCategory::Vehicle,
            poses: (0..TOTAL_STEPS)
                .map(|t| {
                    let k = t as f64 - CURRENT_STEP as f64;
                    Pose::new(start[0] + k * step[0], start[1] + k * step[1], heading)
                })
                .collect(),
            observed: vec![true; TOTAL_STEPS],
        }
    }

    fn scenario(agents: Vec<AgentTrack>) -> RawScenario {
        RawScenario {
            scenario_id: "t".to_string(),
            hz: SAMPLE_HZ,
            focal_index: 0,
            city_tag: "test".to_string(),
            focal_behavior: None,
            agents,
            lanes: vec![LanePolyline { lane_type: LaneType::Straight, points: vec![[0.0, 0.0], [30.0, 0.0]] }],
        }
    }

    #[test]
    fn static_agent_has_zero_deltas_and_flags_after_first_step() {
        let poses = vec![Pose::new(3.0, 4.0, 0.5); HISTORY_STEPS];
        let h = build_history_features(&poses, &[true; HISTORY_STEPS]);
        assert_eq!(&h[..4], &[0.0; 4]);
        for r in h.chunks(4).skip(1) {
            assert_eq!(r, &[0.0, 0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn uniform_motion_has_unit_dx_and_zero_dv() {
        let poses: Vec<_> = (0..HISTORY_STEPS).map(|t| Pose::new(t as f64, 0.0, 0.0)).collect();
        let h = build_history_features(&poses, &[true; HISTORY_STEPS]);
        for r in h.chunks(4).skip(1) {
            assert_eq!(r, &[1.0, 0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn late_observation_flags_first_46_rows_zero() {
        let poses: Vec<_> = (0..HISTORY_STEPS).map(|t| Pose::new(t as f64 * 0.5, 0.0, 0.0)).collect();
        let mut obs = [false; HISTORY_STEPS];
        obs[45..].iter_mut().for_each(|o| *o = true);
        let h = build_history_features(&poses, &obs);
        let flags: Vec<f64> = h.chunks(4).map(|r| r[3]).collect();
        assert!(flags[..46].iter().all(|&f| f == 0.0));
        assert!(flags[46..].iter().all(|&f| f == 1.0));
        assert!(h[..46 * 4].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn speed_change_is_reported() {
        // 1 m/step then 2 m/step: speed jumps from 10 to 20 m/s
        let xs = [0.0, 1.0, 2.0, 4.0];
        let mut poses = vec![Pose::new(4.0, 0.0, 0.0); HISTORY_STEPS];
        for (p, &x) in poses.iter_mut().zip(&xs) {
            p.x = x;
        }
        let h = build_history_features(&poses, &[true; HISTORY_STEPS]);
        assert_eq!(&h[3 * 4..4 * 4], &[2.0, 0.0, 10.0, 1.0]);
        assert_eq!(&h[4 * 4..5 * 4], &[0.0, 0.0, -20.0, 1.0]);
    }

    #[test]
    fn future_features() {
        let cur = Pose::new(5.0, 2.0, 0.0);
        let stopped = vec![cur; FUTURE_STEPS];
        let f = build_future_features(&stopped, &[true; FUTURE_STEPS], cur);
        assert!(f.chunks(3).all(|r| r == [0.0, 0.0, 1.0]));

        let moving: Vec<_> = (1..=FUTURE_STEPS).map(|t| Pose::new(5.0 + t as f64, 2.0, 0.0)).collect();
        let mut obs = [true; FUTURE_STEPS];
        obs[59] = false;
        let f = build_future_features(&moving, &obs, cur);
        for (t, r) in f.chunks(3).enumerate().take(59) {
            assert_eq!(r, &[(t + 1) as f64, 0.0, 1.0]);
        }
        assert_eq!(&f[59 * 3..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn focal_anchor_is_origin_and_first() {
        let raw = RawScenario {
            focal_index: 1,
            ..scenario(vec![track_along([10.0, 0.0], [0.0, 0.5], 1.0), track_along([3.0, 4.0], [1.0, 1.0], 0.7)])
        };
        let p = normalize_to_focal(&raw).unwrap();
        assert_eq!(p.agent_source, vec![1, 0]);
        assert_eq!(&p.agent_anchor.data()[..3], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn roi_threshold() {
        let raw = scenario(vec![
            track_along([0.0, 0.0], [1.0, 0.0], 0.0),
            track_along([0.0, 200.0], [0.0, 0.0], 0.0),
            track_along([0.0, 149.0], [0.0, 0.0], 0.0),
        ]);
        let p = normalize_to_focal(&raw).unwrap();
        assert_eq!(p.agent_source, vec![0, 2]);
    }

    #[test]
    fn unobserved_focal_is_rejected() {
        let mut raw = scenario(vec![track_along([0.0, 0.0], [1.0, 0.0], 0.0)]);
        raw.agents[0].observed[CURRENT_STEP] = false;
        assert_eq!(normalize_to_focal(&raw), Err(Error::FocalUnobserved));
    }

    #[test]
    fn agent_without_history_is_dropped() {
        let mut other = track_along([5.0, 0.0], [1.0, 0.0], 0.0);
        other.observed[..HISTORY_STEPS].iter_mut().for_each(|o| *o = false);
        let raw = scenario(vec![track_along([0.0, 0.0], [1.0, 0.0], 0.0), other]);
        assert_eq!(normalize_to_focal(&raw).unwrap().num_agents(), 1);
    }

    #[test]
    fn lanes_are_in_focal_frame() {
        // focal at (10, 0) heading +y: the lane along +x appears along -y
        let raw = scenario(vec![track_along([10.0, 0.0], [0.0, 1.0], core::f64::consts::FRAC_PI_2)]);
        let p = normalize_to_focal(&raw).unwrap();
        assert_eq!(p.num_lanes(), 2);
        let a = p.lane_anchor.row(0);
        assert!((a[0] - 0.0).abs() < 1e-12 && (a[1] - 0.0).abs() < 1e-12);
        assert!((a[2] + core::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }
}
