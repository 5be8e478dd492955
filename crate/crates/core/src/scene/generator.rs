//! Synthetic four-way intersection scenes.
//!
//! Each approach direction carries `lanes_per_direction` straight lanes and
//! one left and one right turn arc. Agents follow lane centerlines with
//! closed-form speed profiles, so a noise-free track lies exactly on its lane.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::{FRAC_PI_2, PI};

use super::{
    wrap_angle, AgentCategory, AgentTrack, Behavior, LanePolyline, LaneType, Pose, RawScenario, Se2, CURRENT_STEP,
    SAMPLE_HZ, TOTAL_STEPS,
};
use crate::numerics::RngStream;
use crate::{Error, Result};

/// Cities whose scenes form the training distribution.
pub const TRAIN_CITIES: [&str; 3] = ["austin", "miami", "pittsburgh"];
/// Cities used as the shifted evaluation distribution.
pub const SHIFT_CITIES: [&str; 3] = ["dearborn", "palo-alto", "washington-dc"];

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub city_tag: String,
    pub min_agents: usize,
    pub max_agents: usize,
    pub lanes_per_direction: usize,
    pub lane_width: f64,
    /// Extra turning radius beyond the lane geometry, sampled per scene.
    pub corner_radius: (f64, f64),
    /// Length of each straight lane on either side of the intersection center.
    pub road_half_length: f64,
    pub noise_sigma: f64,
    /// Relative weights of straight, turn and stop.
    pub behavior_mix: [f64; 3],
    pub speed_range: (f64, f64),
    pub turn_speed_range: (f64, f64),
    pub brake_range: (f64, f64),
    /// Probability that a non-focal agent is only partially observed.
    pub partial_observation_prob: f64,
    /// Apply a random rigid transform to the whole scene.
    pub world_transform: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            city_tag: String::from("austin"),
            min_agents: 2,
            max_agents: 12,
            lanes_per_direction: 1,
            lane_width: 3.5,
            corner_radius: (6.0, 10.0),
            road_half_length: 60.0,
            noise_sigma: 0.02,
            behavior_mix: [1.0, 1.0, 1.0],
            speed_range: (6.0, 12.0),
            turn_speed_range: (4.0, 7.0),
            brake_range: (2.0, 4.0),
            partial_observation_prob: 0.3,
            world_transform: true,
        }
    }
}

impl GenConfig {
    /// Preset for a named city. Shift cities use narrower lanes, wider
    /// corners and faster traffic than the training cities.
    pub fn for_city(tag: &str) -> Self {
        let base = Self { city_tag: String::from(tag), ..Self::default() };
        match tag {
            "austin" => base,
            "miami" => Self { lane_width: 3.7, corner_radius: (7.0, 11.0), ..base },
            "pittsburgh" => Self { lane_width: 3.3, corner_radius: (5.0, 9.0), speed_range: (5.0, 11.0), ..base },
            "dearborn" | "palo-alto" | "washington-dc" => Self {
                lanes_per_direction: 2,
                lane_width: 3.0,
                corner_radius: (11.0, 15.0),
                speed_range: (10.0, 15.0),
                turn_speed_range: (6.0, 9.0),
                brake_range: (3.0, 5.0),
                ..base
            },
            _ => base,
        }
    }

    pub fn lane_count(&self) -> usize {
        4 * self.lanes_per_direction + 8
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Infeasible(m));
        if self.min_agents < 2 || self.max_agents > 16 || self.min_agents > self.max_agents {
            return bad(format!("agent count range {}..={} must lie within 2..=16", self.min_agents, self.max_agents));
        }
        if self.lanes_per_direction == 0 || !(4..=48).contains(&self.lane_count()) {
            return bad(format!(
                "{} lanes per direction gives {} lanes, need 4..=48",
                self.lanes_per_direction,
                self.lane_count()
            ));
        }
        let ranges = [
            ("corner_radius", self.corner_radius),
            ("speed_range", self.speed_range),
            ("turn_speed_range", self.turn_speed_range),
            ("brake_range", self.brake_range),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                return bad(format!("{name} must be a positive non-empty range, got ({lo}, {hi})"));
            }
        }
        if !(self.lane_width > 0.0 && self.lane_width.is_finite()) {
            return bad(format!("lane_width must be positive, got {}", self.lane_width));
        }
        let box_half = self.lanes_per_direction as f64 * self.lane_width + self.corner_radius.1;
        if !(self.road_half_length > box_half + 1.0 && self.road_half_length.is_finite()) {
            return bad(format!(
                "road_half_length {} does not clear the intersection ({box_half})",
                self.road_half_length
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be non-negative, got {}", self.noise_sigma));
        }
        if self.behavior_mix.iter().any(|w| !(*w >= 0.0 && w.is_finite()))
            || self.behavior_mix.iter().sum::<f64>() <= 0.0
        {
            return bad(format!("behavior_mix must be non-negative with positive sum, got {:?}", self.behavior_mix));
        }
        if !(0.0..=1.0).contains(&self.partial_observation_prob) {
            return bad(format!("partial_observation_prob must be in [0, 1], got {}", self.partial_observation_prob));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Piece {
    Line { start: [f64; 2], dir: [f64; 2], len: f64 },
    Arc { center: [f64; 2], radius: f64, start_angle: f64, sweep: f64 },
}

impl Piece {
    fn len(&self) -> f64 {
        match *self {
            Piece::Line { len, .. } => len,
            Piece::Arc { radius, sweep, .. } => radius * libm::fabs(sweep),
        }
    }

    /// Pose at arc length `u`, which may lie outside `[0, len]` for lines.
    fn pose(&self, u: f64) -> Pose {
        match *self {
            Piece::Line { start, dir, .. } => {
                Pose::new(start[0] + u * dir[0], start[1] + u * dir[1], libm::atan2(dir[1], dir[0]))
            }
            Piece::Arc { center, radius, start_angle, sweep } => {
                let a = start_angle + sweep.signum() * u / radius;
                Pose::new(
                    center[0] + radius * libm::cos(a),
                    center[1] + radius * libm::sin(a),
                    wrap_angle(a + sweep.signum() * FRAC_PI_2),
                )
            }
        }
    }

    fn rotated(self, r: &Se2) -> Self {
        match self {
            Piece::Line { start, dir, len } => {
                Piece::Line { start: r.apply_point(start), dir: r.apply_vector(dir), len }
            }
            Piece::Arc { center, radius, start_angle, sweep } => {
                Piece::Arc { center: r.apply_point(center), radius, start_angle: start_angle + r.theta, sweep }
            }
        }
    }
}

/// Concatenated pieces; the first and last lines extend without bound.
#[derive(Debug, Clone)]
struct Route {
    pieces: Vec<Piece>,
}

impl Route {
    fn pose(&self, u: f64) -> Pose {
        if u < 0.0 {
            return self.pieces[0].pose(u);
        }
        let mut rest = u;
        let last = self.pieces.len() - 1;
        for (i, p) in self.pieces.iter().enumerate() {
            if rest <= p.len() || i == last {
                return p.pose(rest);
            }
            rest -= p.len();
        }
        unreachable!()
    }

    /// Arc length where the second piece begins.
    fn entry(&self) -> f64 {
        self.pieces[0].len()
    }
}

struct Layout {
    lpd: usize,
    width: f64,
    half: f64,
    box_half: f64,
}

impl Layout {
    fn offset(&self, lane: usize) -> f64 {
        (lane as f64 + 0.5) * self.width
    }

    fn frame(direction: usize) -> Se2 {
        Se2::new(direction as f64 * FRAC_PI_2, 0.0, 0.0)
    }

    fn through(&self, direction: usize, lane: usize) -> Route {
        let o = self.offset(lane);
        let f = Self::frame(direction);
        let approach = Piece::Line { start: [-self.half, -o], dir: [1.0, 0.0], len: self.half - self.box_half };
        let rest = Piece::Line { start: [-self.box_half, -o], dir: [1.0, 0.0], len: self.half + self.box_half };
        Route { pieces: vec![approach.rotated(&f), rest.rotated(&f)] }
    }

    fn turn(&self, direction: usize, left: bool) -> Route {
        let b = self.box_half;
        let f = Self::frame(direction);
        let (lane, arc, exit) = if left {
            let o = self.offset(0);
            (
                o,
                Piece::Arc { center: [-b, b], radius: b + o, start_angle: -FRAC_PI_2, sweep: FRAC_PI_2 },
                Piece::Line { start: [o, b], dir: [0.0, 1.0], len: self.half - b },
            )
        } else {
            let o = self.offset(self.lpd - 1);
            (
                o,
                Piece::Arc { center: [-b, -b], radius: b - o, start_angle: FRAC_PI_2, sweep: -FRAC_PI_2 },
                Piece::Line { start: [-o, -b], dir: [0.0, -1.0], len: self.half - b },
            )
        };
        let approach = Piece::Line { start: [-self.half, -lane], dir: [1.0, 0.0], len: self.half - b };
        Route { pieces: vec![approach.rotated(&f), arc.rotated(&f), exit.rotated(&f)] }
    }

    fn lanes(&self) -> Vec<LanePolyline> {
        let mut out = Vec::new();
        for d in 0..4 {
            for lane in 0..self.lpd {
                let o = self.offset(lane);
                let f = Self::frame(d);
                out.push(LanePolyline {
                    lane_type: LaneType::Straight,
                    points: vec![f.apply_point([-self.half, -o]), f.apply_point([self.half, -o])],
                });
            }
            for left in [true, false] {
                let Piece::Arc { radius, sweep, .. } = self.turn(d, left).pieces[1] else { unreachable!() };
                let route = self.turn(d, left);
                let n = (libm::ceil(radius * libm::fabs(sweep)) as usize).max(8);
                let start = route.entry();
                let len = radius * libm::fabs(sweep);
                let points = (0..=n)
                    .map(|k| {
                        let p = route.pose(start + len * k as f64 / n as f64);
                        [p.x, p.y]
                    })
                    .collect();
                out.push(LanePolyline { lane_type: LaneType::Intersection, points });
            }
        }
        out
    }
}

/// Arc-length position as a function of time relative to the current step.
#[derive(Debug, Clone, Copy)]
enum Profile {
    Constant {
        u0: f64,
        v: f64,
    },
    /// Cruise at `v`, brake at `a` from time `tb` and hold at `stop`.
    Brake {
        stop: f64,
        v: f64,
        a: f64,
        tb: f64,
    },
}

impl Profile {
    fn at(&self, t: f64) -> f64 {
        match *self {
            Profile::Constant { u0, v } => u0 + v * t,
            Profile::Brake { stop, v, a, tb } => {
                let ub = stop - v * v / (2.0 * a);
                if t < tb {
                    ub + v * (t - tb)
                } else if t < tb + v / a {
                    let s = t - tb;
                    ub + v * s - 0.5 * a * s * s
                } else {
                    stop
                }
            }
        }
    }
}

fn sample_behavior(mix: &[f64; 3], rng: &mut RngStream) -> Behavior {
    let total: f64 = mix.iter().sum();
    let mut x = rng.uniform() * total;
    for (b, w) in Behavior::ALL.into_iter().zip(mix) {
        if x < *w {
            return b;
        }
        x -= w;
    }
    Behavior::ALL.into_iter().zip(mix).rfind(|(_, w)| **w > 0.0).unwrap().0
}

fn range(rng: &mut RngStream, r: (f64, f64)) -> f64 {
    rng.uniform_range(r.0, r.1)
}

fn plan_agent(
    layout: &Layout,
    cfg: &GenConfig,
    behavior: Behavior,
    category: AgentCategory,
    focal: bool,
    rng: &mut RngStream,
) -> (Route, Profile) {
    let direction = rng.int_range(0, 3);
    let speed = match category {
        AgentCategory::Vehicle => range(rng, cfg.speed_range),
        AgentCategory::Pedestrian => rng.uniform_range(0.8, 1.8),
        AgentCategory::Cyclist => rng.uniform_range(3.0, 6.0),
    };
    match behavior {
        Behavior::Straight => {
            let route = layout.through(direction, rng.int_range(0, layout.lpd - 1));
            let span = 2.0 * layout.half;
            let u0 = if focal { rng.uniform_range(0.2 * span, 0.6 * span) } else { rng.uniform_range(0.0, span) };
            (route, Profile::Constant { u0, v: speed })
        }
        Behavior::Turn => {
            let route = layout.turn(direction, rng.bernoulli(0.5));
            let v = if category == AgentCategory::Vehicle { range(rng, cfg.turn_speed_range) } else { speed };
            let tau = if focal { rng.uniform_range(0.0, 2.0) } else { rng.uniform_range(-2.0, 4.0) };
            (route.clone(), Profile::Constant { u0: route.entry() - v * tau, v })
        }
        Behavior::Stop => {
            let route = layout.through(direction, rng.int_range(0, layout.lpd - 1));
            let a = range(rng, cfg.brake_range);
            let stop = route.entry() - rng.uniform_range(1.0, 5.0);
            let tb = if focal { rng.uniform_range(-1.0, 3.0) } else { rng.uniform_range(-3.0, 3.0) };
            (route, Profile::Brake { stop, v: speed, a, tb })
        }
    }
}

/// Deterministic given `config` and the state of `rng`.
pub fn generate_synthetic_scenario(config: &GenConfig, rng: &mut RngStream) -> Result<RawScenario> {
    config.validate()?;
    let id = rng.next_u64();
    let corner = range(rng, config.corner_radius);
    let layout = Layout {
        lpd: config.lanes_per_direction,
        width: config.lane_width,
        half: config.road_half_length,
        box_half: config.lanes_per_direction as f64 * config.lane_width + corner,
    };
    let n_agents = rng.int_range(config.min_agents, config.max_agents);
    let dt = 1.0 / SAMPLE_HZ as f64;

    let focal_behavior = sample_behavior(&config.behavior_mix, rng);
    let mut agents = Vec::with_capacity(n_agents);
    for k in 0..n_agents {
        let focal = k == 0;
        let (behavior, category) = if focal {
            (focal_behavior, AgentCategory::Vehicle)
        } else {
            let c = match rng.uniform() {
                x if x < 0.8 => AgentCategory::Vehicle,
                x if x < 0.9 => AgentCategory::Cyclist,
                _ => AgentCategory::Pedestrian,
            };
            (sample_behavior(&config.behavior_mix, rng), c)
        };
        let (route, profile) = plan_agent(&layout, config, behavior, category, focal, rng);
        let poses: Vec<Pose> = (0..TOTAL_STEPS)
            .map(|t| {
                let time = (t as f64 - CURRENT_STEP as f64) * dt;
                let mut p = route.pose(profile.at(time));
                if config.noise_sigma > 0.0 {
                    p.x += config.noise_sigma * rng.normal();
                    p.y += config.noise_sigma * rng.normal();
                }
                p
            })
            .collect();
        let observed = if !focal && rng.bernoulli(config.partial_observation_prob) {
            let start = rng.int_range(0, 45);
            let end = rng.int_range((start + 5).max(40), TOTAL_STEPS);
            (0..TOTAL_STEPS).map(|t| t >= start && t < end).collect()
        } else {
            vec![true; TOTAL_STEPS]
        };
        agents.push(AgentTrack { category, poses, observed });
    }

    let mut scenario = RawScenario {
        scenario_id: format!("{}-{id:016x}", config.city_tag),
        hz: SAMPLE_HZ,
        focal_index: 0,
        city_tag: config.city_tag.clone(),
        focal_behavior: Some(focal_behavior),
        agents,
        lanes: layout.lanes(),
    };
    if config.world_transform {
        let g = Se2::new(
            rng.uniform_range(-PI, PI),
            rng.uniform_range(-1000.0, 1000.0),
            rng.uniform_range(-1000.0, 1000.0),
        );
        scenario = g.apply_scenario(&scenario);
    }
    scenario.validate()?;
    Ok(scenario)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(behavior: usize) -> GenConfig {
        let mut mix = [0.0; 3];
        mix[behavior] = 1.0;
        GenConfig { noise_sigma: 0.0, world_transform: false, behavior_mix: mix, ..GenConfig::default() }
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = GenConfig::default();
        let a = generate_synthetic_scenario(&cfg, &mut RngStream::new(5)).unwrap();
        let b = generate_synthetic_scenario(&cfg, &mut RngStream::new(5)).unwrap();
        let c = generate_synthetic_scenario(&cfg, &mut RngStream::new(6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn focal_is_fully_observed_vehicle() {
        for seed in 0..20 {
            let s = generate_synthetic_scenario(&GenConfig::default(), &mut RngStream::new(seed)).unwrap();
            assert_eq!(s.focal_index, 0);
            assert!(s.agents[0].observed.iter().all(|&o| o));
            assert_eq!(s.agents[0].category, AgentCategory::Vehicle);
            assert!((2..=12).contains(&s.agents.len()));
            assert_eq!(s.lanes.len(), GenConfig::default().lane_count());
        }
    }

    #[test]
    fn noise_free_straight_track_lies_on_its_lane() {
        let cfg = quiet(0);
        for seed in 0..10 {
            let s = generate_synthetic_scenario(&cfg, &mut RngStream::new(seed)).unwrap();
            let focal = &s.agents[0];
            // a straight lane is the line through its two endpoints
            let on_some_lane = s.lanes.iter().filter(|l| l.lane_type == LaneType::Straight).any(|l| {
                let (p, q) = (l.points[0], l.points[1]);
                let (dx, dy) = (q[0] - p[0], q[1] - p[1]);
                let n = libm::hypot(dx, dy);
                focal.poses.iter().all(|f| libm::fabs(((f.x - p[0]) * dy - (f.y - p[1]) * dx) / n) < 1e-9)
            });
            assert!(on_some_lane, "seed {seed}");
        }
    }

    #[test]
    fn noise_free_turn_track_is_smooth_and_changes_heading() {
        let cfg = quiet(1);
        for seed in 0..10 {
            let s = generate_synthetic_scenario(&cfg, &mut RngStream::new(seed)).unwrap();
            let p = &s.agents[0].poses;
            let step = |t: usize| libm::hypot(p[t + 1].x - p[t].x, p[t + 1].y - p[t].y);
            for t in 0..TOTAL_STEPS - 1 {
                // chords on the arc are slightly shorter than the arc itself
                assert!((step(t) - step(0)).abs() < 1e-3, "constant speed");
            }
            let turned = libm::fabs(wrap_angle(p[TOTAL_STEPS - 1].theta - p[CURRENT_STEP].theta));
            assert!(turned > 0.25 * PI && turned < FRAC_PI_2 + 1e-9, "seed {seed}: turned {turned}");
        }
    }

    #[test]
    fn stopping_track_ends_at_rest() {
        let cfg = quiet(2);
        for seed in 0..10 {
            let s = generate_synthetic_scenario(&cfg, &mut RngStream::new(seed)).unwrap();
            let p = &s.agents[0].poses;
            let tail =
                libm::hypot(p[TOTAL_STEPS - 1].x - p[TOTAL_STEPS - 2].x, p[TOTAL_STEPS - 1].y - p[TOTAL_STEPS - 2].y);
            assert_eq!(tail, 0.0, "seed {seed}");
            for t in 1..TOTAL_STEPS - 1 {
                let a = libm::hypot(p[t].x - p[t - 1].x, p[t].y - p[t - 1].y);
                let b = libm::hypot(p[t + 1].x - p[t].x, p[t + 1].y - p[t].y);
                assert!(b <= a + 1e-9, "speed never increases");
            }
        }
    }

    #[test]
    fn infeasible_configs_are_rejected() {
        let cases = [
            GenConfig { min_agents: 1, ..GenConfig::default() },
            GenConfig { max_agents: 17, ..GenConfig::default() },
            GenConfig { lanes_per_direction: 11, ..GenConfig::default() },
            GenConfig { road_half_length: 5.0, ..GenConfig::default() },
            GenConfig { behavior_mix: [0.0; 3], ..GenConfig::default() },
            GenConfig { noise_sigma: -1.0, ..GenConfig::default() },
        ];
        for c in cases {
            assert!(matches!(generate_synthetic_scenario(&c, &mut RngStream::new(0)), Err(Error::Infeasible(_))));
        }
    }
}
