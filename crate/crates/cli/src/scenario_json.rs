//! Scenario files.
//!
//! ```json
//! {"scenario_id": "austin-00000000000000a1", "hz": 10, "focal_index": 0,
//!  "city_tag": "austin", "focal_behavior": "turn",
//!  "agents": [{"category": "vehicle", "poses": [[x, y, theta], ...110], "observed": [true, ...110]}],
//!  "lanes": [{"lane_type": "vehicle", "points": [[x, y], ...]}]}
//! ```
//!
//! `focal_behavior` is optional. Floats are written in shortest round-trip
//! form, so load followed by save reproduces the file byte for byte.

use std::path::Path;

use motion_mae_core::scene::{
    AgentCategory, AgentTrack, Behavior, LanePolyline, LaneType, Pose, RawScenario, TOTAL_STEPS,
};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioDoc {
    scenario_id: String,
    hz: u32,
    focal_index: usize,
    city_tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    focal_behavior: Option<String>,
    agents: Vec<AgentDoc>,
    lanes: Vec<LaneDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentDoc {
    category: String,
    poses: Vec<[f64; 3]>,
    observed: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LaneDoc {
    lane_type: String,
    points: Vec<[f64; 2]>,
}

fn doc_err(pointer: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Document { pointer: pointer.into(), message: message.into() }
}

fn pointer_of(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut p = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => p.push_str(&format!("/{index}")),
            Segment::Map { key } => p.push_str(&format!("/{}", key.replace('~', "~0").replace('/', "~1"))),
            Segment::Enum { variant } => p.push_str(&format!("/{variant}")),
            Segment::Unknown => p.push_str("/?"),
        }
    }
    p
}

/// Parses a JSON document with errors located by JSON pointer.
pub(crate) fn parse_located<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| doc_err(pointer_of(e.path()), e.inner().to_string()))
}

fn to_doc(raw: &RawScenario) -> ScenarioDoc {
    ScenarioDoc {
        scenario_id: raw.scenario_id.clone(),
        hz: raw.hz,
        focal_index: raw.focal_index,
        city_tag: raw.city_tag.clone(),
        focal_behavior: raw.focal_behavior.map(|b| b.name().to_string()),
        agents: raw
            .agents
            .iter()
            .map(|a| AgentDoc {
                category: a.category.name().to_string(),
                poses: a.poses.iter().map(|p| [p.x, p.y, p.theta]).collect(),
                observed: a.observed.clone(),
            })
            .collect(),
        lanes: raw
            .lanes
            .iter()
            .map(|l| LaneDoc { lane_type: l.lane_type.name().to_string(), points: l.points.clone() })
            .collect(),
    }
}

fn from_doc(doc: ScenarioDoc) -> Result<RawScenario> {
    let focal_behavior = match &doc.focal_behavior {
        None => None,
        Some(b) => {
            Some(Behavior::from_name(b).ok_or_else(|| doc_err("/focal_behavior", format!("unknown behavior `{b}`")))?)
        }
    };
    let mut agents = Vec::with_capacity(doc.agents.len());
    for (i, a) in doc.agents.into_iter().enumerate() {
        let category = AgentCategory::from_name(&a.category)
            .ok_or_else(|| doc_err(format!("/agents/{i}/category"), format!("unknown category `{}`", a.category)))?;
        for (field, len) in [("poses", a.poses.len()), ("observed", a.observed.len())] {
            if len != TOTAL_STEPS {
                return Err(doc_err(
                    format!("/agents/{i}/{field}"),
                    format!("expected {TOTAL_STEPS} entries, got {len}"),
                ));
            }
        }
        agents.push(AgentTrack {
            category,
            poses: a.poses.iter().map(|p| Pose::new(p[0], p[1], p[2])).collect(),
            observed: a.observed,
        });
    }
    let mut lanes = Vec::with_capacity(doc.lanes.len());
    for (i, l) in doc.lanes.into_iter().enumerate() {
        let lane_type = LaneType::from_name(&l.lane_type)
            .ok_or_else(|| doc_err(format!("/lanes/{i}/lane_type"), format!("unknown lane type `{}`", l.lane_type)))?;
        if l.points.len() < 2 {
            return Err(doc_err(format!("/lanes/{i}/points"), "a lane needs at least 2 points"));
        }
        lanes.push(LanePolyline { lane_type, points: l.points });
    }
    let raw = RawScenario {
        scenario_id: doc.scenario_id,
        hz: doc.hz,
        focal_index: doc.focal_index,
        city_tag: doc.city_tag,
        focal_behavior,
        agents,
        lanes,
    };
    raw.validate().map_err(|e| doc_err("", e.to_string()))?;
    Ok(raw)
}

/// Compact JSON followed by a newline. Non-finite coordinates are rejected,
/// since JSON cannot carry them.
pub fn to_json(raw: &RawScenario) -> Result<String> {
    raw.validate().map_err(|e| doc_err("", e.to_string()))?;
    let mut s = serde_json::to_string(&to_doc(raw)).expect("scenario serialization is infallible");
    s.push('\n');
    Ok(s)
}

pub fn from_json(text: &str) -> Result<RawScenario> {
    from_doc(parse_located(text)?)
}

pub fn save(raw: &RawScenario, path: &Path) -> Result<()> {
    std::fs::write(path, to_json(raw)?).map_err(io_err(path))
}

pub fn load(path: &Path) -> Result<RawScenario> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    from_json(&text).map_err(|e| match e {
        Error::Document { pointer, message } => {
            Error::Document { pointer, message: format!("{message} (in {})", path.display()) }
        }
        other => other,
    })
}
