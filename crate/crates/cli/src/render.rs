//! Display documents and SVG rendering.
//!
//! A [`SceneView`] holds absolute positions in the focal frame: observed
//! tracks, lane segments, mask flags and optional reconstructions and
//! forecasts. The reconstruct command writes it as JSON, and the renderer
//! accepts it or a plain scenario file.

use std::fmt::Write as _;

use motion_mae_core::masking::MaskedScene;
use motion_mae_core::model::Forecast;
use motion_mae_core::numerics::Tensor;
use motion_mae_core::scene::{ProcessedScene, RawScenario, Se2, CURRENT_STEP, FUTURE_STEPS, HISTORY_STEPS};
use serde::{Deserialize, Serialize};

use crate::error::Result;

pub type Track = Vec<[f64; 2]>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentView {
    pub category: String,
    pub focal: bool,
    /// Observed history positions up to the anchor step.
    pub history: Track,
    pub future: Track,
    pub history_masked: bool,
    pub future_masked: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reconstructed_history: Option<Track>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reconstructed_future: Option<Track>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub predictions: Vec<Track>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaneView {
    pub points: Track,
    pub masked: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reconstructed: Option<Track>,
}

/// Masking ratios and seed a view was produced with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskInfo {
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneView {
    pub scenario_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masking: Option<MaskInfo>,
    pub agents: Vec<AgentView>,
    pub lanes: Vec<LaneView>,
}

fn anchor(scene: &ProcessedScene, i: usize) -> [f64; 2] {
    let r = scene.agent_anchor.row(i);
    [r[0], r[1]]
}

fn offset_track(origin: [f64; 2], rel: &[f64]) -> Track {
    rel.chunks(2).map(|p| [origin[0] + p[0], origin[1] + p[1]]).collect()
}

impl SceneView {
    /// Observed tracks and lane segments, nothing masked.
    pub fn new(raw: &RawScenario, scene: &ProcessedScene) -> Self {
        let frame = Se2::to_frame_of(raw.agents[raw.focal_index].poses[CURRENT_STEP]);
        let agents = scene
            .agent_source
            .iter()
            .enumerate()
            .map(|(i, &src)| {
                let a = &raw.agents[src];
                let pts = |range: std::ops::Range<usize>| -> Track {
                    range.filter(|&t| a.observed[t]).map(|t| frame.apply_point([a.poses[t].x, a.poses[t].y])).collect()
                };
                AgentView {
                    category: scene.agent_category[i].name().to_string(),
                    focal: i == 0,
                    history: pts(0..scene.agent_last_observed[i] + 1),
                    future: pts(HISTORY_STEPS..HISTORY_STEPS + FUTURE_STEPS),
                    history_masked: false,
                    future_masked: false,
                    reconstructed_history: None,
                    reconstructed_future: None,
                    predictions: Vec::new(),
                }
            })
            .collect();
        let lanes = (0..scene.num_lanes())
            .map(|j| {
                let c = scene.lane_anchor.row(j);
                let rel: Vec<f64> = scene.lane_of(j).chunks(3).flat_map(|p| [p[0], p[1]]).collect();
                LaneView { points: offset_track([c[0], c[1]], &rel), masked: false, reconstructed: None }
            })
            .collect();
        Self { scenario_id: scene.scenario_id.clone(), masking: None, agents, lanes }
    }

    /// Marks masked elements and attaches reconstructions `[k, steps, 2]`
    /// in mask order.
    pub fn with_reconstruction(
        mut self,
        scene: &ProcessedScene,
        masked: &MaskedScene,
        recon: &[Tensor; 3],
        info: MaskInfo,
    ) -> Self {
        let width = |t: &Tensor| t.numel() / t.shape()[0].max(1);
        // masked histories belong to agents whose future is visible
        for (k, &i) in masked.visible_future.iter().enumerate() {
            let w = width(&recon[0]);
            let deltas = &recon[0].data()[k * w..(k + 1) * w];
            let last = scene.agent_last_observed[i];
            let mut p = anchor(scene, i);
            let mut track = vec![p];
            for t in (1..=last).rev() {
                p = [p[0] - deltas[2 * t], p[1] - deltas[2 * t + 1]];
                track.push(p);
            }
            track.reverse();
            let a = &mut self.agents[i];
            a.history_masked = true;
            a.reconstructed_history = Some(track);
        }
        for (k, &i) in masked.visible_history.iter().enumerate() {
            let w = width(&recon[1]);
            let a = &mut self.agents[i];
            a.future_masked = true;
            a.reconstructed_future = Some(offset_track(anchor(scene, i), &recon[1].data()[k * w..(k + 1) * w]));
        }
        for (k, &j) in masked.masked_lanes.iter().enumerate() {
            let w = width(&recon[2]);
            let c = scene.lane_anchor.row(j);
            let l = &mut self.lanes[j];
            l.masked = true;
            l.reconstructed = Some(offset_track([c[0], c[1]], &recon[2].data()[k * w..(k + 1) * w]));
        }
        self.masking = Some(info);
        self
    }

    /// Attaches every mode of every agent's forecast.
    pub fn with_forecast(mut self, scene: &ProcessedScene, forecast: &Forecast) -> Self {
        for i in 0..forecast.num_agents().min(self.agents.len()) {
            let o = anchor(scene, i);
            self.agents[i].predictions =
                forecast.agent(i).chunks(FUTURE_STEPS * 2).map(|m| offset_track(o, m)).collect();
        }
        self
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("view serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        crate::scenario_json::parse_located(text)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn polyline(out: &mut String, pts: &[[f64; 2]], class: &str) {
    if pts.len() < 2 {
        if let Some(p) = pts.first() {
            let _ = writeln!(out, r#"<circle class="{class}" cx="{:.3}" cy="{:.3}" r="0.6"/>"#, p[0], p[1]);
        }
        return;
    }
    let coords: Vec<String> = pts.iter().map(|p| format!("{:.3},{:.3}", p[0], p[1])).collect();
    let _ = writeln!(out, r#"<polyline class="{class}" points="{}"/>"#, coords.join(" "));
}

const STYLE: &str = "polyline{fill:none;stroke-linecap:round;stroke-linejoin:round}\
.lane{stroke:#b8b8b8;stroke-width:0.4}\
.lane-masked{stroke:#e8a33d;stroke-width:0.5;stroke-dasharray:1.5 1}\
.lane-recon{stroke:#3d7be8;stroke-width:0.4;stroke-dasharray:0.5 0.5}\
.hist{stroke:#2a6f97;stroke-width:0.6}\
.hist-focal{stroke:#c0392b;stroke-width:0.8}\
.hist-masked{stroke:#2a6f97;stroke-width:0.6;stroke-opacity:0.3;stroke-dasharray:1 1}\
.fut{stroke:#7f8c8d;stroke-width:0.5;stroke-dasharray:1 0.6}\
.fut-masked{stroke:#7f8c8d;stroke-width:0.5;stroke-opacity:0.3;stroke-dasharray:0.4 0.8}\
.recon{stroke:#27ae60;stroke-width:0.6}\
.pred{stroke:#8e44ad;stroke-width:0.5;stroke-opacity:0.7}\
circle{stroke:none;fill:#555}";

/// Deterministic SVG of a view. World y points up.
pub fn render_svg(view: &SceneView) -> String {
    let all = view.lanes.iter().flat_map(|l| l.points.iter().chain(l.reconstructed.iter().flatten())).chain(
        view.agents.iter().flat_map(|a| {
            a.history
                .iter()
                .chain(&a.future)
                .chain(a.reconstructed_history.iter().flatten())
                .chain(a.reconstructed_future.iter().flatten())
                .chain(a.predictions.iter().flatten())
        }),
    );
    let (mut lo, mut hi) = ([-10.0f64, -10.0f64], [10.0f64, 10.0f64]);
    for p in all {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let margin = 5.0;
    let (w, h) = (hi[0] - lo[0] + 2.0 * margin, hi[1] - lo[1] + 2.0 * margin);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="{:.3} {:.3} {:.3} {:.3}" width="{:.0}" height="{:.0}">"#,
        lo[0] - margin,
        -hi[1] - margin,
        w,
        h,
        w * 8.0,
        h * 8.0
    );
    let _ = writeln!(out, "<title>{}</title>", escape(&view.scenario_id));
    let _ = writeln!(out, "<style>{STYLE}</style>");
    out.push_str("<g transform=\"scale(1,-1)\">\n");
    for l in &view.lanes {
        polyline(&mut out, &l.points, if l.masked { "lane-masked" } else { "lane" });
    }
    for l in &view.lanes {
        if let Some(r) = &l.reconstructed {
            polyline(&mut out, r, "lane-recon");
        }
    }
    for a in &view.agents {
        polyline(&mut out, &a.future, if a.future_masked { "fut-masked" } else { "fut" });
        let hist = match (a.history_masked, a.focal) {
            (true, _) => "hist-masked",
            (false, true) => "hist-focal",
            (false, false) => "hist",
        };
        polyline(&mut out, &a.history, hist);
        for r in a.reconstructed_history.iter().chain(&a.reconstructed_future) {
            polyline(&mut out, r, "recon");
        }
        for p in &a.predictions {
            polyline(&mut out, p, "pred");
        }
    }
    out.push_str("</g>\n</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use motion_mae_core::masking::{apply_mask, plan_masks};
    use motion_mae_core::numerics::RngStream;
    use motion_mae_core::scene::{generate_synthetic_scenario, normalize_to_focal, GenConfig};

    fn sample() -> (RawScenario, ProcessedScene) {
        let raw = generate_synthetic_scenario(&GenConfig::default(), &mut RngStream::new(2)).unwrap();
        let p = normalize_to_focal(&raw).unwrap();
        (raw, p)
    }

    /// Minimal structural XML check: tags nest and attributes are quoted.
    fn well_formed(svg: &str) -> bool {
        let mut stack = Vec::new();
        let mut rest = svg;
        while let Some(start) = rest.find('<') {
            let end = match rest[start..].find('>') {
                Some(e) => start + e,
                None => return false,
            };
            let tag = &rest[start + 1..end];
            if !tag.matches('"').count().is_multiple_of(2) {
                return false;
            }
            if let Some(name) = tag.strip_prefix('/') {
                if stack.pop() != Some(name.to_string()) {
                    return false;
                }
            } else if !tag.ends_with('/') {
                stack.push(tag.split_whitespace().next().unwrap_or("").to_string());
            }
            rest = &rest[end + 1..];
        }
        stack.is_empty()
    }

    #[test]
    fn lanes_only_view_renders() {
        let (raw, p) = sample();
        let mut view = SceneView::new(&raw, &p);
        view.agents.clear();
        let svg = render_svg(&view);
        assert!(well_formed(&svg));
        assert_eq!(svg.matches("class=\"lane\"").count(), p.num_lanes());
        assert!(!svg.contains("class=\"hist"));
        assert!(!svg.contains("<circle"));
    }

    #[test]
    fn rendering_is_deterministic_and_well_formed() {
        let (raw, p) = sample();
        let plan = plan_masks(p.num_agents(), p.num_lanes(), 0.5, 0.5, &mut RngStream::new(0)).unwrap();
        let masked = apply_mask(&p, &plan).unwrap();
        let recon = [masked.history_target.clone(), masked.future_target.clone(), masked.lane_target.clone()];
        let recon = recon.map(|t| {
            let k = t.shape()[0];
            let steps = t.shape()[1];
            let data: Vec<f64> = t.data().chunks(t.shape()[2]).flat_map(|r| [r[0], r[1]]).collect();
            Tensor::new(&[k, steps, 2], data).unwrap()
        });
        let view = SceneView::new(&raw, &p).with_reconstruction(
            &p,
            &masked,
            &recon,
            MaskInfo { alpha: 0.5, beta: 0.5, seed: 0 },
        );
        let a = render_svg(&view);
        assert_eq!(a, render_svg(&view.clone()));
        assert!(well_formed(&a));
        let back = SceneView::from_json(&view.to_json()).unwrap();
        assert_eq!(render_svg(&back), a);
    }

    #[test]
    fn reconstructed_ground_truth_retraces_tracks() {
        let (raw, p) = sample();
        let plan = plan_masks(p.num_agents(), p.num_lanes(), 0.5, 1.0, &mut RngStream::new(3)).unwrap();
        let masked = apply_mask(&p, &plan).unwrap();
        let strip = |t: &Tensor| {
            let data: Vec<f64> = t.data().chunks(t.shape()[2]).flat_map(|r| [r[0], r[1]]).collect();
            Tensor::new(&[t.shape()[0], t.shape()[1], 2], data).unwrap()
        };
        let recon = [strip(&masked.history_target), strip(&masked.future_target), strip(&masked.lane_target)];
        let view = SceneView::new(&raw, &p).with_reconstruction(
            &p,
            &masked,
            &recon,
            MaskInfo { alpha: 0.5, beta: 1.0, seed: 3 },
        );
        for l in &view.lanes {
            let r = l.reconstructed.as_ref().unwrap();
            for (a, b) in r.iter().zip(&l.points) {
                assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
            }
        }
        for a in view.agents.iter().filter(|a| a.future_masked) {
            let r = a.reconstructed_future.as_ref().unwrap();
            let end = a.future.last().unwrap();
            let close = r.iter().any(|q| (q[0] - end[0]).abs() < 1e-9 && (q[1] - end[1]).abs() < 1e-9);
            assert!(close);
        }
    }
}
