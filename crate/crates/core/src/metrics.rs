//! Benchmark metrics on the focal agent, a constant-velocity reference
//! predictor and dataset-level aggregation.
//!
//! Predictions are flat `[K * T * 2]` slices in the agent-relative frame;
//! `T` is the length of the validity mask.

use alloc::string::String;
use alloc::vec::Vec;

use crate::model::forecasting::{argmin, future_target};
use crate::model::Forecast;
use crate::numerics::Tensor;
use crate::scene::{ProcessedScene, FUTURE_STEPS, HISTORY_CHANNELS, HISTORY_STEPS};
use crate::{Error, Result};

/// Endpoint error above which a prediction counts as a miss (strict).
pub const MISS_THRESHOLD: f64 = 2.0;

/// Mode count of the multi-modal metric columns.
pub const MULTI_MODES: usize = 6;

fn check(preds: &[f64], gt: &[f64], valid: &[bool]) -> Result<usize> {
    let t = valid.len();
    if t == 0 || gt.len() != 2 * t || preds.is_empty() || !preds.len().is_multiple_of(2 * t) {
        return Err(Error::Shape(alloc::format!(
            "predictions of {} values and ground truth of {} values for {t} steps",
            preds.len(),
            gt.len()
        )));
    }
    if !valid.iter().any(|&v| v) {
        return Err(Error::EmptySelection("no valid ground-truth step".into()));
    }
    Ok(preds.len() / (2 * t))
}

/// `sqrt` is correctly rounded, so the distance is reproducible bit for bit
/// by any implementation of the same formula.
fn dist(m: &[f64], gt: &[f64], t: usize) -> f64 {
    let (dx, dy) = (m[2 * t] - gt[2 * t], m[2 * t + 1] - gt[2 * t + 1]);
    libm::sqrt(dx * dx + dy * dy)
}

/// Mean valid-step displacement of each mode.
pub fn ade_per_mode(preds: &[f64], gt: &[f64], valid: &[bool]) -> Result<Vec<f64>> {
    check(preds, gt, valid)?;
    let t = valid.len();
    let n = valid.iter().filter(|&&v| v).count() as f64;
    Ok(preds.chunks(2 * t).map(|m| (0..t).filter(|&s| valid[s]).map(|s| dist(m, gt, s)).sum::<f64>() / n).collect())
}

/// Displacement of each mode at the last valid step.
pub fn fde_per_mode(preds: &[f64], gt: &[f64], valid: &[bool]) -> Result<Vec<f64>> {
    check(preds, gt, valid)?;
    let t = valid.len();
    let last = (0..t).rev().find(|&s| valid[s]).expect("checked non-empty");
    Ok(preds.chunks(2 * t).map(|m| dist(m, gt, last)).collect())
}

fn min_of(values: &[f64]) -> f64 {
    values[argmin(values)]
}

pub fn min_ade(preds: &[f64], gt: &[f64], valid: &[bool]) -> Result<f64> {
    Ok(min_of(&ade_per_mode(preds, gt, valid)?))
}

/// Falls back to the last valid step when the final step is unobserved.
pub fn min_fde(preds: &[f64], gt: &[f64], valid: &[bool]) -> Result<f64> {
    Ok(min_of(&fde_per_mode(preds, gt, valid)?))
}

/// 1 when the best endpoint is more than [`MISS_THRESHOLD`] away, else 0.
pub fn miss_rate(preds: &[f64], gt: &[f64], valid: &[bool]) -> Result<f64> {
    Ok(if min_fde(preds, gt, valid)? > MISS_THRESHOLD { 1.0 } else { 0.0 })
}

/// minFDE plus `(1 - p)^2`, `p` being the score of the minFDE mode.
pub fn brier_min_fde(preds: &[f64], scores: &[f64], gt: &[f64], valid: &[bool]) -> Result<f64> {
    let fde = fde_per_mode(preds, gt, valid)?;
    if scores.len() != fde.len() {
        return Err(Error::DimensionMismatch(alloc::format!("{} scores for {} modes", scores.len(), fde.len())));
    }
    let k = argmin(&fde);
    let miss = 1.0 - scores[k];
    Ok(fde[k] + miss * miss)
}

/// Mode with the highest score, ties to the lowest index.
pub fn top_mode(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` highest-scoring modes in descending score order
/// (stable for ties).
pub fn top_modes(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx.truncate(k);
    idx
}

/// The seven benchmark values of one scene or their mean over a split.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricValues {
    pub min_ade_1: f64,
    pub min_fde_1: f64,
    pub mr_1: f64,
    pub min_ade_6: f64,
    pub min_fde_6: f64,
    pub mr_6: f64,
    pub brier_min_fde_6: f64,
}

impl MetricValues {
    pub const COLUMNS: [&'static str; 7] =
        ["minADE_1", "minFDE_1", "MR_1", "minADE_6", "minFDE_6", "MR_6", "brier_minFDE_6"];

    pub fn to_array(&self) -> [f64; 7] {
        [self.min_ade_1, self.min_fde_1, self.mr_1, self.min_ade_6, self.min_fde_6, self.mr_6, self.brier_min_fde_6]
    }

    pub fn from_array(v: [f64; 7]) -> Self {
        Self {
            min_ade_1: v[0],
            min_fde_1: v[1],
            mr_1: v[2],
            min_ade_6: v[3],
            min_fde_6: v[4],
            mr_6: v[5],
            brier_min_fde_6: v[6],
        }
    }
}

/// Metrics of one agent's multi-modal prediction. The single-mode columns
/// use the top-scored mode; the multi-modal columns use the (up to) six
/// top-scored modes, so a one-mode predictor scores the same on both.
pub fn agent_metrics(preds: &[f64], scores: &[f64], gt: &[f64], valid: &[bool]) -> Result<MetricValues> {
    let k = check(preds, gt, valid)?;
    if scores.len() != k {
        return Err(Error::DimensionMismatch(alloc::format!("{} scores for {k} modes", scores.len())));
    }
    let w = 2 * valid.len();
    let pick = |modes: &[usize]| -> (Vec<f64>, Vec<f64>) {
        let mut p = Vec::with_capacity(modes.len() * w);
        for &m in modes {
            p.extend_from_slice(&preds[m * w..(m + 1) * w]);
        }
        (p, modes.iter().map(|&m| scores[m]).collect())
    };
    let (p1, _) = pick(&[top_mode(scores)]);
    let (p6, s6) = pick(&top_modes(scores, MULTI_MODES));
    Ok(MetricValues {
        min_ade_1: min_ade(&p1, gt, valid)?,
        min_fde_1: min_fde(&p1, gt, valid)?,
        mr_1: miss_rate(&p1, gt, valid)?,
        min_ade_6: min_ade(&p6, gt, valid)?,
        min_fde_6: min_fde(&p6, gt, valid)?,
        mr_6: miss_rate(&p6, gt, valid)?,
        brier_min_fde_6: brier_min_fde(&p6, &s6, gt, valid)?,
    })
}

/// Focal-agent metrics of a forecast.
pub fn scene_metrics(forecast: &Forecast, scene: &ProcessedScene) -> Result<MetricValues> {
    if forecast.num_agents() == 0 || scene.num_agents() == 0 {
        return Err(Error::EmptySelection(alloc::format!("scene {} has no focal agent", scene.scenario_id)));
    }
    let (gt, valid) = future_target(scene, 0);
    agent_metrics(forecast.agent(0), forecast.agent_scores(0), &gt, &valid)
}

/// Single-mode forecast extrapolating each agent's last observed
/// displacement per step. Agents without two consecutive observed history
/// steps are held in place.
pub fn constant_velocity_baseline(scene: &ProcessedScene) -> Forecast {
    let n = scene.num_agents();
    let mut traj = Vec::with_capacity(n * FUTURE_STEPS * 2);
    for i in 0..n {
        let hist = scene.history_of(i);
        let v = (0..HISTORY_STEPS)
            .rev()
            .map(|t| &hist[t * HISTORY_CHANNELS..(t + 1) * HISTORY_CHANNELS])
            .find(|r| r[3] != 0.0)
            .map_or([0.0, 0.0], |r| [r[0], r[1]]);
        // anchor is at the last observed step, which may precede the current one
        let lag = HISTORY_STEPS - scene.agent_last_observed[i];
        for s in 0..FUTURE_STEPS {
            let k = (lag + s) as f64;
            traj.extend([v[0] * k, v[1] * k]);
        }
    }
    Forecast {
        trajectories: Tensor::new(&[n, 1, FUTURE_STEPS, 2], traj).expect("baseline shape"),
        scores: Tensor::full(&[n, 1], 1.0),
    }
}

/// Single-mode forecast equal to the recorded futures (zeros where
/// unobserved). Every metric is zero on it; a debugging aid.
pub fn ground_truth_forecast(scene: &ProcessedScene) -> Forecast {
    let n = scene.num_agents();
    let mut traj = Vec::with_capacity(n * FUTURE_STEPS * 2);
    for i in 0..n {
        traj.extend(future_target(scene, i).0);
    }
    Forecast {
        trajectories: Tensor::new(&[n, 1, FUTURE_STEPS, 2], traj).expect("ground-truth shape"),
        scores: Tensor::full(&[n, 1], 1.0),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneMetrics {
    pub scenario_id: String,
    pub values: MetricValues,
}

/// Per-scene rows in evaluation order plus their unweighted mean.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub scenes: Vec<SceneMetrics>,
    pub mean: MetricValues,
}

impl MetricReport {
    pub fn n_scenes(&self) -> usize {
        self.scenes.len()
    }

    pub fn from_rows(scenes: Vec<SceneMetrics>) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::EmptySelection("empty evaluation split".into()));
        }
        let mut sum = [0.0; 7];
        for s in &scenes {
            for (a, v) in sum.iter_mut().zip(s.values.to_array()) {
                *a += v;
            }
        }
        let n = scenes.len() as f64;
        let mean = MetricValues::from_array(sum.map(|v| v / n));
        Ok(Self { scenes, mean })
    }
}

/// Runs `predict` on every scene in order and aggregates the focal-agent
/// metrics.
pub fn evaluate<'a, I, F>(scenes: I, mut predict: F) -> Result<MetricReport>
where
    I: IntoIterator<Item = &'a ProcessedScene>,
    F: FnMut(&ProcessedScene) -> Result<Forecast>,
{
    let mut rows = Vec::new();
    for scene in scenes {
        let forecast = predict(scene)?;
        rows.push(SceneMetrics { scenario_id: scene.scenario_id.clone(), values: scene_metrics(&forecast, scene)? });
    }
    MetricReport::from_rows(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use crate::scene::{generate_synthetic_scenario, normalize_to_focal, Behavior, GenConfig};
    use alloc::vec;

    fn line(step: [f64; 2], t: usize) -> Vec<f64> {
        (1..=t).flat_map(|s| [step[0] * s as f64, step[1] * s as f64]).collect()
    }

    #[test]
    fn offset_mode_gives_three_four_five() {
        let gt = line([1.0, 0.0], 10);
        let preds: Vec<f64> = gt.chunks(2).flat_map(|p| [p[0] + 3.0, p[1] + 4.0]).collect();
        let valid = vec![true; 10];
        assert_eq!(min_ade(&preds, &gt, &valid).unwrap(), 5.0);
        assert_eq!(min_fde(&preds, &gt, &valid).unwrap(), 5.0);
        assert_eq!(miss_rate(&preds, &gt, &valid).unwrap(), 1.0);
        let mut exact = gt.clone();
        exact.extend(&preds);
        assert_eq!(min_ade(&exact, &gt, &valid).unwrap(), 0.0);
    }

    #[test]
    fn endpoint_only_match() {
        let gt = line([1.0, 1.0], 5);
        let mut preds = vec![0.0; 10];
        preds[8] = gt[8];
        preds[9] = gt[9];
        let valid = vec![true; 5];
        assert_eq!(min_fde(&preds, &gt, &valid).unwrap(), 0.0);
        assert!(min_ade(&preds, &gt, &valid).unwrap() > 0.0);
    }

    #[test]
    fn best_endpoint_and_best_average_differ() {
        let gt = vec![0.0; 4];
        // mode 0: (0,0) then (3,0); mode 1: (1,0) then (1,0)
        let preds = vec![0.0, 0.0, 3.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let valid = [true, true];
        let ade = ade_per_mode(&preds, &gt, &valid).unwrap();
        let fde = fde_per_mode(&preds, &gt, &valid).unwrap();
        assert_eq!(ade, vec![1.5, 1.0]);
        assert_eq!(fde, vec![3.0, 1.0]);
        let preds2 = vec![0.0, 0.0, 1.0, 0.0, 0.9, 0.0, 1.2, 0.0];
        assert_eq!(argmin(&ade_per_mode(&preds2, &gt, &valid).unwrap()), 0);
        assert_eq!(argmin(&fde_per_mode(&preds2, &gt, &valid).unwrap()), 0);
        let preds3 = vec![0.0, 0.0, 1.5, 0.0, 1.0, 0.0, 1.0, 0.0];
        assert_eq!(argmin(&ade_per_mode(&preds3, &gt, &valid).unwrap()), 0);
        assert_eq!(argmin(&fde_per_mode(&preds3, &gt, &valid).unwrap()), 1);
    }

    #[test]
    fn miss_threshold_is_strict() {
        let gt = vec![0.0, 0.0];
        assert_eq!(miss_rate(&[2.0, 0.0], &gt, &[true]).unwrap(), 0.0);
        assert_eq!(miss_rate(&[0.0, 0.0], &gt, &[true]).unwrap(), 0.0);
        assert_eq!(miss_rate(&[2.0 + 1e-12, 0.0], &gt, &[true]).unwrap(), 1.0);
    }

    #[test]
    fn brier_fixtures() {
        let gt = vec![0.0, 0.0];
        assert_eq!(brier_min_fde(&[0.0, 0.0], &[1.0], &gt, &[true]).unwrap(), 0.0);
        let b = brier_min_fde(&[1.0, 0.0, 5.0, 0.0], &[0.3, 0.7], &gt, &[true]).unwrap();
        assert!((b - 1.49).abs() < 1e-12);
        let mut preds = vec![0.0, 0.0];
        preds.extend([9.0; 10]);
        let b = brier_min_fde(&preds, &[1.0 / 6.0; 6], &gt, &[true]).unwrap();
        assert!((b - 25.0 / 36.0).abs() < 1e-12);
    }

    #[test]
    fn final_step_invalid_uses_last_valid() {
        let gt = line([1.0, 0.0], 3);
        let preds = vec![1.0, 0.0, 2.0, 0.0, 100.0, 0.0];
        assert_eq!(min_fde(&preds, &gt, &[true, true, false]).unwrap(), 0.0);
        assert!(min_fde(&preds, &gt, &[false; 3]).is_err());
        assert!(min_ade(&preds, &gt, &[false; 3]).is_err());
    }

    #[test]
    fn single_mode_columns_use_top_score() {
        let gt = vec![0.0, 0.0];
        let preds = [0.0, 0.0, 3.0, 4.0];
        let m = agent_metrics(&preds, &[0.4, 0.6], &gt, &[true]).unwrap();
        assert_eq!(m.min_fde_1, 5.0);
        assert_eq!(m.min_fde_6, 0.0);
        assert_eq!(m.mr_1, 1.0);
        assert_eq!(m.mr_6, 0.0);
        assert!((m.brier_min_fde_6 - 0.36).abs() < 1e-12);
    }

    #[test]
    fn top_modes_order_is_stable() {
        assert_eq!(top_modes(&[0.1, 0.3, 0.3, 0.2], 3), vec![1, 2, 3]);
        assert_eq!(top_mode(&[0.3, 0.3]), 0);
    }

    fn straight_scene(seed: u64, noise: f64) -> ProcessedScene {
        let cfg = GenConfig { behavior_mix: [1.0, 0.0, 0.0], noise_sigma: noise, ..GenConfig::default() };
        let raw = generate_synthetic_scenario(&cfg, &mut RngStream::new(seed)).unwrap();
        assert_eq!(raw.focal_behavior, Some(Behavior::Straight));
        normalize_to_focal(&raw).unwrap()
    }

    #[test]
    fn constant_velocity_is_exact_on_noise_free_straight_motion() {
        for seed in 0..5 {
            let scene = straight_scene(seed, 0.0);
            let m = scene_metrics(&constant_velocity_baseline(&scene), &scene).unwrap();
            assert!(m.min_fde_1 < 1e-9, "seed {seed}: {}", m.min_fde_1);
        }
    }

    #[test]
    fn constant_velocity_uniform_and_static() {
        let mut scene = straight_scene(0, 0.0);
        let n = scene.num_agents();
        let mut hist = vec![0.0; n * HISTORY_STEPS * HISTORY_CHANNELS];
        for t in 1..HISTORY_STEPS {
            let r = &mut hist[t * HISTORY_CHANNELS..(t + 1) * HISTORY_CHANNELS];
            r.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        }
        scene.agent_history = Tensor::new(&[n, HISTORY_STEPS, HISTORY_CHANNELS], hist).unwrap();
        scene.agent_last_observed = vec![HISTORY_STEPS - 1; n];
        let f = constant_velocity_baseline(&scene);
        let a = f.agent(0);
        assert_eq!(&a[2 * (FUTURE_STEPS - 1)..], &[60.0, 0.0]);
        if n > 1 {
            assert!(f.agent(1).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn ground_truth_scores_zero_and_report_averages() {
        let scenes: Vec<_> = (0..4).map(|s| straight_scene(s, 0.02)).collect();
        let r = evaluate(&scenes, |s| Ok(ground_truth_forecast(s))).unwrap();
        assert_eq!(r.n_scenes(), 4);
        assert_eq!(r.mean.to_array(), [0.0; 7]);
        let cv = evaluate(&scenes, |s| Ok(constant_velocity_baseline(s))).unwrap();
        let mean_fde = cv.scenes.iter().map(|s| s.values.min_fde_6).sum::<f64>() / 4.0;
        assert!((cv.mean.min_fde_6 - mean_fde).abs() < 1e-12);
        assert!(evaluate(&scenes[..0], |s| Ok(ground_truth_forecast(s))).is_err());
    }
}
