//! Complementary trajectory masking and uniform lane masking.

use alloc::format;
use alloc::vec::Vec;

use crate::numerics::{RngStream, Tensor};
use crate::scene::{
    ProcessedScene, FUTURE_CHANNELS, FUTURE_STEPS, HISTORY_CHANNELS, HISTORY_STEPS, LANE_CHANNELS, LANE_POINTS,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assignment {
    HistoryMasked,
    FutureMasked,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub agent_assignment: Vec<Assignment>,
    pub lane_masked: Vec<bool>,
    pub alpha: f64,
    pub beta: f64,
}

/// Number of masked elements for a ratio, rounding halves away from zero.
pub fn mask_count(ratio: f64, n: usize) -> usize {
    libm::round(ratio * n as f64) as usize
}

fn check_ratio(name: &'static str, value: f64) -> Result<()> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(Error::InvalidRatio { name, value })
    }
}

pub fn plan_masks(n: usize, m: usize, alpha: f64, beta: f64, rng: &mut RngStream) -> Result<MaskPlan> {
    check_ratio("alpha", alpha)?;
    check_ratio("beta", beta)?;
    if n == 0 {
        return Err(Error::DimensionMismatch("a mask plan needs at least one agent".into()));
    }
    let hist = rng.choose_subset(n, mask_count(alpha, n));
    let lane_masked = rng.choose_subset(m, mask_count(beta, m));
    let agent_assignment =
        hist.into_iter().map(|h| if h { Assignment::HistoryMasked } else { Assignment::FutureMasked }).collect();
    Ok(MaskPlan { agent_assignment, lane_masked, alpha, beta })
}

impl MaskPlan {
    /// Plan with nothing hidden except every future: the fine-tuning view.
    pub fn all_history_visible(n: usize, m: usize) -> Self {
        Self {
            agent_assignment: alloc::vec![Assignment::FutureMasked; n],
            lane_masked: alloc::vec![false; m],
            alpha: 0.0,
            beta: 0.0,
        }
    }

    pub fn history_masked(&self) -> Vec<usize> {
        self.indices(Assignment::HistoryMasked)
    }

    pub fn future_masked(&self) -> Vec<usize> {
        self.indices(Assignment::FutureMasked)
    }

    pub fn lanes_masked(&self) -> Vec<usize> {
        (0..self.lane_masked.len()).filter(|&j| self.lane_masked[j]).collect()
    }

    pub fn lanes_visible(&self) -> Vec<usize> {
        (0..self.lane_masked.len()).filter(|&j| !self.lane_masked[j]).collect()
    }

    fn indices(&self, a: Assignment) -> Vec<usize> {
        (0..self.agent_assignment.len()).filter(|&i| self.agent_assignment[i] == a).collect()
    }
}

/// Visible inputs and hidden targets of one masked scene. Index vectors map
/// rows back to agents or lane segments of the source scene.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedScene {
    /// Agents whose history is visible (their future is the target).
    pub visible_history: Vec<usize>,
    /// Agents whose future is visible (their history is the target).
    pub visible_future: Vec<usize>,
    pub visible_lanes: Vec<usize>,
    pub masked_lanes: Vec<usize>,
    /// `[|visible_history|, 50, 4]`
    pub history_input: Tensor,
    /// `[|visible_future|, 60, 3]`
    pub future_input: Tensor,
    /// `[|visible_lanes|, 20, 3]`
    pub lane_input: Tensor,
    /// Full history rows of `visible_future` agents.
    pub history_target: Tensor,
    /// Full future rows of `visible_history` agents.
    pub future_target: Tensor,
    /// Full rows of `masked_lanes`.
    pub lane_target: Tensor,
}

fn gather(src: &Tensor, idx: &[usize], steps: usize, channels: usize) -> Tensor {
    let n = steps * channels;
    let mut data = Vec::with_capacity(idx.len() * n);
    for &i in idx {
        data.extend_from_slice(&src.data()[i * n..(i + 1) * n]);
    }
    Tensor::new(&[idx.len(), steps, channels], data).expect("gather shape")
}

fn scatter(dst: &mut Tensor, src: &Tensor, idx: &[usize]) {
    let n = src.numel() / idx.len().max(1);
    for (k, &i) in idx.iter().enumerate() {
        dst.data_mut()[i * n..(i + 1) * n].copy_from_slice(&src.data()[k * n..(k + 1) * n]);
    }
}

pub fn apply_mask(scene: &ProcessedScene, plan: &MaskPlan) -> Result<MaskedScene> {
    if plan.agent_assignment.len() != scene.num_agents() || plan.lane_masked.len() != scene.num_lanes() {
        return Err(Error::DimensionMismatch(format!(
            "plan covers {} agents / {} lanes, scene has {} / {}",
            plan.agent_assignment.len(),
            plan.lane_masked.len(),
            scene.num_agents(),
            scene.num_lanes()
        )));
    }
    let visible_history = plan.future_masked();
    let visible_future = plan.history_masked();
    let visible_lanes = plan.lanes_visible();
    let masked_lanes = plan.lanes_masked();
    let (h, f, l) = (&scene.agent_history, &scene.agent_future, &scene.lanes);
    Ok(MaskedScene {
        history_input: gather(h, &visible_history, HISTORY_STEPS, HISTORY_CHANNELS),
        future_input: gather(f, &visible_future, FUTURE_STEPS, FUTURE_CHANNELS),
        lane_input: gather(l, &visible_lanes, LANE_POINTS, LANE_CHANNELS),
        history_target: gather(h, &visible_future, HISTORY_STEPS, HISTORY_CHANNELS),
        future_target: gather(f, &visible_history, FUTURE_STEPS, FUTURE_CHANNELS),
        lane_target: gather(l, &masked_lanes, LANE_POINTS, LANE_CHANNELS),
        visible_history,
        visible_future,
        visible_lanes,
        masked_lanes,
    })
}

impl MaskedScene {
    /// Reassembles the full history, future and lane arrays from the visible
    /// inputs and the targets.
    pub fn scatter_back(&self) -> (Tensor, Tensor, Tensor) {
        let n = self.visible_history.len() + self.visible_future.len();
        let m = self.visible_lanes.len() + self.masked_lanes.len();
        let mut h = Tensor::zeros(&[n, HISTORY_STEPS, HISTORY_CHANNELS]);
        let mut f = Tensor::zeros(&[n, FUTURE_STEPS, FUTURE_CHANNELS]);
        let mut l = Tensor::zeros(&[m, LANE_POINTS, LANE_CHANNELS]);
        scatter(&mut h, &self.history_input, &self.visible_history);
        scatter(&mut h, &self.history_target, &self.visible_future);
        scatter(&mut f, &self.future_input, &self.visible_future);
        scatter(&mut f, &self.future_target, &self.visible_history);
        scatter(&mut l, &self.lane_input, &self.visible_lanes);
        scatter(&mut l, &self.lane_target, &self.masked_lanes);
        (h, f, l)
    }
}
