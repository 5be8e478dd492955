//! One optimizer step of pre-training or fine-tuning over a batch of scenes.
//!
//! Each scene gets its own tape. Losses are normalised by batch-level element
//! counts, so accumulating the per-scene gradients in index order yields the
//! gradient of the batch loss.

use alloc::format;
use alloc::vec::Vec;

use crate::masking::{apply_mask, plan_masks};
use crate::model::autoencoder::{loss_values, LossNorm, ReconTargets};
use crate::model::forecasting::{supervised_agents, wta_loss_graph};
use crate::model::{ForecastModel, MaeLoss, MaeModel, WtaLoss};
use crate::numerics::{AdamW, Graph, Mode, RngStream};
use crate::scene::ProcessedScene;
use crate::{Error, Result};

fn check_finite(value: f64, step: u64, what: &str, scene: &ProcessedScene) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { step, detail: format!("{what} = {value} on scene {}", scene.scenario_id) })
    }
}

/// Masks, reconstructs and updates. Mask plans and dropout seeds are drawn
/// from `rng` in scene order.
pub fn pretrain_step(
    model: &mut MaeModel,
    scenes: &[&ProcessedScene],
    alpha: f64,
    beta: f64,
    rng: &mut RngStream,
    optimizer: &AdamW,
    lr: f64,
) -> Result<MaeLoss> {
    if scenes.is_empty() {
        return Err(Error::EmptySelection("empty batch".into()));
    }
    let mut masked = Vec::with_capacity(scenes.len());
    for s in scenes {
        let plan = plan_masks(s.num_agents(), s.num_lanes(), alpha, beta, rng)?;
        masked.push(apply_mask(s, &plan)?);
    }
    let targets: Vec<ReconTargets> = masked.iter().map(ReconTargets::from_masked).collect();
    let norm = LossNorm::for_batch(&targets)?;
    let step = model.params.step_count();
    model.params.zero_grad();
    let mut sum = MaeLoss::default();
    for (i, scene) in scenes.iter().enumerate() {
        let seed = rng.next_u64();
        let grads = {
            let mut g = Graph::new(&model.params, Mode::Train { seed });
            let out = model.forward(&mut g, scene, &masked[i], &targets[i], &norm)?;
            let v = loss_values(&g, &out);
            check_finite(v.total, step, "reconstruction loss", scene)?;
            sum.total += v.total;
            sum.history += v.history;
            sum.future += v.future;
            sum.lane += v.lane;
            g.backward(out.total)?
        };
        model.params.accumulate(&grads, 1.0)?;
    }
    optimizer.step(&mut model.params, lr)?;
    Ok(sum)
}

/// Forecasts every agent of every scene and updates with the
/// winner-take-all loss averaged over supervised agents of the batch.
pub fn finetune_step(
    model: &mut ForecastModel,
    scenes: &[&ProcessedScene],
    rng: &mut RngStream,
    optimizer: &AdamW,
    lr: f64,
) -> Result<WtaLoss> {
    let norm: usize = scenes.iter().map(|s| supervised_agents(s).len()).sum();
    if norm == 0 {
        return Err(Error::EmptySelection("no agent in the batch has a valid future step".into()));
    }
    let step = model.params.step_count();
    model.params.zero_grad();
    let mut sum = WtaLoss::default();
    for scene in scenes {
        let seed = rng.next_u64();
        if supervised_agents(scene).is_empty() {
            continue;
        }
        let grads = {
            let mut g = Graph::new(&model.params, Mode::Train { seed });
            let vars = model.forward(&mut g, scene)?;
            let (total, reg, cls) = wta_loss_graph(&mut g, vars, scene, model.config.modes, norm)?;
            let t = g.value(total).item();
            check_finite(t, step, "forecasting loss", scene)?;
            sum.total += t;
            sum.regression += g.value(reg).item();
            sum.classification += g.value(cls).item();
            g.backward(total)?
        };
        model.params.accumulate(&grads, 1.0)?;
    }
    optimizer.step(&mut model.params, lr)?;
    Ok(sum)
}
