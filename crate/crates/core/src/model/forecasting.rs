//! Fine-tuning model: history and lane tokens through the pre-trained
//! encoder, then separate trajectory and confidence MLPs per agent.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::autoencoder::{encode, register_encoder, MaeModel};
use super::embedding;
use super::layers::{self, Builder};
use super::ModelConfig;
use crate::numerics::graph::masked_softmax;
use crate::numerics::{Graph, Mode, ParamStore, RegressionKind, RngStream, Tensor, Var, HUBER_DELTA};
use crate::scene::{ProcessedScene, FUTURE_CHANNELS, FUTURE_STEPS};
use crate::{Error, Result};

pub const TRAJ_HEAD: &str = "head.traj";
pub const SCORE_HEAD: &str = "head.score";

/// K trajectories per agent, relative to each agent's latest observed
/// position, with softmax scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    /// `[N, K, T_F, 2]`
    pub trajectories: Tensor,
    /// `[N, K]`, rows sum to 1.
    pub scores: Tensor,
}

impl Forecast {
    pub fn num_agents(&self) -> usize {
        self.trajectories.shape()[0]
    }

    pub fn modes(&self) -> usize {
        self.trajectories.shape()[1]
    }

    /// `[K * T_F * 2]` of agent `i`.
    pub fn agent(&self, i: usize) -> &[f64] {
        let n = self.modes() * FUTURE_STEPS * 2;
        &self.trajectories.data()[i * n..(i + 1) * n]
    }

    pub fn agent_scores(&self, i: usize) -> &[f64] {
        self.scores.row(i)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct WtaLoss {
    pub total: f64,
    pub regression: f64,
    pub classification: f64,
}

/// Graph handles of one fine-tuning forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForecastVars {
    /// `[N, K * T_F * 2]`
    pub trajectories: Var,
    /// `[N, K]` logits.
    pub logits: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn register_heads(b: &mut Builder, cfg: &ModelConfig) -> Result<()> {
    let c = cfg.dim;
    b.mlp(TRAJ_HEAD, &[c, 2 * c, 2 * c, cfg.modes * FUTURE_STEPS * 2])?;
    b.mlp(SCORE_HEAD, &[c, 2 * c, 2 * c, cfg.modes])
}

impl ForecastModel {
    /// Freshly initialised model.
    pub fn scratch(config: ModelConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder { store: &mut params, rng };
        embedding::register_embeddings(&mut b, &config, false)?;
        register_encoder(&mut b, &config)?;
        register_heads(&mut b, &config)?;
        Ok(Self { config, params })
    }

    /// Same architecture as [`scratch`](Self::scratch) with embeddings and
    /// encoder copied from `pretrained`; heads stay freshly initialised.
    /// Decoder, mask tokens, future embedding and reconstruction heads are
    /// ignored.
    pub fn from_pretrained(config: ModelConfig, pretrained: &ParamStore, rng: &mut RngStream) -> Result<Self> {
        let mut model = Self::scratch(config, rng)?;
        let names: Vec<String> = model.params.names().filter(|n| !n.starts_with("head.")).map(String::from).collect();
        let missing = model.params.copy_matching_from(pretrained, &names);
        if !missing.is_empty() {
            return Err(Error::MissingParams(missing));
        }
        Ok(model)
    }

    pub fn from_mae(mae: &MaeModel, rng: &mut RngStream) -> Result<Self> {
        Self::from_pretrained(mae.config.clone(), &mae.params, rng)
    }

    pub fn forward(&self, g: &mut Graph, scene: &ProcessedScene) -> Result<ForecastVars> {
        let n = scene.num_agents();
        if n == 0 || !scene.agent_hist_valid.iter().any(|&v| v) {
            return Err(Error::EmptySelection(format!("scene {} has no agent with valid history", scene.scenario_id)));
        }
        let tokens = embedding::embed_history_and_lanes(g, &self.config, scene)?;
        let encoded = encode(g, &self.config, &tokens)?;
        // history tokens come first, in agent order
        let agents: Vec<usize> = (0..n).collect();
        let h = g.gather_rows(encoded, &agents)?;
        let trajectories = layers::mlp(g, h, TRAJ_HEAD, 3, 0.0)?;
        let logits = layers::mlp(g, h, SCORE_HEAD, 3, 0.0)?;
        Ok(ForecastVars { trajectories, logits })
    }

    pub fn forecast(&self, scene: &ProcessedScene) -> Result<Forecast> {
        let mut g = Graph::new(&self.params, Mode::Eval);
        let vars = self.forward(&mut g, scene)?;
        Ok(to_forecast(&g, vars, self.config.modes))
    }
}

pub fn to_forecast(g: &Graph, vars: ForecastVars, modes: usize) -> Forecast {
    let traj = g.value(vars.trajectories);
    let n = traj.rows();
    let trajectories = traj.clone().reshape(&[n, modes, FUTURE_STEPS, 2]).expect("head width");
    let logits = g.value(vars.logits);
    let mut scores = Vec::with_capacity(n * modes);
    for i in 0..n {
        scores.extend(masked_softmax(logits.row(i), |_| true).expect("non-empty"));
    }
    Forecast { trajectories, scores: Tensor::new(&[n, modes], scores).expect("score shape") }
}

/// Ground-truth coordinates `[T_F * 2]` and flags `[T_F]` of agent `i`.
pub fn future_target(scene: &ProcessedScene, i: usize) -> (Vec<f64>, Vec<bool>) {
    let row = scene.future_of(i);
    let mut xy = Vec::with_capacity(FUTURE_STEPS * 2);
    let mut valid = Vec::with_capacity(FUTURE_STEPS);
    for s in row.chunks(FUTURE_CHANNELS) {
        xy.extend([s[0], s[1]]);
        valid.push(s[2] != 0.0);
    }
    (xy, valid)
}

/// Mean valid-step displacement of each mode; `traj` is `[K * T * 2]`.
pub fn mode_ade(traj: &[f64], gt: &[f64], valid: &[bool]) -> Vec<f64> {
    let t = valid.len();
    let n = valid.iter().filter(|&&v| v).count() as f64;
    traj.chunks(t * 2)
        .map(|m| {
            let mut s = 0.0;
            for k in 0..t {
                if valid[k] {
                    s += libm::hypot(m[2 * k] - gt[2 * k], m[2 * k + 1] - gt[2 * k + 1]);
                }
            }
            s / n
        })
        .collect()
}

/// Index of the smallest value, ties to the lowest index.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Agents of a scene that carry supervision.
pub fn supervised_agents(scene: &ProcessedScene) -> Vec<usize> {
    (0..scene.num_agents()).filter(|&i| scene.agent_fut_valid[i]).collect()
}

/// Winner-take-all loss on the tape. `norm` is the number of supervised
/// agents in the whole batch.
pub fn wta_loss_graph(
    g: &mut Graph,
    vars: ForecastVars,
    scene: &ProcessedScene,
    modes: usize,
    norm: usize,
) -> Result<(Var, Var, Var)> {
    let n = scene.num_agents();
    let width = modes * FUTURE_STEPS * 2;
    let mut target = alloc::vec![0.0; n * width];
    let mut weights = alloc::vec![0.0; n * width];
    let mut best = alloc::vec![0usize; n];
    let mut row_w = alloc::vec![0.0; n];
    let traj = g.value(vars.trajectories).data().to_vec();
    for i in supervised_agents(scene) {
        let (gt, valid) = future_target(scene, i);
        let k = argmin(&mode_ade(&traj[i * width..(i + 1) * width], &gt, &valid));
        let nv = valid.iter().filter(|&&v| v).count();
        let base = i * width + k * FUTURE_STEPS * 2;
        for t in 0..FUTURE_STEPS {
            if valid[t] {
                for c in 0..2 {
                    target[base + 2 * t + c] = gt[2 * t + c];
                    weights[base + 2 * t + c] = 1.0 / (2 * nv * norm) as f64;
                }
            }
        }
        best[i] = k;
        row_w[i] = 1.0 / norm as f64;
    }
    let reg = g.regression_loss(RegressionKind::Huber, vars.trajectories, &target, &weights)?;
    let cls = g.cross_entropy(vars.logits, &best, &row_w)?;
    let total = g.add(reg, cls)?;
    Ok((total, reg, cls))
}

fn huber(r: f64) -> f64 {
    let a = libm::fabs(r);
    if a <= HUBER_DELTA {
        0.5 * r * r
    } else {
        HUBER_DELTA * (a - 0.5 * HUBER_DELTA)
    }
}

/// Winner-take-all loss of a finished forecast against the scene's futures,
/// averaged over agents with any valid future step.
pub fn wta_loss(forecast: &Forecast, scene: &ProcessedScene) -> Result<WtaLoss> {
    let agents = supervised_agents(scene);
    if agents.is_empty() {
        return Err(Error::EmptySelection(format!("scene {} has no valid future step", scene.scenario_id)));
    }
    let (mut reg, mut cls) = (0.0, 0.0);
    for &i in &agents {
        let (gt, valid) = future_target(scene, i);
        let traj = forecast.agent(i);
        let k = argmin(&mode_ade(traj, &gt, &valid));
        let m = &traj[k * FUTURE_STEPS * 2..(k + 1) * FUTURE_STEPS * 2];
        let nv = valid.iter().filter(|&&v| v).count();
        let mut s = 0.0;
        for t in 0..FUTURE_STEPS {
            if valid[t] {
                s += huber(m[2 * t] - gt[2 * t]) + huber(m[2 * t + 1] - gt[2 * t + 1]);
            }
        }
        reg += s / (2 * nv) as f64;
        cls -= libm::log(forecast.agent_scores(i)[k]);
    }
    let a = agents.len() as f64;
    let (regression, classification) = (reg / a, cls / a);
    Ok(WtaLoss { total: regression + classification, regression, classification })
}
