//! Transformer encoder over visible tokens, asymmetric decoder with learned
//! mask tokens, linear reconstruction heads and the weighted loss.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::embedding::{self, row3, TokenSet};
use super::layers::{self, Builder};
use super::ModelConfig;
use crate::masking::{apply_mask, MaskPlan, MaskedScene};
use crate::numerics::{Graph, Mode, ParamStore, RegressionKind, RngStream, Tensor, Var};
use crate::scene::{
    ProcessedScene, FUTURE_CHANNELS, FUTURE_STEPS, HISTORY_CHANNELS, HISTORY_STEPS, LANE_CHANNELS, LANE_POINTS,
};
use crate::{Error, Result};

pub const ENCODER_PREFIX: &str = "encoder";
pub const DECODER_PREFIX: &str = "decoder";
pub const MASK_TOKEN_PREFIX: &str = "mask_token";
pub const RECON_HEAD_PREFIX: &str = "head.recon";

const MASK_TOKENS: [&str; 3] = ["mask_token.hist", "mask_token.fut", "mask_token.lane"];
const RECON_HEADS: [&str; 3] = ["head.recon.hist", "head.recon.fut", "head.recon.lane"];

/// Steps, channel count and flag channel of each reconstructed stream.
const STREAMS: [(usize, usize, usize); 3] =
    [(HISTORY_STEPS, HISTORY_CHANNELS, 3), (FUTURE_STEPS, FUTURE_CHANNELS, 2), (LANE_POINTS, LANE_CHANNELS, 2)];

pub(crate) fn register_encoder(b: &mut Builder, cfg: &ModelConfig) -> Result<()> {
    for i in 0..cfg.encoder_depth {
        b.transformer_block(&format!("{ENCODER_PREFIX}.b{i}"), cfg.dim, cfg.mlp_ratio)?;
    }
    b.layer_norm(&format!("{ENCODER_PREFIX}.norm"), cfg.dim)
}

/// `Encoder(tokens + PE)`; output rows follow the token order.
pub fn encode(g: &mut Graph, cfg: &ModelConfig, tokens: &TokenSet) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::EmptySelection("encoder input has no tokens".into()));
    }
    let mut x = g.add(tokens.tokens, tokens.pe)?;
    for i in 0..cfg.encoder_depth {
        x = layers::transformer_block(g, x, &format!("{ENCODER_PREFIX}.b{i}"), cfg.heads, cfg.dropout)?;
    }
    layers::layer_norm(g, x, &format!("{ENCODER_PREFIX}.norm"))
}

/// Per-stream normalisers for a batch: the number of masked elements with at
/// least one valid step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossNorm {
    pub counts: [usize; 3],
}

/// Ground-truth coordinates and validity of the masked elements of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconTargets {
    /// Per stream: `[k * steps * 2]` coordinates.
    pub values: [Vec<f64>; 3],
    /// Per stream: `[k * steps]` flags.
    pub valid: [Vec<bool>; 3],
    pub elements: [usize; 3],
}

impl ReconTargets {
    pub fn from_masked(masked: &MaskedScene) -> Self {
        let sources = [&masked.history_target, &masked.future_target, &masked.lane_target];
        let mut values: [Vec<f64>; 3] = Default::default();
        let mut valid: [Vec<bool>; 3] = Default::default();
        let mut elements = [0; 3];
        for (s, t) in sources.iter().enumerate() {
            let (steps, ch, flag) = STREAMS[s];
            elements[s] = t.numel() / (steps * ch);
            for row in t.data().chunks(ch) {
                values[s].extend([row[0], row[1]]);
                valid[s].push(row[flag] != 0.0);
            }
        }
        Self { values, valid, elements }
    }

    /// Elements of stream `s` with at least one valid step.
    pub fn supervised(&self, s: usize) -> usize {
        let steps = STREAMS[s].0;
        self.valid[s].chunks(steps).filter(|e| e.iter().any(|&v| v)).count()
    }

    /// Per-coordinate weights: each supervised element contributes its mean
    /// over valid coordinates, divided by `norm` elements.
    fn weights(&self, s: usize, norm: usize) -> Vec<f64> {
        let steps = STREAMS[s].0;
        let mut w = Vec::with_capacity(self.values[s].len());
        for e in self.valid[s].chunks(steps) {
            let n = e.iter().filter(|&&v| v).count();
            for &v in e {
                let x = if v && n > 0 { 1.0 / (2 * n * norm) as f64 } else { 0.0 };
                w.extend([x, x]);
            }
        }
        w
    }
}

impl LossNorm {
    pub fn for_batch<'a>(targets: impl IntoIterator<Item = &'a ReconTargets>) -> Result<Self> {
        let mut counts = [0; 3];
        for t in targets {
            for (s, c) in counts.iter_mut().enumerate() {
                *c += t.supervised(s);
            }
        }
        if counts == [0; 3] {
            return Err(Error::EmptySelection("no masked element has a valid step".into()));
        }
        Ok(Self { counts })
    }
}

/// Graph handles produced by one pre-training forward pass.
#[derive(Debug, Clone)]
pub struct MaeOutput {
    pub total: Var,
    /// History, future and lane components (unweighted); `None` when the
    /// batch supervises no element of that stream.
    pub components: [Option<Var>; 3],
    /// Reconstructions `[k, steps * 2]` per stream.
    pub predictions: [Option<Var>; 3],
}

/// Loss values of one step or one scene.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MaeLoss {
    pub total: f64,
    pub history: f64,
    pub future: f64,
    pub lane: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaeModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl MaeModel {
    pub fn new(config: ModelConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder { store: &mut params, rng };
        let c = config.dim;
        embedding::register_embeddings(&mut b, &config, true)?;
        register_encoder(&mut b, &config)?;
        for i in 0..config.decoder_depth {
            b.transformer_block(&format!("{DECODER_PREFIX}.b{i}"), c, config.mlp_ratio)?;
        }
        b.layer_norm(&format!("{DECODER_PREFIX}.norm"), c)?;
        for name in MASK_TOKENS {
            b.embedding(name, 1, c)?;
        }
        for (name, (steps, _, _)) in RECON_HEADS.iter().zip(STREAMS) {
            b.linear(name, c, steps * 2)?;
        }
        Ok(Self { config, params })
    }

    /// Decoder over `concat(T_E, mask tokens) + PE`; returns decoded rows at
    /// the mask-token positions, per stream.
    pub fn decode(
        &self,
        g: &mut Graph,
        encoded: Var,
        tokens: &TokenSet,
        scene: &ProcessedScene,
        masked: &MaskedScene,
    ) -> Result<[Option<Var>; 3]> {
        let cfg = &self.config;
        // masked histories belong to agents whose future is visible, and
        // the other way round
        let groups: [&[usize]; 3] = [&masked.visible_future, &masked.visible_history, &masked.masked_lanes];
        let mut parts = vec![encoded];
        let mut anchors = Vec::new();
        let mut offsets = [0usize; 4];
        offsets[0] = tokens.len();
        for (s, idx) in groups.iter().enumerate() {
            offsets[s + 1] = offsets[s] + idx.len();
            if idx.is_empty() {
                continue;
            }
            let table = g.param(MASK_TOKENS[s])?;
            parts.push(g.gather_rows(table, &vec![0; idx.len()])?);
            for &i in idx.iter() {
                anchors.push(if s == 2 { row3(&scene.lane_anchor, i) } else { row3(&scene.agent_anchor, i) });
            }
        }
        let seq = if parts.len() == 1 { encoded } else { g.concat_rows(&parts)? };
        let pe = if anchors.is_empty() {
            tokens.pe
        } else {
            let masked_pe = embedding::positional_embedding(g, &anchors)?;
            g.concat_rows(&[tokens.pe, masked_pe])?
        };
        let mut x = g.add(seq, pe)?;
        for i in 0..cfg.decoder_depth {
            x = layers::transformer_block(g, x, &format!("{DECODER_PREFIX}.b{i}"), cfg.heads, cfg.dropout)?;
        }
        let x = layers::layer_norm(g, x, &format!("{DECODER_PREFIX}.norm"))?;
        let mut out = [None; 3];
        for s in 0..3 {
            if offsets[s + 1] > offsets[s] {
                let rows: Vec<usize> = (offsets[s]..offsets[s + 1]).collect();
                out[s] = Some(g.gather_rows(x, &rows)?);
            }
        }
        Ok(out)
    }

    /// Linear heads: `[k, T_H * 2]`, `[k, T_F * 2]`, `[k, P * 2]`.
    pub fn reconstruct(&self, g: &mut Graph, decoded: &[Option<Var>; 3]) -> Result<[Option<Var>; 3]> {
        let mut out = [None; 3];
        for s in 0..3 {
            if let Some(d) = decoded[s] {
                out[s] = Some(layers::linear(g, d, RECON_HEADS[s])?);
            }
        }
        Ok(out)
    }

    /// Full pre-training forward pass on one masked scene. `norm` holds the
    /// batch-level element counts, so per-scene losses sum to the batch loss.
    pub fn forward(
        &self,
        g: &mut Graph,
        scene: &ProcessedScene,
        masked: &MaskedScene,
        targets: &ReconTargets,
        norm: &LossNorm,
    ) -> Result<MaeOutput> {
        let tokens = embedding::embed_visible(g, &self.config, scene, masked)?;
        let encoded = encode(g, &self.config, &tokens)?;
        let decoded = self.decode(g, encoded, &tokens, scene, masked)?;
        let predictions = self.reconstruct(g, &decoded)?;
        let (total, components) = mae_loss(g, &predictions, targets, norm, self.config.loss_weights)?;
        Ok(MaeOutput { total, components, predictions })
    }

    /// Evaluation-mode loss of one scene under `plan`.
    pub fn eval_loss(&self, scene: &ProcessedScene, plan: &MaskPlan) -> Result<MaeLoss> {
        let masked = apply_mask(scene, plan)?;
        let targets = ReconTargets::from_masked(&masked);
        let norm = LossNorm::for_batch([&targets])?;
        let mut g = Graph::new(&self.params, Mode::Eval);
        let out = self.forward(&mut g, scene, &masked, &targets, &norm)?;
        Ok(loss_values(&g, &out))
    }

    /// Evaluation-mode reconstructions `[k, steps, 2]` per stream, with the
    /// masking applied.
    pub fn reconstruct_scene(&self, scene: &ProcessedScene, plan: &MaskPlan) -> Result<(MaskedScene, [Tensor; 3])> {
        let masked = apply_mask(scene, plan)?;
        let targets = ReconTargets::from_masked(&masked);
        let mut g = Graph::new(&self.params, Mode::Eval);
        let tokens = embedding::embed_visible(&mut g, &self.config, scene, &masked)?;
        let encoded = encode(&mut g, &self.config, &tokens)?;
        let decoded = self.decode(&mut g, encoded, &tokens, scene, &masked)?;
        let preds = self.reconstruct(&mut g, &decoded)?;
        let mut out = Vec::with_capacity(3);
        for s in 0..3 {
            let steps = STREAMS[s].0;
            out.push(match preds[s] {
                Some(p) => g.value(p).clone().reshape(&[targets.elements[s], steps, 2])?,
                None => Tensor::zeros(&[0, steps, 2]),
            });
        }
        let [h, f, l]: [Tensor; 3] = out.try_into().expect("three streams");
        Ok((masked, [h, f, l]))
    }
}

pub fn loss_values(g: &Graph, out: &MaeOutput) -> MaeLoss {
    let get = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
    MaeLoss {
        total: g.value(out.total).item(),
        history: get(out.components[0]),
        future: get(out.components[1]),
        lane: get(out.components[2]),
    }
}

/// `w_H L_H + w_F L_F + w_L L_L` with L1 for trajectories and MSE for lanes,
/// restricted to valid steps of masked elements.
pub fn mae_loss(
    g: &mut Graph,
    predictions: &[Option<Var>; 3],
    targets: &ReconTargets,
    norm: &LossNorm,
    weights: [f64; 3],
) -> Result<(Var, [Option<Var>; 3])> {
    if norm.counts == [0; 3] {
        return Err(Error::EmptySelection("no masked element has a valid step".into()));
    }
    let kinds = [RegressionKind::L1, RegressionKind::L1, RegressionKind::Mse];
    let mut components = [None; 3];
    let mut weighted = Vec::new();
    for s in 0..3 {
        if norm.counts[s] == 0 {
            continue;
        }
        let comp = match predictions[s] {
            Some(p) => {
                let w = targets.weights(s, norm.counts[s]);
                g.regression_loss(kinds[s], p, &targets.values[s], &w)?
            }
            // This scene has nothing of stream `s` masked; its share is zero.
            None => g.input(Tensor::scalar(0.0)),
        };
        components[s] = Some(comp);
        weighted.push(g.scale(comp, weights[s]));
    }
    let mut total = weighted[0];
    for &w in &weighted[1..] {
        total = g.add(total, w)?;
    }
    Ok((total, components))
}
