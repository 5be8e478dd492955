//! Per-element token embeddings: temporal pyramid for trajectories,
//! point-set encoder for lane segments, additive semantic tables and the
//! anchor-pose positional embedding.
//!
//! No op in this module mixes information across elements.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::layers::{self, Builder};
use super::ModelConfig;
use crate::masking::MaskedScene;
use crate::numerics::{Graph, Tensor, Var};
use crate::scene::{
    AgentCategory, LaneType, ProcessedScene, FUTURE_CHANNELS, FUTURE_STEPS, HISTORY_CHANNELS, HISTORY_STEPS,
    LANE_CHANNELS, LANE_POINTS,
};
use crate::{Error, Result};

pub const HISTORY_PREFIX: &str = "embed.hist";
pub const FUTURE_PREFIX: &str = "embed.fut";
pub const LANE_PREFIX: &str = "embed.lane";
pub const PE_PREFIX: &str = "embed.pe";
pub const CATEGORY_TABLE: &str = "embed.sem.category";
pub const LANE_TYPE_TABLE: &str = "embed.sem.lane_type";
pub const STREAM_TABLE: &str = "embed.sem.stream";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    History = 0,
    Future = 1,
    Lane = 2,
}

/// Scene element a token stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenSource {
    History(usize),
    Future(usize),
    Lane(usize),
}

/// Embedded tokens in history, future, lane order, with one positional
/// embedding row per token.
#[derive(Debug, Clone)]
pub struct TokenSet {
    pub tokens: Var,
    pub pe: Var,
    pub sources: Vec<TokenSource>,
}

impl TokenSet {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }
}

pub(crate) fn register_fpn(b: &mut Builder, prefix: &str, c_in: usize, cfg: &ModelConfig) -> Result<()> {
    let c = cfg.dim;
    b.conv(&format!("{prefix}.stem"), c_in, c)?;
    for s in 0..3 {
        for j in 0..cfg.fpn_blocks {
            b.nat_block(&format!("{prefix}.s{s}.b{j}"), c, cfg.mlp_ratio)?;
        }
    }
    for name in ["down1", "down2", "up0", "up1"] {
        b.conv(&format!("{prefix}.{name}"), c, c)?;
    }
    Ok(())
}

pub(crate) fn register_embeddings(b: &mut Builder, cfg: &ModelConfig, with_future: bool) -> Result<()> {
    let c = cfg.dim;
    register_fpn(b, HISTORY_PREFIX, HISTORY_CHANNELS, cfg)?;
    if with_future {
        register_fpn(b, FUTURE_PREFIX, FUTURE_CHANNELS, cfg)?;
    }
    b.mlp(&format!("{LANE_PREFIX}.point"), &[LANE_CHANNELS, c, c])?;
    b.mlp(&format!("{LANE_PREFIX}.seg"), &[c, c, c])?;
    b.mlp(PE_PREFIX, &[4, c, c])?;
    b.embedding(CATEGORY_TABLE, AgentCategory::ALL.len(), c)?;
    b.embedding(LANE_TYPE_TABLE, LaneType::ALL.len(), c)?;
    b.embedding(STREAM_TABLE, 3, c)
}

/// Pyramid embedding of `batch` sequences of `len` steps (`x` is
/// `[batch * len, c_in]`); returns `[batch, C]`.
pub fn fpn_embed(g: &mut Graph, x: Var, batch: usize, len: usize, prefix: &str, cfg: &ModelConfig) -> Result<Var> {
    if len < 4 {
        return Err(Error::Shape(format!("temporal pyramid needs at least 4 steps, got {len}")));
    }
    let lens = [len, len.div_ceil(2), len.div_ceil(2).div_ceil(2)];
    let mut scales = [x; 3];
    let mut h = layers::conv(g, x, &format!("{prefix}.stem"), batch, len, 1)?;
    for s in 0..3 {
        if s > 0 {
            h = layers::conv(g, h, &format!("{prefix}.down{s}"), batch, lens[s - 1], 2)?;
        }
        for j in 0..cfg.fpn_blocks {
            let name = format!("{prefix}.s{s}.b{j}");
            h = layers::nat_block(g, h, &name, cfg.heads, cfg.fpn_kernels[s], batch, lens[s])?;
        }
        scales[s] = h;
    }
    let mut top = scales[2];
    for s in (0..2).rev() {
        let up = g.upsample2(top, batch, lens[s + 1], lens[s])?;
        let up = layers::conv(g, up, &format!("{prefix}.up{s}"), batch, lens[s], 1)?;
        top = g.add(scales[s], up)?;
    }
    let last: Vec<usize> = (0..batch).map(|b| b * len + len - 1).collect();
    g.gather_rows(top, &last)
}

/// Point-set embedding of `[m, 20, 3]` lane rows; points whose flag is 0
/// are excluded from the pooling.
pub fn pointnet_embed(g: &mut Graph, lanes: &Tensor) -> Result<Var> {
    let m = lanes.numel() / (LANE_POINTS * LANE_CHANNELS);
    let valid: Vec<bool> = lanes.data().chunks(LANE_CHANNELS).map(|p| p[2] != 0.0).collect();
    let x = g.input(lanes.clone().reshape(&[m * LANE_POINTS, LANE_CHANNELS])?);
    let h = layers::mlp(g, x, &format!("{LANE_PREFIX}.point"), 2, 0.0)?;
    let h = g.gelu(h);
    let pooled = g.masked_max_pool(h, LANE_POINTS, &valid)?;
    layers::mlp(g, pooled, &format!("{LANE_PREFIX}.seg"), 2, 0.0)
}

/// `[x, y, cos(theta), sin(theta)]` for each anchor.
pub fn pose_features(anchors: &[[f64; 3]]) -> Tensor {
    let mut data = Vec::with_capacity(anchors.len() * 4);
    for a in anchors {
        data.extend([a[0], a[1], libm::cos(a[2]), libm::sin(a[2])]);
    }
    Tensor::new(&[anchors.len(), 4], data).expect("pose feature shape")
}

pub fn positional_embedding(g: &mut Graph, anchors: &[[f64; 3]]) -> Result<Var> {
    let x = g.input(pose_features(anchors));
    layers::mlp(g, x, PE_PREFIX, 2, 0.0)
}

/// One embedded stream awaiting semantic and positional terms.
pub struct StreamTokens {
    pub stream: Stream,
    /// `[n, C]`
    pub embedded: Var,
    /// Row of the category (agents) or lane-type (lanes) table per token.
    pub semantic: Vec<usize>,
    pub anchors: Vec<[f64; 3]>,
    pub sources: Vec<TokenSource>,
}

/// Adds semantic and stream-type rows to each stream, concatenates the
/// streams and computes their positional embeddings.
pub fn assemble_tokens(g: &mut Graph, parts: Vec<StreamTokens>) -> Result<TokenSet> {
    let mut tokens = Vec::new();
    let mut anchors = Vec::new();
    let mut sources = Vec::new();
    let stream_table = g.param(STREAM_TABLE)?;
    for part in parts {
        if part.sources.is_empty() {
            continue;
        }
        let (table_name, kind) = match part.stream {
            Stream::Lane => (LANE_TYPE_TABLE, "lane type"),
            _ => (CATEGORY_TABLE, "agent category"),
        };
        let table = g.param(table_name)?;
        let rows = g.value(table).rows();
        if let Some(&index) = part.semantic.iter().find(|&&i| i >= rows) {
            return Err(Error::UnknownCategory { kind, index });
        }
        let sem = g.gather_rows(table, &part.semantic)?;
        let st = g.gather_rows(stream_table, &vec![part.stream as usize; part.sources.len()])?;
        let t = g.add(part.embedded, sem)?;
        tokens.push(g.add(t, st)?);
        anchors.extend(part.anchors);
        sources.extend(part.sources);
    }
    if tokens.is_empty() {
        return Err(Error::EmptySelection("no visible tokens".into()));
    }
    let tokens = if tokens.len() == 1 { tokens[0] } else { g.concat_rows(&tokens)? };
    let pe = positional_embedding(g, &anchors)?;
    Ok(TokenSet { tokens, pe, sources })
}

fn agent_anchors(scene: &ProcessedScene, idx: &[usize]) -> Vec<[f64; 3]> {
    idx.iter().map(|&i| row3(&scene.agent_anchor, i)).collect()
}

pub(crate) fn row3(t: &Tensor, i: usize) -> [f64; 3] {
    let r = t.row(i);
    [r[0], r[1], r[2]]
}

fn agent_stream(
    g: &mut Graph,
    scene: &ProcessedScene,
    cfg: &ModelConfig,
    stream: Stream,
    input: &Tensor,
    idx: &[usize],
) -> Result<Option<StreamTokens>> {
    if idx.is_empty() {
        return Ok(None);
    }
    let (prefix, steps, channels, source): (_, _, _, fn(usize) -> TokenSource) = match stream {
        Stream::History => (HISTORY_PREFIX, HISTORY_STEPS, HISTORY_CHANNELS, TokenSource::History),
        _ => (FUTURE_PREFIX, FUTURE_STEPS, FUTURE_CHANNELS, TokenSource::Future),
    };
    let x = g.input(input.clone().reshape(&[idx.len() * steps, channels])?);
    let embedded = fpn_embed(g, x, idx.len(), steps, prefix, cfg)?;
    Ok(Some(StreamTokens {
        stream,
        embedded,
        semantic: idx.iter().map(|&i| scene.agent_category[i].index()).collect(),
        anchors: agent_anchors(scene, idx),
        sources: idx.iter().map(|&i| source(i)).collect(),
    }))
}

fn lane_stream(g: &mut Graph, scene: &ProcessedScene, input: &Tensor, idx: &[usize]) -> Result<Option<StreamTokens>> {
    if idx.is_empty() {
        return Ok(None);
    }
    let embedded = pointnet_embed(g, input)?;
    Ok(Some(StreamTokens {
        stream: Stream::Lane,
        embedded,
        semantic: idx.iter().map(|&j| scene.lane_type[j].index()).collect(),
        anchors: idx.iter().map(|&j| row3(&scene.lane_anchor, j)).collect(),
        sources: idx.iter().map(|&j| TokenSource::Lane(j)).collect(),
    }))
}

/// Tokens for the visible part of a masked scene.
pub fn embed_visible(
    g: &mut Graph,
    cfg: &ModelConfig,
    scene: &ProcessedScene,
    masked: &MaskedScene,
) -> Result<TokenSet> {
    let parts = [
        agent_stream(g, scene, cfg, Stream::History, &masked.history_input, &masked.visible_history)?,
        agent_stream(g, scene, cfg, Stream::Future, &masked.future_input, &masked.visible_future)?,
        lane_stream(g, scene, &masked.lane_input, &masked.visible_lanes)?,
    ];
    assemble_tokens(g, parts.into_iter().flatten().collect())
}

/// Tokens for every agent history and every lane segment (no futures).
pub fn embed_history_and_lanes(g: &mut Graph, cfg: &ModelConfig, scene: &ProcessedScene) -> Result<TokenSet> {
    let agents: Vec<usize> = (0..scene.num_agents()).collect();
    let lanes: Vec<usize> = (0..scene.num_lanes()).collect();
    let parts = [
        agent_stream(g, scene, cfg, Stream::History, &scene.agent_history, &agents)?,
        lane_stream(g, scene, &scene.lanes, &lanes)?,
    ];
    assemble_tokens(g, parts.into_iter().flatten().collect())
}
