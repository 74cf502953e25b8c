//! EdgeConv message passing and the local, temporal and hierarchical
//! residual updates that make up one graph stage.
//!
//! Every update works on a whole video at once: all frames' nodes are
//! flattened to `[T * N, D]` and one EdgeConv runs over the union of the
//! per-frame (or per-frame-pair) edge sets. Edge selection reads feature
//! values but is not differentiated; gradients reach the features only
//! through the messages.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::GridVar;
use crate::error::{Error, Result};
use crate::graph::{
    build_hierarchical_graph, build_local_graph, build_temporal_graph, drop_edges, Distance,
    GraphKind, GridShape, SignGraph,
};
use crate::nn::{uniform_init, RELU_GAIN};
use crate::rng::derive_seed;
use crate::tensor::{ParamBinder, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    EdgeconvMax,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GraphModule {
    #[serde(rename = "HSG", alias = "hsg")]
    Hsg,
    #[serde(rename = "TSG", alias = "tsg")]
    Tsg,
    #[serde(rename = "LSG", alias = "lsg")]
    Lsg,
}

impl GraphModule {
    fn tag(self) -> u64 {
        match self {
            GraphModule::Hsg => 1,
            GraphModule::Tsg => 2,
            GraphModule::Lsg => 3,
        }
    }
}

pub const DEFAULT_ORDER: [GraphModule; 3] = [GraphModule::Hsg, GraphModule::Tsg, GraphModule::Lsg];

/// How messages are formed and combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EdgeConvSpec {
    pub aggregation: Aggregation,
    /// Apply ReLU to each message (the standard EdgeConv MLP).
    pub relu: bool,
}

impl Default for EdgeConvSpec {
    fn default() -> Self {
        Self {
            aggregation: Aggregation::EdgeconvMax,
            relu: true,
        }
    }
}

/// Message MLP `[x_i, x_j - x_i] W + b` with `W` stored as its two halves.
#[derive(Clone, Debug)]
pub struct EdgeConvWeights {
    pub w_self: ParamId,
    pub w_diff: ParamId,
    pub bias: ParamId,
}

impl EdgeConvWeights {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let fan_in = 2 * d_in;
        Self {
            w_self: store.add(
                format!("{name}.w_self"),
                uniform_init(rng, &[d_in, d_out], fan_in, RELU_GAIN),
            ),
            w_diff: store.add(
                format!("{name}.w_diff"),
                uniform_init(rng, &[d_in, d_out], fan_in, RELU_GAIN),
            ),
            bias: store.add(format!("{name}.b"), Tensor::zeros(&[d_out])),
        }
    }
}

/// `out_i = agg_j msg(i <- j)` over both directions of every edge; nodes
/// without neighbours get a zero row.
pub fn edge_conv(
    tape: &mut Tape,
    p: &mut ParamBinder,
    w: &EdgeConvWeights,
    x: Var,
    edges: &[(usize, usize)],
    spec: EdgeConvSpec,
) -> Result<Var> {
    let n = match *tape.shape(x) {
        [n, _] => n,
        ref s => {
            return Err(Error::invalid(
                "edge_conv",
                format!("features must be [N, D], got {s:?}"),
            ))
        }
    };
    if let Some(&(a, b)) = edges.iter().find(|&&(a, b)| a >= n || b >= n) {
        return Err(Error::invalid(
            "edge_conv",
            format!("edge ({a}, {b}) out of range for {n} nodes"),
        ));
    }
    let d_out = p.store().get(w.w_self).shape()[1];
    if edges.is_empty() {
        return Ok(tape.constant(Tensor::zeros(&[n, d_out])));
    }
    let mut dst = Vec::with_capacity(2 * edges.len());
    let mut src = Vec::with_capacity(2 * edges.len());
    for &(a, b) in edges {
        dst.extend([a, b]);
        src.extend([b, a]);
    }
    let w_self = p.var(tape, w.w_self);
    let w_diff = p.var(tape, w.w_diff);
    let bias = p.var(tape, w.bias);
    // [x_i, x_j - x_i] W = x_i (W_s - W_d) + x_j W_d
    let a = tape.matmul(x, w_self)?;
    let b = tape.matmul(x, w_diff)?;
    let self_part = tape.sub(a, b)?;
    let self_part = tape.gather_rows(self_part, dst.clone())?;
    let nbr_part = tape.gather_rows(b, src)?;
    let msg = tape.add(self_part, nbr_part)?;
    let mut msg = tape.add(msg, bias)?;
    if spec.relu {
        msg = tape.relu(msg)?;
    }
    match spec.aggregation {
        Aggregation::EdgeconvMax => tape.scatter_max_rows(msg, dst, n),
        Aggregation::Mean => {
            let mut deg = vec![0usize; n];
            dst.iter().for_each(|&i| deg[i] += 1);
            let sum = tape.scatter_add_rows(msg, dst, n)?;
            let inv: Vec<f64> = deg
                .iter()
                .flat_map(|&k| {
                    std::iter::repeat_n(if k == 0 { 0.0 } else { 1.0 / k as f64 }, d_out)
                })
                .collect();
            let inv = tape.constant(Tensor::new(&[n, d_out], inv)?);
            tape.mul(sum, inv)
        }
    }
}

/// `theta1 -> EdgeConv -> theta2` weights of one module instance.
#[derive(Clone, Debug)]
pub struct GraphBlockWeights {
    pub theta1: ParamId,
    pub mlp: EdgeConvWeights,
    pub theta2: ParamId,
}

impl GraphBlockWeights {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_mid: usize,
        d_out: usize,
    ) -> Self {
        Self {
            theta1: store.add(
                format!("{name}.theta1"),
                uniform_init(rng, &[d_in, d_mid], d_in, 1.0),
            ),
            mlp: EdgeConvWeights::new(store, rng, &format!("{name}.mlp"), d_mid, d_mid),
            theta2: store.add(
                format!("{name}.theta2"),
                uniform_init(rng, &[d_mid, d_out], d_mid, 1.0),
            ),
        }
    }
}

/// HSG weights: the block plus the `s x s` fusion convolution.
#[derive(Clone, Debug)]
pub struct HsgWeights {
    pub block: GraphBlockWeights,
    pub fusion: ParamId,
    pub stride: usize,
}

impl HsgWeights {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_high: usize,
        d_low: usize,
        stride: usize,
    ) -> Self {
        let fan_in = stride * stride * d_low;
        Self {
            block: GraphBlockWeights::new(store, rng, name, d_high, d_low, d_low),
            fusion: store.add(
                format!("{name}.fusion"),
                uniform_init(rng, &[fan_in, d_low], fan_in, 1.0),
            ),
            stride,
        }
    }
}

/// DropEdge applied to freshly built graphs (training only).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropSpec {
    pub rate: f64,
    pub seed: u64,
}

/// Per-call settings shared by all updates of a stage.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateCtx {
    pub conv: EdgeConvSpec,
    pub distance: Distance,
    pub drop: Option<DropSpec>,
}

impl UpdateCtx {
    fn maybe_drop(&self, g: SignGraph, module: GraphModule, frame: usize) -> Result<SignGraph> {
        match self.drop {
            Some(d) if d.rate > 0.0 => drop_edges(
                &g,
                d.rate,
                derive_seed(d.seed, &[module.tag(), frame as u64]),
            ),
            _ => Ok(g),
        }
    }
}

fn frame_rows(t: &Tensor, frame: usize, n: usize) -> Tensor {
    let d = t.shape()[1];
    Tensor::new(
        &[n, d],
        t.data()[frame * n * d..(frame + 1) * n * d].to_vec(),
    )
    .expect("frame slice")
}

/// Union edge list in flattened `[T * N]` ids for per-frame local or
/// per-pair temporal graphs.
pub fn video_edges(graphs: &[SignGraph], nodes: usize) -> Vec<(usize, usize)> {
    graphs
        .iter()
        .flat_map(|g| {
            let off = g.node_space.frame() * nodes;
            g.edges.iter().map(move |&(a, b)| (a + off, b + off))
        })
        .collect()
}

fn check_fixed(fixed: &[SignGraph], kind: GraphKind, count: usize) -> Result<()> {
    if fixed.len() != count || fixed.iter().any(|g| g.kind != kind) {
        return Err(Error::invalid(
            "graph_update",
            format!(
                "expected {count} fixed {} graphs, got {}",
                kind.as_str(),
                fixed.len()
            ),
        ));
    }
    Ok(())
}

fn project(tape: &mut Tape, p: &mut ParamBinder, x: Var, w: ParamId) -> Result<Var> {
    let w = p.var(tape, w);
    tape.matmul(x, w)
}

/// Residual update `x + EdgeConv(x theta1, graph) theta2` shared by LSG and
/// TSG, with `graph` built on the projected features.
fn residual_update(
    tape: &mut Tape,
    p: &mut ParamBinder,
    w: &GraphBlockWeights,
    grid: GridVar,
    ctx: &UpdateCtx,
    build: impl Fn(&Tensor) -> Result<Vec<SignGraph>>,
    fixed: Option<&[SignGraph]>,
) -> Result<(GridVar, Vec<SignGraph>)> {
    let x = grid.flat(tape)?;
    let proj = project(tape, p, x, w.theta1)?;
    let graphs = match fixed {
        Some(g) => g.to_vec(),
        None => build(tape.value(proj))?,
    };
    let edges = video_edges(&graphs, grid.nodes());
    let msg = edge_conv(tape, p, &w.mlp, proj, &edges, ctx.conv)?;
    let branch = project(tape, p, msg, w.theta2)?;
    let out = tape.add(x, branch)?;
    Ok((grid.with_flat(tape, out)?, graphs))
}

/// Local sign graph update: per-frame KNN graph over projected nodes.
pub fn lsg_update(
    tape: &mut Tape,
    p: &mut ParamBinder,
    w: &GraphBlockWeights,
    grid: GridVar,
    k_l: usize,
    ctx: &UpdateCtx,
    fixed: Option<&[SignGraph]>,
) -> Result<(GridVar, Vec<SignGraph>)> {
    if let Some(f) = fixed {
        check_fixed(f, GraphKind::Local, grid.frames)?;
    }
    let n = grid.nodes();
    let build = |proj: &Tensor| {
        (0..grid.frames)
            .map(|t| {
                let g =
                    build_local_graph(&frame_rows(proj, t, n), k_l, ctx.distance)?.with_frame(t);
                ctx.maybe_drop(g, GraphModule::Lsg, t)
            })
            .collect()
    };
    residual_update(tape, p, w, grid, ctx, build, fixed)
}

/// Temporal sign graph update: top-K cross-frame pairs for every adjacent
/// frame pair, one shared weight set for the whole video.
pub fn tsg_update(
    tape: &mut Tape,
    p: &mut ParamBinder,
    w: &GraphBlockWeights,
    grid: GridVar,
    k_t: usize,
    ctx: &UpdateCtx,
    fixed: Option<&[SignGraph]>,
) -> Result<(GridVar, Vec<SignGraph>)> {
    if let Some(f) = fixed {
        check_fixed(f, GraphKind::Temporal, grid.frames.saturating_sub(1))?;
    }
    let n = grid.nodes();
    let build = |proj: &Tensor| {
        (0..grid.frames.saturating_sub(1))
            .map(|t| {
                let a = frame_rows(proj, t, n);
                let b = frame_rows(proj, t + 1, n);
                let g = build_temporal_graph(&a, &b, k_t, ctx.distance)?.with_frame(t);
                ctx.maybe_drop(g, GraphModule::Tsg, t)
            })
            .collect()
    };
    residual_update(tape, p, w, grid, ctx, build, fixed)
}

/// Hierarchical sign graph update. High and low nodes exchange messages
/// along the fixed region graph; the low grid then receives the updated,
/// `s`-strided high features.
pub fn hsg_update(
    tape: &mut Tape,
    p: &mut ParamBinder,
    w: &HsgWeights,
    high: GridVar,
    low: GridVar,
    ctx: &UpdateCtx,
    fixed: Option<&[SignGraph]>,
) -> Result<(GridVar, Vec<SignGraph>)> {
    if high.frames != low.frames {
        return Err(Error::invalid(
            "hsg_update",
            format!(
                "high grid has {} frames, low grid {}",
                high.frames, low.frames
            ),
        ));
    }
    let s = w.stride;
    let template = build_hierarchical_graph(
        GridShape::new(high.rows, high.cols),
        GridShape::new(low.rows, low.cols),
        s,
    )?;
    let frames = low.frames;
    let graphs: Vec<SignGraph> = match fixed {
        Some(f) => {
            check_fixed(f, GraphKind::Hierarchical, frames)?;
            f.to_vec()
        }
        None => (0..frames)
            .map(|t| ctx.maybe_drop(template.clone().with_frame(t), GraphModule::Hsg, t))
            .collect::<Result<_>>()?,
    };
    let (nh, nl) = (high.nodes(), low.nodes());
    let edges: Vec<(usize, usize)> = graphs
        .iter()
        .flat_map(|g| {
            let t = g.node_space.frame();
            let map = move |id: usize| {
                if id < nh {
                    t * nh + id
                } else {
                    frames * nh + t * nl + (id - nh)
                }
            };
            g.edges.iter().map(move |&(a, b)| (map(a), map(b)))
        })
        .collect();

    let xh = high.flat(tape)?;
    let xl = low.flat(tape)?;
    let hp = project(tape, p, xh, w.block.theta1)?;
    let nodes = tape.concat(&[hp, xl], 0)?;
    let msg = edge_conv(tape, p, &w.block.mlp, nodes, &edges, ctx.conv)?;
    let branch = project(tape, p, msg, w.block.theta2)?;
    let bh = tape.gather_rows(branch, (0..frames * nh).collect())?;
    let bl = tape.gather_rows(branch, (frames * nh..frames * (nh + nl)).collect())?;
    let hp2 = tape.add(hp, bh)?;
    let low2 = tape.add(xl, bl)?;
    let hp2 = tape.reshape(hp2, &[frames, high.rows, high.cols, low.dim])?;
    let fusion = p.var(tape, w.fusion);
    let fused = tape.strided_conv2d(hp2, fusion, s)?;
    let low2 = tape.reshape(low2, &[frames, low.rows, low.cols, low.dim])?;
    let out = tape.add(low2, fused)?;
    Ok((GridVar::from_var(tape, out)?, graphs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    #[serde(default = "default_order")]
    pub order: Vec<GraphModule>,
    #[serde(default)]
    pub aggregation: Aggregation,
    pub k_local: usize,
    pub k_temporal: usize,
    #[serde(default)]
    pub distance: Distance,
    #[serde(default)]
    pub drop_rate: f64,
}

fn default_order() -> Vec<GraphModule> {
    DEFAULT_ORDER.to_vec()
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        for (i, m) in self.order.iter().enumerate() {
            if self.order[..i].contains(m) {
                return Err(Error::Config(format!(
                    "module {m:?} appears twice in the stage order"
                )));
            }
        }
        if self.k_local == 0 || self.k_temporal == 0 {
            return Err(Error::Config("K values must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(Error::Config(format!(
                "drop_rate {} outside [0, 1)",
                self.drop_rate
            )));
        }
        Ok(())
    }

    pub fn uses(&self, m: GraphModule) -> bool {
        self.order.contains(&m)
    }
}

/// Weights of whichever modules a stage uses.
#[derive(Clone, Debug, Default)]
pub struct StageWeights {
    pub lsg: Option<GraphBlockWeights>,
    pub tsg: Option<GraphBlockWeights>,
    pub hsg: Option<HsgWeights>,
}

impl StageWeights {
    /// `dim` is the stage's node width, `tap_dim` the width of the
    /// high-resolution input at stride ratio `s`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cfg: &StageConfig,
        dim: usize,
        tap_dim: usize,
        s: usize,
    ) -> Self {
        let mut w = Self::default();
        for m in &cfg.order {
            match m {
                GraphModule::Hsg => {
                    w.hsg = Some(HsgWeights::new(
                        store,
                        rng,
                        &format!("{name}.hsg"),
                        tap_dim,
                        dim,
                        s,
                    ))
                }
                GraphModule::Tsg => {
                    w.tsg = Some(GraphBlockWeights::new(
                        store,
                        rng,
                        &format!("{name}.tsg"),
                        dim,
                        dim,
                        dim,
                    ))
                }
                GraphModule::Lsg => {
                    w.lsg = Some(GraphBlockWeights::new(
                        store,
                        rng,
                        &format!("{name}.lsg"),
                        dim,
                        dim,
                        dim,
                    ))
                }
            }
        }
        w
    }
}

/// Graphs used by one stage's forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageGraphs {
    pub local: Vec<SignGraph>,
    pub temporal: Vec<SignGraph>,
    pub hierarchical: Vec<SignGraph>,
}

impl StageGraphs {
    pub fn by_kind(&self, kind: GraphKind) -> &[SignGraph] {
        match kind {
            GraphKind::Local => &self.local,
            GraphKind::Temporal => &self.temporal,
            GraphKind::Hierarchical => &self.hierarchical,
        }
    }
}

/// Applies the stage's modules in configured order.
#[allow(clippy::too_many_arguments)]
pub fn mix_stage(
    tape: &mut Tape,
    p: &mut ParamBinder,
    w: &StageWeights,
    grid: GridVar,
    tap: Option<GridVar>,
    cfg: &StageConfig,
    drop_seed: Option<u64>,
    fixed: Option<&StageGraphs>,
) -> Result<(GridVar, StageGraphs)> {
    let ctx = UpdateCtx {
        conv: EdgeConvSpec {
            aggregation: cfg.aggregation,
            relu: true,
        },
        distance: cfg.distance,
        drop: drop_seed.map(|seed| DropSpec {
            rate: cfg.drop_rate,
            seed,
        }),
    };
    let missing = |m: &str| Error::invalid("mix_stage", format!("no weights for {m}"));
    let mut x = grid;
    let mut graphs = StageGraphs::default();
    for m in &cfg.order {
        match m {
            GraphModule::Lsg => {
                let w = w.lsg.as_ref().ok_or_else(|| missing("LSG"))?;
                let f = fixed.map(|f| f.local.as_slice());
                (x, graphs.local) = lsg_update(tape, p, w, x, cfg.k_local, &ctx, f)?;
            }
            GraphModule::Tsg => {
                let w = w.tsg.as_ref().ok_or_else(|| missing("TSG"))?;
                let f = fixed.map(|f| f.temporal.as_slice());
                (x, graphs.temporal) = tsg_update(tape, p, w, x, cfg.k_temporal, &ctx, f)?;
            }
            GraphModule::Hsg => {
                let w = w.hsg.as_ref().ok_or_else(|| missing("HSG"))?;
                let tap = tap.ok_or_else(|| {
                    Error::invalid("mix_stage", "HSG requires a high-resolution tap")
                })?;
                let f = fixed.map(|f| f.hierarchical.as_slice());
                (x, graphs.hierarchical) = hsg_update(tape, p, w, tap, x, &ctx, f)?;
            }
        }
    }
    Ok((x, graphs))
}
