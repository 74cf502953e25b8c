//! Construction of local, temporal and hierarchical sign graphs.
//!
//! Node ids inside a [`SignGraph`] are local to its [`NodeSpace`]:
//! - local graphs index one frame's grid (`0..N`);
//! - temporal graphs index frame `i` as `0..N` and frame `i+1` as `N..2N`;
//! - hierarchical graphs index the high-resolution grid as `0..N_h` and the
//!   low-resolution grid as `N_h..N_h+N_l`.
//!
//! Edges are unordered pairs stored as `(min, max)`, sorted and unique.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    Local,
    Temporal,
    Hierarchical,
}

impl GraphKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GraphKind::Local => "local",
            GraphKind::Temporal => "temporal",
            GraphKind::Hierarchical => "hierarchical",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    #[default]
    Euclidean,
    Cosine,
    Chebyshev,
}

/// Distance between two equal-length feature vectors.
///
/// Cosine distance involving a zero vector is defined as 1.
pub fn node_distance(a: &[f64], b: &[f64], kind: Distance) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    match kind {
        Distance::Euclidean => a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt(),
        Distance::Chebyshev => a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max),
        Distance::Cosine => {
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return 1.0;
            }
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            // clamp rounding noise so the distance stays non-negative
            (1.0 - dot / (na * nb)).max(0.0)
        }
    }
}

/// Which grids the ids of a graph refer to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeSpace {
    Frame {
        frame: usize,
        nodes: usize,
    },
    AdjacentFrames {
        frame: usize,
        nodes: usize,
    },
    Levels {
        frame: usize,
        high: usize,
        low: usize,
    },
}

impl NodeSpace {
    pub fn num_nodes(&self) -> usize {
        match *self {
            NodeSpace::Frame { nodes, .. } => nodes,
            NodeSpace::AdjacentFrames { nodes, .. } => 2 * nodes,
            NodeSpace::Levels { high, low, .. } => high + low,
        }
    }

    pub fn frame(&self) -> usize {
        match *self {
            NodeSpace::Frame { frame, .. }
            | NodeSpace::AdjacentFrames { frame, .. }
            | NodeSpace::Levels { frame, .. } => frame,
        }
    }

    fn with_frame(self, f: usize) -> Self {
        match self {
            NodeSpace::Frame { nodes, .. } => NodeSpace::Frame { frame: f, nodes },
            NodeSpace::AdjacentFrames { nodes, .. } => {
                NodeSpace::AdjacentFrames { frame: f, nodes }
            }
            NodeSpace::Levels { high, low, .. } => NodeSpace::Levels {
                frame: f,
                high,
                low,
            },
        }
    }

    /// Export label `f{frame}_n{index}` of a local id.
    pub fn label(&self, id: usize) -> String {
        match *self {
            NodeSpace::AdjacentFrames { frame, nodes } if id >= nodes => {
                format!("f{}_n{}", frame + 1, id - nodes)
            }
            _ => format!("f{}_n{}", self.frame(), id),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignGraph {
    pub kind: GraphKind,
    pub edges: Vec<(usize, usize)>,
    pub node_space: NodeSpace,
}

impl SignGraph {
    fn from_pairs(
        kind: GraphKind,
        node_space: NodeSpace,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Self {
        let mut edges: Vec<(usize, usize)> = pairs
            .into_iter()
            .filter(|(a, b)| a != b)
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        Self {
            kind,
            edges,
            node_space,
        }
    }

    pub fn with_frame(mut self, frame: usize) -> Self {
        self.node_space = self.node_space.with_frame(frame);
        self
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.node_space.num_nodes()];
        for &(a, b) in &self.edges {
            deg[a] += 1;
            deg[b] += 1;
        }
        deg
    }

    pub fn labelled_edges(&self) -> Vec<(String, String)> {
        self.edges
            .iter()
            .map(|&(a, b)| (self.node_space.label(a), self.node_space.label(b)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphParams {
    pub k_local: Vec<usize>,
    pub k_temporal: Vec<usize>,
    #[serde(default)]
    pub distance: Distance,
    #[serde(default)]
    pub drop_rate: f64,
}

impl GraphParams {
    pub fn validate(&self) -> Result<()> {
        if self.k_local.iter().chain(&self.k_temporal).any(|&k| k == 0) {
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
}

fn rows_of(features: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let (n, d) = features.dims2().ok_or_else(|| {
        Error::invalid(
            op,
            format!("features must be [N, D], got {:?}", features.shape()),
        )
    })?;
    if n == 0 {
        return Err(Error::invalid(op, "grid has no nodes"));
    }
    Ok((n, d))
}

fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// For every node, connects its `k_l` nearest other nodes (lower index wins
/// ties); the undirected union is returned. `k_l > N - 1` is clamped.
pub fn build_local_graph(features: &Tensor, k_l: usize, kind: Distance) -> Result<SignGraph> {
    let (n, _) = rows_of(features, "build_local_graph")?;
    if k_l == 0 {
        return Err(Error::invalid(
            "build_local_graph",
            "K_l must be at least 1",
        ));
    }
    let k = if k_l > n - 1 {
        if n > 1 {
            log::warn!("K_l={k_l} exceeds N-1={} and was clamped", n - 1);
        }
        n - 1
    } else {
        k_l
    };
    let space = NodeSpace::Frame { frame: 0, nodes: n };
    let mut pairs = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        cand.clear();
        cand.extend(
            (0..n)
                .filter(|&j| j != i)
                .map(|j| (node_distance(features.row(i), features.row(j), kind), j)),
        );
        if k < cand.len() {
            cand.select_nth_unstable_by(k, by_distance_then_index);
            cand.truncate(k);
        }
        pairs.extend(cand.iter().map(|&(_, j)| (i, j)));
    }
    Ok(SignGraph::from_pairs(GraphKind::Local, space, pairs))
}

/// Selects the `min(k_t, N^2)` closest cross-frame pairs `(j, k')`, ties
/// broken lexicographically by `(j, k)`.
pub fn build_temporal_graph(
    current: &Tensor,
    next: &Tensor,
    k_t: usize,
    kind: Distance,
) -> Result<SignGraph> {
    let (n, d) = rows_of(current, "build_temporal_graph")?;
    let (n2, d2) = rows_of(next, "build_temporal_graph")?;
    if n != n2 || d != d2 {
        return Err(Error::shape(
            "build_temporal_graph",
            current.shape(),
            next.shape(),
        ));
    }
    if k_t == 0 {
        return Err(Error::invalid(
            "build_temporal_graph",
            "K_t must be at least 1",
        ));
    }
    let mut pairs: Vec<(f64, usize)> = Vec::with_capacity(n * n);
    for j in 0..n {
        for k in 0..n {
            pairs.push((node_distance(current.row(j), next.row(k), kind), j * n + k));
        }
    }
    let take = k_t.min(n * n);
    if take < pairs.len() {
        pairs.select_nth_unstable_by(take, by_distance_then_index);
        pairs.truncate(take);
    }
    let space = NodeSpace::AdjacentFrames { frame: 0, nodes: n };
    Ok(SignGraph::from_pairs(
        GraphKind::Temporal,
        space,
        pairs.into_iter().map(|(_, p)| (p / n, n + p % n)),
    ))
}

/// Extents of a node grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridShape {
    pub rows: usize,
    pub cols: usize,
}

impl GridShape {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn nodes(&self) -> usize {
        self.rows * self.cols
    }
}

/// Low-resolution node covering high-resolution node `j`.
pub fn hierarchical_parent(j: usize, high_cols: usize, low_cols: usize, s: usize) -> usize {
    (j / high_cols) / s * low_cols + (j % high_cols) / s
}

/// Connects each high-resolution node to the low-resolution node of the
/// same region. Requires `high = s * low` in both extents.
pub fn build_hierarchical_graph(high: GridShape, low: GridShape, s: usize) -> Result<SignGraph> {
    if s == 0 || high.rows != s * low.rows || high.cols != s * low.cols {
        return Err(Error::invalid(
            "build_hierarchical_graph",
            format!(
                "high grid {}x{} is not {s} times low grid {}x{}",
                high.rows, high.cols, low.rows, low.cols
            ),
        ));
    }
    let nh = high.nodes();
    let space = NodeSpace::Levels {
        frame: 0,
        high: nh,
        low: low.nodes(),
    };
    Ok(SignGraph::from_pairs(
        GraphKind::Hierarchical,
        space,
        (0..nh).map(|j| (j, nh + hierarchical_parent(j, high.cols, low.cols, s))),
    ))
}

/// Keeps each edge independently with probability `1 - rate`.
pub fn drop_edges(g: &SignGraph, rate: f64, seed: u64) -> Result<SignGraph> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(
            "drop_edges",
            format!("rate {rate} outside [0, 1)"),
        ));
    }
    if rate == 0.0 {
        return Ok(g.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges = g
        .edges
        .iter()
        .copied()
        .filter(|_| rng.gen::<f64>() >= rate)
        .collect();
    Ok(SignGraph {
        kind: g.kind,
        edges,
        node_space: g.node_space,
    })
}

/// DOT text for a set of graphs (one `--` statement per edge).
pub fn to_dot(name: &str, graphs: &[SignGraph]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "graph {name} {{");
    for g in graphs {
        for (a, b) in g.labelled_edges() {
            let _ = writeln!(out, "  {a} -- {b};");
        }
    }
    out.push_str("}\n");
    out
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct GraphJson {
    pub kind: GraphKind,
    pub edges: Vec<[String; 2]>,
}

pub fn to_json(kind: GraphKind, graphs: &[SignGraph]) -> Result<String> {
    let doc = GraphJson {
        kind,
        edges: graphs
            .iter()
            .flat_map(SignGraph::labelled_edges)
            .map(|(a, b)| [a, b])
            .collect(),
    };
    serde_json::to_string_pretty(&doc).map_err(|e| Error::json("graph export", e))
}

/// Minimal grammar check for the DOT subset written by [`to_dot`]:
/// `graph ID { (ID -- ID ;)* }`. Returns the edge list.
pub fn parse_dot(text: &str) -> Result<Vec<(String, String)>> {
    let bad = |m: &str| Error::Format(format!("dot: {m}"));
    let is_id = |s: &str| {
        !s.is_empty()
            && !s.starts_with(|c: char| c.is_ascii_digit())
            && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
    };
    let mut toks = text.split_whitespace().flat_map(|t| {
        // split trailing punctuation into its own token
        let mut parts = Vec::new();
        let mut rest = t;
        while let Some(stripped) = rest
            .strip_suffix(';')
            .or_else(|| rest.strip_suffix('{').filter(|_| rest.len() > 1))
        {
            let sep = &rest[stripped.len()..];
            rest = stripped;
            parts.push(sep);
        }
        parts.push(rest);
        parts.reverse();
        parts.into_iter().filter(|p| !p.is_empty())
    });
    if toks.next() != Some("graph") {
        return Err(bad("expected `graph`"));
    }
    match toks.next() {
        Some(id) if is_id(id) => {}
        _ => return Err(bad("expected graph name")),
    }
    if toks.next() != Some("{") {
        return Err(bad("expected `{`"));
    }
    let mut edges = Vec::new();
    loop {
        match toks.next() {
            Some("}") => break,
            Some(a) if is_id(a) => {
                if toks.next() != Some("--") {
                    return Err(bad("expected `--`"));
                }
                let b = toks
                    .next()
                    .filter(|b| is_id(b))
                    .ok_or_else(|| bad("expected node id"))?;
                if toks.next() != Some(";") {
                    return Err(bad("expected `;`"));
                }
                edges.push((a.to_owned(), b.to_owned()));
            }
            Some(other) => return Err(bad(&format!("unexpected token {other:?}"))),
            None => return Err(bad("unterminated graph")),
        }
    }
    if toks.next().is_some() {
        return Err(bad("trailing input"));
    }
    Ok(edges)
}
