//! Frame graphs over a video timeline. Each frame is a node, connected to its
//! temporal neighbours inside a fixed window; the symmetric normalised
//! adjacency of that graph drives the label-propagation network.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};
use serde::{Deserialize, Serialize};

/// Norms below this are treated as zero when computing cosine similarity.
const NORM_FLOOR: Real = 1e-12;

/// How edge weights are assigned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeMode {
    /// Every in-window edge gets weight 1.
    Binary,
    /// Edges are weighted by the cosine similarity of the endpoint features,
    /// clamped to `[0, 1]`.
    Weighted,
}

impl std::str::FromStr for EdgeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(EdgeMode::Binary),
            "weighted" => Ok(EdgeMode::Weighted),
            other => Err(Error::Config(format!(
                "unknown edge mode '{other}' (expected 'binary' or 'weighted')"
            ))),
        }
    }
}

impl std::fmt::Display for EdgeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EdgeMode::Binary => write!(f, "binary"),
            EdgeMode::Weighted => write!(f, "weighted"),
        }
    }
}

/// A per-video temporal graph, stored as the dense symmetric-normalised
/// adjacency `D^{-1/2} (A + I) D^{-1/2}`. The matrix is banded with
/// half-bandwidth `(window - 1) / 2`, which `propagate` exploits.
#[derive(Clone, Debug)]
pub struct TemporalGraph {
    num_nodes: usize,
    window: usize,
    edge_mode: EdgeMode,
    norm_adj: Matrix,
}

/// Undirected neighbour pairs `(i, j)` with `i < j` and `|i - j| <= (window-1)/2`,
/// in lexicographic order. Self-loops are not listed; they are added as the
/// identity term during normalisation.
pub fn build_temporal_edges(num_frames: usize, window: usize) -> Result<Vec<(usize, usize)>> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::Config(format!(
            "temporal window must be odd and positive, got {window}"
        )));
    }
    let half = (window - 1) / 2;
    let mut edges = Vec::new();
    for i in 0..num_frames {
        let hi = (i + half).min(num_frames.saturating_sub(1));
        for j in (i + 1)..=hi {
            edges.push((i, j));
        }
    }
    Ok(edges)
}

/// Cosine similarity clamped to `[0, 1]`. Vectors with norm below `1e-12`
/// yield 0 rather than a division blow-up.
pub fn cosine_weight(x: &[Real], y: &[Real]) -> Result<Real> {
    if x.len() != y.len() {
        return Err(Error::shape("cosine_weight", (1, x.len()), (1, y.len())));
    }
    let mut dot = 0.0;
    let mut nx = 0.0;
    let mut ny = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        dot += a * b;
        nx += a * a;
        ny += b * b;
    }
    let nx = nx.sqrt();
    let ny = ny.sqrt();
    if nx < NORM_FLOOR || ny < NORM_FLOOR {
        return Ok(0.0);
    }
    Ok((dot / (nx * ny)).clamp(0.0, 1.0))
}

/// Builds the normalised temporal graph for one video's features (`T x D`).
pub fn build_graph(features: &Matrix, window: usize, edge_mode: EdgeMode) -> Result<TemporalGraph> {
    let t = features.rows();
    if t == 0 {
        return Err(Error::Data("cannot build a graph over zero frames".into()));
    }
    let edges = build_temporal_edges(t, window)?;
    // A + I with the requested edge weights.
    let mut adj = Matrix::identity(t);
    for (i, j) in edges {
        let w = match edge_mode {
            EdgeMode::Binary => 1.0,
            EdgeMode::Weighted => cosine_weight(features.row(i), features.row(j))?,
        };
        adj.set(i, j, w);
        adj.set(j, i, w);
    }
    // Symmetric normalisation. Degrees are at least 1 thanks to the self-loop,
    // so the inverse square roots are always finite.
    let inv_sqrt: Vec<Real> = (0..t)
        .map(|i| {
            let d: Real = adj.row(i).iter().sum();
            1.0 / d.sqrt()
        })
        .collect();
    for i in 0..t {
        let si = inv_sqrt[i];
        for (j, x) in adj.row_mut(i).iter_mut().enumerate() {
            *x *= si * inv_sqrt[j];
        }
    }
    Ok(TemporalGraph {
        num_nodes: t,
        window,
        edge_mode,
        norm_adj: adj,
    })
}

impl TemporalGraph {
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn edge_mode(&self) -> EdgeMode {
        self.edge_mode
    }

    pub fn norm_adj(&self) -> &Matrix {
        &self.norm_adj
    }

    pub fn half_bandwidth(&self) -> usize {
        (self.window - 1) / 2
    }

    /// `norm_adj * m`, walking only the non-zero band instead of the full
    /// `T x T` product.
    pub fn propagate(&self, m: &Matrix) -> Result<Matrix> {
        if m.rows() != self.num_nodes {
            return Err(Error::shape(
                "propagate",
                (self.num_nodes, self.num_nodes),
                m.shape(),
            ));
        }
        let t = self.num_nodes;
        let half = self.half_bandwidth();
        let cols = m.cols();
        let mut out = Matrix::zeros(t, cols);
        for i in 0..t {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(t - 1);
            // Split the borrow: the output row never overlaps `m`.
            let orow = out.row_mut(i);
            for j in lo..=hi {
                let w = self.norm_adj.get(i, j);
                let mrow = m.row(j);
                for (o, &x) in orow.iter_mut().zip(mrow) {
                    *o += w * x;
                }
            }
        }
        Ok(out)
    }
}
