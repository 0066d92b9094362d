//! Multiview hypergraph knowledge-integration head.
//!
//! Each view turns the concatenated branch features into a vertex-feature
//! matrix, links every vertex to its `K` nearest neighbours by one hyperedge,
//! and runs two normalized hypergraph convolutions
//! `Y = relu(Dv^-1/2 · H · W · De^-1 · Hᵀ · Dv^-1/2 · X · Θ)`.
//! The spatial view treats pixels as vertices; the feature view treats
//! channels as vertices. Both outputs are reshaped to maps, concatenated
//! `[spatial ‖ feature]` and classified by a 1×1 layer.

use std::io::Write;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::label::LabelMap;
use crate::pseudo::{trans_labels, StrongTransform};
use crate::tensor::{Bound, Graph, ParamStore, RowOperator, Tensor, Var};

/// Hypergraph with one hyperedge per vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypergraph {
    n: usize,
    /// Sorted vertex list of each hyperedge.
    edges: Vec<Vec<usize>>,
    edge_weights: Vec<f64>,
    vertex_degrees: Vec<f64>,
    edge_degrees: Vec<f64>,
    inv_sqrt_dv: Vec<f64>,
}

impl Hypergraph {
    /// Builds a hypergraph from explicit hyperedges (vertex lists) and weights.
    pub fn from_edges(n: usize, edges: Vec<Vec<usize>>, edge_weights: Vec<f64>) -> Result<Self> {
        if edges.len() != edge_weights.len() {
            return shape_err("Hypergraph::from_edges", &[edges.len()], &[edge_weights.len()]);
        }
        if let Some(w) = edge_weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(Error::Contract(format!("edge weight {w} must be positive")));
        }
        let mut vertex_degrees = vec![0.0; n];
        let mut edge_degrees = Vec::with_capacity(edges.len());
        let mut sorted = Vec::with_capacity(edges.len());
        for (e, members) in edges.into_iter().enumerate() {
            let mut members = members;
            members.sort_unstable();
            members.dedup();
            if let Some(&v) = members.iter().find(|&&v| v >= n) {
                return Err(Error::IndexOutOfRange {
                    what: "vertex",
                    index: v,
                    len: n,
                });
            }
            for &v in &members {
                vertex_degrees[v] += edge_weights[e];
            }
            edge_degrees.push(members.len() as f64);
            sorted.push(members);
        }
        if let Some(v) = vertex_degrees.iter().position(|&d| d <= 0.0) {
            return Err(Error::Singular(v));
        }
        if let Some(e) = edge_degrees.iter().position(|&d| d == 0.0) {
            return Err(Error::Contract(format!("hyperedge {e} is empty")));
        }
        let inv_sqrt_dv = vertex_degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
        Ok(Self {
            n,
            edges: sorted,
            edge_weights,
            vertex_degrees,
            edge_degrees,
            inv_sqrt_dv,
        })
    }

    /// Hyperedge `e_i = {v_i} ∪ N_K(v_i)` for every vertex, where `N_K` are
    /// the `K` nearest other vertices by Euclidean distance (ties to the lower
    /// vertex index). All edge weights are 1.
    pub fn knn(x: &Tensor, k: usize) -> Result<Self> {
        if x.rank() != 2 {
            return shape_err("knn_hyperedges", x.shape(), &[k]);
        }
        let (n, d) = (x.shape()[0], x.shape()[1]);
        if k == 0 || k >= n {
            return Err(Error::Contract(format!(
                "neighbour count {k} must satisfy 1 <= K <= n-1 (n = {n})"
            )));
        }
        let data = x.data();
        let mut dist = vec![0.0; n * n];
        for i in 0..n {
            let xi = &data[i * d..(i + 1) * d];
            for j in i + 1..n {
                let xj = &data[j * d..(j + 1) * d];
                let s: f64 = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
                dist[i * n + j] = s;
                dist[j * n + i] = s;
            }
        }
        let mut edges = Vec::with_capacity(n);
        let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
        for i in 0..n {
            cand.clear();
            cand.extend((0..n).filter(|&j| j != i).map(|j| (dist[i * n + j], j)));
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < cand.len() {
                cand.select_nth_unstable_by(k - 1, cmp);
            }
            let mut e: Vec<usize> = cand[..k].iter().map(|&(_, j)| j).collect();
            e.push(i);
            edges.push(e);
        }
        Self::from_edges(n, edges, vec![1.0; n])
    }

    pub fn with_edge_weights(self, weights: Vec<f64>) -> Result<Self> {
        Self::from_edges(self.n, self.edges, weights)
    }

    pub fn num_vertices(&self) -> usize {
        self.n
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edge(&self, e: usize) -> &[usize] {
        &self.edges[e]
    }

    pub fn edge_weights(&self) -> &[f64] {
        &self.edge_weights
    }

    pub fn vertex_degrees(&self) -> &[f64] {
        &self.vertex_degrees
    }

    pub fn edge_degrees(&self) -> &[f64] {
        &self.edge_degrees
    }

    /// Dense `n × m` incidence matrix.
    pub fn incidence(&self) -> Tensor {
        let m = self.edges.len();
        let mut h = Tensor::zeros(&[self.n, m]);
        for (e, members) in self.edges.iter().enumerate() {
            for &v in members {
                h.data_mut()[v * m + e] = 1.0;
            }
        }
        h
    }

    /// Dense propagation matrix `Dv^-1/2 H W De^-1 Hᵀ Dv^-1/2`, assembled
    /// edge by edge.
    pub fn propagation_matrix(&self) -> Tensor {
        let n = self.n;
        let mut p = Tensor::zeros(&[n, n]);
        for (e, members) in self.edges.iter().enumerate() {
            let s = self.edge_weights[e] / self.edge_degrees[e];
            for &u in members {
                for &v in members {
                    p.data_mut()[u * n + v] += s * self.inv_sqrt_dv[u] * self.inv_sqrt_dv[v];
                }
            }
        }
        p
    }

    /// Writes the incidence as `vertex edge` coordinate lines.
    pub fn write_coo<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "# vertices={} edges={}", self.n, self.edges.len())?;
        for (e, members) in self.edges.iter().enumerate() {
            for &v in members {
                writeln!(w, "{v} {e}")?;
            }
        }
        Ok(())
    }
}

impl RowOperator for Hypergraph {
    fn rows(&self) -> usize {
        self.n
    }

    fn apply(&self, x: &[f64], cols: usize, out: &mut [f64]) {
        let mut acc = vec![0.0; cols];
        out.fill(0.0);
        for (e, members) in self.edges.iter().enumerate() {
            acc.fill(0.0);
            for &v in members {
                let s = self.inv_sqrt_dv[v];
                for (a, xv) in acc.iter_mut().zip(&x[v * cols..(v + 1) * cols]) {
                    *a += s * xv;
                }
            }
            let scale = self.edge_weights[e] / self.edge_degrees[e];
            for &v in members {
                let s = scale * self.inv_sqrt_dv[v];
                for (o, a) in out[v * cols..(v + 1) * cols].iter_mut().zip(&acc) {
                    *o += s * a;
                }
            }
        }
    }

    fn apply_transpose(&self, x: &[f64], cols: usize, out: &mut [f64]) {
        // W and De are diagonal, so the propagation matrix is symmetric.
        self.apply(x, cols, out)
    }
}

/// One hypergraph convolution on a differentiable block `x: B×n×d` with
/// per-sample graphs and a shared `theta: d×out`. The graphs are constants.
pub fn hypergraph_conv(
    g: &mut Graph,
    graphs: &[Arc<Hypergraph>],
    x: Var,
    theta: Var,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 {
        return shape_err("hypergraph_conv", &shape, g.shape(theta));
    }
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    let out_dim = g.shape(theta)[1];
    if g.shape(theta)[0] != d {
        return shape_err("hypergraph_conv", &shape, g.shape(theta));
    }
    let flat = g.reshape(x, &[b * n, d])?;
    let xt = g.matmul(flat, theta)?;
    let xt = g.reshape(xt, &[b, n, out_dim])?;
    let ops = graphs
        .iter()
        .map(|h| Arc::clone(h) as Arc<dyn RowOperator>)
        .collect();
    let y = g.row_operators(xt, ops)?;
    Ok(g.relu(y))
}

/// Value-level convenience for a single graph: `relu(P · X · Θ)`.
pub fn hypergraph_conv_value(graph: &Hypergraph, x: &Tensor, theta: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let n = x.shape()[0];
    let xv = g.constant(x.clone().reshape(&[1, n, x.numel() / n])?);
    let tv = g.constant(theta.clone());
    let y = hypergraph_conv(&mut g, &[Arc::new(graph.clone())], xv, tv)?;
    g.value(y).clone().reshape(&[n, theta.shape()[1]])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Two-view hypergraph integration.
    #[default]
    Hgcn,
    /// Two pointwise conv layers on the concatenated features (ablation).
    Cnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub kind: HeadKind,
    /// Output width of the spatial view; its hidden width is this times `k`.
    pub spatial_channels: usize,
    pub k_spatial: usize,
    pub k_feature: usize,
    /// Average-pool factor applied to the features before the head; logits are
    /// upsampled back bilinearly. 1 keeps the full resolution.
    pub pool: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            kind: HeadKind::Hgcn,
            spatial_channels: 64,
            k_spatial: 64,
            k_feature: 8,
            pool: 1,
        }
    }
}

/// Parameter ids of the integration head inside the model's [`ParamStore`].
#[derive(Debug, Clone)]
pub struct IntegrationHead {
    config: HeadConfig,
    sources: usize,
    expert_channels: usize,
    grid: (usize, usize),
    out_classes: usize,
    layers: HeadLayers,
    classifier: (usize, usize),
}

#[derive(Debug, Clone)]
enum HeadLayers {
    Hgcn {
        spatial: [usize; 2],
        feature: [usize; 2],
    },
    Cnn {
        convs: [(usize, usize); 2],
    },
}

impl IntegrationHead {
    /// Registers head parameters for `sources` experts of width
    /// `expert_channels` on a `height × width` feature map.
    pub fn init<R: Rng>(
        params: &mut ParamStore,
        config: &HeadConfig,
        sources: usize,
        expert_channels: usize,
        (height, width): (usize, usize),
        out_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let pool = config.pool.max(1);
        if height % pool != 0 || width % pool != 0 {
            return Err(Error::Config(format!(
                "head pool {pool} must divide feature size {height}x{width}"
            )));
        }
        let (gh, gw) = (height / pool, width / pool);
        let n = gh * gw;
        let views = sources + 1;
        let in_spatial = expert_channels * views;
        let hid_spatial = config.spatial_channels * sources;
        let out_spatial = config.spatial_channels;
        let layers = match config.kind {
            HeadKind::Hgcn => {
                let s0 = params.push_he("head.spatial.theta0", &[in_spatial, hid_spatial], in_spatial, rng);
                let s1 = params.push_he("head.spatial.theta1", &[hid_spatial, out_spatial], hid_spatial, rng);
                let f0 = params.push_he("head.feature.theta0", &[n * views, n * sources], n * views, rng);
                let f1 = params.push_he("head.feature.theta1", &[n * sources, n], n * sources, rng);
                HeadLayers::Hgcn {
                    spatial: [s0, s1],
                    feature: [f0, f1],
                }
            }
            HeadKind::Cnn => {
                let w0 = params.push_he("head.cnn.w0", &[hid_spatial, in_spatial, 1, 1], in_spatial, rng);
                let b0 = params.push("head.cnn.b0", Tensor::zeros(&[hid_spatial]));
                let w1 = params.push_he("head.cnn.w1", &[out_spatial, hid_spatial, 1, 1], hid_spatial, rng);
                let b1 = params.push("head.cnn.b1", Tensor::zeros(&[out_spatial]));
                HeadLayers::Cnn {
                    convs: [(w0, b0), (w1, b1)],
                }
            }
        };
        let cls_in = match config.kind {
            HeadKind::Hgcn => out_spatial + expert_channels,
            HeadKind::Cnn => out_spatial,
        };
        let cw = params.push_he("head.classifier.w", &[out_classes, cls_in, 1, 1], cls_in, rng);
        let cb = params.push("head.classifier.b", Tensor::zeros(&[out_classes]));
        Ok(Self {
            config: config.clone(),
            sources,
            expert_channels,
            grid: (gh, gw),
            out_classes,
            layers,
            classifier: (cw, cb),
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn out_classes(&self) -> usize {
        self.out_classes
    }

    /// Neighbour counts actually used: `(min(K_s, n−1), min(K_f, N_f−1))`.
    pub fn neighbour_counts(&self) -> (usize, usize) {
        let n = self.grid.0 * self.grid.1;
        (
            self.config.k_spatial.min(n - 1),
            self.config.k_feature.min(self.expert_channels - 1),
        )
    }

    /// Runs the head on `k+1` feature maps (`k` experts then the compressor),
    /// each `B×N_f×H×W`, returning `B×C_out×H×W` logits.
    pub fn integrate(&self, g: &mut Graph, p: &Bound, features: &[Var]) -> Result<Var> {
        if features.len() != self.sources + 1 {
            return shape_err("integrate", &[features.len()], &[self.sources + 1]);
        }
        let first = g.shape(features[0]).to_vec();
        for &f in features {
            if g.shape(f) != first.as_slice() || first[1] != self.expert_channels {
                return shape_err("integrate", &first, g.shape(f));
            }
        }
        let pool = self.config.pool.max(1);
        let mut cat = g.concat(features, 1)?;
        if pool > 1 {
            cat = g.avg_pool(cat, pool)?;
        }
        let b = first[0];
        let (gh, gw) = (g.shape(cat)[2], g.shape(cat)[3]);
        if (gh, gw) != self.grid {
            return shape_err("integrate", &[gh, gw], &[self.grid.0, self.grid.1]);
        }
        let n = gh * gw;
        let views = self.sources + 1;
        let nf = self.expert_channels;
        let channels = views * nf;

        let fused = match &self.layers {
            HeadLayers::Hgcn { spatial, feature } => {
                let (ks, kf) = self.neighbour_counts();
                // spatial view: pixels as vertices, B×n×(N_f·(k+1))
                let x1 = g.reshape(cat, &[b, channels, n])?;
                let x1 = g.permute(x1, &[0, 2, 1])?;
                let graphs1 = per_sample_graphs(g.value(x1), ks)?;
                let y = hypergraph_conv(g, &graphs1, x1, p.var(spatial[0]))?;
                let y = hypergraph_conv(g, &graphs1, y, p.var(spatial[1]))?;
                let out_s = g.shape(y)[2];
                let y = g.permute(y, &[0, 2, 1])?;
                let spatial_map = g.reshape(y, &[b, out_s, gh, gw])?;

                // feature view: channels as vertices, B×N_f×(n·(k+1))
                let x2 = g.reshape(cat, &[b, views, nf, n])?;
                let x2 = g.permute(x2, &[0, 2, 1, 3])?;
                let x2 = g.reshape(x2, &[b, nf, views * n])?;
                let graphs2 = per_sample_graphs(g.value(x2), kf)?;
                let z = hypergraph_conv(g, &graphs2, x2, p.var(feature[0]))?;
                let z = hypergraph_conv(g, &graphs2, z, p.var(feature[1]))?;
                let feature_map = g.reshape(z, &[b, nf, gh, gw])?;

                g.concat(&[spatial_map, feature_map], 1)?
            }
            HeadLayers::Cnn { convs } => {
                let mut h = cat;
                for &(w, bias) in convs {
                    h = g.conv2d(h, p.var(w))?;
                    h = g.channel_bias(h, p.var(bias))?;
                    h = g.relu(h);
                }
                h
            }
        };
        let logits = g.conv2d(fused, p.var(self.classifier.0))?;
        let logits = g.channel_bias(logits, p.var(self.classifier.1))?;
        if pool > 1 {
            g.upsample_bilinear(logits, pool)
        } else {
            Ok(logits)
        }
    }
}

fn per_sample_graphs(x: &Tensor, k: usize) -> Result<Vec<Arc<Hypergraph>>> {
    let (b, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    (0..b)
        .map(|i| {
            let xi = Tensor::new(&[n, d], x.data()[i * n * d..(i + 1) * n * d].to_vec())?;
            Hypergraph::knn(&xi, k).map(Arc::new)
        })
        .collect()
}

/// Loss for multi-domain transfer: the head's logits on strongly transformed
/// targets against the transformed pseudo-labels, weighted by the
/// transformed confidence gate.
///
/// `pseudo` and `gate` are the untransformed teacher outputs (labels already
/// filtered and remapped to the head's class space), one grid per sample.
pub fn multi_domain_loss(
    g: &mut Graph,
    head_logits: Var,
    pseudo: &LabelMap,
    gate: &[f64],
    transforms: &[StrongTransform],
) -> Result<Var> {
    let b = pseudo.batch();
    if transforms.len() != b || gate.len() != pseudo.data().len() {
        return shape_err("multi_domain_loss", &[b, pseudo.data().len()], &[transforms.len(), gate.len()]);
    }
    let plane = pseudo.plane();
    let mut labels = Vec::with_capacity(b);
    let mut weights = Vec::with_capacity(gate.len());
    for (i, t) in transforms.iter().enumerate() {
        let (l, w) = trans_labels(t, &pseudo.sample(i), &gate[i * plane..(i + 1) * plane])?;
        labels.push(l);
        weights.extend(w);
    }
    let labels = LabelMap::stack(&labels)?;
    g.masked_weighted_cross_entropy(head_logits, &labels, &weights)
}
