//! Pipelined DAG encoder.
//!
//! Nodes of every live job DAG are grouped into topological batches: batch 0
//! holds all roots, batch j the nodes whose deepest predecessor sits in batch
//! j - 1. Batches with the same index from different jobs are merged. Layer
//! `l` of batch `j` is one *cell*; it needs cell `(l - 1, j)` for the node's
//! previous-layer state and cell `(l, j - 1)` for the predecessors'
//! current-layer state. Running the cells along anti-diagonals finishes in
//! `L + N - 1` stages instead of `L * N`.
//!
//! Per layer `l` and node `v`:
//!
//! ```text
//! m_u   = A_l(H_u^l)                         (linear message)
//! G_v   = max_{u in pred(v)} m_u             (elementwise; 0 for roots)
//! H_v^l = tanh(C_l([G_v ; H_v^{l-1}]))
//! ```
//!
//! with `H_v^0 = tanh(In(x_v))`. The job embedding is
//! `y = tanh(R(mean_{v in sinks} [H_v^L ; H_v^0]))`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CoflowRef, JobDag};
use crate::nn::{Activation, DenseLayer, Matrix, Params};
use crate::sim::Snapshot;

pub const FEATURE_DIM: usize = 7;

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("job graph contains a cycle")]
    Cyclic,
    #[error("edge ({0}, {1}) is out of range")]
    BadEdge(usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub bytes_scale: f64,
    pub flows_scale: f64,
    pub time_scale: f64,
    pub degree_scale: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { bytes_scale: 100.0, flows_scale: 10.0, time_scale: 100.0, degree_scale: 5.0 }
    }
}

/// All live job DAGs flattened onto one global node index.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphBatch {
    /// nodes x FEATURE_DIM (or any width the input layer accepts).
    pub features: Matrix,
    /// Sorted global predecessor ids per node.
    pub preds: Vec<Vec<usize>>,
    /// Job slot of every node.
    pub job_of: Vec<usize>,
    /// Sink nodes of every job slot.
    pub sinks: Vec<Vec<usize>>,
}

impl GraphBatch {
    /// Concatenates per-job DAGs with the given per-node features.
    pub fn from_dags(dags: &[JobDag], features: Matrix) -> Result<Self, EncoderError> {
        let mut preds = Vec::new();
        let mut job_of = Vec::new();
        let mut sinks = Vec::new();
        let mut offset = 0;
        for (slot, dag) in dags.iter().enumerate() {
            for &(p, s) in &dag.edges {
                if p >= dag.node_count || s >= dag.node_count {
                    return Err(EncoderError::BadEdge(p, s));
                }
            }
            let local_succ = dag.successors();
            for local in dag.predecessors() {
                preds.push(local.into_iter().map(|p| p + offset).collect());
                job_of.push(slot);
            }
            sinks.push(
                (0..dag.node_count)
                    .filter(|&v| local_succ[v].is_empty())
                    .map(|v| v + offset)
                    .collect(),
            );
            offset += dag.node_count;
        }
        assert_eq!(features.rows, offset, "one feature row per node");
        Ok(Self { features, preds, job_of, sinks })
    }

    pub fn node_count(&self) -> usize {
        self.preds.len()
    }

    pub fn job_count(&self) -> usize {
        self.sinks.len()
    }
}

/// Turns a scheduler snapshot into a graph batch plus the coflow behind each
/// global node id.
pub fn snapshot_graph(snap: &Snapshot, cfg: &FeatureConfig) -> (GraphBatch, Vec<CoflowRef>) {
    let mut dags = Vec::with_capacity(snap.jobs.len());
    let mut rows = Vec::with_capacity(snap.node_count() * FEATURE_DIM);
    let mut refs = Vec::with_capacity(snap.node_count());
    let ports = snap.port_count.max(1) as f64;
    for job in &snap.jobs {
        let mut edges = Vec::new();
        for c in &job.coflows {
            edges.extend(c.predecessors.iter().map(|&p| (p, c.coflow_id)));
            refs.push(CoflowRef::new(job.job_id, c.coflow_id));
            rows.extend_from_slice(&[
                c.remaining_bytes / cfg.bytes_scale,
                c.unfinished_flows as f64 / cfg.flows_scale,
                c.ingress_ports as f64 / ports,
                c.egress_ports as f64 / ports,
                job.weight,
                (snap.now - job.arrival_time) / cfg.time_scale,
                c.successors as f64 / cfg.degree_scale,
            ]);
        }
        dags.push(JobDag::new(job.coflows.len(), edges));
    }
    let features = Matrix::from_vec(refs.len(), FEATURE_DIM, rows).expect("row-major features");
    let graph = GraphBatch::from_dags(&dags, features).expect("snapshot DAGs are valid");
    (graph, refs)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    /// Global node ids per topological batch, ascending within a batch.
    pub batches: Vec<Vec<usize>>,
    pub layers: usize,
}

impl BatchPlan {
    pub fn batch_count(&self) -> usize {
        self.batches.len()
    }

    /// Cells evaluated one layer at a time: L * N.
    pub fn sequential_cells(&self) -> usize {
        self.layers * self.batches.len()
    }
}

/// Groups nodes by depth across all graphs.
pub fn plan_batches(preds: &[Vec<usize>], layers: usize) -> Result<BatchPlan, EncoderError> {
    let n = preds.len();
    let mut succs = vec![Vec::new(); n];
    let mut indeg = vec![0usize; n];
    for (v, ps) in preds.iter().enumerate() {
        for &p in ps {
            if p >= n {
                return Err(EncoderError::BadEdge(p, v));
            }
            succs[p].push(v);
            indeg[v] += 1;
        }
    }
    let mut depth = vec![0usize; n];
    let mut stack: Vec<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
    let mut seen = 0;
    while let Some(v) = stack.pop() {
        seen += 1;
        for &s in &succs[v] {
            depth[s] = depth[s].max(depth[v] + 1);
            indeg[s] -= 1;
            if indeg[s] == 0 {
                stack.push(s);
            }
        }
    }
    if seen != n {
        return Err(EncoderError::Cyclic);
    }
    let count = depth.iter().max().map_or(0, |d| d + 1);
    let mut batches = vec![Vec::new(); count];
    for v in 0..n {
        batches[depth[v]].push(v);
    }
    Ok(BatchPlan { batches, layers })
}

/// Topological batches for a set of job DAGs, numbered globally in job order.
pub fn topological_batches(dags: &[JobDag], layers: usize) -> Result<BatchPlan, EncoderError> {
    let mut preds = Vec::new();
    let mut offset = 0;
    for dag in dags {
        for &(p, s) in &dag.edges {
            if p >= dag.node_count || s >= dag.node_count {
                return Err(EncoderError::BadEdge(p, s));
            }
        }
        preds.extend(dag.predecessors().into_iter().map(|ps| ps.into_iter().map(|p| p + offset).collect::<Vec<_>>()));
        offset += dag.node_count;
    }
    plan_batches(&preds, layers)
}

/// Wavefront schedule: stage `s` holds every cell `(layer, batch)` with
/// `layer + batch = s`.
pub fn pipeline_schedule(batches: usize, layers: usize) -> Vec<Vec<(usize, usize)>> {
    if batches == 0 || layers == 0 {
        return Vec::new();
    }
    (0..layers + batches - 1)
        .map(|s| {
            (0..layers)
                .filter(|&l| s >= l && s - l < batches)
                .map(|l| (l, s - l))
                .collect()
        })
        .collect()
}

/// Sequential-over-pipelined time ratio `L * N / (L + N - 1)`.
pub fn acceleration_ratio(layers: usize, batches: usize) -> f64 {
    (layers * batches) as f64 / (layers + batches - 1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub input: DenseLayer,
    pub aggregate: Vec<DenseLayer>,
    pub combine: Vec<DenseLayer>,
    pub readout: DenseLayer,
}

impl EncoderParams {
    pub fn new<R: Rng + ?Sized>(features: usize, hidden: usize, job_dim: usize, layers: usize, rng: &mut R) -> Self {
        Self {
            input: DenseLayer::new(features, hidden, Activation::Tanh, rng),
            aggregate: (0..layers)
                .map(|_| DenseLayer::new(hidden, hidden, Activation::Identity, rng))
                .collect(),
            combine: (0..layers)
                .map(|_| DenseLayer::new(2 * hidden, hidden, Activation::Tanh, rng))
                .collect(),
            readout: DenseLayer::new(2 * hidden, job_dim, Activation::Tanh, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.input.outputs()
    }

    pub fn job_dim(&self) -> usize {
        self.readout.outputs()
    }

    pub fn layers(&self) -> usize {
        self.combine.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            input: self.input.zeros_like(),
            aggregate: self.aggregate.iter().map(DenseLayer::zeros_like).collect(),
            combine: self.combine.iter().map(DenseLayer::zeros_like).collect(),
            readout: self.readout.zeros_like(),
        }
    }
}

impl Params for EncoderParams {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut out = self.input.tensors();
        for (a, c) in self.aggregate.iter().zip(&self.combine) {
            out.extend(a.tensors());
            out.extend(c.tensors());
        }
        out.extend(self.readout.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.input.tensors_mut();
        for (a, c) in self.aggregate.iter_mut().zip(self.combine.iter_mut()) {
            out.extend(a.tensors_mut());
            out.extend(c.tensors_mut());
        }
        out.extend(self.readout.tensors_mut());
        out
    }
}

/// Embeddings plus everything the backward pass needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    /// `h[l]` is nodes x hidden for l = 0..=L; node embeddings are `h[L]`.
    pub h: Vec<Matrix>,
    /// Job embeddings, jobs x job_dim.
    pub y: Matrix,
    messages: Vec<Matrix>,
    aggregated: Vec<Matrix>,
    /// Per layer, per node, per coordinate: winning predecessor or `usize::MAX`.
    argmax: Vec<Vec<usize>>,
    readout_in: Matrix,
}

impl Encoded {
    pub fn node_embeddings(&self) -> &Matrix {
        self.h.last().expect("at least the input layer")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Execution {
    /// Cells run along anti-diagonal stages.
    Pipelined,
    /// All batches of layer 1, then all batches of layer 2, ...
    LayerByLayer,
}

/// Encodes every node and job in `graph`.
pub fn dagnn_forward(graph: &GraphBatch, plan: &BatchPlan, params: &EncoderParams, mode: Execution) -> Encoded {
    let n = graph.node_count();
    let d = params.hidden();
    let layers = params.layers();
    debug_assert_eq!(plan.layers, layers);

    let mut h0 = Matrix::zeros(n, d);
    for v in 0..n {
        params.input.forward_row(graph.features.row(v), h0.row_mut(v));
    }
    let mut enc = Encoded {
        h: std::iter::once(h0).chain((0..layers).map(|_| Matrix::zeros(n, d))).collect(),
        y: Matrix::zeros(graph.job_count(), params.job_dim()),
        messages: (0..layers).map(|_| Matrix::zeros(n, d)).collect(),
        aggregated: (0..layers).map(|_| Matrix::zeros(n, d)).collect(),
        argmax: (0..layers).map(|_| vec![usize::MAX; n * d]).collect(),
        readout_in: Matrix::zeros(graph.job_count(), 2 * d),
    };

    match mode {
        Execution::Pipelined => {
            for stage in pipeline_schedule(plan.batch_count(), layers) {
                // Cells of one stage are independent of each other.
                for (layer, batch) in stage {
                    run_cell(graph, plan, params, &mut enc, layer, batch);
                }
            }
        }
        Execution::LayerByLayer => {
            for layer in 0..layers {
                for batch in 0..plan.batch_count() {
                    run_cell(graph, plan, params, &mut enc, layer, batch);
                }
            }
        }
    }

    let mut pooled = vec![0.0; 2 * d];
    for (slot, sinks) in graph.sinks.iter().enumerate() {
        pooled.fill(0.0);
        for &v in sinks {
            for (p, x) in pooled[..d].iter_mut().zip(enc.h[layers].row(v)) {
                *p += x;
            }
            for (p, x) in pooled[d..].iter_mut().zip(enc.h[0].row(v)) {
                *p += x;
            }
        }
        let k = sinks.len().max(1) as f64;
        pooled.iter_mut().for_each(|p| *p /= k);
        enc.readout_in.row_mut(slot).copy_from_slice(&pooled);
        params.readout.forward_row(&pooled, enc.y.row_mut(slot));
    }
    enc
}

/// Evaluates layer `layer` (0-based, producing `h[layer + 1]`) on one batch.
fn run_cell(graph: &GraphBatch, plan: &BatchPlan, params: &EncoderParams, enc: &mut Encoded, layer: usize, batch: usize) {
    let d = params.hidden();
    let mut input = vec![0.0; 2 * d];
    for &v in &plan.batches[batch] {
        let (gate, prev) = input.split_at_mut(d);
        gate.fill(0.0);
        let arg = &mut enc.argmax[layer][v * d..(v + 1) * d];
        let msgs = &enc.messages[layer];
        for (i, &u) in graph.preds[v].iter().enumerate() {
            let m = msgs.row(u);
            for c in 0..d {
                if i == 0 || m[c] > gate[c] {
                    gate[c] = m[c];
                    arg[c] = u;
                }
            }
        }
        enc.aggregated[layer].row_mut(v).copy_from_slice(gate);
        prev.copy_from_slice(enc.h[layer].row(v));
        params.combine[layer].forward_row(&input, enc.h[layer + 1].row_mut(v));
        params.aggregate[layer].forward_row(enc.h[layer + 1].row(v), enc.messages[layer].row_mut(v));
    }
}

/// Gradients of a scalar objective with respect to encoder parameters, given
/// its gradients `d_nodes` (nodes x hidden, w.r.t. final node embeddings) and
/// `d_jobs` (jobs x job_dim). Accumulates into `grads`.
pub fn dagnn_backward(
    graph: &GraphBatch,
    plan: &BatchPlan,
    params: &EncoderParams,
    enc: &Encoded,
    d_nodes: &Matrix,
    d_jobs: &Matrix,
    grads: &mut EncoderParams,
) {
    let n = graph.node_count();
    let d = params.hidden();
    let layers = params.layers();
    let mut dh: Vec<Matrix> = (0..=layers).map(|_| Matrix::zeros(n, d)).collect();
    dh[layers].add_assign(d_nodes);

    let mut d_pooled = vec![0.0; 2 * d];
    for (slot, sinks) in graph.sinks.iter().enumerate() {
        if sinks.is_empty() {
            continue;
        }
        d_pooled.fill(0.0);
        params.readout.backward_row(
            enc.readout_in.row(slot),
            enc.y.row(slot),
            d_jobs.row(slot),
            &mut d_pooled,
            &mut grads.readout,
        );
        let k = sinks.len() as f64;
        for &v in sinks {
            for (g, x) in dh[layers].row_mut(v).iter_mut().zip(&d_pooled[..d]) {
                *g += x / k;
            }
            for (g, x) in dh[0].row_mut(v).iter_mut().zip(&d_pooled[d..]) {
                *g += x / k;
            }
        }
    }

    let mut d_in = vec![0.0; 2 * d];
    for layer in (0..layers).rev() {
        let mut d_msg = Matrix::zeros(n, d);
        let (lower, upper) = dh.split_at_mut(layer + 1);
        let dh_prev = &mut lower[layer];
        let dh_cur = &mut upper[0];
        for batch in plan.batches.iter().rev() {
            for &v in batch.iter().rev() {
                // Successors were visited first, so d_msg[v] is complete.
                params.aggregate[layer].backward_row(
                    enc.h[layer + 1].row(v),
                    enc.messages[layer].row(v),
                    d_msg.row(v),
                    dh_cur.row_mut(v),
                    &mut grads.aggregate[layer],
                );
                d_in.fill(0.0);
                let mut input = Vec::with_capacity(2 * d);
                input.extend_from_slice(enc.aggregated[layer].row(v));
                input.extend_from_slice(enc.h[layer].row(v));
                params.combine[layer].backward_row(
                    &input,
                    enc.h[layer + 1].row(v),
                    dh_cur.row(v),
                    &mut d_in,
                    &mut grads.combine[layer],
                );
                for (g, x) in dh_prev.row_mut(v).iter_mut().zip(&d_in[d..]) {
                    *g += x;
                }
                let arg = &enc.argmax[layer][v * d..(v + 1) * d];
                for c in 0..d {
                    if arg[c] != usize::MAX {
                        d_msg.data[arg[c] * d + c] += d_in[c];
                    }
                }
            }
        }
    }

    let mut sink = vec![0.0; graph.features.cols];
    for v in 0..n {
        params.input.backward_row(graph.features.row(v), enc.h[0].row(v), dh[0].row(v), &mut sink, &mut grads.input);
    }
}
