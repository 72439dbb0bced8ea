//! Scoring and ordering of schedulable coflows.
//!
//! The default head runs single-head scaled dot-product attention over the
//! candidate node embeddings, concatenates each result with its job's
//! embedding and maps it to a scalar with a small relu network. The score is
//! multiplied by the job weight to give the priority. Two ablations share the
//! encoder: `NoAttention` feeds node embeddings straight to the scorer, and
//! `Flat` scores every slot at once from one zero-padded concatenation of all
//! node embeddings.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{
    dagnn_backward, dagnn_forward, plan_batches, snapshot_graph, BatchPlan, Encoded, EncoderError, EncoderParams,
    Execution, FeatureConfig, GraphBatch, FEATURE_DIM,
};
use crate::model::CoflowRef;
use crate::nn::{softmax, Activation, DenseLayer, Matrix, NnError, Params};
use crate::sim::{Scheduler, SimError, Snapshot};

pub const CHECKPOINT_HEADER: &str = "coflowforge-checkpoint v1";

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("snapshot has {nodes} nodes but the flat policy holds at most {max}")]
    Capacity { nodes: usize, max: usize },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<PolicyError> for SimError {
    fn from(e: PolicyError) -> Self {
        SimError::Scheduler(e.to_string())
    }
}

// ---------------------------------------------------------------------------
// Attention

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
}

impl AttentionParams {
    pub fn new<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self { wq: Matrix::glorot(dim, dim, rng), wk: Matrix::glorot(dim, dim, rng), wv: Matrix::glorot(dim, dim, rng) }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { wq: Matrix::zeros(dim, dim), wk: Matrix::zeros(dim, dim), wv: Matrix::zeros(dim, dim) }
    }

    pub fn dim(&self) -> usize {
        self.wq.rows
    }
}

impl Params for AttentionParams {
    fn tensors(&self) -> Vec<&Matrix> {
        vec![&self.wq, &self.wk, &self.wv]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.wq, &mut self.wk, &mut self.wv]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionCache {
    pub z: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Row-stochastic attention weights, n x n.
    pub a: Matrix,
}

/// Sum that does not depend on the order of `terms`, so permuting the input
/// rows permutes the output rows bit for bit.
fn canonical_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

/// `S = softmax(Q K^T / sqrt(d)) V` with `Q = Z Wq`, `K = Z Wk`, `V = Z Wv`.
pub fn self_attention(z: &Matrix, p: &AttentionParams) -> Result<(Matrix, AttentionCache), NnError> {
    let q = z.matmul(&p.wq)?;
    let k = z.matmul(&p.wk)?;
    let v = z.matmul(&p.wv)?;
    let n = z.rows;
    let d = p.dim();
    let scale = 1.0 / (d as f64).sqrt();
    let mut a = q.matmul_t(&k)?;
    let mut buf = vec![0.0; n];
    for i in 0..n {
        let row = a.row_mut(i);
        let m = row.iter().map(|x| x * scale).fold(f64::NEG_INFINITY, f64::max);
        for x in row.iter_mut() {
            *x = (*x * scale - m).exp();
        }
        buf.copy_from_slice(row);
        let total = canonical_sum(&mut buf);
        row.iter_mut().for_each(|x| *x /= total);
    }
    let mut s = Matrix::zeros(n, d);
    for i in 0..n {
        for c in 0..d {
            for j in 0..n {
                buf[j] = a.get(i, j) * v.get(j, c);
            }
            s.data[i * d + c] = canonical_sum(&mut buf);
        }
    }
    Ok((s, AttentionCache { z: z.clone(), q, k, v, a }))
}

/// Backward of [`self_attention`]: accumulates parameter gradients and
/// returns `dL/dZ`.
pub fn attention_backward(p: &AttentionParams, cache: &AttentionCache, ds: &Matrix, grads: &mut AttentionParams) -> Matrix {
    let n = cache.z.rows;
    let scale = 1.0 / (p.dim() as f64).sqrt();
    let ok = "attention shapes are consistent";
    let da = ds.matmul_t(&cache.v).expect(ok);
    let dv = cache.a.t_matmul(ds).expect(ok);
    let mut dl = Matrix::zeros(n, n);
    for i in 0..n {
        let a = cache.a.row(i);
        let g = da.row(i);
        let inner: f64 = a.iter().zip(g).map(|(x, y)| x * y).sum();
        for j in 0..n {
            dl.data[i * n + j] = a[j] * (g[j] - inner) * scale;
        }
    }
    let dq = dl.matmul(&cache.k).expect(ok);
    let dk = dl.t_matmul(&cache.q).expect(ok);
    grads.wq.add_assign(&cache.z.t_matmul(&dq).expect(ok));
    grads.wk.add_assign(&cache.z.t_matmul(&dk).expect(ok));
    grads.wv.add_assign(&cache.z.t_matmul(&dv).expect(ok));
    let mut dz = dq.matmul_t(&p.wq).expect(ok);
    dz.add_assign(&dk.matmul_t(&p.wk).expect(ok));
    dz.add_assign(&dv.matmul_t(&p.wv).expect(ok));
    dz
}

// ---------------------------------------------------------------------------
// Scoring heads

/// `[in -> 32 relu -> 16 relu -> 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreNet {
    pub layers: Vec<DenseLayer>,
}

impl ScoreNet {
    pub fn new<R: Rng + ?Sized>(inputs: usize, rng: &mut R) -> Self {
        Self {
            layers: vec![
                DenseLayer::new(inputs, 32, Activation::Relu, rng),
                DenseLayer::new(32, 16, Activation::Relu, rng),
                DenseLayer::new(16, 1, Activation::Identity, rng),
            ],
        }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    /// Returns the activations of every layer, input first; the score is the
    /// single entry of the last one.
    pub fn forward(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        for layer in &self.layers {
            let next = layer.forward_vec(acts.last().expect("nonempty"));
            acts.push(next);
        }
        acts
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        self.forward(x).last().expect("nonempty")[0]
    }

    /// Accumulates gradients for upstream `dq` and returns `dL/dx`.
    pub fn backward(&self, acts: &[Vec<f64>], dq: f64, grads: &mut ScoreNet) -> Vec<f64> {
        let mut dy = vec![dq];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let mut dx = vec![0.0; layer.inputs()];
            layer.backward_row(&acts[i], &acts[i + 1], &dy, &mut dx, &mut grads.layers[i]);
            dy = dx;
        }
        dy
    }

    pub fn zeros_like(&self) -> Self {
        Self { layers: self.layers.iter().map(DenseLayer::zeros_like).collect() }
    }
}

impl Params for ScoreNet {
    fn tensors(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }
}

/// `[max_nodes * d -> 64 relu -> max_nodes]` over all node embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatNet {
    pub max_nodes: usize,
    pub hidden: DenseLayer,
    pub out: DenseLayer,
}

impl FlatNet {
    pub fn new<R: Rng + ?Sized>(max_nodes: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            max_nodes,
            hidden: DenseLayer::new(max_nodes * dim, 64, Activation::Relu, rng),
            out: DenseLayer::new(64, max_nodes, Activation::Identity, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self { max_nodes: self.max_nodes, hidden: self.hidden.zeros_like(), out: self.out.zeros_like() }
    }
}

impl Params for FlatNet {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut t = self.hidden.tensors();
        t.extend(self.out.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut t = self.hidden.tensors_mut();
        t.extend(self.out.tensors_mut());
        t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Attention { attention: AttentionParams, score: ScoreNet },
    NoAttention { score: ScoreNet },
    Flat { net: FlatNet },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Attention,
    NoAttention,
    Flat { max_nodes: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub hidden: usize,
    pub job_dim: usize,
    pub layers: usize,
    pub features: FeatureConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { kind: PolicyKind::Attention, hidden: 16, job_dim: 16, layers: 2, features: FeatureConfig::default() }
    }
}

impl PolicyConfig {
    pub fn with_kind(kind: PolicyKind) -> Self {
        Self { kind, ..Self::default() }
    }
}

/// Encoder plus scoring head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyNet {
    pub config: PolicyConfig,
    pub encoder: EncoderParams,
    pub head: Head,
}

impl PolicyNet {
    pub fn new(config: PolicyConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams::new(FEATURE_DIM, config.hidden, config.job_dim, config.layers, &mut rng);
        let head = match config.kind {
            PolicyKind::Attention => Head::Attention {
                attention: AttentionParams::new(config.hidden, &mut rng),
                score: ScoreNet::new(config.hidden + config.job_dim, &mut rng),
            },
            PolicyKind::NoAttention => Head::NoAttention { score: ScoreNet::new(config.hidden + config.job_dim, &mut rng) },
            PolicyKind::Flat { max_nodes } => Head::Flat { net: FlatNet::new(max_nodes, config.hidden, &mut rng) },
        };
        Self { config, encoder, head }
    }

    pub fn zeros_like(&self) -> Self {
        let head = match &self.head {
            Head::Attention { attention, score } => Head::Attention {
                attention: AttentionParams::zeros(attention.dim()),
                score: score.zeros_like(),
            },
            Head::NoAttention { score } => Head::NoAttention { score: score.zeros_like() },
            Head::Flat { net } => Head::Flat { net: net.zeros_like() },
        };
        Self { config: self.config, encoder: self.encoder.zeros_like(), head }
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        fs::write(path, self.to_checkpoint_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        Self::from_checkpoint_str(&fs::read_to_string(path)?)
    }

    pub fn to_checkpoint_string(&self) -> String {
        format!("{CHECKPOINT_HEADER}\n{}\n", serde_json::to_string(self).expect("policy serializes"))
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self, PolicyError> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == CHECKPOINT_HEADER => {}
            Some(h) => return Err(PolicyError::Checkpoint(format!("unexpected header {h:?}"))),
            None => return Err(PolicyError::Checkpoint("empty file".into())),
        }
        let body: String = lines.collect();
        let net: PolicyNet = serde_json::from_str(&body).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        let shapes_ok = net.encoder.input.inputs() == FEATURE_DIM
            && net.encoder.hidden() == net.config.hidden
            && net.encoder.layers() == net.config.layers;
        if !shapes_ok {
            return Err(PolicyError::Checkpoint("layer shapes disagree with config".into()));
        }
        Ok(net)
    }
}

impl Params for PolicyNet {
    fn tensors(&self) -> Vec<&Matrix> {
        let mut t = self.encoder.tensors();
        match &self.head {
            Head::Attention { attention, score } => {
                t.extend(attention.tensors());
                t.extend(score.tensors());
            }
            Head::NoAttention { score } => t.extend(score.tensors()),
            Head::Flat { net } => t.extend(net.tensors()),
        }
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut t = self.encoder.tensors_mut();
        match &mut self.head {
            Head::Attention { attention, score } => {
                t.extend(attention.tensors_mut());
                t.extend(score.tensors_mut());
            }
            Head::NoAttention { score } => t.extend(score.tensors_mut()),
            Head::Flat { net } => t.extend(net.tensors_mut()),
        }
        t
    }
}

// ---------------------------------------------------------------------------
// Scoring a decision

/// Everything needed to score one ordering event, detached from the simulator
/// so that it can be replayed during the update.
#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    pub graph: GraphBatch,
    pub plan: BatchPlan,
    /// Candidates in snapshot order.
    pub candidates: Vec<CoflowRef>,
    /// Global node index per candidate.
    pub nodes: Vec<usize>,
    /// Job slot per candidate.
    pub slots: Vec<usize>,
    pub weights: Vec<f64>,
    pub arrivals: Vec<f64>,
}

impl Decision {
    pub fn from_snapshot(snap: &Snapshot, config: &PolicyConfig) -> Self {
        let (graph, refs) = snapshot_graph(snap, &config.features);
        let plan = plan_batches(&graph.preds, config.layers).expect("snapshot DAGs are acyclic");
        let index: HashMap<CoflowRef, usize> = refs.iter().enumerate().map(|(i, &r)| (r, i)).collect();
        let mut nodes = Vec::with_capacity(snap.candidates.len());
        let mut slots = Vec::with_capacity(snap.candidates.len());
        let mut weights = Vec::with_capacity(snap.candidates.len());
        let mut arrivals = Vec::with_capacity(snap.candidates.len());
        for c in &snap.candidates {
            let node = index[c];
            let slot = graph.job_of[node];
            nodes.push(node);
            slots.push(slot);
            weights.push(snap.jobs[slot].weight);
            arrivals.push(snap.jobs[slot].arrival_time);
        }
        Self { graph, plan, candidates: snap.candidates.clone(), nodes, slots, weights, arrivals }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct ScoreCache {
    encoded: Encoded,
    attention: Option<AttentionCache>,
    /// Score-net activations per candidate.
    acts: Vec<Vec<Vec<f64>>>,
    /// Flat head: padded input, hidden and output.
    flat: Option<(Vec<f64>, Vec<f64>, Vec<f64>)>,
}

/// Raw scores `q_v`, one per candidate.
pub fn score_candidates(net: &PolicyNet, dec: &Decision) -> Result<(Vec<f64>, ScoreCache), PolicyError> {
    if let Head::Flat { net: flat } = &net.head {
        if dec.graph.node_count() > flat.max_nodes {
            return Err(PolicyError::Capacity { nodes: dec.graph.node_count(), max: flat.max_nodes });
        }
    }
    let encoded = dagnn_forward(&dec.graph, &dec.plan, &net.encoder, Execution::Pipelined);
    let e = encoded.node_embeddings();
    let d = net.config.hidden;
    let gather = || {
        let mut z = Matrix::zeros(dec.len(), d);
        for (i, &v) in dec.nodes.iter().enumerate() {
            z.row_mut(i).copy_from_slice(e.row(v));
        }
        z
    };
    let score_rows = |s: &Matrix, score: &ScoreNet| -> Vec<Vec<Vec<f64>>> {
        (0..dec.len())
            .map(|i| {
                let x: Vec<f64> = s.row(i).iter().chain(encoded.y.row(dec.slots[i])).copied().collect();
                score.forward(&x)
            })
            .collect()
    };
    let (q, attention, acts, flat) = match &net.head {
        Head::Attention { attention, score } => {
            let (s, cache) = self_attention(&gather(), attention)?;
            let acts = score_rows(&s, score);
            (acts.iter().map(|a| a[3][0]).collect(), Some(cache), acts, None)
        }
        Head::NoAttention { score } => {
            let acts = score_rows(&gather(), score);
            (acts.iter().map(|a| a[3][0]).collect(), None, acts, None)
        }
        Head::Flat { net: flat } => {
            let mut input = vec![0.0; flat.max_nodes * d];
            input[..e.data.len()].copy_from_slice(&e.data);
            let hidden = flat.hidden.forward_vec(&input);
            let out = flat.out.forward_vec(&hidden);
            let q = dec.nodes.iter().map(|&v| out[v]).collect();
            (q, None, Vec::new(), Some((input, hidden, out)))
        }
    };
    Ok((q, ScoreCache { encoded, attention, acts, flat }))
}

/// Accumulates `sum_i dq[i] * d q_i / d theta` into `grads`.
pub fn score_backward(net: &PolicyNet, dec: &Decision, cache: &ScoreCache, dq: &[f64], grads: &mut PolicyNet) {
    let d = net.config.hidden;
    let n = dec.graph.node_count();
    let mut d_nodes = Matrix::zeros(n, d);
    let mut d_jobs = Matrix::zeros(dec.graph.job_count(), net.config.job_dim);
    let mut scored = |score: &ScoreNet, gscore: &mut ScoreNet| -> Matrix {
        let mut ds = Matrix::zeros(dec.len(), d);
        for i in 0..dec.len() {
            if dq[i] == 0.0 {
                continue;
            }
            let dx = score.backward(&cache.acts[i], dq[i], gscore);
            for (a, b) in ds.row_mut(i).iter_mut().zip(&dx[..d]) {
                *a += b;
            }
            for (a, b) in d_jobs.row_mut(dec.slots[i]).iter_mut().zip(&dx[d..]) {
                *a += b;
            }
        }
        ds
    };
    match (&net.head, &mut grads.head) {
        (Head::Attention { attention, score }, Head::Attention { attention: ga, score: gs }) => {
            let ds = scored(score, gs);
            let dz = attention_backward(attention, cache.attention.as_ref().expect("attention cache"), &ds, ga);
            for (i, &v) in dec.nodes.iter().enumerate() {
                for (a, b) in d_nodes.row_mut(v).iter_mut().zip(dz.row(i)) {
                    *a += b;
                }
            }
        }
        (Head::NoAttention { score }, Head::NoAttention { score: gs }) => {
            let ds = scored(score, gs);
            for (i, &v) in dec.nodes.iter().enumerate() {
                for (a, b) in d_nodes.row_mut(v).iter_mut().zip(ds.row(i)) {
                    *a += b;
                }
            }
        }
        (Head::Flat { net: flat }, Head::Flat { net: gf }) => {
            let (input, hidden, out) = cache.flat.as_ref().expect("flat cache");
            let mut d_out = vec![0.0; flat.max_nodes];
            for (i, &v) in dec.nodes.iter().enumerate() {
                d_out[v] += dq[i];
            }
            let mut d_hidden = vec![0.0; hidden.len()];
            flat.out.backward_row(hidden, out, &d_out, &mut d_hidden, &mut gf.out);
            let mut d_input = vec![0.0; input.len()];
            flat.hidden.backward_row(input, hidden, &d_hidden, &mut d_input, &mut gf.hidden);
            d_nodes.data.copy_from_slice(&d_input[..n * d]);
        }
        _ => panic!("gradient buffer has a different head than the model"),
    }
    dagnn_backward(&dec.graph, &dec.plan, &net.encoder, &cache.encoded, &d_nodes, &d_jobs, &mut grads.encoder);
}

// ---------------------------------------------------------------------------
// Ordering

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Greedy,
    Sample,
}

/// Candidate indices by descending priority; ties go to the earlier job
/// arrival, then the lower coflow id, then the lower job id.
pub fn greedy_order(p: &[f64], arrivals: &[f64], refs: &[CoflowRef]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| {
        p[b].total_cmp(&p[a])
            .then(arrivals[a].total_cmp(&arrivals[b]))
            .then(refs[a].coflow.cmp(&refs[b].coflow))
            .then(refs[a].job.cmp(&refs[b].job))
    });
    idx
}

/// Draws a full ordering from the Plackett-Luce distribution with utilities
/// `p`: repeatedly softmax-sample the next head among the remaining items.
pub fn plackett_luce_sample<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> (Vec<usize>, f64) {
    let mut remaining: Vec<usize> = (0..p.len()).collect();
    let mut order = Vec::with_capacity(p.len());
    let mut log_prob = 0.0;
    while !remaining.is_empty() {
        let probs = softmax(&remaining.iter().map(|&i| p[i]).collect::<Vec<_>>());
        let u: f64 = rng.gen();
        let mut pick = probs.len() - 1;
        let mut acc = 0.0;
        for (k, &pr) in probs.iter().enumerate() {
            acc += pr;
            if u < acc {
                pick = k;
                break;
            }
        }
        log_prob += probs[pick].ln();
        order.push(remaining.remove(pick));
    }
    (order, log_prob)
}

pub fn plackett_luce_log_prob(p: &[f64], order: &[usize]) -> f64 {
    let mut total = 0.0;
    for t in 0..order.len() {
        let rest: Vec<f64> = order[t..].iter().map(|&i| p[i]).collect();
        total += p[order[t]] - crate::nn::log_sum_exp(&rest);
    }
    total
}

/// `d log P(order) / d p`.
pub fn plackett_luce_grad(p: &[f64], order: &[usize]) -> Vec<f64> {
    let mut g = vec![1.0; p.len()];
    for t in 0..order.len() {
        let probs = softmax(&order[t..].iter().map(|&i| p[i]).collect::<Vec<_>>());
        for (&i, pr) in order[t..].iter().zip(probs) {
            g[i] -= pr;
        }
    }
    g
}

/// Weight-multiplied priorities `p_v = q_v * w_v`.
pub fn priorities(q: &[f64], weights: &[f64]) -> Vec<f64> {
    q.iter().zip(weights).map(|(q, w)| q * w).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorityList {
    /// Highest priority first.
    pub entries: Vec<(CoflowRef, f64)>,
    /// Candidate indices in list order.
    pub order: Vec<usize>,
    pub log_prob: f64,
}

pub fn build_priority_list<R: Rng + ?Sized>(
    q: &[f64],
    weights: &[f64],
    arrivals: &[f64],
    refs: &[CoflowRef],
    mode: Mode,
    rng: &mut R,
) -> PriorityList {
    let p = priorities(q, weights);
    let (order, log_prob) = match mode {
        Mode::Greedy => (greedy_order(&p, arrivals, refs), 0.0),
        Mode::Sample => plackett_luce_sample(&p, rng),
    };
    PriorityList { entries: order.iter().map(|&i| (refs[i], p[i])).collect(), order, log_prob }
}

/// One recorded ordering action.
#[derive(Clone, Debug)]
pub struct Step {
    pub time: f64,
    pub decision: Decision,
    pub order: Vec<usize>,
    pub log_prob: f64,
}

/// Learned scheduler. Greedy mode is deterministic; sample mode draws from
/// the policy with its own seeded stream and can record each action.
pub struct PolicyAgent<'a> {
    pub net: &'a PolicyNet,
    pub mode: Mode,
    rng: ChaCha8Rng,
    steps: Option<Vec<Step>>,
}

impl<'a> PolicyAgent<'a> {
    pub fn greedy(net: &'a PolicyNet) -> Self {
        Self { net, mode: Mode::Greedy, rng: ChaCha8Rng::seed_from_u64(0), steps: None }
    }

    pub fn sampling(net: &'a PolicyNet, seed: u64) -> Self {
        Self { net, mode: Mode::Sample, rng: ChaCha8Rng::seed_from_u64(seed), steps: None }
    }

    pub fn recording(mut self) -> Self {
        self.steps = Some(Vec::new());
        self
    }

    pub fn into_steps(self) -> Vec<Step> {
        self.steps.unwrap_or_default()
    }
}

impl Scheduler for PolicyAgent<'_> {
    fn order(&mut self, snapshot: &Snapshot) -> Result<Vec<CoflowRef>, SimError> {
        let dec = Decision::from_snapshot(snapshot, &self.net.config);
        let (q, _) = score_candidates(self.net, &dec)?;
        let list = build_priority_list(&q, &dec.weights, &dec.arrivals, &dec.candidates, self.mode, &mut self.rng);
        let out = list.entries.iter().map(|e| e.0).collect();
        if let Some(steps) = &mut self.steps {
            steps.push(Step { time: snapshot.now, decision: dec, order: list.order, log_prob: list.log_prob });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_inputs, check_params, TOL};
    use crate::nn::Params;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_matrix(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn refs(n: usize) -> Vec<CoflowRef> {
        (0..n).map(|i| CoflowRef::new(i, 0)).collect()
    }

    #[test]
    fn single_row_attention_is_value_projection() {
        let mut r = rng(1);
        let p = AttentionParams::new(4, &mut r);
        let z = random_matrix(1, 4, &mut r);
        let (s, _) = self_attention(&z, &p).unwrap();
        assert_eq!(s, z.matmul(&p.wv).unwrap());
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let mut r = rng(2);
        let p = AttentionParams::new(5, &mut r);
        let row: Vec<f64> = (0..5).map(|_| r.gen_range(-1.0..1.0)).collect();
        let z = Matrix::from_rows(&[row.clone(), row.clone(), row]).unwrap();
        let (s, _) = self_attention(&z, &p).unwrap();
        assert_eq!(s.row(0), s.row(1));
        assert_eq!(s.row(1), s.row(2));
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut r = rng(3);
        let p = AttentionParams::new(16, &mut r);
        let z = random_matrix(7, 16, &mut r);
        let (_, cache) = self_attention(&z, &p).unwrap();
        for i in 0..7 {
            let s: f64 = cache.a.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(cache.a.row(i).iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let mut r = rng(4);
        let p = AttentionParams::new(16, &mut r);
        let z = random_matrix(6, 16, &mut r);
        let (s, _) = self_attention(&z, &p).unwrap();
        for _ in 0..50 {
            let mut perm: Vec<usize> = (0..6).collect();
            rand::seq::SliceRandom::shuffle(&mut perm[..], &mut r);
            let pz = Matrix::from_rows(&perm.iter().map(|&i| z.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
            let (ps, _) = self_attention(&pz, &p).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                assert_eq!(ps.row(k), s.row(i));
            }
        }
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut r = rng(5);
        for n in 1..=4 {
            let p = AttentionParams::new(6, &mut r);
            let z = random_matrix(n, 6, &mut r);
            let probe = random_matrix(n, 6, &mut r);
            let loss = |p: &AttentionParams, z: &Matrix| {
                let (s, _) = self_attention(z, p).unwrap();
                crate::nn::dot(&s.data, &probe.data)
            };
            let (_, cache) = self_attention(&z, &p).unwrap();
            let mut grads = AttentionParams::zeros(6);
            let dz = attention_backward(&p, &cache, &probe, &mut grads);
            assert!(check_params(&p, &grads, |q| loss(q, &z)) < TOL);
            let err = check_inputs(&z.data, &dz.data, |x| loss(&p, &Matrix::from_vec(n, 6, x.to_vec()).unwrap()));
            assert!(err < TOL, "n={n}: {err}");
        }
    }

    #[test]
    fn zero_final_layer_scores_zero() {
        let mut r = rng(6);
        let mut net = ScoreNet::new(8, &mut r);
        net.layers[2] = net.layers[2].zeros_like();
        for _ in 0..5 {
            let x: Vec<f64> = (0..8).map(|_| r.gen_range(-1.0..1.0)).collect();
            assert_eq!(net.score(&x), 0.0);
        }
    }

    #[test]
    fn score_net_gradient_matches_finite_differences() {
        let mut r = rng(7);
        let net = ScoreNet::new(8, &mut r);
        let x: Vec<f64> = (0..8).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut grads = net.zeros_like();
        let dx = net.backward(&net.forward(&x), 1.0, &mut grads);
        assert!(check_params(&net, &grads, |n| n.score(&x)) < TOL);
        assert!(check_inputs(&x, &dx, |x| net.score(x)) < TOL);
    }

    #[test]
    fn weight_multiplication_reorders() {
        let list = build_priority_list(&[2.0, 1.0], &[1.0, 3.0], &[0.0, 0.0], &refs(2), Mode::Greedy, &mut rng(0));
        assert_eq!(list.order, vec![1, 0]);
        assert_eq!(list.entries[0].1, 3.0);
        assert_eq!(list.entries[1].1, 2.0);
    }

    #[test]
    fn ties_go_to_earlier_arrival_then_lower_coflow() {
        let r = vec![CoflowRef::new(7, 2), CoflowRef::new(3, 1), CoflowRef::new(3, 0)];
        let order = greedy_order(&[1.0, 1.0, 1.0], &[5.0, 2.0, 2.0], &r);
        assert_eq!(order, vec![2, 1, 0]);
    }

    #[test]
    fn greedy_is_scale_invariant() {
        let mut r = rng(8);
        for _ in 0..20 {
            let p: Vec<f64> = (0..6).map(|_| r.gen_range(-3.0..3.0)).collect();
            let s = r.gen_range(0.1..10.0);
            let scaled: Vec<f64> = p.iter().map(|x| x * s).collect();
            let arr = vec![0.0; 6];
            assert_eq!(greedy_order(&p, &arr, &refs(6)), greedy_order(&scaled, &arr, &refs(6)));
        }
    }

    #[test]
    fn plackett_luce_head_frequency() {
        let mut r = rng(9);
        let p = [2f64.ln(), 0.0];
        let draws = 100_000;
        let first = (0..draws).filter(|_| plackett_luce_sample(&p, &mut r).0[0] == 0).count();
        let freq = first as f64 / draws as f64;
        assert!((freq - 2.0 / 3.0).abs() < 0.02 * 2.0 / 3.0, "{freq}");
    }

    #[test]
    fn sampled_log_prob_matches_closed_form() {
        let mut r = rng(10);
        let p: Vec<f64> = (0..5).map(|_| r.gen_range(-2.0..2.0)).collect();
        // Enumerate all orderings: probabilities sum to one.
        fn perms(items: Vec<usize>) -> Vec<Vec<usize>> {
            if items.len() <= 1 {
                return vec![items];
            }
            let mut out = Vec::new();
            for i in 0..items.len() {
                let mut rest = items.clone();
                let head = rest.remove(i);
                for mut tail in perms(rest) {
                    tail.insert(0, head);
                    out.push(tail);
                }
            }
            out
        }
        let total: f64 = perms((0..5).collect()).iter().map(|o| plackett_luce_log_prob(&p, o).exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        for _ in 0..20 {
            let (order, lp) = plackett_luce_sample(&p, &mut r);
            assert!((lp - plackett_luce_log_prob(&p, &order)).abs() < 1e-12);
        }
    }

    #[test]
    fn plackett_luce_gradient_matches_finite_differences() {
        let mut r = rng(11);
        let p: Vec<f64> = (0..5).map(|_| r.gen_range(-2.0..2.0)).collect();
        let (order, _) = plackett_luce_sample(&p, &mut r);
        let g = plackett_luce_grad(&p, &order);
        assert!(check_inputs(&p, &g, |x| plackett_luce_log_prob(x, &order)) < TOL);
    }

    fn toy_decision(r: &mut ChaCha8Rng, jobs: usize) -> Decision {
        use crate::encoder::GraphBatch;
        use crate::model::JobDag;
        let dags: Vec<JobDag> = (0..jobs).map(|_| JobDag::new(3, vec![(0, 2), (1, 2)])).collect();
        let n = 3 * jobs;
        let graph = GraphBatch::from_dags(&dags, random_matrix(n, FEATURE_DIM, r)).unwrap();
        let plan = plan_batches(&graph.preds, 2).unwrap();
        let nodes: Vec<usize> = (0..jobs).flat_map(|j| [3 * j, 3 * j + 1]).collect();
        let slots: Vec<usize> = nodes.iter().map(|&v| v / 3).collect();
        Decision {
            candidates: nodes.iter().map(|&v| CoflowRef::new(v / 3, v % 3)).collect(),
            weights: slots.iter().map(|&s| 1.0 + s as f64).collect(),
            arrivals: slots.iter().map(|&s| s as f64).collect(),
            graph,
            plan,
            nodes,
            slots,
        }
    }

    fn check_end_to_end(kind: PolicyKind, seed: u64) -> f64 {
        let mut r = rng(seed);
        let cfg = PolicyConfig { hidden: 6, job_dim: 5, ..PolicyConfig::with_kind(kind) };
        let net = PolicyNet::new(cfg, seed);
        let dec = toy_decision(&mut r, 2);
        let order: Vec<usize> = vec![2, 0, 3, 1];
        let loss = |n: &PolicyNet| {
            let (q, _) = score_candidates(n, &dec).unwrap();
            plackett_luce_log_prob(&priorities(&q, &dec.weights), &order)
        };
        let (q, cache) = score_candidates(&net, &dec).unwrap();
        let dp = plackett_luce_grad(&priorities(&q, &dec.weights), &order);
        let dq: Vec<f64> = dp.iter().zip(&dec.weights).map(|(g, w)| g * w).collect();
        let mut grads = net.zeros_like();
        score_backward(&net, &dec, &cache, &dq, &mut grads);
        check_params(&net, &grads, loss)
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        for (i, kind) in [PolicyKind::Attention, PolicyKind::NoAttention, PolicyKind::Flat { max_nodes: 8 }]
            .into_iter()
            .enumerate()
        {
            let err = check_end_to_end(kind, 20 + i as u64);
            assert!(err < TOL, "{kind:?}: {err}");
        }
    }

    #[test]
    fn flat_rejects_oversized_snapshots() {
        let mut r = rng(12);
        let net = PolicyNet::new(PolicyConfig::with_kind(PolicyKind::Flat { max_nodes: 5 }), 0);
        let dec = toy_decision(&mut r, 2);
        assert!(matches!(score_candidates(&net, &dec), Err(PolicyError::Capacity { nodes: 6, max: 5 })));
        let ok = PolicyNet::new(PolicyConfig::with_kind(PolicyKind::Flat { max_nodes: 6 }), 0);
        assert!(score_candidates(&ok, &dec).is_ok());
    }

    #[test]
    fn flat_padding_contributes_nothing() {
        let mut r = rng(13);
        let net = PolicyNet::new(PolicyConfig::with_kind(PolicyKind::Flat { max_nodes: 8 }), 3);
        let dec = toy_decision(&mut r, 1);
        let (q, _) = score_candidates(&net, &dec).unwrap();
        // Rewiring the padded input rows must not change any score.
        let mut other = net.clone();
        if let Head::Flat { net: f } = &mut other.head {
            for row in 3 * 16..8 * 16 {
                f.hidden.w.row_mut(row).iter_mut().for_each(|w| *w += 1.0);
            }
        }
        assert_eq!(score_candidates(&other, &dec).unwrap().0, q);
    }

    #[test]
    fn no_attention_is_a_subnetwork() {
        let mut r = rng(14);
        let att = PolicyNet::new(PolicyConfig::default(), 5);
        let mut plain = PolicyNet::new(PolicyConfig::with_kind(PolicyKind::NoAttention), 5);
        plain.encoder = att.encoder.clone();
        let mut att = att;
        if let (Head::Attention { attention, score }, Head::NoAttention { score: s2 }) = (&mut att.head, &plain.head) {
            attention.wq = Matrix::zeros(16, 16);
            attention.wk = Matrix::zeros(16, 16);
            attention.wv = Matrix::identity(16);
            *score = s2.clone();
        }
        let mut dec = toy_decision(&mut r, 1);
        dec.nodes.truncate(1);
        dec.slots.truncate(1);
        dec.candidates.truncate(1);
        dec.weights.truncate(1);
        dec.arrivals.truncate(1);
        assert_eq!(score_candidates(&att, &dec).unwrap().0, score_candidates(&plain, &dec).unwrap().0);
    }

    #[test]
    fn parameter_counts_scale_as_expected() {
        let att = PolicyNet::new(PolicyConfig::default(), 0).param_count();
        let small = PolicyNet::new(PolicyConfig::with_kind(PolicyKind::Flat { max_nodes: 8 }), 0).param_count();
        let large = PolicyNet::new(PolicyConfig::with_kind(PolicyKind::Flat { max_nodes: 64 }), 0).param_count();
        assert!(large - small >= 7 * (small - PolicyNet::new(PolicyConfig::with_kind(PolicyKind::Flat { max_nodes: 1 }), 0).param_count()));
        assert!(att < small);
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = PolicyNet::new(PolicyConfig::default(), 9);
        let back = PolicyNet::from_checkpoint_str(&net.to_checkpoint_string()).unwrap();
        assert_eq!(back, net);
        assert!(PolicyNet::from_checkpoint_str("nope\n{}").is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        net.save(&path).unwrap();
        assert_eq!(PolicyNet::load(&path).unwrap(), net);
    }
}
