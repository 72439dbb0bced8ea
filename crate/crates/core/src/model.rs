//! Jobs, coflows, flows and the dependency DAGs that tie them together.
//!
//! A job is a DAG of coflows connected by starts-after edges; a coflow is a
//! set of flows that finishes when its slowest flow finishes. The completion
//! time algebra is plain max-composition: a coflow completes at the latest
//! finish of its flows, a job at the latest completion of its coflows.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type JobId = usize;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("edge ({pred}, {succ}) references a node outside 0..{node_count}")]
    EdgeOutOfRange {
        pred: usize,
        succ: usize,
        node_count: usize,
    },
    #[error("job {0} has not finished")]
    Incomplete(JobId),
    #[error("dependency graph of job {0} contains a cycle")]
    Cyclic(JobId),
    #[error("job {job}: {reason}")]
    InvalidJob { job: JobId, reason: String },
}

/// Identifies one coflow: the owning job id plus the job-local coflow id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CoflowRef {
    pub job: JobId,
    pub coflow: usize,
}

impl CoflowRef {
    pub fn new(job: JobId, coflow: usize) -> Self {
        Self { job, coflow }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Flow {
    pub job_id: JobId,
    pub coflow_id: usize,
    pub flow_id: usize,
    /// Ingress port.
    pub src_port: usize,
    /// Egress port.
    pub dst_port: usize,
    /// MB.
    pub total_bytes: f64,
    pub remaining_bytes: f64,
    /// MB per time unit.
    pub rate: f64,
    pub start_time: Option<f64>,
    pub finish_time: Option<f64>,
}

impl Flow {
    pub fn new(src_port: usize, dst_port: usize, total_bytes: f64) -> Self {
        Self {
            job_id: 0,
            coflow_id: 0,
            flow_id: 0,
            src_port,
            dst_port,
            total_bytes,
            remaining_bytes: total_bytes,
            rate: 0.0,
            start_time: None,
            finish_time: None,
        }
    }

    pub fn is_finished(&self) -> bool {
        self.finish_time.is_some()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoflowState {
    Pending,
    Schedulable,
    Waiting,
    Active,
    Finished,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Coflow {
    pub job_id: JobId,
    pub coflow_id: usize,
    pub flows: Vec<Flow>,
    /// Job-local ids of the coflows this one starts after, sorted.
    pub predecessors: Vec<usize>,
    pub state: CoflowState,
    /// Time the coflow became schedulable.
    pub release_time: Option<f64>,
    pub completion_time: Option<f64>,
}

impl Coflow {
    pub fn new(flows: Vec<Flow>, mut predecessors: Vec<usize>) -> Self {
        predecessors.sort_unstable();
        predecessors.dedup();
        Self {
            job_id: 0,
            coflow_id: 0,
            flows,
            predecessors,
            state: CoflowState::Pending,
            release_time: None,
            completion_time: None,
        }
    }

    pub fn remaining_bytes(&self) -> f64 {
        self.flows.iter().map(|f| f.remaining_bytes).sum()
    }

    pub fn total_bytes(&self) -> f64 {
        self.flows.iter().map(|f| f.total_bytes).sum()
    }

    pub fn unfinished_flows(&self) -> impl Iterator<Item = &Flow> {
        self.flows.iter().filter(|f| !f.is_finished())
    }

    pub fn is_finished(&self) -> bool {
        self.state == CoflowState::Finished
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Job {
    pub job_id: JobId,
    pub arrival_time: f64,
    pub release_time: f64,
    pub weight: f64,
    pub coflows: Vec<Coflow>,
    pub completion_time: Option<f64>,
}

impl Job {
    /// Builds a job and stamps ids onto its coflows and flows. Release time
    /// equals arrival time.
    pub fn new(job_id: JobId, arrival_time: f64, weight: f64, mut coflows: Vec<Coflow>) -> Self {
        for (k, coflow) in coflows.iter_mut().enumerate() {
            coflow.job_id = job_id;
            coflow.coflow_id = k;
            for (m, flow) in coflow.flows.iter_mut().enumerate() {
                flow.job_id = job_id;
                flow.coflow_id = k;
                flow.flow_id = m;
            }
        }
        Self {
            job_id,
            arrival_time,
            release_time: arrival_time,
            weight,
            coflows,
            completion_time: None,
        }
    }

    pub fn dag(&self) -> JobDag {
        let edges = self
            .coflows
            .iter()
            .flat_map(|c| c.predecessors.iter().map(move |&p| (p, c.coflow_id)))
            .collect();
        JobDag::new(self.coflows.len(), edges)
    }

    pub fn is_finished(&self) -> bool {
        self.completion_time.is_some()
    }

    pub fn flow_count(&self) -> usize {
        self.coflows.iter().map(|c| c.flows.len()).sum()
    }

    /// Checks structural sanity: dense ids, positive bytes, acyclic DAG,
    /// ports below `port_count`.
    pub fn validate(&self, port_count: usize) -> Result<(), ModelError> {
        let bad = |reason: String| ModelError::InvalidJob {
            job: self.job_id,
            reason,
        };
        if !(self.weight > 0.0 && self.weight.is_finite()) {
            return Err(bad(format!("weight {} must be positive", self.weight)));
        }
        if !(self.arrival_time >= 0.0 && self.arrival_time.is_finite()) {
            return Err(bad(format!("arrival {} must be nonnegative", self.arrival_time)));
        }
        if self.release_time < self.arrival_time {
            return Err(bad("release precedes arrival".into()));
        }
        if self.coflows.is_empty() {
            return Err(bad("job has no coflows".into()));
        }
        for (k, c) in self.coflows.iter().enumerate() {
            if c.coflow_id != k || c.job_id != self.job_id {
                return Err(bad(format!("coflow {k} carries ids ({}, {})", c.job_id, c.coflow_id)));
            }
            if c.flows.is_empty() {
                return Err(bad(format!("coflow {k} has no flows")));
            }
            for f in &c.flows {
                if f.src_port >= port_count || f.dst_port >= port_count {
                    return Err(bad(format!(
                        "flow {}.{} uses port outside 0..{port_count}",
                        k, f.flow_id
                    )));
                }
                if !(f.total_bytes > 0.0 && f.total_bytes.is_finite()) {
                    return Err(bad(format!("flow {}.{} has non-positive size", k, f.flow_id)));
                }
            }
        }
        if !validate_dag(&self.dag()).map_err(|e| bad(e.to_string()))? {
            return Err(ModelError::Cyclic(self.job_id));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JobDag {
    pub node_count: usize,
    /// (predecessor, successor) pairs.
    pub edges: Vec<(usize, usize)>,
}

impl JobDag {
    pub fn new(node_count: usize, edges: Vec<(usize, usize)>) -> Self {
        Self { node_count, edges }
    }

    pub fn predecessors(&self) -> Vec<Vec<usize>> {
        let mut preds = vec![Vec::new(); self.node_count];
        for &(p, s) in &self.edges {
            preds[s].push(p);
        }
        for list in &mut preds {
            list.sort_unstable();
            list.dedup();
        }
        preds
    }

    pub fn successors(&self) -> Vec<Vec<usize>> {
        let mut succs = vec![Vec::new(); self.node_count];
        for &(p, s) in &self.edges {
            succs[p].push(s);
        }
        for list in &mut succs {
            list.sort_unstable();
            list.dedup();
        }
        succs
    }

    /// Depth of every node: 0 for roots, otherwise one more than the deepest
    /// predecessor. `None` if the graph has a cycle.
    pub fn depths(&self) -> Option<Vec<usize>> {
        let preds = self.predecessors();
        let succs = self.successors();
        let mut indegree: Vec<usize> = preds.iter().map(Vec::len).collect();
        let mut depth = vec![0usize; self.node_count];
        let mut ready: Vec<usize> = (0..self.node_count).filter(|&v| indegree[v] == 0).collect();
        let mut seen = 0;
        while let Some(v) = ready.pop() {
            seen += 1;
            for &s in &succs[v] {
                depth[s] = depth[s].max(depth[v] + 1);
                indegree[s] -= 1;
                if indegree[s] == 0 {
                    ready.push(s);
                }
            }
        }
        (seen == self.node_count).then_some(depth)
    }
}

/// True iff the edges form an acyclic graph over `node_count` nodes.
pub fn validate_dag(dag: &JobDag) -> Result<bool, ModelError> {
    for &(pred, succ) in &dag.edges {
        if pred >= dag.node_count || succ >= dag.node_count {
            return Err(ModelError::EdgeOutOfRange {
                pred,
                succ,
                node_count: dag.node_count,
            });
        }
    }
    Ok(dag.depths().is_some())
}

/// Promotes every pending coflow of a released job whose predecessors are all
/// finished to `Schedulable`, returning the promoted coflows in (job, coflow)
/// order.
pub fn schedulable_set(jobs: &mut [Job], now: f64) -> Vec<CoflowRef> {
    let mut out = Vec::new();
    for job in jobs.iter_mut() {
        if job.release_time > now || job.is_finished() {
            continue;
        }
        let finished: Vec<bool> = job.coflows.iter().map(Coflow::is_finished).collect();
        for coflow in job.coflows.iter_mut() {
            if coflow.state == CoflowState::Pending
                && coflow.predecessors.iter().all(|&p| finished[p])
            {
                coflow.state = CoflowState::Schedulable;
                coflow.release_time = Some(now);
                out.push(CoflowRef::new(job.job_id, coflow.coflow_id));
            }
        }
    }
    out
}

/// Total weighted job completion time, the quantity the scheduler minimizes.
pub fn objective(jobs: &[Job]) -> Result<f64, ModelError> {
    jobs.iter()
        .map(|j| {
            j.completion_time
                .map(|c| j.weight * c)
                .ok_or(ModelError::Incomplete(j.job_id))
        })
        .sum()
}
