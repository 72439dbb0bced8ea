use crate::model::{CoflowRef, CoflowState, JobId};
use crate::sim::fabric::{FabricState, JobTable, Queues};

/// Read-only view of one coflow handed to schedulers.
#[derive(Clone, Debug, PartialEq)]
pub struct CoflowView {
    pub coflow_id: usize,
    pub predecessors: Vec<usize>,
    pub successors: usize,
    pub state: CoflowState,
    pub remaining_bytes: f64,
    pub total_bytes: f64,
    pub unfinished_flows: usize,
    pub ingress_ports: usize,
    pub egress_ports: usize,
    /// Largest remaining MB on any single ingress or egress port.
    pub bottleneck_bytes: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JobView {
    pub job_id: JobId,
    pub arrival_time: f64,
    pub weight: f64,
    pub coflows: Vec<CoflowView>,
}

/// Everything a scheduler may look at when ordering coflows.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub now: f64,
    pub port_count: usize,
    /// Released, unfinished jobs in arrival order.
    pub jobs: Vec<JobView>,
    /// Coflows awaiting an order: schedulable or waiting, in (job, coflow) order.
    pub candidates: Vec<CoflowRef>,
    pub active: Vec<CoflowRef>,
    pub ingress_free: Vec<f64>,
    pub egress_free: Vec<f64>,
}

impl Snapshot {
    pub fn empty(port_count: usize) -> Self {
        Self {
            now: 0.0,
            port_count,
            jobs: Vec::new(),
            candidates: Vec::new(),
            active: Vec::new(),
            ingress_free: vec![1.0; port_count],
            egress_free: vec![1.0; port_count],
        }
    }

    pub fn job(&self, id: JobId) -> Option<&JobView> {
        self.jobs.iter().find(|j| j.job_id == id)
    }

    pub fn coflow(&self, c: CoflowRef) -> Option<&CoflowView> {
        self.job(c.job).and_then(|j| j.coflows.get(c.coflow))
    }

    pub fn node_count(&self) -> usize {
        self.jobs.iter().map(|j| j.coflows.len()).sum()
    }

    /// Total weight of jobs currently in the system.
    pub fn resident_weight(&self) -> f64 {
        self.jobs.iter().map(|j| j.weight).sum()
    }
}

/// Builds the scheduler's view of the system at `now`.
pub fn snapshot(fabric: &FabricState, queues: &Queues, table: &JobTable, now: f64) -> Snapshot {
    let ports = fabric.port_count;
    let mut ing = vec![0.0; ports];
    let mut eg = vec![0.0; ports];
    let mut jobs = Vec::new();
    let mut candidates = Vec::new();
    for job in table.jobs() {
        if job.release_time > now || job.is_finished() {
            continue;
        }
        let succs = job.dag().successors();
        let mut coflows = Vec::with_capacity(job.coflows.len());
        for c in &job.coflows {
            ing.fill(0.0);
            eg.fill(0.0);
            let mut unfinished = 0;
            for f in c.unfinished_flows() {
                unfinished += 1;
                ing[f.src_port] += f.remaining_bytes;
                eg[f.dst_port] += f.remaining_bytes;
            }
            let used = |v: &[f64]| v.iter().filter(|&&b| b > 0.0).count();
            if matches!(c.state, CoflowState::Schedulable | CoflowState::Waiting) {
                candidates.push(CoflowRef::new(job.job_id, c.coflow_id));
            }
            coflows.push(CoflowView {
                coflow_id: c.coflow_id,
                predecessors: c.predecessors.clone(),
                successors: succs[c.coflow_id].len(),
                state: c.state,
                remaining_bytes: c.remaining_bytes(),
                total_bytes: c.total_bytes(),
                unfinished_flows: unfinished,
                ingress_ports: used(&ing),
                egress_ports: used(&eg),
                bottleneck_bytes: ing.iter().chain(eg.iter()).copied().fold(0.0, f64::max),
            });
        }
        jobs.push(JobView {
            job_id: job.job_id,
            arrival_time: job.arrival_time,
            weight: job.weight,
            coflows,
        });
    }
    Snapshot {
        now,
        port_count: ports,
        jobs,
        candidates,
        active: queues.active.clone(),
        ingress_free: fabric.ingress_free.clone(),
        egress_free: fabric.egress_free.clone(),
    }
}
