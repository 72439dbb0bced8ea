//! Port bookkeeping for the non-blocking switch and the priority-driven rate
//! allocator.
//!
//! Allocation runs in two phases. Phase 1 walks the priority list and gives
//! every unfinished flow of a coflow the same rate, bounded at each port the
//! coflow touches by that port's free bandwidth divided among the coflow's
//! flows there. A coflow that gets nothing waits. Phase 2 water-fills the
//! leftover bandwidth across flows of active coflows.

use std::collections::HashMap;

use crate::model::{Coflow, CoflowRef, CoflowState, Job, JobId};
use crate::sim::SimError;

/// Port capacity, MB per time unit.
pub const PORT_CAPACITY: f64 = 1.0;

/// Rates at or below this are treated as zero.
pub const RATE_EPS: f64 = 1e-12;
const SLACK_EPS: f64 = 1e-12;
const BACKFILL_ROUNDS: usize = 32;
const BACKFILL_PROGRESS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct FabricState {
    pub port_count: usize,
    pub ingress_free: Vec<f64>,
    pub egress_free: Vec<f64>,
    pub capacity: f64,
}

impl FabricState {
    pub fn new(port_count: usize) -> Self {
        Self {
            port_count,
            ingress_free: vec![PORT_CAPACITY; port_count],
            egress_free: vec![PORT_CAPACITY; port_count],
            capacity: PORT_CAPACITY,
        }
    }

    pub fn reset(&mut self) {
        self.ingress_free.fill(self.capacity);
        self.egress_free.fill(self.capacity);
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Queues {
    /// In activation order.
    pub active: Vec<CoflowRef>,
    pub waiting: Vec<CoflowRef>,
    pub finished: Vec<CoflowRef>,
}

impl Queues {
    pub fn remove_waiting(&mut self, c: CoflowRef) {
        self.waiting.retain(|&w| w != c);
    }
}

/// Jobs addressed by id.
#[derive(Clone, Debug, Default)]
pub struct JobTable {
    jobs: Vec<Job>,
    index: HashMap<JobId, usize>,
}

impl JobTable {
    pub fn new(jobs: Vec<Job>) -> Result<Self, SimError> {
        let mut index = HashMap::with_capacity(jobs.len());
        for (slot, job) in jobs.iter().enumerate() {
            if index.insert(job.job_id, slot).is_some() {
                return Err(SimError::DuplicateJob(job.job_id));
            }
        }
        Ok(Self { jobs, index })
    }

    pub fn jobs(&self) -> &[Job] {
        &self.jobs
    }

    pub fn jobs_mut(&mut self) -> &mut [Job] {
        &mut self.jobs
    }

    pub fn into_jobs(self) -> Vec<Job> {
        self.jobs
    }

    pub fn job(&self, id: JobId) -> Option<&Job> {
        self.index.get(&id).map(|&s| &self.jobs[s])
    }

    pub fn job_mut(&mut self, id: JobId) -> Option<&mut Job> {
        let slot = *self.index.get(&id)?;
        Some(&mut self.jobs[slot])
    }

    pub fn coflow(&self, c: CoflowRef) -> Option<&Coflow> {
        self.job(c.job).and_then(|j| j.coflows.get(c.coflow))
    }

    pub fn coflow_mut(&mut self, c: CoflowRef) -> Option<&mut Coflow> {
        let slot = *self.index.get(&c.job)?;
        self.jobs[slot].coflows.get_mut(c.coflow)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Allocation {
    /// Phase-1 rate granted to each unfinished flow of each listed coflow.
    pub coflow_rates: Vec<(CoflowRef, f64)>,
    pub backfill_rounds: usize,
    pub backfilled: f64,
}

/// Sets flow rates for every coflow in `priority` and moves coflows between
/// the waiting and active queues.
///
/// `priority` must cover every active or waiting coflow. Flows that receive
/// bandwidth for the first time get `start_time = now`.
pub fn allocate_rates(
    priority: &[CoflowRef],
    fabric: &mut FabricState,
    queues: &mut Queues,
    table: &mut JobTable,
    now: f64,
) -> Result<Allocation, SimError> {
    let mut summary = Allocation::default();
    for c in queues.active.iter().chain(&queues.waiting) {
        if !priority.contains(c) {
            return Err(SimError::MissingPriority(*c));
        }
    }
    fabric.reset();
    let ports = fabric.port_count;
    let mut u_in = vec![0usize; ports];
    let mut u_out = vec![0usize; ports];
    let mut touched: Vec<usize> = Vec::new();

    // Phase 1: strict priority, one rate per coflow.
    for &cref in priority {
        let coflow = table.coflow_mut(cref).ok_or(SimError::UnknownCoflow(cref))?;
        if coflow.state == CoflowState::Finished {
            continue;
        }
        touched.clear();
        for f in coflow.flows.iter_mut() {
            f.rate = 0.0;
            if f.is_finished() {
                continue;
            }
            if u_in[f.src_port] == 0 {
                touched.push(f.src_port);
            }
            if u_out[f.dst_port] == 0 {
                touched.push(ports + f.dst_port);
            }
            u_in[f.src_port] += 1;
            u_out[f.dst_port] += 1;
        }
        let mut rate = f64::INFINITY;
        for &p in &touched {
            let share = if p < ports {
                fabric.ingress_free[p] / u_in[p] as f64
            } else {
                fabric.egress_free[p - ports] / u_out[p - ports] as f64
            };
            rate = rate.min(share);
        }
        if !(rate > RATE_EPS) || !rate.is_finite() {
            rate = 0.0;
        }
        if rate > 0.0 {
            for &p in &touched {
                if p < ports {
                    let free = &mut fabric.ingress_free[p];
                    *free = (*free - rate * u_in[p] as f64).max(0.0);
                } else {
                    let free = &mut fabric.egress_free[p - ports];
                    *free = (*free - rate * u_out[p - ports] as f64).max(0.0);
                }
            }
            for f in coflow.flows.iter_mut().filter(|f| !f.is_finished()) {
                f.rate = rate;
            }
        }
        for &p in &touched {
            if p < ports {
                u_in[p] = 0;
            } else {
                u_out[p - ports] = 0;
            }
        }

        summary.coflow_rates.push((cref, rate));
        match (coflow.state, rate > 0.0) {
            (CoflowState::Active, _) => {}
            (_, true) => {
                coflow.state = CoflowState::Active;
                queues.remove_waiting(cref);
                queues.active.push(cref);
            }
            (CoflowState::Waiting, false) => {}
            (_, false) => {
                coflow.state = CoflowState::Waiting;
                queues.waiting.push(cref);
            }
        }
    }

    // Phase 2: equal-share backfill of leftover bandwidth to active flows.
    let mut eligible: Vec<(CoflowRef, usize)> = Vec::new();
    let mut m_in = vec![0usize; ports];
    let mut m_out = vec![0usize; ports];
    for _ in 0..BACKFILL_ROUNDS {
        eligible.clear();
        m_in.fill(0);
        m_out.fill(0);
        for &cref in &queues.active {
            let coflow = table.coflow(cref).ok_or(SimError::UnknownCoflow(cref))?;
            for (idx, f) in coflow.flows.iter().enumerate() {
                if !f.is_finished()
                    && fabric.ingress_free[f.src_port] > SLACK_EPS
                    && fabric.egress_free[f.dst_port] > SLACK_EPS
                {
                    eligible.push((cref, idx));
                    m_in[f.src_port] += 1;
                    m_out[f.dst_port] += 1;
                }
            }
        }
        if eligible.is_empty() {
            break;
        }
        summary.backfill_rounds += 1;
        let grants: Vec<f64> = eligible
            .iter()
            .map(|&(cref, idx)| {
                let f = &table.coflow(cref).expect("checked above").flows[idx];
                (fabric.ingress_free[f.src_port] / m_in[f.src_port] as f64)
                    .min(fabric.egress_free[f.dst_port] / m_out[f.dst_port] as f64)
            })
            .collect();
        let mut added = 0.0;
        for (&(cref, idx), &delta) in eligible.iter().zip(&grants) {
            let f = &mut table.coflow_mut(cref).expect("checked above").flows[idx];
            f.rate += delta;
            fabric.ingress_free[f.src_port] = (fabric.ingress_free[f.src_port] - delta).max(0.0);
            fabric.egress_free[f.dst_port] = (fabric.egress_free[f.dst_port] - delta).max(0.0);
            added += delta;
        }
        summary.backfilled += added;
        if added < BACKFILL_PROGRESS {
            break;
        }
    }

    for &cref in &queues.active {
        let coflow = table.coflow_mut(cref).ok_or(SimError::UnknownCoflow(cref))?;
        for f in coflow.flows.iter_mut() {
            if f.rate > 0.0 && f.start_time.is_none() {
                f.start_time = Some(now);
            }
        }
    }
    Ok(summary)
}

/// Highest per-port rate sum across ingress and egress ports.
pub fn max_port_load(table: &JobTable, queues: &Queues, port_count: usize) -> f64 {
    let mut ingress = vec![0.0; port_count];
    let mut egress = vec![0.0; port_count];
    for c in queues.active.iter().chain(&queues.waiting) {
        if let Some(coflow) = table.coflow(*c) {
            for f in &coflow.flows {
                ingress[f.src_port] += f.rate;
                egress[f.dst_port] += f.rate;
            }
        }
    }
    ingress.into_iter().chain(egress).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Coflow, Flow, Job};
    use proptest::prelude::*;

    fn table(jobs: Vec<Job>) -> JobTable {
        let mut t = JobTable::new(jobs).unwrap();
        for j in t.jobs_mut() {
            for c in &mut j.coflows {
                c.state = CoflowState::Schedulable;
            }
        }
        t
    }

    fn single(id: usize, flows: Vec<Flow>) -> Job {
        Job::new(id, 0.0, 1.0, vec![Coflow::new(flows, vec![])])
    }

    fn rates(t: &JobTable, c: CoflowRef) -> Vec<f64> {
        t.coflow(c).unwrap().flows.iter().map(|f| f.rate).collect()
    }

    #[test]
    fn shared_ingress_splits_coflow_rate() {
        let mut t = table(vec![single(0, vec![Flow::new(1, 1, 4.0), Flow::new(1, 2, 2.0)])]);
        let mut fabric = FabricState::new(3);
        let mut q = Queues::default();
        let c = CoflowRef::new(0, 0);
        allocate_rates(&[c], &mut fabric, &mut q, &mut t, 0.0).unwrap();
        assert_eq!(rates(&t, c), vec![0.5, 0.5]);
        // Projected finish times under this allocation: 4/0.5 and 2/0.5.
        let finish: Vec<f64> = t
            .coflow(c)
            .unwrap()
            .flows
            .iter()
            .map(|f| f.remaining_bytes / f.rate)
            .collect();
        assert_eq!(finish, vec![8.0, 4.0]);
        assert_eq!(q.active, vec![c]);
    }

    #[test]
    fn disjoint_coflows_both_run_at_line_rate() {
        for order in [[0, 1], [1, 0]] {
            let mut t = table(vec![
                single(0, vec![Flow::new(0, 0, 1.0)]),
                single(1, vec![Flow::new(1, 1, 1.0)]),
            ]);
            let list: Vec<CoflowRef> = order.iter().map(|&j| CoflowRef::new(j, 0)).collect();
            let mut q = Queues::default();
            allocate_rates(&list, &mut FabricState::new(2), &mut q, &mut t, 0.0).unwrap();
            assert_eq!(rates(&t, CoflowRef::new(0, 0)), vec![1.0]);
            assert_eq!(rates(&t, CoflowRef::new(1, 0)), vec![1.0]);
        }
    }

    #[test]
    fn shared_egress_blocks_lower_priority() {
        let mut t = table(vec![
            single(0, vec![Flow::new(0, 1, 1.0)]),
            single(1, vec![Flow::new(1, 1, 1.0)]),
        ]);
        let (a, b) = (CoflowRef::new(0, 0), CoflowRef::new(1, 0));
        let mut q = Queues::default();
        allocate_rates(&[a, b], &mut FabricState::new(2), &mut q, &mut t, 0.0).unwrap();
        assert_eq!(rates(&t, a), vec![1.0]);
        assert_eq!(rates(&t, b), vec![0.0]);
        assert_eq!(q.active, vec![a]);
        assert_eq!(q.waiting, vec![b]);
        assert_eq!(t.coflow(b).unwrap().state, CoflowState::Waiting);
    }

    #[test]
    fn backfill_fills_slack_of_active_flows() {
        // A uses ingress 0 twice (0.5 each). B shares egress 1 with one of A's
        // flows and gets the 0.5 left there; the other egress has 0.5 slack
        // that no eligible flow can use because ingress 0 is saturated.
        let mut t = table(vec![
            single(0, vec![Flow::new(0, 0, 4.0), Flow::new(0, 1, 4.0)]),
            single(1, vec![Flow::new(1, 1, 4.0), Flow::new(1, 2, 1.0)]),
        ]);
        let (a, b) = (CoflowRef::new(0, 0), CoflowRef::new(1, 0));
        let mut q = Queues::default();
        let mut fabric = FabricState::new(3);
        allocate_rates(&[a, b], &mut fabric, &mut q, &mut t, 0.0).unwrap();
        assert_eq!(rates(&t, a), vec![0.5, 0.5]);
        // B phase 1: min(1/2 ingress1, 0.5 egress1, 1 egress2) = 0.5; its flow
        // to egress 2 can then soak up nothing more since ingress 1 is full.
        assert_eq!(rates(&t, b), vec![0.5, 0.5]);
        assert!(max_port_load(&t, &q, 3) <= 1.0 + 1e-9);
    }

    #[test]
    fn missing_priority_is_a_contract_error() {
        let mut t = table(vec![single(0, vec![Flow::new(0, 0, 1.0)])]);
        let mut q = Queues { waiting: vec![CoflowRef::new(0, 0)], ..Default::default() };
        let err = allocate_rates(&[], &mut FabricState::new(1), &mut q, &mut t, 0.0).unwrap_err();
        assert!(matches!(err, SimError::MissingPriority(_)));
    }

    fn arb_instance() -> impl Strategy<Value = (usize, Vec<Vec<(usize, usize, f64)>>)> {
        (2usize..6).prop_flat_map(|p| {
            let flow = (0..p, 0..p, 0.5f64..20.0);
            (Just(p), prop::collection::vec(prop::collection::vec(flow, 1..5), 1..7))
        })
    }

    fn build(spec: &[Vec<(usize, usize, f64)>]) -> (JobTable, Vec<CoflowRef>) {
        let jobs = spec
            .iter()
            .enumerate()
            .map(|(i, fl)| single(i, fl.iter().map(|&(s, d, b)| Flow::new(s, d, b)).collect()))
            .collect();
        let refs = (0..spec.len()).map(|i| CoflowRef::new(i, 0)).collect();
        (table(jobs), refs)
    }

    fn port_sums(t: &JobTable, p: usize) -> (Vec<f64>, Vec<f64>) {
        let mut i = vec![0.0; p];
        let mut e = vec![0.0; p];
        for j in t.jobs() {
            for f in &j.coflows[0].flows {
                i[f.src_port] += f.rate;
                e[f.dst_port] += f.rate;
            }
        }
        (i, e)
    }

    proptest! {
        #[test]
        fn capacity_and_work_conservation((p, spec) in arb_instance()) {
            let (mut t, order) = build(&spec);
            let mut q = Queues::default();
            allocate_rates(&order, &mut FabricState::new(p), &mut q, &mut t, 0.0).unwrap();
            let (ing, eg) = port_sums(&t, p);
            for s in ing.iter().chain(&eg) {
                prop_assert!(*s <= 1.0 + 1e-9);
            }
            // No flow of an active coflow is left with slack on both ports.
            for c in &q.active {
                for f in &t.coflow(*c).unwrap().flows {
                    prop_assert!(1.0 - ing[f.src_port] <= 1e-6 || 1.0 - eg[f.dst_port] <= 1e-6);
                }
            }
            // Waiting coflows carry no rate; the top coflow always runs.
            for c in &q.waiting {
                prop_assert!(t.coflow(*c).unwrap().flows.iter().all(|f| f.rate == 0.0));
            }
            prop_assert_eq!(q.active.first(), order.first());
        }

        #[test]
        fn raising_a_coflow_never_lowers_its_phase_one_rate((p, spec) in arb_instance(), pick in 0usize..7) {
            let pick = pick % spec.len();
            let target = CoflowRef::new(pick, 0);
            let rate_of = |order: &[CoflowRef]| {
                let (mut t, _) = build(&spec);
                let mut q = Queues::default();
                let a = allocate_rates(order, &mut FabricState::new(p), &mut q, &mut t, 0.0).unwrap();
                a.coflow_rates.iter().find(|(c, _)| *c == target).unwrap().1
            };
            let (_, base) = build(&spec);
            let mut raised = vec![target];
            raised.extend(base.iter().copied().filter(|c| *c != target));
            prop_assert!(rate_of(&raised) >= rate_of(&base));
        }

        #[test]
        fn raising_a_single_flow_coflow_never_slows_it(
            p in 2usize..5,
            flows in prop::collection::vec((0usize..4, 0usize..4, 0.5f64..20.0), 1..7),
            pick in 0usize..7,
        ) {
            let spec: Vec<Vec<(usize, usize, f64)>> =
                flows.iter().map(|&(s, d, b)| vec![(s % p, d % p, b)]).collect();
            let pick = pick % spec.len();
            let target = CoflowRef::new(pick, 0);
            let projected = |order: &[CoflowRef]| {
                let (mut t, _) = build(&spec);
                let mut q = Queues::default();
                allocate_rates(order, &mut FabricState::new(p), &mut q, &mut t, 0.0).unwrap();
                let f = &t.coflow(target).unwrap().flows[0];
                if f.rate > 0.0 { f.remaining_bytes / f.rate } else { f64::INFINITY }
            };
            let (_, base) = build(&spec);
            let mut raised = vec![target];
            raised.extend(base.iter().copied().filter(|c| *c != target));
            prop_assert!(projected(&raised) <= projected(&base));
        }
    }
}
