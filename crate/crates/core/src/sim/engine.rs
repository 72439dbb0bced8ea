use std::fmt::Write as _;

use crate::model::{schedulable_set, CoflowRef, CoflowState, Job, JobId};
use crate::sim::fabric::{allocate_rates, max_port_load, FabricState, JobTable, Queues};
use crate::sim::snapshot::snapshot;
use crate::sim::{Scheduler, SimError};

/// Flow finishes within this relative distance of the event time are merged
/// into the same event.
const FINISH_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct SimConfig {
    /// Inferred from the largest port index when `None`.
    pub port_count: Option<usize>,
    /// Events strictly after this time are not processed.
    pub horizon: f64,
    /// Stop right before the ordering call that would exceed this budget.
    pub max_orderings: Option<usize>,
    pub record_events: bool,
    /// Log every flow's rate after each allocation.
    pub record_rates: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            port_count: None,
            horizon: f64::INFINITY,
            max_orderings: None,
            record_events: true,
            record_rates: false,
        }
    }
}

/// Rate of one unfinished, released flow right after an allocation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowRate {
    pub job: JobId,
    pub coflow: usize,
    pub flow: usize,
    pub src: usize,
    pub dst: usize,
    pub rate: f64,
}

/// Rates in force from `time` until the next sample.
#[derive(Clone, Debug, PartialEq)]
pub struct RateSample {
    pub time: f64,
    pub flows: Vec<FlowRate>,
}

/// Discriminant order doubles as the tie-break order within a timestamp.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    JobArrival,
    FlowFinish,
    CoflowFinish,
    JobFinish,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    pub job: JobId,
    pub coflow: Option<usize>,
    pub flow: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JobRow {
    pub job_id: JobId,
    pub arrival: f64,
    pub weight: f64,
    pub completion: Option<f64>,
}

impl JobRow {
    pub fn jct(&self) -> Option<f64> {
        self.completion.map(|c| c - self.arrival)
    }

    pub fn weighted_jct(&self) -> Option<f64> {
        self.jct().map(|j| j * self.weight)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimReport {
    pub rows: Vec<JobRow>,
    /// Mean of completion - arrival over finished jobs.
    pub avg_jct: f64,
    pub avg_weighted_jct: f64,
    pub completed: usize,
    pub total: usize,
    /// Set when the horizon cut the run short.
    pub truncated: bool,
    /// Set when the ordering budget cut the run short.
    pub budget_exhausted: bool,
    pub end_time: f64,
}

impl SimReport {
    fn from_jobs(jobs: &[Job], truncated: bool, budget_exhausted: bool, end_time: f64) -> Self {
        let mut rows: Vec<JobRow> = jobs
            .iter()
            .map(|j| JobRow {
                job_id: j.job_id,
                arrival: j.arrival_time,
                weight: j.weight,
                completion: j.completion_time,
            })
            .collect();
        rows.sort_by_key(|r| r.job_id);
        let done: Vec<&JobRow> = rows.iter().filter(|r| r.completion.is_some()).collect();
        let n = done.len();
        let mean = |f: fn(&JobRow) -> Option<f64>| {
            if n == 0 {
                0.0
            } else {
                done.iter().filter_map(|r| f(r)).sum::<f64>() / n as f64
            }
        };
        Self {
            avg_jct: mean(JobRow::jct),
            avg_weighted_jct: mean(JobRow::weighted_jct),
            completed: n,
            total: rows.len(),
            rows,
            truncated,
            budget_exhausted,
            end_time,
        }
    }

    /// Per-job CSV with a trailing summary row holding the column means.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,arrival,weight,completion,jct,weighted_jct\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.job_id,
                r.arrival,
                r.weight,
                opt(r.completion),
                opt(r.jct()),
                opt(r.weighted_jct())
            );
        }
        let _ = writeln!(out, "summary,,,,{},{}", self.avg_jct, self.avg_weighted_jct);
        out
    }

    pub fn summary_line(&self) -> String {
        format!(
            "avg_jct={} avg_weighted_jct={} completed={}",
            self.avg_jct, self.avg_weighted_jct, self.completed
        )
    }
}

#[derive(Clone, Debug)]
pub struct SimRun {
    /// Final job states, in arrival order.
    pub jobs: Vec<Job>,
    pub report: SimReport,
    pub events: Vec<Event>,
    pub orderings: usize,
    pub allocations: usize,
    /// Largest per-port rate sum seen after any allocation.
    pub max_port_load: f64,
    /// Filled when `SimConfig::record_rates` is set.
    pub rates: Vec<RateSample>,
}

fn reset_runtime(job: &mut Job) {
    job.completion_time = None;
    for c in &mut job.coflows {
        c.state = CoflowState::Pending;
        c.release_time = None;
        c.completion_time = None;
        for f in &mut c.flows {
            f.remaining_bytes = f.total_bytes;
            f.rate = 0.0;
            f.start_time = None;
            f.finish_time = None;
        }
    }
}

/// Runs the online scheduling loop over `jobs` until every job finishes, the
/// horizon passes, or the ordering budget runs out.
///
/// Job arrivals and coflow completions trigger an ordering call followed by a
/// reallocation; flow completions alone only trigger a reallocation.
pub fn run_simulation<S: Scheduler + ?Sized>(
    jobs: &[Job],
    scheduler: &mut S,
    config: &SimConfig,
) -> Result<SimRun, SimError> {
    let inferred = jobs
        .iter()
        .flat_map(|j| j.coflows.iter().flat_map(|c| c.flows.iter()))
        .map(|f| f.src_port.max(f.dst_port) + 1)
        .max()
        .unwrap_or(1);
    let ports = config.port_count.unwrap_or(inferred).max(inferred);

    let mut sorted = jobs.to_vec();
    for job in &mut sorted {
        job.validate(ports)?;
        reset_runtime(job);
    }
    sorted.sort_by(|a, b| a.arrival_time.total_cmp(&b.arrival_time).then(a.job_id.cmp(&b.job_id)));
    let arrivals: Vec<(f64, JobId)> = sorted.iter().map(|j| (j.release_time, j.job_id)).collect();
    let mut table = JobTable::new(sorted)?;

    let mut fabric = FabricState::new(ports);
    let mut queues = Queues::default();
    let mut priority: Vec<CoflowRef> = Vec::new();
    let mut events = Vec::new();
    let mut next_arrival = 0usize;
    let mut orderings = 0usize;
    let mut allocations = 0usize;
    let mut peak_load: f64 = 0.0;
    let mut truncated = false;
    let mut budget_exhausted = false;
    let mut finished_jobs = 0usize;
    let total_jobs = arrivals.len();

    let mut now = match arrivals.first() {
        Some(&(t, _)) if t <= config.horizon => t,
        Some(_) => {
            truncated = true;
            0.0
        }
        None => 0.0,
    };
    let mut ordering_due = false;
    let mut allocation_due = false;
    let mut finished_flows: Vec<(CoflowRef, usize)> = Vec::new();
    let mut rates = Vec::new();

    let admit = |now: f64, next_arrival: &mut usize, events: &mut Vec<Event>| {
        let mut any = false;
        while *next_arrival < arrivals.len() && arrivals[*next_arrival].0 <= now {
            if config.record_events {
                events.push(Event {
                    time: now,
                    kind: EventKind::JobArrival,
                    job: arrivals[*next_arrival].1,
                    coflow: None,
                    flow: None,
                });
            }
            *next_arrival += 1;
            any = true;
        }
        any
    };

    while !truncated {
        ordering_due |= admit(now, &mut next_arrival, &mut events);

        if ordering_due {
            schedulable_set(table.jobs_mut(), now);
            let snap = snapshot(&fabric, &queues, &table, now);
            if !snap.candidates.is_empty() {
                if config.max_orderings.is_some_and(|limit| orderings >= limit) {
                    budget_exhausted = true;
                    break;
                }
                let order = scheduler.order(&snap)?;
                orderings += 1;
                for c in &order {
                    if !snap.candidates.contains(c) {
                        return Err(SimError::UnexpectedCoflow(*c));
                    }
                }
                // Running coflows keep their relative order ahead of the rest.
                let mut next: Vec<CoflowRef> = priority
                    .iter()
                    .copied()
                    .filter(|c| queues.active.contains(c))
                    .collect();
                next.extend(order);
                priority = next;
                allocation_due = true;
            }
            ordering_due = false;
        }

        if allocation_due {
            priority.retain(|c| table.coflow(*c).is_some_and(|x| !x.is_finished()));
            allocate_rates(&priority, &mut fabric, &mut queues, &mut table, now)?;
            allocations += 1;
            peak_load = peak_load.max(max_port_load(&table, &queues, ports));
            if config.record_rates {
                rates.push(RateSample { time: now, flows: flow_rates(&table, now) });
            }
            allocation_due = false;
        }

        if finished_jobs == total_jobs && next_arrival == arrivals.len() {
            break;
        }

        // Next event: earliest projected flow finish or the next arrival.
        let mut next_time = arrivals.get(next_arrival).map_or(f64::INFINITY, |a| a.0);
        for &cref in &queues.active {
            for f in &table.coflow(cref).expect("active coflow exists").flows {
                if f.rate > 0.0 && !f.is_finished() {
                    next_time = next_time.min(now + f.remaining_bytes / f.rate);
                }
            }
        }
        if !next_time.is_finite() {
            return Err(SimError::Stalled(now));
        }
        if next_time > config.horizon {
            truncated = true;
            break;
        }

        let dt = next_time - now;
        let cutoff = next_time + FINISH_TOL * next_time.abs().max(1.0);
        finished_flows.clear();
        for &cref in &queues.active {
            let coflow = table.coflow_mut(cref).expect("active coflow exists");
            for f in coflow.flows.iter_mut() {
                if f.rate <= 0.0 || f.is_finished() {
                    continue;
                }
                if now + f.remaining_bytes / f.rate <= cutoff {
                    f.remaining_bytes = 0.0;
                    f.rate = 0.0;
                    f.finish_time = Some(next_time);
                    finished_flows.push((cref, f.flow_id));
                } else {
                    f.remaining_bytes = (f.remaining_bytes - f.rate * dt).max(0.0);
                }
            }
        }
        now = next_time;
        // Arrivals sort ahead of completions that share their timestamp.
        ordering_due |= admit(now, &mut next_arrival, &mut events);

        if !finished_flows.is_empty() {
            allocation_due = true;
            finished_flows.sort_unstable();
            let mut batch: Vec<Event> = Vec::new();
            let mut done_coflows: Vec<CoflowRef> = Vec::new();
            for &(cref, flow) in &finished_flows {
                batch.push(Event {
                    time: now,
                    kind: EventKind::FlowFinish,
                    job: cref.job,
                    coflow: Some(cref.coflow),
                    flow: Some(flow),
                });
                if done_coflows.last() != Some(&cref) {
                    done_coflows.push(cref);
                }
            }
            for cref in done_coflows {
                let coflow = table.coflow_mut(cref).expect("coflow exists");
                if !coflow.flows.iter().all(|f| f.is_finished()) {
                    continue;
                }
                coflow.state = CoflowState::Finished;
                coflow.completion_time = coflow.flows.iter().filter_map(|f| f.finish_time).reduce(f64::max);
                queues.active.retain(|&c| c != cref);
                queues.finished.push(cref);
                ordering_due = true;
                batch.push(Event {
                    time: now,
                    kind: EventKind::CoflowFinish,
                    job: cref.job,
                    coflow: Some(cref.coflow),
                    flow: None,
                });
                let job = table.job_mut(cref.job).expect("job exists");
                if job.coflows.iter().all(|c| c.is_finished()) {
                    job.completion_time = job.coflows.iter().filter_map(|c| c.completion_time).reduce(f64::max);
                    finished_jobs += 1;
                    batch.push(Event {
                        time: now,
                        kind: EventKind::JobFinish,
                        job: cref.job,
                        coflow: None,
                        flow: None,
                    });
                }
            }
            if config.record_events {
                batch.sort_by(|a, b| {
                    (a.kind, a.job, a.coflow, a.flow).cmp(&(b.kind, b.job, b.coflow, b.flow))
                });
                events.extend(batch);
            }
        }
    }

    let jobs = table.into_jobs();
    let report = SimReport::from_jobs(&jobs, truncated, budget_exhausted, now);
    Ok(SimRun { jobs, report, events, orderings, allocations, max_port_load: peak_load, rates })
}

fn flow_rates(table: &JobTable, now: f64) -> Vec<FlowRate> {
    table
        .jobs()
        .iter()
        .filter(|j| j.release_time <= now)
        .flat_map(|j| j.coflows.iter())
        .flat_map(|c| c.flows.iter())
        .filter(|f| !f.is_finished())
        .map(|f| FlowRate {
            job: f.job_id,
            coflow: f.coflow_id,
            flow: f.flow_id,
            src: f.src_port,
            dst: f.dst_port,
            rate: f.rate,
        })
        .collect()
}
