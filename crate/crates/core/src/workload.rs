//! Workload construction: trace ingestion, synthetic traces, random job DAGs,
//! train/validation/test splitting, byte noise and the on-disk format.
//!
//! Trace text format, one coflow per line:
//!
//! ```text
//! coflow_id arrival_ms num_senders s1 s2 ... num_receivers r1:mb1 r2:mb2 ...
//! ```
//!
//! An optional first line `port_count coflow_count` is skipped.
//!
//! Workload files start with the line `coflowforge-workload v1` followed by one
//! JSON job object per line.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Coflow, Flow, Job};

pub const WORKLOAD_HEADER: &str = "coflowforge-workload v1";
pub const TEMPLATES_HEADER: &str = "coflowforge-templates v1";

/// Time span over which `arrival_rate` jobs arrive on average.
pub const ARRIVAL_WINDOW: f64 = 100.0;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("record on line {line}: {msg}")]
    Record { line: usize, msg: String },
    #[error("unsupported header {found:?}, expected {expected:?}")]
    Version { found: String, expected: &'static str },
    #[error("invalid workload spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One trace coflow with receiver bytes already partitioned onto senders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoflowTemplate {
    pub id: u64,
    pub arrival_ms: u64,
    /// (sender port, receiver port, MB)
    pub flows: Vec<(usize, usize, f64)>,
}

impl CoflowTemplate {
    /// Total MB sent per sender port, in first-appearance order.
    pub fn senders(&self) -> Vec<(usize, f64)> {
        totals(self.flows.iter().map(|&(s, _, mb)| (s, mb)))
    }

    /// Total MB received per receiver port, in first-appearance order.
    pub fn receivers(&self) -> Vec<(usize, f64)> {
        totals(self.flows.iter().map(|&(_, r, mb)| (r, mb)))
    }

    pub fn total_mb(&self) -> f64 {
        self.flows.iter().map(|f| f.2).sum()
    }
}

fn totals(it: impl Iterator<Item = (usize, f64)>) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = Vec::new();
    for (port, mb) in it {
        match out.iter_mut().find(|(p, _)| *p == port) {
            Some(entry) => entry.1 += mb,
            None => out.push((port, mb)),
        }
    }
    out
}

/// Splits `mb` into `senders` shares: equal whole-MB shares, the leftover
/// whole MBs one each to the lowest-indexed senders, and any fractional MB to
/// the next sender in line.
pub fn partition_bytes(mb: f64, senders: usize) -> Vec<f64> {
    let whole = mb.floor();
    let frac = mb - whole;
    let whole = whole as u64;
    let n = senders as u64;
    let base = whole / n;
    let rem = whole % n;
    let mut shares: Vec<f64> = (0..n).map(|i| (base + u64::from(i < rem)) as f64).collect();
    if frac > 0.0 {
        shares[(rem as usize) % senders] += frac;
    }
    shares
}

/// Parses trace text into templates.
pub fn parse_trace(text: &str) -> Result<Vec<CoflowTemplate>, WorkloadError> {
    let mut out = Vec::new();
    let mut first = true;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let raw = raw.trim();
        if raw.is_empty() || raw.starts_with('#') {
            continue;
        }
        if std::mem::take(&mut first) && is_trace_header(raw) {
            continue;
        }
        out.push(parse_trace_record(raw, line)?);
    }
    Ok(out)
}

fn is_trace_header(raw: &str) -> bool {
    let tok: Vec<&str> = raw.split_whitespace().collect();
    tok.len() == 2 && tok.iter().all(|t| t.parse::<u64>().is_ok())
}

fn parse_trace_record(raw: &str, line: usize) -> Result<CoflowTemplate, WorkloadError> {
    let fmt = |msg: String| WorkloadError::Format { line, msg };
    let mut tok = raw.split_whitespace();
    let mut next = |what: &str| tok.next().ok_or_else(|| fmt(format!("missing {what}")));
    let num = |s: &str, what: &str| -> Result<u64, WorkloadError> {
        s.parse::<u64>()
            .map_err(|_| WorkloadError::Format { line, msg: format!("bad {what} {s:?}") })
    };

    let id = num(next("coflow id")?, "coflow id")?;
    let arrival_ms = num(next("arrival")?, "arrival")?;
    let n_send = num(next("sender count")?, "sender count")? as usize;
    let mut senders = Vec::with_capacity(n_send);
    for _ in 0..n_send {
        senders.push(num(next("sender")?, "sender")? as usize);
    }
    let n_recv = num(next("receiver count")?, "receiver count")? as usize;
    let mut receivers = Vec::with_capacity(n_recv);
    for _ in 0..n_recv {
        let item = next("receiver")?;
        let (port, mb) = item
            .split_once(':')
            .ok_or_else(|| fmt(format!("receiver {item:?} is not port:mb")))?;
        let port = num(port, "receiver port")? as usize;
        let mb: f64 = mb
            .parse()
            .map_err(|_| fmt(format!("bad receiver size {mb:?}")))?;
        if !(mb >= 0.0 && mb.is_finite()) {
            return Err(fmt(format!("receiver size {mb} out of range")));
        }
        receivers.push((port, mb));
    }
    if let Some(extra) = tok.next() {
        return Err(fmt(format!("trailing token {extra:?}")));
    }
    if senders.is_empty() || receivers.is_empty() {
        return Err(WorkloadError::Record {
            line,
            msg: format!("coflow {id} needs at least one sender and one receiver"),
        });
    }

    let mut flows = Vec::new();
    for &(recv, mb) in &receivers {
        for (share, &send) in partition_bytes(mb, senders.len()).into_iter().zip(&senders) {
            if share > 0.0 {
                flows.push((send, recv, share));
            }
        }
    }
    if flows.is_empty() {
        return Err(WorkloadError::Record { line, msg: format!("coflow {id} carries no bytes") });
    }
    Ok(CoflowTemplate { id, arrival_ms, flows })
}

pub fn ingest_trace(path: &Path) -> Result<Vec<CoflowTemplate>, WorkloadError> {
    parse_trace(&fs::read_to_string(path)?)
}

/// Writes a trace with the same layout and rough shape as the public
/// production coflow trace: mostly narrow coflows with a heavy-tailed byte
/// distribution and a minority of wide shuffles. Sizes are whole MB.
pub fn synthetic_trace(records: usize, ports: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = LogNormal::new(1.0f64.ln(), 1.0).expect("valid lognormal");
    let ports = ports.max(2);
    let all: Vec<usize> = (0..ports).collect();
    let mut arrival = 0u64;
    let mut out = String::new();
    for id in 0..records {
        arrival += rng.gen_range(0..2_000);
        let (ns, nr) = if rng.gen_bool(0.7) {
            (rng.gen_range(1..=2), rng.gen_range(1..=2))
        } else {
            (rng.gen_range(2..=6), rng.gen_range(2..=6))
        };
        let senders: Vec<usize> = all.choose_multiple(&mut rng, ns.min(ports)).copied().collect();
        let receivers: Vec<usize> = all.choose_multiple(&mut rng, nr.min(ports)).copied().collect();
        let mut line = format!("{} {} {}", id + 1, arrival, senders.len());
        for s in &senders {
            line.push_str(&format!(" {s}"));
        }
        line.push_str(&format!(" {}", receivers.len()));
        for r in &receivers {
            let mb = sizes.sample(&mut rng).ceil().clamp(1.0, 400.0);
            line.push_str(&format!(" {r}:{mb}"));
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub port_count: usize,
    /// Jobs per `ARRIVAL_WINDOW` time units.
    pub arrival_rate: f64,
    pub mean_coflows: usize,
    pub weight_low: f64,
    pub weight_high: f64,
    pub job_count: usize,
    pub rng_seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            port_count: 20,
            arrival_rate: 20.0,
            mean_coflows: 8,
            weight_low: 1.0,
            weight_high: 5.0,
            job_count: 100,
            rng_seed: 0,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: &str| Err(WorkloadError::Spec(m.into()));
        if self.port_count < 2 {
            return bad("port count must be at least 2");
        }
        if !(self.arrival_rate > 0.0) {
            return bad("arrival rate must be positive");
        }
        if self.mean_coflows < 1 {
            return bad("mean coflow count must be at least 1");
        }
        if !(self.weight_low > 0.0 && self.weight_low <= self.weight_high) {
            return bad("weights need 0 < low <= high");
        }
        Ok(())
    }
}

/// Builds `job_count` jobs with Poisson arrivals and random starts-after DAGs.
///
/// Each job draws K = 1 + Poisson(n - 1) coflows from the templates (with
/// replacement), remaps each template's machines onto random fabric ports,
/// and links every coflow k > 0 to one predecessor drawn from 0..k.
pub fn generate_workload(
    spec: &WorkloadSpec,
    templates: &[CoflowTemplate],
) -> Result<Vec<Job>, WorkloadError> {
    spec.validate()?;
    if templates.is_empty() {
        return Err(WorkloadError::Spec("no coflow templates".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let gaps = Exp::new(spec.arrival_rate / ARRIVAL_WINDOW).expect("positive rate");
    let extra = (spec.mean_coflows > 1)
        .then(|| Poisson::new((spec.mean_coflows - 1) as f64).expect("positive mean"));

    let mut jobs = Vec::with_capacity(spec.job_count);
    let mut clock = 0.0;
    for job_id in 0..spec.job_count {
        clock += gaps.sample(&mut rng);
        let k = 1 + extra.as_ref().map_or(0, |p| p.sample(&mut rng) as usize);
        let mut coflows = Vec::with_capacity(k);
        for idx in 0..k {
            let template = &templates[rng.gen_range(0..templates.len())];
            let flows = remap_ports(template, spec.port_count, &mut rng);
            let preds = if idx == 0 { vec![] } else { vec![rng.gen_range(0..idx)] };
            coflows.push(Coflow::new(flows, preds));
        }
        let weight = if spec.weight_low == spec.weight_high {
            spec.weight_low
        } else {
            rng.gen_range(spec.weight_low..=spec.weight_high)
        };
        jobs.push(Job::new(job_id, clock, weight, coflows));
    }
    Ok(jobs)
}

fn remap_ports(template: &CoflowTemplate, ports: usize, rng: &mut ChaCha8Rng) -> Vec<Flow> {
    let mut senders: HashMap<usize, usize> = HashMap::new();
    let mut receivers: HashMap<usize, usize> = HashMap::new();
    template
        .flows
        .iter()
        .map(|&(s, r, mb)| {
            // Draw in flow order so the result is independent of hash order.
            let src = *senders.entry(s).or_insert_with(|| rng.gen_range(0..ports));
            let dst = *receivers.entry(r).or_insert_with(|| rng.gen_range(0..ports));
            Flow::new(src, dst, mb)
        })
        .collect()
}

/// Shuffles `items` and cuts them into three parts proportional to `ratios`.
/// The validation and test sizes are rounded down; training takes the rest.
pub fn split_workload<T: Clone>(
    items: &[T],
    ratios: (u32, u32, u32),
    seed: u64,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let total = u64::from(ratios.0 + ratios.1 + ratios.2).max(1);
    let n = items.len() as u64;
    let n_val = (n * u64::from(ratios.1) / total) as usize;
    let n_test = (n * u64::from(ratios.2) / total) as usize;
    let n_train = items.len() - n_val - n_test;

    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| items[i].clone()).collect::<Vec<T>>()
    };
    (
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_val]),
        pick(&order[n_train + n_val..]),
    )
}

/// Scales every flow by max(0.01, 1 + g) with g ~ N(0, sigma).
pub fn inject_noise(jobs: &[Job], sigma: f64, seed: u64) -> Vec<Job> {
    let mut out = jobs.to_vec();
    if sigma <= 0.0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    for flow in out
        .iter_mut()
        .flat_map(|j| j.coflows.iter_mut())
        .flat_map(|c| c.flows.iter_mut())
    {
        let factor = (1.0 + normal.sample(&mut rng)).max(0.01);
        flow.total_bytes *= factor;
        flow.remaining_bytes = flow.total_bytes;
    }
    out
}

#[derive(Serialize, Deserialize)]
struct JobRecord {
    id: usize,
    arrival: f64,
    weight: f64,
    coflows: Vec<CoflowRecord>,
}

#[derive(Serialize, Deserialize)]
struct CoflowRecord {
    id: usize,
    preds: Vec<usize>,
    flows: Vec<FlowRecord>,
}

#[derive(Serialize, Deserialize)]
struct FlowRecord {
    src: usize,
    dst: usize,
    mb: f64,
}

pub fn workload_to_string(jobs: &[Job]) -> String {
    let mut out = String::from(WORKLOAD_HEADER);
    out.push('\n');
    for job in jobs {
        let record = JobRecord {
            id: job.job_id,
            arrival: job.arrival_time,
            weight: job.weight,
            coflows: job
                .coflows
                .iter()
                .map(|c| CoflowRecord {
                    id: c.coflow_id,
                    preds: c.predecessors.clone(),
                    flows: c
                        .flows
                        .iter()
                        .map(|f| FlowRecord { src: f.src_port, dst: f.dst_port, mb: f.total_bytes })
                        .collect(),
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&record).expect("job serializes"));
        out.push('\n');
    }
    out
}

pub fn workload_from_str(text: &str) -> Result<Vec<Job>, WorkloadError> {
    let mut lines = text.lines().enumerate();
    check_header(lines.next().map(|(_, l)| l), WORKLOAD_HEADER)?;
    let mut jobs = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fmt = |msg: String| WorkloadError::Format { line: idx + 1, msg };
        let rec: JobRecord = serde_json::from_str(line).map_err(|e| fmt(e.to_string()))?;
        let mut coflows = Vec::with_capacity(rec.coflows.len());
        for (k, c) in rec.coflows.into_iter().enumerate() {
            if c.id != k {
                return Err(fmt(format!("coflow id {} out of sequence (expected {k})", c.id)));
            }
            let flows = c.flows.into_iter().map(|f| Flow::new(f.src, f.dst, f.mb)).collect();
            coflows.push(Coflow::new(flows, c.preds));
        }
        jobs.push(Job::new(rec.id, rec.arrival, rec.weight, coflows));
    }
    Ok(jobs)
}

fn check_header(found: Option<&str>, expected: &'static str) -> Result<(), WorkloadError> {
    match found {
        Some(h) if h.trim() == expected => Ok(()),
        other => Err(WorkloadError::Version { found: other.unwrap_or("").to_string(), expected }),
    }
}

pub fn save_workload(jobs: &[Job], path: &Path) -> Result<(), WorkloadError> {
    fs::write(path, workload_to_string(jobs))?;
    Ok(())
}

pub fn load_workload(path: &Path) -> Result<Vec<Job>, WorkloadError> {
    workload_from_str(&fs::read_to_string(path)?)
}

pub fn save_templates(templates: &[CoflowTemplate], path: &Path) -> Result<(), WorkloadError> {
    let mut out = String::from(TEMPLATES_HEADER);
    out.push('\n');
    for t in templates {
        out.push_str(&serde_json::to_string(t).expect("template serializes"));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_templates(path: &Path) -> Result<Vec<CoflowTemplate>, WorkloadError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    check_header(lines.next().map(|(_, l)| l), TEMPLATES_HEADER)?;
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(idx, l)| {
            serde_json::from_str(l)
                .map_err(|e| WorkloadError::Format { line: idx + 1, msg: e.to_string() })
        })
        .collect()
}
