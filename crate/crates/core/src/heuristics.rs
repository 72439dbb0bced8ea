//! Baseline schedulers.
//!
//! `Wsebf` divides the bottleneck time by the job weight. It is a simple
//! weighted variant, not a reimplementation of any published approximation
//! algorithm.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::CoflowRef;
use crate::sim::{Scheduler, SimError, Snapshot, PORT_CAPACITY};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeuristicKind {
    Fifo,
    Sebf,
    Wsebf,
    Random,
}

impl FromStr for HeuristicKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fifo" => Ok(Self::Fifo),
            "sebf" => Ok(Self::Sebf),
            "wsebf" => Ok(Self::Wsebf),
            "random" => Ok(Self::Random),
            other => Err(format!("unknown heuristic {other:?}")),
        }
    }
}

impl fmt::Display for HeuristicKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fifo => "fifo",
            Self::Sebf => "sebf",
            Self::Wsebf => "wsebf",
            Self::Random => "random",
        })
    }
}

pub struct Heuristic {
    kind: HeuristicKind,
    rng: ChaCha8Rng,
}

impl Heuristic {
    pub fn new(kind: HeuristicKind, seed: u64) -> Self {
        Self { kind, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn kind(&self) -> HeuristicKind {
        self.kind
    }
}

/// Time to drain the coflow's busiest port at full capacity.
pub fn bottleneck_time(snap: &Snapshot, c: CoflowRef) -> f64 {
    snap.coflow(c).map_or(f64::INFINITY, |v| v.bottleneck_bytes / PORT_CAPACITY)
}

impl Scheduler for Heuristic {
    fn order(&mut self, snap: &Snapshot) -> Result<Vec<CoflowRef>, SimError> {
        let mut out = snap.candidates.clone();
        let arrival = |c: &CoflowRef| snap.job(c.job).map_or(f64::INFINITY, |j| j.arrival_time);
        let fifo = |a: &CoflowRef, b: &CoflowRef| -> Ordering {
            arrival(a).total_cmp(&arrival(b)).then(a.job.cmp(&b.job)).then(a.coflow.cmp(&b.coflow))
        };
        match self.kind {
            HeuristicKind::Fifo => out.sort_by(fifo),
            HeuristicKind::Sebf => {
                out.sort_by(|a, b| bottleneck_time(snap, *a).total_cmp(&bottleneck_time(snap, *b)).then(fifo(a, b)))
            }
            HeuristicKind::Wsebf => {
                let key = |c: &CoflowRef| bottleneck_time(snap, *c) / snap.job(c.job).map_or(1.0, |j| j.weight);
                out.sort_by(|a, b| key(a).total_cmp(&key(b)).then(fifo(a, b)))
            }
            HeuristicKind::Random => {
                out.sort();
                out.shuffle(&mut self.rng);
            }
        }
        Ok(out)
    }
}
