//! Discrete-event simulation of online coflow scheduling on a P x P
//! non-blocking switch.

mod engine;
mod fabric;
mod snapshot;

pub use engine::{run_simulation, Event, EventKind, FlowRate, JobRow, RateSample, SimConfig, SimReport, SimRun};
pub use fabric::{
    allocate_rates, max_port_load, Allocation, FabricState, JobTable, Queues, PORT_CAPACITY, RATE_EPS,
};
pub use snapshot::{snapshot, CoflowView, JobView, Snapshot};

use thiserror::Error;

use crate::model::{CoflowRef, JobId, ModelError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("priority list is missing unfinished coflow {0:?}")]
    MissingPriority(CoflowRef),
    #[error("scheduler returned {0:?}, which is not awaiting an order")]
    UnexpectedCoflow(CoflowRef),
    #[error("unknown coflow {0:?}")]
    UnknownCoflow(CoflowRef),
    #[error("duplicate job id {0}")]
    DuplicateJob(JobId),
    #[error("simulation stalled at t={0}: unfinished coflows but no progress")]
    Stalled(f64),
    #[error("scheduler failed: {0}")]
    Scheduler(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Orders the coflows awaiting bandwidth. Called whenever a job arrives or a
/// coflow finishes and at least one coflow is awaiting an order.
pub trait Scheduler {
    /// Returns `snapshot.candidates` in priority order, highest first.
    fn order(&mut self, snapshot: &Snapshot) -> Result<Vec<CoflowRef>, SimError>;
}

impl<S: Scheduler + ?Sized> Scheduler for &mut S {
    fn order(&mut self, snapshot: &Snapshot) -> Result<Vec<CoflowRef>, SimError> {
        (**self).order(snapshot)
    }
}

impl<S: Scheduler + ?Sized> Scheduler for Box<S> {
    fn order(&mut self, snapshot: &Snapshot) -> Result<Vec<CoflowRef>, SimError> {
        (**self).order(snapshot)
    }
}
