//! Online scheduling of multi-stage coflow jobs on a non-blocking switch
//! fabric, with a learned scheduler built from a pipelined DAG encoder,
//! self-attention over ready coflows and a REINFORCE trainer.

pub mod model;
pub mod sim;
pub mod workload;
pub mod nn;
pub mod encoder;
pub mod policy;
pub mod heuristics;
pub mod trainer;
