//! Two-stage named entity recognition for flat and nested entities.
//!
//! Stage one tags word boundaries and pairs them into candidate regions; stage two
//! scores each candidate for entityness and type. Candidates are judged
//! independently, so overlapping entities come out naturally.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod region_proposal;
pub mod stage2;
