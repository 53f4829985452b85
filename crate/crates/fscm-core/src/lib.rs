//! Click modeling for multi-block mobile pages.
//!
//! The pipeline: [`page_dag`] turns a block layout into an examination-flow
//! DAG; [`model`] runs a DAG-structured GRU with a comparison module over
//! it; [`trainer`] fits it to session logs with Adam; [`simulator`]
//! generates synthetic sessions with known browsing behavior; [`metrics`]
//! scores predictions with log-likelihood and AUC; [`baselines`] provides
//! the block-wise and list-wise single-list GRU references.

pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod metrics;
pub mod model;
pub mod numkit;
pub mod page_dag;
pub mod simulator;
pub mod trainer;
