//! Coupling and autoregressive normalizing flows (RealNVP, MAF, C-RQS, A-RQS)
//! trained by maximum likelihood on correlated Gaussian-mixture targets and
//! scored with calibrated two-sample statistics.

pub mod diffcore;
pub mod bijectors;
pub mod seeds;
pub mod targets;
pub mod flows;
pub mod metrics;
pub mod harness;
