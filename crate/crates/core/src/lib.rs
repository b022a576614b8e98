//! Fully distributed estimation and control of LTI systems over digraphs,
//! with finite-time exact average consensus between estimation steps and a
//! token-passing protocol for choosing the local gains.

pub mod acceptance;
pub mod batch;
pub mod consensus;
pub mod gain_design;
pub mod network;
pub mod numerics;
pub mod plant;
pub mod report;
pub mod runtime;
pub mod scenario;
