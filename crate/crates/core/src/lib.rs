//! Hybridization toolbox: MMPS approximation of single-track vehicle dynamics
//! and convex-union approximation of its feasible region.

pub mod fit;
pub mod gridgen;
pub mod mmps;
pub mod optim;
pub mod regions;
pub mod report;
pub mod seeding;
pub mod vehicle;
