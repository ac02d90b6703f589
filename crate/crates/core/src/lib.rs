//! Simulation engine for de Broglie–Bohm (pilot-wave) quantum mechanics.
//!
//! Wave functions live on periodic or open lattices ([`lattice`]), evolve
//! under a split-operator propagator ([`dynamics`]), and guide point
//! particles along deterministic trajectories ([`guidance`]). Ensembles of
//! such particles are sampled and compared with the Born rule in
//! [`ensembles`]; configuration jumps for discrete degrees of freedom are in
//! [`jumps`]; ready-made scenarios and POVM bookkeeping are in
//! [`experiments`].

pub mod dynamics;
pub mod ensembles;
pub mod experiments;
pub mod guidance;
pub mod jumps;
pub mod lattice;
pub mod seeding;
pub mod acceptance;
pub mod cli;
