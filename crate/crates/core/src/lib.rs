//! Multi-agent packet routing with learned graph observations.
//!
//! The crate is organised bottom-up:
//!
//! - [`graph`]: fixed-degree geometric graphs, shortest paths, betweenness.
//! - [`env`]: the routing environment, observations, baselines and masking.
//! - [`nn`]: dense layers, LSTM cells, AdamW and gradient checks.
//! - [`gnn`]: node-state message passing and graph-observation readout.
//! - [`sl`]: the supervised shortest-path regression task.
//! - [`dqn`]: shared-parameter deep Q-learning, replay and evaluation.

pub mod dqn;
pub mod env;
pub mod gnn;
pub mod graph;
pub mod nn;
pub mod sl;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/graphs.md")]
    mod graphs {}
    #[doc = include_str!("../../../book/src/environment.md")]
    mod environment {}
    #[doc = include_str!("../../../book/src/graph-observations.md")]
    mod graph_observations {}
    #[doc = include_str!("../../../book/src/shortest-paths.md")]
    mod shortest_paths {}
    #[doc = include_str!("../../../book/src/dqn.md")]
    mod dqn {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
