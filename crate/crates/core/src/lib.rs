//! Reward shaping with state-action potentials learned from demonstrations.
//!
//! The crate is organised bottom-up:
//!
//! * [`nn`] – dense networks with hand-written reverse passes, Adam, Polyak averaging.
//! * [`env`] – sparse-reward 2D peg-insertion and pick-and-place tasks.
//! * [`demos`] – scripted demonstrators and `(s, a)` datasets.
//! * [`flow`] – masked autoregressive flow density used as `c·log(p + ε)`.
//! * [`gan`] – WGAN-GP whose critic, scaled, is the potential.
//! * [`shaping`] – the potential contract, the shaped reward and a tabular oracle.
//! * [`agents`] – TD3 with shaping, plain TD3, behavioral cloning and λTD3+BC.
//! * [`harness`] – experiment configs, multi-seed runs, aggregation and the CLI.

pub mod agents;
pub mod demos;
pub mod env;
pub mod flow;
pub mod gan;
pub mod harness;
pub mod nn;
pub mod shaping;
