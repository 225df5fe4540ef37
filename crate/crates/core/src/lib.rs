//! gridling: a miniature multi-user GPU batch workload manager.
//!
//! Modules map onto the subsystems of a small shared cluster: directive-file
//! parsing ([`jobspec`]), exclusive GPU allocation ([`cluster`]), user
//! accounts with limits and expiration ([`accounts`]), the QOS-priority
//! queue ([`scheduler`]), append-only job history ([`accounting`]), the
//! authenticated controller/agent protocol ([`control`]), the controller
//! event loop ([`controller`]), a deterministic simulator and local
//! execution mode ([`sim`]), and a hardware build planner ([`planner`]).

pub mod accounting;
pub mod agent;
pub mod accounts;
pub mod cluster;
pub mod config;
pub mod control;
pub mod controller;
pub mod rpc;
pub mod server;
pub mod jobspec;
pub mod planner;
pub mod scheduler;
pub mod sim;

pub use accounts::{QosLevel, UserAccount};
pub use cluster::{Allocation, Node};
pub use controller::Controller;
pub use jobspec::JobRequest;
pub use scheduler::{Job, JobState};
