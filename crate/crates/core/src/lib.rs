pub mod cli;
pub mod event_channel;
pub mod metrics;
pub mod monitor;
pub mod runtime;
pub mod sim;
pub mod trace;
pub mod workloads;
