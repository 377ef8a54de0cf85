pub mod acquisition;
pub mod al_loop;
pub mod api;
pub mod bandit;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod ensemble;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod ssl;
