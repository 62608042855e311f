//! Attitude consensus for spacecraft formations over delayed directed networks.
//!
//! The crate covers the rigid-body model in modified Rodrigues parameters, the
//! feedback-linearizing consensus law, a fixed-step delay-differential
//! integrator, and the frequency-domain and LMI stability checks.

pub mod attitude;
pub mod controller;
pub mod lmi;
pub mod mat;
pub mod plot;
pub mod runner;
pub mod scenario;
pub mod sim;
pub mod stability;
pub mod topology;
