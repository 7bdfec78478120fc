pub mod autodiff;
pub mod data;
pub mod domain;
pub mod engine;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod objectives;
