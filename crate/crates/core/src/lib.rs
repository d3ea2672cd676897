#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod coupling;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod par;
pub mod quadrature;
pub mod reference;
pub mod rng;
pub mod spde;
pub mod stats;
pub mod transforms;
