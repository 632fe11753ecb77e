//! Finite mixtures of normalizing flows.
//!
//! Each mixture component is a stack of invertible layers over a standard
//! normal base. A small network with a softmax output plays the role of the
//! variational posterior over component membership, and everything is fitted
//! jointly by maximizing an evidence lower bound whose expectation over the
//! discrete latent is computed exactly.
//!
//! The crate carries its own reverse-mode differentiation engine
//! ([`autodiff`]), the neural building blocks and Adam ([`nn`]), the flow
//! layers ([`flows`]), the mixture model and its training procedures
//! ([`mixture`]), data generators and loaders ([`datasets`]), evaluation
//! tooling ([`eval`]) and the on-disk formats used by the command line
//! runner ([`config`], [`checkpoint`]).

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod datasets;
mod error;
pub mod eval;
pub mod experiment;
pub mod flows;
pub mod mixture;
pub mod nn;
pub mod rng;
pub mod tensor;

pub use autodiff::{Graph, ParamId, ParamStore, Var};
pub use error::{Error, Result};
pub use flows::{FlowLayer, FlowStack};
pub use mixture::{MixtureModel, TemperatureSchedule};
pub use tensor::Tensor;
