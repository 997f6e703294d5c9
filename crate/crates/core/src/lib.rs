//! Spatial-temporal traffic modelling with the dMAPAR-HMM and MGF-based
//! stochastic network calculus.
//!
//! The crate is organised bottom-up: [`trace`] turns packet records into
//! slot series, [`map`] and [`arhmm`] hold the temporal and spatial building
//! blocks, [`carrier`] and [`model`] compose them into the joint chain,
//! [`envelope`] derives `(sigma, rho)` arrival envelopes, [`snc`] combines
//! envelopes over a feed-forward network and [`des`] simulates the same
//! network for ground truth.

pub mod arhmm;
pub mod carrier;
pub mod des;
pub mod envelope;
pub mod error;
pub mod linalg;
pub mod map;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod scenarios;
pub mod snc;
pub mod trace;

pub use error::{Error, Result};
