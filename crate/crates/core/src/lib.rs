//! Optical flow estimation in dense fog with a jointly trained domain
//! transformation network.
//!
//! The crate provides the physics of fog formation ([`fogphys`]), the network
//! components ([`nets`]), the training objectives ([`losses`]), data handling
//! ([`datapipe`]), the three-stage training protocol ([`trainloop`]) and
//! evaluation utilities ([`eval`]).

pub mod config;
pub mod datapipe;
pub mod error;
pub mod eval;
pub mod fogphys;
pub mod losses;
pub mod nets;
pub mod ops;
pub mod raster;
pub mod trainloop;

pub use error::{Error, Result};
pub use raster::{FlowField, Image, ScalarMap};
