//! Desk-scale monocular semantic scene completion.
//!
//! The crate lifts 2D image features into a camera-aligned voxel grid,
//! regulates the lifted features with parallel channel (squeeze-excitation)
//! and parameter-free spatial (energy-based) attention, decodes them with
//! gated multi-scale skip fusion, and trains the whole network with a small
//! reverse-mode tape. Synthetic scenes, losses and the usual scene completion
//! metrics are included so the pipeline can be trained and evaluated on a CPU.

pub mod attention;
pub mod camera;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod ops;
pub mod param;
pub mod rng;
pub mod scene;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod volfile;

pub use error::{AmaaError, Result};
pub use param::ParamStore;
pub use tape::{Tape, Var};
pub use tensor::{Image2D, Tensor, VoxelVolume};
