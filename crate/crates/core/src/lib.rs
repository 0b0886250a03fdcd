//! Graph attention steganalysis for spatial-domain grayscale images.
//!
//! An image is cut into overlapping patches, every patch is mapped to a
//! feature vector by one shared shallow CNN, the patches become the nodes of
//! a graph, and two graph attention layers followed by an average readout
//! and a small classifier decide cover vs stego.

pub mod autodiff;
pub mod cnn;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod gat;
pub mod model;
pub mod patch_graph;
pub mod pgm;
pub mod stego;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, ModelKind};
pub use patch_graph::{GrayImage, PatchPlan, TopologyKind};
pub use tensor::{Scalar, Tensor};
