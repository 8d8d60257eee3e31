//! Deep binary hashing for image retrieval.
//!
//! A small CNN is trained as a classifier; the activations of its first
//! fully connected layer (the "knob") are thresholded at zero to give
//! binary codes, which are then searched by Hamming ranking or radius
//! lookup and scored with the usual retrieval metrics.
//!
//! * [`arch`]: compact architecture strings such as `1x28x28-32C5P2-MP2S2-H32-H10`
//! * [`nn`]: layers, backpropagation, SGD training and checkpoints
//! * [`data`]: MNIST/CIFAR-10 loaders and query/train splits
//! * [`hashing`]: binarization, Gaussian LSH, code and feature files
//! * [`retrieval`]: Hamming/L2 ranking and radius lookup
//! * [`eval`]: MAP, precision@N, PR curves, radius precision

pub mod arch;
pub mod data;
pub mod eval;
pub mod hashing;
pub mod nn;
pub mod retrieval;
pub mod tensor;

pub use arch::{parse_arch, ArchSpec};
pub use tensor::Tensor;
