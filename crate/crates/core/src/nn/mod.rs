//! From-scratch CNN engine: layer kernels with exact backward passes,
//! softmax/NLL loss, SGD with momentum and weight decay, Gaussian
//! initialization and the training loop.

mod checkpoint;
mod model;
mod network;
pub mod ops;
mod optim;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::arch::{ArchSpec, LayerSpec};
use crate::tensor::Tensor;

pub use checkpoint::{load_model, read_model, save_model, write_model, CheckpointError, MODEL_MAGIC};
pub use model::{cross_validate, extract_activations, train, Extractor, TrainMeta, TrainedModel};
pub use network::Network;
pub use ops::{
    conv2d, conv2d_backward, dropout, fully_connected, fully_connected_backward, maxpool,
    maxpool_backward, relu, relu_backward, softmax_nll, ConvGrads, FcGrads, Mode,
};
pub use optim::{sgd_step, TrainSchedule};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("input has {got} channels, filters expect {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("expected {expected} values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("{0}")]
    Shape(String),
    #[error("pooling window {window} with stride {stride} is invalid for this input")]
    BadWindow { window: usize, stride: usize },
    #[error("drop probability {0} outside [0, 1)")]
    BadDropout(f64),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{expected} parameterized layers but {got} sigmas")]
    SigmaCount { expected: usize, got: usize },
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("loss became non-finite at epoch {epoch}, batch {batch} (lr {lr})")]
    Diverged { epoch: usize, batch: usize, lr: f64 },
    #[error("layer index {index} out of range ({layers} layers)")]
    LayerIndex { index: usize, layers: usize },
}

/// Weights and biases of one convolutional (`[out_c, in_c, k, k]`) or fully
/// connected (`[out, in]`) layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Tensor,
    pub biases: Tensor,
}

impl LayerParams {
    pub fn zeros_like(&self) -> Self {
        LayerParams {
            weights: Tensor::zeros(self.weights.shape().to_vec()),
            biases: Tensor::zeros(self.biases.shape().to_vec()),
        }
    }
}

/// Parameter shapes of every conv/fc layer in declaration order.
pub fn param_shapes(arch: &ArchSpec) -> Vec<(Vec<usize>, usize)> {
    let shapes = crate::arch::infer_shapes(arch).expect("validated architecture");
    let mut input = arch.input_shape();
    let mut out = Vec::new();
    for (layer, shape) in arch.layers.iter().zip(&shapes) {
        match *layer {
            LayerSpec::Conv {
                filters, kernel, ..
            } => {
                let in_c = match input {
                    crate::arch::ActShape::Spatial { c, .. } => c,
                    crate::arch::ActShape::Flat(_) => unreachable!("validated"),
                };
                out.push((vec![filters, in_c, kernel, kernel], filters));
            }
            LayerSpec::FullyConnected { units, .. } => {
                out.push((vec![units, input.len()], units));
            }
            _ => {}
        }
        input = shape.output;
    }
    out
}

/// Gaussian weights `N(0, sigma^2)` and zero biases. `sigmas` has one entry
/// per parameterized layer, or a single entry shared by all of them.
pub fn init_params(arch: &ArchSpec, sigmas: &[f64], seed: u64) -> Result<Vec<LayerParams>, NnError> {
    let shapes = param_shapes(arch);
    if sigmas.len() != 1 && sigmas.len() != shapes.len() {
        return Err(NnError::SigmaCount {
            expected: shapes.len(),
            got: sigmas.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(shapes
        .into_iter()
        .enumerate()
        .map(|(i, (wshape, nb))| {
            let sigma = if sigmas.len() == 1 { sigmas[0] } else { sigmas[i] };
            let n: usize = wshape.iter().product();
            let w = (0..n)
                .map(|_| sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect();
            LayerParams {
                weights: Tensor::from_parts(wshape, w),
                biases: Tensor::zeros(vec![nb]),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::parse_arch;

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let arch = parse_arch("1x28x28-32C5P0-MP2S2-32C5P0-MP2S2-H32-D0.5-H10").unwrap();
        let a = init_params(&arch, &[0.2, 0.2, 0.01, 0.1], 7).unwrap();
        let b = init_params(&arch, &[0.2, 0.2, 0.01, 0.1], 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert_eq!(a[0].weights.shape(), &[32, 1, 5, 5]);
        assert_eq!(a[1].weights.shape(), &[32, 32, 5, 5]);
        assert_eq!(a[2].weights.shape(), &[32, 512]);
        assert_eq!(a[3].weights.shape(), &[10, 32]);
        assert!(a.iter().all(|p| p.biases.data().iter().all(|&b| b == 0.0)));
        let c = init_params(&arch, &[0.2, 0.2, 0.01, 0.1], 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_sigma_count() {
        let arch = parse_arch("1x4x4-2C3P0-H3-H2").unwrap();
        assert!(init_params(&arch, &[0.1], 0).is_ok());
        assert!(init_params(&arch, &[0.1, 0.1, 0.1], 0).is_ok());
        assert_eq!(
            init_params(&arch, &[0.1, 0.1], 0),
            Err(NnError::SigmaCount { expected: 3, got: 2 })
        );
    }

    #[test]
    fn init_variance_matches_sigma() {
        // 10^5 draws at sigma 0.04: variance within 2% of 0.0016
        let arch = parse_arch("1x1x100-H1000").unwrap();
        let p = init_params(&arch, &[0.04], 3).unwrap();
        let w = p[0].weights.data();
        assert_eq!(w.len(), 100_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        assert!((var - 0.0016).abs() / 0.0016 < 0.02, "variance {var}");
    }
}
