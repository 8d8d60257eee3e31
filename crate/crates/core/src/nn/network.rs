use rand::Rng;

use super::ops::{self, ConvGeom, PoolGeom};
use super::{LayerParams, Mode, NnError};
use crate::arch::{ActShape, ArchSpec, LayerSpec};

#[derive(Debug, Clone)]
enum Layer {
    Conv { geom: ConvGeom, relu: bool, param: usize },
    Pool { geom: PoolGeom },
    Fc { in_dim: usize, out_dim: usize, relu: bool, param: usize },
    Dropout { p: f64 },
}

/// An architecture compiled to kernel geometries, plus the per-sample
/// buffers a forward/backward pass needs.
#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    /// `acts[0]` is the input, `acts[i + 1]` the output of layer `i`.
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
    cols: Vec<Vec<f64>>,
    dcols: Vec<f64>,
    argmax: Vec<Vec<usize>>,
    masks: Vec<Vec<f64>>,
    mode: Mode,
}

impl Network {
    pub fn new(arch: &ArchSpec) -> Self {
        let shapes = crate::arch::infer_shapes(arch).expect("validated architecture");
        let mut input = arch.input_shape();
        let mut layers = Vec::with_capacity(arch.layers.len());
        let mut param = 0;
        for (spec, shape) in arch.layers.iter().zip(&shapes) {
            let layer = match (*spec, input) {
                (
                    LayerSpec::Conv {
                        filters,
                        kernel,
                        padding,
                        relu,
                    },
                    ActShape::Spatial { c, h, w },
                ) => {
                    param += 1;
                    Layer::Conv {
                        geom: ConvGeom::new(c, h, w, filters, kernel, padding).expect("validated"),
                        relu,
                        param: param - 1,
                    }
                }
                (LayerSpec::MaxPool { window, stride }, ActShape::Spatial { c, h, w }) => Layer::Pool {
                    geom: PoolGeom::new(c, h, w, window, stride).expect("validated"),
                },
                (LayerSpec::FullyConnected { units, relu }, _) => {
                    param += 1;
                    Layer::Fc {
                        in_dim: input.len(),
                        out_dim: units,
                        relu,
                        param: param - 1,
                    }
                }
                (LayerSpec::Dropout { p }, _) => Layer::Dropout { p },
                _ => unreachable!("validated architecture"),
            };
            layers.push(layer);
            input = shape.output;
        }

        let mut sizes = vec![arch.input_shape().len()];
        sizes.extend(shapes.iter().map(|s| s.output.len()));
        let mut cols = Vec::new();
        let mut argmax = Vec::new();
        let mut masks = Vec::new();
        let mut max_cols = 0;
        for (i, layer) in layers.iter().enumerate() {
            let (c, a, m) = match layer {
                Layer::Conv { geom, .. } => {
                    let n = geom.patch_len() * geom.positions();
                    max_cols = max_cols.max(n);
                    (n, 0, 0)
                }
                Layer::Pool { geom } => (0, geom.out_len(), 0),
                Layer::Dropout { .. } => (0, 0, sizes[i]),
                Layer::Fc { .. } => (0, 0, 0),
            };
            cols.push(vec![0.0; c]);
            argmax.push(vec![0; a]);
            masks.push(vec![0.0; m]);
        }
        Network {
            layers,
            acts: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            deltas: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            cols,
            dcols: vec![0.0; max_cols],
            argmax,
            masks,
            mode: Mode::Eval,
        }
    }

    pub fn input_len(&self) -> usize {
        self.acts[0].len()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Output of layer `index` from the last forward pass.
    pub fn activation(&self, index: usize) -> &[f64] {
        &self.acts[index + 1]
    }

    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("at least the input")
    }

    /// Runs layers `0..=last` on `input` and returns the output of `last`.
    pub fn forward_to<R: Rng + ?Sized>(
        &mut self,
        params: &[LayerParams],
        input: &[f64],
        last: usize,
        mode: Mode,
        rng: &mut R,
    ) -> Result<&[f64], NnError> {
        if last >= self.layers.len() {
            return Err(NnError::LayerIndex {
                index: last,
                layers: self.layers.len(),
            });
        }
        if input.len() != self.input_len() {
            return Err(NnError::DimensionMismatch {
                expected: self.input_len(),
                got: input.len(),
            });
        }
        self.mode = mode;
        self.acts[0].copy_from_slice(input);
        for i in 0..=last {
            let (lo, hi) = self.acts.split_at_mut(i + 1);
            let x = &lo[i];
            let y = &mut hi[0];
            match &self.layers[i] {
                Layer::Conv { geom, relu, param } => {
                    let p = &params[*param];
                    ops::conv_forward(geom, p.weights.data(), p.biases.data(), x, &mut self.cols[i], y);
                    if *relu {
                        ops::relu_inplace(y);
                    }
                }
                Layer::Pool { geom } => ops::pool_forward(geom, x, y, &mut self.argmax[i]),
                Layer::Fc { relu, param, .. } => {
                    let p = &params[*param];
                    ops::fc_forward(p.weights.data(), p.biases.data(), x, y);
                    if *relu {
                        ops::relu_inplace(y);
                    }
                }
                Layer::Dropout { p } => {
                    y.copy_from_slice(x);
                    if mode == Mode::Train && *p > 0.0 {
                        ops::dropout_train(y, *p, rng, &mut self.masks[i]);
                    }
                }
            }
        }
        Ok(&self.acts[last + 1])
    }

    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        params: &[LayerParams],
        input: &[f64],
        mode: Mode,
        rng: &mut R,
    ) -> Result<&[f64], NnError> {
        let last = self.layers.len() - 1;
        self.forward_to(params, input, last, mode, rng)
    }

    /// Backpropagates `grad_out` (gradient of the loss at the network output)
    /// through the last forward pass, adding parameter gradients into
    /// `grads`. Returns the gradient with respect to the input.
    pub fn backward(&mut self, params: &[LayerParams], grad_out: &[f64], grads: &mut [LayerParams]) -> &[f64] {
        let n = self.layers.len();
        self.deltas[n].copy_from_slice(grad_out);
        for i in (0..n).rev() {
            let (lo, hi) = self.deltas.split_at_mut(i + 1);
            let d_in = &mut lo[i];
            let d_out = &mut hi[0];
            let x = &self.acts[i];
            let y = &self.acts[i + 1];
            match &self.layers[i] {
                Layer::Conv { geom, relu, param } => {
                    if *relu {
                        ops::relu_backward_inplace(y, d_out);
                    }
                    let g = &mut grads[*param];
                    ops::conv_backward(
                        geom,
                        params[*param].weights.data(),
                        &self.cols[i],
                        d_out,
                        g.weights.data_mut(),
                        g.biases.data_mut(),
                        Some((d_in, &mut self.dcols[..geom.patch_len() * geom.positions()])),
                    );
                }
                Layer::Pool { .. } => ops::pool_backward(d_out, &self.argmax[i], d_in),
                Layer::Fc { relu, param, .. } => {
                    if *relu {
                        ops::relu_backward_inplace(y, d_out);
                    }
                    let g = &mut grads[*param];
                    ops::fc_backward(
                        params[*param].weights.data(),
                        x,
                        d_out,
                        g.weights.data_mut(),
                        g.biases.data_mut(),
                        Some(d_in),
                    );
                }
                Layer::Dropout { p } => {
                    if self.mode == Mode::Train && *p > 0.0 {
                        for ((d, &g), &m) in d_in.iter_mut().zip(d_out.iter()).zip(&self.masks[i]) {
                            *d = g * m;
                        }
                    } else {
                        d_in.copy_from_slice(d_out);
                    }
                }
            }
        }
        &self.deltas[0]
    }

    /// Shape-check `params` against this network.
    pub fn check_params(&self, params: &[LayerParams]) -> Result<(), NnError> {
        let mut k = 0;
        for layer in &self.layers {
            let (w, b) = match layer {
                Layer::Conv { geom, .. } => (geom.out_c * geom.patch_len(), geom.out_c),
                Layer::Fc { in_dim, out_dim, .. } => (in_dim * out_dim, *out_dim),
                _ => continue,
            };
            let p = params.get(k).ok_or(NnError::DimensionMismatch {
                expected: k + 1,
                got: params.len(),
            })?;
            if p.weights.len() != w || p.biases.len() != b {
                return Err(NnError::Shape(format!("parameter block {k} does not match its layer")));
            }
            k += 1;
        }
        if k != params.len() {
            return Err(NnError::DimensionMismatch {
                expected: k,
                got: params.len(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::parse_arch;
    use crate::nn::init_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_pipeline() {
        // 1x1 identity convolutions and 1x1 pooling pass the image through
        let arch = parse_arch("2x3x3-2C1P0-MP1S1-H2").unwrap();
        let mut params = init_params(&arch, &[0.1], 0).unwrap();
        params[0].weights.data_mut().copy_from_slice(&[1., 0., 0., 1.]);
        let mut net = Network::new(&arch);
        let x: Vec<f64> = (0..18).map(|i| i as f64 * 0.5).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let y = net.forward_to(&params, &x, 1, Mode::Eval, &mut rng).unwrap();
        assert_eq!(y, x.as_slice());
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let arch = parse_arch("1x8x8-4C3P1-MP2S2-H6-D0.5-H3").unwrap();
        let params = init_params(&arch, &[0.3], 5).unwrap();
        let mut net = Network::new(&arch);
        let x: Vec<f64> = (0..64).map(|i| (i as f64).sin()).collect();
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(99);
        let a = net.forward(&params, &x, Mode::Eval, &mut r1).unwrap().to_vec();
        let b = net.forward(&params, &x, Mode::Eval, &mut r2).unwrap().to_vec();
        assert_eq!(a, b);
        assert!(net.check_params(&params).is_ok());
        assert!(net.check_params(&params[..2]).is_err());
        assert!(matches!(
            net.forward_to(&params, &x, 9, Mode::Eval, &mut r1),
            Err(NnError::LayerIndex { index: 9, layers: 5 })
        ));
    }
}
