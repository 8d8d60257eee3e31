use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::network::Network;
use super::ops::softmax_nll_into;
use super::{init_params, sgd_step, LayerParams, Mode, NnError, TrainSchedule};
use crate::arch::ArchSpec;
use crate::data::LabeledImageSet;
use crate::tensor::Tensor;

/// What a training run did, stored alongside the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainMeta {
    pub schedule: TrainSchedule,
    /// Mean training loss of every epoch.
    pub epoch_losses: Vec<f64>,
    /// Eval-mode classification error on the training set after the last epoch.
    pub final_train_error: f64,
    pub validation_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub arch: ArchSpec,
    pub params: Vec<LayerParams>,
    /// Per-pixel mean of the training images after scaling to [0, 1].
    pub pixel_mean: Tensor,
    pub meta: TrainMeta,
}

/// Scales raw pixel values to [0, 1] and subtracts the training mean.
fn preprocess_into(raw: impl Iterator<Item = f64>, mean: &[f64], out: &mut [f64]) {
    for ((o, r), m) in out.iter_mut().zip(raw).zip(mean) {
        *o = r / 255.0 - m;
    }
}

fn pixel_mean(data: &LabeledImageSet) -> Vec<f64> {
    let n = data.image_len();
    let mut sum = vec![0.0; n];
    for i in 0..data.len() {
        for (s, &b) in sum.iter_mut().zip(data.image_bytes(i)) {
            *s += f64::from(b);
        }
    }
    let scale = 255.0 * data.len() as f64;
    sum.iter().map(|s| s / scale).collect()
}

impl TrainedModel {
    /// Raw pixels (0..255) to network input.
    pub fn preprocess(&self, raw: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; raw.len()];
        preprocess_into(raw.iter().copied(), self.pixel_mean.data(), &mut out);
        out
    }

    pub fn knob_index(&self) -> usize {
        self.arch.knob_index().expect("trained architectures end in a fully connected layer")
    }

    pub fn extractor(&self) -> Extractor<'_> {
        Extractor {
            model: self,
            net: Network::new(&self.arch),
            input: vec![0.0; self.pixel_mean.len()],
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Eval-mode classification error over a labeled set.
    pub fn error_rate(&self, data: &LabeledImageSet) -> Result<f64, NnError> {
        if data.is_empty() {
            return Err(NnError::EmptyDataset);
        }
        let mut ex = self.extractor();
        let last = self.arch.layers.len() - 1;
        let mut wrong = 0usize;
        for i in 0..data.len() {
            let out = ex.extract_bytes(data.image_bytes(i), last)?;
            if argmax(out) != data.label(i) {
                wrong += 1;
            }
        }
        Ok(wrong as f64 / data.len() as f64)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Reusable eval-mode forward pass over one model.
pub struct Extractor<'a> {
    model: &'a TrainedModel,
    net: Network,
    input: Vec<f64>,
    rng: ChaCha8Rng,
}

impl Extractor<'_> {
    pub fn extract_bytes(&mut self, pixels: &[u8], layer: usize) -> Result<&[f64], NnError> {
        if pixels.len() != self.input.len() {
            return Err(NnError::DimensionMismatch {
                expected: self.input.len(),
                got: pixels.len(),
            });
        }
        preprocess_into(
            pixels.iter().map(|&b| f64::from(b)),
            self.model.pixel_mean.data(),
            &mut self.input,
        );
        self.net
            .forward_to(&self.model.params, &self.input, layer, Mode::Eval, &mut self.rng)
    }

    pub fn extract(&mut self, raw: &[f64], layer: usize) -> Result<&[f64], NnError> {
        if raw.len() != self.input.len() {
            return Err(NnError::DimensionMismatch {
                expected: self.input.len(),
                got: raw.len(),
            });
        }
        preprocess_into(raw.iter().copied(), self.model.pixel_mean.data(), &mut self.input);
        self.net
            .forward_to(&self.model.params, &self.input, layer, Mode::Eval, &mut self.rng)
    }
}

/// Eval-mode output of `layer` for a raw (0..255) `[C, H, W]` image. The
/// knob's output is its linear response, bias included.
pub fn extract_activations(model: &TrainedModel, image: &Tensor, layer: usize) -> Result<Tensor, NnError> {
    let (c, h, w) = model.arch.input;
    if image.shape() != [c, h, w] {
        return Err(NnError::Shape(format!(
            "image shape {:?} does not match model input ({c}, {h}, {w})",
            image.shape()
        )));
    }
    let mut ex = model.extractor();
    let out = ex.extract(image.data(), layer)?;
    Ok(Tensor::from_vec(out.to_vec()))
}

/// Mini-batch SGD over `data` following `schedule`. Sequential and
/// bit-reproducible for a fixed seed.
pub fn train(arch: &ArchSpec, data: &LabeledImageSet, schedule: &TrainSchedule) -> Result<TrainedModel, NnError> {
    schedule.validate()?;
    if data.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    let (c, h, w) = arch.input;
    if (data.channels, data.height, data.width) != (c, h, w) {
        return Err(NnError::Shape(format!(
            "dataset images are {}x{}x{}, architecture expects {c}x{h}x{w}",
            data.channels, data.height, data.width
        )));
    }
    let classes = arch.num_classes();
    if let Some(&l) = data.labels.iter().find(|&&l| l as usize >= classes) {
        return Err(NnError::LabelOutOfRange {
            label: l as usize,
            classes,
        });
    }

    let mean = pixel_mean(data);
    let dim = data.image_len();
    let mut inputs = vec![0.0; data.len() * dim];
    for (i, chunk) in inputs.chunks_exact_mut(dim).enumerate() {
        preprocess_into(data.image_bytes(i).iter().map(|&b| f64::from(b)), &mean, chunk);
    }

    let mut params = init_params(arch, &schedule.init_sigmas, schedule.seed)?;
    let mut velocity: Vec<LayerParams> = params.iter().map(LayerParams::zeros_like).collect();
    let mut grads: Vec<LayerParams> = params.iter().map(LayerParams::zeros_like).collect();
    let mut net = Network::new(arch);
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    rng.set_stream(1);
    let mut grad_logits = vec![0.0; classes];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(schedule.total_epochs);

    for epoch in 0..schedule.total_epochs {
        let lr = schedule.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(schedule.batch_size).enumerate() {
            for g in grads.iter_mut() {
                g.weights.data_mut().fill(0.0);
                g.biases.data_mut().fill(0.0);
            }
            let mut batch_loss = 0.0;
            for &i in batch {
                let x = &inputs[i * dim..(i + 1) * dim];
                let logits = net.forward(&params, x, Mode::Train, &mut rng)?;
                batch_loss += softmax_nll_into(logits, data.label(i), &mut grad_logits);
                net.backward(&params, &grad_logits, &mut grads);
            }
            if !batch_loss.is_finite() {
                return Err(NnError::Diverged { epoch, batch: b, lr });
            }
            let scale = 1.0 / batch.len() as f64;
            for g in grads.iter_mut() {
                g.weights.data_mut().iter_mut().for_each(|v| *v *= scale);
                g.biases.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            sgd_step(&mut params, &grads, &mut velocity, lr, schedule.momentum, schedule.weight_decay)?;
            let finite = params
                .iter()
                .all(|p| p.weights.data().iter().chain(p.biases.data()).all(|v| v.is_finite()));
            if !finite {
                return Err(NnError::Diverged { epoch, batch: b, lr });
            }
            epoch_loss += batch_loss;
        }
        let mean_loss = epoch_loss / data.len() as f64;
        log::info!("epoch {:>4}/{} lr {:.0e} loss {:.5}", epoch + 1, schedule.total_epochs, lr, mean_loss);
        epoch_losses.push(mean_loss);
    }

    let mut model = TrainedModel {
        arch: arch.clone(),
        params,
        pixel_mean: Tensor::from_parts(vec![c, h, w], mean),
        meta: TrainMeta {
            schedule: schedule.clone(),
            epoch_losses,
            final_train_error: 0.0,
            validation_error: None,
        },
    };
    model.meta.final_train_error = model.error_rate(data)?;
    Ok(model)
}

/// k-fold cross-validation over `data`: returns the held-out error of each
/// fold. Folds are contiguous slices of a seeded permutation.
pub fn cross_validate(
    arch: &ArchSpec,
    data: &LabeledImageSet,
    schedule: &TrainSchedule,
    folds: usize,
) -> Result<Vec<f64>, NnError> {
    if folds < 2 || data.len() < folds {
        return Err(NnError::EmptyDataset);
    }
    let mut perm: Vec<u32> = (0..data.len() as u32).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(schedule.seed));
    let fold_len = data.len().div_ceil(folds);
    perm.chunks(fold_len)
        .map(|held| {
            let rest: Vec<u32> = perm.iter().copied().filter(|p| !held.contains(p)).collect();
            let model = train(arch, &data.subset(&rest), schedule)?;
            model.error_rate(&data.subset(held))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::parse_arch;

    /// 20 memorizable 6x6 images in two classes.
    fn toy_set() -> LabeledImageSet {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            let label = (i % 2) as u8;
            for p in 0..36 {
                let base: u8 = if (p % 6 < 3) == (label == 0) { 180 } else { 60 };
                pixels.push(base.saturating_add(rand::Rng::random_range(&mut rng, 0..60)));
            }
            labels.push(label);
        }
        LabeledImageSet {
            channels: 1,
            height: 6,
            width: 6,
            pixels,
            labels,
            ids: (0..20).collect(),
        }
    }

    fn toy_schedule(epochs: usize) -> TrainSchedule {
        TrainSchedule {
            initial_lr: 0.05,
            decay_factor: 0.1,
            boundaries: vec![],
            total_epochs: epochs,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 4,
            seed: 5,
            init_sigmas: vec![0.1],
        }
    }

    #[test]
    fn overfits_memorizable_set() {
        let arch = parse_arch("1x6x6-4C3P0-MP2S2-H8-H2").unwrap();
        let model = train(&arch, &toy_set(), &toy_schedule(50)).unwrap();
        assert_eq!(model.meta.final_train_error, 0.0);
        assert!(*model.meta.epoch_losses.last().unwrap() < 0.01, "{:?}", model.meta.epoch_losses.last());
    }

    #[test]
    fn training_is_reproducible() {
        let arch = parse_arch("1x6x6-3C3P1-MP2S2-H4-D0.5-H2").unwrap();
        let a = train(&arch, &toy_set(), &toy_schedule(3)).unwrap();
        let b = train(&arch, &toy_set(), &toy_schedule(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn activations_contract() {
        let arch = parse_arch("1x6x6-3C3P1-MP2S2-H5-D0.5-H2").unwrap();
        let data = toy_set();
        let model = train(&arch, &data, &toy_schedule(1)).unwrap();
        let img = data.image(3);
        let knob = extract_activations(&model, &img, model.knob_index()).unwrap();
        assert_eq!(knob.len(), 5);
        let logits = extract_activations(&model, &img, 4).unwrap();
        assert_eq!(logits.len(), 2);
        assert_eq!(knob, extract_activations(&model, &img, model.knob_index()).unwrap());
        assert!(matches!(
            extract_activations(&model, &img, 5),
            Err(NnError::LayerIndex { index: 5, .. })
        ));
        assert!(extract_activations(&model, &Tensor::zeros(vec![1, 5, 5]), 2).is_err());
    }

    #[test]
    fn training_errors() {
        let arch = parse_arch("1x6x6-H2").unwrap();
        let mut empty = toy_set();
        empty.pixels.clear();
        empty.labels.clear();
        empty.ids.clear();
        assert_eq!(train(&arch, &empty, &toy_schedule(1)), Err(NnError::EmptyDataset));

        let mut diverge = toy_schedule(5);
        diverge.initial_lr = 1e308;
        assert!(matches!(train(&arch, &toy_set(), &diverge), Err(NnError::Diverged { .. })));

        let wrong = parse_arch("1x5x5-H2").unwrap();
        assert!(matches!(train(&wrong, &toy_set(), &toy_schedule(1)), Err(NnError::Shape(_))));
        let one_class = parse_arch("1x6x6-H1").unwrap();
        assert!(matches!(
            train(&one_class, &toy_set(), &toy_schedule(1)),
            Err(NnError::LabelOutOfRange { .. })
        ));
    }
}
