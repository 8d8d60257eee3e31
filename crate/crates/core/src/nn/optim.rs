use super::{LayerParams, NnError};

/// Step learning-rate schedule plus the remaining SGD hyper-parameters.
///
/// The rate is `initial_lr` until the first boundary and is multiplied by
/// `decay_factor` at every boundary epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub initial_lr: f64,
    pub decay_factor: f64,
    pub boundaries: Vec<usize>,
    pub total_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// One weight sigma per parameterized layer, or a single shared one.
    pub init_sigmas: Vec<f64>,
}

impl TrainSchedule {
    /// 0.01 for 50 epochs, then a tenth every 20 epochs, 90 in total.
    pub fn mnist() -> Self {
        TrainSchedule {
            initial_lr: 0.01,
            decay_factor: 0.1,
            boundaries: vec![50, 70],
            total_epochs: 90,
            momentum: 0.9,
            weight_decay: 0.004,
            batch_size: 64,
            seed: 1,
            init_sigmas: vec![0.2, 0.2, 0.01, 0.1],
        }
    }

    /// 0.01 for 500 epochs, then a tenth every 200 epochs, 900 in total.
    pub fn cifar10() -> Self {
        TrainSchedule {
            boundaries: vec![500, 700],
            total_epochs: 900,
            init_sigmas: vec![0.04],
            ..Self::mnist()
        }
    }

    /// Shrinks (or stretches) the schedule to `epochs`, keeping the phase
    /// boundaries at the same fractions of the run.
    pub fn scaled_to(&self, epochs: usize) -> Self {
        let mut s = self.clone();
        if epochs == self.total_epochs || self.total_epochs == 0 {
            return s;
        }
        s.boundaries = self
            .boundaries
            .iter()
            .map(|&b| b * epochs / self.total_epochs)
            .filter(|&b| b > 0 && b < epochs)
            .collect();
        s.boundaries.dedup();
        s.total_epochs = epochs;
        s
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.boundaries.iter().filter(|&&b| epoch >= b).count();
        self.initial_lr * self.decay_factor.powi(passed as i32)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::Schedule(m.to_string()));
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative");
        }
        if !(self.decay_factor > 0.0) {
            return bad("decay factor must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if self.boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return bad("phase boundaries must be strictly increasing");
        }
        if self.init_sigmas.iter().any(|s| !(*s > 0.0)) || self.init_sigmas.is_empty() {
            return bad("init sigmas must be positive");
        }
        Ok(())
    }
}

/// One SGD step with momentum:
/// `v <- momentum * v - lr * (g + weight_decay * w)`, `w <- w + v`.
/// Biases get no weight decay.
pub fn sgd_step(
    params: &mut [LayerParams],
    grads: &[LayerParams],
    velocity: &mut [LayerParams],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<(), NnError> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(NnError::DimensionMismatch {
            expected: params.len(),
            got: grads.len().min(velocity.len()),
        });
    }
    for ((p, g), v) in params.iter().zip(grads).zip(velocity.iter()) {
        for (a, b) in [(&p.weights, &g.weights), (&p.weights, &v.weights), (&p.biases, &g.biases), (&p.biases, &v.biases)] {
            if a.shape() != b.shape() {
                return Err(NnError::Shape(format!(
                    "parameter shape {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        update(p.weights.data_mut(), g.weights.data(), v.weights.data_mut(), lr, momentum, weight_decay);
        update(p.biases.data_mut(), g.biases.data(), v.biases.data_mut(), lr, momentum, 0.0);
    }
    Ok(())
}

fn update(w: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, momentum: f64, wd: f64) {
    for ((w, &g), v) in w.iter_mut().zip(g).zip(v) {
        *v = momentum * *v - lr * (g + wd * *w);
        *w += *v;
    }
}
