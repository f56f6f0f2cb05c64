use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Architecture, PriorModel};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// Proximal-matching training schedule. `gamma` starts at `gamma0`, is held
/// for `epochs_per_gamma` epochs, then multiplied by `gamma_decay`, never
/// dropping below `gamma_min`. Distances are Euclidean norms over the whole
/// image, so `gamma` is in the same units as `|f(z) - x|`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxMatchConfig {
    pub gamma0: f64,
    pub gamma_min: f64,
    pub gamma_decay: f64,
    pub epochs_per_gamma: usize,
    pub epochs: usize,
    pub sigma_train: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for ProxMatchConfig {
    fn default() -> Self {
        ProxMatchConfig {
            gamma0: 12.0,
            gamma_min: 5.0,
            gamma_decay: 0.8,
            epochs_per_gamma: 4,
            epochs: 40,
            sigma_train: 0.15,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            seed: 0,
        }
    }
}

impl ProxMatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_min > 0.0 && self.gamma0 >= self.gamma_min) {
            return Err(Error::Config(format!(
                "need gamma0 >= gamma_min > 0, got {} and {}",
                self.gamma0, self.gamma_min
            )));
        }
        if !(self.gamma_decay > 0.0 && self.gamma_decay <= 1.0) {
            return Err(Error::Config("gamma_decay must lie in (0, 1]".into()));
        }
        if !(self.sigma_train > 0.0) {
            return Err(Error::Config("sigma_train must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.epochs_per_gamma == 0 {
            return Err(Error::Config("epochs, epochs_per_gamma and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn gamma_at(&self, epoch: usize) -> f64 {
        let stage = (epoch / self.epochs_per_gamma) as i32;
        (self.gamma0 * self.gamma_decay.powi(stage)).max(self.gamma_min)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub gamma: f64,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    /// Epoch logs grouped by consecutive equal `gamma`.
    pub fn stages(&self) -> Vec<&[EpochLog]> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.epochs.len() {
            if i == self.epochs.len() || self.epochs[i].gamma != self.epochs[start].gamma {
                out.push(&self.epochs[start..i]);
                start = i;
            }
        }
        out
    }
}

struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    fn new(kind: OptimizerKind, lr: f64, n: usize) -> Self {
        Optimizer { kind, lr, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                for ((p, g), m) in params.iter_mut().zip(grad).zip(&mut self.m) {
                    *m = momentum * *m - self.lr * g;
                    *p += *m;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// Trains a fresh model on clean images by proximal matching against
/// Gaussian-corrupted copies. Fully deterministic in `cfg.seed`.
pub fn train(dataset: &[Image], arch: Architecture, cfg: &ProxMatchConfig) -> Result<(PriorModel, TrainLog)> {
    train_with_progress(dataset, arch, cfg, |_| {})
}

pub fn train_with_progress(
    dataset: &[Image],
    arch: Architecture,
    cfg: &ProxMatchConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(PriorModel, TrainLog)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    for (i, img) in dataset.iter().enumerate() {
        if img.len() != arch.input_dim {
            return Err(Error::Shape { expected: arch.input_dim, actual: img.len() });
        }
        if img.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Dataset(format!("training image {i} has pixels outside [0, 1]")));
        }
    }

    let mut model = PriorModel::random(arch, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, model.n_params());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        let gamma = cfg.gamma_at(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let noisy: Vec<Vec<f64>> = chunk
                .iter()
                .map(|&i| {
                    dataset[i]
                        .as_slice()
                        .iter()
                        .map(|&x| {
                            let e: f64 = StandardNormal.sample(&mut rng);
                            x + cfg.sigma_train * e
                        })
                        .collect()
                })
                .collect();
            let pairs: Vec<(&[f64], &[f64])> =
                chunk.iter().zip(&noisy).map(|(&i, z)| (dataset[i].as_slice(), z.as_slice())).collect();
            let out = model.prox_match_loss_slices(&pairs, gamma).map_err(|e| match e {
                Error::Divergence { detail, .. } => Error::Divergence { epoch, batch: b, detail },
                other => other,
            })?;
            if !out.loss.is_finite() || out.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    detail: format!("loss {} after {} completed epochs", out.loss, log.epochs.len()),
                });
            }
            total += out.loss * chunk.len() as f64;
            opt.step(model.params_mut(), &out.grad);
            model.project();
        }
        let entry = EpochLog { epoch, gamma, mean_loss: total / dataset.len() as f64 };
        on_epoch(&entry);
        log.epochs.push(entry);
    }
    Ok((model, log))
}
