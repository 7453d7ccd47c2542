use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{add_weight_decay, backward_data, data_loss, forward, predict};
use super::params::{Gradients, ModelParameters, ModelShape, DEFAULT_HIDDEN};
use crate::error::{Error, Result};
use crate::oracle::{Dataset, TrainingSample};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    #[default]
    Adam,
    /// Plain gradient descent, kept for ablations.
    Sgd,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Optimizer::Adam),
            "sgd" => Ok(Optimizer::Sgd),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparameters {
    pub learning_rate: f64,
    /// L2 coefficient on the weights.
    pub beta: f64,
    pub epochs: usize,
    /// Graphs per optimizer step.
    pub batch: usize,
    pub early_stop_patience: usize,
    pub hidden: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta: 1e-4,
            epochs: 200,
            batch: 1,
            early_stop_patience: 20,
            hidden: DEFAULT_HIDDEN,
            optimizer: Optimizer::Adam,
            seed: 0,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0 (got {})",
                self.learning_rate
            )));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be >= 0 (got {})", self.beta)));
        }
        if self.batch == 0 || self.hidden == 0 || self.epochs == 0 {
            return Err(Error::Config("epochs, batch and hidden must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean masked MSE over the epoch's training samples.
    pub train_loss: f64,
    /// Mean masked MSE over the validation split after the epoch.
    pub validation_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub wall_clock_s: f64,
}

impl TrainReport {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }

    /// Everything except wall-clock time, for determinism checks.
    pub fn same_trajectory(&self, other: &TrainReport) -> bool {
        self.epochs == other.epochs && self.best_epoch == other.best_epoch
    }
}

struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    step: i32,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(params: &ModelParameters) -> Self {
        let zeros = || params.tensors().iter().map(|t| Array2::zeros(t.dim())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    fn apply(&mut self, params: &mut ModelParameters, grads: &Gradients, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step);
        for (k, (p, g)) in params.tensors_mut().into_iter().zip(grads.tensors()).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            });
        }
    }
}

fn sgd(params: &mut ModelParameters, grads: &Gradients, lr: f64) {
    for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
        p.scaled_add(-lr, g);
    }
}

fn check_sample(shape: ModelShape, s: &TrainingSample) -> Result<()> {
    if s.features.low_order.ncols() != shape.f_low || s.features.high_order.ncols() != shape.f_high {
        return Err(Error::dim(
            "training sample feature widths",
            format!("{}/{}", shape.f_low, shape.f_high),
            format!("{}/{}", s.features.low_order.ncols(), s.features.high_order.ncols()),
        ));
    }
    if s.mask.iter().sum::<f64>() == 0.0 {
        return Err(Error::DegenerateSample);
    }
    Ok(())
}

/// Mean masked MSE over `samples`.
pub fn evaluate<'a>(
    params: &ModelParameters,
    samples: impl IntoIterator<Item = &'a TrainingSample>,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in samples {
        let pred = predict(params, &s.adjacency, &s.features)?;
        total += data_loss(&pred, &s.labels, &s.mask)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Argument("no samples to evaluate".into()));
    }
    Ok(total / count as f64)
}

pub fn train(dataset: &Dataset, hyper: &Hyperparameters) -> Result<(ModelParameters, TrainReport)> {
    train_with_progress(dataset, hyper, |_| {})
}

/// Trains from a Glorot initialization; `progress` sees every finished epoch.
///
/// The returned parameters are those of the epoch with the lowest validation loss
/// (training loss when the validation split is empty). Training stops once
/// `early_stop_patience` epochs pass without improvement.
pub fn train_with_progress(
    dataset: &Dataset,
    hyper: &Hyperparameters,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<(ModelParameters, TrainReport)> {
    hyper.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::Argument("training split is empty".into()));
    }
    let layout = dataset.layout();
    let shape = ModelShape {
        f_low: layout.low_width(),
        f_high: layout.high_width(),
        hidden: hyper.hidden,
    };
    for s in dataset.train_samples().chain(dataset.validation_samples()) {
        check_sample(shape, s)?;
    }

    let started = Instant::now();
    let mut params = ModelParameters::glorot(shape, &mut rng::substream(hyper.seed, rng::INIT));
    let mut shuffle = rng::substream(hyper.seed, rng::SHUFFLE);
    let mut adam = Adam::new(&params);
    let mut order = dataset.train.clone();

    let mut records = Vec::new();
    let mut best: Option<(f64, usize, ModelParameters)> = None;
    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut shuffle);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(hyper.batch) {
            // Squared errors are summed over the batch and divided by the batch's
            // total count of contributing nodes.
            let n_total: f64 = batch
                .iter()
                .map(|&i| dataset.samples[i].mask.iter().sum::<f64>())
                .sum();
            let mut grads = ModelParameters::zeros(shape);
            for &i in batch {
                let s = &dataset.samples[i];
                let (pred, cache) = forward(&params, &s.adjacency, &s.features)?;
                let l = data_loss(&pred, &s.labels, &s.mask)?;
                if !l.is_finite() {
                    return Err(Error::Divergence { epoch, loss: l });
                }
                epoch_loss += l;
                let g = backward_data(&params, s, &cache, 1.0 / n_total)?;
                for (acc, g) in grads.tensors_mut().into_iter().zip(g.tensors()) {
                    *acc += g;
                }
            }
            add_weight_decay(&mut grads, &params, hyper.beta);
            match hyper.optimizer {
                Optimizer::Adam => adam.apply(&mut params, &grads, hyper.learning_rate),
                Optimizer::Sgd => sgd(&mut params, &grads, hyper.learning_rate),
            }
        }
        let train_loss = epoch_loss / order.len() as f64;
        let validation_loss = if dataset.validation.is_empty() {
            evaluate(&params, dataset.train_samples())?
        } else {
            evaluate(&params, dataset.validation_samples())?
        };
        if !train_loss.is_finite() || !validation_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                loss: if train_loss.is_finite() { validation_loss } else { train_loss },
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            validation_loss,
        };
        progress(&record);
        records.push(record);

        let improved = best.as_ref().is_none_or(|(l, _, _)| validation_loss < *l);
        if improved {
            best = Some((validation_loss, epoch, params.clone()));
        } else if epoch - best.as_ref().unwrap().1 >= hyper.early_stop_patience {
            break;
        }
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch runs");
    Ok((
        best_params,
        TrainReport {
            epochs: records,
            best_epoch,
            wall_clock_s: started.elapsed().as_secs_f64(),
        },
    ))
}
