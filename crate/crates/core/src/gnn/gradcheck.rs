//! Central finite-difference verification of [`backward`](super::backward).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::model::{backward, forward, loss};
use super::params::{ModelParameters, ModelShape, TENSOR_NAMES};
use crate::error::Result;
use crate::graph::{AdjacencyMatrix, FeatureLayout};
use crate::oracle::TrainingSample;
use crate::rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Denominator floor of the relative error, so entries whose true gradient is zero
/// are compared on absolute error.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: &'static str,
    pub entries: usize,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub cases: usize,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_relative_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_relative_error < TOLERANCE)
    }
}

/// Compares every gradient entry with `(L(θ+h) − L(θ−h)) / 2h`.
///
/// `perturb` is added to each analytic entry; a nonzero value exists only to show the
/// check can fail.
pub fn check_sample(
    params: &ModelParameters,
    sample: &TrainingSample,
    beta: f64,
    perturb: f64,
) -> Result<Vec<f64>> {
    let (_, cache) = forward(params, &sample.adjacency, &sample.features)?;
    let analytic = backward(params, sample, &cache, beta)?;
    let eval = |p: &ModelParameters| -> Result<f64> {
        let (pred, _) = forward(p, &sample.adjacency, &sample.features)?;
        loss(&pred, &sample.labels, &sample.mask, p, beta)
    };
    let mut worst = vec![0.0f64; TENSOR_NAMES.len()];
    let mut probe = params.clone();
    for k in 0..TENSOR_NAMES.len() {
        let dim = params.tensors()[k].dim();
        for r in 0..dim.0 {
            for c in 0..dim.1 {
                let orig = params.tensors()[k][[r, c]];
                probe.tensors_mut()[k][[r, c]] = orig + STEP;
                let up = eval(&probe)?;
                probe.tensors_mut()[k][[r, c]] = orig - STEP;
                let down = eval(&probe)?;
                probe.tensors_mut()[k][[r, c]] = orig;
                let numeric = (up - down) / (2.0 * STEP);
                let err = relative_error(analytic.tensors()[k][[r, c]] + perturb, numeric);
                worst[k] = worst[k].max(err);
            }
        }
    }
    Ok(worst)
}

/// Random connected graph with `2..=max_n` nodes and a random destination, with
/// jittered labels so the data term is nonzero.
pub fn random_case(rng: &mut impl Rng, max_n: usize, layout: FeatureLayout) -> Result<TrainingSample> {
    let n = rng.random_range(2..=max_n.max(2));
    let mut edges = Vec::new();
    for v in 1..n {
        edges.push((rng.random_range(0..v), v));
    }
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < 0.3 {
                edges.push((i, j));
            }
        }
    }
    let a = AdjacencyMatrix::from_edges(n, edges)?;
    let d = rng.random_range(0..n);
    let positions: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            let v = [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5];
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-3);
            [v[0] / norm, v[1] / norm, v[2] / norm]
        })
        .collect();
    let mut sample = TrainingSample::from_topology(&a, d, layout, Some(&positions), 0)?;
    for y in &mut sample.labels {
        *y += rng.random_range(-0.5..0.5);
    }
    Ok(sample)
}

/// Runs the check over `cases` random samples with `N <= max_n`.
///
/// Parameters are Glorot-initialized with random nonzero biases so no unit sits
/// exactly at the relu kink.
pub fn run(seed: u64, cases: usize, max_n: usize, beta: f64, perturb: f64) -> Result<GradCheckReport> {
    let mut rng = rng::substream(seed, "gradcheck");
    let layout = FeatureLayout::Geometric;
    let shape = ModelShape {
        f_low: layout.low_width(),
        f_high: layout.high_width(),
        hidden: 8,
    };
    let mut worst = vec![0.0f64; TENSOR_NAMES.len()];
    for _ in 0..cases {
        let sample = random_case(&mut rng, max_n, layout)?;
        let mut params = ModelParameters::glorot(shape, &mut ChaCha8Rng::seed_from_u64(rng.random()));
        params.dense_b1.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        params.dense_b2.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        let errs = check_sample(&params, &sample, beta, perturb)?;
        for (w, e) in worst.iter_mut().zip(errs) {
            *w = w.max(e);
        }
    }
    let entries = ModelParameters::zeros(shape).tensors().map(|t| t.len());
    Ok(GradCheckReport {
        cases,
        tensors: TENSOR_NAMES
            .iter()
            .zip(worst)
            .zip(entries)
            .map(|((&name, max_relative_error), entries)| TensorCheck {
                name,
                entries,
                max_relative_error,
            })
            .collect(),
    })
}
