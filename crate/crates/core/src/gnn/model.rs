//! Forward pass, loss and reverse-mode gradients of the dual-extractor regressor.
//!
//! ```text
//! low  = relu(Â relu(Â X_low  W1_low)  W2_low)
//! high = relu(Â relu(Â X_high W1_high) W2_high)
//! y    = relu([low | high] Wd1 + b1) Wd2 + b2
//! ```

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

use super::params::{Fnv, Gradients, ModelParameters, WEIGHT_TENSORS};
use crate::error::{Error, Result};
use crate::graph::{NodeFeatures, NormalizedAdjacency};
use crate::oracle::TrainingSample;

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// `σ(Â · H · W)`; σ is relu when `activate`, identity otherwise.
pub fn gcn_layer(
    ahat: &NormalizedAdjacency,
    h_in: ArrayView2<'_, f64>,
    w: ArrayView2<'_, f64>,
    activate: bool,
) -> Result<Array2<f64>> {
    if h_in.ncols() != w.nrows() {
        return Err(Error::dim("gcn layer weight rows", h_in.ncols(), w.nrows()));
    }
    let mut out = ahat.matmul(h_in)?.dot(&w);
    if activate {
        out.mapv_inplace(relu);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct ExtractorCache {
    /// Â X
    p1: Array2<f64>,
    z1: Array2<f64>,
    /// Â relu(z1)
    p2: Array2<f64>,
    z2: Array2<f64>,
}

/// Intermediates of one forward pass, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    params_fingerprint: u64,
    input_fingerprint: u64,
    low: ExtractorCache,
    high: ExtractorCache,
    crossed: Array2<f64>,
    z3: Array2<f64>,
    a3: Array2<f64>,
    predictions: Vec<f64>,
}

impl ForwardCache {
    pub fn predictions(&self) -> &[f64] {
        &self.predictions
    }
}

fn input_fingerprint(ahat: &NormalizedAdjacency, features: &NodeFeatures) -> u64 {
    let mut h = Fnv::default();
    h.write_usize(ahat.n());
    for (i, j, v) in ahat.triplets() {
        h.write_usize(i);
        h.write_usize(j);
        h.write_f64(v);
    }
    for v in features.low_order.iter().chain(features.high_order.iter()) {
        h.write_f64(*v);
    }
    h.finish()
}

fn extract(
    ahat: &NormalizedAdjacency,
    x: ArrayView2<'_, f64>,
    w1: &Array2<f64>,
    w2: &Array2<f64>,
) -> Result<(ExtractorCache, Array2<f64>)> {
    let p1 = ahat.matmul(x)?;
    let z1 = p1.dot(w1);
    let a1 = z1.mapv(relu);
    let p2 = ahat.matmul(a1.view())?;
    let z2 = p2.dot(w2);
    let a2 = z2.mapv(relu);
    Ok((ExtractorCache { p1, z1, p2, z2 }, a2))
}

fn check_dims(params: &ModelParameters, ahat: &NormalizedAdjacency, f: &NodeFeatures) -> Result<()> {
    let shape = params.shape();
    let n = ahat.n();
    if f.low_order.nrows() != n || f.high_order.nrows() != n {
        return Err(Error::dim("feature rows", n, f.low_order.nrows().max(f.high_order.nrows())));
    }
    if f.low_order.ncols() != shape.f_low {
        return Err(Error::dim("low-order feature width", shape.f_low, f.low_order.ncols()));
    }
    if f.high_order.ncols() != shape.f_high {
        return Err(Error::dim("high-order feature width", shape.f_high, f.high_order.ncols()));
    }
    Ok(())
}

/// Per-node predicted communication distance and the cache for [`backward`].
pub fn forward(
    params: &ModelParameters,
    ahat: &NormalizedAdjacency,
    features: &NodeFeatures,
) -> Result<(Vec<f64>, ForwardCache)> {
    check_dims(params, ahat, features)?;
    let (low, low_out) = extract(ahat, features.low_order.view(), &params.low_w1, &params.low_w2)?;
    let (high, high_out) =
        extract(ahat, features.high_order.view(), &params.high_w1, &params.high_w2)?;
    // Feature cross by splicing: per-node concatenation.
    let crossed = concatenate![Axis(1), low_out, high_out];
    let z3 = crossed.dot(&params.dense_w1) + &params.dense_b1;
    let a3 = z3.mapv(relu);
    let out = a3.dot(&params.dense_w2) + &params.dense_b2;
    let predictions = out.column(0).to_vec();
    let cache = ForwardCache {
        params_fingerprint: params.fingerprint(),
        input_fingerprint: input_fingerprint(ahat, features),
        low,
        high,
        crossed,
        z3,
        a3,
        predictions: predictions.clone(),
    };
    Ok((predictions, cache))
}

/// Inference-only forward pass; keeps no intermediates.
pub fn predict(
    params: &ModelParameters,
    ahat: &NormalizedAdjacency,
    features: &NodeFeatures,
) -> Result<Vec<f64>> {
    check_dims(params, ahat, features)?;
    let branch = |x: ArrayView2<'_, f64>, w1: &Array2<f64>, w2: &Array2<f64>| {
        let h = gcn_layer(ahat, x, w1.view(), true)?;
        gcn_layer(ahat, h.view(), w2.view(), true)
    };
    let low = branch(features.low_order.view(), &params.low_w1, &params.low_w2)?;
    let high = branch(features.high_order.view(), &params.high_w1, &params.high_w2)?;
    let h = params.hidden_width();
    // [low | high] Wd1 without materializing the concatenation.
    let mut z3 = low.dot(&params.dense_w1.slice(s![..h, ..]));
    z3 += &high.dot(&params.dense_w1.slice(s![h.., ..]));
    z3 += &params.dense_b1;
    z3.mapv_inplace(relu);
    let out = z3.dot(&params.dense_w2);
    let b2 = params.dense_b2[[0, 0]];
    Ok(out.column(0).iter().map(|v| v + b2).collect())
}

/// Masked mean squared error over the nodes with `mask == 1`.
pub fn data_loss(predictions: &[f64], labels: &[f64], mask: &[f64]) -> Result<f64> {
    if predictions.len() != labels.len() || labels.len() != mask.len() {
        return Err(Error::dim("loss inputs", labels.len(), predictions.len()));
    }
    let n_eff: f64 = mask.iter().sum();
    if n_eff == 0.0 {
        return Err(Error::DegenerateSample);
    }
    let sse: f64 = predictions
        .iter()
        .zip(labels)
        .zip(mask)
        .map(|((p, y), m)| m * (y - p) * (y - p))
        .sum();
    Ok(sse / n_eff)
}

/// Masked MSE plus `beta` times the sum of squared weights (biases excluded).
pub fn loss(
    predictions: &[f64],
    labels: &[f64],
    mask: &[f64],
    params: &ModelParameters,
    beta: f64,
) -> Result<f64> {
    Ok(data_loss(predictions, labels, mask)? + beta * params.squared_weight_norm())
}

/// Exact gradient of [`loss`] for the forward pass recorded in `cache`.
pub fn backward(
    params: &ModelParameters,
    sample: &TrainingSample,
    cache: &ForwardCache,
    beta: f64,
) -> Result<Gradients> {
    let n_eff: f64 = sample.mask.iter().sum();
    if n_eff == 0.0 {
        return Err(Error::DegenerateSample);
    }
    let mut grads = backward_data(params, sample, cache, 1.0 / n_eff)?;
    add_weight_decay(&mut grads, params, beta);
    Ok(grads)
}

pub(crate) fn add_weight_decay(grads: &mut Gradients, params: &ModelParameters, beta: f64) {
    if beta == 0.0 {
        return;
    }
    for (g, p) in grads
        .tensors_mut()
        .into_iter()
        .zip(params.tensors())
        .take(WEIGHT_TENSORS)
    {
        g.scaled_add(2.0 * beta, p);
    }
}

fn relu_mask(z: &Array2<f64>) -> Array2<f64> {
    z.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

/// Gradient of `data_scale * Σ mask_i (y_i - label_i)^2`.
pub(crate) fn backward_data(
    params: &ModelParameters,
    sample: &TrainingSample,
    cache: &ForwardCache,
    data_scale: f64,
) -> Result<Gradients> {
    if cache.params_fingerprint != params.fingerprint()
        || cache.input_fingerprint != input_fingerprint(&sample.adjacency, &sample.features)
        || cache.predictions.len() != sample.n()
    {
        return Err(Error::StaleCache);
    }
    let ahat = &sample.adjacency;
    let h = params.shape().hidden;
    let n = sample.n();

    let dy = Array2::from_shape_fn((n, 1), |(i, _)| {
        2.0 * data_scale * sample.mask[i] * (cache.predictions[i] - sample.labels[i])
    });
    let mut g = ModelParameters::zeros(params.shape());

    g.dense_w2 = cache.a3.t().dot(&dy);
    g.dense_b2 = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dz3 = dy.dot(&params.dense_w2.t()) * relu_mask(&cache.z3);
    g.dense_w1 = cache.crossed.t().dot(&dz3);
    g.dense_b1 = dz3.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dcrossed = dz3.dot(&params.dense_w1.t());

    let (gw1, gw2) = extractor_backward(
        ahat,
        &cache.low,
        dcrossed.slice(s![.., ..h]),
        &params.low_w2,
    )?;
    g.low_w1 = gw1;
    g.low_w2 = gw2;
    let (gw1, gw2) = extractor_backward(
        ahat,
        &cache.high,
        dcrossed.slice(s![.., h..]),
        &params.high_w2,
    )?;
    g.high_w1 = gw1;
    g.high_w2 = gw2;
    Ok(g)
}

fn extractor_backward(
    ahat: &NormalizedAdjacency,
    cache: &ExtractorCache,
    d_out: ArrayView2<'_, f64>,
    w2: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let dz2 = &d_out * &relu_mask(&cache.z2);
    let gw2 = cache.p2.t().dot(&dz2);
    // Â is symmetric, so Âᵀ = Â.
    let da1 = ahat.matmul(dz2.dot(&w2.t()).view())?;
    let dz1 = da1 * relu_mask(&cache.z1);
    let gw1 = cache.p1.t().dot(&dz1);
    Ok((gw1, gw2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::params::ModelShape;
    use crate::graph::{normalize, AdjacencyMatrix, FeatureLayout};
    use crate::rng;
    use ndarray::array;

    fn ring_sample() -> TrainingSample {
        let a = AdjacencyMatrix::from_edges(4, (0..4).map(|i| (i, (i + 1) % 4))).unwrap();
        TrainingSample::from_topology(&a, 0, FeatureLayout::Topological, None, 0).unwrap()
    }

    fn shape() -> ModelShape {
        ModelShape {
            f_low: 2,
            f_high: 4,
            hidden: 6,
        }
    }

    #[test]
    fn single_node_layer_is_relu() {
        let a = normalize(&AdjacencyMatrix::from_edges(1, []).unwrap());
        for x in [-2.0, 0.0, 3.5] {
            let out = gcn_layer(&a, array![[x]].view(), array![[1.0]].view(), true).unwrap();
            assert_eq!(out, array![[f64::max(0.0, x)]]);
        }
        let out = gcn_layer(&a, array![[-2.0]].view(), array![[1.0]].view(), false).unwrap();
        assert_eq!(out, array![[-2.0]]);
    }

    #[test]
    fn zero_weight_layer_is_zero() {
        let s = ring_sample();
        let out = gcn_layer(&s.adjacency, s.features.low_order.view(), Array2::zeros((2, 3)).view(), true)
            .unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
        let err = gcn_layer(&s.adjacency, s.features.low_order.view(), Array2::zeros((3, 3)).view(), true);
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }

    #[test]
    fn zero_parameters_predict_zero() {
        let s = ring_sample();
        let p = ModelParameters::zeros(shape());
        let (pred, _) = forward(&p, &s.adjacency, &s.features).unwrap();
        assert_eq!(pred, vec![0.0; 4]);
    }

    #[test]
    fn single_node_prediction_is_head_of_extractor_outputs() {
        let a = AdjacencyMatrix::from_edges(1, []).unwrap();
        let s = TrainingSample::from_topology(&a, 0, FeatureLayout::Topological, None, 0).unwrap();
        let mut p = ModelParameters::glorot(shape(), &mut rng::substream(5, rng::INIT));
        p.dense_b1.fill(0.1);
        p.dense_b2.fill(0.3);
        let (pred, _) = forward(&p, &s.adjacency, &s.features).unwrap();
        let x_low = s.features.low_order.clone();
        let x_high = s.features.high_order.clone();
        let low = x_low.dot(&p.low_w1).mapv(relu).dot(&p.low_w2).mapv(relu);
        let high = x_high.dot(&p.high_w1).mapv(relu).dot(&p.high_w2).mapv(relu);
        let c = concatenate![Axis(1), low, high];
        let y = (c.dot(&p.dense_w1) + &p.dense_b1).mapv(relu).dot(&p.dense_w2) + &p.dense_b2;
        assert!((pred[0] - y[[0, 0]]).abs() < 1e-15);
    }

    #[test]
    fn forward_is_deterministic() {
        let s = ring_sample();
        let p = ModelParameters::glorot(shape(), &mut rng::substream(6, rng::INIT));
        let a = predict(&p, &s.adjacency, &s.features).unwrap();
        let b = predict(&p, &s.adjacency, &s.features).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn inference_path_matches_training_forward() {
        let s = ring_sample();
        let mut p = ModelParameters::glorot(shape(), &mut rng::substream(7, rng::INIT));
        p.dense_b1.fill(0.05);
        p.dense_b2.fill(-0.3);
        let lean = predict(&p, &s.adjacency, &s.features).unwrap();
        let (full, _) = forward(&p, &s.adjacency, &s.features).unwrap();
        for (a, b) in lean.iter().zip(&full) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn forward_rejects_mismatched_features() {
        let s = ring_sample();
        let p = ModelParameters::zeros(ModelShape {
            f_low: 3,
            f_high: 5,
            hidden: 4,
        });
        assert!(matches!(forward(&p, &s.adjacency, &s.features), Err(Error::Dimension { .. })));
    }

    #[test]
    fn loss_examples() {
        let p = ModelParameters::zeros(shape());
        assert_eq!(loss(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 1.0], &p, 0.0).unwrap(), 0.0);
        assert_eq!(loss(&[2.0, 2.0], &[1.0, 2.0], &[1.0, 1.0], &p, 0.0).unwrap(), 0.5);
        assert_eq!(loss(&[2.0, 2.0], &[1.0, 2.0], &[1.0, 1.0], &p, 0.7).unwrap(), 0.5);
        // Masked entries are ignored.
        assert_eq!(loss(&[2.0, 9.0], &[1.0, 2.0], &[1.0, 0.0], &p, 0.0).unwrap(), 1.0);
        assert!(matches!(
            loss(&[1.0], &[1.0], &[0.0], &p, 0.0),
            Err(Error::DegenerateSample)
        ));
        let mut q = ModelParameters::zeros(shape());
        q.low_w1.fill(1.0);
        q.dense_b1.fill(5.0);
        let l = loss(&[1.0], &[1.0], &[1.0], &q, 0.5).unwrap();
        assert!((l - 0.5 * 12.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_fit_has_zero_data_gradient() {
        let mut s = ring_sample();
        let p = ModelParameters::glorot(shape(), &mut rng::substream(7, rng::INIT));
        let (pred, cache) = forward(&p, &s.adjacency, &s.features).unwrap();
        s.labels = pred;
        let g = backward(&p, &s, &cache, 0.0).unwrap();
        for t in g.tensors() {
            assert!(t.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn weight_decay_gradient_is_linear_in_beta() {
        let s = ring_sample();
        let p = ModelParameters::glorot(shape(), &mut rng::substream(8, rng::INIT));
        let (_, cache) = forward(&p, &s.adjacency, &s.features).unwrap();
        let g0 = backward(&p, &s, &cache, 0.0).unwrap();
        let g1 = backward(&p, &s, &cache, 0.01).unwrap();
        let g2 = backward(&p, &s, &cache, 0.02).unwrap();
        for k in 0..8 {
            let (a, b, c) = (g0.tensors()[k], g1.tensors()[k], g2.tensors()[k]);
            for ((x, y), z) in a.iter().zip(b.iter()).zip(c.iter()) {
                let reg1 = y - x;
                let reg2 = z - x;
                assert!((reg2 - 2.0 * reg1).abs() < 1e-12);
                if k >= WEIGHT_TENSORS {
                    assert_eq!(reg1, 0.0);
                }
            }
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let s = ring_sample();
        let p = ModelParameters::glorot(shape(), &mut rng::substream(9, rng::INIT));
        let (_, cache) = forward(&p, &s.adjacency, &s.features).unwrap();
        let mut q = p.clone();
        q.low_w1[[0, 0]] += 1e-3;
        assert!(matches!(backward(&q, &s, &cache, 0.0), Err(Error::StaleCache)));

        let a = AdjacencyMatrix::from_edges(4, [(0, 1), (1, 2), (2, 3)]).unwrap();
        let other = TrainingSample::from_topology(&a, 0, FeatureLayout::Topological, None, 0).unwrap();
        assert!(matches!(backward(&p, &other, &cache, 0.0), Err(Error::StaleCache)));
    }
}
