//! Training objective: `λ·mean((x̂₀ − hr)²) + perceptual(x̂₀, hr)`.
//!
//! The perceptual term is a fixed stand-in for a learned patch-similarity
//! network: two layers of seeded random 3×3 filters with `tanh` activations,
//! each layer's feature vectors scaled to unit length per pixel, compared by
//! mean squared distance and averaged over layers. First-layer filters are
//! zero-mean and applied without padding, so a constant intensity offset
//! leaves every feature unchanged.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{Array, Graph, NodeId};
use crate::rng::stream_rng;
use crate::scalar::Scalar;
use crate::tensor::TensorImage;

const FEATURES: usize = 8;
const BANK_SEED: u64 = 0x5EED_F11E;
const ACTIVATION_SCALE: f64 = 2.0;
const UNIT_NORM_EPS: f64 = 1e-4;

/// Smallest side for which the perceptual proxy is defined.
pub const PROXY_MIN_SIDE: usize = 3;

/// The fixed filter bank for images with `channels` channels.
pub struct FilterBank<S> {
    layer1: Array<S>,
    layer2: Array<S>,
}

fn unit_filters(
    rng: &mut crate::rng::NoiseRng,
    n: usize,
    fan_in: usize,
    zero_mean: bool,
) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n * fan_in)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    for f in w.chunks_mut(fan_in) {
        if zero_mean {
            let m = f.iter().sum::<f64>() / fan_in as f64;
            f.iter_mut().for_each(|v| *v -= m);
        }
        let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        f.iter_mut().for_each(|v| *v /= norm);
    }
    w
}

impl<S: Scalar> FilterBank<S> {
    pub fn new(channels: usize) -> Self {
        let mut rng = stream_rng(BANK_SEED, channels as u64);
        let l1 = unit_filters(&mut rng, FEATURES, channels * 9, true);
        let l2 = unit_filters(&mut rng, FEATURES, FEATURES * 9, false);
        FilterBank {
            layer1: Array::from_parts(
                vec![FEATURES, channels, 3, 3],
                l1.into_iter().map(S::lit).collect(),
            ),
            layer2: Array::from_parts(
                vec![FEATURES, FEATURES, 3, 3],
                l2.into_iter().map(S::lit).collect(),
            ),
        }
    }

    /// Normalised feature maps of every layer that fits the input size.
    fn features(&self, g: &mut Graph<S>, x: NodeId) -> Result<Vec<NodeId>> {
        let w1 = g.input(self.layer1.clone());
        let h1 = g.conv2d(x, w1, None, 0)?;
        let a1 = g.tanh(h1, S::lit(ACTIVATION_SCALE));
        let mut out = vec![g.unit_norm(a1, S::lit(UNIT_NORM_EPS))];
        let (_, h, w) = g.value(a1).chw();
        if h / 2 >= 3 && w / 2 >= 3 {
            let pooled = g.avg_pool2(a1)?;
            let w2 = g.input(self.layer2.clone());
            let h2 = g.conv2d(pooled, w2, None, 0)?;
            let a2 = g.tanh(h2, S::lit(ACTIVATION_SCALE));
            out.push(g.unit_norm(a2, S::lit(UNIT_NORM_EPS)));
        }
        Ok(out)
    }
}

/// Records the proxy distance between `a` and `b` (both `[C, H, W]`).
pub fn perceptual_node<S: Scalar>(g: &mut Graph<S>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let dims = g.value(a).chw();
    if g.value(b).chw() != dims {
        return Err(Error::shape("perceptual proxy inputs differ in shape"));
    }
    let (c, h, w) = dims;
    if h < PROXY_MIN_SIDE || w < PROXY_MIN_SIDE {
        return Err(Error::shape(format!(
            "perceptual proxy needs at least 3x3, got {h}x{w}"
        )));
    }
    let bank = FilterBank::<S>::new(c);
    let fa = bank.features(g, a)?;
    let fb = bank.features(g, b)?;
    let layers = fa.len();
    let mut total: Option<NodeId> = None;
    for (&x, &y) in fa.iter().zip(&fb) {
        let d = g.mean_squared_diff(x, y)?;
        total = Some(match total {
            None => d,
            Some(t) => g.add(t, d)?,
        });
    }
    let total = total.expect("at least one layer");
    Ok(g.scale(total, S::lit(1.0 / layers as f64)))
}

/// Proxy perceptual distance; zero for identical images and symmetric.
pub fn perceptual_proxy<S: Scalar>(a: &TensorImage<S>, b: &TensorImage<S>) -> Result<f64> {
    a.check_same_shape(b, "perceptual proxy")?;
    let mut g = Graph::new(false);
    let an = g.input(Array::from_image(a));
    let bn = g.input(Array::from_image(b));
    let d = perceptual_node(&mut g, an, bn)?;
    Ok(g.value(d).item().as_f64())
}

/// Node handles of the objective's parts.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: NodeId,
    pub fidelity: NodeId,
    pub perceptual: NodeId,
}

pub fn loss_nodes<S: Scalar>(
    g: &mut Graph<S>,
    pred: NodeId,
    target: NodeId,
    lambda: f64,
) -> Result<LossNodes> {
    let fidelity = g.mean_squared_diff(pred, target)?;
    let perceptual = perceptual_node(g, pred, target)?;
    let weighted = g.scale(fidelity, S::lit(lambda));
    let total = g.add(weighted, perceptual)?;
    Ok(LossNodes {
        total,
        fidelity,
        perceptual,
    })
}

/// Loss value with its parts and the gradient with respect to the prediction.
#[derive(Debug, Clone)]
pub struct LossValue<S> {
    pub total: f64,
    pub fidelity: f64,
    pub perceptual: f64,
    pub grad: TensorImage<S>,
}

pub fn total_loss<S: Scalar>(
    x0_hat: &TensorImage<S>,
    hr: &TensorImage<S>,
    lambda: f64,
) -> Result<LossValue<S>> {
    x0_hat.check_same_shape(hr, "total loss")?;
    let mut g = Graph::new(true);
    let pred = g.variable(Array::from_image(x0_hat));
    let target = g.input(Array::from_image(hr));
    let nodes = loss_nodes(&mut g, pred, target, lambda)?;
    let grads = g.backward(nodes.total)?;
    let (c, h, w) = x0_hat.dims();
    let grad = grads
        .get(pred)
        .map(<[S]>::to_vec)
        .unwrap_or_else(|| vec![S::zero(); x0_hat.len()]);
    Ok(LossValue {
        total: g.value(nodes.total).item().as_f64(),
        fidelity: g.value(nodes.fidelity).item().as_f64(),
        perceptual: g.value(nodes.perceptual).item().as_f64(),
        grad: TensorImage::from_raw(h, w, c, grad),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_image, stream_rng};

    fn img(seed: u64, n: usize) -> TensorImage<f64> {
        gaussian_image::<f64>(n, n, 1, &mut stream_rng(seed, 0)).map(|v| 0.5 + 0.1 * v)
    }

    #[test]
    fn zero_for_identical_and_symmetric() {
        let a = img(1, 16);
        let b = img(2, 16);
        assert_eq!(perceptual_proxy(&a, &a).unwrap(), 0.0);
        let ab = perceptual_proxy(&a, &b).unwrap();
        let ba = perceptual_proxy(&b, &a).unwrap();
        assert!(ab > 0.0);
        assert!((ab - ba).abs() <= 1e-12);
    }

    #[test]
    fn constant_offset_is_invisible_to_the_proxy() {
        let a = img(3, 20);
        let b = a.map(|v| v + 0.1);
        assert!(perceptual_proxy(&a, &b).unwrap() < 1e-20);
        let loss = total_loss(&b, &a, 10.0).unwrap();
        assert!((loss.fidelity - 0.01).abs() < 1e-12);
        assert!((loss.total - 0.1).abs() < 1e-10, "total {}", loss.total);
    }

    #[test]
    fn loss_is_zero_with_zero_gradient_at_target() {
        let a = img(4, 12);
        let loss = total_loss(&a, &a, 10.0).unwrap();
        assert_eq!(loss.total, 0.0);
        assert!(loss.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn rejects_mismatched_shapes() {
        assert!(perceptual_proxy(&img(1, 8), &img(1, 9)).is_err());
        assert!(total_loss(&img(1, 8), &img(1, 9), 10.0).is_err());
        let tiny = TensorImage::<f64>::zeros(2, 2);
        assert!(perceptual_proxy(&tiny, &tiny).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let a = img(5, 10);
        let b = img(6, 10);
        let loss = total_loss(&a, &b, 10.0).unwrap();
        let h = 1e-6;
        for idx in [0, 13, 47, 99] {
            let mut plus = a.clone();
            plus.data_mut()[idx] += h;
            let mut minus = a.clone();
            minus.data_mut()[idx] -= h;
            let fd = (total_loss(&plus, &b, 10.0).unwrap().total
                - total_loss(&minus, &b, 10.0).unwrap().total)
                / (2.0 * h);
            let ad = loss.grad.data()[idx];
            assert!(
                (fd - ad).abs() <= 1e-6 * fd.abs().max(ad.abs()).max(1e-3),
                "{idx}: {fd} vs {ad}"
            );
        }
    }
}
