use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Shape of the pinwheel wings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PinwheelParams {
    pub radial_std: f64,
    pub tangential_std: f64,
    /// Warp applied to the angle as a function of the radial coordinate.
    pub rate: f64,
}

impl Default for PinwheelParams {
    fn default() -> Self {
        PinwheelParams { radial_std: 0.3, tangential_std: 0.05, rate: 0.25 }
    }
}

/// Pinwheel with the default wing shape.
pub fn gen_pinwheel(n_per_class: usize, classes: usize, seed: u64) -> Result<LabeledDataset> {
    gen_pinwheel_with(n_per_class, classes, PinwheelParams::default(), seed)
}

/// Each class is a Gaussian blob centred at radius 1 on the horizontal axis,
/// rotated by the class angle `2πk/classes` plus `rate·exp(r)` where `r` is
/// the point's radial coordinate, which bends the blob into a wing.
pub fn gen_pinwheel_with(n_per_class: usize, classes: usize, p: PinwheelParams, seed: u64) -> Result<LabeledDataset> {
    if n_per_class == 0 || classes == 0 {
        return Err(Error::Contract("pinwheel needs at least one class and one point per class".into()));
    }
    let mut rng = rng::seeded(seed);
    let n = n_per_class * classes;
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for k in 0..classes {
        let base = 2.0 * PI * k as f64 / classes as f64;
        for _ in 0..n_per_class {
            let e1: f64 = StandardNormal.sample(&mut rng);
            let e2: f64 = StandardNormal.sample(&mut rng);
            let r = 1.0 + p.radial_std * e1;
            let t = p.tangential_std * e2;
            let angle = base + p.rate * r.exp();
            let (s, c) = angle.sin_cos();
            data.push(r * c - t * s);
            data.push(r * s + t * c);
            labels.push(k);
        }
    }
    LabeledDataset::new("pinwheel", Tensor::new(vec![n, 2], data)?, Some(labels), classes)
}

/// Two concentric noisy circles; class `k` lies around `radii[k]`.
pub fn gen_two_circles(n_per_class: usize, seed: u64, radii: (f64, f64), noise_std: f64) -> Result<LabeledDataset> {
    if !(radii.0 > 0.0 && radii.1 > 0.0) || radii.0 == radii.1 {
        return Err(Error::Contract(format!("radii {radii:?} must be positive and distinct")));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::Contract("noise standard deviation must be non-negative".into()));
    }
    let mut rng = rng::seeded(seed);
    let n = 2 * n_per_class;
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for (k, radius) in [radii.0, radii.1].into_iter().enumerate() {
        for _ in 0..n_per_class {
            let angle: f64 = rng.random_range(0.0..2.0 * PI);
            let e: f64 = StandardNormal.sample(&mut rng);
            let r = radius + noise_std * e;
            let (s, c) = angle.sin_cos();
            data.push(r * c);
            data.push(r * s);
            labels.push(k);
        }
    }
    LabeledDataset::new("two_circles", Tensor::new(vec![n, 2], data)?, Some(labels), 2)
}
