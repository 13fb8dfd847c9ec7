use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Real, Shape, Tensor};
use crate::error::{Error, Result};

/// He-normal initialization: samples from `N(0, sqrt(2 / fan_in))`.
pub fn he_normal<T: Real, R: Rng + ?Sized>(shape: Shape, fan_in: usize, rng: &mut R) -> Result<Tensor<T>> {
    if fan_in == 0 {
        return Err(Error::InvalidArgument("fan_in must be positive".into()));
    }
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect();
    Ok(Tensor::from_vec(shape, data))
}
