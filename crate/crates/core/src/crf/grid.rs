//! Regular lattice with Gaussian splat and slice weights. Because
//! `exp(-|a-z|^2) exp(-|b-z|^2) = exp(-|a-b|^2/2) exp(-2|z-(a+b)/2|^2)`,
//! summing over lattice nodes `z` reproduces the target kernel up to a
//! trapezoid-rule error that falls off as `exp(-pi^2 / (2 h^2))`.

use std::collections::HashMap;
use std::f64::consts::PI;

use super::permutohedral::MAX_DIM;

/// Node spacing in scaled feature units.
pub(crate) const SPACING: f64 = 0.7;
/// Splat support radius in scaled feature units.
pub(crate) const RADIUS: f64 = 3.0;

type Key = [i32; MAX_DIM];

pub(crate) struct GaussGrid {
    features: Vec<f64>,
    d: usize,
    norm: f64,
}

impl GaussGrid {
    pub(crate) fn new(features: &[f64], d: usize) -> Self {
        assert!((1..=MAX_DIM).contains(&d));
        GaussGrid {
            features: features.to_vec(),
            d,
            norm: SPACING.powi(d as i32) * (2.0 / PI).powf(d as f64 / 2.0),
        }
    }

    /// Visits every node within [`RADIUS`] of `f` with its splat weight.
    fn for_nodes(&self, f: &[f64], visit: &mut dyn FnMut(&Key, f64)) {
        fn rec(f: &[f64], k: usize, key: &mut Key, budget: f64, w: f64, visit: &mut dyn FnMut(&Key, f64)) {
            if k == f.len() {
                visit(key, w);
                return;
            }
            let r = budget.sqrt();
            let lo = ((f[k] - r) / SPACING).ceil() as i32;
            let hi = ((f[k] + r) / SPACING).floor() as i32;
            for z in lo..=hi {
                let t = f[k] - z as f64 * SPACING;
                let left = budget - t * t;
                if left < 0.0 {
                    continue;
                }
                key[k] = z;
                rec(f, k + 1, key, left, w * (-t * t).exp(), visit);
            }
        }
        let mut key = [0i32; MAX_DIM];
        rec(f, 0, &mut key, RADIUS * RADIUS, 1.0, visit);
    }

    pub(crate) fn apply(&self, values: &[f64], vd: usize) -> Vec<f64> {
        let d = self.d;
        let n = self.features.len() / d;
        let mut index: HashMap<Key, usize> = HashMap::new();
        let mut lat: Vec<f64> = Vec::new();
        for (i, f) in self.features.chunks_exact(d).enumerate() {
            let v = &values[i * vd..(i + 1) * vd];
            self.for_nodes(f, &mut |key, w| {
                let next = lat.len() / vd;
                let slot = *index.entry(*key).or_insert_with(|| {
                    lat.extend(std::iter::repeat_n(0.0, vd));
                    next
                });
                for c in 0..vd {
                    lat[slot * vd + c] += w * v[c];
                }
            });
        }
        let mut out = vec![0.0; n * vd];
        for (i, f) in self.features.chunks_exact(d).enumerate() {
            let mut acc = vec![0.0; vd];
            let mut own = 0.0;
            self.for_nodes(f, &mut |key, w| {
                let slot = index[key];
                for c in 0..vd {
                    acc[c] += w * lat[slot * vd + c];
                }
                own += w * w;
            });
            for c in 0..vd {
                out[i * vd + c] = self.norm * (acc[c] - own * values[i * vd + c]);
            }
        }
        out
    }
}
