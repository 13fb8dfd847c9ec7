//! Synthetic co-registered scenes with planted change and known truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{reflect_index, LabelMask, Raster, RasterPair};

const MAX_SHAPE_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneSpec {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// Target fraction of changed pixels reached with random shapes; 0 plants none.
    pub change_frac: f64,
    /// Smallest and largest extent of a random shape in pixels.
    pub shape_size: (usize, usize),
    /// Squares planted before the random shapes, as (row, col, side).
    pub squares: Vec<(usize, usize, usize)>,
    pub noise_std: f64,
    /// Per-band gain and bias of the second date; a single entry applies to every band.
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    /// Gaussian correlation length of the background field, in pixels.
    pub smoothness: f64,
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        SyntheticSceneSpec {
            height: 128,
            width: 128,
            bands: 4,
            change_frac: 0.1,
            shape_size: (8, 24),
            squares: Vec::new(),
            noise_std: 0.1,
            gain: vec![1.1],
            bias: vec![0.2],
            smoothness: 3.0,
            seed: 0,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.height == 0 || self.width == 0 || self.bands == 0 {
            return bad("scene dimensions and band count must be >= 1".into());
        }
        if !(0.0..0.5).contains(&self.change_frac) {
            return bad(format!("change fraction {} not in [0, 0.5)", self.change_frac));
        }
        let (lo, hi) = self.shape_size;
        if lo == 0 || lo > hi {
            return bad(format!("shape size range {lo}..{hi} is empty"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise std {} must be >= 0", self.noise_std));
        }
        for (name, v) in [("gain", &self.gain), ("bias", &self.bias)] {
            if v.len() != 1 && v.len() != self.bands {
                return bad(format!("{name} needs 1 or {} entries, got {}", self.bands, v.len()));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return bad(format!("{name} entries must be finite"));
            }
        }
        if !(self.smoothness >= 0.0 && self.smoothness.is_finite()) {
            return bad(format!("smoothness {} must be >= 0", self.smoothness));
        }
        if let Some(&(r, c, s)) = self
            .squares
            .iter()
            .find(|&&(r, c, s)| s == 0 || r + s > self.height || c + s > self.width)
        {
            return bad(format!("square ({r}, {c}, {s}) does not fit the scene"));
        }
        Ok(())
    }

    fn per_band(v: &[f64], b: usize) -> f64 {
        if v.len() == 1 {
            v[0]
        } else {
            v[b]
        }
    }
}

/// White noise blurred by a separable Gaussian and standardized.
fn smooth_field(h: usize, w: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let noise: Vec<f64> = (0..h * w).map(|_| normal.sample(rng)).collect();
    if sigma == 0.0 {
        return standardize(noise);
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = taps
                .iter()
                .zip(-radius..=radius)
                .map(|(&t, d)| t * noise[y * w + reflect_index(x as isize + d, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps
                .iter()
                .zip(-radius..=radius)
                .map(|(&t, d)| t * tmp[reflect_index(y as isize + d, h) * w + x])
                .sum();
        }
    }
    standardize(out)
}

fn standardize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    let scale = if std > 0.0 { 1.0 / std } else { 0.0 };
    v.iter_mut().for_each(|x| *x = (*x - mean) * scale);
    v
}

/// Rasterizes a random axis-aligned rectangle or convex polygon into `mask`.
fn plant_shape(mask: &mut [u8], h: usize, w: usize, size: (usize, usize), rng: &mut ChaCha8Rng) {
    let cy = rng.random_range(0.0..h as f64);
    let cx = rng.random_range(0.0..w as f64);
    if rng.random_bool(0.5) {
        let sh = rng.random_range(size.0..=size.1) as f64;
        let sw = rng.random_range(size.0..=size.1) as f64;
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                if (py - cy).abs() <= sh / 2.0 && (px - cx).abs() <= sw / 2.0 {
                    mask[y * w + x] = 1;
                }
            }
        }
        return;
    }
    let corners = rng.random_range(5..=8);
    let radius = rng.random_range(size.0..=size.1) as f64 / 2.0;
    let mut angles: Vec<f64> = (0..corners)
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();
    angles.sort_by(f64::total_cmp);
    let verts: Vec<(f64, f64)> = angles
        .iter()
        .map(|&a| {
            let r = radius * rng.random_range(0.7..1.0);
            (cy + r * a.sin(), cx + r * a.cos())
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            // inside a counter-clockwise convex polygon: left of every edge
            let inside = (0..corners).all(|i| {
                let (ay, ax) = verts[i];
                let (by, bx) = verts[(i + 1) % corners];
                (bx - ax) * (py - ay) - (by - ay) * (px - ax) >= 0.0
            });
            if inside {
                mask[y * w + x] = 1;
            }
        }
    }
}

/// `t1` is a smooth random field per band; `t2 = gain * t1 + bias + noise`
/// except inside planted shapes, where `t1` is replaced by the magnitude of an
/// independent field carrying the opposite sign of `t1`. The replacement has
/// the same marginal distribution as the background, so per-band statistics
/// of `t2` stay those of a pure gain/bias drift. The mask marks planted pixels.
pub fn generate_synthetic(spec: &SyntheticSceneSpec) -> Result<(RasterPair, LabelMask)> {
    spec.validate()?;
    let (h, w, bands) = (spec.height, spec.width, spec.bands);
    let n = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut mask = vec![0u8; n];
    for &(r, c, s) in &spec.squares {
        for y in r..r + s {
            mask[y * w + c..y * w + c + s].fill(1);
        }
    }
    let target = (spec.change_frac * n as f64).ceil() as usize;
    let mut attempts = 0;
    while spec.change_frac > 0.0 && mask.iter().filter(|&&m| m == 1).count() < target {
        if attempts == MAX_SHAPE_ATTEMPTS {
            return Err(Error::InvalidArgument(format!(
                "could not reach change fraction {} in a {h}x{w} scene",
                spec.change_frac
            )));
        }
        attempts += 1;
        let mut trial = mask.clone();
        plant_shape(&mut trial, h, w, spec.shape_size, &mut rng);
        if (trial.iter().filter(|&&m| m == 1).count() as f64) < 0.5 * n as f64 {
            mask = trial;
        }
    }

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut t1 = Vec::with_capacity(bands * n);
    let mut t2 = Vec::with_capacity(bands * n);
    for b in 0..bands {
        let base = smooth_field(h, w, spec.smoothness, &mut rng);
        let other = smooth_field(h, w, spec.smoothness, &mut rng);
        let (gain, bias) = (
            SyntheticSceneSpec::per_band(&spec.gain, b),
            SyntheticSceneSpec::per_band(&spec.bias, b),
        );
        for i in 0..n {
            let src = if mask[i] == 1 {
                -base[i].signum() * other[i].abs()
            } else {
                base[i]
            };
            let mut v = gain * src + bias;
            if spec.noise_std > 0.0 {
                v += spec.noise_std * normal.sample(&mut rng);
            }
            t1.push(base[i]);
            t2.push(v);
        }
    }
    let pair = RasterPair::new(Raster::new(bands, h, w, t1)?, Raster::new(bands, h, w, t2)?)?;
    Ok((pair, LabelMask::new(h, w, mask)?))
}
