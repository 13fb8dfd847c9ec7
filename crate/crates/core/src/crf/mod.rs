//! Fully connected two-label CRF over a change-probability map.
//!
//! Energy: unary `-log P(y_i)` plus, for every pixel pair with differing
//! labels, `w1 * k_bilateral + w2 * k_smooth` where
//!
//! * `k_bilateral = exp(-|c_i - c_j|^2 / 2 sa^2 - |d_i - d_j|^2 / 2 sb^2)`
//! * `k_smooth    = exp(-|c_i - c_j|^2 / 2 sg^2)`
//!
//! with `c` the pixel coordinates and `d` the per-band temporal difference.
//! Inference is parallel mean field with Potts compatibility.

mod grid;
mod permutohedral;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{ChangeMap, ProbabilityMap};
use crate::metrics::{confusion, scores, ConfusionMatrix};
use crate::raster::{LabelMask, RasterPair};

use grid::GaussGrid;
use permutohedral::{Permutohedral, MAX_DIM};

/// Probabilities are clamped to this distance from 0 and 1 before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterBackend {
    /// Direct O(N^2) summation.
    Exact,
    /// Permutohedral lattice: fastest, a few percent kernel error.
    #[default]
    Permutohedral,
    /// Gaussian-weighted regular lattice: slower, sub-percent error.
    GaussGrid,
}

/// Spectral part of the bilateral feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectralFeature {
    /// The per-band difference vector `t2 - t1`.
    #[default]
    BandDifference,
    /// Its Euclidean norm only.
    Magnitude,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrfConfig {
    pub w1: f64,
    pub w2: f64,
    pub sigma_alpha: f64,
    pub sigma_beta: f64,
    pub sigma_gamma: f64,
    pub iterations: usize,
    pub backend: FilterBackend,
    pub spectral: SpectralFeature,
}

impl Default for CrfConfig {
    fn default() -> Self {
        CrfConfig {
            w1: 3.0,
            w2: 1.0,
            sigma_alpha: 10.0,
            sigma_beta: 3.0,
            sigma_gamma: 1.0,
            iterations: 10,
            backend: FilterBackend::Permutohedral,
            spectral: SpectralFeature::BandDifference,
        }
    }
}

impl CrfConfig {
    pub fn validate(&self) -> Result<()> {
        let w_ok = |w: f64| w >= 0.0 && w.is_finite();
        let s_ok = |s: f64| s > 0.0 && s.is_finite();
        if !w_ok(self.w1) || !w_ok(self.w2) {
            return Err(Error::InvalidArgument(format!(
                "kernel weights must be finite and >= 0, got {} and {}",
                self.w1, self.w2
            )));
        }
        if !s_ok(self.sigma_alpha) || !s_ok(self.sigma_beta) || !s_ok(self.sigma_gamma) {
            return Err(Error::InvalidArgument("all bandwidths must be positive".into()));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("at least one mean-field iteration is required".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: CrfConfig = toml::from_str(text).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("plain struct serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        CrfConfig::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }
}

/// `[-log P(y=0), -log P(y=1)]` per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct UnaryField {
    pub height: usize,
    pub width: usize,
    pub phi: Vec<[f64; 2]>,
}

pub fn build_unary(prob: &ProbabilityMap) -> UnaryField {
    let phi = prob
        .values
        .iter()
        .map(|&p| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            [-(1.0 - p).ln(), -p.ln()]
        })
        .collect();
    UnaryField {
        height: prob.height,
        width: prob.width,
        phi,
    }
}

/// Pixel coordinates are implicit in the raster layout; only the spectral
/// part is stored, `dim` values per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseFeatures {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub spectral: Vec<f64>,
}

impl PairwiseFeatures {
    pub fn new(height: usize, width: usize, dim: usize, spectral: Vec<f64>) -> Result<Self> {
        if spectral.len() != height * width * dim {
            return Err(Error::Shape(format!(
                "{} spectral values for {height}x{width} pixels of dim {dim}",
                spectral.len()
            )));
        }
        if 2 + dim > MAX_DIM {
            return Err(Error::InvalidArgument(format!(
                "bilateral feature dimension {} exceeds {MAX_DIM}",
                2 + dim
            )));
        }
        if spectral.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite spectral feature".into()));
        }
        Ok(PairwiseFeatures {
            height,
            width,
            dim,
            spectral,
        })
    }

    /// Temporal differences of the per-image standardized pair.
    pub fn from_pair(pair: &RasterPair, kind: SpectralFeature) -> Result<Self> {
        let norm = pair.normalized();
        let (h, w, b) = (pair.height(), pair.width(), pair.bands());
        let n = h * w;
        let spectral = match kind {
            SpectralFeature::BandDifference => {
                let mut s = vec![0.0; n * b];
                for band in 0..b {
                    for (i, (x1, x2)) in norm.t1.band(band).iter().zip(norm.t2.band(band)).enumerate() {
                        s[i * b + band] = x2 - x1;
                    }
                }
                s
            }
            SpectralFeature::Magnitude => crate::preclassify::cva_di(&norm)?.magnitude,
        };
        let dim = if kind == SpectralFeature::Magnitude { 1 } else { b };
        PairwiseFeatures::new(h, w, dim, spectral)
    }

    fn bilateral(&self, sigma_alpha: f64, sigma_beta: f64) -> Vec<f64> {
        let d = 2 + self.dim;
        let mut f = Vec::with_capacity(self.height * self.width * d);
        for i in 0..self.height * self.width {
            f.push((i / self.width) as f64 / sigma_alpha);
            f.push((i % self.width) as f64 / sigma_alpha);
            f.extend(self.spectral[i * self.dim..(i + 1) * self.dim].iter().map(|v| v / sigma_beta));
        }
        f
    }

    fn spatial(&self, sigma: f64) -> Vec<f64> {
        (0..self.height * self.width)
            .flat_map(|i| [(i / self.width) as f64 / sigma, (i % self.width) as f64 / sigma])
            .collect()
    }
}

enum Plan {
    Exact(Vec<f64>),
    Lattice(Permutohedral),
    Grid(GaussGrid),
}

/// A Gaussian filter prepared for one feature set; apply it to any number
/// of value fields.
pub struct GaussianFilter {
    n: usize,
    d: usize,
    plan: Plan,
}

impl GaussianFilter {
    /// `features` holds `n` rows of `d` raw coordinates, each divided by the
    /// matching entry of `sigma`.
    pub fn new(features: &[f64], d: usize, sigma: &[f64], backend: FilterBackend) -> Result<Self> {
        if d == 0 || d > MAX_DIM || sigma.len() != d {
            return Err(Error::InvalidArgument(format!(
                "feature dimension must be 1..={MAX_DIM} with one bandwidth each"
            )));
        }
        if features.len() % d != 0 {
            return Err(Error::Shape(format!("{} feature values not divisible by {d}", features.len())));
        }
        if let Some(s) = sigma.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {s}")));
        }
        let scaled: Vec<f64> = features
            .chunks_exact(d)
            .flat_map(|f| f.iter().zip(sigma).map(|(v, s)| v / s))
            .collect();
        Ok(GaussianFilter::from_scaled(scaled, d, backend))
    }

    fn from_scaled(scaled: Vec<f64>, d: usize, backend: FilterBackend) -> Self {
        let n = scaled.len() / d;
        let plan = match backend {
            FilterBackend::Exact => Plan::Exact(scaled),
            FilterBackend::Permutohedral => Plan::Lattice(Permutohedral::new(&scaled, d)),
            FilterBackend::GaussGrid => Plan::Grid(GaussGrid::new(&scaled, d)),
        };
        GaussianFilter { n, d, plan }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// `out_i = sum_{j != i} exp(-|f_i - f_j|^2 / 2) v_j` for `vd`-vectors.
    pub fn apply(&self, values: &[f64], vd: usize) -> Result<Vec<f64>> {
        if vd == 0 || values.len() != self.n * vd {
            return Err(Error::Shape(format!(
                "{} values for {} points of dim {vd}",
                values.len(),
                self.n
            )));
        }
        Ok(match &self.plan {
            Plan::Exact(f) => exact_filter(f, self.d, values, vd),
            Plan::Lattice(l) => l.apply(values, vd),
            Plan::Grid(g) => g.apply(values, vd),
        })
    }
}

fn exact_filter(f: &[f64], d: usize, values: &[f64], vd: usize) -> Vec<f64> {
    let n = f.len() / d;
    let mut out = vec![0.0; n * vd];
    for i in 0..n {
        let fi = &f[i * d..(i + 1) * d];
        let oi = &mut out[i * vd..(i + 1) * vd];
        for j in 0..n {
            if j == i {
                continue;
            }
            let fj = &f[j * d..(j + 1) * d];
            let r2: f64 = fi.iter().zip(fj).map(|(a, b)| (a - b) * (a - b)).sum();
            let k = (-0.5 * r2).exp();
            for c in 0..vd {
                oi[c] += k * values[j * vd + c];
            }
        }
    }
    out
}

/// One-shot convenience wrapper around [`GaussianFilter`].
pub fn gaussian_filter(
    values: &[f64],
    vd: usize,
    features: &[f64],
    d: usize,
    sigma: &[f64],
    backend: FilterBackend,
) -> Result<Vec<f64>> {
    GaussianFilter::new(features, d, sigma, backend)?.apply(values, vd)
}

/// Mean-field marginals `[Q(0), Q(1)]` per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalField {
    pub height: usize,
    pub width: usize,
    pub q: Vec<[f64; 2]>,
    /// Largest per-pixel change of `Q(1)` in each iteration.
    pub max_change: Vec<f64>,
}

impl MarginalField {
    pub fn decisions(&self) -> ChangeMap {
        ChangeMap {
            height: self.height,
            width: self.width,
            labels: self.q.iter().map(|q| u8::from(q[1] > 0.5)).collect(),
        }
    }
}

fn softmax_neg(e0: f64, e1: f64) -> [f64; 2] {
    let m = e0.min(e1);
    let (a, b) = ((m - e0).exp(), (m - e1).exp());
    [a / (a + b), b / (a + b)]
}

/// Both pairwise kernels prepared for a scene.
pub struct CrfKernels {
    bilateral: GaussianFilter,
    smooth: GaussianFilter,
}

impl CrfKernels {
    pub fn new(feats: &PairwiseFeatures, cfg: &CrfConfig) -> Result<Self> {
        cfg.validate()?;
        let d = 2 + feats.dim;
        Ok(CrfKernels {
            bilateral: GaussianFilter::from_scaled(feats.bilateral(cfg.sigma_alpha, cfg.sigma_beta), d, cfg.backend),
            smooth: GaussianFilter::from_scaled(feats.spatial(cfg.sigma_gamma), 2, cfg.backend),
        })
    }
}

/// Mean field with prepared kernels and explicit weights.
pub fn mean_field_with(unary: &UnaryField, kernels: &CrfKernels, w1: f64, w2: f64, iterations: usize) -> Result<MarginalField> {
    let n = unary.phi.len();
    if kernels.bilateral.len() != n || kernels.smooth.len() != n {
        return Err(Error::Shape("unary field and kernels cover different pixel counts".into()));
    }
    let mut q: Vec<[f64; 2]> = unary.phi.iter().map(|p| softmax_neg(p[0], p[1])).collect();
    let mut max_change = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let flat: Vec<f64> = q.iter().flat_map(|v| *v).collect();
        let zero = || vec![0.0; 2 * n];
        let bil = if w1 > 0.0 { kernels.bilateral.apply(&flat, 2)? } else { zero() };
        let smo = if w2 > 0.0 { kernels.smooth.apply(&flat, 2)? } else { zero() };
        let mut change: f64 = 0.0;
        for i in 0..n {
            // Potts: label l pays for neighbours holding the other label
            let msg = |l: usize| w1 * bil[2 * i + l] + w2 * smo[2 * i + l];
            let next = softmax_neg(unary.phi[i][0] + msg(1), unary.phi[i][1] + msg(0));
            change = change.max((next[1] - q[i][1]).abs());
            q[i] = next;
        }
        max_change.push(change);
    }
    Ok(MarginalField {
        height: unary.height,
        width: unary.width,
        q,
        max_change,
    })
}

pub fn mean_field_infer(unary: &UnaryField, feats: &PairwiseFeatures, cfg: &CrfConfig) -> Result<MarginalField> {
    if (unary.height, unary.width) != (feats.height, feats.width) {
        return Err(Error::Shape("unary field and features differ in size".into()));
    }
    let kernels = CrfKernels::new(feats, cfg)?;
    mean_field_with(unary, &kernels, cfg.w1, cfg.w2, cfg.iterations)
}

/// Unary from `prob`, features from `pair`, mean field, then Q(change) > 0.5.
pub fn refine(prob: &ProbabilityMap, pair: &RasterPair, cfg: &CrfConfig) -> Result<ChangeMap> {
    cfg.validate()?;
    if (prob.height, prob.width) != (pair.height(), pair.width()) {
        return Err(Error::Shape(format!(
            "probability map is {}x{}, pair is {}x{}",
            prob.height,
            prob.width,
            pair.height(),
            pair.width()
        )));
    }
    let feats = PairwiseFeatures::from_pair(pair, cfg.spectral)?;
    Ok(mean_field_infer(&build_unary(prob), &feats, cfg)?.decisions())
}

/// Explicit value lists per parameter; every combination is tried.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrfGrid {
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    pub sigma_alpha: Vec<f64>,
    pub sigma_beta: Vec<f64>,
    pub sigma_gamma: Vec<f64>,
    pub iterations: usize,
    pub backend: FilterBackend,
    pub spectral: SpectralFeature,
}

impl Default for CrfGrid {
    fn default() -> Self {
        let w = vec![0.5, 1.0, 3.0, 5.0, 10.0];
        CrfGrid {
            w1: w.clone(),
            w2: w,
            sigma_alpha: vec![3.0, 10.0, 30.0, 60.0],
            sigma_beta: vec![1.0, 3.0, 10.0],
            sigma_gamma: vec![1.0, 3.0],
            iterations: 10,
            backend: FilterBackend::Permutohedral,
            spectral: SpectralFeature::BandDifference,
        }
    }
}

impl CrfGrid {
    pub fn size(&self) -> usize {
        self.w1.len() * self.w2.len() * self.sigma_alpha.len() * self.sigma_beta.len() * self.sigma_gamma.len()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        CrfGrid::from_toml_str(&text)
    }
}

/// One labeled scene for fitting.
pub struct CrfScene<'a> {
    pub pair: &'a RasterPair,
    pub prob: &'a ProbabilityMap,
    pub truth: &'a LabelMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearchResult {
    pub config: CrfConfig,
    /// F1 over the pooled confusion matrix of all scenes.
    pub f1: f64,
    pub evaluated: usize,
}

/// Exhaustive search maximizing pooled refined F1. Among equal scores the
/// smaller `(w1, w2)` wins, then the earlier grid entry.
pub fn grid_search_fit(scenes: &[CrfScene], grid: &CrfGrid) -> Result<GridSearchResult> {
    if grid.size() == 0 {
        return Err(Error::Empty("CRF grid has no points".into()));
    }
    if scenes.is_empty() {
        return Err(Error::Empty("grid search needs at least one scene".into()));
    }
    let mut prepared = Vec::with_capacity(scenes.len());
    for s in scenes {
        if (s.prob.height, s.prob.width) != (s.pair.height(), s.pair.width())
            || (s.truth.height(), s.truth.width()) != (s.pair.height(), s.pair.width())
        {
            return Err(Error::Shape("scene maps do not match the pair".into()));
        }
        prepared.push((build_unary(s.prob), PairwiseFeatures::from_pair(s.pair, grid.spectral)?));
    }
    let base = CrfConfig {
        iterations: grid.iterations,
        backend: grid.backend,
        spectral: grid.spectral,
        ..CrfConfig::default()
    };
    let mut best: Option<(f64, CrfConfig)> = None;
    let mut evaluated = 0;
    for &sa in &grid.sigma_alpha {
        for &sb in &grid.sigma_beta {
            for &sg in &grid.sigma_gamma {
                let cfg = CrfConfig {
                    sigma_alpha: sa,
                    sigma_beta: sb,
                    sigma_gamma: sg,
                    ..base
                };
                let kernels = prepared
                    .iter()
                    .map(|(_, f)| CrfKernels::new(f, &cfg))
                    .collect::<Result<Vec<_>>>()?;
                for &w1 in &grid.w1 {
                    for &w2 in &grid.w2 {
                        let cand = CrfConfig { w1, w2, ..cfg };
                        cand.validate()?;
                        let mut pooled = ConfusionMatrix::default();
                        for ((unary, _), (k, s)) in prepared.iter().zip(kernels.iter().zip(scenes)) {
                            let q = mean_field_with(unary, k, w1, w2, grid.iterations)?;
                            let cm = confusion(&q.decisions().labels, s.truth)?;
                            pooled.tp += cm.tp;
                            pooled.fp += cm.fp;
                            pooled.tn += cm.tn;
                            pooled.fn_ += cm.fn_;
                        }
                        evaluated += 1;
                        let f1 = scores(&pooled).f1;
                        let better = match &best {
                            None => true,
                            Some((bf, bc)) => f1 > *bf || (f1 == *bf && (w1, w2) < (bc.w1, bc.w2)),
                        };
                        if better {
                            best = Some((f1, cand));
                        }
                    }
                }
            }
        }
    }
    let (f1, config) = best.expect("grid is non-empty");
    Ok(GridSearchResult {
        config,
        f1,
        evaluated,
    })
}

#[cfg(test)]
mod tests;
