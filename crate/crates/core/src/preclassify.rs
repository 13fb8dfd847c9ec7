//! Pre-classification for the unsupervised pipeline: CVA difference image,
//! fuzzy c-means on its magnitudes, the three-way changed / unchanged /
//! undecided partition and training-sample selection.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{save_raster, Raster, RasterPair};

/// Per-pixel CVA magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceImage {
    pub height: usize,
    pub width: usize,
    pub magnitude: Vec<f64>,
}

/// Euclidean norm of `t2 - t1` across bands at every pixel.
pub fn cva_di(pair: &RasterPair) -> Result<DifferenceImage> {
    let (a, b) = (&pair.t1, &pair.t2);
    if a.bands() != b.bands() || a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Shape("pair rasters differ in size or band count".into()));
    }
    let n = a.pixels();
    let mut sq = vec![0.0; n];
    for band in 0..a.bands() {
        for ((s, x1), x2) in sq.iter_mut().zip(a.band(band)).zip(b.band(band)) {
            let d = x2 - x1;
            *s += d * d;
        }
    }
    Ok(DifferenceImage {
        height: a.height(),
        width: a.width(),
        magnitude: sq.into_iter().map(f64::sqrt).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FcmConfig {
    pub clusters: usize,
    pub fuzzifier: f64,
    /// Stop once no center moves by this much in one iteration.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FcmConfig {
    fn default() -> Self {
        FcmConfig {
            clusters: 3,
            fuzzifier: 2.0,
            tol: 1e-5,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcmResult {
    /// Row-major `[point][cluster]`.
    pub memberships: Vec<f64>,
    pub centers: Vec<f64>,
    /// Objective after every membership update.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

impl FcmResult {
    pub fn clusters(&self) -> usize {
        self.centers.len()
    }

    pub fn membership(&self, point: usize) -> &[f64] {
        let c = self.clusters();
        &self.memberships[point * c..(point + 1) * c]
    }
}

/// Linear-interpolated percentile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Fills `u` (one row of `c` memberships) for a point and returns its
/// objective contribution.
fn update_memberships(x: f64, centers: &[f64], m: f64, u: &mut [f64]) -> f64 {
    let zeros = centers.iter().filter(|&&v| v == x).count();
    if zeros > 0 {
        // point sits on a center: it belongs there and contributes nothing
        for (uk, &v) in u.iter_mut().zip(centers) {
            *uk = if v == x { 1.0 / zeros as f64 } else { 0.0 };
        }
        return 0.0;
    }
    let p = 2.0 / (m - 1.0);
    let mut obj = 0.0;
    for k in 0..centers.len() {
        let dk = (x - centers[k]).abs();
        let s: f64 = centers.iter().map(|&v| (dk / (x - v).abs()).powf(p)).sum();
        u[k] = 1.0 / s;
        obj += u[k].powf(m) * dk * dk;
    }
    obj
}

/// Fuzzy c-means on scalar data. Centers start at evenly spaced percentiles
/// between the 10th and 90th (10/50/90 for three clusters).
pub fn fcm(data: &[f64], cfg: &FcmConfig) -> Result<FcmResult> {
    let c = cfg.clusters;
    if c < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 clusters, got {c}")));
    }
    if !(cfg.fuzzifier > 1.0) || !cfg.fuzzifier.is_finite() {
        return Err(Error::InvalidArgument(format!("fuzzifier must exceed 1, got {}", cfg.fuzzifier)));
    }
    if !(cfg.tol > 0.0) || cfg.max_iter == 0 {
        return Err(Error::InvalidArgument("tol must be positive and max_iter >= 1".into()));
    }
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite value at index {i}")));
    }
    let mut sorted = data.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < c {
        return Err(Error::InvalidArgument(format!(
            "{} distinct values cannot form {c} clusters",
            distinct.len()
        )));
    }
    let qs: Vec<f64> = (0..c).map(|k| 10.0 + 80.0 * k as f64 / (c - 1) as f64).collect();
    let mut centers: Vec<f64> = qs.iter().map(|&q| percentile(&sorted, q)).collect();
    if centers.windows(2).any(|w| w[0] == w[1]) {
        // heavy ties at the percentiles: fall back to ranks among distinct values
        centers = qs.iter().map(|&q| percentile(&distinct, q)).collect();
    }

    let m = cfg.fuzzifier;
    let mut u = vec![0.0; data.len() * c];
    let mut trace = Vec::new();
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        iterations += 1;
        let mut obj = 0.0;
        for (x, row) in data.iter().zip(u.chunks_exact_mut(c)) {
            obj += update_memberships(*x, &centers, m, row);
        }
        trace.push(obj);
        let mut shift: f64 = 0.0;
        for (k, center) in centers.iter_mut().enumerate() {
            let (mut num, mut den) = (0.0, 0.0);
            for (x, row) in data.iter().zip(u.chunks_exact(c)) {
                let w = row[k].powf(m);
                num += w * x;
                den += w;
            }
            if den > 0.0 {
                let next = num / den;
                shift = shift.max((next - *center).abs());
                *center = next;
            }
        }
        if shift < cfg.tol {
            break;
        }
    }
    let mut obj = 0.0;
    for (x, row) in data.iter().zip(u.chunks_exact_mut(c)) {
        obj += update_memberships(*x, &centers, m, row);
    }
    trace.push(obj);
    Ok(FcmResult {
        memberships: u,
        centers,
        objective_trace: trace,
        iterations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PreClass {
    Unchanged,
    Changed,
    ToBeClassified,
}

impl PreClass {
    /// Export code: 0 unchanged, 1 changed, 2 to-be-classified.
    pub fn code(self) -> u8 {
        match self {
            PreClass::Unchanged => 0,
            PreClass::Changed => 1,
            PreClass::ToBeClassified => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreClassMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<PreClass>,
    /// Two or more centers coincided; their order fell back to cluster index.
    pub center_tie: bool,
}

impl PreClassMap {
    /// Counts of (unchanged, changed, to-be-classified).
    pub fn counts(&self) -> (usize, usize, usize) {
        let mut n = (0, 0, 0);
        for l in &self.labels {
            match l {
                PreClass::Unchanged => n.0 += 1,
                PreClass::Changed => n.1 += 1,
                PreClass::ToBeClassified => n.2 += 1,
            }
        }
        n
    }

    pub fn to_raster(&self) -> Raster {
        let values = self.labels.iter().map(|l| l.code() as f64).collect();
        Raster::new(1, self.height, self.width, values).expect("map dims are positive")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_raster(&self.to_raster(), path)
    }
}

/// Hard three-way labeling: each point goes to its maximum-membership
/// cluster; the highest center is "changed", the lowest "unchanged".
pub fn partition_three_way(res: &FcmResult, height: usize, width: usize) -> Result<PreClassMap> {
    if res.clusters() != 3 {
        return Err(Error::InvalidArgument(format!(
            "three-way partition needs 3 clusters, got {}",
            res.clusters()
        )));
    }
    if res.memberships.len() != 3 * height * width {
        return Err(Error::Shape(format!(
            "{} membership rows for a {height}x{width} map",
            res.memberships.len() / 3
        )));
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| res.centers[a].total_cmp(&res.centers[b]));
    let center_tie = res.centers[order[0]] == res.centers[order[1]]
        || res.centers[order[1]] == res.centers[order[2]];
    let mut class = [PreClass::ToBeClassified; 3];
    class[order[0]] = PreClass::Unchanged;
    class[order[2]] = PreClass::Changed;
    let labels = res
        .memberships
        .chunks_exact(3)
        .map(|u| {
            let mut best = 0;
            for k in 1..3 {
                if u[k] > u[best] {
                    best = k;
                }
            }
            class[best]
        })
        .collect();
    Ok(PreClassMap {
        height,
        width,
        labels,
        center_tie,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample {
    pub row: usize,
    pub col: usize,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleSet {
    pub patch_size: usize,
    pub samples: Vec<Sample>,
}

impl SampleSet {
    pub fn positives(&self) -> usize {
        self.samples.iter().filter(|s| s.label == 1).count()
    }
    pub fn negatives(&self) -> usize {
        self.samples.len() - self.positives()
    }
}

/// Every changed pixel as a positive, plus `ceil(ratio * positives)`
/// unchanged pixels drawn without replacement (capped at what exists).
/// Border pixels are kept; their patches are reflect-padded on extraction.
pub fn select_samples<R: Rng + ?Sized>(
    map: &PreClassMap,
    patch_size: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<SampleSet> {
    if patch_size == 0 || patch_size % 2 == 0 {
        return Err(Error::InvalidArgument(format!("patch size must be odd, got {patch_size}")));
    }
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(Error::InvalidArgument(format!("sample ratio must be positive, got {ratio}")));
    }
    let at = |i: usize| (i / map.width, i % map.width);
    let changed: Vec<usize> = (0..map.labels.len())
        .filter(|&i| map.labels[i] == PreClass::Changed)
        .collect();
    if changed.is_empty() {
        return Err(Error::NoChangedPixels);
    }
    let unchanged: Vec<usize> = (0..map.labels.len())
        .filter(|&i| map.labels[i] == PreClass::Unchanged)
        .collect();
    let want = ((ratio * changed.len() as f64).ceil() as usize).min(unchanged.len());
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, unchanged.len(), want)
        .into_iter()
        .map(|k| unchanged[k])
        .collect();
    picked.sort_unstable();

    let mut samples = Vec::with_capacity(changed.len() + picked.len());
    for &i in &changed {
        let (row, col) = at(i);
        samples.push(Sample { row, col, label: 1 });
    }
    for &i in &picked {
        let (row, col) = at(i);
        samples.push(Sample { row, col, label: 0 });
    }
    Ok(SampleSet { patch_size, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, prop_assert_ne, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cva_examples() {
        let t = Raster::new(2, 2, 2, (0..8).map(|i| i as f64).collect()).unwrap();
        let same = cva_di(&RasterPair::new(t.clone(), t).unwrap()).unwrap();
        assert!(same.magnitude.iter().all(|&v| v == 0.0));

        let a = Raster::new(2, 1, 1, vec![1.0, 1.0]).unwrap();
        let b = Raster::new(2, 1, 1, vec![4.0, 5.0]).unwrap();
        assert_eq!(cva_di(&RasterPair::new(a, b).unwrap()).unwrap().magnitude, vec![5.0]);
    }

    #[test]
    fn cva_matches_pixel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut gen = || Raster::new(4, 16, 16, (0..1024).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let pair = RasterPair::new(gen(), gen()).unwrap();
        let di = cva_di(&pair).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let mut s = 0.0;
                for b in 0..4 {
                    let d = pair.t2.get(b, y, x) - pair.t1.get(b, y, x);
                    s += d * d;
                }
                assert_eq!(di.magnitude[y * 16 + x], s.sqrt());
            }
        }
    }

    #[test]
    fn fcm_three_pairs() {
        let res = fcm(&[0.0, 0.0, 10.0, 10.0, 20.0, 20.0], &FcmConfig::default()).unwrap();
        let mut c = res.centers.clone();
        c.sort_by(f64::total_cmp);
        for (got, want) in c.iter().zip([0.0, 10.0, 20.0]) {
            assert!((got - want).abs() < 1e-3, "{c:?}");
        }
    }

    #[test]
    fn equidistant_point_gets_uniform_membership() {
        let mut u = [0.0; 3];
        update_memberships(0.0, &[-1.0, 1.0, -1.0], 2.0, &mut u);
        for v in u {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let mut u2 = [0.0; 2];
        update_memberships(5.0, &[4.0, 6.0], 2.0, &mut u2);
        assert_eq!(u2, [0.5, 0.5]);
    }

    #[test]
    fn fcm_rejects_degenerate_data() {
        assert!(fcm(&[1.0, 1.0, 2.0, 2.0], &FcmConfig::default()).is_err());
        let cfg = FcmConfig {
            fuzzifier: 1.0,
            ..FcmConfig::default()
        };
        assert!(fcm(&[1.0, 2.0, 3.0], &cfg).is_err());
    }

    #[test]
    fn partition_by_center_order() {
        let res = FcmResult {
            memberships: vec![0.05, 0.9, 0.05, 0.8, 0.1, 0.1, 0.1, 0.1, 0.8],
            centers: vec![20.0, 0.0, 10.0],
            objective_trace: vec![],
            iterations: 0,
        };
        let map = partition_three_way(&res, 1, 3).unwrap();
        assert_eq!(
            map.labels,
            vec![PreClass::Unchanged, PreClass::Changed, PreClass::ToBeClassified]
        );
        assert!(!map.center_tie);
    }

    #[test]
    fn trimodal_partition_has_all_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..300)
            .map(|i| (i % 3) as f64 * 10.0 + rng.random_range(-0.5..0.5))
            .chain([19.9])
            .collect();
        let res = fcm(&data, &FcmConfig::default()).unwrap();
        let map = partition_three_way(&res, 1, data.len()).unwrap();
        let (uc, c, tbc) = map.counts();
        assert!(uc > 0 && c > 0 && tbc > 0);
        assert_eq!(uc + c + tbc, data.len());
        assert_eq!(*map.labels.last().unwrap(), PreClass::Changed);
    }

    fn map_with(changed: usize, unchanged: usize) -> PreClassMap {
        let mut labels = vec![PreClass::Changed; changed];
        labels.extend(vec![PreClass::Unchanged; unchanged]);
        labels.extend(vec![PreClass::ToBeClassified; 5]);
        PreClassMap {
            height: 1,
            width: labels.len(),
            labels,
            center_tie: false,
        }
    }

    #[test]
    fn sample_counts_follow_ratio() {
        let map = map_with(10, 1000);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = select_samples(&map, 13, 4.0, &mut rng).unwrap();
        assert_eq!((s.positives(), s.negatives()), (10, 40));
        let s1 = select_samples(&map, 13, 1.0, &mut rng).unwrap();
        assert_eq!((s1.positives(), s1.negatives()), (10, 10));

        let a = select_samples(&map, 13, 4.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = select_samples(&map, 13, 4.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);

        let capped = select_samples(&map_with(10, 7), 13, 4.0, &mut rng).unwrap();
        assert_eq!(capped.negatives(), 7);
    }

    #[test]
    fn sample_selection_guards() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            select_samples(&map_with(0, 10), 13, 4.0, &mut rng),
            Err(Error::NoChangedPixels)
        ));
        assert!(select_samples(&map_with(1, 10), 12, 4.0, &mut rng).is_err());
    }

    #[test]
    fn preclass_export_codes() {
        let map = map_with(1, 1);
        let r = map.to_raster();
        assert_eq!(&r.values()[..3], &[1.0, 0.0, 2.0]);
    }

    proptest! {
        #[test]
        fn cva_is_swap_symmetric(vals in proptest::collection::vec(-10.0f64..10.0, 24)) {
            let a = Raster::new(3, 2, 2, vals[..12].to_vec()).unwrap();
            let b = Raster::new(3, 2, 2, vals[12..].to_vec()).unwrap();
            let p = RasterPair::new(a, b).unwrap();
            prop_assert_eq!(cva_di(&p).unwrap(), cva_di(&p.swapped()).unwrap());
        }

        #[test]
        fn fcm_memberships_stochastic_and_objective_monotone(
            vals in proptest::collection::vec(0.0f64..50.0, 20..120)
        ) {
            let res = match fcm(&vals, &FcmConfig::default()) {
                Ok(r) => r,
                Err(_) => return Ok(()),
            };
            for i in 0..vals.len() {
                let s: f64 = res.membership(i).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                prop_assert!(res.membership(i).iter().all(|&u| (0.0..=1.0).contains(&u)));
            }
            for w in res.objective_trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9, "trace rose: {:?}", w);
            }
        }

        #[test]
        fn partition_covers_and_samples_skip_undecided(
            vals in proptest::collection::vec(0.0f64..30.0, 30..90),
            seed in 0u64..100,
        ) {
            let Ok(res) = fcm(&vals, &FcmConfig::default()) else { return Ok(()) };
            let map = partition_three_way(&res, 1, vals.len()).unwrap();
            let (a, b, c) = map.counts();
            prop_assert_eq!(a + b + c, vals.len());
            if let Ok(s) = select_samples(&map, 5, 2.0, &mut ChaCha8Rng::seed_from_u64(seed)) {
                for smp in &s.samples {
                    prop_assert_ne!(map.labels[smp.col], PreClass::ToBeClassified);
                }
            }
        }
    }
}
