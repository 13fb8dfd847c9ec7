use super::*;
use crate::raster::Raster;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

/// Smooth random spectral field: box-blurred noise, rescaled to unit std.
fn smooth_field(h: usize, w: usize, bands: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..h * w * bands).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; h * w * bands];
    for y in 0..h {
        for x in 0..w {
            for b in 0..bands {
                let mut s = 0.0;
                let mut c = 0.0;
                for dy in -2i64..=2 {
                    for dx in -2i64..=2 {
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                            s += raw[((yy as usize) * w + xx as usize) * bands + b];
                            c += 1.0;
                        }
                    }
                }
                out[(y * w + x) * bands + b] = s / c;
            }
        }
    }
    let std = (out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64).sqrt();
    out.iter().map(|v| v / std).collect()
}

fn bilateral_case(side: usize, bands: usize, seed: u64) -> (Vec<f64>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = smooth_field(side, side, bands, &mut rng);
    let d = 2 + bands;
    let mut f = Vec::with_capacity(side * side * d);
    for i in 0..side * side {
        f.push((i / side) as f64);
        f.push((i % side) as f64);
        f.extend_from_slice(&spec[i * bands..(i + 1) * bands]);
    }
    (f, d)
}

#[test]
fn exact_filter_on_two_points() {
    let f = [0.0, 0.0, 1.0, 0.0];
    let out = gaussian_filter(&[2.0, 3.0], 1, &f, 2, &[1.0, 1.0], FilterBackend::Exact).unwrap();
    let k = (-0.5f64).exp();
    assert_eq!(out, vec![3.0 * k, 2.0 * k]);
}

#[test]
fn filter_rejects_bad_bandwidth() {
    let f = [0.0, 1.0];
    for backend in [FilterBackend::Exact, FilterBackend::Permutohedral, FilterBackend::GaussGrid] {
        assert!(gaussian_filter(&[1.0, 1.0], 1, &f, 1, &[0.0], backend).is_err());
        assert!(gaussian_filter(&[1.0, 1.0], 1, &f, 1, &[-1.0], backend).is_err());
    }
}

#[test]
fn tiny_bandwidth_gives_zero() {
    let f: Vec<f64> = (0..64).flat_map(|i| [(i / 8) as f64, (i % 8) as f64]).collect();
    let v = vec![1.0; 64];
    for backend in [FilterBackend::Exact, FilterBackend::Permutohedral, FilterBackend::GaussGrid] {
        let out = gaussian_filter(&v, 1, &f, 2, &[1e-3, 1e-3], backend).unwrap();
        assert!(out.iter().all(|x| x.abs() < 1e-12), "{backend:?}: {:?}", &out[..4]);
    }
}

#[test]
fn constant_field_on_32x32_matches_exact() {
    let f: Vec<f64> = (0..1024).flat_map(|i| [(i / 32) as f64, (i % 32) as f64]).collect();
    let v = vec![1.0; 1024];
    let exact = gaussian_filter(&v, 1, &f, 2, &[3.0, 3.0], FilterBackend::Exact).unwrap();
    // interior is flat up to the self-exclusion correction
    let centre = exact[16 * 32 + 16];
    let expected: f64 = (-16i32..16)
        .flat_map(|dy| (-16i32..16).map(move |dx| (dy, dx)))
        .filter(|&(dy, dx)| (dy, dx) != (0, 0))
        .map(|(dy, dx)| (-((dy * dy + dx * dx) as f64) / 18.0).exp())
        .sum();
    assert!((centre - expected).abs() < 1e-9);
    let grid = gaussian_filter(&v, 1, &f, 2, &[3.0, 3.0], FilterBackend::GaussGrid).unwrap();
    assert!(rel_l2(&grid, &exact) < 1e-2, "{}", rel_l2(&grid, &exact));
}

#[test]
fn grid_lattice_matches_exact_on_bilateral_48x48() {
    let (f, d) = bilateral_case(48, 3, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let v: Vec<f64> = (0..48 * 48 * 2).map(|_| rng.random_range(0.0..1.0)).collect();
    let sigma = [10.0, 10.0, 1.0, 1.0, 1.0];
    let exact = gaussian_filter(&v, 2, &f, d, &sigma, FilterBackend::Exact).unwrap();
    let grid = gaussian_filter(&v, 2, &f, d, &sigma, FilterBackend::GaussGrid).unwrap();
    let err = rel_l2(&grid, &exact);
    assert!(err < 1e-2, "relative L2 error {err}");
}

#[test]
fn permutohedral_is_close_to_exact() {
    let (f, d) = bilateral_case(24, 3, 3);
    let v = vec![1.0; 24 * 24];
    let sigma = [5.0, 5.0, 1.0, 1.0, 1.0];
    let exact = gaussian_filter(&v, 1, &f, d, &sigma, FilterBackend::Exact).unwrap();
    let lat = gaussian_filter(&v, 1, &f, d, &sigma, FilterBackend::Permutohedral).unwrap();
    assert!(rel_l2(&lat, &exact) < 0.25, "{}", rel_l2(&lat, &exact));
}

#[test]
fn unary_examples() {
    let p = ProbabilityMap::new(1, 3, vec![0.5, 1.0, 0.0]).unwrap();
    let u = build_unary(&p);
    assert!((u.phi[0][0] - std::f64::consts::LN_2).abs() < 1e-12);
    assert!((u.phi[0][1] - std::f64::consts::LN_2).abs() < 1e-12);
    assert!((u.phi[1][1] - 1e-7).abs() < 1e-12);
    assert!(u.phi.iter().flatten().all(|v| v.is_finite()));

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let vals: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..1.0)).collect();
    let u = build_unary(&ProbabilityMap::new(10, 10, vals.clone()).unwrap());
    for (p, phi) in vals.iter().zip(&u.phi) {
        assert!(((-phi[1]).exp() - p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)).abs() < 1e-9);
    }
}

/// Independent dense update straight from the energy definition.
fn naive_iteration(
    q: &[[f64; 2]],
    phi: &[[f64; 2]],
    h: usize,
    w: usize,
    spec: &[f64],
    dim: usize,
    cfg: &CrfConfig,
) -> Vec<[f64; 2]> {
    let n = h * w;
    let mut next = vec![[0.0; 2]; n];
    for i in 0..n {
        let (yi, xi) = ((i / w) as f64, (i % w) as f64);
        let mut m = [0.0f64; 2];
        for j in 0..n {
            if i == j {
                continue;
            }
            let (yj, xj) = ((j / w) as f64, (j % w) as f64);
            let dc = (yi - yj).powi(2) + (xi - xj).powi(2);
            let dd: f64 = (0..dim).map(|k| (spec[i * dim + k] - spec[j * dim + k]).powi(2)).sum();
            let kern = cfg.w1
                * (-dc / (2.0 * cfg.sigma_alpha.powi(2)) - dd / (2.0 * cfg.sigma_beta.powi(2))).exp()
                + cfg.w2 * (-dc / (2.0 * cfg.sigma_gamma.powi(2))).exp();
            for l in 0..2 {
                m[l] += kern * q[j][1 - l];
            }
        }
        let e0 = phi[i][0] + m[0];
        let e1 = phi[i][1] + m[1];
        let z = (-e0).exp() + (-e1).exp();
        next[i] = [(-e0).exp() / z, (-e1).exp() / z];
    }
    next
}

fn one_iteration_matches_naive(h: usize, w: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 3;
    let spec: Vec<f64> = (0..h * w * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let prob: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.05..0.95)).collect();
    let cfg = CrfConfig {
        w1: 1.3,
        w2: 0.7,
        sigma_alpha: 3.0,
        sigma_beta: 0.8,
        sigma_gamma: 1.5,
        iterations: 1,
        backend: FilterBackend::Exact,
        spectral: SpectralFeature::BandDifference,
    };
    let unary = build_unary(&ProbabilityMap::new(h, w, prob).unwrap());
    let feats = PairwiseFeatures::new(h, w, dim, spec.clone()).unwrap();
    let got = mean_field_infer(&unary, &feats, &cfg).unwrap();
    let q0: Vec<[f64; 2]> = unary.phi.iter().map(|p| softmax_neg(p[0], p[1])).collect();
    let want = naive_iteration(&q0, &unary.phi, h, w, &spec, dim, &cfg);
    for (a, b) in got.q.iter().zip(&want) {
        assert!((a[0] - b[0]).abs() < 1e-6 && (a[1] - b[1]).abs() < 1e-6, "{a:?} vs {b:?}");
    }
}

#[test]
fn one_iteration_matches_naive_2x2() {
    one_iteration_matches_naive(2, 2, 21);
}

#[test]
fn one_iteration_matches_naive_16x16() {
    one_iteration_matches_naive(16, 16, 22);
}

#[test]
fn zero_weights_keep_the_unary_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let prob: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
    let unary = build_unary(&ProbabilityMap::new(8, 8, prob).unwrap());
    let feats = PairwiseFeatures::new(8, 8, 1, vec![0.0; 64]).unwrap();
    let cfg = CrfConfig {
        w1: 0.0,
        w2: 0.0,
        ..CrfConfig::default()
    };
    let q = mean_field_infer(&unary, &feats, &cfg).unwrap();
    for (qi, p) in q.q.iter().zip(&unary.phi) {
        assert_eq!(*qi, softmax_neg(p[0], p[1]));
    }
}

#[test]
fn isolated_pixel_is_smoothed_away() {
    let (h, w) = (16, 16);
    let mut prob = vec![0.1; h * w];
    prob[8 * w + 8] = 0.9;
    let unary = build_unary(&ProbabilityMap::new(h, w, prob).unwrap());
    let feats = PairwiseFeatures::new(h, w, 1, vec![0.0; h * w]).unwrap();
    let cfg = CrfConfig {
        w1: 0.0,
        w2: 3.0,
        sigma_gamma: 1.5,
        iterations: 10,
        backend: FilterBackend::Exact,
        ..CrfConfig::default()
    };
    let q = mean_field_infer(&unary, &feats, &cfg).unwrap();
    assert_eq!(q.decisions().labels[8 * w + 8], 0);

    // the naive update run for the same ten rounds agrees
    let mut qn: Vec<[f64; 2]> = unary.phi.iter().map(|p| softmax_neg(p[0], p[1])).collect();
    for _ in 0..10 {
        qn = naive_iteration(&qn, &unary.phi, h, w, &feats.spectral, 1, &cfg);
    }
    assert!(qn[8 * w + 8][1] < 0.5);
}

fn square_scene(side: usize, seed: u64) -> (RasterPair, LabelMask, ProbabilityMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = side * side;
    let t1: Vec<f64> = (0..3 * n).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut t2 = t1.clone();
    let mut truth = vec![0u8; n];
    let (a, b) = (side / 4, side / 4 + side / 3);
    for y in a..b {
        for x in a..b {
            truth[y * side + x] = 1;
            for band in 0..3 {
                t2[band * n + y * side + x] += 3.0;
            }
        }
    }
    let mut prob: Vec<f64> = truth.iter().map(|&t| if t == 1 { 0.8 } else { 0.2 }).collect();
    for p in prob.iter_mut() {
        if rng.random_bool(0.05) {
            *p = 1.0 - *p;
        }
    }
    (
        RasterPair::new(Raster::new(3, side, side, t1).unwrap(), Raster::new(3, side, side, t2).unwrap()).unwrap(),
        LabelMask::new(side, side, truth).unwrap(),
        ProbabilityMap::new(side, side, prob).unwrap(),
    )
}

#[test]
fn zero_weight_refine_equals_threshold_and_is_deterministic() {
    let (pair, _, prob) = square_scene(24, 1);
    let cfg = CrfConfig {
        w1: 0.0,
        w2: 0.0,
        ..CrfConfig::default()
    };
    assert_eq!(refine(&prob, &pair, &cfg).unwrap(), prob.threshold());
    let cfg = CrfConfig::default();
    assert_eq!(refine(&prob, &pair, &cfg).unwrap(), refine(&prob, &pair, &cfg).unwrap());
}

#[test]
fn refine_improves_noisy_square() {
    let (pair, truth, prob) = square_scene(32, 5);
    let cfg = CrfConfig {
        w1: 1.0,
        w2: 1.0,
        sigma_alpha: 3.0,
        sigma_beta: 3.0,
        sigma_gamma: 1.0,
        ..CrfConfig::default()
    };
    let before = crate::metrics::evaluate(&prob.threshold().labels, &truth).unwrap().f1;
    let after = crate::metrics::evaluate(&refine(&prob, &pair, &cfg).unwrap().labels, &truth).unwrap().f1;
    assert!(after > before, "{after} <= {before}");
}

#[test]
fn grid_search_tie_and_closure() {
    let (pair, truth, _) = square_scene(16, 2);
    let perfect = ProbabilityMap::new(16, 16, truth.labels().iter().map(|&t| t as f64).collect()).unwrap();
    let scene = CrfScene {
        pair: &pair,
        prob: &perfect,
        truth: &truth,
    };
    let grid = CrfGrid {
        w1: vec![0.0, 0.01],
        w2: vec![0.01, 0.0],
        sigma_alpha: vec![3.0],
        sigma_beta: vec![1.0],
        sigma_gamma: vec![1.0],
        ..CrfGrid::default()
    };
    let res = grid_search_fit(&[scene], &grid).unwrap();
    assert_eq!(res.f1, 1.0);
    assert_eq!((res.config.w1, res.config.w2), (0.0, 0.0));
    assert_eq!(res.evaluated, 4);

    let empty = CrfGrid {
        w1: vec![],
        ..grid
    };
    let scene = CrfScene {
        pair: &pair,
        prob: &perfect,
        truth: &truth,
    };
    assert!(grid_search_fit(&[scene], &empty).is_err());
}

#[test]
fn grid_search_prefers_the_denoising_point() {
    let (pair, truth, prob) = square_scene(24, 7);
    let grid = CrfGrid {
        w1: vec![0.0],
        w2: vec![0.0, 0.5],
        sigma_alpha: vec![3.0],
        sigma_beta: vec![1.0],
        sigma_gamma: vec![1.0],
        backend: FilterBackend::Exact,
        ..CrfGrid::default()
    };
    let scene = CrfScene {
        pair: &pair,
        prob: &prob,
        truth: &truth,
    };
    let res = grid_search_fit(&[scene], &grid).unwrap();
    assert_eq!(res.config.w2, 0.5);
    assert!(grid.w2.contains(&res.config.w2) && grid.sigma_gamma.contains(&res.config.sigma_gamma));
}

#[test]
fn config_toml_round_trip() {
    let cfg = CrfConfig {
        w1: 5.0,
        backend: FilterBackend::GaussGrid,
        ..CrfConfig::default()
    };
    let text = cfg.to_toml_string();
    assert!(text.contains("backend = \"gauss_grid\""));
    assert_eq!(CrfConfig::from_toml_str(&text).unwrap(), cfg);
    assert_eq!(CrfConfig::from_toml_str("w1 = 2.0").unwrap().w1, 2.0);
    assert!(CrfConfig::from_toml_str("sigma_alpha = -1.0").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn marginals_stay_normalized(seed in 0u64..1000, w1 in 0.0f64..5.0, w2 in 0.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prob: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..1.0)).collect();
        let spec: Vec<f64> = (0..100).map(|_| rng.random_range(-2.0..2.0)).collect();
        let unary = build_unary(&ProbabilityMap::new(10, 10, prob).unwrap());
        let feats = PairwiseFeatures::new(10, 10, 1, spec).unwrap();
        for backend in [FilterBackend::Exact, FilterBackend::Permutohedral] {
            let cfg = CrfConfig { w1, w2, iterations: 3, backend, ..CrfConfig::default() };
            let q = mean_field_infer(&unary, &feats, &cfg).unwrap();
            for qi in &q.q {
                prop_assert!((qi[0] + qi[1] - 1.0).abs() < 1e-6);
                prop_assert!(qi.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn saturated_unary_with_zero_kernels_is_fixed(bits in proptest::collection::vec(0u8..2, 36)) {
        let prob = ProbabilityMap::new(6, 6, bits.iter().map(|&b| b as f64).collect()).unwrap();
        let t = Raster::new(1, 6, 6, (0..36).map(|i| i as f64).collect()).unwrap();
        let pair = RasterPair::new(t.clone(), t).unwrap();
        let cfg = CrfConfig { w1: 0.0, w2: 0.0, ..CrfConfig::default() };
        prop_assert_eq!(refine(&prob, &pair, &cfg).unwrap().labels, bits);
    }
}
