//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::Tensor;
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor of the relative error, `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Elements probed per input tensor; larger tensors are subsampled.
    pub max_probes_per_input: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-3,
            floor: 1e-6,
            max_probes_per_input: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub probes: usize,
    /// Probes where every tried step crossed a non-differentiable point.
    pub skipped_kinks: usize,
    /// (input, element, analytic, numeric) of the worst probe.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol && self.probes > 0
    }
}

/// Checks the gradient of `f` with respect to every tensor in `inputs`.
///
/// `f` receives the inputs as differentiable leaves and may return a tensor
/// of any shape; non-scalar outputs are projected with fixed random weights.
/// Must be deterministic: any randomness inside `f` has to be reseeded per call.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut coeffs: Option<Vec<f64>> = None;
    let mut eval = |vals: &[Tensor<f64>], need_grad: bool| -> Result<(Graph<f64>, Var, Vec<Var>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals
            .iter()
            .map(|t| {
                if need_grad {
                    g.leaf(t.clone())
                } else {
                    g.input(t.clone())
                }
            })
            .collect();
        let out = f(&mut g, &vars)?;
        let n = g.value(out).len();
        let c = coeffs
            .get_or_insert_with(|| {
                let mut r = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
                (0..n).map(|_| r.random_range(0.5..1.5)).collect()
            })
            .clone();
        let s = g.weighted_sum(out, &c)?;
        Ok((g, s, vars))
    };

    let (g0, s0, vars) = eval(inputs, true)?;
    let base_sig = g0.kink_signature();
    let grads = g0.backward(s0)?;
    let analytic: Vec<Tensor<f64>> = inputs
        .iter()
        .zip(&vars)
        .map(|(t, &v)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(g0);

    let mut report = GradCheckReport::default();
    let mut probe_vals = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        let picks: Vec<usize> = if t.len() <= cfg.max_probes_per_input {
            (0..t.len()).collect()
        } else {
            let mut v = index::sample(&mut rng, t.len(), cfg.max_probes_per_input).into_vec();
            v.sort_unstable();
            v
        };
        for ei in picks {
            let orig = t.data()[ei];
            let mut h = cfg.step;
            let mut numeric = None;
            for _ in 0..4 {
                // five-point stencil
                let mut f = [0.0; 4];
                let mut smooth = true;
                for (slot, k) in f.iter_mut().zip([2.0, 1.0, -1.0, -2.0]) {
                    probe_vals[ti].data_mut()[ei] = orig + k * h;
                    let (gk, sk, _) = eval(&probe_vals, false)?;
                    smooth &= gk.kink_signature() == base_sig;
                    *slot = gk.value(sk).data()[0];
                }
                if smooth {
                    numeric = Some((-f[0] + 8.0 * f[1] - 8.0 * f[2] + f[3]) / (12.0 * h));
                    break;
                }
                h *= 0.1;
            }
            probe_vals[ti].data_mut()[ei] = orig;
            let Some(n) = numeric else {
                report.skipped_kinks += 1;
                continue;
            };
            let a = analytic[ti].data()[ei];
            let abs = (a - n).abs();
            let rel = abs / a.abs().max(n.abs()).max(cfg.floor);
            report.probes += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((ti, ei, a, n));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mode;

    fn rand_tensor(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect())
    }

    fn check<F>(f: F, inputs: &[Tensor<f64>]) -> GradCheckReport
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let r = grad_check(f, inputs, &GradCheckConfig::default()).unwrap();
        assert!(r.probes > 0);
        r
    }

    #[test]
    fn conv2d_all_kernel_sizes() {
        for (k, step) in [(1, 1e-4), (3, 1e-4), (5, 1e-4)] {
            let x = rand_tensor([1, 2, 5, 5], 1);
            let w = rand_tensor([3, 2, k, k], 2);
            let b = rand_tensor([1, 3, 1, 1], 3);
            let cfg = GradCheckConfig {
                step,
                ..Default::default()
            };
            let r = grad_check(|g, v| g.conv2d(v[0], v[1], v[2]), &[x, w, b], &cfg).unwrap();
            assert!(r.max_rel_err < 1e-4, "k={k}: {r:?}");
        }
    }

    #[test]
    fn transpose_conv() {
        let x = rand_tensor([2, 3, 3, 4], 4);
        let w = rand_tensor([3, 2, 2, 2], 5);
        let b = rand_tensor([1, 2, 1, 1], 6);
        let r = check(|g, v| g.conv_transpose2x2(v[0], v[1], v[2]), &[x, w, b]);
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn pooling_and_gap() {
        let x = rand_tensor([2, 2, 6, 6], 7);
        let r = check(|g, v| g.max_pool2x2(v[0]), std::slice::from_ref(&x));
        assert!(r.max_rel_err < 1e-4, "{r:?}");
        let r = check(|g, v| Ok(g.max_pool3x3_same(v[0])), std::slice::from_ref(&x));
        assert!(r.max_rel_err < 1e-4, "{r:?}");
        let r = check(|g, v| Ok(g.global_avg_pool(v[0])), &[x]);
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn pointwise_ops() {
        let a = rand_tensor([1, 3, 4, 4], 8);
        let b = rand_tensor([1, 3, 4, 4], 9);
        let r = check(|g, v| g.abs_diff(v[0], v[1]), &[a.clone(), b.clone()]);
        assert!(r.max_rel_err < 1e-4, "{r:?}");
        let r = check(|g, v| Ok(g.relu(v[0])), std::slice::from_ref(&a));
        assert!(r.max_rel_err < 1e-4, "{r:?}");
        let r = check(|g, v| g.concat(&[v[0], v[1]]), &[a.clone(), b]);
        assert!(r.max_rel_err < 1e-4, "{r:?}");
        let r = check(|g, v| g.crop(v[0], 3, 2), &[a]);
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn sigmoid_at_reference_points() {
        let x = Tensor::from_vec([1, 1, 1, 3], vec![-2.0, 0.0, 3.0]);
        let r = check(|g, v| Ok(g.sigmoid(v[0])), &[x]);
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn dropout_with_fixed_mask() {
        let x = rand_tensor([1, 2, 4, 4], 10);
        let r = check(
            |g, v| {
                let mut rng = ChaCha8Rng::seed_from_u64(42);
                g.dropout(v[0], 0.3, Mode::Train, &mut rng)
            },
            &[x],
        );
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn wbce_loss() {
        let mut r0 = ChaCha8Rng::seed_from_u64(12);
        let y = Tensor::from_vec([1, 1, 3, 3], (0..9).map(|_| r0.random_range(0.05..0.95)).collect());
        let labels: Vec<f64> = (0..9).map(|i| (i % 2) as f64).collect();
        let valid: Vec<bool> = (0..9).map(|i| i != 4).collect();
        let r = check(|g, v| g.wbce(v[0], &labels, Some(&valid), 3.0), &[y]);
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn linear_layer_is_exact() {
        // A linear layer is a 1x1 convolution over a 1x1 plane.
        let x = rand_tensor([4, 6, 1, 1], 13);
        let w = rand_tensor([3, 6, 1, 1], 14);
        let b = rand_tensor([1, 3, 1, 1], 15);
        let r = check(|g, v| g.conv2d(v[0], v[1], v[2]), &[x, w, b]);
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = rand_tensor([1, 1, 3, 3], 16);
        let r = check(
            |g, v| {
                // multiplying by a zero weight keeps x on the tape
                let w = g.input(Tensor::zeros([1, 1, 1, 1]));
                let b = g.input(Tensor::full([1, 1, 1, 1], 2.0));
                g.conv2d(v[0], w, b)
            },
            &[x],
        );
        assert!(r.max_abs_err < 1e-8, "{r:?}");
    }
}
