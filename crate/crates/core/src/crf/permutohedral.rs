//! Permutohedral lattice: barycentric splat onto the enclosing simplex,
//! `[1/2, 1, 1/2]` blur along each of the d+1 lattice directions, slice.
//! Features are pre-scaled so the target kernel is `exp(-|fi - fj|^2 / 2)`.

use std::collections::HashMap;
use std::f64::consts::PI;

pub(crate) const MAX_DIM: usize = 8;

type Key = [i32; MAX_DIM];

pub(crate) struct Permutohedral {
    n: usize,
    d: usize,
    vertices: usize,
    /// `n * (d + 1)` vertex ids and barycentric weights.
    offsets: Vec<u32>,
    weights: Vec<f64>,
    /// Per direction, per vertex: the two blur neighbours (`vertices` when absent).
    neighbors: Vec<[u32; 2]>,
    /// The lattice's own weight of each point on itself.
    self_weight: Vec<f64>,
    gain: f64,
}

impl Permutohedral {
    /// `features` holds `n` rows of `d` scaled coordinates.
    pub(crate) fn new(features: &[f64], d: usize) -> Self {
        assert!((1..=MAX_DIM).contains(&d));
        let n = features.len() / d;
        let inv_std = (2.0f64 / 3.0).sqrt() * (d + 1) as f64;
        let scale: Vec<f64> = (0..d)
            .map(|i| inv_std / (((i + 1) * (i + 2)) as f64).sqrt())
            .collect();

        let mut table: HashMap<Key, u32> = HashMap::new();
        let mut keys: Vec<Key> = Vec::new();
        let mut offsets = Vec::with_capacity(n * (d + 1));
        let mut weights = Vec::with_capacity(n * (d + 1));
        let mut elevated = vec![0.0; d + 1];
        let mut rem0 = vec![0i32; d + 1];
        let mut rank = vec![0i32; d + 1];
        let mut bary = vec![0.0; d + 2];
        let di = d as i32;

        for f in features.chunks_exact(d) {
            let mut sm = 0.0;
            for j in (1..=d).rev() {
                let cf = f[j - 1] * scale[j - 1];
                elevated[j] = sm - j as f64 * cf;
                sm += cf;
            }
            elevated[0] = sm;

            let mut sum = 0;
            for i in 0..=d {
                let rd = (elevated[i] / (d + 1) as f64).round() as i32;
                rem0[i] = rd * (di + 1);
                sum += rd;
            }
            rank.iter_mut().for_each(|r| *r = 0);
            for i in 0..d {
                let dv = elevated[i] - rem0[i] as f64;
                for j in i + 1..=d {
                    if dv < elevated[j] - rem0[j] as f64 {
                        rank[i] += 1;
                    } else {
                        rank[j] += 1;
                    }
                }
            }
            for i in 0..=d {
                rank[i] += sum;
                if rank[i] < 0 {
                    rank[i] += di + 1;
                    rem0[i] += di + 1;
                } else if rank[i] > di {
                    rank[i] -= di + 1;
                    rem0[i] -= di + 1;
                }
            }
            bary.iter_mut().for_each(|b| *b = 0.0);
            for i in 0..=d {
                let v = (elevated[i] - rem0[i] as f64) / (d + 1) as f64;
                bary[(di - rank[i]) as usize] += v;
                bary[(di - rank[i] + 1) as usize] -= v;
            }
            bary[0] += 1.0 + bary[d + 1];

            for r in 0..=d {
                let mut key = [0i32; MAX_DIM];
                for i in 0..d {
                    key[i] = rem0[i] + r as i32 - if rank[i] > di - r as i32 { di + 1 } else { 0 };
                }
                let next = keys.len() as u32;
                let id = *table.entry(key).or_insert_with(|| {
                    keys.push(key);
                    next
                });
                offsets.push(id);
                weights.push(bary[r]);
            }
        }

        let m = keys.len();
        let mut neighbors = Vec::with_capacity((d + 1) * m);
        for j in 0..=d {
            for key in &keys {
                let (mut lo, mut hi) = (*key, *key);
                for k in 0..d {
                    lo[k] += 1;
                    hi[k] -= 1;
                }
                if j < d {
                    lo[j] = key[j] - di;
                    hi[j] = key[j] + di;
                }
                let find = |k: &Key| table.get(k).copied().unwrap_or(m as u32);
                neighbors.push([find(&lo), find(&hi)]);
            }
        }

        let mut lat = Permutohedral {
            n,
            d,
            vertices: m,
            offsets,
            weights,
            neighbors,
            self_weight: Vec::new(),
            gain: lattice_gain(d),
        };
        lat.self_weight = (0..n).map(|i| lat.trace_self(i, &keys, &table)).collect();
        lat
    }

    /// Weight of point `i` on itself through splat, blur and slice, found by
    /// following every blur path between two of its simplex vertices.
    fn trace_self(&self, i: usize, keys: &[Key], table: &HashMap<Key, u32>) -> f64 {
        let d = self.d;
        let di = d as i32;
        let verts = &self.offsets[i * (d + 1)..(i + 1) * (d + 1)];
        let bary = &self.weights[i * (d + 1)..(i + 1) * (d + 1)];
        let full = |k: &Key| {
            let mut f = [0i32; MAX_DIM + 1];
            f[..d].copy_from_slice(&k[..d]);
            f[d] = -k[..d].iter().sum::<i32>();
            f
        };
        let mut total = 0.0;
        for (a, &va) in verts.iter().enumerate() {
            for (b, &vb) in verts.iter().enumerate() {
                let (ka, kb) = (full(&keys[va as usize]), full(&keys[vb as usize]));
                // displacement kb - ka = sum_j s_j u_j with u_j = (d+1) e_j - 1
                let diff: Vec<i32> = (0..=d).map(|k| kb[k] - ka[k]).collect();
                // so s_k = (diff_k + S) / (d+1) where S = sum_j s_j
                let mut weight = 0.0;
                for total_steps in -(di + 1)..=di + 1 {
                    if diff.iter().any(|&x| (x + total_steps).rem_euclid(di + 1) != 0) {
                        continue;
                    }
                    let steps: Vec<i32> = diff.iter().map(|&x| (x + total_steps) / (di + 1)).collect();
                    if steps.iter().any(|s| s.abs() > 1) || steps.iter().sum::<i32>() != total_steps {
                        continue;
                    }
                    let mut cur = keys[va as usize];
                    let mut ok = true;
                    let mut w = 1.0;
                    for (j, &s) in steps.iter().enumerate() {
                        if s == 0 {
                            continue;
                        }
                        for k in 0..d {
                            cur[k] -= s;
                        }
                        if j < d {
                            cur[j] += s * (di + 1);
                        }
                        if !table.contains_key(&cur) {
                            ok = false;
                            break;
                        }
                        w *= 0.5;
                    }
                    if ok {
                        weight += w;
                    }
                }
                total += bary[a] * bary[b] * weight;
            }
        }
        total
    }

    /// `values` is `n * vd`; returns the self-excluded filtered field.
    pub(crate) fn apply(&self, values: &[f64], vd: usize) -> Vec<f64> {
        let (n, d, m) = (self.n, self.d, self.vertices);
        let mut lat = vec![0.0; (m + 1) * vd];
        for i in 0..n {
            let v = &values[i * vd..(i + 1) * vd];
            for r in 0..=d {
                let o = self.offsets[i * (d + 1) + r] as usize;
                let w = self.weights[i * (d + 1) + r];
                for c in 0..vd {
                    lat[o * vd + c] += w * v[c];
                }
            }
        }
        let mut next = vec![0.0; (m + 1) * vd];
        for j in 0..=d {
            let nb = &self.neighbors[j * m..(j + 1) * m];
            for (v, &[lo, hi]) in nb.iter().enumerate() {
                let (lo, hi) = (lo as usize, hi as usize);
                for c in 0..vd {
                    next[v * vd + c] = lat[v * vd + c] + 0.5 * (lat[lo * vd + c] + lat[hi * vd + c]);
                }
            }
            std::mem::swap(&mut lat, &mut next);
            lat[m * vd..].iter_mut().for_each(|x| *x = 0.0);
        }
        let mut out = vec![0.0; n * vd];
        for i in 0..n {
            for c in 0..vd {
                let mut acc = 0.0;
                for r in 0..=d {
                    let o = self.offsets[i * (d + 1) + r] as usize;
                    acc += self.weights[i * (d + 1) + r] * lat[o * vd + c];
                }
                out[i * vd + c] = self.gain * (acc - self.self_weight[i] * values[i * vd + c]);
            }
        }
        out
    }
}

/// Ratio of the exact kernel's integral to the lattice kernel's integral:
/// `(2 pi)^{d/2}` against `2^{d+1}` blur mass times the volume per vertex.
fn lattice_gain(d: usize) -> f64 {
    let df = d as f64;
    let cell = (df + 1.0).powf(-0.5) * 1.5f64.powf(df / 2.0);
    (2.0 * PI).powf(df / 2.0) / (2.0f64.powi(d as i32 + 1) * cell)
}
