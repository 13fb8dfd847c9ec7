//! Forward and backward kernels over raw NCHW tensors. Convolutions run one
//! GEMM per image and pixel block through a small reused im2col buffer laid
//! out as `[cin * k * k, block]`.

use super::{Real, Tensor};

/// Target im2col buffer size in elements.
const COLS_BUDGET: usize = 1 << 18;

/// One row per kernel tap over an `h x w` image: 1 where the tap's source
/// pixel lies inside the image, else 0.
fn tap_masks<T: Real>(h: usize, w: usize, k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut masks = vec![T::zero(); k * k * hw];
    for tap in 0..k * k {
        let dy = (tap / k) as isize - pad;
        let dx = (tap % k) as isize - pad;
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = x as isize + dx;
                if sx >= 0 && sx < w as isize {
                    masks[tap * hw + y * w + x] = T::one();
                }
            }
        }
    }
    masks
}

/// Flat offset of a tap within an image of width `w`.
fn tap_offset(tap: usize, k: usize, w: usize) -> isize {
    let pad = (k / 2) as isize;
    ((tap / k) as isize - pad) * w as isize + (tap % k) as isize - pad
}

/// Sub-range of `[p0, p1)` whose shifted index `j + off` stays in `[0, hw)`.
fn shifted_range(p0: usize, p1: usize, hw: usize, off: isize) -> (usize, usize) {
    let lo = (p0 as isize).max(-off).min(p1 as isize) as usize;
    let hi = (p1 as isize).min(hw as isize - off).max(lo as isize) as usize;
    (lo, hi)
}

/// Pixel block width for a GEMM with `kk` reduction rows.
fn block_width(hw: usize, kk: usize) -> usize {
    hw.min((COLS_BUDGET / kk.max(1)).max(256))
}

/// Unfolds pixels `[p0, p1)` of one `[cin, h, w]` image into `cols`.
#[allow(clippy::too_many_arguments)]
fn unfold<T: Real>(img: &[T], cin: usize, hw: usize, w: usize, k: usize, masks: &[T], p0: usize, p1: usize, cols: &mut [T]) {
    let bw = p1 - p0;
    for ci in 0..cin {
        let src = &img[ci * hw..(ci + 1) * hw];
        for tap in 0..k * k {
            let off = tap_offset(tap, k, w);
            let row = &mut cols[(ci * k * k + tap) * bw..(ci * k * k + tap + 1) * bw];
            let (lo, hi) = shifted_range(p0, p1, hw, off);
            row[..lo - p0].fill(T::zero());
            row[hi - p0..].fill(T::zero());
            if lo == hi {
                continue;
            }
            let s = &src[(lo as isize + off) as usize..(hi as isize + off) as usize];
            let m = &masks[tap * hw + lo..tap * hw + hi];
            for ((d, &v), &mv) in row[lo - p0..hi - p0].iter_mut().zip(s).zip(m) {
                *d = v * mv;
            }
        }
    }
}

/// Adjoint of [`unfold`]: accumulates column gradients into `dimg`.
#[allow(clippy::too_many_arguments)]
fn fold<T: Real>(dcols: &[T], cin: usize, hw: usize, w: usize, k: usize, masks: &[T], p0: usize, p1: usize, dimg: &mut [T]) {
    let bw = p1 - p0;
    for ci in 0..cin {
        let dst = &mut dimg[ci * hw..(ci + 1) * hw];
        for tap in 0..k * k {
            let off = tap_offset(tap, k, w);
            let row = &dcols[(ci * k * k + tap) * bw..(ci * k * k + tap + 1) * bw];
            let (lo, hi) = shifted_range(p0, p1, hw, off);
            if lo == hi {
                continue;
            }
            let m = &masks[tap * hw + lo..tap * hw + hi];
            let d = &mut dst[(lo as isize + off) as usize..(hi as isize + off) as usize];
            for ((dv, &v), &mv) in d.iter_mut().zip(&row[lo - p0..hi - p0]).zip(m) {
                *dv += v * mv;
            }
        }
    }
}

/// Copies columns `[p0, p1)` of a row-major `rows x hw` matrix.
fn gather_cols<T: Real>(src: &[T], rows: usize, hw: usize, p0: usize, p1: usize, dst: &mut [T]) {
    let bw = p1 - p0;
    for r in 0..rows {
        dst[r * bw..(r + 1) * bw].copy_from_slice(&src[r * hw + p0..r * hw + p1]);
    }
}

/// NCHW -> `[c, n * h * w]`.
fn to_channel_major<T: Real>(x: &Tensor<T>) -> Vec<T> {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    if n == 1 {
        return x.data().to_vec();
    }
    let mut out = vec![T::zero(); n * c * hw];
    for b in 0..n {
        for ci in 0..c {
            let src = &x.data()[(b * c + ci) * hw..(b * c + ci + 1) * hw];
            out[ci * n * hw + b * hw..ci * n * hw + (b + 1) * hw].copy_from_slice(src);
        }
    }
    out
}

/// `[c, n * h * w]` -> NCHW.
fn from_channel_major<T: Real>(buf: Vec<T>, shape: [usize; 4]) -> Tensor<T> {
    let [n, c, h, w] = shape;
    if n == 1 {
        return Tensor::from_vec(shape, buf);
    }
    let hw = h * w;
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    for ci in 0..c {
        for b in 0..n {
            od[(b * c + ci) * hw..(b * c + ci + 1) * hw]
                .copy_from_slice(&buf[ci * n * hw + b * hw..ci * n * hw + (b + 1) * hw]);
        }
    }
    out
}

/// Stride-1 same-padded convolution. `weight` is `[cout, cin, k, k]`,
/// `bias` is `[1, cout, 1, 1]`.
pub(crate) fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Tensor<T> {
    let [n, cin, h, w] = x.shape();
    let [cout, _, k, _] = weight.shape();
    let hw = h * w;
    let kk = cin * k * k;
    let bw_max = block_width(hw, kk);
    let masks = tap_masks::<T>(h, w, k);
    let mut cols = vec![T::zero(); kk * bw_max];
    let mut tmp = vec![T::zero(); cout * bw_max];
    let mut out = Tensor::zeros([n, cout, h, w]);
    let od = out.data_mut();
    for b in 0..n {
        let img = &x.data()[b * cin * hw..(b + 1) * cin * hw];
        let oimg = &mut od[b * cout * hw..(b + 1) * cout * hw];
        for p0 in (0..hw).step_by(bw_max) {
            let p1 = (p0 + bw_max).min(hw);
            let bw = p1 - p0;
            let whole = bw == hw;
            let rhs: &[T] = if k == 1 && whole {
                img
            } else {
                unfold(img, cin, hw, w, k, &masks, p0, p1, &mut cols[..kk * bw]);
                &cols[..kk * bw]
            };
            let dst: &mut [T] = if whole { &mut *oimg } else { &mut tmp[..cout * bw] };
            for (co, row) in dst.chunks_mut(bw).enumerate() {
                row.fill(bias.data()[co]);
            }
            T::gemm(false, false, cout, bw, kk, T::one(), weight.data(), rhs, T::one(), dst);
            if !whole {
                for co in 0..cout {
                    oimg[co * hw + p0..co * hw + p1].copy_from_slice(&tmp[co * bw..(co + 1) * bw]);
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub x: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need: [bool; 3],
) -> ConvGrads<T> {
    let [n, cin, h, w] = x.shape();
    let [cout, _, k, _] = weight.shape();
    let hw = h * w;
    let kk = cin * k * k;
    let gd = grad_out.data();

    let bias = need[2].then(|| {
        let mut sums = vec![T::zero(); cout];
        for b in 0..n {
            for (co, s) in sums.iter_mut().enumerate() {
                let off = (b * cout + co) * hw;
                *s += gd[off..off + hw].iter().copied().sum::<T>();
            }
        }
        Tensor::from_vec([1, cout, 1, 1], sums)
    });

    if !need[0] && !need[1] {
        return ConvGrads {
            x: None,
            weight: None,
            bias,
        };
    }
    let bw_max = block_width(hw, kk.max(cout));
    let masks = tap_masks::<T>(h, w, k);
    let mut cols = vec![T::zero(); kk * bw_max];
    let mut gblk = vec![T::zero(); cout * bw_max];
    let mut dw = need[1].then(|| vec![T::zero(); cout * kk]);
    let mut dx = need[0].then(|| Tensor::zeros(x.shape()));
    for b in 0..n {
        let img = &x.data()[b * cin * hw..(b + 1) * cin * hw];
        let gimg = &gd[b * cout * hw..(b + 1) * cout * hw];
        for p0 in (0..hw).step_by(bw_max) {
            let p1 = (p0 + bw_max).min(hw);
            let bw = p1 - p0;
            let whole = bw == hw;
            let g: &[T] = if whole {
                gimg
            } else {
                gather_cols(gimg, cout, hw, p0, p1, &mut gblk[..cout * bw]);
                &gblk[..cout * bw]
            };
            if let Some(dw) = dw.as_mut() {
                let rhs: &[T] = if k == 1 && whole {
                    img
                } else {
                    if k == 1 {
                        gather_cols(img, cin, hw, p0, p1, &mut cols[..kk * bw]);
                    } else {
                        unfold(img, cin, hw, w, k, &masks, p0, p1, &mut cols[..kk * bw]);
                    }
                    &cols[..kk * bw]
                };
                T::gemm(false, true, cout, kk, bw, T::one(), g, rhs, T::one(), dw);
            }
            if let Some(dx) = dx.as_mut() {
                let dimg = &mut dx.data_mut()[b * cin * hw..(b + 1) * cin * hw];
                if k == 1 && whole {
                    T::gemm(true, false, kk, bw, cout, T::one(), weight.data(), g, T::one(), dimg);
                } else {
                    let dcols = &mut cols[..kk * bw];
                    T::gemm(true, false, kk, bw, cout, T::one(), weight.data(), g, T::zero(), dcols);
                    fold(dcols, cin, hw, w, k, &masks, p0, p1, dimg);
                }
            }
        }
    }

    ConvGrads {
        x: dx,
        weight: dw.map(|d| Tensor::from_vec(weight.shape(), d)),
        bias,
    }
}

/// 2x2 stride-2 transpose convolution. `weight` is `[cin, cout, 2, 2]`.
pub(crate) fn conv_transpose2x2_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Tensor<T> {
    let [n, cin, h, w] = x.shape();
    let cout = weight.shape()[1];
    let cols_w = n * h * w;
    let xc = to_channel_major(x);
    // rows of `taps` are (co, ky, kx)
    let mut taps = vec![T::zero(); cout * 4 * cols_w];
    T::gemm(
        true,
        false,
        cout * 4,
        cols_w,
        cin,
        T::one(),
        weight.data(),
        &xc,
        T::zero(),
        &mut taps,
    );
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros([n, cout, oh, ow]);
    let od = out.data_mut();
    for co in 0..cout {
        let bv = bias.data()[co];
        for tap in 0..4 {
            let (ky, kx) = (tap / 2, tap % 2);
            let row = &taps[(co * 4 + tap) * cols_w..(co * 4 + tap + 1) * cols_w];
            for b in 0..n {
                let base = (b * cout + co) * oh * ow;
                for y in 0..h {
                    let src = &row[b * h * w + y * w..b * h * w + (y + 1) * w];
                    let orow = base + (2 * y + ky) * ow + kx;
                    for (xi, &v) in src.iter().enumerate() {
                        od[orow + 2 * xi] = v + bv;
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv_transpose2x2_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need: [bool; 3],
) -> ConvGrads<T> {
    let [n, cin, h, w] = x.shape();
    let cout = weight.shape()[1];
    let cols_w = n * h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let gd = grad_out.data();
    let mut gtaps = vec![T::zero(); cout * 4 * cols_w];
    for co in 0..cout {
        for tap in 0..4 {
            let (ky, kx) = (tap / 2, tap % 2);
            let row = &mut gtaps[(co * 4 + tap) * cols_w..(co * 4 + tap + 1) * cols_w];
            for b in 0..n {
                let base = (b * cout + co) * oh * ow;
                for y in 0..h {
                    let dst = &mut row[b * h * w + y * w..b * h * w + (y + 1) * w];
                    let orow = base + (2 * y + ky) * ow + kx;
                    for (xi, d) in dst.iter_mut().enumerate() {
                        *d = gd[orow + 2 * xi];
                    }
                }
            }
        }
    }
    let bias = need[2].then(|| {
        let mut sums = vec![T::zero(); cout];
        for (co, s) in sums.iter_mut().enumerate() {
            *s = gtaps[co * 4 * cols_w..(co + 1) * 4 * cols_w]
                .iter()
                .copied()
                .sum();
        }
        Tensor::from_vec([1, cout, 1, 1], sums)
    });
    let weight_grad = need[1].then(|| {
        let xc = to_channel_major(x);
        let mut dw = vec![T::zero(); cin * cout * 4];
        T::gemm(
            false,
            true,
            cin,
            cout * 4,
            cols_w,
            T::one(),
            &xc,
            &gtaps,
            T::zero(),
            &mut dw,
        );
        Tensor::from_vec(weight.shape(), dw)
    });
    let x_grad = need[0].then(|| {
        let mut dx = vec![T::zero(); cin * cols_w];
        T::gemm(
            false,
            false,
            cin,
            cols_w,
            cout * 4,
            T::one(),
            weight.data(),
            &gtaps,
            T::zero(),
            &mut dx,
        );
        from_channel_major(dx, x.shape())
    });
    ConvGrads {
        x: x_grad,
        weight: weight_grad,
        bias,
    }
}

/// 2x2 stride-2 max pooling. Returns the output and, per output element, the
/// flat input index of the first maximum in scan order.
pub(crate) fn max_pool2x2<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut arg = vec![0u32; n * c * oh * ow];
    let xd = x.data();
    let od = out.data_mut();
    for plane in 0..n * c {
        let ib = plane * h * w;
        let ob = plane * oh * ow;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = ib + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ib + (2 * y + dy) * w + 2 * xx + dx;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                od[ob + y * ow + xx] = xd[best];
                arg[ob + y * ow + xx] = best as u32;
            }
        }
    }
    (out, arg)
}

/// 3x3 stride-1 max pooling; out-of-bounds taps are ignored (equivalent to
/// padding with negative infinity).
/// Keeps the earlier candidate on ties, so chaining candidates in scan
/// order yields the first maximum.
#[inline(always)]
fn take_greater<T: Real>(vals: &mut [T], idx: &mut [u32], cand: &[T], cand_idx: impl Iterator<Item = u32>) {
    for (((v, i), &c), ci) in vals.iter_mut().zip(idx.iter_mut()).zip(cand).zip(cand_idx) {
        if c > *v {
            *v = c;
            *i = ci;
        }
    }
}

pub(crate) fn max_pool3x3_same<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let mut out = Tensor::zeros([n, c, h, w]);
    let mut arg = vec![0u32; n * c * hw];
    let xd = x.data();
    let od = out.data_mut();
    // horizontal pass keeps the first maximum of each row window, the
    // vertical pass the first row; together this is the row-major first max
    let mut rv = vec![T::zero(); hw];
    let mut ri = vec![0u32; hw];
    for plane in 0..n * c {
        let base = plane * hw;
        let src = &xd[base..base + hw];
        for y in 0..h {
            let r = y * w;
            let row = &src[r..r + w];
            let (vo, io) = (&mut rv[r..r + w], &mut ri[r..r + w]);
            let first = (base + r) as u32;
            vo[0] = row[0];
            io[0] = first;
            vo[1..].copy_from_slice(&row[..w - 1]);
            for (k, i) in io[1..].iter_mut().enumerate() {
                *i = first + k as u32;
            }
            take_greater(&mut vo[1..], &mut io[1..], &row[1..], (1..w as u32).map(|k| first + k));
            take_greater(&mut vo[..w - 1], &mut io[..w - 1], &row[1..], (1..w as u32).map(|k| first + k));
        }
        let (o, a) = (&mut od[base..base + hw], &mut arg[base..base + hw]);
        for y in 0..h {
            let y0 = y.saturating_sub(1);
            let y1 = (y + 1).min(h - 1);
            let (ov, oi) = (&mut o[y * w..(y + 1) * w], &mut a[y * w..(y + 1) * w]);
            ov.copy_from_slice(&rv[y0 * w..(y0 + 1) * w]);
            oi.copy_from_slice(&ri[y0 * w..(y0 + 1) * w]);
            for yy in y0 + 1..=y1 {
                take_greater(ov, oi, &rv[yy * w..(yy + 1) * w], ri[yy * w..(yy + 1) * w].iter().copied());
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, wt: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let [n, cin, h, w] = x.shape();
        let [cout, _, k, _] = wt.shape();
        let p = (k / 2) as isize;
        let mut out = Tensor::zeros([n, cout, h, w]);
        for bi in 0..n {
            for co in 0..cout {
                for y in 0..h {
                    for xx in 0..w {
                        let mut s = b.data()[co];
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = y as isize + ky as isize - p;
                                    let sx = xx as isize + kx as isize - p;
                                    if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                                        s += wt.at(co, ci, ky, kx)
                                            * x.at(bi, ci, sy as usize, sx as usize);
                                    }
                                }
                            }
                        }
                        let i = out.index(bi, co, y, xx);
                        out.data_mut()[i] = s;
                    }
                }
            }
        }
        out
    }

    fn seq(shape: [usize; 4], scale: f64) -> Tensor<f64> {
        let len = shape.iter().product::<usize>();
        Tensor::from_vec(
            shape,
            (0..len).map(|i| ((i as f64 + 1.0) * scale).sin()).collect(),
        )
    }

    #[test]
    fn conv_matches_direct_loop_for_each_kernel_size() {
        for k in [1, 3, 5] {
            let x = seq([2, 3, 6, 5], 0.7);
            let wt = seq([4, 3, k, k], 0.3);
            let b = seq([1, 4, 1, 1], 1.1);
            let got = conv2d_forward(&x, &wt, &b);
            let want = naive_conv(&x, &wt, &b);
            for (g, w) in got.data().iter().zip(want.data()) {
                assert!((g - w).abs() < 1e-12, "k={k}");
            }
        }
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn blocked_conv_matches_direct_loop_and_its_adjoint() {
        // both shapes exceed the im2col budget, so pixels are processed in blocks
        for (cin, k) in [(32, 5), (600, 1)] {
            let x = seq([2, cin, 24, 24], 0.37);
            let wt = seq([2, cin, k, k], 0.11);
            let b = seq([1, 2, 1, 1], 1.3);
            assert!(block_width(576, cin * k * k) < 576);
            let y = conv2d_forward(&x, &wt, &b);
            let want = naive_conv(&x, &wt, &b);
            for (g, w) in y.data().iter().zip(want.data()) {
                assert!((g - w).abs() < 1e-9, "k={k}");
            }
            let g = seq(y.shape(), 0.53);
            let grads = conv2d_backward(&x, &wt, &g, [true, true, true]);
            let lin: Vec<f64> = y
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| v - b.data()[(i / 576) % 2])
                .collect();
            let lhs = dot(&lin, g.data());
            let scale = lhs.abs().max(1.0);
            assert!((lhs - dot(x.data(), grads.x.unwrap().data())).abs() < 1e-9 * scale);
            assert!((lhs - dot(wt.data(), grads.weight.unwrap().data())).abs() < 1e-9 * scale);
            let db = grads.bias.unwrap();
            for co in 0..2 {
                let s: f64 = (0..2).map(|n| g.data()[(n * 2 + co) * 576..(n * 2 + co + 1) * 576].iter().sum::<f64>()).sum();
                assert!((db.data()[co] - s).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pool3_matches_first_max_scan() {
        let (h, w) = (7, 9);
        let vals: Vec<f64> = (0..2 * h * w).map(|i| ((i * 37) % 5) as f64).collect();
        let x = Tensor::from_vec([1, 2, h, w], vals.clone());
        let (out, arg) = max_pool3x3_same(&x);
        for plane in 0..2 {
            for y in 0..h {
                for xx in 0..w {
                    let mut best = None::<usize>;
                    for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                        for xc in xx.saturating_sub(1)..=(xx + 1).min(w - 1) {
                            let idx = plane * h * w + yy * w + xc;
                            if best.is_none_or(|b| vals[idx] > vals[b]) {
                                best = Some(idx);
                            }
                        }
                    }
                    let o = plane * h * w + y * w + xx;
                    assert_eq!(arg[o] as usize, best.unwrap());
                    assert_eq!(out.data()[o], vals[best.unwrap()]);
                }
            }
        }
    }

    #[test]
    fn transpose_conv_places_taps_on_2x2_blocks() {
        let x = Tensor::from_vec([1, 1, 1, 2], vec![2.0, -1.0]);
        let wt = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec([1, 1, 1, 1], vec![0.5]);
        let out = conv_transpose2x2_forward(&x, &wt, &b);
        assert_eq!(out.shape(), [1, 1, 2, 4]);
        assert_eq!(
            out.data(),
            &[2.5, 4.5, -0.5, -1.5, 6.5, 8.5, -2.5, -3.5]
        );
    }

    #[test]
    fn pool3_ties_pick_first_in_scan_order() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0f64, 1.0, 1.0, 1.0]);
        let (_, arg) = max_pool3x3_same(&x);
        assert_eq!(arg, vec![0, 0, 0, 0]);
    }
}
