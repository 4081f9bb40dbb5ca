//! Layer kernels over flat channels-last buffers.
//!
//! Activations are laid out `[batch, time, channels]`. Each layer stores the
//! offsets of its parameters inside the flat parameter vector; gradients are
//! accumulated into a buffer with the same layout.

use super::scalar::Real;

/// Fully connected layer `y = x W + b`, `W` stored `[inp, out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn forward<T: Real>(&self, p: &[T], x: &[T], rows: usize) -> Vec<T> {
        let mut y = Vec::with_capacity(rows * self.out);
        let bias = &p[self.b..self.b + self.out];
        for _ in 0..rows {
            y.extend_from_slice(bias);
        }
        T::gemm(rows, self.inp, self.out, x, false, &p[self.w..self.w + self.inp * self.out], false, T::one(), &mut y);
        y
    }

    /// Accumulates parameter gradients into `g` and returns `dx`.
    pub fn backward<T: Real>(&self, p: &[T], x: &[T], dy: &[T], rows: usize, g: &mut [T]) -> Vec<T> {
        let (inp, out) = (self.inp, self.out);
        T::gemm(inp, rows, out, x, true, dy, false, T::one(), &mut g[self.w..self.w + inp * out]);
        let gb = &mut g[self.b..self.b + out];
        for r in dy.chunks_exact(out) {
            for (a, d) in gb.iter_mut().zip(r) {
                *a += *d;
            }
        }
        let mut dx = vec![T::zero(); rows * inp];
        T::gemm(rows, out, inp, dy, false, &p[self.w..self.w + inp * out], true, T::zero(), &mut dx);
        dx
    }
}

/// Same-padded temporal convolution, `W` stored `[kernel * cin, cout]`
/// with the kernel offset as the slow index.
#[derive(Debug, Clone, Copy)]
pub struct Conv1d {
    pub w: usize,
    pub b: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl Conv1d {
    fn im2col<T: Real>(&self, x: &[T], batch: usize, len: usize) -> Vec<T> {
        let (cin, k) = (self.cin, self.kernel);
        let pad = k / 2;
        let width = k * cin;
        let mut col = vec![T::zero(); batch * len * width];
        for b in 0..batch {
            for t in 0..len {
                let row = &mut col[(b * len + t) * width..(b * len + t + 1) * width];
                for j in 0..k {
                    let src = t as isize + j as isize - pad as isize;
                    if src < 0 || src >= len as isize {
                        continue;
                    }
                    let s = (b * len + src as usize) * cin;
                    row[j * cin..(j + 1) * cin].copy_from_slice(&x[s..s + cin]);
                }
            }
        }
        col
    }

    /// Returns the output and the unfolded input needed by [`Conv1d::backward`].
    pub fn forward<T: Real>(&self, p: &[T], x: &[T], batch: usize, len: usize) -> (Vec<T>, Vec<T>) {
        let col = if self.kernel == 1 {
            x.to_vec()
        } else {
            self.im2col(x, batch, len)
        };
        let rows = batch * len;
        let mut y = Vec::with_capacity(rows * self.cout);
        let bias = &p[self.b..self.b + self.cout];
        for _ in 0..rows {
            y.extend_from_slice(bias);
        }
        let width = self.kernel * self.cin;
        T::gemm(rows, width, self.cout, &col, false, &p[self.w..self.w + width * self.cout], false, T::one(), &mut y);
        (y, col)
    }

    pub fn backward<T: Real>(
        &self,
        p: &[T],
        col: &[T],
        dy: &[T],
        batch: usize,
        len: usize,
        g: &mut [T],
        need_dx: bool,
    ) -> Vec<T> {
        let rows = batch * len;
        let (cin, cout, k) = (self.cin, self.cout, self.kernel);
        let width = k * cin;
        T::gemm(width, rows, cout, col, true, dy, false, T::one(), &mut g[self.w..self.w + width * cout]);
        let gb = &mut g[self.b..self.b + cout];
        for r in dy.chunks_exact(cout) {
            for (a, d) in gb.iter_mut().zip(r) {
                *a += *d;
            }
        }
        if !need_dx {
            return Vec::new();
        }
        let mut dcol = vec![T::zero(); rows * width];
        T::gemm(rows, cout, width, dy, false, &p[self.w..self.w + width * cout], true, T::zero(), &mut dcol);
        if k == 1 {
            return dcol;
        }
        let pad = k / 2;
        let mut dx = vec![T::zero(); rows * cin];
        for b in 0..batch {
            for t in 0..len {
                let row = &dcol[(b * len + t) * width..(b * len + t + 1) * width];
                for j in 0..k {
                    let dst = t as isize + j as isize - pad as isize;
                    if dst < 0 || dst >= len as isize {
                        continue;
                    }
                    let d = (b * len + dst as usize) * cin;
                    for (o, v) in dx[d..d + cin].iter_mut().zip(&row[j * cin..(j + 1) * cin]) {
                        *o += *v;
                    }
                }
            }
        }
        dx
    }
}

/// Group normalization over `(time, channels-in-group)` per sample.
///
/// The per-channel scale is stored at `offset`, the shift right after it.
#[derive(Debug, Clone, Copy)]
pub struct GroupNorm {
    pub offset: usize,
    pub channels: usize,
    pub groups: usize,
}

pub const NORM_EPS: f64 = 1e-5;

pub struct NormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

impl GroupNorm {
    pub fn forward<T: Real>(&self, p: &[T], x: &[T], batch: usize, len: usize) -> (Vec<T>, NormCache<T>) {
        let (c, g) = (self.channels, self.groups);
        let cg = c / g;
        let n = T::of((len * cg) as f64);
        let eps = T::of(NORM_EPS);
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); batch * g];
        for b in 0..batch {
            let xs = &x[b * len * c..(b + 1) * len * c];
            let mut sum = vec![T::zero(); g];
            let mut sq = vec![T::zero(); g];
            for r in xs.chunks_exact(c) {
                for (gi, grp) in r.chunks_exact(cg).enumerate() {
                    for &v in grp {
                        sum[gi] += v;
                    }
                }
            }
            let mean: Vec<T> = sum.iter().map(|s| *s / n).collect();
            for r in xs.chunks_exact(c) {
                for (gi, grp) in r.chunks_exact(cg).enumerate() {
                    for &v in grp {
                        let d = v - mean[gi];
                        sq[gi] += d * d;
                    }
                }
            }
            for gi in 0..g {
                inv_std[b * g + gi] = T::one() / (sq[gi] / n + eps).sqrt();
            }
            let xh = &mut xhat[b * len * c..(b + 1) * len * c];
            for (ro, ri) in xh.chunks_exact_mut(c).zip(xs.chunks_exact(c)) {
                for ch in 0..c {
                    let gi = ch / cg;
                    ro[ch] = (ri[ch] - mean[gi]) * inv_std[b * g + gi];
                }
            }
        }
        let (gamma, beta) = p[self.offset..self.offset + 2 * c].split_at(c);
        let mut y = xhat.clone();
        for r in y.chunks_exact_mut(c) {
            for ch in 0..c {
                r[ch] = r[ch] * gamma[ch] + beta[ch];
            }
        }
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward<T: Real>(
        &self,
        p: &[T],
        cache: &NormCache<T>,
        dy: &[T],
        batch: usize,
        len: usize,
        g: &mut [T],
    ) -> Vec<T> {
        let (c, groups) = (self.channels, self.groups);
        let cg = c / groups;
        let n = T::of((len * cg) as f64);
        {
            let (dgamma, dbeta) = g[self.offset..self.offset + 2 * c].split_at_mut(c);
            for (rd, rx) in dy.chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
                for ch in 0..c {
                    dgamma[ch] += rd[ch] * rx[ch];
                    dbeta[ch] += rd[ch];
                }
            }
        }
        let gamma = &p[self.offset..self.offset + c];
        let mut dx = vec![T::zero(); dy.len()];
        for b in 0..batch {
            let span = b * len * c..(b + 1) * len * c;
            let (dys, xh) = (&dy[span.clone()], &cache.xhat[span.clone()]);
            let mut s1 = vec![T::zero(); groups];
            let mut s2 = vec![T::zero(); groups];
            for (rd, rx) in dys.chunks_exact(c).zip(xh.chunks_exact(c)) {
                for ch in 0..c {
                    let dxh = rd[ch] * gamma[ch];
                    s1[ch / cg] += dxh;
                    s2[ch / cg] += dxh * rx[ch];
                }
            }
            let out = &mut dx[span];
            for ((ro, rd), rx) in out.chunks_exact_mut(c).zip(dys.chunks_exact(c)).zip(xh.chunks_exact(c)) {
                for ch in 0..c {
                    let gi = ch / cg;
                    let dxh = rd[ch] * gamma[ch];
                    ro[ch] = cache.inv_std[b * groups + gi] / n * (n * dxh - s1[gi] - rx[ch] * s2[gi]);
                }
            }
        }
        dx
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Swish / SiLU activation `x * sigmoid(x)`.
pub fn silu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// Gradient through [`silu`] given the pre-activation input.
pub fn silu_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let s = sigmoid(v);
            d * s * (T::one() + v * (T::one() - s))
        })
        .collect()
}

/// Feature-wise affine modulation `h * (1 + scale) + shift`, with
/// `(scale, shift)` given per sample as a `[batch, 2 * channels]` buffer.
pub fn film<T: Real>(h: &[T], mods: &[T], batch: usize, len: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); h.len()];
    for b in 0..batch {
        let m = &mods[b * 2 * c..(b + 1) * 2 * c];
        let (scale, shift) = m.split_at(c);
        let span = b * len * c..(b + 1) * len * c;
        for (ro, ri) in out[span.clone()].chunks_exact_mut(c).zip(h[span].chunks_exact(c)) {
            for ch in 0..c {
                ro[ch] = ri[ch] * (T::one() + scale[ch]) + shift[ch];
            }
        }
    }
    out
}

/// Returns `(dh, dmods)`.
pub fn film_backward<T: Real>(h: &[T], mods: &[T], dy: &[T], batch: usize, len: usize, c: usize) -> (Vec<T>, Vec<T>) {
    let mut dh = vec![T::zero(); h.len()];
    let mut dm = vec![T::zero(); mods.len()];
    for b in 0..batch {
        let m = &mods[b * 2 * c..(b + 1) * 2 * c];
        let scale = &m[..c];
        let span = b * len * c..(b + 1) * len * c;
        let dmb = &mut dm[b * 2 * c..(b + 1) * 2 * c];
        for ((rdh, rd), rh) in dh[span.clone()]
            .chunks_exact_mut(c)
            .zip(dy[span.clone()].chunks_exact(c))
            .zip(h[span].chunks_exact(c))
        {
            for ch in 0..c {
                rdh[ch] = rd[ch] * (T::one() + scale[ch]);
                dmb[ch] += rd[ch] * rh[ch];
                dmb[c + ch] += rd[ch];
            }
        }
    }
    (dh, dm)
}

/// Sinusoidal embedding of integer diffusion levels.
pub fn level_embedding<T: Real>(levels: &[usize], dim: usize) -> Vec<T> {
    let half = dim / 2;
    let denom = (half.max(2) - 1) as f64;
    let mut out = Vec::with_capacity(levels.len() * dim);
    for &k in levels {
        let kf = k as f64;
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / denom).exp();
            out.push(T::of((kf * freq).sin()));
        }
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / denom).exp();
            out.push(T::of((kf * freq).cos()));
        }
        for _ in 2 * half..dim {
            out.push(T::zero());
        }
    }
    out
}
