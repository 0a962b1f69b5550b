//! Raw slice kernels behind the tape primitives.

use alloc::vec;
use alloc::vec::Vec;

/// `out[m,n] += a[m,k] · b[k,n]`, four rows of `a` per pass over `b`.
fn matmul_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    let mut i = 0;
    while i + 4 <= m {
        let (r0, rest) = out[i * n..(i + 4) * n].split_at_mut(n);
        let (r1, rest) = rest.split_at_mut(n);
        let (r2, r3) = rest.split_at_mut(n);
        for p in 0..k {
            let [a0, a1, a2, a3] = [0, 1, 2, 3].map(|d| a[(i + d) * k + p]);
            if a0 == 0.0 && a1 == 0.0 && a2 == 0.0 && a3 == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for ((((o0, o1), o2), o3), &bv) in r0.iter_mut().zip(r1.iter_mut()).zip(r2.iter_mut()).zip(r3.iter_mut()).zip(brow) {
                *o0 += a0 * bv;
                *o1 += a1 * bv;
                *o2 += a2 * bv;
                *o3 += a3 * bv;
            }
        }
        i += 4;
    }
    for i in i..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] = a[m,k] · b[k,n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_acc(&mut out, a, b, m, k, n);
    out
}

/// `g·bᵀ`, the gradient of `a` for `a·b`.
pub fn matmul_grad_a(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    matmul(g, &transpose(b, k, n), m, n, k)
}

/// `aᵀ·g`, the gradient of `b` for `a·b`, four rows of `g` per pass.
pub fn matmul_grad_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    let mut i = 0;
    while i + 4 <= m {
        let g4 = &g[i * n..(i + 4) * n];
        let (g0, rest) = g4.split_at(n);
        let (g1, rest) = rest.split_at(n);
        let (g2, g3) = rest.split_at(n);
        for p in 0..k {
            let [a0, a1, a2, a3] = [0, 1, 2, 3].map(|d| a[(i + d) * k + p]);
            if a0 == 0.0 && a1 == 0.0 && a2 == 0.0 && a3 == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for ((((o, &v0), &v1), &v2), &v3) in orow.iter_mut().zip(g0).zip(g1).zip(g2).zip(g3) {
                *o += a0 * v0 + a1 * v1 + a2 * v2 + a3 * v3;
            }
        }
        i += 4;
    }
    for i in i..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Splits `shape` around `axis` into (outer, extent, inner).
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// For every flat index of `full`, the flat index of the reduced tensor obtained
/// by deleting `axes` (sorted, distinct).
pub fn broadcast_map(full: &[usize], axes: &[usize]) -> Vec<usize> {
    let n: usize = full.iter().product();
    let kept: Vec<usize> = (0..full.len()).filter(|a| !axes.contains(a)).collect();
    // stride of each kept axis inside the reduced tensor
    let mut reduced_stride = vec![0usize; full.len()];
    let mut s = 1;
    for &a in kept.iter().rev() {
        reduced_stride[a] = s;
        s *= full[a];
    }
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; full.len()];
    let mut cur = 0usize;
    for _ in 0..n {
        out.push(cur);
        for d in (0..full.len()).rev() {
            idx[d] += 1;
            cur += reduced_stride[d];
            if idx[d] < full[d] {
                break;
            }
            cur -= reduced_stride[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

/// Geometry of a stride-1, zero-padded ("same") 3D convolution over
/// `[batch, t, h, w, c_in]` with kernel `[kt, kh, kw, c_in, c_out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub dims: [usize; 3],
    pub kernel: [usize; 3],
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvGeom {
    fn positions(&self) -> usize {
        self.dims.iter().product()
    }

    /// Calls `f(out_pos, in_pos, kernel_tap)` for every in-bounds tap, as flat
    /// position indices (not multiplied by channels).
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [t, h, w] = self.dims;
        let [kt, kh, kw] = self.kernel;
        let (pt, ph, pw) = (kt / 2, kh / 2, kw / 2);
        for b in 0..self.batch {
            let base = b * t * h * w;
            for ot in 0..t {
                for oh in 0..h {
                    for ow in 0..w {
                        let out_pos = base + (ot * h + oh) * w + ow;
                        for dt in 0..kt {
                            let it = ot + dt;
                            if it < pt || it - pt >= t {
                                continue;
                            }
                            let it = it - pt;
                            for dh in 0..kh {
                                let ih = oh + dh;
                                if ih < ph || ih - ph >= h {
                                    continue;
                                }
                                let ih = ih - ph;
                                for dw in 0..kw {
                                    let iw = ow + dw;
                                    if iw < pw || iw - pw >= w {
                                        continue;
                                    }
                                    let iw = iw - pw;
                                    let in_pos = base + (it * h + ih) * w + iw;
                                    let tap = (dt * kh + dh) * kw + dw;
                                    f(out_pos, in_pos, tap);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn patch_len(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.c_in
    }

    /// Patch matrix `[batch·positions, taps·c_in]`, zero outside the input.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (ci, len) = (self.c_in, self.patch_len());
        let mut cols = vec![0.0; self.batch * self.positions() * len];
        self.for_each_tap(|op, ip, tap| {
            let dst = op * len + tap * ci;
            cols[dst..dst + ci].copy_from_slice(&x[ip * ci..(ip + 1) * ci]);
        });
        cols
    }

    pub fn forward(&self, x: &[f64], k: &[f64]) -> Vec<f64> {
        let rows = self.batch * self.positions();
        matmul(&self.im2col(x), k, rows, self.patch_len(), self.c_out)
    }

    pub fn grad_input(&self, g: &[f64], k: &[f64]) -> Vec<f64> {
        let (ci, len) = (self.c_in, self.patch_len());
        let rows = self.batch * self.positions();
        let cols = matmul_grad_a(g, k, rows, len, self.c_out);
        let mut gx = vec![0.0; rows * ci];
        self.for_each_tap(|op, ip, tap| {
            let src = &cols[op * len + tap * ci..op * len + (tap + 1) * ci];
            for (d, &v) in gx[ip * ci..(ip + 1) * ci].iter_mut().zip(src) {
                *d += v;
            }
        });
        gx
    }

    pub fn grad_kernel(&self, g: &[f64], x: &[f64]) -> Vec<f64> {
        let rows = self.batch * self.positions();
        matmul_grad_b(&self.im2col(x), g, rows, self.patch_len(), self.c_out)
    }
}

/// Non-overlapping average pooling over `[batch, t, h, w, c]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub batch: usize,
    pub dims: [usize; 3],
    pub window: [usize; 3],
    pub channels: usize,
}

impl PoolGeom {
    pub fn out_dims(&self) -> [usize; 3] {
        [
            self.dims[0] / self.window[0],
            self.dims[1] / self.window[1],
            self.dims[2] / self.window[2],
        ]
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let [t, h, w] = self.dims;
        let [ot, oh, ow] = self.out_dims();
        let [wt, wh, ww] = self.window;
        for b in 0..self.batch {
            for i in 0..t {
                for j in 0..h {
                    for k in 0..w {
                        let ip = ((b * t + i) * h + j) * w + k;
                        let opos = ((b * ot + i / wt) * oh + j / wh) * ow + k / ww;
                        f(opos, ip);
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let c = self.channels;
        let [ot, oh, ow] = self.out_dims();
        let scale = 1.0 / self.window.iter().product::<usize>() as f64;
        let mut out = vec![0.0; self.batch * ot * oh * ow * c];
        self.for_each(|op, ip| {
            for ch in 0..c {
                out[op * c + ch] += x[ip * c + ch];
            }
        });
        out.iter_mut().for_each(|v| *v *= scale);
        out
    }

    pub fn backward(&self, g: &[f64]) -> Vec<f64> {
        let c = self.channels;
        let scale = 1.0 / self.window.iter().product::<usize>() as f64;
        let mut gx = vec![0.0; self.batch * self.dims.iter().product::<usize>() * c];
        self.for_each(|op, ip| {
            for ch in 0..c {
                gx[ip * c + ch] = g[op * c + ch] * scale;
            }
        });
        gx
    }
}
