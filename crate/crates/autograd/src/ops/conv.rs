use crate::array::Array;
use crate::tensor::{Backward, Tensor};

/// Upper bound on the im2col scratch buffer, in elements.
const COL_BUDGET: usize = 1 << 22;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.in_c * self.k * self.k
    }

    /// Output rows handled per im2col chunk.
    fn rows_per_chunk(&self) -> usize {
        (COL_BUDGET / (self.patch() * self.out_w).max(1)).clamp(1, self.out_h)
    }

    /// Output columns `lo..hi` whose input column `ox*stride + kj - pad` is in bounds.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kj).div_ceil(self.stride);
        // ox*stride + kj - pad <= in_w - 1
        let hi = if self.in_w + self.pad < kj + 1 {
            0
        } else {
            ((self.in_w + self.pad - kj - 1) / self.stride + 1).min(self.out_w)
        };
        (lo.min(hi), hi)
    }

    /// Fills `cols` (patch x rows*out_w) for output rows `r0..r0+rows` of one image.
    fn im2col(&self, x: &[f64], r0: usize, rows: usize, cols: &mut [f64]) {
        let n = rows * self.out_w;
        let s = self.stride;
        for c in 0..self.in_c {
            let plane = &x[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let (lo, hi) = self.valid_cols(kj);
                    let row = (c * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..rows {
                        let iy = ((r0 + oy) * s + ki) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.in_h as isize || lo == hi {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        line[..lo].fill(0.0);
                        line[hi..].fill(0.0);
                        let x0 = lo * s + kj - self.pad;
                        if s == 1 {
                            line[lo..hi].copy_from_slice(&src[x0..x0 + hi - lo]);
                        } else {
                            for (v, &sv) in line[lo..hi].iter_mut().zip(src[x0..].iter().step_by(s)) {
                                *v = sv;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` back into an image gradient.
    fn col2im(&self, cols: &[f64], r0: usize, rows: usize, dx: &mut [f64]) {
        let n = rows * self.out_w;
        let s = self.stride;
        for c in 0..self.in_c {
            let plane = &mut dx[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let (lo, hi) = self.valid_cols(kj);
                    if lo == hi {
                        continue;
                    }
                    let row = (c * self.k + ki) * self.k + kj;
                    let src = &cols[row * n..(row + 1) * n];
                    let x0 = lo * s + kj - self.pad;
                    for oy in 0..rows {
                        let iy = ((r0 + oy) * s + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        let line = &src[oy * self.out_w + lo..oy * self.out_w + hi];
                        if s == 1 {
                            for (d, v) in dst[x0..x0 + hi - lo].iter_mut().zip(line) {
                                *d += v;
                            }
                        } else {
                            for (d, v) in dst[x0..].iter_mut().step_by(s).zip(line) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c[m x n] (+)= a[m x k] * b[k x n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() > (m - 1) * rsa + (k.max(1) - 1) * csa || k == 0);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserted extents keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

struct Conv2d {
    geo: Geometry,
    has_bias: bool,
}

impl Backward for Conv2d {
    fn backward(&self, grad: &Array, inputs: &[Tensor], _output: &Array) -> Vec<Option<Array>> {
        let g = self.geo;
        let x = inputs[0].value();
        let w = inputs[1].value();
        let batch = x.shape()[0];
        let patch = g.patch();
        let out_plane = g.out_h * g.out_w;
        let in_size = g.in_c * g.in_h * g.in_w;
        let need_dx = inputs[0].requires_grad();
        let need_dw = inputs[1].requires_grad();

        let mut dx = need_dx.then(|| vec![0.0; x.len()]);
        let mut dw = need_dw.then(|| vec![0.0; w.len()]);
        let chunk = g.rows_per_chunk();
        let mut cols = vec![0.0; patch * chunk * g.out_w];
        let gd = grad.data();

        for b in 0..batch {
            let xb = &x.data()[b * in_size..(b + 1) * in_size];
            let gb = &gd[b * g.out_c * out_plane..(b + 1) * g.out_c * out_plane];
            let mut r0 = 0;
            while r0 < g.out_h {
                let rows = chunk.min(g.out_h - r0);
                let n = rows * g.out_w;
                let gchunk = &gb[r0 * g.out_w..];
                if let Some(dw) = dw.as_mut() {
                    g.im2col(xb, r0, rows, &mut cols);
                    // dW[o, p] += sum_j grad[o, j] * cols[p, j]
                    gemm(
                        g.out_c,
                        n,
                        patch,
                        gchunk,
                        (out_plane, 1),
                        &cols,
                        (1, n),
                        1.0,
                        dw,
                        (patch, 1),
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    // dcols[p, j] = sum_o W[o, p] * grad[o, j]
                    gemm(
                        patch,
                        g.out_c,
                        n,
                        w.data(),
                        (1, patch),
                        gchunk,
                        (out_plane, 1),
                        0.0,
                        &mut cols,
                        (n, 1),
                    );
                    g.col2im(&cols[..patch * n], r0, rows, &mut dx[b * in_size..(b + 1) * in_size]);
                }
                r0 += rows;
            }
        }

        let mut result = vec![
            dx.map(|d| Array::from_vec(x.shape(), d)),
            dw.map(|d| Array::from_vec(w.shape(), d)),
        ];
        if self.has_bias {
            let db = inputs[2].requires_grad().then(|| {
                let mut db = vec![0.0; g.out_c];
                for b in 0..batch {
                    for (o, acc) in db.iter_mut().enumerate() {
                        let off = (b * g.out_c + o) * out_plane;
                        *acc += gd[off..off + out_plane].iter().sum::<f64>();
                    }
                }
                Array::from_vec(&[g.out_c], db)
            });
            result.push(db);
        }
        result
    }
}

impl Tensor {
    /// 2-D cross-correlation with zero padding.
    ///
    /// `self`: `(B, C, H, W)`, `weight`: `(O, C, k, k)`, `bias`: `(O)`.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
        let (batch, in_c, in_h, in_w) = self.value().dims4();
        let (out_c, wc, k, k2) = weight.value().dims4();
        assert_eq!(wc, in_c, "conv weight expects {wc} input channels, got {in_c}");
        assert_eq!(k, k2, "square kernels only");
        assert!(stride >= 1);
        assert!(
            in_h + 2 * pad >= k && in_w + 2 * pad >= k,
            "kernel {k} larger than padded input {in_h}x{in_w}+{pad}"
        );
        if let Some(b) = bias {
            assert_eq!(b.shape(), &[out_c], "bias must have one entry per output channel");
        }
        let geo = Geometry {
            in_c,
            in_h,
            in_w,
            out_c,
            k,
            stride,
            pad,
            out_h: (in_h + 2 * pad - k) / stride + 1,
            out_w: (in_w + 2 * pad - k) / stride + 1,
        };
        let patch = geo.patch();
        let out_plane = geo.out_h * geo.out_w;
        let in_size = in_c * in_h * in_w;
        let mut out = vec![0.0; batch * out_c * out_plane];
        let chunk = geo.rows_per_chunk();
        let mut cols = vec![0.0; patch * chunk * geo.out_w];
        let xd = self.value().data();
        let wd = weight.value().data();

        for b in 0..batch {
            let xb = &xd[b * in_size..(b + 1) * in_size];
            let ob = &mut out[b * out_c * out_plane..(b + 1) * out_c * out_plane];
            let mut r0 = 0;
            while r0 < geo.out_h {
                let rows = chunk.min(geo.out_h - r0);
                let n = rows * geo.out_w;
                geo.im2col(xb, r0, rows, &mut cols);
                gemm(
                    out_c,
                    patch,
                    n,
                    wd,
                    (patch, 1),
                    &cols,
                    (n, 1),
                    0.0,
                    &mut ob[r0 * geo.out_w..],
                    (out_plane, 1),
                );
                r0 += rows;
            }
            if let Some(bias) = bias {
                for (o, &bv) in bias.value().data().iter().enumerate() {
                    ob[o * out_plane..(o + 1) * out_plane]
                        .iter_mut()
                        .for_each(|v| *v += bv);
                }
            }
        }

        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            inputs.push(b.clone());
        }
        Tensor::from_op(
            Array::from_vec(&[batch, out_c, geo.out_h, geo.out_w], out),
            inputs,
            Conv2d {
                geo,
                has_bias: bias.is_some(),
            },
        )
    }
}
