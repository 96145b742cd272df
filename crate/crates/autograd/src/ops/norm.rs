use crate::array::Array;
use crate::tensor::{Backward, Tensor};

struct InstanceNorm {
    inv_std: Vec<f64>,
}

impl Backward for InstanceNorm {
    fn backward(&self, grad: &Array, _inputs: &[Tensor], output: &Array) -> Vec<Option<Array>> {
        let (n, c, h, w) = output.dims4();
        let plane = h * w;
        let m = plane as f64;
        let yd = output.data();
        let gd = grad.data();
        let mut dx = vec![0.0; yd.len()];
        for i in 0..n * c {
            let range = i * plane..(i + 1) * plane;
            let (y, g) = (&yd[range.clone()], &gd[range.clone()]);
            let mean_g = g.iter().sum::<f64>() / m;
            let mean_gy = g.iter().zip(y).map(|(g, y)| g * y).sum::<f64>() / m;
            let s = self.inv_std[i];
            for (d, (gv, yv)) in dx[range].iter_mut().zip(g.iter().zip(y)) {
                *d = s * (gv - mean_g - yv * mean_gy);
            }
        }
        vec![Some(Array::from_vec(output.shape(), dx))]
    }
}

struct SpectralDiv {
    sigma: f64,
    u: Vec<f64>,
    v: Vec<f64>,
    clamped: bool,
}

impl Backward for SpectralDiv {
    fn backward(&self, grad: &Array, inputs: &[Tensor], _output: &Array) -> Vec<Option<Array>> {
        let w = inputs[0].value();
        let s = self.sigma;
        let mut dw: Vec<f64> = grad.data().iter().map(|g| g / s).collect();
        if !self.clamped {
            // sigma = uᵀ W v with u, v held constant, so d sigma / dW = u vᵀ.
            let gw: f64 = grad.data().iter().zip(w.data()).map(|(g, w)| g * w).sum();
            let coef = gw / (s * s);
            let cols = self.v.len();
            for (r, &ur) in self.u.iter().enumerate() {
                for (cidx, &vc) in self.v.iter().enumerate() {
                    dw[r * cols + cidx] -= coef * ur * vc;
                }
            }
        }
        vec![Some(Array::from_vec(w.shape(), dw))]
    }
}

impl Tensor {
    /// Per-image, per-channel normalization without affine parameters.
    pub fn instance_norm(&self, eps: f64) -> Tensor {
        let (n, c, h, w) = self.value().dims4();
        let plane = h * w;
        let m = plane as f64;
        let mut out = self.value().clone();
        let od = out.data_mut();
        let mut inv_std = Vec::with_capacity(n * c);
        for chunk in od.chunks_mut(plane) {
            let mean = chunk.iter().sum::<f64>() / m;
            let var = chunk.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m;
            let s = 1.0 / (var + eps).sqrt();
            chunk.iter_mut().for_each(|x| *x = (*x - mean) * s);
            inv_std.push(s);
        }
        Tensor::from_op(out, vec![self.clone()], InstanceNorm { inv_std })
    }

    /// `W / sigma` with `sigma = uᵀ W v`, where `W` is this tensor flattened to
    /// `(u.len(), v.len())` and `u`, `v` are treated as constants.
    ///
    /// Returns the normalized weight and the sigma used; sigma is clamped below
    /// at `eps`, in which case the division passes no gradient through sigma.
    pub fn spectral_div(&self, u: &[f64], v: &[f64], eps: f64) -> (Tensor, f64) {
        let w = self.value();
        assert_eq!(w.len(), u.len() * v.len(), "u/v do not match the flattened weight");
        let cols = v.len();
        let raw: f64 = u
            .iter()
            .enumerate()
            .map(|(r, &ur)| {
                let row = &w.data()[r * cols..(r + 1) * cols];
                ur * row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>()
            })
            .sum();
        let clamped = raw < eps;
        let sigma = if clamped { eps } else { raw };
        let out = w.map(|x| x / sigma);
        let t = Tensor::from_op(
            out,
            vec![self.clone()],
            SpectralDiv {
                sigma,
                u: u.to_vec(),
                v: v.to_vec(),
                clamped,
            },
        );
        (t, sigma)
    }
}
