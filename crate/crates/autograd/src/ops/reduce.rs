use crate::array::Array;
use crate::tensor::{Backward, Tensor};

struct Sum {
    scale: f64,
}

impl Backward for Sum {
    fn backward(&self, grad: &Array, inputs: &[Tensor], _output: &Array) -> Vec<Option<Array>> {
        vec![Some(Array::full(inputs[0].shape(), grad.item() * self.scale))]
    }
}

struct MeanPerItem;

impl Backward for MeanPerItem {
    fn backward(&self, grad: &Array, inputs: &[Tensor], _output: &Array) -> Vec<Option<Array>> {
        let shape = inputs[0].shape();
        let inner: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for &g in grad.data() {
            data.extend(std::iter::repeat_n(g / inner as f64, inner));
        }
        vec![Some(Array::from_vec(shape, data))]
    }
}

/// Per-position L2 norm across channels.
struct ChannelNorm;

impl Backward for ChannelNorm {
    fn backward(&self, grad: &Array, inputs: &[Tensor], output: &Array) -> Vec<Option<Array>> {
        let x = inputs[0].value();
        let (n, c, h, w) = x.dims4();
        let plane = h * w;
        let mut dx = vec![0.0; x.len()];
        let xd = x.data();
        for b in 0..n {
            for p in 0..plane {
                let norm = output.data()[b * plane + p];
                if norm == 0.0 {
                    continue;
                }
                let g = grad.data()[b * plane + p] / norm;
                for ch in 0..c {
                    let i = (b * c + ch) * plane + p;
                    dx[i] = g * xd[i];
                }
            }
        }
        vec![Some(Array::from_vec(x.shape(), dx))]
    }
}

struct ChannelNormalize {
    eps: f64,
    norms: Vec<f64>,
}

impl Backward for ChannelNormalize {
    fn backward(&self, grad: &Array, inputs: &[Tensor], _output: &Array) -> Vec<Option<Array>> {
        let x = inputs[0].value();
        let (n, c, h, w) = x.dims4();
        let plane = h * w;
        let xd = x.data();
        let gd = grad.data();
        let mut dx = vec![0.0; x.len()];
        for b in 0..n {
            for p in 0..plane {
                let norm = self.norms[b * plane + p];
                let denom = norm + self.eps;
                let mut dot = 0.0;
                for ch in 0..c {
                    let i = (b * c + ch) * plane + p;
                    dot += gd[i] * xd[i];
                }
                // d/dx [x / (|x| + eps)] = I/(|x|+eps) - x xᵀ / ((|x|+eps)² |x|)
                let corr = if norm > 0.0 {
                    dot / (denom * denom * norm)
                } else {
                    0.0
                };
                for ch in 0..c {
                    let i = (b * c + ch) * plane + p;
                    dx[i] = gd[i] / denom - xd[i] * corr;
                }
            }
        }
        vec![Some(Array::from_vec(x.shape(), dx))]
    }
}

impl Tensor {
    /// Sum of all elements, as a 0-axis tensor.
    pub fn sum(&self) -> Tensor {
        let v = Array::scalar(self.value().sum());
        Tensor::from_op(v, vec![self.clone()], Sum { scale: 1.0 })
    }

    /// Mean of all elements, as a 0-axis tensor.
    pub fn mean(&self) -> Tensor {
        let n = self.value().len() as f64;
        let v = Array::scalar(self.value().sum() / n);
        Tensor::from_op(v, vec![self.clone()], Sum { scale: 1.0 / n })
    }

    /// Mean over every axis but the first: `(B, ...) -> (B)`.
    pub fn mean_per_item(&self) -> Tensor {
        let shape = self.shape();
        assert!(!shape.is_empty());
        let inner: usize = shape[1..].iter().product();
        let data: Vec<f64> = self
            .value()
            .data()
            .chunks(inner)
            .map(|c| c.iter().sum::<f64>() / inner as f64)
            .collect();
        Tensor::from_op(Array::from_vec(&[shape[0]], data), vec![self.clone()], MeanPerItem)
    }

    /// `(B, C, H, W) -> (B, 1, H, W)`: L2 norm of each position's channel vector.
    ///
    /// The subgradient at a zero vector is taken as zero.
    pub fn channel_norm(&self) -> Tensor {
        let (n, c, h, w) = self.value().dims4();
        let plane = h * w;
        let xd = self.value().data();
        let mut out = vec![0.0; n * plane];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for p in 0..plane {
                    out[b * plane + p] += xd[off + p] * xd[off + p];
                }
            }
        }
        out.iter_mut().for_each(|v| *v = v.sqrt());
        Tensor::from_op(Array::from_vec(&[n, 1, h, w], out), vec![self.clone()], ChannelNorm)
    }

    /// Divides each position's channel vector by `(its L2 norm + eps)`.
    pub fn channel_normalize(&self, eps: f64) -> Tensor {
        let (n, c, h, w) = self.value().dims4();
        let plane = h * w;
        let xd = self.value().data();
        let mut norms = vec![0.0; n * plane];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for p in 0..plane {
                    norms[b * plane + p] += xd[off + p] * xd[off + p];
                }
            }
        }
        norms.iter_mut().for_each(|v| *v = v.sqrt());
        let mut out = self.value().clone();
        let od = out.data_mut();
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for p in 0..plane {
                    od[off + p] /= norms[b * plane + p] + eps;
                }
            }
        }
        Tensor::from_op(out, vec![self.clone()], ChannelNormalize { eps, norms })
    }
}
