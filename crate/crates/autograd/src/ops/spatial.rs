use crate::array::Array;
use crate::tensor::{Backward, Tensor};

fn reflect(i: isize, len: usize) -> usize {
    let len = len as isize;
    let r = if i < 0 {
        -i
    } else if i >= len {
        2 * (len - 1) - i
    } else {
        i
    };
    r as usize
}

struct ReflectPad {
    pad: usize,
}

impl Backward for ReflectPad {
    fn backward(&self, grad: &Array, inputs: &[Tensor], _output: &Array) -> Vec<Option<Array>> {
        let (n, c, h, w) = inputs[0].value().dims4();
        let (ph, pw) = (h + 2 * self.pad, w + 2 * self.pad);
        let p = self.pad as isize;
        let gd = grad.data();
        let mut dx = vec![0.0; n * c * h * w];
        for nc in 0..n * c {
            for y in 0..ph {
                let sy = reflect(y as isize - p, h);
                for x in 0..pw {
                    let sx = reflect(x as isize - p, w);
                    dx[nc * h * w + sy * w + sx] += gd[nc * ph * pw + y * pw + x];
                }
            }
        }
        vec![Some(Array::from_vec(&[n, c, h, w], dx))]
    }
}

struct Upsample {
    factor: usize,
}

impl Backward for Upsample {
    fn backward(&self, grad: &Array, inputs: &[Tensor], _output: &Array) -> Vec<Option<Array>> {
        let (n, c, h, w) = inputs[0].value().dims4();
        let f = self.factor;
        let ow = w * f;
        let gd = grad.data();
        let mut dx = vec![0.0; n * c * h * w];
        for nc in 0..n * c {
            for y in 0..h * f {
                for x in 0..ow {
                    dx[nc * h * w + (y / f) * w + x / f] += gd[nc * h * f * ow + y * ow + x];
                }
            }
        }
        vec![Some(Array::from_vec(&[n, c, h, w], dx))]
    }
}

struct MaxPool {
    argmax: Vec<usize>,
}

impl Backward for MaxPool {
    fn backward(&self, grad: &Array, inputs: &[Tensor], _output: &Array) -> Vec<Option<Array>> {
        let mut dx = vec![0.0; inputs[0].value().len()];
        for (&src, &g) in self.argmax.iter().zip(grad.data()) {
            dx[src] += g;
        }
        vec![Some(Array::from_vec(inputs[0].shape(), dx))]
    }
}

/// Splits the output gradient back along the channel axis.
struct ConcatChannels;

impl Backward for ConcatChannels {
    fn backward(&self, grad: &Array, inputs: &[Tensor], _output: &Array) -> Vec<Option<Array>> {
        let (n, ctot, h, w) = grad.dims4();
        let plane = h * w;
        let gd = grad.data();
        let mut start = 0;
        inputs
            .iter()
            .map(|t| {
                let c = t.shape()[1];
                let out = t.requires_grad().then(|| {
                    let mut d = Vec::with_capacity(n * c * plane);
                    for b in 0..n {
                        let off = (b * ctot + start) * plane;
                        d.extend_from_slice(&gd[off..off + c * plane]);
                    }
                    Array::from_vec(t.shape(), d)
                });
                start += c;
                out
            })
            .collect()
    }
}

struct RepeatChannels {
    times: usize,
}

impl Backward for RepeatChannels {
    fn backward(&self, grad: &Array, inputs: &[Tensor], _output: &Array) -> Vec<Option<Array>> {
        let (n, c, h, w) = inputs[0].value().dims4();
        let block = c * h * w;
        let gd = grad.data();
        let mut dx = vec![0.0; n * block];
        for b in 0..n {
            for r in 0..self.times {
                let src = &gd[(b * self.times + r) * block..(b * self.times + r + 1) * block];
                for (d, s) in dx[b * block..(b + 1) * block].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        vec![Some(Array::from_vec(inputs[0].shape(), dx))]
    }
}

struct ConcatBatch;

impl Backward for ConcatBatch {
    fn backward(&self, grad: &Array, inputs: &[Tensor], _output: &Array) -> Vec<Option<Array>> {
        let mut start = 0;
        inputs
            .iter()
            .map(|t| {
                let n = t.shape()[0];
                let g = t
                    .requires_grad()
                    .then(|| grad.slice_outer(start, start + n));
                start += n;
                g
            })
            .collect()
    }
}

struct SliceBatch {
    start: usize,
}

impl Backward for SliceBatch {
    fn backward(&self, grad: &Array, inputs: &[Tensor], _output: &Array) -> Vec<Option<Array>> {
        let shape = inputs[0].shape();
        let inner: usize = shape[1..].iter().product();
        let mut dx = vec![0.0; inputs[0].value().len()];
        dx[self.start * inner..self.start * inner + grad.len()].copy_from_slice(grad.data());
        vec![Some(Array::from_vec(shape, dx))]
    }
}

impl Tensor {
    /// Reflection padding of both spatial axes; requires `pad < min(H, W)`.
    pub fn reflect_pad(&self, pad: usize) -> Tensor {
        let (n, c, h, w) = self.value().dims4();
        assert!(pad < h && pad < w, "reflection pad {pad} too large for {h}x{w}");
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let p = pad as isize;
        let xd = self.value().data();
        let mut out = Vec::with_capacity(n * c * ph * pw);
        for nc in 0..n * c {
            for y in 0..ph {
                let sy = reflect(y as isize - p, h);
                for x in 0..pw {
                    out.push(xd[nc * h * w + sy * w + reflect(x as isize - p, w)]);
                }
            }
        }
        Tensor::from_op(
            Array::from_vec(&[n, c, ph, pw], out),
            vec![self.clone()],
            ReflectPad { pad },
        )
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Tensor {
        let (n, c, h, w) = self.value().dims4();
        let ow = w * factor;
        let xd = self.value().data();
        let mut out = Vec::with_capacity(n * c * h * w * factor * factor);
        for nc in 0..n * c {
            for y in 0..h * factor {
                let row = &xd[nc * h * w + (y / factor) * w..][..w];
                for x in 0..ow {
                    out.push(row[x / factor]);
                }
            }
        }
        Tensor::from_op(
            Array::from_vec(&[n, c, h * factor, ow], out),
            vec![self.clone()],
            Upsample { factor },
        )
    }

    /// 2x2 max pooling with stride 2 (trailing odd rows/columns dropped).
    pub fn max_pool2(&self) -> Tensor {
        let (n, c, h, w) = self.value().dims4();
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.value().data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for nc in 0..n * c {
            let base = nc * h * w;
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = base + 2 * y * w + 2 * x;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * y + dy) * w + 2 * x + dx;
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        Tensor::from_op(
            Array::from_vec(&[n, c, oh, ow], out),
            vec![self.clone()],
            MaxPool { argmax },
        )
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let (n, _, h, w) = parts[0].value().dims4();
        let plane = h * w;
        let ctot: usize = parts
            .iter()
            .map(|t| {
                let (pn, pc, ph, pw) = t.value().dims4();
                assert!(pn == n && ph == h && pw == w, "concat operands disagree on shape");
                pc
            })
            .sum();
        let mut out = Vec::with_capacity(n * ctot * plane);
        for b in 0..n {
            for t in parts {
                let c = t.shape()[1];
                out.extend_from_slice(&t.value().data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        Tensor::from_op(
            Array::from_vec(&[n, ctot, h, w], out),
            parts.iter().map(|t| (*t).clone()).collect(),
            ConcatChannels,
        )
    }

    /// Tiles the channel axis `times` times: `(B, C, H, W) -> (B, C*times, H, W)`.
    pub fn repeat_channels(&self, times: usize) -> Tensor {
        let (n, c, h, w) = self.value().dims4();
        let block = c * h * w;
        let xd = self.value().data();
        let mut out = Vec::with_capacity(n * block * times);
        for b in 0..n {
            for _ in 0..times {
                out.extend_from_slice(&xd[b * block..(b + 1) * block]);
            }
        }
        Tensor::from_op(
            Array::from_vec(&[n, c * times, h, w], out),
            vec![self.clone()],
            RepeatChannels { times },
        )
    }

    /// Concatenation along the leading (batch) axis.
    pub fn concat_batch(parts: &[&Tensor]) -> Tensor {
        let arrays: Vec<&Array> = parts.iter().map(|t| t.value()).collect();
        Tensor::from_op(
            Array::stack_outer(&arrays),
            parts.iter().map(|t| (*t).clone()).collect(),
            ConcatBatch,
        )
    }

    /// Items `start..end` of the leading axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Tensor {
        Tensor::from_op(
            self.value().slice_outer(start, end),
            vec![self.clone()],
            SliceBatch { start },
        )
    }
}
