use crate::array::Array;
use crate::tensor::{Backward, Tensor};

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl Backward for Binary {
    fn backward(&self, grad: &Array, inputs: &[Tensor], _output: &Array) -> Vec<Option<Array>> {
        match self {
            Binary::Add => vec![Some(grad.clone()), Some(grad.clone())],
            Binary::Sub => vec![Some(grad.clone()), Some(grad.map(|g| -g))],
            Binary::Mul => {
                let a = inputs[0].value();
                let b = inputs[1].value();
                vec![
                    inputs[0]
                        .requires_grad()
                        .then(|| grad.zip_map(b, |g, b| g * b)),
                    inputs[1]
                        .requires_grad()
                        .then(|| grad.zip_map(a, |g, a| g * a)),
                ]
            }
        }
    }
}

#[derive(Clone, Copy)]
enum Unary {
    Scale(f64),
    Shift,
    Abs,
    Square,
    Relu,
    LeakyRelu(f64),
    Tanh,
}

impl Backward for Unary {
    fn backward(&self, grad: &Array, inputs: &[Tensor], output: &Array) -> Vec<Option<Array>> {
        let x = inputs[0].value();
        let g = match *self {
            Unary::Scale(c) => grad.map(|g| g * c),
            Unary::Shift => grad.clone(),
            Unary::Abs => grad.zip_map(x, |g, x| {
                if x > 0.0 {
                    g
                } else if x < 0.0 {
                    -g
                } else {
                    0.0
                }
            }),
            Unary::Square => grad.zip_map(x, |g, x| 2.0 * g * x),
            Unary::Relu => grad.zip_map(x, |g, x| if x > 0.0 { g } else { 0.0 }),
            Unary::LeakyRelu(slope) => grad.zip_map(x, |g, x| if x > 0.0 { g } else { slope * g }),
            Unary::Tanh => grad.zip_map(output, |g, y| g * (1.0 - y * y)),
        };
        vec![Some(g)]
    }
}

struct ChannelAffine {
    scale: Vec<f64>,
}

impl Backward for ChannelAffine {
    fn backward(&self, grad: &Array, _inputs: &[Tensor], _output: &Array) -> Vec<Option<Array>> {
        let (n, c, h, w) = grad.dims4();
        let plane = h * w;
        let mut g = grad.clone();
        let data = g.data_mut();
        for b in 0..n {
            for ch in 0..c {
                let s = self.scale[ch];
                let off = (b * c + ch) * plane;
                data[off..off + plane].iter_mut().for_each(|v| *v *= s);
            }
        }
        vec![Some(g)]
    }
}

impl Tensor {
    fn binary(&self, other: &Tensor, op: Binary) -> Tensor {
        assert_eq!(
            self.shape(),
            other.shape(),
            "elementwise operands must share a shape"
        );
        let value = match op {
            Binary::Add => self.value().zip_map(other.value(), |a, b| a + b),
            Binary::Sub => self.value().zip_map(other.value(), |a, b| a - b),
            Binary::Mul => self.value().zip_map(other.value(), |a, b| a * b),
        };
        Tensor::from_op(value, vec![self.clone(), other.clone()], op)
    }

    fn unary(&self, op: Unary) -> Tensor {
        let value = match op {
            Unary::Scale(c) => self.value().map(|x| x * c),
            Unary::Shift => unreachable!("shift carries its own constant"),
            Unary::Abs => self.value().map(f64::abs),
            Unary::Square => self.value().map(|x| x * x),
            Unary::Relu => self.value().map(|x| x.max(0.0)),
            Unary::LeakyRelu(slope) => self.value().map(|x| if x > 0.0 { x } else { slope * x }),
            Unary::Tanh => self.value().map(f64::tanh),
        };
        Tensor::from_op(value, vec![self.clone()], op)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.binary(other, Binary::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.binary(other, Binary::Mul)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(Unary::Scale(c))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        Tensor::from_op(self.value().map(|x| x + c), vec![self.clone()], Unary::Shift)
    }

    pub fn abs(&self) -> Tensor {
        self.unary(Unary::Abs)
    }

    pub fn square(&self) -> Tensor {
        self.unary(Unary::Square)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(Unary::Relu)
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        self.unary(Unary::LeakyRelu(slope))
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(Unary::Tanh)
    }

    /// `y[:, c] = x[:, c] * scale[c] + shift[c]` on a `(B, C, H, W)` tensor.
    pub fn channel_affine(&self, scale: &[f64], shift: &[f64]) -> Tensor {
        let (n, c, h, w) = self.value().dims4();
        assert!(scale.len() == c && shift.len() == c, "one scale/shift per channel");
        let plane = h * w;
        let mut out = self.value().clone();
        let data = out.data_mut();
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for v in &mut data[off..off + plane] {
                    *v = *v * scale[ch] + shift[ch];
                }
            }
        }
        Tensor::from_op(
            out,
            vec![self.clone()],
            ChannelAffine {
                scale: scale.to_vec(),
            },
        )
    }
}
