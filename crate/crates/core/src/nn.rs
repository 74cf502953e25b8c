//! Parameter initialisation and small layer helpers shared by the model parts.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{ParamBinder, ParamId, ParamStore, Tape, Tensor, Var};

/// He-style uniform init: `U(-a, a)` with `a = gain * sqrt(3 / fan_in)`.
///
/// `gain = sqrt(2)` gives the ReLU fan-in variance `2 / fan_in`.
pub fn uniform_init<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let a = gain * (3.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-a..=a)).collect();
    Tensor::new(shape, data).expect("init shape is valid")
}

pub const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

/// Dense layer `x W (+ b)` over the last axis of a 2-D input.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        gain: f64,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            uniform_init(rng, &[d_in, d_out], d_in, gain),
        );
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[d_out])));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, p: &mut ParamBinder, x: Var) -> Result<Var> {
        let w = p.var(tape, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = p.var(tape, b);
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// 2-D convolution with bias over `[B, H, W, C]` input.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = kernel * kernel * c_in;
        let w = store.add(
            format!("{name}.w"),
            uniform_init(rng, &[fan_in, c_out], fan_in, RELU_GAIN),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[c_out]));
        Self {
            w,
            b,
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &mut ParamBinder, x: Var) -> Result<Var> {
        let w = p.var(tape, self.w);
        let b = p.var(tape, self.b);
        let y = tape.conv2d(x, w, self.kernel, self.stride, self.pad)?;
        tape.add(y, b)
    }
}
