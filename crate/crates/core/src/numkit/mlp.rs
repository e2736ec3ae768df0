use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::linalg::{check_len, Mat};
use crate::numkit::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `h`.
    fn deriv(self, z: f64, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    w: Mat,
    b: Vec<f64>,
}

/// Fully connected network: hidden layers use `activation`, the last layer
/// is linear and its output is multiplied by `out_scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    layers: Vec<Dense>,
    activation: Activation,
    out_scale: f64,
}

/// Intermediate values kept by the forward pass for backpropagation.
struct Tape {
    // inputs to each layer (x, h1, h2, ...)
    inputs: Vec<Vec<f64>>,
    // pre-activations of hidden layers
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl Mlp {
    /// Random init with `N(0, 1/fan_in)` weights and zero biases.
    pub fn new(
        widths: &[usize],
        activation: Activation,
        out_scale: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = (1.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| std * rng.normal()).collect();
                Dense {
                    w: Mat::from_vec(fan_out, fan_in, data).expect("sized above"),
                    b: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self {
            widths: widths.to_vec(),
            layers,
            activation,
            out_scale,
        })
    }

    /// Same as [`Mlp::new`] with the final layer's weights and bias zeroed,
    /// so the network outputs exactly zero for every input.
    pub fn zero_output(
        widths: &[usize],
        activation: Activation,
        out_scale: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let mut net = Self::new(widths, activation, out_scale, rng)?;
        let last = net.layers.last_mut().expect("at least one layer");
        last.w.as_mut_slice().iter_mut().for_each(|x| *x = 0.0);
        last.b.iter_mut().for_each(|x| *x = 0.0);
        Ok(net)
    }

    /// Single linear layer `y = W x + b`.
    pub fn linear(w: Mat, b: Vec<f64>) -> Result<Self> {
        check_len(w.rows(), b.len())?;
        Ok(Self {
            widths: vec![w.cols(), w.rows()],
            layers: vec![Dense { w, b }],
            activation: Activation::Tanh,
            out_scale: 1.0,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn out_scale(&self) -> f64 {
        self.out_scale
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.as_slice().len() + l.b.len())
            .sum()
    }

    /// Parameters flattened layer by layer as `[W (row-major), b]`.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.w.as_slice());
            out.extend_from_slice(&l.b);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        check_len(self.num_params(), flat.len())?;
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.w.as_slice().len();
            l.w.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
            let nb = l.b.len();
            l.b.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.run(x)?.output)
    }

    fn run(&self, x: &[f64]) -> Result<Tape> {
        check_len(self.input_width(), x.len())?;
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n - 1);
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.w.matvec(&h)?;
            z.iter_mut().zip(&layer.b).for_each(|(zi, bi)| *zi += bi);
            inputs.push(h);
            if i + 1 < n {
                h = z.iter().map(|&v| self.activation.apply(v)).collect();
                pre.push(z);
            } else {
                h = z.into_iter().map(|v| v * self.out_scale).collect();
            }
        }
        Ok(Tape {
            inputs,
            pre,
            output: h,
        })
    }

    /// Gradients of `upstream · f(x)` with respect to the parameters (same
    /// flat layout as [`Mlp::params`]) and to the input.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut grads = vec![0.0; self.num_params()];
        let input_grad = self.backward_into(x, upstream, 1.0, &mut grads)?;
        Ok((grads, input_grad))
    }

    /// Accumulates `scale ·` parameter gradients into `grads` and returns the
    /// input gradient (unscaled).
    pub fn backward_into(
        &self,
        x: &[f64],
        upstream: &[f64],
        scale: f64,
        grads: &mut [f64],
    ) -> Result<Vec<f64>> {
        check_len(self.output_width(), upstream.len())?;
        check_len(self.num_params(), grads.len())?;
        let tape = self.run(x)?;
        let n = self.layers.len();
        let offsets = self.layer_offsets();
        let mut delta: Vec<f64> = upstream.iter().map(|u| u * self.out_scale).collect();
        for i in (0..n).rev() {
            let layer = &self.layers[i];
            let input = &tape.inputs[i];
            let off = offsets[i];
            let nw = layer.w.as_slice().len();
            {
                let (gw, rest) = grads[off..].split_at_mut(nw);
                let gb = &mut rest[..layer.b.len()];
                let cols = layer.w.cols();
                for (r, d) in delta.iter().enumerate() {
                    let s = scale * d;
                    gb[r] += s;
                    for (g, h) in gw[r * cols..(r + 1) * cols].iter_mut().zip(input) {
                        *g += s * h;
                    }
                }
            }
            let mut back = layer.w.matvec_t(&delta)?;
            if i > 0 {
                let z = &tape.pre[i - 1];
                for ((b, zi), hi) in back.iter_mut().zip(z).zip(input) {
                    *b *= self.activation.deriv(*zi, *hi);
                }
            }
            delta = back;
        }
        Ok(delta)
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offs.push(off);
            off += l.w.as_slice().len() + l.b.len();
        }
        offs
    }
}
