use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

/// Feed-forward network with ReLU hidden layers and a linear output layer.
///
/// Parameters live in one flat buffer. Layer `l` stores its weight matrix
/// `(fan_in, fan_out)` row-major, followed by its bias vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Activations recorded by [`Mlp::forward_tape`] for a later backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    // activations[0] is the input, activations[l] the output of layer l
    activations: Vec<Array2<f64>>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("tape always holds the input")
    }
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// Glorot-uniform weights and zero biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        let mut net = Self::zeros(sizes);
        let mut off = 0;
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut net.params[off..off + fan_in * fan_out] {
                *p = rng.gen_range(-limit..=limit);
            }
            off += fan_in * fan_out + fan_out;
        }
        net
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "a network needs at least input and output sizes");
        assert!(sizes.iter().all(|&n| n > 0), "layer sizes must be positive");
        Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; param_count(sizes)],
        }
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        let expected = param_count(sizes);
        if params.len() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                got: params.len(),
            });
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn layer(&self, l: usize, off: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
        let w = ArrayView2::from_shape((fi, fo), &self.params[off..off + fi * fo]).unwrap();
        let b = ArrayView1::from(&self.params[off + fi * fo..off + fi * fo + fo]);
        (w, b)
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        Ok(())
    }

    /// Batched inference.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let n_layers = self.sizes.len() - 1;
        let mut off = 0;
        let mut h: Array2<f64> = x.to_owned();
        for l in 0..n_layers {
            let (w, b) = self.layer(l, off);
            let mut next = h.dot(&w);
            next += &b;
            if l + 1 < n_layers {
                next.mapv_inplace(|v| v.max(0.0));
            }
            h = next;
            off += w.len() + b.len();
        }
        Ok(h)
    }

    /// Single-input convenience wrapper around [`Mlp::forward`].
    pub fn forward_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x).unwrap();
        Ok(self.forward(view)?.into_raw_vec_and_offset().0)
    }

    /// Forward pass that keeps the activations needed by [`Mlp::backward`].
    pub fn forward_tape(&self, x: ArrayView2<f64>) -> Result<Tape> {
        self.check_input(&x)?;
        let n_layers = self.sizes.len() - 1;
        let mut activations = Vec::with_capacity(n_layers + 1);
        activations.push(x.to_owned());
        let mut off = 0;
        for l in 0..n_layers {
            let (w, b) = self.layer(l, off);
            let mut next = activations[l].dot(&w);
            next += &b;
            if l + 1 < n_layers {
                next.mapv_inplace(|v| v.max(0.0));
            }
            activations.push(next);
            off += w.len() + b.len();
        }
        Ok(Tape { activations })
    }

    /// Reverse pass. `grad_out` is dLoss/dOutput with the same shape as the
    /// taped output. Returns the flat parameter gradient and dLoss/dInput.
    pub fn backward(&self, tape: &Tape, grad_out: ArrayView2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
        let out = tape.output();
        if grad_out.dim() != out.dim() || tape.activations.len() != self.sizes.len() {
            return Err(Error::ShapeMismatch {
                expected: out.len(),
                got: grad_out.len(),
            });
        }
        let n_layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for l in 0..n_layers {
            offsets.push(off);
            off += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut delta = grad_out.to_owned();
        for l in (0..n_layers).rev() {
            let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
            let a_in = &tape.activations[l];
            let gw = a_in.t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            let o = offsets[l];
            for (dst, v) in grads[o..o + fi * fo].iter_mut().zip(gw.iter()) {
                *dst = *v;
            }
            for (dst, v) in grads[o + fi * fo..o + fi * fo + fo].iter_mut().zip(gb.iter()) {
                *dst = *v;
            }
            let (w, _) = self.layer(l, o);
            let mut prev = delta.dot(&w.t());
            if l > 0 {
                // ReLU mask: the stored activation is positive exactly where the pre-activation was
                ndarray::Zip::from(&mut prev)
                    .and(a_in)
                    .for_each(|d, &a| {
                        if a <= 0.0 {
                            *d = 0.0
                        }
                    });
            }
            delta = prev;
        }
        Ok((grads, delta))
    }

    /// Copies `column` of a batched output into a vector.
    pub fn column(out: &Array2<f64>, column: usize) -> Array1<f64> {
        out.slice(s![.., column]).to_owned()
    }
}
