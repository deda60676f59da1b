use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DynamoError, Result};
use crate::matrix::Matrix;

/// Hidden-layer nonlinearity. The output layer is always linear.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Tanh,
}

impl Activation {
    pub const fn leaky_relu() -> Self {
        Activation::LeakyRelu { slope: 0.01 }
    }

    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    z
                } else {
                    slope * z
                }
            }
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative given the pre-activation `z` and activation `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Fully connected network with a scalar output.
///
/// Parameters live in one flat buffer, layer by layer, each layer storing
/// its `out x in` weight matrix row-major followed by its biases. Optimizers
/// and the critic's clipping operate directly on that buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
    offsets: Vec<usize>,
}

/// Per-layer activations recorded during a forward pass.
struct Trace {
    /// `pre[l]`: pre-activations of layer `l`.
    pre: Vec<Vec<f64>>,
    /// `post[0]` is the input; `post[l + 1]` the output of layer `l`.
    post: Vec<Vec<f64>>,
}

impl Mlp {
    /// A network with all parameters zero.
    pub fn zeros(dims: &[usize], activation: Activation) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(DynamoError::precondition(format!(
                "layer dims must have >= 2 positive entries, got {dims:?}"
            )));
        }
        if *dims.last().unwrap() != 1 {
            return Err(DynamoError::precondition("output dimension must be 1"));
        }
        let mut offsets = Vec::with_capacity(dims.len() - 1);
        let mut total = 0;
        for w in dims.windows(2) {
            offsets.push(total);
            total += (w[0] + 1) * w[1];
        }
        Ok(Mlp {
            dims: dims.to_vec(),
            activation,
            params: vec![0.0; total],
            offsets,
        })
    }

    /// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for
    /// weights and biases alike.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(dims, activation)?;
        for l in 0..net.num_layers() {
            let bound = 1.0 / (net.dims[l] as f64).sqrt();
            let (start, end) = net.layer_range(l);
            for p in &mut net.params[start..end] {
                *p = rng.random_range(-bound..=bound);
            }
        }
        Ok(net)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer_range(&self, l: usize) -> (usize, usize) {
        let start = self.offsets[l];
        (start, start + (self.dims[l] + 1) * self.dims[l + 1])
    }

    /// Weights (`out x in`, row-major) and biases of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (start, end) = self.layer_range(l);
        let nw = self.dims[l] * self.dims[l + 1];
        let slice = &self.params[start..end];
        (&slice[..nw], &slice[nw..])
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let (start, end) = self.layer_range(l);
        let nw = self.dims[l] * self.dims[l + 1];
        let slice = &mut self.params[start..end];
        slice.split_at_mut(nw)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dims[0] {
            return Err(DynamoError::domain(format!(
                "input has {} entries, network expects {}",
                x.len(),
                self.dims[0]
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        Ok(self.forward_unchecked(x))
    }

    pub(crate) fn forward_unchecked(&self, x: &[f64]) -> f64 {
        let mut cur = x.to_vec();
        let last = self.num_layers() - 1;
        for l in 0..=last {
            let (w, b) = self.layer(l);
            let n_in = self.dims[l];
            let mut next = b.to_vec();
            for (o, out) in next.iter_mut().enumerate() {
                let row = &w[o * n_in..(o + 1) * n_in];
                *out += row.iter().zip(&cur).map(|(a, c)| a * c).sum::<f64>();
            }
            if l != last {
                for v in &mut next {
                    *v = self.activation.apply(*v);
                }
            }
            cur = next;
        }
        cur[0]
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let layers = self.num_layers();
        let mut pre = Vec::with_capacity(layers);
        let mut post = Vec::with_capacity(layers + 1);
        post.push(x.to_vec());
        for l in 0..layers {
            let (w, b) = self.layer(l);
            let n_in = self.dims[l];
            let input = &post[l];
            let z: Vec<f64> = b
                .iter()
                .enumerate()
                .map(|(o, bias)| {
                    bias + w[o * n_in..(o + 1) * n_in]
                        .iter()
                        .zip(input)
                        .map(|(a, c)| a * c)
                        .sum::<f64>()
                })
                .collect();
            let a = if l + 1 == layers {
                z.clone()
            } else {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            };
            pre.push(z);
            post.push(a);
        }
        Trace { pre, post }
    }

    /// Backpropagates `upstream = dL/d(output)`. Accumulates parameter
    /// gradients into `param_grad` when given, and returns `dL/dx`.
    fn backward(&self, tr: &Trace, upstream: f64, mut param_grad: Option<&mut [f64]>) -> Vec<f64> {
        let layers = self.num_layers();
        // delta = dL/dz for the current layer
        let mut delta = vec![upstream];
        for l in (0..layers).rev() {
            let n_in = self.dims[l];
            let (w, _) = self.layer(l);
            let input = &tr.post[l];
            if let Some(g) = param_grad.as_deref_mut() {
                let (start, _) = self.layer_range(l);
                let nw = n_in * self.dims[l + 1];
                for (o, &dz) in delta.iter().enumerate() {
                    let row = &mut g[start + o * n_in..start + (o + 1) * n_in];
                    for (gi, &xi) in row.iter_mut().zip(input) {
                        *gi += dz * xi;
                    }
                    g[start + nw + o] += dz;
                }
            }
            let mut d_input = vec![0.0; n_in];
            for (o, &dz) in delta.iter().enumerate() {
                for (di, &wi) in d_input.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *di += dz * wi;
                }
            }
            if l > 0 {
                let z = &tr.pre[l - 1];
                let a = &tr.post[l];
                for (i, di) in d_input.iter_mut().enumerate() {
                    *di *= self.activation.derivative(z[i], a[i]);
                }
            }
            delta = d_input;
        }
        delta
    }

    /// Exact gradient of the output with respect to the input.
    pub fn grad_input(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.grad_input_unchecked(x))
    }

    pub(crate) fn grad_input_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let tr = self.trace(x);
        self.backward(&tr, 1.0, None)
    }

    /// Output and input-gradient from one forward/backward pass.
    pub(crate) fn value_and_grad_input(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let tr = self.trace(x);
        let out = tr.post[self.num_layers()][0];
        (out, self.backward(&tr, 1.0, None))
    }

    /// Adds `scale * d(output)/d(params)` at `x` into `grad`; returns the output.
    pub fn accumulate_param_grad(&self, x: &[f64], scale: f64, grad: &mut [f64]) -> Result<f64> {
        self.check_input(x)?;
        if grad.len() != self.params.len() {
            return Err(DynamoError::domain("gradient buffer does not match parameter count"));
        }
        let tr = self.trace(x);
        let out = tr.post[self.num_layers()][0];
        self.backward(&tr, scale, Some(grad));
        Ok(out)
    }

    /// Batched [`Mlp::accumulate_param_grad`]: adds
    /// `sum_s scales[s] * d(output(x_s))/d(params)` into `grad` and returns
    /// the outputs. Processes the batch layer by layer.
    pub fn accumulate_param_grad_batch(&self, xs: &Matrix, scales: &[f64], grad: &mut [f64]) -> Result<Vec<f64>> {
        if xs.cols() != self.dims[0] {
            return Err(DynamoError::domain(format!(
                "input has {} entries, network expects {}",
                xs.cols(),
                self.dims[0]
            )));
        }
        if scales.len() != xs.rows() || grad.len() != self.params.len() {
            return Err(DynamoError::domain("batch gradient buffers do not match"));
        }
        let n = xs.rows();
        let layers = self.num_layers();
        let mut pre: Vec<Vec<f64>> = Vec::with_capacity(layers);
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(layers);
        for l in 0..layers {
            let (w, b) = self.layer(l);
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let input: &[f64] = if l == 0 { xs.as_slice() } else { &post[l - 1] };
            let mut z = vec![0.0; n * n_out];
            for s in 0..n {
                let x = &input[s * n_in..(s + 1) * n_in];
                for o in 0..n_out {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    z[s * n_out + o] = b[o] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
                }
            }
            let a = if l + 1 == layers {
                z.clone()
            } else {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            };
            pre.push(z);
            post.push(a);
        }
        let outputs = post[layers - 1].clone();
        let mut delta = scales.to_vec();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let (w, _) = self.layer(l);
            let input: &[f64] = if l == 0 { xs.as_slice() } else { &post[l - 1] };
            let (start, _) = self.layer_range(l);
            let nw = n_in * n_out;
            for s in 0..n {
                let x = &input[s * n_in..(s + 1) * n_in];
                for o in 0..n_out {
                    let dz = delta[s * n_out + o];
                    if dz == 0.0 {
                        continue;
                    }
                    let row = &mut grad[start + o * n_in..start + (o + 1) * n_in];
                    for (gi, &xi) in row.iter_mut().zip(x) {
                        *gi += dz * xi;
                    }
                    grad[start + nw + o] += dz;
                }
            }
            if l == 0 {
                break;
            }
            let mut d_input = vec![0.0; n * n_in];
            for s in 0..n {
                let di = &mut d_input[s * n_in..(s + 1) * n_in];
                for o in 0..n_out {
                    let dz = delta[s * n_out + o];
                    if dz == 0.0 {
                        continue;
                    }
                    for (d, &wi) in di.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                        *d += dz * wi;
                    }
                }
                let z = &pre[l - 1][s * n_in..(s + 1) * n_in];
                let a = &post[l - 1][s * n_in..(s + 1) * n_in];
                for i in 0..n_in {
                    di[i] *= self.activation.derivative(z[i], a[i]);
                }
            }
            delta = d_input;
        }
        Ok(outputs)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..self.num_layers() {
            let (w, b) = self.layer(l);
            weights.push(w.to_vec());
            biases.push(b.to_vec());
        }
        Checkpoint {
            layer_dims: self.dims.clone(),
            activation: self.activation,
            weights,
            biases,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut net = Mlp::zeros(&ck.layer_dims, ck.activation)?;
        if ck.weights.len() != net.num_layers() || ck.biases.len() != net.num_layers() {
            return Err(DynamoError::domain("checkpoint layer count mismatch"));
        }
        for l in 0..net.num_layers() {
            let (w, b) = net.layer_mut(l);
            if ck.weights[l].len() != w.len() || ck.biases[l].len() != b.len() {
                return Err(DynamoError::domain(format!("checkpoint layer {l} has wrong shape")));
            }
            w.copy_from_slice(&ck.weights[l]);
            b.copy_from_slice(&ck.biases[l]);
        }
        Ok(net)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_checkpoint())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        Self::from_checkpoint(&ck)
    }
}

/// On-disk network format. Weights are flattened row-major per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use approx::assert_abs_diff_eq;

    fn linear_sum() -> Mlp {
        let mut net = Mlp::zeros(&[2, 1], Activation::leaky_relu()).unwrap();
        let (w, _) = net.layer_mut(0);
        w.copy_from_slice(&[1.0, 1.0]);
        net
    }

    #[test]
    fn batch_gradient_matches_per_sample_sum() {
        let net = Mlp::new(&[3, 5, 4, 1], Activation::leaky_relu(), &mut seeded(8)).unwrap();
        let xs = Matrix::from_rows(&[[0.3, -1.0, 2.0], [1.5, 0.2, -0.7], [-0.4, -0.4, 0.9]]).unwrap();
        let scales = [0.5, -1.25, 2.0];
        let mut single = vec![0.0; net.num_params()];
        let mut outs = Vec::new();
        for (x, &s) in xs.iter_rows().zip(&scales) {
            outs.push(net.accumulate_param_grad(x, s, &mut single).unwrap());
        }
        let mut batch = vec![0.0; net.num_params()];
        let bo = net.accumulate_param_grad_batch(&xs, &scales, &mut batch).unwrap();
        for (a, b) in outs.iter().zip(&bo) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
        for (a, b) in single.iter().zip(&batch) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-13);
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[3, 4, 1], Activation::Tanh).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), 0.0);
    }

    #[test]
    fn single_linear_layer() {
        let net = linear_sum();
        assert_eq!(net.forward(&[2.0, 3.0]).unwrap(), 5.0);
        assert_eq!(net.grad_input(&[7.0, -1.0]).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn parameter_count() {
        let net = Mlp::zeros(&[5, 7, 3, 1], Activation::Tanh).unwrap();
        assert_eq!(net.num_params(), 6 * 7 + 8 * 3 + 4);
    }

    #[test]
    fn dimension_mismatch_is_domain_error() {
        let net = linear_sum();
        assert!(matches!(net.forward(&[1.0]), Err(DynamoError::Domain(_))));
        assert!(matches!(net.grad_input(&[1.0, 2.0, 3.0]), Err(DynamoError::Domain(_))));
    }

    #[test]
    fn leaky_slope_scales_negative_path() {
        // x -> hidden (w=1) -> out (w=1); negative pre-activation follows slope 0.2
        let mut net = Mlp::zeros(&[1, 1, 1], Activation::LeakyRelu { slope: 0.2 }).unwrap();
        net.layer_mut(0).0[0] = 1.0;
        net.layer_mut(1).0[0] = 1.0;
        assert_abs_diff_eq!(net.grad_input(&[-1.5]).unwrap()[0], 0.2);
        assert_abs_diff_eq!(net.grad_input(&[1.5]).unwrap()[0], 1.0);
        assert_abs_diff_eq!(net.forward(&[-1.5]).unwrap(), -0.3, epsilon = 1e-15);
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let net = Mlp::new(&[16, 8, 1], Activation::Tanh, &mut seeded(3)).unwrap();
        let (w0, b0) = net.layer(0);
        assert!(w0.iter().chain(b0).all(|p| p.abs() <= 0.25));
        let (w1, b1) = net.layer(1);
        assert!(w1.iter().chain(b1).all(|p| p.abs() <= 1.0 / 8f64.sqrt()));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let net = Mlp::new(&[3, 5, 4, 1], Activation::leaky_relu(), &mut seeded(11)).unwrap();
        let back = Mlp::from_json(&net.to_json().unwrap()).unwrap();
        assert_eq!(back, net);
        let bits: Vec<u64> = net.params().iter().map(|p| p.to_bits()).collect();
        let back_bits: Vec<u64> = back.params().iter().map(|p| p.to_bits()).collect();
        assert_eq!(bits, back_bits);
    }
}
