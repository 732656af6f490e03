use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::DiffError;

const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Gelu,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Gelu => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Gelu),
            _ => None,
        }
    }
}

/// Self-attention stack applied before the dense layers.
///
/// Inputs are read as consecutive groups of `tokens` rows; each group is one
/// sequence. Blocks are residual, single-head, and width-preserving.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSpec {
    pub tokens: usize,
    pub blocks: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub attention: Option<AttentionSpec>,
    /// RMS-normalize attention-block inputs and hidden pre-activations.
    pub norm: bool,
}

impl NetworkSpec {
    pub fn mlp(input_dim: usize, hidden_dims: &[usize], output_dim: usize, activation: Activation) -> Self {
        Self {
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            output_dim,
            activation,
            attention: None,
            norm: false,
        }
    }

    /// Widths of every dense layer boundary, input first.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.output_dim);
        dims
    }

    pub fn validate(&self) -> Result<(), DiffError> {
        let bad = |layer: String, reason: &str| DiffError::InvalidSpec {
            layer,
            reason: reason.to_string(),
        };
        if self.input_dim == 0 {
            return Err(bad("input".into(), "dimension must be at least 1"));
        }
        for (i, &h) in self.hidden_dims.iter().enumerate() {
            if h == 0 {
                return Err(bad(format!("hidden layer {i}"), "dimension must be at least 1"));
            }
        }
        if self.output_dim == 0 {
            return Err(bad("output".into(), "dimension must be at least 1"));
        }
        if let Some(a) = self.attention {
            if a.tokens == 0 {
                return Err(bad("attention".into(), "token count must be at least 1"));
            }
            if a.blocks == 0 {
                return Err(bad("attention".into(), "block count must be at least 1 when enabled"));
            }
        }
        Ok(())
    }

    /// Shapes of every parameter tensor, in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        if let Some(a) = self.attention {
            let d = self.input_dim;
            shapes.push(vec![a.tokens, d]);
            for _ in 0..a.blocks {
                if self.norm {
                    shapes.push(vec![d]);
                }
                for _ in 0..4 {
                    shapes.push(vec![d, d]);
                }
            }
        }
        let dims = self.dims();
        for (i, pair) in dims.windows(2).enumerate() {
            shapes.push(vec![pair[0], pair[1]]);
            shapes.push(vec![pair[1]]);
            if self.norm && i + 2 < dims.len() {
                shapes.push(vec![pair[1]]);
            }
        }
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<Tensor>,
}

/// Per-parameter gradients, aligned with [`Network::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<Tensor>);

impl Gradients {
    pub fn tensors(&self) -> &[Tensor] {
        &self.0
    }

    pub fn global_norm(&self) -> f64 {
        self.0.iter().map(|t| t.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }
}

/// Deterministic fan-in scaled initialization.
pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<Network, DiffError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gain = match spec.activation {
        Activation::Relu | Activation::Gelu => 2.0,
        Activation::Tanh => 1.0,
    };
    let mut normal = |shape: &[usize], std: f64| {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        Tensor::raw(shape.to_vec(), (0..n).map(|_| dist.sample(&mut rng)).collect())
    };
    let mut params = Vec::new();
    if let Some(a) = spec.attention {
        let d = spec.input_dim;
        params.push(normal(&[a.tokens, d], 0.02));
        for _ in 0..a.blocks {
            if spec.norm {
                params.push(Tensor::filled(&[d], 1.0));
            }
            for _ in 0..3 {
                params.push(normal(&[d, d], (1.0 / d as f64).sqrt()));
            }
            // Output projection starts small so each block begins near identity.
            params.push(normal(&[d, d], 0.1 * (1.0 / d as f64).sqrt()));
        }
    }
    let dims = spec.dims();
    for (i, pair) in dims.windows(2).enumerate() {
        let hidden = i + 2 < dims.len();
        let scale = if hidden { gain } else { 1.0 };
        params.push(normal(&[pair[0], pair[1]], (scale / pair[0] as f64).sqrt()));
        params.push(Tensor::zeros(&[pair[1]]));
        if spec.norm && hidden {
            params.push(Tensor::filled(&[pair[1]], 1.0));
        }
    }
    Ok(Network { spec: spec.clone(), params })
}

impl Network {
    /// Assembles a network from explicit parameters, checking every shape.
    pub fn from_params(spec: NetworkSpec, params: Vec<Tensor>) -> Result<Self, DiffError> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        if shapes.len() != params.len() {
            return Err(DiffError::Shape(format!(
                "spec needs {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (i, (s, p)) in shapes.iter().zip(&params).enumerate() {
            if s.as_slice() != p.shape() {
                return Err(DiffError::Shape(format!("parameter {i}: expected {s:?}, got {:?}", p.shape())));
            }
            if !p.is_finite() {
                return Err(DiffError::NonFinite(format!("parameter {i}")));
            }
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Flattened copy of all parameters in storage order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data().iter().copied()).collect()
    }

    pub fn quantize_f32(&mut self) {
        for p in &mut self.params {
            p.quantize_f32();
        }
    }

    /// Pushes every parameter onto `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Builds the forward graph on `tape` using bound parameter handles.
    pub fn forward_on_tape(&self, tape: &mut Tape, params: &[Var], input: Var) -> Result<Var, DiffError> {
        let x = tape.value(input);
        if x.last_dim() != self.spec.input_dim {
            return Err(DiffError::Shape(format!(
                "network input expects last dim {}, got {:?}",
                self.spec.input_dim,
                x.shape()
            )));
        }
        let out_shape = {
            let mut s = x.shape().to_vec();
            *s.last_mut().expect("non-empty shape") = self.spec.output_dim;
            s
        };
        let rows = x.rows();
        let mut h = if x.shape().len() == 2 {
            input
        } else {
            tape.reshape(input, vec![rows, self.spec.input_dim])?
        };
        let mut p = params.iter().copied();
        let mut next = || p.next().expect("parameter list matches spec");
        if let Some(a) = self.spec.attention {
            if !rows.is_multiple_of(a.tokens) {
                return Err(DiffError::Shape(format!(
                    "{rows} input rows do not form sequences of {} tokens",
                    a.tokens
                )));
            }
            let pos = next();
            let reps: Vec<usize> = (0..rows).map(|r| r % a.tokens).collect();
            let pos_rows = tape.gather_rows(pos, &reps)?;
            h = tape.add(h, pos_rows)?;
            for _ in 0..a.blocks {
                let n = if self.spec.norm {
                    let g = next();
                    tape.rms_norm_rows(h, g, NORM_EPS)?
                } else {
                    h
                };
                let (wq, wk, wv, wo) = (next(), next(), next(), next());
                let q = tape.matmul(n, wq)?;
                let k = tape.matmul(n, wk)?;
                let v = tape.matmul(n, wv)?;
                let att = tape.attention(q, k, v, a.tokens)?;
                let proj = tape.matmul(att, wo)?;
                h = tape.add(h, proj)?;
            }
        }
        let layers = self.spec.hidden_dims.len() + 1;
        for i in 0..layers {
            let (w, b) = (next(), next());
            let lin = tape.matmul(h, w)?;
            h = tape.add_row(lin, b)?;
            if i + 1 < layers {
                if self.spec.norm {
                    let g = next();
                    h = tape.rms_norm_rows(h, g, NORM_EPS)?;
                }
                h = match self.spec.activation {
                    Activation::Relu => tape.relu(h),
                    Activation::Tanh => tape.tanh(h),
                    Activation::Gelu => tape.gelu(h),
                };
            }
        }
        if out_shape.len() == 2 {
            Ok(h)
        } else {
            tape.reshape(h, out_shape)
        }
    }

    /// Evaluates the network on `input: [.., input_dim]`.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor, DiffError> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape);
        let x = tape.leaf(input.clone());
        let out = self.forward_on_tape(&mut tape, &params, x)?;
        let value = tape.value(out).clone();
        if !value.is_finite() {
            return Err(DiffError::NonFinite("network output".into()));
        }
        Ok(value)
    }
}

/// Reverse-mode gradients of a scalar built by `loss` from the network's parameters.
pub fn gradients(
    net: &Network,
    loss: impl FnOnce(&mut Tape, &[Var]) -> Result<Var, DiffError>,
) -> Result<(f64, Gradients), DiffError> {
    let mut tape = Tape::new();
    let params = net.bind(&mut tape);
    let out = loss(&mut tape, &params)?;
    let grads = tape.backward(out)?;
    let value = tape.value(out).data()[0];
    let per_param = params
        .iter()
        .zip(net.params())
        .map(|(v, p)| grads.get_or_zeros(*v, p.shape()))
        .collect();
    Ok((value, Gradients(per_param)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_follows_layer_arithmetic() {
        let spec = NetworkSpec::mlp(4, &[8], 4, Activation::Relu);
        assert_eq!(build_network(&spec, 1).unwrap().param_count(), 76);
        assert_eq!(spec.param_count(), 76);
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = NetworkSpec::mlp(2, &[3], 1, Activation::Tanh);
        let a = build_network(&spec, 7).unwrap();
        let b = build_network(&spec, 7).unwrap();
        assert_eq!(a.flat_params(), b.flat_params());
        let c = build_network(&spec, 8).unwrap();
        assert_ne!(a.flat_params(), c.flat_params());
    }

    #[test]
    fn zero_hidden_dim_is_named() {
        let spec = NetworkSpec::mlp(2, &[4, 0], 1, Activation::Relu);
        match build_network(&spec, 0) {
            Err(DiffError::InvalidSpec { layer, .. }) => assert_eq!(layer, "hidden layer 1"),
            other => panic!("expected spec error, got {other:?}"),
        }
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let spec = NetworkSpec::mlp(3, &[], 3, Activation::Relu);
        let net = Network::from_params(spec, vec![Tensor::identity(3), Tensor::zeros(&[3])]).unwrap();
        let x = Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, -7.0]).unwrap();
        assert_eq!(net.forward(&x).unwrap(), x);
    }

    #[test]
    fn zeroed_output_layer_gives_zero_output() {
        let spec = NetworkSpec::mlp(5, &[7], 2, Activation::Gelu);
        let mut net = build_network(&spec, 3).unwrap();
        let n = net.params().len();
        for p in &mut net.params_mut()[n - 2..] {
            *p = Tensor::zeros(p.shape());
        }
        let x = Tensor::matrix(4, 5, (0..20).map(|i| i as f64 * 0.3 - 2.0).collect()).unwrap();
        let y = net.forward(&x).unwrap();
        assert_eq!(y.shape(), &[4, 2]);
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn attention_network_keeps_sequence_shape() {
        let spec = NetworkSpec {
            input_dim: 6,
            hidden_dims: vec![10],
            output_dim: 4,
            activation: Activation::Gelu,
            attention: Some(AttentionSpec { tokens: 3, blocks: 2 }),
            norm: true,
        };
        let net = build_network(&spec, 11).unwrap();
        let x = Tensor::new(vec![2, 3, 6], (0..36).map(|i| (i as f64).cos()).collect()).unwrap();
        assert_eq!(net.forward(&x).unwrap().shape(), &[2, 3, 4]);
        let bad = Tensor::zeros(&[4, 6]);
        assert!(net.forward(&bad).is_err());
    }

    #[test]
    fn input_width_mismatch_reports_shapes() {
        let net = build_network(&NetworkSpec::mlp(3, &[2], 1, Activation::Relu), 0).unwrap();
        let err = net.forward(&Tensor::zeros(&[2, 4])).unwrap_err().to_string();
        assert!(err.contains('3') && err.contains("[2, 4]"), "{err}");
    }
}
