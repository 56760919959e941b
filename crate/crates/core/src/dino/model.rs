//! Feed-forward encoder and the DINO projection head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Param, Rng, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub head_hidden_dim: usize,
    pub head_bottleneck_dim: usize,
    pub head_output_dim: usize,
}

impl EncoderConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: vec![128],
            embed_dim: 32,
            head_hidden_dim: 128,
            head_bottleneck_dim: 64,
            head_output_dim: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.input_dim, self.embed_dim, self.head_hidden_dim, self.head_bottleneck_dim, self.head_output_dim];
        if dims.iter().chain(&self.hidden_dims).any(|&d| d == 0) {
            return Err(Error::InvalidConfig("encoder dims must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    /// He-normal weights for ReLU inputs, zero bias.
    pub fn init(input: usize, output: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / input as f64).sqrt();
        Self {
            weight: Param::new(Tensor::matrix(output, input, rng.normal_vec(output * input, std))),
            bias: Param::new(Tensor::zeros(&[output])),
        }
    }
}

/// Linear layers with ReLU between them (none after the last).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn init(dims: &[usize], rng: &mut Rng) -> Self {
        Self { layers: dims.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect() }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.value.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.value.rows()
    }

    fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    /// Forward on the tape using parameter handles in `params()` order.
    fn forward(&self, tape: &mut Tape, handles: &[Var], x: Var) -> Var {
        let mut h = x;
        for (i, _) in self.layers.iter().enumerate() {
            h = tape.linear(h, handles[2 * i], handles[2 * i + 1]);
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        h
    }
}

/// Encoder trunk: observation → speaker embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub mlp: Mlp,
}

impl Encoder {
    pub fn init(cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        let mut dims = vec![cfg.input_dim];
        dims.extend(&cfg.hidden_dims);
        dims.push(cfg.embed_dim);
        Self { mlp: Mlp::init(&dims, rng) }
    }

    pub fn params(&self) -> Vec<&Param> {
        self.mlp.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.mlp.params_mut()
    }

    pub fn forward(&self, tape: &mut Tape, handles: &[Var], x: Var) -> Var {
        self.mlp.forward(tape, handles, x)
    }

    /// Embeddings for a row batch `[n, input_dim]`, no gradient.
    pub fn embed_rows(&self, x: &Tensor) -> Vec<Vec<f64>> {
        let mut tape = Tape::new();
        let handles = register(&mut tape, &self.params(), false);
        let xv = tape.constant(x);
        let e = self.forward(&mut tape, &handles, xv);
        let (_, d) = tape.shape(e);
        tape.value(e).chunks(d).map(|r| r.to_vec()).collect()
    }

    pub fn embed_all(&self, inputs: &[&Tensor]) -> Vec<Vec<f64>> {
        let d = self.mlp.input_dim();
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(256) {
            let mut vals = Vec::with_capacity(chunk.len() * d);
            chunk.iter().for_each(|t| vals.extend_from_slice(t.values()));
            out.extend(self.embed_rows(&Tensor::matrix(chunk.len(), d, vals)));
        }
        out
    }
}

/// Puts each parameter on the tape, trainable or constant.
pub fn register(tape: &mut Tape, params: &[&Param], trainable: bool) -> Vec<Var> {
    params.iter().map(|p| if trainable { tape.param(&p.value) } else { tape.constant(&p.value) }).collect()
}

/// Adds the tape gradients of `handles` into the parameters.
pub fn collect_grads(params: Vec<&mut Param>, handles: &[Var], grads: &crate::numkit::Grads) {
    for (p, &h) in params.into_iter().zip(handles) {
        if let Some(g) = grads.get_slice(h) {
            p.accumulate(g);
        }
    }
}

/// Three-layer MLP, ℓ2 normalization, then a weight-normalized linear layer
/// whose row `i` is `g_i · v_i / ‖v_i‖`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead {
    pub mlp: Mlp,
    pub proto_direction: Param,
    pub proto_gain: Param,
}

impl ProjectionHead {
    pub fn init(cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        let mlp = Mlp::init(&[cfg.embed_dim, cfg.head_hidden_dim, cfg.head_hidden_dim, cfg.head_bottleneck_dim], rng);
        let (k, b) = (cfg.head_output_dim, cfg.head_bottleneck_dim);
        Self {
            mlp,
            proto_direction: Param::new(Tensor::matrix(k, b, rng.normal_vec(k * b, 1.0))),
            proto_gain: Param::new(Tensor::filled(&[k], 1.0)),
        }
    }

    fn params(&self) -> Vec<&Param> {
        let mut v = self.mlp.params();
        v.push(&self.proto_direction);
        v.push(&self.proto_gain);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.mlp.params_mut();
        v.push(&mut self.proto_direction);
        v.push(&mut self.proto_gain);
        v
    }

    fn forward(&self, tape: &mut Tape, handles: &[Var], e: Var) -> Var {
        let n = handles.len();
        let h = self.mlp.forward(tape, &handles[..n - 2], e);
        let h = tape.normalize_rows(h);
        let dir = tape.normalize_rows(handles[n - 2]);
        let w = tape.scale_rows(dir, handles[n - 1]);
        tape.matmul_nt(h, w)
    }
}

/// Encoder plus projection head; the network used by both DINO student and
/// teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DinoNet {
    pub encoder: Encoder,
    pub head: ProjectionHead,
}

/// Tape outputs of a [`DinoNet`] forward pass.
pub struct DinoOutputs {
    pub handles: Vec<Var>,
    pub embeddings: Var,
    pub logits: Var,
}

impl DinoNet {
    pub fn init(cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        let encoder = Encoder::init(cfg, &mut rng.split(1));
        let head = ProjectionHead::init(cfg, &mut rng.split(2));
        Self { encoder, head }
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.encoder.params();
        v.extend(self.head.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.encoder.params_mut();
        v.extend(self.head.params_mut());
        v
    }

    pub fn forward_tape(&self, tape: &mut Tape, x: Var, trainable: bool) -> DinoOutputs {
        let handles = register(tape, &self.params(), trainable);
        let ne = self.encoder.params().len();
        let embeddings = self.encoder.forward(tape, &handles[..ne], x);
        let logits = self.head.forward(tape, &handles[ne..], embeddings);
        DinoOutputs { handles, embeddings, logits }
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }
}

/// Single-view forward: `(embedding, head logits)`.
pub fn forward(net: &DinoNet, view: &Tensor, cfg: &EncoderConfig) -> Result<(Tensor, Tensor)> {
    if view.len() != cfg.input_dim {
        return Err(Error::ShapeMismatch { expected: vec![cfg.input_dim], got: view.shape().to_vec() });
    }
    let mut tape = Tape::new();
    let x = tape.constant(&Tensor::matrix(1, cfg.input_dim, view.values().to_vec()));
    let out = net.forward_tape(&mut tape, x, false);
    Ok((Tensor::vector(tape.value(out.embeddings).to_vec()), Tensor::vector(tape.value(out.logits).to_vec())))
}
