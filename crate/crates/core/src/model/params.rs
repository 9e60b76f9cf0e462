use std::collections::HashMap;

use rand::Rng;

use super::{ModelConfig, ModelError};
use crate::tensor::{Real, Tensor};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Ones,
    Zeros,
    /// Sine/cosine table with the same per-coordinate RMS as `Normal`.
    Sinusoid,
}

fn sinusoid<T: Real>(rows: usize, d: usize) -> Tensor<T> {
    let scale = INIT_STD * std::f64::consts::SQRT_2;
    let mut data = Vec::with_capacity(rows * d);
    for p in 0..rows {
        for j in 0..d {
            let freq = 10000f64.powf(-((j / 2 * 2) as f64) / d as f64);
            let angle = p as f64 * freq;
            data.push(T::of(scale * if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::from_vec(vec![rows, d], data)
}

fn layout(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, v, f) = (c.d_model, c.vocab_size, c.ffn_dim);
    let mut out: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
    let norm = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        push(format!("{p}.gain"), vec![d], Init::Ones);
        push(format!("{p}.bias"), vec![d], Init::Zeros);
    };
    let attn = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        for w in ["wq", "wk", "wv", "wo"] {
            push(format!("{p}.{w}"), vec![d, d], Init::Normal);
        }
    };
    let ffn = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        push(format!("{p}.w1"), vec![d, f], Init::Normal);
        push(format!("{p}.b1"), vec![f], Init::Zeros);
        push(format!("{p}.w2"), vec![f, d], Init::Normal);
        push(format!("{p}.b2"), vec![d], Init::Zeros);
    };

    push("embed.tokens".into(), vec![v, d], Init::Normal);
    push("encoder.pos".into(), vec![c.max_len, d], Init::Sinusoid);
    for l in 0..c.encoder_layers {
        norm(&mut push, &format!("encoder.{l}.ln1"));
        attn(&mut push, &format!("encoder.{l}.attn"));
        norm(&mut push, &format!("encoder.{l}.ln2"));
        ffn(&mut push, &format!("encoder.{l}.ffn"));
    }
    norm(&mut push, "encoder.ln");
    push("fusion.w_h".into(), vec![c.vision_dim, d], Init::Normal);
    push("fusion.w_l".into(), vec![d, d], Init::Normal);
    push("fusion.w_v".into(), vec![d, d], Init::Normal);
    if c.gate_bias {
        push("fusion.gate_bias".into(), vec![d], Init::Zeros);
    }
    push("decoder.pos".into(), vec![c.max_len, d], Init::Sinusoid);
    for l in 0..c.decoder_layers {
        norm(&mut push, &format!("decoder.{l}.ln1"));
        attn(&mut push, &format!("decoder.{l}.self_attn"));
        norm(&mut push, &format!("decoder.{l}.ln2"));
        attn(&mut push, &format!("decoder.{l}.cross_attn"));
        norm(&mut push, &format!("decoder.{l}.ln3"));
        ffn(&mut push, &format!("decoder.{l}.ffn"));
    }
    norm(&mut push, "decoder.ln");
    push("output.w".into(), vec![d, v], Init::Normal);
    out
}

/// Named parameter tensors in a fixed order determined by the config.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters<T: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ModelParameters<T> {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let (names, tensors) = layout(config)
            .into_iter()
            .map(|(name, shape, init)| {
                let t = match init {
                    Init::Normal => Tensor::randn(shape, INIT_STD, rng),
                    Init::Ones => Tensor::filled(shape, T::one()),
                    Init::Zeros => Tensor::zeros(shape),
                    Init::Sinusoid => sinusoid(shape[0], shape[1]),
                };
                (name, t.with_requires_grad(true))
            })
            .unzip();
        Self::assemble(names, tensors)
    }

    fn assemble(names: Vec<String>, tensors: Vec<Tensor<T>>) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        ModelParameters { names, tensors, index }
    }

    /// Checks that `named` holds exactly the parameters `config` calls for,
    /// in order and with matching shapes.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self, ModelError> {
        let expected = layout(config);
        if expected.len() != named.len() {
            return Err(ModelError::Parameter {
                name: "*".into(),
                message: format!("expected {} tensors, got {}", expected.len(), named.len()),
            });
        }
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, shape, _), (got_name, t)) in expected.into_iter().zip(named) {
            let fail = |message: String| ModelError::Parameter {
                name: got_name.clone(),
                message,
            };
            if name != got_name {
                return Err(fail(format!("expected parameter {name}")));
            }
            if t.shape() != shape.as_slice() {
                return Err(fail(format!("shape {:?}, expected {shape:?}", t.shape())));
            }
            if !t.is_finite() {
                return Err(fail("non-finite value".into()));
            }
            names.push(name);
            tensors.push(t.with_requires_grad(true));
        }
        Ok(Self::assemble(names, tensors))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn cast<U: Real>(&self) -> ModelParameters<U> {
        ModelParameters {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Euclidean norm of all gradients together.
    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(|t| t.grad())
            .flat_map(|g| g.iter())
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = T::of(max_norm / norm);
            for t in &mut self.tensors {
                if let Some(g) = t.grad_mut() {
                    g.iter_mut().for_each(|x| *x *= s);
                }
            }
        }
        norm
    }
}
