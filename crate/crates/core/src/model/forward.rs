use std::ops::Range;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::{Rng, RngCore};

use super::{ModelConfig, ModelError, ModelParameters};
use crate::data::{detokenize, VisionFeatures, Vocabulary, BOS, EOS, PAD};
use crate::fusion::{FusionIds, FusionNodes, FusionTrace};
use crate::tensor::{log_softmax_at, AttentionLayout, Graph, NodeId, Real, Tensor, TensorError};

const LN_EPS: f64 = 1e-5;

/// Training mode draws dropout masks from the given stream.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut dyn RngCore),
}

#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub input_ids: &'a [usize],
    pub features: &'a VisionFeatures,
}

/// `target_ids` is the full decoder output and normally ends with EOS.
#[derive(Clone, Copy, Debug)]
pub struct TrainingExample<'a> {
    pub input_ids: &'a [usize],
    pub features: &'a VisionFeatures,
    pub target_ids: &'a [usize],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Chosen tokens, including the final EOS when one was produced.
    pub ids: Vec<usize>,
    pub text: String,
    pub total_logprob: f64,
    /// Whether generation stopped at EOS rather than at the budget.
    pub finished: bool,
}

/// Lazily records model parameters into a graph, once per parameter.
pub struct Binding {
    nodes: Vec<Option<NodeId>>,
    track: bool,
}

impl Binding {
    /// `track` selects trainable leaves over constants.
    pub fn new<T: Real>(params: &ModelParameters<T>, track: bool) -> Self {
        Binding {
            nodes: vec![None; params.len()],
            track,
        }
    }

    /// Uses already-recorded nodes, one per parameter in layout order.
    pub fn from_nodes(nodes: &[NodeId]) -> Self {
        Binding {
            nodes: nodes.iter().copied().map(Some).collect(),
            track: true,
        }
    }

    fn node<T: Real>(&mut self, g: &mut Graph<T>, params: &ModelParameters<T>, name: &str) -> NodeId {
        let i = params
            .position(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        let track = self.track;
        *self.nodes[i].get_or_insert_with(|| {
            let t = &params.tensors()[i];
            if track {
                g.param(t)
            } else {
                g.constant(t.clone())
            }
        })
    }

    /// Adds the gradients held by `g` into the matching parameter tensors.
    pub fn accumulate_grads<T: Real>(&self, g: &Graph<T>, params: &mut ModelParameters<T>) -> Result<(), TensorError> {
        for (slot, t) in self.nodes.iter().zip(params.tensors_mut()) {
            if let Some(grad) = slot.and_then(|id| g.grad(id)) {
                t.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }
}

fn ranges(lens: impl IntoIterator<Item = usize>) -> Vec<Range<usize>> {
    let mut start = 0;
    lens.into_iter()
        .map(|n| {
            let r = start..start + n;
            start += n;
            r
        })
        .collect()
}

fn positions(ranges: &[Range<usize>]) -> Vec<usize> {
    ranges.iter().flat_map(|r| 0..r.len()).collect()
}

fn self_layout(ranges: &[Range<usize>], causal: bool) -> Arc<AttentionLayout> {
    let mut l = AttentionLayout::new();
    for r in ranges {
        l.push(r.clone(), r.clone(), causal);
    }
    Arc::new(l)
}

fn cross_layout(queries: &[Range<usize>], keys: &[Range<usize>]) -> Arc<AttentionLayout> {
    let mut l = AttentionLayout::new();
    for (q, k) in queries.iter().zip(keys) {
        l.push(q.clone(), k.clone(), false);
    }
    Arc::new(l)
}

/// Lowest id wins ties.
fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Decoder state carried between greedy steps.
struct DecoderCache<T: Real> {
    /// `[layer][example]`: self-attention keys and values, row-major.
    keys: Vec<Vec<Vec<T>>>,
    values: Vec<Vec<Vec<T>>>,
    /// Per layer, cross-attention projections of the packed memory.
    memory_keys: Vec<Tensor<T>>,
    memory_values: Vec<Tensor<T>>,
    memory_ranges: Vec<Range<usize>>,
}

pub struct Model<T: Real = f32> {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ModelParameters<T>,
    truncated: AtomicUsize,
}

impl<T: Real> Clone for Model<T> {
    fn clone(&self) -> Self {
        Model {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.clone(),
            truncated: AtomicUsize::new(self.truncations()),
        }
    }
}

impl<T: Real> std::fmt::Debug for Model<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("vocab_size", &self.vocab.len())
            .field("parameters", &self.params.numel())
            .finish()
    }
}

impl<T: Real> Model<T> {
    /// Fresh model. A zero `vocab_size` in `config` is filled from `vocab`.
    pub fn new<R: Rng + ?Sized>(mut config: ModelConfig, vocab: Vocabulary, rng: &mut R) -> Result<Self, ModelError> {
        if config.vocab_size == 0 {
            config.vocab_size = vocab.len();
        }
        config.validate()?;
        let params = ModelParameters::init(&config, rng);
        Self::from_parts(config, vocab, params)
    }

    pub fn from_parts(config: ModelConfig, vocab: Vocabulary, params: ModelParameters<T>) -> Result<Self, ModelError> {
        config.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(ModelError::Config(format!(
                "vocab_size {} but vocabulary has {} tokens",
                config.vocab_size,
                vocab.len()
            )));
        }
        let named = params
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        let params = ModelParameters::from_named(&config, named)?;
        Ok(Model {
            config,
            vocab,
            params,
            truncated: AtomicUsize::new(0),
        })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.cast(),
            truncated: AtomicUsize::new(self.truncations()),
        }
    }

    /// Number of encoder inputs cut to `max_len` so far.
    pub fn truncations(&self) -> usize {
        self.truncated.load(Ordering::Relaxed)
    }

    /// Drops the tail of inputs longer than `max_len`, counting each cut.
    pub fn fit_input<'a>(&self, ids: &'a [usize]) -> &'a [usize] {
        if ids.len() > self.config.max_len {
            self.truncated.fetch_add(1, Ordering::Relaxed);
            log::warn!("input of {} tokens truncated to {}", ids.len(), self.config.max_len);
            &ids[..self.config.max_len]
        } else {
            ids
        }
    }

    fn check_tokens(&self, ids: &[usize]) -> Result<(), ModelError> {
        if ids.is_empty() {
            return Err(ModelError::Tensor(TensorError::InvalidShape(vec![0])));
        }
        match ids.iter().find(|&&id| id >= self.config.vocab_size) {
            Some(&id) => Err(ModelError::Token {
                id,
                vocab: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    fn check_features(&self, f: &VisionFeatures) -> Result<(), ModelError> {
        let expected = (self.config.patches, self.config.vision_dim);
        let got = (f.m(), f.d_v());
        if got != expected {
            return Err(ModelError::FeatureShape { expected, got });
        }
        Ok(())
    }

    fn p(&self, g: &mut Graph<T>, b: &mut Binding, name: &str) -> NodeId {
        b.node(g, &self.params, name)
    }

    fn norm(&self, g: &mut Graph<T>, b: &mut Binding, prefix: &str, x: NodeId) -> Result<NodeId, ModelError> {
        let gain = self.p(g, b, &format!("{prefix}.gain"));
        let bias = self.p(g, b, &format!("{prefix}.bias"));
        Ok(g.layer_norm(x, gain, bias, LN_EPS)?)
    }

    fn mha(
        &self,
        g: &mut Graph<T>,
        b: &mut Binding,
        prefix: &str,
        xq: NodeId,
        xkv: NodeId,
        layout: Arc<AttentionLayout>,
    ) -> Result<NodeId, ModelError> {
        let wq = self.p(g, b, &format!("{prefix}.wq"));
        let wk = self.p(g, b, &format!("{prefix}.wk"));
        let wv = self.p(g, b, &format!("{prefix}.wv"));
        let wo = self.p(g, b, &format!("{prefix}.wo"));
        let q = g.matmul(xq, wq)?;
        let k = g.matmul(xkv, wk)?;
        let v = g.matmul(xkv, wv)?;
        let a = g.attention(q, k, v, layout, self.config.heads)?;
        Ok(g.matmul(a, wo)?)
    }

    fn ffn(&self, g: &mut Graph<T>, b: &mut Binding, prefix: &str, x: NodeId) -> Result<NodeId, ModelError> {
        let w1 = self.p(g, b, &format!("{prefix}.w1"));
        let b1 = self.p(g, b, &format!("{prefix}.b1"));
        let w2 = self.p(g, b, &format!("{prefix}.w2"));
        let b2 = self.p(g, b, &format!("{prefix}.b2"));
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.relu(h)?;
        let h = g.matmul(h, w2)?;
        Ok(g.add_row(h, b2)?)
    }

    fn drop(&self, g: &mut Graph<T>, x: NodeId, mode: &mut Mode) -> NodeId {
        match mode {
            Mode::Train(rng) => g.dropout(x, self.config.dropout, rng),
            Mode::Eval => x,
        }
    }

    fn embed(&self, g: &mut Graph<T>, b: &mut Binding, pos_table: &str, seqs: &[&[usize]], rs: &[Range<usize>]) -> Result<NodeId, ModelError> {
        let ids: Vec<usize> = seqs.concat();
        let tokens = self.p(g, b, "embed.tokens");
        let pos = self.p(g, b, pos_table);
        let x = g.embedding(tokens, &ids)?;
        let p = g.embedding(pos, &positions(rs))?;
        Ok(g.add(x, p)?)
    }

    /// Packed last-layer encoder states for `inputs`, each already within
    /// `max_len`.
    pub fn encode(&self, g: &mut Graph<T>, b: &mut Binding, inputs: &[&[usize]], mode: &mut Mode) -> Result<NodeId, ModelError> {
        for ids in inputs {
            self.check_tokens(ids)?;
            if ids.len() > self.config.max_len {
                return Err(ModelError::Config(format!(
                    "input of {} tokens exceeds max_len {}",
                    ids.len(),
                    self.config.max_len
                )));
            }
        }
        let rs = ranges(inputs.iter().map(|s| s.len()));
        let layout = self_layout(&rs, false);
        let x = self.embed(g, b, "encoder.pos", inputs, &rs)?;
        let mut x = self.drop(g, x, mode);
        for l in 0..self.config.encoder_layers {
            let h = self.norm(g, b, &format!("encoder.{l}.ln1"), x)?;
            let a = self.mha(g, b, &format!("encoder.{l}.attn"), h, h, layout.clone())?;
            let a = self.drop(g, a, mode);
            x = g.add(x, a)?;
            let h = self.norm(g, b, &format!("encoder.{l}.ln2"), x)?;
            let f = self.ffn(g, b, &format!("encoder.{l}.ffn"), h)?;
            let f = self.drop(g, f, mode);
            x = g.add(x, f)?;
        }
        self.norm(g, b, "encoder.ln", x)
    }

    /// Fuses packed encoder states with each example's patches.
    pub fn fuse(
        &self,
        g: &mut Graph<T>,
        b: &mut Binding,
        h_language: NodeId,
        input_lens: &[usize],
        features: &[&VisionFeatures],
    ) -> Result<FusionIds, ModelError> {
        let m = self.config.patches;
        let mut packed = Vec::with_capacity(features.len() * m * self.config.vision_dim);
        for f in features {
            self.check_features(f)?;
            packed.extend(f.patches().iter().map(|&x| T::of(x as f64)));
        }
        let f = g.constant(Tensor::from_vec([features.len() * m, self.config.vision_dim], packed));
        let nodes = FusionNodes {
            w_h: self.p(g, b, "fusion.w_h"),
            w_l: self.p(g, b, "fusion.w_l"),
            w_v: self.p(g, b, "fusion.w_v"),
            gate_bias: self.config.gate_bias.then(|| self.p(g, b, "fusion.gate_bias")),
        };
        let queries = ranges(input_lens.iter().copied());
        let keys = ranges(std::iter::repeat_n(m, features.len()));
        let layout = cross_layout(&queries, &keys);
        Ok(nodes.apply(g, h_language, f, Some(layout))?)
    }

    /// Packed logits `[Σ len(dec_inputs) x V]`. `memory_ranges[i]` selects
    /// the fused rows that sequence `i` cross-attends to.
    pub fn decode(
        &self,
        g: &mut Graph<T>,
        b: &mut Binding,
        memory: NodeId,
        memory_ranges: &[Range<usize>],
        dec_inputs: &[&[usize]],
        mode: &mut Mode,
    ) -> Result<NodeId, ModelError> {
        for ids in dec_inputs {
            if ids.len() > self.config.max_len {
                return Err(ModelError::TargetTooLong {
                    len: ids.len(),
                    max: self.config.max_len,
                });
            }
            self.check_tokens(ids)?;
        }
        let rs = ranges(dec_inputs.iter().map(|s| s.len()));
        let causal = self_layout(&rs, true);
        let cross = cross_layout(&rs, memory_ranges);
        let x = self.embed(g, b, "decoder.pos", dec_inputs, &rs)?;
        let mut x = self.drop(g, x, mode);
        for l in 0..self.config.decoder_layers {
            let h = self.norm(g, b, &format!("decoder.{l}.ln1"), x)?;
            let a = self.mha(g, b, &format!("decoder.{l}.self_attn"), h, h, causal.clone())?;
            let a = self.drop(g, a, mode);
            x = g.add(x, a)?;
            let h = self.norm(g, b, &format!("decoder.{l}.ln2"), x)?;
            let a = self.mha(g, b, &format!("decoder.{l}.cross_attn"), h, memory, cross.clone())?;
            let a = self.drop(g, a, mode);
            x = g.add(x, a)?;
            let h = self.norm(g, b, &format!("decoder.{l}.ln3"), x)?;
            let f = self.ffn(g, b, &format!("decoder.{l}.ffn"), h)?;
            let f = self.drop(g, f, mode);
            x = g.add(x, f)?;
        }
        let x = self.norm(g, b, "decoder.ln", x)?;
        let w = self.p(g, b, "output.w");
        Ok(g.matmul(x, w)?)
    }

    /// Records the teacher-forced pass. Returns `(loss, logits, targets)`
    /// where `loss` is the mean NLL over all non-pad target tokens.
    pub fn teacher_forced(
        &self,
        g: &mut Graph<T>,
        b: &mut Binding,
        batch: &[TrainingExample],
        mode: &mut Mode,
    ) -> Result<(NodeId, NodeId, Vec<usize>), ModelError> {
        let inputs: Vec<&[usize]> = batch.iter().map(|e| self.fit_input(e.input_ids)).collect();
        let features: Vec<&VisionFeatures> = batch.iter().map(|e| e.features).collect();
        let mut dec_inputs = Vec::with_capacity(batch.len());
        let mut targets = Vec::new();
        for e in batch {
            let t = e.target_ids;
            if t.is_empty() {
                return Err(ModelError::EmptyTarget);
            }
            if t.len() > self.config.max_len {
                return Err(ModelError::TargetTooLong {
                    len: t.len(),
                    max: self.config.max_len,
                });
            }
            self.check_tokens(t)?;
            let mut d = Vec::with_capacity(t.len());
            d.push(BOS);
            d.extend_from_slice(&t[..t.len() - 1]);
            dec_inputs.push(d);
            targets.extend_from_slice(t);
        }
        let h = self.encode(g, b, &inputs, mode)?;
        let lens: Vec<usize> = inputs.iter().map(|s| s.len()).collect();
        let fused = self.fuse(g, b, h, &lens, &features)?;
        let dec: Vec<&[usize]> = dec_inputs.iter().map(Vec::as_slice).collect();
        let logits = self.decode(g, b, fused.h_fuse, &ranges(lens), &dec, mode)?;
        let loss = g.cross_entropy(logits, &targets, PAD)?;
        Ok((loss, logits, targets))
    }

    /// Last-layer encoder states of one input in eval mode.
    pub fn encode_language(&self, input_ids: &[usize]) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new();
        let mut b = Binding::new(&self.params, false);
        let ids = self.fit_input(input_ids);
        let h = self.encode(&mut g, &mut b, &[ids], &mut Mode::Eval)?;
        Ok(g.value(h).detached())
    }

    pub fn encode_multimodal(&self, input_ids: &[usize], features: &VisionFeatures) -> Result<FusionTrace<T>, ModelError> {
        let mut g = Graph::new();
        let mut b = Binding::new(&self.params, false);
        let ids = self.fit_input(input_ids);
        let h = self.encode(&mut g, &mut b, &[ids], &mut Mode::Eval)?;
        let fused = self.fuse(&mut g, &mut b, h, &[ids.len()], &[features])?;
        Ok(fused.collect(&g, h))
    }

    /// Mean NLL and per-token log-probabilities of `target_ids`.
    pub fn forward_teacher_forced(
        &self,
        input_ids: &[usize],
        features: &VisionFeatures,
        target_ids: &[usize],
    ) -> Result<(f64, Vec<f64>), ModelError> {
        let mut g = Graph::new();
        let mut b = Binding::new(&self.params, false);
        let example = TrainingExample {
            input_ids,
            features,
            target_ids,
        };
        let (loss, logits, targets) = self.teacher_forced(&mut g, &mut b, &[example], &mut Mode::Eval)?;
        let v = g.value(logits);
        let logprobs = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| log_softmax_at(v.row(i), t).as_f64())
            .collect();
        Ok((g.value(loss).item().as_f64(), logprobs))
    }

    /// One decoder position for the `active` examples, fed `last[i]` at
    /// `position`. Appends this position's self-attention keys and values
    /// to `cache` and returns logits, one row per active example.
    fn decode_step(
        &self,
        cache: &mut DecoderCache<T>,
        active: &[usize],
        last: &[usize],
        position: usize,
    ) -> Result<Tensor<T>, ModelError> {
        let tokens: Vec<usize> = active.iter().map(|&i| last[i]).collect();
        self.check_tokens(&tokens)?;
        let mut g = Graph::new();
        let mut b = Binding::new(&self.params, false);
        let table = self.p(&mut g, &mut b, "embed.tokens");
        let pos = self.p(&mut g, &mut b, "decoder.pos");
        let x = g.embedding(table, &tokens)?;
        let p = g.embedding(pos, &vec![position; active.len()])?;
        let mut x = g.add(x, p)?;
        let d = self.config.d_model;
        let mut cross = AttentionLayout::new();
        for (r, &i) in active.iter().enumerate() {
            cross.push(r..r + 1, cache.memory_ranges[i].clone(), false);
        }
        let cross = Arc::new(cross);
        for l in 0..self.config.decoder_layers {
            let prefix = format!("decoder.{l}.self_attn");
            let h = self.norm(&mut g, &mut b, &format!("decoder.{l}.ln1"), x)?;
            let [wq, wk, wv, wo] = ["wq", "wk", "wv", "wo"].map(|w| self.p(&mut g, &mut b, &format!("{prefix}.{w}")));
            let q = g.matmul(h, wq)?;
            let k = g.matmul(h, wk)?;
            let v = g.matmul(h, wv)?;
            let (mut keys, mut values) = (Vec::new(), Vec::new());
            let mut layout = AttentionLayout::new();
            for (r, &i) in active.iter().enumerate() {
                cache.keys[l][i].extend_from_slice(g.value(k).row(r));
                cache.values[l][i].extend_from_slice(g.value(v).row(r));
                let start = keys.len() / d;
                keys.extend_from_slice(&cache.keys[l][i]);
                values.extend_from_slice(&cache.values[l][i]);
                layout.push(r..r + 1, start..keys.len() / d, false);
            }
            let rows = keys.len() / d;
            let kc = g.constant(Tensor::from_vec([rows, d], keys));
            let vc = g.constant(Tensor::from_vec([rows, d], values));
            let a = g.attention(q, kc, vc, Arc::new(layout), self.config.heads)?;
            let a = g.matmul(a, wo)?;
            x = g.add(x, a)?;

            let prefix = format!("decoder.{l}.cross_attn");
            let h = self.norm(&mut g, &mut b, &format!("decoder.{l}.ln2"), x)?;
            let wq = self.p(&mut g, &mut b, &format!("{prefix}.wq"));
            let wo = self.p(&mut g, &mut b, &format!("{prefix}.wo"));
            let q = g.matmul(h, wq)?;
            let mk = g.constant(cache.memory_keys[l].clone());
            let mv = g.constant(cache.memory_values[l].clone());
            let a = g.attention(q, mk, mv, cross.clone(), self.config.heads)?;
            let a = g.matmul(a, wo)?;
            x = g.add(x, a)?;

            let h = self.norm(&mut g, &mut b, &format!("decoder.{l}.ln3"), x)?;
            let f = self.ffn(&mut g, &mut b, &format!("decoder.{l}.ffn"), h)?;
            x = g.add(x, f)?;
        }
        let x = self.norm(&mut g, &mut b, "decoder.ln", x)?;
        let w = self.p(&mut g, &mut b, "output.w");
        let logits = g.matmul(x, w)?;
        Ok(g.value(logits).detached())
    }

    pub fn generate_greedy(
        &self,
        input_ids: &[usize],
        features: &VisionFeatures,
        max_new_tokens: usize,
    ) -> Result<Generation, ModelError> {
        let example = Example { input_ids, features };
        Ok(self.generate_batch(&[example], max_new_tokens)?.remove(0))
    }

    /// Greedy decoding of a batch in lockstep. At most
    /// `min(max_new_tokens, max_len)` tokens are produced per example.
    pub fn generate_batch(&self, examples: &[Example], max_new_tokens: usize) -> Result<Vec<Generation>, ModelError> {
        if examples.is_empty() {
            return Ok(Vec::new());
        }
        let mut cache = {
            let mut g = Graph::new();
            let mut b = Binding::new(&self.params, false);
            let inputs: Vec<&[usize]> = examples.iter().map(|e| self.fit_input(e.input_ids)).collect();
            let features: Vec<&VisionFeatures> = examples.iter().map(|e| e.features).collect();
            let h = self.encode(&mut g, &mut b, &inputs, &mut Mode::Eval)?;
            let lens: Vec<usize> = inputs.iter().map(|s| s.len()).collect();
            let memory = self.fuse(&mut g, &mut b, h, &lens, &features)?.h_fuse;
            let mut project = |l: usize, w: &str| -> Result<Tensor<T>, ModelError> {
                let w = self.p(&mut g, &mut b, &format!("decoder.{l}.cross_attn.{w}"));
                let m = g.matmul(memory, w)?;
                Ok(g.value(m).detached())
            };
            let layers = self.config.decoder_layers;
            DecoderCache {
                keys: vec![vec![Vec::new(); examples.len()]; layers],
                values: vec![vec![Vec::new(); examples.len()]; layers],
                memory_keys: (0..layers).map(|l| project(l, "wk")).collect::<Result<_, _>>()?,
                memory_values: (0..layers).map(|l| project(l, "wv")).collect::<Result<_, _>>()?,
                memory_ranges: ranges(lens),
            }
        };

        let budget = max_new_tokens.min(self.config.max_len);
        let mut last = vec![BOS; examples.len()];
        let mut out: Vec<Generation> = (0..examples.len())
            .map(|_| Generation {
                ids: Vec::new(),
                text: String::new(),
                total_logprob: 0.0,
                finished: false,
            })
            .collect();
        for step in 0..budget {
            let active: Vec<usize> = (0..examples.len()).filter(|&i| !out[i].finished).collect();
            if active.is_empty() {
                break;
            }
            let logits = self.decode_step(&mut cache, &active, &last, step)?;
            for (r, &i) in active.iter().enumerate() {
                let tok = argmax(logits.row(r));
                let gen = &mut out[i];
                gen.ids.push(tok);
                gen.total_logprob += log_softmax_at(logits.row(r), tok).as_f64();
                last[i] = tok;
                if tok == EOS {
                    gen.finished = true;
                }
            }
        }
        for gen in &mut out {
            gen.text = detokenize(&gen.ids, &self.vocab);
        }
        Ok(out)
    }
}
