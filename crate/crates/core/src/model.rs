//! The cross-modal Transformer: a convolutional-plus-attention speech encoder,
//! a text embedding table, a joint encoder-decoder that accepts either
//! modality, and a CTC head tied to the text embedding.
//!
//! All layers are pre-norm. The decoder's output projection and the CTC head
//! both reuse the embedding table; the CTC blank gets its own learned vector.

use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::bpe::BLANK;
use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_nt, Graph, Params, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"WACOCKPT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub n_speech_layers: usize,
    pub n_joint_enc_layers: usize,
    pub n_dec_layers: usize,
    /// `(kernel, stride)` per downsampling convolution.
    pub downsample: Vec<[usize; 2]>,
    pub vocab_size: usize,
    pub dropout: f64,
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feat_dim: 16,
            d_model: 64,
            n_heads: 4,
            ffn_dim: 128,
            n_speech_layers: 2,
            n_joint_enc_layers: 2,
            n_dec_layers: 2,
            downsample: vec![[5, 2], [5, 2]],
            vocab_size: 0,
            dropout: 0.1,
            max_positions: 512,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            problems.push(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if self.feat_dim == 0 || self.ffn_dim == 0 {
            problems.push("feat_dim and ffn_dim must be positive".into());
        }
        for (i, [k, s]) in self.downsample.iter().enumerate() {
            if *s == 0 || *k == 0 || k % 2 == 0 {
                problems.push(format!("downsample[{i}] needs an odd kernel and stride >= 1, got ({k}, {s})"));
            }
        }
        if self.vocab_size <= BLANK {
            problems.push(format!("vocab_size {} leaves no room for text tokens", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if self.max_positions == 0 {
            problems.push("max_positions must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }

    pub fn total_stride(&self) -> usize {
        self.downsample.iter().map(|[_, s]| s).product()
    }

    /// Speech-encoder output length for `n_frames` input frames.
    pub fn enc_len(&self, n_frames: usize) -> usize {
        self.downsample.iter().fold(n_frames, |n, [_, s]| n.div_ceil(*s))
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    ln1: Norm,
    attn: Attention,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Copy, Debug)]
struct DecoderLayer {
    ln1: Norm,
    self_attn: Attention,
    ln2: Norm,
    cross_attn: Attention,
    ln3: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    convs: Vec<Linear>,
    speech_layers: Vec<EncoderLayer>,
    speech_ln: Norm,
    embed: usize,
    ctc_blank: usize,
    ctc_bias: usize,
    enc_layers: Vec<EncoderLayer>,
    enc_ln: Norm,
    dec_layers: Vec<DecoderLayer>,
    dec_ln: Norm,
}

/// Parameter families, used to restrict which tensors a training stage updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Speech,
    Embedding,
    Ctc,
    JointEncoder,
    Decoder,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        if name.starts_with("speech.") {
            ParamGroup::Speech
        } else if name == "embed" {
            ParamGroup::Embedding
        } else if name.starts_with("ctc.") {
            ParamGroup::Ctc
        } else if name.starts_with("enc.") {
            ParamGroup::JointEncoder
        } else {
            ParamGroup::Decoder
        }
    }
}

enum Init {
    Xavier(usize, usize),
    Normal(f64),
    Zeros,
    Ones,
}

struct Builder {
    params: Params,
    rng: ChaCha8Rng,
}

impl Builder {
    fn tensor(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        let data = (0..rows * cols)
            .map(|_| match init {
                Init::Xavier(fan_in, fan_out) => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    self.rng.random_range(-a..a)
                }
                Init::Normal(std) => std * self.rng.sample::<f64, _>(StandardNormal),
                Init::Zeros => 0.0,
                Init::Ones => 1.0,
            })
            .collect();
        self.params.insert(name, Tensor::from_vec(rows, cols, data))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.tensor(format!("{name}.w"), fan_in, fan_out, Init::Xavier(fan_in, fan_out)),
            b: self.tensor(format!("{name}.b"), 1, fan_out, Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm { g: self.tensor(format!("{name}.g"), 1, d, Init::Ones), b: self.tensor(format!("{name}.b"), 1, d, Init::Zeros) }
    }

    fn attention(&mut self, name: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn encoder_layer(&mut self, name: &str, cfg: &ModelConfig) -> EncoderLayer {
        let d = cfg.d_model;
        EncoderLayer {
            ln1: self.norm(&format!("{name}.ln1"), d),
            attn: self.attention(&format!("{name}.attn"), d),
            ln2: self.norm(&format!("{name}.ln2"), d),
            ff1: self.linear(&format!("{name}.ff1"), d, cfg.ffn_dim),
            ff2: self.linear(&format!("{name}.ff2"), cfg.ffn_dim, d),
        }
    }

    fn decoder_layer(&mut self, name: &str, cfg: &ModelConfig) -> DecoderLayer {
        let d = cfg.d_model;
        DecoderLayer {
            ln1: self.norm(&format!("{name}.ln1"), d),
            self_attn: self.attention(&format!("{name}.self"), d),
            ln2: self.norm(&format!("{name}.ln2"), d),
            cross_attn: self.attention(&format!("{name}.cross"), d),
            ln3: self.norm(&format!("{name}.ln3"), d),
            ff1: self.linear(&format!("{name}.ff1"), d, cfg.ffn_dim),
            ff2: self.linear(&format!("{name}.ff2"), cfg.ffn_dim, d),
        }
    }
}

fn build(cfg: &ModelConfig, seed: u64) -> (Params, Layout) {
    let mut b = Builder { params: Params::new(), rng: ChaCha8Rng::seed_from_u64(seed) };
    let d = cfg.d_model;
    let mut in_dim = cfg.feat_dim;
    let convs = cfg
        .downsample
        .iter()
        .enumerate()
        .map(|(i, [k, _])| {
            let l = b.linear(&format!("speech.conv{i}"), k * in_dim, d);
            in_dim = d;
            l
        })
        .collect();
    let speech_layers = (0..cfg.n_speech_layers).map(|i| b.encoder_layer(&format!("speech.layer{i}"), cfg)).collect();
    let speech_ln = b.norm("speech.ln", d);
    let emb_std = (d as f64).powf(-0.5);
    let embed = b.tensor("embed".into(), cfg.vocab_size, d, Init::Normal(emb_std));
    let ctc_blank = b.tensor("ctc.blank".into(), 1, d, Init::Normal(emb_std));
    let ctc_bias = b.tensor("ctc.bias".into(), 1, cfg.vocab_size, Init::Zeros);
    let enc_layers = (0..cfg.n_joint_enc_layers).map(|i| b.encoder_layer(&format!("enc.layer{i}"), cfg)).collect();
    let enc_ln = b.norm("enc.ln", d);
    let dec_layers = (0..cfg.n_dec_layers).map(|i| b.decoder_layer(&format!("dec.layer{i}"), cfg)).collect();
    let dec_ln = b.norm("dec.ln", d);
    let layout = Layout { convs, speech_layers, speech_ln, embed, ctc_blank, ctc_bias, enc_layers, enc_ln, dec_layers, dec_ln };
    (b.params, layout)
}

fn sinusoid_table(max_positions: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(max_positions, d);
    for pos in 0..max_positions {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            t.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

/// Dropout state for one forward pass. `eval()` disables it.
pub struct Dropout {
    p: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn eval() -> Self {
        Self { p: 0.0, rng: None }
    }

    pub fn train(p: f64, seed: u64) -> Self {
        Self { p, rng: (p > 0.0).then(|| ChaCha8Rng::seed_from_u64(seed)) }
    }

    fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        let Some(rng) = self.rng.as_mut() else { return x };
        let n = g.value(x).data().len();
        let keep = 1.0 / (1.0 - self.p);
        let mask = (0..n).map(|_| if rng.random::<f64>() < self.p { 0.0 } else { keep }).collect();
        g.mask(x, mask)
    }
}

/// Per-layer cross-attention keys and values over a fixed encoder output.
#[derive(Clone, Debug)]
pub struct DecoderMemory {
    layers: Vec<(Tensor, Tensor)>,
}

/// Cached self-attention keys and values for the tokens fed so far.
#[derive(Clone, Debug)]
pub struct DecoderState {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl DecoderState {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn add_into(x: &mut [f64], y: &[f64]) {
    x.iter_mut().zip(y).for_each(|(a, b)| *a += b);
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
    layout: Layout,
    positions: Tensor,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (params, layout) = build(&config, seed);
        let positions = sinusoid_table(config.max_positions, config.d_model);
        Ok(Self { config, params, layout, positions })
    }

    pub fn embed_id(&self) -> usize {
        self.layout.embed
    }

    pub fn param_group(&self, id: usize) -> ParamGroup {
        ParamGroup::of(self.params.name(id))
    }

    fn linear(&self, g: &mut Graph, x: Var, l: Linear) -> Var {
        let w = g.param(l.w);
        let b = g.param(l.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    fn norm(&self, g: &mut Graph, x: Var, n: Norm) -> Var {
        let gain = g.param(n.g);
        let bias = g.param(n.b);
        g.layer_norm(x, gain, bias)
    }

    fn attention(&self, g: &mut Graph, x: Var, mem: Var, a: &Attention, causal: bool) -> Var {
        let q = self.linear(g, x, a.q);
        let k = self.linear(g, mem, a.k);
        let v = self.linear(g, mem, a.v);
        let dh = self.config.d_model / self.config.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let heads: Vec<Var> = (0..self.config.n_heads)
            .map(|h| {
                let qh = g.slice_cols(q, h * dh, dh);
                let kh = g.slice_cols(k, h * dh, dh);
                let vh = g.slice_cols(v, h * dh, dh);
                let scores = g.matmul_nt(qh, kh, scale);
                let p = g.softmax(scores, causal);
                g.matmul(p, vh)
            })
            .collect();
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        self.linear(g, cat, a.o)
    }

    fn feed_forward(&self, g: &mut Graph, x: Var, ff1: Linear, ff2: Linear) -> Var {
        let h = self.linear(g, x, ff1);
        let h = g.relu(h);
        self.linear(g, h, ff2)
    }

    fn encoder_layer(&self, g: &mut Graph, x: Var, l: &EncoderLayer, drop: &mut Dropout) -> Var {
        let h = self.norm(g, x, l.ln1);
        let a = self.attention(g, h, h, &l.attn, false);
        let a = drop.apply(g, a);
        let x = g.add(x, a);
        let h = self.norm(g, x, l.ln2);
        let f = self.feed_forward(g, h, l.ff1, l.ff2);
        let f = drop.apply(g, f);
        g.add(x, f)
    }

    fn decoder_layer(&self, g: &mut Graph, x: Var, mem: Var, l: &DecoderLayer, drop: &mut Dropout) -> Var {
        let h = self.norm(g, x, l.ln1);
        let a = self.attention(g, h, h, &l.self_attn, true);
        let a = drop.apply(g, a);
        let x = g.add(x, a);
        let h = self.norm(g, x, l.ln2);
        let c = self.attention(g, h, mem, &l.cross_attn, false);
        let c = drop.apply(g, c);
        let x = g.add(x, c);
        let h = self.norm(g, x, l.ln3);
        let f = self.feed_forward(g, h, l.ff1, l.ff2);
        let f = drop.apply(g, f);
        g.add(x, f)
    }

    fn add_positions(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let n = g.value(x).rows();
        if n > self.config.max_positions {
            return Err(Error::data(format!("sequence of length {n} exceeds max_positions {}", self.config.max_positions)));
        }
        let pe = g.constant(self.positions.slice_rows(0, n));
        Ok(g.add(x, pe))
    }

    /// Speech encoder: strided convolutions, positions, self-attention blocks
    /// and a final layer norm. Output is `enc_len × d_model`.
    pub fn speech_encoder(&self, g: &mut Graph, features: &Tensor, drop: &mut Dropout) -> Result<Var> {
        let (n, f) = features.shape();
        if f != self.config.feat_dim {
            return Err(Error::data(format!("features have dimension {f}, model expects {}", self.config.feat_dim)));
        }
        if n < self.config.total_stride() {
            return Err(Error::data(format!(
                "utterance of {n} frames is shorter than the total stride {}",
                self.config.total_stride()
            )));
        }
        let mut x = g.constant(features.clone());
        for (conv, [k, s]) in self.layout.convs.iter().zip(&self.config.downsample) {
            let u = g.unfold(x, *k, *s, (k - 1) / 2);
            let y = self.linear(g, u, *conv);
            x = g.relu(y);
        }
        x = self.add_positions(g, x)?;
        x = drop.apply(g, x);
        for l in &self.layout.speech_layers {
            x = self.encoder_layer(g, x, l, drop);
        }
        Ok(self.norm(g, x, self.layout.speech_ln))
    }

    /// Raw embedding rows, without scaling or positions.
    pub fn embed_raw(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let table = g.param(self.layout.embed);
        Ok(g.gather(table, tokens))
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            Some(t) => Err(Error::data(format!("token id {t} outside vocabulary of {}", self.config.vocab_size))),
            None => Ok(()),
        }
    }

    fn embed_scaled(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var> {
        let raw = self.embed_raw(g, tokens)?;
        let x = g.scale(raw, (self.config.d_model as f64).sqrt());
        self.add_positions(g, x)
    }

    /// Joint-encoder input for text: scaled embedding rows plus positions.
    pub fn text_input(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::data("empty source token sequence"));
        }
        self.embed_scaled(g, tokens)
    }

    /// Joint-encoder input for speech: encoder states plus positions.
    pub fn speech_input(&self, g: &mut Graph, speech: Var) -> Result<Var> {
        self.add_positions(g, speech)
    }

    pub fn joint_encoder(&self, g: &mut Graph, input: Var, drop: &mut Dropout) -> Var {
        let mut x = drop.apply(g, input);
        for l in &self.layout.enc_layers {
            x = self.encoder_layer(g, x, l, drop);
        }
        self.norm(g, x, self.layout.enc_ln)
    }

    /// Causal decoder over `prefix` attending to `memory`; returns
    /// `prefix.len() × vocab_size` logits.
    pub fn decoder(&self, g: &mut Graph, memory: Var, prefix: &[usize], drop: &mut Dropout) -> Result<Var> {
        if prefix.is_empty() {
            return Err(Error::data("decoder prefix must start with a begin-of-sequence token"));
        }
        let mut x = self.embed_scaled(g, prefix)?;
        x = drop.apply(g, x);
        for l in &self.layout.dec_layers {
            x = self.decoder_layer(g, x, memory, l, drop);
        }
        let h = self.norm(g, x, self.layout.dec_ln);
        let table = g.param(self.layout.embed);
        Ok(g.matmul_nt(h, table, 1.0))
    }

    /// Per-frame CTC logits: `dot(frame, embed[v]) + bias[v]`, with the blank
    /// column taken from a separate learned vector.
    pub fn ctc_head(&self, g: &mut Graph, speech: Var) -> Var {
        let v = self.config.vocab_size;
        let table = g.param(self.layout.embed);
        let blank = g.param(self.layout.ctc_blank);
        let bias = g.param(self.layout.ctc_bias);
        let tok = g.matmul_nt(speech, table, 1.0);
        let blank_col = g.matmul_nt(speech, blank, 1.0);
        let mut parts = Vec::new();
        if BLANK > 0 {
            parts.push(g.slice_cols(tok, 0, BLANK));
        }
        parts.push(blank_col);
        if BLANK + 1 < v {
            parts.push(g.slice_cols(tok, BLANK + 1, v - BLANK - 1));
        }
        let logits = g.concat_cols(&parts);
        g.add_row(logits, bias)
    }

    /// Eval-mode speech encoding.
    pub fn encode_speech(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(&self.params);
        let v = self.speech_encoder(&mut g, features, &mut Dropout::eval())?;
        Ok(g.value(v).clone())
    }

    pub fn encode_speech_batch(&self, batch: &[&Tensor]) -> Result<Vec<Tensor>> {
        batch.iter().map(|f| self.encode_speech(f)).collect()
    }

    /// Raw embedding rows as a plain tensor.
    pub fn embedding_rows(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new(&self.params);
        let v = self.embed_raw(&mut g, tokens)?;
        Ok(g.value(v).clone())
    }

    /// Encoder memory for a speech input, eval mode.
    pub fn speech_memory(&self, g: &mut Graph, features: &Tensor) -> Result<Var> {
        let mut drop = Dropout::eval();
        let s = self.speech_encoder(g, features, &mut drop)?;
        let x = self.speech_input(g, s)?;
        Ok(self.joint_encoder(g, x, &mut drop))
    }

    /// Encoder memory for a text input, eval mode.
    pub fn text_memory(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var> {
        let mut drop = Dropout::eval();
        let x = self.text_input(g, tokens)?;
        Ok(self.joint_encoder(g, x, &mut drop))
    }

    /// Cross-attention keys and values for every decoder layer, computed once
    /// per source for incremental decoding.
    pub fn decoder_memory(&self, memory: &Tensor) -> DecoderMemory {
        let project = |l: Linear| {
            let mut t = matmul(memory, self.params.get(l.w));
            let b = self.params.get(l.b).data();
            for r in 0..t.rows() {
                t.row_mut(r).iter_mut().zip(b).for_each(|(v, b)| *v += b);
            }
            t
        };
        let layers = self.layout.dec_layers.iter().map(|l| (project(l.cross_attn.k), project(l.cross_attn.v))).collect();
        DecoderMemory { layers }
    }

    pub fn decoder_start(&self) -> DecoderState {
        let n = self.layout.dec_layers.len();
        DecoderState { keys: vec![Vec::new(); n], values: vec![Vec::new(); n], len: 0 }
    }

    /// Feeds one token and returns next-token logits. Produces the same numbers
    /// as the last row of [`Model::decoder`] over the whole prefix.
    pub fn decoder_step(&self, memory: &DecoderMemory, state: &mut DecoderState, token: usize) -> Result<Vec<f64>> {
        self.check_tokens(&[token])?;
        let pos = state.len;
        if pos >= self.config.max_positions {
            return Err(Error::data(format!(
                "sequence of length {} exceeds max_positions {}",
                pos + 1,
                self.config.max_positions
            )));
        }
        let scale = (self.config.d_model as f64).sqrt();
        let mut x: Vec<f64> = self
            .params
            .get(self.layout.embed)
            .row(token)
            .iter()
            .zip(self.positions.row(pos))
            .map(|(e, p)| e * scale + p)
            .collect();
        for (i, l) in self.layout.dec_layers.iter().enumerate() {
            let h = self.norm_row(&x, l.ln1);
            let q = self.linear_row(&h, l.self_attn.q);
            state.keys[i].extend(self.linear_row(&h, l.self_attn.k));
            state.values[i].extend(self.linear_row(&h, l.self_attn.v));
            let a = self.attend_row(&q, &state.keys[i], &state.values[i]);
            add_into(&mut x, &self.linear_row(&a, l.self_attn.o));

            let h = self.norm_row(&x, l.ln2);
            let q = self.linear_row(&h, l.cross_attn.q);
            let (k, v) = &memory.layers[i];
            let c = self.attend_row(&q, k.data(), v.data());
            add_into(&mut x, &self.linear_row(&c, l.cross_attn.o));

            let h = self.norm_row(&x, l.ln3);
            let mut f = self.linear_row(&h, l.ff1);
            f.iter_mut().for_each(|v| *v = v.max(0.0));
            add_into(&mut x, &self.linear_row(&f, l.ff2));
        }
        state.len += 1;
        let h = Tensor::row_vector(self.norm_row(&x, self.layout.dec_ln));
        Ok(matmul_nt(&h, self.params.get(self.layout.embed), 1.0).into_data())
    }

    fn linear_row(&self, x: &[f64], l: Linear) -> Vec<f64> {
        let w = self.params.get(l.w);
        let mut out = self.params.get(l.b).data().to_vec();
        for (i, &xi) in x.iter().enumerate() {
            out.iter_mut().zip(w.row(i)).for_each(|(o, w)| *o += xi * w);
        }
        out
    }

    fn norm_row(&self, x: &[f64], n: Norm) -> Vec<f64> {
        let d = x.len() as f64;
        let mean = x.iter().sum::<f64>() / d;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let rs = 1.0 / (var + 1e-5).sqrt();
        let (g, b) = (self.params.get(n.g).data(), self.params.get(n.b).data());
        x.iter().zip(g).zip(b).map(|((v, g), b)| (v - mean) * rs * g + b).collect()
    }

    /// Multi-head attention of one query row over row-major `keys`/`values`.
    fn attend_row(&self, q: &[f64], keys: &[f64], values: &[f64]) -> Vec<f64> {
        let d = self.config.d_model;
        let dh = d / self.config.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n = keys.len() / d;
        let mut out = vec![0.0; d];
        let mut p = vec![0.0; n];
        for h in 0..self.config.n_heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = &q[cols.clone()];
            for (t, s) in p.iter_mut().enumerate() {
                *s = scale * qh.iter().zip(&keys[t * d..][cols.clone()]).map(|(a, b)| a * b).sum::<f64>();
            }
            let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            p.iter_mut().for_each(|s| {
                *s = (*s - max).exp();
                sum += *s;
            });
            let oh = &mut out[cols.clone()];
            for (t, s) in p.iter().enumerate() {
                oh.iter_mut().zip(&values[t * d..][cols.clone()]).for_each(|(o, v)| *o += s / sum * v);
            }
        }
        out
    }

    /// Element-wise mean of several parameter sets with the same layout.
    pub fn average(models: &[Model]) -> Result<Model> {
        let first = models.first().ok_or_else(|| Error::data("cannot average zero checkpoints"))?;
        let mut out = first.clone();
        let k = models.len() as f64;
        for id in 0..out.params.len() {
            let t = out.params.get_mut(id);
            for m in &models[1..] {
                if m.config != first.config {
                    return Err(Error::data("cannot average checkpoints with different configurations"));
                }
                t.add_assign(m.params.get(id));
            }
            t.scale_in_place(1.0 / k);
        }
        Ok(out)
    }

    /// Serializes config and parameters.
    ///
    /// Layout: magic, `u32` config length, canonical JSON config, `u32` tensor
    /// count, then per tensor `u32` name length, name, `u32` rank, `u32` dims and
    /// an `f32` little-endian payload.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        let json = serde_json::to_string(&self.config).expect("config serializes");
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(json.as_bytes());
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&2u32.to_le_bytes());
            buf.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            buf.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            for v in t.data() {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        buf
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::data("checkpoint has a bad magic header"));
        }
        let len = r.u32()? as usize;
        let json = std::str::from_utf8(r.take(len)?).map_err(|_| Error::data("checkpoint config is not UTF-8"))?;
        let config: ModelConfig =
            serde_json::from_str(json).map_err(|e| Error::data(format!("checkpoint config: {e}")))?;
        let mut model = Model::new(config, 0)?;
        let count = r.u32()? as usize;
        if count != model.params.len() {
            return Err(Error::data(format!("checkpoint holds {count} tensors, config implies {}", model.params.len())));
        }
        let mut seen = vec![false; count];
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::data("checkpoint tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let id = model.params.id(&name).ok_or_else(|| Error::data(format!("unexpected checkpoint tensor {name}")))?;
            let target = model.params.get_mut(id);
            let expect = [target.rows(), target.cols()];
            if dims != expect {
                return Err(Error::data(format!("tensor {name} has dims {dims:?}, expected {expect:?}")));
            }
            let payload = r.take(expect[0] * expect[1] * 4)?;
            for (dst, chunk) in target.data_mut().iter_mut().zip(payload.chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
            }
            seen[id] = true;
        }
        if r.pos != bytes.len() {
            return Err(Error::data("trailing bytes after checkpoint tensors"));
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::data("checkpoint is missing tensors"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes).map_err(|e| Error::data(format!("{}: {e}", path.display())))
    }

    /// Rounds every parameter to `f32`, matching what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        for id in 0..self.params.len() {
            for v in self.params.get_mut(id).data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::data("truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            feat_dim: 3,
            d_model: 8,
            n_heads: 2,
            ffn_dim: 12,
            n_speech_layers: 1,
            n_joint_enc_layers: 1,
            n_dec_layers: 1,
            downsample: vec![[3, 2], [3, 2]],
            vocab_size: 9,
            dropout: 0.1,
            max_positions: 64,
        }
    }

    fn features(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn stride_arithmetic() {
        let cfg = ModelConfig { vocab_size: 10, ..ModelConfig::default() };
        assert_eq!(cfg.enc_len(16), 4);
        assert_eq!(cfg.enc_len(17), 5);
        let m = Model::new(cfg, 1).unwrap();
        let out = m.encode_speech(&features(16, 16, 2)).unwrap();
        assert_eq!(out.shape(), (4, 64));
        assert!(out.is_finite());
        assert!(m.encode_speech(&features(3, 16, 2)).is_err());
    }

    #[test]
    fn eval_forward_is_stable_and_batch_independent() {
        let m = Model::new(tiny_config(), 3).unwrap();
        let a = features(11, 3, 1);
        let b = features(7, 3, 2);
        let ab = m.encode_speech_batch(&[&a, &b]).unwrap();
        let ba = m.encode_speech_batch(&[&b, &a]).unwrap();
        assert_eq!(ab[0], ba[1]);
        assert_eq!(ab[1], ba[0]);
        assert_eq!(m.encode_speech(&a).unwrap(), ab[0]);
    }

    #[test]
    fn raw_embedding_rows() {
        let m = Model::new(tiny_config(), 3).unwrap();
        let rows = m.embedding_rows(&[5, 5, 6]).unwrap();
        assert_eq!(rows.row(0), rows.row(1));
        assert_eq!(rows.row(0), m.params.get(m.embed_id()).row(5));
        assert!(m.embedding_rows(&[9]).is_err());
    }

    #[test]
    fn decoder_is_causal() {
        let m = Model::new(tiny_config(), 4).unwrap();
        let mut g = Graph::new(&m.params);
        let mem = m.text_memory(&mut g, &[5, 6, 7]).unwrap();
        let a = m.decoder(&mut g, mem, &[1, 5, 6, 7], &mut Dropout::eval()).unwrap();
        let b = m.decoder(&mut g, mem, &[1, 5, 8, 7], &mut Dropout::eval()).unwrap();
        let (la, lb) = (g.value(a), g.value(b));
        for pos in 0..2 {
            assert_eq!(la.row(pos), lb.row(pos));
        }
        assert_ne!(la.row(2), lb.row(2));
    }

    #[test]
    fn incremental_decoder_matches_full_pass() {
        let m = Model::new(ModelConfig { n_dec_layers: 2, ..tiny_config() }, 6).unwrap();
        let mut g = Graph::new(&m.params);
        let mem = m.speech_memory(&mut g, &features(13, 3, 4)).unwrap();
        let prefix = [1, 5, 8, 2, 7, 7];
        let full = m.decoder(&mut g, mem, &prefix, &mut Dropout::eval()).unwrap();
        let full = g.value(full).clone();
        let dm = m.decoder_memory(g.value(mem));
        let mut state = m.decoder_start();
        for (pos, &t) in prefix.iter().enumerate() {
            let step = m.decoder_step(&dm, &mut state, t).unwrap();
            for (a, b) in step.iter().zip(full.row(pos)) {
                assert!((a - b).abs() < 1e-9, "position {pos}: {a} vs {b}");
            }
        }
        assert_eq!(state.len(), prefix.len());
        assert!(m.decoder_step(&dm, &mut state, 9).is_err());
    }

    #[test]
    fn ctc_head_is_tied_to_embedding() {
        let mut m = Model::new(tiny_config(), 5).unwrap();
        let feats = features(12, 3, 9);
        let logits = |m: &Model| {
            let mut g = Graph::new(&m.params);
            let s = m.speech_encoder(&mut g, &feats, &mut Dropout::eval()).unwrap();
            let l = m.ctc_head(&mut g, s);
            (g.value(s).clone(), g.value(l).clone())
        };
        let (s, before) = logits(&m);
        assert_eq!(before.shape(), (3, 9));
        let emb = m.params.get(m.embed_id()).clone();
        for t in 0..3 {
            let dot: f64 = s.row(t).iter().zip(emb.row(6)).map(|(a, b)| a * b).sum();
            assert!((before.get(t, 6) - dot).abs() < 1e-12);
        }
        let id = m.embed_id();
        m.params.get_mut(id).row_mut(6)[0] += 1.0;
        let (_, after) = logits(&m);
        for t in 0..3 {
            assert!((after.get(t, 6) - before.get(t, 6) - s.get(t, 0)).abs() < 1e-12);
            assert_eq!(after.get(t, BLANK), before.get(t, BLANK));
        }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_stable() {
        let m = Model::new(tiny_config(), 6).unwrap();
        let bytes = m.to_checkpoint_bytes();
        let back = Model::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back.to_checkpoint_bytes(), bytes);
        assert!(Model::from_checkpoint_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn averaging() {
        let m = Model::new(tiny_config(), 7).unwrap();
        let same = Model::average(&[m.clone(), m.clone(), m.clone()]).unwrap();
        for id in 0..m.params.len() {
            for (a, b) in same.params.get(id).data().iter().zip(m.params.get(id).data()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        let mut neg = m.clone();
        for id in 0..neg.params.len() {
            neg.params.get_mut(id).scale_in_place(-1.0);
        }
        let zero = Model::average(&[m.clone(), neg]).unwrap();
        assert!(zero.params.iter().all(|(_, t)| t.data().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig { d_model: 10, n_heads: 3, dropout: 1.0, ..tiny_config() };
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("n_heads") && msg.contains("dropout"));
    }
}
