//! Small causal transformer with hand-written reverse-mode gradients.
//!
//! Layout: token + learned position embeddings, `n_layers` pre-norm blocks
//! (multi-head causal self-attention, GELU feed-forward, residual adds), a
//! final layer norm, and an output projection tied to the token embeddings.
//!
//! Sequences of a batch are packed row-wise without padding; attention only
//! ever looks inside a sequence's own rows, so samples cannot leak into each
//! other. All arithmetic is `f64` and single-threaded with a fixed reduction
//! order, so results are bit-reproducible for a given input.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memorizer::vocab::{Vocab, BOS, EOS};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
}

impl ModelConfig {
    /// Default shape (d_model 128, 2 layers, 4 heads, 64 positions).
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 128,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 64,
            vocab_size,
        }
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 6 {
            return Err(Error::Config(format!(
                "vocab_size {} below minimum 6",
                self.vocab_size
            )));
        }
        if self.max_seq_len < 2 || self.n_layers == 0 {
            return Err(Error::Config(
                "max_seq_len must be >= 2 and n_layers >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerOffsets {
    ln1_g: usize,
    ln1_b: usize,
    qkv: usize,
    attn_out: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct Offsets {
    tok_emb: usize,
    pos_emb: usize,
    layers: Vec<LayerOffsets>,
    lnf_g: usize,
    lnf_b: usize,
}

/// Names, shapes and offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Layout {
    tensors: Vec<TensorInfo>,
    offsets: Offsets,
    total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let f = cfg.d_ff();
        let mut tensors = Vec::new();
        let mut total = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let offset = total;
            total += shape.iter().product::<usize>();
            tensors.push(TensorInfo {
                name,
                shape,
                offset,
            });
            offset
        };
        let tok_emb = push("tok_emb".into(), vec![cfg.vocab_size, d]);
        let pos_emb = push("pos_emb".into(), vec![cfg.max_seq_len, d]);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            layers.push(LayerOffsets {
                ln1_g: push(p("ln1.gain"), vec![d]),
                ln1_b: push(p("ln1.bias"), vec![d]),
                qkv: push(p("attn.qkv"), vec![d, 3 * d]),
                attn_out: push(p("attn.out"), vec![d, d]),
                ln2_g: push(p("ln2.gain"), vec![d]),
                ln2_b: push(p("ln2.bias"), vec![d]),
                w1: push(p("ffn.w1"), vec![d, f]),
                b1: push(p("ffn.b1"), vec![f]),
                w2: push(p("ffn.w2"), vec![f, d]),
                b2: push(p("ffn.b2"), vec![d]),
            });
        }
        let lnf_g = push("final_ln.gain".into(), vec![d]);
        let lnf_b = push("final_ln.bias".into(), vec![d]);
        Layout {
            tensors,
            offsets: Offsets {
                tok_emb,
                pos_emb,
                layers,
                lnf_g,
                lnf_b,
            },
            total,
        }
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn get(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Model weights as one flat vector addressed through a [`Layout`].
#[derive(Debug, Clone)]
pub struct Parameters {
    config: ModelConfig,
    layout: Layout,
    data: Vec<f64>,
}

impl PartialEq for Parameters {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.data == other.data
    }
}

impl Parameters {
    /// Gaussian(0, 0.02) weights, unit layer-norm gains, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut data = vec![0.0; layout.total];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for t in &layout.tensors {
            let slot = &mut data[t.range()];
            if t.name.ends_with(".gain") {
                slot.fill(1.0);
            } else if t.shape.len() == 2 {
                for v in slot.iter_mut() {
                    *v = normal.sample(&mut rng);
                }
            }
        }
        Ok(Parameters {
            config,
            layout,
            data,
        })
    }

    pub fn from_data(config: ModelConfig, data: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if data.len() != layout.total {
            return Err(Error::Checkpoint(format!(
                "parameter count {} does not match model shape ({} expected)",
                data.len(),
                layout.total
            )));
        }
        Ok(Parameters {
            config,
            layout,
            data,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.get(name).map(|t| &self.data[t.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.get(name)?.range();
        Some(&mut self.data[range])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn slice(&self, offset: usize, len: usize) -> &[f64] {
        &self.data[offset..offset + len]
    }

    /// Token embedding matrix `[vocab, d_model]`, also the output projection.
    pub fn token_embeddings(&self) -> &[f64] {
        let c = &self.config;
        self.slice(self.layout.offsets.tok_emb, c.vocab_size * c.d_model)
    }
}

/// Gradients with the same layout as [`Parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub data: Vec<f64>,
}

impl Gradients {
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn tensor<'a>(&'a self, layout: &Layout, name: &str) -> Option<&'a [f64]> {
        layout.get(name).map(|t| &self.data[t.range()])
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// One training or scoring sequence.
///
/// `input[t]` predicts `target[t]`; `mask[t]` marks positions whose target is
/// part of the expected continuation (answer tokens and the closing EOS).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub input: Vec<u32>,
    pub target: Vec<u32>,
    pub mask: Vec<bool>,
    /// Position of this sample in its dataset.
    pub index: usize,
}

impl Sample {
    /// `BOS prompt target EOS`, shifted into input/target with the loss mask
    /// covering the target tokens and EOS only.
    pub fn new(vocab: &Vocab, prompt: &str, target: &str, index: usize) -> Self {
        let mut seq = vec![BOS];
        seq.extend(vocab.encode(prompt));
        let prompt_len = seq.len();
        seq.extend(vocab.encode(target));
        seq.push(EOS);
        let input = seq[..seq.len() - 1].to_vec();
        let target = seq[1..].to_vec();
        let mask = (0..input.len()).map(|t| t + 1 >= prompt_len).collect();
        Sample {
            input,
            target,
            mask,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.input.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub samples: Vec<Sample>,
}

impl Batch {
    pub fn new(samples: Vec<Sample>) -> Self {
        Batch { samples }
    }

    pub fn from_pairs(vocab: &Vocab, pairs: &[(&str, &str)]) -> Self {
        Batch {
            samples: pairs
                .iter()
                .enumerate()
                .map(|(i, (p, t))| Sample::new(vocab, p, t, i))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Summed negative log-likelihood over each sample's masked positions.
    pub per_sample: Vec<f64>,
    pub mean: f64,
}

// ---------------------------------------------------------------------------
// dense kernels

/// `c = beta * c + op(a) · op(b)` with `op(a)` m×k and `op(b)` k×n, row-major.
/// A transposed operand is stored in its untransposed shape (`a` as k×m).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m) } else { (k, 1) };
    let (rsb, csb) = if tb { (1, k) } else { (n, 1) };
    // SAFETY: bounds checked above; strides describe row-major storage of the
    // stated shapes, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn add_bias(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn col_sum_into(x: &[f64], width: usize, out: &mut [f64]) {
    for row in x.chunks_exact(width) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

#[derive(Debug, Clone, Default)]
struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn layer_norm(x: &[f64], d: usize, gain: &[f64], bias: &[f64], out: &mut [f64]) -> LnCache {
    let rows = x.len() / d;
    let mut cache = LnCache {
        xhat: vec![0.0; x.len()],
        rstd: vec![0.0; rows],
    };
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        cache.rstd[r] = rstd;
        for i in 0..d {
            let xh = (row[i] - mean) * rstd;
            cache.xhat[r * d + i] = xh;
            out[r * d + i] = xh * gain[i] + bias[i];
        }
    }
    cache
}

/// Accumulates gain/bias gradients and adds the input gradient into `dx`.
fn layer_norm_backward(
    dy: &[f64],
    d: usize,
    cache: &LnCache,
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
    dx: &mut [f64],
) {
    let rows = dy.len() / d;
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for i in 0..d {
            dgain[i] += dyr[i] * xh[i];
            dbias[i] += dyr[i];
            dxhat[i] = dyr[i] * gain[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xh[i];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let rstd = cache.rstd[r];
        for i in 0..d {
            dx[r * d + i] += rstd * (dxhat[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
}

// ---------------------------------------------------------------------------
// forward

struct Packed {
    tokens: Vec<u32>,
    positions: Vec<usize>,
    /// `(first row, length)` per sequence.
    spans: Vec<(usize, usize)>,
}

impl Packed {
    fn new<'a>(seqs: impl IntoIterator<Item = &'a [u32]>, max_len: usize) -> Result<Self> {
        let mut p = Packed {
            tokens: Vec::new(),
            positions: Vec::new(),
            spans: Vec::new(),
        };
        for seq in seqs {
            if seq.len() > max_len {
                return Err(Error::SequenceTooLong {
                    len: seq.len(),
                    max: max_len,
                });
            }
            if seq.is_empty() {
                return Err(Error::Empty("input sequence"));
            }
            p.spans.push((p.tokens.len(), seq.len()));
            p.tokens.extend_from_slice(seq);
            p.positions.extend(0..seq.len());
        }
        Ok(p)
    }

    fn rows(&self) -> usize {
        self.tokens.len()
    }
}

struct LayerCache {
    ln1: LnCache,
    ln1_out: Vec<f64>,
    qkv: Vec<f64>,
    /// Attention probabilities, `[seq][head][i][j]` blocks of len*len.
    probs: Vec<f64>,
    concat: Vec<f64>,
    ln2: LnCache,
    ln2_out: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

struct Cache {
    packed: Packed,
    /// Start of each sequence's block in `LayerCache::probs`.
    prob_offsets: Vec<usize>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
    hidden: Vec<f64>,
}

fn attention_forward(
    cfg: &ModelConfig,
    packed: &Packed,
    prob_offsets: &[usize],
    qkv: &[f64],
    probs: &mut [f64],
    concat: &mut [f64],
) {
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let w = 3 * d;
    let mut scores = Vec::new();
    for (s, &(start, len)) in packed.spans.iter().enumerate() {
        for h in 0..cfg.n_heads {
            let block = prob_offsets[s] + h * len * len;
            for i in 0..len {
                let q = &qkv[(start + i) * w + h * dh..][..dh];
                scores.clear();
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let k = &qkv[(start + j) * w + d + h * dh..][..dh];
                    let sc = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
                    max = max.max(sc);
                    scores.push(sc);
                }
                let mut z = 0.0;
                for sc in scores.iter_mut() {
                    *sc = (*sc - max).exp();
                    z += *sc;
                }
                let out = &mut concat[(start + i) * d + h * dh..][..dh];
                out.fill(0.0);
                for (j, sc) in scores.iter().enumerate() {
                    let p = sc / z;
                    probs[block + i * len + j] = p;
                    let v = &qkv[(start + j) * w + 2 * d + h * dh..][..dh];
                    for (o, vv) in out.iter_mut().zip(v) {
                        *o += p * vv;
                    }
                }
            }
        }
    }
}

fn attention_backward(
    cfg: &ModelConfig,
    packed: &Packed,
    prob_offsets: &[usize],
    qkv: &[f64],
    probs: &[f64],
    dconcat: &[f64],
    dqkv: &mut [f64],
) {
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let w = 3 * d;
    let mut dp = Vec::new();
    for (s, &(start, len)) in packed.spans.iter().enumerate() {
        for h in 0..cfg.n_heads {
            let block = prob_offsets[s] + h * len * len;
            for i in 0..len {
                let dout = &dconcat[(start + i) * d + h * dh..][..dh];
                dp.clear();
                let mut weighted = 0.0;
                for j in 0..=i {
                    let p = probs[block + i * len + j];
                    let v_off = (start + j) * w + 2 * d + h * dh;
                    let v = &qkv[v_off..v_off + dh];
                    let dpij = dout.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
                    weighted += p * dpij;
                    dp.push(dpij);
                    for (dv, g) in dqkv[v_off..v_off + dh].iter_mut().zip(dout) {
                        *dv += p * g;
                    }
                }
                let q_off = (start + i) * w + h * dh;
                for (j, dpij) in dp.iter().enumerate() {
                    let p = probs[block + i * len + j];
                    let ds = p * (dpij - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let k_off = (start + j) * w + d + h * dh;
                    for c in 0..dh {
                        dqkv[q_off + c] += ds * qkv[k_off + c];
                        dqkv[k_off + c] += ds * qkv[q_off + c];
                    }
                }
            }
        }
    }
}

fn forward_hidden(params: &Parameters, packed: Packed) -> Cache {
    let cfg = &params.config;
    let off = &params.layout.offsets;
    let d = cfg.d_model;
    let f = cfg.d_ff();
    let n = packed.rows();

    let mut x = vec![0.0; n * d];
    let tok = params.slice(off.tok_emb, cfg.vocab_size * d);
    let pos = params.slice(off.pos_emb, cfg.max_seq_len * d);
    for r in 0..n {
        let t = packed.tokens[r] as usize;
        let p = packed.positions[r];
        for i in 0..d {
            x[r * d + i] = tok[t * d + i] + pos[p * d + i];
        }
    }

    let mut prob_offsets = Vec::with_capacity(packed.spans.len());
    let mut prob_len = 0;
    for &(_, len) in &packed.spans {
        prob_offsets.push(prob_len);
        prob_len += cfg.n_heads * len * len;
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for lo in &off.layers {
        let mut ln1_out = vec![0.0; n * d];
        let ln1 = layer_norm(
            &x,
            d,
            params.slice(lo.ln1_g, d),
            params.slice(lo.ln1_b, d),
            &mut ln1_out,
        );
        let mut qkv = vec![0.0; n * 3 * d];
        gemm(n, d, 3 * d, &ln1_out, false, params.slice(lo.qkv, d * 3 * d), false, 0.0, &mut qkv);
        let mut probs = vec![0.0; prob_len];
        let mut concat = vec![0.0; n * d];
        attention_forward(cfg, &packed, &prob_offsets, &qkv, &mut probs, &mut concat);
        gemm(n, d, d, &concat, false, params.slice(lo.attn_out, d * d), false, 1.0, &mut x);

        let mut ln2_out = vec![0.0; n * d];
        let ln2 = layer_norm(
            &x,
            d,
            params.slice(lo.ln2_g, d),
            params.slice(lo.ln2_b, d),
            &mut ln2_out,
        );
        let mut pre = vec![0.0; n * f];
        gemm(n, d, f, &ln2_out, false, params.slice(lo.w1, d * f), false, 0.0, &mut pre);
        add_bias(&mut pre, params.slice(lo.b1, f));
        let act: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
        gemm(n, f, d, &act, false, params.slice(lo.w2, f * d), false, 1.0, &mut x);
        add_bias(&mut x, params.slice(lo.b2, d));

        layers.push(LayerCache {
            ln1,
            ln1_out,
            qkv,
            probs,
            concat,
            ln2,
            ln2_out,
            pre,
            act,
        });
    }

    let mut hidden = vec![0.0; n * d];
    let lnf = layer_norm(
        &x,
        d,
        params.slice(off.lnf_g, d),
        params.slice(off.lnf_b, d),
        &mut hidden,
    );
    Cache {
        packed,
        prob_offsets,
        layers,
        lnf,
        hidden,
    }
}

/// Logits for the selected packed rows against an output matrix `[V, d]`.
fn project_rows(cfg: &ModelConfig, hidden: &[f64], rows: &[usize], out_w: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let d = cfg.d_model;
    let v = cfg.vocab_size;
    let mut h = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        h.extend_from_slice(&hidden[r * d..(r + 1) * d]);
    }
    let mut logits = vec![0.0; rows.len() * v];
    gemm(rows.len(), d, v, &h, false, out_w, true, 0.0, &mut logits);
    (h, logits)
}

fn backward(
    params: &Parameters,
    cache: &Cache,
    rows: &[usize],
    gathered: &[f64],
    dlogits: &[f64],
    out_w: &[f64],
    grads: &mut [f64],
    mut out_grad: Option<&mut [f64]>,
) {
    let cfg = &params.config;
    let off = &params.layout.offsets;
    let d = cfg.d_model;
    let f = cfg.d_ff();
    let v = cfg.vocab_size;
    let n = cache.packed.rows();
    let m = rows.len();

    // output projection
    {
        let dw: &mut [f64] = match out_grad.as_deref_mut() {
            Some(g) => g,
            None => &mut grads[off.tok_emb..off.tok_emb + v * d],
        };
        gemm(v, m, d, dlogits, true, gathered, false, 1.0, dw);
    }
    let mut dh = vec![0.0; m * d];
    gemm(m, v, d, dlogits, false, out_w, false, 0.0, &mut dh);
    let mut dhidden = vec![0.0; n * d];
    for (i, &r) in rows.iter().enumerate() {
        for c in 0..d {
            dhidden[r * d + c] += dh[i * d + c];
        }
    }

    let mut dx = vec![0.0; n * d];
    {
        let (head, tail) = grads.split_at_mut(off.lnf_b);
        layer_norm_backward(
            &dhidden,
            d,
            &cache.lnf,
            params.slice(off.lnf_g, d),
            &mut head[off.lnf_g..off.lnf_g + d],
            &mut tail[..d],
            &mut dx,
        );
    }

    let mut dact = vec![0.0; n * f];
    let mut dln = vec![0.0; n * d];
    let mut dconcat = vec![0.0; n * d];
    let mut dqkv = vec![0.0; n * 3 * d];
    for (lo, lc) in off.layers.iter().zip(&cache.layers).rev() {
        // feed-forward
        gemm(f, n, d, &lc.act, true, &dx, false, 1.0, &mut grads[lo.w2..lo.w2 + f * d]);
        col_sum_into(&dx, d, &mut grads[lo.b2..lo.b2 + d]);
        gemm(n, d, f, &dx, false, params.slice(lo.w2, f * d), true, 0.0, &mut dact);
        for (g, &x) in dact.iter_mut().zip(&lc.pre) {
            *g *= gelu_grad(x);
        }
        gemm(d, n, f, &lc.ln2_out, true, &dact, false, 1.0, &mut grads[lo.w1..lo.w1 + d * f]);
        col_sum_into(&dact, f, &mut grads[lo.b1..lo.b1 + f]);
        gemm(n, f, d, &dact, false, params.slice(lo.w1, d * f), true, 0.0, &mut dln);
        {
            let (head, tail) = grads.split_at_mut(lo.ln2_b);
            layer_norm_backward(
                &dln,
                d,
                &lc.ln2,
                params.slice(lo.ln2_g, d),
                &mut head[lo.ln2_g..lo.ln2_g + d],
                &mut tail[..d],
                &mut dx,
            );
        }

        // attention
        gemm(d, n, d, &lc.concat, true, &dx, false, 1.0, &mut grads[lo.attn_out..lo.attn_out + d * d]);
        gemm(n, d, d, &dx, false, params.slice(lo.attn_out, d * d), true, 0.0, &mut dconcat);
        dqkv.fill(0.0);
        attention_backward(
            cfg,
            &cache.packed,
            &cache.prob_offsets,
            &lc.qkv,
            &lc.probs,
            &dconcat,
            &mut dqkv,
        );
        gemm(d, n, 3 * d, &lc.ln1_out, true, &dqkv, false, 1.0, &mut grads[lo.qkv..lo.qkv + d * 3 * d]);
        gemm(n, 3 * d, d, &dqkv, false, params.slice(lo.qkv, d * 3 * d), true, 0.0, &mut dln);
        {
            let (head, tail) = grads.split_at_mut(lo.ln1_b);
            layer_norm_backward(
                &dln,
                d,
                &lc.ln1,
                params.slice(lo.ln1_g, d),
                &mut head[lo.ln1_g..lo.ln1_g + d],
                &mut tail[..d],
                &mut dx,
            );
        }
    }

    for r in 0..n {
        let t = cache.packed.tokens[r] as usize;
        let p = cache.packed.positions[r];
        for c in 0..d {
            grads[off.tok_emb + t * d + c] += dx[r * d + c];
            grads[off.pos_emb + p * d + c] += dx[r * d + c];
        }
    }
}

fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
    row[target] - max - z.ln()
}

/// Summed negative log-likelihood of `targets` at the masked rows of
/// `logits`, via a max-shifted log-softmax.
pub fn masked_nll(logits: &Matrix, targets: &[u32], mask: &[bool]) -> f64 {
    (0..logits.rows)
        .filter(|&t| mask[t])
        .map(|t| -log_softmax_at(logits.row(t), targets[t] as usize))
        .sum()
}

/// Masked rows of `batch` in packed coordinates, with their targets and owning
/// sample.
fn masked_rows(batch: &Batch) -> Result<(Vec<usize>, Vec<u32>, Vec<usize>)> {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut owner = Vec::new();
    let mut start = 0;
    for (s, sample) in batch.samples.iter().enumerate() {
        let before = rows.len();
        for (t, (&m, &y)) in sample.mask.iter().zip(&sample.target).enumerate() {
            if m {
                rows.push(start + t);
                targets.push(y);
                owner.push(s);
            }
        }
        if rows.len() == before {
            return Err(Error::EmptyMask { sample: s });
        }
        start += sample.input.len();
    }
    Ok((rows, targets, owner))
}

fn pack_batch(params: &Parameters, batch: &Batch) -> Result<Packed> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    for s in &batch.samples {
        if s.target.len() != s.input.len() || s.mask.len() != s.input.len() {
            return Err(Error::Config(format!(
                "sample {} has mismatched input/target/mask lengths",
                s.index
            )));
        }
        if let Some(&bad) = s
            .input
            .iter()
            .chain(&s.target)
            .find(|&&t| t as usize >= params.config.vocab_size)
        {
            return Err(Error::Config(format!(
                "token id {bad} out of range for vocabulary of {}",
                params.config.vocab_size
            )));
        }
    }
    Packed::new(
        batch.samples.iter().map(|s| s.input.as_slice()),
        params.config.max_seq_len,
    )
}

fn loss_impl(
    params: &Parameters,
    out_w: &[f64],
    batch: &Batch,
    want_grad: bool,
    out_grad: Option<&mut [f64]>,
) -> Result<(LossOutput, Option<Vec<f64>>)> {
    let packed = pack_batch(params, batch)?;
    let (rows, targets, owner) = masked_rows(batch)?;
    let cfg = &params.config;
    let v = cfg.vocab_size;
    let cache = forward_hidden(params, packed);
    let (gathered, logits) = project_rows(cfg, &cache.hidden, &rows, out_w);

    let b = batch.len() as f64;
    let mut per_sample = vec![0.0; batch.len()];
    let mut dlogits = if want_grad { vec![0.0; logits.len()] } else { Vec::new() };
    for (i, (&y, &s)) in targets.iter().zip(&owner).enumerate() {
        let row = &logits[i * v..(i + 1) * v];
        per_sample[s] -= log_softmax_at(row, y as usize);
        if want_grad {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let drow = &mut dlogits[i * v..(i + 1) * v];
            for (dv, x) in drow.iter_mut().zip(row) {
                *dv = (x - max).exp() / z / b;
            }
            drow[y as usize] -= 1.0 / b;
        }
    }
    let mean = per_sample.iter().sum::<f64>() / b;
    let out = LossOutput { per_sample, mean };
    if !want_grad {
        return Ok((out, None));
    }
    let mut grads = vec![0.0; params.data.len()];
    backward(params, &cache, &rows, &gathered, &dlogits, out_w, &mut grads, out_grad);
    Ok((out, Some(grads)))
}

/// Logits at every position of every sample, `[len, V]` per sample.
pub fn forward(params: &Parameters, batch: &Batch) -> Result<Vec<Matrix>> {
    let packed = pack_batch(params, batch)?;
    let spans = packed.spans.clone();
    let rows: Vec<usize> = (0..packed.rows()).collect();
    let cache = forward_hidden(params, packed);
    let (_, logits) = project_rows(&params.config, &cache.hidden, &rows, params.token_embeddings());
    let v = params.config.vocab_size;
    Ok(spans
        .into_iter()
        .map(|(start, len)| Matrix {
            rows: len,
            cols: v,
            data: logits[start * v..(start + len) * v].to_vec(),
        })
        .collect())
}

/// Per-sample summed target NLL and the batch mean.
pub fn loss(params: &Parameters, batch: &Batch) -> Result<LossOutput> {
    Ok(loss_impl(params, params.token_embeddings(), batch, false, None)?.0)
}

/// Loss with a separate output matrix in place of the tied embeddings; the
/// returned gradient covers the input-side parameters only, and the output
/// matrix gradient is written to `out_grad`.
#[doc(hidden)]
pub fn loss_and_gradients_untied(
    params: &Parameters,
    out_w: &[f64],
    batch: &Batch,
    out_grad: &mut [f64],
) -> Result<(LossOutput, Gradients)> {
    let (out, grads) = loss_impl(params, out_w, batch, true, Some(out_grad))?;
    Ok((
        out,
        Gradients {
            data: grads.expect("gradients requested"),
        },
    ))
}

#[doc(hidden)]
pub fn loss_untied(params: &Parameters, out_w: &[f64], batch: &Batch) -> Result<LossOutput> {
    Ok(loss_impl(params, out_w, batch, false, None)?.0)
}

/// Loss and exact gradients of the batch-mean loss.
pub fn gradients(params: &Parameters, batch: &Batch) -> Result<(LossOutput, Gradients)> {
    let (out, grads) = loss_impl(params, params.token_embeddings(), batch, true, None)?;
    let grads = Gradients {
        data: grads.expect("gradients requested"),
    };
    for t in params.layout.tensors() {
        if grads.data[t.range()].iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                tensor: t.name.clone(),
            });
        }
    }
    Ok((out, grads))
}

fn argmax_lowest(row: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy continuations for many prompts at once. Each prompt is decoded
/// independently: argmax token (lowest id on ties) until EOS or `max_new`.
pub fn generate_greedy_batch(
    params: &Parameters,
    vocab: &Vocab,
    prompts: &[&str],
    max_new: usize,
) -> Result<Vec<String>> {
    let max_len = params.config.max_seq_len;
    let mut seqs: Vec<Vec<u32>> = Vec::with_capacity(prompts.len());
    for p in prompts {
        let mut seq = vec![BOS];
        seq.extend(vocab.encode(p));
        if seq.len() + max_new > max_len {
            return Err(Error::SequenceTooLong {
                len: seq.len() + max_new,
                max: max_len,
            });
        }
        seqs.push(seq);
    }
    let prompt_lens: Vec<usize> = seqs.iter().map(Vec::len).collect();
    let mut active: Vec<usize> = (0..seqs.len()).collect();
    for _ in 0..max_new {
        if active.is_empty() {
            break;
        }
        let packed = Packed::new(active.iter().map(|&i| seqs[i].as_slice()), max_len)?;
        let rows: Vec<usize> = packed.spans.iter().map(|&(s, l)| s + l - 1).collect();
        let cache = forward_hidden(params, packed);
        let (_, logits) = project_rows(&params.config, &cache.hidden, &rows, params.token_embeddings());
        let v = params.config.vocab_size;
        let mut still = Vec::with_capacity(active.len());
        for (k, &i) in active.iter().enumerate() {
            let next = argmax_lowest(&logits[k * v..(k + 1) * v]);
            if next == EOS {
                continue;
            }
            seqs[i].push(next);
            still.push(i);
        }
        active = still;
    }
    Ok(seqs
        .iter()
        .zip(prompt_lens)
        .map(|(s, pl)| vocab.decode(&s[pl..]))
        .collect())
}

pub fn generate_greedy(
    params: &Parameters,
    vocab: &Vocab,
    prompt: &str,
    max_new: usize,
) -> Result<String> {
    Ok(generate_greedy_batch(params, vocab, &[prompt], max_new)?
        .pop()
        .expect("one prompt"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(vocab: usize, d: usize, layers: usize, heads: usize) -> Parameters {
        let cfg = ModelConfig {
            d_model: d,
            n_layers: layers,
            n_heads: heads,
            max_seq_len: 16,
            vocab_size: vocab,
        };
        Parameters::init(cfg, 11).unwrap()
    }

    fn toks(ids: &[u32]) -> Sample {
        Sample {
            input: ids.to_vec(),
            target: ids.iter().map(|&t| (t + 1) % 6).collect(),
            mask: vec![true; ids.len()],
            index: 0,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::new(10);
        assert!(c.validate().is_ok());
        c.n_heads = 3;
        assert!(c.validate().is_err());
        assert!(ModelConfig::new(5).validate().is_err());
    }

    #[test]
    fn layout_is_contiguous() {
        let p = tiny(9, 8, 2, 2);
        let mut next = 0;
        for t in p.layout().tensors() {
            assert_eq!(t.offset, next);
            next += t.len();
        }
        assert_eq!(next, p.len());
        assert_eq!(p.tensor("layers.1.ffn.w1").unwrap().len(), 8 * 32);
    }

    #[test]
    fn single_token_shape() {
        let p = tiny(6, 8, 1, 2);
        let out = forward(&p, &Batch::new(vec![toks(&[1])])).unwrap();
        assert_eq!((out[0].rows, out[0].cols), (1, 6));
        assert!(out[0].data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn overlong_sequence_is_rejected() {
        let p = tiny(6, 8, 1, 2);
        let long = toks(&[1; 17]);
        assert!(matches!(
            forward(&p, &Batch::new(vec![long])),
            Err(Error::SequenceTooLong { len: 17, max: 16 })
        ));
    }

    #[test]
    fn empty_mask_is_rejected() {
        let p = tiny(6, 8, 1, 2);
        let mut s = toks(&[1, 2]);
        s.mask = vec![false, false];
        assert!(matches!(
            loss(&p, &Batch::new(vec![s])),
            Err(Error::EmptyMask { sample: 0 })
        ));
    }

    #[test]
    fn sample_mask_covers_target_and_eos() {
        let v = Vocab::build(["p q r"]).unwrap();
        let s = Sample::new(&v, "p q", "r", 3);
        // BOS p q r EOS
        assert_eq!(s.input.len(), 4);
        assert_eq!(s.mask, vec![false, false, true, true]);
        assert_eq!(s.target[2], v.id("r").unwrap());
        assert_eq!(s.target[3], EOS);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn max_new_zero_is_empty() {
        let v = Vocab::build(["a b"]).unwrap();
        let p = tiny(v.len(), 8, 1, 2);
        assert_eq!(generate_greedy(&p, &v, "a", 0).unwrap(), "");
    }

    #[test]
    fn eos_first_stops_immediately() {
        let v = Vocab::build(["a b"]).unwrap();
        let mut p = tiny(v.len(), 8, 1, 2);
        // final norm output becomes the bias; point it at the EOS embedding
        let d = 8;
        p.tensor_mut("final_ln.gain").unwrap().fill(0.0);
        let eos: Vec<f64> = p.token_embeddings()[EOS as usize * d..][..d].to_vec();
        p.tensor_mut("final_ln.bias")
            .unwrap()
            .copy_from_slice(&eos.iter().map(|x| x * 1e3).collect::<Vec<_>>());
        assert_eq!(generate_greedy(&p, &v, "a", 5).unwrap(), "");
    }

    #[test]
    fn overlong_prompt_is_rejected() {
        let v = Vocab::build(["a"]).unwrap();
        let p = tiny(v.len(), 8, 1, 2);
        let prompt = vec!["a"; 14].join(" ");
        assert!(generate_greedy(&p, &v, &prompt, 2).is_err());
        assert!(generate_greedy(&p, &v, &prompt, 1).is_ok());
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax_lowest(&[0.0, 2.0, 2.0, 1.0]), 1);
    }
}
