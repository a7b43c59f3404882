//! Transformer building blocks over the tape. Each block owns parameter ids
//! into a [`ParamStore`]; forward passes borrow the store.

use autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;

/// Parameter initializer.
pub struct Init<'s> {
    pub store: &'s mut ParamStore,
    pub rng: ChaCha8Rng,
}

impl Init<'_> {
    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, bound: f64) -> ParamId {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound));
        self.store.add(name, t)
    }

    /// Glorot-uniform weight matrix.
    pub fn glorot(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(name, fan_in, fan_out, bound)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.store.add(name, Tensor::zeros(rows, cols))
    }

    pub fn ones(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.store.add(name, Tensor::full(rows, cols, 1.0))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear { weight: init.glorot(&format!("{name}.w"), fan_in, fan_out), bias: init.zeros(&format!("{name}.b"), 1, fan_out) }
    }

    /// Weights uniform in `[-bound, bound]`, zero bias.
    pub fn with_bound(init: &mut Init<'_>, name: &str, fan_in: usize, fan_out: usize, bound: f64) -> Self {
        Linear { weight: init.uniform(&format!("{name}.w"), fan_in, fan_out, bound), bias: init.zeros(&format!("{name}.b"), 1, fan_out) }
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, ps: &'a ParamStore, x: Var) -> Var {
        let w = g.param(ps, self.weight);
        let b = g.param(ps, self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init<'_>, name: &str, width: usize) -> Self {
        LayerNorm { gain: init.ones(&format!("{name}.g"), 1, width), bias: init.zeros(&format!("{name}.b"), 1, width) }
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, ps: &'a ParamStore, x: Var) -> Var {
        let n = g.layer_norm(x, LN_EPS);
        let gain = g.param(ps, self.gain);
        let bias = g.param(ps, self.bias);
        let scaled = g.mul_row(n, gain);
        g.add_row(scaled, bias)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(init: &mut Init<'_>, name: &str, width: usize, hidden: usize) -> Self {
        FeedForward {
            inner: Linear::new(init, &format!("{name}.fc1"), width, hidden),
            outer: Linear::new(init, &format!("{name}.fc2"), hidden, width),
        }
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, ps: &'a ParamStore, x: Var) -> Var {
        let h = self.inner.forward(g, ps, x);
        let h = g.gelu(h);
        self.outer.forward(g, ps, h)
    }
}

/// Keys and values already projected, ready to be attended over.
#[derive(Clone, Copy, Debug)]
pub struct KeyValues {
    pub keys: Var,
    pub values: Var,
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init<'_>, name: &str, heads: usize, head_dim: usize) -> Self {
        let width = heads * head_dim;
        MultiHeadAttention {
            query: Linear::new(init, &format!("{name}.q"), width, width),
            key: Linear::new(init, &format!("{name}.k"), width, width),
            value: Linear::new(init, &format!("{name}.v"), width, width),
            output: Linear::new(init, &format!("{name}.o"), width, width),
            heads,
            head_dim,
        }
    }

    pub fn project_kv<'a>(&self, g: &mut Graph<'a>, ps: &'a ParamStore, source: Var) -> KeyValues {
        KeyValues { keys: self.key.forward(g, ps, source), values: self.value.forward(g, ps, source) }
    }

    /// Attends `queries` (already in model space, not yet projected) over `kv`.
    pub fn attend<'a>(&self, g: &mut Graph<'a>, ps: &'a ParamStore, queries: Var, kv: KeyValues, mask: Option<Var>) -> Var {
        let q = self.query.forward(g, ps, queries);
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let start = h * self.head_dim;
            let (qh, kh, vh) = if self.heads == 1 {
                (q, kv.keys, kv.values)
            } else {
                (
                    g.slice_cols(q, start, self.head_dim),
                    g.slice_cols(kv.keys, start, self.head_dim),
                    g.slice_cols(kv.values, start, self.head_dim),
                )
            };
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let scores = match mask {
                Some(m) => g.add(scores, m),
                None => scores,
            };
            let weights = g.softmax(scores);
            outs.push(g.matmul(weights, vh));
        }
        let joined = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.output.forward(g, ps, joined)
    }
}

/// `n x n` additive mask hiding future positions.
pub fn causal_mask(n: usize) -> Tensor {
    Tensor::from_fn(n, n, |r, c| if c > r { MASKED } else { 0.0 })
}

/// Sinusoidal position encodings, `len x width`.
pub fn positional_encoding(len: usize, width: usize) -> Tensor {
    Tensor::from_fn(len, width, |pos, i| {
        let pair = (i / 2) as f64;
        let rate = 1.0 / 10_000f64.powf(2.0 * pair / width as f64);
        let angle = pos as f64 * rate;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Pre-norm encoder block: self-attention then feed-forward, each residual.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new(init: &mut Init<'_>, name: &str, heads: usize, head_dim: usize, ffn_dim: usize) -> Self {
        let width = heads * head_dim;
        EncoderLayer {
            norm_attn: LayerNorm::new(init, &format!("{name}.ln1"), width),
            attn: MultiHeadAttention::new(init, &format!("{name}.attn"), heads, head_dim),
            norm_ffn: LayerNorm::new(init, &format!("{name}.ln2"), width),
            ffn: FeedForward::new(init, &format!("{name}.ffn"), width, ffn_dim),
        }
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, ps: &'a ParamStore, x: Var) -> Var {
        let n = self.norm_attn.forward(g, ps, x);
        let kv = self.attn.project_kv(g, ps, n);
        let a = self.attn.attend(g, ps, n, kv, None);
        let h = g.add(x, a);
        let n = self.norm_ffn.forward(g, ps, h);
        let f = self.ffn.forward(g, ps, n);
        g.add(h, f)
    }
}

/// Pre-norm decoder block: causal self-attention, cross-attention over memory, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

/// Self-attention keys/values of the positions decoded so far.
#[derive(Clone, Copy, Debug)]
pub struct StepCache {
    pub kv: Option<KeyValues>,
}

impl DecoderLayer {
    pub fn new(init: &mut Init<'_>, name: &str, heads: usize, head_dim: usize, ffn_dim: usize) -> Self {
        let width = heads * head_dim;
        DecoderLayer {
            norm_self: LayerNorm::new(init, &format!("{name}.ln1"), width),
            self_attn: MultiHeadAttention::new(init, &format!("{name}.self"), heads, head_dim),
            norm_cross: LayerNorm::new(init, &format!("{name}.ln2"), width),
            cross_attn: MultiHeadAttention::new(init, &format!("{name}.cross"), heads, head_dim),
            norm_ffn: LayerNorm::new(init, &format!("{name}.ln3"), width),
            ffn: FeedForward::new(init, &format!("{name}.ffn"), width, ffn_dim),
        }
    }

    pub fn memory_kv<'a>(&self, g: &mut Graph<'a>, ps: &'a ParamStore, memory: Var) -> KeyValues {
        self.cross_attn.project_kv(g, ps, memory)
    }

    /// Whole-sequence pass with a causal mask (teacher forcing).
    pub fn forward<'a>(&self, g: &mut Graph<'a>, ps: &'a ParamStore, x: Var, memory: KeyValues, mask: Var) -> Var {
        let n = self.norm_self.forward(g, ps, x);
        let kv = self.self_attn.project_kv(g, ps, n);
        let a = self.self_attn.attend(g, ps, n, kv, Some(mask));
        self.finish(g, ps, x, a, memory)
    }

    /// One new position; extends `cache` with its key and value.
    pub fn step<'a>(&self, g: &mut Graph<'a>, ps: &'a ParamStore, x: Var, memory: KeyValues, cache: &mut StepCache) -> Var {
        let n = self.norm_self.forward(g, ps, x);
        let new = self.self_attn.project_kv(g, ps, n);
        let kv = match cache.kv {
            None => new,
            Some(old) => KeyValues { keys: g.concat_rows(&[old.keys, new.keys]), values: g.concat_rows(&[old.values, new.values]) },
        };
        cache.kv = Some(kv);
        let a = self.self_attn.attend(g, ps, n, kv, None);
        self.finish(g, ps, x, a, memory)
    }

    fn finish<'a>(&self, g: &mut Graph<'a>, ps: &'a ParamStore, x: Var, attn: Var, memory: KeyValues) -> Var {
        let h = g.add(x, attn);
        let n = self.norm_cross.forward(g, ps, h);
        let c = self.cross_attn.attend(g, ps, n, memory, None);
        let h = g.add(h, c);
        let n = self.norm_ffn.forward(g, ps, h);
        let f = self.ffn.forward(g, ps, n);
        g.add(h, f)
    }
}

/// Embedding table, layers, and final norm of a transformer encoder stack.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
    pub norm: LayerNorm,
}

impl Encoder {
    pub fn new(init: &mut Init<'_>, name: &str, layers: usize, heads: usize, head_dim: usize, ffn_dim: usize) -> Self {
        Encoder {
            layers: (0..layers).map(|l| EncoderLayer::new(init, &format!("{name}.l{l}"), heads, head_dim, ffn_dim)).collect(),
            norm: LayerNorm::new(init, &format!("{name}.ln"), heads * head_dim),
        }
    }

    /// Runs the stack over already-embedded inputs.
    pub fn forward<'a>(&self, g: &mut Graph<'a>, ps: &'a ParamStore, x: Var) -> Var {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(g, ps, h);
        }
        self.norm.forward(g, ps, h)
    }
}

/// Decoder stack. The final norm is applied by the caller before the output head.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
    pub norm: LayerNorm,
}

impl Decoder {
    pub fn new(init: &mut Init<'_>, name: &str, layers: usize, heads: usize, head_dim: usize, ffn_dim: usize) -> Self {
        Decoder {
            layers: (0..layers).map(|l| DecoderLayer::new(init, &format!("{name}.l{l}"), heads, head_dim, ffn_dim)).collect(),
            norm: LayerNorm::new(init, &format!("{name}.ln"), heads * head_dim),
        }
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, ps: &'a ParamStore, x: Var, memory: &[KeyValues], mask: Var) -> Var {
        let mut h = x;
        for (layer, mem) in self.layers.iter().zip(memory) {
            h = layer.forward(g, ps, h, *mem, mask);
        }
        h
    }

    pub fn step<'a>(&self, g: &mut Graph<'a>, ps: &'a ParamStore, x: Var, memory: &[KeyValues], caches: &mut [StepCache]) -> Var {
        let mut h = x;
        for ((layer, mem), cache) in self.layers.iter().zip(memory).zip(caches.iter_mut()) {
            h = layer.step(g, ps, h, *mem, cache);
        }
        h
    }
}
