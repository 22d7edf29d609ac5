//! Building blocks shared by the encoders, the feature decoder and the fusion
//! variants. Layers are thin descriptors (parameter paths plus sizes); the
//! numbers live in a [`ParamStore`] and are pulled into a [`Graph`] on use.

use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, Var};
use crate::params::{Initializer, ParamStore};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
}

/// Expected parameter: path, shape and how to initialize it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamDecl {
    pub path: String,
    pub shape: (usize, usize),
    pub kind: ParamKind,
}

pub fn init_params(decls: &[ParamDecl], seed: u64) -> ParamStore {
    let mut init = Initializer::new(seed);
    let mut store = ParamStore::new();
    for d in decls {
        let (r, c) = d.shape;
        let value = match d.kind {
            ParamKind::Weight => init.xavier(r, c),
            ParamKind::Bias => {
                let fan_in = d
                    .path
                    .strip_suffix(".bias")
                    .and_then(|base| decls.iter().find(|w| w.path == format!("{base}.weight")))
                    .map_or(c, |w| w.shape.0);
                init.uniform(r, c, 1.0 / (fan_in as f64).sqrt())
            }
            ParamKind::Beta => Mat::zeros((r, c)),
            ParamKind::Gamma => Mat::ones((r, c)),
        };
        store.insert(d.path.clone(), value);
    }
    store
}

pub fn check_params(decls: &[ParamDecl], store: &ParamStore) -> Result<()> {
    decls
        .iter()
        .try_for_each(|d| store.expect_shape(&d.path, d.shape))
}

fn decl(path: String, shape: (usize, usize), kind: ParamKind) -> ParamDecl {
    ParamDecl { path, shape, kind }
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: String,
    bias: String,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new(path: &str, inp: usize, out: usize) -> Self {
        Linear {
            weight: format!("{path}.weight"),
            bias: format!("{path}.bias"),
            inp,
            out,
        }
    }

    pub fn declare(&self, out: &mut Vec<ParamDecl>) {
        out.push(decl(self.weight.clone(), (self.inp, self.out), ParamKind::Weight));
        out.push(decl(self.bias.clone(), (1, self.out), ParamKind::Bias));
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: String,
    beta: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(path: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: format!("{path}.gamma"),
            beta: format!("{path}.beta"),
            dim,
        }
    }

    pub fn declare(&self, out: &mut Vec<ParamDecl>) {
        out.push(decl(self.gamma.clone(), (1, self.dim), ParamKind::Gamma));
        out.push(decl(self.beta.clone(), (1, self.dim), ParamKind::Beta));
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.normalize_rows(x, LN_EPS);
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        let y = g.mul_row(n, gamma);
        g.add_row(y, beta)
    }
}

/// Multi-head scaled dot-product attention with separate query and key/value
/// inputs. Self-attention passes the same node twice.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub dim: usize,
    pub n_heads: usize,
}

/// Output of an attention call with the per-head attention matrices.
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Vec<Var>,
}

impl Attention {
    pub fn new(path: &str, dim: usize, n_heads: usize) -> Result<Self> {
        if n_heads == 0 || !dim.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "model width {dim} is not divisible by {n_heads} heads"
            )));
        }
        Ok(Attention {
            q: Linear::new(&format!("{path}.q"), dim, dim),
            k: Linear::new(&format!("{path}.k"), dim, dim),
            v: Linear::new(&format!("{path}.v"), dim, dim),
            o: Linear::new(&format!("{path}.o"), dim, dim),
            dim,
            n_heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    pub fn declare(&self, out: &mut Vec<ParamDecl>) {
        for l in [&self.q, &self.k, &self.v, &self.o] {
            l.declare(out);
        }
    }

    /// `softmax(Q K^T / sqrt(d_k)) V` per head, heads concatenated and
    /// projected. Keys whose `key_mask` entry is false are excluded.
    pub fn forward(&self, g: &mut Graph, query: Var, kv: Var, key_mask: &[bool]) -> Result<Var> {
        Ok(self.forward_with_weights(g, query, kv, key_mask)?.out)
    }

    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        query: Var,
        kv: Var,
        key_mask: &[bool],
    ) -> Result<AttentionOutput> {
        let (qd, kd) = (g.shape(query).1, g.shape(kv).1);
        if qd != self.dim || kd != self.dim {
            return Err(Error::Config(format!(
                "attention width {} but inputs have widths {qd} and {kd}",
                self.dim
            )));
        }
        if key_mask.len() != g.shape(kv).0 {
            return Err(Error::Shape(format!(
                "key mask has {} entries for {} keys",
                key_mask.len(),
                g.shape(kv).0
            )));
        }
        if !key_mask.iter().any(|&m| m) {
            return Err(Error::Empty("attention needs at least one valid key".into()));
        }
        let q = self.q.forward(g, query);
        let k = self.k.forward(g, kv);
        let v = self.v.forward(g, kv);
        let dk = self.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut weights = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (lo, hi) = (h * dk, (h + 1) * dk);
            let qh = g.slice_cols(q, lo, hi);
            let kh = g.slice_cols(k, lo, hi);
            let vh = g.slice_cols(v, lo, hi);
            let logits = g.matmul_t(qh, kh);
            let logits = g.scale(logits, scale);
            let a = g.softmax_rows(logits, Some(key_mask));
            heads.push(g.matmul(a, vh));
            weights.push(a);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)
        };
        Ok(AttentionOutput {
            out: self.o.forward(g, cat),
            weights,
        })
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(path: &str, dim: usize, hidden: usize) -> Self {
        FeedForward {
            fc1: Linear::new(&format!("{path}.fc1"), dim, hidden),
            fc2: Linear::new(&format!("{path}.fc2"), hidden, dim),
        }
    }

    pub fn declare(&self, out: &mut Vec<ParamDecl>) {
        self.fc1.declare(out);
        self.fc2.declare(out);
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Pre-norm transformer encoder block.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new(path: &str, dim: usize, n_heads: usize, ffn_hidden: usize) -> Result<Self> {
        Ok(EncoderBlock {
            ln1: LayerNorm::new(&format!("{path}.ln1"), dim),
            attn: Attention::new(&format!("{path}.attn"), dim, n_heads)?,
            ln2: LayerNorm::new(&format!("{path}.ln2"), dim),
            ffn: FeedForward::new(&format!("{path}.ffn"), dim, ffn_hidden),
        })
    }

    pub fn declare(&self, out: &mut Vec<ParamDecl>) {
        self.ln1.declare(out);
        self.attn.declare(out);
        self.ln2.declare(out);
        self.ffn.declare(out);
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mask: &[bool]) -> Result<Var> {
        let h = self.ln1.forward(g, x);
        let a = self.attn.forward(g, h, h, mask)?;
        let x = g.add(x, a);
        let h = self.ln2.forward(g, x);
        let f = self.ffn.forward(g, h);
        Ok(g.add(x, f))
    }
}

/// Stack of encoder blocks followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    pub blocks: Vec<EncoderBlock>,
    pub ln_f: LayerNorm,
}

impl TransformerEncoder {
    pub fn new(path: &str, layers: usize, dim: usize, n_heads: usize, ffn_hidden: usize) -> Result<Self> {
        let blocks = (0..layers)
            .map(|i| EncoderBlock::new(&format!("{path}.layers.{i}"), dim, n_heads, ffn_hidden))
            .collect::<Result<_>>()?;
        Ok(TransformerEncoder {
            blocks,
            ln_f: LayerNorm::new(&format!("{path}.ln_f"), dim),
        })
    }

    pub fn declare(&self, out: &mut Vec<ParamDecl>) {
        for b in &self.blocks {
            b.declare(out);
        }
        self.ln_f.declare(out);
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var, mask: &[bool]) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(g, x, mask)?;
        }
        Ok(self.ln_f.forward(g, x))
    }
}

/// Fixed sinusoidal positional table, `max_len x dim`.
pub fn sinusoidal_table(max_len: usize, dim: usize) -> Mat {
    Mat::from_shape_fn((max_len, dim), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}
