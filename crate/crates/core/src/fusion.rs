//! Inference-time joint embeddings. The CAD embedding concatenates the
//! per-branch unit-normalized sequence and point features; the text
//! embedding repeats the unit-normalized text feature so both live in `2D`.
//! Cosine similarity between the two is then the mean of the two branch
//! cosines.
//!
//! Alternative fusion heads (linear, self-attention, cross-attention,
//! feature-wise modulation) are provided for comparison runs.

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, Array1, Axis};
use serde::{Deserialize, Serialize};

use crate::encoders::{pool_var, FeatureMap};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Attention, LayerNorm, Linear, ParamDecl, ParamKind};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Cad,
    Text,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointEmbedding {
    pub vec: Array1<f64>,
    pub kind: EmbeddingKind,
    pub normalized: bool,
}

impl JointEmbedding {
    pub fn dim(&self) -> usize {
        self.vec.len()
    }

    pub fn norm(&self) -> f64 {
        self.vec.dot(&self.vec).sqrt()
    }

    /// Unit-norm copy. Errors on a zero vector.
    pub fn normalized(&self) -> Result<JointEmbedding> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::UndefinedSimilarity(format!(
                "cannot normalize a {:?} embedding of norm {n}",
                self.kind
            )));
        }
        Ok(JointEmbedding {
            vec: &self.vec / n,
            kind: self.kind,
            normalized: true,
        })
    }
}

/// `v / |v|`, or `v` unchanged when it is zero.
pub fn unit_or_zero(v: &Array1<f64>) -> Array1<f64> {
    let n = v.dot(v).sqrt();
    if n > 0.0 {
        v / n
    } else {
        v.clone()
    }
}

/// `[f_S; f_P]` with each branch unit-normalized.
pub fn fuse_cad(f_s: &Array1<f64>, f_p: &Array1<f64>) -> Result<JointEmbedding> {
    if f_s.len() != f_p.len() {
        return Err(Error::Shape(format!(
            "sequence feature has {} dims, point feature {}",
            f_s.len(),
            f_p.len()
        )));
    }
    let vec = concatenate(Axis(0), &[unit_or_zero(f_s).view(), unit_or_zero(f_p).view()]).unwrap();
    Ok(JointEmbedding {
        vec,
        kind: EmbeddingKind::Cad,
        normalized: false,
    })
}

/// `[f_T; f_T]` with the text feature unit-normalized.
pub fn fuse_text(f_t: &Array1<f64>) -> JointEmbedding {
    let u = unit_or_zero(f_t);
    JointEmbedding {
        vec: concatenate(Axis(0), &[u.view(), u.view()]).unwrap(),
        kind: EmbeddingKind::Text,
        normalized: false,
    }
}

/// Cosine similarity of two vectors, clamped to `[-1, 1]`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedSimilarity("zero-norm embedding".into()));
    }
    let c = dot / (na.sqrt() * nb.sqrt());
    if c.is_nan() {
        return Err(Error::NaN("cosine similarity".into()));
    }
    Ok(c.clamp(-1.0, 1.0))
}

/// Cosine similarity between a text and a CAD embedding.
pub fn similarity(t: &JointEmbedding, m: &JointEmbedding) -> Result<f64> {
    cosine(t.vec.as_slice().unwrap(), m.vec.as_slice().unwrap())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    #[default]
    Concat,
    ConcatLinear,
    ConcatSelfattn,
    Crossattn,
    Modulation,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 5] = [
        FusionStrategy::Concat,
        FusionStrategy::ConcatLinear,
        FusionStrategy::ConcatSelfattn,
        FusionStrategy::Crossattn,
        FusionStrategy::Modulation,
    ];

    /// Width of the fused CAD vector for model width `dim`.
    pub fn output_dim(self, dim: usize) -> usize {
        match self {
            FusionStrategy::Concat | FusionStrategy::ConcatLinear => 2 * dim,
            _ => dim,
        }
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "concat" => FusionStrategy::Concat,
            "concat_linear" => FusionStrategy::ConcatLinear,
            "concat_selfattn" => FusionStrategy::ConcatSelfattn,
            "crossattn" => FusionStrategy::Crossattn,
            "modulation" => FusionStrategy::Modulation,
            other => return Err(Error::Config(format!("unknown fusion strategy `{other}`"))),
        })
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionStrategy::Concat => "concat",
            FusionStrategy::ConcatLinear => "concat_linear",
            FusionStrategy::ConcatSelfattn => "concat_selfattn",
            FusionStrategy::Crossattn => "crossattn",
            FusionStrategy::Modulation => "modulation",
        })
    }
}

#[derive(Clone, Debug)]
enum Head {
    Concat,
    Linear(Linear),
    SelfAttn(Attention, LayerNorm),
    CrossAttn(Attention, LayerNorm),
    Modulation { scale: Linear, shift: Linear },
}

/// Fusion head for one strategy, with its parameters under `fusion.*`.
#[derive(Clone, Debug)]
pub struct FusionHead {
    pub strategy: FusionStrategy,
    pub dim: usize,
    head: Head,
}

impl FusionHead {
    pub fn new(strategy: FusionStrategy, dim: usize, n_heads: usize) -> Result<Self> {
        let head = match strategy {
            FusionStrategy::Concat => Head::Concat,
            FusionStrategy::ConcatLinear => Head::Linear(Linear::new("fusion.linear", 2 * dim, 2 * dim)),
            FusionStrategy::ConcatSelfattn => Head::SelfAttn(
                Attention::new("fusion.self_attn", dim, n_heads)?,
                LayerNorm::new("fusion.self_attn_ln", dim),
            ),
            FusionStrategy::Crossattn => Head::CrossAttn(
                Attention::new("fusion.cross_attn", dim, n_heads)?,
                LayerNorm::new("fusion.cross_attn_ln", dim),
            ),
            FusionStrategy::Modulation => Head::Modulation {
                scale: Linear::new("fusion.scale", dim, dim),
                shift: Linear::new("fusion.shift", dim, dim),
            },
        };
        Ok(FusionHead { strategy, dim, head })
    }

    pub fn output_dim(&self) -> usize {
        self.strategy.output_dim(self.dim)
    }

    pub fn declare(&self, out: &mut Vec<ParamDecl>) {
        match &self.head {
            Head::Concat => {}
            Head::Linear(l) => l.declare(out),
            Head::SelfAttn(a, ln) | Head::CrossAttn(a, ln) => {
                a.declare(out);
                ln.declare(out);
            }
            Head::Modulation { scale, shift } => {
                let mut d = Vec::new();
                scale.declare(&mut d);
                // unit scale at initialization
                if let Some(bias) = d.iter_mut().find(|p| p.kind == ParamKind::Bias) {
                    bias.kind = ParamKind::Gamma;
                }
                out.extend(d);
                shift.declare(out);
            }
        }
    }

    /// Text-side vector matching this head's output width: `[f_T; f_T]`
    /// (branch-normalized) for `2D` heads, `f_T` otherwise. `1 x width`.
    pub fn text_graph(&self, g: &mut Graph, pooled_text: Var) -> Var {
        if self.output_dim() == 2 * self.dim {
            let u = g.l2_normalize_rows(pooled_text);
            g.concat_cols(&[u, u])
        } else {
            pooled_text
        }
    }

    /// Fused CAD vector, `1 x output_dim`.
    pub fn fuse_graph(
        &self,
        g: &mut Graph,
        seq: Var,
        seq_mask: &[bool],
        points: Var,
        points_mask: &[bool],
    ) -> Result<Var> {
        if g.shape(seq).1 != self.dim || g.shape(points).1 != self.dim {
            return Err(Error::Shape(format!(
                "fusion width {} but features are {:?} and {:?}",
                self.dim,
                g.shape(seq),
                g.shape(points)
            )));
        }
        match &self.head {
            Head::Concat => {
                let fs = pool_var(g, seq, seq_mask)?;
                let fp = pool_var(g, points, points_mask)?;
                let us = g.l2_normalize_rows(fs);
                let up = g.l2_normalize_rows(fp);
                Ok(g.concat_cols(&[us, up]))
            }
            Head::Linear(l) => {
                let fs = pool_var(g, seq, seq_mask)?;
                let fp = pool_var(g, points, points_mask)?;
                let us = g.l2_normalize_rows(fs);
                let up = g.l2_normalize_rows(fp);
                let cat = g.concat_cols(&[us, up]);
                Ok(l.forward(g, cat))
            }
            Head::SelfAttn(attn, ln) => {
                let tokens = g.concat_rows(&[seq, points]);
                let mask: Vec<bool> = seq_mask.iter().chain(points_mask).copied().collect();
                let a = attn.forward(g, tokens, tokens, &mask)?;
                let h = g.add(tokens, a);
                let h = ln.forward(g, h);
                pool_var(g, h, &mask)
            }
            Head::CrossAttn(attn, ln) => {
                let a = attn.forward(g, seq, points, points_mask)?;
                let h = g.add(seq, a);
                let h = ln.forward(g, h);
                pool_var(g, h, seq_mask)
            }
            Head::Modulation { scale, shift } => {
                let fs = pool_var(g, seq, seq_mask)?;
                let fp = pool_var(g, points, points_mask)?;
                let gamma = scale.forward(g, fp);
                let beta = shift.forward(g, fp);
                let m = g.mul(fs, gamma);
                Ok(g.add(m, beta))
            }
        }
    }

    /// Eval-mode fusion of two feature maps.
    pub fn fuse(&self, store: &ParamStore, seq: &FeatureMap, points: &FeatureMap) -> Result<Array1<f64>> {
        let mut g = Graph::with_params(store);
        let s = g.constant(seq.values.clone());
        let p = g.constant(points.values.clone());
        let out = self.fuse_graph(&mut g, s, &seq.valid_mask, p, &points.valid_mask)?;
        Ok(g.value(out).row(0).to_owned())
    }
}

/// Eval-mode `fuse_variant`: builds the head for `strategy` and fuses.
pub fn fuse_variant(
    store: &ParamStore,
    strategy: FusionStrategy,
    n_heads: usize,
    seq: &FeatureMap,
    points: &FeatureMap,
) -> Result<Array1<f64>> {
    FusionHead::new(strategy, seq.dim(), n_heads)?.fuse(store, seq, points)
}
