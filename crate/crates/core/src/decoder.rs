//! Training-only feature decoder: reconstructs sequence features from a
//! zero-masked, gradient-stopped copy by cross-attending alternately to text
//! features (1st, 3rd, ... block) and point features (2nd, 4th, ... block).

use serde::{Deserialize, Serialize};

use crate::encoders::{valid_rows, FeatureMap};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Attention, FeedForward, LayerNorm, ParamDecl};
use crate::params::ParamStore;
use crate::seed;

/// Rows of a feature map chosen for zero-masking.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub ratio: f64,
    /// Sorted row indices, all within the valid rows.
    pub masked_positions: Vec<usize>,
    pub seed: u64,
}

/// `floor(ratio * n_valid)`, robust to representation error in `ratio`.
pub fn masked_count(ratio: f64, n_valid: usize) -> usize {
    let exact = ratio * n_valid as f64;
    ((exact + 1e-9).floor() as usize).min(n_valid)
}

/// Picks `floor(ratio * n_valid)` valid rows uniformly without replacement.
pub fn sample_mask(valid_mask: &[bool], ratio: f64, seed: u64) -> Result<MaskSpec> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InputDomain(format!(
            "mask ratio {ratio} is outside [0, 1]"
        )));
    }
    let valid = valid_rows(valid_mask);
    let count = masked_count(ratio, valid.len());
    let mut rng = seed::rng(seed, &[0x6d61_736b]);
    let mut masked: Vec<usize> = rand::seq::index::sample(&mut rng, valid.len(), count)
        .into_iter()
        .map(|i| valid[i])
        .collect();
    masked.sort_unstable();
    Ok(MaskSpec {
        ratio,
        masked_positions: masked,
        seed,
    })
}

/// Zeroes a random `ratio` share of the valid rows; padding is left alone.
pub fn mask_features(f: &FeatureMap, ratio: f64, seed: u64) -> Result<(FeatureMap, MaskSpec)> {
    let spec = sample_mask(&f.valid_mask, ratio, seed)?;
    let mut out = f.clone();
    for &r in &spec.masked_positions {
        out.values.row_mut(r).fill(0.0);
    }
    Ok((out, spec))
}

/// Which features a decoder block attends to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conditioning {
    Text,
    Points,
}

/// Routing rule: 1st, 3rd, ... blocks (even zero-based index) read text.
pub fn conditioning_for(block: usize) -> Conditioning {
    if block.is_multiple_of(2) {
        Conditioning::Text
    } else {
        Conditioning::Points
    }
}

/// Cross-attention + feed-forward, pre-norm residual, no self-attention.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub cross: Attention,
    pub ln_ff: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderBlock {
    pub fn new(path: &str, dim: usize, n_heads: usize, ffn_hidden: usize) -> Result<Self> {
        Ok(DecoderBlock {
            ln_q: LayerNorm::new(&format!("{path}.ln_q"), dim),
            ln_kv: LayerNorm::new(&format!("{path}.ln_kv"), dim),
            cross: Attention::new(&format!("{path}.cross"), dim, n_heads)?,
            ln_ff: LayerNorm::new(&format!("{path}.ln_ff"), dim),
            ffn: FeedForward::new(&format!("{path}.ffn"), dim, ffn_hidden),
        })
    }

    pub fn declare(&self, out: &mut Vec<ParamDecl>) {
        self.ln_q.declare(out);
        self.ln_kv.declare(out);
        self.cross.declare(out);
        self.ln_ff.declare(out);
        self.ffn.declare(out);
    }

    /// The cross-attention sub-layer alone (before the residual).
    pub fn cross_sublayer(&self, g: &mut Graph, q: Var, kv: Var, kv_mask: &[bool]) -> Result<Var> {
        let qn = self.ln_q.forward(g, q);
        let kvn = self.ln_kv.forward(g, kv);
        self.cross.forward(g, qn, kvn, kv_mask)
    }

    pub fn forward(&self, g: &mut Graph, q: Var, kv: Var, kv_mask: &[bool]) -> Result<Var> {
        let a = self.cross_sublayer(g, q, kv, kv_mask)?;
        let h = g.add(q, a);
        let hn = self.ln_ff.forward(g, h);
        let f = self.ffn.forward(g, hn);
        Ok(g.add(h, f))
    }
}

/// Conditioning features handed to the decoder.
#[derive(Clone, Copy, Debug)]
pub struct DecoderContext<'m> {
    pub text: Var,
    pub text_mask: &'m [bool],
    pub points: Var,
    pub points_mask: &'m [bool],
}

#[derive(Clone, Debug)]
pub struct DecoderStack {
    pub blocks: Vec<DecoderBlock>,
    pub ln_f: LayerNorm,
}

impl DecoderStack {
    pub fn new(n_blocks: usize, dim: usize, n_heads: usize, ffn_hidden: usize) -> Result<Self> {
        if n_blocks == 0 || !n_blocks.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "decoder needs a positive even block count so text and point conditioning alternate, got {n_blocks}"
            )));
        }
        let blocks = (0..n_blocks)
            .map(|i| DecoderBlock::new(&format!("decoder.blocks.{i}"), dim, n_heads, ffn_hidden))
            .collect::<Result<_>>()?;
        Ok(DecoderStack {
            blocks,
            ln_f: LayerNorm::new("decoder.ln_f", dim),
        })
    }

    pub fn declare(&self, out: &mut Vec<ParamDecl>) {
        for b in &self.blocks {
            b.declare(out);
        }
        self.ln_f.declare(out);
    }

    /// Runs block `i`, picking its keys/values by the routing rule.
    pub fn block_forward(&self, g: &mut Graph, i: usize, q: Var, ctx: DecoderContext<'_>) -> Result<Var> {
        let (kv, mask) = match conditioning_for(i) {
            Conditioning::Text => (ctx.text, ctx.text_mask),
            Conditioning::Points => (ctx.points, ctx.points_mask),
        };
        self.blocks[i].forward(g, q, kv, mask)
    }

    /// `F~^S` from the masked, detached sequence features.
    pub fn reconstruct(&self, g: &mut Graph, masked: Var, ctx: DecoderContext<'_>) -> Result<Var> {
        let mut q = masked;
        for i in 0..self.blocks.len() {
            q = self.block_forward(g, i, q, ctx)?;
        }
        Ok(self.ln_f.forward(g, q))
    }

    /// Eval-mode reconstruction on plain feature maps.
    pub fn reconstruct_features(
        &self,
        store: &ParamStore,
        masked: &FeatureMap,
        text: &FeatureMap,
        points: &FeatureMap,
    ) -> Result<FeatureMap> {
        let mut g = Graph::with_params(store);
        let q = g.constant(masked.values.clone());
        let t = g.constant(text.values.clone());
        let p = g.constant(points.values.clone());
        let ctx = DecoderContext {
            text: t,
            text_mask: &text.valid_mask,
            points: p,
            points_mask: &points.valid_mask,
        };
        let out = self.reconstruct(&mut g, q, ctx)?;
        FeatureMap::new(g.value(out).clone(), masked.valid_mask.clone())
    }
}

/// Eval-mode cross-attention: queries from `q`, keys and values from `kv`.
pub fn cross_attention(store: &ParamStore, attn: &Attention, q: &FeatureMap, kv: &FeatureMap) -> Result<FeatureMap> {
    let mut g = Graph::with_params(store);
    let qv = g.constant(q.values.clone());
    let kvv = g.constant(kv.values.clone());
    let out = attn.forward(&mut g, qv, kvv, &kv.valid_mask)?;
    FeatureMap::new(g.value(out).clone(), q.valid_mask.clone())
}
