//! Text tokenization and frozen token embeddings.
//!
//! The encoder stack only sees a [`TextEmbeddingProvider`]: anything that can
//! turn a string into token ids and token ids into a `L_T x dim` matrix. The
//! bundled [`HashEmbeddingProvider`] needs no model download: words are hashed
//! into buckets and every bucket owns a fixed pseudo-random vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::Mat;
use crate::seed;

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
const FIRST_WORD_ID: u32 = 2;

/// A tokenized description.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextQuery {
    pub raw: String,
    pub token_ids: Vec<u32>,
    pub attn_mask: Vec<bool>,
}

impl TextQuery {
    /// Padded length `L_T`.
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn n_valid(&self) -> usize {
        self.attn_mask.iter().filter(|&&m| m).count()
    }

    /// Copy padded with `PAD_ID` up to `len` positions.
    pub fn padded(&self, len: usize) -> TextQuery {
        let mut out = self.clone();
        out.token_ids.resize(len.max(self.len()), PAD_ID);
        out.attn_mask.resize(len.max(self.len()), false);
        out
    }
}

pub trait TextEmbeddingProvider: Send + Sync {
    fn tokenize(&self, text: &str) -> TextQuery;

    /// Frozen per-token embeddings, `L_T x dim`. Padding rows are zero.
    fn embed_tokens(&self, query: &TextQuery) -> Mat;

    fn dim(&self) -> usize;

    fn max_len(&self) -> usize;

    /// Serializable description, stored in checkpoints so inference rebuilds
    /// the same provider.
    fn spec(&self) -> ProviderSpec;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderSpec {
    Hash {
        vocab_size: u32,
        dim: usize,
        max_len: usize,
        seed: u64,
    },
}

impl ProviderSpec {
    pub fn build(&self) -> Box<dyn TextEmbeddingProvider> {
        match *self {
            ProviderSpec::Hash {
                vocab_size,
                dim,
                max_len,
                seed,
            } => Box::new(HashEmbeddingProvider::new(vocab_size, dim, max_len, seed)),
        }
    }

    pub fn dim(&self) -> usize {
        match *self {
            ProviderSpec::Hash { dim, .. } => dim,
        }
    }
}

/// Lower-cased word tokenizer with hash-bucket ids and seeded embeddings.
#[derive(Clone, Debug)]
pub struct HashEmbeddingProvider {
    vocab_size: u32,
    dim: usize,
    max_len: usize,
    seed: u64,
}

impl HashEmbeddingProvider {
    pub fn new(vocab_size: u32, dim: usize, max_len: usize, seed: u64) -> Self {
        assert!(vocab_size > FIRST_WORD_ID, "vocabulary too small");
        assert!(max_len >= 1, "max_len must admit the start token");
        HashEmbeddingProvider {
            vocab_size,
            dim,
            max_len,
            seed,
        }
    }

    fn word_id(&self, word: &str) -> u32 {
        let buckets = (self.vocab_size - FIRST_WORD_ID) as u64;
        FIRST_WORD_ID + (seed::fnv1a(word.as_bytes()) % buckets) as u32
    }

    fn embedding_row(&self, id: u32, out: &mut [f64]) {
        if id == PAD_ID {
            out.fill(0.0);
            return;
        }
        let mut rng = seed::rng(self.seed, &[id as u64]);
        let a = 3f64.sqrt();
        for v in out {
            *v = rng.random_range(-a..a);
        }
    }
}

impl TextEmbeddingProvider for HashEmbeddingProvider {
    fn tokenize(&self, text: &str) -> TextQuery {
        let lower = text.to_lowercase();
        let mut ids = vec![BOS_ID];
        ids.extend(
            lower
                .split(|c: char| !c.is_alphanumeric())
                .filter(|w| !w.is_empty())
                .map(|w| self.word_id(w)),
        );
        ids.truncate(self.max_len);
        TextQuery {
            raw: text.to_string(),
            attn_mask: vec![true; ids.len()],
            token_ids: ids,
        }
    }

    fn embed_tokens(&self, query: &TextQuery) -> Mat {
        let mut out = Mat::zeros((query.len(), self.dim));
        for (i, &id) in query.token_ids.iter().enumerate() {
            let id = if query.attn_mask[i] { id } else { PAD_ID };
            self.embedding_row(id, out.row_mut(i).as_slice_mut().unwrap());
        }
        out
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn spec(&self) -> ProviderSpec {
        ProviderSpec::Hash {
            vocab_size: self.vocab_size,
            dim: self.dim,
            max_len: self.max_len,
            seed: self.seed,
        }
    }
}
