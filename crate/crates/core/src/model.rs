//! The full retrieval model: three encoders, the training-only feature
//! decoder, a fusion head and the learnable temperature.

use std::fmt;
use std::str::FromStr;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::corpus::{CadSequence, PointCloud, DEFAULT_MAX_SEQ_LEN, DEFAULT_POINTS_PER_MODEL};
use crate::decoder::{sample_mask, DecoderContext, DecoderStack, MaskSpec};
use crate::encoders::{pool, pool_var, valid_rows, BackboneKind, FeatureMap, PointEncoder, SequenceEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::fusion::{fuse_cad, fuse_text, unit_or_zero, FusionHead, FusionStrategy};
use crate::graph::{Graph, Mat, Var};
use crate::layers::{check_params, init_params, ParamDecl};
use crate::objectives::{reconstruction_term, Temperature, LOGIT_SCALE_PATH};
use crate::params::ParamStore;
use crate::text::{ProviderSpec, TextEmbeddingProvider, TextQuery};

/// Which components take part, mirroring the component ablation rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ablation {
    /// Sequence encoder only.
    S,
    /// Point encoder only.
    P,
    /// Both encoders, no decoder.
    Sp,
    /// Both encoders plus the feature decoder.
    SpDec,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::S, Ablation::P, Ablation::Sp, Ablation::SpDec];

    /// `(use_sequence, use_points, use_decoder)`.
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Ablation::S => (true, false, false),
            Ablation::P => (false, true, false),
            Ablation::Sp => (true, true, false),
            Ablation::SpDec => (true, true, true),
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "s" => Ablation::S,
            "p" => Ablation::P,
            "sp" => Ablation::Sp,
            "sp+dec" => Ablation::SpDec,
            other => return Err(Error::Config(format!("unknown ablation `{other}` (expected s, p, sp, sp+dec)"))),
        })
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::S => "s",
            Ablation::P => "p",
            Ablation::Sp => "sp",
            Ablation::SpDec => "sp+dec",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub text_layers: usize,
    pub sequence_layers: usize,
    pub decoder_layers: usize,
    pub max_seq_len: usize,
    pub text_max_len: usize,
    pub n_points: usize,
    pub point_width: usize,
    pub neighbors: usize,
    pub backbone: BackboneKind,
    pub fusion: FusionStrategy,
    pub use_sequence: bool,
    pub use_points: bool,
    pub use_decoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::full()
    }
}

impl ModelConfig {
    /// Full-size configuration: D = 256, 8 heads, 4/5/8 layers.
    pub fn full() -> Self {
        ModelConfig {
            dim: 256,
            n_heads: 8,
            ffn_hidden: 1024,
            text_layers: 4,
            sequence_layers: 5,
            decoder_layers: 8,
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
            text_max_len: 77,
            n_points: DEFAULT_POINTS_PER_MODEL,
            point_width: 128,
            neighbors: 16,
            backbone: BackboneKind::PointTransformer,
            fusion: FusionStrategy::Concat,
            use_sequence: true,
            use_points: true,
            use_decoder: true,
        }
    }

    /// Small configuration for CPU experiments and tests.
    pub fn desk() -> Self {
        ModelConfig {
            dim: 32,
            n_heads: 4,
            ffn_hidden: 64,
            text_layers: 1,
            sequence_layers: 1,
            decoder_layers: 2,
            max_seq_len: 64,
            text_max_len: 24,
            n_points: 64,
            point_width: 16,
            neighbors: 8,
            ..ModelConfig::full()
        }
    }

    /// Tiny configuration for finite-difference gradient checks.
    pub fn micro() -> Self {
        ModelConfig {
            dim: 8,
            n_heads: 2,
            ffn_hidden: 16,
            max_seq_len: 6,
            text_max_len: 5,
            n_points: 16,
            point_width: 8,
            neighbors: 4,
            ..ModelConfig::full()
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        let (s, p, d) = ablation.flags();
        self.use_sequence = s;
        self.use_points = p;
        self.use_decoder = d;
        self
    }

    pub fn ablation(&self) -> Option<Ablation> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.flags() == (self.use_sequence, self.use_points, self.use_decoder))
    }

    pub fn validate(&self) -> Result<()> {
        if !self.use_sequence && !self.use_points {
            return Err(Error::Config("at least one of the sequence and point branches must be enabled".into()));
        }
        if self.use_decoder && !(self.use_sequence && self.use_points) {
            return Err(Error::Config("the feature decoder needs both the sequence and point branches".into()));
        }
        if self.fusion != FusionStrategy::Concat && !(self.use_sequence && self.use_points) {
            return Err(Error::Config(format!(
                "fusion strategy `{}` needs both branches",
                self.fusion
            )));
        }
        if self.dim == 0 || self.n_heads == 0 || !self.dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "width {} is not divisible into {} heads",
                self.dim, self.n_heads
            )));
        }
        if self.n_points == 0 || self.neighbors == 0 {
            return Err(Error::Config("point count and neighborhood size must be positive".into()));
        }
        Ok(())
    }

    fn needs_sequence(&self) -> bool {
        self.use_sequence || self.use_decoder
    }

    fn needs_points(&self) -> bool {
        self.use_points || self.use_decoder
    }

    /// Width of the inference-time embeddings.
    pub fn embedding_dim(&self) -> usize {
        match self.fusion {
            FusionStrategy::Concat if self.use_sequence && self.use_points => 2 * self.dim,
            FusionStrategy::Concat => self.dim,
            other => other.output_dim(self.dim),
        }
    }
}

/// Default frozen text provider for a configuration.
pub fn default_provider(config: &ModelConfig, seed: u64) -> ProviderSpec {
    let dim = if config.dim >= 256 { 512 } else { config.dim };
    ProviderSpec::Hash {
        vocab_size: 8192,
        dim,
        max_len: config.text_max_len,
        seed,
    }
}

/// One training sample prepared for the forward pass.
pub struct SampleInput<'a> {
    /// Frozen token embeddings, `L_T x provider_dim`.
    pub text_tokens: Mat,
    pub text_mask: &'a [bool],
    pub sequence: &'a CadSequence,
    pub points: &'a PointCloud,
}

#[derive(Clone, Debug, Default)]
pub struct SampleOptions {
    pub mask_ratio: f64,
    pub mask_seed: u64,
    /// Replaces the gradient-stopped copy of `F^S` with a fixed matrix.
    /// Finite-difference checks use it to hold stop-gradient values constant.
    pub sg_override: Option<Mat>,
}

/// Graph outputs of one sample. Pooled vectors are `1 x width`.
pub struct SampleOutputs {
    pub text: Var,
    pub sequence: Option<Var>,
    pub points: Option<Var>,
    pub fused: Option<Var>,
    /// Per-sample squared reconstruction error (`1 x 1`).
    pub reconstruction: Option<Var>,
    pub mask: Option<MaskSpec>,
    /// Live sequence features, when computed.
    pub sequence_features: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub provider_dim: usize,
    pub text: TextEncoder,
    pub sequence: SequenceEncoder,
    pub points: PointEncoder,
    pub decoder: Option<DecoderStack>,
    pub fusion: FusionHead,
}

impl Model {
    pub fn new(config: ModelConfig, provider_dim: usize) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let decoder = if c.use_decoder {
            Some(DecoderStack::new(c.decoder_layers, c.dim, c.n_heads, c.ffn_hidden)?)
        } else {
            None
        };
        Ok(Model {
            text: TextEncoder::new(provider_dim, c.text_max_len, c.dim, c.text_layers, c.n_heads, c.ffn_hidden)?,
            sequence: SequenceEncoder::new(c.max_seq_len, c.dim, c.sequence_layers, c.n_heads, c.ffn_hidden)?,
            points: PointEncoder::new(c.backbone, c.n_points, c.point_width, c.neighbors, c.dim),
            fusion: FusionHead::new(c.fusion, c.dim, c.n_heads)?,
            decoder,
            provider_dim,
            config,
        })
    }

    /// Parameters needed at inference (no decoder, no temperature).
    pub fn inference_decls(&self) -> Vec<ParamDecl> {
        let mut d = Vec::new();
        self.text.declare(&mut d);
        if self.config.needs_sequence() {
            self.sequence.declare(&mut d);
        }
        if self.config.needs_points() {
            self.points.declare(&mut d);
        }
        self.fusion.declare(&mut d);
        d
    }

    pub fn decoder_decls(&self) -> Vec<ParamDecl> {
        let mut d = Vec::new();
        if let Some(dec) = &self.decoder {
            dec.declare(&mut d);
        }
        d
    }

    /// Freshly initialized training parameters, temperature included.
    pub fn init(&self, seed: u64) -> ParamStore {
        let mut decls = self.inference_decls();
        decls.extend(self.decoder_decls());
        let mut store = init_params(&decls, seed);
        store.insert(
            LOGIT_SCALE_PATH,
            Mat::from_elem((1, 1), Temperature::default().logit_scale),
        );
        store
    }

    pub fn check_inference_params(&self, store: &ParamStore) -> Result<()> {
        check_params(&self.inference_decls(), store)
    }

    pub fn check_training_params(&self, store: &ParamStore) -> Result<()> {
        check_params(&self.inference_decls(), store)?;
        check_params(&self.decoder_decls(), store)?;
        store.expect_shape(LOGIT_SCALE_PATH, (1, 1))
    }

    pub fn temperature(store: &ParamStore) -> Temperature {
        Temperature {
            logit_scale: store.get(LOGIT_SCALE_PATH).map_or(Temperature::default().logit_scale, |m| m[[0, 0]]),
        }
    }

    /// Training forward pass of one sample.
    pub fn forward_sample(&self, g: &mut Graph, input: &SampleInput<'_>, opts: &SampleOptions) -> Result<SampleOutputs> {
        let c = &self.config;
        let ft = self.text.forward(g, input.text_tokens.clone(), input.text_mask)?;
        let pooled_t = pool_var(g, ft, input.text_mask)?;
        let fs = if c.needs_sequence() {
            Some(self.sequence.forward(g, input.sequence)?)
        } else {
            None
        };
        let fp = if c.needs_points() {
            Some(self.points.forward(g, input.points)?)
        } else {
            None
        };
        let seq_mask = &input.sequence.valid_mask;
        let points_mask = vec![true; input.points.n_points()];

        let mut out = SampleOutputs {
            text: pooled_t,
            sequence: None,
            points: None,
            fused: None,
            reconstruction: None,
            mask: None,
            sequence_features: fs,
        };
        match c.fusion {
            FusionStrategy::Concat => {
                if c.use_sequence {
                    out.sequence = Some(pool_var(g, fs.unwrap(), seq_mask)?);
                }
                if c.use_points {
                    out.points = Some(pool_var(g, fp.unwrap(), &points_mask)?);
                }
            }
            _ => {
                out.text = self.fusion.text_graph(g, pooled_t);
                out.fused = Some(self.fusion.fuse_graph(g, fs.unwrap(), seq_mask, fp.unwrap(), &points_mask)?);
            }
        }

        if let Some(decoder) = &self.decoder {
            let fs = fs.unwrap();
            let target = match &opts.sg_override {
                Some(m) => {
                    if m.dim() != g.shape(fs) {
                        return Err(Error::Shape(format!(
                            "stop-gradient override {:?} vs sequence features {:?}",
                            m.dim(),
                            g.shape(fs)
                        )));
                    }
                    g.constant(m.clone())
                }
                None => g.detach(fs),
            };
            let spec = sample_mask(seq_mask, opts.mask_ratio, opts.mask_seed)?;
            let masked = g.zero_rows(target, spec.masked_positions.clone());
            let ctx = DecoderContext {
                text: ft,
                text_mask: input.text_mask,
                points: fp.unwrap(),
                points_mask: &points_mask,
            };
            let recon = decoder.reconstruct(g, masked, ctx)?;
            out.reconstruction = Some(reconstruction_term(g, recon, target, valid_rows(seq_mask)));
            out.mask = Some(spec);
        }
        Ok(out)
    }

    pub fn text_features(
        &self,
        store: &ParamStore,
        provider: &dyn TextEmbeddingProvider,
        query: &TextQuery,
    ) -> Result<FeatureMap> {
        self.text.embed(store, provider, query)
    }

    /// Inference text embedding for a raw string.
    pub fn embed_text(&self, store: &ParamStore, provider: &dyn TextEmbeddingProvider, text: &str) -> Result<Array1<f64>> {
        self.embed_query(store, provider, &provider.tokenize(text))
    }

    pub fn embed_query(
        &self,
        store: &ParamStore,
        provider: &dyn TextEmbeddingProvider,
        query: &TextQuery,
    ) -> Result<Array1<f64>> {
        let ft = self.text_features(store, provider, query)?;
        let f_t = pool(&ft)?;
        let c = &self.config;
        Ok(match c.fusion {
            FusionStrategy::Concat if c.use_sequence && c.use_points => fuse_text(&f_t).vec,
            FusionStrategy::Concat => unit_or_zero(&f_t),
            _ => {
                let mut g = Graph::with_params(store);
                let v = g.constant(f_t.insert_axis(ndarray::Axis(0)));
                let out = self.fusion.text_graph(&mut g, v);
                g.value(out).row(0).to_owned()
            }
        })
    }

    /// Pooled `(f_S, f_P)` for the enabled branches.
    pub fn branch_features(
        &self,
        store: &ParamStore,
        seq: &CadSequence,
        pc: &PointCloud,
    ) -> Result<(Option<Array1<f64>>, Option<Array1<f64>>)> {
        let f_s = if self.config.use_sequence {
            Some(pool(&self.sequence.embed(store, seq)?)?)
        } else {
            None
        };
        let f_p = if self.config.use_points {
            Some(pool(&self.points.embed(store, pc)?)?)
        } else {
            None
        };
        Ok((f_s, f_p))
    }

    /// Inference CAD embedding.
    pub fn embed_cad(&self, store: &ParamStore, seq: &CadSequence, pc: &PointCloud) -> Result<Array1<f64>> {
        if self.config.fusion != FusionStrategy::Concat {
            let fs = self.sequence.embed(store, seq)?;
            let fp = self.points.embed(store, pc)?;
            return self.fusion.fuse(store, &fs, &fp);
        }
        Ok(match self.branch_features(store, seq, pc)? {
            (Some(s), Some(p)) => fuse_cad(&s, &p)?.vec,
            (Some(s), None) => unit_or_zero(&s),
            (None, Some(p)) => unit_or_zero(&p),
            (None, None) => unreachable!("validated config enables a branch"),
        })
    }
}
