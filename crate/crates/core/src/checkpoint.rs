//! Checkpoint file format.
//!
//! ```text
//! magic      8 bytes   "CADRET01"
//! meta_len   u32 LE
//! meta       JSON (model config, text provider, step, optimizer step, train config)
//! n_entries  u32 LE
//! entry*     u32 LE path_len, path (UTF-8), u32 LE ndim, ndim x u64 LE dims,
//!            prod(dims) x f32 LE values (row-major)
//! ```
//!
//! Entries are sorted by path. Optimizer moments live under `adam.m.<path>`
//! and `adam.v.<path>`; the feature decoder under `decoder.`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::Mat;
use crate::model::{Model, ModelConfig};
use crate::objectives::LOGIT_SCALE_PATH;
use crate::params::ParamStore;
use crate::text::{ProviderSpec, TextEmbeddingProvider};

pub const MAGIC: &[u8; 8] = b"CADRET01";
pub const DECODER_PREFIX: &str = "decoder.";
pub const ADAM_M_PREFIX: &str = "adam.m.";
pub const ADAM_V_PREFIX: &str = "adam.v.";

/// First and second Adam moments plus the update count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub provider: ProviderSpec,
    pub step: u64,
    /// Model parameters and temperature.
    pub params: ParamStore,
    pub optimizer: Option<AdamState>,
    /// Snapshot of the training configuration, if any.
    pub train: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    provider: ProviderSpec,
    step: u64,
    #[serde(default)]
    adam_t: Option<u64>,
    #[serde(default)]
    train: Option<serde_json::Value>,
}

fn is_inference_path(path: &str) -> bool {
    !path.starts_with(DECODER_PREFIX) && !path.starts_with("adam.")
}

/// Content hash of the inference-relevant part of a model: config, text
/// provider and every non-decoder parameter as stored (`f32`).
pub fn model_version(config: &ModelConfig, provider: &ProviderSpec, params: &ParamStore) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("config serializes"));
    h.update(serde_json::to_vec(provider).expect("provider serializes"));
    for (path, m) in params.iter() {
        if !is_inference_path(path) || path == LOGIT_SCALE_PATH {
            continue;
        }
        h.update((path.len() as u64).to_le_bytes());
        h.update(path.as_bytes());
        h.update((m.nrows() as u64).to_le_bytes());
        h.update((m.ncols() as u64).to_le_bytes());
        for &x in m.iter() {
            h.update((x as f32).to_le_bytes());
        }
    }
    hex::encode(&h.finalize()[..8])
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let b = self.take(8)?;
        let v = u64::from_le_bytes(b.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Format(format!("dimension {v} too large")))
    }
}

impl Checkpoint {
    pub fn model_version(&self) -> String {
        model_version(&self.config, &self.provider, &self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            config: self.config.clone(),
            provider: self.provider.clone(),
            step: self.step,
            adam_t: self.optimizer.as_ref().map(|a| a.t),
            train: self.train.clone(),
        };
        let meta = serde_json::to_vec(&meta)?;
        let mut entries: Vec<(String, &Mat)> = self.params.iter().map(|(k, v)| (k.clone(), v)).collect();
        if let Some(adam) = &self.optimizer {
            entries.extend(adam.m.iter().map(|(k, v)| (format!("{ADAM_M_PREFIX}{k}"), v)));
            entries.extend(adam.v.iter().map(|(k, v)| (format!("{ADAM_V_PREFIX}{k}"), v)));
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, meta.len())?;
        out.extend_from_slice(&meta);
        put_u32(&mut out, entries.len())?;
        for (path, m) in entries {
            put_u32(&mut out, path.len())?;
            out.extend_from_slice(path.as_bytes());
            put_u32(&mut out, 2)?;
            out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
            for &x in m.iter() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Format("bad magic; not a checkpoint".into()));
        }
        let meta_len = r.u32()?;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)?;
        let n = r.u32()?;
        let mut params = ParamStore::new();
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        for _ in 0..n {
            let plen = r.u32()?;
            let path = std::str::from_utf8(r.take(plen)?)
                .map_err(|e| Error::Format(format!("entry path is not UTF-8: {e}")))?
                .to_string();
            let ndim = r.u32()?;
            let dims = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            let (rows, cols) = match dims[..] {
                [a] => (1, a),
                [a, b] => (a, b),
                _ => return Err(Error::Format(format!("`{path}` has {ndim} dimensions"))),
            };
            let count = rows
                .checked_mul(cols)
                .and_then(|c| c.checked_mul(4))
                .ok_or_else(|| Error::Format(format!("`{path}` is too large")))?;
            let data = r.take(count)?;
            let values: Vec<f64> = data
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            let mat = Mat::from_shape_vec((rows, cols), values).map_err(|e| Error::Format(e.to_string()))?;
            if let Some(p) = path.strip_prefix(ADAM_M_PREFIX) {
                m.insert(p, mat);
            } else if let Some(p) = path.strip_prefix(ADAM_V_PREFIX) {
                v.insert(p, mat);
            } else {
                params.insert(path, mat);
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let optimizer = meta.adam_t.map(|t| AdamState { t, m, v });
        Ok(Checkpoint {
            config: meta.config,
            provider: meta.provider,
            step: meta.step,
            params,
            optimizer,
            train: meta.train,
        })
    }

    /// Writes through a temporary file and renames into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Everything needed to embed queries and CAD models; no decoder, no
/// optimizer state.
pub struct InferenceModel {
    pub model: Model,
    pub params: ParamStore,
    pub provider: Box<dyn TextEmbeddingProvider>,
    pub model_version: String,
    /// Number of decoder and optimizer tensors dropped at load.
    pub dropped: usize,
}

impl std::fmt::Debug for InferenceModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InferenceModel")
            .field("model_version", &self.model_version)
            .field("params", &self.params.len())
            .field("dropped", &self.dropped)
            .finish()
    }
}

impl InferenceModel {
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let model_version = ckpt.model_version();
        let mut params = ckpt.params;
        let dropped = params.retain(is_inference_path)
            + ckpt.optimizer.map_or(0, |a| a.m.len() + a.v.len());
        if dropped > 0 {
            tracing::info!(dropped, "feature decoder and optimizer state omitted from the inference model");
        }
        let provider = ckpt.provider.build();
        let model = Model::new(ckpt.config, provider.dim())?;
        model.check_inference_params(&params)?;
        Ok(InferenceModel {
            model,
            params,
            provider,
            model_version,
            dropped,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }

    pub fn decoder_param_count(&self) -> usize {
        self.params.keys().filter(|k| k.starts_with(DECODER_PREFIX)).count()
    }

    pub fn embed_text(&self, text: &str) -> Result<ndarray::Array1<f64>> {
        self.model.embed_text(&self.params, self.provider.as_ref(), text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::default_provider;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig::micro();
        let provider = default_provider(&cfg, 3);
        let model = Model::new(cfg.clone(), provider.dim()).unwrap();
        let params = model.init(9);
        let mut m = params.clone();
        for (_, x) in m.iter_mut() {
            x.mapv_inplace(|v| v * 0.5);
        }
        Checkpoint {
            config: cfg,
            provider,
            step: 12,
            params,
            optimizer: Some(AdamState { t: 12, v: m.clone(), m }),
            train: Some(serde_json::json!({"lr": 1e-4})),
        }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = sample();
        let b1 = c.to_bytes().unwrap();
        let c2 = Checkpoint::from_bytes(&b1).unwrap();
        assert_eq!(c2.to_bytes().unwrap(), b1);
        assert_eq!(c2.step, 12);
        assert_eq!(c2.optimizer.as_ref().unwrap().t, 12);
        assert_eq!(c.model_version(), c2.model_version());
        // a second trip is the identity on values too
        assert_eq!(Checkpoint::from_bytes(&c2.to_bytes().unwrap()).unwrap(), c2);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let b = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 3]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn inference_load_drops_decoder() {
        let c = sample();
        assert!(c.params.keys().any(|k| k.starts_with(DECODER_PREFIX)));
        let inf = InferenceModel::from_checkpoint(c).unwrap();
        assert_eq!(inf.decoder_param_count(), 0);
        assert!(inf.dropped > 0);
    }

    #[test]
    fn version_ignores_decoder_and_tracks_encoders() {
        let c = sample();
        let mut d = c.clone();
        d.params.get_mut("decoder.ln_f.gamma").unwrap()[[0, 0]] += 1.0;
        assert_eq!(c.model_version(), d.model_version());
        d.params.get_mut("text.proj.bias").unwrap()[[0, 0]] += 1.0;
        assert_ne!(c.model_version(), d.model_version());
    }
}
