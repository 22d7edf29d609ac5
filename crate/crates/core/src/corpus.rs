//! Paired text / CAD records: quantized sketch sequences, sampled point
//! clouds and tokenized descriptions, plus manifest ingestion and batching.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::error::{Error, Result};
use crate::seed;
use crate::text::{TextEmbeddingProvider, TextQuery};

pub const NUM_BINS: usize = 256;
pub const DEFAULT_MAX_SEQ_LEN: usize = 272;
pub const DEFAULT_POINTS_PER_MODEL: usize = 1024;

/// Published split sizes of the full corpus, for reference.
pub const FULL_CORPUS_SPLIT_COUNTS: SplitCounts = SplitCounts {
    train: 119_482,
    val: 8_904,
    test: 8_023,
};

/// Maps a sketch coordinate in `[0, 1]` to one of 256 bins.
pub fn quantize_coord(v: f64) -> Result<u8> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::InputDomain(format!(
            "coordinate {v} is outside [0, 1]"
        )));
    }
    Ok(((v * NUM_BINS as f64).floor() as usize).min(NUM_BINS - 1) as u8)
}

/// Center of a bin in `[0, 1]`.
pub fn dequantize_bin(bin: u8) -> f64 {
    (bin as f64 + 0.5) / NUM_BINS as f64
}

/// Quantized `(x, y)` sketch tokens. Valid positions form a prefix; the rest
/// is padding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CadSequence {
    pub tokens: Vec<[u8; 2]>,
    pub valid_mask: Vec<bool>,
}

impl CadSequence {
    pub fn new(tokens: Vec<[u8; 2]>, max_len: usize) -> Result<Self> {
        if tokens.len() > max_len {
            return Err(Error::Config(format!(
                "sequence of length {} exceeds max_len {max_len}",
                tokens.len()
            )));
        }
        Ok(CadSequence {
            valid_mask: vec![true; tokens.len()],
            tokens,
        })
    }

    /// Number of valid tokens.
    pub fn length(&self) -> usize {
        self.valid_mask.iter().filter(|&&m| m).count()
    }

    /// Padded length `L_S`.
    pub fn padded_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn padded(&self, len: usize) -> CadSequence {
        let mut out = self.clone();
        out.tokens.resize(len.max(self.tokens.len()), [0, 0]);
        out.valid_mask.resize(len.max(self.tokens.len()), false);
        out
    }
}

/// One-hot encoding of shape `(L_S, 2, 256)`; axis 1 is `[x, y]`. Padding
/// positions are all zero.
pub fn one_hot_sequence(seq: &CadSequence) -> Array3<f64> {
    let mut out = Array3::zeros((seq.padded_len(), 2, NUM_BINS));
    for (i, (tok, &valid)) in seq.tokens.iter().zip(&seq.valid_mask).enumerate() {
        if valid {
            out[[i, 0, tok[0] as usize]] = 1.0;
            out[[i, 1, tok[1] as usize]] = 1.0;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub coords: Array2<f64>,
}

impl PointCloud {
    pub fn new(coords: Array2<f64>) -> Result<Self> {
        if coords.ncols() != 3 {
            return Err(Error::Shape(format!(
                "point cloud needs 3 columns, got {}",
                coords.ncols()
            )));
        }
        Ok(PointCloud { coords })
    }

    pub fn n_points(&self) -> usize {
        self.coords.nrows()
    }
}

/// Draws `n` rows from `source`: without replacement when `M >= n`, with
/// replacement otherwise.
pub fn sample_points(source: &Array2<f64>, n: usize, seed: u64) -> Result<PointCloud> {
    let m = source.nrows();
    if m == 0 {
        return Err(Error::Ingestion("empty point source".into()));
    }
    if n == 0 {
        return Err(Error::InputDomain("cannot sample zero points".into()));
    }
    let mut rng = seed::rng(seed, &[0x5a4d_504c]);
    let idx: Vec<usize> = if m >= n {
        rand::seq::index::sample(&mut rng, m, n).into_vec()
    } else {
        use rand::Rng;
        (0..n).map(|_| rng.random_range(0..m)).collect()
    };
    PointCloud::new(source.select(Axis(0), &idx))
}

/// Centers the cloud at the origin and scales its farthest point to norm 1.
/// A cloud of identical points collapses to zeros.
pub fn normalize_points(pc: &PointCloud) -> PointCloud {
    let n = pc.n_points().max(1) as f64;
    let centroid = pc.coords.sum_axis(Axis(0)) / n;
    let mut coords = &pc.coords - &centroid;
    let radius = coords
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .fold(0.0, f64::max);
    if radius > 1e-12 {
        coords /= radius;
    } else {
        coords.fill(0.0);
    }
    PointCloud { coords }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InputDomain(format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusRecord {
    pub id: String,
    pub split: Split,
    pub sequence: CadSequence,
    pub points: PointCloud,
    pub text: TextQuery,
    /// Source file of the point cloud, if it came from a manifest.
    pub points_path: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub id: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub records: Vec<CorpusRecord>,
    pub excluded: Vec<Exclusion>,
}

impl Corpus {
    pub fn from_records(records: Vec<CorpusRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        Ok(Corpus {
            records,
            excluded: Vec::new(),
        })
    }

    pub fn split_counts(&self) -> SplitCounts {
        let mut c = SplitCounts::default();
        for r in &self.records {
            match r.split {
                Split::Train => c.train += 1,
                Split::Val => c.val += 1,
                Split::Test => c.test += 1,
            }
        }
        c
    }

    pub fn split(&self, split: Split) -> Vec<&CorpusRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn get(&self, id: &str) -> Option<&CorpusRecord> {
        self.records.iter().find(|r| r.id == id)
    }
}

/// One manifest line.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: String,
    pub text: String,
    pub tokens: Vec<[i64; 2]>,
    pub points: String,
    /// Description level (e.g. `L0`); absent means "use as is".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadOptions {
    pub points_per_model: usize,
    pub seed: u64,
    pub max_seq_len: usize,
    /// Keep only records whose `level` matches (records without a level are kept).
    pub level: Option<String>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            points_per_model: DEFAULT_POINTS_PER_MODEL,
            seed: 0,
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
            level: None,
        }
    }
}

/// Reads a little-endian `f32` `M x 3` point file.
pub fn read_points_file(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_points(&bytes).map_err(|reason| Error::Validation {
        record: path.display().to_string(),
        field: "points".into(),
        reason,
    })
}

pub fn decode_points(bytes: &[u8]) -> std::result::Result<Array2<f64>, String> {
    if !bytes.len().is_multiple_of(12) {
        return Err(format!(
            "file size {} is not a multiple of 12 bytes (3 x f32)",
            bytes.len()
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Array2::from_shape_vec((values.len() / 3, 3), values).expect("length checked"))
}

pub fn encode_points(coords: &Array2<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(coords.len() * 4);
    for &v in coords.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn write_points_file(path: &Path, coords: &Array2<f64>) -> Result<()> {
    fs::write(path, encode_points(coords)).map_err(|e| Error::io(path, e))
}

enum Parsed {
    Record(Box<CorpusRecord>),
    Excluded(Exclusion),
}

fn validation(id: &str, field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Validation {
        record: id.to_string(),
        field: field.into(),
        reason: reason.into(),
    }
}

fn parse_entry(
    entry: &ManifestEntry,
    base_dir: &Path,
    opts: &LoadOptions,
    provider: &dyn TextEmbeddingProvider,
) -> Result<Parsed> {
    let id = entry.id.as_str();
    let exclude = |reason: &str| {
        Ok(Parsed::Excluded(Exclusion {
            id: id.to_string(),
            reason: reason.to_string(),
        }))
    };
    let split: Split = entry
        .split
        .parse()
        .map_err(|_| validation(id, "split", format!("`{}` is not train|val|test", entry.split)))?;
    if let (Some(want), Some(have)) = (&opts.level, &entry.level) {
        if want != have {
            return exclude(&format!("description level {have} (want {want})"));
        }
    }

    let mut tokens = Vec::with_capacity(entry.tokens.len());
    for (i, &[x, y]) in entry.tokens.iter().enumerate() {
        for (axis, v) in [("x", x), ("y", y)] {
            if !(0..NUM_BINS as i64).contains(&v) {
                return Err(validation(
                    id,
                    format!("tokens[{i}].{axis}"),
                    format!("bin {v} outside [0, 255]"),
                ));
            }
        }
        tokens.push([x as u8, y as u8]);
    }
    if tokens.len() > opts.max_seq_len {
        return Err(validation(
            id,
            "tokens",
            format!("length {} exceeds {}", tokens.len(), opts.max_seq_len),
        ));
    }
    if tokens.is_empty() {
        return exclude("missing sequence modality (no tokens)");
    }
    if entry.text.trim().is_empty() {
        return exclude("missing text modality");
    }
    if entry.points.is_empty() {
        return exclude("missing point modality");
    }

    let path = base_dir.join(&entry.points);
    if !path.exists() {
        return exclude(&format!("point file {} not found", path.display()));
    }
    let source = read_points_file(&path).map_err(|e| match e {
        Error::Validation { reason, .. } => validation(id, "points", reason),
        other => other,
    })?;
    if source.nrows() == 0 {
        return exclude("point file has no points");
    }
    if source.iter().any(|v| !v.is_finite()) {
        return Err(validation(id, "points", "non-finite coordinate"));
    }
    let sampled = if source.nrows() == opts.points_per_model {
        PointCloud::new(source)?
    } else {
        let s = seed::derive(opts.seed, &[seed::fnv1a(id.as_bytes())]);
        sample_points(&source, opts.points_per_model, s)?
    };

    Ok(Parsed::Record(Box::new(CorpusRecord {
        id: id.to_string(),
        split,
        sequence: CadSequence::new(tokens, opts.max_seq_len)?,
        points: normalize_points(&sampled),
        text: provider.tokenize(&entry.text),
        points_path: Some(path),
    })))
}

/// Loads and validates a newline-delimited JSON manifest. Point paths are
/// resolved relative to the manifest's directory.
pub fn load_manifest(
    path: &Path,
    opts: &LoadOptions,
    provider: &dyn TextEmbeddingProvider,
) -> Result<Corpus> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut entries = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| {
            let id = serde_json::from_str::<serde_json::Value>(&line)
                .ok()
                .and_then(|v| v.get("id").and_then(|i| i.as_str()).map(str::to_string))
                .unwrap_or_else(|| format!("line {}", n + 1));
            validation(&id, "record", e.to_string())
        })?;
        entries.push(entry);
    }

    let parsed: Vec<Result<Parsed>> = entries
        .par_iter()
        .map(|e| parse_entry(e, &base_dir, opts, provider))
        .collect();

    let mut corpus = Corpus::default();
    let mut seen = HashSet::new();
    for p in parsed {
        match p? {
            Parsed::Record(r) => {
                if !seen.insert(r.id.clone()) {
                    return Err(Error::DuplicateId(r.id));
                }
                corpus.records.push(*r);
            }
            Parsed::Excluded(x) => {
                warn!(id = %x.id, reason = %x.reason, "record excluded");
                corpus.excluded.push(x);
            }
        }
    }
    let c = corpus.split_counts();
    info!(
        train = c.train,
        val = c.val,
        test = c.test,
        excluded = corpus.excluded.len(),
        "manifest loaded"
    );
    Ok(corpus)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IngestSummary {
    pub counts: SplitCounts,
    pub excluded: Vec<Exclusion>,
    pub points_per_model: usize,
    pub seed: u64,
}

/// Writes a normalized copy of the corpus: one point file per record under
/// `out/points/` and a fresh `out/manifest.jsonl` in the input schema.
pub fn ingest(
    manifest: &Path,
    out_dir: &Path,
    opts: &LoadOptions,
    provider: &dyn TextEmbeddingProvider,
) -> Result<IngestSummary> {
    let corpus = load_manifest(manifest, opts, provider)?;
    write_corpus(&corpus, out_dir)?;
    let summary = IngestSummary {
        counts: corpus.split_counts(),
        excluded: corpus.excluded.clone(),
        points_per_model: opts.points_per_model,
        seed: opts.seed,
    };
    let summary_path = out_dir.join("summary.json");
    fs::write(&summary_path, serde_json::to_vec_pretty(&summary)?)
        .map_err(|e| Error::io(&summary_path, e))?;
    Ok(summary)
}

/// Writes `corpus` as a manifest plus point files under `out_dir`.
/// Returns the manifest path.
pub fn write_corpus(corpus: &Corpus, out_dir: &Path) -> Result<PathBuf> {
    let points_dir = out_dir.join("points");
    fs::create_dir_all(&points_dir).map_err(|e| Error::io(&points_dir, e))?;
    let manifest_path = out_dir.join("manifest.jsonl");
    let mut file = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    for (i, r) in corpus.records.iter().enumerate() {
        let rel = format!("points/{i:06}.f32");
        write_points_file(&out_dir.join(&rel), &r.points.coords)?;
        let entry = ManifestEntry {
            id: r.id.clone(),
            split: r.split.to_string(),
            text: r.text.raw.clone(),
            tokens: r
                .sequence
                .tokens
                .iter()
                .zip(&r.sequence.valid_mask)
                .filter(|(_, &v)| v)
                .map(|(t, _)| [t[0] as i64, t[1] as i64])
                .collect(),
            points: rel,
            level: None,
        };
        serde_json::to_writer(&mut file, &entry)?;
        file.write_all(b"\n").map_err(|e| Error::io(&manifest_path, e))?;
    }
    Ok(manifest_path)
}

/// A padded mini-batch. All vectors are in record order.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    /// Sequences padded to the batch maximum length.
    pub sequences: Vec<CadSequence>,
    pub points: Vec<PointCloud>,
    /// Token ids padded to the batch maximum length.
    pub texts: Vec<TextQuery>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.sequences.first().map_or(0, |s| s.padded_len())
    }

    pub fn text_len(&self) -> usize {
        self.texts.first().map_or(0, |t| t.len())
    }

    pub fn n_points(&self) -> usize {
        self.points.first().map_or(0, |p| p.n_points())
    }

    /// Point clouds stacked into a `(B, N, 3)` array.
    pub fn stacked_points(&self) -> Array3<f64> {
        let views: Vec<_> = self.points.iter().map(|p| p.coords.view()).collect();
        ndarray::stack(Axis(0), &views).expect("collate checked point counts")
    }
}

/// Pads the first `batch_size` records into a [`Batch`].
pub fn collate(records: &[&CorpusRecord], batch_size: usize) -> Result<Batch> {
    if batch_size == 0 || batch_size > records.len() {
        return Err(Error::InputDomain(format!(
            "batch size {batch_size} outside [1, {}]",
            records.len()
        )));
    }
    let chosen = &records[..batch_size];
    let n_points = chosen[0].points.n_points();
    if let Some(bad) = chosen.iter().find(|r| r.points.n_points() != n_points) {
        return Err(Error::Shape(format!(
            "record `{}` has {} points, batch expects {n_points}",
            bad.id,
            bad.points.n_points()
        )));
    }
    let seq_len = chosen.iter().map(|r| r.sequence.length()).max().unwrap_or(0);
    let text_len = chosen.iter().map(|r| r.text.len()).max().unwrap_or(0);
    Ok(Batch {
        ids: chosen.iter().map(|r| r.id.clone()).collect(),
        sequences: chosen.iter().map(|r| r.sequence.padded(seq_len)).collect(),
        points: chosen.iter().map(|r| r.points.clone()).collect(),
        texts: chosen.iter().map(|r| r.text.padded(text_len)).collect(),
    })
}

/// Seeded shuffle of `records` cut into batches of `batch_size`. A trailing
/// batch smaller than `min_batch` is dropped.
pub fn shuffled_batches<'a>(
    records: &[&'a CorpusRecord],
    batch_size: usize,
    min_batch: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<&'a CorpusRecord>>> {
    let mut order: Vec<&CorpusRecord> = records.to_vec();
    order.shuffle(&mut seed::rng(seed, &[0xba7c, epoch]));
    Ok(order
        .chunks(batch_size.max(1))
        .filter(|c| c.len() >= min_batch)
        .map(|c| c.to_vec())
        .collect())
}
