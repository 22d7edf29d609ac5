//! Gallery index, exhaustive ranking and retrieval metrics.
//!
//! Ranks are 1-based. Ties go to the smaller gallery index, so a rank is
//! `1 + #{j : s_j > s_t} + #{j < t : s_j = s_t}`.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_points_file, CorpusRecord};
use crate::error::{Error, Result};
use crate::fusion::{cosine, fuse_cad};
use crate::graph::Mat;
use crate::model::Model;
use crate::params::ParamStore;
use crate::text::TextEmbeddingProvider;

pub const RECALL_KS: [usize; 5] = [1, 2, 5, 10, 20];
const SNIPPET_CHARS: usize = 96;

/// 1-based rank of `sims[truth]` under the index tie rule.
pub fn rank_of_truth(sims: &[f64], truth: usize) -> Result<usize> {
    if truth >= sims.len() {
        return Err(Error::InputDomain(format!(
            "truth index {truth} outside a gallery of {}",
            sims.len()
        )));
    }
    if let Some(j) = sims.iter().position(|s| s.is_nan()) {
        return Err(Error::NaN(format!("similarity at gallery index {j}")));
    }
    let t = sims[truth];
    let above = sims.iter().filter(|&&s| s > t).count();
    let tied_before = sims[..truth].iter().filter(|&&s| s == t).count();
    Ok(1 + above + tied_before)
}

/// Percentage of ranks `<= k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Empty("recall over zero queries".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::InputDomain("ranks are 1-based".into()));
    }
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    Ok(100.0 * hits as f64 / ranks.len() as f64)
}

/// Median rank; even counts average the two middle values.
pub fn median_rank(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Empty("median over zero queries".into()));
    }
    let mut r = ranks.to_vec();
    r.sort_unstable();
    let n = r.len();
    Ok(if n % 2 == 1 {
        r[n / 2] as f64
    } else {
        (r[n / 2 - 1] + r[n / 2]) as f64 / 2.0
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "R1")]
    pub r1: f64,
    #[serde(rename = "R2")]
    pub r2: f64,
    #[serde(rename = "R5")]
    pub r5: f64,
    #[serde(rename = "R10")]
    pub r10: f64,
    #[serde(rename = "R20")]
    pub r20: f64,
    #[serde(rename = "MedR")]
    pub medr: f64,
    #[serde(rename = "Rsum")]
    pub rsum: f64,
}

impl MetricReport {
    pub fn from_ranks(ranks: &[usize]) -> Result<Self> {
        let r1 = recall_at_k(ranks, 1)?;
        let r2 = recall_at_k(ranks, 2)?;
        let r5 = recall_at_k(ranks, 5)?;
        let r10 = recall_at_k(ranks, 10)?;
        let r20 = recall_at_k(ranks, 20)?;
        Ok(MetricReport {
            r1,
            r2,
            r5,
            r10,
            r20,
            medr: median_rank(ranks)?,
            rsum: r1 + r2 + r5 + r10 + r20,
        })
    }

    pub fn recalls(&self) -> [f64; 5] {
        [self.r1, self.r2, self.r5, self.r10, self.r20]
    }
}

/// Metrics for a query-by-gallery similarity matrix where query `i`'s
/// ground truth is gallery item `truth[i]`.
pub fn evaluate_similarity(sims: &Mat, truth: &[usize]) -> Result<MetricReport> {
    if sims.nrows() != truth.len() {
        return Err(Error::Shape(format!(
            "{} similarity rows for {} truths",
            sims.nrows(),
            truth.len()
        )));
    }
    let ranks = sims
        .rows()
        .into_iter()
        .zip(truth)
        .map(|(row, &t)| rank_of_truth(&row.to_vec(), t))
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_ranks(&ranks)
}

/// Order of gallery indices by score, descending, ties to the smaller index.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GalleryMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points_path: Option<String>,
    pub text_snippet: String,
}

#[derive(Serialize, Deserialize)]
struct IndexMeta {
    model_version: String,
    dim: usize,
    meta: Vec<GalleryMeta>,
}

/// Immutable `N x dim` matrix of unit-norm CAD embeddings, stored as `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct GalleryIndex {
    ids: Vec<String>,
    embeddings: Array2<f32>,
    meta: Vec<GalleryMeta>,
    model_version: String,
    positions: HashMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    pub ranked_ids: Vec<String>,
    pub scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_of_truth: Option<usize>,
}

fn snippet(text: &str) -> String {
    text.chars().take(SNIPPET_CHARS).collect()
}

impl GalleryIndex {
    /// Builds from raw CAD vectors; each row is L2-normalized.
    pub fn from_vectors(
        ids: Vec<String>,
        vectors: &[Array1<f64>],
        meta: Vec<GalleryMeta>,
        model_version: impl Into<String>,
    ) -> Result<Self> {
        if ids.len() != vectors.len() || ids.len() != meta.len() {
            return Err(Error::Shape(format!(
                "{} ids, {} vectors, {} metadata entries",
                ids.len(),
                vectors.len(),
                meta.len()
            )));
        }
        let dim = vectors.first().map_or(0, |v| v.len());
        let mut embeddings = Array2::<f32>::zeros((ids.len(), dim));
        for (i, v) in vectors.iter().enumerate() {
            if v.len() != dim {
                return Err(Error::Shape(format!("gallery row {i} has {} dims, expected {dim}", v.len())));
            }
            let n = v.dot(v).sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::UndefinedSimilarity(format!("gallery item `{}` has norm {n}", ids[i])));
            }
            for (dst, &x) in embeddings.row_mut(i).iter_mut().zip(v) {
                *dst = (x / n) as f32;
            }
        }
        Self::from_parts(ids, embeddings, meta, model_version.into())
    }

    fn from_parts(ids: Vec<String>, embeddings: Array2<f32>, meta: Vec<GalleryMeta>, model_version: String) -> Result<Self> {
        let mut positions = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if positions.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(GalleryIndex {
            ids,
            embeddings,
            meta,
            model_version,
            positions,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn model_version(&self) -> &str {
        &self.model_version
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }

    /// Point file of `id`; relative metadata paths resolve against `dir`.
    pub fn points_file(&self, dir: &Path, id: &str) -> Option<PathBuf> {
        let p = PathBuf::from(self.meta(id)?.points_path.as_ref()?);
        Some(if p.is_absolute() { p } else { dir.join(p) })
    }

    pub fn meta(&self, id: &str) -> Option<&GalleryMeta> {
        self.position(id).map(|i| &self.meta[i])
    }

    pub fn row(&self, i: usize) -> Array1<f64> {
        self.embeddings.row(i).mapv(f64::from)
    }

    pub fn embeddings(&self) -> &Array2<f32> {
        &self.embeddings
    }

    /// Cosine similarity of `query` to every gallery row, in gallery order.
    pub fn scores(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.dim() {
            return Err(Error::Shape(format!(
                "query has {} dims, index has {}",
                query.len(),
                self.dim()
            )));
        }
        let mut row = vec![0.0; self.dim()];
        self.embeddings
            .rows()
            .into_iter()
            .map(|r| {
                for (dst, &x) in row.iter_mut().zip(r) {
                    *dst = f64::from(x);
                }
                cosine(query, &row)
            })
            .collect()
    }

    /// Top `k` `(gallery index, score)` pairs.
    pub fn top_k(&self, query: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
        let scores = self.scores(query)?;
        Ok(ranking(&scores).into_iter().take(k).map(|i| (i, scores[i])).collect())
    }

    /// Full ranking of the gallery for one query.
    pub fn retrieve(&self, query_id: &str, query: &[f64], truth: Option<&str>) -> Result<RetrievalResult> {
        let scores = self.scores(query)?;
        let order = ranking(&scores);
        let rank_of_truth = match truth {
            Some(t) => {
                let pos = self
                    .position(t)
                    .ok_or_else(|| Error::NotFound(format!("truth `{t}` of query `{query_id}` is not in the index")))?;
                Some(rank_of_truth(&scores, pos)?)
            }
            None => None,
        };
        Ok(RetrievalResult {
            query_id: query_id.to_string(),
            ranked_ids: order.iter().map(|&i| self.ids[i].clone()).collect(),
            scores: order.iter().map(|&i| scores[i]).collect(),
            rank_of_truth,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_embeddings(&dir.join("embeddings.f32"), &dir.join("ids.json"), &self.ids, &self.embeddings)?;
        let meta = IndexMeta {
            model_version: self.model_version.clone(),
            dim: self.dim(),
            meta: self.meta.clone(),
        };
        let p = dir.join("meta.json");
        fs::write(&p, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("meta.json");
        let meta: IndexMeta = serde_json::from_slice(&fs::read(&p).map_err(|e| Error::io(&p, e))?)?;
        let (ids, embeddings) = read_embeddings(&dir.join("embeddings.f32"), &dir.join("ids.json"), meta.dim)?;
        if meta.meta.len() != ids.len() {
            return Err(Error::Format(format!(
                "index has {} ids but {} metadata entries",
                ids.len(),
                meta.meta.len()
            )));
        }
        Self::from_parts(ids, embeddings, meta.meta, meta.model_version)
    }
}

/// Index from `(id, f_S, f_P)` triples: each row is the normalized
/// concatenation `[f_S; f_P]`.
pub fn build_index(gallery: &[(String, Array1<f64>, Array1<f64>)], model_version: &str) -> Result<GalleryIndex> {
    let vectors = gallery
        .iter()
        .map(|(_, s, p)| fuse_cad(s, p).map(|m| m.vec))
        .collect::<Result<Vec<_>>>()?;
    let ids = gallery.iter().map(|(id, _, _)| id.clone()).collect();
    let meta = gallery
        .iter()
        .map(|_| GalleryMeta {
            points_path: None,
            text_snippet: String::new(),
        })
        .collect();
    GalleryIndex::from_vectors(ids, &vectors, meta, model_version)
}

/// Ranks every query against the index.
pub fn evaluate(
    queries: &[(String, Array1<f64>)],
    index: &GalleryIndex,
    truth_map: &HashMap<String, String>,
) -> Result<(MetricReport, Vec<RetrievalResult>)> {
    let results = queries
        .par_iter()
        .map(|(qid, v)| {
            let truth = truth_map
                .get(qid)
                .ok_or_else(|| Error::NotFound(format!("query `{qid}` has no ground truth")))?;
            index.retrieve(qid, v.as_slice().expect("contiguous"), Some(truth))
        })
        .collect::<Result<Vec<_>>>()?;
    let ranks: Vec<usize> = results.iter().map(|r| r.rank_of_truth.unwrap()).collect();
    Ok((MetricReport::from_ranks(&ranks)?, results))
}

/// `(i, j)` = cosine of query row `i` and gallery row `j`.
pub fn similarity_matrix(queries: &Mat, gallery: &Mat) -> Result<Mat> {
    if queries.ncols() != gallery.ncols() {
        return Err(Error::Shape(format!(
            "query width {} vs gallery width {}",
            queries.ncols(),
            gallery.ncols()
        )));
    }
    let mut out = Mat::zeros((queries.nrows(), gallery.nrows()));
    for (i, q) in queries.rows().into_iter().enumerate() {
        let q = q.to_vec();
        for (j, g) in gallery.rows().into_iter().enumerate() {
            out[[i, j]] = cosine(&q, &g.to_vec())?;
        }
    }
    Ok(out)
}

/// Writes little-endian `f32` rows plus a JSON list of ids.
pub fn write_embeddings(data_path: &Path, ids_path: &Path, ids: &[String], rows: &Array2<f32>) -> Result<()> {
    if ids.len() != rows.nrows() {
        return Err(Error::Shape(format!("{} ids for {} rows", ids.len(), rows.nrows())));
    }
    let mut bytes = Vec::with_capacity(rows.len() * 4);
    for &x in rows.iter() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(data_path, bytes).map_err(|e| Error::io(data_path, e))?;
    fs::write(ids_path, serde_json::to_vec_pretty(ids)?).map_err(|e| Error::io(ids_path, e))
}

pub fn read_embeddings(data_path: &Path, ids_path: &Path, dim: usize) -> Result<(Vec<String>, Array2<f32>)> {
    let ids: Vec<String> = serde_json::from_slice(&fs::read(ids_path).map_err(|e| Error::io(ids_path, e))?)?;
    let bytes = fs::read(data_path).map_err(|e| Error::io(data_path, e))?;
    if bytes.len() != ids.len() * dim * 4 {
        return Err(Error::Format(format!(
            "{} holds {} bytes, expected {} ids x {dim} f32",
            data_path.display(),
            bytes.len(),
            ids.len()
        )));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let rows = Array2::from_shape_vec((ids.len(), dim), values).map_err(|e| Error::Format(e.to_string()))?;
    Ok((ids, rows))
}

/// Similarity matrix as CSV (header row of gallery ids, one row per query)
/// plus a legend CSV mapping matrix indices to ids.
pub fn write_heatmap(out: &Path, sims: &Mat, query_ids: &[String], gallery_ids: &[String]) -> Result<std::path::PathBuf> {
    if sims.dim() != (query_ids.len(), gallery_ids.len()) {
        return Err(Error::Shape(format!(
            "matrix {:?} vs {} queries and {} gallery items",
            sims.dim(),
            query_ids.len(),
            gallery_ids.len()
        )));
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut csv = Vec::new();
    write!(csv, "query").unwrap();
    for g in gallery_ids {
        write!(csv, ",{g}").unwrap();
    }
    writeln!(csv).unwrap();
    for (q, row) in query_ids.iter().zip(sims.rows()) {
        write!(csv, "{q}").unwrap();
        for v in row {
            write!(csv, ",{v:.6}").unwrap();
        }
        writeln!(csv).unwrap();
    }
    fs::write(out, csv).map_err(|e| Error::io(out, e))?;

    let legend = out.with_extension("legend.csv");
    let mut l = Vec::new();
    writeln!(l, "index,query_id,gallery_id").unwrap();
    for i in 0..query_ids.len().max(gallery_ids.len()) {
        writeln!(
            l,
            "{i},{},{}",
            query_ids.get(i).map_or("", |s| s),
            gallery_ids.get(i).map_or("", |s| s)
        )
        .unwrap();
    }
    fs::write(&legend, l).map_err(|e| Error::io(&legend, e))?;
    Ok(legend)
}

/// Inference embeddings of a set of records.
pub struct EncodedRecords {
    pub ids: Vec<String>,
    pub text: Vec<Array1<f64>>,
    pub cad: Vec<Array1<f64>>,
}

pub fn encode_records(
    model: &Model,
    store: &ParamStore,
    provider: &dyn TextEmbeddingProvider,
    records: &[&CorpusRecord],
) -> Result<EncodedRecords> {
    let pairs = records
        .par_iter()
        .map(|r| {
            let t = model.embed_query(store, provider, &r.text)?;
            let c = model.embed_cad(store, &r.sequence, &r.points)?;
            Ok((t, c))
        })
        .collect::<Result<Vec<_>>>()?;
    let (text, cad) = pairs.into_iter().unzip();
    Ok(EncodedRecords {
        ids: records.iter().map(|r| r.id.clone()).collect(),
        text,
        cad,
    })
}

/// Index over the CAD side of `records`.
pub fn index_records(
    model: &Model,
    store: &ParamStore,
    records: &[&CorpusRecord],
    model_version: &str,
) -> Result<GalleryIndex> {
    let cad = records
        .par_iter()
        .map(|r| model.embed_cad(store, &r.sequence, &r.points))
        .collect::<Result<Vec<_>>>()?;
    let meta = records
        .iter()
        .map(|r| GalleryMeta {
            points_path: r.points_path.as_ref().map(|p| p.display().to_string()),
            text_snippet: snippet(&r.text.raw),
        })
        .collect();
    GalleryIndex::from_vectors(records.iter().map(|r| r.id.clone()).collect(), &cad, meta, model_version)
}

/// Indexes `records` and saves the index to `dir`, together with the point
/// cloud each item was embedded from (`dir/points/<n>.f32`). Metadata point
/// paths are relative to `dir`.
pub fn write_index_dir(
    model: &Model,
    store: &ParamStore,
    records: &[&CorpusRecord],
    model_version: &str,
    dir: &Path,
) -> Result<GalleryIndex> {
    let points_dir = dir.join("points");
    fs::create_dir_all(&points_dir).map_err(|e| Error::io(&points_dir, e))?;
    let cad = records
        .par_iter()
        .map(|r| model.embed_cad(store, &r.sequence, &r.points))
        .collect::<Result<Vec<_>>>()?;
    let mut meta = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let rel = format!("points/{i:06}.f32");
        write_points_file(&dir.join(&rel), &r.points.coords)?;
        meta.push(GalleryMeta {
            points_path: Some(rel),
            text_snippet: snippet(&r.text.raw),
        });
    }
    let index = GalleryIndex::from_vectors(records.iter().map(|r| r.id.clone()).collect(), &cad, meta, model_version)?;
    index.save(dir)?;
    Ok(index)
}

/// Each record's text is a query whose truth is the record's own CAD model.
pub fn evaluate_records(
    model: &Model,
    store: &ParamStore,
    provider: &dyn TextEmbeddingProvider,
    records: &[&CorpusRecord],
) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(Error::Empty("evaluation split has no records".into()));
    }
    let enc = encode_records(model, store, provider, records)?;
    let meta = records
        .iter()
        .map(|r| GalleryMeta {
            points_path: None,
            text_snippet: snippet(&r.text.raw),
        })
        .collect();
    let index = GalleryIndex::from_vectors(enc.ids.clone(), &enc.cad, meta, "")?;
    let queries: Vec<_> = enc.ids.iter().cloned().zip(enc.text).collect();
    let truth: HashMap<String, String> = enc.ids.iter().map(|id| (id.clone(), id.clone())).collect();
    Ok(evaluate(&queries, &index, &truth)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rank_examples() {
        let s = [0.9, 0.5, 0.7];
        assert_eq!(rank_of_truth(&s, 0).unwrap(), 1);
        assert_eq!(rank_of_truth(&s, 1).unwrap(), 3);
        assert_eq!(rank_of_truth(&[0.5, 0.5], 1).unwrap(), 2);
        assert_eq!(rank_of_truth(&[0.5, 0.5], 0).unwrap(), 1);
        assert!(matches!(rank_of_truth(&[0.5, f64::NAN], 0), Err(Error::NaN(_))));
        assert!(rank_of_truth(&s, 3).is_err());
    }

    #[test]
    fn metric_examples() {
        let ranks = [1, 3, 2, 10];
        assert_eq!(recall_at_k(&ranks, 1).unwrap(), 25.0);
        assert_eq!(recall_at_k(&ranks, 10).unwrap(), 100.0);
        assert_eq!(median_rank(&ranks).unwrap(), 2.5);
        assert_eq!(median_rank(&[7]).unwrap(), 7.0);
        assert!(recall_at_k(&[], 1).is_err());
        assert!(median_rank(&[]).is_err());
        let perfect = MetricReport::from_ranks(&[1, 1, 1]).unwrap();
        assert_eq!(perfect.rsum, 500.0);
        assert_eq!(perfect.medr, 1.0);
    }

    #[test]
    fn report_serializes_seven_fields() {
        let r = MetricReport::from_ranks(&[1, 3, 2, 10]).unwrap();
        let v = serde_json::to_value(r).unwrap();
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        for k in ["R1", "R2", "R5", "R10", "R20", "MedR", "Rsum"] {
            assert!(keys.contains(&k.to_string()));
        }
        assert_eq!(v["Rsum"], 350.0);
    }

    #[test]
    fn ranking_breaks_ties_by_index() {
        assert_eq!(ranking(&[0.5, 0.9, 0.5, 0.9]), vec![1, 3, 0, 2]);
    }

    #[test]
    fn index_rows_are_normalized_and_ids_unique() {
        let g = vec![
            ("a".to_string(), array![3.0, 4.0], array![1.0, 0.0]),
            ("b".to_string(), array![0.0, 2.0], array![0.0, 5.0]),
        ];
        let idx = build_index(&g, "v").unwrap();
        assert_eq!((idx.len(), idx.dim()), (2, 4));
        let r = idx.row(0);
        assert!((r.dot(&r) - 1.0).abs() < 1e-6);
        let dup = vec![g[0].clone(), g[0].clone()];
        assert!(matches!(build_index(&dup, "v"), Err(Error::DuplicateId(_))));
    }

    #[test]
    fn index_save_load_round_trip() {
        let g = vec![
            ("a".to_string(), array![3.0, 4.0], array![1.0, 0.0]),
            ("b".to_string(), array![0.0, 2.0], array![0.0, 5.0]),
        ];
        let idx = build_index(&g, "abc").unwrap();
        let dir = tempfile::tempdir().unwrap();
        idx.save(dir.path()).unwrap();
        assert_eq!(GalleryIndex::load(dir.path()).unwrap(), idx);
    }

    #[test]
    fn similarity_matrix_role_swap() {
        let q = array![[1.0, 0.0], [0.6, 0.8]];
        let g = array![[1.0, 1.0], [0.0, 1.0], [-1.0, 0.0]];
        let a = similarity_matrix(&q, &g).unwrap();
        let b = similarity_matrix(&g, &q).unwrap();
        assert_eq!(a, b.t());
        let d = similarity_matrix(&q, &q).unwrap();
        assert!((d[[0, 0]] - 1.0).abs() < 1e-15 && (d[[1, 1]] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn heatmap_files() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("h.csv");
        let ids = vec!["x".to_string(), "y".to_string()];
        let legend = write_heatmap(&out, &Mat::eye(2), &ids, &ids).unwrap();
        let csv = fs::read_to_string(&out).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "query,x,y");
        assert_eq!(csv.lines().count(), 3);
        assert!(fs::read_to_string(legend).unwrap().contains("1,y,y"));
    }
}
