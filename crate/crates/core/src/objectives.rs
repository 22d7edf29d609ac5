//! Bidirectional InfoNCE retrieval loss, masked-feature reconstruction loss
//! and their weighted sum, with a learnable temperature.

use serde::{Deserialize, Serialize};

use crate::encoders::FeatureMap;
use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, Var};

pub const LOGIT_SCALE_PATH: &str = "temperature.logit_scale";
/// Upper bound on `1 / tau`.
pub const MAX_LOGIT_SCALE: f64 = 100.0;
/// Initial temperature.
pub const INIT_TAU: f64 = 0.07;

/// Temperature stored as `log(1 / tau)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Temperature {
    pub logit_scale: f64,
}

impl Default for Temperature {
    fn default() -> Self {
        Temperature::from_tau(INIT_TAU)
    }
}

impl Temperature {
    pub fn from_tau(tau: f64) -> Self {
        Temperature {
            logit_scale: (1.0 / tau).ln(),
        }
        .clamped()
    }

    pub fn scale(&self) -> f64 {
        self.logit_scale.exp()
    }

    pub fn tau(&self) -> f64 {
        1.0 / self.scale()
    }

    /// Caps `exp(logit_scale)` at [`MAX_LOGIT_SCALE`].
    pub fn clamped(self) -> Self {
        Temperature {
            logit_scale: self.logit_scale.min(MAX_LOGIT_SCALE.ln()),
        }
    }
}

/// Forward and backward InfoNCE terms between two pooled batches.
pub struct InfoNceTerms {
    pub forward: Var,
    pub backward: Var,
}

/// In-graph InfoNCE on cosine similarities scaled by `scale` (= 1/tau, `1 x 1`).
pub fn info_nce_graph(g: &mut Graph, a: Var, b: Var, scale: Var) -> InfoNceTerms {
    let an = g.l2_normalize_rows(a);
    let bn = g.l2_normalize_rows(b);
    let sim = g.matmul_t(an, bn);
    let logits = g.mul_scalar(sim, scale);
    let forward = g.diag_cross_entropy(logits);
    let lt = g.transpose(logits);
    let backward = g.diag_cross_entropy(lt);
    InfoNceTerms { forward, backward }
}

/// In-graph retrieval loss with per-direction terms. Absent branches drop
/// their half of the sum.
pub struct RetrievalTerms {
    pub total: Var,
    pub sequence: Option<InfoNceTerms>,
    pub points: Option<InfoNceTerms>,
}

pub fn retrieval_loss_graph(
    g: &mut Graph,
    text: Var,
    sequence: Option<Var>,
    points: Option<Var>,
    scale: Var,
) -> Result<RetrievalTerms> {
    let mut halves = Vec::new();
    let mut terms = [None, None];
    for (slot, branch) in [sequence, points].into_iter().enumerate() {
        let Some(b) = branch else { continue };
        if g.shape(b) != g.shape(text) {
            return Err(Error::Shape(format!(
                "text batch {:?} vs branch batch {:?}",
                g.shape(text),
                g.shape(b)
            )));
        }
        let t = info_nce_graph(g, text, b, scale);
        let sum = g.add(t.forward, t.backward);
        halves.push(g.scale(sum, 0.5));
        terms[slot] = Some(t);
    }
    let mut total = *halves
        .first()
        .ok_or_else(|| Error::Config("retrieval loss needs at least one CAD branch".into()))?;
    for &h in &halves[1..] {
        total = g.add(total, h);
    }
    let [sequence, points] = terms;
    Ok(RetrievalTerms {
        total,
        sequence,
        points,
    })
}

fn check_batch(a: &Mat, b: &Mat) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "batches differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    if a.nrows() < 2 {
        return Err(Error::InputDomain(format!(
            "contrastive loss needs a batch of at least 2, got {}",
            a.nrows()
        )));
    }
    Ok(())
}

/// `-mean_i log softmax_j(rho(a_i, b_j) / tau)[i]`.
pub fn info_nce_direction(f_a: &Mat, f_b: &Mat, tau: f64) -> Result<f64> {
    check_batch(f_a, f_b)?;
    let mut g = Graph::new();
    let (a, b) = (g.constant(f_a.clone()), g.constant(f_b.clone()));
    let scale = g.constant(Mat::from_elem((1, 1), 1.0 / tau));
    let t = info_nce_graph(&mut g, a, b, scale);
    Ok(g.scalar(t.forward))
}

/// Row-direction InfoNCE given a precomputed similarity matrix.
pub fn info_nce_from_similarity(sim: &Mat, tau: f64) -> Result<f64> {
    if sim.nrows() != sim.ncols() || sim.nrows() < 2 {
        return Err(Error::InputDomain(format!(
            "need a square similarity matrix of size >= 2, got {:?}",
            sim.dim()
        )));
    }
    let mut g = Graph::new();
    let s = g.constant(sim / tau);
    let l = g.diag_cross_entropy(s);
    Ok(g.scalar(l))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalLoss {
    pub total: f64,
    pub text_to_sequence: f64,
    pub sequence_to_text: f64,
    pub text_to_points: f64,
    pub points_to_text: f64,
}

/// `1/2 (T->S + S->T) + 1/2 (T->P + P->T)` on pooled batches.
pub fn retrieval_loss(f_t: &Mat, f_s: &Mat, f_p: &Mat, tau: f64) -> Result<RetrievalLoss> {
    check_batch(f_t, f_s)?;
    check_batch(f_t, f_p)?;
    let mut g = Graph::new();
    let t = g.constant(f_t.clone());
    let s = g.constant(f_s.clone());
    let p = g.constant(f_p.clone());
    let scale = g.constant(Mat::from_elem((1, 1), 1.0 / tau));
    let terms = retrieval_loss_graph(&mut g, t, Some(s), Some(p), scale)?;
    let (seq, pts) = (terms.sequence.unwrap(), terms.points.unwrap());
    Ok(RetrievalLoss {
        total: g.scalar(terms.total),
        text_to_sequence: g.scalar(seq.forward),
        sequence_to_text: g.scalar(seq.backward),
        text_to_points: g.scalar(pts.forward),
        points_to_text: g.scalar(pts.backward),
    })
}

/// Squared Frobenius norm of `recon - target` over valid rows (one sample).
pub fn reconstruction_term(g: &mut Graph, recon: Var, target: Var, valid_rows: Vec<usize>) -> Var {
    let diff = g.sub(recon, target);
    g.sum_squares_rows(diff, valid_rows)
}

/// `(1/B) sum_i ||recon_i - target_i||^2` over valid rows.
pub fn reconstruction_loss(recon: &[FeatureMap], target: &[FeatureMap]) -> Result<f64> {
    if recon.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} reconstructions for {} targets",
            recon.len(),
            target.len()
        )));
    }
    if recon.is_empty() {
        return Err(Error::Empty("reconstruction loss over an empty batch".into()));
    }
    let mut total = 0.0;
    for (r, t) in recon.iter().zip(target) {
        if r.values.dim() != t.values.dim() {
            return Err(Error::Shape(format!(
                "reconstruction {:?} vs target {:?}",
                r.values.dim(),
                t.values.dim()
            )));
        }
        for row in t.valid_rows() {
            let d = &r.values.row(row) - &t.values.row(row);
            total += d.dot(&d);
        }
    }
    Ok(total / recon.len() as f64)
}

/// `l_ret + lambda * l_rec`; non-finite inputs abort with the step number.
pub fn total_loss(l_ret: f64, l_rec: f64, lambda: f64, step: u64) -> Result<f64> {
    if !l_ret.is_finite() || !l_rec.is_finite() {
        return Err(Error::Divergence {
            step,
            tau: f64::NAN,
            terms: format!("l_ret={l_ret}, l_rec={l_rec}"),
        });
    }
    if lambda < 0.0 {
        return Err(Error::InputDomain(format!("lambda {lambda} must be >= 0")));
    }
    Ok(l_ret + lambda * l_rec)
}

/// Per-step loss summary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub l_ret: f64,
    pub l_rec: f64,
    pub l_total: f64,
    pub lambda: f64,
    pub tau: f64,
    pub text_to_sequence: Option<f64>,
    pub sequence_to_text: Option<f64>,
    pub text_to_points: Option<f64>,
    pub points_to_text: Option<f64>,
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub l_ret: f64,
    pub l_rec: f64,
    pub l_total: f64,
    pub tau: f64,
}

impl From<&LossReport> for LogRow {
    fn from(r: &LossReport) -> Self {
        LogRow {
            step: r.step,
            l_ret: r.l_ret,
            l_rec: r.l_rec,
            l_total: r.l_total,
            tau: r.tau,
        }
    }
}
