//! Finite-difference verification of the training gradients.

use std::collections::HashSet;

use rayon::prelude::*;

use crate::corpus::Batch;
use crate::error::Result;
use crate::graph::Mat;
use crate::model::Model;
use crate::params::ParamStore;
use crate::text::TextEmbeddingProvider;
use crate::trainer::{batch_loss, LossSettings};

/// Gradients below this magnitude are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub loss: f64,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter path and flat index of the worst entry.
    pub worst: (String, usize),
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares analytic gradients of the total loss with central differences
/// over every parameter entry. Stop-gradient values (the detached sequence
/// features) are computed once at `params` and held fixed, as is every mask.
///
/// Rows of the one-hot coordinate tables that no valid token in the batch
/// selects cannot change the loss, so their numeric gradient is exactly zero
/// and is not re-evaluated; the analytic gradient is still compared against it.
pub fn gradient_check(
    model: &Model,
    params: &ParamStore,
    provider: &dyn TextEmbeddingProvider,
    batch: &Batch,
    settings: &LossSettings,
    eps: f64,
) -> Result<GradCheckReport> {
    let sg: Option<Vec<Mat>> = match model.decoder {
        Some(_) => Some(
            batch
                .sequences
                .iter()
                .map(|s| model.sequence.embed(params, s).map(|f| f.values))
                .collect::<Result<_>>()?,
        ),
        None => None,
    };
    let base = batch_loss(model, params, provider, batch, settings, sg.as_deref(), true)?;
    let grads = base.grads.unwrap();

    let mut used = [HashSet::new(), HashSet::new()];
    for seq in &batch.sequences {
        for (tok, _) in seq.tokens.iter().zip(&seq.valid_mask).filter(|(_, &v)| v) {
            used[0].insert(tok[0] as usize);
            used[1].insert(tok[1] as usize);
        }
    }
    let tables = [model.sequence.wx.as_str(), model.sequence.wy.as_str()];
    let selected = |path: &str, row: usize| {
        tables
            .iter()
            .position(|t| *t == path)
            .is_none_or(|axis| used[axis].contains(&row))
    };

    let entries: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(p, m)| (0..m.len()).map(move |i| (p.clone(), i)))
        .collect();
    let loss_at = |store: &ParamStore| -> Result<f64> {
        Ok(batch_loss(model, store, provider, batch, settings, sg.as_deref(), false)?
            .report
            .l_total)
    };
    let results: Vec<(f64, f64, f64)> = entries
        .par_iter()
        .map_init(
            || params.clone(),
            |store, (path, i)| -> Result<(f64, f64, f64)> {
                let cols = store.get(path).unwrap().ncols();
                let (r, c) = (i / cols, i % cols);
                let analytic = grads.get(path).map_or(0.0, |g| g[[r, c]]);
                if !selected(path, r) {
                    return Ok((relative_error(analytic, 0.0), analytic, 0.0));
                }
                let orig = store.get(path).unwrap()[[r, c]];
                store.get_mut(path).unwrap()[[r, c]] = orig + eps;
                let plus = loss_at(store)?;
                store.get_mut(path).unwrap()[[r, c]] = orig - eps;
                let minus = loss_at(store)?;
                store.get_mut(path).unwrap()[[r, c]] = orig;
                let numeric = (plus - minus) / (2.0 * eps);
                Ok((relative_error(analytic, numeric), analytic, numeric))
            },
        )
        .collect::<Result<_>>()?;

    let (worst_i, &(max_rel_error, worst_analytic, worst_numeric)) = results
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .0.total_cmp(&b.1 .0))
        .expect("model has parameters");
    Ok(GradCheckReport {
        loss: base.report.l_total,
        checked: results.len(),
        max_rel_error,
        worst: entries[worst_i].clone(),
        worst_analytic,
        worst_numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-6).abs() < 1e-18);
    }
}
