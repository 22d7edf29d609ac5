//! Joint optimization of encoders, decoder and temperature.
//!
//! A step runs each sample's forward pass on its own graph (in parallel),
//! computes the contrastive loss on a small graph over the stacked pooled
//! features, then pushes the pooled-feature gradients and the scaled
//! reconstruction seed back through every sample graph. Per-sample parameter
//! gradients are summed in batch order so results do not depend on thread
//! scheduling.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::str::FromStr;

use ndarray::{concatenate, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{AdamState, Checkpoint};
use crate::corpus::{collate, shuffled_batches, Batch, Corpus, CorpusRecord, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate_records, MetricReport};
use crate::graph::{Graph, Mat, Var};
use crate::model::{Ablation, Model, ModelConfig, SampleInput, SampleOptions, SampleOutputs};
use crate::objectives::{retrieval_loss_graph, LogRow, LossReport, Temperature, LOGIT_SCALE_PATH, MAX_LOGIT_SCALE};
use crate::params::ParamStore;
use crate::seed;
use crate::text::{ProviderSpec, TextEmbeddingProvider};

/// Masking ratios swept for the hyperparameter tables.
pub const MASK_RATIO_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
/// Reconstruction weights swept for the hyperparameter tables.
pub const LAMBDA_GRID: [f64; 4] = [0.1, 0.5, 1.0, 2.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    Text2cad,
    Cadtranslator,
}

impl Dataset {
    pub fn default_mask_ratio(self) -> f64 {
        match self {
            Dataset::Text2cad => 0.5,
            Dataset::Cadtranslator => 0.0,
        }
    }
}

impl FromStr for Dataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text2cad" => Ok(Dataset::Text2cad),
            "cadtranslator" => Ok(Dataset::Cadtranslator),
            other => Err(Error::Config(format!("unknown dataset `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub mask_ratio: f64,
    pub lambda: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub max_steps: Option<u64>,
    /// Multiplier on the retrieval loss. Only tests set it to anything but 1.
    pub ret_weight: f64,
    /// Validate every this many epochs (the last epoch is always validated).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            epochs: 100,
            batch_size: 256,
            mask_ratio: Dataset::Text2cad.default_mask_ratio(),
            lambda: 1.0,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: Some(1.0),
            max_steps: None,
            ret_weight: 1.0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn for_dataset(dataset: Dataset) -> Self {
        TrainConfig {
            mask_ratio: dataset.default_mask_ratio(),
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size {} is too small for in-batch negatives",
                self.batch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask ratio {} is outside [0, 1]", self.mask_ratio)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.epochs == 0 || self.eval_every == 0 {
            return Err(Error::Config("epochs and eval_every must be positive".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Adam {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            state: AdamState::default(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Mat>) {
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        self.state.t += 1;
        let t = self.state.t as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (path, g) in grads {
            let Some(p) = params.get_mut(path) else { continue };
            if self.state.m.get(path).is_none() {
                self.state.m.insert(path.clone(), Mat::zeros(g.dim()));
                self.state.v.insert(path.clone(), Mat::zeros(g.dim()));
            }
            let m = self.state.m.get_mut(path).unwrap();
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            let v = self.state.v.get_mut(path).unwrap();
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let m = self.state.m.get(path).unwrap();
            let v = self.state.v.get(path).unwrap();
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
        }
    }
}

/// Loss settings for one batch evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSettings {
    pub mask_ratio: f64,
    pub lambda: f64,
    pub ret_weight: f64,
    pub seed: u64,
    pub step: u64,
}

impl LossSettings {
    pub fn from_config(cfg: &TrainConfig, step: u64) -> Self {
        LossSettings {
            mask_ratio: cfg.mask_ratio,
            lambda: cfg.lambda,
            ret_weight: cfg.ret_weight,
            seed: cfg.seed,
            step,
        }
    }

    /// Seed of the reconstruction mask for sample `i`.
    pub fn mask_seed(&self, i: usize) -> u64 {
        seed::derive(self.seed, &[0x6d61_736b, self.step, i as u64])
    }
}

/// Loss summary and, optionally, parameter gradients of the total loss.
pub struct BatchLoss {
    pub report: LossReport,
    pub grads: Option<BTreeMap<String, Mat>>,
}

fn stack_rows(graphs: &[(Graph<'_>, SampleOutputs)], pick: impl Fn(&SampleOutputs) -> Option<Var>) -> Option<Mat> {
    let rows: Option<Vec<Mat>> = graphs
        .iter()
        .map(|(g, o)| pick(o).map(|v| g.value(v).clone()))
        .collect();
    rows.map(|r| {
        let views: Vec<_> = r.iter().map(|m| m.view()).collect();
        concatenate(Axis(0), &views).expect("pooled rows share a width")
    })
}

/// Total loss on `batch` under `params`. `sg_overrides` replaces the
/// gradient-stopped sequence features sample by sample.
pub fn batch_loss(
    model: &Model,
    params: &ParamStore,
    provider: &dyn TextEmbeddingProvider,
    batch: &Batch,
    settings: &LossSettings,
    sg_overrides: Option<&[Mat]>,
    want_grads: bool,
) -> Result<BatchLoss> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::InputDomain(format!(
            "contrastive loss needs a batch of at least 2, got {b}"
        )));
    }
    if sg_overrides.is_some_and(|s| s.len() != b) {
        return Err(Error::Shape("one stop-gradient override per sample is required".into()));
    }
    let samples: Vec<(Graph<'_>, SampleOutputs)> = (0..b)
        .into_par_iter()
        .map(|i| {
            let mut g = Graph::with_params(params);
            let text = &batch.texts[i];
            let input = SampleInput {
                text_tokens: provider.embed_tokens(text),
                text_mask: &text.attn_mask,
                sequence: &batch.sequences[i],
                points: &batch.points[i],
            };
            let opts = SampleOptions {
                mask_ratio: settings.mask_ratio,
                mask_seed: settings.mask_seed(i),
                sg_override: sg_overrides.map(|s| s[i].clone()),
            };
            let out = model.forward_sample(&mut g, &input, &opts)?;
            Ok((g, out))
        })
        .collect::<Result<_>>()?;

    let mut lg = Graph::with_params(params);
    let text = lg.leaf(stack_rows(&samples, |o| Some(o.text)).unwrap());
    let seq = stack_rows(&samples, |o| o.sequence).map(|m| lg.leaf(m));
    let pts = stack_rows(&samples, |o| o.points).map(|m| lg.leaf(m));
    let fused = stack_rows(&samples, |o| o.fused).map(|m| lg.leaf(m));
    let ls = lg.param(LOGIT_SCALE_PATH);
    let scale = lg.exp(ls);
    let terms = match fused {
        Some(f) => retrieval_loss_graph(&mut lg, text, Some(f), None, scale)?,
        None => retrieval_loss_graph(&mut lg, text, seq, pts, scale)?,
    };
    let ret = lg.scale(terms.total, settings.ret_weight);
    let l_ret = lg.scalar(ret);
    let directions = |t: &Option<crate::objectives::InfoNceTerms>| {
        t.as_ref().map(|t| (lg.scalar(t.forward), lg.scalar(t.backward)))
    };
    let (seq_dir, pts_dir) = if fused.is_some() {
        (None, None)
    } else {
        (directions(&terms.sequence), directions(&terms.points))
    };

    let use_rec = model.decoder.is_some();
    let l_rec = if use_rec {
        samples
            .iter()
            .map(|(g, o)| g.scalar(o.reconstruction.unwrap()))
            .sum::<f64>()
            / b as f64
    } else {
        0.0
    };
    let tau = Temperature {
        logit_scale: lg.scalar(ls),
    }
    .tau();
    let l_total = l_ret + settings.lambda * l_rec;
    if !l_total.is_finite() {
        let mut terms = format!("l_ret={l_ret}, l_rec={l_rec}");
        for (name, d) in [("T->S/S->T", seq_dir), ("T->P/P->T", pts_dir)] {
            if let Some((f, bk)) = d {
                let _ = write!(terms, ", {name}={f}/{bk}");
            }
        }
        return Err(Error::Divergence {
            step: settings.step,
            tau,
            terms,
        });
    }
    let report = LossReport {
        step: settings.step,
        l_ret,
        l_rec,
        l_total,
        lambda: settings.lambda,
        tau,
        text_to_sequence: seq_dir.map(|d| d.0),
        sequence_to_text: seq_dir.map(|d| d.1),
        text_to_points: pts_dir.map(|d| d.0),
        points_to_text: pts_dir.map(|d| d.1),
    };
    if !want_grads {
        return Ok(BatchLoss { report, grads: None });
    }

    let lgrads = lg.backward(&[(ret, Mat::ones((1, 1)))]);
    let row_grad = |leaf: Option<Var>| {
        leaf.map(|v| {
            let (r, c) = lg.shape(v);
            lgrads.get_or_zeros(v, r, c)
        })
    };
    let g_text = row_grad(Some(text)).unwrap();
    let g_seq = row_grad(seq);
    let g_pts = row_grad(pts);
    let g_fused = row_grad(fused);
    let rec_seed = settings.lambda / b as f64;

    let per_sample: Vec<BTreeMap<String, Mat>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, (g, o))| {
            let row = |m: &Mat| m.slice(ndarray::s![i..i + 1, ..]).to_owned();
            let mut seeds = vec![(o.text, row(&g_text))];
            if let (Some(v), Some(m)) = (o.sequence, &g_seq) {
                seeds.push((v, row(m)));
            }
            if let (Some(v), Some(m)) = (o.points, &g_pts) {
                seeds.push((v, row(m)));
            }
            if let (Some(v), Some(m)) = (o.fused, &g_fused) {
                seeds.push((v, row(m)));
            }
            if let Some(r) = o.reconstruction {
                seeds.push((r, Mat::from_elem((1, 1), rec_seed)));
            }
            let grads = g.backward(&seeds);
            g.param_grads(&grads)
        })
        .collect();

    let mut total = lg.param_grads(&lgrads);
    for grads in per_sample {
        for (path, gm) in grads {
            match total.get_mut(&path) {
                Some(acc) => *acc += &gm,
                None => {
                    total.insert(path, gm);
                }
            }
        }
    }
    Ok(BatchLoss {
        report,
        grads: Some(total),
    })
}

/// Global L2 norm over all gradient tensors.
pub fn grad_norm(grads: &BTreeMap<String, Mat>) -> f64 {
    grads.values().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

pub struct Trainer {
    pub model: Model,
    pub params: ParamStore,
    pub provider_spec: ProviderSpec,
    pub provider: Box<dyn TextEmbeddingProvider>,
    pub config: TrainConfig,
    pub adam: Adam,
    pub step: u64,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, provider_spec: ProviderSpec, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let provider = provider_spec.build();
        let model = Model::new(model_config, provider.dim())?;
        let params = model.init(seed::derive(config.seed, &[0x1417]));
        Ok(Trainer {
            model,
            params,
            provider_spec,
            provider,
            adam: Adam::new(&config),
            config,
            step: 0,
        })
    }

    /// Continues from a checkpoint, keeping its step counter and optimizer state.
    pub fn resume(ckpt: Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let provider = ckpt.provider.build();
        let model = Model::new(ckpt.config, provider.dim())?;
        model.check_training_params(&ckpt.params)?;
        let mut adam = Adam::new(&config);
        if let Some(state) = ckpt.optimizer {
            adam.state = state;
        }
        Ok(Trainer {
            model,
            params: ckpt.params,
            provider_spec: ckpt.provider,
            provider,
            adam,
            config,
            step: ckpt.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.config.clone(),
            provider: self.provider_spec.clone(),
            step: self.step,
            params: self.params.clone(),
            optimizer: Some(self.adam.state.clone()),
            train: serde_json::to_value(&self.config).ok(),
        }
    }

    pub fn settings(&self) -> LossSettings {
        LossSettings::from_config(&self.config, self.step)
    }

    /// Loss and gradients at the current parameters, without updating.
    pub fn gradients(&self, batch: &Batch) -> Result<BatchLoss> {
        batch_loss(&self.model, &self.params, self.provider.as_ref(), batch, &self.settings(), None, true)
    }

    /// One optimizer update on `batch`.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let BatchLoss { report, grads } = self.gradients(batch)?;
        let mut grads = grads.unwrap();
        let norm = grad_norm(&grads);
        if !norm.is_finite() {
            return Err(Error::Divergence {
                step: self.step,
                tau: report.tau,
                terms: format!("gradient norm {norm}, l_ret={}, l_rec={}", report.l_ret, report.l_rec),
            });
        }
        if let Some(clip) = self.config.clip_norm {
            if norm > clip {
                let s = clip / norm;
                for g in grads.values_mut() {
                    g.mapv_inplace(|x| x * s);
                }
            }
        }
        self.adam.step(&mut self.params, &grads);
        if let Some(ls) = self.params.get_mut(LOGIT_SCALE_PATH) {
            ls[[0, 0]] = ls[[0, 0]].min(MAX_LOGIT_SCALE.ln());
        }
        self.step += 1;
        Ok(report)
    }

    pub fn evaluate(&self, records: &[&CorpusRecord]) -> Result<MetricReport> {
        evaluate_records(&self.model, &self.params, self.provider.as_ref(), records)
    }
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Training log, one JSON object per step.
    pub log_path: Option<PathBuf>,
    /// Split used for model selection (validation by default).
    pub select_on: Option<Split>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    pub mean_loss: f64,
    pub metrics: MetricReport,
}

pub struct FitOutcome {
    /// Checkpoint with the best selection-split Rsum.
    pub best: Checkpoint,
    pub best_metrics: MetricReport,
    pub last: Checkpoint,
    pub history: Vec<EpochMetrics>,
}

/// Trains until the configured epochs or `max_steps`, validating each
/// `eval_every` epochs and keeping the best checkpoint by Rsum.
pub fn fit(trainer: &mut Trainer, corpus: &Corpus, opts: &FitOptions) -> Result<FitOutcome> {
    let train = corpus.split(Split::Train);
    let select_split = opts.select_on.unwrap_or(Split::Val);
    let select = corpus.split(select_split);
    if train.is_empty() {
        return Err(Error::Empty("the train split has no records".into()));
    }
    if select.is_empty() {
        return Err(Error::Empty(format!("the {select_split} split has no records")));
    }
    if train.len() < 2 {
        return Err(Error::InputDomain("training needs at least 2 records for in-batch negatives".into()));
    }
    let cfg = trainer.config.clone();
    let batch_size = cfg.batch_size.min(train.len());
    let steps_per_epoch = shuffled_batches(&train, batch_size, 2, cfg.seed, 0)?.len() as u64;

    let mut log: Option<BufWriter<File>> = match &opts.log_path {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            let f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(trainer.step > 0)
                .truncate(trainer.step == 0)
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            Some(BufWriter::new(f))
        }
        None => None,
    };

    let mut history = Vec::new();
    let mut best: Option<(Checkpoint, MetricReport)> = None;
    let start_epoch = (trainer.step / steps_per_epoch) as usize;
    let mut skip = (trainer.step % steps_per_epoch) as usize;
    let budget_left = |t: &Trainer| cfg.max_steps.is_none_or(|m| t.step < m);

    for epoch in start_epoch..cfg.epochs {
        if !budget_left(trainer) {
            break;
        }
        let batches = shuffled_batches(&train, batch_size, 2, cfg.seed, epoch as u64)?;
        let mut loss_sum = 0.0;
        let mut n = 0usize;
        for records in batches.iter().skip(std::mem::take(&mut skip)) {
            if !budget_left(trainer) {
                break;
            }
            let batch = collate(records, records.len())?;
            let report = trainer.train_step(&batch)?;
            if let Some(w) = log.as_mut() {
                let line = serde_json::to_string(&LogRow::from(&report))?;
                writeln!(w, "{line}").map_err(|e| Error::io(opts.log_path.as_ref().unwrap(), e))?;
            }
            loss_sum += report.l_total;
            n += 1;
        }
        let last_epoch = epoch + 1 == cfg.epochs || !budget_left(trainer);
        if (epoch + 1) % cfg.eval_every == 0 || last_epoch {
            let metrics = trainer.evaluate(&select)?;
            tracing::info!(epoch, step = trainer.step, rsum = metrics.rsum, r1 = metrics.r1, "validation");
            history.push(EpochMetrics {
                epoch,
                step: trainer.step,
                mean_loss: if n > 0 { loss_sum / n as f64 } else { f64::NAN },
                metrics,
            });
            if best.as_ref().is_none_or(|(_, b)| metrics.rsum > b.rsum) {
                best = Some((trainer.checkpoint(), metrics));
            }
        }
    }
    if let Some(w) = log.as_mut() {
        w.flush().map_err(|e| Error::io(opts.log_path.as_ref().unwrap(), e))?;
    }
    let last = trainer.checkpoint();
    let (best, best_metrics) = match best {
        Some(b) => b,
        None => {
            let m = trainer.evaluate(&select)?;
            (last.clone(), m)
        }
    };
    Ok(FitOutcome {
        best,
        best_metrics,
        last,
        history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub use_sequence: bool,
    pub use_points: bool,
    pub use_decoder: bool,
    pub metrics: MetricReport,
}

impl AblationRow {
    pub fn new(ablation: Ablation, metrics: MetricReport) -> Self {
        let (s, p, d) = ablation.flags();
        AblationRow {
            ablation,
            use_sequence: s,
            use_points: p,
            use_decoder: d,
            metrics,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Plain-text table: one checkmark column per component, then metrics.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:^5} {:^5} {:^5} | {:>6} {:>6} {:>6} {:>6} {:>6} {:>6} {:>7}",
            "phi_S", "phi_P", "psi_S", "R1", "R2", "R5", "R10", "R20", "MedR", "Rsum"
        );
        let mark = |b: bool| if b { "\u{2713}" } else { " " };
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                out,
                "{:^5} {:^5} {:^5} | {:>6.2} {:>6.2} {:>6.2} {:>6.2} {:>6.2} {:>6.2} {:>7.2}",
                mark(r.use_sequence),
                mark(r.use_points),
                mark(r.use_decoder),
                m.r1,
                m.r2,
                m.r5,
                m.r10,
                m.r20,
                m.medr,
                m.rsum
            );
        }
        out
    }

    pub fn row(&self, ablation: Ablation) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.ablation == ablation)
    }
}

/// Published full-corpus Text2CAD numbers for the four component settings.
/// Reference values only; nothing at desk scale is expected to reach them.
pub fn full_scale_targets() -> AblationTable {
    let row = |a, r: [f64; 7]| {
        AblationRow::new(
            a,
            MetricReport {
                r1: r[0],
                r2: r[1],
                r5: r[2],
                r10: r[3],
                r20: r[4],
                medr: r[5],
                rsum: r[6],
            },
        )
    };
    AblationTable {
        rows: vec![
            row(Ablation::S, [5.00, 9.34, 17.38, 26.67, 36.58, 48.00, 94.96]),
            row(Ablation::P, [6.73, 10.99, 20.25, 29.34, 40.71, 34.00, 108.03]),
            row(Ablation::Sp, [6.99, 11.68, 21.49, 31.04, 41.98, 33.00, 113.17]),
            row(Ablation::SpDec, [9.71, 15.49, 25.54, 36.05, 46.85, 25.00, 133.64]),
        ],
    }
}

/// Trains and evaluates the four component settings with otherwise equal
/// configuration. Each row reports the best checkpoint's metrics on
/// `eval_split`.
pub fn ablation_matrix(
    corpus: &Corpus,
    model_config: &ModelConfig,
    provider: &ProviderSpec,
    config: &TrainConfig,
    eval_split: Split,
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(4);
    for ablation in Ablation::ALL {
        let mut trainer = Trainer::new(model_config.clone().with_ablation(ablation), provider.clone(), config.clone())?;
        let out = fit(&mut trainer, corpus, &FitOptions::default())?;
        let best = Trainer::resume(out.best, config.clone())?;
        let metrics = best.evaluate(&corpus.split(eval_split))?;
        tracing::info!(%ablation, rsum = metrics.rsum, "ablation row");
        rows.push(AblationRow::new(ablation, metrics));
    }
    Ok(AblationTable { rows })
}
