use std::fs;
use std::path::Path;
use std::sync::Arc;

use anyhow::{Context, Result};
use cadret_core::corpus::{ingest, load_manifest, LoadOptions};
use cadret_core::eval::{encode_records, evaluate_records, similarity_matrix, write_heatmap, write_index_dir};
use cadret_core::model::default_provider;
use cadret_core::synthetic::{synthetic_corpus, write_manifest, SyntheticSpec};
use cadret_core::trainer::{ablation_matrix, fit, full_scale_targets, FitOptions};
use cadret_core::{
    Ablation, Checkpoint, Corpus, CorpusRecord, InferenceModel, Mat, Model, ModelConfig, Split, TextEmbeddingProvider,
    TrainConfig, Trainer,
};
use cadret_service::{handle_query, AppState, QueryRequest, ServiceError, Snapshot};
use ndarray::Array1;
use rand::seq::index::sample;
use serde::Serialize;

use crate::{
    AblationArgs, Command, EvalArgs, HeatmapArgs, IndexArgs, IngestArgs, QueryArgs, ServeArgs, SynthArgs, TrainArgs,
};

/// A problem with the invocation itself (bad flag values, inconsistent inputs).
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn core_exit_code(e: &cadret_core::Error) -> u8 {
    use cadret_core::Error as E;
    match e {
        E::InputDomain(_)
        | E::Validation { .. }
        | E::Config(_)
        | E::Shape(_)
        | E::Empty(_)
        | E::DuplicateId(_)
        | E::NotFound(_)
        | E::UndefinedSimilarity(_) => 1,
        E::Ingestion(_) | E::NaN(_) | E::Divergence { .. } | E::Format(_) | E::Io { .. } | E::Json(_) => 2,
    }
}

/// 1 for validation failures, 2 for everything else.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Invalid>() {
            return 1;
        }
        if let Some(s) = cause.downcast_ref::<ServiceError>() {
            return match s {
                ServiceError::Core(c) => core_exit_code(c),
                _ => 1,
            };
        }
        if let Some(c) = cause.downcast_ref::<cadret_core::Error>() {
            return core_exit_code(c);
        }
    }
    2
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Index(a) => cmd_index(a),
        Command::Query(a) => cmd_query(a),
        Command::ExportHeatmap(a) => cmd_heatmap(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Ablation(a) => cmd_ablation(a),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn load_options(cfg: &ModelConfig, seed: u64, level: Option<String>) -> LoadOptions {
    LoadOptions {
        points_per_model: cfg.n_points,
        seed,
        max_seq_len: cfg.max_seq_len,
        level,
    }
}

fn split_records(corpus: &Corpus, split: Option<Split>) -> Result<Vec<&CorpusRecord>> {
    let records: Vec<&CorpusRecord> = match split {
        Some(s) => corpus.split(s),
        None => corpus.records.iter().collect(),
    };
    if records.is_empty() {
        let which = split.map_or("any split".to_string(), |s| format!("the {s} split"));
        return Err(invalid(format!("no records in {which}")));
    }
    Ok(records)
}

fn cmd_ingest(a: IngestArgs) -> Result<()> {
    if a.points_per_model == 0 {
        return Err(invalid("--points-per-model must be positive"));
    }
    let cfg = ModelConfig {
        n_points: a.points_per_model,
        max_seq_len: a.max_seq_len,
        ..ModelConfig::full()
    };
    let provider = default_provider(&cfg, a.seed).build();
    let opts = load_options(&cfg, a.seed, a.level);
    let summary = ingest(&a.manifest, &a.out, &opts, provider.as_ref())?;
    print_json(&summary)
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        train: a.train,
        val: a.val,
        test: a.test,
        points_per_model: a.points_per_model,
        max_seq_len: a.max_seq_len,
        seed: a.seed,
    };
    if spec.total() == 0 {
        return Err(invalid("at least one record is required"));
    }
    let manifest = write_manifest(&spec, &a.out)?;
    print_json(&serde_json::json!({ "manifest": manifest, "records": spec.total() }))
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    TrainConfig {
        lr: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        mask_ratio: a.mask_ratio.unwrap_or(a.dataset.default_mask_ratio()),
        lambda: a.lambda,
        seed: a.seed,
        clip_norm: (!a.no_clip).then_some(a.clip_norm),
        max_steps: a.max_steps,
        eval_every: a.eval_every,
        ..TrainConfig::default()
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let tc = train_config(&a);
    let mut trainer = match &a.resume {
        Some(path) => Trainer::resume(Checkpoint::load(path)?, tc.clone())?,
        None => {
            let cfg = ModelConfig {
                fusion: a.fusion,
                ..a.preset.config().with_ablation(a.ablation)
            };
            let provider = default_provider(&cfg, a.seed);
            Trainer::new(cfg, provider, tc.clone())?
        }
    };
    let opts = load_options(&trainer.model.config, a.seed, a.level.clone());
    let corpus = load_manifest(&a.manifest, &opts, trainer.provider.as_ref())?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_json(&a.out.join("train_config.json"), &tc)?;
    let outcome = fit(
        &mut trainer,
        &corpus,
        &FitOptions {
            log_path: Some(a.out.join("train_log.jsonl")),
            select_on: Some(a.select_on),
        },
    )?;
    outcome.best.save(&a.out.join("best.ckpt"))?;
    outcome.last.save(&a.out.join("last.ckpt"))?;
    write_json(&a.out.join("history.json"), &outcome.history)?;
    print_json(&serde_json::json!({
        "steps": outcome.last.step,
        "model_version": outcome.best.model_version(),
        "best": outcome.best_metrics,
        "select_on": a.select_on,
    }))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let m = InferenceModel::load(&a.checkpoint)?;
    let opts = load_options(&m.model.config, a.seed, a.level);
    let corpus = load_manifest(&a.manifest, &opts, m.provider.as_ref())?;
    let records = split_records(&corpus, Some(a.split))?;
    let report = evaluate_records(&m.model, &m.params, m.provider.as_ref(), &records)?;
    write_json(&a.report, &report)?;
    print_json(&report)
}

fn cmd_index(a: IndexArgs) -> Result<()> {
    let m = InferenceModel::load(&a.checkpoint)?;
    let opts = load_options(&m.model.config, a.seed, None);
    let corpus = load_manifest(&a.manifest, &opts, m.provider.as_ref())?;
    let records = split_records(&corpus, a.split)?;
    let index = write_index_dir(&m.model, &m.params, &records, &m.model_version, &a.out)?;
    print_json(&serde_json::json!({
        "items": index.len(),
        "dim": index.dim(),
        "model_version": index.model_version(),
        "out": a.out,
    }))
}

fn cmd_query(a: QueryArgs) -> Result<()> {
    let snapshot = Snapshot::load(&a.checkpoint, &a.index)?;
    let response = handle_query(&snapshot, &QueryRequest { text: a.text, k: a.k })?;
    print_json(&response)
}

fn heatmap_pairs(
    n: usize,
    seed: u64,
    records: &[&CorpusRecord],
) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(invalid("--n must be positive"));
    }
    if n > records.len() {
        return Err(invalid(format!("--n {n} exceeds the {} available records", records.len())));
    }
    let mut rng = cadret_core::seed::rng(seed, &[0x6865_6174]);
    let mut picked = sample(&mut rng, records.len(), n).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

fn cmd_heatmap(a: HeatmapArgs) -> Result<()> {
    let (model, params, provider): (Model, _, Box<dyn TextEmbeddingProvider>) = match &a.checkpoint {
        Some(path) => {
            let m = InferenceModel::load(path)?;
            (m.model, m.params, m.provider)
        }
        None => {
            let cfg = ModelConfig::desk();
            let provider = default_provider(&cfg, a.seed).build();
            let model = Model::new(cfg, provider.dim())?;
            let params = model.init(a.seed);
            (model, params, provider)
        }
    };
    let corpus = match &a.manifest {
        Some(path) => load_manifest(path, &load_options(&model.config, a.seed, None), provider.as_ref())?,
        None => {
            let count = |s: Split| if s == a.split { a.n } else { 0 };
            let spec = SyntheticSpec {
                train: count(Split::Train),
                val: count(Split::Val),
                test: count(Split::Test),
                points_per_model: model.config.n_points,
                max_seq_len: model.config.max_seq_len,
                seed: a.seed,
            };
            synthetic_corpus(&spec, provider.as_ref())?
        }
    };
    let records = split_records(&corpus, Some(a.split))?;
    let picked: Vec<&CorpusRecord> = heatmap_pairs(a.n, a.seed, &records)?
        .into_iter()
        .map(|i| records[i])
        .collect();
    let enc = encode_records(&model, &params, provider.as_ref(), &picked)?;
    let sims = similarity_matrix(&stack_rows(&enc.text), &stack_rows(&enc.cad))?;
    let legend = write_heatmap(&a.out, &sims, &enc.ids, &enc.ids)?;
    print_json(&serde_json::json!({ "csv": a.out, "legend": legend, "n": a.n }))
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    let snapshot = Snapshot::load(&a.checkpoint, &a.index)?;
    tracing::info!(model_version = snapshot.model_version(), items = snapshot.index.len(), "snapshot loaded");
    let state = Arc::new(AppState::new(snapshot));
    let rt = tokio::runtime::Runtime::new().context("starting the async runtime")?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(a.bind)
            .await
            .with_context(|| format!("binding {}", a.bind))?;
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        cadret_service::serve(listener, state, shutdown).await.context("serving")
    })
}

fn cmd_ablation(a: AblationArgs) -> Result<()> {
    if a.full_scale {
        let table = full_scale_targets();
        let r1 = |ab: Ablation| table.row(ab).map(|r| r.metrics.r1).unwrap_or(f64::NAN);
        let chain = [r1(Ablation::S), r1(Ablation::Sp), r1(Ablation::SpDec)];
        if !(chain[0] < chain[1] && chain[1] < chain[2]) {
            anyhow::bail!("full-scale R@1 targets are not increasing: {chain:?}");
        }
        print!("{}", table.render());
        if let Some(out) = &a.out {
            write_json(out, &table)?;
        }
        return Ok(());
    }
    let cfg = a.preset.config();
    let provider_spec = default_provider(&cfg, a.seed);
    let provider = provider_spec.build();
    let corpus = match &a.manifest {
        Some(path) => load_manifest(path, &load_options(&cfg, a.seed, None), provider.as_ref())?,
        None => synthetic_corpus(
            &SyntheticSpec {
                train: 64,
                val: 16,
                test: 32,
                points_per_model: cfg.n_points,
                max_seq_len: cfg.max_seq_len,
                seed: a.seed,
            },
            provider.as_ref(),
        )?,
    };
    let tc = TrainConfig {
        lr: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        mask_ratio: a.mask_ratio,
        lambda: a.lambda,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let table = ablation_matrix(&corpus, &cfg, &provider_spec, &tc, a.split)?;
    print!("{}", table.render());
    if let Some(out) = &a.out {
        write_json(out, &table)?;
    }
    Ok(())
}

fn stack_rows(rows: &[Array1<f64>]) -> Mat {
    let width = rows.first().map_or(0, |r| r.len());
    Mat::from_shape_fn((rows.len(), width), |(i, j)| rows[i][j])
}
