mod common;

use cadret_core::corpus::Corpus;
use cadret_core::diagnostics::gradient_check;
use cadret_core::model::Model;
use cadret_core::trainer::{batch_loss, fit, FitOptions, LossSettings};
use cadret_core::{Ablation, Checkpoint, ModelConfig, Split, TrainConfig, Trainer};
use common::{batch_of, provider_for, random_records};

fn tiny() -> ModelConfig {
    ModelConfig {
        text_layers: 1,
        sequence_layers: 1,
        decoder_layers: 2,
        ..ModelConfig::micro()
    }
}

fn trainer(cfg: ModelConfig, tc: TrainConfig) -> Trainer {
    let (spec, _) = provider_for(&cfg);
    Trainer::new(cfg, spec, tc).unwrap()
}

#[test]
fn reconstruction_gradient_never_reaches_the_sequence_encoder() {
    let cfg = ModelConfig::micro();
    let tc = TrainConfig { ret_weight: 0.0, lr: 1e-2, seed: 3, ..TrainConfig::default() };
    let mut t = trainer(cfg.clone(), tc);
    let records = random_records(&cfg, t.provider.as_ref(), 4, 6, 4, 11);
    let batch = batch_of(&records);

    let grads = t.gradients(&batch).unwrap().grads.unwrap();
    let mut seen_seq = 0;
    for (path, g) in &grads {
        if path.starts_with("sequence.") {
            seen_seq += 1;
            assert!(g.iter().all(|&x| x == 0.0), "{path} has a reconstruction gradient");
        }
    }
    assert!(seen_seq > 0);
    for prefix in ["text.", "points.", "decoder."] {
        let any = grads
            .iter()
            .filter(|(p, _)| p.starts_with(prefix))
            .any(|(_, g)| g.iter().any(|&x| x != 0.0));
        assert!(any, "no gradient reached {prefix}");
    }

    let before = t.params.clone();
    t.train_step(&batch).unwrap();
    for (path, old) in before.iter() {
        let new = t.params.get(path).unwrap();
        if path.starts_with("sequence.") {
            assert_eq!(old, new, "{path} moved");
        }
    }
    for prefix in ["text.", "points.", "decoder."] {
        assert!(before
            .iter()
            .filter(|(p, _)| p.starts_with(prefix))
            .any(|(p, old)| t.params.get(p).unwrap() != old));
    }
}

#[test]
fn initial_retrieval_loss_is_near_log_b() {
    let log8 = 8f64.ln();
    for ablation in Ablation::ALL {
        let cfg = ModelConfig::desk().with_ablation(ablation);
        let t = trainer(cfg.clone(), TrainConfig { seed: 5, ..TrainConfig::default() });
        let records = random_records(&cfg, t.provider.as_ref(), 8, 12, 6, 21);
        let r = t.gradients(&batch_of(&records)).unwrap().report;
        let halves = [
            r.text_to_sequence.zip(r.sequence_to_text),
            r.text_to_points.zip(r.points_to_text),
        ];
        for (f, b) in halves.into_iter().flatten() {
            let half = 0.5 * (f + b);
            assert!((0.5 * log8..=1.5 * log8).contains(&half), "{ablation}: {half}");
        }
    }
}

#[test]
fn loss_report_assembles_exactly() {
    let cfg = tiny();
    let t = trainer(cfg.clone(), TrainConfig { lambda: 0.5, ..TrainConfig::default() });
    let records = random_records(&cfg, t.provider.as_ref(), 3, 5, 3, 2);
    let r = t.gradients(&batch_of(&records)).unwrap().report;
    assert_eq!(r.l_total, r.l_ret + 0.5 * r.l_rec);
    let half = |a: Option<f64>, b: Option<f64>| 0.5 * (a.unwrap() + b.unwrap());
    let want = half(r.text_to_sequence, r.sequence_to_text) + half(r.text_to_points, r.points_to_text);
    assert!((r.l_ret - want).abs() < 1e-12);

    let s_only = ModelConfig::desk().with_ablation(Ablation::S);
    let t = trainer(s_only.clone(), TrainConfig::default());
    let records = random_records(&s_only, t.provider.as_ref(), 4, 8, 3, 2);
    let r = t.gradients(&batch_of(&records)).unwrap().report;
    assert_eq!(r.l_rec, 0.0);
    assert_eq!(r.l_total, r.l_ret);
    assert!(r.text_to_points.is_none());
    assert!((r.l_ret - half(r.text_to_sequence, r.sequence_to_text)).abs() < 1e-12);
}

#[test]
fn gradients_match_finite_differences_on_a_tiny_model() {
    let cfg = tiny();
    let (_, provider) = provider_for(&cfg);
    let model = Model::new(cfg.clone(), provider.dim()).unwrap();
    let params = model.init(4);
    let records = random_records(&cfg, provider.as_ref(), 3, 6, 4, 8);
    let settings = LossSettings { mask_ratio: 0.5, lambda: 1.0, ret_weight: 1.0, seed: 2, step: 0 };
    let report = gradient_check(&model, &params, provider.as_ref(), &batch_of(&records), &settings, 1e-6).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    assert_eq!(report.checked, params.numel());
}

#[test]
fn same_seed_gives_identical_runs() {
    let cfg = tiny();
    let tc = TrainConfig { lr: 1e-3, seed: 9, ..TrainConfig::default() };
    let run = || {
        let mut t = trainer(cfg.clone(), tc.clone());
        let records = random_records(&cfg, t.provider.as_ref(), 4, 6, 4, 1);
        let batch = batch_of(&records);
        let reports: Vec<_> = (0..3).map(|_| t.train_step(&batch).unwrap()).collect();
        (reports, t.params)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    assert_eq!(a.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 1, 2]);
}

fn small_corpus(cfg: &ModelConfig, provider: &dyn cadret_core::TextEmbeddingProvider) -> Corpus {
    let mut records = random_records(cfg, provider, 10, 6, 4, 30);
    for (i, r) in records.iter_mut().enumerate() {
        r.split = if i < 8 { Split::Train } else { Split::Val };
    }
    Corpus::from_records(records).unwrap()
}

#[test]
fn fit_resumes_with_a_monotone_step_counter() {
    let cfg = tiny();
    let tc = TrainConfig { batch_size: 4, epochs: 3, max_steps: Some(3), lr: 1e-3, ..TrainConfig::default() };
    let mut t = trainer(cfg.clone(), tc.clone());
    let corpus = small_corpus(&cfg, t.provider.as_ref());
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let out = fit(&mut t, &corpus, &FitOptions { log_path: Some(log.clone()), select_on: None }).unwrap();
    assert_eq!(out.last.step, 3);

    let path = dir.path().join("ckpt.bin");
    out.last.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.to_bytes().unwrap(), out.last.to_bytes().unwrap());

    let mut resumed = Trainer::resume(loaded, TrainConfig { max_steps: Some(6), ..tc }).unwrap();
    let out2 = fit(&mut resumed, &corpus, &FitOptions { log_path: Some(log.clone()), select_on: None }).unwrap();
    assert_eq!(out2.last.step, 6);
    let steps: Vec<u64> = std::fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, vec![0, 1, 2, 3, 4, 5]);
}

#[test]
fn fit_rejects_missing_splits() {
    let cfg = tiny();
    let mut t = trainer(cfg.clone(), TrainConfig { batch_size: 4, epochs: 1, ..TrainConfig::default() });
    let mut records = random_records(&cfg, t.provider.as_ref(), 4, 6, 4, 30);
    for r in &mut records {
        r.split = Split::Train;
    }
    let corpus = Corpus::from_records(records).unwrap();
    assert!(fit(&mut t, &corpus, &FitOptions::default()).is_err());
}

#[test]
fn batch_of_one_is_rejected() {
    let cfg = tiny();
    let (_, provider) = provider_for(&cfg);
    let model = Model::new(cfg.clone(), provider.dim()).unwrap();
    let params = model.init(1);
    let records = random_records(&cfg, provider.as_ref(), 1, 6, 4, 8);
    let settings = LossSettings { mask_ratio: 0.5, lambda: 1.0, ret_weight: 1.0, seed: 2, step: 0 };
    assert!(batch_loss(&model, &params, provider.as_ref(), &batch_of(&records), &settings, None, false).is_err());
}
