//! Fixtures shared by the benchmarks.

use cadret_core::eval::{GalleryIndex, GalleryMeta};
use cadret_core::model::default_provider;
use cadret_core::synthetic::{synthetic_corpus, SyntheticSpec};
use cadret_core::{Corpus, Mat, ModelConfig, ProviderSpec};
use ndarray::Array1;
use rand::Rng;

pub fn desk_corpus(train: usize, seed: u64) -> (ModelConfig, ProviderSpec, Corpus) {
    let cfg = ModelConfig::desk();
    let spec = default_provider(&cfg, seed);
    let provider = spec.build();
    let corpus = synthetic_corpus(
        &SyntheticSpec {
            train,
            val: 0,
            test: 0,
            points_per_model: cfg.n_points,
            max_seq_len: cfg.max_seq_len,
            seed,
        },
        provider.as_ref(),
    )
    .expect("synthetic corpus");
    (cfg, spec, corpus)
}

pub fn random_index(n: usize, dim: usize, seed: u64) -> GalleryIndex {
    let mut rng = cadret_core::seed::rng(seed, &[]);
    let rows: Vec<Array1<f64>> = (0..n)
        .map(|_| Array1::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0)))
        .collect();
    let ids = (0..n).map(|i| format!("m{i:06}")).collect();
    let meta = vec![GalleryMeta { points_path: None, text_snippet: String::new() }; n];
    GalleryIndex::from_vectors(ids, &rows, meta, "bench").expect("index")
}

pub fn random_similarities(q: usize, g: usize, seed: u64) -> Mat {
    let mut rng = cadret_core::seed::rng(seed, &[]);
    Mat::from_shape_fn((q, g), |_| rng.random_range(-1.0..1.0))
}
