#![allow(dead_code)]

use cadret_core::corpus::{collate, Batch};
use cadret_core::model::default_provider;
use cadret_core::{CadSequence, CorpusRecord, Mat, ModelConfig, PointCloud, ProviderSpec, Split, TextEmbeddingProvider};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const WORDS: [&str; 12] = [
    "round", "square", "plate", "block", "hexagon", "tall", "flat", "holes", "bracket", "small", "large", "part",
];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

pub fn random_sequence(rng: &mut ChaCha8Rng, len: usize, max_len: usize) -> CadSequence {
    let tokens = (0..len).map(|_| [rng.random(), rng.random()]).collect();
    CadSequence::new(tokens, max_len).unwrap()
}

pub fn random_text(rng: &mut ChaCha8Rng, words: usize) -> String {
    (0..words)
        .map(|_| WORDS[rng.random_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

/// `b` random records sized for `cfg`, with sequences of `seq_len` tokens and
/// texts of `words` words.
pub fn random_records(
    cfg: &ModelConfig,
    provider: &dyn TextEmbeddingProvider,
    b: usize,
    seq_len: usize,
    words: usize,
    seed: u64,
) -> Vec<CorpusRecord> {
    let mut r = rng(seed);
    (0..b)
        .map(|i| CorpusRecord {
            id: format!("r{i}"),
            split: Split::Train,
            sequence: random_sequence(&mut r, seq_len, cfg.max_seq_len),
            points: PointCloud::new(random_mat(&mut r, cfg.n_points, 3)).unwrap(),
            text: provider.tokenize(&random_text(&mut r, words)),
            points_path: None,
        })
        .collect()
}

pub fn batch_of(records: &[CorpusRecord]) -> Batch {
    let refs: Vec<&CorpusRecord> = records.iter().collect();
    collate(&refs, refs.len()).unwrap()
}

pub fn provider_for(cfg: &ModelConfig) -> (ProviderSpec, Box<dyn TextEmbeddingProvider>) {
    let spec = default_provider(cfg, 1);
    let p = spec.build();
    (spec, p)
}

/// Brute-force rank: position of `truth` after a stable descending sort.
pub fn oracle_rank(row: &[f64], truth: usize) -> usize {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
    order.iter().position(|&j| j == truth).unwrap() + 1
}

/// `[R1, R2, R5, R10, R20, MedR, Rsum]` from first principles.
pub fn oracle_metrics(sims: &Mat, truth: &[usize]) -> [f64; 7] {
    let n = sims.nrows();
    let mut ranks: Vec<usize> = (0..n)
        .map(|i| oracle_rank(sims.row(i).as_slice().unwrap(), truth[i]))
        .collect();
    let recall = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 * 100.0 / n as f64;
    let r = [recall(1), recall(2), recall(5), recall(10), recall(20)];
    ranks.sort_unstable();
    let medr = if n % 2 == 1 {
        ranks[n / 2] as f64
    } else {
        (ranks[n / 2 - 1] + ranks[n / 2]) as f64 / 2.0
    };
    [r[0], r[1], r[2], r[3], r[4], medr, r[0] + r[1] + r[2] + r[3] + r[4]]
}
