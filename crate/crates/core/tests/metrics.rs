mod common;

use std::collections::HashMap;
use std::time::Instant;

use cadret_core::eval::{evaluate, evaluate_similarity, ranking, similarity_matrix, GalleryIndex, GalleryMeta};
use cadret_core::Mat;
use common::{oracle_metrics, random_mat, rng};
use ndarray::Array1;
use proptest::prelude::*;
use rand::Rng;

fn report_array(sims: &Mat, truth: &[usize]) -> [f64; 7] {
    let r = evaluate_similarity(sims, truth).unwrap();
    [r.r1, r.r2, r.r5, r.r10, r.r20, r.medr, r.rsum]
}

#[test]
fn metrics_match_brute_force_oracle_on_random_matrices() {
    let start = Instant::now();
    let mut r = rng(2024);
    for trial in 0..200 {
        let q = r.random_range(1..=50);
        let g = r.random_range(q..=50);
        // Half the trials use coarse values so ties are common.
        let sims = if trial % 2 == 0 {
            random_mat(&mut r, q, g)
        } else {
            Mat::from_shape_fn((q, g), |_| r.random_range(0..4) as f64 / 4.0)
        };
        let truth: Vec<usize> = (0..q).map(|_| r.random_range(0..g)).collect();
        let got = report_array(&sims, &truth);
        let want = oracle_metrics(&sims, &truth);
        for (a, b) in got.iter().zip(&want) {
            assert_eq!(a.to_bits(), b.to_bits(), "trial {trial}: {got:?} vs {want:?}");
        }
    }
    assert!(start.elapsed().as_secs_f64() < 10.0);
}

#[test]
fn hand_computed_ranks() {
    // Four queries whose truths land at ranks 1, 3, 2 and 10.
    let ranks = [1usize, 3, 2, 10];
    let g = 12;
    let sims = Mat::from_shape_fn((4, g), |(i, j)| {
        let truth_rank = ranks[i];
        if j == 0 {
            (g - truth_rank) as f64
        } else if j < truth_rank {
            (g + j) as f64
        } else {
            -(j as f64)
        }
    });
    let r = evaluate_similarity(&sims, &[0; 4]).unwrap();
    assert_eq!(r.r1, 25.0);
    assert_eq!(r.r2, 50.0);
    assert_eq!(r.r5, 75.0);
    assert_eq!(r.r10, 100.0);
    assert_eq!(r.r20, 100.0);
    assert_eq!(r.medr, 2.5);
    assert_eq!(r.rsum, 350.0);
}

#[test]
fn index_evaluation_matches_oracle() {
    let mut r = rng(9);
    let (n, d) = (30, 12);
    let gallery = random_mat(&mut r, n, d);
    let queries = &gallery + &(random_mat(&mut r, n, d) * 0.8);
    let ids: Vec<String> = (0..n).map(|i| format!("g{i}")).collect();
    let rows: Vec<Array1<f64>> = gallery.rows().into_iter().map(|r| r.to_owned()).collect();
    let meta = vec![GalleryMeta { points_path: None, text_snippet: String::new() }; n];
    let index = GalleryIndex::from_vectors(ids.clone(), &rows, meta, "v").unwrap();
    let qs: Vec<(String, Array1<f64>)> = queries
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, q)| (format!("q{i}"), q.to_owned()))
        .collect();
    let truth: HashMap<String, String> = (0..n).map(|i| (format!("q{i}"), format!("g{i}"))).collect();
    let (report, results) = evaluate(&qs, &index, &truth).unwrap();

    let indexed = Mat::from_shape_fn((n, d), |(i, j)| index.embeddings()[[i, j]] as f64);
    let sims = similarity_matrix(&queries, &indexed).unwrap();
    let want = oracle_metrics(&sims, &(0..n).collect::<Vec<_>>());
    let got = [report.r1, report.r2, report.r5, report.r10, report.r20, report.medr, report.rsum];
    assert_eq!(got, want);
    assert_eq!(results.len(), n);
    assert_eq!(results[0].ranked_ids.len(), n);
}

proptest! {
    #[test]
    fn positive_gallery_scaling_preserves_ranking(seed in any::<u64>(), scale in 1e-3f64..1e3) {
        let mut r = rng(seed);
        let (n, d) = (16, 6);
        let gallery = random_mat(&mut r, n, d);
        let query = random_mat(&mut r, 1, d);
        let scaled = &gallery * scale;
        let a = similarity_matrix(&query, &gallery).unwrap();
        let b = similarity_matrix(&query, &scaled).unwrap();
        prop_assert_eq!(ranking(a.row(0).as_slice().unwrap()), ranking(b.row(0).as_slice().unwrap()));
    }

    #[test]
    fn recall_is_monotone_in_k(seed in any::<u64>()) {
        let mut r = rng(seed);
        let sims = random_mat(&mut r, 25, 25);
        let truth: Vec<usize> = (0..25).collect();
        let rep = evaluate_similarity(&sims, &truth).unwrap();
        let rs = rep.recalls();
        prop_assert!(rs.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(rep.rsum <= 500.0);
        prop_assert!(rep.medr >= 1.0);
    }
}
