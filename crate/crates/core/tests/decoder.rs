mod common;

use cadret_core::decoder::{mask_features, masked_count, sample_mask, DecoderContext, DecoderStack};
use cadret_core::graph::Graph;
use cadret_core::layers::init_params;
use cadret_core::FeatureMap;
use common::{random_mat, rng};

const RATIOS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[test]
fn mask_count_is_floor_of_ratio_times_valid() {
    for &r in &RATIOS {
        for n_valid in 0..=300 {
            let mut valid = vec![true; n_valid];
            valid.extend(std::iter::repeat_n(false, 7));
            let spec = sample_mask(&valid, r, n_valid as u64).unwrap();
            let want = (r * n_valid as f64).floor() as usize;
            assert_eq!(spec.masked_positions.len(), want, "r={r} n={n_valid}");
            assert_eq!(masked_count(r, n_valid), want);
            assert!(spec.masked_positions.iter().all(|&p| p < n_valid));
        }
    }
    assert_eq!(sample_mask(&vec![true; 272], 0.5, 1).unwrap().masked_positions.len(), 136);
}

#[test]
fn ratio_extremes() {
    let mut r = rng(4);
    let mut valid = vec![true; 9];
    valid.extend([false, false]);
    let f = FeatureMap::new(random_mat(&mut r, 11, 6), valid).unwrap();
    let (same, _) = mask_features(&f, 0.0, 3).unwrap();
    assert_eq!(same, f);
    let (zeroed, spec) = mask_features(&f, 1.0, 3).unwrap();
    assert_eq!(spec.masked_positions.len(), 9);
    for i in 0..9 {
        assert!(zeroed.values.row(i).iter().all(|&x| x == 0.0));
    }
    assert_eq!(zeroed.values.row(9), f.values.row(9));
    assert_eq!(zeroed.values.row(10), f.values.row(10));
}

#[test]
fn half_masking_frequency_is_uniform() {
    let n = 20;
    let valid = vec![true; n];
    let draws = 10_000;
    let mut hits = vec![0usize; n];
    for s in 0..draws {
        for p in sample_mask(&valid, 0.5, s).unwrap().masked_positions {
            hits[p] += 1;
        }
    }
    for (p, &h) in hits.iter().enumerate() {
        let freq = h as f64 / draws as f64;
        assert!((freq - 0.5).abs() <= 0.02, "position {p}: {freq}");
    }
}

#[test]
fn masks_are_seed_deterministic() {
    let valid = vec![true; 50];
    assert_eq!(sample_mask(&valid, 0.5, 9).unwrap(), sample_mask(&valid, 0.5, 9).unwrap());
}

fn routing_fixture() -> (DecoderStack, cadret_core::ParamStore) {
    let stack = DecoderStack::new(4, 16, 4, 32).unwrap();
    let mut d = Vec::new();
    stack.declare(&mut d);
    (stack, init_params(&d, 3))
}

/// Output of block `i` for fixed query input and the given conditioning.
fn block_out(stack: &DecoderStack, store: &cadret_core::ParamStore, i: usize, q: &cadret_core::Mat, t: &cadret_core::Mat, p: &cadret_core::Mat) -> cadret_core::Mat {
    let mut g = Graph::with_params(store);
    let qv = g.constant(q.clone());
    let tv = g.constant(t.clone());
    let pv = g.constant(p.clone());
    let (tm, pm) = (vec![true; t.nrows()], vec![true; p.nrows()]);
    let ctx = DecoderContext { text: tv, text_mask: &tm, points: pv, points_mask: &pm };
    let out = stack.block_forward(&mut g, i, qv, ctx).unwrap();
    g.value(out).clone()
}

#[test]
fn text_blocks_ignore_points_and_point_blocks_ignore_text() {
    let (stack, store) = routing_fixture();
    let mut r = rng(8);
    let q = random_mat(&mut r, 6, 16);
    let t = random_mat(&mut r, 5, 16);
    let p = random_mat(&mut r, 10, 16);
    let t2 = &t + &random_mat(&mut r, 5, 16);
    let p2 = &p + &random_mat(&mut r, 10, 16);

    let b1 = block_out(&stack, &store, 0, &q, &t, &p);
    let b1_p = block_out(&stack, &store, 0, &q, &t, &p2);
    assert!((&b1 - &b1_p).iter().all(|d| d.abs() < 1e-12));
    let b1_t = block_out(&stack, &store, 0, &q, &t2, &p);
    assert!((&b1 - &b1_t).iter().any(|d| d.abs() > 1e-6));

    // Block 2 with its input frozen at block 1's output.
    let b2 = block_out(&stack, &store, 1, &b1, &t, &p);
    let b2_t = block_out(&stack, &store, 1, &b1, &t2, &p);
    assert!((&b2 - &b2_t).iter().all(|d| d.abs() < 1e-12));
    let mut g = Graph::with_params(&store);
    let (qv, pv) = (g.constant(b1.clone()), g.constant(p.clone()));
    let sub = stack.blocks[1].cross_sublayer(&mut g, qv, pv, &[true; 10]).unwrap();
    let mut g2 = Graph::with_params(&store);
    let (qv2, pv2) = (g2.constant(b1.clone()), g2.constant(p2.clone()));
    let sub2 = stack.blocks[1].cross_sublayer(&mut g2, qv2, pv2, &[true; 10]).unwrap();
    assert!((g.value(sub) - g2.value(sub2)).iter().any(|d| d.abs() > 1e-6));
}

#[test]
fn reconstruction_is_deterministic_and_shape_preserving() {
    let (stack, store) = routing_fixture();
    let mut r = rng(1);
    let f = FeatureMap::dense(random_mat(&mut r, 7, 16));
    let t = FeatureMap::dense(random_mat(&mut r, 5, 16));
    let p = FeatureMap::dense(random_mat(&mut r, 10, 16));
    for &ratio in &RATIOS {
        let (masked, _) = mask_features(&f, ratio, 2).unwrap();
        let a = stack.reconstruct_features(&store, &masked, &t, &p).unwrap();
        let b = stack.reconstruct_features(&store, &masked, &t, &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.values.dim(), (7, 16));
    }
}
