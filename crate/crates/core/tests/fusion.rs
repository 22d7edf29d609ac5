mod common;

use cadret_core::eval::{ranking, GalleryIndex, GalleryMeta};
use cadret_core::fusion::{cosine, fuse_cad, fuse_text, similarity};
use common::rng;
use ndarray::Array1;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn random_vec(r: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    Array1::from_shape_fn(d, |_| r.random_range(-1.0..1.0))
}

fn cos(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.dot(b) / (a.dot(a).sqrt() * b.dot(b).sqrt())
}

#[test]
fn joint_similarity_is_mean_of_branch_cosines() {
    let mut r = rng(77);
    for _ in 0..10_000 {
        let d = r.random_range(2..40);
        let scale = r.random_range(0.01..50.0);
        let (t, s, p) = (random_vec(&mut r, d) * scale, random_vec(&mut r, d), random_vec(&mut r, d) * 3.0);
        let got = similarity(&fuse_text(&t), &fuse_cad(&s, &p).unwrap()).unwrap();
        let want = 0.5 * (cos(&t, &s) + cos(&t, &p));
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn gallery_scaling_leaves_rankings_unchanged() {
    let mut r = rng(5);
    let (n, d) = (40, 10);
    let rows: Vec<Array1<f64>> = (0..n).map(|_| random_vec(&mut r, d)).collect();
    let ids: Vec<String> = (0..n).map(|i| format!("m{i}")).collect();
    let meta = vec![GalleryMeta { points_path: None, text_snippet: String::new() }; n];
    for c in [1e-3, 0.5, 7.0, 1e4] {
        let scaled: Vec<Array1<f64>> = rows.iter().map(|v| v * c).collect();
        let a = GalleryIndex::from_vectors(ids.clone(), &rows, meta.clone(), "v").unwrap();
        let b = GalleryIndex::from_vectors(ids.clone(), &scaled, meta.clone(), "v").unwrap();
        for _ in 0..20 {
            let q = random_vec(&mut r, d);
            let qs = q.as_slice().unwrap();
            assert_eq!(ranking(&a.scores(qs).unwrap()), ranking(&b.scores(qs).unwrap()));
            // Raw (unnormalized) cosine ranking agrees too.
            let raw: Vec<f64> = scaled.iter().map(|v| cosine(qs, v.as_slice().unwrap()).unwrap()).collect();
            let base: Vec<f64> = rows.iter().map(|v| cosine(qs, v.as_slice().unwrap()).unwrap()).collect();
            assert_eq!(ranking(&raw), ranking(&base));
        }
    }
}

#[test]
fn zero_vectors_have_no_similarity() {
    let z = Array1::zeros(4);
    let v = Array1::from(vec![1.0, 0.0, 0.0, 0.0]);
    assert!(similarity(&fuse_text(&z), &fuse_cad(&v, &v).unwrap()).is_err());
    assert!(fuse_cad(&v, &Array1::zeros(3)).is_err());
}
