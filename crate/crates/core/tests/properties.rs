use nalgebra::DMatrix;
use proptest::prelude::*;

use nadlab::datasets::{self, LabelSet, LabeledDataset, LinearSepSpec};
use nadlab::experiments::{random_orthonormal, stratified_indices};
use nadlab::rng::Rng;
use nadlab::spectral::{self, Part};
use nadlab::stats;
use nadlab::tensor::{self, Tensor};

fn gram_error(vectors: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (i, a) in vectors.iter().enumerate() {
        for (j, b) in vectors.iter().enumerate() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((tensor::dot(a, b) - target).abs());
        }
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fourier_basis_is_orthonormal_and_complete(h in 1usize..9, w in 1usize..9) {
        let b = spectral::real_basis(h, w).unwrap();
        prop_assert_eq!(b.len(), h * w);
        prop_assert!(gram_error(&b.vectors) < 1e-10);
        // every vector is band-limited to its tagged frequency and its conjugate
        for (v, t) in b.vectors.iter().zip(&b.tags) {
            let s = spectral::dft2(&Tensor::new(vec![h, w], v.clone()).unwrap()).unwrap();
            let (c1, c2) = ((h - t.k1) % h, (w - t.k2) % w);
            let on = s.at(t.k1, t.k2).norm_sqr() + if (c1, c2) != (t.k1, t.k2) { s.at(c1, c2).norm_sqr() } else { 0.0 };
            prop_assert!((on - s.energy()).abs() < 1e-9 * s.energy().max(1.0));
            if t.part == Part::Im {
                prop_assert!((c1, c2) != (t.k1, t.k2));
            }
        }
    }

    #[test]
    fn dft_round_trip(h in 1usize..7, w in 1usize..7, seed in any::<u64>()) {
        let mut rng = Rng::new(seed, 0);
        let x = tensor::gaussian(&mut rng, &[h, w], 1.0).unwrap();
        let back = spectral::idft2(&spectral::dft2(&x).unwrap()).unwrap();
        for (a, b) in x.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn container_round_trip_is_exact(n in 1usize..40, seed in any::<u64>()) {
        let mut rng = Rng::new(seed, 1);
        let t = tensor::gaussian(&mut rng, &[n], 2.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        t.save(&p, serde_json::json!({ "n": n })).unwrap();
        let (back, meta) = Tensor::load(&p).unwrap();
        prop_assert_eq!(back, t);
        prop_assert_eq!(meta["n"].as_u64(), Some(n as u64));
    }

    #[test]
    fn random_orthonormal_is_orthonormal(d in 1usize..20, seed in any::<u64>()) {
        prop_assert!(gram_error(&random_orthonormal(d, seed)) < 1e-10);
    }

    #[test]
    fn stratified_indices_are_sorted_distinct_and_in_range(n in 1usize..2000, frac in 0.0f64..1.0) {
        let count = 1 + ((n - 1) as f64 * frac) as usize;
        let idx = stratified_indices(n, count).unwrap();
        prop_assert_eq!(idx.len(), count);
        prop_assert_eq!(idx[0], 0);
        prop_assert!(idx.windows(2).all(|p| p[0] < p[1]));
        prop_assert!(*idx.last().unwrap() < n);
    }

    #[test]
    fn linear_samples_project_to_plus_minus_epsilon(d in 2usize..16, eps in 0.1f64..3.0, sigma in 0.0f64..4.0, seed in any::<u64>()) {
        let mut rng = Rng::new(seed, 2);
        let v = tensor::gaussian(&mut rng, &[d], 1.0).unwrap();
        let v = v.scaled(1.0 / v.norm());
        let spec = LinearSepSpec { v: v.clone(), epsilon: eps, sigma, n: 20, seed };
        let ds = datasets::sample_linear(&spec, &mut rng).unwrap();
        for i in 0..ds.len() {
            let proj = tensor::dot(ds.sample(i), v.data());
            prop_assert!((proj - eps * ds.y[i] as f64).abs() < 1e-10);
        }
    }

    #[test]
    fn flip_is_an_involution(d in 2usize..12, n in 1usize..8, seed in any::<u64>()) {
        let u = random_orthonormal(d, seed);
        let u = DMatrix::from_fn(d, d, |r, c| u[c][r]);
        let mut rng = Rng::new(seed, 3);
        let x: Vec<f64> = (0..n * d).map(|_| rng.normal()).collect();
        let y = (0..n).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect();
        let ds = LabeledDataset::new(vec![d], x, y, LabelSet::Binary, 1).unwrap();
        let twice = datasets::flip_representation(&u, &datasets::flip_representation(&u, &ds).unwrap()).unwrap();
        for (a, b) in ds.x.iter().zip(&twice.x) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn spearman_is_invariant_to_monotone_maps(xs in prop::collection::vec(-100.0f64..100.0, 3..30)) {
        let idx: Vec<f64> = (0..xs.len()).map(|i| i as f64).collect();
        let cubed: Vec<f64> = xs.iter().map(|x| x.powi(3) + 1.0).collect();
        if let (Ok(a), Ok(b)) = (stats::spearman(&idx, &xs), stats::spearman(&idx, &cubed)) {
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(a.abs() <= 1.0 + 1e-12);
        }
    }
}
