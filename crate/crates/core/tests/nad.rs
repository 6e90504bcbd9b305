use nadlab::models::{Model, ModelSpec};
use nadlab::nad::{self, Algorithm, NadBasis, NadConfig};
use nadlab::oracles;

fn distinct_m(d: usize) -> Vec<f64> {
    (0..d).map(|i| 1.25f64.powi(-(((i * 37) % d) as i32))).collect()
}

fn sorted_by_m2(m: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..m.len()).collect();
    order.sort_by(|&a, &b| (m[b] * m[b]).total_cmp(&(m[a] * m[a])));
    order
}

#[test]
fn gradient_covariance_on_linear_pooling_finds_canonical_directions() {
    let m = distinct_m(64);
    let model = Model::new(ModelSpec::linear_pooling(m.clone(), 4)).unwrap();
    let cfg = NadConfig { top_k: 10, ..Default::default() };
    let basis = nad::nads_gradient_covariance(&model, &cfg, 17).unwrap();
    assert_eq!(basis.provenance.algorithm, Algorithm::GradCov);
    assert!(basis.orthonormality_error() < 1e-10);
    for (i, &j) in sorted_by_m2(&m).iter().take(10).enumerate() {
        assert!(basis.vectors[i][j].abs() > 0.99, "NAD {i}: |dot| {}", basis.vectors[i][j].abs());
    }
    assert!(basis.spectrum.windows(2).all(|p| p[0] >= p[1]));
}

#[test]
fn mixed_derivative_on_linear_pooling_finds_canonical_directions() {
    let m = distinct_m(32);
    let model = Model::new(ModelSpec::linear_pooling(m.clone(), 4)).unwrap();
    let cfg = NadConfig { samples: 4000, top_k: 5, ..Default::default() };
    let basis = nad::nads_mixed_second_derivative(&model, &cfg, 5).unwrap();
    assert_eq!(basis.provenance.algorithm, Algorithm::MixedSecond);
    assert_eq!(basis.len(), 5);
    for (i, &j) in sorted_by_m2(&m).iter().take(5).enumerate() {
        assert!(basis.vectors[i][j].abs() > 0.99, "NAD {i}: |dot| {}", basis.vectors[i][j].abs());
    }
}

#[test]
fn both_algorithms_agree_on_linear_pooling() {
    let m = distinct_m(32);
    let model = Model::new(ModelSpec::linear_pooling(m, 4)).unwrap();
    let cfg = NadConfig { samples: 4000, top_k: 5, ..Default::default() };
    let a = nad::nads_gradient_covariance(&model, &cfg, 1).unwrap();
    let b = nad::nads_mixed_second_derivative(&model, &cfg, 1).unwrap();
    assert!(nad::basis_alignment(&a, &b, 5).unwrap().mean > 0.99);
}

#[test]
fn logistic_regression_is_isotropic() {
    let model = Model::new(ModelSpec::logistic(4)).unwrap();
    let cfg = NadConfig { top_k: 4, ..Default::default() };
    let basis = nad::nads_gradient_covariance(&model, &cfg, 3).unwrap();
    let spread = basis.spectrum[0] / basis.spectrum[3];
    assert!(spread < 1.1, "eigenvalue spread {spread}");
}

#[test]
fn basis_file_round_trip_keeps_provenance() {
    let model = Model::new(ModelSpec::linear_pooling(distinct_m(16), 4)).unwrap();
    let cfg = NadConfig { samples: 200, top_k: 16, ..Default::default() };
    let basis = nad::nads_gradient_covariance(&model, &cfg, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("b.nab");
    basis.save(&p).unwrap();
    let back = NadBasis::load(&p).unwrap();
    assert_eq!(back, basis);
    assert_eq!(back.provenance.model_hash, model.spec().hash());
    assert_eq!(back.provenance.samples, 200);
}

#[test]
fn same_seed_same_basis_and_seed_changes_draws() {
    let model = Model::new(ModelSpec::linear_pooling(distinct_m(16), 4)).unwrap();
    let cfg = NadConfig { samples: 300, top_k: 4, ..Default::default() };
    let a = nad::nads_gradient_covariance(&model, &cfg, 9).unwrap();
    let b = nad::nads_gradient_covariance(&model, &cfg, 9).unwrap();
    let c = nad::nads_gradient_covariance(&model, &cfg, 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.spectrum, c.spectrum);
}

#[test]
fn invalid_configs_are_rejected() {
    let model = Model::new(ModelSpec::logistic(8)).unwrap();
    let bad_k = NadConfig { top_k: 9, ..Default::default() };
    assert!(nad::nads_gradient_covariance(&model, &bad_k, 0).is_err());
    let bad_h = NadConfig { fd_scale: 0.0, ..Default::default() };
    assert!(nad::nads_gradient_covariance(&model, &bad_h, 0).is_err());
    let bad_x = NadConfig { eval_point: Some(vec![0.0; 3]), ..Default::default() };
    assert!(nad::nads_gradient_covariance(&model, &bad_x, 0).is_err());
}

#[test]
fn nonzero_probe_has_no_zero_entries() {
    let x = oracles::nonzero_probe(256, 4);
    assert!(x.iter().all(|v| v.abs() >= 0.25));
}
