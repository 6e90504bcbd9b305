use nalgebra::DMatrix;

use nadlab::datasets::{self, LabelSet, LabeledDataset};
use nadlab::experiments::{self, DataParams, DirectionSource, FlipSpec, IndexSpec, PartFilter, PoisonSpec, SweepSpec, SENTINEL};
use nadlab::models::{ModelSpec, Variant};
use nadlab::nad::{Algorithm, NadBasis, Provenance};
use nadlab::rng::Rng;
use nadlab::spectral::Part;
use nadlab::training::TrainConfig;

fn logistic_sweep(shape: Vec<usize>, source: DirectionSource, indices: IndexSpec) -> SweepSpec {
    SweepSpec {
        model: ModelSpec::new(Variant::LogisticRegression, shape),
        source,
        indices,
        data: DataParams { epsilon: 1.0, sigma: 1.0, n_train: 400, n_test: 400 },
        train: TrainConfig { epochs: 10, batch: 32, lr: 0.2, ..Default::default() },
        repeats: 2,
        seed: 21,
    }
}

#[test]
fn logistic_regression_learns_random_orthonormal_directions() {
    let mut spec = logistic_sweep(vec![64], DirectionSource::RandomOrthonormal { seed: 4 }, IndexSpec::Stratified { stratified: 6 });
    spec.data.n_train = 4000;
    let table = experiments::direction_sweep(&spec).unwrap();
    assert_eq!(table.rows.len(), 12);
    for r in &table.rows {
        assert!(r.error.is_none(), "{:?}", r.error);
        assert!(r.test_accuracy.unwrap() > 0.99, "{}: {:?}", r.key, r.test_accuracy);
    }
}

#[test]
fn sweep_rows_can_be_rederived_from_metadata() {
    let spec = logistic_sweep(vec![1, 4, 4], DirectionSource::Fourier { part: PartFilter::Both }, IndexSpec::List(vec![0, 3, 7]));
    let table = experiments::direction_sweep(&spec).unwrap();
    let again: SweepSpec = serde_json::from_value(table.metadata["spec"].clone()).unwrap();
    let dirs = experiments::resolve_directions(&again.source, &again.model.input_shape).unwrap();
    let model = nadlab::models::Model::new(again.model.clone()).unwrap();
    for r in table.rows.iter().step_by(2) {
        let v = &dirs.vectors[r.direction.unwrap()];
        let (tr, te, _) = experiments::run_direction(&model, v, &again.data, &again.train, r.seed).unwrap();
        assert_eq!(Some(tr), r.train_accuracy);
        assert_eq!(Some(te), r.test_accuracy);
    }
}

#[test]
fn table_files_round_trip() {
    let spec = logistic_sweep(vec![1, 4, 4], DirectionSource::Fourier { part: PartFilter::Re }, IndexSpec::List(vec![1, 2]));
    let table = experiments::direction_sweep(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (csv, json) = table.save(&dir.path().join("t")).unwrap();
    assert_eq!(experiments::ExperimentTable::load(&json).unwrap(), table);
    let text = std::fs::read_to_string(csv).unwrap();
    assert!(text.starts_with("key,direction,freq,repeat"));
    assert_eq!(text.lines().count(), 1 + table.rows.len());
}

#[test]
fn noiseless_logistic_generalizes_perfectly() {
    let spec = logistic_sweep(vec![1, 4, 4], DirectionSource::Fourier { part: PartFilter::Both }, IndexSpec::Stratified { stratified: 8 });
    let tables = experiments::noise_sweep(&spec, &[0.0, 3.0]).unwrap();
    assert_eq!(tables.len(), 2);
    let (s0, t0) = &tables[0];
    assert_eq!(*s0, 0.0);
    assert!(t0.rows.iter().all(|r| r.test_accuracy == Some(1.0)));
    let median = |t: &experiments::ExperimentTable| {
        let v: Vec<f64> = t.median_test_accuracy().into_iter().map(|(_, a)| a).collect();
        nadlab::stats::median(&v).unwrap()
    };
    assert!(median(&tables[1].1) <= median(t0));
}

#[test]
fn samples_sweep_handles_tiny_training_sets() {
    let spec = logistic_sweep(vec![16], DirectionSource::RandomOrthonormal { seed: 2 }, IndexSpec::List(vec![0]));
    let table = experiments::samples_sweep(&spec, &[5, 400]).unwrap();
    assert_eq!(table.rows.len(), 4);
    assert!(table.rows.iter().all(|r| r.error.is_none()));
    assert_eq!(table.rows.iter().filter(|r| r.n_train == 5).count(), 2);
}

#[test]
fn heatmap_places_dc_at_the_center_and_marks_gaps() {
    let mut spec = logistic_sweep(vec![1, 4, 4], DirectionSource::Fourier { part: PartFilter::Both }, IndexSpec::Stratified { stratified: 16 });
    spec.repeats = 1;
    spec.data.sigma = 0.0;
    let table = experiments::direction_sweep(&spec).unwrap();
    let re = experiments::render_heatmap(&table, Part::Re).unwrap();
    assert_eq!((re.height, re.width), (4, 4));
    assert!(re.pixels.iter().all(|&p| p == 255), "{:?}", re.pixels);
    // the Im part has no DC, Nyquist or mixed-Nyquist components on a 4×4 grid
    let im = experiments::render_heatmap(&table, Part::Im).unwrap();
    assert_eq!(im.pixels[2 * 4 + 2], SENTINEL);
    assert_eq!(im.pixels.iter().filter(|&&p| p == SENTINEL).count(), 4);
    assert_eq!(&re.pgm()[..11], b"P5\n4 4\n255\n");
}

fn blobs(n: usize, seed: u64) -> LabeledDataset {
    let mut rng = Rng::new(seed, 0);
    let d = 3 * 4 * 4;
    let means: Vec<Vec<f64>> = (0..10).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 10;
        x.extend(means[c].iter().map(|m| m + 0.3 * rng.normal()));
        y.push(c as i32);
    }
    LabeledDataset::new(vec![3, 4, 4], x, y, LabelSet::Multiclass { classes: 10 }, 3).unwrap()
}

fn random_nads(d: usize, seed: u64) -> NadBasis {
    NadBasis {
        vectors: experiments::random_orthonormal(d, seed),
        spectrum: (0..d).map(|i| (d - i) as f64).collect(),
        provenance: Provenance {
            algorithm: Algorithm::GradCov,
            model_hash: "test".into(),
            samples: 0,
            fd_scale: 0.0,
            eval_point_hash: String::new(),
            seed,
            warnings: vec![],
        },
    }
}

fn image_model() -> ModelSpec {
    ModelSpec::new(Variant::Mlp { widths: vec![32], outputs: 10 }, vec![3, 4, 4])
}

#[test]
fn poisoning_records_perfect_carrier_separability() {
    let (train, test) = (blobs(300, 1), blobs(200, 2));
    let spec = PoisonSpec {
        model: image_model(),
        carriers: vec![0, 14],
        epsilon: 0.05,
        train: TrainConfig { epochs: 5, batch: 32, lr: 0.05, momentum: 0.9, ..Default::default() },
        repeats: 1,
        seed: 3,
    };
    let table = experiments::poisoning_experiment(&spec, &train, &test, &random_nads(16, 7)).unwrap();
    let keys: Vec<&str> = table.rows.iter().map(|r| r.key.as_str()).collect();
    assert_eq!(keys, ["baseline", "carrier:0", "carrier:14"]);
    assert!(table.rows[0].carrier_accuracy.is_none());
    for r in &table.rows[1..] {
        assert_eq!(r.carrier_accuracy, Some(1.0), "{}", r.key);
        assert!(r.error.is_none());
    }
    // a carrier past the end of the basis is a row-level error, not a crash
    let bad = PoisonSpec { carriers: vec![15], ..spec };
    let t = experiments::poisoning_experiment(&bad, &train, &test, &random_nads(16, 7)).unwrap();
    assert!(t.rows[1].error.as_deref().unwrap().contains("out of range"));
}

#[test]
fn flip_arms_share_seeds() {
    let (train, test) = (blobs(200, 3), blobs(100, 4));
    let spec = FlipSpec {
        model: image_model(),
        train: TrainConfig { epochs: 3, batch: 32, lr: 0.05, ..Default::default() },
        repeats: 1,
        seed: 1,
    };
    let u = experiments::random_orthonormal(16, 5);
    let u = DMatrix::from_fn(16, 16, |r, c| u[c][r]);
    let table = experiments::flip_experiment(&spec, &train, &test, &u).unwrap();
    assert_eq!(table.rows.len(), 2);
    assert_eq!(table.rows[0].key, "original");
    assert_eq!(table.rows[1].key, "flipped");
    assert_eq!(table.rows[0].seed, table.rows[1].seed);
    // flipping the flipped data restores the original arm exactly up to rounding
    let twice = datasets::flip_representation(&u, &datasets::flip_representation(&u, &train).unwrap()).unwrap();
    assert!(train.x.iter().zip(&twice.x).all(|(a, b)| (a - b).abs() < 1e-12));
}
