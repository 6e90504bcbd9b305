//! Sweeps over data directions, noise levels and sample counts, the
//! poisoning and flip experiments, and heatmap rendering.
//!
//! Every row draws its data, initialization and shuffling from a seed
//! derived from `(master seed, row key)`, so rows can run in any order and
//! any one of them can be re-run alone from the table metadata.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::datasets::{self, LabeledDataset, LinearSepSpec};
use crate::error::{invalid, io_err, Error, Result};
use crate::models::{Model, ModelSpec};
use crate::nad::NadBasis;
use crate::rng::Rng;
use crate::spectral::{self, FreqTag, Part};
use crate::tensor::{self, Tensor};
use crate::training::{self, TrainConfig};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartFilter {
    Re,
    Im,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DirectionSource {
    Fourier {
        #[serde(default = "re")]
        part: PartFilter,
    },
    Nad {
        path: PathBuf,
    },
    RandomOrthonormal {
        seed: u64,
    },
}

fn re() -> PartFilter {
    PartFilter::Re
}

/// Explicit 0-based indices or `count` evenly strided ones (`i·n/count`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum IndexSpec {
    List(Vec<usize>),
    Stratified { stratified: usize },
}

impl IndexSpec {
    pub fn resolve(&self, n: usize) -> Result<Vec<usize>> {
        let out = match *self {
            IndexSpec::List(ref v) => v.clone(),
            IndexSpec::Stratified { stratified } => stratified_indices(n, stratified)?,
        };
        if let Some(&bad) = out.iter().find(|&&i| i >= n) {
            return Err(invalid(format!("direction index {bad} out of range (basis has {n} vectors)")));
        }
        if out.is_empty() {
            return Err(invalid("no direction indices selected"));
        }
        Ok(out)
    }
}

pub fn stratified_indices(n: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > n {
        return Err(invalid(format!("cannot pick {count} stratified indices out of {n}")));
    }
    Ok((0..count).map(|i| i * n / count).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataParams {
    #[serde(default = "one")]
    pub epsilon: f64,
    #[serde(default = "three")]
    pub sigma: f64,
    #[serde(default = "ten_k")]
    pub n_train: usize,
    #[serde(default = "ten_k")]
    pub n_test: usize,
}

fn one() -> f64 {
    1.0
}
fn three() -> f64 {
    3.0
}
fn ten_k() -> usize {
    10_000
}
fn repeats_default() -> usize {
    3
}

impl Default for DataParams {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            sigma: 3.0,
            n_train: 10_000,
            n_test: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub model: ModelSpec,
    pub source: DirectionSource,
    pub indices: IndexSpec,
    #[serde(default)]
    pub data: DataParams,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "repeats_default")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(invalid("repeats must be >= 1"));
        }
        if self.data.n_train == 0 || self.data.n_test == 0 {
            return Err(invalid("n_train and n_test must be >= 1"));
        }
        self.train.validate()?;
        self.model.network()?;
        Ok(())
    }
}

/// Resolved directions of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionSet {
    pub vectors: Vec<Vec<f64>>,
    /// Frequency of each vector for Fourier sources.
    pub tags: Option<Vec<FreqTag>>,
    pub grid: Option<(usize, usize)>,
    pub label: String,
}

impl DirectionSet {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn from_nads(basis: &NadBasis) -> Self {
        Self {
            vectors: basis.vectors.clone(),
            tags: None,
            grid: None,
            label: "nad".into(),
        }
    }
}

fn image_grid(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [h, w] | [1, h, w] => Ok((*h, *w)),
        [d] => Ok((1, *d)),
        _ => Err(invalid(format!(
            "Fourier directions need a single-channel input, got shape {shape:?}"
        ))),
    }
}

/// Orthonormal basis from the QR factorization of a Gaussian matrix.
pub fn random_orthonormal(d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = Rng::new(seed, 0x0b7);
    let g = DMatrix::from_fn(d, d, |_, _| r.normal());
    let qr = g.qr();
    let (q, rr) = (qr.q(), qr.r());
    (0..d)
        .map(|c| {
            // fix signs so the factorization is unique
            let s = if rr[(c, c)] < 0.0 { -1.0 } else { 1.0 };
            q.column(c).iter().map(|v| s * v).collect()
        })
        .collect()
}

pub fn resolve_directions(source: &DirectionSource, input_shape: &[usize]) -> Result<DirectionSet> {
    let d: usize = input_shape.iter().product();
    match source {
        DirectionSource::Fourier { part } => {
            let (h, w) = image_grid(input_shape)?;
            let b = spectral::real_basis(h, w)?;
            let keep = |p: Part| match part {
                PartFilter::Re => p == Part::Re,
                PartFilter::Im => p == Part::Im,
                PartFilter::Both => true,
            };
            let (vectors, tags) = b
                .vectors
                .into_iter()
                .zip(b.tags)
                .filter(|(_, t)| keep(t.part))
                .unzip();
            Ok(DirectionSet {
                vectors,
                tags: Some(tags),
                grid: Some((h, w)),
                label: format!("fourier-{part:?}").to_lowercase(),
            })
        }
        DirectionSource::Nad { path } => {
            let b = NadBasis::load(path)?;
            if b.dim() != d {
                return Err(Error::Shape {
                    context: format!("NAD basis {}", path.display()),
                    expected: vec![d],
                    actual: vec![b.dim()],
                });
            }
            Ok(DirectionSet::from_nads(&b))
        }
        DirectionSource::RandomOrthonormal { seed } => Ok(DirectionSet {
            vectors: random_orthonormal(d, *seed),
            tags: None,
            grid: None,
            label: "random-orthonormal".into(),
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    /// Experiment-specific key: direction index, carrier index or arm.
    pub key: String,
    pub direction: Option<usize>,
    pub freq: Option<FreqTag>,
    pub repeat: usize,
    pub sigma: f64,
    pub n_train: usize,
    pub seed: u64,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub iterations_to_threshold: Option<usize>,
    pub carrier_accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTable {
    pub kind: String,
    pub metadata: Value,
    pub rows: Vec<Row>,
}

const CSV_HEADER: [&str; 12] = [
    "key",
    "direction",
    "freq",
    "repeat",
    "sigma",
    "n_train",
    "seed",
    "train_accuracy",
    "test_accuracy",
    "iterations_to_threshold",
    "carrier_accuracy",
    "error",
];

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_default()
}

impl ExperimentTable {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).map_err(csv_err)?;
        for r in &self.rows {
            let freq = r
                .freq
                .map(|t| format!("{}:{}:{}", t.k1, t.k2, if t.part == Part::Re { "re" } else { "im" }));
            w.write_record([
                r.key.clone(),
                opt(&r.direction),
                freq.unwrap_or_default(),
                r.repeat.to_string(),
                r.sigma.to_string(),
                r.n_train.to_string(),
                r.seed.to_string(),
                opt(&r.train_accuracy),
                opt(&r.test_accuracy),
                opt(&r.iterations_to_threshold),
                opt(&r.carrier_accuracy),
                r.error.clone().unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| Error::Format(e.to_string()))
    }

    /// Writes `<stem>.csv` and `<stem>.json` (metadata and rows); `stem` may
    /// itself contain dots.
    pub fn save(&self, stem: &Path) -> Result<(PathBuf, PathBuf)> {
        let with = |ext: &str| {
            let mut p = stem.as_os_str().to_owned();
            p.push(ext);
            PathBuf::from(p)
        };
        let (csv_path, json_path) = (with(".csv"), with(".json"));
        tensor::atomic_write(&csv_path, &self.to_csv()?)?;
        tensor::atomic_write(&json_path, serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok((csv_path, json_path))
    }

    pub fn load(json_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(json_path).map_err(io_err(json_path))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Median test accuracy per key, in first-appearance order. Failed rows
    /// are skipped.
    pub fn median_test_accuracy(&self) -> Vec<(String, f64)> {
        let mut keys: Vec<String> = Vec::new();
        for r in &self.rows {
            if !keys.contains(&r.key) {
                keys.push(r.key.clone());
            }
        }
        keys.into_iter()
            .filter_map(|k| {
                let accs: Vec<f64> = self.rows.iter().filter(|r| r.key == k).filter_map(|r| r.test_accuracy).collect();
                crate::stats::median(&accs).ok().map(|m| (k, m))
            })
            .collect()
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Seed of one row, a pure function of the master seed and the row key.
pub fn row_seed(master: u64, key: &str, repeat: usize) -> u64 {
    // FNV-1a of the key selects the child stream
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x1000_0000_01b3);
    }
    let mut r = Rng::new(master, 0x5eed).derive(h).derive(repeat as u64);
    (r.uniform() * (1u64 << 53) as f64) as u64
}

/// Trains one fresh model on D(v) and evaluates it.
pub fn run_direction(
    model: &Model,
    v: &[f64],
    data: &DataParams,
    train: &TrainConfig,
    seed: u64,
) -> Result<(f64, f64, Option<usize>)> {
    let shape = model.spec().input_shape.clone();
    let vt = Tensor::new(shape, v.to_vec())?;
    let spec = |n: usize| LinearSepSpec {
        v: vt.clone(),
        epsilon: data.epsilon,
        sigma: data.sigma,
        n,
        seed,
    };
    let tr = datasets::sample_linear(&spec(data.n_train), &mut Rng::new(seed, 1))?;
    let te = datasets::sample_linear(&spec(data.n_test), &mut Rng::new(seed, 2))?;
    let p0 = model.init_params(&mut Rng::new(seed, 3));
    let cfg = TrainConfig { seed, ..train.clone() };
    let (_, report) = training::sgd_train(model, &p0, &tr, Some(&te), &cfg)?;
    let first = report.thresholds.first().and_then(|t| t.iteration);
    Ok((
        report.final_train_accuracy().unwrap_or(f64::NAN),
        report.final_test_accuracy().unwrap_or(f64::NAN),
        first,
    ))
}

fn sweep_metadata(kind: &str, spec: &SweepSpec, dirs: &DirectionSet, indices: &[usize]) -> Value {
    json!({
        "kind": kind,
        "code_version": CODE_VERSION,
        "spec": spec,
        "directions": dirs.label,
        "resolved_indices": indices,
        "grid": dirs.grid,
    })
}

/// Trains and evaluates one model per (direction, repeat).
pub fn direction_sweep(spec: &SweepSpec) -> Result<ExperimentTable> {
    let dirs = resolve_directions(&spec.source, &spec.model.input_shape)?;
    direction_sweep_with(spec, &dirs)
}

pub fn direction_sweep_with(spec: &SweepSpec, dirs: &DirectionSet) -> Result<ExperimentTable> {
    spec.validate()?;
    let model = Model::new(spec.model.clone())?;
    let d = model.net().input_len();
    if dirs.vectors.iter().any(|v| v.len() != d) {
        return Err(invalid(format!("direction length differs from model input {d}")));
    }
    let indices = spec.indices.resolve(dirs.len())?;
    let jobs: Vec<(usize, usize)> = indices
        .iter()
        .flat_map(|&i| (0..spec.repeats).map(move |r| (i, r)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(i, rep)| {
            let key = format!("{}:{i}", dirs.label);
            let seed = row_seed(spec.seed, &key, rep);
            let outcome = run_direction(&model, &dirs.vectors[i], &spec.data, &spec.train, seed);
            let mut row = Row {
                key,
                direction: Some(i),
                freq: dirs.tags.as_ref().map(|t| t[i]),
                repeat: rep,
                sigma: spec.data.sigma,
                n_train: spec.data.n_train,
                seed,
                train_accuracy: None,
                test_accuracy: None,
                iterations_to_threshold: None,
                carrier_accuracy: None,
                error: None,
            };
            match outcome {
                Ok((tr, te, it)) => {
                    row.train_accuracy = Some(tr);
                    row.test_accuracy = Some(te);
                    row.iterations_to_threshold = it;
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            row
        })
        .collect();
    Ok(ExperimentTable {
        kind: "direction-sweep".into(),
        metadata: sweep_metadata("direction-sweep", spec, dirs, &indices),
        rows,
    })
}

/// One direction sweep per noise level.
pub fn noise_sweep(spec: &SweepSpec, sigmas: &[f64]) -> Result<Vec<(f64, ExperimentTable)>> {
    let dirs = resolve_directions(&spec.source, &spec.model.input_shape)?;
    sigmas
        .iter()
        .map(|&sigma| {
            let mut s = spec.clone();
            s.data.sigma = sigma;
            Ok((sigma, direction_sweep_with(&s, &dirs)?))
        })
        .collect()
}

/// Direction sweeps at several training-set sizes, merged into one table.
pub fn samples_sweep(spec: &SweepSpec, counts: &[usize]) -> Result<ExperimentTable> {
    let dirs = resolve_directions(&spec.source, &spec.model.input_shape)?;
    samples_sweep_with(spec, &dirs, counts)
}

pub fn samples_sweep_with(spec: &SweepSpec, dirs: &DirectionSet, counts: &[usize]) -> Result<ExperimentTable> {
    if counts.is_empty() {
        return Err(invalid("samples sweep needs at least one sample count"));
    }
    let mut rows = Vec::new();
    for &n in counts {
        let mut s = spec.clone();
        s.data.n_train = n;
        // seeds come from the base key, so the n-sample sets are nested
        rows.extend(direction_sweep_with(&s, dirs)?.rows.into_iter().map(|mut r| {
            r.key = format!("{}:n{n}", r.key);
            r
        }));
    }
    let indices = spec.indices.resolve(dirs.len())?;
    let mut metadata = sweep_metadata("samples-sweep", spec, dirs, &indices);
    metadata["counts"] = json!(counts);
    Ok(ExperimentTable {
        kind: "samples-sweep".into(),
        metadata,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoisonSpec {
    pub model: ModelSpec,
    /// 0-based NAD index of the first carrier of each arm.
    pub carriers: Vec<usize>,
    #[serde(default = "poison_eps")]
    pub epsilon: f64,
    #[serde(default = "TrainConfig::image_default")]
    pub train: TrainConfig,
    #[serde(default = "one_repeat")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
}

fn poison_eps() -> f64 {
    0.05
}
fn one_repeat() -> usize {
    1
}

fn train_row(model: &Model, train: &LabeledDataset, test: &LabeledDataset, cfg: &TrainConfig, seed: u64) -> Result<(f64, f64)> {
    let p0 = model.init_params(&mut Rng::new(seed, 3));
    let cfg = TrainConfig { seed, ..cfg.clone() };
    let (_, r) = training::sgd_train(model, &p0, train, Some(test), &cfg)?;
    Ok((r.final_train_accuracy().unwrap_or(f64::NAN), r.final_test_accuracy().unwrap_or(f64::NAN)))
}

fn blank_row(key: String, repeat: usize, n_train: usize, seed: u64) -> Row {
    Row {
        key,
        direction: None,
        freq: None,
        repeat,
        sigma: 0.0,
        n_train,
        seed,
        train_accuracy: None,
        test_accuracy: None,
        iterations_to_threshold: None,
        carrier_accuracy: None,
        error: None,
    }
}

/// For each carrier index: poison the train set, train, and evaluate on the
/// clean test set. The `baseline` row trains on unpoisoned data.
pub fn poisoning_experiment(
    spec: &PoisonSpec,
    train: &LabeledDataset,
    test: &LabeledDataset,
    nads: &NadBasis,
) -> Result<ExperimentTable> {
    spec.train.validate()?;
    if spec.repeats == 0 {
        return Err(invalid("repeats must be >= 1"));
    }
    let model = Model::new(spec.model.clone())?;
    let arms: Vec<Option<usize>> = std::iter::once(None).chain(spec.carriers.iter().map(|&c| Some(c))).collect();
    let jobs: Vec<(Option<usize>, usize)> = arms
        .iter()
        .flat_map(|&a| (0..spec.repeats).map(move |r| (a, r)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(arm, rep)| {
            let key = arm.map_or("baseline".to_string(), |c| format!("carrier:{c}"));
            let seed = row_seed(spec.seed, &key, rep);
            let mut row = blank_row(key, rep, train.len(), seed);
            row.direction = arm;
            let outcome = (|| -> Result<()> {
                let data = match arm {
                    Some(c) => {
                        let p = datasets::poison(train, nads, c, spec.epsilon)?;
                        row.carrier_accuracy = Some(datasets::carrier_only_accuracy(&p, nads, c)?);
                        p
                    }
                    None => train.clone(),
                };
                let (tr, te) = train_row(&model, &data, test, &spec.train, seed)?;
                row.train_accuracy = Some(tr);
                row.test_accuracy = Some(te);
                Ok(())
            })();
            if let Err(e) = outcome {
                row.error = Some(e.to_string());
            }
            row
        })
        .collect();
    Ok(ExperimentTable {
        kind: "poisoning".into(),
        metadata: json!({ "kind": "poisoning", "code_version": CODE_VERSION, "spec": spec, "nad_provenance": nads.provenance }),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlipSpec {
    pub model: ModelSpec,
    #[serde(default = "TrainConfig::image_default")]
    pub train: TrainConfig,
    #[serde(default = "one_repeat")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Trains the same spec on the original and on the flipped representation
/// `x' = U flip(Uᵀx)`.
pub fn flip_experiment(spec: &FlipSpec, train: &LabeledDataset, test: &LabeledDataset, u: &DMatrix<f64>) -> Result<ExperimentTable> {
    spec.train.validate()?;
    let model = Model::new(spec.model.clone())?;
    let ftrain = datasets::flip_representation(u, train)?;
    let ftest = datasets::flip_representation(u, test)?;
    let arms: Vec<(&str, &LabeledDataset, &LabeledDataset)> = vec![("original", train, test), ("flipped", &ftrain, &ftest)];
    let jobs: Vec<(usize, usize)> = (0..arms.len()).flat_map(|a| (0..spec.repeats).map(move |r| (a, r))).collect();
    let rows = jobs
        .par_iter()
        .map(|&(a, rep)| {
            let (name, tr, te) = arms[a];
            // both arms share a seed so they differ only in representation
            let seed = row_seed(spec.seed, "flip", rep);
            let mut row = blank_row(name.into(), rep, tr.len(), seed);
            match train_row(&model, tr, te, &spec.train, seed) {
                Ok((a, b)) => {
                    row.train_accuracy = Some(a);
                    row.test_accuracy = Some(b);
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            row
        })
        .collect();
    Ok(ExperimentTable {
        kind: "flip".into(),
        metadata: json!({ "kind": "flip", "code_version": CODE_VERSION, "spec": spec }),
        rows,
    })
}

/// PGM value of grid cells with no dataset (Im gaps, unsampled directions).
pub const SENTINEL: u8 = 0;

fn gray(acc: f64) -> u8 {
    // 0.5 → 1 (black to the eye), 1.0 → 255; 0 is reserved for the sentinel
    let t = ((acc - 0.5) / 0.5).clamp(0.0, 1.0);
    (1.0 + 254.0 * t).round() as u8
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    /// Row-major gray levels; [`SENTINEL`] marks missing cells.
    pub pixels: Vec<u8>,
}

impl Heatmap {
    pub fn pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(&self.pixels);
        out
    }

    pub fn svg(&self, title: &str) -> String {
        let cell = 8;
        let (w, h) = (self.width * cell, self.height * cell);
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"12\">\n",
            w + 60,
            h + 60
        );
        s.push_str(&format!("<text x=\"40\" y=\"16\">{}</text>\n", xml_escape(title)));
        for y in 0..self.height {
            for x in 0..self.width {
                let v = self.pixels[y * self.width + x];
                let fill = if v == SENTINEL { "#c03030".to_string() } else { format!("#{v:02x}{v:02x}{v:02x}") };
                s.push_str(&format!(
                    "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"{fill}\"/>\n",
                    40 + x * cell,
                    24 + y * cell
                ));
            }
        }
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\">k2 (DC at center)</text>\n<text x=\"4\" y=\"{}\" transform=\"rotate(-90 10 {})\">k1</text>\n</svg>\n",
            40 + w / 2 - 50,
            h + 44,
            24 + h / 2,
            24 + h / 2
        ));
        s
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Median test accuracy of each Fourier direction placed on the centered
/// frequency grid, mirrored onto the conjugate frequency. One image per
/// basis part.
pub fn render_heatmap(table: &ExperimentTable, part: Part) -> Result<Heatmap> {
    let grid: Option<(usize, usize)> = serde_json::from_value(table.metadata["grid"].clone()).unwrap_or(None);
    let (h, w) = grid.ok_or_else(|| invalid("table has no Fourier grid; heatmaps need a Fourier direction sweep"))?;
    if table.rows.iter().any(|r| r.freq.is_none()) {
        return Err(invalid("table rows lack frequency keys"));
    }
    let mut pixels = vec![SENTINEL; h * w];
    for (key, acc) in table.median_test_accuracy() {
        let row = table.rows.iter().find(|r| r.key == key).expect("key from table");
        let t = row.freq.expect("checked");
        if t.part != part {
            continue;
        }
        let g = gray(acc);
        let (r1, c1) = spectral::centered(t.k1, t.k2, h, w);
        let (r2, c2) = spectral::centered((h - t.k1) % h, (w - t.k2) % w, h, w);
        pixels[r1 * w + c1] = g;
        pixels[r2 * w + c2] = g;
    }
    Ok(Heatmap {
        height: h,
        width: w,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stratified_every_kth() {
        assert_eq!(stratified_indices(1024, 64).unwrap()[..3], [0, 16, 32]);
        assert_eq!(stratified_indices(10, 3).unwrap(), vec![0, 3, 6]);
        assert!(stratified_indices(4, 5).is_err());
    }

    #[test]
    fn random_basis_is_orthonormal() {
        let b = random_orthonormal(12, 4);
        let u = DMatrix::from_fn(12, 12, |r, c| b[c][r]);
        datasets::check_orthonormal(&u, 1e-12).unwrap();
    }

    #[test]
    fn gray_levels() {
        assert_eq!(gray(1.0), 255);
        assert_eq!(gray(0.5), 1);
        assert_eq!(gray(0.2), 1);
        assert_ne!(gray(0.5), SENTINEL);
    }

    #[test]
    fn row_seed_depends_on_key_and_repeat() {
        let a = row_seed(7, "nad:3", 0);
        assert_eq!(a, row_seed(7, "nad:3", 0));
        assert_ne!(a, row_seed(7, "nad:3", 1));
        assert_ne!(a, row_seed(7, "nad:4", 0));
        assert_ne!(a, row_seed(8, "nad:3", 0));
    }
}
