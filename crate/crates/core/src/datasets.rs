//! Data: the linearly separable distribution D(v), dipoles, CIFAR-10
//! ingestion, carrier poisoning and the NAD-flip representation.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{invalid, io_err, Error, Result};
use crate::nad::NadBasis;
use crate::rng::Rng;
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelSet {
    /// `y ∈ {−1, +1}`.
    Binary,
    /// `y ∈ {0, …, classes−1}`.
    Multiclass { classes: usize },
}

impl LabelSet {
    pub fn contains(&self, y: i32) -> bool {
        match *self {
            LabelSet::Binary => y == 1 || y == -1,
            LabelSet::Multiclass { classes } => y >= 0 && (y as usize) < classes,
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            LabelSet::Binary => 2,
            LabelSet::Multiclass { classes } => classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    /// Per-sample shape, e.g. `(channels, height, width)` or `(D)`.
    pub sample_shape: Vec<usize>,
    /// `n × prod(sample_shape)`, row-major.
    pub x: Vec<f64>,
    pub y: Vec<i32>,
    pub labels: LabelSet,
    pub channels: usize,
}

impl LabeledDataset {
    pub fn new(sample_shape: Vec<usize>, x: Vec<f64>, y: Vec<i32>, labels: LabelSet, channels: usize) -> Result<Self> {
        let d: usize = sample_shape.iter().product();
        if d == 0 || x.len() != d * y.len() {
            return Err(Error::Shape {
                context: "dataset samples".into(),
                expected: vec![y.len(), d],
                actual: vec![x.len()],
            });
        }
        if let Some(bad) = y.iter().find(|&&v| !labels.contains(v)) {
            return Err(invalid(format!("label {bad} outside declared set {labels:?}")));
        }
        if channels == 0 || !d.is_multiple_of(channels) {
            return Err(invalid(format!("{channels} channels do not divide sample length {d}")));
        }
        Ok(Self {
            sample_shape,
            x,
            y,
            labels,
            channels,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.x[i * d..(i + 1) * d]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        let d = self.dim();
        &mut self.x[i * d..(i + 1) * d]
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> LabeledDataset {
        let n = n.min(self.len());
        LabeledDataset {
            x: self.x[..n * self.dim()].to_vec(),
            y: self.y[..n].to_vec(),
            ..self.clone()
        }
    }

    /// Writes the samples as a tensor container and a JSON sidecar
    /// (`<path>.json`) holding labels and `meta`.
    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let mut shape = vec![self.len()];
        shape.extend(&self.sample_shape);
        Tensor::new(shape, self.x.clone())?.save(path, json!({ "kind": "dataset" }))?;
        let side = json!({
            "labels": self.labels,
            "channels": self.channels,
            "y": self.y,
            "meta": meta,
        });
        tensor::atomic_write(&sidecar(path), serde_json::to_string_pretty(&side)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (t, _) = Tensor::load(path)?;
        let side_path = sidecar(path);
        let text = std::fs::read_to_string(&side_path).map_err(io_err(&side_path))?;
        let side: serde_json::Value = serde_json::from_str(&text)?;
        let labels: LabelSet = serde_json::from_value(side["labels"].clone())?;
        let y: Vec<i32> = serde_json::from_value(side["y"].clone())?;
        let channels = side["channels"].as_u64().unwrap_or(1) as usize;
        let sample_shape = t.shape()[1..].to_vec();
        LabeledDataset::new(sample_shape, t.into_data(), y, labels, channels)
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// One instance of D(v).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSepSpec {
    pub v: Tensor,
    pub epsilon: f64,
    pub sigma: f64,
    pub n: usize,
    pub seed: u64,
}

impl LinearSepSpec {
    pub fn validate(&self) -> Result<()> {
        let nv = self.v.norm();
        if (nv - 1.0).abs() > 1e-10 {
            return Err(invalid(format!("direction v must be unit norm, got ‖v‖ = {nv}")));
        }
        if !(self.epsilon >= 0.0) || !(self.sigma >= 0.0) {
            return Err(invalid("epsilon and sigma must be >= 0"));
        }
        if self.n == 0 {
            return Err(invalid("sample count must be >= 1"));
        }
        Ok(())
    }
}

/// `x = ε y v + w`, `w ~ N(0, σ²(I − vvᵀ))`, `y` uniform on `{−1, +1}`.
pub fn sample_linear(spec: &LinearSepSpec, rng: &mut Rng) -> Result<LabeledDataset> {
    spec.validate()?;
    let v = spec.v.data();
    let d = v.len();
    let mut x = Vec::with_capacity(spec.n * d);
    let mut y = Vec::with_capacity(spec.n);
    let mut g = vec![0.0; d];
    for _ in 0..spec.n {
        let label = if rng.sign() > 0.0 { 1 } else { -1 };
        for gi in g.iter_mut() {
            *gi = rng.normal();
        }
        let proj = tensor::dot(&g, v);
        let a = spec.epsilon * label as f64;
        x.extend(g.iter().zip(v).map(|(&gi, &vi)| a * vi + spec.sigma * (gi - proj * vi)));
        y.push(label);
    }
    let shape = spec.v.shape().to_vec();
    let channels = if shape.len() == 3 { shape[0] } else { 1 };
    LabeledDataset::new(shape, x, y, LabelSet::Binary, channels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dipole {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

impl Dipole {
    pub fn endpoints(&self) -> (Vec<f64>, Vec<f64>) {
        let far = self.x.iter().zip(&self.v).map(|(a, b)| a + b).collect();
        (self.x.clone(), far)
    }
}

pub fn make_dipole(x: Vec<f64>, v: Vec<f64>) -> Result<Dipole> {
    if x.len() != v.len() {
        return Err(Error::Shape {
            context: "dipole".into(),
            expected: vec![x.len()],
            actual: vec![v.len()],
        });
    }
    if v.iter().all(|&a| a == 0.0) {
        return Err(invalid("dipole displacement must be nonzero"));
    }
    Ok(Dipole { x, v })
}

/// One carrier slot: NAD index, channel, and the classes it encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Carrier {
    pub nad_index: usize,
    pub channel: usize,
}

/// Carrier layout for `classes` labels starting at NAD index `first`
/// (0-based). Class `y` uses slot `c = ⌊y/2⌋` with sign `2(y mod 2) − 1`;
/// slot `c` sits on channel `c mod K` of NAD `first + ⌊c/K⌋`. Binary labels
/// use slot 0 with sign `y`.
pub fn carrier_layout(labels: LabelSet, channels: usize, first: usize) -> Vec<Carrier> {
    let slots = labels.classes().div_ceil(2);
    (0..slots)
        .map(|c| Carrier {
            nad_index: first + c / channels,
            channel: c % channels,
        })
        .collect()
}

fn slot_and_sign(labels: LabelSet, y: i32) -> (usize, f64) {
    match labels {
        LabelSet::Binary => (0, y as f64),
        LabelSet::Multiclass { .. } => ((y / 2) as usize, if y % 2 == 1 { 1.0 } else { -1.0 }),
    }
}

fn check_basis(ds: &LabeledDataset, basis: &NadBasis) -> Result<usize> {
    let per = ds.dim() / ds.channels;
    if basis.dim() != per {
        return Err(Error::Shape {
            context: "NAD basis vs per-channel input size".into(),
            expected: vec![per],
            actual: vec![basis.dim()],
        });
    }
    Ok(per)
}

fn carrier_projection(x: &[f64], u: &[f64], per: usize, ch: usize) -> f64 {
    tensor::dot(&x[ch * per..(ch + 1) * per], u)
}

/// Replaces every carrier coordinate of each sample: its own class carrier
/// becomes `±ε`, the other carriers become 0. Coordinates orthogonal to the
/// carriers are untouched.
pub fn poison(ds: &LabeledDataset, basis: &NadBasis, carrier_index: usize, epsilon: f64) -> Result<LabeledDataset> {
    let per = check_basis(ds, basis)?;
    let layout = carrier_layout(ds.labels, ds.channels, carrier_index);
    if let Some(c) = layout.iter().find(|c| c.nad_index >= basis.len()) {
        return Err(invalid(format!(
            "carrier NAD index {} out of range (basis has {} vectors)",
            c.nad_index,
            basis.len()
        )));
    }
    let mut out = ds.clone();
    for i in 0..out.len() {
        let (own, sign) = slot_and_sign(ds.labels, ds.y[i]);
        let x = out.sample_mut(i);
        for (slot, c) in layout.iter().enumerate() {
            let u = &basis.vectors[c.nad_index];
            let target = if slot == own { sign * epsilon } else { 0.0 };
            let delta = target - carrier_projection(x, u, per, c.channel);
            for (xv, &uv) in x[c.channel * per..(c.channel + 1) * per].iter_mut().zip(u) {
                *xv += delta * uv;
            }
        }
    }
    Ok(out)
}

/// Train accuracy of the linear classifier that scores class `y` by
/// `sign_y · ⟨x, carrier_{slot(y)}⟩` and predicts the argmax.
pub fn carrier_only_accuracy(ds: &LabeledDataset, basis: &NadBasis, carrier_index: usize) -> Result<f64> {
    let per = check_basis(ds, basis)?;
    let layout = carrier_layout(ds.labels, ds.channels, carrier_index);
    let classes: Vec<i32> = match ds.labels {
        LabelSet::Binary => vec![-1, 1],
        LabelSet::Multiclass { classes } => (0..classes as i32).collect(),
    };
    let mut correct = 0usize;
    for i in 0..ds.len() {
        let x = ds.sample(i);
        let proj: Vec<f64> = layout
            .iter()
            .map(|c| carrier_projection(x, &basis.vectors[c.nad_index], per, c.channel))
            .collect();
        let mut best = (f64::NEG_INFINITY, classes[0]);
        for &y in &classes {
            let (slot, sign) = slot_and_sign(ds.labels, y);
            let score = sign * proj[slot];
            if score > best.0 {
                best = (score, y);
            }
        }
        if best.1 == ds.y[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / ds.len().max(1) as f64)
}

/// Checks `UᵀU = I` within `tol` (max abs entry).
pub fn check_orthonormal(u: &DMatrix<f64>, tol: f64) -> Result<()> {
    if !u.is_square() {
        return Err(invalid(format!("basis matrix must be square, got {}x{}", u.nrows(), u.ncols())));
    }
    let g = u.transpose() * u;
    let err = (g - DMatrix::identity(u.nrows(), u.ncols())).amax();
    if err > tol {
        return Err(invalid(format!("basis is not orthonormal (max |UᵀU − I| = {err:.3e})")));
    }
    Ok(())
}

/// `x' = U flip(Uᵀ x)` applied to each channel.
pub fn flip_representation(u: &DMatrix<f64>, ds: &LabeledDataset) -> Result<LabeledDataset> {
    check_orthonormal(u, 1e-8)?;
    let per = ds.dim() / ds.channels;
    if u.nrows() != per {
        return Err(Error::Shape {
            context: "flip basis vs per-channel input size".into(),
            expected: vec![per],
            actual: vec![u.nrows()],
        });
    }
    // x' = U R Uᵀ x with R the reversal permutation
    let mut rev = u.clone();
    for c in 0..per {
        rev.set_column(c, &u.column(per - 1 - c));
    }
    let t = &rev * u.transpose();
    let mut out = ds.clone();
    let rows = ds.len() * ds.channels;
    let xs = DMatrix::from_column_slice(per, rows, &ds.x);
    let ys = &t * xs;
    out.x.copy_from_slice(ys.as_slice());
    Ok(out)
}

pub const CIFAR_RECORD: usize = 1 + 3072;
pub const CIFAR_BATCH_BYTES: usize = 10_000 * CIFAR_RECORD;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Directory holding the CIFAR-10 binary batches: `dir` itself or its
/// `cifar-10-batches-bin` subdirectory.
pub fn cifar_dir(root: &Path) -> PathBuf {
    let sub = root.join("cifar-10-batches-bin");
    if sub.join(CIFAR_TEST_FILE).exists() {
        sub
    } else {
        root.to_path_buf()
    }
}

/// Appends at most `limit` records of one batch file.
fn read_cifar_batch(path: &Path, limit: usize, x: &mut Vec<f64>, y: &mut Vec<i32>) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::Data {
        path: path.into(),
        message: format!("cannot read CIFAR-10 batch (expected {CIFAR_BATCH_BYTES} bytes): {e}"),
    })?;
    if bytes.len() != CIFAR_BATCH_BYTES {
        return Err(Error::Data {
            path: path.into(),
            message: format!("expected {CIFAR_BATCH_BYTES} bytes, found {}", bytes.len()),
        });
    }
    for rec in bytes.chunks_exact(CIFAR_RECORD).take(limit) {
        if rec[0] > 9 {
            return Err(Error::Data {
                path: path.into(),
                message: format!("label byte {} out of range", rec[0]),
            });
        }
        y.push(rec[0] as i32);
        x.extend(rec[1..].iter().map(|&p| p as f64 / 255.0));
    }
    Ok(())
}

/// Loads `(train, test)`: 50 000 / 10 000 samples, shape `(3, 32, 32)`
/// channel-major (R plane, G plane, B plane), pixels in `[0, 1]`.
pub fn load_cifar10(path: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    load_cifar10_prefix(path, 50_000, 10_000)
}

/// The first `n_train` training and `n_test` test records, in file order.
/// Batches past the prefix are not read.
pub fn load_cifar10_prefix(path: &Path, n_train: usize, n_test: usize) -> Result<(LabeledDataset, LabeledDataset)> {
    if n_train == 0 || n_test == 0 {
        return Err(invalid("CIFAR-10 subsets must be non-empty"));
    }
    let dir = cifar_dir(path);
    let labels = LabelSet::Multiclass { classes: 10 };
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for f in CIFAR_TRAIN_FILES {
        if y.len() >= n_train {
            break;
        }
        read_cifar_batch(&dir.join(f), n_train - y.len(), &mut x, &mut y)?;
    }
    let train = LabeledDataset::new(vec![3, 32, 32], x, y, labels, 3)?;
    let (mut x, mut y) = (Vec::new(), Vec::new());
    read_cifar_batch(&dir.join(CIFAR_TEST_FILE), n_test, &mut x, &mut y)?;
    let test = LabeledDataset::new(vec![3, 32, 32], x, y, labels, 3)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_for_cifar_shape() {
        let l = carrier_layout(LabelSet::Multiclass { classes: 10 }, 3, 4);
        assert_eq!(l.len(), 5);
        assert_eq!(
            l.iter().map(|c| (c.nad_index, c.channel)).collect::<Vec<_>>(),
            vec![(4, 0), (4, 1), (4, 2), (5, 0), (5, 1)]
        );
    }

    #[test]
    fn dipole_rejects_zero() {
        assert!(make_dipole(vec![1.0, 2.0], vec![0.0, 0.0]).is_err());
        let d = make_dipole(vec![1.0, 2.0], vec![1.0, 0.0]).unwrap();
        assert_eq!(d.endpoints().1, vec![2.0, 2.0]);
    }

    #[test]
    fn missing_cifar_names_file() {
        let dir = std::env::temp_dir().join("nadlab-no-cifar-here");
        let err = load_cifar10(&dir).unwrap_err().to_string();
        assert!(err.contains("data_batch_1.bin") && err.contains("30730000"), "{err}");
    }
}
