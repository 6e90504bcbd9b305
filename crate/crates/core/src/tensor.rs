//! Dense row-major `f64` tensors and their on-disk container.
//!
//! The container is one JSON header line followed by the raw little-endian
//! `f64` payload:
//!
//! ```text
//! {"shape":[32,32],"dtype":"f64","layout":"row-major","version":1,"meta":{...}}\n
//! <product(shape) * 8 bytes>
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{invalid, io_err, Error, Result};
use crate::rng::Rng;

pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(invalid(format!("tensor extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                context: "tensor construction".into(),
                expected: shape,
                actual: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    /// One-dimensional tensor owning `data`.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Canonical basis vector `e_index` with the given shape.
    pub fn basis(shape: &[usize], index: usize) -> Self {
        let mut t = Self::zeros(shape);
        t.data[index] = 1.0;
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Errors on the first NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite { index }),
            None => Ok(()),
        }
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn scaled(&self, c: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    /// Writes the container to `path` through a temporary file and rename.
    pub fn save(&self, path: &Path, meta: Value) -> Result<()> {
        let bytes = self.to_container_bytes(meta)?;
        atomic_write(path, &bytes)
    }

    pub fn to_container_bytes(&self, meta: Value) -> Result<Vec<u8>> {
        let header = ContainerHeader {
            shape: self.shape.clone(),
            dtype: "f64".into(),
            layout: "row-major".into(),
            version: CONTAINER_VERSION,
            meta,
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        out.reserve(self.data.len() * 8);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<(Tensor, Value)> {
        let file = fs::File::open(path).map_err(io_err(path))?;
        let mut reader = BufReader::new(file);
        let mut line = String::new();
        reader.read_line(&mut line).map_err(io_err(path))?;
        let header: ContainerHeader = serde_json::from_str(line.trim_end())
            .map_err(|e| Error::Format(format!("{}: bad header: {e}", path.display())))?;
        if header.dtype != "f64" || header.layout != "row-major" {
            return Err(Error::Format(format!(
                "{}: unsupported dtype/layout {}/{}",
                path.display(),
                header.dtype,
                header.layout
            )));
        }
        if header.version != CONTAINER_VERSION {
            return Err(Error::Format(format!(
                "{}: container version {} (expected {CONTAINER_VERSION})",
                path.display(),
                header.version
            )));
        }
        let n: usize = header.shape.iter().product();
        let mut raw = Vec::with_capacity(n * 8);
        reader.read_to_end(&mut raw).map_err(io_err(path))?;
        if raw.len() != n * 8 {
            return Err(Error::Data {
                path: path.to_path_buf(),
                message: format!("payload has {} bytes, expected {}", raw.len(), n * 8),
            });
        }
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok((Tensor::new(header.shape, data)?, header.meta))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ContainerHeader {
    shape: Vec<usize>,
    dtype: String,
    layout: String,
    version: u32,
    #[serde(default)]
    meta: Value,
}

/// I.i.d. `N(0, std^2)` entries drawn in row-major order.
pub fn gaussian(rng: &mut Rng, shape: &[usize], std: f64) -> Result<Tensor> {
    if !(std >= 0.0) {
        return Err(invalid(format!("standard deviation must be >= 0, got {std}")));
    }
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| std * rng.normal()).collect();
    Tensor::new(shape.to_vec(), data)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Write `bytes` to a sibling temp file and rename it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| invalid(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn finite_check_reports_index() {
        let t = Tensor::from_vec(vec![1.0, f64::NAN, 2.0]);
        match t.check_finite() {
            Err(Error::NonFinite { index }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_std_gives_zeros() {
        let mut rng = Rng::new(1, 0);
        let t = gaussian(&mut rng, &[4, 4], 0.0).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gaussian_is_deterministic_per_stream() {
        let a = gaussian(&mut Rng::new(9, 3), &[100], 1.0).unwrap();
        let b = gaussian(&mut Rng::new(9, 3), &[100], 1.0).unwrap();
        let c = gaussian(&mut Rng::new(9, 4), &[100], 1.0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn gaussian_variance_million_draws() {
        let t = gaussian(&mut Rng::new(2024, 0), &[1_000_000], 1.0).unwrap();
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((0.99..=1.01).contains(&var), "variance {var}");
        assert!(mean.abs() < 0.005, "mean {mean}");
    }

    #[test]
    fn container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.nat");
        let t = Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, 0.0, 1e-300, 7.0]).unwrap();
        t.save(&path, serde_json::json!({"note": "x"})).unwrap();
        let (back, meta) = Tensor::load(&path).unwrap();
        assert_eq!(back, t);
        assert_eq!(meta["note"], "x");
        let bytes = std::fs::read(&path).unwrap();
        let first = std::str::from_utf8(&bytes[..bytes.iter().position(|&b| b == b'\n').unwrap()]).unwrap();
        assert!(first.contains("\"layout\":\"row-major\""));
    }

    #[test]
    fn truncated_container_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.nat");
        let t = Tensor::from_vec(vec![1.0, 2.0]);
        let mut bytes = t.to_container_bytes(Value::Null).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(Tensor::load(&path), Err(Error::Data { .. })));
    }
}
