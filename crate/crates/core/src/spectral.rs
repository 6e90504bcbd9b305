//! Unitary 2D DFT and the real orthonormal Fourier basis.
//!
//! Basis order: all real parts over the non-redundant half-spectrum in
//! raster order, then all imaginary parts in the same order. Self-conjugate
//! bins (DC and Nyquist rows/columns) carry a real part only.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub height: usize,
    pub width: usize,
    pub data: Vec<Complex<f64>>,
}

impl Spectrum {
    pub fn at(&self, k1: usize, k2: usize) -> Complex<f64> {
        self.data[k1 * self.width + k2]
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }
}

fn twiddles(n: usize, sign: f64) -> Vec<Complex<f64>> {
    (0..n)
        .map(|k| Complex::from_polar(1.0, sign * 2.0 * PI * k as f64 / n as f64))
        .collect()
}

/// In-place 1D DFT along a strided line; `tw[k] = exp(±2πik/n)`.
fn dft_lines(data: &mut [Complex<f64>], h: usize, w: usize, along_rows: bool, tw: &[Complex<f64>]) {
    let (n, lines) = if along_rows { (w, h) } else { (h, w) };
    let scale = 1.0 / (n as f64).sqrt();
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for line in 0..lines {
        let idx = |j: usize| if along_rows { line * w + j } else { j * w + line };
        for (k, b) in buf.iter_mut().enumerate() {
            let mut acc = Complex::new(0.0, 0.0);
            for j in 0..n {
                acc += data[idx(j)] * tw[(k * j) % n];
            }
            *b = acc * scale;
        }
        for (j, b) in buf.iter().enumerate() {
            data[idx(j)] = *b;
        }
    }
}

fn transform(mut data: Vec<Complex<f64>>, h: usize, w: usize, sign: f64) -> Vec<Complex<f64>> {
    dft_lines(&mut data, h, w, true, &twiddles(w, sign));
    dft_lines(&mut data, h, w, false, &twiddles(h, sign));
    data
}

fn grid_of(x: &Tensor) -> Result<(usize, usize)> {
    match *x.shape() {
        [h, w] => Ok((h, w)),
        _ => Err(Error::Shape {
            context: "dft2 expects a 2D (height, width) tensor".into(),
            expected: vec![0, 0],
            actual: x.shape().to_vec(),
        }),
    }
}

/// Unitary forward DFT, `X[k] = (HW)^{-1/2} Σ x[n] e^{-2πi(k1n1/H + k2n2/W)}`.
pub fn dft2(x: &Tensor) -> Result<Spectrum> {
    let (h, w) = grid_of(x)?;
    let data = transform(x.data().iter().map(|&v| Complex::new(v, 0.0)).collect(), h, w, -1.0);
    Ok(Spectrum { height: h, width: w, data })
}

/// Unitary inverse DFT; returns the real part.
pub fn idft2(spec: &Spectrum) -> Result<Tensor> {
    let data = transform(spec.data.clone(), spec.height, spec.width, 1.0);
    Tensor::new(vec![spec.height, spec.width], data.into_iter().map(|c| c.re).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Part {
    Re,
    Im,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreqTag {
    pub k1: usize,
    pub k2: usize,
    pub part: Part,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FourierBasis {
    pub height: usize,
    pub width: usize,
    /// One row per basis vector, each of length `height·width`.
    pub vectors: Vec<Vec<f64>>,
    pub tags: Vec<FreqTag>,
}

impl FourierBasis {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// `D × D` matrix with basis vectors as columns.
    pub fn matrix(&self) -> DMatrix<f64> {
        let d = self.height * self.width;
        DMatrix::from_fn(d, self.vectors.len(), |r, c| self.vectors[c][r])
    }

    /// Position of a basis element on the centered frequency grid.
    pub fn grid_position(&self, index: usize) -> (usize, usize) {
        let t = self.tags[index];
        centered(t.k1, t.k2, self.height, self.width)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let d = self.height * self.width;
        let flat: Vec<f64> = self.vectors.iter().flatten().copied().collect();
        Tensor::new(vec![self.vectors.len(), d], flat)?.save(
            path,
            json!({
                "kind": "fourier-basis",
                "height": self.height,
                "width": self.width,
                "index_map": self.tags,
            }),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (t, meta) = Tensor::load(path)?;
        let bad = |m: &str| Error::Data {
            path: path.into(),
            message: m.into(),
        };
        let height = meta["height"].as_u64().ok_or_else(|| bad("missing height"))? as usize;
        let width = meta["width"].as_u64().ok_or_else(|| bad("missing width"))? as usize;
        let tags: Vec<FreqTag> = serde_json::from_value(meta["index_map"].clone())?;
        let d = height * width;
        if t.shape() != [tags.len(), d] {
            return Err(bad("basis matrix shape does not match index map"));
        }
        let vectors = t.data().chunks(d).map(<[f64]>::to_vec).collect();
        Ok(Self { height, width, vectors, tags })
    }
}

/// Maps frequency `(k1, k2)` to pixel coordinates with DC at `(H/2, W/2)`.
pub fn centered(k1: usize, k2: usize, h: usize, w: usize) -> (usize, usize) {
    ((k1 + h / 2) % h, (k2 + w / 2) % w)
}

fn conj_index(k1: usize, k2: usize, h: usize, w: usize) -> (usize, usize) {
    ((h - k1) % h, (w - k2) % w)
}

pub fn real_basis(height: usize, width: usize) -> Result<FourierBasis> {
    if height == 0 || width == 0 {
        return Err(invalid(format!("basis extents must be >= 1, got {height}x{width}")));
    }
    let d = height * width;
    let mut half = Vec::new();
    for k1 in 0..height {
        for k2 in 0..width {
            let (c1, c2) = conj_index(k1, k2, height, width);
            if k1 * width + k2 <= c1 * width + c2 {
                half.push((k1, k2, (k1, k2) == (c1, c2)));
            }
        }
    }
    let mut vectors = Vec::with_capacity(d);
    let mut tags = Vec::with_capacity(d);
    for part in [Part::Re, Part::Im] {
        for &(k1, k2, selfconj) in &half {
            if selfconj && part == Part::Im {
                continue;
            }
            let amp = if selfconj { (1.0 / d as f64).sqrt() } else { (2.0 / d as f64).sqrt() };
            let v = (0..height)
                .flat_map(|n1| (0..width).map(move |n2| (n1, n2)))
                .map(|(n1, n2)| {
                    // reduce the phase index exactly before converting to radians
                    let num = (k1 * n1 % height) * width + (k2 * n2 % width) * height;
                    let arg = 2.0 * PI * (num % d) as f64 / d as f64;
                    amp * match part {
                        Part::Re => arg.cos(),
                        Part::Im => arg.sin(),
                    }
                })
                .collect();
            vectors.push(v);
            tags.push(FreqTag { k1, k2, part });
        }
    }
    Ok(FourierBasis {
        height,
        width,
        vectors,
        tags,
    })
}

/// Squared DFT magnitudes on the centered grid (DC at the image center).
pub fn spectrum_energy(v: &Tensor) -> Result<Tensor> {
    let s = dft2(v)?;
    let (h, w) = (s.height, s.width);
    let mut out = vec![0.0; h * w];
    for k1 in 0..h {
        for k2 in 0..w {
            let (r, c) = centered(k1, k2, h, w);
            out[r * w + c] = s.at(k1, k2).norm_sqr();
        }
    }
    Tensor::new(vec![h, w], out)
}
