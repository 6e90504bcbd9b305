//! Closed-form results for the toy models and the Monte-Carlo estimators
//! that check them.
//!
//! Monte-Carlo sums are taken over fixed-size chunks of draws, each draw on
//! its own child stream, and chunk partials are combined by a fixed pairwise
//! tree. Results therefore do not depend on the worker count.

use std::f64::consts::PI;

use nalgebra::{Complex, DMatrix};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{invalid, Error, Result};
use crate::models::{AliasingOperator, Model, ModelSpec};
use crate::nad::{draw_params, sym_eigen_desc};
use crate::rng::Rng;
use crate::tensor;

const CHUNK: usize = 2048;

/// `Q(t) = 1 − Φ(t) = erfc(t/√2)/2`.
pub fn q_tail(t: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(t / std::f64::consts::SQRT_2)
}

/// Spectrum of the length-`s` averaging kernel on `d` points:
/// `m̂[k] = (1/s) Σ_{n<s} e^{−2πikn/d}`.
pub fn boxcar_prefilter(d: usize, s: usize) -> Vec<Complex<f64>> {
    (0..d)
        .map(|k| {
            let mut acc = Complex::new(0.0, 0.0);
            for n in 0..s {
                acc += Complex::from_polar(1.0, -2.0 * PI * ((k * n) % d) as f64 / d as f64);
            }
            acc / s as f64
        })
        .collect()
}

pub fn magnitudes(m_hat: &[Complex<f64>]) -> Vec<f64> {
    m_hat.iter().map(|c| c.norm()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Gamma {
    Finite(f64),
    /// Zero aliased energy with nonzero signal: perfect separation.
    Infinite,
    /// Signal and aliased energy both zero.
    Degenerate,
}

impl Gamma {
    pub fn value(self) -> Option<f64> {
        match self {
            Gamma::Finite(g) => Some(g),
            Gamma::Infinite => Some(f64::INFINITY),
            Gamma::Degenerate => None,
        }
    }
}

/// `γ²(ℓ) = S |m̂[ℓ]|² / Σ_{k=1}^{S−1} |m̂[(ℓ + kM) mod D]|²`.
pub fn gamma_snr(m_mag: &[f64], l: usize, s: usize, d: usize) -> Result<Gamma> {
    let op = AliasingOperator::new(d, s)?;
    if m_mag.len() != d || l >= d {
        return Err(invalid(format!("prefilter length {} / index {l} inconsistent with D = {d}", m_mag.len())));
    }
    let num = s as f64 * m_mag[l].powi(2);
    let den: f64 = (1..s).map(|k| m_mag[(l + k * op.m) % d].powi(2)).sum();
    Ok(match (num > 0.0, den > 0.0) {
        (_, true) => Gamma::Finite((num / den).sqrt()),
        (true, false) => Gamma::Infinite,
        (false, false) => Gamma::Degenerate,
    })
}

/// `1 − Q((√2 ε / 2σ) γ(ℓ))`; `σ = 0` is the noiseless limit.
pub fn bayes_accuracy_after_pooling(m_mag: &[f64], l: usize, eps: f64, sigma: f64, s: usize, d: usize) -> Result<f64> {
    if eps < 0.0 || sigma < 0.0 {
        return Err(invalid("epsilon and sigma must be >= 0"));
    }
    let g = gamma_snr(m_mag, l, s, d)?;
    if eps == 0.0 {
        return Ok(0.5);
    }
    match g {
        Gamma::Degenerate => Err(Error::Degenerate(format!("γ({l}) is 0/0: feature and aliases erased"))),
        Gamma::Infinite => Ok(1.0),
        Gamma::Finite(0.0) if sigma == 0.0 => Err(Error::Degenerate(format!("γ({l}) = 0 in the noiseless limit"))),
        Gamma::Finite(_) if sigma == 0.0 => Ok(1.0),
        Gamma::Finite(g) => Ok(1.0 - q_tail(std::f64::consts::SQRT_2 * eps / (2.0 * sigma) * g)),
    }
}

/// Empirical accuracy of the optimal classifier after pooling. Samples
/// follow the spectral model `x̂ = ε y e_ℓ + ŵ`, `ŵ[j] ~ CN(0, σ²)` for
/// `j ≠ ℓ`, are pooled as `ẑ = A(m̂ ⊙ x̂)`, and are classified by the sign
/// of `Re(conj(m̂[ℓ]) ẑ[ℓ mod M])`.
#[allow(clippy::too_many_arguments)]
pub fn mc_bayes_accuracy(
    m_hat: &[Complex<f64>],
    l: usize,
    eps: f64,
    sigma: f64,
    s: usize,
    d: usize,
    n: usize,
    seed: u64,
) -> Result<f64> {
    if n < 1000 {
        return Err(invalid(format!("Monte-Carlo sample count {n} < 1000")));
    }
    let op = AliasingOperator::new(d, s)?;
    if m_hat.len() != d || l >= d {
        return Err(invalid("prefilter length or index inconsistent with D"));
    }
    let base = Rng::new(seed, 0x7e57);
    let inv = 1.0 / (s as f64).sqrt();
    let comp = sigma / std::f64::consts::SQRT_2;
    let bin = l % op.m;
    let ml = m_hat[l];
    let correct: usize = chunked(n, |range| {
        let mut hits = 0usize;
        let mut xh = vec![Complex::new(0.0, 0.0); d];
        for i in range {
            let mut r = base.derive(i as u64);
            let y = r.sign();
            for (j, v) in xh.iter_mut().enumerate() {
                let w = Complex::new(comp * r.normal(), comp * r.normal());
                *v = if j == l { Complex::new(eps * y, 0.0) } else { w };
            }
            // pooled spectrum, all bins
            let z: Vec<Complex<f64>> = (0..op.m)
                .map(|t| {
                    let mut acc = Complex::new(0.0, 0.0);
                    for k in 0..s {
                        let j = k * op.m + t;
                        acc += m_hat[j] * xh[j];
                    }
                    acc * inv
                })
                .collect();
            let stat = (ml.conj() * z[bin]).re;
            let pred = if stat > 0.0 { 1.0 } else if stat < 0.0 { -1.0 } else if r.sign() > 0.0 { 1.0 } else { -1.0 };
            if pred == y {
                hits += 1;
            }
        }
        hits
    })
    .into_iter()
    .sum();
    Ok(correct as f64 / n as f64)
}

/// Runs `f` over fixed chunks of `0..n` in parallel; results in chunk order.
fn chunked<T: Send>(n: usize, f: impl Fn(std::ops::Range<usize>) -> T + Sync) -> Vec<T> {
    let chunks = n.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|c| f(c * CHUNK..((c + 1) * CHUNK).min(n)))
        .collect()
}

/// Pairwise (tree) sum of equally sized vectors, fixed order.
fn tree_sum(mut parts: Vec<Vec<f64>>) -> Vec<f64> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().unwrap_or_default()
}

/// Expected loss Hessian split into its signal and noise parts.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianDecomposition {
    pub signal: DMatrix<f64>,
    pub noise: DMatrix<f64>,
}

impl HessianDecomposition {
    pub fn total(&self) -> DMatrix<f64> {
        &self.signal + &self.noise
    }
}

/// `H_φ = 2ε² m²[ℓ] σ_θ² diag(e_ℓ) + 2σ² σ_θ² diag(m²)`.
pub fn expected_hessian_phi(m: &[f64], l: usize, eps: f64, sigma: f64, sigma_theta: f64) -> HessianDecomposition {
    let d = m.len();
    let mut signal = DMatrix::zeros(d, d);
    signal[(l, l)] = 2.0 * eps * eps * m[l] * m[l] * sigma_theta * sigma_theta;
    let noise = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        d,
        m.iter().map(|v| 2.0 * sigma * sigma * sigma_theta * sigma_theta * v * v),
    ));
    HessianDecomposition { signal, noise }
}

/// `H_θ = 2ε² m²[ℓ] σ_φ² A diag(e_ℓ) Aᵀ + 2σ² σ_φ² A diag(m²) Aᵀ` (both `M × M`).
pub fn expected_hessian_theta(
    m: &[f64],
    l: usize,
    eps: f64,
    sigma: f64,
    sigma_phi: f64,
    s: usize,
) -> Result<HessianDecomposition> {
    let op = AliasingOperator::new(m.len(), s)?;
    let a = op.matrix();
    let mut el = DMatrix::zeros(op.d, op.d);
    el[(l, l)] = 1.0;
    let m2 = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(op.d, m.iter().map(|v| v * v)));
    let sp2 = sigma_phi * sigma_phi;
    Ok(HessianDecomposition {
        signal: &a * el * a.transpose() * (2.0 * eps * eps * m[l] * m[l] * sp2),
        noise: &a * m2 * a.transpose() * (2.0 * sigma * sigma * sp2),
    })
}

/// `ζ(ℓ) = ε² m²[ℓ] / (σ² max m²)`.
pub fn conditioning_ratio(m: &[f64], l: usize, eps: f64, sigma: f64) -> Result<f64> {
    let max = m.iter().fold(0.0f64, |a, v| a.max(v * v));
    if max == 0.0 {
        return Err(invalid("prefilter m must be nonzero"));
    }
    Ok(eps * eps * m[l] * m[l] / (sigma * sigma * max))
}

/// Symmetric PSD matrix with its descending eigen-decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceResult {
    pub matrix: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    /// Eigenvectors, same order as `eigenvalues`.
    pub eigenvectors: Vec<Vec<f64>>,
    /// Entrywise standard errors for Monte-Carlo estimates.
    pub std_error: Option<DMatrix<f64>>,
}

impl CovarianceResult {
    pub fn from_matrix(matrix: DMatrix<f64>) -> Self {
        let n = matrix.nrows();
        let sym = (&matrix + matrix.transpose()) * 0.5;
        let (eigenvectors, eigenvalues) = sym_eigen_desc(sym.clone(), n);
        Self {
            matrix: sym,
            eigenvalues,
            eigenvectors,
            std_error: None,
        }
    }

    /// `λ_max / λ_min`.
    pub fn spread(&self) -> f64 {
        self.eigenvalues[0] / self.eigenvalues[self.eigenvalues.len() - 1]
    }

    pub fn to_json(&self) -> Value {
        json!({
            "matrix": rows(&self.matrix),
            "eigenvalues": self.eigenvalues,
            "std_error": self.std_error.as_ref().map(rows),
        })
    }
}

pub fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

fn diag(values: impl Iterator<Item = f64>, n: usize) -> DMatrix<f64> {
    DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(n, values))
}

/// `σ_φ² σ_θ² diag(m²)`.
pub fn pooling_grad_covariance(m: &[f64], sigma_theta: f64, sigma_phi: f64, _s: usize) -> CovarianceResult {
    let c = sigma_phi.powi(2) * sigma_theta.powi(2);
    CovarianceResult::from_matrix(diag(m.iter().map(|v| c * v * v), m.len()))
}

/// `(σ_θ² + σ_φ²/S) diag(m²)`.
pub fn pooling_mixed_gram(m: &[f64], sigma_theta: f64, sigma_phi: f64, s: usize) -> CovarianceResult {
    let c = sigma_theta.powi(2) + sigma_phi.powi(2) / s as f64;
    CovarianceResult::from_matrix(diag(m.iter().map(|v| c * v * v), m.len()))
}

/// `σ_θ² I`.
pub fn logistic_covariance(sigma_theta: f64, d: usize) -> CovarianceResult {
    CovarianceResult::from_matrix(DMatrix::identity(d, d) * sigma_theta.powi(2))
}

/// `(D/2) σ_θ² σ_Φ² I` for a hidden layer of width `D`.
pub fn single_hidden_covariance(sigma_theta: f64, sigma_hidden: f64, d: usize) -> CovarianceResult {
    CovarianceResult::from_matrix(DMatrix::identity(d, d) * (d as f64 / 2.0 * (sigma_theta * sigma_hidden).powi(2)))
}

/// `Ξ(x)`: `E[ρ'(φ_i x_i) φ_i ρ'(φ_j x_j) φ_j]` with `ρ'(u) = 1_{u ≥ 0}`.
pub fn xi_matrix(x: &[f64], sigma_phi: f64) -> DMatrix<f64> {
    let d = x.len();
    let sp2 = sigma_phi * sigma_phi;
    // E[φ 1{φx ≥ 0}] = sign(x) σ/√(2π), zero at x = 0
    let first: Vec<f64> = x.iter().map(|&v| v.signum() * if v == 0.0 { 0.0 } else { sigma_phi / (2.0 * PI).sqrt() }).collect();
    DMatrix::from_fn(d, d, |i, j| {
        if i != j {
            first[i] * first[j]
        } else if x[i] == 0.0 {
            sp2
        } else {
            sp2 / 2.0
        }
    })
}

/// `σ_θ² (AᵀA ⊙ mmᵀ ⊙ Ξ(x))`.
pub fn nonlinear_pooling_covariance(x: &[f64], m: &[f64], sigma_theta: f64, sigma_phi: f64, s: usize) -> Result<CovarianceResult> {
    let op = AliasingOperator::new(m.len(), s)?;
    if x.len() != op.d {
        return Err(invalid("x and m lengths differ"));
    }
    let a = op.matrix();
    let ata = a.transpose() * a;
    let xi = xi_matrix(x, sigma_phi);
    let st2 = sigma_theta * sigma_theta;
    let cov = DMatrix::from_fn(op.d, op.d, |i, j| st2 * ata[(i, j)] * m[i] * m[j] * xi[(i, j)]);
    Ok(CovarianceResult::from_matrix(cov))
}

/// `min(1, vᵀ C v / η)`.
pub fn markov_volume_bound(cov: &CovarianceResult, v: &[f64], eta: f64) -> Result<f64> {
    if !(eta > 0.0) {
        return Err(invalid("η must be > 0"));
    }
    if (tensor::norm(v) - 1.0).abs() > 1e-8 {
        return Err(invalid("v must be unit norm"));
    }
    let cv = &cov.matrix * nalgebra::DVector::from_column_slice(v);
    Ok((tensor::dot(v, cv.as_slice()) / eta).min(1.0))
}

fn check_t(t: usize) -> Result<()> {
    if t < 1000 {
        return Err(invalid(format!("Monte-Carlo draw count {t} < 1000")));
    }
    Ok(())
}

/// Second moment of a per-draw vector statistic with entrywise standard
/// errors. `stat(t)` must be deterministic in `t`.
fn mc_second_moment(n: usize, t: usize, stat: impl Fn(usize) -> Vec<f64> + Sync) -> (DMatrix<f64>, DMatrix<f64>) {
    let parts = chunked(t, |range| {
        let mut acc = vec![0.0; 2 * n * n];
        for i in range {
            let g = stat(i);
            for a in 0..n {
                let ga = g[a];
                let row = &mut acc[a * n..(a + 1) * n];
                for (r, &gb) in row.iter_mut().zip(&g) {
                    *r += ga * gb;
                }
            }
            for a in 0..n {
                for b in 0..n {
                    let p = g[a] * g[b];
                    acc[n * n + a * n + b] += p * p;
                }
            }
        }
        acc
    });
    let acc = tree_sum(parts);
    let tf = t as f64;
    let mean = DMatrix::from_row_slice(n, n, &acc[..n * n]) / tf;
    let sq = DMatrix::from_row_slice(n, n, &acc[n * n..]) / tf;
    let se = DMatrix::from_fn(n, n, |i, j| ((sq[(i, j)] - mean[(i, j)].powi(2)).max(0.0) / (tf - 1.0)).sqrt());
    (mean, se)
}

/// `(1/T) Σ ∇_x f ∇_x fᵀ` over `T` init draws at `x` (exact gradients).
pub fn mc_grad_covariance(model: &Model, x: &[f64], t: usize, seed: u64) -> Result<CovarianceResult> {
    check_t(t)?;
    let d = model.net().input_len();
    model.net().check(model.n_params(), x.len())?;
    let (mean, se) = mc_second_moment(d, t, |i| {
        let p = draw_params(model, seed, i);
        model.grad_input(&p, x).expect("checked shapes")
    });
    let mut out = CovarianceResult::from_matrix(mean);
    out.std_error = Some(se);
    Ok(out)
}

/// `(1/T) Σ J_tᵀ J_t` for the exact mixed derivative `J = ∇²_{θ,x} f`,
/// assembled column by column with forward-over-reverse products.
pub fn mc_mixed_gram(model: &Model, x: &[f64], t: usize, seed: u64) -> Result<CovarianceResult> {
    check_t(t)?;
    let d = model.net().input_len();
    model.net().check(model.n_params(), x.len())?;
    let parts = chunked(t, |range| {
        let mut acc = vec![0.0; d * d];
        for i in range {
            let p = draw_params(model, seed, i);
            let cols: Vec<Vec<f64>> = (0..d)
                .map(|j| {
                    let mut e = vec![0.0; d];
                    e[j] = 1.0;
                    model.net().mixed_jvp(p.values(), x, &e).expect("checked shapes")
                })
                .collect();
            for a in 0..d {
                for b in 0..d {
                    acc[a * d + b] += tensor::dot(&cols[a], &cols[b]);
                }
            }
        }
        acc
    });
    let acc = tree_sum(parts);
    Ok(CovarianceResult::from_matrix(DMatrix::from_row_slice(d, d, &acc) / t as f64))
}

/// Monte-Carlo parameter Hessian of the quadratic loss `(y − f)²` for the
/// linear pooling model, averaged over init draws and data
/// `x = ε y e_ℓ + N(0, σ² I)`. Each draw's Hessian is a central difference
/// of the loss gradient. Returns `(H_φ, H_θ)`.
#[allow(clippy::too_many_arguments)]
pub fn mc_param_hessian(
    m: &[f64],
    s: usize,
    l: usize,
    eps: f64,
    sigma: f64,
    sigma_theta: f64,
    sigma_phi: f64,
    t: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_t(t)?;
    let d = m.len();
    let spec = ModelSpec::linear_pooling(m.to_vec(), s).with_init(crate::models::InitConfig {
        sigma_theta,
        sigma_phi,
        sigma_hidden: 1.0,
    });
    let model = Model::new(spec)?;
    let np = model.n_params();
    let net = model.net().clone();
    let h = 1e-3;
    let loss_grad = |p: &[f64], x: &[f64], y: f64| -> Vec<f64> {
        let f = net.forward(p, x)[0];
        let g = net.grad_params(p, x).expect("checked shapes");
        g.into_iter().map(|v| -2.0 * (y - f) * v).collect()
    };
    let data_base = Rng::new(seed, 0xda7a);
    let parts = chunked(t, |range| {
        let mut acc = vec![0.0; np * np];
        for i in range {
            let p = draw_params(&model, seed, i);
            let mut r = data_base.derive(i as u64);
            let y = r.sign();
            let x: Vec<f64> = (0..d)
                .map(|j| sigma * r.normal() + if j == l { eps * y } else { 0.0 })
                .collect();
            let mut pv = p.values().to_vec();
            for c in 0..np {
                let orig = pv[c];
                pv[c] = orig + h;
                let gp = loss_grad(&pv, &x, y);
                pv[c] = orig - h;
                let gm = loss_grad(&pv, &x, y);
                pv[c] = orig;
                for r_ in 0..np {
                    acc[r_ * np + c] += (gp[r_] - gm[r_]) / (2.0 * h);
                }
            }
        }
        acc
    });
    let full = DMatrix::from_row_slice(np, np, &tree_sum(parts)) / t as f64;
    let full = (&full + full.transpose()) * 0.5;
    let h_phi = full.view((0, 0), (d, d)).into_owned();
    let h_theta = full.view((d, d), (np - d, np - d)).into_owned();
    Ok((h_phi, h_theta))
}

/// Fraction of init draws with `(vᵀ∇_x f(x))² ≥ η`.
pub fn mc_dipole_exceedance(model: &Model, x: &[f64], v: &[f64], eta: f64, t: usize, seed: u64) -> Result<f64> {
    check_t(t)?;
    let hits: usize = chunked(t, |range| {
        range
            .filter(|&i| {
                let p = draw_params(model, seed, i);
                let g = model.grad_input(&p, x).expect("checked shapes");
                tensor::dot(v, &g).powi(2) >= eta
            })
            .count()
    })
    .into_iter()
    .sum();
    Ok(hits as f64 / t as f64)
}

/// Unit-trace normalization.
pub fn unit_trace(m: &DMatrix<f64>) -> DMatrix<f64> {
    m / m.trace()
}

/// `max |Â − B̂| / max |Â|` after unit-trace normalization of both.
pub fn normalized_max_error(analytic: &DMatrix<f64>, estimate: &DMatrix<f64>) -> f64 {
    let a = unit_trace(analytic);
    let b = unit_trace(estimate);
    (&a - &b).amax() / a.amax()
}

/// Largest entrywise relative error after unit-trace normalization. Entries
/// that are structurally zero in `analytic` (below `1e-12` of its largest
/// entry) are measured against its largest entry.
pub fn normalized_entrywise_error(analytic: &DMatrix<f64>, estimate: &DMatrix<f64>) -> f64 {
    let a = unit_trace(analytic);
    let b = unit_trace(estimate);
    let scale = a.amax();
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| if x.abs() > 1e-12 * scale { (x - y).abs() / x.abs() } else { y.abs() / scale })
        .fold(0.0, f64::max)
}

/// One oracle comparison, as emitted in JSON reports.
#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub quantity: String,
    pub closed_form: Value,
    pub mc_estimate: Value,
    pub standard_error: Value,
    pub error: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub seed: u64,
    #[serde(rename = "T")]
    pub t: usize,
}

pub const SUITES: [&str; 4] = ["pooling-accuracy", "pooling-hessian", "covariance", "markov"];

/// Bayes-accuracy grid: `S = 4, D = 128`, boxcar, `ε = 1, σ = 3`, 16 indices.
pub fn pooling_accuracy_suite(seed: u64, n: usize) -> Result<Vec<OracleReport>> {
    let (s, d, eps, sigma) = (4, 128, 1.0, 3.0);
    let m_hat = boxcar_prefilter(d, s);
    let mag = magnitudes(&m_hat);
    pooling_accuracy_grid()
        .into_iter()
        .map(|l| {
            let cf = bayes_accuracy_after_pooling(&mag, l, eps, sigma, s, d)?;
            let mc = mc_bayes_accuracy(&m_hat, l, eps, sigma, s, d, n, seed.wrapping_add(l as u64))?;
            let se = (mc * (1.0 - mc) / n as f64).sqrt();
            let err = (cf - mc).abs();
            Ok(OracleReport {
                quantity: format!("bayes_accuracy[l={l}]"),
                closed_form: json!(cf),
                mc_estimate: json!(mc),
                standard_error: json!(se),
                error: err,
                tolerance: 0.005,
                pass: err <= 0.005,
                seed,
                t: n,
            })
        })
        .collect()
}

/// Indices `ℓ` of the Bayes-accuracy grid: 16 evenly spaced points of `0..128`,
/// offset by 1 to avoid the self-aliasing bins `2ℓ ≡ 0 (mod M)`.
pub fn pooling_accuracy_grid() -> Vec<usize> {
    (0..16).map(|i| i * 8 + 1).collect()
}

/// Pooling-Hessian check for one `ℓ`: normalized `H_φ` comparison and spike location.
#[allow(clippy::too_many_arguments)]
pub fn pooling_hessian_report(m: &[f64], s: usize, l: usize, eps: f64, sigma: f64, t: usize, seed: u64) -> Result<(OracleReport, OracleReport, usize)> {
    let (st, sp) = (1.0, 1.0);
    let (mc_phi, mc_theta) = mc_param_hessian(m, s, l, eps, sigma, st, sp, t, seed)?;
    let an_phi = expected_hessian_phi(m, l, eps, sigma, st);
    let an_theta = expected_hessian_theta(m, l, eps, sigma, sp, s)?;
    let e_phi = normalized_entrywise_error(&an_phi.total(), &mc_phi);
    let e_theta = normalized_entrywise_error(&an_theta.total(), &mc_theta);
    // spike: largest excess of the diagonal over the fitted noise profile
    let noise = an_phi.noise.diagonal();
    let scale = mc_phi.trace() / an_phi.total().trace();
    let spike = (0..m.len())
        .filter(|&i| noise[i] > 0.0)
        .max_by(|&a, &b| {
            let ra = mc_phi[(a, a)] / (scale * noise[a]);
            let rb = mc_phi[(b, b)] / (scale * noise[b]);
            ra.total_cmp(&rb)
        })
        .unwrap_or(0);
    let rep = |q: &str, an: &DMatrix<f64>, mc: &DMatrix<f64>, e: f64| OracleReport {
        quantity: q.into(),
        closed_form: json!(rows(an)),
        mc_estimate: json!(rows(mc)),
        standard_error: json!({ "global_scale_mc_over_closed_form": mc.trace() / an.trace() }),
        error: e,
        tolerance: 0.05,
        pass: e <= 0.05,
        seed,
        t,
    };
    Ok((
        rep(&format!("hessian_phi[l={l}]"), &an_phi.total(), &mc_phi, e_phi),
        rep(&format!("hessian_theta[l={l}]"), &an_theta.total(), &mc_theta, e_theta),
        spike,
    ))
}

fn cov_report(q: &str, an: &CovarianceResult, mc: &CovarianceResult, err: f64, tol: f64, seed: u64, t: usize) -> OracleReport {
    OracleReport {
        quantity: q.into(),
        closed_form: an.to_json(),
        mc_estimate: mc.to_json(),
        standard_error: json!(mc.std_error.as_ref().map(rows)),
        error: err,
        tolerance: tol,
        pass: err <= tol,
        seed,
        t,
    }
}

/// Fixed test input with entries bounded away from zero.
pub fn nonzero_probe(d: usize, seed: u64) -> Vec<f64> {
    let mut r = Rng::new(seed, 0x9e0b);
    (0..d)
        .map(|_| {
            let v = r.normal();
            v.signum() * (0.25 + v.abs())
        })
        .collect()
}

/// Covariance examples: linear pooling, logistic, single hidden layer,
/// nonlinear pooling, mixed Gram.
pub fn covariance_suite(seed: u64, t: usize) -> Result<Vec<OracleReport>> {
    let (d, s) = (16, 4);
    let m = magnitudes(&boxcar_prefilter(d, s));
    let mut out = Vec::new();

    let lin = Model::new(ModelSpec::linear_pooling(m.clone(), s))?;
    let x = nonzero_probe(d, seed);
    let an = pooling_grad_covariance(&m, 1.0, 1.0, s);
    let mc = mc_grad_covariance(&lin, &x, t, seed)?;
    out.push(cov_report("linear_pooling_grad_cov", &an, &mc, normalized_max_error(&an.matrix, &mc.matrix), 0.02, seed, t));

    let an = pooling_mixed_gram(&m, 1.0, 1.0, s);
    let mc = mc_mixed_gram(&lin, &x, t.min(20_000), seed)?;
    out.push(cov_report("linear_pooling_mixed_gram", &an, &mc, normalized_max_error(&an.matrix, &mc.matrix), 0.02, seed, t.min(20_000)));

    let logi = Model::new(ModelSpec::logistic(d))?;
    let mc = mc_grad_covariance(&logi, &x, t, seed)?;
    let an = logistic_covariance(1.0, d);
    out.push(cov_report("logistic_isotropy_spread", &an, &mc, mc.spread(), 1.1, seed, t));

    let dh = 32;
    let hidden = Model::new(ModelSpec::single_hidden(dh, dh))?;
    let xh = nonzero_probe(dh, seed);
    let mc = mc_grad_covariance(&hidden, &xh, t, seed)?;
    let an = single_hidden_covariance(1.0, 1.0, dh);
    let scale_err = (mc.matrix.trace() / an.matrix.trace() - 1.0).abs();
    out.push(cov_report("single_hidden_d_over_2_scale", &an, &mc, scale_err, 0.03, seed, t));
    out.push(cov_report("single_hidden_isotropy_spread", &an, &mc, mc.spread(), 1.1, seed, t));

    let nl = Model::new(ModelSpec::nonlinear_pooling(m.clone(), s))?;
    let an = nonlinear_pooling_covariance(&x, &m, 1.0, 1.0, s)?;
    let mc = mc_grad_covariance(&nl, &x, t, seed)?;
    out.push(cov_report("nonlinear_pooling_xi", &an, &mc, normalized_max_error(&an.matrix, &mc.matrix), 0.03, seed, t));
    Ok(out)
}

pub fn pooling_hessian_suite(seed: u64, t: usize) -> Result<Vec<OracleReport>> {
    let (d, s) = (16, 4);
    let m = magnitudes(&boxcar_prefilter(d, s));
    let mut r = Rng::new(seed, 0x1e33);
    let support: Vec<usize> = (0..d).filter(|&i| m[i] > 1e-12).collect();
    let mut out = Vec::new();
    for k in 0..5 {
        let l = support[r.below(support.len())];
        let eps = 0.5 + r.uniform();
        let sigma = 0.5 + r.uniform();
        let (phi, theta, spike) = pooling_hessian_report(&m, s, l, eps, sigma, t, seed.wrapping_add(k))?;
        out.push(phi);
        out.push(theta);
        out.push(OracleReport {
            quantity: format!("signal_spike_index[l={l}]"),
            closed_form: json!(l),
            mc_estimate: json!(spike),
            standard_error: Value::Null,
            error: if spike == l { 0.0 } else { 1.0 },
            tolerance: 0.0,
            pass: spike == l,
            seed,
            t,
        });
    }
    Ok(out)
}

/// Markov bound vs empirical exceedance frequency for the linear pooling model.
pub fn markov_suite(seed: u64, t: usize) -> Result<Vec<OracleReport>> {
    let (d, s) = (16, 4);
    let m = magnitudes(&boxcar_prefilter(d, s));
    let model = Model::new(ModelSpec::linear_pooling(m.clone(), s))?;
    let an = pooling_grad_covariance(&m, 1.0, 1.0, s);
    let mc = mc_grad_covariance(&model, &vec![0.0; d], t, seed)?;
    let x = vec![0.0; d];
    let mut out = Vec::new();
    for (k, v) in [mc.eigenvectors[0].clone(), an.eigenvectors[3].clone()].into_iter().enumerate() {
        for eta in [0.01, 0.05, 0.2] {
            let bound = markov_volume_bound(&mc, &v, eta)?;
            let freq = mc_dipole_exceedance(&model, &x, &v, eta, t, seed.wrapping_add(k as u64))?;
            out.push(OracleReport {
                quantity: format!("markov_bound[v={k},eta={eta}]"),
                closed_form: json!(bound),
                mc_estimate: json!(freq),
                standard_error: json!((freq * (1.0 - freq) / t as f64).sqrt()),
                error: freq - bound,
                tolerance: 0.0,
                pass: freq <= bound,
                seed,
                t,
            });
        }
    }
    Ok(out)
}

pub fn run_suite(name: &str, seed: u64) -> Result<Vec<OracleReport>> {
    match name {
        "pooling-accuracy" => pooling_accuracy_suite(seed, 200_000),
        "pooling-hessian" => pooling_hessian_suite(seed, 200_000),
        "covariance" => covariance_suite(seed, 200_000),
        "markov" => markov_suite(seed, 100_000),
        "all" => {
            let mut out = Vec::new();
            for s in SUITES {
                out.extend(run_suite(s, seed)?);
            }
            Ok(out)
        }
        other => Err(invalid(format!("unknown oracle suite {other:?} (expected one of {SUITES:?} or all)"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn q_tail_values() {
        assert!((q_tail(0.0) - 0.5).abs() < 1e-15);
        assert!((q_tail(-1.7) - (1.0 - q_tail(1.7))).abs() < 1e-15);
        assert!((q_tail(1.959964) - 0.025).abs() < 1e-6);
    }

    #[test]
    fn gamma_flat_prefilter() {
        let m = vec![1.0; 12];
        for l in 0..12 {
            match gamma_snr(&m, l, 3, 12).unwrap() {
                Gamma::Finite(g) => assert!((g * g - 1.5).abs() < 1e-12),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn gamma_zero_and_degenerate() {
        let mut m = vec![1.0; 8];
        m[1] = 0.0;
        assert_eq!(gamma_snr(&m, 1, 2, 8).unwrap(), Gamma::Finite(0.0));
        assert_eq!(bayes_accuracy_after_pooling(&m, 1, 1.0, 1.0, 2, 8).unwrap(), 0.5);
        m[5] = 0.0;
        assert_eq!(gamma_snr(&m, 1, 2, 8).unwrap(), Gamma::Degenerate);
        let mut m = vec![1.0; 8];
        m[5] = 0.0;
        assert_eq!(gamma_snr(&m, 1, 2, 8).unwrap(), Gamma::Infinite);
    }

    #[test]
    fn tree_sum_is_order_fixed() {
        let parts = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        assert_eq!(tree_sum(parts), vec![9.0, 12.0]);
    }
}
