//! Neural anisotropy directions: gradient-covariance PCA and power-iteration
//! SVD of the mixed second derivative, plus the shared linear algebra.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::models::{Model, ParamSet};
use crate::rng::Rng;
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    GradCov,
    MixedSecond,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub algorithm: Algorithm,
    pub model_hash: String,
    pub samples: usize,
    pub fd_scale: f64,
    pub eval_point_hash: String,
    pub seed: u64,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Ordered orthonormal directions with their spectrum (descending).
#[derive(Debug, Clone, PartialEq)]
pub struct NadBasis {
    pub vectors: Vec<Vec<f64>>,
    pub spectrum: Vec<f64>,
    pub provenance: Provenance,
}

impl NadBasis {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    /// `D × k` matrix, one direction per column.
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim(), self.len(), |r, c| self.vectors[c][r])
    }

    /// Max deviation of the Gram matrix from identity.
    pub fn orthonormality_error(&self) -> f64 {
        let m = self.matrix();
        (m.transpose() * &m - DMatrix::identity(self.len(), self.len())).amax()
    }

    /// Stored as the `D × k` matrix with provenance and spectrum in the header.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (d, k) = (self.dim(), self.len());
        let mut data = vec![0.0; d * k];
        for (c, v) in self.vectors.iter().enumerate() {
            for (r, &x) in v.iter().enumerate() {
                data[r * k + c] = x;
            }
        }
        Tensor::new(vec![d, k], data)?.save(
            path,
            json!({ "kind": "nad-basis", "spectrum": self.spectrum, "provenance": self.provenance }),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (t, meta) = Tensor::load(path)?;
        let [d, k] = *t.shape() else {
            return Err(Error::Data {
                path: path.into(),
                message: format!("NAD basis must be a D×k matrix, got shape {:?}", t.shape()),
            });
        };
        let vectors = (0..k).map(|c| (0..d).map(|r| t.data()[r * k + c]).collect()).collect();
        Ok(Self {
            vectors,
            spectrum: serde_json::from_value(meta["spectrum"].clone())?,
            provenance: serde_json::from_value(meta["provenance"].clone())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NadConfig {
    /// Monte-Carlo draws `T`.
    pub samples: usize,
    /// Finite-difference scale `h` for input gradients (gradient covariance).
    pub fd_scale: f64,
    /// Step of the directional finite difference in the mixed-derivative
    /// operator. Must be small for piecewise-linear nets: steps that cross
    /// ReLU kinks make the operator nonlinear and fail the adjoint check.
    pub mixed_fd_scale: f64,
    /// Evaluation point; `None` is the zero input.
    pub eval_point: Option<Vec<f64>>,
    pub top_k: usize,
    pub power_budget: usize,
    pub power_tol: f64,
}

impl Default for NadConfig {
    fn default() -> Self {
        Self {
            samples: 5000,
            fd_scale: 100.0,
            mixed_fd_scale: 1e-7,
            eval_point: None,
            top_k: 16,
            power_budget: 300,
            power_tol: 1e-6,
        }
    }
}

impl NadConfig {
    fn validate(&self, d: usize) -> Result<Vec<f64>> {
        if self.samples < 2 {
            return Err(invalid("NAD sample count T must be >= 2"));
        }
        if !(self.fd_scale > 0.0) || !(self.mixed_fd_scale > 0.0) {
            return Err(invalid("finite-difference scales must be > 0"));
        }
        if self.top_k == 0 || self.top_k > d {
            return Err(invalid(format!("top_k must be in 1..={d}, got {}", self.top_k)));
        }
        match &self.eval_point {
            None => Ok(vec![0.0; d]),
            Some(x) if x.len() == d => Ok(x.clone()),
            Some(x) => Err(Error::Shape {
                context: "NAD evaluation point".into(),
                expected: vec![d],
                actual: vec![x.len()],
            }),
        }
    }
}

/// Parameter draw `t` of a NAD run; both algorithms use the same draws.
pub fn draw_params(model: &Model, seed: u64, t: usize) -> ParamSet {
    model.init_params(&mut Rng::new(seed, 0).derive(t as u64))
}

pub fn hash_values(x: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in x {
        h.update(v.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

/// Fixes the sign so the largest-magnitude entry (first on ties) is positive.
pub fn canonical_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Descending eigenpairs of a symmetric matrix with canonical signs.
pub fn sym_eigen_desc(m: DMatrix<f64>, top_k: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    order.truncate(top_k);
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = order
        .iter()
        .map(|&i| {
            let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            canonical_sign(&mut v);
            v
        })
        .collect();
    (vectors, values)
}

/// Uncentered PCA: eigen-decomposition of `(1/n) Σ s sᵀ`.
pub fn pca(samples: &[Vec<f64>], top_k: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if samples.len() < 2 {
        return Err(invalid("PCA needs at least 2 samples"));
    }
    if samples.len() < top_k {
        return Err(invalid(format!("PCA: {} samples < top_k = {top_k}", samples.len())));
    }
    let d = samples[0].len();
    if let Some(bad) = samples.iter().find(|s| s.len() != d) {
        return Err(Error::Shape {
            context: "PCA samples".into(),
            expected: vec![d],
            actual: vec![bad.len()],
        });
    }
    let flat: Vec<f64> = samples.iter().flatten().copied().collect();
    let x = DMatrix::from_column_slice(d, samples.len(), &flat);
    let m = (&x * x.transpose()) / samples.len() as f64;
    let top_k = top_k.min(d);
    Ok(sym_eigen_desc(m, top_k))
}

/// Algorithm S1: sample `T` parameter draws, finite-difference input
/// gradients at the evaluation point, uncentered PCA.
pub fn nads_gradient_covariance(model: &Model, cfg: &NadConfig, seed: u64) -> Result<NadBasis> {
    let d = model.net().input_len();
    let x = cfg.validate(d)?;
    if cfg.samples < cfg.top_k {
        return Err(invalid(format!("T = {} < top_k = {}", cfg.samples, cfg.top_k)));
    }
    let grads: Vec<Vec<f64>> = (0..cfg.samples)
        .into_par_iter()
        .map(|t| {
            let p = draw_params(model, seed, t);
            model.finite_diff_grad_input(&p, &x, cfg.fd_scale)
        })
        .collect::<Result<_>>()?;
    if grads.iter().all(|g| g.iter().all(|&v| v == 0.0)) {
        return Err(Error::Degenerate(format!(
            "all finite-difference gradients of {} are zero",
            model.spec().name()
        )));
    }
    let (vectors, spectrum) = pca(&grads, cfg.top_k)?;
    Ok(NadBasis {
        vectors,
        spectrum: spectrum.into_iter().map(|v| v.max(0.0)).collect(),
        provenance: Provenance {
            algorithm: Algorithm::GradCov,
            model_hash: model.spec().hash(),
            samples: cfg.samples,
            fd_scale: cfg.fd_scale,
            eval_point_hash: hash_values(&x),
            seed,
            warnings: vec![],
        },
    })
}

/// Matrix-free linear operator `A: R^n → R^m`.
pub trait LinearOperator: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn apply(&self, v: &[f64]) -> Vec<f64>;
    fn adjoint(&self, u: &[f64]) -> Vec<f64>;
    /// `AᵀA v`.
    fn gram(&self, v: &[f64]) -> Vec<f64> {
        self.adjoint(&self.apply(v))
    }
}

/// Dense matrix as an operator.
pub struct DenseOperator(pub DMatrix<f64>);

impl LinearOperator for DenseOperator {
    fn input_dim(&self) -> usize {
        self.0.ncols()
    }
    fn output_dim(&self) -> usize {
        self.0.nrows()
    }
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        (&self.0 * DVector::from_column_slice(v)).as_slice().to_vec()
    }
    fn adjoint(&self, u: &[f64]) -> Vec<f64> {
        (self.0.tr_mul(&DVector::from_column_slice(u))).as_slice().to_vec()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    pub singular_values: Vec<f64>,
    /// Right singular vectors, canonical signs.
    pub right: Vec<Vec<f64>>,
    /// Number of leading triplets that met the residual tolerance.
    pub converged: usize,
    pub iterations: usize,
}

impl SvdResult {
    /// `u = A v / σ` for triplet `i`.
    pub fn left(&self, op: &dyn LinearOperator, i: usize) -> Vec<f64> {
        let s = self.singular_values[i];
        op.apply(&self.right[i]).into_iter().map(|x| x / s).collect()
    }
}

/// Relative adjoint mismatch `|⟨Av,u⟩ − ⟨v,Aᵀu⟩| / (‖Av‖‖u‖ + ‖v‖‖Aᵀu‖)`
/// for one random probe pair.
pub fn adjoint_mismatch(op: &dyn LinearOperator, rng: &mut Rng) -> f64 {
    let v: Vec<f64> = (0..op.input_dim()).map(|_| rng.normal()).collect();
    let u: Vec<f64> = (0..op.output_dim()).map(|_| rng.normal()).collect();
    let av = op.apply(&v);
    let atu = op.adjoint(&u);
    let lhs = tensor::dot(&av, &u);
    let rhs = tensor::dot(&v, &atu);
    let scale = tensor::norm(&av) * tensor::norm(&u) + tensor::norm(&v) * tensor::norm(&atu);
    if scale == 0.0 {
        0.0
    } else {
        (lhs - rhs).abs() / scale
    }
}

/// Orthonormalizes the columns in order (modified Gram-Schmidt, two passes).
fn orthonormalize(cols: &mut [Vec<f64>], rng: &mut Rng) {
    for i in 0..cols.len() {
        for _ in 0..2 {
            for j in 0..i {
                let (a, b) = cols.split_at_mut(i);
                let c = tensor::dot(&b[0], &a[j]);
                for (x, &y) in b[0].iter_mut().zip(&a[j]) {
                    *x -= c * y;
                }
            }
        }
        let n = tensor::norm(&cols[i]);
        if n < 1e-300 {
            // rank deficiency: restart this column from noise
            for x in cols[i].iter_mut() {
                *x = rng.normal();
            }
            let (a, b) = cols.split_at_mut(i);
            for col in a.iter() {
                let c = tensor::dot(&b[0], col);
                for (x, &y) in b[0].iter_mut().zip(col) {
                    *x -= c * y;
                }
            }
            let n = tensor::norm(&cols[i]);
            cols[i].iter_mut().for_each(|x| *x /= n);
        } else {
            cols[i].iter_mut().for_each(|x| *x /= n);
        }
    }
}

/// Top-`k` singular triplets by block power iteration on `AᵀA` with
/// Rayleigh-Ritz extraction. Columns start from fixed random vectors drawn
/// per `(seed, index)`; orthogonalization against earlier columns deflates
/// the leading directions. Triplet `i` converges when
/// `‖AᵀA v_i − σ_i² v_i‖ ≤ tol · σ_1²`.
pub fn power_iteration_svd(
    op: &dyn LinearOperator,
    k: usize,
    budget: usize,
    tol: f64,
    seed: u64,
) -> Result<SvdResult> {
    let n = op.input_dim();
    if k == 0 || k > n {
        return Err(invalid(format!("requested {k} singular triplets of an operator with {n} columns")));
    }
    let mut check_rng = Rng::new(seed, u64::MAX);
    let mismatch = adjoint_mismatch(op, &mut check_rng);
    if mismatch > 1e-6 {
        return Err(Error::Degenerate(format!(
            "operator and adjoint are inconsistent (relative mismatch {mismatch:.3e})"
        )));
    }
    let block = (k + 4).min(n);
    let base = Rng::new(seed, 1);
    let mut cols: Vec<Vec<f64>> = (0..block)
        .map(|j| {
            let mut r = base.derive(j as u64);
            (0..n).map(|_| r.normal()).collect()
        })
        .collect();
    let mut fix_rng = Rng::new(seed, 2);
    orthonormalize(&mut cols, &mut fix_rng);

    let mut values = vec![0.0; block];
    let mut converged = 0;
    let mut iterations = 0;
    for it in 1..=budget.max(1) {
        iterations = it;
        let z: Vec<Vec<f64>> = cols.par_iter().map(|c| op.gram(c)).collect();
        // Rayleigh-Ritz on span(cols)
        let mut h = DMatrix::zeros(block, block);
        for i in 0..block {
            for j in 0..block {
                h[(i, j)] = tensor::dot(&cols[i], &z[j]);
            }
        }
        let h = (&h + h.transpose()) * 0.5;
        let (ritz, lam) = sym_eigen_desc(h, block);
        let rot = |src: &[Vec<f64>]| -> Vec<Vec<f64>> {
            ritz.iter()
                .map(|w| {
                    let mut out = vec![0.0; n];
                    for (c, &wc) in src.iter().zip(w) {
                        for (o, &x) in out.iter_mut().zip(c) {
                            *o += wc * x;
                        }
                    }
                    out
                })
                .collect()
        };
        let v = rot(&cols);
        let av = rot(&z);
        values = lam.clone();
        let top = lam[0].max(0.0);
        converged = 0;
        for i in 0..k {
            let res: f64 = av[i]
                .iter()
                .zip(&v[i])
                .map(|(a, b)| (a - lam[i] * b).powi(2))
                .sum::<f64>()
                .sqrt();
            if res <= tol * top {
                converged += 1;
            } else {
                break;
            }
        }
        if converged == k || it == budget.max(1) {
            cols = v;
            break;
        }
        cols = av;
        orthonormalize(&mut cols, &mut fix_rng);
    }
    let mut right: Vec<Vec<f64>> = cols.into_iter().take(k).collect();
    right.iter_mut().for_each(|v| canonical_sign(v));
    Ok(SvdResult {
        singular_values: values.into_iter().take(k).map(|l| l.max(0.0).sqrt()).collect(),
        right,
        converged,
        iterations,
    })
}

/// Stacked mixed-derivative operator over `T` drawn models:
/// `DVP(v) = [J_t v]_t / √T`, `ADVP([v'_t]) = Σ_t J_tᵀ v'_t / √T`, where
/// `J_t v` is the central difference of `∇_θ f` along `v` and `J_tᵀ v'` is
/// `∇_x (v'ᵀ ∇_θ f)`. Its Gram operator is the mean of `J_tᵀ J_t`.
pub struct MixedOperator<'a> {
    model: &'a Model,
    params: Vec<ParamSet>,
    x: Vec<f64>,
    h: f64,
}

impl<'a> MixedOperator<'a> {
    pub fn new(model: &'a Model, params: Vec<ParamSet>, x: Vec<f64>, h: f64) -> Self {
        Self { model, params, x, h }
    }

    fn dvp_one(&self, p: &ParamSet, v: &[f64]) -> Vec<f64> {
        let shift = |s: f64| -> Vec<f64> { self.x.iter().zip(v).map(|(a, b)| a + s * self.h * b).collect() };
        let gp = self.model.grad_params(p, &shift(1.0)).expect("validated shapes");
        let gm = self.model.grad_params(p, &shift(-1.0)).expect("validated shapes");
        let inv = 1.0 / (2.0 * self.h);
        gp.iter().zip(&gm).map(|(a, b)| (a - b) * inv).collect()
    }

    fn advp_one(&self, p: &ParamSet, vp: &[f64]) -> Vec<f64> {
        self.model
            .net()
            .mixed_vjp(p.values(), &self.x, vp)
            .expect("validated shapes")
    }

    fn t(&self) -> usize {
        self.params.len()
    }
}

fn sum_ordered(parts: Vec<Vec<f64>>, n: usize, scale: f64) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for p in parts {
        for (o, x) in out.iter_mut().zip(p) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o *= scale);
    out
}

impl LinearOperator for MixedOperator<'_> {
    fn input_dim(&self) -> usize {
        self.x.len()
    }

    fn output_dim(&self) -> usize {
        self.t() * self.model.n_params()
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let s = 1.0 / (self.t() as f64).sqrt();
        let parts: Vec<Vec<f64>> = self.params.par_iter().map(|p| self.dvp_one(p, v)).collect();
        parts.into_iter().flatten().map(|x| x * s).collect()
    }

    fn adjoint(&self, u: &[f64]) -> Vec<f64> {
        let np = self.model.n_params();
        let parts: Vec<Vec<f64>> = self
            .params
            .par_iter()
            .enumerate()
            .map(|(t, p)| self.advp_one(p, &u[t * np..(t + 1) * np]))
            .collect();
        sum_ordered(parts, self.input_dim(), 1.0 / (self.t() as f64).sqrt())
    }

    fn gram(&self, v: &[f64]) -> Vec<f64> {
        let parts: Vec<Vec<f64>> = self
            .params
            .par_iter()
            .map(|p| self.advp_one(p, &self.dvp_one(p, v)))
            .collect();
        sum_ordered(parts, self.input_dim(), 1.0 / self.t() as f64)
    }
}

/// Algorithm S2: top-`k` right singular vectors of the mixed second
/// derivative over `T` drawn models.
pub fn nads_mixed_second_derivative(model: &Model, cfg: &NadConfig, seed: u64) -> Result<NadBasis> {
    let d = model.net().input_len();
    let x = cfg.validate(d)?;
    let params: Vec<ParamSet> = (0..cfg.samples).map(|t| draw_params(model, seed, t)).collect();
    let op = MixedOperator::new(model, params, x.clone(), cfg.mixed_fd_scale);
    let svd = power_iteration_svd(&op, cfg.top_k, cfg.power_budget, cfg.power_tol, seed)?;
    if svd.singular_values.first().is_some_and(|&s| s == 0.0) {
        return Err(Error::Degenerate(format!(
            "mixed second derivative of {} vanishes at the evaluation point",
            model.spec().name()
        )));
    }
    let mut warnings = vec![];
    if svd.converged < cfg.top_k {
        warnings.push(format!(
            "power iteration converged for {} of {} directions after {} iterations",
            svd.converged, cfg.top_k, svd.iterations
        ));
    }
    Ok(NadBasis {
        vectors: svd.right,
        spectrum: svd.singular_values,
        provenance: Provenance {
            algorithm: Algorithm::MixedSecond,
            model_hash: model.spec().hash(),
            samples: cfg.samples,
            fd_scale: cfg.mixed_fd_scale,
            eval_point_hash: hash_values(&x),
            seed,
            warnings,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Alignment {
    pub scores: Vec<f64>,
    pub mean: f64,
}

/// `|⟨u_i^a, u_i^b⟩|` for the first `k` indices and their mean.
pub fn basis_alignment(a: &NadBasis, b: &NadBasis, k: usize) -> Result<Alignment> {
    if a.dim() != b.dim() {
        return Err(Error::Shape {
            context: "basis alignment".into(),
            expected: vec![a.dim()],
            actual: vec![b.dim()],
        });
    }
    let k = k.min(a.len()).min(b.len());
    let scores: Vec<f64> = (0..k).map(|i| tensor::dot(&a.vectors[i], &b.vectors[i]).abs()).collect();
    let mean = scores.iter().sum::<f64>() / k.max(1) as f64;
    Ok(Alignment { scores, mean })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DipoleConfidence {
    /// `(f(x) − f(x + v))²`.
    pub exact: f64,
    /// `(vᵀ ∇_x f(x))²`.
    pub approx: f64,
}

pub fn dipole_confidence(model: &Model, params: &ParamSet, x: &[f64], v: &[f64]) -> Result<DipoleConfidence> {
    if v.iter().all(|&a| a == 0.0) {
        return Err(invalid("dipole displacement must be nonzero"));
    }
    let far: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + b).collect();
    let exact = (model.forward(params, x)? - model.forward(params, &far)?).powi(2);
    let approx = tensor::dot(v, &model.grad_input(params, x)?).powi(2);
    Ok(DipoleConfidence { exact, approx })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_convention() {
        let mut v = vec![0.1, -0.9, 0.3];
        canonical_sign(&mut v);
        assert_eq!(v, vec![-0.1, 0.9, -0.3]);
    }

    #[test]
    fn diagonal_operator_singular_values() {
        let op = DenseOperator(DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, 1.0])));
        let svd = power_iteration_svd(&op, 3, 500, 1e-12, 1).unwrap();
        for (s, want) in svd.singular_values.iter().zip([3.0, 2.0, 1.0]) {
            assert!((s - want).abs() < 1e-8, "{s}");
        }
    }

    #[test]
    fn inconsistent_adjoint_is_rejected() {
        struct Bad;
        impl LinearOperator for Bad {
            fn input_dim(&self) -> usize {
                3
            }
            fn output_dim(&self) -> usize {
                3
            }
            fn apply(&self, v: &[f64]) -> Vec<f64> {
                vec![v[0], v[1] * 2.0, 0.0]
            }
            fn adjoint(&self, u: &[f64]) -> Vec<f64> {
                vec![u[0], u[1], u[2]]
            }
        }
        assert!(power_iteration_svd(&Bad, 1, 10, 1e-6, 0).is_err());
    }
}
