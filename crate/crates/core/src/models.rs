//! The architecture zoo.
//!
//! Every model is a [`Network`] over the fixed layer vocabulary. Parameters
//! are flattened in layer order, and within a layer as weights then bias.
//! The toy pooling models act directly on length-`D` coefficient vectors.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::autodiff::{Layer, Network};
use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const SPEC_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Avg,
    Max,
    Subsample,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Variant {
    LogisticRegression,
    SingleHiddenRelu {
        width: usize,
    },
    Mlp {
        widths: Vec<usize>,
        #[serde(default = "one")]
        outputs: usize,
    },
    LinearPooling {
        m: Vec<f64>,
        s: usize,
    },
    NonlinearPooling {
        m: Vec<f64>,
        s: usize,
    },
    MiniCnn {
        channels: Vec<usize>,
        pooling: Pooling,
        #[serde(default = "two")]
        subsample: usize,
        #[serde(default = "one")]
        outputs: usize,
    },
}

fn one() -> usize {
    1
}

fn two() -> usize {
    2
}

fn unit() -> f64 {
    1.0
}

/// Gaussian init scales. `sigma_theta` is the last (readout) layer,
/// `sigma_phi` the pooling prefilter weights, `sigma_hidden` the hidden
/// layer of the single-hidden-layer net. MLP and MiniCNN ignore these and
/// use `N(0, 1/fan_in)` weights with zero biases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    #[serde(default = "unit")]
    pub sigma_theta: f64,
    #[serde(default = "unit")]
    pub sigma_phi: f64,
    #[serde(default = "unit")]
    pub sigma_hidden: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            sigma_theta: 1.0,
            sigma_phi: 1.0,
            sigma_hidden: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default = "spec_version")]
    pub version: u32,
    pub variant: Variant,
    pub input_shape: Vec<usize>,
    #[serde(default)]
    pub init: InitConfig,
}

fn spec_version() -> u32 {
    SPEC_VERSION
}

impl ModelSpec {
    pub fn new(variant: Variant, input_shape: Vec<usize>) -> Self {
        Self {
            version: SPEC_VERSION,
            variant,
            input_shape,
            init: InitConfig::default(),
        }
    }

    pub fn with_init(mut self, init: InitConfig) -> Self {
        self.init = init;
        self
    }

    pub fn logistic(d: usize) -> Self {
        Self::new(Variant::LogisticRegression, vec![d])
    }

    pub fn single_hidden(d: usize, width: usize) -> Self {
        Self::new(Variant::SingleHiddenRelu { width }, vec![d])
    }

    pub fn linear_pooling(m: Vec<f64>, s: usize) -> Self {
        let d = m.len();
        Self::new(Variant::LinearPooling { m, s }, vec![d])
    }

    pub fn nonlinear_pooling(m: Vec<f64>, s: usize) -> Self {
        let d = m.len();
        Self::new(Variant::NonlinearPooling { m, s }, vec![d])
    }

    /// Reference MiniCNN: two 3×3 conv(8, 16) + ReLU + pool(2) stages and an
    /// affine readout.
    pub fn mini_cnn(channels_in: usize, h: usize, w: usize, pooling: Pooling, outputs: usize) -> Self {
        Self::new(
            Variant::MiniCnn {
                channels: vec![8, 16],
                pooling,
                subsample: 2,
                outputs,
            },
            vec![channels_in, h, w],
        )
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_str(text)?;
        if spec.version != SPEC_VERSION {
            return Err(Error::Format(format!(
                "model spec version {} (supported: {SPEC_VERSION})",
                spec.version
            )));
        }
        spec.network()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(crate::error::io_err(path))?;
        Self::from_json(&text).map_err(|e| Error::Data {
            path: path.into(),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    /// Short content hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }

    /// Hash of the parameter layout (layer kinds, shapes, block sizes).
    pub fn layout_hash(&self) -> Result<String> {
        let net = self.network()?;
        let desc: Vec<_> = net
            .layers()
            .iter()
            .map(|l| json!([l.name(), l.in_len(), l.out_len(), l.n_params()]))
            .collect();
        let bytes = serde_json::to_vec(&desc)?;
        Ok(hex::encode(&Sha256::digest(&bytes)[..8]))
    }

    /// Lowers the spec to a layer stack.
    pub fn network(&self) -> Result<Network> {
        let d = self.input_len();
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(invalid(format!("input shape {:?} must be non-empty with positive extents", self.input_shape)));
        }
        let layers = match &self.variant {
            Variant::LogisticRegression => vec![Layer::Affine { nin: d, nout: 1, bias: false }],
            Variant::SingleHiddenRelu { width } => {
                positive("width", *width)?;
                vec![
                    Layer::Affine { nin: d, nout: *width, bias: false },
                    Layer::Relu { n: *width },
                    Layer::Affine { nin: *width, nout: 1, bias: false },
                ]
            }
            Variant::Mlp { widths, outputs } => {
                positive("outputs", *outputs)?;
                let mut layers = Vec::new();
                let mut nin = d;
                for &wd in widths {
                    positive("layer width", wd)?;
                    layers.push(Layer::Affine { nin, nout: wd, bias: true });
                    layers.push(Layer::Relu { n: wd });
                    nin = wd;
                }
                layers.push(Layer::Affine { nin, nout: *outputs, bias: true });
                layers
            }
            Variant::LinearPooling { m, s } | Variant::NonlinearPooling { m, s } => {
                let op = AliasingOperator::new(d, *s)?;
                if m.len() != d {
                    return Err(Error::Shape {
                        context: "prefilter m".into(),
                        expected: vec![d],
                        actual: vec![m.len()],
                    });
                }
                let mut layers = vec![Layer::ParamScale { n: d }];
                if matches!(self.variant, Variant::NonlinearPooling { .. }) {
                    layers.push(Layer::Relu { n: d });
                }
                layers.push(Layer::FixedScale { m: m.clone() });
                layers.push(Layer::Aliasing { d, s: *s });
                layers.push(Layer::Affine { nin: op.m, nout: 1, bias: false });
                layers
            }
            Variant::MiniCnn {
                channels,
                pooling,
                subsample,
                outputs,
            } => {
                let [c0, h0, w0] = self.input_shape[..] else {
                    return Err(invalid("MiniCNN input shape must be (channels, height, width)"));
                };
                positive("outputs", *outputs)?;
                positive("subsample", *subsample)?;
                if channels.is_empty() {
                    return Err(invalid("MiniCNN needs at least one conv stage"));
                }
                let (mut c, mut h, mut w) = (c0, h0, w0);
                let mut layers = Vec::new();
                for &cout in channels {
                    positive("conv channels", cout)?;
                    layers.push(Layer::Conv2d { cin: c, cout, h, w, k: 3 });
                    layers.push(Layer::Relu { n: cout * h * w });
                    c = cout;
                    let s = *subsample;
                    let pool = match pooling {
                        Pooling::Avg => Some(Layer::AvgPool { c, h, w, s }),
                        Pooling::Max => Some(Layer::MaxPool { c, h, w, s }),
                        Pooling::Subsample => Some(Layer::Subsample { c, h, w, s }),
                        Pooling::None => None,
                    };
                    if let Some(p) = pool {
                        if h % s != 0 || w % s != 0 {
                            return Err(invalid(format!("feature map {h}x{w} not divisible by subsample {s}")));
                        }
                        layers.push(p);
                        h /= s;
                        w /= s;
                    }
                }
                layers.push(Layer::Affine { nin: c * h * w, nout: *outputs, bias: true });
                layers
            }
        };
        Network::new(layers, self.input_shape.clone())
    }

    pub fn outputs(&self) -> usize {
        match &self.variant {
            Variant::Mlp { outputs, .. } | Variant::MiniCnn { outputs, .. } => *outputs,
            _ => 1,
        }
    }

    /// Same MiniCNN with every pooling site replaced by identity; the readout
    /// is re-dimensioned to the full-resolution feature map.
    pub fn strip_pooling(&self) -> Result<ModelSpec> {
        match &self.variant {
            Variant::MiniCnn {
                channels,
                subsample,
                outputs,
                ..
            } => Ok(ModelSpec {
                variant: Variant::MiniCnn {
                    channels: channels.clone(),
                    pooling: Pooling::None,
                    subsample: *subsample,
                    outputs: *outputs,
                },
                ..self.clone()
            }),
            other => Err(invalid(format!(
                "strip_pooling applies to MiniCNN only, got {}",
                variant_name(other)
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        variant_name(&self.variant)
    }
}

fn variant_name(v: &Variant) -> &'static str {
    match v {
        Variant::LogisticRegression => "logistic-regression",
        Variant::SingleHiddenRelu { .. } => "single-hidden-relu",
        Variant::Mlp { .. } => "mlp",
        Variant::LinearPooling { .. } => "linear-pooling",
        Variant::NonlinearPooling { .. } => "nonlinear-pooling",
        Variant::MiniCnn { .. } => "mini-cnn",
    }
}

fn positive(what: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(invalid(format!("{what} must be >= 1")));
    }
    Ok(())
}

/// A spec together with its lowered network.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    net: Network,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        let net = spec.network()?;
        Ok(Self { spec, net })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn net(&self) -> &Network {
        &self.net
    }

    pub fn n_params(&self) -> usize {
        self.net.n_params()
    }

    pub fn forward(&self, params: &ParamSet, x: &[f64]) -> Result<f64> {
        self.net.output(params.values(), x)
    }

    pub fn grad_input(&self, params: &ParamSet, x: &[f64]) -> Result<Vec<f64>> {
        self.net.grad_input(params.values(), x)
    }

    pub fn grad_params(&self, params: &ParamSet, x: &[f64]) -> Result<Vec<f64>> {
        self.net.grad_params(params.values(), x)
    }

    pub fn finite_diff_grad_input(&self, params: &ParamSet, x: &[f64], h: f64) -> Result<Vec<f64>> {
        if !(h > 0.0) {
            return Err(invalid(format!("finite-difference step must be > 0, got {h}")));
        }
        self.net.fd_grad_input(params.values(), x, h)
    }

    /// Draws a parameter vector from the spec's init distribution.
    pub fn init_params(&self, rng: &mut Rng) -> ParamSet {
        let init = self.spec.init;
        let mut out = vec![0.0; self.n_params()];
        let layers = self.net.layers();
        let last_affine = layers.iter().rposition(|l| matches!(l, Layer::Affine { .. }));
        for (i, layer) in layers.iter().enumerate() {
            let block = &mut out[self.net.param_range(i)];
            let fan_scaled = matches!(self.spec.variant, Variant::Mlp { .. } | Variant::MiniCnn { .. });
            match *layer {
                Layer::Conv2d { cin, cout, k, .. } => {
                    let std = 1.0 / ((cin * k * k) as f64).sqrt();
                    fill(rng, &mut block[..cout * cin * k * k], std);
                }
                Layer::Affine { nin, nout, .. } => {
                    let std = if fan_scaled {
                        1.0 / (nin as f64).sqrt()
                    } else if Some(i) == last_affine {
                        init.sigma_theta
                    } else {
                        init.sigma_hidden
                    };
                    fill(rng, &mut block[..nin * nout], std);
                }
                Layer::ParamScale { .. } => fill(rng, block, init.sigma_phi),
                _ => {}
            }
        }
        ParamSet {
            values: out,
            layout_hash: self.spec.layout_hash().expect("validated spec"),
        }
    }

    pub fn zero_params(&self) -> ParamSet {
        self.params_from(vec![0.0; self.n_params()]).expect("sized")
    }

    pub fn params_from(&self, values: Vec<f64>) -> Result<ParamSet> {
        self.net.check(values.len(), self.net.input_len())?;
        Ok(ParamSet {
            values,
            layout_hash: self.spec.layout_hash()?,
        })
    }
}

fn fill(rng: &mut Rng, block: &mut [f64], std: f64) {
    for v in block {
        *v = std * rng.normal();
    }
}

/// Flat parameter vector tagged with the layout it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    values: Vec<f64>,
    layout_hash: String,
}

impl ParamSet {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout_hash(&self) -> &str {
        &self.layout_hash
    }

    /// Hash of the parameter values (bit patterns).
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn save(&self, path: &Path, spec: &ModelSpec) -> Result<()> {
        Tensor::from_vec(self.values.clone()).save(
            path,
            json!({ "kind": "params", "layout_hash": self.layout_hash, "spec": spec }),
        )
    }

    /// Loads a parameter file and checks it against `spec`'s layout.
    pub fn load(path: &Path, spec: &ModelSpec) -> Result<Self> {
        let (t, meta) = Tensor::load(path)?;
        let want = spec.layout_hash()?;
        let got = meta.get("layout_hash").and_then(|v| v.as_str()).unwrap_or("");
        if got != want {
            return Err(Error::Data {
                path: path.into(),
                message: format!("parameter layout {got:?} does not match spec layout {want:?}"),
            });
        }
        Ok(Self {
            values: t.into_data(),
            layout_hash: want,
        })
    }
}

/// `A = S^{-1/2} [I_M … I_M]`, folding a length-`D` vector into `M = D/S` bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AliasingOperator {
    pub s: usize,
    pub d: usize,
    pub m: usize,
}

impl AliasingOperator {
    pub fn new(d: usize, s: usize) -> Result<Self> {
        if s == 0 || d == 0 || !d.is_multiple_of(s) {
            return Err(invalid(format!("subsampling factor {s} must divide length {d}")));
        }
        Ok(Self { s, d, m: d / s })
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x.len(), self.d)?;
        Ok(Layer::Aliasing { d: self.d, s: self.s }.forward::<f64>(&[], x))
    }

    pub fn adjoint(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check(u.len(), self.m)?;
        let inv = 1.0 / (self.s as f64).sqrt();
        Ok((0..self.d).map(|i| u[i % self.m] * inv).collect())
    }

    /// Dense `M × D` matrix.
    pub fn matrix(&self) -> nalgebra::DMatrix<f64> {
        let inv = 1.0 / (self.s as f64).sqrt();
        nalgebra::DMatrix::from_fn(self.m, self.d, |r, c| if c % self.m == r { inv } else { 0.0 })
    }

    fn check(&self, got: usize, want: usize) -> Result<()> {
        if got != want {
            return Err(Error::Shape {
                context: "aliasing operator".into(),
                expected: vec![want],
                actual: vec![got],
            });
        }
        Ok(())
    }
}

pub fn apply_aliasing(op: &AliasingOperator, x: &[f64]) -> Result<Vec<f64>> {
    op.apply(x)
}

/// `θᵀ A (m ⊙ φ ⊙ x)`.
pub fn forward_linear_pooling(m: &[f64], s: usize, phi: &[f64], theta: &[f64], x: &[f64]) -> Result<f64> {
    pooling_forward(m, s, phi, theta, x, false)
}

/// `θᵀ A (m ⊙ ρ(φ ⊙ x))`.
pub fn forward_nonlinear_pooling(m: &[f64], s: usize, phi: &[f64], theta: &[f64], x: &[f64]) -> Result<f64> {
    pooling_forward(m, s, phi, theta, x, true)
}

fn pooling_forward(m: &[f64], s: usize, phi: &[f64], theta: &[f64], x: &[f64], relu: bool) -> Result<f64> {
    let op = AliasingOperator::new(m.len(), s)?;
    for (name, got, want) in [("φ", phi.len(), op.d), ("x", x.len(), op.d), ("θ", theta.len(), op.m)] {
        if got != want {
            return Err(Error::Shape {
                context: format!("pooling model {name}"),
                expected: vec![want],
                actual: vec![got],
            });
        }
    }
    let pre: Vec<f64> = (0..op.d)
        .map(|i| {
            let u = phi[i] * x[i];
            m[i] * if relu { u.max(0.0) } else { u }
        })
        .collect();
    let z = op.apply(&pre)?;
    Ok(crate::tensor::dot(theta, &z))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aliasing_basis_vector() {
        let op = AliasingOperator::new(12, 3).unwrap();
        for l in 0..12 {
            let mut e = vec![0.0; 12];
            e[l] = 1.0;
            let z = op.apply(&e).unwrap();
            for (t, &zt) in z.iter().enumerate() {
                let want = if t == l % 4 { 1.0 / 3f64.sqrt() } else { 0.0 };
                assert!((zt - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn indivisible_length_rejected() {
        assert!(AliasingOperator::new(10, 3).is_err());
        assert!(ModelSpec::linear_pooling(vec![1.0; 10], 4).network().is_err());
    }

    #[test]
    fn strip_pooling_is_idempotent_and_grows() {
        let spec = ModelSpec::mini_cnn(1, 16, 16, Pooling::Avg, 1);
        let once = spec.strip_pooling().unwrap();
        assert_eq!(once, once.strip_pooling().unwrap());
        let a = Model::new(spec).unwrap().n_params();
        let b = Model::new(once).unwrap().n_params();
        assert!(b > a);
        assert!(ModelSpec::logistic(4).strip_pooling().is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = ModelSpec::linear_pooling(vec![1.0, 0.5, 0.25, 0.125], 2);
        let back = ModelSpec::from_json(&spec.to_json()).unwrap();
        assert_eq!(spec, back);
        assert_eq!(spec.hash(), back.hash());
    }
}
