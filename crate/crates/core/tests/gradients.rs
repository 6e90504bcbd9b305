use nadlab::autodiff::{Layer, Network};
use nadlab::models::{Model, ModelSpec, Pooling};
use nadlab::rng::Rng;
use nadlab::tensor::{dot, norm};

const DRAWS: usize = 100;
const TOL: f64 = 1e-4;
const H: f64 = 1e-6;

fn gaussian(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-12)
}

fn central(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            xp[i] = x[i] + H;
            let plus = f(&xp);
            xp[i] = x[i] - H;
            let minus = f(&xp);
            xp[i] = x[i];
            (plus - minus) / (2.0 * H)
        })
        .collect()
}

/// `layer` followed by a dense readout so the network is scalar-valued.
fn probe_net(layer: Layer, input_shape: Vec<usize>) -> Network {
    let nout = layer.out_len();
    Network::new(vec![layer, Layer::Affine { nin: nout, nout: 1, bias: true }], input_shape).unwrap()
}

fn check_layer(name: &str, layer: Layer, input_shape: Vec<usize>) {
    let net = probe_net(layer, input_shape);
    let mut rng = Rng::new(0x9ad, name.len() as u64);
    let mut worst = (0.0f64, 0.0f64);
    for _ in 0..DRAWS {
        let p = gaussian(&mut rng, net.n_params());
        let x = gaussian(&mut rng, net.input_len());
        let gx = net.grad_input(&p, &x).unwrap();
        let fx = central(|x| net.output(&p, x).unwrap(), &x);
        worst.0 = worst.0.max(rel_err(&gx, &fx));
        let gp = net.grad_params(&p, &x).unwrap();
        let fp = central(|p| net.output(p, &x).unwrap(), &p);
        worst.1 = worst.1.max(rel_err(&gp, &fp));
    }
    assert!(worst.0 < TOL, "{name}: input gradient rel err {:.2e}", worst.0);
    assert!(worst.1 < TOL, "{name}: parameter gradient rel err {:.2e}", worst.1);
}

#[test]
fn conv2d_matches_finite_differences() {
    check_layer("conv2d", Layer::Conv2d { cin: 2, cout: 3, h: 5, w: 4, k: 3 }, vec![2, 5, 4]);
}

#[test]
fn avg_pool_matches_finite_differences() {
    check_layer("avg-pool", Layer::AvgPool { c: 2, h: 4, w: 6, s: 2 }, vec![2, 4, 6]);
}

#[test]
fn max_pool_matches_finite_differences() {
    check_layer("max-pool", Layer::MaxPool { c: 2, h: 4, w: 6, s: 2 }, vec![2, 4, 6]);
}

#[test]
fn subsample_matches_finite_differences() {
    check_layer("subsample", Layer::Subsample { c: 2, h: 4, w: 6, s: 2 }, vec![2, 4, 6]);
}

#[test]
fn relu_matches_finite_differences() {
    check_layer("relu", Layer::Relu { n: 12 }, vec![12]);
}

#[test]
fn affine_matches_finite_differences() {
    check_layer("affine", Layer::Affine { nin: 7, nout: 5, bias: true }, vec![7]);
    check_layer("affine-nobias", Layer::Affine { nin: 7, nout: 5, bias: false }, vec![7]);
}

#[test]
fn scale_layers_match_finite_differences() {
    check_layer("param-scale", Layer::ParamScale { n: 9 }, vec![9]);
    let m = vec![0.5, -1.0, 2.0, 0.0, 1.5, -0.25, 3.0, 1.0, -2.0];
    check_layer("fixed-scale", Layer::FixedScale { m }, vec![9]);
}

#[test]
fn aliasing_matches_finite_differences() {
    check_layer("aliasing", Layer::Aliasing { d: 12, s: 3 }, vec![12]);
}

#[test]
fn full_minicnn_matches_finite_differences() {
    for pooling in [Pooling::Avg, Pooling::Max, Pooling::None] {
        let model = Model::new(ModelSpec::mini_cnn(1, 8, 8, pooling, 1)).unwrap();
        let mut rng = Rng::new(4, 0);
        for _ in 0..10 {
            let params = model.init_params(&mut rng);
            let x = gaussian(&mut rng, 64);
            let g = model.grad_input(&params, &x).unwrap();
            let fd = central(|x| model.forward(&params, x).unwrap(), &x);
            assert!(rel_err(&g, &fd) < TOL, "{pooling:?}: {:.2e}", rel_err(&g, &fd));
        }
    }
}

/// Forward-over-reverse mixed derivatives against differences of reverse-mode
/// parameter gradients on an 8×8 MiniCNN.
#[test]
fn nested_derivative_probe_8x8() {
    let model = Model::new(ModelSpec::mini_cnn(1, 8, 8, Pooling::Avg, 1)).unwrap();
    let net = model.net();
    let mut rng = Rng::new(8, 8);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let params = model.init_params(&mut rng);
        let x = gaussian(&mut rng, 64);
        let v = gaussian(&mut rng, 64);
        let exact = net.mixed_jvp(params.values(), &x, &v).unwrap();
        let h = 1e-5;
        let shift = |s: f64| -> Vec<f64> { x.iter().zip(&v).map(|(a, b)| a + s * b).collect() };
        let gp = net.grad_params(params.values(), &shift(h)).unwrap();
        let gm = net.grad_params(params.values(), &shift(-h)).unwrap();
        let fd: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        worst = worst.max(rel_err(&exact, &fd));

        let vp = gaussian(&mut rng, net.n_params());
        let back = net.mixed_vjp(params.values(), &x, &vp).unwrap();
        let lhs = dot(&vp, &exact);
        let rhs = dot(&back, &v);
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1.0), "{lhs} vs {rhs}");
    }
    assert!(worst < 1e-3, "nested derivative rel err {worst:.2e}");
}

#[test]
fn local_finite_differences_match_reverse_mode_on_linear_model() {
    let model = Model::new(ModelSpec::linear_pooling((1..=16).map(f64::from).collect(), 4)).unwrap();
    let params = model.init_params(&mut Rng::new(1, 1));
    let x = gaussian(&mut Rng::new(2, 2), 16);
    let g = model.grad_input(&params, &x).unwrap();
    let fd = model.finite_diff_grad_input(&params, &x, 100.0).unwrap();
    assert!(rel_err(&g, &fd) < 1e-10);
}
