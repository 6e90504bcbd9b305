mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use nadlab::datasets::{self, LabeledDataset};
use nadlab::experiments::{self, ExperimentTable, FlipSpec, PoisonSpec, SweepSpec};
use nadlab::models::{Model, ModelSpec};
use nadlab::nad::{self, NadBasis, NadConfig};
use nadlab::oracles;
use nadlab::spectral::{self, Part};
use nadlab::tensor::atomic_write;

use manifest::{RunManifest, Status};

#[derive(Parser)]
#[command(name = "nadlab", version, about = "Neural anisotropy directions: discovery, oracles and experiments")]
struct Cli {
    /// Worker threads (0 = all cores). Never changes results.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the real orthonormal Fourier basis of an H×W grid.
    GenBasis {
        #[arg(long, value_parser = clap::builder::RangedU64ValueParser::<usize>::new().range(1..))]
        height: usize,
        #[arg(long, value_parser = clap::builder::RangedU64ValueParser::<usize>::new().range(1..))]
        width: usize,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Estimate the NADs of a model (gradient covariance or mixed second derivative).
    ComputeNads(NadArgs),
    /// Train and evaluate one model per data direction.
    Sweep(SweepArgs),
    /// Run the sweep once per noise level.
    NoiseSweep {
        #[command(flatten)]
        sweep: SweepArgs,
        /// Comma-separated noise levels.
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 1.0, 3.0])]
        sigmas: Vec<f64>,
    },
    /// Run the sweep once per training-set size.
    SamplesSweep {
        #[command(flatten)]
        sweep: SweepArgs,
        /// Comma-separated training-set sizes.
        #[arg(long, value_delimiter = ',', default_values_t = [500usize, 1000, 2000, 5000, 10000])]
        counts: Vec<usize>,
    },
    /// Poison CIFAR-10 with carriers along NADs and measure clean-test accuracy.
    Poison(ImageArgs),
    /// Train on CIFAR-10 and on its NAD-flipped representation.
    Flip(ImageArgs),
    /// Closed form vs Monte-Carlo oracle suite; exit code 0 only if all pass.
    Oracles {
        /// pooling-accuracy, pooling-hessian, covariance, markov or all.
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Report path (default: oracles-<suite>.json).
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Render a Fourier sweep table as PGM + SVG heatmaps.
    Render {
        /// Table JSON written by `sweep`.
        #[arg(long)]
        table: PathBuf,
        #[arg(long, value_enum, default_value_t = PartArg::Re)]
        part: PartArg,
        /// Output stem (default: table path without extension, plus the part).
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PartArg {
    Re,
    Im,
}

impl From<PartArg> for Part {
    fn from(p: PartArg) -> Self {
        match p {
            PartArg::Re => Part::Re,
            PartArg::Im => Part::Im,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgoArg {
    GradCov,
    Mixed,
}

#[derive(Args)]
struct NadArgs {
    /// Model spec JSON.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value_t = AlgoArg::GradCov)]
    algo: AlgoArg,
    /// Monte-Carlo draws T.
    #[arg(long, default_value_t = 5000)]
    samples: usize,
    /// Finite-difference scale h of the gradient-covariance algorithm.
    #[arg(long, default_value_t = 100.0)]
    fd_scale: f64,
    /// Directional finite-difference step of the mixed algorithm.
    #[arg(long, default_value_t = 1e-7)]
    mixed_fd_scale: f64,
    #[arg(long, default_value_t = 16)]
    top_k: usize,
    /// Evaluation point: `zero` or `random:<seed>`.
    #[arg(long, default_value = "zero")]
    eval_point: String,
    #[arg(long, default_value_t = 300)]
    power_budget: usize,
    #[arg(long, default_value_t = 1e-6)]
    power_tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Clone)]
struct SweepArgs {
    /// Sweep config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's repeat count.
    #[arg(long)]
    repeats: Option<usize>,
    /// Override the number of training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Output directory; files are named after the config.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ImageArgs {
    /// Experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    /// NAD basis file (per-channel, 1024-dimensional for CIFAR-10).
    #[arg(long)]
    nads: PathBuf,
    /// CIFAR-10 root; defaults to $NADLAB_DATA.
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Training subset size (the first records in file order).
    #[arg(long, default_value_t = 10_000)]
    subset: usize,
    /// Test subset size.
    #[arg(long, default_value_t = 10_000)]
    test_subset: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.workers > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Reads a JSON config; schema errors name the offending field's path.
fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        anyhow!("{}: invalid config at `{at}`: {}", path.display(), e.into_inner())
    })
}

fn stem_of(config: &Path, out_dir: &Path) -> PathBuf {
    let name = config.file_stem().map(|s| s.to_os_string()).unwrap_or_else(|| "run".into());
    out_dir.join(name)
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Runs `work` between the manifest's begin and finish records.
fn tracked(
    command: &str,
    config: Value,
    inputs: &[&Path],
    primary: &Path,
    seed: u64,
    work: impl FnOnce() -> Result<(Vec<PathBuf>, bool)>,
) -> Result<bool> {
    if let Some(dir) = primary.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let m = RunManifest::begin(command, config, inputs, primary, seed)?;
    match work() {
        Ok((outputs, pass)) => {
            let status = if pass { Status::Complete } else { Status::Failed };
            let msg = (!pass).then(|| "one or more assertions failed".to_string());
            m.finish(outputs, status, msg)?;
            Ok(pass)
        }
        Err(e) => {
            m.finish(vec![], Status::Failed, Some(format!("{e:#}")))?;
            Err(e)
        }
    }
}

fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::GenBasis { height, width, output } => {
            let cfg = json!({ "height": height, "width": width });
            tracked("gen-basis", cfg, &[], &output, 0, || {
                let b = spectral::real_basis(height, width)?;
                b.save(&output)?;
                let index = with_suffix(&output, ".index.json");
                atomic_write(&index, serde_json::to_string_pretty(&b.tags)?.as_bytes())?;
                println!("wrote {} vectors to {}", b.len(), output.display());
                Ok((vec![output.clone(), index], true))
            })
        }
        Command::ComputeNads(a) => compute_nads(a),
        Command::Sweep(a) => {
            let (spec, stem) = load_sweep(&a)?;
            let cfg = serde_json::to_value(&spec)?;
            tracked("sweep", cfg, &[&a.config], &with_suffix(&stem, ".csv"), spec.seed, || {
                let table = experiments::direction_sweep(&spec)?;
                let mut out = save_table(&table, &stem)?;
                if table.metadata["grid"].is_array() {
                    out.extend(render_parts(&table, &stem)?);
                }
                Ok((out, true))
            })
        }
        Command::NoiseSweep { sweep, sigmas } => {
            let (spec, stem) = load_sweep(&sweep)?;
            let cfg = json!({ "spec": spec, "sigmas": sigmas });
            tracked("noise-sweep", cfg, &[&sweep.config], &with_suffix(&stem, ".noise.csv"), spec.seed, || {
                let mut out = Vec::new();
                for (sigma, table) in experiments::noise_sweep(&spec, &sigmas)? {
                    let s = with_suffix(&stem, &format!(".sigma{sigma}"));
                    out.extend(save_table(&table, &s)?);
                    if table.metadata["grid"].is_array() {
                        out.extend(render_parts(&table, &s)?);
                    }
                }
                Ok((out, true))
            })
        }
        Command::SamplesSweep { sweep, counts } => {
            let (spec, stem) = load_sweep(&sweep)?;
            let cfg = json!({ "spec": spec, "counts": counts });
            tracked("samples-sweep", cfg, &[&sweep.config], &with_suffix(&stem, ".samples.csv"), spec.seed, || {
                let table = experiments::samples_sweep(&spec, &counts)?;
                Ok((save_table(&table, &with_suffix(&stem, ".samples"))?, true))
            })
        }
        Command::Poison(a) => {
            let mut spec: PoisonSpec = read_config(&a.config)?;
            if let Some(s) = a.seed {
                spec.seed = s;
            }
            if let Some(e) = a.epochs {
                spec.train.epochs = e;
            }
            if let Some(lr) = a.lr {
                spec.train.lr = lr;
            }
            let stem = stem_of(&a.config, &a.out_dir);
            let cfg = json!({ "spec": spec, "subset": a.subset, "test_subset": a.test_subset });
            tracked("poison", cfg, &[&a.config, &a.nads], &with_suffix(&stem, ".csv"), spec.seed, || {
                let nads = NadBasis::load(&a.nads)?;
                let (train, test) = load_cifar(a.data_root.as_deref(), a.subset, a.test_subset)?;
                let table = experiments::poisoning_experiment(&spec, &train, &test, &nads)?;
                Ok((save_table(&table, &stem)?, true))
            })
        }
        Command::Flip(a) => {
            let mut spec: FlipSpec = read_config(&a.config)?;
            if let Some(s) = a.seed {
                spec.seed = s;
            }
            if let Some(e) = a.epochs {
                spec.train.epochs = e;
            }
            if let Some(lr) = a.lr {
                spec.train.lr = lr;
            }
            let stem = stem_of(&a.config, &a.out_dir);
            let cfg = json!({ "spec": spec, "subset": a.subset, "test_subset": a.test_subset });
            tracked("flip", cfg, &[&a.config, &a.nads], &with_suffix(&stem, ".csv"), spec.seed, || {
                let nads = NadBasis::load(&a.nads)?;
                let (train, test) = load_cifar(a.data_root.as_deref(), a.subset, a.test_subset)?;
                let table = experiments::flip_experiment(&spec, &train, &test, &nads.matrix())?;
                Ok((save_table(&table, &stem)?, true))
            })
        }
        Command::Oracles { suite, seed, output } => {
            let output = output.unwrap_or_else(|| PathBuf::from(format!("oracles-{suite}.json")));
            let cfg = json!({ "suite": suite });
            tracked("oracles", cfg, &[], &output, seed, || {
                let reports = oracles::run_suite(&suite, seed)?;
                let pass = reports.iter().all(|r| r.pass);
                for r in &reports {
                    println!(
                        "{} {:<40} error {:.5} (tolerance {})",
                        if r.pass { "PASS" } else { "FAIL" },
                        r.quantity,
                        r.error,
                        r.tolerance
                    );
                }
                let doc = json!({ "suite": suite, "seed": seed, "pass": pass, "reports": reports });
                atomic_write(&output, serde_json::to_string_pretty(&doc)?.as_bytes())?;
                Ok((vec![output.clone()], pass))
            })
        }
        Command::Render { table, part, output } => {
            let t = ExperimentTable::load(&table)?;
            let part: Part = part.into();
            let tag = if part == Part::Re { "re" } else { "im" };
            let stem = output.unwrap_or_else(|| with_suffix(&table.with_extension(""), &format!(".{tag}")));
            tracked("render", json!({ "part": tag }), &[&table], &with_suffix(&stem, ".pgm"), 0, || {
                Ok((write_heatmap(&t, part, &stem)?, true))
            })
        }
    }
}

fn compute_nads(a: NadArgs) -> Result<bool> {
    let spec = ModelSpec::load(&a.model)?;
    let model = Model::new(spec)?;
    let d = model.net().input_len();
    let eval_point = match a.eval_point.as_str() {
        "zero" => None,
        s => {
            let seed = s
                .strip_prefix("random:")
                .and_then(|v| v.parse::<u64>().ok())
                .ok_or_else(|| anyhow!("--eval-point must be `zero` or `random:<seed>`, got {s:?}"))?;
            Some(oracles::nonzero_probe(d, seed))
        }
    };
    let cfg = NadConfig {
        samples: a.samples,
        fd_scale: a.fd_scale,
        mixed_fd_scale: a.mixed_fd_scale,
        eval_point,
        top_k: a.top_k,
        power_budget: a.power_budget,
        power_tol: a.power_tol,
    };
    let record = json!({
        "algo": match a.algo { AlgoArg::GradCov => "grad-cov", AlgoArg::Mixed => "mixed" },
        "samples": a.samples, "fd_scale": a.fd_scale, "mixed_fd_scale": a.mixed_fd_scale,
        "top_k": a.top_k, "eval_point": a.eval_point, "power_budget": a.power_budget, "power_tol": a.power_tol,
    });
    tracked("compute-nads", record, &[&a.model], &a.output, a.seed, || {
        let basis = match a.algo {
            AlgoArg::GradCov => nad::nads_gradient_covariance(&model, &cfg, a.seed)?,
            AlgoArg::Mixed => nad::nads_mixed_second_derivative(&model, &cfg, a.seed)?,
        };
        for w in &basis.provenance.warnings {
            eprintln!("warning: {w}");
        }
        basis.save(&a.output)?;
        println!("wrote {} NADs of {} to {}", basis.len(), model.spec().name(), a.output.display());
        Ok((vec![a.output.clone()], true))
    })
}

fn load_sweep(a: &SweepArgs) -> Result<(SweepSpec, PathBuf)> {
    let mut spec: SweepSpec = read_config(&a.config)?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(r) = a.repeats {
        spec.repeats = r;
    }
    if let Some(e) = a.epochs {
        spec.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        spec.train.lr = lr;
    }
    spec.validate()?;
    Ok((spec, stem_of(&a.config, &a.out_dir)))
}

fn save_table(table: &ExperimentTable, stem: &Path) -> Result<Vec<PathBuf>> {
    let (c, j) = table.save(stem)?;
    let failed = table.rows.iter().filter(|r| r.error.is_some()).count();
    println!("wrote {} rows to {}{}", table.rows.len(), c.display(), if failed > 0 { format!(" ({failed} failed)") } else { String::new() });
    Ok(vec![c, j])
}

fn write_heatmap(table: &ExperimentTable, part: Part, stem: &Path) -> Result<Vec<PathBuf>> {
    let map = experiments::render_heatmap(table, part)?;
    let pgm = with_suffix(stem, ".pgm");
    let svg = with_suffix(stem, ".svg");
    atomic_write(&pgm, &map.pgm())?;
    let title = format!("{} ({:?} part)", table.kind, part);
    atomic_write(&svg, map.svg(&title).as_bytes())?;
    Ok(vec![pgm, svg])
}

fn render_parts(table: &ExperimentTable, stem: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for (part, tag) in [(Part::Re, "re"), (Part::Im, "im")] {
        let present = table.rows.iter().any(|r| r.freq.is_some_and(|f| f.part == part));
        if present {
            out.extend(write_heatmap(table, part, &with_suffix(stem, &format!(".{tag}")))?);
        }
    }
    Ok(out)
}

fn load_cifar(root: Option<&Path>, subset: usize, test_subset: usize) -> Result<(LabeledDataset, LabeledDataset)> {
    let root = match root {
        Some(r) => r.to_path_buf(),
        None => std::env::var_os("NADLAB_DATA")
            .map(PathBuf::from)
            .ok_or_else(|| anyhow!("CIFAR-10 location unknown: pass --data-root or set NADLAB_DATA"))?,
    };
    Ok(datasets::load_cifar10_prefix(&root, subset.min(50_000), test_subset.min(10_000))?)
}
