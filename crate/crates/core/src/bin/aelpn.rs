//! Command-line front end. All work happens in `aelpn::experiments`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aelpn::analysis::InversionSettings;
use aelpn::checkpoint::Checkpoint;
use aelpn::data::{self, PatchSpec};
use aelpn::experiments::{self, DataSource, TrainOverrides};
use aelpn::icnn::Activation;
use aelpn::report::Report;
use aelpn::{Error, VariantKind};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aelpn", version, about = "Affine-equivariant learned proximal networks")]
struct Cli {
    /// Seed for every random stream (data, initialization, noise, audits).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output file: the checkpoint for training commands, the report otherwise.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Emit reports as JSON instead of CSV.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct TrainFlags {
    /// lpn, scale, shift, ae or normtrick.
    #[arg(long, value_parser = parse_variant)]
    variant: VariantKind,
    /// Steps per training phase.
    #[arg(long)]
    steps: Option<usize>,
    /// Learning rate of the first phase.
    #[arg(long)]
    lr: Option<f64>,
    /// Learning rate of the proximal-matching phase.
    #[arg(long)]
    lr_match: Option<f64>,
    #[arg(long)]
    gamma0: Option<f64>,
    /// Training noise level.
    #[arg(long)]
    sigma: Option<f64>,
    /// Strong-convexity weight.
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    #[arg(long)]
    batch_size: Option<usize>,
}

impl TrainFlags {
    fn overrides(&self) -> TrainOverrides {
        TrainOverrides {
            steps: self.steps,
            lr: self.lr,
            lr_match: self.lr_match,
            gamma0: self.gamma0,
            sigma: self.sigma,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Args, Clone)]
#[group(required = true, multiple = false)]
struct DataFlags {
    /// Directory of PGM/PPM or raw tensor images.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Use generated piecewise-smooth images.
    #[arg(long)]
    synthetic: bool,
}

impl DataFlags {
    fn source(&self) -> DataSource {
        match &self.data {
            Some(d) => DataSource::Dir(d.clone()),
            None => DataSource::Synthetic,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a one-dimensional model on split normal samples and tabulate it
    /// against the closed-form prox and prior.
    TrainSplitnormal {
        #[command(flatten)]
        train: TrainFlags,
        /// Where to write the report (stdout if omitted).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train a 16×16 patch denoiser.
    TrainDenoiser {
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        data: DataFlags,
        /// Override the network activation (pairwise-max, sortpool, softplus:<beta>).
        #[arg(long, value_parser = parse_activation)]
        activation: Option<Activation>,
        /// Evaluation patches scored at every log step.
        #[arg(long, default_value_t = 0)]
        monitor: usize,
    },
    /// Mean denoising PSNR over test noise levels.
    EvalNoiseSweep {
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
        #[command(flatten)]
        data: DataFlags,
        #[arg(long, value_delimiter = ',')]
        sigmas: Option<Vec<f64>>,
        #[arg(long, default_value_t = 200)]
        patches: usize,
    },
    /// PSNR between f(g(y)) and g(f(y)) under brightness changes g.
    EvalAffine {
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
        #[command(flatten)]
        data: DataFlags,
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        #[arg(long, default_value_t = 100)]
        patches: usize,
        /// Noise level of the evaluated inputs.
        #[arg(long, default_value_t = 0.1)]
        input_sigma: f64,
    },
    /// Structural audits: weight constraint, homogeneity, equivariance,
    /// monotonicity, Jacobian symmetry, prox objective.
    Audit {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        pairs: usize,
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[arg(long, default_value_t = 100)]
        inputs: usize,
    },
    /// Evaluate the implicit regularizer by inverting the prox.
    Invert {
        checkpoint: PathBuf,
        /// Replace the checkpoint's strong-convexity weight.
        #[arg(long)]
        alpha: Option<f64>,
        /// Grid lo:hi:step for one-dimensional models.
        #[arg(long, conflicts_with = "signals", allow_hyphen_values = true)]
        grid: Option<String>,
        /// Raw tensor of shape (count, n) with the points to evaluate.
        #[arg(long)]
        signals: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long, default_value_t = 10_000)]
        max_iter: usize,
    },
}

fn parse_variant(s: &str) -> Result<VariantKind, String> {
    VariantKind::parse(s).map_err(|e| e.to_string())
}

fn parse_activation(s: &str) -> Result<Activation, String> {
    Activation::parse(s).map_err(|e| e.to_string())
}

fn tag_for(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(|s| s.replace([',', '"'], "_"))
        .unwrap_or_else(|| "model".into())
}

fn load_models(paths: &[PathBuf]) -> aelpn::Result<Vec<(String, aelpn::ProxModel)>> {
    paths
        .iter()
        .map(|p| Ok((tag_for(p), Checkpoint::load(p)?.model)))
        .collect()
}

fn emit(report: &Report, path: Option<&Path>, json: bool) -> aelpn::Result<()> {
    match path {
        Some(p) => report.write(p, json),
        None => {
            print!("{}", report.render(json));
            Ok(())
        }
    }
}

fn parse_grid(s: &str) -> aelpn::Result<Vec<Vec<f64>>> {
    let bad = || Error::InvalidArgument(format!("grid must be lo:hi:step with step > 0, got {s:?}"));
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<aelpn::Result<_>>()?;
    let [lo, hi, step] = parts[..] else { return Err(bad()) };
    if !(step > 0.0) || !(hi >= lo) {
        return Err(bad());
    }
    let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| vec![lo + step * i as f64]).collect())
}

fn run(cli: Cli) -> aelpn::Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::TrainSplitnormal { train, report } => {
            let mut opts = experiments::SplitNormalOptions::new(train.variant, seed);
            opts.alpha = train.alpha;
            opts.overrides = train.overrides();
            let run = experiments::cmd_train_splitnormal(&opts)?;
            let out = cli.out.unwrap_or_else(|| format!("splitnormal-{}.ckpt", train.variant.tag()).into());
            run.checkpoint.save(&out)?;
            eprintln!("saved {}", out.display());
            emit(&run.report, report.as_deref(), cli.json)
        }
        Command::TrainDenoiser { train, data, activation, monitor } => {
            let mut opts = experiments::DenoiserOptions::new(train.variant, seed, data.source());
            opts.alpha = train.alpha;
            opts.overrides = train.overrides();
            opts.activation = activation;
            opts.monitor_patches = monitor;
            let (ck, history) = experiments::cmd_train_denoiser(&opts)?;
            for e in &history.entries {
                let psnr = e.eval_psnr.map(|p| format!(" eval_psnr={p:.3}")).unwrap_or_default();
                eprintln!("step={} {}={:.6}{psnr}", e.step, e.loss_kind, e.loss);
            }
            let out = cli.out.unwrap_or_else(|| format!("denoiser-{}.ckpt", train.variant.tag()).into());
            ck.save(&out)?;
            eprintln!("saved {}", out.display());
            Ok(())
        }
        Command::EvalNoiseSweep { checkpoints, data, sigmas, patches } => {
            let models = load_models(&checkpoints)?;
            let mut opts = experiments::NoiseSweepOptions::new(seed, data.source());
            opts.patches = patches;
            opts.patch = patch_for(&models);
            if let Some(s) = sigmas {
                opts.sigmas = s;
            }
            emit(&experiments::cmd_eval_noise_sweep(&models, &opts)?, cli.out.as_deref(), cli.json)
        }
        Command::EvalAffine { checkpoints, data, alphas, patches, input_sigma } => {
            let models = load_models(&checkpoints)?;
            let mut opts = experiments::AffineEvalOptions::new(seed, data.source());
            opts.patches = patches;
            opts.input_sigma = input_sigma;
            opts.patch = patch_for(&models);
            if let Some(a) = alphas {
                opts.alphas = a;
            }
            emit(&experiments::cmd_eval_affine(&models, &opts)?, cli.out.as_deref(), cli.json)
        }
        Command::Audit { checkpoint, pairs, points, inputs } => {
            let model = Checkpoint::load(&checkpoint)?.model;
            let mut opts = experiments::AuditOptions::new(seed);
            opts.pairs = pairs;
            opts.jacobian_points = points;
            opts.inputs = inputs;
            let (report, checks) = experiments::cmd_audit(&tag_for(&checkpoint), &model, &opts)?;
            for c in &checks {
                let verdict = match (c.passed, c.guaranteed) {
                    (true, _) => "pass",
                    (false, true) => "FAIL",
                    (false, false) => "fail (not guaranteed for this model)",
                };
                eprintln!("{:<24} {:>12.4e} (threshold {:.0e})  {verdict}", c.name, c.measured, c.threshold);
            }
            emit(&report, cli.out.as_deref(), cli.json)
        }
        Command::Invert { checkpoint, alpha, grid, signals, tol, max_iter } => {
            let mut model = Checkpoint::load(&checkpoint)?.model;
            if let Some(a) = alpha {
                model = model.with_alpha(a)?;
            }
            let points = match (grid, signals) {
                (Some(g), _) => parse_grid(&g)?,
                (None, Some(path)) => {
                    let t = data::read_raw_tensor(&path)?;
                    let [count, n] = t.dims[..] else {
                        return Err(Error::MalformedTensor(format!("expected a (count, n) tensor, got {:?}", t.dims)));
                    };
                    t.data.chunks_exact(n.max(1) as usize).take(count as usize).map(<[f64]>::to_vec).collect()
                }
                (None, None) => return Err(Error::InvalidArgument("pass --grid or --signals".into())),
            };
            let s = InversionSettings { tol, max_iter, ..Default::default() };
            emit(&experiments::cmd_invert(&tag_for(&checkpoint), &model, &points, &s)?, cli.out.as_deref(), cli.json)
        }
    }
}

/// Square patch matching the models' input size.
fn patch_for(models: &[(String, aelpn::ProxModel)]) -> PatchSpec {
    let n = models.first().map_or(256, |(_, m)| m.input_dim());
    let side = (n as f64).sqrt().round() as usize;
    if side * side == n {
        PatchSpec::new(side, side)
    } else {
        PatchSpec::new(1, n)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(threads) = std::env::var("AELPN_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() {
                2
            } else if e.is_io() {
                3
            } else {
                1
            })
        }
    }
}
