mod config;
mod evaluate;

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use duoflow::alternation::{alternate, GroundTruth};
use duoflow::io::{
    flow_to_color, load_bundle, read_flo, read_image, save_bundle, write_flo, write_image,
    write_image_with_depth, write_trace, BitDepth,
};
use duoflow::synth::custom_suite;
use duoflow::{
    FlowRegularizer, InitPolicy, LayerDecomposition, Mode, SolverConfig, TgvWeights, Weights,
};

use crate::config::ConfigFile;

#[derive(Parser)]
#[command(name = "duoflow", version, about = "Joint optical flow and layer separation for double-layer image pairs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic ground-truth catalog as bundle directories.
    Synthesize(SynthArgs),
    /// Estimate layers and flows for one frame pair.
    Estimate(Box<EstimateArgs>),
    /// Compare an estimate (or any bundle) with ground truth.
    Evaluate(evaluate::EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Only instances of this mode (static or dynamic).
    #[arg(long)]
    mode: Option<Mode>,
    /// Render every instance at HxW instead of its catalog size.
    #[arg(long, value_parser = parse_size)]
    size: Option<(usize, usize)>,
    /// Foreground bound c.
    #[arg(long, default_value_t = 0.25)]
    c: f64,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    i0: PathBuf,
    #[arg(long)]
    i1: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// static or dynamic.
    #[arg(long)]
    mode: Option<Mode>,
    /// `key = value` file with any of the options below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Initial layers L1 L1' L2 L2' (required for dynamic mode).
    #[arg(long, num_args = 4, value_names = ["L1", "L1P", "L2", "L2P"])]
    init_layers: Option<Vec<PathBuf>>,
    /// Initial flows U V (.flo); layers then come from one separation step.
    #[arg(long, num_args = 2, value_names = ["U", "V"], conflicts_with = "init_layers")]
    init_flows: Option<Vec<PathBuf>>,
    /// Ground-truth bundle; only used to fill the error columns of trace.csv.
    #[arg(long)]
    gt: Option<PathBuf>,

    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    lambda_l: Option<f64>,
    /// Flow prior weight per channel.
    #[arg(long)]
    lambda_f: Option<f64>,
    /// tv or tgv2.
    #[arg(long)]
    reg: Option<String>,
    /// TGV² weight on |grad u - w|.
    #[arg(long)]
    tgv_alpha1: Option<f64>,
    /// TGV² weight on |sym grad w|.
    #[arg(long)]
    tgv_alpha0: Option<f64>,
    /// Outer alternation iterations.
    #[arg(long)]
    outer: Option<usize>,
    /// Relative energy decrease below which the alternation stops early (0: never).
    #[arg(long)]
    stop_tol: Option<f64>,
    /// Coupling of the quadratic relaxation in the flow step.
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    warps: Option<usize>,
    #[arg(long)]
    pd_iters: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    scale_factor: Option<f64>,
    #[arg(long)]
    min_size: Option<usize>,
    /// 5x5 median filtering between warps (true or false).
    #[arg(long)]
    median: Option<bool>,
    #[arg(long)]
    gradient_sigma: Option<f64>,
    #[arg(long)]
    irls_eps: Option<f64>,
    #[arg(long)]
    irls_eps_start: Option<f64>,
    #[arg(long)]
    irls_outer: Option<usize>,
    #[arg(long)]
    cg_iters: Option<usize>,
    #[arg(long)]
    cg_tol: Option<f64>,
    #[arg(long)]
    irls_stop_tol: Option<f64>,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(h)?, parse(w)?))
}

fn regularizer(name: &str, tgv: TgvWeights) -> Result<FlowRegularizer> {
    match name {
        "tv" => Ok(FlowRegularizer::Tv),
        "tgv2" => Ok(FlowRegularizer::Tgv2(tgv)),
        other => bail!("unknown regularizer {other:?} (expected tv or tgv2)"),
    }
}

/// Resolves every solver parameter and returns it with a `key = value`
/// listing that reproduces the run through `--config`.
fn resolve(a: &EstimateArgs) -> Result<(Mode, SolverConfig, String)> {
    let file = match &a.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let d = SolverConfig::default();
    let dt = TgvWeights::default();
    let mode: Mode = file
        .lookup(a.mode, "mode")?
        .context("--mode is required (static or dynamic)")?;
    let reg_name: String = file.pick(a.reg.clone(), "reg", "tv".to_string())?;
    let tgv = TgvWeights {
        first_order: file.pick(a.tgv_alpha1, "tgv-alpha1", dt.first_order)?,
        second_order: file.pick(a.tgv_alpha0, "tgv-alpha0", dt.second_order)?,
    };
    let mut cfg = SolverConfig {
        weights: Weights {
            lambda_l: file.pick(a.lambda_l, "lambda-l", d.weights.lambda_l)?,
            lambda_f: file.pick(a.lambda_f, "lambda-f", d.weights.lambda_f)?,
            regularizer: regularizer(&reg_name, tgv)?,
        },
        c: file.pick(a.c, "c", d.c)?,
        outer_iters: file.pick(a.outer, "outer", d.outer_iters)?,
        stop_tol: file.pick(a.stop_tol, "stop-tol", d.stop_tol)?,
        ..d
    };
    let r = &mut cfg.relax;
    r.theta = file.pick(a.theta, "theta", r.theta)?;
    r.warps_per_level = file.pick(a.warps, "warps", r.warps_per_level)?;
    r.pd_iters = file.pick(a.pd_iters, "pd-iters", r.pd_iters)?;
    r.tau = file.pick(a.tau, "tau", r.tau)?;
    r.sigma = file.pick(a.sigma, "sigma", r.sigma)?;
    r.scale_factor = file.pick(a.scale_factor, "scale-factor", r.scale_factor)?;
    r.min_size = file.pick(a.min_size, "min-size", r.min_size)?;
    r.median_filter = file.pick(a.median, "median", r.median_filter)?;
    r.gradient_sigma = file.pick(a.gradient_sigma, "gradient-sigma", r.gradient_sigma)?;
    let i = &mut cfg.irls;
    i.epsilon = file.pick(a.irls_eps, "irls-eps", i.epsilon)?;
    i.epsilon_start = file.pick(a.irls_eps_start, "irls-eps-start", i.epsilon_start)?;
    i.max_outer = file.pick(a.irls_outer, "irls-outer", i.max_outer)?;
    i.cg_max_iters = file.pick(a.cg_iters, "cg-iters", i.cg_max_iters)?;
    i.cg_tol = file.pick(a.cg_tol, "cg-tol", i.cg_tol)?;
    i.stop_tol = file.pick(a.irls_stop_tol, "irls-stop-tol", i.stop_tol)?;
    file.check_unused()?;
    cfg.validate()?;

    let (r, i) = (&cfg.relax, &cfg.irls);
    let mut listing = String::new();
    let rows: [(&str, String); 24] = [
        ("mode", mode.to_string()),
        ("reg", reg_name),
        ("tgv-alpha1", tgv.first_order.to_string()),
        ("tgv-alpha0", tgv.second_order.to_string()),
        ("lambda-l", cfg.weights.lambda_l.to_string()),
        ("lambda-f", cfg.weights.lambda_f.to_string()),
        ("c", cfg.c.to_string()),
        ("outer", cfg.outer_iters.to_string()),
        ("stop-tol", cfg.stop_tol.to_string()),
        ("theta", r.theta.to_string()),
        ("warps", r.warps_per_level.to_string()),
        ("pd-iters", r.pd_iters.to_string()),
        ("tau", r.tau.to_string()),
        ("sigma", r.sigma.to_string()),
        ("scale-factor", r.scale_factor.to_string()),
        ("min-size", r.min_size.to_string()),
        ("median", r.median_filter.to_string()),
        ("gradient-sigma", r.gradient_sigma.to_string()),
        ("irls-eps", i.epsilon.to_string()),
        ("irls-eps-start", i.epsilon_start.to_string()),
        ("irls-outer", i.max_outer.to_string()),
        ("cg-iters", i.cg_max_iters.to_string()),
        ("cg-tol", i.cg_tol.to_string()),
        ("irls-stop-tol", i.stop_tol.to_string()),
    ];
    for (k, v) in rows {
        let _ = writeln!(listing, "{k} = {v}");
    }
    Ok((mode, cfg, listing))
}

fn synthesize(a: &SynthArgs) -> Result<()> {
    let suite = custom_suite(a.seed, a.c, a.mode, a.size)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for b in &suite {
        let dir = a.out.join(&b.name);
        save_bundle(b, &dir).with_context(|| format!("writing {}", dir.display()))?;
    }
    println!("wrote {} instances to {}", suite.len(), a.out.display());
    Ok(())
}

fn read_pair(a: &EstimateArgs) -> Result<(duoflow::Image, duoflow::Image)> {
    let i0 = read_image(&a.i0).with_context(|| format!("reading {}", a.i0.display()))?;
    let i1 = read_image(&a.i1).with_context(|| format!("reading {}", a.i1.display()))?;
    Ok((i0, i1))
}

fn estimate(a: &EstimateArgs) -> Result<()> {
    let (mode, mut cfg, listing) = resolve(a)?;
    let (i0, i1) = read_pair(a)?;
    cfg.init = match (&a.init_layers, &a.init_flows) {
        (Some(p), _) => {
            let img = |k: usize| read_image(&p[k]).with_context(|| format!("reading {}", p[k].display()));
            InitPolicy::SuppliedLayers(LayerDecomposition::new(img(0)?, img(1)?, img(2)?, img(3)?, cfg.c)?)
        }
        (None, Some(p)) => {
            let flo = |k: usize| read_flo(&p[k]).with_context(|| format!("reading {}", p[k].display()));
            InitPolicy::SuppliedFlows(flo(0)?, flo(1)?)
        }
        (None, None) => {
            if mode == Mode::DynamicForeground {
                bail!(
                    "dynamic mode cannot start from an empty foreground: pass --init-layers L1 L1p L2 L2p (or --init-flows U V)"
                );
            }
            InitPolicy::ZeroForeground
        }
    };
    let gt = match &a.gt {
        Some(dir) => {
            let b = load_bundle(dir).with_context(|| format!("reading ground truth {}", dir.display()))?;
            Some(GroundTruth {
                u: Some(b.gt_u),
                v: (mode == Mode::DynamicForeground).then_some(b.gt_v),
                l2: Some(b.gt.l2),
            })
        }
        None => None,
    };
    let est = alternate(&i0, &i1, mode, &cfg, gt.as_ref())?;

    let out = &a.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let d = &est.decomposition;
    for (name, img) in [("L1.png", &d.l1), ("L1p.png", &d.l1p), ("L2.png", &d.l2), ("L2p.png", &d.l2p)] {
        write_image_with_depth(img, out.join(name), BitDepth::Sixteen)?;
    }
    write_flo(&est.u, out.join("U.flo"))?;
    write_flo(&est.v, out.join("V.flo"))?;
    write_flo(&est.u_init, out.join("U_init.flo"))?;
    if mode == Mode::DynamicForeground {
        write_flo(&est.v_init, out.join("V_init.flo"))?;
    }
    write_image(&flow_to_color(&est.u, None), out.join("U.png"))?;
    write_image(&flow_to_color(&est.v, None), out.join("V.png"))?;
    write_trace(&est.trace, out.join("trace.csv"))?;
    fs::write(out.join("params.txt"), listing)?;
    println!("{}", duoflow::alternation::convergence_report(&est.trace).summary);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synthesize(a) => synthesize(&a),
        Command::Estimate(a) => estimate(&a),
        Command::Evaluate(a) => evaluate::run(&a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
