use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use bpinn::compiler::{compile_spline_network, derive_gadgets, size_report, CompileOptions, GadgetCheck, SizeReport};
use bpinn::experiments::{
    emit_results, packing_demo, rate_study, sample_posterior, Cell, Format, Metadata, RunConfig, Table,
};
use bpinn::network::forward_jet;
use bpinn::pde::preset;
use bpinn::spline::{quasi_interpolant, spline_eval, SplineSpec};

#[derive(Parser)]
#[command(name = "bpinn", version, about = "Bayesian physics-informed networks for elliptic PDEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config with sections problem, prior, mcmc, sieve, packing, output.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides output.dir.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Overrides output.format.
    #[arg(long, value_parser = ["csv", "json"])]
    format: Option<String>,
}

impl Common {
    fn load(&self) -> Result<(RunConfig, PathBuf, Format)> {
        let cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => RunConfig::default(),
        };
        let dir = self.out_dir.clone().unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
        let format = match self.format.as_deref() {
            Some("json") => Format::Json,
            Some(_) => Format::Csv,
            None => cfg.output.format,
        };
        Ok((cfg, dir, format))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sample the posterior for one dataset.
    Sample(Common),
    /// Posterior-mean loss across sample sizes and seeds.
    RateStudy(Common),
    /// Compile a spline projection into a σ3 network.
    CompileSpline(CompileArgs),
    /// Separation and KL table of the interior packing.
    PackingDemo(Common),
}

#[derive(Args)]
struct CompileArgs {
    /// Spline order (k − 1 must be a multiple of 3).
    #[arg(short, long, default_value_t = 4)]
    k: usize,
    /// Partition size per axis.
    #[arg(short, long, default_value_t = 4)]
    l: usize,
    /// Input dimension.
    #[arg(short, long, default_value_t = 1)]
    d: usize,
    /// Function to project: a preset name (its exact solution), `sin2pi` or `poly`.
    #[arg(long, default_value = "sin2pi")]
    function: String,
    /// Clip scale; defaults to the coefficient bound plus one.
    #[arg(long)]
    clip: Option<f64>,
    /// Output network JSON.
    #[arg(short, long, default_value = "network.json")]
    out: PathBuf,
    /// Check the network against the spline and write a size report next to it.
    #[arg(long)]
    verify: bool,
    /// Seed for the verification points.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn ext(format: Format) -> &'static str {
    match format {
        Format::Csv => "csv",
        Format::Json => "json",
    }
}

fn write_json<T: Serialize>(path: &Path, meta: &Metadata, value: &T) -> Result<()> {
    #[derive(Serialize)]
    struct Doc<'a, T> {
        metadata: &'a Metadata,
        result: &'a T,
    }
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(&Doc { metadata: meta, result: value })?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn sample(common: &Common) -> Result<()> {
    let (cfg, dir, format) = common.load()?;
    let run = sample_posterior(&cfg)?;
    let meta = Metadata::new(&cfg, cfg.mcmc.seed)?;
    let samples = Table {
        name: "samples".into(),
        columns: ["chain", "iter", "W", "S", "B", "loglik", "pop_loss"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        rows: run
            .samples
            .iter()
            .map(|s| {
                vec![
                    Cell::Int(s.chain as i64),
                    Cell::Int(s.iter as i64),
                    Cell::Int(s.width as i64),
                    Cell::Int(s.sparsity as i64),
                    Cell::Float(s.bound),
                    Cell::Float(s.loglik),
                    Cell::Float(s.pop_loss),
                ]
            })
            .collect(),
    };
    let s = &run.summary;
    let mut columns: Vec<String> = (0..s.dim).map(|a| format!("x{a}")).collect();
    columns.push("mean".into());
    let mean = Table {
        name: "posterior_mean".into(),
        columns,
        rows: s
            .eval_grid
            .iter()
            .zip(&s.mean_on_grid)
            .map(|(x, v)| x.iter().chain(std::iter::once(v)).map(|&c| Cell::Float(c)).collect())
            .collect(),
    };
    emit_results(&samples, &meta, &dir.join(format!("samples.{}", ext(format))), format)?;
    emit_results(&mean, &meta, &dir.join(format!("posterior_mean.{}", ext(format))), format)?;
    write_json(&dir.join("summary.json"), &meta, s)?;
    println!(
        "retained {} samples; posterior-mean loss {:.6e}; eps_n {:.6e}; weight-walk acceptance {:.3}",
        s.retained, s.mean_loss.total, s.eps_n, s.acceptance.weight_walk
    );
    Ok(())
}

fn rate(common: &Common) -> Result<()> {
    let (cfg, dir, format) = common.load()?;
    let (problem, loss) = cfg.problem.problem_config().build()?;
    let study = rate_study(
        &problem,
        &loss,
        &cfg.prior,
        &cfg.mcmc,
        &cfg.sieve,
        &cfg.problem.rate_study_config(),
    )?;
    let meta = Metadata::new(&cfg, cfg.mcmc.seed)?;
    emit_results(&study.table(), &meta, &dir.join(format!("rate_study.{}", ext(format))), format)?;
    write_json(&dir.join("rate_study_summary.json"), &meta, &study)?;
    for (n, m) in &study.medians {
        println!("n={n:>6}  median loss {m:.6e}");
    }
    println!(
        "slope {:.3} (theoretical {:.3}); failed cells {}",
        study.slope,
        study.theoretical_slope,
        study.rows.iter().filter(|r| r.failed).count()
    );
    Ok(())
}

fn packing(common: &Common) -> Result<()> {
    let (cfg, dir, format) = common.load()?;
    let problem = preset(&cfg.packing.preset)?;
    let demo = packing_demo(&cfg.packing, &problem)?;
    let meta = Metadata::new(&cfg, cfg.packing.seed)?;
    emit_results(&demo.table(), &meta, &dir.join(format!("packing.{}", ext(format))), format)?;
    #[derive(Serialize)]
    struct Row {
        m: usize,
        code_size: usize,
        realized_distance: usize,
        min_separation_sq: f64,
        max_boundary_sq: f64,
        max_kl: f64,
    }
    #[derive(Serialize)]
    struct Summary {
        rows: Vec<Row>,
        separation_slope: f64,
        theoretical_slope: f64,
    }
    let summary = Summary {
        rows: demo
            .tables
            .iter()
            .map(|t| Row {
                m: t.m,
                code_size: t.code_size,
                realized_distance: t.realized_distance,
                min_separation_sq: t.min_separation_sq,
                max_boundary_sq: t.max_boundary_sq,
                max_kl: t.max_kl,
            })
            .collect(),
        separation_slope: demo.separation_slope,
        theoretical_slope: demo.theoretical_slope,
    };
    write_json(&dir.join("packing_summary.json"), &meta, &summary)?;
    for r in &summary.rows {
        println!(
            "m={} codewords={} distance={} min separation² {:.6e} max boundary² {:.3e}",
            r.m, r.code_size, r.realized_distance, r.min_separation_sq, r.max_boundary_sq
        );
    }
    println!(
        "separation slope {:.3} (theoretical {:.3})",
        demo.separation_slope, demo.theoretical_slope
    );
    Ok(())
}

fn target_function(name: &str, d: usize) -> Result<Box<dyn Fn(&[f64]) -> f64>> {
    Ok(match name {
        "sin2pi" => Box::new(|x: &[f64]| x.iter().map(|v| (2.0 * std::f64::consts::PI * v).sin()).product()),
        "poly" => Box::new(|x: &[f64]| x.iter().map(|v| v * v - 0.5 * v).sum()),
        other => {
            let p = preset(other)?;
            if p.dim() != d {
                bail!("preset {other} has dimension {}, not {d}", p.dim());
            }
            let u = p
                .u_star
                .clone()
                .with_context(|| format!("preset {other} has no exact solution"))?;
            Box::new(move |x: &[f64]| u(x).value)
        }
    })
}

#[derive(Serialize)]
struct VerifyReport {
    size: SizeReport,
    gadget_checks: Vec<GadgetCheck>,
    points: usize,
    max_value_error: f64,
    max_gradient_error: f64,
    max_hessian_error: f64,
}

fn compile(args: &CompileArgs) -> Result<()> {
    let spec = SplineSpec::new(args.k, args.l, args.d)?;
    let f = target_function(&args.function, args.d)?;
    let coeffs = quasi_interpolant(|x| f(x), spec)?;
    let gadgets = derive_gadgets()?;
    let net = compile_spline_network(&coeffs, &gadgets, &CompileOptions { clip_scale: args.clip })?;
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&args.out, net.params.to_json()?).with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "depth {} width {} active {} of {} max|θ| {:.3}",
        net.params.arch.depth,
        net.params.arch.width,
        net.params.sparsity(),
        net.params.arch.num_params(),
        net.params.max_abs_weight()
    );
    if args.verify {
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        let points = 1000;
        let (mut ev, mut eg, mut eh) = (0.0f64, 0.0f64, 0.0f64);
        for _ in 0..points {
            let x: Vec<f64> = (0..args.d).map(|_| rng.random::<f64>()).collect();
            let a = forward_jet(&net.params, &net.clip, &x)?;
            let b = spline_eval(&coeffs, &x)?;
            let (dv, dg, dh) = a.max_abs_diff(&b);
            ev = ev.max(dv);
            eg = eg.max(dg);
            eh = eh.max(dh);
        }
        let report = VerifyReport {
            size: size_report(&net.params, &spec, args.k as f64),
            gadget_checks: gadgets.checks.clone(),
            points,
            max_value_error: ev,
            max_gradient_error: eg,
            max_hessian_error: eh,
        };
        let path = args.out.with_file_name("size_report.json");
        let meta = Metadata::new(
            &serde_json::json!({"k": args.k, "l": args.l, "d": args.d, "function": args.function, "clip": args.clip}),
            args.seed,
        )?;
        write_json(&path, &meta, &report)?;
        println!(
            "max abs error: value {ev:.3e} gradient {eg:.3e} hessian {eh:.3e}; report in {}",
            path.display()
        );
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("BPINN_THREADS") {
        let n: usize = v.parse().with_context(|| format!("BPINN_THREADS={v} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> Result<()> {
    configure_threads()?;
    let cli = Cli::parse();
    match &cli.command {
        Command::Sample(c) => sample(c),
        Command::RateStudy(c) => rate(c),
        Command::CompileSpline(a) => compile(a),
        Command::PackingDemo(c) => packing(c),
    }
}
