//! Command-line driver: simulate trajectories, fit the model, run the
//! configured experiments, and emit numerical diagnostics. All outputs are
//! deterministic given the config and seed; pass --timing to record wall
//! times (at the cost of byte-stable outputs).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use trend_hmm::estimation::{align_states, em_fit, FitResult};
use trend_hmm::experiments::{
    load_config, replication_seed, run_fixed_n_experiment, run_rate_experiment, write_outputs,
    ExperimentConfig, ExperimentKind, RunOptions,
};
use trend_hmm::model::{
    compute_blocks, default_block_grid, default_block_tolerance, simulate, ModelParams, Trajectory,
};
use trend_hmm::theory::{
    assign_blocks, block_gap, filter_forgetting_gap, forgetting_rate, homogenized_loglik,
    minimal_tube_m, tube_check,
};

#[derive(Parser)]
#[command(
    name = "trendhmm",
    version,
    about = "Hidden Markov models with state-specific polynomial trends"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config file (see configs/*.cfg for the grammar)
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's output_dir
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one trajectory CSV per replication from the config's generator
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Fit the model to a trajectory CSV and write the fitted parameters
    Fit {
        #[command(flatten)]
        common: CommonArgs,
        /// Trajectory CSV (header t,y with optional x and b columns)
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the configured experiment (kind = rate or fixed_n)
    Experiment {
        #[command(flatten)]
        common: CommonArgs,
        /// Worker threads (default: all cores)
        #[arg(long)]
        jobs: Option<usize>,
        /// Disable warm starts between successive lengths
        #[arg(long)]
        cold_start: bool,
        /// Record wall-clock times in errors.csv (outputs stop being byte-stable)
        #[arg(long)]
        timing: bool,
    },
    /// Numerical diagnostics: block gap, homogenization, tube radius, forgetting
    Diagnose {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let validation = err
                .chain()
                .filter_map(|cause| cause.downcast_ref::<trend_hmm::Error>())
                .any(|e| e.is_validation());
            if validation {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { common } => {
            let (config, out) = setup(&common)?;
            cmd_simulate(&config, &out)
        }
        Command::Fit { common, data } => {
            let (config, out) = setup(&common)?;
            cmd_fit(&config, &data, &out)
        }
        Command::Experiment {
            common,
            jobs,
            cold_start,
            timing,
        } => {
            if let Some(j) = jobs {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(j)
                    .build_global()
                    .context("configuring the thread pool")?;
            }
            let (config, out) = setup(&common)?;
            cmd_experiment(&config, &out, RunOptions { cold_start, timing })
        }
        Command::Diagnose { common } => {
            let (config, out) = setup(&common)?;
            cmd_diagnose(&config, &out)
        }
    }
}

/// Loads the config, applies the TRENDHMM_SEED override, and resolves the
/// output directory (flag wins over the config's output_dir).
fn setup(common: &CommonArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let mut config = load_config(&common.config)
        .with_context(|| format!("loading {}", common.config.display()))?;
    if let Ok(raw) = std::env::var("TRENDHMM_SEED") {
        let seed: u64 = raw.parse().map_err(|_| {
            trend_hmm::Error::Invalid(format!(
                "TRENDHMM_SEED must be an unsigned integer, got '{raw}'"
            ))
        })?;
        config.master_seed = seed;
        config.fit.seed = seed;
    }
    let out = common
        .out
        .clone()
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| {
            trend_hmm::Error::Invalid(
                "no output directory: pass --out or set output_dir in the config".into(),
            )
        })?;
    std::fs::create_dir_all(&out)
        .with_context(|| format!("creating output directory {}", out.display()))?;
    Ok((config, out))
}

fn cmd_simulate(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let n_max = *config.n_values.last().expect("validated non-empty");
    for r in 0..config.n_replications {
        let traj = simulate(
            &config.truth,
            n_max,
            replication_seed(config.master_seed, r),
        )?;
        let path = out.join(format!("trajectory_{}.csv", r + 1));
        traj.write_csv(&path)?;
    }
    println!(
        "wrote {} trajectories of length {n_max} to {}",
        config.n_replications,
        out.display()
    );
    Ok(())
}

fn format_params(params: &ModelParams) -> String {
    let mut text = String::new();
    let k = params.n_states();
    let _ = writeln!(text, "n_states = {k}");
    let _ = writeln!(text, "sigma_minus = {}", params.sigma_minus());
    let _ = writeln!(text, "initial_dist = {:?}", params.initial_dist());
    let _ = writeln!(text, "transition:");
    for row in params.transition() {
        let cells: Vec<String> = row.iter().map(|q| q.to_string()).collect();
        let _ = writeln!(text, "  [{}]", cells.join(", "));
    }
    let _ = writeln!(text, "variances = {:?}", params.variances());
    let _ = writeln!(text, "trends (monomial coefficients in t, constant first):");
    for x in 0..k {
        let mono: Vec<String> = params
            .trend(x)
            .to_monomial()
            .iter()
            .map(|c| c.to_string())
            .collect();
        let _ = writeln!(text, "  state {}: [{}]", x + 1, mono.join(", "));
    }
    text
}

fn cmd_fit(config: &ExperimentConfig, data: &Path, out: &Path) -> Result<()> {
    let traj = Trajectory::read_csv(data)
        .with_context(|| format!("reading trajectory {}", data.display()))?;
    let mut fit_cfg = config.fit.clone();
    fit_cfg.seed = config.master_seed;
    let fit: FitResult = em_fit(&traj, &fit_cfg)?;

    let mut report = String::new();
    let _ = writeln!(report, "fit of {} observations", traj.len());
    let _ = writeln!(
        report,
        "converged = {} after {} iterations",
        fit.converged, fit.iterations
    );
    let _ = writeln!(report, "loglik = {}", fit.loglik());
    let restarts: Vec<String> = fit.restart_logliks.iter().map(|l| l.to_string()).collect();
    let _ = writeln!(report, "restart logliks = [{}]", restarts.join(", "));
    let _ = writeln!(
        report,
        "\nfitted parameters:\n{}",
        format_params(&fit.params)
    );
    std::fs::write(out.join("fit.txt"), &report)
        .with_context(|| format!("writing {}", out.join("fit.txt").display()))?;

    let mut trace = String::from("iteration,loglik\n");
    for (i, l) in fit.loglik_trace.iter().enumerate() {
        let _ = writeln!(trace, "{i},{l}");
    }
    std::fs::write(out.join("loglik_trace.csv"), &trace)
        .with_context(|| format!("writing {}", out.join("loglik_trace.csv").display()))?;

    println!(
        "fit: loglik {} after {} iterations (converged: {}); outputs in {}",
        fit.loglik(),
        fit.iterations,
        fit.converged,
        out.display()
    );
    Ok(())
}

fn cmd_experiment(config: &ExperimentConfig, out: &Path, options: RunOptions) -> Result<()> {
    match config.kind {
        ExperimentKind::Rate => {
            let records = run_rate_experiment(config, options)?;
            write_outputs(&records, None, out)?;
            let failures = records.iter().filter(|r| !r.is_ok()).count();
            println!(
                "rate experiment: {} fits ({} failed); outputs in {}",
                records.len(),
                failures,
                out.display()
            );
        }
        ExperimentKind::FixedN => {
            let report = run_fixed_n_experiment(config, options)?;
            write_outputs(std::slice::from_ref(&report.record), Some(&report), out)?;
            println!(
                "fixed-length experiment: loglik {}; outputs in {}",
                report.record.loglik,
                out.display()
            );
        }
        ExperimentKind::Diagnostics => {
            bail!(trend_hmm::Error::Invalid(
                "config kind 'diagnostics' belongs to the diagnose command".into()
            ));
        }
    }
    Ok(())
}

fn cmd_diagnose(config: &ExperimentConfig, out: &Path) -> Result<()> {
    if config.kind != ExperimentKind::Diagnostics {
        bail!(trend_hmm::Error::Invalid(
            "the diagnose command needs a config with kind = \"diagnostics\"".into()
        ));
    }
    let truth = &config.truth;
    let n_max = *config.n_values.last().expect("validated non-empty");
    let horizon = n_max as f64;
    let traj = simulate(truth, n_max, replication_seed(config.master_seed, 0))?;
    let grid = default_block_grid(horizon);
    let tol = default_block_tolerance(truth, &grid);
    let blocks = compute_blocks(truth, tol, &grid)?;
    let mut summary = String::from("diagnostics\n");
    let _ = writeln!(
        summary,
        "generator: {} states, {} blocks, lengths {:?}",
        truth.n_states(),
        blocks.n_blocks(),
        config.n_values
    );

    // Per-observation price of revealing the block labels, by length.
    let mut gap_csv = String::from("n,block_gap\n");
    let _ = writeln!(summary, "\nblock information gap at the generator:");
    for &n in &config.n_values {
        let sub = traj.prefix(n)?;
        let gap = block_gap(truth, &sub, blocks.block_map());
        let _ = writeln!(gap_csv, "{n},{gap}");
        let _ = writeln!(summary, "  n = {n}: {gap}");
    }
    std::fs::write(out.join("blockgap.csv"), &gap_csv)
        .with_context(|| format!("writing {}", out.join("blockgap.csv").display()))?;

    // Freezing the residual trends over 1/N segments.
    let reference = trend_hmm::theory::block_loglik(truth, &traj, blocks.block_map());
    let mut hom_csv = String::from("n_segments,gap\n");
    let _ = writeln!(
        summary,
        "\nhomogenization gap at the generator (n = {n_max}):"
    );
    for seg in [1usize, 2, 4, 8, 16, n_max] {
        let hom = homogenized_loglik(truth, &traj, &blocks, seg);
        let gap = (reference - hom).abs() / n_max as f64;
        let _ = writeln!(hom_csv, "{seg},{gap}");
        let _ = writeln!(summary, "  N = {seg}: {gap}");
    }
    std::fs::write(out.join("homogenization.csv"), &hom_csv)
        .with_context(|| format!("writing {}", out.join("homogenization.csv").display()))?;

    // Tube radius of a fit at the largest length.
    let mut fit_cfg = config.fit.clone();
    fit_cfg.seed = config.master_seed;
    let fit = em_fit(&traj, &fit_cfg)?;
    let perm = align_states(&fit.params, truth, horizon);
    let aligned = fit.params.permuted(&perm);
    let minimal_m = minimal_tube_m(&aligned, truth, horizon);
    let tube = tube_check(&aligned, truth, (minimal_m + 1e-9).max(1e-12), horizon);
    let _ = writeln!(
        summary,
        "\nfit at n = {n_max}: loglik {}, converged = {}",
        fit.loglik(),
        fit.converged
    );
    let _ = writeln!(summary, "minimal tube radius = {minimal_m}");
    let _ = writeln!(
        summary,
        "tube flags at that radius: cover_ok = {}, containment_ok = {}",
        tube.cover_ok, tube.containment_ok
    );
    let _ = writeln!(summary, "per-pair sup distances (rows = generator states):");
    for row in &tube.per_pair_sup {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(summary, "  [{}]", cells.join(", "));
    }
    let fit_gap = block_gap(&aligned, &traj, &assign_blocks(&aligned, &blocks, horizon));
    let _ = writeln!(summary, "block information gap at the fit = {fit_gap}");

    // Filter forgetting curve. The bound needs a positive transition floor;
    // when the generator declares none, fall back to the smallest transition
    // entry actually present.
    let declared = truth.sigma_minus();
    let effective = if declared > 0.0 {
        declared
    } else {
        truth
            .transition()
            .iter()
            .flatten()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    };
    let _ = writeln!(summary, "\nfilter forgetting:");
    if effective > 0.0 {
        let forgetting_params = ModelParams::new(
            truth.initial_dist().to_vec(),
            truth.transition().to_vec(),
            truth.variances().to_vec(),
            truth.trends().to_vec(),
            effective,
        )?;
        let (rho, c) = forgetting_rate(effective)?;
        if declared == 0.0 {
            let _ = writeln!(
                summary,
                "  using effective floor {effective} (smallest transition entry; none declared)"
            );
        }
        let _ = writeln!(summary, "  rho = {rho}, C = {c}");
        let k = truth.n_states();
        let mut mu = vec![0.0; k];
        mu[0] = 1.0;
        let mut nu = vec![0.0; k];
        nu[k - 1] = 1.0;
        let mut fg_csv = String::from("t,gap,bound\n");
        let t_max = 50.min(n_max);
        for t in 1..=t_max {
            let gap = filter_forgetting_gap(&forgetting_params, &traj, &mu, &nu, t)?;
            let _ = writeln!(fg_csv, "{t},{gap},{}", c * rho.powi(t as i32));
        }
        std::fs::write(out.join("forgetting.csv"), &fg_csv)
            .with_context(|| format!("writing {}", out.join("forgetting.csv").display()))?;
        let _ = writeln!(summary, "  curve written for t = 1..{t_max}");
    } else {
        let _ = writeln!(
            summary,
            "  skipped: the transition matrix has a zero entry, so no floor applies"
        );
    }

    std::fs::write(out.join("diagnose.txt"), &summary)
        .with_context(|| format!("writing {}", out.join("diagnose.txt").display()))?;
    print!("{summary}");
    Ok(())
}
