//! `gmmdec`: decompose non-negative grid signals into sparse Gaussian
//! mixtures, synthesize benchmark inputs, certify mode locations, and
//! bridge between point clouds and signals.
//!
//! Exit codes: 0 success, 1 I/O or data errors, 2 usage errors,
//! 3 mode-distance bound violation (from `modes`).

mod formats;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gmmdec::analysis::{certify_bound, find_modes, ModeSearchOptions};
use gmmdec::bridge::{
    em_fit, histogram, log_likelihood, normalize_gmm, signal_to_points, EmConfig,
};
use gmmdec::eval::{add_gaussian_noise, noise_sigma_for_snr, rasterize, snr_of_noise};
use gmmdec::greedy::{decompose, DecompositionConfig};
use gmmdec::grid::Grid;
use serde::Serialize;

use formats::{Provenance, RNG_ID};

#[derive(Parser)]
#[command(
    name = "gmmdec",
    version,
    about = "Sparse Gaussian mixture decomposition of grid signals"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Uniform grid specification shared by several commands.
#[derive(Args)]
struct GridArgs {
    /// Per-axis origin, comma separated (e.g. -10,-10).
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        required = true
    )]
    origin: Vec<f64>,
    /// Per-axis spacing, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    spacing: Vec<f64>,
    /// Per-axis point counts, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    counts: Vec<usize>,
}

impl GridArgs {
    fn to_grid(&self) -> Result<Grid> {
        Grid::uniform(&self.origin, &self.spacing, &self.counts).map_err(|e| anyhow::anyhow!("{e}"))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Rasterize a mixture onto a grid and add seeded Gaussian noise.
    #[command(group = clap::ArgGroup::new("noise").required(true).args(["snr", "noise_sigma"]))]
    Synth {
        /// Input mixture (JSON).
        #[arg(long)]
        gmm: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
        /// Choose the noise level so the clean signal has this SNR in dB.
        #[arg(long, allow_hyphen_values = true)]
        snr: Option<f64>,
        /// Explicit noise standard deviation (0 keeps the signal clean).
        #[arg(long)]
        noise_sigma: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Noisy output signal (.json+raw pair, or .csv).
        #[arg(long)]
        out: PathBuf,
        /// Optional clean output signal.
        #[arg(long)]
        out_clean: Option<PathBuf>,
    },
    /// Greedy mixture decomposition of a signal.
    Decompose {
        #[arg(long)]
        signal: PathBuf,
        /// Smoothing neighborhood size for the seed point.
        #[arg(long, default_value_t = 10)]
        tau1: usize,
        /// Neighborhood size for the second-moment shape estimate.
        #[arg(long, default_value_t = 20)]
        tau2: usize,
        /// Stopping SNR in dB.
        #[arg(long, default_value_t = 20.0, allow_hyphen_values = true)]
        snr_stop: f64,
        #[arg(long, default_value_t = 64)]
        max_components: usize,
        /// Relative residual improvement below which the loop stalls.
        #[arg(long, default_value_t = 1e-6)]
        stall_threshold: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output mixture (JSON).
        #[arg(long)]
        out: PathBuf,
        /// Optional per-iteration trace (JSON).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Locate the modes of a mixture and certify the distance bound.
    Modes {
        #[arg(long)]
        gmm: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
        /// Report destination (JSON); stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Conversions between point clouds and signals, plus the EM baseline.
    Bridge {
        #[command(subcommand)]
        sub: BridgeCommand,
    },
    /// Dump signals and rasterized mixtures as dense CSV matrices.
    Plotdata {
        /// Input signals; the first one fixes the grid.
        #[arg(long, required = true)]
        signal: Vec<PathBuf>,
        /// Mixtures to rasterize on that grid; each also emits a residual
        /// against the first signal.
        #[arg(long)]
        gmm: Vec<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum BridgeCommand {
    /// Histogram a point cloud onto a grid.
    Pc2sig {
        /// Point cloud CSV.
        #[arg(long)]
        points: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit floor-weighted grid-point copies of a non-negative signal.
    Sig2pc {
        #[arg(long)]
        signal: PathBuf,
        /// Rough number of points to emit (floor losses only).
        #[arg(long)]
        target_count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a mixture to a point cloud with full-covariance EM.
    Em {
        #[arg(long)]
        points: PathBuf,
        /// Number of components.
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        restarts: usize,
        #[arg(long, default_value_t = 200)]
        max_iter: usize,
        /// Output mixture (JSON, weights normalized).
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth {
            gmm,
            grid,
            snr,
            noise_sigma,
            seed,
            out,
            out_clean,
        } => cmd_synth(gmm, grid, snr, noise_sigma, seed, out, out_clean),
        Command::Decompose {
            signal,
            tau1,
            tau2,
            snr_stop,
            max_components,
            stall_threshold,
            seed,
            out,
            trace,
        } => cmd_decompose(
            signal,
            tau1,
            tau2,
            snr_stop,
            max_components,
            stall_threshold,
            seed,
            out,
            trace,
        ),
        Command::Modes { gmm, grid, out } => cmd_modes(gmm, grid, out),
        Command::Bridge { sub } => cmd_bridge(sub),
        Command::Plotdata { signal, gmm, out } => cmd_plotdata(signal, gmm, out),
    }
}

fn cmd_synth(
    gmm_path: PathBuf,
    grid_args: GridArgs,
    snr: Option<f64>,
    noise_sigma: Option<f64>,
    seed: u64,
    out: PathBuf,
    out_clean: Option<PathBuf>,
) -> Result<ExitCode> {
    let gmm = formats::read_gmm(&gmm_path)?;
    let grid = grid_args.to_grid()?;
    if let Some(n) = gmm.dim() {
        if n != grid.dim() {
            bail!(
                "mixture dimension {} does not match grid dimension {}",
                n,
                grid.dim()
            );
        }
    }
    let clean = rasterize(&gmm, &grid);
    let sigma = match (snr, noise_sigma) {
        (Some(db), None) => noise_sigma_for_snr(&clean, db).map_err(|e| anyhow::anyhow!("{e}"))?,
        (None, Some(s)) => {
            if s.is_nan() || s < 0.0 {
                bail!("noise sigma must be non-negative");
            }
            s
        }
        _ => unreachable!("clap enforces exactly one noise flag"),
    };
    let noisy = add_gaussian_noise(&clean, sigma, seed).map_err(|e| anyhow::anyhow!("{e}"))?;
    let achieved = if sigma > 0.0 {
        snr_of_noise(&clean, sigma).ok().map(|r| r.snr_db)
    } else {
        None
    };
    let source = format!("synth from {}", gmm_path.display());
    let provenance = Provenance {
        seed: Some(seed),
        snr_db: achieved,
        noise_sigma: Some(sigma),
        rng: Some(RNG_ID.to_string()),
        source: Some(source.clone()),
    };
    formats::write_signal(&out, &noisy, &provenance)?;
    if let Some(clean_path) = out_clean {
        let clean_prov = Provenance {
            seed: None,
            snr_db: None,
            noise_sigma: None,
            rng: None,
            source: Some(source),
        };
        formats::write_signal(&clean_path, &clean, &clean_prov)?;
    }
    println!(
        "wrote {} ({} samples, noise sigma {:?})",
        out.display(),
        noisy.values().len(),
        sigma
    );
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn cmd_decompose(
    signal_path: PathBuf,
    tau1: usize,
    tau2: usize,
    snr_stop: f64,
    max_components: usize,
    stall_threshold: f64,
    seed: u64,
    out: PathBuf,
    trace: Option<PathBuf>,
) -> Result<ExitCode> {
    let (signal, _) = formats::read_signal(&signal_path)?;
    let config = DecompositionConfig {
        tau1,
        tau2,
        snr_stop_target_db: snr_stop,
        max_components,
        stall_threshold,
        seed,
        ..DecompositionConfig::default()
    };
    let result = decompose(&signal, &config).map_err(|e| anyhow::anyhow!("{e}"))?;
    formats::write_gmm(&out, &result.gmm, signal.grid().dim())?;
    if let Some(trace_path) = trace {
        formats::write_trace(&trace_path, &result, snr_stop)?;
    }
    let final_snr = result
        .trace
        .last()
        .map(|r| r.snr_stop_db)
        .unwrap_or(f64::NEG_INFINITY);
    println!(
        "{} components, stop: {:?}, final stopping SNR {:.3} dB, {:.2}s",
        result.gmm.len(),
        result.stop_reason,
        final_snr,
        result.total_seconds
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct ModeReportEntry {
    location: Vec<f64>,
    value: f64,
    gradient_norm: f64,
    hessian_eigen_min: f64,
    hessian_eigen_max: f64,
    component: usize,
    distance: f64,
    bound: f64,
    ratio: f64,
}

#[derive(Serialize)]
struct ModesReport {
    component_count: usize,
    mode_count: usize,
    dropped_seeds: usize,
    max_ratio: f64,
    violation: bool,
    modes: Vec<ModeReportEntry>,
}

fn cmd_modes(gmm_path: PathBuf, grid_args: GridArgs, out: Option<PathBuf>) -> Result<ExitCode> {
    let gmm = formats::read_gmm(&gmm_path)?;
    let grid = grid_args.to_grid()?;
    let found = find_modes(&gmm, &grid, &ModeSearchOptions::default())
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let mut entries = Vec::with_capacity(found.modes.len());
    let mut max_ratio = 0.0f64;
    for mode in &found.modes {
        let cert = certify_bound(&gmm, mode).map_err(|e| anyhow::anyhow!("{e}"))?;
        max_ratio = max_ratio.max(cert.ratio);
        entries.push(ModeReportEntry {
            location: mode.location.iter().cloned().collect(),
            value: mode.value,
            gradient_norm: mode.gradient_norm,
            hessian_eigen_min: mode.hessian_eigen_min,
            hessian_eigen_max: mode.hessian_eigen_max,
            component: cert.component,
            distance: cert.distance,
            bound: cert.bound,
            ratio: cert.ratio,
        });
    }
    let violation = max_ratio > 1.0 + 1e-6;
    let report = ModesReport {
        component_count: gmm.len(),
        mode_count: entries.len(),
        dropped_seeds: found.dropped_seeds,
        max_ratio,
        violation,
        modes: entries,
    };
    let text = serde_json::to_string_pretty(&report)?;
    match out {
        Some(path) => {
            std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?
        }
        None => println!("{text}"),
    }
    if violation {
        eprintln!("mode-distance bound violated (max ratio {max_ratio}); this signals a defect");
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_bridge(sub: BridgeCommand) -> Result<ExitCode> {
    match sub {
        BridgeCommand::Pc2sig { points, grid, out } => {
            let cloud = formats::read_points(&points)?;
            let grid = grid.to_grid()?;
            let (signal, dropped) = histogram(&cloud, &grid).map_err(|e| anyhow::anyhow!("{e}"))?;
            let provenance = Provenance {
                source: Some(format!(
                    "histogram of {} ({} points, {} dropped)",
                    points.display(),
                    cloud.len(),
                    dropped
                )),
                ..Provenance::default()
            };
            formats::write_signal(&out, &signal, &provenance)?;
            println!("histogrammed {} points ({} dropped)", cloud.len(), dropped);
        }
        BridgeCommand::Sig2pc {
            signal,
            target_count,
            out,
        } => {
            let (signal, _) = formats::read_signal(&signal)?;
            let cloud =
                signal_to_points(&signal, target_count).map_err(|e| anyhow::anyhow!("{e}"))?;
            formats::write_points(&out, &cloud)?;
            println!("emitted {} points (target {})", cloud.len(), target_count);
        }
        BridgeCommand::Em {
            points,
            k,
            seed,
            restarts,
            max_iter,
            out,
        } => {
            let cloud = formats::read_points(&points)?;
            let mut cfg = EmConfig::new(k, seed);
            cfg.restarts = restarts;
            cfg.max_iter = max_iter;
            let fit = em_fit(&cloud, &cfg).map_err(|e| anyhow::anyhow!("{e}"))?;
            formats::write_gmm(&out, &fit.gmm, cloud.dim())?;
            // Sanity: the reported likelihood matches a fresh evaluation.
            let direct = log_likelihood(&cloud, &normalize_gmm(&fit.gmm).unwrap())
                .map_err(|e| anyhow::anyhow!("{e}"))?;
            println!(
                "log_likelihood: {:?} (recomputed {:?}), iterations {}, reseeds {}",
                fit.log_likelihood, direct, fit.iterations, fit.reseeds
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_plotdata(signals: Vec<PathBuf>, gmms: Vec<PathBuf>, out_dir: PathBuf) -> Result<ExitCode> {
    std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let stem = |p: &PathBuf| -> String {
        p.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "unnamed".into())
    };
    let mut reference: Option<gmmdec::grid::Signal> = None;
    for path in &signals {
        let (signal, _) = formats::read_signal(path)?;
        if let Some(first) = &reference {
            if first.grid() != signal.grid() {
                bail!(
                    "{} lives on a different grid than the first signal",
                    path.display()
                );
            }
        }
        formats::write_plot_csv(&out_dir.join(format!("{}.csv", stem(path))), &signal)?;
        if reference.is_none() {
            reference = Some(signal);
        }
    }
    let reference = reference.expect("at least one signal is required");
    for path in &gmms {
        let gmm = formats::read_gmm(path)?;
        if let Some(n) = gmm.dim() {
            if n != reference.grid().dim() {
                bail!("{} dimension differs from the signal grid", path.display());
            }
        }
        let est = rasterize(&gmm, reference.grid());
        formats::write_plot_csv(&out_dir.join(format!("{}_est.csv", stem(path))), &est)?;
        let residual = reference.sub(&est).map_err(|e| anyhow::anyhow!("{e}"))?;
        formats::write_plot_csv(
            &out_dir.join(format!("{}_residual.csv", stem(path))),
            &residual,
        )?;
    }
    println!("wrote plot data to {}", out_dir.display());
    Ok(ExitCode::SUCCESS)
}
