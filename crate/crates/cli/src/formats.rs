//! On-disk formats.
//!
//! Signals travel as a JSON header next to a raw little-endian `f64` block
//! (`name.json` + `name.raw`, row-major, first axis slowest), or as a
//! single CSV file for 1D/2D grids. Mixtures are JSON documents listing
//! `{weight, mean, sigma}` with `sigma` the covariance square root;
//! `covariance` is accepted on input instead and converted. Point clouds
//! are plain CSV rows; `#` starts a comment line.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gmmdec::greedy::{DecompositionResult, StopReason};
use gmmdec::grid::{Grid, PointCloud, Signal};
use gmmdec::mixture::{GaussianComponent, Gmm};
use gmmdec::optim::SolveStatus;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Generator identifier recorded in headers: the noise stream is ChaCha12
/// keyed by the seed, sampled through the ziggurat normal sampler.
pub const RNG_ID: &str = "chacha12+ziggurat-normal";

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Provenance {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rng: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct SignalHeader {
    dim: usize,
    counts: Vec<usize>,
    origin: Vec<f64>,
    spacing: Vec<f64>,
    layout: String,
    dtype: String,
    raw_file: String,
    #[serde(default)]
    provenance: Provenance,
}

const LAYOUT: &str = "row-major-first-axis-slowest";
const DTYPE: &str = "f64-le";

fn is_csv(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Write a signal; `.csv` selects the single-file format (1D/2D only),
/// anything else the JSON-header-plus-raw-block pair.
pub fn write_signal(path: &Path, signal: &Signal, provenance: &Provenance) -> Result<()> {
    if is_csv(path) {
        write_signal_csv(path, signal, provenance)
    } else {
        write_signal_raw(path, signal, provenance)
    }
}

pub fn read_signal(path: &Path) -> Result<(Signal, Provenance)> {
    if is_csv(path) {
        read_signal_csv(path)
    } else {
        read_signal_raw(path)
    }
}

fn write_signal_raw(path: &Path, signal: &Signal, provenance: &Provenance) -> Result<()> {
    let raw_path: PathBuf = path.with_extension("raw");
    let raw_name = raw_path
        .file_name()
        .context("output path has no file name")?
        .to_string_lossy()
        .into_owned();
    let grid = signal.grid();
    let header = SignalHeader {
        dim: grid.dim(),
        counts: grid.counts().to_vec(),
        origin: grid.origin().to_vec(),
        spacing: grid.spacing().to_vec(),
        layout: LAYOUT.to_string(),
        dtype: DTYPE.to_string(),
        raw_file: raw_name,
        provenance: provenance.clone(),
    };
    let mut bytes = Vec::with_capacity(signal.values().len() * 8);
    for v in signal.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&raw_path, bytes).with_context(|| format!("writing {}", raw_path.display()))?;
    fs::write(path, serde_json::to_vec_pretty(&header)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_signal_raw(path: &Path) -> Result<(Signal, Provenance)> {
    let text = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let header: SignalHeader =
        serde_json::from_slice(&text).with_context(|| format!("parsing {}", path.display()))?;
    if header.layout != LAYOUT {
        bail!("unsupported layout '{}'", header.layout);
    }
    if header.dtype != DTYPE {
        bail!("unsupported dtype '{}'", header.dtype);
    }
    let grid = Grid::uniform(&header.origin, &header.spacing, &header.counts)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let raw_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&header.raw_file);
    let bytes = fs::read(&raw_path).with_context(|| format!("reading {}", raw_path.display()))?;
    if bytes.len() != grid.len() * 8 {
        bail!(
            "raw block {} holds {} bytes, expected {}",
            raw_path.display(),
            bytes.len(),
            grid.len() * 8
        );
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let signal = Signal::new(grid, values).map_err(|e| anyhow::anyhow!("{e}"))?;
    Ok((signal, header.provenance))
}

fn provenance_comments(p: &Provenance) -> String {
    let mut out = String::new();
    if let Some(seed) = p.seed {
        out += &format!("# seed: {}\n", seed);
    }
    if let Some(snr) = p.snr_db {
        out += &format!("# snr_db: {:?}\n", snr);
    }
    if let Some(sigma) = p.noise_sigma {
        out += &format!("# noise_sigma: {:?}\n", sigma);
    }
    if let Some(rng) = &p.rng {
        out += &format!("# rng: {}\n", rng);
    }
    if let Some(source) = &p.source {
        out += &format!("# source: {}\n", source);
    }
    out
}

fn join_floats(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{:?}", v))
        .collect::<Vec<_>>()
        .join(",")
}

fn write_signal_csv(path: &Path, signal: &Signal, provenance: &Provenance) -> Result<()> {
    let grid = signal.grid();
    if grid.dim() > 2 {
        bail!("the CSV signal format supports 1D and 2D grids only");
    }
    let mut out = String::new();
    out += &format!("# dim: {}\n", grid.dim());
    out += &format!(
        "# counts: {}\n",
        grid.counts()
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",")
    );
    out += &format!("# origin: {}\n", join_floats(grid.origin()));
    out += &format!("# spacing: {}\n", join_floats(grid.spacing()));
    out += &provenance_comments(provenance);
    if grid.dim() == 1 {
        for (flat, v) in signal.values().iter().enumerate() {
            out += &format!("{:?},{:?}\n", grid.point(flat)[0], v);
        }
    } else {
        let k2 = grid.counts()[1];
        for row in signal.values().chunks_exact(k2) {
            out += &join_floats(row);
            out.push('\n');
        }
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_signal_csv(path: &Path) -> Result<(Signal, Provenance)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut counts: Option<Vec<usize>> = None;
    let mut origin: Option<Vec<f64>> = None;
    let mut spacing: Option<Vec<f64>> = None;
    let mut provenance = Provenance::default();
    let mut rows: Vec<&str> = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((key, value)) = comment.split_once(':') {
                let value = value.trim();
                match key.trim() {
                    "counts" => {
                        counts = Some(
                            value
                                .split(',')
                                .map(|t| t.trim().parse())
                                .collect::<std::result::Result<_, _>>()?,
                        )
                    }
                    "origin" => {
                        origin = Some(
                            value
                                .split(',')
                                .map(|t| t.trim().parse())
                                .collect::<std::result::Result<_, _>>()?,
                        )
                    }
                    "spacing" => {
                        spacing = Some(
                            value
                                .split(',')
                                .map(|t| t.trim().parse())
                                .collect::<std::result::Result<_, _>>()?,
                        )
                    }
                    "seed" => provenance.seed = value.parse().ok(),
                    "snr_db" => provenance.snr_db = value.parse().ok(),
                    "noise_sigma" => provenance.noise_sigma = value.parse().ok(),
                    "rng" => provenance.rng = Some(value.to_string()),
                    "source" => provenance.source = Some(value.to_string()),
                    _ => {}
                }
            }
            continue;
        }
        rows.push(line);
    }
    let counts = counts.context("CSV signal is missing the '# counts:' header")?;
    let origin = origin.context("CSV signal is missing the '# origin:' header")?;
    let spacing = spacing.context("CSV signal is missing the '# spacing:' header")?;
    let grid = Grid::uniform(&origin, &spacing, &counts).map_err(|e| anyhow::anyhow!("{e}"))?;
    let mut values = Vec::with_capacity(grid.len());
    if grid.dim() == 1 {
        for row in rows {
            let (_, v) = row
                .split_once(',')
                .context("1D CSV rows must be 'coordinate,value'")?;
            values.push(v.trim().parse::<f64>()?);
        }
    } else if grid.dim() == 2 {
        for row in rows {
            for field in row.split(',') {
                values.push(field.trim().parse::<f64>()?);
            }
        }
    } else {
        bail!("the CSV signal format supports 1D and 2D grids only");
    }
    let signal = Signal::new(grid, values).map_err(|e| anyhow::anyhow!("{e}"))?;
    Ok((signal, provenance))
}

#[derive(Serialize, Deserialize)]
struct GmmComponentDoc {
    weight: f64,
    mean: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    covariance: Option<Vec<Vec<f64>>>,
}

#[derive(Serialize, Deserialize)]
struct GmmDoc {
    dim: usize,
    components: Vec<GmmComponentDoc>,
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn rows_to_matrix(rows: &[Vec<f64>], n: usize) -> Result<DMatrix<f64>> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        bail!("matrix rows do not form an {n}x{n} block");
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

pub fn write_gmm(path: &Path, gmm: &Gmm, dim: usize) -> Result<()> {
    let doc = GmmDoc {
        dim: gmm.dim().unwrap_or(dim),
        components: gmm
            .iter()
            .map(|c| GmmComponentDoc {
                weight: c.weight(),
                mean: c.mean().iter().cloned().collect(),
                sigma: Some(matrix_to_rows(c.sigma())),
                covariance: None,
            })
            .collect(),
    };
    fs::write(path, serde_json::to_vec_pretty(&doc)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_gmm(path: &Path) -> Result<Gmm> {
    let text = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let doc: GmmDoc =
        serde_json::from_slice(&text).with_context(|| format!("parsing {}", path.display()))?;
    let mut components = Vec::with_capacity(doc.components.len());
    for (i, c) in doc.components.iter().enumerate() {
        if c.mean.len() != doc.dim {
            bail!("component {i}: mean length differs from the declared dimension");
        }
        let mean = DVector::from_column_slice(&c.mean);
        let comp = match (&c.sigma, &c.covariance) {
            (Some(s), None) => {
                let sigma = rows_to_matrix(s, doc.dim)?;
                GaussianComponent::new(c.weight, mean, sigma)
            }
            (None, Some(cv)) => {
                let cov = rows_to_matrix(cv, doc.dim)?;
                GaussianComponent::from_covariance(c.weight, mean, cov)
            }
            (Some(_), Some(_)) => bail!("component {i}: give sigma or covariance, not both"),
            (None, None) => bail!("component {i}: missing sigma (or covariance)"),
        }
        .map_err(|e| anyhow::anyhow!("component {i}: {e}"))?;
        components.push(comp);
    }
    Gmm::new(components).map_err(|e| anyhow::anyhow!("{e}"))
}

fn stop_reason_str(reason: StopReason) -> &'static str {
    match reason {
        StopReason::SnrReached => "snr_reached",
        StopReason::MaxComponents => "max_components",
        StopReason::Stalled => "stalled",
    }
}

fn solve_status_str(status: SolveStatus) -> &'static str {
    match status {
        SolveStatus::Converged => "converged",
        SolveStatus::MaxIter => "max_iter",
        SolveStatus::LineSearchFailure => "line_search_failure",
    }
}

#[derive(Serialize)]
struct TraceIterationDoc {
    index: usize,
    seed_point: Vec<f64>,
    a0: f64,
    residual_l2_sq_before: f64,
    residual_l2_sq_after: f64,
    snr_stop_db: f64,
    single_status: String,
    joint_status: String,
    pruned: usize,
    wall_seconds: f64,
}

#[derive(Serialize)]
struct TraceDoc {
    stop_reason: String,
    seed: u64,
    rng: String,
    snr_stop_target_db: f64,
    total_seconds: f64,
    iterations: Vec<TraceIterationDoc>,
}

pub fn write_trace(path: &Path, result: &DecompositionResult, snr_target: f64) -> Result<()> {
    let doc = TraceDoc {
        stop_reason: stop_reason_str(result.stop_reason).to_string(),
        seed: result.seed,
        rng: RNG_ID.to_string(),
        snr_stop_target_db: snr_target,
        total_seconds: result.total_seconds,
        iterations: result
            .trace
            .iter()
            .map(|r| TraceIterationDoc {
                index: r.index,
                seed_point: r.seed_point.clone(),
                a0: r.a0,
                residual_l2_sq_before: r.residual_l2_sq_before,
                residual_l2_sq_after: r.residual_l2_sq_after,
                snr_stop_db: r.snr_stop_db,
                single_status: solve_status_str(r.single_solve.status).to_string(),
                joint_status: solve_status_str(r.joint_solve.status).to_string(),
                pruned: r.pruned,
                wall_seconds: r.wall_seconds,
            })
            .collect(),
    };
    fs::write(path, serde_json::to_vec_pretty(&doc)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_points(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut out = String::new();
    out += &format!("# dim: {}\n", cloud.dim());
    for p in cloud.iter() {
        out += &join_floats(p);
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_points(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut dim = None;
    let mut coords = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("parsing point row '{line}'"))?;
        match dim {
            None => dim = Some(fields.len()),
            Some(d) if d != fields.len() => {
                bail!(
                    "point rows disagree on the dimension ({d} vs {})",
                    fields.len()
                )
            }
            _ => {}
        }
        coords.extend(fields);
    }
    let dim = dim.context("point cloud file holds no points")?;
    PointCloud::new(dim, coords).map_err(|e| anyhow::anyhow!("{e}"))
}

/// Dense plot matrix: 1D signals become `coordinate,value` rows, 2D
/// signals a `k1 x k2` matrix, both under `#` grid metadata comments.
pub fn write_plot_csv(path: &Path, signal: &Signal) -> Result<()> {
    write_signal_csv(path, signal, &Provenance::default())
}
