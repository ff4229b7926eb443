use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use gmfuse_core::autograd::Var;
use gmfuse_core::fusion::GmFuseNet;
use gmfuse_core::pillar::{pillarize, FEATURES};
use gmfuse_core::Tensor;

use crate::bench::{run_bench, BenchOptions, BenchReport};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::io::{read_points, read_tensor, write_sidecar, write_tensor};
use crate::selftest::{run_selftest, Faults, SelftestReport};

#[derive(Debug, Clone, PartialEq)]
pub struct PillarizeSummary {
    pub points: usize,
    pub occupied: usize,
    /// Points that landed in a pillar.
    pub binned: usize,
    pub dropped: usize,
    pub dims: [usize; 3],
    pub sidecar: PathBuf,
}

pub fn cmd_pillarize(input: &Path, cfg: &RunConfig, output: &Path) -> Result<PillarizeSummary> {
    let grid_cfg = cfg.grid()?;
    let points = read_points(input)?;
    let grid = cfg.pool()?.install(|| pillarize(&points, &grid_cfg))?;
    write_tensor(output, &grid.features)?;
    let dims = [grid_cfg.height(), grid_cfg.width(), FEATURES];
    let sidecar = write_sidecar(
        output,
        &[
            ("input", input.display().to_string()),
            ("points", points.len().to_string()),
            ("occupied_pillars", grid.occupied().to_string()),
            ("binned_points", grid.total_points().to_string()),
            ("dropped_points", grid.dropped.to_string()),
            ("dims", format!("{}x{}x{}", dims[0], dims[1], dims[2])),
        ],
        &cfg.to_text(),
    )?;
    Ok(PillarizeSummary {
        points: points.len(),
        occupied: grid.occupied(),
        binned: grid.total_points(),
        dropped: grid.dropped,
        dims,
        sidecar,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardSummary {
    pub dims: [usize; 3],
    pub mean: f64,
    pub max_abs: f64,
    pub sidecar: PathBuf,
}

/// Runs the seeded fusion network on a pillar grid against the seeded
/// stand-in camera image of the same size.
pub fn forward_tensor(pillars: &Tensor, cfg: &RunConfig) -> Result<Tensor> {
    let net_cfg = cfg.network()?;
    let want = [net_cfg.grid.height(), net_cfg.grid.width(), FEATURES];
    if pillars.shape() != want {
        return Err(CliError::validation(format!(
            "dim mismatch: grid file is {:?}, config expects {want:?}",
            pillars.shape()
        )));
    }
    cfg.pool()?.install(|| -> Result<Tensor> {
        let net = GmFuseNet::<f64>::new(cfg.seed, net_cfg)?;
        let image = GmFuseNet::<f64>::synthetic_image(cfg.seed, want[0], want[1]);
        let out = net.forward(&Var::constant(pillars.clone()), &Var::constant(image))?;
        Ok(out.value().clone())
    })
}

pub fn cmd_forward(input: &Path, cfg: &RunConfig, output: &Path) -> Result<ForwardSummary> {
    let pillars = read_tensor(input)?;
    let out = forward_tensor(&pillars, cfg).map_err(|e| match e {
        CliError::Validation(m) => CliError::validation(format!("{}: {m}", input.display())),
        e => e,
    })?;
    write_tensor(output, &out)?;
    let [h, w, c] = out.dims3("forward")?;
    let mean = out.data().iter().sum::<f64>() / out.len() as f64;
    let max_abs = out.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let sidecar = write_sidecar(
        output,
        &[
            ("input", input.display().to_string()),
            ("dims", format!("{h}x{w}x{c}")),
            ("mean", format!("{mean:.9e}")),
            ("max_abs", format!("{max_abs:.9e}")),
        ],
        &cfg.to_text(),
    )?;
    Ok(ForwardSummary {
        dims: [h, w, c],
        mean,
        max_abs,
        sidecar,
    })
}

/// Runs the invariant suite; failures become [`CliError::Invariant`] after
/// the report has been written.
pub fn cmd_selftest(cfg: &RunConfig, only: Option<&str>, faults: &Faults, output: Option<&Path>) -> Result<SelftestReport> {
    let report = cfg.pool()?.install(|| run_selftest(cfg.seed, only, faults))?;
    if let Some(path) = output {
        let mut text = report.to_text();
        text.push_str("\n[config]\n");
        text.push_str(&cfg.to_text());
        std::fs::write(path, text).map_err(|e| CliError::io(path, e))?;
    }
    Ok(report)
}

pub fn cmd_bench(cfg: &RunConfig, sweep: &[usize], opts: &BenchOptions, output: Option<&Path>) -> Result<BenchReport> {
    let report = run_bench(cfg, sweep, opts)?;
    match output {
        Some(path) => {
            let file = File::create(path).map_err(|e| CliError::io(path, e))?;
            report.write_csv(BufWriter::new(file))?;
        }
        None => report.write_csv(std::io::stdout().lock())?,
    }
    Ok(report)
}
