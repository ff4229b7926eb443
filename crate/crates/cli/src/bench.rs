//! Wall-clock, FLOP and peak-memory sweep of the BEV-SSM block against the
//! self-attention baseline on identical `N × C` inputs.

use std::io::Write;
use std::time::{Duration, Instant};

use gmfuse_core::autograd::Var;
use gmfuse_core::baseline::self_attention;
use gmfuse_core::bev::{encode, PeConfig, PolarGrid};
use gmfuse_core::block::{BevSsmBlock, BlockConfig};
use gmfuse_core::flops;
use gmfuse_core::nn::Init;
use gmfuse_core::pillar::GridConfig;

use crate::alloc::measure_peak;
use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const DEFAULT_SWEEP: [usize; 4] = [1024, 4096, 16384, 65536];
pub const MIN_N: usize = 1024;
pub const MAX_N: usize = 65536;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mechanism {
    BevSsm,
    SelfAttention,
}

impl Mechanism {
    pub fn name(self) -> &'static str {
        match self {
            Self::BevSsm => "bev-ssm",
            Self::SelfAttention => "self-attention",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub n: usize,
    pub mechanism: Mechanism,
    /// Median per-call wall time.
    pub millis: f64,
    pub flops: u64,
    pub peak_bytes: usize,
    /// Timed samples behind the median.
    pub samples: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct BenchOptions {
    pub samples: usize,
    /// Calls faster than this are repeated in batches until a batch takes this long.
    pub min_sample: Duration,
    /// A first call slower than this is taken as the only sample.
    pub single_sample_above: Option<Duration>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            samples: 5,
            min_sample: Duration::from_millis(20),
            single_sample_above: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub config: RunConfig,
    pub records: Vec<BenchRecord>,
}

impl BenchReport {
    pub fn records_for(&self, m: Mechanism) -> impl Iterator<Item = &BenchRecord> {
        self.records.iter().filter(move |r| r.mechanism == m)
    }

    /// Least-squares slope of `log(ms)` against `log(N)`.
    pub fn slope(&self, m: Mechanism) -> f64 {
        let pts: Vec<(f64, f64)> = self.records_for(m).map(|r| (r.n as f64, r.millis)).collect();
        loglog_slope(&pts)
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        let io = |e: std::io::Error| CliError::validation(format!("writing bench csv: {e}"));
        for line in self.config.to_text().lines() {
            writeln!(out, "# {line}").map_err(io)?;
        }
        let mut w = csv::Writer::from_writer(&mut out);
        let csv_err = |e: csv::Error| CliError::validation(format!("writing bench csv: {e}"));
        w.write_record(["n", "mechanism", "median_ms", "flops", "peak_bytes"]).map_err(csv_err)?;
        for r in &self.records {
            w.write_record([
                r.n.to_string(),
                r.mechanism.name().to_string(),
                format!("{:.4}", r.millis),
                r.flops.to_string(),
                r.peak_bytes.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(io)?;
        drop(w);
        for m in [Mechanism::BevSsm, Mechanism::SelfAttention] {
            writeln!(out, "# slope {} = {:.4}", m.name(), self.slope(m)).map_err(io)?;
        }
        Ok(())
    }
}

pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    if points.len() < 2 {
        return f64::NAN;
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Parses `"1024,4096,..."`.
pub fn parse_sweep(text: &str) -> Result<Vec<usize>> {
    let sweep = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| CliError::validation(format!("--sweep: `{}` is not a cell count", s.trim())))
        })
        .collect::<Result<Vec<usize>>>()?;
    validate_sweep(&sweep)?;
    Ok(sweep)
}

pub fn validate_sweep(sweep: &[usize]) -> Result<()> {
    if sweep.is_empty() {
        return Err(CliError::validation("--sweep: no sizes given"));
    }
    for &n in sweep {
        if !n.is_power_of_two() || !(MIN_N..=MAX_N).contains(&n) {
            return Err(CliError::validation(format!(
                "--sweep: {n} is not a power of two in [{MIN_N}, {MAX_N}]"
            )));
        }
    }
    if sweep.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CliError::validation("--sweep: sizes must be strictly increasing"));
    }
    Ok(())
}

/// Grid with `n` cells, square for even powers of two and `h × 2h` otherwise.
pub fn grid_dims(n: usize) -> (usize, usize) {
    let h = 1usize << (n.trailing_zeros() / 2);
    (h, n / h)
}

/// Median per-call time in milliseconds and the number of samples.
pub fn time_median(opts: &BenchOptions, mut f: impl FnMut()) -> (f64, usize) {
    let start = Instant::now();
    f();
    let first = start.elapsed();
    if opts.single_sample_above.is_some_and(|limit| first >= limit) || opts.samples <= 1 {
        return (first.as_secs_f64() * 1e3, 1);
    }
    let mut times = Vec::with_capacity(opts.samples);
    let batch = if first >= opts.min_sample {
        times.push(first.as_secs_f64());
        1
    } else {
        let per_call = first.as_secs_f64().max(1e-9);
        ((opts.min_sample.as_secs_f64() / per_call).ceil() as usize).clamp(1, 1 << 20)
    };
    while times.len() < opts.samples {
        let start = Instant::now();
        for _ in 0..batch {
            f();
        }
        times.push(start.elapsed().as_secs_f64() / batch as f64);
    }
    times.sort_by(f64::total_cmp);
    (times[times.len() / 2] * 1e3, times.len())
}

fn bench_block(cfg: &RunConfig, n: usize, opts: &BenchOptions) -> Result<BenchRecord> {
    let (h, w) = grid_dims(n);
    let c = cfg.channels;
    let grid = GridConfig::new(1.0, 0.0, h as f64, -(w as f64) / 2.0, w as f64 / 2.0)?;
    let polar = PolarGrid::from_default_ego(&grid);
    let block_cfg = BlockConfig {
        d_state: cfg.d_state,
        chunk_len: cfg.chunk_len,
        ..BlockConfig::new(c)
    };
    let block = BevSsmBlock::<f32>::new(&mut Init::new(cfg.seed), block_cfg, &polar)?;
    let pe = Var::constant(encode(&polar, &PeConfig::new(c, cfg.pe_base)?)?.enc.cast::<f32>()?);
    let x = Var::constant(Init::new(cfg.seed ^ 0xB1).uniform::<f32>([h, w, c], 1.0));
    let (out, peak_bytes) = measure_peak(|| block.forward(&x, &pe));
    out?;
    let (millis, samples) = time_median(opts, || {
        block.forward(&x, &pe).expect("validated above");
    });
    Ok(BenchRecord {
        n,
        mechanism: Mechanism::BevSsm,
        millis,
        flops: flops::bev_ssm_block(h as u64, w as u64, c as u64, cfg.d_state as u64).total(),
        peak_bytes,
        samples,
    })
}

fn bench_attention(cfg: &RunConfig, n: usize, opts: &BenchOptions) -> Result<BenchRecord> {
    let c = cfg.channels;
    let x = Init::new(cfg.seed ^ 0xB1).uniform::<f32>([n, c], 1.0);
    let mut peak_bytes = 0;
    let mut first = true;
    let mut failure = None;
    let (millis, samples) = time_median(opts, || {
        let (out, peak) = if first {
            measure_peak(|| self_attention(&x))
        } else {
            (self_attention(&x), peak_bytes)
        };
        if first {
            peak_bytes = peak;
            first = false;
        }
        if let Err(e) = out {
            failure = Some(e);
        }
    });
    if let Some(e) = failure {
        return Err(e.into());
    }
    Ok(BenchRecord {
        n,
        mechanism: Mechanism::SelfAttention,
        millis,
        flops: flops::attention(n as u64, c as u64).total(),
        peak_bytes,
        samples,
    })
}

pub fn run_bench(cfg: &RunConfig, sweep: &[usize], opts: &BenchOptions) -> Result<BenchReport> {
    validate_sweep(sweep)?;
    cfg.validate()?;
    let pool = cfg.pool()?;
    let mut records = Vec::with_capacity(2 * sweep.len());
    for &n in sweep {
        let (block, attention) = pool.install(|| (bench_block(cfg, n, opts), bench_attention(cfg, n, opts)));
        let (block, attention) = (block?, attention?);
        log::info!(
            "N={n}: bev-ssm {:.3} ms, self-attention {:.3} ms",
            block.millis,
            attention.millis
        );
        records.push(block);
        records.push(attention);
    }
    Ok(BenchReport { config: *cfg, records })
}
