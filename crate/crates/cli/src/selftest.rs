//! Invariant suite behind `gmfuse selftest`.
//!
//! Every suite draws its inputs from one seed, printed with the result, so a
//! failure can be replayed with `--suite NAME --seed SEED`.

use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use gmfuse_core::autograd::Var;
use gmfuse_core::bev::{encode, PeConfig, PolarGrid, DEFAULT_BASE};
use gmfuse_core::block::{adaptive_fuse, BevSsmBlock, BlockConfig, FuseMlp};
use gmfuse_core::flops;
use gmfuse_core::gradcheck::{check_param, Entries, FD_STEP};
use gmfuse_core::nn::{Init, Params};
use gmfuse_core::pillar::eigen::symmetric_eigenvalues;
use gmfuse_core::pillar::features::shape_descriptors;
use gmfuse_core::pillar::{pillarize, GridConfig, LidarPoint, FEATURES};
use gmfuse_core::scan_order::{ScanOrder, ScanPattern};
use gmfuse_core::ssm::aware::decay_factors;
use gmfuse_core::ssm::scan::{scan_chunked, scan_state};
use gmfuse_core::ssm::{scan_parallel, scan_sequential, DirectionalTransition, ScanSequences};
use gmfuse_core::tensor::max_relative_error;
use gmfuse_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CliError, Result};

/// Deliberate defects for checking that the suite notices them.
#[derive(Debug, Clone, Copy, Default)]
pub struct Faults {
    /// Evaluates the distance decay as `exp(+λ d / d_max)`.
    pub flip_decay_sign: bool,
}

type SuiteFn = fn(u64, &Faults) -> Result<String, String>;

pub struct Suite {
    pub name: &'static str,
    run: SuiteFn,
}

pub const SUITES: [Suite; 12] = [
    Suite { name: "scan-oracle", run: scan_oracle },
    Suite { name: "recurrence-identity", run: recurrence_identity },
    Suite { name: "serialization-bijection", run: serialization_bijection },
    Suite { name: "pillar-permutation", run: pillar_permutation },
    Suite { name: "pillar-descriptors", run: pillar_descriptors },
    Suite { name: "positional-encoding", run: positional_encoding },
    Suite { name: "decay-monotonicity", run: decay_monotonicity },
    Suite { name: "directional-init", run: directional_init },
    Suite { name: "fusion-convexity", run: fusion_convexity },
    Suite { name: "gradients", run: gradients },
    Suite { name: "flop-scaling", run: flop_scaling },
    Suite { name: "thread-determinism", run: thread_determinism },
];

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub seed: u64,
    pub millis: f64,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct SelftestReport {
    pub results: Vec<SuiteResult>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &SuiteResult> {
        self.results.iter().filter(|r| !r.passed)
    }

    /// One `key=value` line per suite and a closing summary line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            let _ = writeln!(
                out,
                "suite={} status={} seed={} ms={:.1} detail=\"{}\"",
                r.name,
                if r.passed { "pass" } else { "fail" },
                r.seed,
                r.millis,
                r.detail.replace('"', "'")
            );
        }
        let failed = self.failures().count();
        let _ = writeln!(
            out,
            "summary suites={} passed={} failed={failed}",
            self.results.len(),
            self.results.len() - failed
        );
        out
    }

    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            return Ok(self);
        }
        let names: Vec<String> = self
            .failures()
            .map(|r| format!("{} (seed {}): {}", r.name, r.seed, r.detail))
            .collect();
        Err(CliError::Invariant(names.join("; ")))
    }
}

/// Seed of suite `index` for base seed `base`.
pub fn suite_seed(base: u64, index: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

/// Runs every suite, or only `only` with `base` used as its seed directly.
pub fn run_selftest(base: u64, only: Option<&str>, faults: &Faults) -> Result<SelftestReport> {
    if let Some(name) = only {
        if !SUITES.iter().any(|s| s.name == name) {
            let names: Vec<&str> = SUITES.iter().map(|s| s.name).collect();
            return Err(CliError::validation(format!("unknown suite `{name}`; expected one of {}", names.join(", "))));
        }
    }
    let mut results = Vec::new();
    for (i, suite) in SUITES.iter().enumerate() {
        if only.is_some_and(|n| n != suite.name) {
            continue;
        }
        let seed = if only.is_some() { base } else { suite_seed(base, i) };
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| (suite.run)(seed, faults)))
            .unwrap_or_else(|p| Err(format!("panicked: {}", panic_message(&p))));
        let millis = start.elapsed().as_secs_f64() * 1e3;
        let (passed, detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        results.push(SuiteResult {
            name: suite.name,
            passed,
            seed,
            millis,
            detail,
        });
    }
    Ok(SelftestReport { results })
}

fn panic_message(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown panic".into())
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T>(r: gmfuse_core::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, g: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| g.random_range(lo..hi)).expect("shape matches")
}

fn randomize<M: Params<f64>>(model: &mut M, seed: u64, bound: f64) {
    let mut init = Init::new(seed);
    for (_, v) in model.params_mut() {
        *v = Var::param(init.uniform(v.shape().to_vec(), bound));
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn loop_scan(gates: &[f64], drive: &[f64], d: usize) -> Vec<f64> {
    let mut h = vec![0.0; gates.len()];
    for t in 0..gates.len() / d {
        for c in 0..d {
            let prev = if t == 0 { 0.0 } else { h[(t - 1) * d + c] };
            h[t * d + c] = gates[t * d + c] * prev + drive[t * d + c];
        }
    }
    h
}

fn scan_oracle(seed: u64, _: &Faults) -> Result<String, String> {
    let mut g = rng(seed);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for &len in &[1usize, 2, 16, 256, 4096] {
        for &d in &[1usize, 16, 32] {
            for _ in 0..2 {
                let b = uniform(&[len, d], -1.0, 1.0, &mut g);
                let c = uniform(&[len, d], -1.0, 1.0, &mut g);
                let delta = uniform(&[len, d], -3.0, 3.0, &mut g);
                let a = uniform(&[d], -2.0, 2.0, &mut g);
                let gates: Vec<f64> = delta.data().iter().enumerate().map(|(k, &x)| sigmoid(a.data()[k % d] + x)).collect();
                let drive: Vec<f64> = b.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
                let seq = ok(ScanSequences::new(b, c, delta))?;
                let h = ok(scan_parallel(&seq, &a))?;
                worst = worst.max(max_relative_error(h.data(), &loop_scan(&gates, &drive, d), 1e-12));
                count += 1;
            }
        }
    }
    let (len, d) = (4096, 16);
    let a = uniform(&[d], -1.0, 1.0, &mut g);
    let delta = ok(Tensor::from_fn([len, d], |k| -8.0 - a.data()[k % d]))?;
    let seq = ok(ScanSequences::new(uniform(&[len, d], -1.0, 1.0, &mut g), uniform(&[len, d], -1.0, 1.0, &mut g), delta))?;
    let state = ok(scan_state(&seq, &a))?;
    let want = ok(scan_sequential(&state.gates, &state.drive))?;
    let stress = max_relative_error(state.hidden.data(), want.data(), 1e-12);
    ensure!(worst <= 1e-5, "max rel error {worst:.3e} over {count} random instances exceeds 1e-5");
    ensure!(stress <= 1e-5, "underflow case max rel error {stress:.3e} exceeds 1e-5");
    Ok(format!("{count} instances max rel {worst:.2e}, underflow case {stress:.2e}"))
}

fn recurrence_identity(_: u64, _: &Faults) -> Result<String, String> {
    let h = ok(scan_chunked(&Tensor::full([64, 1], 0.5), &Tensor::ones([64, 1]), 16))?;
    let mut worst: f64 = 0.0;
    for t in 1..=64 {
        worst = worst.max((h.data()[t - 1] - 2.0 * (1.0 - 0.5f64.powi(t as i32))).abs());
    }
    ensure!(worst <= 1e-10, "geometric series off by {worst:.3e}");
    Ok(format!("max abs error {worst:.2e}"))
}

fn serialization_bijection(_: u64, _: &Faults) -> Result<String, String> {
    let mut grids = 0;
    for h in 1..=64 {
        for w in 1..=64 {
            for p in [ScanPattern::Raster, ScanPattern::Zigzag] {
                let o = ok(ScanOrder::new(p, h, w))?;
                let mut seen = vec![false; h * w];
                for (t, &i) in o.perm().iter().enumerate() {
                    ensure!(i < h * w && !seen[i], "{} {h}x{w}: cell {i} repeated or out of range", p.name());
                    seen[i] = true;
                    ensure!(o.inv()[i] == t, "{} {h}x{w}: inverse mismatch at {t}", p.name());
                }
                if p == ScanPattern::Zigzag {
                    for t in 1..o.len() {
                        let (a, b) = (o.cell(t - 1), o.cell(t));
                        let dist = a.0.abs_diff(b.0) + a.1.abs_diff(b.1);
                        ensure!(dist == 1, "zigzag {h}x{w}: step {t} jumps {dist}");
                    }
                }
                let x = ok(Tensor::from_fn([h, w, 2], |i| (i as f64 * 0.37).sin()))?;
                let back = ok(o.deserialize(&ok(o.serialize(&x))?))?;
                ensure!(back == x, "{} {h}x{w}: round trip is not bitwise", p.name());
                grids += 1;
            }
        }
    }
    Ok(format!("{grids} grids"))
}

fn random_cloud(g: &mut ChaCha8Rng, n: usize, extent: (f64, f64, f64, f64)) -> Vec<LidarPoint> {
    (0..n)
        .map(|_| {
            LidarPoint::new(
                g.random_range(extent.0..extent.1),
                g.random_range(extent.2..extent.3),
                g.random_range(-2.0..2.0),
                g.random_range(0.0..1.0),
                g.random_range(0..64),
            )
            .expect("finite point")
        })
        .collect()
}

fn pillar_permutation(seed: u64, _: &Faults) -> Result<String, String> {
    let mut g = rng(seed);
    let cfg = ok(GridConfig::new(1.0, 0.0, 8.0, -4.0, 4.0))?;
    let mut pts = random_cloud(&mut g, 3000, (-1.0, 9.0, -5.0, 5.0));
    let a = ok(pillarize(&pts, &cfg))?;
    for _ in 0..5 {
        pts.shuffle(&mut g);
        let b = ok(pillarize(&pts, &cfg))?;
        ensure!(a.features == b.features, "features changed under a permutation of the input");
        ensure!(a.dropped == b.dropped && a.occupancy == b.occupancy, "counts changed under a permutation");
    }
    ensure!(a.total_points() + a.dropped == pts.len(), "points not conserved");
    Ok(format!("{} occupied pillars bitwise stable over 5 shuffles", a.occupied()))
}

/// Closed-form roots of the characteristic cubic of a symmetric 3×3 matrix.
fn cubic_eigenvalues(a: [[f64; 3]; 3]) -> [f64; 3] {
    let p1 = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
    let q = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
    let p2 = (a[0][0] - q).powi(2) + (a[1][1] - q).powi(2) + (a[2][2] - q).powi(2) + 2.0 * p1;
    if p2 == 0.0 {
        return [q; 3];
    }
    let p = (p2 / 6.0).sqrt();
    let b: Vec<Vec<f64>> = (0..3)
        .map(|i| (0..3).map(|j| (a[i][j] - if i == j { q } else { 0.0 }) / p).collect())
        .collect();
    let det = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1]) - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
        + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
    let phi = (det / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
    let e1 = q + 2.0 * p * phi.cos();
    let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    [e1, 3.0 * q - e1 - e3, e3]
}

fn pillar_descriptors(seed: u64, _: &Faults) -> Result<String, String> {
    let mut g = rng(seed);
    let cfg = ok(GridConfig::new(1.0, 0.0, 40.0, -20.0, 20.0))?;
    let pts = random_cloud(&mut g, 12_000, (0.0, 40.0, -20.0, 20.0));
    let grid = ok(pillarize(&pts, &cfg))?;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for (cell, &m) in grid.occupancy.iter().enumerate() {
        if m < 3 {
            continue;
        }
        let f = &grid.features.data()[cell * FEATURES..(cell + 1) * FEATURES];
        worst = worst.max((f[10] + f[11] + f[12] - 1.0).abs());
        checked += 1;
    }
    ensure!(checked >= 1000, "only {checked} pillars with three or more points");
    ensure!(worst <= 1e-10, "descriptor simplex off by {worst:.3e}");

    let line: Vec<LidarPoint> = (0..10)
        .map(|i| LidarPoint::new(0.01 * i as f64, 0.02 * i as f64, -0.03 * i as f64, 1.0, 0).expect("finite"))
        .collect();
    let lin = shape_descriptors(&line)[0];
    ensure!(lin >= 0.999, "collinear pillar linearity {lin}");

    let mut eig_worst: f64 = 0.0;
    for _ in 0..500 {
        let m: Vec<f64> = (0..9).map(|_| g.random_range(-1.0..1.0)).collect();
        let mut s = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                s[i][j] = (0..3).map(|k| m[i * 3 + k] * m[j * 3 + k]).sum();
            }
        }
        let got = symmetric_eigenvalues(s);
        let want = cubic_eigenvalues(s);
        let scale = want[0].abs().max(1.0);
        for k in 0..3 {
            eig_worst = eig_worst.max((got[k] - want[k]).abs() / scale);
        }
    }
    ensure!(eig_worst <= 1e-8, "eigenvalues differ from the cubic roots by {eig_worst:.3e}");
    Ok(format!("{checked} pillars simplex {worst:.1e}, linearity {lin:.6}, eigen {eig_worst:.1e}"))
}

fn positional_encoding(_: u64, _: &Faults) -> Result<String, String> {
    let pg = PolarGrid::from_default_ego(&GridConfig::default());
    let pe = ok(encode(&pg, &ok(PeConfig::new(16, DEFAULT_BASE))?))?;
    let e = pe.enc.data();
    ensure!(e.iter().all(|v| (-1.0..=1.0).contains(v)), "encoding leaves [-1, 1]");
    let worst = e
        .chunks_exact(2)
        .map(|p| (p[0] * p[0] + p[1] * p[1] - 1.0).abs())
        .fold(0.0, f64::max);
    ensure!(worst <= 1e-12, "sin^2 + cos^2 off by {worst:.3e}");
    Ok(format!("{} values", e.len()))
}

fn decay_monotonicity(seed: u64, faults: &Faults) -> Result<String, String> {
    let mut g = rng(seed);
    let decay = |d: &[f64], lambda: f64, d_max: f64| {
        let sign = if faults.flip_decay_sign { -1.0 } else { 1.0 };
        decay_factors(d, sign * lambda, d_max)
    };
    for _ in 0..20 {
        let lambda = g.random_range(0.05..4.0);
        let d_max = g.random_range(1.0..100.0);
        let mut d: Vec<f64> = (0..200).map(|_| g.random_range(0.0..d_max)).collect();
        d.push(0.0);
        d.push(d_max);
        d.sort_by(f64::total_cmp);
        d.dedup();
        let f = decay(&d, lambda, d_max);
        ensure!(f[0] == 1.0, "decay(0) = {} for lambda {lambda}", f[0]);
        let end = *f.last().expect("non-empty");
        ensure!((end - (-lambda).exp()).abs() <= 1e-12, "decay(d_max) = {end}, want exp(-{lambda})");
        if let Some(k) = f.windows(2).position(|w| w[1] >= w[0]) {
            return Err(format!("not strictly decreasing at d = {} (lambda {lambda})", d[k + 1]));
        }
    }
    Ok("20 random decay profiles".into())
}

fn directional_init(seed: u64, _: &Faults) -> Result<String, String> {
    let t = DirectionalTransition::<f64>::new(&mut Init::new(seed), 16);
    let w = ok(t.weights(ScanPattern::Raster))?.value().clone().into_vec();
    ensure!(w[0] > w[1] && w[1] > w[2], "raster weights {w:?} not forward > lateral > backward");
    Ok(format!("raster weights {:.3} > {:.3} > {:.3}", w[0], w[1], w[2]))
}

fn fusion_convexity(seed: u64, _: &Faults) -> Result<String, String> {
    let mut g = rng(seed);
    let mut worst: f64 = 0.0;
    let mut simplex: f64 = 0.0;
    for trial in 0..20 {
        let mut mlp = FuseMlp::<f64>::new(&mut Init::new(seed ^ trial), 8);
        randomize(&mut mlp, seed.wrapping_add(trial), 2.0);
        let x = Var::constant(uniform(&[6, 6, 8], -3.0, 3.0, &mut g));
        let (out, w) = ok(adaptive_fuse(&[x.clone(), x.clone(), x.clone(), x.clone()], &mlp))?;
        worst = worst.max(out.value().max_abs_diff(x.value()));
        simplex = simplex.max((w.value().data().iter().sum::<f64>() - 1.0).abs());
        ensure!(w.value().data().iter().all(|&v| v >= 0.0), "negative fusion weight");
        let branches: Vec<Var> = (0..4).map(|_| Var::constant(uniform(&[6, 6, 8], -3.0, 3.0, &mut g))).collect();
        let (_, w) = ok(adaptive_fuse(&branches, &mlp))?;
        simplex = simplex.max((w.value().data().iter().sum::<f64>() - 1.0).abs());
    }
    ensure!(worst <= 1e-12, "identical branches fused with error {worst:.3e}");
    ensure!(simplex <= 1e-6, "weights sum off by {simplex:.3e}");
    Ok(format!("identity error {worst:.1e}, simplex error {simplex:.1e}"))
}

fn toy_block(seed: u64) -> Result<(BevSsmBlock, Var, Var), String> {
    let grid = ok(GridConfig::new(1.0, 0.0, 8.0, -4.0, 4.0))?;
    let polar = PolarGrid::from_default_ego(&grid);
    let mut block = ok(BevSsmBlock::new(&mut Init::new(seed), BlockConfig::new(8), &polar))?;
    randomize(&mut block, seed.wrapping_add(1), 0.5);
    let pe = ok(encode(&polar, &ok(PeConfig::new(8, DEFAULT_BASE))?))?;
    let x = Var::constant(uniform(&[8, 8, 8], -1.0, 1.0, &mut rng(seed.wrapping_add(2))));
    Ok((block, x, Var::constant(pe.enc)))
}

pub const GRADIENT_PARAMS: [&str; 7] = [
    "ssm_raster.lambda_raw",
    "ssm_zigzag.lambda_raw",
    "ssm_raster.transition.logits",
    "ssm_zigzag.transition.logits",
    "fuse.hidden.weight",
    "fuse.out.weight",
    "gate_logits",
];

fn gradients(seed: u64, _: &Faults) -> Result<String, String> {
    let (mut block, x, pe) = toy_block(seed)?;
    let r = uniform(&[8, 8, 8], -1.0, 1.0, &mut rng(seed.wrapping_add(3)));
    let probe = Var::constant(r);
    let mut worst: f64 = 0.0;
    for name in GRADIENT_PARAMS {
        let report = ok(check_param(
            &mut block,
            name,
            |b| b.forward(&x, &pe)?.mul(&probe)?.sum_all(),
            Entries::AtMost(16),
            FD_STEP,
        ))?;
        ensure!(report.max_rel_error <= 1e-4, "{name}: rel error {:.3e} at {:?}", report.max_rel_error, report.worst);
        worst = worst.max(report.max_rel_error);
    }
    Ok(format!("{} parameters, max rel error {worst:.2e}", GRADIENT_PARAMS.len()))
}

fn flop_scaling(_: u64, _: &Faults) -> Result<String, String> {
    for n in [1024u64, 4096, 16384] {
        let side = (n as f64).sqrt() as u64;
        for c in [8u64, 16] {
            let (a, b) = (flops::attention(n, c), flops::attention(4 * n, c));
            ensure!(b.leading == 16 * a.leading, "attention leading term at N={n}, C={c} not quadrupled twice");
            let (a, b) = (flops::bev_ssm_block(side, side, c, 16), flops::bev_ssm_block(2 * side, 2 * side, c, 16));
            ensure!(b.leading == 4 * a.leading, "block leading term at N={n}, C={c} not quadrupled");
        }
    }
    Ok("leading terms scale 16x and 4x per 4x cells".into())
}

fn thread_determinism(seed: u64, _: &Faults) -> Result<String, String> {
    let grid = ok(GridConfig::new(1.0, 0.0, 32.0, -16.0, 16.0))?;
    let polar = PolarGrid::from_default_ego(&grid);
    let block = ok(BevSsmBlock::<f64>::new(&mut Init::new(seed), BlockConfig::new(8), &polar))?;
    let pe = Var::constant(ok(encode(&polar, &ok(PeConfig::new(8, DEFAULT_BASE))?))?.enc);
    let x = Var::constant(uniform(&[32, 32, 8], -1.0, 1.0, &mut rng(seed)));
    let run = |threads: usize| -> Result<Tensor, String> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| e.to_string())?;
        Ok(ok(pool.install(|| block.forward(&x, &pe)))?.value().clone())
    };
    let one = run(1)?;
    for threads in [2, 3] {
        ensure!(run(threads)? == one, "{threads}-thread block output differs from 1 thread");
    }
    Ok("1, 2 and 3 threads bitwise equal".into())
}
