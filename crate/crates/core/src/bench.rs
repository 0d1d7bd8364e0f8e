//! Runtime and memory scaling benchmark: recurrent vs. separable (chunked)
//! evaluation of both kernels, forward+backward, with working-buffer byte
//! accounting from [`crate::memtrack`].
//!
//! Wall time covers only the kernel computation: inputs, parameters, and the
//! output probe are generated before the timed region, and nothing is
//! written inside it. Peak tracked bytes cover the kernel working buffers
//! (state/rotation traces for the recurrent strategy; angle prefixes and f/g
//! accumulators for the separable one), not process RSS. Correctness rides
//! along: both implementations must agree on every benchmarked cell.

use crate::kernels::aussm::{aussm_backward, aussm_forward_opts, aussm_recurrent_grad};
use crate::kernels::s6::{s6_backward, s6_forward_opts, s6_recurrent_grad};
use crate::kernels::{AussmParams, S6Params, SeqTensor};
use crate::memtrack;
use crate::scan::ChunkPlan;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ImplKind {
    Recurrent,
    Separable,
}

impl ImplKind {
    pub fn name(&self) -> &'static str {
        match self {
            ImplKind::Recurrent => "recurrent",
            ImplKind::Separable => "separable",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Aussm,
    S6,
}

impl KernelKind {
    pub fn name(&self) -> &'static str {
        match self {
            KernelKind::Aussm => "aussm",
            KernelKind::S6 => "s6",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub lens: Vec<usize>,
    pub batch: usize,
    pub d: usize,
    pub n: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub impls: Vec<ImplKind>,
    pub kernels: Vec<KernelKind>,
    pub chunk_len: usize,
    /// Cells whose estimated working set exceeds this are marked skipped.
    pub budget_bytes: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            lens: vec![128, 256, 512, 1024, 2048, 4096, 8192, 16384],
            batch: 2,
            d: 4,
            n: 4,
            repeats: 50,
            warmup: 5,
            impls: vec![ImplKind::Recurrent, ImplKind::Separable],
            kernels: vec![KernelKind::Aussm, KernelKind::S6],
            chunk_len: crate::scan::DEFAULT_CHUNK_LEN,
            budget_bytes: 4 << 30,
            seed: 0,
        }
    }
}

/// One benchmark cell.
#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub impl_kind: ImplKind,
    pub kernel: KernelKind,
    pub len: usize,
    pub batch: usize,
    pub d: usize,
    pub n: usize,
    pub median_wall_ns: u64,
    pub mean_wall_ns: u64,
    pub peak_tracked_bytes: usize,
    /// Peak bytes divided by the batch·d·n lane count (the per-lane O(2L)
    /// accounting; the total is the same figure times the lane count).
    pub tracked_bytes_per_lane: f64,
    pub repeats: usize,
    pub skipped: bool,
    /// Max elementwise relative difference between the two strategies on
    /// this cell's inputs.
    pub max_rel_diff: f64,
    #[serde(skip)]
    pub wall_ns_samples: Vec<u64>,
}

fn random_tensor(batch: usize, d: usize, len: usize, rng: &mut ChaCha8Rng) -> SeqTensor {
    let data = (0..batch * d * len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    SeqTensor::from_vec(data, batch, d, len).unwrap()
}

fn max_rel_diff(a: &SeqTensor, b: &SeqTensor) -> f64 {
    a.data
        .iter()
        .zip(b.data.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

enum CellParams {
    Aussm(AussmParams),
    S6(S6Params),
}

impl CellParams {
    /// One full forward+backward with the given strategy; returns the output
    /// so the compiler cannot elide the work.
    fn pass(&self, impl_kind: ImplKind, u: &SeqTensor, dy: &SeqTensor, plan: ChunkPlan) -> Result<f64> {
        let y = match (self, impl_kind) {
            (CellParams::Aussm(p), ImplKind::Separable) => {
                let (y, cache) = aussm_forward_opts(p, u, None, None, plan)?;
                let _ = aussm_backward(&cache, dy)?;
                y
            }
            (CellParams::Aussm(p), ImplKind::Recurrent) => {
                let (y, _, _) = aussm_recurrent_grad(p, u, None, dy)?;
                y
            }
            (CellParams::S6(p), ImplKind::Separable) => {
                let (y, cache) = s6_forward_opts(p, u, plan)?;
                let _ = s6_backward(&cache, dy)?;
                y
            }
            (CellParams::S6(p), ImplKind::Recurrent) => {
                let (y, _, _) = s6_recurrent_grad(p, u, dy)?;
                y
            }
        };
        Ok(y.data.iter().sum())
    }

    fn forward(&self, impl_kind: ImplKind, u: &SeqTensor, dy: &SeqTensor, plan: ChunkPlan) -> Result<SeqTensor> {
        Ok(match (self, impl_kind) {
            (CellParams::Aussm(p), ImplKind::Separable) => {
                aussm_forward_opts(p, u, None, None, plan)?.0
            }
            (CellParams::Aussm(p), ImplKind::Recurrent) => {
                aussm_recurrent_grad(p, u, None, dy)?.0
            }
            (CellParams::S6(p), ImplKind::Separable) => s6_forward_opts(p, u, plan)?.0,
            (CellParams::S6(p), ImplKind::Recurrent) => s6_recurrent_grad(p, u, dy)?.0,
        })
    }
}

/// Rough working-set estimate used for the skip-on-budget guard.
fn estimate_bytes(cfg: &BenchConfig, impl_kind: ImplKind, len: usize) -> usize {
    let lanes = cfg.batch * cfg.d * cfg.n;
    match impl_kind {
        // Five stored traces of b·d·n·L.
        ImplKind::Recurrent => 5 * lanes * len * 8,
        // Seven chunk-bounded lane buffers plus the angle preactivations.
        ImplKind::Separable => {
            let chunk = cfg.chunk_len.min(len);
            (7 + cfg.d.max(1)) * cfg.d * cfg.n * chunk * 8
        }
    }
}

/// Run the benchmark grid; one row per (kernel, impl, len) cell, recurrent
/// and separable outputs cross-checked on every cell.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    let plan = ChunkPlan::new(cfg.chunk_len)?;
    let mut rows = Vec::new();
    let mut sink = 0.0f64;
    for &kernel in &cfg.kernels {
        for &len in &cfg.lens {
            // Data and parameter generation stay outside the timed region.
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((len as u64) << 8));
            let u = random_tensor(cfg.batch, cfg.d, len, &mut rng);
            let dy = random_tensor(cfg.batch, cfg.d, len, &mut rng);
            let params = match kernel {
                KernelKind::Aussm => CellParams::Aussm(AussmParams::init(cfg.d, cfg.n, &mut rng)),
                KernelKind::S6 => CellParams::S6(S6Params::init(cfg.d, cfg.n, &mut rng)),
            };
            let y_sep = params.forward(ImplKind::Separable, &u, &dy, plan)?;
            let y_rec = params.forward(ImplKind::Recurrent, &u, &dy, plan)?;
            let diff = max_rel_diff(&y_sep, &y_rec);
            if diff > 1e-8 {
                return Err(Error::Contract(format!(
                    "strategies disagree on {} len={len}: max rel diff {diff:e}",
                    kernel.name()
                )));
            }

            for &impl_kind in &cfg.impls {
                let estimated = estimate_bytes(cfg, impl_kind, len);
                if estimated > cfg.budget_bytes {
                    rows.push(BenchRow {
                        impl_kind,
                        kernel,
                        len,
                        batch: cfg.batch,
                        d: cfg.d,
                        n: cfg.n,
                        median_wall_ns: 0,
                        mean_wall_ns: 0,
                        peak_tracked_bytes: 0,
                        tracked_bytes_per_lane: 0.0,
                        repeats: 0,
                        skipped: true,
                        max_rel_diff: diff,
                        wall_ns_samples: Vec::new(),
                    });
                    continue;
                }
                for _ in 0..cfg.warmup {
                    sink += params.pass(impl_kind, &u, &dy, plan)?;
                }
                memtrack::reset();
                let mut samples = Vec::with_capacity(cfg.repeats);
                for _ in 0..cfg.repeats {
                    let start = Instant::now();
                    sink += params.pass(impl_kind, &u, &dy, plan)?;
                    samples.push(start.elapsed().as_nanos() as u64);
                }
                let peak = memtrack::peak_bytes();
                let mut sorted = samples.clone();
                sorted.sort_unstable();
                let median = sorted[sorted.len() / 2];
                let mean = samples.iter().sum::<u64>() / samples.len() as u64;
                let lanes = (cfg.batch * cfg.d * cfg.n) as f64;
                rows.push(BenchRow {
                    impl_kind,
                    kernel,
                    len,
                    batch: cfg.batch,
                    d: cfg.d,
                    n: cfg.n,
                    median_wall_ns: median,
                    mean_wall_ns: mean,
                    peak_tracked_bytes: peak,
                    tracked_bytes_per_lane: peak as f64 / lanes,
                    repeats: cfg.repeats,
                    skipped: false,
                    max_rel_diff: diff,
                    wall_ns_samples: samples,
                });
            }
        }
    }
    // Keep the accumulated outputs observable.
    if !sink.is_finite() {
        return Err(Error::NonFinite("benchmark outputs diverged".into()));
    }
    Ok(rows)
}

pub fn write_bench_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(
        f,
        "impl,kernel,len,batch,d,n,median_wall_ns,mean_wall_ns,peak_tracked_bytes,\
         tracked_bytes_per_lane,repeats,skipped,max_rel_diff"
    )?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.impl_kind.name(),
            r.kernel.name(),
            r.len,
            r.batch,
            r.d,
            r.n,
            r.median_wall_ns,
            r.mean_wall_ns,
            r.peak_tracked_bytes,
            r.tracked_bytes_per_lane,
            r.repeats,
            r.skipped,
            r.max_rel_diff
        )?;
    }
    Ok(())
}
