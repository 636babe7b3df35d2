//! Forward-pass wall time of a single SAB or ISAB block against set size.
//!
//! Inputs are all-zero `n x 3` sets; blocks are 64 wide with 8 heads. Each
//! size gets two discarded warm-up passes and `reps` timed passes on a
//! non-recording tape. A size whose estimated working set exceeds available
//! memory is reported as failed instead of attempted.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use crate::autodiff::Tape;
use crate::blocks::{isab, sab, IsabParams, MabParams};
use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const BENCH_HEADER: &str = "block,n,m,rep,seconds";
pub const WARMUPS: usize = 2;
pub const MIN_REPS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Sab,
    Isab,
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockKind::Sab => "sab",
            BlockKind::Isab => "isab",
        })
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sab" => Ok(BlockKind::Sab),
            "isab" => Ok(BlockKind::Isab),
            other => Err(Error::Config(format!("unknown block `{other}` (expected sab or isab)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub block: BlockKind,
    /// Inducing points; ignored for SAB.
    pub m: usize,
    pub sizes: Vec<usize>,
    pub reps: usize,
    pub input_dim: usize,
    pub dim: usize,
    pub heads: usize,
    /// Working-set limit in bytes; `None` reads available memory from the OS.
    pub memory_limit: Option<u64>,
}

impl BenchConfig {
    pub fn new(block: BlockKind, m: usize, sizes: Vec<usize>, reps: usize) -> Self {
        Self {
            block,
            m,
            sizes,
            reps,
            input_dim: 3,
            dim: 64,
            heads: 8,
            memory_limit: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.sizes.len() < 2 || self.sizes.windows(2).any(|w| w[0] >= w[1]) || self.sizes[0] == 0 {
            return Err(Error::Config("sizes must be at least two strictly increasing positive values".into()));
        }
        if self.reps < MIN_REPS {
            return Err(Error::Config(format!("reps must be at least {MIN_REPS}")));
        }
        if self.block == BlockKind::Isab && self.m == 0 {
            return Err(Error::Config("ISAB needs m >= 1".into()));
        }
        Ok(())
    }

    /// Rough peak bytes of one forward pass at size `n`.
    pub fn estimated_bytes(&self, n: usize) -> u64 {
        let keys = match self.block {
            BlockKind::Sab => n,
            BlockKind::Isab => self.m,
        };
        // one score matrix plus a few dozen n x d activations
        let scores = (n * keys) as u64;
        let acts = (40 * n * self.dim) as u64;
        8 * (scores + acts)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub seconds: Vec<f64>,
    pub median: f64,
    pub p10: f64,
    pub p90: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub block: BlockKind,
    pub m: usize,
    pub rows: Vec<BenchRow>,
    /// Sizes skipped, with the reason.
    pub failed: Vec<(usize, String)>,
    /// Least-squares slope of log median time against log n; `None` with
    /// fewer than two completed sizes.
    pub slope: Option<f64>,
}

impl BenchReport {
    pub fn median_at(&self, n: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.n == n).map(|r| r.median)
    }

    /// Raw timings, one CSV row per repetition, without header.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        let m = if self.block == BlockKind::Isab { self.m } else { 0 };
        for row in &self.rows {
            for (rep, s) in row.seconds.iter().enumerate() {
                writeln!(w, "{},{},{},{},{:.9}", self.block, row.n, m, rep, s)?;
            }
        }
        Ok(())
    }
}

/// Nearest-rank percentile of sorted data, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

pub fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Ordinary least-squares slope of `y` on `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() < 2 || x.len() != y.len() {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn available_memory() -> Option<u64> {
    let info = std::fs::read_to_string("/proc/meminfo").ok()?;
    let line = info.lines().find(|l| l.starts_with("MemAvailable:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

enum Block {
    Sab(MabParams),
    Isab(IsabParams),
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = Rng::new(0);
    let block = match cfg.block {
        BlockKind::Sab => Block::Sab(MabParams::new(&mut store, "sab", cfg.input_dim, cfg.input_dim, cfg.dim, cfg.heads, &mut rng)?),
        BlockKind::Isab => Block::Isab(IsabParams::new(&mut store, "isab", cfg.input_dim, cfg.dim, cfg.heads, cfg.m, &mut rng)?),
    };
    let forward = |x: &Tensor| -> Result<()> {
        let mut tape = Tape::inference();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let out = match &block {
            Block::Sab(b) => sab(&mut tape, &p, &xv, b, 1)?,
            Block::Isab(b) => isab(&mut tape, &p, &xv, b, 1)?,
        };
        std::hint::black_box(out.value().get(0, 0));
        Ok(())
    };
    let limit = cfg.memory_limit.or_else(available_memory);
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    for &n in &cfg.sizes {
        let need = cfg.estimated_bytes(n);
        if let Some(limit) = limit {
            if need > limit / 2 {
                failed.push((n, format!("needs ~{} MiB, {} MiB available", need >> 20, limit >> 20)));
                continue;
            }
        }
        let x = Tensor::zeros(n, cfg.input_dim);
        for _ in 0..WARMUPS {
            forward(&x)?;
        }
        let mut seconds = Vec::with_capacity(cfg.reps);
        for _ in 0..cfg.reps {
            let t0 = Instant::now();
            forward(&x)?;
            seconds.push(t0.elapsed().as_secs_f64());
        }
        let mut sorted = seconds.clone();
        sorted.sort_by(f64::total_cmp);
        rows.push(BenchRow {
            n,
            median: median(&sorted),
            p10: percentile(&sorted, 0.1),
            p90: percentile(&sorted, 0.9),
            seconds,
        });
    }
    let lx: Vec<f64> = rows.iter().map(|r| (r.n as f64).ln()).collect();
    let ly: Vec<f64> = rows.iter().map(|r| r.median.ln()).collect();
    Ok(BenchReport {
        block: cfg.block,
        m: cfg.m,
        slope: fit_slope(&lx, &ly),
        rows,
        failed,
    })
}
