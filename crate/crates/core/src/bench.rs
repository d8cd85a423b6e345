//! Attention cost benchmark: analytic and counted multiply–adds, plus wall time.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::FusionConfig;
use crate::counter;
use crate::error::{Error, Result};
use crate::mdim::{attention_flops, dense_attention_flops, retained_count, sparse_attention, AttentionWeights, KvMode};
use crate::pipeline::flops_scaling_csv;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub sparse_macs: u64,
    pub dense_macs: u64,
    /// Multiply–adds counted while running the sparse attention kernel.
    pub measured_sparse_macs: u64,
}

impl BenchRow {
    pub fn ratio(&self) -> f64 {
        self.sparse_macs as f64 / self.dense_macs as f64
    }
}

/// Runs attention once with `k` random queries among `n` random tokens; returns counted MACs and time.
pub fn run_attention(n: usize, k: usize, d: usize, mode: KvMode, seed: u64) -> Result<(u64, Duration)> {
    if k == 0 || k > n || d == 0 {
        return Err(Error::invalid(format!("need 1 ≤ k ≤ n and d ≥ 1, got n={n} k={k} d={d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = Tensor::<f32>::uniform(&[n, d], -1.0, 1.0, &mut rng);
    let queries = Tensor::from_fn(&[k, d], |i| tokens.data()[(i / d) * (n / k) * d + i % d]);
    let w = AttentionWeights::<f32>::init(d, &mut rng);
    let mut tape = Tape::new();
    let vars = crate::mdim::AttentionVars {
        query: tape.constant(w.query),
        key: tape.constant(w.key),
        value: tape.constant(w.value),
    };
    let q = tape.constant(queries);
    let t = tape.constant(tokens);
    let before = counter::current();
    let start = Instant::now();
    let out = sparse_attention(&mut tape, q, t, mode, &vars)?;
    let elapsed = start.elapsed();
    let macs = counter::current() - before;
    if !tape.value(out).all_finite() {
        return Err(Error::NonFinite("attention output".into()));
    }
    Ok((macs, elapsed))
}

/// Analytic and counted costs for each `N`, with `k = max(1, min(⌊Nτ⌋, k_max))`.
pub fn attention_table(n_list: &[usize], tau: f64, k_max: usize, d: usize, mode: KvMode) -> Result<Vec<BenchRow>> {
    n_list
        .iter()
        .map(|&n| {
            let k = retained_count(n, tau, k_max);
            let (measured, _) = run_attention(n, k, d, mode, n as u64)?;
            Ok(BenchRow {
                n,
                k,
                d,
                sparse_macs: attention_flops(n as u64, k as u64, d as u64, mode),
                dense_macs: dense_attention_flops(n as u64, d as u64),
                measured_sparse_macs: measured,
            })
        })
        .collect()
}

pub const ATTENTION_HEADER: &str = "n,k,d,sparse_macs,dense_macs,sparse_dense_ratio,measured_sparse_macs";

/// Attention table, a blank line, then the per-stage resolution scaling table.
pub fn bench_csv(rows: &[BenchRow], cfg: &FusionConfig) -> String {
    let mut s = format!("{ATTENTION_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{:.6},{}",
            r.n,
            r.k,
            r.d,
            r.sparse_macs,
            r.dense_macs,
            r.ratio(),
            r.measured_sparse_macs
        )
        .unwrap();
    }
    s.push('\n');
    s.push_str(&flops_scaling_csv(cfg));
    s
}

/// Best-of-`reps` wall time of sparse (`k` queries) and dense (`N` queries) attention.
pub fn time_sparse_dense(n: usize, k: usize, d: usize, reps: usize) -> Result<(Duration, Duration)> {
    let mut best = (Duration::MAX, Duration::MAX);
    for r in 0..reps.max(1) {
        best.0 = best.0.min(run_attention(n, k, d, KvMode::AllPatches, r as u64)?.1);
        best.1 = best.1.min(run_attention(n, n, d, KvMode::AllPatches, r as u64)?.1);
    }
    Ok(best)
}
