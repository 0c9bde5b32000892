//! Wall-clock scaling of the selective scan over sequence length.
//!
//! Each length is timed `repeats` times and the median kept. The doubling
//! ratio `t(2L) / t(L)` is close to 2 for a linear-time scan.

use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::ssm::scan::{selective_scan_par, selective_scan_seq};
use crate::ssm::SsmParams;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize)]
pub struct ScanBenchConfig {
    pub min_log2: u32,
    pub max_log2: u32,
    pub repeats: usize,
    pub channels: usize,
    pub state: usize,
    pub seed: u64,
}

impl Default for ScanBenchConfig {
    fn default() -> Self {
        Self {
            min_log2: 12,
            max_log2: 18,
            repeats: 11,
            channels: 2,
            state: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ScanBenchRow {
    pub len: usize,
    pub seq_median_s: f64,
    pub par_median_s: f64,
    /// Against the previous (half-length) row.
    pub seq_ratio: Option<f64>,
    pub par_ratio: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScanBenchReport {
    pub config: ScanBenchConfig,
    pub rows: Vec<ScanBenchRow>,
    pub median_seq_ratio: f64,
    pub median_par_ratio: f64,
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Random scan input `[len, channels]` and parameters.
pub fn scan_instance(len: usize, channels: usize, state: usize, seed: u64) -> (Tensor, SsmParams) {
    let mut r = rng::stream(seed, Stream::Data, len as u64);
    let p = SsmParams::init(channels, state, &mut r);
    let x = Tensor::from_fn(&[len, channels], |_| r.gen_range(-1.0..1.0));
    (x, p)
}

fn time_median(repeats: usize, mut f: impl FnMut() -> Result<Tensor>) -> Result<f64> {
    // one untimed warm-up
    std::hint::black_box(f()?);
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        std::hint::black_box(f()?);
        times.push(t.elapsed().as_secs_f64());
    }
    Ok(median(&mut times))
}

pub fn run(cfg: &ScanBenchConfig) -> Result<ScanBenchReport> {
    if cfg.min_log2 >= cfg.max_log2 || cfg.repeats == 0 || cfg.max_log2 > 30 {
        return Err(Error::InvalidArgument(format!(
            "bench needs min_log2 < max_log2 <= 30 and repeats > 0, got {}..{} x{}",
            cfg.min_log2, cfg.max_log2, cfg.repeats
        )));
    }
    let mut rows: Vec<ScanBenchRow> = Vec::new();
    for e in cfg.min_log2..=cfg.max_log2 {
        let len = 1usize << e;
        let (x, p) = scan_instance(len, cfg.channels, cfg.state, cfg.seed);
        let seq = time_median(cfg.repeats, || selective_scan_seq(&x, &p))?;
        let par = time_median(cfg.repeats, || selective_scan_par(&x, &p))?;
        let prev = rows.last();
        rows.push(ScanBenchRow {
            len,
            seq_median_s: seq,
            par_median_s: par,
            seq_ratio: prev.map(|r| seq / r.seq_median_s),
            par_ratio: prev.map(|r| par / r.par_median_s),
        });
    }
    let mut sr: Vec<f64> = rows.iter().filter_map(|r| r.seq_ratio).collect();
    let mut pr: Vec<f64> = rows.iter().filter_map(|r| r.par_ratio).collect();
    Ok(ScanBenchReport {
        config: cfg.clone(),
        median_seq_ratio: median(&mut sr),
        median_par_ratio: median(&mut pr),
        rows,
    })
}

impl std::fmt::Display for ScanBenchReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let ratio = |r: Option<f64>| r.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
        writeln!(
            f,
            "{:>8} {:>12} {:>10} {:>12} {:>10}",
            "L", "seq_ms", "seq_x2", "par_ms", "par_x2"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:>8} {:>12.3} {:>10} {:>12.3} {:>10}",
                r.len,
                r.seq_median_s * 1e3,
                ratio(r.seq_ratio),
                r.par_median_s * 1e3,
                ratio(r.par_ratio)
            )?;
        }
        write!(
            f,
            "median doubling ratio: sequential {:.3}, parallel {:.3}",
            self.median_seq_ratio, self.median_par_ratio
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn small_table_has_one_row_per_length() {
        let cfg = ScanBenchConfig {
            min_log2: 6,
            max_log2: 8,
            repeats: 3,
            ..ScanBenchConfig::default()
        };
        let rep = run(&cfg).unwrap();
        assert_eq!(rep.rows.iter().map(|r| r.len).collect::<Vec<_>>(), vec![64, 128, 256]);
        assert!(rep.rows[0].seq_ratio.is_none() && rep.rows[2].seq_ratio.is_some());
        assert!(rep.to_string().contains("median doubling ratio"));
        assert!(run(&ScanBenchConfig { min_log2: 8, ..cfg }).is_err());
    }
}
