//! Focusing throughput across worker counts.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::config::Scenario;
use crate::error::CliError;
use crate::pipeline::{focus_images, image_checksum, synthesize, true_trajectory, write_artifact};

#[derive(Debug, Clone, Serialize)]
pub struct BenchEntry {
    pub workers: usize,
    pub seconds: Vec<f64>,
    pub median_seconds: f64,
    /// Pixel-pulse products per second, summed over beams and channels.
    pub throughput: f64,
    pub speedup: f64,
    pub checksum: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub name: String,
    pub pixels: usize,
    pub pulses: usize,
    pub beams: usize,
    pub channels: usize,
    pub available_parallelism: usize,
    pub entries: Vec<BenchEntry>,
    pub checksums_identical: bool,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Simulates once on the true trajectory, then times `repetitions` focusing
/// runs for each worker count.
pub fn bench(s: &Scenario, workers: &[usize], repetitions: usize) -> Result<BenchReport, CliError> {
    if workers.is_empty() || workers.contains(&0) {
        return Err(CliError::Config(crate::config::ConfigError {
            key: "bench.workers".into(),
            line: None,
            message: "worker counts must be positive and non-empty".into(),
        }));
    }
    if repetitions == 0 {
        return Err(CliError::Config(crate::config::ConfigError {
            key: "bench.repetitions".into(),
            line: None,
            message: "must be at least 1".into(),
        }));
    }
    let truth = true_trajectory(s)?;
    let rc = synthesize(s, &truth)?;
    let work = (s.grid.len() * truth.len() * s.beams.len() * s.channels.len()) as f64;

    let mut entries: Vec<BenchEntry> = Vec::new();
    for &w in workers {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| CliError::Numerical(format!("thread pool: {e}")))?;
        let mut seconds = Vec::with_capacity(repetitions);
        let mut checksum = String::new();
        for _ in 0..repetitions {
            let t0 = Instant::now();
            let images = pool.install(|| focus_images(s, &rc, &truth))?;
            seconds.push(t0.elapsed().as_secs_f64());
            checksum = image_checksum(&images);
        }
        let m = median(&seconds);
        log::info!("{w} workers: median {m:.3} s");
        entries.push(BenchEntry {
            workers: w,
            seconds,
            median_seconds: m,
            throughput: work / m,
            speedup: 0.0,
            checksum,
        });
    }
    let base = entries
        .iter()
        .find(|e| e.workers == 1)
        .unwrap_or(&entries[0])
        .median_seconds;
    for e in &mut entries {
        e.speedup = base / e.median_seconds;
    }
    let checksums_identical = entries.windows(2).all(|p| p[0].checksum == p[1].checksum);
    Ok(BenchReport {
        name: s.config.name.clone(),
        pixels: s.grid.len(),
        pulses: truth.len(),
        beams: s.beams.len(),
        channels: s.channels.len(),
        available_parallelism: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        entries,
        checksums_identical,
    })
}

pub fn write_report(report: &BenchReport, out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out)?;
    write_artifact(&out.join("bench.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, report).map_err(|e| CliError::Io(e.to_string()))?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
