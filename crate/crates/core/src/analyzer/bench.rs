use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Element, Tensor};

use super::count_flops;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchOptions {
    pub height: usize,
    pub width: usize,
    /// Timed runs; at least 3.
    pub repeats: usize,
    /// Untimed runs before measuring.
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            height: 224,
            width: 224,
            repeats: 3,
            warmup: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageTiming {
    pub name: String,
    /// Image tokens leaving the segment.
    pub tokens: usize,
    pub flops: u64,
    pub samples: Vec<Duration>,
    pub median: Duration,
}

impl StageTiming {
    pub fn flops_per_sec(&self) -> f64 {
        let secs = self.median.as_secs_f64();
        if secs > 0.0 {
            self.flops as f64 / secs
        } else {
            f64::INFINITY
        }
    }
}

fn median(samples: &[Duration]) -> Duration {
    let mut s = samples.to_vec();
    s.sort_unstable();
    let mid = s.len() / 2;
    if s.len() % 2 == 1 {
        s[mid]
    } else {
        (s[mid - 1] + s[mid]) / 2
    }
}

/// Median wall time of stem, each stage and head over `repeats` forward
/// passes of a seeded random image. Per-segment MACs come from the
/// analytical report and sum to its total.
pub fn bench_stage_throughput<E: Element>(model: &Model<E>, opts: BenchOptions) -> Result<Vec<StageTiming>> {
    if opts.repeats < 3 {
        return Err(Error::config(format!(
            "benchmark needs at least 3 repeats, got {}",
            opts.repeats
        )));
    }
    let report = count_flops(model, opts.height, opts.width)?;
    let segments = report.segment_flops();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let n = 3 * opts.height * opts.width;
    let image = Tensor::<E>::from_f64(
        &[3, opts.height, opts.width],
        &(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
    )?;

    let mut samples = vec![Vec::with_capacity(opts.repeats); segments.len()];
    let mut tokens = vec![0; segments.len()];
    for run in 0..opts.warmup + opts.repeats {
        let mut times = Vec::with_capacity(segments.len());
        let start = Instant::now();
        let mut x = model.stem.forward(&image)?;
        times.push(start.elapsed());
        tokens[0] = x.shape()[0] * x.shape()[1];
        let mut g = model.initial_global_tokens()?;
        for i in 0..model.stages.len() {
            let start = Instant::now();
            (x, g) = model.run_stage(i, &x, &g)?;
            times.push(start.elapsed());
            tokens[i + 1] = x.shape()[0] * x.shape()[1];
        }
        let start = Instant::now();
        model.head_forward(&x)?;
        times.push(start.elapsed());
        tokens[segments.len() - 1] = 1;
        if run >= opts.warmup {
            for (s, t) in samples.iter_mut().zip(times) {
                s.push(t);
            }
        }
    }
    Ok(segments
        .into_iter()
        .zip(samples)
        .zip(tokens)
        .map(|(((name, flops), samples), tokens)| StageTiming {
            median: median(&samples),
            name,
            tokens,
            flops,
            samples,
        })
        .collect())
}
