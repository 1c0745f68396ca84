//! Inference throughput measurement.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::tensor::Tensor3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchOptions {
    pub batch: usize,
    pub frames: usize,
    pub warmup: usize,
    pub iters: usize,
    /// Worker threads; measured iterations are split between them.
    pub threads: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            batch: 1,
            frames: 300,
            warmup: 5,
            iters: 50,
            threads: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchResult {
    pub frames_processed: usize,
    pub wall_seconds: f64,
    pub frames_per_second: f64,
    pub batch: usize,
    pub frames_per_utterance: usize,
    pub threads: usize,
    pub warmup_iters: usize,
    pub measured_iters: usize,
}

/// Times full forward passes on one fixed random input.
pub fn run_bench<F: Element>(model: &ModelGraph<F>, options: &BenchOptions) -> Result<BenchResult> {
    if options.batch == 0 || options.frames == 0 || options.iters == 0 || options.threads == 0 {
        return Err(Error::InvalidArgument(
            "batch, frames, iters and threads must be positive".into(),
        ));
    }
    let channels = model
        .input_channels()
        .ok_or_else(|| Error::InvalidArgument("model has no input channel count".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let x = Tensor3::<f64>::random(&mut rng, options.batch, channels, options.frames).cast::<F>();

    for _ in 0..options.warmup {
        model.forward(&x)?;
    }

    let threads = options.threads.min(options.iters);
    let start = Instant::now();
    std::thread::scope(|s| -> Result<()> {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let share = options.iters / threads + usize::from(t < options.iters % threads);
                let x = &x;
                s.spawn(move || -> Result<()> {
                    for _ in 0..share {
                        model.forward(x)?;
                    }
                    Ok(())
                })
            })
            .collect();
        for h in handles {
            h.join().expect("bench worker panicked")?;
        }
        Ok(())
    })?;
    let wall_seconds = start.elapsed().as_secs_f64();

    let frames_processed = options.batch * options.frames * options.iters;
    Ok(BenchResult {
        frames_processed,
        wall_seconds,
        frames_per_second: frames_processed as f64 / wall_seconds,
        batch: options.batch,
        frames_per_utterance: options.frames,
        threads,
        warmup_iters: options.warmup,
        measured_iters: options.iters,
    })
}
