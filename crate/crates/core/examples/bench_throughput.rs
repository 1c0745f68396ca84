//! Single-threaded throughput of the multi-branch model and its plain
//! re-parameterization at batch 1, 300 frames.

use csrep::bench::{run_bench, BenchOptions};
use csrep::rep_tdnn::{build_rep_tdnn, RepTdnnConfig};
use csrep::reparam::{csrep_transform, TransformOptions};

fn main() -> csrep::Result<()> {
    let model = build_rep_tdnn::<f32>(&RepTdnnConfig::default())?;
    let (plain, _) = csrep_transform(&model, &TransformOptions::default())?;
    let iters = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(20);
    let options = BenchOptions {
        iters,
        ..BenchOptions::default()
    };

    let multi = run_bench(&model, &options)?;
    let fast = run_bench(&plain, &options)?;
    println!("multi-branch: {:>10.0} frames/s", multi.frames_per_second);
    println!("plain:        {:>10.0} frames/s", fast.frames_per_second);
    println!(
        "speedup:      {:>10.3}x",
        fast.frames_per_second / multi.frames_per_second
    );
    Ok(())
}
