//! Runs the multi-branch and plain models side by side on random inputs in
//! both precisions and reports the largest frame-level deviation.

use csrep::rep_tdnn::{build_rep_tdnn, RepTdnnConfig};
use csrep::reparam::{csrep_transform, self_check, SelfCheckOptions, TransformOptions};
use csrep::Element;

fn report<F: Element>(config: &RepTdnnConfig) -> csrep::Result<()> {
    let model = build_rep_tdnn::<F>(config)?;
    let (plain, _) = csrep_transform(&model, &TransformOptions::default())?;
    let check = self_check(
        &model,
        &plain,
        &SelfCheckOptions {
            trials: 8,
            batch: 2,
            frames: 120,
            seed: 7,
        },
    )?;
    println!(
        "{}: max abs {:.3e}, max rel {:.3e}",
        F::DTYPE,
        check.max_abs_deviation,
        check.max_rel_deviation
    );
    Ok(())
}

fn main() -> csrep::Result<()> {
    let config = RepTdnnConfig::default();
    report::<f32>(&config)?;
    report::<f64>(&config)
}
