//! Builds the default Rep-TDNN, re-parameterizes it into a plain TDNN chain
//! and prints what each step did.

use csrep::rep_tdnn::{build_rep_tdnn, RepTdnnConfig};
use csrep::reparam::{csrep_transform, SelfCheckOptions, TransformOptions};

fn main() -> csrep::Result<()> {
    let config = RepTdnnConfig::default();
    let model = build_rep_tdnn::<f64>(&config)?;
    let options = TransformOptions {
        self_check: Some(SelfCheckOptions::default()),
        ..TransformOptions::default()
    };
    let (plain, report) = csrep_transform(&model, &options)?;

    for s in &report.steps {
        println!(
            "step {} {:<24} rewrites={:<3} convs {:>3} -> {:<3} bns {:>3} -> {:<3} branch groups {:>2} -> {}",
            s.step.number(),
            s.step.name(),
            s.rewrites,
            s.before.conv_nodes,
            s.after.conv_nodes,
            s.before.batchnorms,
            s.after.batchnorms,
            s.before.branch_groups,
            s.after.branch_groups,
        );
    }
    println!("merged groups: {}", report.merged_groups);
    println!(
        "params: {} -> {}",
        model.count_params(),
        plain.count_params()
    );
    if let Some(c) = report.self_check {
        println!(
            "max frame-level deviation over {} inputs: {:.3e}",
            c.trials, c.max_abs_deviation
        );
    }
    Ok(())
}
