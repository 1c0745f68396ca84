//! Parameter and FLOP accounting for the multi-branch and plain models, and
//! the grid search for the grouping and head sizes whose plain parameter
//! count lands closest to the 6.9M target.

use csrep::rep_tdnn::{
    build_rep_tdnn, target_match_config, target_match_search, TARGET_PLAIN_FLOPS,
    TARGET_PLAIN_PARAMS,
};
use csrep::reparam::{csrep_transform, TransformOptions};

fn main() -> csrep::Result<()> {
    println!("closest configurations to {TARGET_PLAIN_PARAMS:.1e} plain parameters:");
    for c in target_match_search().iter().take(5) {
        println!(
            "  groups={:<2} head_groups={} fc_hidden={} embedding={}  plain={:>9}  gap={:+.0}",
            c.config.blocks[0].groups,
            c.config.blocks[1].head_groups,
            c.config.fc_hidden,
            c.config.embedding_dim,
            c.plain_params,
            c.gap
        );
    }

    let config = target_match_config();
    let model = build_rep_tdnn::<f32>(&config)?;
    let (plain, _) = csrep_transform(&model, &TransformOptions::default())?;
    for (label, m) in [("multi-branch", &model), ("plain", &plain)] {
        let p = m.param_report();
        let f = m.flop_report(200);
        println!(
            "{label:<13} params {:>9} (bn as 2/ch: {:>9})  flops@200 frames {:.3e} (macs only {:.3e})",
            p.total(),
            p.total_affine_bn(),
            f.total() as f64,
            f.mac_only() as f64
        );
    }
    println!(
        "plain vs target: params gap {:+.2}%, flops ratio {:.2}",
        100.0 * (plain.count_params() as f64 / TARGET_PLAIN_PARAMS - 1.0),
        plain.count_flops(200) as f64 / TARGET_PLAIN_FLOPS
    );
    Ok(())
}
