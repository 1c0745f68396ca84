//! EER and minDCF from a score file (or a built-in sample).
//!
//! `cargo run --example score_metrics -- scores.txt`, one `target|nontarget score`
//! per line.

use csrep::metrics::{compute_eer, compute_min_dcf, load_scores, parse_scores, DcfParams};

const SAMPLE: &str = "\
# label score
target 0.9
target 0.8
target 0.3
nontarget 0.6
nontarget 0.2
nontarget 0.1
";

fn main() -> csrep::Result<()> {
    let scores = match std::env::args().nth(1) {
        Some(path) => load_scores(path)?,
        None => parse_scores(SAMPLE)?,
    };
    let eer = compute_eer(&scores)?;
    println!("trials  {}", scores.len());
    println!("EER     {:.4}%", 100.0 * eer);
    for p_target in [0.01, 0.001] {
        let params = DcfParams {
            p_target,
            ..DcfParams::default()
        };
        println!(
            "minDCF  {:.4} (p_target={p_target})",
            compute_min_dcf(&scores, &params)?
        );
    }
    Ok(())
}
