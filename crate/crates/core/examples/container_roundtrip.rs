//! Saves a model to the binary container, loads it back without knowing its
//! element type, and checks that re-saving reproduces the same bytes.

use csrep::container::{self, AnyModel};
use csrep::rep_tdnn::{build_rep_tdnn, RepTdnnConfig};

fn main() -> csrep::Result<()> {
    let config = RepTdnnConfig {
        channels: 64,
        se_bottleneck: 16,
        fc_hidden: 64,
        embedding_dim: 32,
        ..RepTdnnConfig::default()
    };
    let model = build_rep_tdnn::<f64>(&config)?;
    let path = std::env::temp_dir().join("csrep-example.csrp");
    container::save(&model, &path)?;

    let loaded = AnyModel::load(&path)?;
    println!(
        "{} bytes, dtype {}, name {:?}",
        std::fs::metadata(&path)?.len(),
        loaded.dtype(),
        loaded.meta().name
    );
    let identical = loaded.to_bytes() == std::fs::read(&path)?;
    println!("re-saved bytes identical: {identical}");
    match loaded {
        AnyModel::F64(m) => println!("parameters equal: {}", m == model),
        AnyModel::F32(_) => unreachable!("saved as fp64"),
    }
    std::fs::remove_file(&path)?;
    Ok(())
}
