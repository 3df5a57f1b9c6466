//! Lists the presets and round-trips a configuration through its text form.

use tlrn::config::{ExperimentConfig, PRESETS};

fn main() -> tlrn::Result<()> {
    for name in PRESETS {
        let cfg = ExperimentConfig::preset(name).unwrap();
        println!(
            "{name}: {}x{} frames, T = {}, {}/{}/{} sequences, {} epochs, lr {}",
            cfg.network.image_size,
            cfg.network.image_size,
            cfg.data.follow_ups,
            cfg.data.train_count,
            cfg.data.val_count,
            cfg.data.test_count,
            cfg.train.epochs,
            cfg.train.learning_rate
        );
    }
    let text = "preset = ring-desk\ntrain.epochs = 50\ndata.seed = 9\n";
    let cfg = ExperimentConfig::parse(text)?;
    let rendered = cfg.render();
    assert_eq!(ExperimentConfig::parse(&rendered)?, cfg);
    println!("\n{rendered}");
    Ok(())
}
