//! Trains a small model for a few epochs, checkpoints it, resumes it and
//! checks the result matches an uninterrupted run.

use tlrn::training::{Checkpoint, LossConfig, TrainConfig, Trainer};
use tlrn::config::ExperimentConfig;
use tlrn::NetworkConfig;

fn main() -> tlrn::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.network = NetworkConfig::tiny(16);
    cfg.network.base_channels = 4;
    cfg.data.follow_ups = 4;
    let data = cfg.data.spec(16).generate::<f32>(16, 7)?;
    let loss = LossConfig::for_network(&cfg.network);
    let train = TrainConfig { epochs: 20, batch_size: 4, learning_rate: 3e-3, ..cfg.train.clone() };

    let mut trainer = Trainer::new(&data, &cfg.network, &loss, &train)?;
    let mut halfway = None;
    while !trainer.is_finished() {
        let log = trainer.run_epoch()?;
        println!(
            "epoch {:>2}  loss {:.5}  similarity {:.5}  smoothness {:.5}",
            log.epoch, log.mean_loss, log.similarity, log.smoothness
        );
        if log.epoch == 10 {
            halfway = Some(trainer.checkpoint().to_bytes()?);
        }
    }
    let full = trainer.into_checkpoint();

    let mut resumed = Trainer::resume(&data, Checkpoint::from_bytes(&halfway.unwrap())?)?;
    while !resumed.is_finished() {
        resumed.run_epoch()?;
    }
    println!("resumed run identical to uninterrupted run: {}", resumed.checkpoint().params == full.params);
    Ok(())
}
