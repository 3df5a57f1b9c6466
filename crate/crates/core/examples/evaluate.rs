//! Evaluates the identity model on ring sequences: image MSE, propagated
//! segmentation Dice and Hausdorff distance, and folding per frame.

use tlrn::config::{DataKind, ExperimentConfig};
use tlrn::metrics::evaluate;
use tlrn::{Mode, Network};

fn main() -> tlrn::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.data.kind = DataKind::Ring;
    let data = cfg.data.spec(cfg.network.image_size).generate::<f32>(10, 11)?;
    let net = Network::new(&cfg.network)?;
    // an untrained model predicts the identity map
    let params = net.init_params::<f32>(0);
    let report = evaluate(&net, &params, &data, Mode::Tlrn)?;
    print!("{}", report.summary_csv());
    let last = report.final_frame();
    println!(
        "final frame: Dice {:.3}, HD {:.2} px",
        last.dice.map_or(f64::NAN, |d| d.mean),
        last.hd.map_or(f64::NAN, |d| d.mean)
    );
    Ok(())
}
