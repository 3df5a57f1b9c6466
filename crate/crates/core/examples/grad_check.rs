//! Compares the hand-written backward pass with central differences.

use tlrn::synthdata::SequenceSample;
use tlrn::training::{grad_check, LossConfig};
use tlrn::{GridImage, Mode, Network, NetworkConfig};

fn main() -> tlrn::Result<()> {
    let cfg = NetworkConfig::tiny(8);
    let net = Network::new(&cfg)?;
    let mut params = net.init_params::<f64>(5);
    for (k, v) in params.iter_mut().enumerate() {
        *v = 2.0 * *v + 0.03 * (k as f64 * 1.7).sin();
    }
    let frames = (0..3)
        .map(|t| GridImage::from_fn(8, 8, |x, y| ((x * 3 + y * 5 + t * 7) % 11) as f64 / 10.0))
        .collect::<tlrn::Result<Vec<_>>>()?;
    let seq = SequenceSample::new(frames, None)?;
    let loss = LossConfig::for_network(&cfg);
    for mode in [Mode::Tlrn, Mode::Baseline] {
        let report = grad_check(&net, &params, &seq, &loss, mode, 12, 1)?;
        println!("{}: max relative error {:.2e}", mode.name(), report.max_error);
        for p in &report.probes {
            println!(
                "  {:?}[{:>4}] analytic {:+.6e} numeric {:+.6e}",
                p.group, p.index, p.analytic, p.numeric
            );
        }
    }
    Ok(())
}
