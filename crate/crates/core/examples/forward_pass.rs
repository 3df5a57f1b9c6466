//! Runs the recurrent model and the pairwise baseline on one sequence, and
//! shows that a pass-through residual block makes them coincide.

use tlrn::config::ExperimentConfig;
use tlrn::fields::neg_jacobian_fraction;
use tlrn::{Mode, Network};

fn main() -> tlrn::Result<()> {
    let cfg = ExperimentConfig::default();
    let net = Network::new(&cfg.network)?;
    let seq = &cfg.data.spec(cfg.network.image_size).generate::<f64>(1, 3)?[0];

    let mut params = net.init_params::<f64>(1);
    // a small random velocity head; freshly initialised models output the identity
    for (k, v) in params.encoder_decoder.iter_mut().enumerate() {
        *v += 1e-3 * ((k as f64 * 0.37).sin());
    }
    println!("{} parameters ({} used by the baseline)", net.param_count(), net.param_count_used(Mode::Baseline));

    for mode in [Mode::Tlrn, Mode::Baseline] {
        let out = net.forward(seq, &params, mode)?;
        let peaks: Vec<String> = out.velocities.iter().map(|v| format!("{:.3}", v.max_magnitude())).collect();
        let folds = neg_jacobian_fraction(out.deformations.last().unwrap())?;
        println!("{:>8}: max |v| per step [{}], final folding {:.4}%", mode.name(), peaks.join(", "), 100.0 * folds);
    }

    net.set_passthrough_residual(&mut params);
    let a = net.forward(seq, &params, Mode::Tlrn)?;
    let b = net.forward(seq, &params, Mode::Baseline)?;
    println!("pass-through residual gives identical velocities: {}", a.velocities == b.velocities);
    Ok(())
}
