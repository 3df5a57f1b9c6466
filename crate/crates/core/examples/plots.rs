//! Renders metric curves and frame and deformation-grid strips as SVG.

use tlrn::config::ExperimentConfig;
use tlrn::fields::exp_map;
use tlrn::metrics::evaluate;
use tlrn::plots::{grid_strip, image_strip, line_plot, Series};
use tlrn::{Mode, Network, VelocityField};

fn main() -> tlrn::Result<()> {
    let cfg = ExperimentConfig::default();
    let data = cfg.data.spec(cfg.network.image_size).generate::<f64>(6, 1)?;
    let net = Network::new(&cfg.network)?;
    let report = evaluate(&net, &net.init_params::<f64>(0), &data, Mode::Tlrn)?;

    let dir = std::env::temp_dir().join("tlrn-example-plots");
    std::fs::create_dir_all(&dir)?;
    let mse = Series::from_summary("identity", &report.summary, |f| Some(f.mse));
    std::fs::write(dir.join("mse.svg"), line_plot("Per-frame MSE", "MSE", &[mse])?)?;

    let seq = &data[0];
    let labels: Vec<String> = (0..seq.frames.len()).map(|k| format!("I{k}")).collect();
    std::fs::write(dir.join("frames.svg"), image_strip(&seq.frames, &labels)?)?;

    let n = cfg.network.image_size;
    let fields = (0..4)
        .map(|k| {
            let a = 0.4 * k as f64;
            let v = VelocityField::from_fn(n, n, |x, y| {
                let (x, y) = (x as f64 / n as f64, y as f64 / n as f64);
                (a * (std::f64::consts::TAU * y).sin(), a * (std::f64::consts::TAU * x).sin())
            })?;
            exp_map(&v, 6, cfg.network.boundary)
        })
        .collect::<tlrn::Result<Vec<_>>>()?;
    let grid_labels: Vec<String> = (0..4).map(|k| format!("|v| x{}", k)).collect();
    std::fs::write(dir.join("grids.svg"), grid_strip(&fields, &grid_labels, 4)?)?;
    println!("wrote mse.svg, frames.svg and grids.svg to {}", dir.display());
    Ok(())
}
