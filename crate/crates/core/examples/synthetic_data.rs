//! Generates lemniscate and ring sequences, writes them to a dataset file
//! and reads them back.

use tlrn::config::{DataKind, ExperimentConfig};
use tlrn::synthdata::{read_dataset, write_dataset};

fn main() -> tlrn::Result<()> {
    let dir = std::env::temp_dir().join("tlrn-example-data");
    std::fs::create_dir_all(&dir)?;
    for kind in [DataKind::Lemniscate, DataKind::Ring] {
        let mut cfg = ExperimentConfig::default();
        cfg.data.kind = kind;
        let spec = cfg.data.spec(cfg.network.image_size);
        let samples = spec.generate::<f32>(8, 42)?;
        let path = dir.join(format!("{}.tlrn", spec.kind.name()));
        write_dataset(&samples, &path)?;
        let back = read_dataset::<f32>(&path)?;
        assert_eq!(back, samples);

        let first = &samples[0];
        let (h, w) = first.dims();
        let mass: Vec<String> = first
            .frames
            .iter()
            .map(|f| format!("{:.1}", f.data().iter().map(|&p| p as f64).sum::<f64>()))
            .collect();
        println!(
            "{}: {} sequences of {} frames at {h}x{w}, masks {}, intensity mass per frame [{}]",
            spec.kind.name(),
            back.len(),
            first.frames.len(),
            first.masks.is_some(),
            mass.join(", ")
        );
        if let Some(masks) = &first.masks {
            let areas: Vec<usize> = masks.iter().map(|m| m.count()).collect();
            println!("  mask areas {areas:?}");
        }
        println!("  wrote {}", path.display());
    }
    Ok(())
}
