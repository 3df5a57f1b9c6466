//! The commands behind the `tlrn` binary: data generation, training,
//! evaluation and plot export, each writing a manifest beside its outputs.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::config::{ExperimentConfig, Split};
use crate::error::{AtPath, Error, Result};
use crate::metrics::{self, comparison_csv, parse_summary_csv, EvalReport};
use crate::network::{Mode, Network};
use crate::plots::{grid_strip, image_strip, line_plot, Series};
use crate::synthdata::{read_dataset, write_dataset, SequenceSample};
use crate::training::{Checkpoint, EpochLog, Trainer};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOG_FILE: &str = "train_log.csv";

/// Resolves the experiment configuration from an optional base preset, an
/// optional config file and command-line overrides.
pub fn resolve_config(
    preset: Option<&str>,
    config_path: Option<&Path>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<ExperimentConfig> {
    let mut text = String::new();
    if let Some(name) = preset {
        if ExperimentConfig::preset(name).is_none() {
            return Err(Error::config(format!(
                "unknown preset `{name}`, expected one of {}",
                crate::config::PRESETS.join(", ")
            )));
        }
        writeln!(text, "preset = {name}").unwrap();
    }
    let mut cfg = match config_path {
        Some(path) => {
            let file = read_text(path)?;
            let starts_with_preset = file
                .lines()
                .map(|l| l.split('#').next().unwrap_or("").trim())
                .find(|l| !l.is_empty())
                .is_some_and(|l| l.starts_with("preset"));
            if starts_with_preset && preset.is_some() {
                return Err(Error::config("--preset conflicts with the preset line of the config file"));
            }
            if preset.is_some() {
                // line numbers in errors refer to the file, so shift by the injected line
                ExperimentConfig::parse(&format!("{text}{file}")).map_err(|e| match e {
                    Error::ConfigLine { line, message } => Error::ConfigLine { line: line - 1, message },
                    other => other,
                })
                .at_path(path)?
            } else {
                ExperimentConfig::parse(&file).at_path(path)?
            }
        }
        None => ExperimentConfig::parse(&text)?,
    };
    if let Some(seed) = seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = out {
        cfg.output_dir = out.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `key = value` lines recording what a command did, followed by the full
/// configuration.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &ExperimentConfig) -> Self {
        let mut m = Manifest::default();
        m.push("command", command);
        m.push("seed.data", cfg.data.seed);
        m.push("seed.train", cfg.train.seed);
        m.push("crate.version", env!("CARGO_PKG_VERSION"));
        m
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn render(&self, cfg: &ExperimentConfig) -> String {
        let mut s = String::from("# tlrn manifest\n");
        for (k, v) in &self.entries {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s.push_str("# configuration\n");
        s.push_str(&cfg.render());
        s
    }

    pub fn write(&self, dir: &Path, command: &str, cfg: &ExperimentConfig) -> Result<PathBuf> {
        let path = dir.join(format!("manifest-{command}.txt"));
        write_text(&path, self.render(cfg))?;
        Ok(path)
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).at_path(path)
}

fn write_text(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).at_path(path)
}

fn make_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).at_path(path)
}

pub fn dataset_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.tlrn", split.name()))
}

/// Generates all splits of the configured dataset into `cfg.output_dir`.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let dir = PathBuf::from(&cfg.output_dir);
    make_dir(&dir)?;
    let spec = cfg.data.spec(cfg.network.image_size);
    let mut manifest = Manifest::new("gen-data", cfg);
    let mut written = Vec::new();
    for split in Split::ALL {
        let count = cfg.data.count(split);
        let samples = spec.generate::<f32>(count, cfg.data.split_seed(split))?;
        let path = dataset_path(&dir, split);
        write_dataset(&samples, &path)?;
        manifest.push(&format!("split.{}.count", split.name()), count);
        manifest.push(&format!("split.{}.seed", split.name()), cfg.data.split_seed(split));
        manifest.push(&format!("split.{}.file", split.name()), path.file_name().unwrap().to_string_lossy());
        written.push(path);
    }
    manifest.push("frames_per_sequence", cfg.data.follow_ups + 1);
    manifest.push("image_size", cfg.network.image_size);
    written.push(manifest.write(&dir, "gen-data", cfg)?);
    Ok(written)
}

/// Where a training run of `mode` keeps its checkpoint and log.
pub fn run_dir(cfg: &ExperimentConfig, mode: Mode) -> PathBuf {
    PathBuf::from(&cfg.output_dir).join(mode.name())
}

fn write_atomically(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::File::create(&tmp)
        .and_then(|mut f| {
            f.write_all(bytes)?;
            f.sync_all()
        })
        .at_path(&tmp)?;
    fs::rename(&tmp, path).at_path(path)
}

/// Keeps the log header and the rows of epochs the checkpoint covers.
fn truncate_log(path: &Path, epochs: usize) -> Result<()> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut kept = format!("{}\n", EpochLog::CSV_HEADER);
    for line in text.lines().skip(1) {
        let epoch: Option<usize> = line.split(',').next().and_then(|e| e.parse().ok());
        if epoch.is_some_and(|e| e <= epochs) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    write_text(&path, kept)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<SequenceSample<f32>>> {
    read_dataset::<f32>(path)
}

/// Trains `cfg.train.mode` on the dataset at `data`, writing the checkpoint
/// and the epoch log under [`run_dir`]. With `resume`, continues from the
/// checkpoint found there.
pub fn train(
    cfg: &ExperimentConfig,
    data: &Path,
    resume: bool,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Checkpoint<f32>> {
    let dataset = load_dataset(data)?;
    let dir = run_dir(cfg, cfg.train.mode);
    make_dir(&dir)?;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let log_path = dir.join(LOG_FILE);
    let mut trainer = if resume {
        let mut state = Checkpoint::<f32>::load(&ckpt_path)?;
        if state.network != cfg.network || state.loss != cfg.loss || state.train.mode != cfg.train.mode {
            return Err(Error::config(format!(
                "checkpoint {} was trained with a different network, loss or mode than the current configuration",
                ckpt_path.display()
            )));
        }
        state.train.epochs = cfg.train.epochs;
        truncate_log(&log_path, state.epoch)?;
        Trainer::resume(&dataset, state)?
    } else {
        write_text(&log_path, format!("{}\n", EpochLog::CSV_HEADER))?;
        Trainer::new(&dataset, &cfg.network, &cfg.loss, &cfg.train)?
    };
    let mut manifest = Manifest::new("train", cfg);
    manifest.push("data", data.display());
    manifest.push("resume", resume);
    manifest.push("resumed_from_epoch", trainer.checkpoint().epoch);
    manifest.push("mode", cfg.train.mode.name());
    manifest.push("param_count", trainer.network().param_count_used(cfg.train.mode));
    manifest.write(&dir, "train", cfg)?;

    let every = cfg.train.checkpoint_every;
    while !trainer.is_finished() {
        let log = trainer.run_epoch()?;
        if trainer.is_finished() || (every > 0 && log.epoch % every == 0) {
            write_atomically(&ckpt_path, &trainer.checkpoint().to_bytes()?)?;
        }
        let mut f = fs::OpenOptions::new().append(true).open(&log_path).at_path(&log_path)?;
        writeln!(f, "{}", log.csv_row()).at_path(&log_path)?;
        on_epoch(&log);
    }
    if trainer.checkpoint().epoch == 0 || !ckpt_path.exists() {
        write_atomically(&ckpt_path, &trainer.checkpoint().to_bytes()?)?;
    }
    Ok(trainer.into_checkpoint())
}

/// Loads a checkpoint and a dataset and checks that they fit together.
pub fn load_for_eval(checkpoint: &Path, data: &Path) -> Result<(Checkpoint<f32>, Network, Vec<SequenceSample<f32>>)> {
    let ckpt = Checkpoint::<f32>::load(checkpoint)?;
    let dataset = load_dataset(data)?;
    let network = Network::new(&ckpt.network)?;
    let s = ckpt.network.image_size;
    if let Some(first) = dataset.first() {
        if first.dims() != (s, s) {
            return Err(Error::contract(format!(
                "checkpoint {} expects {s}x{s} frames, dataset {} holds {}x{} frames",
                checkpoint.display(),
                data.display(),
                first.dims().0,
                first.dims().1
            )));
        }
        if let crate::network::ResidualSharing::PerStep(t) = ckpt.network.residual_sharing {
            if first.follow_up_count() > t {
                return Err(Error::contract(format!(
                    "checkpoint {} has residual weights for {t} follow-ups, dataset {} has {}",
                    checkpoint.display(),
                    data.display(),
                    first.follow_up_count()
                )));
            }
        }
    }
    Ok((ckpt, network, dataset))
}

pub fn evaluate_checkpoint(checkpoint: &Path, data: &Path) -> Result<(Checkpoint<f32>, EvalReport)> {
    let (ckpt, network, dataset) = load_for_eval(checkpoint, data)?;
    let report = metrics::evaluate(&network, &ckpt.params, &dataset, ckpt.mode())?;
    Ok((ckpt, report))
}

/// Writes `<label>_rows.csv` and `<label>_summary.csv` into `dir`.
pub fn write_report(dir: &Path, label: &str, report: &EvalReport) -> Result<(PathBuf, PathBuf)> {
    make_dir(dir)?;
    let rows = dir.join(format!("{label}_rows.csv"));
    let summary = dir.join(format!("{label}_summary.csv"));
    write_text(&rows, report.rows_csv())?;
    write_text(&summary, report.summary_csv())?;
    Ok((rows, summary))
}

pub fn eval_dir(cfg: &ExperimentConfig) -> PathBuf {
    PathBuf::from(&cfg.output_dir).join("eval")
}

/// Evaluates one checkpoint; the report is labelled by its training mode.
pub fn eval(cfg: &ExperimentConfig, checkpoint: &Path, data: &Path) -> Result<(EvalReport, Vec<PathBuf>)> {
    let (ckpt, report) = evaluate_checkpoint(checkpoint, data)?;
    let dir = eval_dir(cfg);
    let (rows, summary) = write_report(&dir, ckpt.mode().name(), &report)?;
    let mut manifest = Manifest::new("eval", cfg);
    manifest.push("checkpoint", checkpoint.display());
    manifest.push("data", data.display());
    manifest.push("mode", ckpt.mode().name());
    let m = manifest.write(&dir, "eval", cfg)?;
    Ok((report, vec![rows, summary, m]))
}

/// Evaluates two checkpoints on the same data and writes a side-by-side
/// per-frame summary.
pub fn compare(cfg: &ExperimentConfig, first: &Path, second: &Path, data: &Path) -> Result<Vec<PathBuf>> {
    let (a, ra) = evaluate_checkpoint(first, data)?;
    let (b, rb) = evaluate_checkpoint(second, data)?;
    let (la, lb) = if a.mode() == b.mode() {
        (format!("{}_1", a.mode().name()), format!("{}_2", b.mode().name()))
    } else {
        (a.mode().name().to_string(), b.mode().name().to_string())
    };
    let dir = eval_dir(cfg);
    let (r1, s1) = write_report(&dir, &la, &ra)?;
    let (r2, s2) = write_report(&dir, &lb, &rb)?;
    let cmp = dir.join("comparison.csv");
    write_text(&cmp, comparison_csv((&la, &lb), &ra.summary, &rb.summary)?)?;
    let mut manifest = Manifest::new("eval-compare", cfg);
    manifest.push("checkpoint.first", first.display());
    manifest.push("checkpoint.second", second.display());
    manifest.push("data", data.display());
    let m = manifest.write(&dir, "eval-compare", cfg)?;
    Ok(vec![r1, s1, r2, s2, cmp, m])
}

fn label_of(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    stem.strip_suffix("_summary").unwrap_or(&stem).to_string()
}

/// Renders curves from summary CSVs and, when a checkpoint and dataset are
/// given, frame and deformation-grid strips of one sequence.
pub fn export_plots(
    cfg: &ExperimentConfig,
    summaries: &[PathBuf],
    strip: Option<(&Path, &Path, usize)>,
) -> Result<Vec<PathBuf>> {
    if summaries.is_empty() && strip.is_none() {
        return Err(Error::config("nothing to plot: pass --summary and/or --checkpoint with --data"));
    }
    let dir = PathBuf::from(&cfg.output_dir).join("plots");
    make_dir(&dir)?;
    let mut written = Vec::new();
    let mut loaded = Vec::new();
    for path in summaries {
        let text = read_text(path)?;
        let summary = parse_summary_csv(&text).at_path(path)?;
        loaded.push((label_of(path), summary));
    }
    type Pick = fn(&metrics::FrameSummary) -> Option<metrics::Stat>;
    let charts: [(&str, &str, &str, Pick); 4] = [
        ("mse.svg", "Per-frame MSE", "MSE", |f| Some(f.mse)),
        ("dice.svg", "Propagated segmentation Dice", "Dice", |f| f.dice),
        ("hd.svg", "Propagated segmentation Hausdorff distance", "HD (pixels)", |f| f.hd),
        ("neg_jac.svg", "Negative Jacobian fraction", "fraction of pixels", |f| Some(f.neg_jac_frac)),
    ];
    if !loaded.is_empty() {
        for (file, title, y, pick) in charts {
            let series: Vec<Series> = loaded.iter().map(|(l, s)| Series::from_summary(l, s, pick)).collect();
            if series.iter().all(|s| s.points.is_empty()) {
                continue;
            }
            let path = dir.join(file);
            write_text(&path, line_plot(title, y, &series)?)?;
            written.push(path);
        }
    }
    let mut manifest = Manifest::new("export-plots", cfg);
    for (k, p) in summaries.iter().enumerate() {
        manifest.push(&format!("summary.{k}"), p.display());
    }
    if let Some((checkpoint, data, index)) = strip {
        let (ckpt, network, dataset) = load_for_eval(checkpoint, data)?;
        let seq = dataset.get(index).ok_or_else(|| {
            Error::config(format!("sequence {index} requested, dataset holds {}", dataset.len()))
        })?;
        let out = network.forward(seq, &ckpt.params, ckpt.mode())?;
        let t = seq.follow_up_count();
        let frame_labels: Vec<String> = (0..=t).map(|k| format!("I{k}")).collect();
        let mut warped = vec![seq.frames[0].clone()];
        warped.extend(out.warped.iter().cloned());
        let mut fields = vec![crate::fields::DeformationField::identity(seq.dims().0, seq.dims().1)?];
        fields.extend(out.deformations.iter().cloned());
        let mode = ckpt.mode().name();
        for (file, svg) in [
            ("frames.svg".to_string(), image_strip(&seq.frames, &frame_labels)?),
            (format!("warped_{mode}.svg"), image_strip(&warped, &frame_labels)?),
            (format!("grid_{mode}.svg"), grid_strip(&fields, &frame_labels, 2)?),
        ] {
            let path = dir.join(file);
            write_text(&path, svg)?;
            written.push(path);
        }
        manifest.push("checkpoint", checkpoint.display());
        manifest.push("data", data.display());
        manifest.push("sequence", index);
    }
    written.push(manifest.write(&dir, "export-plots", cfg)?);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;
    use crate::training::LossConfig;

    fn small_cfg(dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.network = NetworkConfig::tiny(16);
        cfg.loss = LossConfig::for_network(&cfg.network);
        cfg.data.follow_ups = 2;
        cfg.data.train_count = 4;
        cfg.data.val_count = 1;
        cfg.data.test_count = 2;
        cfg.train.epochs = 2;
        cfg.train.batch_size = 2;
        cfg.train.checkpoint_every = 1;
        cfg.output_dir = dir.to_string_lossy().into_owned();
        cfg
    }

    #[test]
    fn pipeline_end_to_end() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = small_cfg(tmp.path());
        let files = gen_data(&cfg).unwrap();
        assert_eq!(files.len(), 4);
        let manifest = fs::read_to_string(tmp.path().join("manifest-gen-data.txt")).unwrap();
        assert!(manifest.contains("split.train.count = 4"));
        assert!(manifest.contains("seed.data = 0"));

        let train_path = dataset_path(tmp.path(), Split::Train);
        let mut rows = 0;
        let ck = train(&cfg, &train_path, false, |_| rows += 1).unwrap();
        assert_eq!((rows, ck.epoch), (2, 2));
        let log = fs::read_to_string(run_dir(&cfg, Mode::Tlrn).join(LOG_FILE)).unwrap();
        assert_eq!(log.lines().count(), 3);

        let ckpt = run_dir(&cfg, Mode::Tlrn).join(CHECKPOINT_FILE);
        let (report, out) = eval(&cfg, &ckpt, &dataset_path(tmp.path(), Split::Test)).unwrap();
        assert_eq!(report.summary.len(), 2);
        assert!(report.rows.iter().all(|r| r.mse.is_finite()));
        let summary = out.iter().find(|p| p.to_string_lossy().ends_with("tlrn_summary.csv")).unwrap();
        let plots = export_plots(&cfg, &[summary.clone()], Some((&ckpt, &train_path, 0))).unwrap();
        assert!(plots.iter().any(|p| p.ends_with("mse.svg")));
        assert!(plots.iter().any(|p| p.ends_with("grid_tlrn.svg")));
    }

    #[test]
    fn config_resolution_and_overrides() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("exp.cfg");
        fs::write(&path, "train.epochs = 3\n").unwrap();
        let cfg = resolve_config(Some("ring-desk"), Some(&path), Some(9), Some(Path::new("elsewhere"))).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!((cfg.data.seed, cfg.train.seed), (9, 9));
        assert_eq!(cfg.output_dir, "elsewhere");
        assert_eq!(cfg.data.kind, crate::config::DataKind::Ring);

        fs::write(&path, "# header\ntrain.epochz = 3\n").unwrap();
        let err = resolve_config(Some("ring-desk"), Some(&path), None, None).unwrap_err();
        assert!(err.to_string().starts_with(&path.display().to_string()));
        match err.root() {
            Error::ConfigLine { line, message } => {
                assert_eq!(*line, 2);
                assert!(message.contains("train.epochz"));
            }
            other => panic!("{other:?}"),
        }
        assert!(resolve_config(Some("nope"), None, None, None).is_err());
    }

    #[test]
    fn incompatible_dataset_names_both_shapes() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = small_cfg(tmp.path());
        gen_data(&cfg).unwrap();
        let train_path = dataset_path(tmp.path(), Split::Train);
        let mut one = cfg.clone();
        one.train.epochs = 1;
        train(&one, &train_path, false, |_| {}).unwrap();
        let mut other = small_cfg(&tmp.path().join("big"));
        other.network = NetworkConfig::tiny(32);
        let big = gen_data(&other).unwrap();
        let err = evaluate_checkpoint(&run_dir(&cfg, Mode::Tlrn).join(CHECKPOINT_FILE), &big[2]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let msg = err.to_string();
        assert!(msg.contains("16x16") && msg.contains("32x32"), "{msg}");
    }
}
