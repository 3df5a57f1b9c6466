//! Experiment configuration as flat `section.key = value` text.
//!
//! Every key has a default (the `lemniscate-desk` preset). A document may
//! start with `preset = <name>` to change the base before the remaining keys
//! are applied. Unknown keys are rejected with their line number.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::fields::BoundaryMode;
use crate::network::{Mode, NetworkConfig, ResidualSharing};
use crate::synthdata::{derive_seed, DataSpec, LemniscateRanges, RingRanges, SequenceKind};
use crate::training::{LossConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Lemniscate,
    Ring,
}

impl DataKind {
    pub fn name(self) -> &'static str {
        match self {
            DataKind::Lemniscate => "lemniscate",
            DataKind::Ring => "ring",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lemniscate" => Some(DataKind::Lemniscate),
            "ring" => Some(DataKind::Ring),
            _ => None,
        }
    }
}

/// Dataset recipe; the image size is `network.image_size`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub kind: DataKind,
    pub follow_ups: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub static_frames: bool,
    pub seed: u64,
}

/// Dataset splits in generation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl DataConfig {
    pub fn spec(&self, image_size: usize) -> DataSpec {
        let kind = match self.kind {
            DataKind::Lemniscate => SequenceKind::Lemniscate(LemniscateRanges::for_size(image_size)),
            DataKind::Ring => SequenceKind::Ring(RingRanges::for_size(image_size)),
        };
        DataSpec {
            kind,
            image_size,
            follow_ups: self.follow_ups,
            static_frames: self.static_frames,
        }
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_count,
            Split::Val => self.val_count,
            Split::Test => self.test_count,
        }
    }

    /// Seed of a split; splits draw from disjoint derived seed streams.
    pub fn split_seed(&self, split: Split) -> u64 {
        derive_seed(self.seed, 0xDA7A_0000 + split as u64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Output directory for generated files.
    pub output_dir: String,
}

pub const PRESETS: [&str; 3] = ["lemniscate-desk", "lemniscate-paper", "ring-desk"];

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset("lemniscate-desk").expect("built-in preset")
    }
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Option<Self> {
        let desk_net = NetworkConfig::desk();
        let desk_train = TrainConfig {
            learning_rate: 3e-4,
            batch_size: 16,
            epochs: 500,
            ..TrainConfig::default()
        };
        let cfg = match name {
            "lemniscate-desk" => ExperimentConfig {
                loss: LossConfig::for_network(&desk_net),
                network: desk_net,
                train: desk_train,
                data: DataConfig {
                    kind: DataKind::Lemniscate,
                    follow_ups: 7,
                    train_count: 200,
                    val_count: 50,
                    test_count: 50,
                    static_frames: false,
                    seed: 0,
                },
                output_dir: "runs/lemniscate-desk".into(),
            },
            "ring-desk" => ExperimentConfig {
                loss: LossConfig::for_network(&desk_net),
                network: desk_net,
                train: desk_train,
                data: DataConfig {
                    kind: DataKind::Ring,
                    follow_ups: 7,
                    train_count: 100,
                    val_count: 25,
                    test_count: 50,
                    static_frames: false,
                    seed: 0,
                },
                output_dir: "runs/ring-desk".into(),
            },
            "lemniscate-paper" => {
                let net = NetworkConfig::default();
                ExperimentConfig {
                    loss: LossConfig::for_network(&net),
                    network: net,
                    train: TrainConfig {
                        learning_rate: 1e-4,
                        batch_size: 32,
                        epochs: 20000,
                        checkpoint_every: 500,
                        ..TrainConfig::default()
                    },
                    data: DataConfig {
                        kind: DataKind::Lemniscate,
                        follow_ups: 11,
                        train_count: 1000,
                        val_count: 200,
                        test_count: 200,
                        static_frames: false,
                        seed: 0,
                    },
                    output_dir: "runs/lemniscate-paper".into(),
                }
            }
            _ => return None,
        };
        Some(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.loss.num_squarings != self.network.num_squarings || self.loss.boundary != self.network.boundary {
            return Err(Error::config("loss integration settings must follow the network section"));
        }
        if self.data.follow_ups == 0 {
            return Err(Error::config("data.follow_ups must be at least 1"));
        }
        if self.data.train_count == 0 || self.data.test_count == 0 {
            return Err(Error::config("data.train_count and data.test_count must be at least 1"));
        }
        if let ResidualSharing::PerStep(t) = self.network.residual_sharing {
            if t < self.data.follow_ups {
                return Err(Error::config(format!(
                    "network.residual_sharing has weights for {t} steps, data has {} follow-ups",
                    self.data.follow_ups
                )));
            }
        }
        if self.output_dir.is_empty() {
            return Err(Error::config("output.dir must not be empty"));
        }
        Ok(())
    }

    /// Sets both the data and the training seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.train.seed = seed;
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in entries(self) {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let lines = split_lines(text)?;
        let mut cfg = ExperimentConfig::default();
        let mut rest = &lines[..];
        if let Some((line, key, value)) = lines.first() {
            if key == "preset" {
                cfg = ExperimentConfig::preset(value).ok_or_else(|| Error::ConfigLine {
                    line: *line,
                    message: format!("unknown preset `{value}`, expected one of {}", PRESETS.join(", ")),
                })?;
                rest = &lines[1..];
            }
        }
        for (line, key, value) in rest {
            if key == "preset" {
                return Err(Error::ConfigLine {
                    line: *line,
                    message: "`preset` must be the first key".into(),
                });
            }
            apply(&mut cfg, key, value).map_err(|message| Error::ConfigLine { line: *line, message })?;
        }
        // integration settings of the loss always follow the network
        cfg.loss.num_squarings = cfg.network.num_squarings;
        cfg.loss.boundary = cfg.network.boundary;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn split_lines(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out: Vec<(usize, String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (key, value) = body.split_once('=').ok_or_else(|| Error::ConfigLine {
            line,
            message: format!("expected `key = value`, got `{body}`"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(Error::ConfigLine { line, message: "empty key".into() });
        }
        if let Some((prev, _, _)) = out.iter().find(|(_, k, _)| k == key) {
            return Err(Error::ConfigLine {
                line,
                message: format!("duplicate key `{key}` (first set on line {prev})"),
            });
        }
        out.push((line, key.to_string(), value.to_string()));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("`{key}` has invalid value `{value}`"))
}

fn flag(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("`{key}` must be true or false, got `{value}`")),
    }
}

fn apply(cfg: &mut ExperimentConfig, key: &str, v: &str) -> std::result::Result<(), String> {
    let n = &mut cfg.network;
    let t = &mut cfg.train;
    let d = &mut cfg.data;
    match key {
        "network.image_size" => n.image_size = num(key, v)?,
        "network.base_channels" => n.base_channels = num(key, v)?,
        "network.num_downsamplings" => n.num_downsamplings = num(key, v)?,
        "network.latent_channels" => n.latent_channels = num(key, v)?,
        "network.residual_hidden_channels" => n.residual_hidden_channels = num(key, v)?,
        "network.leaky_slope" => n.leaky_slope = num(key, v)?,
        "network.num_squarings" => n.num_squarings = num(key, v)?,
        "network.boundary" => {
            n.boundary = BoundaryMode::parse(v).ok_or_else(|| format!("`{key}` must be clamp or periodic, got `{v}`"))?
        }
        "network.residual_sharing" => {
            n.residual_sharing = ResidualSharing::parse(v)
                .ok_or_else(|| format!("`{key}` must be shared or per-step:<T>, got `{v}`"))?
        }
        "loss.lambda" => cfg.loss.lambda = num(key, v)?,
        "loss.weight_decay" => cfg.loss.weight_decay = num(key, v)?,
        "train.learning_rate" => t.learning_rate = num(key, v)?,
        "train.batch_size" => t.batch_size = num(key, v)?,
        "train.epochs" => t.epochs = num(key, v)?,
        "train.seed" => t.seed = num(key, v)?,
        "train.adam_beta1" => t.adam_beta1 = num(key, v)?,
        "train.adam_beta2" => t.adam_beta2 = num(key, v)?,
        "train.adam_epsilon" => t.adam_epsilon = num(key, v)?,
        "train.checkpoint_every" => t.checkpoint_every = num(key, v)?,
        "train.mode" => t.mode = Mode::parse(v).ok_or_else(|| format!("`{key}` must be tlrn or baseline, got `{v}`"))?,
        "data.kind" => d.kind = DataKind::parse(v).ok_or_else(|| format!("`{key}` must be lemniscate or ring, got `{v}`"))?,
        "data.follow_ups" => d.follow_ups = num(key, v)?,
        "data.train_count" => d.train_count = num(key, v)?,
        "data.val_count" => d.val_count = num(key, v)?,
        "data.test_count" => d.test_count = num(key, v)?,
        "data.static_frames" => d.static_frames = flag(key, v)?,
        "data.seed" => d.seed = num(key, v)?,
        "output.dir" => cfg.output_dir = v.to_string(),
        _ => return Err(format!("unknown key `{key}`")),
    }
    Ok(())
}

fn model_entries(n: &NetworkConfig, l: &LossConfig, t: &TrainConfig) -> Vec<(&'static str, String)> {
    vec![
        ("network.image_size", n.image_size.to_string()),
        ("network.base_channels", n.base_channels.to_string()),
        ("network.num_downsamplings", n.num_downsamplings.to_string()),
        ("network.latent_channels", n.latent_channels.to_string()),
        ("network.residual_hidden_channels", n.residual_hidden_channels.to_string()),
        ("network.leaky_slope", format!("{:?}", n.leaky_slope)),
        ("network.num_squarings", n.num_squarings.to_string()),
        ("network.boundary", n.boundary.name().to_string()),
        ("network.residual_sharing", n.residual_sharing.render()),
        ("loss.lambda", format!("{:?}", l.lambda)),
        ("loss.weight_decay", format!("{:?}", l.weight_decay)),
        ("train.learning_rate", format!("{:?}", t.learning_rate)),
        ("train.batch_size", t.batch_size.to_string()),
        ("train.epochs", t.epochs.to_string()),
        ("train.seed", t.seed.to_string()),
        ("train.adam_beta1", format!("{:?}", t.adam_beta1)),
        ("train.adam_beta2", format!("{:?}", t.adam_beta2)),
        ("train.adam_epsilon", format!("{:?}", t.adam_epsilon)),
        ("train.checkpoint_every", t.checkpoint_every.to_string()),
        ("train.mode", t.mode.name().to_string()),
    ]
}

fn entries(cfg: &ExperimentConfig) -> Vec<(&'static str, String)> {
    let mut out = model_entries(&cfg.network, &cfg.loss, &cfg.train);
    let d = &cfg.data;
    out.extend([
        ("data.kind", d.kind.name().to_string()),
        ("data.follow_ups", d.follow_ups.to_string()),
        ("data.train_count", d.train_count.to_string()),
        ("data.val_count", d.val_count.to_string()),
        ("data.test_count", d.test_count.to_string()),
        ("data.static_frames", d.static_frames.to_string()),
        ("data.seed", d.seed.to_string()),
        ("output.dir", cfg.output_dir.clone()),
    ]);
    out
}

/// Canonical text of the `network`, `loss` and `train` sections.
pub fn render_model_sections(n: &NetworkConfig, l: &LossConfig, t: &TrainConfig) -> String {
    let mut s = String::new();
    for (k, v) in model_entries(n, l, t) {
        writeln!(s, "{k} = {v}").unwrap();
    }
    s
}

/// Inverse of [`render_model_sections`]; other sections are rejected.
pub fn parse_model_sections(text: &str) -> Result<(NetworkConfig, LossConfig, TrainConfig)> {
    let mut cfg = ExperimentConfig::default();
    for (line, key, value) in split_lines(text)? {
        if !(key.starts_with("network.") || key.starts_with("loss.") || key.starts_with("train.")) {
            return Err(Error::ConfigLine {
                line,
                message: format!("unknown key `{key}`"),
            });
        }
        apply(&mut cfg, &key, &value).map_err(|message| Error::ConfigLine { line, message })?;
    }
    cfg.loss.num_squarings = cfg.network.num_squarings;
    cfg.loss.boundary = cfg.network.boundary;
    cfg.network.validate()?;
    cfg.loss.validate()?;
    cfg.train.validate()?;
    Ok((cfg.network, cfg.loss, cfg.train))
}
