//! Sequence loss, Adam training loop, checkpoints and gradient checking.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config;
use crate::error::{AtPath, Error, Result};
use crate::fields::{exp_map_backward, smoothness_energy, smoothness_energy_grad, warp_image_backward, BoundaryMode};
use crate::network::{Mode, ModelParams, Network, NetworkConfig, ParamGroup};
use crate::real::{Dtype, Real};
use crate::synthdata::{derive_seed, SequenceSample};

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Weight of the image similarity term.
    pub lambda: f64,
    /// Coefficient of the squared parameter norm.
    pub weight_decay: f64,
    pub num_squarings: usize,
    pub boundary: BoundaryMode,
}

impl LossConfig {
    /// Default weights with the integration settings of `net`.
    pub fn for_network(net: &NetworkConfig) -> Self {
        LossConfig {
            lambda: 10.0,
            weight_decay: 1e-5,
            num_squarings: net.num_squarings,
            boundary: net.boundary,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("loss.lambda must be positive, got {}", self.lambda)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!(
                "loss.weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }

    fn check_against(&self, net: &NetworkConfig) -> Result<()> {
        if self.num_squarings != net.num_squarings || self.boundary != net.boundary {
            return Err(Error::contract(format!(
                "loss integrates with K = {} ({}), network with K = {} ({})",
                self.num_squarings,
                self.boundary.name(),
                net.num_squarings,
                net.boundary.name()
            )));
        }
        Ok(())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::for_network(&NetworkConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Checkpoint cadence in epochs; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub mode: Mode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 16,
            epochs: 500,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            checkpoint_every: 50,
            mode: Mode::Tlrn,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("train.learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs must be at least 1"));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("train.{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::config(format!("train.adam_epsilon must be positive, got {}", self.adam_epsilon)));
        }
        Ok(())
    }
}

/// Loss terms summed over a batch. `similarity` is the unweighted sum of
/// per-frame MSEs; the total is `lambda * similarity + smoothness + regularity`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub lambda: f64,
    pub similarity: f64,
    pub smoothness: f64,
    /// `weight_decay * ||Θ||²` over the parameters the mode uses.
    pub regularity: f64,
}

impl LossBreakdown {
    pub fn weighted_similarity(&self) -> f64 {
        self.lambda * self.similarity
    }

    pub fn total(&self) -> f64 {
        self.weighted_similarity() + self.smoothness + self.regularity
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Term {
    Similarity,
    Smoothness,
    Regularity,
    Gradient,
}

impl Term {
    fn name(self) -> &'static str {
        match self {
            Term::Similarity => "similarity",
            Term::Smoothness => "smoothness",
            Term::Regularity => "regularity",
            Term::Gradient => "gradient",
        }
    }
}

#[derive(Debug)]
enum BatchError {
    Failed(Error),
    NonFinite { term: Term, sequence: usize },
}

impl From<Error> for BatchError {
    fn from(e: Error) -> Self {
        BatchError::Failed(e)
    }
}

struct SampleResult<F> {
    total: f64,
    similarity: f64,
    smoothness: f64,
    grads: Option<ModelParams<F>>,
}

fn sample_terms<F: Real>(
    network: &Network,
    params: &ModelParams<F>,
    sample: &SequenceSample<F>,
    loss: &LossConfig,
    mode: Mode,
    want_grad: bool,
) -> Result<(f64, f64, Option<ModelParams<F>>)> {
    let bc = loss.boundary;
    let (out, trace) = network.forward_traced(sample, params, mode)?;
    let reference = sample.reference();
    let npx = reference.data().len();
    let lambda = F::of(loss.lambda);
    let mut similarity = 0.0;
    let mut smoothness = 0.0;
    let mut vgrads = Vec::with_capacity(out.velocities.len());
    for (k, v) in out.velocities.iter().enumerate() {
        let target = sample.frames[k + 1].data();
        let warped = out.warped[k].data();
        let mut sq = F::zero();
        for (&a, &b) in warped.iter().zip(target) {
            sq += (a - b) * (a - b);
        }
        similarity += sq.as_f64() / npx as f64;
        smoothness += smoothness_energy(v).as_f64();
        if want_grad {
            let scale = lambda * F::of(2.0 / npx as f64);
            let g_out: Vec<F> = warped.iter().zip(target).map(|(&a, &b)| scale * (a - b)).collect();
            let (_, gux, guy) = warp_image_backward(reference, &out.deformations[k], bc, &g_out)?;
            let (mut gvx, mut gvy) = exp_map_backward(&trace.exp_tapes[k], &gux, &guy);
            let (sx, sy) = smoothness_energy_grad(v);
            gvx.iter_mut().zip(&sx).for_each(|(g, s)| *g += *s);
            gvy.iter_mut().zip(&sy).for_each(|(g, s)| *g += *s);
            vgrads.push((gvx, gvy));
        }
    }
    let grads = if want_grad {
        let mut g = params.zeros_like();
        network.backward(params, &trace, &vgrads, &mut g)?;
        Some(g)
    } else {
        None
    };
    Ok((similarity, smoothness, grads))
}

fn check_batch<F: Real>(network: &Network, batch: &[&SequenceSample<F>], loss: &LossConfig) -> Result<()> {
    loss.check_against(network.config())?;
    let first = batch.first().ok_or_else(|| Error::contract("batch is empty"))?;
    let (t, dims) = (first.follow_up_count(), first.dims());
    if let Some(i) = batch.iter().position(|s| s.follow_up_count() != t || s.dims() != dims) {
        return Err(Error::contract(format!(
            "batch element {i} has {} follow-ups at {:?}, element 0 has {t} at {dims:?}",
            batch[i].follow_up_count(),
            batch[i].dims()
        )));
    }
    Ok(())
}

/// Evaluates the batch with elements in parallel and a fixed-order reduction.
fn batch_eval<F: Real>(
    network: &Network,
    params: &ModelParams<F>,
    batch: &[&SequenceSample<F>],
    loss: &LossConfig,
    mode: Mode,
    want_grad: bool,
) -> std::result::Result<(f64, LossBreakdown, Option<ModelParams<F>>), BatchError> {
    check_batch(network, batch, loss)?;
    network.check_params(params)?;
    let results: Vec<SampleResult<F>> = batch
        .par_iter()
        .map(|s| {
            let (similarity, smoothness, grads) = sample_terms(network, params, s, loss, mode, want_grad)?;
            Ok(SampleResult {
                total: loss.lambda * similarity + smoothness,
                similarity,
                smoothness,
                grads,
            })
        })
        .collect::<Result<_>>()?;

    let groups = Network::groups_used(mode);
    let wd = F::of(loss.weight_decay);
    let mut breakdown = LossBreakdown {
        lambda: loss.lambda,
        regularity: loss.weight_decay * params.squared_norm(groups).as_f64(),
        ..Default::default()
    };
    let mut total = 0.0;
    let mut grads = want_grad.then(|| params.zeros_like());
    for (i, r) in results.iter().enumerate() {
        if !r.similarity.is_finite() {
            return Err(BatchError::NonFinite { term: Term::Similarity, sequence: i });
        }
        if !r.smoothness.is_finite() {
            return Err(BatchError::NonFinite { term: Term::Smoothness, sequence: i });
        }
        breakdown.similarity += r.similarity;
        breakdown.smoothness += r.smoothness;
        total += r.total;
        if let (Some(acc), Some(g)) = (grads.as_mut(), r.grads.as_ref()) {
            if !g.all_finite() {
                return Err(BatchError::NonFinite { term: Term::Gradient, sequence: i });
            }
            acc.accumulate(g);
        }
    }
    if !breakdown.regularity.is_finite() {
        return Err(BatchError::NonFinite { term: Term::Regularity, sequence: 0 });
    }
    total += breakdown.regularity;
    if let Some(acc) = grads.as_mut() {
        let two_wd = wd + wd;
        for &g in groups {
            for (a, &p) in acc.group_mut(g).iter_mut().zip(params.group(g)) {
                *a += two_wd * p;
            }
        }
    }
    Ok((total, breakdown, grads))
}

fn plain<T>(r: std::result::Result<T, BatchError>) -> Result<T> {
    r.map_err(|e| match e {
        BatchError::Failed(e) => e,
        BatchError::NonFinite { term, sequence } => {
            Error::Numeric(format!("non-finite {} term at batch element {sequence}", term.name()))
        }
    })
}

/// Batch loss `Σ_i Σ_τ [λ·MSE + smoothness] + weight_decay·||Θ||²` and its
/// breakdown.
pub fn sequence_loss<F: Real>(
    network: &Network,
    params: &ModelParams<F>,
    batch: &[&SequenceSample<F>],
    loss: &LossConfig,
    mode: Mode,
) -> Result<(f64, LossBreakdown)> {
    let (total, breakdown, _) = plain(batch_eval(network, params, batch, loss, mode, false))?;
    Ok((total, breakdown))
}

/// [`sequence_loss`] together with its gradient with respect to every
/// parameter (exactly zero for groups the mode does not read).
pub fn sequence_loss_and_grad<F: Real>(
    network: &Network,
    params: &ModelParams<F>,
    batch: &[&SequenceSample<F>],
    loss: &LossConfig,
    mode: Mode,
) -> Result<(f64, LossBreakdown, ModelParams<F>)> {
    let (total, breakdown, grads) = plain(batch_eval(network, params, batch, loss, mode, true))?;
    Ok((total, breakdown, grads.expect("gradient requested")))
}

/// First and second moment estimates of Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: ModelParams<F>,
    pub v: ModelParams<F>,
    pub step: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &ModelParams<F>) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    /// One bias-corrected Adam update.
    pub fn update(&mut self, params: &mut ModelParams<F>, grads: &ModelParams<F>, cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (F::of(cfg.adam_beta1), F::of(cfg.adam_beta2));
        let c1 = F::of(1.0 - cfg.adam_beta1.powf(self.step as f64));
        let c2 = F::of(1.0 - cfg.adam_beta2.powf(self.step as f64));
        let (lr, eps) = (F::of(cfg.learning_rate), F::of(cfg.adam_epsilon));
        let one = F::one();
        for g in ParamGroup::ALL {
            let p = params.group_mut(g);
            let m = self.m.group_mut(g);
            let v = self.v.group_mut(g);
            for (((p, m), v), &d) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grads.group(g)) {
                *m = b1 * *m + (one - b1) * d;
                *v = b2 * *v + (one - b2) * d * d;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Everything needed to evaluate a model or continue training it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub params: ModelParams<F>,
    pub optimizer: AdamState<F>,
    /// Completed epochs.
    pub epoch: usize,
    /// Mean training loss of each completed epoch.
    pub history: Vec<f64>,
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TLRNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_section(buf: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    buf.extend_from_slice(tag);
    buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    buf.extend_from_slice(payload);
}

fn put_tensors<F: Real>(buf: &mut Vec<u8>, network: &Network, prefix: &str, params: &ModelParams<F>) {
    let layout = network.tensor_layout();
    buf.extend_from_slice(&(layout.len() as u32).to_le_bytes());
    for t in &layout {
        let name = format!("{prefix}{}", t.name);
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(F::DTYPE.code());
        buf.push(t.shape.len() as u8);
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &params.group(t.group)[t.offset..t.offset + t.len()] {
            v.write_le(buf);
        }
    }
}

/// Byte cursor that reports absolute offsets in its errors.
struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::parse(
                self.at as u64,
                format!("truncated while reading {what}: need {n} bytes, {} left", self.bytes.len() - self.at),
            ));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn section(&mut self, tag: &[u8; 4]) -> Result<Cursor<'a>> {
        let start = self.at;
        let got = self.take(4, "section tag")?;
        if got != tag {
            return Err(Error::parse(
                start as u64,
                format!(
                    "expected section {}, found {}",
                    String::from_utf8_lossy(tag),
                    String::from_utf8_lossy(got)
                ),
            ));
        }
        let len = self.u64("section length")? as usize;
        let body_start = self.at;
        let body = self.take(len, "section body")?;
        Ok(Cursor {
            bytes: &self.bytes[..body_start + body.len()],
            at: body_start,
        })
    }

    fn finish(&self, what: &str) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(Error::parse(self.at as u64, format!("{} unexpected bytes after {what}", self.bytes.len() - self.at)));
        }
        Ok(())
    }
}

fn get_tensors<F: Real>(cur: &mut Cursor, network: &Network, prefix: &str) -> Result<ModelParams<F>> {
    let layout = network.tensor_layout();
    let count_at = cur.at;
    let count = cur.u32("tensor count")? as usize;
    if count != layout.len() {
        return Err(Error::parse(
            count_at as u64,
            format!("{count} tensors stored, architecture has {}", layout.len()),
        ));
    }
    let mut params = network.zero_params::<F>();
    for t in &layout {
        let at = cur.at;
        let name_len = cur.u16("tensor name length")? as usize;
        let name = String::from_utf8_lossy(cur.take(name_len, "tensor name")?).into_owned();
        let expected = format!("{prefix}{}", t.name);
        if name != expected {
            return Err(Error::parse(at as u64, format!("tensor `{name}` found where `{expected}` belongs")));
        }
        let dtype_at = cur.at;
        let dtype = Dtype::from_code(cur.u8("dtype")?)
            .ok_or_else(|| Error::parse(dtype_at as u64, "unknown dtype code"))?;
        let ndim = cur.u8("rank")? as usize;
        let shape = (0..ndim).map(|_| Ok(cur.u32("dimension")? as usize)).collect::<Result<Vec<_>>>()?;
        if shape != t.shape {
            return Err(Error::parse(at as u64, format!("tensor `{name}` has shape {shape:?}, expected {:?}", t.shape)));
        }
        let raw = cur.take(t.len() * dtype.size(), "tensor data")?;
        let dst = &mut params.group_mut(t.group)[t.offset..t.offset + t.len()];
        for (k, d) in dst.iter_mut().enumerate() {
            let v = match dtype {
                Dtype::F32 => f32::read_le(&raw[k * 4..]) as f64,
                Dtype::F64 => f64::read_le(&raw[k * 8..]),
            };
            *d = F::of(v);
        }
    }
    Ok(params)
}

impl<F: Real> Checkpoint<F> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let network = Network::new(&self.network)?;
        network.check_params(&self.params)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let text = config::render_model_sections(&self.network, &self.loss, &self.train);
        put_section(&mut buf, b"CONF", text.as_bytes());
        let mut p = Vec::new();
        put_tensors(&mut p, &network, "", &self.params);
        put_section(&mut buf, b"PARM", &p);
        let mut o = Vec::new();
        o.extend_from_slice(&self.optimizer.step.to_le_bytes());
        put_tensors(&mut o, &network, "m/", &self.optimizer.m);
        put_tensors(&mut o, &network, "v/", &self.optimizer.v);
        put_section(&mut buf, b"ADAM", &o);
        let mut h = Vec::new();
        h.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        h.extend_from_slice(&(self.history.len() as u64).to_le_bytes());
        for v in &self.history {
            h.extend_from_slice(&v.to_le_bytes());
        }
        put_section(&mut buf, b"PROG", &h);
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, at: 0 };
        if cur.take(8, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::parse(0, "bad magic, not a TLRNCKPT checkpoint"));
        }
        let version = cur.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::parse(8, format!("unsupported checkpoint version {version}")));
        }
        let mut conf = cur.section(b"CONF")?;
        let conf_at = conf.at;
        let text = std::str::from_utf8(conf.take(conf.bytes.len() - conf.at, "config text")?)
            .map_err(|_| Error::parse(conf_at as u64, "config section is not UTF-8"))?;
        let (network_cfg, loss, train) =
            config::parse_model_sections(text).map_err(|e| Error::parse(conf_at as u64, e.to_string()))?;
        let network = Network::new(&network_cfg).map_err(|e| Error::parse(conf_at as u64, e.to_string()))?;

        let mut parm = cur.section(b"PARM")?;
        let params = get_tensors(&mut parm, &network, "")?;
        parm.finish("parameters")?;

        let mut adam = cur.section(b"ADAM")?;
        let step = adam.u64("optimizer step")?;
        let m = get_tensors(&mut adam, &network, "m/")?;
        let v = get_tensors(&mut adam, &network, "v/")?;
        adam.finish("optimizer state")?;

        let mut prog = cur.section(b"PROG")?;
        let epoch = prog.u64("epoch")? as usize;
        let n_at = prog.at;
        let n = prog.u64("history length")? as usize;
        if n != epoch {
            return Err(Error::parse(n_at as u64, format!("history holds {n} epochs, checkpoint is at epoch {epoch}")));
        }
        let history = (0..n).map(|_| prog.f64("loss history")).collect::<Result<Vec<_>>>()?;
        prog.finish("progress")?;
        cur.finish("the last section")?;

        Ok(Checkpoint {
            network: network_cfg,
            loss,
            train,
            params,
            optimizer: AdamState { m, v, step },
            epoch,
            history,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        (|| {
            let mut f = fs::File::create(path)?;
            f.write_all(&bytes)?;
            f.flush()
        })()
        .at_path(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).at_path(path)?;
        Self::from_bytes(&bytes).at_path(path)
    }

    pub fn mode(&self) -> Mode {
        self.train.mode
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Per-sequence mean of the batch losses.
    pub mean_loss: f64,
    /// Weighted similarity contribution per sequence.
    pub similarity: f64,
    pub smoothness: f64,
    pub regularity: f64,
    pub wall_seconds: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,mean_loss,similarity,smoothness,regularity,wall_seconds";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3}",
            self.epoch, self.mean_loss, self.similarity, self.smoothness, self.regularity, self.wall_seconds
        )
    }
}

const INIT_SALT: u64 = 0x1417;
const SHUFFLE_SALT: u64 = 0x5a17;

/// Validates that every sequence fits the network and shares one frame count.
pub fn check_dataset<F: Real>(network: &Network, dataset: &[SequenceSample<F>]) -> Result<()> {
    let first = dataset.first().ok_or_else(|| Error::contract("training dataset is empty"))?;
    let s = network.config().image_size;
    let t = first.follow_up_count();
    for (i, seq) in dataset.iter().enumerate() {
        if seq.dims() != (s, s) {
            return Err(Error::contract(format!(
                "sequence {i} is {:?}, network expects ({s}, {s})",
                seq.dims()
            )));
        }
        if seq.follow_up_count() != t {
            return Err(Error::contract(format!(
                "sequence {i} has {} follow-ups, sequence 0 has {t}",
                seq.follow_up_count()
            )));
        }
    }
    Ok(())
}

/// Minibatch Adam over a fixed dataset, one epoch at a time.
pub struct Trainer<'a, F: Real> {
    network: Network,
    dataset: &'a [SequenceSample<F>],
    state: Checkpoint<F>,
}

impl<'a, F: Real> Trainer<'a, F> {
    pub fn new(
        dataset: &'a [SequenceSample<F>],
        network_cfg: &NetworkConfig,
        loss: &LossConfig,
        train: &TrainConfig,
    ) -> Result<Self> {
        network_cfg.validate()?;
        loss.validate()?;
        train.validate()?;
        let network = Network::new(network_cfg)?;
        let params = network.init_params::<F>(derive_seed(train.seed, INIT_SALT));
        let state = Checkpoint {
            network: network_cfg.clone(),
            loss: loss.clone(),
            train: train.clone(),
            optimizer: AdamState::new(&params),
            params,
            epoch: 0,
            history: Vec::new(),
        };
        Self::resume(dataset, state)
    }

    /// Continues from a checkpoint. `state.train.epochs` may be raised
    /// beforehand to extend a finished run.
    pub fn resume(dataset: &'a [SequenceSample<F>], state: Checkpoint<F>) -> Result<Self> {
        state.loss.validate()?;
        state.train.validate()?;
        let network = Network::new(&state.network)?;
        network.check_params(&state.params)?;
        network.check_params(&state.optimizer.m)?;
        network.check_params(&state.optimizer.v)?;
        check_dataset(&network, dataset)?;
        state.loss.check_against(&state.network)?;
        Ok(Trainer { network, dataset, state })
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn checkpoint(&self) -> &Checkpoint<F> {
        &self.state
    }

    pub fn into_checkpoint(self) -> Checkpoint<F> {
        self.state
    }

    pub fn is_finished(&self) -> bool {
        self.state.epoch >= self.state.train.epochs
    }

    /// Visiting order of `epoch` (0-based); depends only on seed and epoch.
    pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ SHUFFLE_SALT, epoch as u64));
        order.shuffle(&mut rng);
        order
    }

    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let start = Instant::now();
        let st = &mut self.state;
        let order = Self::epoch_order(st.train.seed, st.epoch, self.dataset.len());
        let mode = st.train.mode;
        let n = self.dataset.len() as f64;
        let mut sums = LossBreakdown::default();
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(st.train.batch_size).enumerate() {
            let batch: Vec<&SequenceSample<F>> = chunk.iter().map(|&i| &self.dataset[i]).collect();
            let (total, parts, grads) =
                batch_eval(&self.network, &st.params, &batch, &st.loss, mode, true).map_err(|e| match e {
                    BatchError::Failed(e) => e,
                    BatchError::NonFinite { term, sequence } => Error::Numeric(format!(
                        "non-finite {} term in epoch {} batch {b} (sequence {})",
                        term.name(),
                        st.epoch + 1,
                        chunk[sequence]
                    )),
                })?;
            st.optimizer.update(&mut st.params, grads.as_ref().expect("gradient requested"), &st.train);
            if !st.params.all_finite() {
                return Err(Error::Numeric(format!(
                    "parameters became non-finite after epoch {} batch {b}",
                    st.epoch + 1
                )));
            }
            sums.similarity += parts.weighted_similarity();
            sums.smoothness += parts.smoothness;
            sums.regularity += parts.regularity;
            loss_sum += total - parts.regularity;
            batches += 1;
        }
        st.epoch += 1;
        let regularity = sums.regularity / batches as f64;
        let log = EpochLog {
            epoch: st.epoch,
            mean_loss: loss_sum / n + regularity,
            similarity: sums.similarity / n,
            smoothness: sums.smoothness / n,
            regularity,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        st.history.push(log.mean_loss);
        Ok(log)
    }
}

/// Trains from scratch for `train.epochs` epochs.
pub fn train<F: Real>(
    dataset: &[SequenceSample<F>],
    network: &NetworkConfig,
    loss: &LossConfig,
    train: &TrainConfig,
) -> Result<Checkpoint<F>> {
    let mut trainer = Trainer::new(dataset, network, loss, train)?;
    while !trainer.is_finished() {
        trainer.run_epoch()?;
    }
    Ok(trainer.into_checkpoint())
}

/// One finite-difference probe.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub group: ParamGroup,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_error: f64,
    pub probes: Vec<Probe>,
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;
const ABS_FALLBACK: f64 = 1e-8;

/// Relative error, or absolute error when both values are below `1e-8`.
pub fn probe_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if analytic.abs() < ABS_FALLBACK && numeric.abs() < ABS_FALLBACK {
        diff
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

/// Compares analytic gradients with central differences at `probe_count`
/// parameters spread round-robin over the three groups. 64-bit only.
pub fn grad_check<F: Real>(
    network: &Network,
    params: &ModelParams<F>,
    sample: &SequenceSample<F>,
    loss: &LossConfig,
    mode: Mode,
    probe_count: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if F::DTYPE != Dtype::F64 {
        return Err(Error::config("gradient checking requires 64-bit parameters"));
    }
    if network.config().image_size > 16 {
        return Err(Error::config(format!(
            "gradient checking is limited to images of at most 16x16, got {0}x{0}",
            network.config().image_size
        )));
    }
    let batch = [sample];
    let (_, _, grads) = sequence_loss_and_grad(network, params, &batch, loss, mode)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = Vec::with_capacity(probe_count);
    let h = F::of(GRAD_CHECK_STEP);
    for k in 0..probe_count {
        let group = ParamGroup::ALL[k % 3];
        let len = params.group(group).len();
        if len == 0 {
            continue;
        }
        let index = rng.random_range(0..len);
        let mut p = params.clone();
        let x = params.group(group)[index];
        p.group_mut(group)[index] = x + h;
        let up = sequence_loss(network, &p, &batch, loss, mode)?.0;
        p.group_mut(group)[index] = x - h;
        let down = sequence_loss(network, &p, &batch, loss, mode)?.0;
        let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
        let analytic = grads.group(group)[index].as_f64();
        probes.push(Probe {
            group,
            index,
            analytic,
            numeric,
            error: probe_error(analytic, numeric),
        });
    }
    let max_error = probes.iter().map(|p| p.error).fold(0.0, f64::max);
    Ok(GradCheckReport { max_error, probes })
}
