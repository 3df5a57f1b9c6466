//! Pairwise U-Net registration network with a temporal latent residual unit.
//!
//! For every follow-up frame `I^t` the encoder sees the channel stack
//! `(I^0, I^t)` and produces a bottleneck latent `z^t` plus per-level skip
//! features. In TLRN mode the latents are fused recurrently,
//!
//! ```text
//! zhat^t = F(zhat^{t-1} ⊕ z^t) + W(zhat^{t-1} ⊕ z^t),   zhat^0 = 0
//! ```
//!
//! with `F` two 3x3 convolutions around a LeakyReLU and `W` a 1x1 projection.
//! The shared decoder turns `zhat^t` (and frame `t`'s own skips) into a
//! stationary velocity field that is exponentiated into `phi^t`. The baseline
//! skips the fusion (`zhat^t = z^t`) and is a plain pairwise network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::fields::{warp_image, BoundaryMode, DeformationField, ExpMapTape, GridImage, VelocityField};
use crate::nn::{leaky_relu, leaky_relu_backward, upsample2, upsample2_backward, ConvSpec, Tensor3};
use crate::real::Real;
use crate::synthdata::SequenceSample;

/// Which forward pass to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Mode {
    /// Temporal latent residual fusion across frames.
    #[default]
    Tlrn,
    /// Independent pairwise registration per frame (ablation).
    Baseline,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Tlrn => "tlrn",
            Mode::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tlrn" => Some(Mode::Tlrn),
            "baseline" => Some(Mode::Baseline),
            _ => None,
        }
    }
}

/// Whether one residual unit is applied recurrently or each step has its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ResidualSharing {
    #[default]
    Shared,
    /// Separate `(F, W)` weights for each of this many time steps.
    PerStep(usize),
}

impl ResidualSharing {
    pub fn render(self) -> String {
        match self {
            ResidualSharing::Shared => "shared".to_string(),
            ResidualSharing::PerStep(t) => format!("per-step:{t}"),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        if s == "shared" {
            return Some(ResidualSharing::Shared);
        }
        let t: usize = s.strip_prefix("per-step:")?.parse().ok()?;
        (t >= 1).then_some(ResidualSharing::PerStep(t))
    }

    fn copies(self) -> usize {
        match self {
            ResidualSharing::Shared => 1,
            ResidualSharing::PerStep(t) => t,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub num_downsamplings: usize,
    pub latent_channels: usize,
    pub residual_hidden_channels: usize,
    pub leaky_slope: f64,
    pub num_squarings: usize,
    pub boundary: BoundaryMode,
    pub residual_sharing: ResidualSharing,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            image_size: 64,
            base_channels: 16,
            num_downsamplings: 3,
            latent_channels: 32,
            residual_hidden_channels: 32,
            leaky_slope: 0.2,
            num_squarings: 6,
            boundary: BoundaryMode::Clamp,
            residual_sharing: ResidualSharing::Shared,
        }
    }
}

impl NetworkConfig {
    /// Reduced architecture for 32x32 desk-scale runs.
    pub fn desk() -> Self {
        NetworkConfig {
            image_size: 32,
            base_channels: 8,
            num_downsamplings: 2,
            latent_channels: 16,
            residual_hidden_channels: 16,
            ..Self::default()
        }
    }

    /// Tiny configuration for gradient checks.
    pub fn tiny(image_size: usize) -> Self {
        NetworkConfig {
            image_size,
            base_channels: 2,
            num_downsamplings: 1,
            latent_channels: 3,
            residual_hidden_channels: 3,
            num_squarings: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_downsamplings == 0 || self.num_downsamplings > 6 {
            return Err(Error::config("num_downsamplings must be in 1..=6"));
        }
        let factor = 1usize << self.num_downsamplings;
        if self.image_size < 2 * factor || self.image_size % factor != 0 {
            return Err(Error::config(format!(
                "image_size {} must be a multiple of 2^num_downsamplings = {factor} and at least {}",
                self.image_size,
                2 * factor
            )));
        }
        if self.base_channels == 0 || self.latent_channels == 0 || self.residual_hidden_channels == 0 {
            return Err(Error::config("channel counts must be at least 1"));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::config("leaky_slope must be in (0, 1)"));
        }
        if self.num_squarings == 0 || self.num_squarings > 30 {
            return Err(Error::config("num_squarings must be in 1..=30"));
        }
        Ok(())
    }

    pub fn latent_size(&self) -> usize {
        self.image_size >> self.num_downsamplings
    }

    fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Parameter groups of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Encoder and decoder weights.
    EncoderDecoder,
    /// Residual function `F`.
    Residual,
    /// Shortcut projection `W`.
    Shortcut,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::EncoderDecoder, ParamGroup::Residual, ParamGroup::Shortcut];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::EncoderDecoder => "encoder_decoder",
            ParamGroup::Residual => "residual",
            ParamGroup::Shortcut => "shortcut",
        }
    }
}

/// Flat parameter storage, one buffer per group. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub encoder_decoder: Vec<F>,
    pub residual: Vec<F>,
    pub shortcut: Vec<F>,
}

impl<F: Real> ModelParams<F> {
    pub fn group(&self, g: ParamGroup) -> &[F] {
        match g {
            ParamGroup::EncoderDecoder => &self.encoder_decoder,
            ParamGroup::Residual => &self.residual,
            ParamGroup::Shortcut => &self.shortcut,
        }
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut Vec<F> {
        match g {
            ParamGroup::EncoderDecoder => &mut self.encoder_decoder,
            ParamGroup::Residual => &mut self.residual,
            ParamGroup::Shortcut => &mut self.shortcut,
        }
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            encoder_decoder: vec![F::zero(); self.encoder_decoder.len()],
            residual: vec![F::zero(); self.residual.len()],
            shortcut: vec![F::zero(); self.shortcut.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.encoder_decoder.len() + self.residual.len() + self.shortcut.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &F> {
        self.encoder_decoder.iter().chain(&self.residual).chain(&self.shortcut)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut F> {
        self.encoder_decoder
            .iter_mut()
            .chain(self.residual.iter_mut())
            .chain(self.shortcut.iter_mut())
    }

    /// Elementwise `self += other`.
    pub fn accumulate(&mut self, other: &Self) {
        for (a, &b) in self.iter_mut().zip(other.iter()) {
            *a += b;
        }
    }

    pub fn squared_norm(&self, groups: &[ParamGroup]) -> F {
        groups
            .iter()
            .flat_map(|&g| self.group(g).iter())
            .fold(F::zero(), |acc, &v| acc + v * v)
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        let c = |v: &[F]| v.iter().map(|x| G::of(x.as_f64())).collect();
        ModelParams {
            encoder_decoder: c(&self.encoder_decoder),
            residual: c(&self.residual),
            shortcut: c(&self.shortcut),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

/// A convolution and where its parameters live inside a group buffer.
#[derive(Debug, Clone)]
pub struct ConvSlot {
    pub spec: ConvSpec,
    pub offset: usize,
}

impl ConvSlot {
    fn params<'a, F>(&self, buf: &'a [F]) -> &'a [F] {
        &buf[self.offset..self.offset + self.spec.param_len()]
    }

    fn params_mut<'a, F>(&self, buf: &'a mut [F]) -> &'a mut [F] {
        &mut buf[self.offset..self.offset + self.spec.param_len()]
    }
}

fn slots(specs: Vec<ConvSpec>) -> (Vec<ConvSlot>, usize) {
    let mut offset = 0;
    let slots = specs
        .into_iter()
        .map(|spec| {
            let slot = ConvSlot { spec, offset };
            offset += slot.spec.param_len();
            slot
        })
        .collect();
    (slots, offset)
}

/// One parameter tensor inside a [`ModelParams`] group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub group: ParamGroup,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Architecture derived from a [`NetworkConfig`]; owns no parameters.
#[derive(Debug, Clone)]
pub struct Network {
    cfg: NetworkConfig,
    enc_in: ConvSlot,
    downs: Vec<ConvSlot>,
    to_latent: ConvSlot,
    dec_in: ConvSlot,
    /// Decoder stages from the coarsest level up to full resolution.
    ups: Vec<ConvSlot>,
    flow: ConvSlot,
    encoder_decoder_len: usize,
    residual: [ConvSlot; 2],
    residual_len: usize,
    shortcut: ConvSlot,
    shortcut_len: usize,
}

/// Encoder activations for one frame pair.
#[derive(Debug, Clone)]
pub struct EncoderTrace<F> {
    input: Tensor3<F>,
    /// Post-activation outputs of level 0..=d.
    levels: Vec<Tensor3<F>>,
}

impl<F> EncoderTrace<F> {
    /// Skip features, finest first.
    pub fn skips(&self) -> &[Tensor3<F>] {
        &self.levels[..self.levels.len() - 1]
    }
}

#[derive(Debug, Clone)]
pub struct ResidualTrace<F> {
    step: usize,
    cat: Tensor3<F>,
    hidden: Tensor3<F>,
}

#[derive(Debug, Clone)]
pub struct DecoderTrace<F> {
    latent: Tensor3<F>,
    /// Activated output of `dec_in`, then of each up stage.
    stages: Vec<Tensor3<F>>,
    /// Inputs of each up stage (upsampled ⊕ skip).
    cats: Vec<Tensor3<F>>,
}

/// Everything a backward pass over one sequence needs.
#[derive(Debug, Clone)]
pub struct SequenceTrace<F> {
    pub(crate) mode: Mode,
    pub(crate) encoders: Vec<EncoderTrace<F>>,
    pub(crate) residuals: Vec<ResidualTrace<F>>,
    pub(crate) decoders: Vec<DecoderTrace<F>>,
    pub(crate) exp_tapes: Vec<ExpMapTape<F>>,
}

/// Per-frame results of a forward pass over a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceOutput<F> {
    pub velocities: Vec<VelocityField<F>>,
    pub deformations: Vec<DeformationField<F>>,
    pub warped: Vec<GridImage<F>>,
    pub latents: Vec<Tensor3<F>>,
}

impl Network {
    pub fn new(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.num_downsamplings;
        let c = |l| cfg.level_channels(l);
        let lat = cfg.latent_channels;

        let mut specs = vec![ConvSpec::new("enc_in", 2, c(0), 3, 1, true)];
        for l in 1..=d {
            specs.push(ConvSpec::new(&format!("enc_down{l}"), c(l - 1), c(l), 3, 2, true));
        }
        specs.push(ConvSpec::new("enc_latent", c(d), lat, 3, 1, true));
        specs.push(ConvSpec::new("dec_in", lat, c(d), 3, 1, true));
        for l in (0..d).rev() {
            specs.push(ConvSpec::new(&format!("dec_up{l}"), c(l + 1) + c(l), c(l), 3, 1, true));
        }
        specs.push(ConvSpec::new("dec_flow", c(0), 2, 3, 1, true));
        let (mut ed, encoder_decoder_len) = slots(specs);
        let flow = ed.pop().expect("flow layer");
        let ups = ed.split_off(ed.len() - d);
        let dec_in = ed.pop().expect("decoder input");
        let to_latent = ed.pop().expect("latent layer");
        let downs = ed.split_off(1);
        let enc_in = ed.pop().expect("encoder input");

        let (res, residual_step_len) = slots(vec![
            ConvSpec::new("res_conv1", 2 * lat, cfg.residual_hidden_channels, 3, 1, true),
            ConvSpec::new("res_conv2", cfg.residual_hidden_channels, lat, 3, 1, true),
        ]);
        let residual = [res[0].clone(), res[1].clone()];
        let (sc, shortcut_step_len) = slots(vec![ConvSpec::new("shortcut", 2 * lat, lat, 1, 1, false)]);
        let copies = cfg.residual_sharing.copies();

        Ok(Network {
            cfg: cfg.clone(),
            enc_in,
            downs,
            to_latent,
            dec_in,
            ups,
            flow,
            encoder_decoder_len,
            residual,
            residual_len: residual_step_len * copies,
            shortcut: sc[0].clone(),
            shortcut_len: shortcut_step_len * copies,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    /// Every convolution with its group and step-0 offset, in storage order.
    pub fn conv_slots(&self) -> Vec<(ParamGroup, &ConvSlot)> {
        let mut out = vec![(ParamGroup::EncoderDecoder, &self.enc_in)];
        out.extend(self.downs.iter().map(|s| (ParamGroup::EncoderDecoder, s)));
        out.push((ParamGroup::EncoderDecoder, &self.to_latent));
        out.push((ParamGroup::EncoderDecoder, &self.dec_in));
        out.extend(self.ups.iter().map(|s| (ParamGroup::EncoderDecoder, s)));
        out.push((ParamGroup::EncoderDecoder, &self.flow));
        out.extend(self.residual.iter().map(|s| (ParamGroup::Residual, s)));
        out.push((ParamGroup::Shortcut, &self.shortcut));
        out
    }

    pub fn group_len(&self, g: ParamGroup) -> usize {
        match g {
            ParamGroup::EncoderDecoder => self.encoder_decoder_len,
            ParamGroup::Residual => self.residual_len,
            ParamGroup::Shortcut => self.shortcut_len,
        }
    }

    pub fn param_count(&self) -> usize {
        ParamGroup::ALL.iter().map(|&g| self.group_len(g)).sum()
    }

    /// Groups a mode actually reads.
    pub fn groups_used(mode: Mode) -> &'static [ParamGroup] {
        match mode {
            Mode::Tlrn => &ParamGroup::ALL,
            Mode::Baseline => &[ParamGroup::EncoderDecoder],
        }
    }

    pub fn param_count_used(&self, mode: Mode) -> usize {
        Self::groups_used(mode).iter().map(|&g| self.group_len(g)).sum()
    }

    pub fn zero_params<F: Real>(&self) -> ModelParams<F> {
        ModelParams {
            encoder_decoder: vec![F::zero(); self.encoder_decoder_len],
            residual: vec![F::zero(); self.residual_len],
            shortcut: vec![F::zero(); self.shortcut_len],
        }
    }

    pub fn check_params<F: Real>(&self, params: &ModelParams<F>) -> Result<()> {
        for g in ParamGroup::ALL {
            if params.group(g).len() != self.group_len(g) {
                return Err(Error::contract(format!(
                    "parameter group {} has {} values, architecture needs {}",
                    g.name(),
                    params.group(g).len(),
                    self.group_len(g)
                )));
            }
        }
        Ok(())
    }

    /// Named weight and bias tensors of every group in storage order; per-step
    /// residual copies carry a `@step` suffix.
    pub fn tensor_layout(&self) -> Vec<TensorInfo> {
        let copies = self.cfg.residual_sharing.copies();
        let mut out = Vec::new();
        for (group, slot) in self.conv_slots() {
            let reps = if group == ParamGroup::EncoderDecoder { 1 } else { copies };
            for step in 0..reps {
                let base = self.step_offset(group, step) + slot.offset;
                let suffix = if reps > 1 { format!("@{step}") } else { String::new() };
                let s = &slot.spec;
                out.push(TensorInfo {
                    name: format!("{}.weight{suffix}", s.name),
                    group,
                    offset: base,
                    shape: vec![s.out_channels, s.in_channels, s.kernel, s.kernel],
                });
                if s.bias {
                    out.push(TensorInfo {
                        name: format!("{}.bias{suffix}", s.name),
                        group,
                        offset: base + s.weight_len(),
                        shape: vec![s.out_channels],
                    });
                }
            }
        }
        out
    }

    fn step_offset(&self, group: ParamGroup, step: usize) -> usize {
        let copies = self.cfg.residual_sharing.copies();
        let idx = if copies == 1 { 0 } else { step };
        idx * self.group_len(group) / copies
    }

    fn residual_step(&self, step: usize) -> Result<usize> {
        match self.cfg.residual_sharing {
            ResidualSharing::Shared => Ok(0),
            ResidualSharing::PerStep(t) if step < t => Ok(step),
            ResidualSharing::PerStep(t) => Err(Error::contract(format!(
                "residual weights exist for {t} steps, step {} requested",
                step + 1
            ))),
        }
    }

    /// He-style random initialisation with zero biases. The velocity head
    /// starts at zero so the untrained model predicts the identity, and the
    /// residual unit starts as a pass-through of the current latent.
    pub fn init_params<F: Real>(&self, seed: u64) -> ModelParams<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = (2.0 / (1.0 + self.cfg.leaky_slope * self.cfg.leaky_slope)).sqrt();
        let mut params = self.zero_params::<F>();
        let copies = self.cfg.residual_sharing.copies();
        for (group, slot) in self.conv_slots() {
            let reps = if group == ParamGroup::EncoderDecoder { 1 } else { copies };
            for step in 0..reps {
                let base = self.step_offset(group, step);
                let fan_in = (slot.spec.in_channels * slot.spec.kernel * slot.spec.kernel) as f64;
                let std = if slot.spec.name == "dec_flow" {
                    0.0
                } else if group == ParamGroup::Shortcut {
                    (1.0 / fan_in).sqrt()
                } else {
                    gain / fan_in.sqrt()
                };
                let buf = params.group_mut(group);
                let w = &mut buf[base + slot.offset..base + slot.offset + slot.spec.weight_len()];
                if std > 0.0 {
                    let normal = Normal::new(0.0, std).expect("valid std");
                    for v in w.iter_mut() {
                        *v = F::of(normal.sample(&mut rng));
                    }
                }
            }
        }
        // F's last layer starts at zero and W at the curr-selector, so the
        // recurrence starts with unit gain on the current latent and none on
        // the previous one
        for (group, slot) in self.conv_slots() {
            if group == ParamGroup::Residual && slot.spec.name == "res_conv2" {
                for step in 0..copies {
                    let base = self.step_offset(group, step) + slot.offset;
                    params.residual[base..base + slot.spec.weight_len()].iter_mut().for_each(|v| *v = F::zero());
                }
            }
        }
        self.set_curr_selector(&mut params);
        params
    }

    /// Residual parameters that make `F ≡ 0` and `W` select the current
    /// latent, so TLRN reduces exactly to the baseline.
    pub fn set_passthrough_residual<F: Real>(&self, params: &mut ModelParams<F>) {
        params.residual.iter_mut().for_each(|v| *v = F::zero());
        self.set_curr_selector(params);
    }

    fn set_curr_selector<F: Real>(&self, params: &mut ModelParams<F>) {
        params.shortcut.iter_mut().for_each(|v| *v = F::zero());
        let lat = self.cfg.latent_channels;
        for step in 0..self.cfg.residual_sharing.copies() {
            let base = self.step_offset(ParamGroup::Shortcut, step) + self.shortcut.offset;
            for o in 0..lat {
                // weight[o][lat + o] = 1
                params.shortcut[base + o * 2 * lat + lat + o] = F::one();
            }
        }
    }

    fn check_image<F: Real>(&self, img: &GridImage<F>, what: &str) -> Result<()> {
        let s = self.cfg.image_size;
        if img.dims() != (s, s) {
            return Err(Error::contract(format!(
                "{what} is {}x{}, network expects {s}x{s}",
                img.height(),
                img.width()
            )));
        }
        Ok(())
    }

    fn slope<F: Real>(&self) -> F {
        F::of(self.cfg.leaky_slope)
    }

    fn conv<F: Real>(&self, slot: &ConvSlot, group: &[F], x: &Tensor3<F>) -> Result<Tensor3<F>> {
        slot.spec.forward(slot.params(group), x)
    }

    fn conv_act<F: Real>(&self, slot: &ConvSlot, group: &[F], x: &Tensor3<F>) -> Result<Tensor3<F>> {
        let mut y = self.conv(slot, group, x)?;
        leaky_relu(&mut y, self.slope());
        Ok(y)
    }

    /// Encodes the pair `(reference, frame)`; returns the latent and the trace
    /// holding the skip features.
    pub fn encode_pair<F: Real>(
        &self,
        reference: &GridImage<F>,
        frame: &GridImage<F>,
        params: &ModelParams<F>,
    ) -> Result<(Tensor3<F>, EncoderTrace<F>)> {
        self.check_image(reference, "reference image")?;
        self.check_image(frame, "frame")?;
        let s = self.cfg.image_size;
        let mut data = Vec::with_capacity(2 * s * s);
        data.extend_from_slice(reference.data());
        data.extend_from_slice(frame.data());
        let input = Tensor3::from_vec(2, s, s, data)?;
        let ed = &params.encoder_decoder;
        let mut levels = vec![self.conv_act(&self.enc_in, ed, &input)?];
        for slot in &self.downs {
            let next = self.conv_act(slot, ed, levels.last().expect("level"))?;
            levels.push(next);
        }
        let z = self.conv(&self.to_latent, ed, levels.last().expect("level"))?;
        Ok((z, EncoderTrace { input, levels }))
    }

    fn check_latent<F: Real>(&self, z: &Tensor3<F>, what: &str) -> Result<()> {
        let n = self.cfg.latent_size();
        let want = (self.cfg.latent_channels, n, n);
        if z.shape() != want {
            return Err(Error::contract(format!("{what} has shape {:?}, expected {want:?}", z.shape())));
        }
        Ok(())
    }

    /// Residual fusion at time step `step` (0-based); the step only matters
    /// for per-step residual weights.
    pub fn residual_fuse<F: Real>(
        &self,
        prev: &Tensor3<F>,
        curr: &Tensor3<F>,
        params: &ModelParams<F>,
        step: usize,
    ) -> Result<(Tensor3<F>, ResidualTrace<F>)> {
        self.check_latent(prev, "previous latent")?;
        self.check_latent(curr, "current latent")?;
        let step = self.residual_step(step)?;
        let r = &params.residual[self.step_offset(ParamGroup::Residual, step)..];
        let s = &params.shortcut[self.step_offset(ParamGroup::Shortcut, step)..];
        let cat = prev.concat(curr);
        let hidden = self.conv_act(&self.residual[0], r, &cat)?;
        let mut out = self.conv(&self.residual[1], r, &hidden)?;
        out.add_assign(&self.conv(&self.shortcut, s, &cat)?);
        Ok((out, ResidualTrace { step, cat, hidden }))
    }

    pub fn decode_velocity<F: Real>(
        &self,
        latent: &Tensor3<F>,
        skips: &[Tensor3<F>],
        params: &ModelParams<F>,
    ) -> Result<(VelocityField<F>, DecoderTrace<F>)> {
        self.check_latent(latent, "latent")?;
        let d = self.cfg.num_downsamplings;
        if skips.len() != d {
            return Err(Error::contract(format!("decoder needs {d} skip features, got {}", skips.len())));
        }
        for (l, skip) in skips.iter().enumerate() {
            let n = self.cfg.image_size >> l;
            let want = (self.cfg.level_channels(l), n, n);
            if skip.shape() != want {
                return Err(Error::contract(format!(
                    "skip feature {l} has shape {:?}, expected {want:?}",
                    skip.shape()
                )));
            }
        }
        let ed = &params.encoder_decoder;
        let mut stages = vec![self.conv_act(&self.dec_in, ed, latent)?];
        let mut cats = Vec::with_capacity(d);
        for (slot, skip) in self.ups.iter().zip(skips.iter().rev()) {
            let cat = upsample2(stages.last().expect("stage")).concat(skip);
            stages.push(self.conv_act(slot, ed, &cat)?);
            cats.push(cat);
        }
        let flow = self.conv(&self.flow, ed, stages.last().expect("stage"))?;
        let s = self.cfg.image_size;
        let (vx, vy) = flow.split(1);
        let v = VelocityField::from_raw(s, s, vx.data, vy.data);
        Ok((
            v,
            DecoderTrace {
                latent: latent.clone(),
                stages,
                cats,
            },
        ))
    }

    fn check_sequence<F: Real>(&self, seq: &SequenceSample<F>) -> Result<()> {
        if seq.frames.len() < 2 {
            return Err(Error::contract("sequence needs a reference frame and at least one follow-up frame"));
        }
        for (t, f) in seq.frames.iter().enumerate() {
            self.check_image(f, &format!("frame {t}"))?;
        }
        if let ResidualSharing::PerStep(t) = self.cfg.residual_sharing {
            if seq.follow_up_count() > t {
                return Err(Error::contract(format!(
                    "sequence has {} follow-up frames but residual weights exist for {t}",
                    seq.follow_up_count()
                )));
            }
        }
        Ok(())
    }

    /// Runs the full pipeline over a sequence and keeps the backward trace.
    pub fn forward_traced<F: Real>(
        &self,
        seq: &SequenceSample<F>,
        params: &ModelParams<F>,
        mode: Mode,
    ) -> Result<(SequenceOutput<F>, SequenceTrace<F>)> {
        self.check_sequence(seq)?;
        self.check_params(params)?;
        let t_count = seq.follow_up_count();
        let reference = &seq.frames[0];
        let n = self.cfg.latent_size();
        let mut prev = Tensor3::zeros(self.cfg.latent_channels, n, n);

        let mut out = SequenceOutput {
            velocities: Vec::with_capacity(t_count),
            deformations: Vec::with_capacity(t_count),
            warped: Vec::with_capacity(t_count),
            latents: Vec::with_capacity(t_count),
        };
        let mut trace = SequenceTrace {
            mode,
            encoders: Vec::with_capacity(t_count),
            residuals: Vec::new(),
            decoders: Vec::with_capacity(t_count),
            exp_tapes: Vec::with_capacity(t_count),
        };
        for (step, frame) in seq.frames[1..].iter().enumerate() {
            let (z, enc) = self.encode_pair(reference, frame, params)?;
            let zhat = match mode {
                Mode::Baseline => z,
                Mode::Tlrn => {
                    let (zhat, res) = self.residual_fuse(&prev, &z, params, step)?;
                    trace.residuals.push(res);
                    zhat
                }
            };
            let (v, dec) = self.decode_velocity(&zhat, enc.skips(), params)?;
            let (phi, tape) = ExpMapTape::forward(&v, self.cfg.num_squarings, self.cfg.boundary)?;
            out.warped.push(warp_image(reference, &phi, self.cfg.boundary)?);
            out.velocities.push(v);
            out.deformations.push(phi);
            if mode == Mode::Tlrn {
                prev = zhat.clone();
            }
            out.latents.push(zhat);
            trace.encoders.push(enc);
            trace.decoders.push(dec);
            trace.exp_tapes.push(tape);
        }
        Ok((out, trace))
    }

    pub fn forward<F: Real>(&self, seq: &SequenceSample<F>, params: &ModelParams<F>, mode: Mode) -> Result<SequenceOutput<F>> {
        Ok(self.forward_traced(seq, params, mode)?.0)
    }

    fn conv_back<F: Real>(
        &self,
        slot: &ConvSlot,
        params: &[F],
        grads: &mut [F],
        x: &Tensor3<F>,
        g: &Tensor3<F>,
    ) -> Tensor3<F> {
        slot.spec.backward(slot.params(params), x, g, slot.params_mut(grads))
    }

    /// Backpropagates per-frame velocity gradients `(d/dv_x, d/dv_y)` through
    /// the network and accumulates parameter gradients into `grads`.
    pub fn backward<F: Real>(
        &self,
        params: &ModelParams<F>,
        trace: &SequenceTrace<F>,
        velocity_grads: &[(Vec<F>, Vec<F>)],
        grads: &mut ModelParams<F>,
    ) -> Result<()> {
        let t_count = trace.decoders.len();
        if velocity_grads.len() != t_count {
            return Err(Error::contract(format!(
                "{} velocity gradients for {t_count} frames",
                velocity_grads.len()
            )));
        }
        let s = self.cfg.image_size;
        let slope = self.slope::<F>();
        let n = self.cfg.latent_size();
        let mut carry = Tensor3::zeros(self.cfg.latent_channels, n, n);

        for step in (0..t_count).rev() {
            let dec = &trace.decoders[step];
            let enc = &trace.encoders[step];
            let (gvx, gvy) = &velocity_grads[step];
            let mut g = Tensor3::from_vec(1, s, s, gvx.clone())?.concat(&Tensor3::from_vec(1, s, s, gvy.clone())?);

            // decoder
            let ed = &params.encoder_decoder;
            let ged = &mut grads.encoder_decoder;
            g = self.conv_back(&self.flow, ed, ged, dec.stages.last().expect("stage"), &g);
            let d = self.cfg.num_downsamplings;
            let mut skip_grads: Vec<Option<Tensor3<F>>> = vec![None; d];
            for (k, slot) in self.ups.iter().enumerate().rev() {
                leaky_relu_backward(&dec.stages[k + 1], &mut g, slope);
                let gcat = self.conv_back(slot, ed, ged, &dec.cats[k], &g);
                let up_channels = dec.stages[k].channels;
                let (gup, gskip) = gcat.split(up_channels);
                skip_grads[d - 1 - k] = Some(gskip);
                g = upsample2_backward(&gup);
            }
            leaky_relu_backward(&dec.stages[0], &mut g, slope);
            let mut gz = self.conv_back(&self.dec_in, ed, ged, &dec.latent, &g);

            // temporal fusion
            if trace.mode == Mode::Tlrn {
                gz.add_assign(&carry);
                let res = &trace.residuals[step];
                let r_off = self.step_offset(ParamGroup::Residual, res.step);
                let s_off = self.step_offset(ParamGroup::Shortcut, res.step);
                let rp = &params.residual[r_off..];
                let sp = &params.shortcut[s_off..];
                let mut gcat = {
                    let gr = &mut grads.residual[r_off..];
                    let mut gh = self.conv_back(&self.residual[1], rp, gr, &res.hidden, &gz);
                    leaky_relu_backward(&res.hidden, &mut gh, slope);
                    self.conv_back(&self.residual[0], rp, gr, &res.cat, &gh)
                };
                let gs = &mut grads.shortcut[s_off..];
                gcat.add_assign(&self.conv_back(&self.shortcut, sp, gs, &res.cat, &gz));
                let (gprev, gcurr) = gcat.split(self.cfg.latent_channels);
                carry = gprev;
                gz = gcurr;
            }

            // encoder
            let ged = &mut grads.encoder_decoder;
            let mut g = self.conv_back(&self.to_latent, ed, ged, enc.levels.last().expect("level"), &gz);
            for level in (0..=d).rev() {
                if level < d {
                    if let Some(gs) = &skip_grads[level] {
                        g.add_assign(gs);
                    }
                }
                leaky_relu_backward(&enc.levels[level], &mut g, slope);
                if level > 0 {
                    g = self.conv_back(&self.downs[level - 1], ed, ged, &enc.levels[level - 1], &g);
                } else {
                    self.conv_back(&self.enc_in, ed, ged, &enc.input, &g);
                }
            }
        }
        Ok(())
    }
}

/// Encodes one frame pair with a freshly derived architecture.
pub fn encode_pair<F: Real>(
    reference: &GridImage<F>,
    frame: &GridImage<F>,
    params: &ModelParams<F>,
    cfg: &NetworkConfig,
) -> Result<(Tensor3<F>, Vec<Tensor3<F>>)> {
    let net = Network::new(cfg)?;
    net.check_params(params)?;
    let (z, trace) = net.encode_pair(reference, frame, params)?;
    Ok((z, trace.skips().to_vec()))
}

pub fn residual_fuse<F: Real>(
    prev: &Tensor3<F>,
    curr: &Tensor3<F>,
    params: &ModelParams<F>,
    cfg: &NetworkConfig,
) -> Result<Tensor3<F>> {
    let net = Network::new(cfg)?;
    net.check_params(params)?;
    Ok(net.residual_fuse(prev, curr, params, 0)?.0)
}

pub fn decode_velocity<F: Real>(
    latent: &Tensor3<F>,
    skips: &[Tensor3<F>],
    params: &ModelParams<F>,
    cfg: &NetworkConfig,
) -> Result<VelocityField<F>> {
    let net = Network::new(cfg)?;
    net.check_params(params)?;
    Ok(net.decode_velocity(latent, skips, params)?.0)
}

pub fn tlrn_forward<F: Real>(seq: &SequenceSample<F>, params: &ModelParams<F>, cfg: &NetworkConfig) -> Result<SequenceOutput<F>> {
    Network::new(cfg)?.forward(seq, params, Mode::Tlrn)
}

pub fn baseline_forward<F: Real>(seq: &SequenceSample<F>, params: &ModelParams<F>, cfg: &NetworkConfig) -> Result<SequenceOutput<F>> {
    Network::new(cfg)?.forward(seq, params, Mode::Baseline)
}
