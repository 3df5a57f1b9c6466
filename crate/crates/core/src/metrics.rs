//! Evaluation metrics: MSE, Dice, Hausdorff distance, segmentation
//! propagation and per-frame dataset reports.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fields::{neg_jacobian_fraction, warp_image, BoundaryMode, DeformationField, GridImage};
use crate::network::{Mode, ModelParams, Network};
use crate::real::Real;
use crate::synthdata::SequenceSample;

/// Binary segmentation on a pixel grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<bool>,
}

impl BinaryMask {
    pub fn from_bools(height: usize, width: usize, values: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::contract(format!("mask dimensions must be positive, got {height}x{width}")));
        }
        if values.len() != height * width {
            return Err(Error::contract(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(BinaryMask { height, width, values })
    }

    /// From bytes that must be 0 or 1.
    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if let Some(i) = bytes.iter().position(|&b| b > 1) {
            return Err(Error::contract(format!("mask value {} at index {i} is not 0 or 1", bytes[i])));
        }
        Self::from_bools(height, width, bytes.iter().map(|&b| b == 1).collect())
    }

    pub fn empty(height: usize, width: usize) -> Result<Self> {
        Self::from_bools(height, width, vec![false; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let values = (0..height * width).map(|i| f(i % width, i / width)).collect();
        Self::from_bools(height, width, values)
    }

    /// Pixels with value `>= 0.5`.
    pub fn threshold<F: Real>(img: &GridImage<F>) -> Self {
        let (h, w) = img.dims();
        BinaryMask {
            height: h,
            width: w,
            values: img.data().iter().map(|v| v.as_f64() >= 0.5).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.values[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.values.contains(&true)
    }

    pub fn to_image<F: Real>(&self) -> Result<GridImage<F>> {
        let data = self.values.iter().map(|&b| if b { F::one() } else { F::zero() }).collect();
        GridImage::new(self.height, self.width, data)
    }

    /// Foreground pixels with at least one background 4-neighbour; pixels on
    /// the image border always qualify.
    pub fn boundary_points(&self) -> Vec<(i64, i64)> {
        let (h, w) = (self.height, self.width);
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !self.get(x, y) {
                    continue;
                }
                let edge = x == 0 || y == 0 || x + 1 == w || y + 1 == h;
                if edge || !self.get(x - 1, y) || !self.get(x + 1, y) || !self.get(x, y - 1) || !self.get(x, y + 1) {
                    out.push((x as i64, y as i64));
                }
            }
        }
        out
    }
}

fn same_mask_dims(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::contract(format!("mask sizes differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Mean squared intensity difference.
pub fn mse<F: Real>(a: &GridImage<F>, b: &GridImage<F>) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::contract(format!("image sizes differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// Dice result; undefined when neither mask has foreground.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DiceOutcome {
    Score(f64),
    NoForeground,
}

impl DiceOutcome {
    pub fn score(self) -> Option<f64> {
        match self {
            DiceOutcome::Score(s) => Some(s),
            DiceOutcome::NoForeground => None,
        }
    }
}

pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<DiceOutcome> {
    same_mask_dims(a, b)?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.values.iter().zip(&b.values) {
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(DiceOutcome::NoForeground);
    }
    Ok(DiceOutcome::Score(2.0 * both as f64 / (na + nb) as f64))
}

fn directed_sq(from: &[(i64, i64)], to: &[(i64, i64)]) -> i64 {
    let mut worst = 0i64;
    for &(x, y) in from {
        let mut best = i64::MAX;
        for &(u, v) in to {
            let d = (x - u) * (x - u) + (y - v) * (y - v);
            if d < best {
                best = d;
                // this point cannot raise the maximum any further
                if best <= worst {
                    break;
                }
            }
        }
        worst = worst.max(best);
    }
    worst
}

/// Symmetric Hausdorff distance between the boundary point sets, in pixels.
pub fn hausdorff(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    same_mask_dims(a, b)?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("hausdorff distance needs two nonempty masks"));
    }
    let (pa, pb) = (a.boundary_points(), b.boundary_points());
    let sq = directed_sq(&pa, &pb).max(directed_sq(&pb, &pa));
    Ok((sq as f64).sqrt())
}

/// Warps the mask as a real-valued image and thresholds at 0.5.
pub fn propagate_segmentation<F: Real>(
    mask: &BinaryMask,
    phi: &DeformationField<F>,
    bc: BoundaryMode,
) -> Result<BinaryMask> {
    let warped = warp_image(&mask.to_image::<F>()?, phi, bc)?;
    Ok(BinaryMask::threshold(&warped))
}

/// Metrics of one follow-up frame of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub seq_id: usize,
    /// Follow-up index `τ` in `1..=T`.
    pub frame: usize,
    pub mse: f64,
    /// `None` when the dataset carries no masks.
    pub dice: Option<DiceOutcome>,
    /// `None` without masks or when either mask is empty.
    pub hd: Option<f64>,
    pub neg_jac_frac: f64,
}

/// Population mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Two-pass estimate in slice order. `None` for an empty slice.
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Stat { mean, std: var.sqrt() })
    }
}

/// Aggregates of one follow-up frame across the evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSummary {
    pub frame: usize,
    pub count: usize,
    pub mse: Stat,
    pub dice: Option<Stat>,
    pub hd: Option<Stat>,
    pub neg_jac_frac: Stat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub follow_ups: usize,
    /// Sequence-major, frame-minor.
    pub rows: Vec<FrameRecord>,
    pub summary: Vec<FrameSummary>,
}

impl EvalReport {
    pub fn from_rows(follow_ups: usize, rows: Vec<FrameRecord>) -> Result<Self> {
        if follow_ups == 0 {
            return Err(Error::contract("report needs at least one follow-up frame"));
        }
        let mut summary = Vec::with_capacity(follow_ups);
        for frame in 1..=follow_ups {
            let at: Vec<&FrameRecord> = rows.iter().filter(|r| r.frame == frame).collect();
            if at.is_empty() {
                return Err(Error::contract(format!("no rows for frame {frame}")));
            }
            let collect = |f: &dyn Fn(&FrameRecord) -> Option<f64>| -> Vec<f64> { at.iter().filter_map(|r| f(r)).collect() };
            summary.push(FrameSummary {
                frame,
                count: at.len(),
                mse: Stat::of(&collect(&|r| Some(r.mse))).expect("nonempty"),
                dice: Stat::of(&collect(&|r| r.dice.and_then(DiceOutcome::score))),
                hd: Stat::of(&collect(&|r| r.hd)),
                neg_jac_frac: Stat::of(&collect(&|r| Some(r.neg_jac_frac))).expect("nonempty"),
            });
        }
        Ok(EvalReport { follow_ups, rows, summary })
    }

    pub fn final_frame(&self) -> &FrameSummary {
        self.summary.last().expect("summary has T entries")
    }

    pub fn rows_csv(&self) -> String {
        let mut s = String::from("seq_id,frame,mse,dice,hd,neg_jac_frac\n");
        for r in &self.rows {
            let dice = match r.dice {
                None => NA.to_string(),
                Some(DiceOutcome::NoForeground) => NO_FOREGROUND.to_string(),
                Some(DiceOutcome::Score(d)) => d.to_string(),
            };
            let hd = r.hd.map_or(NA.to_string(), |v| v.to_string());
            writeln!(s, "{},{},{},{dice},{hd},{}", r.seq_id, r.frame, r.mse, r.neg_jac_frac).unwrap();
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        summary_csv(&self.summary)
    }
}

const NA: &str = "NA";
const NO_FOREGROUND: &str = "no-foreground";
pub const SUMMARY_HEADER: &str =
    "frame,n,mse_mean,mse_std,dice_mean,dice_std,hd_mean,hd_std,neg_jac_frac_mean,neg_jac_frac_std";

fn stat_cells(s: Option<Stat>) -> String {
    match s {
        Some(s) => format!("{},{}", s.mean, s.std),
        None => format!("{NA},{NA}"),
    }
}

pub fn summary_csv(summary: &[FrameSummary]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for f in summary {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            f.frame,
            f.count,
            stat_cells(Some(f.mse)),
            stat_cells(f.dice),
            stat_cells(f.hd),
            stat_cells(Some(f.neg_jac_frac))
        )
        .unwrap();
    }
    s
}

/// Parses a summary CSV written by [`summary_csv`]. Columns are matched by
/// header name; missing columns are a configuration error naming them.
pub fn parse_summary_csv(text: &str) -> Result<Vec<FrameSummary>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").trim().split(',').map(str::trim).collect();
    let wanted: Vec<&str> = SUMMARY_HEADER.split(',').collect();
    let missing: Vec<&str> = wanted.iter().copied().filter(|w| !header.contains(w)).collect();
    if !missing.is_empty() {
        return Err(Error::config(format!("summary CSV is missing columns: {}", missing.join(", "))));
    }
    let col: Vec<usize> = wanted.iter().map(|w| header.iter().position(|h| h == w).expect("checked")).collect();
    let mut offset = text.lines().next().map_or(0, |h| h.len() as u64 + 1);
    let mut out = Vec::new();
    for line in lines {
        let here = offset;
        offset += line.len() as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.trim().split(',').map(str::trim).collect();
        if cells.len() != header.len() {
            return Err(Error::parse(here, format!("expected {} columns, found {}", header.len(), cells.len())));
        }
        let cell = |i: usize| cells[col[i]];
        let num = |i: usize| -> Result<Option<f64>> {
            if cell(i) == NA {
                return Ok(None);
            }
            cell(i)
                .parse::<f64>()
                .map(Some)
                .map_err(|_| Error::parse(here, format!("`{}` is not a number: `{}`", wanted[i], cell(i))))
        };
        let stat = |i: usize| -> Result<Option<Stat>> {
            Ok(match (num(i)?, num(i + 1)?) {
                (Some(mean), Some(std)) => Some(Stat { mean, std }),
                _ => None,
            })
        };
        let int = |i: usize| -> Result<usize> {
            cell(i).parse().map_err(|_| Error::parse(here, format!("`{}` is not an integer: `{}`", wanted[i], cell(i))))
        };
        let required = |s: Option<Stat>, what: &str| s.ok_or_else(|| Error::parse(here, format!("{what} must be present")));
        out.push(FrameSummary {
            frame: int(0)?,
            count: int(1)?,
            mse: required(stat(2)?, "mse")?,
            dice: stat(4)?,
            hd: stat(6)?,
            neg_jac_frac: required(stat(8)?, "neg_jac_frac")?,
        });
    }
    if out.is_empty() {
        return Err(Error::parse(offset, "summary CSV has no rows"));
    }
    Ok(out)
}

/// Side-by-side per-frame summary of two reports.
pub fn comparison_csv(labels: (&str, &str), a: &[FrameSummary], b: &[FrameSummary]) -> Result<String> {
    if a.len() != b.len() {
        return Err(Error::contract(format!("reports cover {} and {} frames", a.len(), b.len())));
    }
    let mut s = String::from("frame");
    for metric in ["mse", "dice", "hd", "neg_jac_frac"] {
        for label in [labels.0, labels.1] {
            write!(s, ",{label}_{metric}_mean,{label}_{metric}_std").unwrap();
        }
    }
    s.push('\n');
    for (x, y) in a.iter().zip(b) {
        write!(s, "{}", x.frame).unwrap();
        for (p, q) in [
            (Some(x.mse), Some(y.mse)),
            (x.dice, y.dice),
            (x.hd, y.hd),
            (Some(x.neg_jac_frac), Some(y.neg_jac_frac)),
        ] {
            write!(s, ",{},{}", stat_cells(p), stat_cells(q)).unwrap();
        }
        s.push('\n');
    }
    Ok(s)
}

/// Per-frame metrics of one sequence given its predicted deformations.
pub fn sequence_records<F: Real>(
    seq_id: usize,
    sample: &SequenceSample<F>,
    deformations: &[DeformationField<F>],
    bc: BoundaryMode,
) -> Result<Vec<FrameRecord>> {
    let t = sample.follow_up_count();
    if deformations.len() != t {
        return Err(Error::contract(format!("{} deformations for {t} follow-up frames", deformations.len())));
    }
    let reference = sample.reference();
    let mut rows = Vec::with_capacity(t);
    for (k, phi) in deformations.iter().enumerate() {
        let frame = k + 1;
        let warped = warp_image(reference, phi, bc)?;
        let (dice_v, hd) = match &sample.masks {
            None => (None, None),
            Some(masks) => {
                let moved = propagate_segmentation(&masks[0], phi, bc)?;
                let truth = &masks[frame];
                let hd = if moved.is_empty() || truth.is_empty() {
                    None
                } else {
                    Some(hausdorff(&moved, truth)?)
                };
                (Some(dice(&moved, truth)?), hd)
            }
        };
        rows.push(FrameRecord {
            seq_id,
            frame,
            mse: mse(&warped, &sample.frames[frame])?,
            dice: dice_v,
            hd,
            neg_jac_frac: neg_jacobian_fraction(phi)?,
        });
    }
    Ok(rows)
}

/// Evaluates any deformation predictor over a dataset. Sequences run in
/// parallel; rows are kept in dataset order.
pub fn evaluate_with<F, P>(dataset: &[SequenceSample<F>], bc: BoundaryMode, predict: P) -> Result<EvalReport>
where
    F: Real,
    P: Fn(&SequenceSample<F>) -> Result<Vec<DeformationField<F>>> + Sync,
{
    let first = dataset.first().ok_or_else(|| Error::contract("evaluation dataset is empty"))?;
    let t = first.follow_up_count();
    if let Some(i) = dataset.iter().position(|s| s.follow_up_count() != t) {
        return Err(Error::contract(format!("sequence {i} has a different frame count than sequence 0")));
    }
    let per_seq: Vec<Vec<FrameRecord>> = dataset
        .par_iter()
        .enumerate()
        .map(|(i, s)| sequence_records(i, s, &predict(s)?, bc))
        .collect::<Result<_>>()?;
    EvalReport::from_rows(t, per_seq.into_iter().flatten().collect())
}

/// Runs the network in `mode` over every sequence and scores the result.
pub fn evaluate<F: Real>(
    network: &Network,
    params: &ModelParams<F>,
    dataset: &[SequenceSample<F>],
    mode: Mode,
) -> Result<EvalReport> {
    network.check_params(params)?;
    let bc = network.config().boundary;
    evaluate_with(dataset, bc, |s| Ok(network.forward(s, params, mode)?.deformations))
}
