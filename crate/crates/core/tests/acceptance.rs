//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//! Criteria 6 to 8 train full desk-scale experiments (several CPU hours).
//! Runs are kept under `target/tmp/acceptance` and resumed or reused when a
//! checkpoint with the same configuration is already there, which is sound
//! because training resumes bit-exactly.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tlrn::config::{ExperimentConfig, Split};
use tlrn::experiment;
use tlrn::fields::{compose, exp_map};
use tlrn::metrics::{dice, hausdorff, DiceOutcome};
use tlrn::network::ResidualSharing;
use tlrn::training::{grad_check, Checkpoint, LossConfig, TrainConfig};
use tlrn::{
    BinaryMask, BoundaryMode, DeformationField, EvalReport, GridImage, Mode, Network, NetworkConfig, Real,
    SequenceSample, VelocityField,
};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn field_error(phi: &DeformationField<f64>, expected: impl Fn(usize, usize) -> (f64, f64), keep: impl Fn(usize, usize) -> bool) -> f64 {
    let (h, w) = phi.dims();
    let mut worst = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            if keep(x, y) {
                let (ux, uy) = phi.at(x, y);
                let (ex, ey) = expected(x, y);
                worst = worst.max((ux - ex).hypot(uy - ey));
            }
        }
    }
    worst
}

fn criterion_1() -> Outcome {
    let n = 64;
    let zero = exp_map(&VelocityField::<f64>::zeros(n, n).unwrap(), 6, BoundaryMode::Periodic).unwrap();
    let zero_exact = zero.ux().iter().chain(zero.uy()).all(|&u| u == 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut shifts: Vec<(f64, f64)> = vec![(4.0, 0.0), (0.0, -4.0), (2.5, -1.75), (-2.828, 2.828)];
    while shifts.len() < 20 {
        let (r, a) = (rng.random_range(0.0..4.0), rng.random_range(0.0..std::f64::consts::TAU));
        shifts.push((r * a.cos(), r * a.sin()));
    }
    let mut translation = 0.0f64;
    for &(cx, cy) in &shifts {
        let phi = exp_map(&VelocityField::uniform(n, n, cx, cy).unwrap(), 6, BoundaryMode::Periodic).unwrap();
        translation = translation.max(field_error(&phi, |_, _| (cx, cy), |_, _| true));
    }

    let omega = 0.1;
    let c = (n as f64 - 1.0) / 2.0;
    let v = VelocityField::from_fn(n, n, |x, y| (-omega * (y as f64 - c), omega * (x as f64 - c))).unwrap();
    let phi = exp_map(&v, 6, BoundaryMode::Clamp).unwrap();
    let (s, co) = omega.sin_cos();
    let rotation = field_error(
        &phi,
        |x, y| {
            let (dx, dy) = (x as f64 - c, y as f64 - c);
            (co * dx - s * dy - dx, s * dx + co * dy - dy)
        },
        // interior: the whole trajectory stays well inside the grid
        |x, y| (x as f64 - c).hypot(y as f64 - c) <= 0.375 * n as f64,
    );
    check(
        zero_exact && translation <= 1e-3 && rotation <= 0.05,
        format!("zero exact {zero_exact}, translation err {translation:.2e} px, rotation err {rotation:.2e} px"),
    )
}

fn random_smooth_field(rng: &mut ChaCha8Rng, n: usize, max_mag: f64) -> VelocityField<f64> {
    let tau = std::f64::consts::TAU;
    let modes: Vec<[f64; 6]> = (0..4)
        .map(|_| {
            [
                rng.random_range(1..=3) as f64,
                rng.random_range(1..=3) as f64,
                rng.random_range(0.0..tau),
                rng.random_range(0.0..tau),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]
        })
        .collect();
    let raw = VelocityField::from_fn(n, n, |x, y| {
        let (x, y) = (x as f64 / n as f64, y as f64 / n as f64);
        modes.iter().fold((0.0, 0.0), |(a, b), m| {
            (
                a + m[4] * (tau * m[0] * x + m[2]).sin() * (tau * m[1] * y).cos(),
                b + m[5] * (tau * m[1] * y + m[3]).cos() * (tau * m[0] * x).sin(),
            )
        })
    })
    .unwrap();
    let peak = raw.max_magnitude();
    let target = rng.random_range(0.5..=max_mag);
    raw.scaled(target / peak)
}

fn criterion_2() -> Outcome {
    let n = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst = 0.0f64;
    let mut largest_v = 0.0f64;
    for _ in 0..100 {
        let v = random_smooth_field(&mut rng, n, 2.0);
        largest_v = largest_v.max(v.max_magnitude());
        let fwd = exp_map(&v, 6, BoundaryMode::Periodic).unwrap();
        let back = exp_map(&v.scaled(-1.0), 6, BoundaryMode::Periodic).unwrap();
        let round = compose(&fwd, &back, BoundaryMode::Periodic).unwrap();
        worst = worst.max(round.max_deviation_from_identity());
    }
    check(
        worst < 0.05 && largest_v <= 2.0,
        format!("100 fields, max |v| {largest_v:.3} px, max |exp(v)∘exp(-v) - id| {worst:.2e} px"),
    )
}

fn random_sequence<F: Real>(rng: &mut ChaCha8Rng, n: usize, t: usize) -> SequenceSample<F> {
    let frames = (0..=t)
        .map(|_| GridImage::from_fn(n, n, |_, _| F::of(rng.random::<f64>())).unwrap())
        .collect();
    SequenceSample::new(frames, None).unwrap()
}

fn criterion_3() -> Outcome {
    let cfg = NetworkConfig::tiny(8);
    let net = Network::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    // perturb every parameter so the velocity head is live
    let mut params = net.init_params::<f64>(3);
    params.iter_mut().for_each(|v| *v = *v * 2.0 + rng.random_range(-0.05..0.05));
    let seq = random_sequence::<f64>(&mut rng, 8, 2);
    let loss = LossConfig::for_network(&cfg);
    let mut worst = 0.0f64;
    let mut groups = Vec::new();
    for mode in [Mode::Tlrn, Mode::Baseline] {
        let report = grad_check(&net, &params, &seq, &loss, mode, 20, 9).unwrap();
        worst = worst.max(report.max_error);
        let mut seen = Vec::new();
        for p in &report.probes {
            if !seen.contains(&p.group) {
                seen.push(p.group);
            }
        }
        groups.push(seen.len());
    }
    check(
        worst < 1e-4 && groups.iter().all(|&g| g == 3),
        format!("max relative error {worst:.2e} over 2x20 probes covering {groups:?} groups"),
    )
}

fn velocities_match<F: Real>(net: &Network, seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = net.init_params::<F>(seed);
    // a nonzero flow head so the velocities are not trivially zero
    params.iter_mut().for_each(|v| *v += F::of(rng.random_range(-0.02..0.02)));
    net.set_passthrough_residual(&mut params);
    let n = net.config().image_size;
    (0..4).all(|_| {
        let seq = random_sequence::<F>(&mut rng, n, 5);
        let a = net.forward(&seq, &params, Mode::Tlrn).unwrap();
        let b = net.forward(&seq, &params, Mode::Baseline).unwrap();
        let nonzero = a.velocities.iter().any(|v| v.max_magnitude() > F::zero());
        let same = a.velocities.iter().zip(&b.velocities).all(|(p, q)| {
            // widening to f64 is injective, so this compares the stored bits
            p.vx().iter().zip(q.vx()).chain(p.vy().iter().zip(q.vy())).all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
        });
        nonzero && same
    })
}

fn criterion_4() -> Outcome {
    let mut results = Vec::new();
    for (k, cfg) in [NetworkConfig::desk(), NetworkConfig::tiny(16)].into_iter().enumerate() {
        let mut per_step = cfg.clone();
        per_step.residual_sharing = ResidualSharing::PerStep(5);
        for c in [cfg, per_step] {
            let net = Network::new(&c).unwrap();
            results.push(velocities_match::<f32>(&net, 40 + k as u64) && velocities_match::<f64>(&net, 50 + k as u64));
        }
    }
    check(
        results.iter().all(|&r| r),
        format!("{} configurations x 2 precisions x 4 sequences bit-identical: {results:?}", results.len()),
    )
}

fn brute_dice(a: &[bool], b: &[bool]) -> Option<f64> {
    let na = a.iter().filter(|&&v| v).count();
    let nb = b.iter().filter(|&&v| v).count();
    let both = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    (na + nb > 0).then(|| 2.0 * both as f64 / (na + nb) as f64)
}

fn brute_boundary(m: &[bool], h: usize, w: usize) -> Vec<(f64, f64)> {
    let on = |x: i64, y: i64| x >= 0 && y >= 0 && x < w as i64 && y < h as i64 && m[y as usize * w + x as usize];
    let mut pts = Vec::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if on(x, y) && !(on(x - 1, y) && on(x + 1, y) && on(x, y - 1) && on(x, y + 1)) {
                pts.push((x as f64, y as f64));
            }
        }
    }
    pts
}

fn brute_hausdorff(a: &[bool], b: &[bool], h: usize, w: usize) -> f64 {
    let (pa, pb) = (brute_boundary(a, h, w), brute_boundary(b, h, w));
    let directed = |from: &[(f64, f64)], to: &[(f64, f64)]| {
        from.iter()
            .map(|p| to.iter().map(|q| (p.0 - q.0).hypot(p.1 - q.1)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    directed(&pa, &pb).max(directed(&pb, &pa))
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let (mut dice_bad, mut hd_bad, mut hd_pairs) = (0, 0, 0);
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let pa = rng.random_range(0.0..1.0);
        let pb = rng.random_range(0.0..1.0);
        let a: Vec<bool> = (0..h * w).map(|_| rng.random_bool(pa)).collect();
        let b: Vec<bool> = (0..h * w).map(|_| rng.random_bool(pb)).collect();
        let (ma, mb) = (BinaryMask::from_bools(h, w, a.clone()).unwrap(), BinaryMask::from_bools(h, w, b.clone()).unwrap());
        let got = match dice(&ma, &mb).unwrap() {
            DiceOutcome::Score(s) => Some(s),
            DiceOutcome::NoForeground => None,
        };
        if got != brute_dice(&a, &b) {
            dice_bad += 1;
        }
        if a.contains(&true) && b.contains(&true) {
            hd_pairs += 1;
            if hausdorff(&ma, &mb).unwrap() != brute_hausdorff(&a, &b, h, w) {
                hd_bad += 1;
            }
        }
    }
    let p = BinaryMask::from_fn(8, 8, |x, y| (x, y) == (0, 0)).unwrap();
    let q = BinaryMask::from_fn(8, 8, |x, y| (x, y) == (3, 4)).unwrap();
    let hd_case = hausdorff(&p, &q).unwrap();
    // six pixels each, four shared
    let r = BinaryMask::from_fn(4, 4, |x, y| y == 0 || (y == 1 && x < 2)).unwrap();
    let s = BinaryMask::from_fn(4, 4, |x, y| (y == 0 && x < 2) || y == 1).unwrap();
    let dice_case = dice(&r, &s).unwrap().score();
    check(
        dice_bad == 0 && hd_bad == 0 && hd_case == 5.0 && dice_case == Some(2.0 * 4.0 / 12.0),
        format!(
            "1000 pairs: {dice_bad} Dice and {hd_bad}/{hd_pairs} HD mismatches; HD case {hd_case}, Dice case {dice_case:?}"
        ),
    )
}

fn acceptance_root() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

/// Trains one mode to completion, reusing a finished or partial run with the
/// same configuration.
fn trained(cfg: &ExperimentConfig, mode: Mode) -> Checkpoint<f32> {
    let mut cfg = cfg.clone();
    cfg.train.mode = mode;
    let dir = experiment::run_dir(&cfg, mode);
    let ckpt_path = dir.join(experiment::CHECKPOINT_FILE);
    let existing = Checkpoint::<f32>::load(&ckpt_path).ok().filter(|c| {
        c.network == cfg.network && c.loss == cfg.loss && TrainConfig { epochs: cfg.train.epochs, ..c.train.clone() } == cfg.train
    });
    if let Some(c) = &existing {
        if c.epoch == cfg.train.epochs {
            eprintln!("  reusing {} ({} epochs)", ckpt_path.display(), c.epoch);
            return existing.unwrap();
        }
        eprintln!("  resuming {} from epoch {}", ckpt_path.display(), c.epoch);
    }
    let data = experiment::dataset_path(Path::new(&cfg.output_dir), Split::Train);
    let start = Instant::now();
    experiment::train(&cfg, &data, existing.is_some(), |log| {
        if log.epoch % 50 == 0 {
            eprintln!(
                "  {} epoch {} loss {:.5} ({:.0}s)",
                mode.name(),
                log.epoch,
                log.mean_loss,
                start.elapsed().as_secs_f64()
            );
        }
    })
    .unwrap()
}

/// Both modes of one seeded repetition, evaluated on the test split.
fn repetition(preset: &str, seed: u64) -> (EvalReport, EvalReport) {
    let mut cfg = ExperimentConfig::preset(preset).unwrap();
    cfg.set_seed(seed);
    cfg.output_dir = acceptance_root().join(format!("{preset}-seed{seed}")).to_string_lossy().into_owned();
    let test = experiment::dataset_path(Path::new(&cfg.output_dir), Split::Test);
    eprintln!("{preset} seed {seed}: generating data");
    experiment::gen_data(&cfg).unwrap();
    let mut reports = Vec::new();
    for mode in [Mode::Tlrn, Mode::Baseline] {
        trained(&cfg, mode);
        let ckpt = experiment::run_dir(&cfg, mode).join(experiment::CHECKPOINT_FILE);
        let (report, _) = experiment::eval(&cfg, &ckpt, &test).unwrap();
        reports.push(report);
    }
    let b = reports.pop().unwrap();
    (reports.pop().unwrap(), b)
}

fn final_frames_mean(report: &EvalReport, pick: impl Fn(&tlrn::metrics::FrameRecord) -> f64) -> f64 {
    let t = report.follow_ups;
    let vals: Vec<f64> = report.rows.iter().filter(|r| r.frame + 3 > t).map(pick).collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

fn criteria_6_7(reps: &[(EvalReport, EvalReport)]) -> (Outcome, Outcome) {
    let mut mse_wins = 0;
    let mut jac_wins = 0;
    let mut mse_detail = Vec::new();
    let mut jac_detail = Vec::new();
    for (tl, bl) in reps {
        let (m_t, m_b) = (final_frames_mean(tl, |r| r.mse), final_frames_mean(bl, |r| r.mse));
        let (j_t, j_b) = (final_frames_mean(tl, |r| r.neg_jac_frac), final_frames_mean(bl, |r| r.neg_jac_frac));
        mse_wins += (m_t < m_b) as usize;
        jac_wins += (j_t <= j_b) as usize;
        mse_detail.push(format!("{m_t:.3e} vs {m_b:.3e}"));
        jac_detail.push(format!("{:.3}% vs {:.3}%", 100.0 * j_t, 100.0 * j_b));
    }
    (
        check(mse_wins >= 2, format!("TLRN lower final-3 MSE in {mse_wins}/3 ({})", mse_detail.join("; "))),
        check(jac_wins >= 2, format!("TLRN final-3 folding <= baseline in {jac_wins}/3 ({})", jac_detail.join("; "))),
    )
}

fn criterion_8(reps: &[(EvalReport, EvalReport)]) -> Outcome {
    let mut wins = 0;
    let mut detail = Vec::new();
    for (tl, bl) in reps {
        let (ft, fb) = (tl.final_frame(), bl.final_frame());
        let (dt, db) = (ft.dice.unwrap().mean, fb.dice.unwrap().mean);
        let (ht, hb) = (ft.hd.unwrap().mean, fb.hd.unwrap().mean);
        wins += (dt >= db && ht <= hb) as usize;
        detail.push(format!("Dice {dt:.4} vs {db:.4}, HD {ht:.3} vs {hb:.3}"));
    }
    check(wins >= 2, format!("TLRN Dice >= and HD <= baseline in {wins}/3 ({})", detail.join("; ")))
}

fn small_config(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.network = NetworkConfig::tiny(16);
    cfg.loss = LossConfig::for_network(&cfg.network);
    cfg.data.follow_ups = 3;
    cfg.data.train_count = 6;
    cfg.data.val_count = 2;
    cfg.data.test_count = 3;
    cfg.train.epochs = 4;
    cfg.train.batch_size = 4;
    cfg.train.checkpoint_every = 2;
    cfg.set_seed(77);
    cfg.output_dir = dir.to_string_lossy().into_owned();
    cfg
}

fn files_equal(a: &Path, b: &Path) -> bool {
    std::fs::read(a).unwrap() == std::fs::read(b).unwrap()
}

fn criterion_9() -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| {
        let root = tempfile::tempdir().unwrap();
        let mut notes = Vec::new();
        let mut ok = true;

        // full desk-sized data generation, twice
        let mut desk = ExperimentConfig::preset("lemniscate-desk").unwrap();
        let dirs: Vec<PathBuf> = ["a", "b"].iter().map(|d| root.path().join("desk").join(d)).collect();
        for d in &dirs {
            desk.output_dir = d.to_string_lossy().into_owned();
            experiment::gen_data(&desk).unwrap();
        }
        let data_same = Split::ALL
            .iter()
            .all(|&s| files_equal(&experiment::dataset_path(&dirs[0], s), &experiment::dataset_path(&dirs[1], s)));
        ok &= data_same;
        notes.push(format!("gen-data identical {data_same}"));

        for mode in [Mode::Tlrn, Mode::Baseline] {
            let runs: Vec<PathBuf> = ["x", "y", "z"].iter().map(|d| root.path().join(d)).collect();
            let mut cfgs: Vec<ExperimentConfig> = runs.iter().map(|d| small_config(d)).collect();
            for c in &mut cfgs {
                c.train.mode = mode;
                experiment::gen_data(c).unwrap();
            }
            let data = |c: &ExperimentConfig| experiment::dataset_path(Path::new(&c.output_dir), Split::Train);
            let ckpt = |c: &ExperimentConfig| experiment::run_dir(c, mode).join(experiment::CHECKPOINT_FILE);
            experiment::train(&cfgs[0], &data(&cfgs[0]), false, |_| {}).unwrap();
            experiment::train(&cfgs[1], &data(&cfgs[1]), false, |_| {}).unwrap();
            // interrupted after the epoch-2 checkpoint, then resumed
            let mut short = cfgs[2].clone();
            short.train.epochs = 2;
            experiment::train(&short, &data(&short), false, |_| {}).unwrap();
            experiment::train(&cfgs[2], &data(&cfgs[2]), true, |_| {}).unwrap();

            let train_same = files_equal(&ckpt(&cfgs[0]), &ckpt(&cfgs[1]));
            let resume_same = files_equal(&ckpt(&cfgs[0]), &ckpt(&cfgs[2]));
            let log = |c: &ExperimentConfig| experiment::run_dir(c, mode).join(experiment::LOG_FILE);
            let strip_time = |p: PathBuf| {
                std::fs::read_to_string(p)
                    .unwrap()
                    .lines()
                    .map(|l| l.rsplit_once(',').map(|(a, _)| a.to_string()).unwrap_or_default())
                    .collect::<Vec<_>>()
            };
            let log_same = strip_time(log(&cfgs[0])) == strip_time(log(&cfgs[2]));
            let test = |c: &ExperimentConfig| experiment::dataset_path(Path::new(&c.output_dir), Split::Test);
            let (ra, _) = experiment::eval(&cfgs[0], &ckpt(&cfgs[0]), &test(&cfgs[0])).unwrap();
            let (rb, _) = experiment::eval(&cfgs[1], &ckpt(&cfgs[1]), &test(&cfgs[1])).unwrap();
            let eval_same = ra.rows_csv() == rb.rows_csv() && ra.summary_csv() == rb.summary_csv();
            ok &= train_same && resume_same && log_same && eval_same;
            notes.push(format!(
                "{}: train identical {train_same}, resumed identical {resume_same}, log identical {log_same}, eval identical {eval_same}",
                mode.name()
            ));
        }
        check(ok, notes.join("; "))
    })
}

fn main() {
    // `cargo test -- --list` and filters from the harness are not meaningful here
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |k: usize, out: Outcome| {
        match &out {
            Ok(d) => println!("criterion {k}: PASS  {d}"),
            Err(d) => println!("criterion {k}: FAIL  {d}"),
        }
        results.push((k, out));
    };
    let quick: [(usize, fn() -> Outcome); 5] =
        [(1, criterion_1), (2, criterion_2), (3, criterion_3), (4, criterion_4), (5, criterion_5)];
    for (k, f) in quick {
        let start = Instant::now();
        let out = f();
        eprintln!("  criterion {k} took {:.1}s", start.elapsed().as_secs_f64());
        report(k, out);
    }

    let lemniscate: Vec<_> = (0..3).map(|s| repetition("lemniscate-desk", s)).collect();
    let (c6, c7) = criteria_6_7(&lemniscate);
    report(6, c6);
    report(7, c7);
    let ring: Vec<_> = (0..3).map(|s| repetition("ring-desk", s)).collect();
    report(8, criterion_8(&ring));
    report(9, criterion_9());

    let failed: Vec<usize> = results.iter().filter(|(_, r)| r.is_err()).map(|(k, _)| *k).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" ({failed:?})") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
