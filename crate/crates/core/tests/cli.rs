use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "\
preset = lemniscate-desk
network.image_size = 16
network.base_channels = 2
network.num_downsamplings = 1
network.latent_channels = 3
network.residual_hidden_channels = 3
network.num_squarings = 3
data.follow_ups = 3
data.train_count = 4
data.val_count = 1
data.test_count = 2
train.batch_size = 2
train.epochs = 2
train.checkpoint_every = 1
";

fn tlrn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tlrn")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        fs::write(root.join("exp.cfg"), config).unwrap();
        Workspace { _dir: dir, root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        let cfg = self.path("exp.cfg");
        let out = self.path("out");
        let mut all = vec!["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
        all.extend_from_slice(args);
        tlrn(&all)
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert_eq!(code(&out), 0, "{args:?}: {}", stderr(&out));
        String::from_utf8_lossy(&out.stdout).into_owned()
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn desk_preset_generates_declared_splits() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["a", "b"] {
        let out = dir.path().join(sub);
        let o = tlrn(&["gen-data", "--preset", "lemniscate-desk", "--seed", "5", "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let manifest = fs::read_to_string(dir.path().join("a/manifest-gen-data.txt")).unwrap();
    for line in ["split.train.count = 200", "split.val.count = 50", "split.test.count = 50", "frames_per_sequence = 8", "image_size = 32", "seed.data = 5"] {
        assert!(manifest.contains(line), "{line} missing from\n{manifest}");
    }
    for split in ["train", "val", "test"] {
        let a = fs::read(dir.path().join(format!("a/{split}.tlrn"))).unwrap();
        let b = fs::read(dir.path().join(format!("b/{split}.tlrn"))).unwrap();
        assert!(a == b, "{split} differs between identical seeds");
    }
    let header = fs::read(dir.path().join("a/train.tlrn")).unwrap();
    assert_eq!(&header[..8], b"TLRNDATA");
}

#[test]
fn train_eval_plot_round() {
    let ws = Workspace::new(SMALL);
    ws.ok(&["gen-data"]);
    let stdout = ws.ok(&["train", "--mode", "tlrn", "--epochs", "1"]);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("epoch")).count(), 1);
    let log = fs::read_to_string(ws.path("out/tlrn/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2, "{log}");
    assert!(ws.path("out/tlrn/manifest-train.txt").exists());

    ws.ok(&["train", "--mode", "baseline"]);
    ws.ok(&["eval", "--mode", "tlrn"]);
    let train_data = ws.path("out/train.tlrn");
    ws.ok(&["eval", "--mode", "baseline", "--data", s(&train_data)]);
    let summary = fs::read_to_string(ws.path("out/eval/baseline_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
    for line in summary.lines().skip(1) {
        assert!(line.split(',').filter(|f| *f != "NA").all(|f| f.parse::<f64>().unwrap().is_finite()), "{line}");
    }

    let (a, b) = (ws.path("out/tlrn/checkpoint.ckpt"), ws.path("out/baseline/checkpoint.ckpt"));
    ws.ok(&["eval", "--compare", s(&a), s(&b)]);
    let cmp = fs::read_to_string(ws.path("out/eval/comparison.csv")).unwrap();
    let lines: Vec<&str> = cmp.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].contains("tlrn_mse_mean") && lines[0].contains("baseline_mse_mean"), "{}", lines[0]);
    for (k, l) in lines[1..].iter().enumerate() {
        assert!(l.starts_with(&format!("{},", k + 1)));
    }

    let s1 = ws.path("out/eval/tlrn_summary.csv");
    let s2 = ws.path("out/eval/baseline_summary.csv");
    ws.ok(&["export-plots", "--summary", s(&s1), "--summary", s(&s2), "--checkpoint", s(&a), "--data", s(&train_data)]);
    for f in ["mse.svg", "neg_jac.svg", "frames.svg", "warped_tlrn.svg", "grid_tlrn.svg", "manifest-export-plots.txt"] {
        assert!(ws.path(&format!("out/plots/{f}")).exists(), "{f}");
    }
}

#[test]
fn untrained_model_on_static_data_has_zero_mse() {
    // gradients vanish at the identity on static frames, so one epoch keeps it
    let ws = Workspace::new(&format!("{SMALL}data.static_frames = true\n"));
    ws.ok(&["gen-data"]);
    ws.ok(&["train", "--epochs", "1"]);
    ws.ok(&["eval"]);
    let rows = fs::read_to_string(ws.path("out/eval/tlrn_rows.csv")).unwrap();
    let mut n = 0;
    for line in rows.lines().skip(1) {
        assert_eq!(line.split(',').nth(2).unwrap().parse::<f64>().unwrap(), 0.0, "{line}");
        n += 1;
    }
    assert_eq!(n, 2 * 3);
}

#[test]
fn resume_continues_bit_exactly() {
    let full = Workspace::new(SMALL);
    full.ok(&["gen-data"]);
    full.ok(&["--deterministic", "train"]);
    let part = Workspace::new(SMALL);
    part.ok(&["gen-data"]);
    part.ok(&["--deterministic", "train", "--epochs", "1"]);
    part.ok(&["--deterministic", "train", "--resume"]);
    let a = fs::read(full.path("out/tlrn/checkpoint.ckpt")).unwrap();
    let b = fs::read(part.path("out/tlrn/checkpoint.ckpt")).unwrap();
    assert!(a == b);
    let log = fs::read_to_string(part.path("out/tlrn/train_log.csv")).unwrap();
    let epochs: Vec<&str> = log.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(epochs, ["1", "2"]);
}

#[test]
fn unknown_config_key_exits_2_naming_it() {
    let ws = Workspace::new(&format!("{SMALL}train.lerning_rate = 0.1\n"));
    let out = ws.run(&["gen-data"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("train.lerning_rate"), "{}", stderr(&out));

    let out = tlrn(&["train", "--mode", "sideways"]);
    assert_eq!(code(&out), 2);
    let out = tlrn(&["frobnicate"]);
    assert_eq!(code(&out), 2);
    let out = tlrn(&["gen-data", "--preset", "nonexistent"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("nonexistent"));
}

#[test]
fn missing_inputs_exit_3() {
    let ws = Workspace::new(SMALL);
    let out = ws.run(&["train"]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("train.tlrn"), "{}", stderr(&out));
    let out = tlrn(&["--config", "/definitely/not/here.cfg", "gen-data"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn mismatched_dataset_exits_2_with_both_shapes() {
    let ws = Workspace::new(SMALL);
    ws.ok(&["gen-data"]);
    ws.ok(&["train", "--epochs", "1"]);
    let other = ws.path("big");
    let o = tlrn(&["gen-data", "--preset", "ring-desk", "--out", s(&other)]);
    assert_eq!(code(&o), 0);
    let big = other.join("test.tlrn");
    let out = ws.run(&["eval", "--data", s(&big)]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("16x16") && err.contains("32x32"), "{err}");
}

#[test]
fn diverging_training_exits_4() {
    let ws = Workspace::new(&format!("{SMALL}train.learning_rate = 1e30\n"));
    ws.ok(&["gen-data"]);
    let out = ws.run(&["train"]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(stderr(&out).contains("non-finite"), "{}", stderr(&out));
}

#[test]
fn plots_need_their_columns_and_render_deterministically() {
    let ws = Workspace::new(SMALL);
    let header = "frame,n,mse_mean,mse_std,dice_mean,dice_std,hd_mean,hd_std,neg_jac_frac_mean,neg_jac_frac_std";
    let mut csv = format!("{header}\n");
    for f in 1..=6 {
        csv.push_str(&format!("{f},4,{},0.01,NA,NA,NA,NA,0,0\n", 0.1 / f as f64));
    }
    fs::write(ws.path("a_summary.csv"), &csv).unwrap();
    fs::write(ws.path("b_summary.csv"), &csv).unwrap();
    let (a, b) = (ws.path("a_summary.csv"), ws.path("b_summary.csv"));
    ws.ok(&["export-plots", "--summary", s(&a)]);
    let first = fs::read(ws.path("out/plots/mse.svg")).unwrap();
    ws.ok(&["export-plots", "--summary", s(&a)]);
    assert!(first == fs::read(ws.path("out/plots/mse.svg")).unwrap());
    assert_eq!(String::from_utf8(first).unwrap().matches("class=\"xtick\"").count(), 6);
    ws.ok(&["export-plots", "--summary", s(&a), "--summary", s(&b)]);

    fs::write(ws.path("broken_summary.csv"), "frame,n,mse_mean\n1,4,0.1\n").unwrap();
    let broken = ws.path("broken_summary.csv");
    let out = ws.run(&["export-plots", "--summary", s(&broken)]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("mse_std") && err.contains("neg_jac_frac_mean"), "{err}");
}

#[test]
fn commands_leave_inputs_untouched() {
    let ws = Workspace::new(SMALL);
    ws.ok(&["gen-data"]);
    ws.ok(&["train", "--epochs", "1"]);
    let inputs = [ws.path("exp.cfg"), ws.path("out/test.tlrn"), ws.path("out/tlrn/checkpoint.ckpt")];
    let before: Vec<Vec<u8>> = inputs.iter().map(|p| fs::read(p).unwrap()).collect();
    ws.ok(&["eval"]);
    let summary = ws.path("out/eval/tlrn_summary.csv");
    let csv_before = fs::read(&summary).unwrap();
    let ckpt = ws.path("out/tlrn/checkpoint.ckpt");
    let test = ws.path("out/test.tlrn");
    ws.ok(&["export-plots", "--summary", s(&summary), "--checkpoint", s(&ckpt), "--data", s(&test)]);
    let after: Vec<Vec<u8>> = inputs.iter().map(|p| fs::read(p).unwrap()).collect();
    assert!(before == after);
    assert!(csv_before == fs::read(&summary).unwrap());
}
