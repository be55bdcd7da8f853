use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use fusionact_core::data::synthetic::{write_motionsense, write_ucihar, SyntheticConfig};
use fusionact_core::data::DatasetKind;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fusionact"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Synthetic archives plus one trained checkpoint per stage, shared by all tests.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self, name: &str, body: &str) -> PathBuf {
        let path = self.path(name);
        fs::write(&path, body).unwrap();
        path
    }

    fn base_config(&self) -> String {
        format!(
            "dataset = ucihar\nroot = {}\nepochs = 1\nbatch_size = 32\n",
            self.path("ucihar").display()
        )
    }

    fn train(&self, stage: &str, out: &Path, extra: &[&str]) -> Output {
        let cfg = self.config(&format!("{stage}.cfg"), &self.base_config());
        let mut args = vec!["train", "--config", p(&cfg), "--stage", stage, "--out", p(out)];
        args.extend_from_slice(extra);
        run(&args)
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let f = Fixture {
            dir: tempfile::tempdir().unwrap(),
        };
        write_ucihar(&f.path("ucihar"), &SyntheticConfig::for_dataset(DatasetKind::UciHar, 2)).unwrap();
        write_motionsense(&f.path("motionsense"), &SyntheticConfig::for_dataset(DatasetKind::MotionSense, 2)).unwrap();
        for stage in ["1-static", "1-dynamic"] {
            let o = f.train(stage, &f.path(&format!("{stage}.ck")), &[]);
            assert!(o.status.success(), "{}", stderr(&o));
        }
        let (s, d) = (f.path("1-static.ck"), f.path("1-dynamic.ck"));
        let o = f.train("2", &f.path("full.ck"), &["--static-ck", p(&s), "--dynamic-ck", p(&d)]);
        assert!(o.status.success(), "{}", stderr(&o));
        f
    })
}

fn assert_exit(o: &Output, code: i32) {
    assert_eq!(o.status.code(), Some(code), "stdout:\n{}\nstderr:\n{}", stdout(o), stderr(o));
    if code != 0 {
        let err = stderr(o);
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with(&format!("error[{code}]: ")), "{err}");
    }
}

#[test]
fn static_stage_writes_a_three_class_expert() {
    let f = fixture();
    let o = run(&["inspect", "--ck", p(&f.path("1-static.ck"))]);
    assert_exit(&o, 0);
    let text = stdout(&o);
    assert!(text.contains("kind=static\n"), "{text}");
    assert!(text.contains("classes=SI,ST,LA\n"), "{text}");
    assert!(text.contains("static_outputs=3\n"));
    assert!(text.contains("config.epochs=1\n"));
    assert!(!text.contains(p(f.dir.path())), "manifest leaks paths");
}

#[test]
fn training_logs_one_csv_line_per_epoch() {
    let f = fixture();
    let o = f.train("1-dynamic", &f.path("log.ck"), &[]);
    assert_exit(&o, 0);
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,val_loss,val_acc,lr");
    assert_eq!(lines[1].split(',').count(), 5);
    assert!(lines[1].starts_with("0,"));
}

#[test]
fn same_config_gives_identical_checkpoints() {
    let f = fixture();
    let again = f.path("static-again.ck");
    assert_exit(&f.train("1-static", &again, &[]), 0);
    assert!(fs::read(f.path("1-static.ck")).unwrap() == fs::read(&again).unwrap());
}

#[test]
fn fusion_stage_needs_both_experts() {
    let f = fixture();
    let out = f.path("never.ck");
    assert_exit(&f.train("2", &out, &[]), 2);
    assert_exit(&f.train("2", &out, &["--static-ck", p(&f.path("1-static.ck"))]), 2);
    assert!(!out.exists());
}

#[test]
fn swapped_experts_are_rejected() {
    let f = fixture();
    let (s, d) = (f.path("1-static.ck"), f.path("1-dynamic.ck"));
    let o = f.train("2", &f.path("swapped.ck"), &["--static-ck", p(&d), "--dynamic-ck", p(&s)]);
    assert_exit(&o, 4);
}

#[test]
fn evaluation_reports_and_writes_row_normalized_confusion() {
    let f = fixture();
    let csv = f.path("confusion.csv");
    let o = run(&[
        "eval",
        "--ck",
        p(&f.path("full.ck")),
        "--root",
        p(&f.path("ucihar")),
        "--confusion-out",
        p(&csv),
    ]);
    assert_exit(&o, 0);
    assert!(stdout(&o).starts_with("accuracy,"), "{}", stdout(&o));
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap().split(',').count(), 6);
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 6);
    for row in rows {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9, "{row:?}");
    }
}

#[test]
fn evaluating_on_the_wrong_dataset_is_a_checkpoint_error() {
    let f = fixture();
    let o = run(&[
        "eval",
        "--ck",
        p(&f.path("full.ck")),
        "--dataset",
        "motionsense",
        "--root",
        p(&f.path("motionsense")),
    ]);
    assert_exit(&o, 4);
}

#[test]
fn inference_prints_a_distribution() {
    let f = fixture();
    let row: Vec<String> = (0..128).map(|t| format!("{}", (t as f64 * 0.2).sin())).collect();
    let input = f.path("window.csv");
    fs::write(&input, vec![row.join(","); 9].join("\n")).unwrap();
    let o = run(&["infer", "--ck", p(&f.path("full.ck")), "--input", p(&input)]);
    assert_exit(&o, 0);
    let text = stdout(&o);
    let mut lines = text.lines();
    let label = lines.next().unwrap().strip_prefix("label,").unwrap().to_string();
    let gate: f64 = lines.next().unwrap().strip_prefix("gate,").unwrap().parse().unwrap();
    assert!(gate > 0.0 && gate < 1.0);
    let probs: Vec<(String, f64)> = lines
        .map(|l| {
            let (a, v) = l.split_once(',').unwrap();
            (a.to_string(), v.parse().unwrap())
        })
        .collect();
    assert_eq!(probs.len(), 6);
    assert!((probs.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() <= 1e-6);
    let best = probs.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    assert_eq!(best.0, label);

    let short = f.path("short.csv");
    fs::write(&short, vec![row.join(","); 8].join("\n")).unwrap();
    assert_exit(&run(&["infer", "--ck", p(&f.path("full.ck")), "--input", p(&short)]), 3);
}

#[test]
fn bad_configs_and_usage_exit_with_two() {
    let f = fixture();
    let out = f.path("bad.ck");
    for (name, body) in [("unknown.cfg", "colour = red\n"), ("batch.cfg", "batch_size = 1\n")] {
        let cfg = f.config(name, body);
        assert_exit(&run(&["train", "--config", p(&cfg), "--out", p(&out)]), 2);
    }
    assert_exit(&run(&["train", "--config", p(&f.path("missing.cfg"))]), 2);
    assert_exit(&run(&["frobnicate"]), 2);
    assert_exit(&run(&["eval", "--ck", p(&f.path("full.ck"))]), 2);
}

#[test]
fn missing_data_and_damaged_checkpoints() {
    let f = fixture();
    let cfg = f.config("nodata.cfg", &format!("root = {}\nepochs = 1\n", f.path("nowhere").display()));
    assert_exit(&run(&["train", "--config", p(&cfg), "--out", p(&f.path("x.ck"))]), 3);

    let bytes = fs::read(f.path("full.ck")).unwrap();
    let cut = f.path("cut.ck");
    fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    assert_exit(&run(&["inspect", "--ck", p(&cut)]), 4);
    assert_exit(&run(&["inspect", "--ck", p(&f.path("absent.ck"))]), 4);
}
