use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use densefew::episodes::EvalReport;
use densefew::fewshot::cam::parse_pgm;
use tempfile::TempDir;

fn densefew(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_densefew"))
        .args(args)
        .env_remove("DENSEFEW_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(o));
}

/// Small dataset plus a briefly trained model.
struct Fixture {
    _dir: TempDir,
    data: PathBuf,
    model: PathBuf,
    dir: PathBuf,
}

fn fixture() -> Fixture {
    let dir = TempDir::new().unwrap();
    let path = dir.path().to_path_buf();
    let data = path.join("glyphs.fslt");
    let model = path.join("model.fslc");
    let o = densefew(&[
        "gen-data",
        "--classes",
        "10",
        "--per-class",
        "12",
        "--height",
        "16",
        "--width",
        "16",
        "--out",
        arg(&data),
    ]);
    assert_ok(&o);
    let o = densefew(&[
        "train-stage1",
        "--data",
        arg(&data),
        "--out",
        arg(&model),
        "--width-div",
        "16",
        "--iters",
        "4",
        "--batch",
        "8",
    ]);
    assert_ok(&o);
    Fixture {
        _dir: dir,
        data,
        model,
        dir: path,
    }
}

fn eval_args<'a>(f: &'a Fixture, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![
        "eval",
        "--model",
        arg(&f.model),
        "--data",
        arg(&f.data),
        "--way",
        "2",
        "--shot",
        "2",
        "--queries",
        "3",
        "--tasks",
        "12",
    ];
    v.extend_from_slice(extra);
    v
}

#[test]
fn train_then_eval_prints_parseable_report() {
    let f = fixture();
    let o = densefew(&eval_args(&f, &[]));
    assert_ok(&o);
    let report = EvalReport::parse_machine(&stdout(&o)).unwrap();
    assert_eq!(report.tasks(), 12);
    assert!((0.0..=1.0).contains(&report.mean));
    assert!(report.half_width >= 0.0);
    assert!(stderr(&o).contains("seed=17"));

    let o = densefew(&eval_args(
        &f,
        &["--inference", "nearest", "--support-pool", "gmp", "--query-pool", "gmp"],
    ));
    assert_ok(&o);
    EvalReport::parse_machine(&stdout(&o)).unwrap();
}

#[test]
fn seed_comes_from_flag_then_environment() {
    let f = fixture();
    let with_env = |seed: &str, extra: &[&str]| {
        let mut args = eval_args(&f, &["--inference", "nearest"]);
        args.extend_from_slice(extra);
        let o = Command::new(env!("CARGO_BIN_EXE_densefew"))
            .args(&args)
            .env("DENSEFEW_SEED", seed)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        assert_ok(&o);
        stdout(&o)
    };
    assert_eq!(with_env("5", &[]), with_env("9", &["--seed", "5"]));
    assert_ne!(with_env("5", &[]), with_env("6", &[]));
}

#[test]
fn thread_count_does_not_change_results() {
    let f = fixture();
    let one = densefew(&[&["--threads", "1"][..], &eval_args(&f, &[])].concat());
    let three = densefew(&[&["--threads", "3"][..], &eval_args(&f, &[])].concat());
    assert_ok(&one);
    assert_ok(&three);
    assert_eq!(stdout(&one), stdout(&three));
}

#[test]
fn cam_exports_pgm() {
    let f = fixture();
    let out = f.dir.join("cam.pgm");
    let o = densefew(&[
        "cam",
        "--model",
        arg(&f.model),
        "--data",
        arg(&f.data),
        "--image",
        "3",
        "--class",
        "1",
        "--out",
        arg(&out),
    ]);
    assert_ok(&o);
    let (h, w, levels) = parse_pgm(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!((h, w), (1, 1));
    assert_eq!(levels.len(), 1);

    let o = densefew(&[
        "cam",
        "--model",
        arg(&f.model),
        "--data",
        arg(&f.data),
        "--class",
        "1",
        "--format",
        "csv",
    ]);
    assert_ok(&o);
    let v: f64 = stdout(&o).trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&v));
}

#[test]
fn implant_rejects_one_shot() {
    let f = fixture();
    let out = f.dir.join("wide.fslc");
    let o = densefew(&[
        "implant",
        "--model",
        arg(&f.model),
        "--data",
        arg(&f.data),
        "--shot",
        "1",
        "--out",
        arg(&out),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("1-shot"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn implant_writes_widened_model() {
    let f = fixture();
    let out = f.dir.join("wide.fslc");
    let o = densefew(&[
        "implant",
        "--model",
        arg(&f.model),
        "--data",
        arg(&f.data),
        "--way",
        "2",
        "--shot",
        "2",
        "--queries",
        "2",
        "--channels",
        "4",
        "--epochs",
        "2",
        "--out",
        arg(&out),
    ]);
    assert_ok(&o);
    let wide = densefew::models::Model::load(&out).unwrap();
    let base = densefew::models::Model::load(&f.model).unwrap();
    assert!(wide.implant.is_some());
    assert_eq!(wide.base_checksum(), base.base_checksum());
}

#[test]
fn usage_and_data_errors_map_to_exit_codes() {
    let dir = TempDir::new().unwrap();
    let o = densefew(&["eval", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));

    let o = densefew(&["gen-data"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--out"));

    let bogus = dir.path().join("bogus.fslt");
    std::fs::write(&bogus, b"not a dataset").unwrap();
    let o = densefew(&["eval", "--model", arg(&bogus), "--data", arg(&bogus)]);
    assert_eq!(o.status.code(), Some(2));

    let o = densefew(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
}
