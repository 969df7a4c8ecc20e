//! End-to-end runs of the `proto-adapt` binary on small generated data.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use proto_adapt::adaptation::{architecture, init_model, parse_steps_csv, ExperimentConfig};
use proto_adapt::kv::KvMap;
use proto_adapt::Tensor;

const SMALL_SPEC: &str = "kind = grid-seg\nclasses = 3\nheight = 8\nwidth = 8\n\
n_train = 60\nn_eval = 20\ngain = 1.3,0.8,1.0\nnoise = 0.05\nseed = 7\n";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_proto-adapt"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Data, a source model and a fitted mixture shared by the tests below.
struct Fixture {
    root: PathBuf,
}

impl Fixture {
    fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    fn ckpt(&self) -> PathBuf {
        self.root.join("model.mdl1")
    }
    fn gmm(&self) -> PathBuf {
        self.root.join("gmm.gmm1")
    }
    fn target(&self) -> PathBuf {
        self.data().join("target_train")
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = tempfile::tempdir().unwrap().keep();
        let spec = root.join("small.spec");
        fs::write(&spec, SMALL_SPEC).unwrap();
        let f = Fixture { root };
        ok(&["gen-data", "--spec", s(&spec), "--out", s(&f.data())]);
        ok(&["train", "--data", s(&f.data()), "--out", s(&f.ckpt()), "--steps", "800"]);
        ok(&["estimate", "--ckpt", s(&f.ckpt()), "--data", s(&f.data()), "--tau", "0.8", "--out", s(&f.gmm())]);
        f
    })
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_byte_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let spec = t.path().join("s.spec");
    fs::write(&spec, SMALL_SPEC).unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    let stdout = ok(&["gen-data", "--spec", s(&spec), "--out", s(&a)]);
    assert!(stdout.contains("classes=3"), "{stdout}");
    ok(&["gen-data", "--spec", s(&spec), "--out", s(&b)]);
    let (ta, tb) = (tree_bytes(&a), tree_bytes(&b));
    assert_eq!(ta, tb);
    for split in ["source", "target_train", "target_eval"] {
        assert!(a.join(split).join("manifest.txt").exists());
    }
    assert!(!a.join("target_train/labels.tns1").exists());
    // existing output needs --force; with it the result is unchanged
    assert_eq!(code(&run(&["gen-data", "--spec", s(&spec), "--out", s(&a)])), 2);
    ok(&["gen-data", "--spec", s(&spec), "--out", s(&a), "--force"]);
    assert_eq!(tree_bytes(&a), tb);
}

#[test]
fn bad_spec_key_exits_2_naming_it() {
    let t = tempfile::tempdir().unwrap();
    let spec = t.path().join("bad.spec");
    fs::write(&spec, "classes = 3\nwidht = 8\n").unwrap();
    let out = run(&["gen-data", "--spec", s(&spec), "--out", s(&t.path().join("d"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("widht"));
}

#[test]
fn unknown_flag_and_config_key_exit_2() {
    assert_eq!(code(&run(&["eval", "--ckpt", "x", "--data", "y", "--bogus"])), 2);
    let t = tempfile::tempdir().unwrap();
    let conf = t.path().join("c.conf");
    fs::write(&conf, "lamda = 0.5\n").unwrap();
    let f = fixture();
    let out = run(&[
        "train", "--data", s(&f.data()), "--out", s(&t.path().join("m.mdl1")), "--config", s(&conf),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("lamda"));
}

#[test]
fn train_zero_steps_writes_the_initialized_model() {
    let f = fixture();
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("m0.mdl1");
    ok(&["train", "--data", s(&f.data()), "--out", s(&out), "--steps", "0", "--seed", "5"]);
    let cfg = ExperimentConfig { seed: 5, ..Default::default() };
    let want = init_model(&cfg, &architecture(&cfg, 3, 3)).unwrap().to_mdl1_bytes();
    assert_eq!(fs::read(&out).unwrap(), want);
    assert!(fs::read_to_string(t.path().join("m0.mdl1.resolved_config.txt"))
        .unwrap()
        .contains("seed=5"));
}

#[test]
fn train_without_labels_exits_2() {
    let f = fixture();
    let t = tempfile::tempdir().unwrap();
    let out = run(&["train", "--data", s(&f.target()), "--out", s(&t.path().join("m.mdl1"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn estimate_is_reproducible_and_persists_w_sp() {
    let f = fixture();
    let t = tempfile::tempdir().unwrap();
    let again = t.path().join("again.gmm1");
    ok(&["estimate", "--ckpt", s(&f.ckpt()), "--data", s(&f.data()), "--tau", "0.8", "--out", s(&again)]);
    assert_eq!(fs::read(&again).unwrap(), fs::read(f.gmm()).unwrap());
    let side = KvMap::load(&f.root.join("gmm.gmm1.manifest.txt")).unwrap();
    for key in ["w_sp_exact", "w_sp_sliced", "e_source", "source_dir", "source_fingerprint"] {
        assert!(side.contains(key), "{key}");
    }
    assert_eq!(fs::read(f.gmm()).unwrap()[..4], *b"GMM1");
}

#[test]
fn estimate_starvation_exits_3_naming_the_class() {
    let f = fixture();
    let t = tempfile::tempdir().unwrap();
    let out = run(&[
        "estimate", "--ckpt", s(&f.ckpt()), "--data", s(&f.data()), "--tau", "0.999999",
        "--out", s(&t.path().join("g.gmm1")),
    ]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("class "));
}

#[test]
fn source_paths_are_refused_with_exit_4() {
    let f = fixture();
    let t = tempfile::tempdir().unwrap();
    let copy = t.path().join("copy");
    fs::create_dir_all(&copy).unwrap();
    for name in ["images.tns1", "manifest.txt"] {
        fs::copy(f.data().join("source").join(name), copy.join(name)).unwrap();
    }
    let source = f.data().join("source");
    let data = f.data();
    for target in [&source, &data, &copy] {
        let out = run(&[
            "adapt", "--ckpt", s(&f.ckpt()), "--gmm", s(&f.gmm()), "--target", s(target),
            "--iters", "2", "--out", s(&t.path().join("o")),
        ]);
        assert_eq!(code(&out), 4, "{target:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("source data forbidden during adaptation"));
    }
    assert!(!t.path().join("o").exists());
}

#[test]
fn labeled_target_is_refused() {
    let f = fixture();
    let t = tempfile::tempdir().unwrap();
    let out = run(&[
        "adapt", "--ckpt", s(&f.ckpt()), "--gmm", s(&f.gmm()),
        "--target", s(&f.data().join("target_eval")), "--iters", "2", "--out", s(&t.path().join("o")),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn adapt_flow_writes_every_artifact() {
    let f = fixture();
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("adapt");
    ok(&[
        "adapt", "--ckpt", s(&f.ckpt()), "--gmm", s(&f.gmm()), "--target", s(&f.target()),
        "--iters", "15", "--tau", "0.8", "--out", s(&out),
    ]);
    for name in [
        "adapted.mdl1", "report.csv", "summary.txt", "diagnostics.txt", "resolved_config.txt",
        "emb_gmm_samples.emb1", "emb_target_pre.emb1", "emb_target_post.emb1",
    ] {
        assert!(out.join(name).exists(), "{name}");
    }
    let recs = parse_steps_csv(&fs::read_to_string(out.join("report.csv")).unwrap()).unwrap();
    assert_eq!(recs.len(), 15);
    for r in &recs {
        assert!((r.total - (r.ce + 0.5 * r.swd)).abs() <= 1e-6);
    }
    let e = Tensor::<f32>::from_tns1_bytes(&fs::read(out.join("emb_target_pre.emb1")).unwrap()).unwrap();
    assert_eq!(e.shape()[1], 3 + 2);
    assert!(e.data().chunks(5).all(|r| r[3] == -1.0), "unlabeled target has unknown truth");

    let stdout = ok(&["diagnose", "--report", s(&out), "--eval-data", s(&f.data().join("target_eval"))]);
    for key in ["w_tp_pre", "w_tp_post", "one_minus_tau: 0.200000", "e_target_post"] {
        assert!(stdout.contains(key), "{key} missing from {stdout}");
    }

    let emb = t.path().join("emb");
    ok(&[
        "export-embeddings", "--ckpt", s(&out.join("adapted.mdl1")), "--pre-ckpt", s(&f.ckpt()),
        "--gmm", s(&f.gmm()), "--data", s(&f.data().join("target_eval")), "--out", s(&emb),
    ]);
    for name in ["emb_gmm_samples.emb1", "emb_target_pre.emb1", "emb_target_post.emb1"] {
        let t = Tensor::<f32>::from_tns1_bytes(&fs::read(emb.join(name)).unwrap()).unwrap();
        assert_eq!(t.shape()[1], 5, "{name}");
    }
}

#[test]
fn zero_lambda_records_but_ignores_the_distance() {
    let f = fixture();
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("a");
    ok(&[
        "adapt", "--ckpt", s(&f.ckpt()), "--gmm", s(&f.gmm()), "--target", s(&f.target()),
        "--iters", "5", "--lambda", "0", "--tau", "0.5", "--out", s(&out),
    ]);
    let recs = parse_steps_csv(&fs::read_to_string(out.join("report.csv")).unwrap()).unwrap();
    assert!(recs.iter().all(|r| r.swd > 0.0 && r.total == r.ce));
}

#[test]
fn adapt_survives_deleting_the_source_data() {
    let f = fixture();
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    let spec = t.path().join("s.spec");
    fs::write(&spec, SMALL_SPEC).unwrap();
    ok(&["gen-data", "--spec", s(&spec), "--out", s(&data)]);
    let gmm = t.path().join("g.gmm1");
    ok(&["estimate", "--ckpt", s(&f.ckpt()), "--data", s(&data), "--tau", "0.8", "--out", s(&gmm)]);
    fs::remove_dir_all(data.join("source")).unwrap();
    ok(&[
        "adapt", "--ckpt", s(&f.ckpt()), "--gmm", s(&gmm), "--target", s(&data.join("target_train")),
        "--iters", "3", "--tau", "0.8", "--out", s(&t.path().join("o")),
    ]);
}

#[test]
fn eval_on_memorized_toy_is_perfect() {
    let t = tempfile::tempdir().unwrap();
    let spec = t.path().join("toy.spec");
    fs::write(
        &spec,
        "classes = 3\nheight = 8\nwidth = 8\nn_train = 30\nn_eval = 5\npixel_noise = 0\nseed = 1\n",
    )
    .unwrap();
    let data = t.path().join("d");
    ok(&["gen-data", "--spec", s(&spec), "--out", s(&data)]);
    let ckpt = t.path().join("m.mdl1");
    ok(&["train", "--data", s(&data), "--out", s(&ckpt), "--steps", "1500"]);
    let scores = t.path().join("scores.txt");
    let stdout = ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&data.join("source")), "--out", s(&scores)]);
    assert!(stdout.contains("mIoU 1.0000"), "{stdout}");
    assert_eq!(KvMap::load(&scores).unwrap().get("eval_miou"), Some("1"));
}
