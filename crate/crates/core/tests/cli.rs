use std::path::PathBuf;
use std::process::{Command, Output};

use bingo::data::{load_bags, load_checkpoint};
use bingo::eval::read_reports;
use bingo::train::TrainConfig;

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_bingo"))
            .current_dir(self.dir.path())
            .env("BINGO_RUN_DIR", self.path("runs"))
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn manifests(&self) -> Vec<String> {
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(self.path("runs"))
            .map(|rd| rd.map(|e| e.unwrap().path()).collect())
            .unwrap_or_default();
        dirs.sort();
        dirs.iter()
            .map(|d| std::fs::read_to_string(d.join("manifest.txt")).unwrap())
            .collect()
    }

    /// Small dataset, teacher, embeddings and kNN bags.
    fn prepared(&self) {
        std::fs::write(
            self.path("small.cfg"),
            "# tiny nets\nepochs = 2\nhidden_dims = 16\nbank_capacity = 128\nbatch_size = 32\n",
        )
        .unwrap();
        self.ok(&[
            "gen-data",
            "--n",
            "300",
            "--dim",
            "8",
            "--classes",
            "3",
            "--out",
            "data",
        ]);
        self.ok(&["pretrain", "--config", "small.cfg", "--data", "data", "--out", "t.ckpt"]);
        self.ok(&["embed", "--ckpt", "t.ckpt", "--data", "data", "--out", "t.emb"]);
        self.ok(&[
            "bag",
            "--emb",
            "t.emb",
            "--strategy",
            "knn",
            "--k",
            "5",
            "--out",
            "bags.tsv",
        ]);
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn bag_flags_reach_the_file_header() {
    let s = Sandbox::new();
    s.prepared();
    let text = std::fs::read_to_string(s.path("bags.tsv")).unwrap();
    assert!(
        text.starts_with("#bingo-bags v1 strategy=knn param=5 n=240\n"),
        "{}",
        &text[..60]
    );
    assert_eq!(load_bags(&s.path("bags.tsv")).unwrap().len(), 240);
}

#[test]
fn relation_arms_produce_comparable_reports() {
    let s = Sandbox::new();
    s.prepared();
    let common = [
        "--config",
        "small.cfg",
        "--data",
        "data",
        "--teacher",
        "t.ckpt",
        "--bags",
        "bags.tsv",
    ];
    for relation in ["none", "teacher"] {
        let mut args = vec!["distill"];
        args.extend(common);
        let out = format!("{relation}.ckpt");
        args.extend(["--relation", relation, "--out", &out]);
        s.ok(&args);
        let report = format!("{relation}.report");
        s.ok(&[
            "eval", "--ckpt", &out, "--data", "data", "--bags", "bags.tsv", "--mode", "bagdis", "--out", &report,
        ]);
    }
    let a = read_reports(&s.path("none.report")).unwrap();
    let b = read_reports(&s.path("teacher.report")).unwrap();
    assert_eq!((a.len(), b.len()), (1, 1));
    assert_eq!((a[0].metric.as_str(), b[0].metric.as_str()), ("bagdis", "bagdis"));
    assert_eq!((a[0].n_train, a[0].n_test), (b[0].n_train, b[0].n_test));
    // Different checkpoints, so different fingerprints.
    assert_ne!(a[0].config, b[0].config);
    let none = load_checkpoint(&s.path("none.ckpt")).unwrap();
    assert_eq!(none.meta.stage, "distill");
}

#[test]
fn every_eval_mode_writes_a_report() {
    let s = Sandbox::new();
    s.prepared();
    for (mode, metric) in [
        ("knn", "knn10"),
        ("linear", "linear"),
        ("finetune", "finetune0.1"),
        ("bagdis", "bagdis"),
        ("intra-class", "intra-class"),
    ] {
        let stdout = s.ok(&[
            "eval",
            "--ckpt",
            "t.ckpt",
            "--data",
            "data",
            "--bags",
            "bags.tsv",
            "--mode",
            mode,
            "--probe-epochs",
            "3",
            "--finetune-epochs",
            "2",
            "--fraction",
            "0.1",
            "--out",
            "r.txt",
        ]);
        let r = read_reports(&s.path("r.txt")).unwrap();
        assert_eq!(r[0].metric, metric);
        assert!(stdout.starts_with(&format!("metric={metric} ")));
    }
}

#[test]
fn sweep_writes_one_report_per_value_and_jobs_do_not_change_results() {
    let s = Sandbox::new();
    s.prepared();
    let base = [
        "sweep",
        "--config",
        "small.cfg",
        "--data",
        "data",
        "--teacher",
        "t.ckpt",
        "--param",
        "k",
        "--values",
        "1,5,10,20",
    ];
    let mut serial = base.to_vec();
    serial.extend(["--out", "serial"]);
    s.ok(&serial);
    let mut parallel = base.to_vec();
    parallel.extend(["--out", "parallel", "--jobs", "3"]);
    s.ok(&parallel);

    let a = read_reports(&s.path("serial/reports.txt")).unwrap();
    let names: Vec<&str> = a.iter().map(|r| r.metric.as_str()).collect();
    assert_eq!(names, ["knn10@k1", "knn10@k5", "knn10@k10", "knn10@k20"]);
    assert_eq!(a, read_reports(&s.path("parallel/reports.txt")).unwrap());
    for v in [1, 5, 10, 20] {
        let f = |root: &str, name: &str| std::fs::read(s.path(&format!("{root}/k-{v}/{name}"))).unwrap();
        assert_eq!(f("serial", "student.ckpt"), f("parallel", "student.ckpt"));
        assert_eq!(f("serial", "bags.tsv"), f("parallel", "bags.tsv"));
    }
    let bags = load_bags(&s.path("serial/k-20/bags.tsv")).unwrap();
    assert_eq!(bags.members(0).len(), 21);
}

#[test]
fn kmeans_sweep_over_c() {
    let s = Sandbox::new();
    s.prepared();
    s.ok(&[
        "sweep",
        "--config",
        "small.cfg",
        "--data",
        "data",
        "--teacher",
        "t.ckpt",
        "--param",
        "c",
        "--values",
        "3,6",
        "--out",
        "sw",
    ]);
    let names: Vec<String> = read_reports(&s.path("sw/reports.txt"))
        .unwrap()
        .into_iter()
        .map(|r| r.metric)
        .collect();
    assert_eq!(names, ["knn10@c3", "knn10@c6"]);
}

#[test]
fn exit_codes_follow_error_categories() {
    let s = Sandbox::new();
    s.prepared();
    // Usage.
    assert_eq!(
        code(&s.run(&["bag", "--emb", "t.emb", "--out", "b.tsv", "--bogus", "1"])),
        2
    );
    assert_eq!(code(&s.run(&["frobnicate"])), 2);
    assert_eq!(code(&s.run(&["bag", "--emb", "t.emb"])), 2);
    std::fs::write(s.path("bad.cfg"), "no_such_key = 1\n").unwrap();
    assert_eq!(
        code(&s.run(&["bag", "--config", "bad.cfg", "--emb", "t.emb", "--out", "b.tsv"])),
        2
    );
    assert_eq!(
        code(&s.run(&["distill", "--data", "data", "--teacher", "t.ckpt", "--out", "s.ckpt"])),
        2
    );
    // Io.
    assert_eq!(
        code(&s.run(&["embed", "--ckpt", "missing.ckpt", "--data", "data", "--out", "e"])),
        1
    );
    // Invariant: corrupt input file and invalid settings.
    std::fs::write(s.path("junk.ckpt"), b"BNGCjunk").unwrap();
    assert_eq!(
        code(&s.run(&["embed", "--ckpt", "junk.ckpt", "--data", "data", "--out", "e"])),
        3
    );
    assert_eq!(
        code(&s.run(&[
            "bag",
            "--emb",
            "t.emb",
            "--strategy",
            "knn",
            "--k",
            "0",
            "--out",
            "b.tsv"
        ])),
        3
    );
    assert_eq!(
        code(&s.run(&["pretrain", "--data", "data", "--out", "x.ckpt", "--batch-size", "7"])),
        3
    );
    // Numeric: a learning rate large enough to overflow.
    let out = s.run(&[
        "pretrain",
        "--config",
        "small.cfg",
        "--data",
        "data",
        "--out",
        "x.ckpt",
        "--base-lr",
        "1e300",
    ]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn manifests_are_written_for_success_and_failure() {
    let s = Sandbox::new();
    s.ok(&[
        "gen-data",
        "--n",
        "100",
        "--dim",
        "4",
        "--classes",
        "2",
        "--seed",
        "9",
        "--out",
        "d",
    ]);
    let _ = s.run(&["gen-data", "--n", "100", "--dim", "4", "--classes", "0", "--out", "d2"]);
    let _ = s.run(&["gen-data", "--nope"]);
    let m = s.manifests();
    assert_eq!(m.len(), 3);
    let ok = m.iter().find(|t| t.contains("exit_status=0")).unwrap();
    for line in [
        "subcommand=gen-data",
        "seed=9",
        "output.out=d",
        "config.n=100",
        "config.class_sep=3",
        "config.val_fraction=0.2",
    ] {
        assert!(ok.lines().any(|l| l == line), "missing {line} in\n{ok}");
    }
    assert!(m.iter().any(|t| t.contains("exit_status=3") && t.contains("error=")));
    assert!(m
        .iter()
        .any(|t| t.contains("exit_status=2") && t.contains("subcommand=gen-data")));
}

#[test]
fn help_lists_every_key_with_its_default() {
    let s = Sandbox::new();
    let out = s.run(&["distill", "--help"]);
    assert_eq!(code(&out), 0);
    let help = String::from_utf8(out.stdout).unwrap();
    let d = TrainConfig::default();
    for (key, _) in TrainConfig::KEYS {
        let flag = format!("--{}", key.replace('_', "-"));
        assert!(help.contains(&flag), "{flag}");
        assert!(help.contains(&format!("[default: {}]", d.get(key).unwrap())), "{key}");
    }
    assert!(help.contains("--relation"));
    for sub in ["gen-data", "pretrain", "embed", "bag", "eval", "sweep"] {
        let out = s.run(&[sub, "--help"]);
        assert_eq!(code(&out), 0);
        assert!(String::from_utf8(out.stdout).unwrap().contains("[default: "));
    }
}

#[test]
fn flags_override_config_file() {
    let s = Sandbox::new();
    s.prepared();
    std::fs::write(s.path("b.cfg"), "strategy = kmeans\nc = 4\nk = 2\n").unwrap();
    s.ok(&["bag", "--config", "b.cfg", "--emb", "t.emb", "--out", "b1.tsv"]);
    assert!(std::fs::read_to_string(s.path("b1.tsv"))
        .unwrap()
        .starts_with("#bingo-bags v1 strategy=kmeans"));
    s.ok(&[
        "bag",
        "--config",
        "b.cfg",
        "--strategy",
        "knn",
        "--emb",
        "t.emb",
        "--out",
        "b2.tsv",
    ]);
    assert!(std::fs::read_to_string(s.path("b2.tsv"))
        .unwrap()
        .starts_with("#bingo-bags v1 strategy=knn param=2 "));
}

#[test]
fn label_bags_need_labels() {
    let s = Sandbox::new();
    s.prepared();
    assert_eq!(
        code(&s.run(&["bag", "--emb", "t.emb", "--strategy", "labels", "--out", "l.tsv"])),
        3
    );
    s.ok(&[
        "bag",
        "--emb",
        "t.emb",
        "--strategy",
        "labels",
        "--data",
        "data",
        "--out",
        "l.tsv",
    ]);
    let bags = load_bags(&s.path("l.tsv")).unwrap();
    assert_eq!(bags.strategy().param(), 3);
}
