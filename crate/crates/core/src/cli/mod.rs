//! Command-line driver. Every stage is a subcommand; each invocation writes a
//! run manifest under `$BINGO_RUN_DIR` (default `./runs`).

pub mod settings;
mod stages;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::error::ErrorKind;
use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::error::{Error, ErrorCategory};
use settings::{read_config_file, resolve, KeySpec, Settings};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub const RUN_DIR_ENV: &str = "BINGO_RUN_DIR";

/// Why a stage stopped.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Run(Error),
    /// A sweep child process exited nonzero.
    Child {
        code: i32,
        what: String,
    },
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Run(e) => match e.category() {
                ErrorCategory::Io => EXIT_IO,
                ErrorCategory::Invariant => EXIT_INVARIANT,
                ErrorCategory::Numeric => EXIT_NUMERIC,
            },
            Failure::Child { code, .. } => *code,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) => m.clone(),
            Failure::Run(e) => e.to_string(),
            Failure::Child { code, what } => format!("{what} exited with status {code}"),
        }
    }
}

#[derive(Clone, Copy)]
struct PathArg {
    name: &'static str,
    help: &'static str,
    required: bool,
    output: bool,
}

const fn input(name: &'static str, help: &'static str) -> PathArg {
    PathArg {
        name,
        help,
        required: true,
        output: false,
    }
}

const fn output(name: &'static str, help: &'static str) -> PathArg {
    PathArg {
        name,
        help,
        required: true,
        output: true,
    }
}

const fn optional(p: PathArg) -> PathArg {
    PathArg { required: false, ..p }
}

struct Subcommand {
    name: &'static str,
    about: &'static str,
    keys: fn() -> Vec<KeySpec>,
    paths: &'static [PathArg],
}

const SUBCOMMANDS: &[Subcommand] = &[
    Subcommand {
        name: "gen-data",
        about: "Generate a Gaussian-blob dataset with a stratified train/val split",
        keys: settings::gen_data_keys,
        paths: &[output("out", "dataset directory")],
    },
    Subcommand {
        name: "pretrain",
        about: "Pretrain a teacher encoder contrastively",
        keys: settings::train_keys,
        paths: &[
            input("data", "dataset directory"),
            output("out", "checkpoint to write"),
            optional(output("metrics", "extra copy of the metric lines")),
        ],
    },
    Subcommand {
        name: "embed",
        about: "Export unit-norm embeddings of one split",
        keys: settings::embed_keys,
        paths: &[
            input("ckpt", "encoder checkpoint"),
            input("data", "dataset directory"),
            output("out", "embedding file to write"),
        ],
    },
    Subcommand {
        name: "bag",
        about: "Group instances into bags from exported embeddings",
        keys: settings::bag_keys,
        paths: &[
            input("emb", "embedding file"),
            optional(input("data", "dataset directory; train labels for the labels strategy")),
            output("out", "bag file to write"),
        ],
    },
    Subcommand {
        name: "distill",
        about: "Distill a student from a teacher checkpoint and bags",
        keys: settings::train_keys,
        paths: &[
            input("data", "dataset directory"),
            input("teacher", "teacher checkpoint"),
            optional(input(
                "bags",
                "bag file over the train split; required for relation_source=teacher",
            )),
            output("out", "student checkpoint to write"),
            optional(output("metrics", "extra copy of the metric lines")),
        ],
    },
    Subcommand {
        name: "eval",
        about: "Score an encoder and write one report line",
        keys: settings::eval_keys,
        paths: &[
            input("ckpt", "encoder checkpoint"),
            input("data", "dataset directory"),
            optional(input("bags", "bag file over the train split; required for bagdis")),
            optional(output("out", "report file to write")),
        ],
    },
    Subcommand {
        name: "sweep",
        about: "Rebag, distill and score once per value of k or c",
        keys: settings::sweep_keys,
        paths: &[
            input("data", "dataset directory"),
            input("teacher", "teacher checkpoint"),
            output("out", "output directory"),
        ],
    },
];

fn key_arg(spec: &KeySpec) -> Arg {
    let mut arg = Arg::new(spec.key)
        .long(spec.flag())
        .value_name("VALUE")
        .help(format!("{} [default: {}]", spec.help, spec.default));
    if spec.key == "relation_source" {
        arg = arg.visible_alias("relation");
    }
    arg
}

pub fn command() -> Command {
    let mut cmd = Command::new("bingo")
        .about("Bag-aware contrastive distillation of small encoders")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for sub in SUBCOMMANDS {
        let mut c = Command::new(sub.name).about(sub.about).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("flat `key = value` file; flags override it"),
        );
        for p in sub.paths {
            c = c.arg(
                Arg::new(p.name)
                    .long(p.name)
                    .value_name("PATH")
                    .required(p.required)
                    .help(p.help),
            );
        }
        for spec in (sub.keys)() {
            c = c.arg(key_arg(&spec));
        }
        if sub.name == "sweep" {
            c = c.arg(Arg::new("single").long("single").action(ArgAction::SetTrue).hide(true));
        }
        cmd = cmd.subcommand(c);
    }
    cmd
}

/// Resolved arguments of one invocation.
pub struct Invocation {
    pub subcommand: &'static str,
    pub settings: Settings,
    pub inputs: Vec<(&'static str, PathBuf)>,
    pub outputs: Vec<(&'static str, PathBuf)>,
    pub flags: Vec<&'static str>,
    pub run_dir: PathBuf,
}

impl Invocation {
    pub fn path(&self, name: &str) -> Option<&Path> {
        self.inputs
            .iter()
            .chain(&self.outputs)
            .find(|(n, _)| *n == name)
            .map(|(_, p)| p.as_path())
    }

    pub fn required(&self, name: &str) -> Result<&Path, Failure> {
        self.path(name)
            .ok_or_else(|| Failure::Usage(format!("--{name} is required")))
    }

    pub fn flag(&self, name: &str) -> bool {
        self.flags.contains(&name)
    }
}

fn invocation(
    sub: &Subcommand,
    m: &ArgMatches,
) -> Result<(Settings, Vec<(&'static str, PathBuf)>, Vec<(&'static str, PathBuf)>), Failure> {
    let registry = (sub.keys)();
    let file = match m.get_one::<String>("config") {
        Some(p) => read_config_file(Path::new(p)).map_err(|e| match e {
            Error::Config(msg) => Failure::Usage(format!("{p}: {msg}")),
            other => Failure::Run(other),
        })?,
        None => Vec::new(),
    };
    let flags: Vec<(String, String)> = registry
        .iter()
        .filter_map(|s| m.get_one::<String>(s.key).map(|v| (s.key.to_string(), v.clone())))
        .collect();
    let settings = resolve(&registry, &file, &flags).map_err(|e| Failure::Usage(e.to_string()))?;
    let (mut inputs, mut outputs) = (Vec::new(), Vec::new());
    for p in sub.paths {
        if let Some(v) = m.get_one::<String>(p.name) {
            let slot = if p.output { &mut outputs } else { &mut inputs };
            slot.push((p.name, PathBuf::from(v)));
        }
    }
    Ok((settings, inputs, outputs))
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis())
}

fn run_root() -> PathBuf {
    std::env::var_os(RUN_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn create_run_dir(subcommand: &str, started: u128) -> std::io::Result<PathBuf> {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    let dir = run_root().join(format!("{subcommand}-{started}-{}-{n}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Record of one invocation, written as `key=value` lines.
#[derive(Clone, Debug, Default)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: Vec<(String, String)>,
    pub inputs: Vec<(String, String)>,
    pub outputs: Vec<(String, String)>,
    pub seed: Option<u64>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub exit_status: i32,
    pub error: Option<String>,
}

impl RunManifest {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "subcommand={}", self.subcommand);
        let _ = writeln!(s, "exit_status={}", self.exit_status);
        if let Some(seed) = self.seed {
            let _ = writeln!(s, "seed={seed}");
        }
        let _ = writeln!(s, "started_unix_ms={}", self.started_unix_ms);
        let _ = writeln!(s, "finished_unix_ms={}", self.finished_unix_ms);
        for (prefix, pairs) in [
            ("input", &self.inputs),
            ("output", &self.outputs),
            ("config", &self.config),
        ] {
            for (k, v) in pairs {
                let _ = writeln!(s, "{prefix}.{k}={v}");
            }
        }
        if let Some(e) = &self.error {
            let _ = writeln!(s, "error={}", e.replace('\n', " "));
        }
        s
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::write(dir.join("manifest.txt"), self.render())
    }
}

fn finish(mut manifest: RunManifest, dir: Option<&Path>, result: Result<(), Failure>, report: bool) -> i32 {
    let code = match &result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            if report {
                eprintln!("error: {}", f.message());
            }
            manifest.error = Some(f.message());
            f.exit_code()
        }
    };
    manifest.exit_status = code;
    manifest.finished_unix_ms = now_ms();
    let dir = match dir {
        Some(d) => Some(d.to_path_buf()),
        None => create_run_dir(&manifest.subcommand, manifest.started_unix_ms).ok(),
    };
    match dir.map(|d| manifest.write(&d)) {
        Some(Ok(())) => code,
        _ => {
            eprintln!("error: cannot write run manifest under {}", run_root().display());
            if code == EXIT_OK {
                EXIT_IO
            } else {
                code
            }
        }
    }
}

fn display_pairs(pairs: &[(&'static str, PathBuf)]) -> Vec<(String, String)> {
    pairs
        .iter()
        .map(|(k, p)| (k.to_string(), p.display().to_string()))
        .collect()
}

/// Parses `argv` (program name first), runs the stage and returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let started = now_ms();
    let matches = match command().try_get_matches_from(&argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                return EXIT_OK;
            }
            let subcommand = argv
                .get(1)
                .and_then(|a| a.to_str())
                .filter(|a| SUBCOMMANDS.iter().any(|s| s.name == *a))
                .unwrap_or("unknown");
            let manifest = RunManifest {
                subcommand: subcommand.into(),
                started_unix_ms: started,
                ..Default::default()
            };
            return finish(manifest, None, Err(Failure::Usage(e.kind().to_string())), false);
        }
    };
    let (name, m) = matches.subcommand().expect("subcommand is required");
    let sub = SUBCOMMANDS
        .iter()
        .find(|s| s.name == name)
        .expect("registered subcommand");
    let mut manifest = RunManifest {
        subcommand: sub.name.into(),
        started_unix_ms: started,
        ..Default::default()
    };
    let (settings, inputs, outputs) = match invocation(sub, m) {
        Ok(r) => r,
        Err(f) => return finish(manifest, None, Err(f), true),
    };
    manifest.config = settings
        .pairs()
        .iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect();
    manifest.seed = settings
        .pairs()
        .iter()
        .find(|(k, _)| *k == "seed")
        .and_then(|(_, v)| v.parse().ok());
    manifest.inputs = display_pairs(&inputs);
    manifest.outputs = display_pairs(&outputs);
    let run_dir = match create_run_dir(sub.name, started) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("error: cannot create run directory under {}: {e}", run_root().display());
            return EXIT_IO;
        }
    };
    let flags = if sub.name == "sweep" && m.get_flag("single") {
        vec!["single"]
    } else {
        vec![]
    };
    let inv = Invocation {
        subcommand: sub.name,
        settings,
        inputs,
        outputs,
        flags,
        run_dir: run_dir.clone(),
    };
    let result = stages::run(&inv);
    finish(manifest, Some(&run_dir), result, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        command().debug_assert();
    }

    #[test]
    fn every_subcommand_help_lists_every_key_with_default() {
        for sub in SUBCOMMANDS {
            let help = command()
                .find_subcommand_mut(sub.name)
                .expect("registered")
                .render_long_help()
                .to_string();
            for spec in (sub.keys)() {
                assert!(
                    help.contains(&format!("--{}", spec.flag())),
                    "{}: {}",
                    sub.name,
                    spec.key
                );
                assert!(
                    help.contains(&format!("[default: {}]", spec.default)),
                    "{}: {}",
                    sub.name,
                    spec.key
                );
            }
        }
    }

    #[test]
    fn manifest_lists_sections_in_order() {
        let m = RunManifest {
            subcommand: "bag".into(),
            config: vec![("k".into(), "5".into())],
            inputs: vec![("emb".into(), "e.bin".into())],
            outputs: vec![("out".into(), "b.tsv".into())],
            seed: Some(3),
            started_unix_ms: 1,
            finished_unix_ms: 2,
            exit_status: 0,
            error: None,
        };
        assert_eq!(
            m.render(),
            "subcommand=bag\nexit_status=0\nseed=3\nstarted_unix_ms=1\nfinished_unix_ms=2\ninput.emb=e.bin\noutput.out=b.tsv\nconfig.k=5\n"
        );
    }
}
