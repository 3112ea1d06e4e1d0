use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flexipatch::processor::SurrogateModel;
use flexipatch_cli::Manifest;

const TINY: &str = r#"
[data]
n_traj = 10
[data.pde]
height = 32
width = 32
steps = 12
ic_k_max = 8.0
[model]
embed_dim = 16
mlp_dim = 32
n_blocks = 1
context = 2
[train]
epochs = 1
epoch_size = 16
batch_size = 4
lr = 1e-3
val_windows = 4
[eval]
windows = 4
batch = 4
[rollout]
steps = 4
"#;

struct Sandbox {
    root: PathBuf,
}

impl Sandbox {
    fn new(tag: &str) -> Sandbox {
        let root = std::env::temp_dir().join(format!("flxp-cli-{}-{}", tag, std::process::id()));
        let _ = std::fs::remove_dir_all(&root);
        std::fs::create_dir_all(&root).unwrap();
        std::fs::write(root.join("tiny.toml"), TINY).unwrap();
        Sandbox { root }
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_flexipatch"))
            .args(args)
            .current_dir(&self.root)
            .env("FLEXIPATCH_THREADS", "1")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) {
        let o = self.run(args);
        assert!(o.status.success(), "{:?}: {}", args, String::from_utf8_lossy(&o.stderr));
    }

    fn read(&self, rel: &str) -> String {
        std::fs::read_to_string(self.root.join(rel)).unwrap()
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Dataset in `data/` and a checkpoint in `tr/model.ckpt`.
    fn trained(tag: &str) -> Sandbox {
        let s = Sandbox::new(tag);
        s.ok(&["gen", "--config", "tiny.toml", "--seed", "1", "--out", "data"]);
        s.ok(&["train", "--config", "tiny.toml", "--out", "tr"]);
        s
    }
}

impl Drop for Sandbox {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.root);
    }
}

fn manifest(dir: &Path) -> Manifest {
    Manifest::read(dir).unwrap()
}

#[test]
fn gen_twice_gives_identical_checksums() {
    let s = Sandbox::new("gen");
    s.ok(&["gen", "--config", "tiny.toml", "--seed", "1", "--out", "a"]);
    s.ok(&["gen", "--config", "tiny.toml", "--seed", "1", "--out", "b"]);
    s.ok(&["gen", "--config", "tiny.toml", "--seed", "2", "--out", "c"]);
    let (a, b, c) = (manifest(&s.path("a")), manifest(&s.path("b")), manifest(&s.path("c")));
    assert!(a.complete);
    assert_eq!(a.outputs.len(), 3);
    assert_eq!(a.outputs, b.outputs);
    assert_ne!(a.outputs, c.outputs);
}

#[test]
fn eval_writes_one_row_per_size_and_matches_one_step_rollouts() {
    let s = Sandbox::trained("eval");
    s.ok(&["eval", "--config", "tiny.toml", "--checkpoint", "tr/model.ckpt", "--sizes", "4,8,16", "--out", "ev"]);
    let table = s.read("ev/eval.csv");
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "size,tokens,vrmse");
    assert_eq!(lines.len(), 4);
    let fields = s.read("ev/eval_fields.csv");
    for (i, size) in ["4", "8", "16"].iter().enumerate() {
        let out = format!("r{}", size);
        let sched = format!("fixed:{}", size);
        s.ok(&["rollout", "--config", "tiny.toml", "--checkpoint", "tr/model.ckpt", "--schedule", &sched, "--steps", "1", "--out", &out]);
        let roll = s.read(&format!("{}/rollout.csv", out));
        let vrmse_eval = lines[i + 1].split(',').nth(2).unwrap();
        let vrmse_roll = roll.lines().nth(1).unwrap().split(',').nth(2).unwrap();
        assert_eq!(vrmse_eval, vrmse_roll, "size {}", size);
        // per-field rows of this size appear verbatim in both files
        let rf = s.read(&format!("{}/rollout_fields.csv", out));
        let mut rows = rf.lines();
        let header = rows.next().unwrap();
        assert_eq!(header, fields.lines().next().unwrap());
        for r in rows {
            assert!(fields.lines().any(|l| l == r), "{}", r);
        }
    }
}

#[test]
fn rerun_from_manifest_is_byte_identical() {
    let s = Sandbox::trained("replay");
    s.ok(&["rollout", "--config", "tiny.toml", "--checkpoint", "tr/model.ckpt", "--out", "r1"]);
    s.ok(&["rollout", "--config", "r1/manifest.json", "--out", "r2"]);
    s.ok(&["train", "--config", "tr/manifest.json", "--out", "tr2"]);
    for f in ["rollout.csv", "rollout_fields.csv", "spectrum.csv", "spikes.csv"] {
        assert_eq!(s.read(&format!("r1/{}", f)), s.read(&format!("r2/{}", f)), "{}", f);
    }
    for f in ["train_log.csv", "loss_curve.csv"] {
        assert_eq!(s.read(&format!("tr/{}", f)), s.read(&format!("tr2/{}", f)), "{}", f);
    }
    assert_eq!(manifest(&s.path("r1")).config, manifest(&s.path("r2")).config);
}

#[test]
fn spectra_on_a_rollout_directory_reproduces_its_spectrum() {
    let s = Sandbox::trained("spectra");
    s.ok(&["rollout", "--config", "tiny.toml", "--checkpoint", "tr/model.ckpt", "--out", "r"]);
    s.ok(&["spectra", "--config", "tiny.toml", "--out", "sp", "r"]);
    assert_eq!(s.read("r/spectrum.csv"), s.read("sp/spectrum.csv"));
    assert_eq!(s.read("r/spikes.csv"), s.read("sp/spikes.csv"));
    let spec = s.read("sp/spectrum.csv");
    assert_eq!(spec.lines().next().unwrap(), "k,power");
    // radial bins 0..=round(16·√2)
    assert_eq!(spec.lines().count(), 1 + 24);
}

#[test]
fn compare_joins_run_summaries() {
    let s = Sandbox::trained("compare");
    s.ok(&["eval", "--config", "tiny.toml", "--checkpoint", "tr/model.ckpt", "--out", "ev"]);
    s.ok(&["compare", "--config", "tiny.toml", "--out", "cmp", "tr", "ev"]);
    let csv = s.read("cmp/compare.csv");
    assert_eq!(csv.lines().filter(|l| l.starts_with("ev,eval,")).count(), 3);
    assert_eq!(csv.lines().filter(|l| l.starts_with("tr,train,")).count(), 3);
}

#[test]
fn ablation_harnesses_write_reports() {
    let s = Sandbox::trained("ablate");
    s.ok(&["ablate", "--config", "tiny.toml", "--set", "ablate.study=schedule", "--set", "ablate.replicates=2",
        "--checkpoint", "tr/model.ckpt", "--out", "g4"]);
    let g4 = s.read("g4/ablate.csv");
    assert!(g4.lines().any(|l| l.starts_with("schedule,cyclic:0,")));
    assert_eq!(g4.lines().filter(|l| l.starts_with("schedule,random,")).count(), 2 * (4 + 2));
    s.ok(&["ablate", "--config", "tiny.toml", "--set", "ablate.replicates=1", "--out", "g3"]);
    let g3 = s.read("g3/ablate.csv");
    assert_eq!(g3.lines().filter(|l| l.starts_with("omit-size,full,")).count(), 3);
    assert_eq!(g3.lines().filter(|l| l.starts_with("omit-size,omit8,")).count(), 3);
    s.ok(&["ablate", "--config", "tiny.toml", "--set", "ablate.study=base-size", "--set", "ablate.replicates=1",
        "--out", "g2"]);
    let g2 = s.read("g2/ablate.csv");
    assert_eq!(g2.lines().filter(|l| l.starts_with("base-size,base8,")).count(), 3);
}

#[test]
fn exit_codes_distinguish_failure_kinds() {
    let s = Sandbox::trained("exit");
    let code = |args: &[&str]| s.run(args).status.code().unwrap();
    assert_eq!(code(&["eval", "--config", "tiny.toml", "--set", "model.embed_dimm=3", "--out", "x"]), 2);
    assert_eq!(code(&["eval", "--config", "tiny.toml", "--set", "eval.windows=0", "--out", "x"]), 2);
    assert_eq!(code(&["eval", "--config", "tiny.toml", "--schedule", "zigzag", "--out", "x"]), 2);
    assert_eq!(code(&["eval", "--config", "missing.toml", "--out", "x"]), 2);
    assert_eq!(code(&["eval", "--config", "tiny.toml", "--checkpoint", "nope.ckpt", "--out", "io"]), 4);
    // the run started, so its manifest exists but is not marked complete
    assert!(!manifest(&s.path("io")).complete);

    let mut m = SurrogateModel::load(&s.path("tr/model.ckpt")).unwrap();
    m.params.get_mut("head.b").unwrap().data_mut()[0] = f64::NAN;
    m.save(&s.path("nan.ckpt")).unwrap();
    assert_eq!(code(&["eval", "--config", "tiny.toml", "--checkpoint", "nan.ckpt", "--out", "n"]), 3);
}
