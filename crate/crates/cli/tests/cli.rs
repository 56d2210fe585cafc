use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gridhaze::tensor::Tensor;

const SMALL: &str = r#"
seed = 1
holdout_every = 2

[data]
n = 4
height = 20
width = 20

[grid]
scale_channels = [4, 8, 16]
growth_rate = 4

[pretrain]
epochs = 2
batch_size = 2
patch = 16
steps_per_epoch = 2
perceptual_widths = [4, 8, 8]

[finetune]
mode = "finetune_itkt"
epochs = 1
batch_size = 2
patch = 16
steps_per_epoch = 2
perceptual_widths = [4, 8, 8]
"#;

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let s = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        fs::write(s.path("small.toml"), SMALL).unwrap();
        s
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_gridhaze"))
            .args(args)
            .env("GRIDHAZE_OUT", self.path("default-out"))
            .current_dir(self.dir.path())
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

    fn code(&self, args: &[&str]) -> i32 {
        self.run(args).status.code().unwrap()
    }
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn synth_is_reproducible_and_marks_translation() {
    let s = Sandbox::new();
    s.ok(&["synth", "--config", "small.toml", "--out", "a"]);
    s.ok(&["synth", "--config", "small.toml", "--out", "b"]);
    s.ok(&[
        "synth",
        "--config",
        "small.toml",
        "--out",
        "c",
        "--seed",
        "2",
    ]);
    s.ok(&[
        "synth",
        "--config",
        "small.toml",
        "--out",
        "t",
        "--translated",
        "--n",
        "3",
    ]);
    let m = |d: &str| read(&s.path(d).join("manifest.jsonl"));
    assert_eq!(m("a"), m("b"));
    assert_ne!(m("a"), m("c"));
    let t = String::from_utf8(m("t")).unwrap();
    assert_eq!(t.lines().count(), 3);
    assert!(t.lines().all(|l| l.contains("\"translated\"")));
    assert_eq!(fs::read_dir(s.path("a/hazy")).unwrap().count(), 4);
}

#[test]
fn train_finetune_eval_dehaze() {
    let s = Sandbox::new();
    s.ok(&["synth", "--config", "small.toml", "--out", "syn"]);
    s.ok(&[
        "synth",
        "--config",
        "small.toml",
        "--out",
        "tr",
        "--translated",
    ]);
    s.ok(&[
        "train",
        "--config",
        "small.toml",
        "--data",
        "syn",
        "--out",
        "pre",
    ]);
    for f in [
        "epoch-001.ckpt",
        "epoch-002.ckpt",
        "final.ckpt",
        "config.toml",
    ] {
        assert!(s.path("pre").join(f).is_file(), "{f}");
    }
    assert_eq!(
        String::from_utf8(read(&s.path("pre/train_log.jsonl")))
            .unwrap()
            .lines()
            .count(),
        4
    );

    for (dir, extra) in [("kt", None), ("plain", Some("--no-itkt"))] {
        let mut args = vec![
            "finetune",
            "--config",
            "small.toml",
            "--data",
            "tr",
            "--teacher",
            "pre/final.ckpt",
            "--out",
            dir,
        ];
        args.extend(extra);
        s.ok(&args);
    }
    let kt = read(&s.path("kt/final.ckpt"));
    assert_ne!(kt, read(&s.path("plain/final.ckpt")));

    let text = s.ok(&[
        "eval",
        "--ckpt",
        "kt/final.ckpt",
        "--data",
        "tr",
        "--out",
        "ev",
    ]);
    assert!(text.contains("mean PSNR"));
    let report = String::from_utf8(read(&s.path("ev/report.jsonl"))).unwrap();
    assert_eq!(report.lines().count(), 5);
    let rows: Vec<serde_json::Value> = report
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let mean = rows[..4]
        .iter()
        .map(|r| r["psnr"].as_f64().unwrap())
        .sum::<f64>()
        / 4.0;
    assert!((mean - rows[4]["mean_psnr"].as_f64().unwrap()).abs() < 1e-12);

    // Odd sizes come back at their own size, and runs are byte-stable.
    fs::create_dir_all(s.path("in")).unwrap();
    let img = Tensor::from_fn([1, 3, 21, 19], |[_, c, y, x]| {
        ((c + y * x) % 7) as f64 / 7.0
    });
    gridhaze::io::save_rgb(&s.path("in/odd.png"), &img).unwrap();
    s.ok(&["dehaze", "--ckpt", "pre/final.ckpt", "--out", "o1", "in"]);
    s.ok(&[
        "dehaze",
        "--ckpt",
        "pre/final.ckpt",
        "--out",
        "o2",
        "in/odd.png",
    ]);
    let out = gridhaze::io::load_rgb(&s.path("o1/odd.png")).unwrap();
    assert_eq!(out.shape(), [1, 3, 21, 19]);
    assert_eq!(read(&s.path("o1/odd.png")), read(&s.path("o2/odd.png")));
}

#[test]
fn resume_is_bit_exact() {
    let s = Sandbox::new();
    s.ok(&["synth", "--config", "small.toml", "--out", "syn"]);
    s.ok(&[
        "train",
        "--config",
        "small.toml",
        "--data",
        "syn",
        "--out",
        "full",
    ]);
    s.ok(&[
        "train",
        "--config",
        "small.toml",
        "--data",
        "syn",
        "--out",
        "again",
        "--resume",
        "full/epoch-001.ckpt",
    ]);
    assert_eq!(
        read(&s.path("full/final.ckpt")),
        read(&s.path("again/final.ckpt"))
    );
    let full = String::from_utf8(read(&s.path("full/train_log.jsonl"))).unwrap();
    let rest = String::from_utf8(read(&s.path("again/train_log.jsonl"))).unwrap();
    assert_eq!(
        full.lines().skip(2).collect::<Vec<_>>(),
        rest.lines().collect::<Vec<_>>()
    );
}

#[test]
fn learned_inputs_dump_has_sixteen_maps() {
    let s = Sandbox::new();
    s.ok(&[
        "synth",
        "--config",
        "small.toml",
        "--out",
        "syn",
        "--n",
        "1",
    ]);
    // The default grid has 16 pre-processing channels; build one untrained.
    let (model, params) = gridhaze::network::build(Default::default(), 0).unwrap();
    let bundle = gridhaze::training::CheckpointBundle::fresh(
        model.config().clone(),
        Default::default(),
        params,
    );
    gridhaze::training::save_checkpoint(&bundle, &s.path("default.ckpt")).unwrap();
    s.ok(&[
        "dehaze",
        "--ckpt",
        "default.ckpt",
        "--out",
        "o",
        "--dump-learned-inputs",
        "syn/hazy",
    ]);
    assert_eq!(fs::read_dir(s.path("o/00000_learned")).unwrap().count(), 16);
}

#[test]
fn exit_codes() {
    let s = Sandbox::new();
    fs::write(s.path("bad.toml"), "colour = 3\n").unwrap();
    assert_eq!(s.code(&["synth", "--config", "bad.toml", "--out", "x"]), 2);
    assert_eq!(
        s.code(&["synth", "--config", "missing.toml", "--out", "x"]),
        2
    );
    s.ok(&["synth", "--config", "small.toml", "--out", "syn"]);
    assert_eq!(
        s.code(&[
            "finetune",
            "--config",
            "small.toml",
            "--data",
            "syn",
            "--out",
            "f"
        ]),
        2
    );
    assert_eq!(
        s.code(&[
            "train",
            "--config",
            "small.toml",
            "--data",
            "nowhere",
            "--out",
            "t"
        ]),
        3
    );
    fs::write(s.path("file"), "").unwrap();
    assert_eq!(
        s.code(&["synth", "--config", "small.toml", "--out", "file/sub"]),
        4
    );
    fs::create_dir_all(s.path("junk")).unwrap();
    fs::write(s.path("junk/a.png"), "not a png").unwrap();
    s.ok(&[
        "train",
        "--config",
        "small.toml",
        "--data",
        "syn",
        "--out",
        "pre",
    ]);
    assert_eq!(
        s.code(&["dehaze", "--ckpt", "pre/final.ckpt", "--out", "o", "junk"]),
        3
    );
    assert_eq!(s.code(&["train", "--variant", "nope", "--data", "syn"]), 2);
}

#[test]
fn default_output_root_comes_from_the_environment() {
    let s = Sandbox::new();
    s.ok(&["synth", "--config", "small.toml"]);
    assert!(s.path("default-out/synth/manifest.jsonl").is_file());
}

#[test]
fn ablate_variants_table() {
    let s = Sandbox::new();
    let text = s.ok(&[
        "ablate",
        "--config",
        "small.toml",
        "--out",
        "ab",
        "--variant",
        "full",
        "--variant",
        "no_scab",
    ]);
    assert!(text.contains("| full |") && text.contains("| no_scab |"));
    let table: serde_json::Value =
        serde_json::from_slice(&read(&s.path("ab/variants.json"))).unwrap();
    let rows = table["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    let count = |i: usize| rows[i]["param_count"].as_u64().unwrap();
    // Both attention stages at each of the nine fusion junctions.
    let grid = gridhaze::network::GridConfig {
        scale_channels: vec![4, 8, 16],
        growth_rate: 4,
        ..Default::default()
    };
    let full = gridhaze::network::build(grid.clone(), 0)
        .unwrap()
        .0
        .param_count();
    let plain = gridhaze::network::build(grid.variant(gridhaze::network::VariantSpec::NoScab), 0)
        .unwrap()
        .0
        .param_count();
    assert_eq!((count(0) - count(1)) as usize, full - plain);
    assert_eq!(rows[0]["steps"], rows[1]["steps"]);
}
