mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use based::autodiff::Checkpoint;
use based::cli::INCOMPLETE;
use based::eval::{frame_stem, RENDER_DIR, REPORT_FILE, VARIANTS};
use based::geometry::PoseParams;
use based::training::{read_log, POSE_GROUP};
use common::*;

fn based(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_based")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = based(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    config: PathBuf,
}

/// An 8-frame deformable dataset and a tiny training configuration on disk.
fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let spec = root.join("scene.toml");
    fs::write(&spec, toml::to_string(&tiny_spec(DEFORMABLE, 8)).unwrap()).unwrap();
    let config = root.join("train.toml");
    fs::write(&config, tiny_config().to_toml()).unwrap();
    let data = root.join("data");
    ok(&["synth", "--config", p(&spec), "--out", p(&data), "--seed", "3"]);
    Fixture { _dir: dir, root, data, config }
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn train(f: &Fixture, out: &Path, extra: &[&str]) -> String {
    let mut args = vec!["train", "--dataset", p(&f.data), "--config", p(&f.config), "--out", p(out), "--seed", "1"];
    args.extend_from_slice(extra);
    ok(&args)
}

#[test]
fn synth_is_byte_reproducible() {
    let f = fixture();
    let again = f.root.join("again");
    let spec = f.root.join("scene.toml");
    ok(&["synth", "--config", p(&spec), "--out", p(&again), "--seed", "3"]);
    let (a, b) = (tree(&f.data), tree(&again));
    assert!(!a.is_empty());
    assert_eq!(a, b);
    assert!(!again.join(INCOMPLETE).exists());
}

#[test]
fn synth_warns_about_static_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("rigid.toml");
    fs::write(&spec, toml::to_string(&tiny_spec(RIGID, 4)).unwrap()).unwrap();
    let out = based(&["synth", "--config", p(&spec), "--out", p(&dir.path().join("d"))]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("static scene"));
}

#[test]
fn invalid_inputs_exit_with_one_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bad.toml");
    let mut s = tiny_spec(DEFORMABLE, 4);
    s.near = 9.0;
    fs::write(&spec, toml::to_string(&s).unwrap()).unwrap();
    let out_dir = dir.path().join("never");
    let out = based(&["synth", "--config", p(&spec), "--out", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out_dir.exists());

    let out = based(&["train", "--dataset", p(&dir.path().join("missing")), "--out", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out_dir.exists());
    assert_eq!(based(&["train"]).status.code(), Some(1));
}

#[test]
fn train_render_and_eval_agree() {
    let f = fixture();
    let run = f.root.join("run");
    let stdout = train(&f, &run, &[]);
    assert!(stdout.contains("iterations=6"), "{stdout}");
    assert!(run.join("checkpoint.bin").exists());
    assert!(!run.join(INCOMPLETE).exists());
    let ckpt = run.join("checkpoint.bin");

    let eval = f.root.join("eval");
    let report = ok(&["eval", "--dataset", p(&f.data), "--checkpoint", p(&ckpt), "--split", "all", "--out", p(&eval)]);
    assert!(report.contains("[mean]") && report.contains("psnr="));
    let text = fs::read_to_string(eval.join(REPORT_FILE)).unwrap();
    assert!(text.contains("pose=refined") && text.contains("pose=learned"));
    assert!(text.contains("abs_rel="));

    let eval2 = f.root.join("eval2");
    ok(&["eval", "--dataset", p(&f.data), "--checkpoint", p(&ckpt), "--split", "all", "--out", p(&eval2)]);
    assert_eq!(tree(&eval), tree(&eval2));

    // Frame 1 is held out and frame 2 is a training frame.
    for frame in [1usize, 2] {
        let out = f.root.join(format!("render{frame}"));
        ok(&["render", "--dataset", p(&f.data), "--checkpoint", p(&ckpt), "--frame", &frame.to_string(), "--out", p(&out)]);
        for ext in ["ppm", "bdep"] {
            let name = format!("{}.{ext}", frame_stem(frame));
            assert_eq!(
                fs::read(out.join(&name)).unwrap(),
                fs::read(eval.join(RENDER_DIR).join(&name)).unwrap(),
                "{name}"
            );
        }
    }

    let view = f.root.join("view");
    let pose = "1 0 0 0  0 1 0 0  0 0 1 0";
    ok(&["render", "--dataset", p(&f.data), "--checkpoint", p(&ckpt), "--pose", pose, "--time", "0", "--out", p(&view)]);
    assert!(view.join("view.ppm").exists() && view.join("view.bdep").exists());
    let bad = based(&["render", "--dataset", p(&f.data), "--checkpoint", p(&ckpt), "--pose", "1 0 0", "--time", "0", "--out", p(&f.root.join("x"))]);
    assert_eq!(bad.status.code(), Some(1));
    assert_eq!(based(&["render", "--dataset", p(&f.data), "--checkpoint", p(&ckpt), "--pose", pose, "--out", p(&view)]).status.code(), Some(1));
}

#[test]
fn zero_joint_iterations_keep_identity_poses() {
    let f = fixture();
    let run = f.root.join("run");
    train(&f, &run, &["--override", "schedule.pose_joint_iters=0"]);
    let ckpt = Checkpoint::load(&run.join("checkpoint.bin")).unwrap();
    let poses = &ckpt.group(POSE_GROUP).unwrap().tensors[0];
    assert_eq!(poses.data(), PoseParams::identity(8).values.data());
}

#[test]
fn resume_continues_the_iteration_counter() {
    let f = fixture();
    let (full, part) = (f.root.join("full"), f.root.join("part"));
    train(&f, &full, &[]);
    train(&f, &part, &["--override", "schedule.total_iters=4"]);
    assert_eq!(Checkpoint::load(&part.join("checkpoint.bin")).unwrap().step, 4);
    let resume = ["train", "--dataset", p(&f.data), "--out", p(&part), "--resume"];
    assert!(ok(&resume).contains("nothing to do"));
    let mut longer = resume.to_vec();
    longer.extend(["--override", "schedule.total_iters=6"]);
    assert!(ok(&longer).contains("iterations=6"));
    for file in ["log.tsv", "checkpoint.bin"] {
        assert_eq!(fs::read(part.join(file)).unwrap(), fs::read(full.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn ablation_writes_one_run_per_variant() {
    let f = fixture();
    let out = f.root.join("ablate");
    let table = ok(&["ablate", "--dataset", p(&f.data), "--config", p(&f.config), "--out", p(&out)]);
    assert_eq!(table.lines().count(), 1 + VARIANTS.len());
    for v in VARIANTS {
        assert!(table.contains(v.label));
        let dir = out.join(v.tag);
        assert!(dir.join(REPORT_FILE).exists() && dir.join("checkpoint.bin").exists());
        let log = read_log(&dir.join("log.tsv")).unwrap();
        assert_eq!(log.len(), 6);
        if !v.correspondence {
            assert!(log.iter().all(|r| r.l_corr == 0.0));
        }
        if !v.depth {
            assert!(log.iter().all(|r| r.l_depth == 0.0));
        }
        if v.correspondence && v.depth {
            assert!(log.iter().any(|r| r.l_corr > 0.0) && log.iter().any(|r| r.l_depth > 0.0));
        }
    }
    assert!(!out.join(INCOMPLETE).exists());
}
