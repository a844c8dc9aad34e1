use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use combiverse::config::{Backend, ExternalCommand, ReconstructorMock, RunConfig, ScoreBackend};
use combiverse::examples;
use combiverse::manifest::{Manifest, Stage};
use combiverse::stages::{read_ablation_report, read_placements};
use combiverse_core::mesh::obj::read_obj;
use tempfile::TempDir;

const EXE: &str = env!("CARGO_BIN_EXE_combiverse");

fn cli(args: &[&str]) -> Output {
    Command::new(EXE)
        .args(args)
        .env_remove("COMBIVERSE_RUN_DIR")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[track_caller]
fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\n{}{}",
        o.status.code(),
        stdout(o),
        stderr(o)
    );
}

/// Example written to `<tmp>/scene`, runs going to `<tmp>/run`.
struct Fixture {
    tmp: TempDir,
}

impl Fixture {
    fn new(name: &str) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        examples::by_name(name)
            .unwrap()
            .write(&tmp.path().join("scene"))
            .unwrap();
        Self { tmp }
    }

    fn config(&self) -> PathBuf {
        self.tmp.path().join("scene").join("config.toml")
    }

    fn run_dir(&self) -> PathBuf {
        self.tmp.path().join("run")
    }

    fn edit(&self, f: impl FnOnce(&mut RunConfig)) {
        let mut c = RunConfig::load(&self.config()).unwrap();
        f(&mut c);
        std::fs::write(self.config(), c.to_toml().unwrap()).unwrap();
    }

    fn run(&self, cmd: &str, extra: &[&str]) -> Output {
        let config = self.config();
        let run_dir = self.run_dir();
        let mut args = vec![
            cmd,
            "--config",
            config.to_str().unwrap(),
            "--run-dir",
            run_dir.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        cli(&args)
    }

    fn manifest(&self) -> Manifest {
        Manifest::load(&self.run_dir()).unwrap().unwrap()
    }
}

fn digests(run_dir: &Path) -> BTreeMap<String, String> {
    Manifest::load(run_dir).unwrap().unwrap().all_digests()
}

#[test]
fn default_config_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("c.toml");
    ok(&cli(&["default-config", "--output", path.to_str().unwrap()]));
    let mut loaded = RunConfig::load(&path).unwrap();
    loaded.scene = "scene.json".into();
    assert_eq!(loaded, RunConfig::default());
    let printed = cli(&["default-config"]);
    ok(&printed);
    assert_eq!(stdout(&printed), std::fs::read_to_string(&path).unwrap());
}

#[test]
fn bundled_assets_match_generators() {
    let assets = Path::new(env!("CARGO_MANIFEST_DIR")).join("assets");
    for name in examples::NAMES {
        let tmp = tempfile::tempdir().unwrap();
        let written = examples::by_name(name).unwrap().write(tmp.path()).unwrap();
        for p in written {
            let file = p.file_name().unwrap();
            let bundled = assets.join(name.replace('-', "_")).join(file);
            assert_eq!(
                std::fs::read(&p).unwrap(),
                std::fs::read(&bundled).unwrap_or_default(),
                "{} is stale; regenerate with `combiverse example {name}`",
                bundled.display()
            );
        }
    }
}

#[test]
fn decompose_writes_object_images_and_skips_when_current() {
    let fx = Fixture::new("two-cubes");
    ok(&fx.run("decompose", &[]));
    for i in 0..2 {
        for n in ["mask", "cutout", "noised", "inpaint_mask", "completed"] {
            assert!(fx.run_dir().join(format!("objects/{i}/{n}.png")).is_file(), "{i}/{n}");
        }
    }
    assert!(fx.manifest().is_complete(Stage::Decompose));

    let again = fx.run("decompose", &["-v"]);
    ok(&again);
    assert!(stderr(&again).contains("up to date"), "{}", stderr(&again));

    let forced = fx.run("decompose", &["-v", "--force"]);
    ok(&forced);
    assert!(!stderr(&forced).contains("up to date"));
}

#[test]
fn corrupted_artifact_triggers_rerun() {
    let fx = Fixture::new("two-cubes");
    ok(&fx.run("decompose", &[]));
    let target = fx.run_dir().join("objects/1/noised.png");
    let original = std::fs::read(&target).unwrap();
    std::fs::write(&target, b"not a png").unwrap();
    let o = fx.run("decompose", &[]);
    ok(&o);
    assert!(
        stderr(&o).contains("does not match its recorded digest"),
        "{}",
        stderr(&o)
    );
    assert_eq!(std::fs::read(&target).unwrap(), original);
}

#[test]
fn reconstruct_respects_face_budget() {
    let fx = Fixture::new("two-cubes");
    fx.edit(|c| {
        c.backends.reconstructor = Backend::Mock(ReconstructorMock::Icosphere { subdivisions: 5 });
        c.decompose.face_budget = 1000;
    });
    let early = fx.run("reconstruct", &[]);
    assert_eq!(early.status.code(), Some(2), "{}", stderr(&early));
    ok(&fx.run("decompose", &[]));
    ok(&fx.run("reconstruct", &[]));
    for i in 0..2 {
        let mesh = read_obj::<f64>(&fx.run_dir().join(format!("objects/{i}/mesh.obj"))).unwrap();
        assert!(
            mesh.faces.len() <= 1000 && mesh.faces.len() > 500,
            "{}",
            mesh.faces.len()
        );
    }
    assert!(fx.run_dir().join("depth.bin").is_file());
}

#[test]
fn run_all_resumes_after_decompose_and_exports() {
    let fx = Fixture::new("two-cubes");
    ok(&fx.run("decompose", &[]));
    let o = fx.run("run-all", &["-v"]);
    ok(&o);
    let err = stderr(&o);
    assert!(err.contains("decompose: up to date"), "{err}");
    assert!(err.contains("reconstruct: running"), "{err}");
    assert!(stdout(&o).contains("object_1: scale"));
    for f in [
        "metrics.jsonl",
        "placements.json",
        "render.png",
        "composition.gltf",
        "composition.obj",
    ] {
        assert!(fx.run_dir().join("combine").join(f).is_file(), "{f}");
    }
    let report = read_placements(&fx.run_dir()).unwrap();
    assert_eq!(report.iterations, 200);
    let lines = std::fs::read_to_string(fx.run_dir().join("combine/metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 200);
    assert!(!fx.run_dir().join(".lock").exists());
}

#[test]
fn toy_ssds_lands_on_the_box_from_both_sides() {
    for name in ["toy-left", "toy-right"] {
        let fx = Fixture::new(name);
        ok(&fx.run("run-all", &[]));
        let e = read_placements(&fx.run_dir()).unwrap().relation_error_px.unwrap();
        // 5% of the 64-pixel width.
        assert!(e < 3.2, "{name}: {e}");
    }
}

#[test]
fn ablate_reports_requested_modes() {
    let fx = Fixture::new("two-cubes");
    let early = fx.run("ablate", &[]);
    assert_eq!(early.status.code(), Some(2));
    ok(&fx.run("run-all", &[]));
    let o = fx.run("ablate", &["--modes", "base,depth,sds,ssds-full"]);
    ok(&o);
    let rows = read_ablation_report(&fx.run_dir()).unwrap();
    let names: Vec<_> = rows.iter().map(|r| r.mode.name()).collect();
    assert_eq!(names, ["base", "depth", "sds", "ssds-full"]);
    assert_eq!(stdout(&o).lines().count(), 5);
    for n in &names {
        assert!(fx.run_dir().join(format!("ablation/{n}.png")).is_file());
    }
    assert!(fx.run_dir().join("ablation/contact_sheet.png").is_file());
}

#[test]
fn seeds_control_digests() {
    let a = Fixture::new("two-cubes");
    let b = Fixture::new("two-cubes");
    ok(&a.run("run-all", &[]));
    ok(&b.run("run-all", &[]));
    assert_eq!(digests(&a.run_dir()), digests(&b.run_dir()));

    let before = digests(&a.run_dir());
    ok(&a.run("decompose", &["--seed", "9"]));
    let after = digests(&a.run_dir());
    for i in 0..2 {
        let k = format!("objects/{i}/noised.png");
        assert_ne!(before[&k], after[&k], "{k}");
        let k = format!("objects/{i}/mask.png");
        assert_eq!(before[&k], after[&k], "{k}");
    }
}

#[test]
fn exit_codes() {
    let fx = Fixture::new("two-cubes");
    let text = std::fs::read_to_string(fx.config()).unwrap();
    std::fs::write(fx.config(), format!("bogus_field = 1\n{text}")).unwrap();
    let o = fx.run("decompose", &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus_field"), "{}", stderr(&o));
    std::fs::write(fx.config(), &text).unwrap();

    fx.edit(|c| {
        c.backends.segmenter = Backend::External(ExternalCommand {
            command: vec!["false".into()],
        });
        c.decompose.retry.retries = 0;
    });
    let o = fx.run("decompose", &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(fx.manifest().stage(Stage::Decompose).unwrap().error.is_some());
    std::fs::write(fx.config(), &text).unwrap();

    fx.edit(|c| c.combine.optimizer.lr_default = 1e3);
    let o = fx.run("run-all", &[]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    std::fs::write(fx.config(), &text).unwrap();

    std::fs::write(fx.run_dir().join(".lock"), "1").unwrap();
    let o = fx.run("decompose", &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("in use"), "{}", stderr(&o));
}

#[test]
fn run_dir_falls_back_to_environment() {
    let fx = Fixture::new("two-cubes");
    let config = fx.config();
    let o = cli(&["decompose", "--config", config.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("run_dir"));

    let o = Command::new(EXE)
        .args(["decompose", "--config", config.to_str().unwrap()])
        .env("COMBIVERSE_RUN_DIR", fx.run_dir())
        .output()
        .unwrap();
    ok(&o);
    assert!(fx.manifest().is_complete(Stage::Decompose));
}

#[test]
fn external_adapter_matches_in_process_mocks() {
    let local = Fixture::new("toy-left");
    let remote = Fixture::new("toy-left");
    let adapter = |role: &str, model: &str| ExternalCommand {
        command: vec![EXE.into(), "adapter".into(), role.into(), model.into()],
    };
    remote.edit(|c| {
        c.backends.segmenter = Backend::External(adapter("segmenter", "key"));
        c.backends.inpainter = Backend::External(adapter("inpainter", "identity"));
        c.backends.reconstructor = Backend::External(adapter("reconstructor", "billboard"));
    });
    for fx in [&local, &remote] {
        ok(&fx.run("decompose", &[]));
        ok(&fx.run("reconstruct", &[]));
    }
    assert_eq!(digests(&local.run_dir()), digests(&remote.run_dir()));
}

#[test]
fn external_score_provider_runs() {
    let fx = Fixture::new("toy-left");
    fx.edit(|c| {
        c.backends.score = ScoreBackend::External {
            command: vec![EXE.into(), "adapter".into(), "score".into(), "null".into()],
            schedule: Default::default(),
        };
        c.combine.optimizer.iterations = 3;
    });
    ok(&fx.run("run-all", &[]));
    assert_eq!(read_placements(&fx.run_dir()).unwrap().iterations, 3);
}

#[test]
fn combine_resumes_from_checkpoint() {
    let fx = Fixture::new("two-cubes");
    ok(&fx.run("run-all", &[]));
    let full = read_placements(&fx.run_dir()).unwrap();
    let metrics = std::fs::read(fx.run_dir().join("combine/metrics.jsonl")).unwrap();

    // Simulate an interruption after the second checkpoint.
    let ckpts = fx.run_dir().join("combine/checkpoints");
    for k in [150, 200] {
        let p = ckpts.join(format!("ckpt_{k}"));
        if p.exists() {
            std::fs::remove_dir_all(p).unwrap();
        }
    }
    let mut m = fx.manifest();
    m.stages.get_mut(&Stage::Combine).unwrap().complete = false;
    m.save(&fx.run_dir()).unwrap();

    let o = fx.run("combine", &["-v"]);
    ok(&o);
    assert!(stderr(&o).contains("resuming from"), "{}", stderr(&o));
    let resumed = read_placements(&fx.run_dir()).unwrap();
    assert_eq!(resumed.final_params, full.final_params);
    assert_eq!(
        std::fs::read(fx.run_dir().join("combine/metrics.jsonl")).unwrap(),
        metrics
    );
}
