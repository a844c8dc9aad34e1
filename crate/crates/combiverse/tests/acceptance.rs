//! End-to-end acceptance checks. Each writes one PASS or FAIL line to stderr
//! with its wall time against the time limit.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use combiverse::stages::read_placements;
use combiverse::{Manifest, RunConfig};
use combiverse_core::camera::{CameraSpec, Projection, RigidPose};
use combiverse_core::combiner::{ablation_matrix, combine, AblationMode, CombineConfig, CombineIo, ParamMask};
use combiverse_core::decomposition::{build_inpaint_mask, DecomposeSettings};
use combiverse_core::guidance::conformance::{
    provider_conformance_check, DriftingProvider, EchoProvider, RenormalizingProvider,
};
use combiverse_core::guidance::{
    reference_loss, reweight_attention, sds_gradient, ssds_gradient, DistillSetup, GuidanceMode, TimestepSampler,
    TokenScaling, WeightFn,
};
use combiverse_core::mesh::gltf::read_gltf;
use combiverse_core::mesh::obj::read_obj;
use combiverse_core::mesh::{TriangleMesh, DEFAULT_FACE_BUDGET};
use combiverse_core::raster::Mask;
use combiverse_core::render::{bake, render, render_backward, ComposedScene, RenderGrad, RenderOutput, RenderSettings};
use combiverse_core::scene::{ObjectSpec, PlacementParams};
use combiverse_core::scenes::{
    cube_pair, squirrel_on_box, ToyScene, ToyStart, TOY_CAPTION, TOY_SIZE, TOY_SPATIAL_TOKENS,
};
use combiverse_core::spatial_init::{average_object_depth, init_scale, init_translation, DepthMap};
use combiverse_core::Error;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: usize = 100;

fn random_box(r: &mut ChaCha8Rng, w: u32, h: u32) -> ObjectSpec {
    let x0 = r.random_range(0..w);
    let y0 = r.random_range(0..h);
    ObjectSpec::new(x0, y0, r.random_range(x0 + 1..=w), r.random_range(y0 + 1..=h)).unwrap()
}

fn random_bits(r: &mut ChaCha8Rng, w: u32, h: u32, p: f64) -> Vec<Vec<bool>> {
    (0..h).map(|_| (0..w).map(|_| r.random_bool(p)).collect()).collect()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * b.abs().max(1.0)
}

fn oracles() {
    let mut r = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..INSTANCES {
        let (w, h) = (r.random_range(1..600u32), r.random_range(1..600u32));
        let b = random_box(&mut r, w, h);
        let (wb, hb) = ((b.x_max - b.x_min) as f64, (b.y_max - b.y_min) as f64);
        let s: f64 = init_scale(&b, (w, h)).unwrap();
        assert!(close(s, (wb / w as f64).max(hb / h as f64)), "init_scale {b:?}");

        let (d, k) = (r.random_range(0.1..20.0), r.random_range(1e-3..2.0));
        let cx = (b.x_min + b.x_max) as f64 / 2.0;
        let cy = (b.y_min + b.y_max) as f64 / 2.0;
        let t = init_translation(&b, (w, h), d, k).unwrap();
        let want = [(cx - w as f64 / 2.0) * k, (h as f64 / 2.0 - cy) * k, d];
        assert!((0..3).all(|i| close(t[i], want[i])), "init_translation {b:?}");
    }

    let mut done = 0;
    while done < INSTANCES {
        let (w, h) = (r.random_range(1..30u32), r.random_range(1..30u32));
        let values = Array2::from_shape_fn((h as usize, w as usize), |_| r.random_range(0.05..10.0));
        let bits = random_bits(&mut r, w, h, 0.4);
        let picked: Vec<f64> = values
            .indexed_iter()
            .filter(|((y, x), _)| bits[*y][*x])
            .map(|(_, &v)| v)
            .collect();
        if picked.is_empty() {
            continue;
        }
        let mask = Mask::from_fn(w, h, |x, y| bits[y as usize][x as usize]);
        let got: f64 = average_object_depth(&DepthMap::new(values).unwrap(), &mask).unwrap();
        assert!(
            close(got, picked.iter().sum::<f64>() / picked.len() as f64),
            "average_object_depth"
        );
        done += 1;
    }

    for _ in 0..INSTANCES {
        let (w, h) = (r.random_range(1..24u32), r.random_range(1..24u32));
        let b = random_box(&mut r, w, h);
        let bits = random_bits(&mut r, w, h, 0.5);
        let m = build_inpaint_mask(&Mask::from_fn(w, h, |x, y| bits[y as usize][x as usize]), &b).unwrap();
        for y in 0..h {
            for x in 0..w {
                let inside = (b.x_min..b.x_max).contains(&x) && (b.y_min..b.y_max).contains(&y);
                assert_eq!(
                    m.get(x, y),
                    inside && !bits[y as usize][x as usize],
                    "build_inpaint_mask ({x}, {y})"
                );
            }
        }
    }

    for _ in 0..INSTANCES {
        let (nq, nk) = (r.random_range(1..16), r.random_range(1..16));
        let a: Array2<f64> = Array2::from_shape_fn((nq, nk), |_| r.random_range(0.0..1.0));
        let tokens: Vec<usize> = (0..nk).filter(|_| r.random_bool(0.3)).collect();
        let c = r.random_range(0.5..40.0);
        let out = reweight_attention(a.view(), &TokenScaling::new(tokens.clone(), c).unwrap()).unwrap();
        for ((i, j), &v) in out.indexed_iter() {
            let want = if tokens.contains(&j) { a[[i, j]] * c } else { a[[i, j]] };
            assert!(close(v, want), "reweight_attention");
        }
    }

    for _ in 0..INSTANCES {
        let (h, w) = (r.random_range(1..20), r.random_range(1..20));
        let mut out = || RenderOutput {
            rgb: Array3::from_shape_fn((3, h, w), |_| r.random_range(0.0..1.0)),
            alpha: Array2::from_shape_fn((h, w), |_| r.random_range(0.0..1.0)),
            depth: Array2::zeros((h, w)),
        };
        let (a, b) = (out(), out());
        let (lr, la) = (r.random_range(0.0..2000.0), r.random_range(0.0..2000.0));
        let rgb: f64 = a.rgb.iter().zip(&b.rgb).map(|(x, y): (&f64, &f64)| (x - y).abs()).sum();
        let alpha: f64 = a
            .alpha
            .iter()
            .zip(&b.alpha)
            .map(|(x, y): (&f64, &f64)| (x - y).abs())
            .sum();
        let want = lr * rgb / (3 * h * w) as f64 + la * alpha / (h * w) as f64;
        assert!(
            close(reference_loss(&a, &b.rgb, &b.alpha, lr, la).unwrap().value, want),
            "reference_loss"
        );
    }
}

fn renderer_gradients() {
    let camera = CameraSpec {
        pose: RigidPose::identity(),
        projection: Projection::Pinhole {
            focal: 64.0,
            cx: 32.0,
            cy: 32.0,
        },
        width: 64,
        height: 64,
    };
    let meshes = [
        TriangleMesh::unit_cube([0.9, 0.3, 0.2]),
        TriangleMesh::unit_quad([0.1, 0.4, 0.8]),
    ];
    let p0 = vec![
        PlacementParams {
            scale: 1.0,
            rotation: [0.3, 0.5, 0.2],
            translation: [-0.5, 0.2, 4.0],
        },
        PlacementParams {
            scale: 0.9,
            rotation: [-0.2, 0.1, 0.4],
            translation: [0.35, -0.2, 2.6],
        },
    ];
    // Mean color plus mean coverage, and mean depth.
    let n = 64.0 * 64.0;
    let w_rgb = Array3::from_elem((3, 64, 64), 1.0 / (3.0 * n));
    let w_alpha = Array2::from_elem((64, 64), 1.0 / n);
    let w_depth = Array2::from_elem((64, 64), 1.0 / n);

    let settings = RenderSettings::default();
    let scene = ComposedScene::new(meshes.iter().zip(p0.iter().copied())).unwrap();
    const EPS: f64 = 1e-3;
    for use_depth in [false, true] {
        let up = if use_depth {
            RenderGrad {
                depth: Some(&w_depth),
                ..Default::default()
            }
        } else {
            RenderGrad {
                rgb: Some(&w_rgb),
                alpha: Some(&w_alpha),
                ..Default::default()
            }
        };
        let grads = render_backward(&scene, &camera, &settings, &up).unwrap();
        let loss = |p: &[PlacementParams<f64>]| {
            let o = render(&scene.with_params(p).unwrap(), &camera, &settings).unwrap();
            if use_depth {
                (&o.depth * &w_depth).sum()
            } else {
                (&o.rgb * &w_rgb).sum() + (&o.alpha * &w_alpha).sum()
            }
        };
        for obj in 0..2 {
            for k in 0..7 {
                let shifted = |d: f64| {
                    let mut p = p0.clone();
                    let mut a = p[obj].to_array();
                    a[k] += d;
                    p[obj] = PlacementParams::from_array(a);
                    loss(&p)
                };
                let fd = (shifted(EPS) - shifted(-EPS)) / (2.0 * EPS);
                let an = grads[obj][k];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
                let what = if use_depth { "depth" } else { "color" };
                assert!(
                    rel <= 1e-2,
                    "{what} object {obj} component {k}: analytic {an:e}, difference {fd:e}"
                );
            }
        }
    }
}

fn distillation_contracts() {
    let scaling = |c: f64| TokenScaling::new(TOY_SPATIAL_TOKENS, c).unwrap();
    let settings = RenderSettings::default();
    let weighting = WeightFn::default();
    let toy = squirrel_on_box(ToyStart::Left);
    let scene = ComposedScene::new(toy.meshes.iter().zip(toy.init.iter().copied())).unwrap();

    let echo = EchoProvider::default();
    let sampler = TimestepSampler::new(800, 900, 1).unwrap();
    let setup = DistillSetup {
        provider: &echo,
        prompt: TOY_CAPTION,
        sampler: &sampler,
        weighting: &weighting,
        render: &settings,
    };
    for it in 0..5 {
        let g = sds_gradient(&scene, &toy.camera, &setup, it, 0).unwrap();
        assert!(
            g.params.iter().flatten().all(|&v| v == 0.0),
            "zero residual, nonzero SDS gradient"
        );
        let g = ssds_gradient(&scene, &toy.camera, &setup, &scaling(25.0), it, 0).unwrap();
        assert!(
            g.params.iter().flatten().all(|&v| v == 0.0),
            "zero residual, nonzero SSDS gradient"
        );
    }

    let provider = toy.provider(4).unwrap();
    let sampler = TimestepSampler::new(20, 980, 4).unwrap();
    let setup = DistillSetup {
        provider: &provider,
        prompt: TOY_CAPTION,
        sampler: &sampler,
        weighting: &weighting,
        render: &settings,
    };
    for it in 0..10 {
        let a = sds_gradient(&scene, &toy.camera, &setup, it, 1).unwrap();
        let b = ssds_gradient(&scene, &toy.camera, &setup, &scaling(1.0), it, 1).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        for (x, y) in a.params.iter().flatten().zip(b.params.iter().flatten()) {
            assert_eq!(x.to_bits(), y.to_bits(), "c = 1 differs from SDS");
        }
    }

    let image = toy.reference_image().unwrap();
    let s = scaling(25.0);
    assert!(provider_conformance_check(&provider, TOY_CAPTION, &image, &s, 850)
        .unwrap()
        .passed());
    let renorm = RenormalizingProvider(toy.provider(0).unwrap());
    assert!(matches!(
        provider_conformance_check(&renorm, TOY_CAPTION, &image, &s, 850),
        Err(Error::Conformance { .. })
    ));
    let drift = DriftingProvider {
        inner: toy.provider(0).unwrap(),
        drift: 1e-5,
    };
    assert!(matches!(
        provider_conformance_check(&drift, TOY_CAPTION, &image, &s, 850),
        Err(Error::Conformance { .. })
    ));
}

fn toy_relation() {
    let width = TOY_SIZE as f64;
    for start in ToyStart::BOTH {
        let toy = squirrel_on_box(start);
        let provider = toy.provider(0).unwrap();
        let problem = toy.problem(&provider).unwrap();
        let config = toy.config(GuidanceMode::Ssds, 0);
        assert_eq!(config.guidance.multiplier, 25.0);
        assert_eq!(
            (config.guidance.timesteps.low, config.guidance.timesteps.high),
            (800, 900)
        );
        let out = combine(&problem, &toy.init, &config, &CombineIo::default()).unwrap();
        let err = ToyScene::relation_error_px(&out.params);
        assert!(err < 0.05 * width, "{start:?}: SSDS ends {err:.2} px from the relation");

        let sds = combine(
            &problem,
            &toy.init,
            &toy.config(GuidanceMode::Sds, 0),
            &CombineIo::default(),
        )
        .unwrap();
        let (a, b) = (
            ToyScene::squirrel_center_px(&sds.params),
            ToyScene::squirrel_center_px(&toy.init),
        );
        let moved = (a.0 - b.0).hypot(a.1 - b.1);
        assert!(moved < 0.01 * width, "{start:?}: SDS moved {moved:.3} px");
    }
}

fn round_trip() {
    let pair = cube_pair(64);
    let mut config = CombineConfig::default();
    config.guidance.mode = GuidanceMode::Base;
    config.optimizer.trainable = ParamMask {
        scale: false,
        rotation: [false; 3],
        translation: [true; 3],
    };
    assert!(config.optimizer.iterations <= 500);
    let problem = pair.problem(&config.render).unwrap();
    let before = pair.meshes.clone();
    let out = combine(&problem, &pair.perturbed(0.1), &config, &CombineIo::default()).unwrap();
    let err = pair.translation_error(&out.params);
    assert!(err < 0.02, "translation error {err:.4} of the extent");
    assert_eq!(before, pair.meshes, "geometry changed");
}

fn noise_ablation() {
    let modes = [AblationMode::SsdsFull, AblationMode::SsdsUniform, AblationMode::SsdsLow];
    let seeds = 5u64;
    for start in ToyStart::BOTH {
        let toy = squirrel_on_box(start);
        let mut wins = 0;
        for seed in 0..seeds {
            let provider = toy.provider(seed).unwrap();
            let problem = toy.problem(&provider).unwrap();
            let rows = ablation_matrix(&problem, &toy.init, &toy.config(GuidanceMode::Ssds, seed), &modes).unwrap();
            let e: Vec<f64> = rows
                .iter()
                .map(|r| ToyScene::relation_error_px(&r.outcome.params))
                .collect();
            wins += usize::from(e[0] < e[1] && e[0] < e[2]);
        }
        assert!(
            2 * wins as u64 > seeds,
            "{start:?}: full range best in {wins} of {seeds} seeds"
        );
    }
}

fn run_all_twice() {
    let assets = Path::new(env!("CARGO_MANIFEST_DIR")).join("assets").join("two_cubes");
    let config = assets.join("config.toml");
    let tmp = tempfile::tempdir().unwrap();
    let mut digests = Vec::new();
    for name in ["a", "b"] {
        let run_dir = tmp.path().join(name);
        let o = Command::new(env!("CARGO_BIN_EXE_combiverse"))
            .args(["run-all", "--config"])
            .arg(&config)
            .arg("--run-dir")
            .arg(&run_dir)
            .output()
            .unwrap();
        assert!(
            o.status.success(),
            "run-all exited {:?}: {}",
            o.status.code(),
            String::from_utf8_lossy(&o.stderr)
        );

        let report = read_placements(&run_dir).unwrap();
        let scene = read_gltf::<f64>(&run_dir.join("combine").join("composition.gltf")).unwrap();
        assert_eq!(scene.len(), report.final_params.len());
        for (i, ((_, got), params)) in scene.iter().zip(&report.final_params).enumerate() {
            let mesh = read_obj::<f64>(&run_dir.join(format!("objects/{i}/mesh.obj"))).unwrap();
            let want = bake(&mesh, params).unwrap();
            assert_eq!(got.faces, want.faces);
            for (p, q) in got.vertices.iter().zip(&want.vertices) {
                assert!(
                    (0..3).all(|k| (p[k] - q[k]).abs() <= 1e-6),
                    "object {i}: {p:?} vs {q:?}"
                );
            }
        }
        digests.push(Manifest::load(&run_dir).unwrap().unwrap().all_digests());
    }
    assert!(!digests[0].is_empty());
    assert_eq!(digests[0], digests[1], "same-seed runs differ");
}

fn defaults() {
    let d = DecomposeSettings::default();
    assert_eq!((d.inpaint.guidance_scale, d.inpaint.num_steps), (7.5, 30));
    assert_eq!(d.face_budget, 50_000);
    assert_eq!(DEFAULT_FACE_BUDGET, 50_000);
    let c = CombineConfig::default();
    let g = &c.guidance;
    assert_eq!((g.timesteps.low, g.timesteps.high), (800, 900));
    assert_eq!(g.multiplier, 25.0);
    assert_eq!((c.optimizer.lr_translation_z, c.optimizer.lr_default), (0.01, 0.001));
    let w = g.weights;
    assert_eq!((w.reference, w.guidance, w.rgb, w.alpha), (1.0, 1.0, 1000.0, 1000.0));
    assert_eq!(c.views.count, 10);
    // The CLI uses the same defaults.
    let run = RunConfig::default();
    assert_eq!(run.combine, c);
    assert_eq!(run.decompose, d);
}

#[test]
fn acceptance() {
    let checks: [(&str, fn(), Duration); 8] = [
        ("closed-form oracles", oracles, Duration::from_secs(10)),
        ("renderer gradients", renderer_gradients, Duration::from_secs(120)),
        (
            "distillation contracts",
            distillation_contracts,
            Duration::from_secs(30),
        ),
        ("toy spatial relation", toy_relation, Duration::from_secs(60)),
        ("placement round trip", round_trip, Duration::from_secs(120)),
        ("noise-range ablation", noise_ablation, Duration::from_secs(300)),
        ("run-all export", run_all_twice, Duration::from_secs(60)),
        ("defaults", defaults, Duration::MAX),
    ];
    let mut failed = Vec::new();
    for (i, (name, check, limit)) in checks.into_iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check));
        let took = start.elapsed();
        let verdict = match result {
            Ok(()) if took <= limit => "PASS".to_string(),
            Ok(()) => format!("FAIL (over the {limit:?} limit)"),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                format!("FAIL ({msg})")
            }
        };
        // Straight to the handle so the line survives libtest's output capture.
        let _ = writeln!(
            std::io::stderr(),
            "criterion {}: {name}: {verdict} [{:.2} s]",
            i + 1,
            took.as_secs_f64()
        );
        if !verdict.starts_with("PASS") {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
