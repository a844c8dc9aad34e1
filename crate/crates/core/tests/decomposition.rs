use std::sync::atomic::{AtomicU32, Ordering};

use combiverse_core::backend::RetryPolicy;
use combiverse_core::decomposition::{
    build_inpaint_mask, decompose_object, inpaint_object, noise_background, reconstruct_object, segment_object,
    Backends, BoxSegmenter, CubeReconstructor, DecomposeSettings, FillInpainter, FixedReconstructor, IdentityInpainter,
    InpaintSettings, SegmenterClient, DEFAULT_PROMPT,
};
use combiverse_core::mesh::obj::{parse_obj, to_obj_string};
use combiverse_core::mesh::{decimate_mesh, TriangleMesh, DEFAULT_FACE_BUDGET};
use combiverse_core::raster::Mask;
use combiverse_core::scene::{load_scene, save_scene, tokenize_caption, ObjectSpec};
use combiverse_core::spatial_init::{init_rotation, init_scale, init_translation};
use combiverse_core::{BackendError, Error};
use image::{RgbImage, Rgba, RgbaImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_rgba(seed: u64, w: u32, h: u32) -> RgbaImage {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    RgbaImage::from_fn(w, h, |_, _| Rgba([r.random(), r.random(), r.random(), 255]))
}

/// Returns a random mask that leaks outside the box.
struct Leaky(u64);

impl SegmenterClient for Leaky {
    fn segment(&self, image: &RgbaImage, _bbox: &ObjectSpec) -> Result<Mask, BackendError> {
        let mut r = ChaCha8Rng::seed_from_u64(self.0);
        Ok(Mask::from_fn(image.width(), image.height(), |_, _| r.random_bool(0.6)))
    }
}

#[test]
fn segmentation_is_clipped_and_alpha_matches_mask() {
    let img = random_rgba(1, 20, 16);
    let b = ObjectSpec::new(3, 2, 15, 11).unwrap();
    let retry = RetryPolicy::immediate(0);
    let (_, m) = segment_object(&img, &b, &BoxSegmenter, &retry).unwrap();
    assert_eq!(m, b.indicator(20, 16));
    for seed in 0..20 {
        let (cutout, m) = segment_object(&img, &b, &Leaky(seed), &retry).unwrap();
        for (x, y, p) in cutout.enumerate_pixels() {
            let fg = m.get(x, y);
            assert!(!fg || b.contains(x, y));
            assert_eq!(p[3], if fg { 255 } else { 0 });
            if fg {
                assert_eq!(&p.0[..3], &img.get_pixel(x, y).0[..3]);
            } else {
                assert_eq!(p.0, [0, 0, 0, 0]);
            }
        }
    }
    let empty = ObjectSpec::new(0, 0, 1, 1).unwrap();
    struct Nothing;
    impl SegmenterClient for Nothing {
        fn segment(&self, image: &RgbaImage, _: &ObjectSpec) -> Result<Mask, BackendError> {
            Ok(Mask::new(image.width(), image.height()))
        }
    }
    assert!(matches!(
        segment_object(&img, &empty, &Nothing, &retry),
        Err(Error::DegenerateSegmentation { .. })
    ));
}

#[test]
fn noise_keeps_foreground_and_is_seeded() {
    let img = random_rgba(2, 32, 32);
    let full = Mask::from_fn(32, 32, |_, _| true);
    let out = noise_background(&img, &full, 7).unwrap();
    for (x, y, p) in out.enumerate_pixels() {
        assert_eq!(
            p.0,
            [img.get_pixel(x, y)[0], img.get_pixel(x, y)[1], img.get_pixel(x, y)[2]]
        );
    }
    let none = Mask::new(32, 32);
    assert_eq!(
        noise_background(&img, &none, 7).unwrap(),
        noise_background(&img, &none, 7).unwrap()
    );
    assert_ne!(
        noise_background(&img, &none, 7).unwrap(),
        noise_background(&img, &none, 8).unwrap()
    );
    assert!(noise_background(&img, &Mask::new(31, 32), 7).is_err());
}

#[test]
fn background_noise_is_uniform() {
    let img = RgbaImage::new(256, 256);
    let out = noise_background(&img, &Mask::new(256, 256), 42).unwrap();
    let mut bins = [0u64; 256];
    for p in out.pixels() {
        for c in 0..3 {
            bins[p[c] as usize] += 1;
        }
    }
    let n: u64 = bins.iter().sum();
    let expected = n as f64 / 256.0;
    let chi2: f64 = bins.iter().map(|&b| (b as f64 - expected).powi(2) / expected).sum();
    // 255 degrees of freedom; 330.5 is the 0.1% upper quantile.
    assert!(chi2 < 330.5, "chi-square {chi2}");
}

#[test]
fn inpaint_mask_example_and_complement() {
    let mut m = Mask::new(4, 4);
    m.set(0, 0, true);
    let b = ObjectSpec::new(0, 0, 2, 2).unwrap();
    let im = build_inpaint_mask(&m, &b).unwrap();
    let ones: Vec<(u32, u32)> = (0..4)
        .flat_map(|y| (0..4).map(move |x| (x, y)))
        .filter(|&(x, y)| im.get(x, y))
        .collect();
    assert_eq!(ones, vec![(1, 0), (0, 1), (1, 1)]);
    let all = Mask::from_fn(4, 4, |_, _| true);
    assert!(build_inpaint_mask(&all, &ObjectSpec::full(4, 4)).unwrap().is_empty());
}

#[test]
fn inpainting_contracts() {
    let noised = RgbImage::from_fn(8, 8, |x, y| image::Rgb([x as u8 * 9, y as u8 * 9, 77]));
    let retry = RetryPolicy::immediate(0);
    let identity = IdentityInpainter::default();
    let same = inpaint_object(
        &noised,
        &Mask::new(8, 8),
        &identity,
        &InpaintSettings::default(),
        &retry,
    )
    .unwrap();
    assert_eq!(same, noised);
    assert!(identity.log.lock().unwrap().is_empty());

    let fill = FillInpainter::new([10, 200, 30]);
    let m = Mask::from_fn(8, 8, |x, y| x > 4 && y < 3);
    let out = inpaint_object(&noised, &m, &fill, &InpaintSettings::default(), &retry).unwrap();
    for (x, y, p) in out.enumerate_pixels() {
        if m.get(x, y) {
            assert_eq!(p.0, [10, 200, 30]);
        } else {
            assert_eq!(p, noised.get_pixel(x, y));
        }
    }
    let log = fill.log.lock().unwrap();
    assert_eq!(log[0].prompt, DEFAULT_PROMPT);
    assert_eq!((log[0].guidance_scale, log[0].num_steps), (7.5, 30));
    drop(log);

    let bad = InpaintSettings {
        guidance_scale: 0.0,
        ..Default::default()
    };
    assert!(inpaint_object(&noised, &m, &fill, &bad, &retry).is_err());
}

#[test]
fn reconstruction_is_normalized_and_round_trips_through_obj() {
    let retry = RetryPolicy::immediate(0);
    let img = RgbImage::from_pixel(4, 4, image::Rgb([255, 0, 0]));
    let cube = reconstruct_object(&img, &CubeReconstructor, &retry).unwrap();
    assert_eq!(cube.faces.len(), 12);
    assert!(cube.extent().iter().all(|&e| e <= 1.0 + 1e-12));

    let mut big = TriangleMesh::icosphere(2, [0.5; 3]);
    for v in &mut big.vertices {
        v[0] = v[0] * 7.0 + 3.0;
    }
    let n = reconstruct_object(&img, &FixedReconstructor(big.clone()), &retry).unwrap();
    assert!(n.is_normalized());
    assert!((n.extent().iter().copied().fold(0.0, f64::max) - 1.0).abs() < 1e-12);

    let text = to_obj_string(&[("ball", &n)]);
    let back = parse_obj::<f64>(&text).unwrap();
    assert_eq!(back.len(), 1);
    assert_eq!(back[0].1.vertices.len(), n.vertices.len());
    assert_eq!(back[0].1.faces, n.faces);
}

#[test]
fn decimation_budget() {
    assert_eq!(DEFAULT_FACE_BUDGET, 50_000);
    let sphere = TriangleMesh::<f64>::icosphere(5, [0.3, 0.6, 0.9]);
    assert_eq!(sphere.faces.len(), 20_480);
    assert_eq!(decimate_mesh(&sphere, 50_000).unwrap(), sphere);
    for target in [5_000, 1_000] {
        let d = decimate_mesh(&sphere, target).unwrap();
        assert!(
            d.faces.len() <= target && d.faces.len() > target / 10,
            "{} faces",
            d.faces.len()
        );
        let (e0, e1) = (sphere.extent(), d.extent());
        for k in 0..3 {
            assert!(
                (e1[k] - e0[k]).abs() <= 0.05 * e0[k],
                "axis {k}: {} vs {}",
                e1[k],
                e0[k]
            );
        }
    }
    assert!(decimate_mesh(&sphere, 3).is_err());
}

/// Fails a set number of times, then succeeds.
struct Flaky {
    failures: u32,
    calls: AtomicU32,
}

impl SegmenterClient for Flaky {
    fn segment(&self, image: &RgbaImage, bbox: &ObjectSpec) -> Result<Mask, BackendError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) < self.failures {
            Err(BackendError::new("timed out"))
        } else {
            Ok(bbox.indicator(image.width(), image.height()))
        }
    }
}

#[test]
fn backend_failures_retry_then_name_the_object() {
    let img = random_rgba(5, 12, 12);
    let b = ObjectSpec::new(2, 2, 9, 9).unwrap();
    let settings = DecomposeSettings {
        retry: RetryPolicy::immediate(3),
        ..Default::default()
    };
    let ok = Flaky {
        failures: 3,
        calls: AtomicU32::new(0),
    };
    let inpainter = IdentityInpainter::default();
    let backends = Backends {
        segmenter: &ok,
        inpainter: &inpainter,
        reconstructor: &CubeReconstructor,
    };
    let rec = decompose_object(&img, &b, 4, backends, &settings, 0).unwrap();
    assert_eq!(ok.calls.load(Ordering::SeqCst), 4);
    assert!(rec.mesh.is_some());

    let bad = Flaky {
        failures: 10,
        calls: AtomicU32::new(0),
    };
    let backends = Backends {
        segmenter: &bad,
        ..backends
    };
    match decompose_object(&img, &b, 4, backends, &settings, 0) {
        Err(Error::Backend { stage, object, message }) => {
            assert_eq!((stage, object), ("segment", Some(4)));
            assert!(message.contains("after 4 attempts"), "{message}");
        }
        other => panic!("expected a backend error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn decomposition_is_deterministic() {
    let img = random_rgba(6, 24, 24);
    let b = ObjectSpec::new(4, 4, 18, 20).unwrap();
    let inpainter = FillInpainter::new([1, 2, 3]);
    let backends = Backends {
        segmenter: &Leaky(1),
        inpainter: &inpainter,
        reconstructor: &CubeReconstructor,
    };
    let settings = DecomposeSettings::default();
    let a = decompose_object(&img, &b, 0, backends, &settings, 9).unwrap();
    let c = decompose_object(&img, &b, 0, backends, &settings, 9).unwrap();
    assert_eq!(a.noised, c.noised);
    assert_eq!(a.completed, c.completed);
    assert_eq!(a.mesh, c.mesh);
    for y in 0..24 {
        for x in 0..24 {
            assert!(!(a.mask.get(x, y) && a.inpaint_mask.get(x, y)));
            if b.contains(x, y) {
                assert!(a.mask.get(x, y) || a.inpaint_mask.get(x, y));
            }
        }
    }
    let other = decompose_object(&img, &b, 0, backends, &settings, 10).unwrap();
    assert_ne!(a.noised, other.noised);
}

#[test]
fn scene_documents_load_validate_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    RgbaImage::from_pixel(40, 30, Rgba([9, 9, 9, 255]))
        .save(dir.path().join("in.png"))
        .unwrap();
    let doc = r#"{"image": "in.png", "objects": [{"bbox": [0, 0, 40, 30]}], "caption": "a fox", "spatial_tokens": []}"#;
    std::fs::write(dir.path().join("scene.json"), doc).unwrap();
    let scene = load_scene(&dir.path().join("scene.json")).unwrap();
    assert_eq!(scene.objects.len(), 1);
    save_scene(&scene, &dir.path().join("again.toml")).unwrap();
    let again = load_scene(&dir.path().join("again.toml")).unwrap();
    assert_eq!(again.document(), scene.document());

    std::fs::write(
        dir.path().join("bad.json"),
        doc.replace("[0, 0, 40, 30]", "[5, 0, 5, 30]"),
    )
    .unwrap();
    assert!(matches!(
        load_scene(&dir.path().join("bad.json")),
        Err(Error::Validation(_))
    ));
    std::fs::write(
        dir.path().join("oob.json"),
        doc.replace("[0, 0, 40, 30]", "[0, 0, 41, 30]"),
    )
    .unwrap();
    assert!(matches!(
        load_scene(&dir.path().join("oob.json")),
        Err(Error::Validation(_))
    ));
    std::fs::write(dir.path().join("typo.json"), doc.replace("caption", "captoin")).unwrap();
    match load_scene(&dir.path().join("typo.json")) {
        Err(Error::Config { field, .. }) => assert!(field.contains("capt"), "{field}"),
        other => panic!("expected a config error, got {:?}", other.map(|s| s.caption)),
    }
    std::fs::write(dir.path().join("tok.json"), doc.replace("[]", "[2]")).unwrap();
    assert!(load_scene(&dir.path().join("tok.json")).is_err());
}

#[test]
fn tokenizer_examples() {
    let t = tokenize_caption("a squirrel is sitting on a box").unwrap();
    assert_eq!(t.len(), 7);
    assert_eq!(t[3], "sitting");
    assert_eq!(tokenize_caption("fox").unwrap(), vec!["fox"]);
    assert!(tokenize_caption("  ").is_err());
    let c = "a cat, on a mat!";
    let t = tokenize_caption(c).unwrap();
    assert_eq!(tokenize_caption(&t.join(" ")).unwrap(), t);
}

#[test]
fn initialization_examples() {
    let full = ObjectSpec::full(400, 400);
    assert_eq!(init_scale::<f64>(&full, (400, 400)).unwrap(), 1.0);
    assert_eq!(
        init_scale::<f64>(&ObjectSpec::new(0, 0, 200, 100).unwrap(), (400, 400)).unwrap(),
        0.5
    );
    assert_eq!(
        init_scale::<f64>(&ObjectSpec::new(0, 0, 30, 90).unwrap(), (120, 60)).unwrap(),
        1.5
    );
    assert_eq!(
        init_translation(&ObjectSpec::new(100, 100, 300, 300).unwrap(), (400, 400), 2.0, 1.0).unwrap(),
        [0.0, 0.0, 2.0]
    );
    let t = init_translation(&ObjectSpec::new(250, 50, 350, 150).unwrap(), (400, 400), 1.5, 1.0).unwrap();
    assert_eq!(t, [100.0, 100.0, 1.5]);
    assert_eq!(init_rotation::<f64>(), [0.0; 3]);
}
