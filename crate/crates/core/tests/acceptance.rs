//! End-to-end acceptance suite. Every criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.
//!
//! Run alone with `cargo test --test acceptance -- --nocapture`.

use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use hmdcap::capture::{eval_eye, eval_face, held_out_eye_frames, EyeInputGeometry};
use hmdcap::dataset::Split;
use hmdcap::face_model::{visible_vertices, FaceBasis, FaceParams, LandmarkSet, Mesh, Pose, DEPTH_TOLERANCE};
use hmdcap::image::GrayImage;
use hmdcap::inverse_fit::{fit_identity_expression, FitConfig, LandmarkObservations};
use hmdcap::nets::{
    eye_frame_scale, eye_loss, eye_training_samples, face_training_samples, facial_loss, loss_visibility,
    max_gradient_error, random_layer_spec, train, LossWeights, Model, ModelKind, Network, NetworkSpec, TrainConfig,
    LAYER_KINDS,
};
use hmdcap::pupil::{fit_ellipse, pupil_labels, track_pupil, EllipseFit};
use hmdcap::synth_eye::{gen_eye_dataset, render_eye, EyeDataConfig, EyeRenderSpec, IRIS_COLOURS};
use hmdcap::synth_face::{gen_basis, gen_face_dataset, mask_hmd, FaceDataConfig, HmdProxy, SyntheticBasisSpec};
use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

type Criterion = (&'static str, fn() -> Outcome);

#[test]
fn acceptance() {
    let criteria: [Criterion; 9] = [
        ("loss ablation on held-out subject", loss_ablation),
        ("eye network vs ellipse-ratio baseline", gaze_comparison),
        ("pupil pipeline accuracy", pupil_accuracy),
        ("gradient correctness", gradient_checks),
        ("geometric identities", geometric_identities),
        ("headset mask completeness", mask_completeness),
        ("inverse-fit round trip", inverse_fit_round_trip),
        ("determinism of generation and training", determinism),
        ("throughput report", throughput_report),
    ];
    let mut failed = Vec::new();
    for (k, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let o = run();
        println!(
            "ACCEPTANCE {} {}: {} ({:.1} s) {}",
            k + 1,
            name,
            if o.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            o.detail
        );
        if !o.pass {
            failed.push(k + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

// 1 ---------------------------------------------------------------------

fn loss_ablation() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let basis = gen_basis(&SyntheticBasisSpec::desk(11)).unwrap();
    let cfg = FaceDataConfig::desk();
    let hmd = HmdProxy::default();
    let manifest = gen_face_dataset(&basis, "basis.feb", &cfg, &hmd, dir.path(), 42).unwrap();
    let occluders = [hmd.posed_mesh()];
    let schedule = TrainConfig {
        seed: 5,
        ..TrainConfig::facial_desk()
    };
    let mut errors = Vec::new();
    for weights in [LossWeights::L2_ONLY, LossWeights::default()] {
        let samples =
            face_training_samples(dir.path(), &manifest, &basis, &occluders, weights, Split::Train).unwrap();
        let mut net = Network::new(NetworkSpec::facial_desk(basis.dim_exp(), 5)).unwrap();
        let cfg = TrainConfig {
            loss_weights: weights,
            ..schedule.clone()
        };
        train(&mut net, &samples, &cfg, None).unwrap();
        errors.push(eval_face(dir.path(), &manifest, &basis, &net, Split::Test).unwrap());
    }
    let elapsed = start.elapsed();
    let (l2, full) = (&errors[0], &errors[1]);
    let ratio = l2.mean_landmark_error_px / full.mean_landmark_error_px;
    outcome(
        full.mean_landmark_error_px < l2.mean_landmark_error_px && ratio >= 1.5 && elapsed <= Duration::from_secs(900),
        format!(
            "{} samples; held-out landmark error L2-only {:.3} px, combined {:.3} px, ratio {:.2} (need ≥ 1.5); neutral {:.3} px; {:.0} s of 900",
            manifest.sample_count,
            l2.mean_landmark_error_px,
            full.mean_landmark_error_px,
            ratio,
            l2.neutral_landmark_error_px,
            elapsed.as_secs_f64()
        ),
    )
}

// 2 ---------------------------------------------------------------------

fn gaze_comparison() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = EyeDataConfig::desk();
    let manifest = gen_eye_dataset(&cfg, dir.path(), 42).unwrap();
    let (samples, norm) = eye_training_samples(dir.path(), &manifest, Split::Train).unwrap();
    let mut net = Network::new(NetworkSpec::eye_desk(3)).unwrap();
    let tc = TrainConfig {
        seed: 3,
        loss_weights: LossWeights::L2_ONLY,
        ..TrainConfig::eye_desk()
    };
    train(&mut net, &samples, &tc, None).unwrap();
    let mut model = Model::new(net, ModelKind::Eye);
    let (sy, sx) = eye_frame_scale(&manifest).unwrap();
    model.meta.target_norm = Some(norm);
    model.meta.frame_scale = Some([sy, sx]);
    let frames = held_out_eye_frames(&manifest, None).unwrap();
    let geometry = EyeInputGeometry {
        downscale_rows: cfg.downscale_rows,
        downscale_cols: cfg.downscale_cols,
        crop_rows: cfg.crop_rows,
        crop_cols: cfg.crop_cols,
    };
    let r = eval_eye(&model, geometry, &frames).unwrap();
    let elapsed = start.elapsed();
    outcome(
        r.frames >= 500
            && r.net_gaze_error_deg <= r.baseline_gaze_error_deg
            && r.net_timing.mean_ms < r.baseline_timing.mean_ms
            && elapsed <= Duration::from_secs(900),
        format!(
            "{} held-out frames; gaze error network {:.2}° vs baseline {:.2}° ({} tracker failures excluded); {:.3} ms vs {:.3} ms per frame; {:.0} s of 900",
            r.frames,
            r.net_gaze_error_deg,
            r.baseline_gaze_error_deg,
            r.baseline_failures,
            r.net_timing.mean_ms,
            r.baseline_timing.mean_ms,
            elapsed.as_secs_f64()
        ),
    )
}

// 3 ---------------------------------------------------------------------

fn pupil_accuracy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let lim = 40f64.to_radians();
    let (mut worst_centre, mut worst_size, mut failures) = (0f64, 0f64, 0);
    for i in 0..200 {
        let spec = EyeRenderSpec {
            seed: i,
            iris_color_index: rng.random_range(0..IRIS_COLOURS),
            ..Default::default()
        };
        let state = spec.state_for(rng.random_range(-lim..lim), rng.random_range(-lim..lim), rng.random_range(16.0..56.0));
        let render = render_eye(&state, &spec).unwrap();
        match track_pupil(&render.image) {
            Ok(track) => {
                let (centre, size) = pupil_labels(&track.fit);
                worst_centre = worst_centre.max((centre - render.ellipse.centre).norm());
                let true_size = 2.0 * render.ellipse.semi_major;
                worst_size = worst_size.max((size - true_size).abs() / true_size);
            }
            Err(_) => failures += 1,
        }
    }
    let mut worst_fit = 0f64;
    for _ in 0..50 {
        let a = rng.random_range(5.0..60.0);
        let truth = EllipseFit::new(
            Vector2::new(rng.random_range(-200.0..200.0), rng.random_range(-200.0..200.0)),
            a,
            a * rng.random_range(0.3..0.95),
            rng.random_range(0.0..std::f64::consts::PI),
        )
        .unwrap();
        let pts: Vec<Vector2<f64>> = (0..40).map(|k| truth.point_at(k as f64 * std::f64::consts::TAU / 40.0)).collect();
        let fit = fit_ellipse(&pts).unwrap();
        let dtheta = {
            let d = (fit.orientation - truth.orientation).rem_euclid(std::f64::consts::PI);
            d.min(std::f64::consts::PI - d)
        };
        worst_fit = worst_fit
            .max((fit.centre - truth.centre).norm())
            .max((fit.semi_major - truth.semi_major).abs())
            .max((fit.semi_minor - truth.semi_minor).abs())
            .max(dtheta);
    }
    outcome(
        failures == 0 && worst_centre <= 1.5 && worst_size <= 0.05 && worst_fit <= 1e-6,
        format!(
            "200 renders: worst centre error {worst_centre:.3} px, worst size error {:.2} %, {failures} failures; ellipse fit worst parameter error {worst_fit:.1e}",
            100.0 * worst_size
        ),
    )
}

// 4 ---------------------------------------------------------------------

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst_layer = 0f64;
    let mut worst_kind = "";
    for kind in LAYER_KINDS {
        for _ in 0..20 {
            let spec = random_layer_spec(kind, &mut rng);
            let batch = rng.random_range(1..=3);
            let e = max_gradient_error(spec, batch, rng.random()).unwrap();
            if e > worst_layer {
                worst_layer = e;
                worst_kind = kind;
            }
        }
    }
    let basis = gen_basis(&SyntheticBasisSpec::desk(3)).unwrap();
    let hmd = [HmdProxy::default().posed_mesh()];
    let d = basis.dim_exp();
    let mut worst_facial = 0f64;
    for trial in 0..20 {
        let label: Vec<f64> = basis.sigma_exp.iter().map(|s| s * rng.sample::<f64, _>(StandardNormal)).collect();
        let pred: Vec<f64> = basis.sigma_exp.iter().map(|s| s * rng.sample::<f64, _>(StandardNormal)).collect();
        let pose = Pose::from_angles(
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.05..0.05),
            Vector2::new(rng.random_range(100.0..250.0), rng.random_range(100.0..200.0)),
            rng.random_range(60.0..140.0),
        )
        .unwrap();
        let weights = if trial % 2 == 0 {
            LossWeights::default()
        } else {
            LossWeights {
                dense: rng.random_range(0.01..1.0),
                landmark: rng.random_range(1e-4..1e-2),
            }
        };
        let params = FaceParams::new(vec![0.0; basis.dim_id()], label.clone(), vec![0.0; basis.dim_alb()]).unwrap();
        let vis = loss_visibility(&basis, &params, &pose, &hmd).unwrap();
        let (_, grad) = facial_loss(&pred, &label, &basis, &pose, weights, &vis).unwrap();
        for k in 0..d {
            let mut p = pred.clone();
            p[k] += 1e-6;
            let up = facial_loss(&p, &label, &basis, &pose, weights, &vis).unwrap().0;
            p[k] -= 2e-6;
            let down = facial_loss(&p, &label, &basis, &pose, weights, &vis).unwrap().0;
            worst_facial = worst_facial.max(rel_err(grad[k], (up - down) / 2e-6));
        }
    }
    let mut worst_eye = 0f64;
    for _ in 0..20 {
        let label: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
        let pred: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (_, grad) = eye_loss(&pred, &label).unwrap();
        for k in 0..5 {
            let mut p = pred.clone();
            p[k] += 1e-6;
            let up = eye_loss(&p, &label).unwrap().0;
            p[k] -= 2e-6;
            let down = eye_loss(&p, &label).unwrap().0;
            worst_eye = worst_eye.max(rel_err(grad[k], (up - down) / 2e-6));
        }
    }
    outcome(
        worst_layer <= 1e-4 && worst_facial <= 1e-4 && worst_eye <= 1e-4,
        format!(
            "7 layer types × 20 configs worst {worst_layer:.1e} ({worst_kind}); facial loss worst {worst_facial:.1e}; eye loss worst {worst_eye:.1e}"
        ),
    )
}

// 5 ---------------------------------------------------------------------

fn random_params(basis: &FaceBasis, rng: &mut ChaCha8Rng) -> FaceParams {
    let draw = |s: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
        s.iter().map(|s| s * rng.sample::<f64, _>(StandardNormal)).collect()
    };
    FaceParams::new(draw(&basis.sigma_id, rng), draw(&basis.sigma_exp, rng), draw(&basis.sigma_alb, rng)).unwrap()
}

/// Möller–Trumbore: distance along `dir` from `origin` to the triangle.
fn ray_hit(origin: Vector3<f64>, dir: Vector3<f64>, t: [Vector3<f64>; 3]) -> Option<f64> {
    let e1 = t[1] - t[0];
    let e2 = t[2] - t[0];
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() <= 1e-15 {
        return None;
    }
    let s = origin - t[0];
    let u = s.dot(&p) / det;
    let q = s.cross(&e1);
    let v = dir.dot(&q) / det;
    if !(0.0..=1.0).contains(&u) || v < 0.0 || u + v > 1.0 {
        return None;
    }
    Some(e2.dot(&q) / det)
}

fn visibility_oracle(mesh: &Mesh, pose: &Pose) -> Vec<usize> {
    let r = pose.rotation();
    let pts: Vec<Vector3<f64>> = mesh.vertices_iter().map(|v| r * v).collect();
    (0..pts.len())
        .filter(|&i| {
            !mesh.triangles.iter().any(|t| {
                let tri = [pts[t[0] as usize], pts[t[1] as usize], pts[t[2] as usize]];
                ray_hit(pts[i], Vector3::z(), tri).is_some_and(|d| d > DEPTH_TOLERANCE)
            })
        })
        .collect()
}

fn geometric_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let basis = gen_basis(&SyntheticBasisSpec::desk(9)).unwrap();
    let zero = basis.zero_params();
    let mean_err = basis
        .evaluate_shape(&zero)
        .unwrap()
        .vertices
        .iter()
        .zip(basis.mean_shape.iter())
        .chain(basis.evaluate_albedo(&zero).unwrap().iter().zip(basis.mean_albedo.iter()))
        .map(|(a, b)| (a - b).abs())
        .fold(0f64, f64::max);
    let mut lin_err = 0f64;
    for _ in 0..10 {
        let (p, q) = (random_params(&basis, &mut rng), random_params(&basis, &mut rng));
        let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let combo = FaceParams {
            x_id: &p.x_id * a + &q.x_id * b,
            x_exp: &p.x_exp * a + &q.x_exp * b,
            x_alb: &p.x_alb * a + &q.x_alb * b,
        };
        let offsets = |f: &FaceParams| -> Vec<f64> {
            let s = basis.evaluate_shape(f).unwrap().vertices;
            let c = basis.evaluate_albedo(f).unwrap();
            s.iter()
                .zip(basis.mean_shape.iter())
                .chain(c.iter().zip(basis.mean_albedo.iter()))
                .map(|(x, m)| x - m)
                .collect()
        };
        let (op, oq, oc) = (offsets(&p), offsets(&q), offsets(&combo));
        for k in 0..oc.len() {
            lin_err = lin_err.max((oc[k] - (a * op[k] + b * oq[k])).abs());
        }
    }

    let mut proj_err = 0f64;
    for _ in 0..100 {
        let v = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let s: f64 = rng.random_range(0.1..200.0);
        let t = Vector2::new(rng.random_range(-300.0..300.0), rng.random_range(-300.0..300.0));
        let id = Pose::identity().project(&v);
        let scaled = Pose::new(Matrix3::identity(), Vector2::zeros(), s).unwrap().project(&v);
        let moved = Pose::new(Matrix3::identity(), t, 1.0).unwrap().project(&v);
        proj_err = proj_err
            .max((id - Vector2::new(v.x, v.y)).amax())
            .max((scaled - Vector2::new(s * v.x, s * v.y)).amax() / s.max(1.0))
            .max((moved - (Vector2::new(v.x, v.y) + t)).amax());
    }

    let mut mismatched = 0;
    for _ in 0..50 {
        let nv = rng.random_range(3..=60);
        let nt = rng.random_range(1..=200);
        let verts: Vec<f64> = (0..3 * nv).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tris: Vec<[u32; 3]> = (0..nt)
            .map(|_| loop {
                let t = [rng.random_range(0..nv) as u32, rng.random_range(0..nv) as u32, rng.random_range(0..nv) as u32];
                if t[0] != t[1] && t[1] != t[2] && t[0] != t[2] {
                    break t;
                }
            })
            .collect();
        let mesh = Mesh::new(verts, Arc::from(tris)).unwrap();
        let pose = Pose::from_angles(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            Vector2::zeros(),
            1.0,
        )
        .unwrap();
        if visible_vertices(&mesh, &pose, &[]) != visibility_oracle(&mesh, &pose) {
            mismatched += 1;
        }
    }
    outcome(
        mean_err <= 1e-10 && lin_err <= 1e-10 && proj_err <= 1e-12 && mismatched == 0,
        format!(
            "zero-coefficient error {mean_err:.1e}, linearity error {lin_err:.1e}, projection example error {proj_err:.1e}, visibility mismatches {mismatched}/50"
        ),
    )
}

// 6 ---------------------------------------------------------------------

fn inside_strict(p: [Vector2<f64>; 3], x: f64, y: f64) -> bool {
    let cross = |a: Vector2<f64>, b: Vector2<f64>| (b.x - a.x) * (y - a.y) - (b.y - a.y) * (x - a.x);
    let (d0, d1, d2) = (cross(p[0], p[1]), cross(p[1], p[2]), cross(p[2], p[0]));
    (d0 > 0.0 && d1 > 0.0 && d2 > 0.0) || (d0 < 0.0 && d1 < 0.0 && d2 < 0.0)
}

fn mask_completeness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let hmd = HmdProxy::default();
    let shell = hmd.posed_mesh();
    let (rows, cols) = (288, 352);
    let white = GrayImage::new(rows, cols, 255);
    let (mut leaks, mut covered) = (0usize, 0usize);
    for _ in 0..100 {
        let pose = Pose::from_angles(
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.2..0.2),
            Vector2::new(rng.random_range(100.0..250.0), rng.random_range(80.0..200.0)),
            rng.random_range(60.0..140.0),
        )
        .unwrap();
        let masked = mask_hmd(&white, &hmd, &pose);
        let screen: Vec<Vector2<f64>> = shell.vertices_iter().map(|v| pose.project(&v)).collect();
        let tris: Vec<[Vector2<f64>; 3]> = shell.triangles.iter().map(|t| t.map(|i| screen[i as usize])).collect();
        for r in 0..rows {
            for c in 0..cols {
                if tris.iter().any(|t| inside_strict(*t, c as f64, r as f64)) {
                    covered += 1;
                    if masked.get(r, c) != 0 {
                        leaks += 1;
                    }
                }
            }
        }
    }
    outcome(
        leaks == 0 && covered > 0,
        format!("100 poses: {leaks} non-black pixels among {covered} covered pixel centres"),
    )
}

// 7 ---------------------------------------------------------------------

fn fit_scene(basis: &FaceBasis, rng: &mut ChaCha8Rng, frames: usize) -> (Vec<FaceParams>, Vec<Pose>) {
    let x_id: Vec<f64> = basis.sigma_id.iter().map(|s| 2.0 * s * rng.sample::<f64, _>(StandardNormal)).collect();
    let params = (0..frames)
        .map(|_| {
            let x_exp = basis.sigma_exp.iter().map(|s| 2.0 * s * rng.sample::<f64, _>(StandardNormal)).collect();
            FaceParams::new(x_id.clone(), x_exp, vec![0.0; basis.dim_alb()]).unwrap()
        })
        .collect();
    let poses = (0..frames)
        .map(|_| {
            Pose::from_angles(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.05..0.05),
                Vector2::new(176.0, 144.0),
                100.0,
            )
            .unwrap()
        })
        .collect();
    (params, poses)
}

fn inverse_fit_round_trip() -> Outcome {
    let basis = gen_basis(&SyntheticBasisSpec::desk(13)).unwrap();
    let mut idx = basis.landmarks(LandmarkSet::Lower).to_vec();
    idx.extend_from_slice(basis.landmarks(LandmarkSet::Mouth));
    idx.sort_unstable();
    idx.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = FitConfig::default();

    let (params, poses) = fit_scene(&basis, &mut rng, 6);
    let obs = LandmarkObservations::synthesize(&basis, &params, &poses, &idx).unwrap();
    let fit = fit_identity_expression(&obs, &basis, &cfg).unwrap();
    let clean_rms = fit.reprojection_rms(&basis, &obs).unwrap();
    let monotone = fit.objective_history.windows(2).all(|w| w[1] <= w[0]);

    let (mut worst_noisy, mut worst_truth) = (0f64, 0f64);
    for _ in 0..100 {
        let (params, poses) = fit_scene(&basis, &mut rng, 4);
        let clean = LandmarkObservations::synthesize(&basis, &params, &poses, &idx).unwrap();
        let mut noisy = clean.clone();
        for f in &mut noisy.frames {
            for p in &mut f.points {
                p.position += Vector2::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)) * 0.5;
            }
        }
        let fit = fit_identity_expression(&noisy, &basis, &cfg).unwrap();
        worst_noisy = worst_noisy.max(fit.reprojection_rms(&basis, &noisy).unwrap());
        worst_truth = worst_truth.max(fit.reprojection_rms(&basis, &clean).unwrap());
    }
    outcome(
        clean_rms <= 1e-3 && monotone && worst_noisy <= 1.0 && worst_truth <= 1.0,
        format!(
            "noiseless rms {clean_rms:.1e} px, objective monotone: {monotone}; σ = 0.5 px over 100 trials: worst rms {worst_noisy:.3} px to the observations, {worst_truth:.3} px to the clean landmarks"
        ),
    )
}

// 8 ---------------------------------------------------------------------

fn cli(args: &[&str], config: Option<&Path>, out: &Path) -> Result<String, String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hmdcap"));
    cmd.args(args).arg("--out").arg(out).env("RUST_LOG", "warn");
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    let o = cmd.output().map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(String::from_utf8_lossy(&o.stdout).into_owned())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr)))
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let write = |name: &str, json: &str| {
        let p = root.path().join(name);
        std::fs::write(&p, json).unwrap();
        p
    };
    let face_cfg = write("face.json", r#"{"frames": 24, "crops_per_frame": 3}"#);
    let eye_cfg = write("eye.json", r#"{"frames": 70, "test_frames": 10, "crops_per_frame": 1}"#);
    let train_cfg = write("train.json", r#"{"epochs": 2, "batch_size": 8}"#);
    let run = |tag: &str| -> Result<Vec<(String, Vec<u8>)>, String> {
        let base = root.path().join(tag);
        let (face, eye, models) = (base.join("face"), base.join("eye"), base.join("models"));
        cli(&["gen-face-data", "--seed", "21"], Some(&face_cfg), &face)?;
        cli(&["gen-eye-data", "--seed", "22"], Some(&eye_cfg), &eye)?;
        cli(&["train-face", "--seed", "23", "--data", face.to_str().unwrap()], Some(&train_cfg), &models)?;
        cli(&["train-eye", "--seed", "24", "--data", eye.to_str().unwrap()], Some(&train_cfg), &models)?;
        Ok(dir_bytes(&base))
    };
    match (run("a"), run("b")) {
        (Ok(a), Ok(b)) => {
            let differing: Vec<&String> = a
                .iter()
                .zip(&b)
                .filter(|(x, y)| x != y)
                .map(|(x, _)| &x.0)
                .collect();
            let has_logs = a.iter().any(|(n, _)| n.ends_with("face_train.jsonl"))
                && a.iter().any(|(n, _)| n.ends_with("eye_train.jsonl"));
            outcome(
                a.len() == b.len() && differing.is_empty() && has_logs,
                format!("{} files compared (datasets, weights, loss histories); differing: {differing:?}", a.len()),
            )
        }
        (Err(e), _) | (_, Err(e)) => outcome(false, format!("CLI run failed: {e}")),
    }
}

// 9 ---------------------------------------------------------------------

fn throughput_report() -> Outcome {
    let out = tempfile::tempdir().unwrap();
    match cli(&["bench", "--preset", "desk", "--frames", "12"], None, out.path()) {
        Ok(stdout) => {
            let stages = ["facial network", "eye network", "pupil baseline", "end to end", "reference", "fps"];
            let missing: Vec<&str> = stages.iter().copied().filter(|s| !stdout.contains(s)).collect();
            let json = out.path().join("bench.json").exists();
            outcome(
                missing.is_empty() && json,
                format!("report{}:\n{stdout}", if missing.is_empty() { String::new() } else { format!(" missing {missing:?}") }),
            )
        }
        Err(e) => outcome(false, e),
    }
}
