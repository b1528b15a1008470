use std::sync::OnceLock;

use hmdcap::face_model::{FaceBasis, FaceParams, Pose};
use hmdcap::image::GrayImage;
use hmdcap::nets::{eye_loss, max_gradient_error, random_layer_spec, LAYER_KINDS};
use hmdcap::synth_face::{gen_basis, mask_hmd, HmdProxy, SyntheticBasisSpec};
use nalgebra::{DVector, Vector2, Vector3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn basis() -> &'static FaceBasis {
    static B: OnceLock<FaceBasis> = OnceLock::new();
    B.get_or_init(|| gen_basis(&SyntheticBasisSpec::desk(17)).unwrap())
}

fn coeffs(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, n)
}

fn params() -> impl Strategy<Value = FaceParams> {
    let b = basis();
    (coeffs(b.dim_id()), coeffs(b.dim_exp()), coeffs(b.dim_alb()))
        .prop_map(|(i, e, a)| FaceParams::new(i, e, a).unwrap())
}

fn pose() -> impl Strategy<Value = Pose> {
    (-0.5..0.5f64, -0.5..0.5f64, -0.2..0.2f64, 100.0..250.0f64, 80.0..200.0f64, 60.0..140.0f64)
        .prop_map(|(y, p, r, tx, ty, s)| Pose::from_angles(y, p, r, Vector2::new(tx, ty), s).unwrap())
}

fn offsets(b: &FaceBasis, p: &FaceParams) -> Vec<f64> {
    let shape = b.evaluate_shape(p).unwrap().vertices;
    let albedo = b.evaluate_albedo(p).unwrap();
    shape
        .iter()
        .zip(b.mean_shape.iter())
        .chain(albedo.iter().zip(b.mean_albedo.iter()))
        .map(|(x, m)| x - m)
        .collect()
}

fn point_in_triangle(t: [Vector2<f64>; 3], x: f64, y: f64) -> bool {
    let e = |a: Vector2<f64>, b: Vector2<f64>| (b.x - a.x) * (y - a.y) - (b.y - a.y) * (x - a.x);
    let d = [e(t[0], t[1]), e(t[1], t[2]), e(t[2], t[0])];
    d.iter().all(|&v| v > 0.0) || d.iter().all(|&v| v < 0.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn basis_is_affine_in_coefficients(p in params(), q in params(), a in -2.0..2.0f64, b in -2.0..2.0f64) {
        let basis = basis();
        let combo = FaceParams {
            x_id: &p.x_id * a + &q.x_id * b,
            x_exp: &p.x_exp * a + &q.x_exp * b,
            x_alb: &p.x_alb * a + &q.x_alb * b,
        };
        let (op, oq, oc) = (offsets(basis, &p), offsets(basis, &q), offsets(basis, &combo));
        for k in 0..oc.len() {
            prop_assert!((oc[k] - (a * op[k] + b * oq[k])).abs() <= 1e-9 * (1.0 + oc[k].abs()));
        }
    }

    #[test]
    fn projection_composes_scale_and_translation(
        pose in pose(),
        v in prop::array::uniform3(-3.0..3.0f64),
        extra in 0.5..2.0f64,
    ) {
        let v = Vector3::from(v);
        let base = pose.project(&v) - pose.translation();
        let scaled = pose.with_scale(pose.scale() * extra).unwrap();
        let got = scaled.project(&v) - scaled.translation();
        prop_assert!((got - base * extra).amax() <= 1e-9 * (1.0 + base.amax()));
        let moved = pose.with_translation(pose.translation() + Vector2::new(3.0, -4.0));
        prop_assert!((moved.project(&v) - pose.project(&v) - Vector2::new(3.0, -4.0)).amax() <= 1e-9);
    }

    #[test]
    fn pose_array_round_trips(pose in pose()) {
        let back = Pose::from_array(&pose.to_array()).unwrap();
        prop_assert_eq!(back.to_array(), pose.to_array());
    }

    #[test]
    fn mask_blackens_every_covered_pixel(pose in pose()) {
        let hmd = HmdProxy::default();
        let (rows, cols) = (288, 352);
        let masked = mask_hmd(&GrayImage::new(rows, cols, 255), &hmd, &pose);
        let shell = hmd.posed_mesh();
        let screen: Vec<Vector2<f64>> = shell.vertices_iter().map(|v| pose.project(&v)).collect();
        for t in shell.triangles.iter() {
            let tri = t.map(|i| screen[i as usize]);
            let lo = tri.iter().fold(Vector2::repeat(f64::INFINITY), |m, p| m.inf(p));
            let hi = tri.iter().fold(Vector2::repeat(f64::NEG_INFINITY), |m, p| m.sup(p));
            let rs = lo.y.ceil().max(0.0) as usize..=(hi.y.floor().min(rows as f64 - 1.0)).max(-1.0) as usize;
            for r in rs {
                let cs = lo.x.ceil().max(0.0) as usize..=(hi.x.floor().min(cols as f64 - 1.0)).max(-1.0) as usize;
                for c in cs {
                    if r < rows && c < cols && point_in_triangle(tri, c as f64, r as f64) {
                        prop_assert_eq!(masked.get(r, c), 0, "pixel ({}, {})", r, c);
                    }
                }
            }
        }
    }

    #[test]
    fn layer_gradients_match_finite_differences(kind in 0..LAYER_KINDS.len(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = random_layer_spec(LAYER_KINDS[kind], &mut rng);
        prop_assert!(max_gradient_error(spec, 2, seed).unwrap() <= 1e-4);
    }

    #[test]
    fn eye_loss_vanishes_only_at_label(label in prop::array::uniform5(-3.0..3.0f64), d in prop::array::uniform5(-1.0..1.0f64)) {
        let (zero, grad) = eye_loss(&label, &label).unwrap();
        prop_assert_eq!(zero, 0.0);
        prop_assert!(grad.iter().all(|g| *g == 0.0));
        let pred: Vec<f64> = label.iter().zip(d).map(|(l, d)| l + d).collect();
        let (loss, _) = eye_loss(&pred, &label).unwrap();
        let norm = DVector::from_column_slice(&d).norm_squared();
        prop_assert!(loss >= 0.0 && (loss > 0.0) == (norm > 0.0));
    }
}
