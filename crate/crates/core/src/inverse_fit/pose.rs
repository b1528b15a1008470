use nalgebra::{Matrix2x3, Matrix3, Matrix6, Rotation3, Vector2, Vector3, Vector6, SVD};

use crate::error::{Error, Result};
use crate::face_model::Pose;

const RANK_TOL: f64 = 1e-9;

/// Weighted squared reprojection error of `pose` over correspondences.
pub fn reprojection_energy(pose: &Pose, pts3: &[Vector3<f64>], pts2: &[Vector2<f64>], w: Option<&[f64]>) -> f64 {
    pts3.iter()
        .zip(pts2)
        .enumerate()
        .map(|(i, (v, p))| weight(w, i) * (pose.project(v) - p).norm_squared())
        .sum()
}

fn weight(w: Option<&[f64]>, i: usize) -> f64 {
    w.map_or(1.0, |w| w[i])
}

/// Weak-perspective pose from 2D–3D correspondences: affine least squares,
/// projection onto a scaled rotation (Procrustes with determinant
/// correction), then Levenberg–Marquardt refinement.
pub fn fit_pose(points3d: &[Vector3<f64>], points2d: &[Vector2<f64>]) -> Result<Pose> {
    fit_pose_weighted(points3d, points2d, None)
}

pub fn fit_pose_weighted(points3d: &[Vector3<f64>], points2d: &[Vector2<f64>], weights: Option<&[f64]>) -> Result<Pose> {
    let n = points3d.len();
    crate::error::check_len("2D points", n, points2d.len())?;
    if let Some(w) = weights {
        crate::error::check_len("weights", n, w.len())?;
        if w.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::InvalidInput("weights must be positive and finite".into()));
        }
    }
    if n < 4 {
        return Err(Error::Degenerate(format!("pose needs at least 4 correspondences, got {n}")));
    }
    let wsum: f64 = (0..n).map(|i| weight(weights, i)).sum();
    let m3 = (0..n).map(|i| points3d[i] * weight(weights, i)).sum::<Vector3<f64>>() / wsum;
    let m2 = (0..n).map(|i| points2d[i] * weight(weights, i)).sum::<Vector2<f64>>() / wsum;

    let mut xx = Matrix3::<f64>::zeros();
    let mut yx = Matrix2x3::<f64>::zeros();
    for i in 0..n {
        let w = weight(weights, i);
        let x = points3d[i] - m3;
        let y = points2d[i] - m2;
        xx += w * x * x.transpose();
        yx += w * y * x.transpose();
    }
    let svd = SVD::new(xx, true, true);
    let smax = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&s| s > RANK_TOL * smax.max(1e-300)).count();
    if rank < 2 || smax <= 0.0 {
        return Err(Error::Degenerate(format!(
            "3D points are rank deficient (rank {rank} < 2): collinear or coincident"
        )));
    }
    let xx_pinv = svd
        .pseudo_inverse(RANK_TOL * smax)
        .map_err(|e| Error::Numerical(e.to_string()))?;
    let m = yx * xx_pinv;
    let (r1, r2) = (m.row(0).transpose(), m.row(1).transpose());
    if r1.cross(&r2).norm() <= 1e-12 * r1.norm() * r2.norm() {
        return Err(Error::Degenerate(format!(
            "2D points are rank deficient: affine map has rank < 2 (input rank {rank})"
        )));
    }
    let scale_est = (r1.norm() + r2.norm()) / 2.0;
    let r3 = r1.cross(&r2).normalize() * scale_est;
    let a = Matrix3::from_rows(&[r1.transpose(), r2.transpose(), r3.transpose()]);
    let rotation = nearest_rotation(&a);
    let s = {
        // least-squares scale for the fixed rotation
        let p = rotation.fixed_rows::<2>(0).into_owned();
        let num = p.component_mul(&yx).sum();
        let den = (p * xx * p.transpose()).trace();
        if num > 0.0 && den > 0.0 { num / den } else { scale_est }
    };
    let t = m2 - s * rotation.fixed_rows::<2>(0) * m3;
    let init = Pose::new(rotation, t, s)?;
    Ok(refine_pose(&init, points3d, points2d, weights, 50).0)
}

/// Closest rotation in Frobenius norm; a reflection is turned into a
/// rotation by flipping the singular vector of the smallest singular value.
pub fn nearest_rotation(a: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = SVD::new(*a, true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        let k = svd.singular_values.imin();
        d[(k, k)] = -1.0;
    }
    let r = u * d * vt;
    // re-orthonormalise against rounding
    let c0 = r.column(0).normalize();
    let c1 = (r.column(1) - c0 * c0.dot(&r.column(1))).normalize();
    Matrix3::from_columns(&[c0, c1, c0.cross(&c1)])
}

/// Levenberg–Marquardt on `(δθ ∈ so(3), t, log s)` with left-multiplied
/// rotation updates. Only decreasing steps are accepted, so the returned
/// energy never exceeds the initial one.
pub fn refine_pose(
    init: &Pose,
    pts3: &[Vector3<f64>],
    pts2: &[Vector2<f64>],
    weights: Option<&[f64]>,
    max_iter: usize,
) -> (Pose, f64) {
    let mut pose = *init;
    let mut energy = reprojection_energy(&pose, pts3, pts2, weights);
    let mut lambda = 1e-3;
    for _ in 0..max_iter {
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        let r = *pose.rotation();
        let s = pose.scale();
        for (i, (v, p)) in pts3.iter().zip(pts2).enumerate() {
            let w = weight(weights, i);
            let rv = r * v;
            let res = s * Vector2::new(rv.x, rv.y) + pose.translation() - p;
            // d(Rv)/dδ = −[Rv]×
            let mut j = nalgebra::Matrix2x6::<f64>::zeros();
            j[(0, 0)] = 0.0;
            j[(0, 1)] = s * rv.z;
            j[(0, 2)] = -s * rv.y;
            j[(1, 0)] = -s * rv.z;
            j[(1, 1)] = 0.0;
            j[(1, 2)] = s * rv.x;
            j[(0, 3)] = 1.0;
            j[(1, 4)] = 1.0;
            j[(0, 5)] = s * rv.x;
            j[(1, 5)] = s * rv.y;
            jtj += w * j.transpose() * j;
            jtr += w * j.transpose() * res;
        }
        if jtr.norm() <= 1e-14 * (1.0 + energy) {
            break;
        }
        let mut improved = false;
        for _ in 0..20 {
            let mut a = jtj;
            for k in 0..6 {
                a[(k, k)] += lambda * (jtj[(k, k)] + 1e-12);
            }
            let Some(delta) = a.cholesky().map(|c| c.solve(&(-jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let rot = Rotation3::new(Vector3::new(delta[0], delta[1], delta[2])).into_inner() * r;
            let cand = Pose::new(
                nearest_rotation(&rot),
                pose.translation() + Vector2::new(delta[3], delta[4]),
                s * delta[5].exp(),
            );
            if let Ok(cand) = cand {
                let e = reprojection_energy(&cand, pts3, pts2, weights);
                if e < energy {
                    let rel = (energy - e) / energy.max(1e-300);
                    pose = cand;
                    energy = e;
                    lambda = (lambda / 3.0).max(1e-12);
                    improved = rel > 1e-15;
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (pose, energy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.6..0.6)))
            .collect()
    }

    fn rotation_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
        // ‖A − B‖_F = 2√2 · sin(θ/2); stable for small θ unlike acos of the trace
        2.0 * ((a - b).norm() / (2.0 * 2f64.sqrt())).min(1.0).asin()
    }

    #[test]
    fn identity_pose_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p3 = cloud(&mut rng, 12);
        let p2: Vec<_> = p3.iter().map(|v| Vector2::new(v.x, v.y)).collect();
        let pose = fit_pose(&p3, &p2).unwrap();
        assert!((pose.rotation() - Matrix3::identity()).abs().max() < 1e-8);
        assert!((pose.scale() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn too_few_points() {
        let err = fit_pose(&[Vector3::zeros(); 3], &[Vector2::zeros(); 3]).unwrap_err();
        assert!(err.to_string().contains("at least 4"));
    }

    #[test]
    fn collinear_rejected_with_rank() {
        let p3: Vec<_> = (0..6).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 0.5 * i as f64)).collect();
        let p2: Vec<_> = p3.iter().map(|v| Vector2::new(v.x, v.y)).collect();
        let err = fit_pose(&p3, &p2).unwrap_err();
        assert!(err.to_string().contains("rank"), "{err}");
    }

    #[test]
    fn reflection_is_corrected() {
        let a = Matrix3::from_diagonal(&Vector3::new(2.0, 1.0, -0.1));
        let r = nearest_rotation(&a);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
        assert!((r - Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 1.0))).abs().max() < 1e-12);
    }

    #[test]
    fn noisy_reprojection_rmse() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let p3 = cloud(&mut rng, 29);
            let truth = Pose::from_angles(
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.1..0.1),
                Vector2::new(160.0, 120.0),
                100.0,
            )
            .unwrap();
            let p2: Vec<_> = p3
                .iter()
                .map(|v| {
                    truth.project(v)
                        + 0.5 * Vector2::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal))
                })
                .collect();
            let pose = fit_pose(&p3, &p2).unwrap();
            let rmse = (reprojection_energy(&pose, &p3, &p2, None) / 29.0).sqrt();
            worst = worst.max(rmse);
        }
        assert!(worst <= 1.0, "worst RMSE {worst}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn exact_round_trip(seed in any::<u64>(), yaw in -1.2..1.2f64, pitch in -1.2..1.2f64, roll in -3.0..3.0f64,
                            s in 0.5..300.0f64, tx in -500.0..500.0f64, ty in -500.0..500.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p3 = cloud(&mut rng, 10);
            let truth = Pose::from_angles(yaw, pitch, roll, Vector2::new(tx, ty), s).unwrap();
            let p2: Vec<_> = p3.iter().map(|v| truth.project(v)).collect();
            let pose = fit_pose(&p3, &p2).unwrap();
            prop_assert!(rotation_angle(pose.rotation(), truth.rotation()) < 1e-8);
            prop_assert!((pose.scale() - s).abs() / s < 1e-8);
        }

        #[test]
        fn permutation_invariant(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p3 = cloud(&mut rng, 15);
            let truth = Pose::from_angles(0.3, -0.2, 0.1, Vector2::new(50.0, 60.0), 80.0).unwrap();
            let p2: Vec<_> = p3.iter().map(|v| truth.project(v) + Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
            let a = fit_pose(&p3, &p2).unwrap();
            let mut idx: Vec<usize> = (0..15).collect();
            for i in (1..15).rev() { idx.swap(i, rng.random_range(0..=i)); }
            let q3: Vec<_> = idx.iter().map(|&i| p3[i]).collect();
            let q2: Vec<_> = idx.iter().map(|&i| p2[i]).collect();
            let b = fit_pose(&q3, &q2).unwrap();
            prop_assert!(rotation_angle(a.rotation(), b.rotation()) < 1e-7);
            prop_assert!((a.scale() - b.scale()).abs() < 1e-7 * a.scale());
            prop_assert!((a.translation() - b.translation()).norm() < 1e-6);
        }
    }
}
