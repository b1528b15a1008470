use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result};
use crate::face_model::{visible_vertices, FaceBasis, FaceParams, Mesh, Pose};

/// `ω_d` (dense vertex term) and `ω_l` (mouth landmark term).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub dense: f64,
    pub landmark: f64,
}

impl LossWeights {
    pub const L2_ONLY: Self = Self {
        dense: 0.0,
        landmark: 0.0,
    };
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            dense: 1e-6,
            landmark: 1.0,
        }
    }
}

/// Vertices visible in the label mesh with the headset as occluder; used as
/// the dense-term vertex set for both the predicted and label meshes.
pub fn loss_visibility(basis: &FaceBasis, label: &FaceParams, pose: &Pose, occluders: &[Mesh]) -> Result<Vec<usize>> {
    let mesh = basis.evaluate_shape(label)?;
    Ok(visible_vertices(&mesh, pose, occluders))
}

fn expression_vertex(basis: &FaceBasis, x_exp: &[f64], i: usize) -> Vector3<f64> {
    let mut v = Vector3::new(basis.mean_shape[3 * i], basis.mean_shape[3 * i + 1], basis.mean_shape[3 * i + 2]);
    for (k, &x) in x_exp.iter().enumerate() {
        for a in 0..3 {
            v[a] += basis.axes_exp[(3 * i + a, k)] * x;
        }
    }
    v
}

/// Three-term facial loss and its gradient with respect to `pred`,
/// evaluated vertex by vertex. The shared identity cancels in every
/// difference, so both meshes are built from the mean shape plus expression.
pub fn facial_loss(
    pred: &[f64],
    label: &[f64],
    basis: &FaceBasis,
    pose: &Pose,
    weights: LossWeights,
    visible: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let d = basis.dim_exp();
    check_len("predicted expression", d, pred.len())?;
    check_len("label expression", d, label.len())?;
    let mut e = 0.0;
    let mut grad = vec![0.0; d];
    for k in 0..d {
        let diff = pred[k] - label[k];
        e += diff * diff;
        grad[k] += 2.0 * diff;
    }
    // ∂v_i/∂pred = rows 3i..3i+3 of the expression axes
    let mut add_term = |i: usize, w: f64, project: bool| {
        let vp = expression_vertex(basis, pred, i);
        let vl = expression_vertex(basis, label, i);
        let (r, dims) = if project {
            let pp = pose.project(&vp);
            let pl = pose.project(&vl);
            (vec![pp.x - pl.x, pp.y - pl.y], 2)
        } else {
            let dv = vp - vl;
            (vec![dv.x, dv.y, dv.z], 3)
        };
        for a in 0..dims {
            e += w * r[a] * r[a];
            for k in 0..d {
                let dv = Vector3::new(
                    basis.axes_exp[(3 * i, k)],
                    basis.axes_exp[(3 * i + 1, k)],
                    basis.axes_exp[(3 * i + 2, k)],
                );
                let j = if project {
                    pose.scale() * pose.rotation().row(a).dot(&dv.transpose())
                } else {
                    dv[a]
                };
                grad[k] += 2.0 * w * r[a] * j;
            }
        }
    };
    if weights.dense != 0.0 {
        for &i in visible {
            add_term(i, weights.dense, false);
        }
    }
    if weights.landmark != 0.0 {
        for &i in &basis.landmarks_mouth {
            add_term(i, weights.landmark, true);
        }
    }
    Ok((e, grad))
}

/// The facial loss as the quadratic form `Δᵀ Q Δ` with `Δ = pred − label`
/// and `Q = I + ω_d Σ_{Ω_v} A_iᵀA_i + ω_l Σ_{Ω_l} (sP R A_i)ᵀ(sP R A_i)`,
/// where `A_i` are the three expression-axis rows of vertex `i`.
pub fn facial_kernel(basis: &FaceBasis, pose: &Pose, weights: LossWeights, visible: &[usize]) -> DMatrix<f64> {
    let d = basis.dim_exp();
    let mut q = DMatrix::identity(d, d);
    if weights.dense != 0.0 {
        for &i in visible {
            let a = basis.axes_exp.rows(3 * i, 3);
            q += weights.dense * a.transpose() * a;
        }
    }
    if weights.landmark != 0.0 {
        let sp = pose.scale() * pose.rotation().fixed_rows::<2>(0);
        for &i in &basis.landmarks_mouth {
            let j = sp * basis.axes_exp.rows(3 * i, 3);
            q += weights.landmark * j.transpose() * &j;
        }
    }
    q
}

/// `(Δᵀ Q Δ, 2 Q Δ)`.
pub fn kernel_loss(pred: &[f64], label: &[f64], q: &DMatrix<f64>) -> (f64, Vec<f64>) {
    let delta = DVector::from_iterator(pred.len(), pred.iter().zip(label).map(|(p, l)| p - l));
    let qd = q * &delta;
    (delta.dot(&qd), qd.iter().map(|v| 2.0 * v).collect())
}

/// Squared L2 distance and its gradient `2 (pred − label)`.
pub fn eye_loss(pred: &[f64], label: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len("eye prediction", label.len(), pred.len())?;
    let grad = pred.iter().zip(label).map(|(p, l)| 2.0 * (p - l)).collect();
    Ok((pred.iter().zip(label).map(|(p, l)| (p - l).powi(2)).sum(), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth_face::{gen_basis, HmdProxy, SyntheticBasisSpec};
    use nalgebra::Vector2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (FaceBasis, Pose, Vec<f64>, Vec<f64>, Vec<usize>) {
        let basis = gen_basis(&SyntheticBasisSpec::desk(3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pose = Pose::from_angles(
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.1..0.1),
            Vector2::new(170.0, 140.0),
            rng.random_range(80.0..120.0),
        )
        .unwrap();
        let d = basis.dim_exp();
        let pred: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let label: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut params = basis.zero_params();
        params.x_exp = DVector::from_column_slice(&label);
        let vis = loss_visibility(&basis, &params, &pose, &[HmdProxy::default().posed_mesh()]).unwrap();
        (basis, pose, pred, label, vis)
    }

    #[test]
    fn equal_inputs_give_zero() {
        let (b, pose, _, label, vis) = setup(1);
        let (e, g) = facial_loss(&label, &label, &b, &pose, LossWeights::default(), &vis).unwrap();
        assert_eq!(e, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weights_reduce_to_squared_distance() {
        let (b, pose, pred, label, vis) = setup(2);
        let (e, _) = facial_loss(&pred, &label, &b, &pose, LossWeights::L2_ONLY, &vis).unwrap();
        let l2: f64 = pred.iter().zip(&label).map(|(p, l)| (p - l).powi(2)).sum();
        assert!((e - l2).abs() < 1e-12 * l2);
    }

    #[test]
    fn facial_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let (b, pose, pred, label, vis) = setup(10 + seed);
            let w = LossWeights {
                dense: 0.3,
                landmark: 1e-3,
            };
            let (_, g) = facial_loss(&pred, &label, &b, &pose, w, &vis).unwrap();
            for k in 0..pred.len() {
                let mut p = pred.clone();
                p[k] += 1e-6;
                let up = facial_loss(&p, &label, &b, &pose, w, &vis).unwrap().0;
                p[k] -= 2e-6;
                let down = facial_loss(&p, &label, &b, &pose, w, &vis).unwrap().0;
                let fd = (up - down) / 2e-6;
                let rel = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-6);
                assert!(rel <= 1e-4, "seed {seed} coefficient {k}: {fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn kernel_form_matches_vertex_sums() {
        for seed in 0..5 {
            let (b, pose, pred, label, vis) = setup(40 + seed);
            let w = LossWeights::default();
            let (e, g) = facial_loss(&pred, &label, &b, &pose, w, &vis).unwrap();
            let q = facial_kernel(&b, &pose, w, &vis);
            let (ek, gk) = kernel_loss(&pred, &label, &q);
            assert!((e - ek).abs() <= 1e-9 * e, "{e} vs {ek}");
            for (a, c) in g.iter().zip(&gk) {
                assert!((a - c).abs() <= 1e-9 * (1.0 + a.abs()));
            }
        }
    }

    #[test]
    fn kernel_newton_step_lands_on_label() {
        let (b, pose, pred, label, vis) = setup(60);
        let q = facial_kernel(&b, &pose, LossWeights::default(), &vis);
        let (_, g) = kernel_loss(&pred, &label, &q);
        let step = (2.0 * &q).lu().solve(&DVector::from_vec(g)).unwrap();
        for k in 0..pred.len() {
            assert!((pred[k] - step[k] - label[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn eye_loss_examples() {
        assert_eq!(eye_loss(&[1.0; 5], &[1.0; 5]).unwrap().0, 0.0);
        assert_eq!(eye_loss(&[1.0, 0.0, 0.0, 0.0, 0.0], &[0.0; 5]).unwrap().0, 1.0);
        assert!(eye_loss(&[0.0; 4], &[0.0; 5]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
        let l: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (_, g) = eye_loss(&p, &l).unwrap();
        for k in 0..5 {
            let mut q = p.clone();
            q[k] += 1e-6;
            let up = eye_loss(&q, &l).unwrap().0;
            q[k] -= 2e-6;
            let fd = (up - eye_loss(&q, &l).unwrap().0) / 2e-6;
            assert!((fd - g[k]).abs() / g[k].abs().max(1e-6) <= 1e-8, "{fd} vs {}", g[k]);
        }
        let step: Vec<f64> = p.iter().zip(&g).map(|(p, g)| p - g / 2.0).collect();
        assert!(step.iter().zip(&l).all(|(a, b)| (a - b).abs() < 1e-10));
    }
}
