use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::{EETarget, KinematicChain, RobotError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IkConfig {
    /// meters
    pub tol_pos: f64,
    /// radians
    pub tol_rot: f64,
    pub max_iters: usize,
    /// Damping λ in `Jᵀ(J·Jᵀ + λ²I)⁻¹`.
    pub damping: f64,
    /// Per-iteration cap on the position error fed to the update (meters).
    pub max_position_step: f64,
    /// Per-iteration cap on the rotation error fed to the update (radians).
    pub max_rotation_step: f64,
}

impl Default for IkConfig {
    fn default() -> Self {
        Self { tol_pos: 1e-4, tol_rot: 1e-3, max_iters: 200, damping: 0.05, max_position_step: 0.1, max_rotation_step: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkSolution {
    pub joints: Vec<f64>,
    pub iterations: usize,
    pub position_error: f64,
    pub rotation_error: f64,
}

/// Damped-least-squares IK toward `target` (expressed in the chain's base
/// frame), starting from `seed`.
///
/// Each step is `Δq = Jᵀ(J·Jᵀ + λ²I)⁻¹·e` with `e` the 3-dim position error,
/// or the stacked 6-dim position and rotation-vector error when the target
/// carries an orientation; joints are clamped to their limits after every
/// step. Errors larger than the configured step caps are scaled down before
/// the update so far targets are approached along a stable path. On failure the best iterate is returned inside
/// [`RobotError::Unconverged`].
pub fn ik_solve(chain: &KinematicChain, target: &EETarget, seed: &[f64], cfg: &IkConfig) -> Result<IkSolution, RobotError> {
    chain.check_limits(seed)?;
    let n = chain.dof();
    let rows = if target.orientation.is_some() { 6 } else { 3 };
    let lambda2 = cfg.damping * cfg.damping;

    let mut q = seed.to_vec();
    let mut best: Option<(f64, IkSolution)> = None;
    for iter in 0..=cfg.max_iters {
        let (ee, jac) = chain.jacobian(&q);
        let e_pos: Vector3<f64> = target.position - ee.translation.vector;
        let e_rot = match &target.orientation {
            Some(r) => rotation_error(r, &ee.rotation),
            None => Vector3::zeros(),
        };
        let (pos_err, rot_err) = (e_pos.norm(), e_rot.norm());
        let score = pos_err + rot_err;
        if best.as_ref().is_none_or(|(s, _)| score < *s) {
            best = Some((
                score,
                IkSolution { joints: q.clone(), iterations: iter, position_error: pos_err, rotation_error: rot_err },
            ));
        }
        if pos_err < cfg.tol_pos && rot_err < cfg.tol_rot {
            return Ok(IkSolution { joints: q, iterations: iter, position_error: pos_err, rotation_error: rot_err });
        }
        if iter == cfg.max_iters {
            break;
        }

        let j = jac.rows(0, rows).into_owned();
        let mut e = DVector::zeros(rows);
        e.fixed_rows_mut::<3>(0).copy_from(&cap(e_pos, cfg.max_position_step));
        if rows == 6 {
            e.fixed_rows_mut::<3>(3).copy_from(&cap(e_rot, cfg.max_rotation_step));
        }
        let jjt = &j * j.transpose() + DMatrix::identity(rows, rows) * lambda2;
        let Some(chol) = jjt.cholesky() else {
            break;
        };
        let dq = j.transpose() * chol.solve(&e);
        for (v, d) in q.iter_mut().zip(dq.iter()) {
            *v += d;
        }
        chain.clamp(&mut q);
        debug_assert_eq!(q.len(), n);
    }
    let (_, best) = best.expect("at least one iterate evaluated");
    Err(RobotError::Unconverged {
        best: best.joints,
        position_error: best.position_error,
        rotation_error: best.rotation_error,
    })
}

fn cap(v: Vector3<f64>, max: f64) -> Vector3<f64> {
    let n = v.norm();
    if n > max {
        v * (max / n)
    } else {
        v
    }
}

/// Rotation vector taking `current` to `target`, in the base frame.
fn rotation_error(target: &UnitQuaternion<f64>, current: &UnitQuaternion<f64>) -> Vector3<f64> {
    (target * current.inverse()).scaled_axis()
}
