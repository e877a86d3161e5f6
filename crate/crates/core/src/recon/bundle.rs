use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Point3, Translation3, UnitQuaternion, Vector2, Vector3};

use super::{Observation, ReconError};
use crate::raster::{projection_jacobian, PinholeCamera, NEAR_PLANE};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BundleConfig {
    /// Maximum number of Levenberg–Marquardt iterations (accepted or not).
    pub iterations: usize,
    /// Stop once the total squared error falls below this (pixels²).
    pub cost_tolerance: f64,
}

impl Default for BundleConfig {
    fn default() -> Self {
        Self { iterations: 100, cost_tolerance: 1e-24 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BundleResult {
    pub points: Vec<Point3<f64>>,
    pub cameras: Vec<PinholeCamera>,
    /// Root-mean-square reprojection error over all observations, pixels.
    pub rms: f64,
    /// Total squared error, initial value followed by every accepted step.
    pub history: Vec<f64>,
}

const MU_MAX: f64 = 1e16;

/// Levenberg–Marquardt refinement of points and camera poses against pixel
/// observations. Camera 0 is held fixed; intrinsics are not refined.
///
/// Poses are updated by a left-multiplied rotation vector and an additive
/// translation on the world → camera transform. A step is accepted only if
/// it strictly lowers the total squared error.
pub fn bundle_adjust(
    points: &[Point3<f64>],
    cameras: &[PinholeCamera],
    observations: &[Observation],
    cfg: &BundleConfig,
) -> Result<BundleResult, ReconError> {
    let mut seen = vec![false; cameras.len()];
    for o in observations {
        if o.point_index >= points.len() || o.camera_index >= cameras.len() {
            return Err(ReconError::IndexOutOfRange);
        }
        seen[o.camera_index] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(ReconError::UnobservedCamera(i));
    }

    let mut pts = points.to_vec();
    let mut cams = cameras.to_vec();
    let mut cost = match total_cost(&pts, &cams, observations) {
        Some(c) => c,
        None => {
            let bad = observations.iter().position(|o| residual(&pts, &cams, o).is_none()).unwrap_or(0);
            return Err(ReconError::PointBehindCamera(bad));
        }
    };
    let mut history = vec![cost];
    let n_cam = 6 * (cams.len() - 1);
    let n = n_cam + 3 * pts.len();

    let mut mu = None;
    for iteration in 0..cfg.iterations {
        if cost <= cfg.cost_tolerance {
            break;
        }
        let (h, g) = normal_equations(&pts, &cams, observations, n, n_cam);
        let mu_now = *mu.get_or_insert_with(|| 1e-3 * h.diagonal().max().max(1e-12));
        let mut mu_try = mu_now;
        let mut accepted = false;
        let mut solved = false;
        while mu_try < MU_MAX {
            let mut damped = h.clone();
            for k in 0..n {
                damped[(k, k)] += mu_try;
            }
            let Some(chol) = damped.cholesky() else {
                mu_try *= 10.0;
                continue;
            };
            solved = true;
            let delta = chol.solve(&(-&g));
            let (p2, c2) = apply_step(&pts, &cams, &delta, n_cam);
            match total_cost(&p2, &c2, observations) {
                Some(c) if c < cost => {
                    pts = p2;
                    cams = c2;
                    cost = c;
                    history.push(cost);
                    mu = Some((mu_try / 3.0).max(1e-20));
                    accepted = true;
                    break;
                }
                _ => mu_try *= 10.0,
            }
        }
        if !solved {
            return Err(ReconError::SingularNormalEquations { iteration });
        }
        if !accepted {
            // No damping lowers the error: converged to machine precision.
            break;
        }
    }
    let rms = if observations.is_empty() { 0.0 } else { (cost / observations.len() as f64).sqrt() };
    Ok(BundleResult { points: pts, cameras: cams, rms, history })
}

fn residual(pts: &[Point3<f64>], cams: &[PinholeCamera], o: &Observation) -> Option<Vector2<f64>> {
    let cam = &cams[o.camera_index];
    let p = cam.pose.transform_point(&pts[o.point_index]);
    if p.z <= NEAR_PLANE {
        return None;
    }
    Some(Vector2::new(cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy) - o.pixel)
}

fn total_cost(pts: &[Point3<f64>], cams: &[PinholeCamera], obs: &[Observation]) -> Option<f64> {
    let mut sum = 0.0;
    for o in obs {
        sum += residual(pts, cams, o)?.norm_squared();
    }
    sum.is_finite().then_some(sum)
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Gauss–Newton `JᵀJ` and gradient `Jᵀr`, unknowns ordered as cameras
/// 1.. (rotation, translation) then points.
fn normal_equations(
    pts: &[Point3<f64>],
    cams: &[PinholeCamera],
    obs: &[Observation],
    n: usize,
    n_cam: usize,
) -> (DMatrix<f64>, DVector<f64>) {
    let mut h = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    for o in obs {
        let cam = &cams[o.camera_index];
        let rx = cam.pose.rotation * pts[o.point_index].coords;
        let p = rx + cam.pose.translation.vector;
        let Some(r) = residual(pts, cams, o) else { continue };
        let jp: Matrix2x3<f64> = projection_jacobian(cam, &p);
        let mut blocks: Vec<(usize, DMatrix<f64>)> = Vec::with_capacity(2);
        if o.camera_index > 0 {
            let mut jc = DMatrix::zeros(2, 6);
            jc.view_mut((0, 0), (2, 3)).copy_from(&(jp * -skew(&rx)));
            jc.view_mut((0, 3), (2, 3)).copy_from(&jp);
            blocks.push((6 * (o.camera_index - 1), jc));
        }
        let r_mat = cam.pose.rotation.to_rotation_matrix().into_inner();
        let jx = jp * r_mat;
        blocks.push((n_cam + 3 * o.point_index, DMatrix::from_iterator(2, 3, jx.iter().copied())));
        for (oa, ja) in &blocks {
            let gr = ja.transpose() * DVector::from_column_slice(r.as_slice());
            let mut gs = g.rows_mut(*oa, ja.ncols());
            gs += gr;
            for (ob, jb) in &blocks {
                let mut hs = h.view_mut((*oa, *ob), (ja.ncols(), jb.ncols()));
                hs += ja.transpose() * jb;
            }
        }
    }
    (h, g)
}

fn apply_step(pts: &[Point3<f64>], cams: &[PinholeCamera], delta: &DVector<f64>, n_cam: usize) -> (Vec<Point3<f64>>, Vec<PinholeCamera>) {
    let mut cams = cams.to_vec();
    for (i, cam) in cams.iter_mut().enumerate().skip(1) {
        let d = delta.rows(6 * (i - 1), 6);
        let dr = UnitQuaternion::from_scaled_axis(Vector3::new(d[0], d[1], d[2]));
        cam.pose.rotation = dr * cam.pose.rotation;
        cam.pose.translation = Translation3::from(cam.pose.translation.vector + Vector3::new(d[3], d[4], d[5]));
    }
    let pts = pts
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let d = delta.rows(n_cam + 3 * j, 3);
            Point3::new(p.x + d[0], p.y + d[1], p.z + d[2])
        })
        .collect();
    (pts, cams)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{look_at, Intrinsics};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scene(rng: &mut ChaCha8Rng) -> (Vec<Point3<f64>>, Vec<PinholeCamera>, Vec<Observation>) {
        let intr = Intrinsics::centered(200.0, 320, 240);
        let cams: Vec<PinholeCamera> = [-0.4, 0.0, 0.4]
            .iter()
            .map(|&x| intr.with_pose(look_at(&Point3::new(x, -0.1, -2.0), &Point3::origin(), &Vector3::y()).unwrap().inverse()))
            .collect();
        let pts: Vec<Point3<f64>> = (0..20)
            .map(|_| Point3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)))
            .collect();
        let mut obs = Vec::new();
        for (ci, cam) in cams.iter().enumerate() {
            for (pi, p) in pts.iter().enumerate() {
                let [u, v] = cam.project_point(p).unwrap();
                obs.push(Observation { point_index: pi, camera_index: ci, pixel: Vector2::new(u, v) });
            }
        }
        (pts, cams, obs)
    }

    #[test]
    fn exact_input_is_left_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (pts, cams, obs) = scene(&mut rng);
        let out = bundle_adjust(&pts, &cams, &obs, &BundleConfig::default()).unwrap();
        assert!(out.rms < 1e-9);
        assert_eq!(out.cameras[0], cams[0]);
        for (a, b) in out.points.iter().zip(&pts) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn recovers_perturbed_poses() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (pts, cams, obs) = scene(&mut rng);
        let mut noisy = cams.clone();
        for cam in noisy.iter_mut().skip(1) {
            let w = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize() * 1e-2;
            let t = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize() * 1e-2;
            cam.pose.rotation = UnitQuaternion::from_scaled_axis(w) * cam.pose.rotation;
            cam.pose.translation.vector += t;
        }
        let out = bundle_adjust(&pts, &noisy, &obs, &BundleConfig::default()).unwrap();
        assert!(out.rms < 1e-6, "rms {}", out.rms);
        assert!(out.history[0] > 1.0);
        for w in out.history.windows(2) {
            assert!(w[1] <= w[0]);
        }
        // Gauge camera bit-identical.
        assert_eq!(out.cameras[0].pose, cams[0].pose);
    }

    #[test]
    fn unobserved_camera_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (pts, cams, obs) = scene(&mut rng);
        let obs: Vec<_> = obs.into_iter().filter(|o| o.camera_index != 2).collect();
        assert_eq!(bundle_adjust(&pts, &cams, &obs, &BundleConfig::default()), Err(ReconError::UnobservedCamera(2)));
    }
}
