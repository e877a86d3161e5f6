use nalgebra::{Matrix2, Matrix2x3, Point3, Vector2, Vector3};

use super::PinholeCamera;
use crate::splat::{covariance_of, Gaussian3D};

/// Points with camera-space depth at or below this are culled (meters).
pub const NEAR_PLANE: f64 = 0.01;

/// Added to the projected covariance diagonal (pixels²).
pub const COV_DILATION: f64 = 0.3;

/// A Gaussian projected into an image.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat2D {
    /// Pixels.
    pub mean2d: Vector2<f64>,
    /// Pixels², dilated.
    pub cov2d: Matrix2<f64>,
    /// Camera-space z, meters.
    pub depth: f64,
    pub color: [f64; 3],
    pub opacity: f64,
}

/// Jacobian of `t ↦ (fx·x/z + cx, fy·y/z + cy)` at camera-space point `t`.
pub fn projection_jacobian(cam: &PinholeCamera, t: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    Matrix2x3::new(cam.fx * iz, 0.0, -cam.fx * t.x * iz2, 0.0, cam.fy * iz, -cam.fy * t.y * iz2)
}

/// Projects `g` into `cam`. Returns `None` when the mean is behind the near plane.
pub fn project_gaussian(g: &Gaussian3D, cam: &PinholeCamera) -> Option<Splat2D> {
    let t = cam.pose.transform_point(&Point3::from(g.mean)).coords;
    if t.z <= NEAR_PLANE {
        return None;
    }
    let w = cam.pose.rotation.to_rotation_matrix().into_inner();
    let j = projection_jacobian(cam, &t);
    let jw = j * w;
    let cov2d = jw * covariance_of(g) * jw.transpose() + Matrix2::identity() * COV_DILATION;
    Some(Splat2D {
        mean2d: Vector2::new(cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy),
        // Exact symmetry; the triple product can differ in the last bit.
        cov2d: Matrix2::new(cov2d[(0, 0)], cov2d[(0, 1)], cov2d[(0, 1)], cov2d[(1, 1)]),
        depth: t.z,
        color: g.color,
        opacity: g.opacity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Intrinsics;
    use crate::Pose;

    fn cam() -> PinholeCamera {
        Intrinsics { fx: 100.0, fy: 100.0, cx: 64.0, cy: 64.0, width: 128, height: 128 }.with_pose(Pose::identity())
    }

    #[test]
    fn on_axis_point() {
        let g = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, 5.0), 1.0, 1.0, [1.0; 3]);
        let s = project_gaussian(&g, &cam()).unwrap();
        assert_eq!(s.mean2d, Vector2::new(64.0, 64.0));
        assert_eq!(s.depth, 5.0);
        // J = diag(20, 20) on axis, Σ = I → 400·I, plus dilation.
        let expected = Matrix2::new(400.3, 0.0, 0.0, 400.3);
        assert!((s.cov2d - expected).abs().max() < 1e-9);
    }

    #[test]
    fn behind_camera_is_culled() {
        let g = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, -1.0), 1.0, 1.0, [1.0; 3]);
        assert!(project_gaussian(&g, &cam()).is_none());
        let g = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, NEAR_PLANE), 1.0, 1.0, [1.0; 3]);
        assert!(project_gaussian(&g, &cam()).is_none());
    }

    #[test]
    fn jacobian_matches_finite_differences_on_axis() {
        let c = cam();
        let t = Vector3::new(0.0, 0.0, 5.0);
        let j = projection_jacobian(&c, &t);
        let f = |p: Vector3<f64>| Vector2::new(c.fx * p.x / p.z, c.fy * p.y / p.z);
        for k in 0..3 {
            let mut e = Vector3::zeros();
            e[k] = 1e-6;
            let d = (f(t + e) - f(t - e)) / 2e-6;
            assert!((d - j.column(k)).norm() < 1e-6);
        }
        assert!((j - Matrix2x3::new(20.0, 0.0, 0.0, 0.0, 20.0, 0.0)).abs().max() < 1e-12);
    }
}
