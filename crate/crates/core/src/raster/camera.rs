use nalgebra::{Matrix3, Point3, Rotation3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::RasterError;
use crate::Pose;

/// Pinhole intrinsics plus a world→camera extrinsic.
///
/// Camera axes: +z forward (optical axis), +x right, +y down. Pixel `(u, v)`
/// has its center at integer coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// world → camera.
    pub pose: Pose,
}

/// Intrinsics without a pose, as they appear in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    /// Square pixels, principal point at the image center.
    pub fn centered(focal: f64, width: u32, height: u32) -> Self {
        Self { fx: focal, fy: focal, cx: width as f64 / 2.0, cy: height as f64 / 2.0, width, height }
    }

    pub fn with_pose(&self, pose: Pose) -> PinholeCamera {
        PinholeCamera {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            pose,
        }
    }
}

impl PinholeCamera {
    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics { fx: self.fx, fy: self.fy, cx: self.cx, cy: self.cy, width: self.width, height: self.height }
    }

    pub fn validate(&self) -> Result<(), RasterError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(RasterError::InvalidCamera("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(RasterError::InvalidCamera("image must be at least 1x1".into()));
        }
        let r = self.pose.rotation.to_rotation_matrix().into_inner();
        if (r.transpose() * r - Matrix3::identity()).abs().max() > 1e-9 {
            return Err(RasterError::InvalidCamera("pose rotation is not orthonormal".into()));
        }
        Ok(())
    }

    /// camera → world.
    pub fn camera_to_world(&self) -> Pose {
        self.pose.inverse()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Point3<f64> {
        self.camera_to_world().translation.vector.into()
    }

    /// Unit optical axis in world coordinates.
    pub fn optical_axis(&self) -> Vector3<f64> {
        self.camera_to_world().rotation * Vector3::z()
    }

    /// World-frame ray through pixel `(u, v)`: origin and unit direction.
    pub fn pixel_ray(&self, u: f64, v: f64) -> (Point3<f64>, Vector3<f64>) {
        let dir_cam = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0).normalize();
        let c2w = self.camera_to_world();
        (c2w.translation.vector.into(), c2w.rotation * dir_cam)
    }

    /// Projects a world point; `None` if it lies behind the camera.
    pub fn project_point(&self, p: &Point3<f64>) -> Option<[f64; 2]> {
        let t = self.pose.transform_point(p);
        (t.z > 0.0).then(|| [self.fx * t.x / t.z + self.cx, self.fy * t.y / t.z + self.cy])
    }
}

/// camera → world pose for a camera at `eye` looking at `target`, with image
/// "up" aligned as closely as possible to `up`.
pub fn look_at(eye: &Point3<f64>, target: &Point3<f64>, up: &Vector3<f64>) -> Result<Pose, RasterError> {
    let forward = target - eye;
    if forward.norm() < 1e-12 {
        return Err(RasterError::DegenerateLookAt);
    }
    let forward = forward.normalize();
    let right = forward.cross(up);
    if right.norm() < 1e-9 {
        return Err(RasterError::DegenerateLookAt);
    }
    let right = right.normalize();
    let down = forward.cross(&right);
    let rot = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[right, down, forward]));
    Ok(Pose::from_parts(Translation3::from(eye.coords), UnitQuaternion::from_rotation_matrix(&rot)))
}

/// Row-major RGB image, one `f32` per channel in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn filled(width: u32, height: u32, rgb: [f32; 3]) -> Self {
        let n = width as usize * height as usize;
        let mut pixels = Vec::with_capacity(n * 3);
        for _ in 0..n {
            pixels.extend_from_slice(&rgb);
        }
        Self { width, height, pixels }
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f32; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// 8-bit quantization, `round(v · 255)` after clamping to `[0, 1]`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_rgb8(width: u32, height: u32, bytes: &[u8]) -> Result<Self, RasterError> {
        let expected = width as usize * height as usize * 3;
        if bytes.len() != expected {
            return Err(RasterError::SizeMismatch { expected, actual: bytes.len() });
        }
        Ok(Self { width, height, pixels: bytes.iter().map(|&b| b as f32 / 255.0).collect() })
    }

    /// Binary PPM (P6, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.to_rgb8());
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self, RasterError> {
        // Header: magic, width, height, maxval separated by whitespace, then one
        // whitespace byte before the raster. Comments are not supported.
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(RasterError::BadPpm("truncated header".into()));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| RasterError::BadPpm("non-ASCII header".into()))?);
        }
        if fields[0] != "P6" {
            return Err(RasterError::BadPpm(format!("unsupported magic `{}`", fields[0])));
        }
        let parse = |s: &str| s.parse::<u32>().map_err(|_| RasterError::BadPpm(format!("bad number `{s}`")));
        let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval != 255 {
            return Err(RasterError::BadPpm(format!("maxval {maxval} unsupported")));
        }
        let raster = bytes.get(pos + 1..).unwrap_or_default();
        Self::from_rgb8(w, h, raster)
    }
}

/// Per-pixel depth in meters; `f32::INFINITY` where nothing was hit.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: u32,
    pub height: u32,
    pub depth: Vec<f32>,
}

impl DepthImage {
    pub fn at(&self, x: u32, y: u32) -> f32 {
        self.depth[y as usize * self.width as usize + x as usize]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_points_optical_axis_at_target() {
        let eye = Point3::new(1.0, 2.0, 3.0);
        let target = Point3::new(0.0, 0.0, 0.5);
        let c2w = look_at(&eye, &target, &Vector3::z()).unwrap();
        let cam = Intrinsics::centered(100.0, 64, 64).with_pose(c2w.inverse());
        let axis = cam.optical_axis();
        let to_target = (target - eye).normalize();
        assert!((axis - to_target).norm() < 1e-12);
        let px = cam.project_point(&target).unwrap();
        assert!((px[0] - 32.0).abs() < 1e-9 && (px[1] - 32.0).abs() < 1e-9);
        // World up projects upward in the image (smaller v).
        let above = cam.project_point(&(target + Vector3::z() * 0.1)).unwrap();
        assert!(above[1] < px[1]);
        cam.validate().unwrap();
    }

    #[test]
    fn look_at_rejects_degenerate() {
        let p = Point3::origin();
        assert!(look_at(&p, &p, &Vector3::z()).is_err());
        assert!(look_at(&p, &Point3::new(0.0, 0.0, 1.0), &Vector3::z()).is_err());
    }

    #[test]
    fn ppm_round_trip() {
        let img = Image::from_rgb8(2, 1, &[255, 0, 0, 1, 2, 3]).unwrap();
        let ppm = img.to_ppm();
        assert!(ppm.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(Image::from_ppm(&ppm).unwrap(), img);
        assert!(Image::from_ppm(b"P3\n1 1\n255\n").is_err());
        assert!(Image::from_ppm(b"P6\n2 2\n255\n\x00").is_err());
    }

    #[test]
    fn pixel_ray_through_principal_point_is_optical_axis() {
        let cam = Intrinsics::centered(80.0, 32, 32).with_pose(Pose::identity());
        let (o, d) = cam.pixel_ray(16.0, 16.0);
        assert_eq!(o, Point3::origin());
        assert!((d - Vector3::z()).norm() < 1e-15);
    }
}
