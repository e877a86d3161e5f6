use nalgebra::{Point3, Vector2, Vector3};

use super::ReconError;
use crate::raster::{DepthImage, Image, PinholeCamera};
use crate::splat::{Gaussian3D, SplatScene};

/// An image with its exactly known camera, optionally with metric depth.
#[derive(Debug, Clone, PartialEq)]
pub struct PosedImage {
    pub image: Image,
    pub depth: Option<DepthImage>,
    pub cam: PinholeCamera,
}

impl PosedImage {
    pub fn new(image: Image, depth: Option<DepthImage>, cam: PinholeCamera) -> Result<Self, ReconError> {
        let dims = (cam.width, cam.height);
        if (image.width, image.height) != dims || depth.as_ref().is_some_and(|d| (d.width, d.height) != dims) {
            return Err(ReconError::DimensionMismatch);
        }
        Ok(Self { image, depth, cam })
    }
}

/// A 2D measurement of 3D point `point_index` in view `camera_index`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub point_index: usize,
    pub camera_index: usize,
    /// Pixels.
    pub pixel: Vector2<f64>,
}

/// A ray with a unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Point3<f64>,
    pub direction: Vector3<f64>,
}

/// Midpoint of the shortest segment between two rays.
pub fn triangulate(a: &Ray, b: &Ray) -> Result<Point3<f64>, ReconError> {
    let (da, db) = (a.direction, b.direction);
    if da.cross(&db).norm() < 1e-9 {
        return Err(ReconError::ParallelRays);
    }
    let w0 = a.origin - b.origin;
    let (aa, bb, cc) = (da.dot(&da), da.dot(&db), db.dot(&db));
    let (d, e) = (da.dot(&w0), db.dot(&w0));
    let denom = aa * cc - bb * bb;
    let s = (bb * e - cc * d) / denom;
    let t = (aa * e - bb * d) / denom;
    let pa = a.origin + da * s;
    let pb = b.origin + db * t;
    Ok(nalgebra::center(&pa, &pb))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SeedConfig {
    /// Sample one pixel per `stride × stride` cell of each depth view.
    pub stride: u32,
    pub opacity: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    /// Neighbours averaged for the initial scale.
    pub neighbours: usize,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self { stride: 6, opacity: 0.5, min_scale: 1e-3, max_scale: 0.5, neighbours: 3 }
    }
}

/// Initial splats from posed views.
///
/// When every view has depth, a stratified subsample of pixels (the center
/// of each `stride`² cell with finite depth) is back-projected and colored
/// from the image. Otherwise each point with at least two `observations` is
/// triangulated from its first two views. Initial Gaussians are isotropic
/// with the local mean nearest-neighbour distance as scale.
pub fn seed_scene(
    views: &[PosedImage],
    observations: &[Observation],
    cfg: &SeedConfig,
    frame_id: &str,
) -> Result<SplatScene, ReconError> {
    if views.len() < 2 {
        return Err(ReconError::InsufficientViews(views.len()));
    }
    let samples = if views.iter().all(|v| v.depth.is_some()) {
        back_project(views, cfg.stride.max(1))
    } else {
        triangulate_observations(views, observations)?
    };
    if samples.is_empty() {
        return Err(ReconError::NoGeometry);
    }
    let positions: Vec<Point3<f64>> = samples.iter().map(|(p, _)| *p).collect();
    let scales = mean_neighbour_distance(&positions, cfg.neighbours.max(1));
    let gaussians = samples
        .into_iter()
        .zip(scales)
        .map(|((p, color), s)| {
            let s = if s.is_finite() { s.clamp(cfg.min_scale, cfg.max_scale) } else { cfg.max_scale };
            Gaussian3D::isotropic(p.coords, s, cfg.opacity, color)
        })
        .collect();
    SplatScene::new(gaussians, frame_id).map_err(ReconError::from)
}

fn pixel_color(img: &Image, u: u32, v: u32) -> [f64; 3] {
    img.pixel(u, v).map(|c| (c as f64).clamp(0.0, 1.0))
}

fn back_project(views: &[PosedImage], stride: u32) -> Vec<(Point3<f64>, [f64; 3])> {
    let mut out = Vec::new();
    for view in views {
        let depth = view.depth.as_ref().expect("checked by caller");
        let cam = &view.cam;
        let c2w = cam.camera_to_world();
        let mut v = stride / 2;
        while v < cam.height {
            let mut u = stride / 2;
            while u < cam.width {
                let z = depth.at(u, v) as f64;
                if z.is_finite() && z > 0.0 {
                    let p_cam = Point3::new((u as f64 - cam.cx) / cam.fx * z, (v as f64 - cam.cy) / cam.fy * z, z);
                    out.push((c2w.transform_point(&p_cam), pixel_color(&view.image, u, v)));
                }
                u += stride;
            }
            v += stride;
        }
    }
    out
}

fn triangulate_observations(views: &[PosedImage], observations: &[Observation]) -> Result<Vec<(Point3<f64>, [f64; 3])>, ReconError> {
    let mut by_point: std::collections::BTreeMap<usize, Vec<&Observation>> = Default::default();
    for o in observations {
        if o.camera_index >= views.len() {
            return Err(ReconError::IndexOutOfRange);
        }
        by_point.entry(o.point_index).or_default().push(o);
    }
    let ray = |o: &Observation| {
        let (origin, direction) = views[o.camera_index].cam.pixel_ray(o.pixel.x, o.pixel.y);
        Ray { origin, direction }
    };
    let mut out = Vec::new();
    for obs in by_point.values() {
        if obs.len() < 2 {
            continue;
        }
        let p = triangulate(&ray(obs[0]), &ray(obs[1]))?;
        let first = obs[0];
        let img = &views[first.camera_index].image;
        let u = (first.pixel.x.round().max(0.0) as u32).min(img.width - 1);
        let v = (first.pixel.y.round().max(0.0) as u32).min(img.height - 1);
        out.push((p, pixel_color(img, u, v)));
    }
    Ok(out)
}

/// Mean distance from each point to its `k` nearest neighbours, via a
/// uniform hash grid sized from the bounding box.
fn mean_neighbour_distance(points: &[Point3<f64>], k: usize) -> Vec<f64> {
    let n = points.len();
    if n < 2 {
        return vec![f64::INFINITY; n];
    }
    let k = k.min(n - 1);
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        for i in 0..3 {
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i]);
        }
    }
    let extent = (hi - lo).max().max(1e-9);
    let cells_per_axis = ((n as f64).cbrt().ceil() as i64).max(1);
    let cell = extent / cells_per_axis as f64;
    let key = |p: &Point3<f64>| -> [i64; 3] {
        [0, 1, 2].map(|i| (((p[i] - lo[i]) / cell).floor() as i64).clamp(0, cells_per_axis - 1))
    };
    let mut grid: std::collections::HashMap<[i64; 3], Vec<usize>> = Default::default();
    for (i, p) in points.iter().enumerate() {
        grid.entry(key(p)).or_default().push(i);
    }
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let c = key(p);
            let mut ring = 0i64;
            loop {
                let mut d: Vec<f64> = Vec::new();
                for dx in -ring..=ring {
                    for dy in -ring..=ring {
                        for dz in -ring..=ring {
                            if let Some(ids) = grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                                d.extend(ids.iter().filter(|&&j| j != i).map(|&j| (points[j] - p).norm()));
                            }
                        }
                    }
                }
                d.sort_by(f64::total_cmp);
                // Neighbours within `ring` cells are exact only up to that radius.
                let exact_radius = ring as f64 * cell;
                if d.len() >= k && (d[k - 1] <= exact_radius || ring >= cells_per_axis) {
                    return d[..k].iter().sum::<f64>() / k as f64;
                }
                ring += 1;
            }
        })
        .collect()
}
