use rayon::prelude::*;

use super::{project_gaussian, DepthImage, Image, PinholeCamera};
use crate::splat::SplatScene;

pub const TILE_SIZE: u32 = 16;
/// Per-splat alpha is clamped to this.
pub const ALPHA_MAX: f64 = 0.99;
/// Splats contributing less alpha than this at a pixel are skipped.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Compositing at a pixel stops once transmittance falls below this.
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
/// Dilated 2D covariances with a smaller determinant are skipped.
const MIN_COV_DET: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RenderOptions {
    /// Worker threads for tile evaluation; 0 uses the global rayon pool.
    pub workers: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RenderStats {
    pub visible: usize,
    pub culled: usize,
    pub singular: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub image: Image,
    pub stats: RenderStats,
}

/// A projected splat ready for compositing.
#[derive(Debug, Clone)]
pub(crate) struct PreparedSplat {
    /// Index in the source scene.
    pub index: usize,
    pub mean: [f64; 2],
    /// Inverse 2D covariance `[a, b, c]` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub depth: f64,
    pub color: [f64; 3],
    pub opacity: f64,
    /// Inclusive pixel bounds `[x0, x1, y0, y1]` outside which alpha is
    /// below [`ALPHA_MIN`]; empty when `x0 > x1`.
    pub bbox: [i64; 4],
}

/// Splats in compositing order (depth ascending, then scene index).
pub(crate) struct Prepared {
    pub splats: Vec<PreparedSplat>,
    pub stats: RenderStats,
}

pub(crate) fn prepare(scene: &SplatScene, cam: &PinholeCamera) -> Prepared {
    let mut stats = RenderStats::default();
    let mut splats = Vec::with_capacity(scene.len());
    for (index, g) in scene.gaussians().iter().enumerate() {
        let Some(s) = project_gaussian(g, cam) else {
            stats.culled += 1;
            continue;
        };
        let (a, b, c) = (s.cov2d[(0, 0)], s.cov2d[(0, 1)], s.cov2d[(1, 1)]);
        let det = a * c - b * b;
        if !(det >= MIN_COV_DET) {
            stats.singular += 1;
            continue;
        }
        let conic = [c / det, -b / det, a / det];
        let mean = [s.mean2d.x, s.mean2d.y];
        splats.push(PreparedSplat {
            index,
            mean,
            conic,
            depth: s.depth,
            color: s.color,
            opacity: s.opacity,
            bbox: influence_box(mean, [a, c], s.opacity),
        });
    }
    stats.visible = splats.len();
    splats.sort_by(|p, q| p.depth.total_cmp(&q.depth).then(p.index.cmp(&q.index)));
    Prepared { splats, stats }
}

/// Pixel box containing every pixel where `opacity · exp(−½ dᵀΣ⁻¹d) ≥ ALPHA_MIN`.
///
/// That region is the ellipse `dᵀΣ⁻¹d ≤ 2·ln(255·opacity)`, whose axis
/// extents are `sqrt(r² · Σ_xx)` and `sqrt(r² · Σ_yy)`. One pixel of slack
/// absorbs rounding in the conic.
fn influence_box(mean: [f64; 2], cov_diag: [f64; 2], opacity: f64) -> [i64; 4] {
    let arg = opacity / ALPHA_MIN;
    if !(arg >= 1.0) {
        return [0, -1, 0, -1];
    }
    let r2 = 2.0 * arg.ln();
    let ex = (r2 * cov_diag[0]).sqrt() + 1.0;
    let ey = (r2 * cov_diag[1]).sqrt() + 1.0;
    let clamp = |v: f64| v.clamp(i32::MIN as f64, i32::MAX as f64) as i64;
    [
        clamp((mean[0] - ex).floor()),
        clamp((mean[0] + ex).ceil()),
        clamp((mean[1] - ey).floor()),
        clamp((mean[1] + ey).ceil()),
    ]
}

/// Alpha of `s` at pixel `(px, py)`, clamped to [`ALPHA_MAX`], plus the
/// unclamped Gaussian falloff.
#[inline]
pub(crate) fn splat_alpha(s: &PreparedSplat, px: f64, py: f64) -> (f64, f64) {
    let dx = px - s.mean[0];
    let dy = py - s.mean[1];
    let power = -0.5 * (s.conic[0] * dx * dx + s.conic[2] * dy * dy) - s.conic[1] * dx * dy;
    let falloff = power.exp();
    ((s.opacity * falloff).min(ALPHA_MAX), falloff)
}

/// Front-to-back compositing of `order` (indices into `splats`) at one pixel.
#[inline]
fn composite(splats: &[PreparedSplat], order: impl Iterator<Item = usize>, px: f64, py: f64, bg: [f64; 3]) -> [f64; 3] {
    let mut t = 1.0;
    let mut c = [0.0; 3];
    for i in order {
        let s = &splats[i];
        let (alpha, _) = splat_alpha(s, px, py);
        if alpha < ALPHA_MIN {
            continue;
        }
        let w = alpha * t;
        for k in 0..3 {
            c[k] += s.color[k] * w;
        }
        t *= 1.0 - alpha;
        if t < TRANSMITTANCE_MIN {
            break;
        }
    }
    [c[0] + bg[0] * t, c[1] + bg[1] * t, c[2] + bg[2] * t]
}

#[inline]
fn first_opaque_depth(splats: &[PreparedSplat], order: impl Iterator<Item = usize>, px: f64, py: f64) -> f32 {
    for i in order {
        let s = &splats[i];
        if splat_alpha(s, px, py).0 > 0.5 {
            return s.depth as f32;
        }
    }
    f32::INFINITY
}

/// For each tile (row-major), the indices into `splats` whose influence box
/// overlaps it, in compositing order.
pub(crate) fn tile_lists(splats: &[PreparedSplat], width: u32, height: u32) -> Vec<Vec<u32>> {
    let tiles_x = width.div_ceil(TILE_SIZE) as i64;
    let tiles_y = height.div_ceil(TILE_SIZE) as i64;
    let mut lists = vec![Vec::new(); (tiles_x * tiles_y) as usize];
    let ts = TILE_SIZE as i64;
    for (i, s) in splats.iter().enumerate() {
        let [x0, x1, y0, y1] = s.bbox;
        if x0 > x1 || x1 < 0 || y1 < 0 || x0 >= width as i64 || y0 >= height as i64 {
            continue;
        }
        let tx0 = x0.max(0) / ts;
        let tx1 = x1.min(width as i64 - 1) / ts;
        let ty0 = y0.max(0) / ts;
        let ty1 = y1.min(height as i64 - 1) / ts;
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                lists[(ty * tiles_x + tx) as usize].push(i as u32);
            }
        }
    }
    lists
}

fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    if workers == 0 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(f),
        Err(e) => {
            log::warn!("falling back to the global pool: {e}");
            f()
        }
    }
}

/// Evaluates `pixel` over every tile in parallel and assembles the result
/// row-major with `channels` values per pixel.
fn run_tiles<T, F>(width: u32, height: u32, channels: usize, fill: T, workers: usize, pixel: F) -> Vec<T>
where
    T: Copy + Send + Sync,
    F: Fn(usize, u32, u32, &mut [T]) + Sync,
{
    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    let tiles: Vec<(usize, Vec<T>)> = with_workers(workers, || {
        (0..(tiles_x * tiles_y) as usize)
            .into_par_iter()
            .map(|tile| {
                let tx = tile as u32 % tiles_x;
                let ty = tile as u32 / tiles_x;
                let mut buf = vec![fill; (TILE_SIZE * TILE_SIZE) as usize * channels];
                for y in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(height) {
                    for x in tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(width) {
                        let local = ((y - ty * TILE_SIZE) * TILE_SIZE + (x - tx * TILE_SIZE)) as usize * channels;
                        pixel(tile, x, y, &mut buf[local..local + channels]);
                    }
                }
                (tile, buf)
            })
            .collect()
    });
    let mut out = vec![fill; width as usize * height as usize * channels];
    for (tile, buf) in tiles {
        let tx = tile as u32 % tiles_x;
        let ty = tile as u32 / tiles_x;
        for y in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(height) {
            let x0 = tx * TILE_SIZE;
            let x1 = ((tx + 1) * TILE_SIZE).min(width);
            let local = ((y - ty * TILE_SIZE) * TILE_SIZE) as usize * channels;
            let dst = (y as usize * width as usize + x0 as usize) * channels;
            let n = (x1 - x0) as usize * channels;
            out[dst..dst + n].copy_from_slice(&buf[local..local + n]);
        }
    }
    out
}

/// Tiled render with the default options.
pub fn render(scene: &SplatScene, cam: &PinholeCamera, background: [f64; 3]) -> Image {
    render_with(scene, cam, background, &RenderOptions::default()).image
}

pub fn render_with(scene: &SplatScene, cam: &PinholeCamera, background: [f64; 3], opts: &RenderOptions) -> RenderOutput {
    let prepared = prepare(scene, cam);
    let lists = tile_lists(&prepared.splats, cam.width, cam.height);
    let splats = &prepared.splats;
    let pixels = run_tiles(cam.width, cam.height, 3, 0f32, opts.workers, |tile, x, y, out| {
        let c = composite(splats, lists[tile].iter().map(|&i| i as usize), x as f64, y as f64, background);
        for k in 0..3 {
            out[k] = c[k] as f32;
        }
    });
    RenderOutput {
        image: Image { width: cam.width, height: cam.height, pixels },
        stats: prepared.stats,
    }
}

/// Brute-force render: every pixel composites every projected splat.
pub fn render_reference(scene: &SplatScene, cam: &PinholeCamera, background: [f64; 3]) -> Image {
    let prepared = prepare(scene, cam);
    let n = prepared.splats.len();
    let mut pixels = Vec::with_capacity(cam.width as usize * cam.height as usize * 3);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let c = composite(&prepared.splats, 0..n, x as f64, y as f64, background);
            pixels.extend(c.iter().map(|&v| v as f32));
        }
    }
    Image { width: cam.width, height: cam.height, pixels }
}

/// Depth of the first splat (in compositing order) whose alpha exceeds 0.5.
pub fn render_depth(scene: &SplatScene, cam: &PinholeCamera) -> DepthImage {
    let prepared = prepare(scene, cam);
    let lists = tile_lists(&prepared.splats, cam.width, cam.height);
    let splats = &prepared.splats;
    let depth = run_tiles(cam.width, cam.height, 1, f32::INFINITY, 0, |tile, x, y, out| {
        out[0] = first_opaque_depth(splats, lists[tile].iter().map(|&i| i as usize), x as f64, y as f64);
    });
    DepthImage { width: cam.width, height: cam.height, depth }
}

pub fn render_depth_reference(scene: &SplatScene, cam: &PinholeCamera) -> DepthImage {
    let prepared = prepare(scene, cam);
    let n = prepared.splats.len();
    let mut depth = Vec::with_capacity(cam.width as usize * cam.height as usize);
    for y in 0..cam.height {
        for x in 0..cam.width {
            depth.push(first_opaque_depth(&prepared.splats, 0..n, x as f64, y as f64));
        }
    }
    DepthImage { width: cam.width, height: cam.height, depth }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Intrinsics;
    use crate::splat::Gaussian3D;
    use crate::Pose;
    use nalgebra::Vector3;

    fn cam() -> PinholeCamera {
        Intrinsics { fx: 100.0, fy: 100.0, cx: 64.0, cy: 64.0, width: 128, height: 128 }.with_pose(Pose::identity())
    }

    #[test]
    fn empty_scene_is_background() {
        let img = render(&SplatScene::empty("world"), &cam(), [0.0; 3]);
        assert!(img.pixels.iter().all(|&v| v == 0.0));
        let img = render(&SplatScene::empty("world"), &cam(), [0.25, 0.5, 1.0]);
        assert_eq!(img.pixel(5, 7), [0.25, 0.5, 1.0]);
        let d = render_depth(&SplatScene::empty("world"), &cam());
        assert!(d.depth.iter().all(|v| v.is_infinite()));
    }

    #[test]
    fn opaque_centered_gaussian_saturates_center() {
        let g = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, 5.0), 2.0, 1.0, [1.0, 0.0, 0.0]);
        let scene = SplatScene::new(vec![g], "world").unwrap();
        let img = render(&scene, &cam(), [0.0; 3]);
        // α = min(1 · e⁰, 0.99) at the center.
        let p = img.pixel(64, 64);
        assert!(p[0] >= 0.98, "{p:?}");
        assert_eq!(p[1], 0.0);
        let d = render_depth(&scene, &cam());
        assert!((d.at(64, 64) - 5.0).abs() < 1e-6);
    }

    #[test]
    fn transparent_gaussian_changes_nothing() {
        let a = Gaussian3D::isotropic(Vector3::new(0.1, 0.0, 4.0), 0.3, 0.7, [0.2, 0.9, 0.1]);
        let clear = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, 3.0), 0.5, 0.0, [1.0; 3]);
        let base = SplatScene::new(vec![a.clone()], "world").unwrap();
        let with = SplatScene::new(vec![a, clear], "world").unwrap();
        assert_eq!(render(&base, &cam(), [0.1; 3]), render(&with, &cam(), [0.1; 3]));
    }

    #[test]
    fn depth_sort_puts_nearer_splat_in_front() {
        let far = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, 6.0), 1.0, 1.0, [0.0, 0.0, 1.0]);
        let near = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, 3.0), 1.0, 1.0, [1.0, 0.0, 0.0]);
        let scene = SplatScene::new(vec![far, near], "world").unwrap();
        let p = render(&scene, &cam(), [0.0; 3]).pixel(64, 64);
        assert!(p[0] > 0.98 && p[2] < 0.02);
        assert!((render_depth(&scene, &cam()).at(64, 64) - 3.0).abs() < 1e-6);
    }

    #[test]
    fn stats_count_culled() {
        let behind = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, -2.0), 1.0, 1.0, [1.0; 3]);
        let front = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, 2.0), 1.0, 1.0, [1.0; 3]);
        let scene = SplatScene::new(vec![behind, front], "world").unwrap();
        let out = render_with(&scene, &cam(), [0.0; 3], &RenderOptions::default());
        assert_eq!(out.stats, RenderStats { visible: 1, culled: 1, singular: 0 });
    }

    #[test]
    fn non_multiple_of_tile_size() {
        let cam = Intrinsics { fx: 40.0, fy: 40.0, cx: 18.5, cy: 11.0, width: 37, height: 23 }.with_pose(Pose::identity());
        let g = Gaussian3D::isotropic(Vector3::new(0.05, -0.02, 1.0), 0.1, 0.8, [0.3, 0.6, 0.9]);
        let scene = SplatScene::new(vec![g], "world").unwrap();
        assert_eq!(render(&scene, &cam, [0.5; 3]), render_reference(&scene, &cam, [0.5; 3]));
    }

    #[test]
    fn influence_box_empty_below_floor() {
        let b = influence_box([0.0, 0.0], [1.0, 1.0], ALPHA_MIN * 0.5);
        assert!(b[0] > b[1]);
    }
}
