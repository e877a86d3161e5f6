use nalgebra::{Matrix2, Matrix2x3, Matrix3, Point3, Quaternion, UnitQuaternion, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{PosedImage, ReconError};
use crate::raster::{prepare, projection_jacobian, splat_alpha, tile_lists, PinholeCamera, ALPHA_MAX, ALPHA_MIN, TILE_SIZE, TRANSMITTANCE_MIN};
use crate::splat::{covariance_of, Gaussian3D, SplatScene};

/// Adam step sizes per parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub mean: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub opacity_logit: f64,
    pub color: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self { mean: 2e-3, log_scale: 1e-2, rotation: 5e-3, opacity_logit: 5e-2, color: 1e-2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: LearningRates,
    pub background: [f64; 3],
    /// Seeds the view sampler; unused when every step sees all views.
    pub rng_seed: u64,
    /// Views per step, 0 for all.
    pub views_per_step: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { iterations: 300, lr: LearningRates::default(), background: [0.0; 3], rng_seed: 0, views_per_step: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub scene: SplatScene,
    /// Loss before each step, summed over the views that step used.
    pub losses: Vec<f64>,
    /// Loss of the returned scene summed over all targets.
    pub final_loss: f64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;
const LOG_SCALE_RANGE: (f64, f64) = (-12.0, 3.0);

/// Parameter vector per Gaussian: mean (3), log scale (3), quaternion
/// w,x,y,z (4), opacity logit (1), color (3).
pub const N_PARAMS: usize = 14;
pub type GaussianParams = [f64; N_PARAMS];
type Params = GaussianParams;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn params_of(g: &Gaussian3D) -> Params {
    let q = g.rotation.quaternion();
    let o = g.opacity.clamp(1e-6, 1.0 - 1e-6);
    [
        g.mean.x,
        g.mean.y,
        g.mean.z,
        g.scale.x.ln(),
        g.scale.y.ln(),
        g.scale.z.ln(),
        q.w,
        q.i,
        q.j,
        q.k,
        (o / (1.0 - o)).ln(),
        g.color[0],
        g.color[1],
        g.color[2],
    ]
}

fn gaussian_of(p: &Params) -> Gaussian3D {
    Gaussian3D {
        mean: Vector3::new(p[0], p[1], p[2]),
        scale: Vector3::new(p[3].exp(), p[4].exp(), p[5].exp()),
        rotation: UnitQuaternion::from_quaternion(Quaternion::new(p[6], p[7], p[8], p[9])),
        opacity: sigmoid(p[10]),
        color: [p[11], p[12], p[13]],
    }
}

fn scene_of(params: &[Params], frame_id: &str) -> Result<SplatScene, ReconError> {
    SplatScene::new(params.iter().map(gaussian_of).collect(), frame_id).map_err(ReconError::from)
}

/// Mean squared error between the render of `scene` from `view.cam` and
/// `view.image`, over all pixels and channels, in double precision.
pub fn view_loss(scene: &SplatScene, view: &PosedImage, background: [f64; 3]) -> f64 {
    loss_and_grad(scene, view, background, false).0
}

/// The optimizer's parameter vector for `g`.
pub fn gaussian_params(g: &Gaussian3D) -> GaussianParams {
    params_of(g)
}

/// Inverse of [`gaussian_params`]; the quaternion is normalized.
pub fn gaussian_from_params(p: &GaussianParams) -> Gaussian3D {
    gaussian_of(p)
}

/// Per-view MSE and its gradient with respect to each Gaussian's
/// [`GaussianParams`]. The quaternion part is projected onto the tangent
/// space of the unit sphere.
pub fn loss_gradient(scene: &SplatScene, view: &PosedImage, background: [f64; 3]) -> (f64, Vec<GaussianParams>) {
    loss_and_grad(scene, view, background, true)
}

fn batch_loss_and_grad(scene: &SplatScene, targets: &[PosedImage], batch: &[usize], bg: [f64; 3]) -> (f64, Vec<Params>) {
    let per_view: Vec<(f64, Vec<Params>)> = batch.par_iter().map(|&i| loss_and_grad(scene, &targets[i], bg, true)).collect();
    let mut loss = 0.0;
    let mut grad = vec![[0.0; N_PARAMS]; scene.len()];
    for (l, g) in &per_view {
        loss += l;
        for (acc, gi) in grad.iter_mut().zip(g) {
            for k in 0..N_PARAMS {
                acc[k] += gi[k];
            }
        }
    }
    (loss, grad)
}

/// Peak signal-to-noise ratio in dB for values in [0, 1].
pub fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Fits `init` to `targets` by Adam on the summed per-view MSE.
///
/// The Gaussian count is fixed. Quaternions are renormalized and colors
/// clamped to [0, 1] after every step. The α floor and clamp, and early
/// termination of compositing, are treated as constants when
/// differentiating.
pub fn train_splats(targets: &[PosedImage], init: &SplatScene, cfg: &TrainConfig) -> Result<TrainResult, ReconError> {
    if targets.is_empty() || init.is_empty() {
        return Err(ReconError::EmptyTraining);
    }
    let frame = init.frame_id().to_string();
    let mut params: Vec<Params> = init.gaussians().iter().map(params_of).collect();
    if cfg.iterations == 0 {
        let final_loss = targets.iter().map(|v| view_loss(init, v, cfg.background)).sum();
        return Ok(TrainResult { scene: init.clone(), losses: Vec::new(), final_loss });
    }
    let lr = group_rates(&cfg.lr);
    let mut m = vec![[0.0; N_PARAMS]; params.len()];
    let mut v = vec![[0.0; N_PARAMS]; params.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut last_finite = init.clone();

    for iteration in 0..cfg.iterations {
        let Ok(scene) = scene_of(&params, &frame) else {
            return Err(ReconError::NonFiniteLoss { iteration, last_scene: Box::new(last_finite), losses });
        };
        let batch: Vec<usize> = if cfg.views_per_step == 0 || cfg.views_per_step >= targets.len() {
            (0..targets.len()).collect()
        } else {
            let mut idx = rand::seq::index::sample(&mut rng, targets.len(), cfg.views_per_step).into_vec();
            idx.sort_unstable();
            idx
        };
        let (loss, grad) = batch_loss_and_grad(&scene, targets, &batch, cfg.background);
        if !loss.is_finite() || grad.iter().flatten().any(|x| !x.is_finite()) {
            return Err(ReconError::NonFiniteLoss { iteration, last_scene: Box::new(last_finite), losses });
        }
        losses.push(loss);
        last_finite = scene;

        let t = (iteration + 1) as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for ((p, g), (mi, vi)) in params.iter_mut().zip(&grad).zip(m.iter_mut().zip(v.iter_mut())) {
            for k in 0..N_PARAMS {
                mi[k] = BETA1 * mi[k] + (1.0 - BETA1) * g[k];
                vi[k] = BETA2 * vi[k] + (1.0 - BETA2) * g[k] * g[k];
                p[k] -= lr[k] * (mi[k] / c1) / ((vi[k] / c2).sqrt() + EPS);
            }
            project_params(p);
        }
    }
    let final_loss = match scene_of(&params, &frame) {
        Ok(scene) => {
            let loss: f64 = targets.iter().map(|v| view_loss(&scene, v, cfg.background)).sum();
            loss.is_finite().then_some((scene, loss))
        }
        Err(_) => None,
    };
    let Some((scene, final_loss)) = final_loss else {
        return Err(ReconError::NonFiniteLoss { iteration: cfg.iterations, last_scene: Box::new(last_finite), losses });
    };
    Ok(TrainResult { scene, losses, final_loss })
}

fn group_rates(lr: &LearningRates) -> Params {
    let mut out = [0.0; N_PARAMS];
    out[0..3].fill(lr.mean);
    out[3..6].fill(lr.log_scale);
    out[6..10].fill(lr.rotation);
    out[10] = lr.opacity_logit;
    out[11..14].fill(lr.color);
    out
}

fn project_params(p: &mut Params) {
    let n = (p[6] * p[6] + p[7] * p[7] + p[8] * p[8] + p[9] * p[9]).sqrt();
    if n > 0.0 && n.is_finite() {
        for q in &mut p[6..10] {
            *q /= n;
        }
    } else {
        p[6..10].copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
    }
    for s in &mut p[3..6] {
        *s = s.clamp(LOG_SCALE_RANGE.0, LOG_SCALE_RANGE.1);
    }
    for c in &mut p[11..14] {
        *c = c.clamp(0.0, 1.0);
    }
}

/// Screen-space gradient of one projected splat: mean (2), conic a,b,c
/// (3), opacity (1), color (3).
type ScreenGrad = [f64; 9];

/// Loss of one view and, when `want_grad`, its gradient per Gaussian.
fn loss_and_grad(scene: &SplatScene, view: &PosedImage, bg: [f64; 3], want_grad: bool) -> (f64, Vec<Params>) {
    let cam = &view.cam;
    let prepared = prepare(scene, cam);
    let splats = &prepared.splats;
    let lists = tile_lists(splats, cam.width, cam.height);
    let tiles_x = cam.width.div_ceil(TILE_SIZE);
    let scale = 1.0 / (3.0 * cam.width as f64 * cam.height as f64);

    let per_tile: Vec<(f64, Vec<ScreenGrad>)> = lists
        .par_iter()
        .enumerate()
        .map(|(tile, list)| {
            let tx = tile as u32 % tiles_x;
            let ty = tile as u32 / tiles_x;
            let mut sq = 0.0;
            let mut grads = vec![[0.0; 9]; if want_grad { list.len() } else { 0 }];
            // (position in list, alpha, transmittance before, falloff, clamped)
            let mut contrib: Vec<(usize, f64, f64, f64, bool)> = Vec::new();
            for y in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(cam.height) {
                for x in tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(cam.width) {
                    let (px, py) = (x as f64, y as f64);
                    contrib.clear();
                    let mut t = 1.0;
                    let mut c = [0.0; 3];
                    for (li, &si) in list.iter().enumerate() {
                        let s = &splats[si as usize];
                        let (alpha, falloff) = splat_alpha(s, px, py);
                        if alpha < ALPHA_MIN {
                            continue;
                        }
                        for k in 0..3 {
                            c[k] += s.color[k] * alpha * t;
                        }
                        contrib.push((li, alpha, t, falloff, s.opacity * falloff >= ALPHA_MAX));
                        t *= 1.0 - alpha;
                        if t < TRANSMITTANCE_MIN {
                            break;
                        }
                    }
                    let target = view.image.pixel(x, y);
                    let mut dl_dc = [0.0; 3];
                    for k in 0..3 {
                        let r = c[k] + bg[k] * t - target[k] as f64;
                        sq += r * r;
                        dl_dc[k] = 2.0 * r * scale;
                    }
                    if !want_grad {
                        continue;
                    }
                    // Color contributed by everything behind the current splat.
                    let mut suffix = [bg[0] * t, bg[1] * t, bg[2] * t];
                    for &(li, alpha, t_i, falloff, clamped) in contrib.iter().rev() {
                        let s = &splats[list[li] as usize];
                        let g = &mut grads[li];
                        let mut g_alpha = 0.0;
                        for k in 0..3 {
                            g[6 + k] += dl_dc[k] * alpha * t_i;
                            g_alpha += dl_dc[k] * (s.color[k] * t_i - suffix[k] / (1.0 - alpha));
                            suffix[k] += s.color[k] * alpha * t_i;
                        }
                        if clamped {
                            continue;
                        }
                        g[5] += g_alpha * falloff;
                        let g_power = g_alpha * alpha;
                        let dx = px - s.mean[0];
                        let dy = py - s.mean[1];
                        let [a, b, cc] = s.conic;
                        g[0] += g_power * (a * dx + b * dy);
                        g[1] += g_power * (b * dx + cc * dy);
                        g[2] += g_power * -0.5 * dx * dx;
                        g[3] += g_power * -dx * dy;
                        g[4] += g_power * -0.5 * dy * dy;
                    }
                }
            }
            (sq, grads)
        })
        .collect();

    let mut loss = 0.0;
    let mut screen = vec![[0.0; 9]; if want_grad { splats.len() } else { 0 }];
    for ((sq, grads), list) in per_tile.iter().zip(&lists) {
        loss += sq;
        for (g, &si) in grads.iter().zip(list) {
            let acc = &mut screen[si as usize];
            for k in 0..9 {
                acc[k] += g[k];
            }
        }
    }
    loss *= scale;
    let mut out = vec![[0.0; N_PARAMS]; if want_grad { scene.len() } else { 0 }];
    for (s, g) in splats.iter().zip(&screen) {
        out[s.index] = chain_to_params(&scene.gaussians()[s.index], cam, s.conic, g);
    }
    (loss, out)
}

/// Back-propagates a screen-space gradient through projection and the
/// covariance factorization.
fn chain_to_params(g: &Gaussian3D, cam: &PinholeCamera, conic: [f64; 3], sg: &ScreenGrad) -> Params {
    let w = cam.pose.rotation.to_rotation_matrix().into_inner();
    let t = cam.pose.transform_point(&Point3::from(g.mean)).coords;
    let j: Matrix2x3<f64> = projection_jacobian(cam, &t);
    let sigma = covariance_of(g);
    let sigma_cam = w * sigma * w.transpose();

    let a = Matrix2::new(conic[0], conic[1], conic[1], conic[2]);
    let g_a = Matrix2::new(sg[2], sg[3] * 0.5, sg[3] * 0.5, sg[4]);
    let g_cov2 = -(a * g_a * a);
    let g_sigma_cam = j.transpose() * g_cov2 * j;
    let g_j = 2.0 * g_cov2 * j * sigma_cam;

    let (fx, fy) = (cam.fx, cam.fy);
    let (iz, iz2) = (1.0 / t.z, 1.0 / (t.z * t.z));
    let mut g_t = j.transpose() * Vector2::new(sg[0], sg[1]);
    g_t.x += g_j[(0, 2)] * -fx * iz2;
    g_t.y += g_j[(1, 2)] * -fy * iz2;
    g_t.z += g_j[(0, 0)] * -fx * iz2
        + g_j[(0, 2)] * 2.0 * fx * t.x * iz2 * iz
        + g_j[(1, 1)] * -fy * iz2
        + g_j[(1, 2)] * 2.0 * fy * t.y * iz2 * iz;
    let g_mean = w.transpose() * g_t;

    let g_sigma = w.transpose() * g_sigma_cam * w;
    let r = g.rotation.to_rotation_matrix().into_inner();
    let s2 = Matrix3::from_diagonal(&g.scale.component_mul(&g.scale));
    let g_r = 2.0 * g_sigma * r * s2;
    let local = r.transpose() * g_sigma * r;
    let g_log_scale = Vector3::from_fn(|k, _| 2.0 * local[(k, k)] * g.scale[k] * g.scale[k]);

    let q = g.rotation.quaternion();
    let (qw, qx, qy, qz) = (q.w, q.i, q.j, q.k);
    let gm = |i: usize, k: usize| g_r[(i, k)];
    let g_q = [
        2.0 * (-qz * gm(0, 1) + qy * gm(0, 2) + qz * gm(1, 0) - qx * gm(1, 2) - qy * gm(2, 0) + qx * gm(2, 1)),
        2.0 * (qy * gm(0, 1) + qz * gm(0, 2) + qy * gm(1, 0) - 2.0 * qx * gm(1, 1) - qw * gm(1, 2) + qz * gm(2, 0)
            + qw * gm(2, 1)
            - 2.0 * qx * gm(2, 2)),
        2.0 * (-2.0 * qy * gm(0, 0) + qx * gm(0, 1) + qw * gm(0, 2) + qx * gm(1, 0) + qz * gm(1, 2) - qw * gm(2, 0)
            + qz * gm(2, 1)
            - 2.0 * qy * gm(2, 2)),
        2.0 * (-2.0 * qz * gm(0, 0) - qw * gm(0, 1) + qx * gm(0, 2) + qw * gm(1, 0) - 2.0 * qz * gm(1, 1)
            + qy * gm(1, 2)
            + qx * gm(2, 0)
            + qy * gm(2, 1)),
    ];
    // Parameters hold a unit quaternion; project out the radial component.
    let qv = [qw, qx, qy, qz];
    let radial: f64 = (0..4).map(|k| qv[k] * g_q[k]).sum();

    let o = g.opacity;
    let mut out = [0.0; N_PARAMS];
    out[0..3].copy_from_slice(g_mean.as_slice());
    out[3..6].copy_from_slice(g_log_scale.as_slice());
    for k in 0..4 {
        out[6 + k] = g_q[k] - qv[k] * radial;
    }
    out[10] = sg[5] * o * (1.0 - o);
    out[11..14].copy_from_slice(&sg[6..9]);
    out
}
