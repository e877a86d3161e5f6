//! Headerless 32-byte-per-Gaussian `.splat` records.
//!
//! | bytes  | content                                   |
//! |--------|-------------------------------------------|
//! | 0..12  | mean x, y, z as `f32` LE                  |
//! | 12..24 | scale x, y, z as `f32` LE (linear meters) |
//! | 24..28 | R, G, B, A as `u8`, `round(v · 255)`      |
//! | 28..32 | rotation w, x, y, z as `u8`               |
//!
//! Rotation components are stored as `round(c · 128 + 128)` clamped to
//! `[0, 255]` and decoded as `(b − 128) / 128` followed by renormalization.
//! The encoder only emits byte quadruples that are fixed points of
//! decode-then-encode, so a second round trip reproduces the bytes exactly.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use super::{Gaussian3D, SplatError, SplatScene, DEFAULT_FRAME};

pub const RECORD_SIZE: usize = 32;

pub fn load_splat_binary(bytes: &[u8]) -> Result<SplatScene, SplatError> {
    if bytes.len() % RECORD_SIZE != 0 {
        return Err(SplatError::TruncatedRecord(bytes.len()));
    }
    let mut gaussians = Vec::with_capacity(bytes.len() / RECORD_SIZE);
    for (index, rec) in bytes.chunks_exact(RECORD_SIZE).enumerate() {
        let f = |i: usize| f32::from_le_bytes(rec[i * 4..i * 4 + 4].try_into().unwrap()) as f64;
        let mean = Vector3::new(f(0), f(1), f(2));
        let scale = Vector3::new(f(3), f(4), f(5));
        if !mean.iter().all(|v| v.is_finite()) {
            return Err(SplatError::NonFiniteValue { index, field: "mean" });
        }
        if !scale.iter().all(|v| v.is_finite()) {
            return Err(SplatError::NonFiniteValue { index, field: "scale" });
        }
        let q = decode_quaternion([rec[28], rec[29], rec[30], rec[31]]).ok_or(SplatError::ZeroQuaternion(index))?;
        let g = Gaussian3D {
            mean,
            scale,
            rotation: UnitQuaternion::new_unchecked(Quaternion::new(q[0], q[1], q[2], q[3])),
            opacity: rec[27] as f64 / 255.0,
            color: [rec[24] as f64 / 255.0, rec[25] as f64 / 255.0, rec[26] as f64 / 255.0],
        };
        g.validate().map_err(|reason| SplatError::InvalidGaussian { index, reason })?;
        gaussians.push(g);
    }
    SplatScene::new(gaussians, DEFAULT_FRAME)
}

pub fn encode_splat_binary(scene: &SplatScene) -> Vec<u8> {
    let mut out = Vec::with_capacity(scene.len() * RECORD_SIZE);
    for g in scene.gaussians() {
        for v in g.mean.iter().chain(g.scale.iter()) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        for c in g.color.iter().chain(std::iter::once(&g.opacity)) {
            out.push(quantize_unit(*c));
        }
        out.extend_from_slice(&encode_quaternion(g.rotation_wxyz()));
    }
    out
}

fn quantize_unit(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn quantize_component(c: f64) -> u8 {
    (c * 128.0 + 128.0).round().clamp(0.0, 255.0) as u8
}

fn quantize(q: [f64; 4]) -> [u8; 4] {
    q.map(quantize_component)
}

/// Decodes and renormalizes; `None` when all components decode to zero.
pub fn decode_quaternion(b: [u8; 4]) -> Option<[f64; 4]> {
    let raw = b.map(|v| (v as f64 - 128.0) / 128.0);
    let norm = raw.iter().map(|c| c * c).sum::<f64>().sqrt();
    if norm == 0.0 {
        return None;
    }
    Some(raw.map(|c| c / norm))
}

fn is_fixed_point(b: [u8; 4]) -> bool {
    decode_quaternion(b).is_some_and(|q| quantize(q) == b)
}

/// Quantizes a unit quaternion `(w, x, y, z)` to the nearest byte quadruple
/// that survives decode-then-encode unchanged.
pub fn encode_quaternion(q: [f64; 4]) -> [u8; 4] {
    let direct = quantize(q);
    if is_fixed_point(direct) {
        return direct;
    }
    for radius in 1i32..=3 {
        let mut best: Option<([u8; 4], f64)> = None;
        let span = 2 * radius + 1;
        for code in 0..span.pow(4) {
            let mut cand = direct;
            let mut c = code;
            let mut valid = true;
            for slot in cand.iter_mut() {
                let offset = c % span - radius;
                c /= span;
                let v = *slot as i32 + offset;
                if !(0..=255).contains(&v) {
                    valid = false;
                    break;
                }
                *slot = v as u8;
            }
            if !valid || !is_fixed_point(cand) {
                continue;
            }
            let decoded = decode_quaternion(cand).unwrap();
            let dot: f64 = decoded.iter().zip(q.iter()).map(|(a, b)| a * b).sum();
            let err = 1.0 - dot.abs();
            if best.is_none_or(|(_, e)| err < e) {
                best = Some((cand, err));
            }
        }
        if let Some((b, _)) = best {
            return b;
        }
    }
    direct
}
