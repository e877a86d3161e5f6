//! Procedurally built worlds bundled with the binary.

use nalgebra::Vector3;
use splatbridge::{Gaussian3D, SplatScene};

pub const BUILTIN_PREFIX: &str = "builtin:";
pub const OCCLUDED_BUTTON: &str = "occluded_button";

/// Where the occluded-button script parks the base, world frame.
pub const WAYPOINT: [f64; 2] = [1.3, 0.0];
/// Button center, world frame.
pub const BUTTON: [f64; 3] = [1.95, 0.0, 0.22];
/// Screen standing between the base camera and the button, world x.
pub const SCREEN_X: f64 = 1.75;

pub fn builtin(name: &str) -> Option<SplatScene> {
    match name {
        OCCLUDED_BUTTON => Some(occluded_button()),
        _ => None,
    }
}

/// A table top with a red button, hidden from a base parked at
/// [`WAYPOINT`] by an upright grey screen at the table's front edge.
pub fn occluded_button() -> SplatScene {
    let mut gs = Vec::new();
    let flat = |mean: Vector3<f64>, color: [f64; 3]| {
        Gaussian3D::new(mean, Vector3::new(0.03, 0.03, 0.004), [1.0, 0.0, 0.0, 0.0], 0.9, color).expect("valid table splat")
    };
    for i in 0..7 {
        for j in 0..9 {
            let p = Vector3::new(1.8 + 0.05 * i as f64, -0.2 + 0.05 * j as f64, 0.2);
            let shade = if (i + j) % 2 == 0 { 0.55 } else { 0.45 };
            gs.push(flat(p, [shade, shade * 0.8, 0.3]));
        }
    }
    gs.push(
        Gaussian3D::new(Vector3::from(BUTTON), Vector3::new(0.02, 0.02, 0.012), [1.0, 0.0, 0.0, 0.0], 0.95, [0.9, 0.05, 0.05])
            .expect("valid button splat"),
    );
    for j in 0..11 {
        for k in 0..11 {
            let p = Vector3::new(SCREEN_X, -0.25 + 0.05 * j as f64, 0.1 + 0.05 * k as f64);
            gs.push(
                Gaussian3D::new(p, Vector3::new(0.004, 0.03, 0.03), [1.0, 0.0, 0.0, 0.0], 0.98, [0.6, 0.6, 0.65])
                    .expect("valid screen splat"),
            );
        }
    }
    SplatScene::new(gs, "world").expect("non-empty frame id")
}
