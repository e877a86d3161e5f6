//! Shared inputs for the benchmarks.

use nalgebra::{Isometry3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatbridge::raster::{Intrinsics, PinholeCamera};
use splatbridge::{Gaussian3D, SplatScene};

/// `n` random Gaussians in front of [`camera`].
pub fn scene(n: usize, seed: u64) -> SplatScene {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let gs = (0..n)
        .map(|_| {
            let mean = Vector3::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(2.0..5.0));
            let scale = Vector3::new(r.gen_range(0.02..0.2), r.gen_range(0.02..0.2), r.gen_range(0.02..0.2));
            let q = [1.0, r.gen_range(-0.5..0.5), r.gen_range(-0.5..0.5), r.gen_range(-0.5..0.5)];
            let color = [r.gen_range(0.0..1.0), r.gen_range(0.0..1.0), r.gen_range(0.0..1.0)];
            Gaussian3D::new(mean, scale, q, r.gen_range(0.1..1.0), color).expect("valid random gaussian")
        })
        .collect();
    SplatScene::new(gs, "world").expect("non-empty frame id")
}

pub fn camera(size: u32) -> PinholeCamera {
    Intrinsics::centered(size as f64, size, size).with_pose(Isometry3::identity())
}
