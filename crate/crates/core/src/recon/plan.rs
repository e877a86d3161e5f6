use std::f64::consts::TAU;
use std::fmt::Write as _;

use nalgebra::{Point3, Quaternion, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::ReconError;
use crate::raster::look_at;
use crate::Pose;

/// One ring of capture poses around the scene center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ring {
    /// Horizontal distance from the center, meters.
    pub radius: f64,
    /// Height above the center, meters.
    pub height: f64,
    pub count: usize,
}

/// Two rings of twelve, the documented default schedule. Both look down
/// steeply enough for the bundled arm's wrist camera to reach every pose
/// around a tabletop point 0.65 m ahead of the base.
pub fn default_rings() -> Vec<Ring> {
    vec![
        Ring { radius: 0.15, height: 0.4, count: 12 },
        Ring { radius: 0.1, height: 0.45, count: 12 },
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapturePlan {
    /// camera → world, camera looking along its +z axis.
    pub poses: Vec<Pose>,
    pub look_at: Point3<f64>,
    pub rings: Vec<Ring>,
}

/// Evenly spaced poses on each ring, all looking at `center` with world +z as up.
pub fn plan_capture(center: &Point3<f64>, rings: &[Ring]) -> Result<CapturePlan, ReconError> {
    let mut poses = Vec::new();
    for (ring_index, ring) in rings.iter().enumerate() {
        if !(ring.radius > 0.0) || ring.count == 0 || !ring.height.is_finite() {
            return Err(ReconError::InvalidRing { ring: ring_index });
        }
        for k in 0..ring.count {
            let theta = TAU * k as f64 / ring.count as f64;
            let eye = center + Vector3::new(ring.radius * theta.cos(), ring.radius * theta.sin(), ring.height);
            let pose = look_at(&eye, center, &Vector3::z()).map_err(|_| ReconError::DegenerateRing { ring: ring_index })?;
            poses.push(pose);
        }
    }
    Ok(CapturePlan { poses, look_at: *center, rings: rings.to_vec() })
}

impl CapturePlan {
    /// Line-oriented text form:
    ///
    /// ```text
    /// # capture-plan v1
    /// look_at <x> <y> <z>
    /// ring <radius> <height> <count>        (one per ring)
    /// pose <px> <py> <pz> <qw> <qx> <qy> <qz>   (camera → world, one per pose)
    /// ```
    ///
    /// Numbers use the shortest representation that round-trips exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# capture-plan v1\n");
        let c = self.look_at;
        writeln!(out, "look_at {} {} {}", c.x, c.y, c.z).unwrap();
        for r in &self.rings {
            writeln!(out, "ring {} {} {}", r.radius, r.height, r.count).unwrap();
        }
        for p in &self.poses {
            let t = p.translation.vector;
            let q = p.rotation.quaternion();
            writeln!(out, "pose {} {} {} {} {} {} {}", t.x, t.y, t.z, q.w, q.i, q.j, q.k).unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, ReconError> {
        let bad = |line: usize, msg: &str| ReconError::BadPlan { line: line + 1, reason: msg.to_string() };
        let mut look = None;
        let mut rings = Vec::new();
        let mut poses = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or_default();
            let nums: Vec<f64> = parts
                .map(|s| s.parse::<f64>().map_err(|_| bad(i, "bad number")))
                .collect::<Result<_, _>>()?;
            match (key, nums.len()) {
                ("look_at", 3) => look = Some(Point3::new(nums[0], nums[1], nums[2])),
                ("ring", 3) => {
                    if nums[2] < 1.0 || nums[2].fract() != 0.0 {
                        return Err(bad(i, "ring count must be a positive integer"));
                    }
                    rings.push(Ring { radius: nums[0], height: nums[1], count: nums[2] as usize });
                }
                ("pose", 7) => {
                    let q = Quaternion::new(nums[3], nums[4], nums[5], nums[6]);
                    if !(q.norm() > 0.0) {
                        return Err(bad(i, "zero quaternion"));
                    }
                    poses.push(Pose::from_parts(
                        Translation3::new(nums[0], nums[1], nums[2]),
                        // Keep exact bits of already-unit input so text round trips.
                        if (q.norm() - 1.0).abs() < 1e-12 { UnitQuaternion::new_unchecked(q) } else { UnitQuaternion::from_quaternion(q) },
                    ));
                }
                _ => return Err(bad(i, "unrecognized line")),
            }
        }
        let look_at = look.ok_or_else(|| bad(0, "missing look_at line"))?;
        Ok(Self { poses, look_at, rings })
    }
}
