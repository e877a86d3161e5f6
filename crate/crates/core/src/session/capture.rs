use nalgebra::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Phase, Session, SessionError};
use crate::raster::{render_depth, render_with, RenderOptions};
use crate::recon::{plan_capture, CapturePlan, PosedImage};
use crate::robot::{camera_poses, ik_solve, EETarget, RobotError, RobotState};

/// Images gathered by the capture routine, with the joint configuration
/// used for each.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptureReport {
    /// Wrist-camera views with base-frame camera poses.
    pub views: Vec<PosedImage>,
    pub joints: Vec<Vec<f64>>,
    /// Plan poses no IK attempt could reach.
    pub skipped: usize,
    pub planned: usize,
}

impl Session {
    /// The capture plan configured for this session, in the base frame.
    pub fn capture_plan(&self) -> Result<CapturePlan, SessionError> {
        let c = self.cfg.capture.center;
        Ok(plan_capture(&Point3::new(c[0], c[1], c[2]), &self.cfg.capture.rings)?)
    }
}

/// Moves the wrist camera through `plan` (base frame) and records a
/// color and depth image at every reachable pose.
///
/// IK is solved for the full camera pose, seeded from the previous
/// solution, then from the current joints, then from up to
/// `ik_restarts` random configurations drawn from the session's seed.
/// Unreachable poses are skipped. Camera poses attached to the views come
/// from forward kinematics, not from the plan. The live robot state is not
/// changed.
pub fn run_capture_routine(session: &Session, plan: &CapturePlan) -> Result<CaptureReport, SessionError> {
    if session.phase != Phase::Reconstructing {
        return Err(SessionError::NotReconstructing(session.phase));
    }
    let chain = &session.chain;
    let rig = &session.rig;
    let cfg = &session.cfg;
    let home = session.robot.joints.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let ee_mount_inv = rig.ee_mount.inverse();

    let mut solutions = Vec::new();
    let mut previous = home.clone();
    for cam_pose in &plan.poses {
        let ee = cam_pose * ee_mount_inv;
        let target = EETarget { position: ee.translation.vector, orientation: Some(ee.rotation) };
        let attempt = |seed: &[f64]| match ik_solve(chain, &target, seed, &cfg.ik) {
            Ok(sol) => Ok(Some(sol.joints)),
            Err(RobotError::Unconverged { .. }) => Ok(None),
            Err(e) => Err(SessionError::Robot(e)),
        };
        let mut found = attempt(&previous)?;
        if found.is_none() {
            found = attempt(&home)?;
        }
        for _ in 0..cfg.capture.ik_restarts {
            if found.is_some() {
                break;
            }
            let seed: Vec<f64> = chain.joints.iter().map(|j| rng.gen_range(j.lower..=j.upper)).collect();
            found = attempt(&seed)?;
        }
        if let Some(q) = found {
            previous = q.clone();
            solutions.push(q);
        }
    }
    let skipped = plan.poses.len() - solutions.len();
    if skipped > 0 {
        log::info!("capture routine skipped {skipped} of {} unreachable poses", plan.poses.len());
    }
    if solutions.len() < 2 {
        return Err(SessionError::TooFewCaptures { reachable: solutions.len(), planned: plan.poses.len() });
    }

    let opts = RenderOptions { workers: cfg.render_workers };
    let views = solutions
        .par_iter()
        .map(|q| {
            let state = RobotState { base: session.robot.base, joints: q.clone(), timestamp: session.robot.timestamp };
            let world_cams = camera_poses(chain, &state, rig)?;
            let image = render_with(&session.world, &world_cams.ee, cfg.background, &opts).image;
            let depth = render_depth(&session.world, &world_cams.ee);
            let base_c2w = chain.forward_kinematics(q)? * rig.ee_mount;
            let cam = rig.ee_intrinsics.with_pose(base_c2w.inverse());
            Ok(PosedImage::new(image, Some(depth), cam)?)
        })
        .collect::<Result<Vec<_>, SessionError>>()?;
    Ok(CaptureReport { views, joints: solutions, skipped, planned: plan.poses.len() })
}
