use nalgebra::Vector3;
use proptest::prelude::*;

use super::*;
use crate::recon::Ring;
use crate::splat::Gaussian3D;

/// A small tabletop patch around the default capture center, with the
/// base at the world origin.
fn tabletop() -> SplatScene {
    let mut gs = Vec::new();
    for i in 0..6 {
        for j in 0..6 {
            let p = Vector3::new(0.5 + 0.06 * i as f64, -0.15 + 0.06 * j as f64, 0.2);
            let shade = 0.3 + 0.1 * ((i + j) % 3) as f64;
            gs.push(Gaussian3D::new(p, Vector3::new(0.035, 0.035, 0.005), [1.0, 0.0, 0.0, 0.0], 0.9, [shade, shade, 0.2]).unwrap());
        }
    }
    gs.push(Gaussian3D::isotropic(Vector3::new(0.65, 0.0, 0.23), 0.02, 0.95, [0.9, 0.1, 0.1]));
    SplatScene::new(gs, "world").unwrap()
}

fn fast_config() -> SessionConfig {
    let mut cfg = SessionConfig::default();
    cfg.capture.rings = vec![Ring { radius: 0.15, height: 0.4, count: 3 }, Ring { radius: 0.1, height: 0.45, count: 3 }];
    cfg.capture.seed.stride = 8;
    cfg.capture.train.iterations = 3;
    cfg
}

fn session(cfg: SessionConfig) -> Session {
    Session::new(cfg, KinematicChain::bundled_arm(), CameraRig::default(), tabletop()).unwrap()
}

fn drive(vx: f64, vy: f64, omega: f64) -> OperatorCommand {
    OperatorCommand::Drive(BaseCommand { vx, vy, omega })
}

fn to_manipulation(s: &mut Session) {
    s.handle_command(OperatorCommand::BeginReconstruction).unwrap();
    let p = s.tick();
    assert_eq!(p.phase, Phase::Manipulation, "{:?}", p.events);
}

#[test]
fn drag_in_locomotion_is_rejected_without_change() {
    let mut s = session(fast_config());
    let before = (s.phase(), s.robot().clone(), s.joint_target().to_vec());
    let target = EETarget { position: Vector3::new(0.5, 0.0, 0.5), orientation: None };
    let err = s.handle_command(OperatorCommand::DragTarget(target)).unwrap_err();
    assert_eq!(err.phase, Phase::Locomotion);
    assert_eq!(err.command, "drag_target");
    assert_eq!(before, (s.phase(), s.robot().clone(), s.joint_target().to_vec()));
}

#[test]
fn begin_reconstruction_enters_reconstructing() {
    let mut s = session(fast_config());
    let effects = s.handle_command(OperatorCommand::BeginReconstruction).unwrap();
    assert_eq!(s.phase(), Phase::Reconstructing);
    assert_eq!(effects, vec![Effect::PhaseChanged { from: Phase::Locomotion, to: Phase::Reconstructing }]);
}

#[test]
fn one_second_of_forward_drive() {
    let mut s = session(SessionConfig { frame_stride: 1000, ..fast_config() });
    s.handle_command(drive(1.0, 0.0, 0.0)).unwrap();
    for _ in 0..50 {
        s.tick();
    }
    assert!((s.robot().base.x - 1.0).abs() < 1e-9, "{}", s.robot().base.x);
    assert_eq!(s.robot().base.y, 0.0);
}

#[test]
fn idle_ticks_only_advance_time() {
    let mut s = session(fast_config());
    let before = s.robot().clone();
    for _ in 0..10 {
        s.tick();
    }
    let after = s.robot();
    assert_eq!((after.base, &after.joints), (before.base, &before.joints));
    assert!((after.timestamp - 0.2).abs() < 1e-12);
}

#[test]
fn frame_sequence_numbers_increase() {
    let mut s = session(fast_config());
    let mut last = [0u32; 2];
    let mut seen = 0;
    for _ in 0..1000 {
        let p = s.tick();
        for f in &p.frames {
            let k = f.camera as usize;
            assert!(f.seq > last[k]);
            last[k] = f.seq;
            seen += 1;
        }
    }
    assert_eq!(seen, 2 * 1000 / 5);
}

#[test]
fn unreachable_plan_has_too_few_captures() {
    let mut s = session(fast_config());
    s.handle_command(OperatorCommand::BeginReconstruction).unwrap();
    let plan = crate::recon::plan_capture(&nalgebra::Point3::new(5.0, 0.0, 0.2), &[Ring { radius: 0.2, height: 0.3, count: 4 }]).unwrap();
    assert_eq!(
        run_capture_routine(&s, &plan),
        Err(SessionError::TooFewCaptures { reachable: 0, planned: 4 })
    );
}

#[test]
fn captured_views_match_forward_kinematics_and_renderer() {
    let mut s = session(SessionConfig::default());
    s.handle_command(OperatorCommand::BeginReconstruction).unwrap();
    let report = run_capture_routine(&s, &s.capture_plan().unwrap()).unwrap();
    assert_eq!(report.views.len(), 24);
    assert_eq!(report.skipped, 0);
    for (view, q) in report.views.iter().zip(&report.joints) {
        let expected = s.chain().forward_kinematics(q).unwrap() * s.rig().ee_mount;
        let got = view.cam.camera_to_world();
        assert!((got.translation.vector - expected.translation.vector).norm() < 1e-9);
        assert!(got.rotation.angle_to(&expected.rotation) < 1e-9);
        let state = RobotState { joints: q.clone(), ..s.robot().clone() };
        let world_cam = camera_poses(s.chain(), &state, s.rig()).unwrap().ee;
        assert_eq!(view.image, crate::raster::render(s.world(), &world_cam, [0.0; 3]));
    }
}

#[test]
fn capture_is_not_allowed_outside_reconstructing() {
    let s = session(fast_config());
    assert_eq!(
        run_capture_routine(&s, &s.capture_plan().unwrap()),
        Err(SessionError::NotReconstructing(Phase::Locomotion))
    );
}

#[test]
fn drag_converges_under_the_rate_limit() {
    let mut s = session(SessionConfig { frame_stride: 1000, ..fast_config() });
    to_manipulation(&mut s);
    assert!(s.splat().is_some_and(|sp| !sp.is_empty()));
    let target = Vector3::new(0.6, 0.1, 0.4);
    let effects = s.handle_command(OperatorCommand::DragTarget(EETarget { position: target, orientation: None })).unwrap();
    assert!(matches!(effects[..], [Effect::JointCommand { status: IkStatus::Ok { .. }, .. }]));
    let limit = s.config().joint_rate * s.period() + 1e-12;
    let mut prev = s.robot().joints.clone();
    let mut dist = f64::INFINITY;
    for _ in 0..500 {
        let p = s.tick();
        for (a, b) in p.robot.joints.iter().zip(&prev) {
            assert!((a - b).abs() <= limit);
        }
        dist = (p.ee_pose.translation.vector - target).norm();
        prev = p.robot.joints.clone();
    }
    assert!(dist < 1e-3, "{dist}");
}

#[test]
fn unreachable_drag_freezes_at_best_iterate() {
    let mut s = session(fast_config());
    to_manipulation(&mut s);
    let far = EETarget { position: Vector3::new(3.0, 0.0, 0.5), orientation: None };
    let effects = s.handle_command(OperatorCommand::DragTarget(far)).unwrap();
    match &effects[..] {
        [Effect::JointCommand { status: IkStatus::Unconverged { position_error, .. }, joints }] => {
            assert!(*position_error > 1.0);
            s.chain().check_limits(joints).unwrap();
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn abort_discards_and_switch_retains_stale_splat() {
    let mut s = session(fast_config());
    s.handle_command(OperatorCommand::BeginReconstruction).unwrap();
    s.handle_command(OperatorCommand::AbortReconstruction).unwrap();
    assert_eq!(s.phase(), Phase::Locomotion);
    assert!(s.splat().is_none());
    // The aborted run never executes.
    assert!(s.tick().events.is_empty());

    to_manipulation(&mut s);
    let version = s.splat_version();
    s.handle_command(OperatorCommand::SwitchToLocomotion).unwrap();
    let p = s.tick();
    assert_eq!(p.phase, Phase::Locomotion);
    assert!(p.splat_stale);
    assert_eq!(p.splat_version, version);
    assert!(s.splat().is_some());
    assert!(s.handle_command(OperatorCommand::ReleaseDrag).is_err());
}

#[test]
fn reconstruct_requires_round_trip_through_locomotion() {
    let mut s = session(fast_config());
    to_manipulation(&mut s);
    assert!(s.handle_command(OperatorCommand::BeginReconstruction).is_err());
    assert!(s.handle_command(OperatorCommand::ReleaseDrag).unwrap().is_empty());
}

#[test]
fn leaving_locomotion_stops_the_base() {
    let mut s = session(fast_config());
    s.handle_command(drive(0.5, 0.0, 0.2)).unwrap();
    s.tick();
    let effects = s.handle_command(OperatorCommand::BeginReconstruction).unwrap();
    assert!(effects.contains(&Effect::BaseCommandSet(BaseCommand::default())));
    let base = s.tick().robot.base;
    for _ in 0..5 {
        assert_eq!(s.tick().robot.base, base);
    }
}

#[test]
fn failed_reconstruction_returns_to_locomotion() {
    let mut cfg = fast_config();
    cfg.capture.center = [5.0, 0.0, 0.2];
    let mut s = session(cfg);
    s.handle_command(OperatorCommand::BeginReconstruction).unwrap();
    let p = s.tick();
    assert_eq!(p.phase, Phase::Locomotion);
    assert!(matches!(p.events[..], [SessionEvent::ReconstructionFailed { .. }]));
}

fn command_strategy() -> impl Strategy<Value = OperatorCommand> {
    prop_oneof![
        (-2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64).prop_map(|(a, b, c)| drive(a, b, c)),
        Just(OperatorCommand::BeginReconstruction),
        Just(OperatorCommand::AbortReconstruction),
        (0.3..0.8f64, -0.3..0.3f64, 0.2..0.7f64)
            .prop_map(|(x, y, z)| OperatorCommand::DragTarget(EETarget { position: Vector3::new(x, y, z), orientation: None })),
        Just(OperatorCommand::ReleaseDrag),
        Just(OperatorCommand::SwitchToLocomotion),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn phase_gating_holds(cmds in prop::collection::vec((command_strategy(), 0usize..3), 1..40)) {
        let mut s = session(SessionConfig { frame_stride: 1000, ..fast_config() });
        for (cmd, ticks) in cmds {
            let phase = s.phase();
            if let Ok(effects) = s.handle_command(cmd) {
                for e in effects {
                    if let Effect::JointCommand { .. } = e {
                        prop_assert_eq!(phase, Phase::Manipulation);
                    }
                }
            }
            for _ in 0..ticks {
                let before = s.robot().base;
                let p = s.tick();
                if p.phase == Phase::Manipulation {
                    prop_assert_eq!(p.robot.base, before);
                    prop_assert!(s.splat().is_some_and(|sp| !sp.is_empty()));
                }
            }
            if s.phase() == Phase::Manipulation {
                prop_assert!(s.splat().is_some_and(|sp| !sp.is_empty()));
            }
        }
    }
}

#[test]
fn identical_streams_give_identical_packets() {
    let run = || {
        let mut s = session(fast_config());
        let mut packets = Vec::new();
        s.handle_command(drive(0.2, 0.1, 0.3)).unwrap();
        packets.extend((0..7).map(|_| s.tick()));
        s.handle_command(OperatorCommand::BeginReconstruction).unwrap();
        packets.extend((0..3).map(|_| s.tick()));
        s.handle_command(OperatorCommand::DragTarget(EETarget { position: Vector3::new(0.55, 0.05, 0.45), orientation: None }))
            .unwrap();
        packets.extend((0..12).map(|_| s.tick()));
        (packets, s.splat().cloned())
    };
    assert_eq!(run(), run());
}
