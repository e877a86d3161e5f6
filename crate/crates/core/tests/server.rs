use std::time::Duration;

use nalgebra::Vector3;
use splatbridge::protocol::topics::{self, CmdVel, PhaseStatus, SessionCommand, TargetPose};
use splatbridge::protocol::{serve, Client, Clock, Frame, Kind, ProtocolError, SceneAssembler, ServerConfig, ServerHandle};
use splatbridge::robot::CameraRig;
use splatbridge::{Gaussian3D, KinematicChain, Phase, Session, SessionConfig, SplatScene};

const WAIT: Duration = Duration::from_secs(20);

fn world() -> SplatScene {
    let gs = (0..5)
        .map(|i| Gaussian3D::isotropic(Vector3::new(0.55 + 0.05 * i as f64, 0.0, 0.2), 0.03, 0.9, [0.8, 0.3, 0.1]))
        .collect();
    SplatScene::new(gs, "world").unwrap()
}

fn start(clock: Clock, ws: bool) -> ServerHandle {
    let mut cfg = SessionConfig::default();
    cfg.capture.rings = vec![
        splatbridge::recon::Ring { radius: 0.15, height: 0.4, count: 3 },
        splatbridge::recon::Ring { radius: 0.1, height: 0.45, count: 3 },
    ];
    cfg.capture.train.iterations = 2;
    let session = Session::new(cfg, KinematicChain::bundled_arm(), CameraRig::default(), world()).unwrap();
    let server_cfg = ServerConfig {
        listen: "127.0.0.1:0".into(),
        ws_listen: ws.then(|| "127.0.0.1:0".into()),
        clock,
        ..ServerConfig::default()
    };
    serve(&server_cfg, session).unwrap()
}

fn next_on(client: &mut Client, topic: &str) -> Frame {
    client.recv_until(WAIT, |f| (f.topic == topic).then(|| f.clone())).unwrap()
}

fn status_after(client: &mut Client, commands: u64) -> PhaseStatus {
    client
        .recv_until(WAIT, |f| {
            (f.topic == topics::SESSION_PHASE)
                .then(|| topics::parse_phase(&f.payload).unwrap())
                .filter(|s| s.commands >= commands)
        })
        .unwrap()
}

fn command(c: SessionCommand) -> Vec<u8> {
    topics::to_json(&c)
}

#[test]
fn new_subscriber_sees_initial_locomotion_phase() {
    let server = start(Clock::Stepped, false);
    let mut c = Client::connect(server.local_addr()).unwrap();
    c.subscribe(topics::SESSION_PHASE).unwrap();
    let s = topics::parse_phase(&next_on(&mut c, topics::SESSION_PHASE).payload).unwrap();
    assert_eq!((s.phase, s.tick, s.commands), (Phase::Locomotion, 0, 0));
}

#[test]
fn ping_is_answered() {
    let server = start(Clock::Stepped, false);
    let mut c = Client::connect(server.local_addr()).unwrap();
    c.send(&Frame::ping()).unwrap();
    let f = c.recv_until(WAIT, |f| Some(f.clone())).unwrap();
    assert_eq!(f.kind, Kind::Pong);
}

#[test]
fn stepped_drive_and_gating_over_the_wire() {
    let server = start(Clock::Stepped, false);
    let mut c = Client::connect(server.local_addr()).unwrap();
    for t in [topics::SESSION_PHASE, topics::ARM_JOINT_STATES, topics::BASE_CAMERA] {
        c.subscribe(t).unwrap();
    }
    c.publish(topics::BASE_CMD_VEL, topics::to_json(&CmdVel { vx: 1.0, vy: 0.0, omega: 0.0 })).unwrap();
    c.publish(topics::SESSION_COMMAND, command(SessionCommand::Advance { ticks: 50 })).unwrap();
    let mut states = Vec::new();
    let mut frames = 0;
    let status = c
        .recv_until(WAIT, |f| match f.topic.as_str() {
            topics::ARM_JOINT_STATES => {
                states.push(topics::parse_joint_states(&f.payload).unwrap());
                None
            }
            topics::BASE_CAMERA => {
                frames += 1;
                None
            }
            _ => topics::parse_phase(&f.payload).ok().filter(|s| s.commands == 2),
        })
        .unwrap();
    assert_eq!(status.tick, 50);
    assert_eq!(states.len(), 50);
    assert_eq!(states[0].tick, 1);
    assert!(states.windows(2).all(|w| w[1].tick == w[0].tick + 1));
    assert!((states.last().unwrap().base.x - 1.0).abs() < 1e-9);
    assert_eq!(frames, 10);

    let drag = TargetPose { position: [0.5, 0.0, 0.5], orientation: None };
    c.publish(topics::ARM_TARGET_POSE, topics::to_json(&drag)).unwrap();
    let s = status_after(&mut c, 3);
    let outcome = s.last_command.unwrap();
    assert_eq!((outcome.command.as_str(), outcome.accepted), ("drag_target", false));
    assert_eq!(s.phase, Phase::Locomotion);
}

#[test]
fn advance_is_refused_on_the_realtime_clock() {
    let server = start(Clock::Realtime, false);
    let mut c = Client::connect(server.local_addr()).unwrap();
    c.subscribe(topics::SESSION_PHASE).unwrap();
    c.publish(topics::SESSION_COMMAND, command(SessionCommand::Advance { ticks: 3 })).unwrap();
    let s = status_after(&mut c, 1);
    assert!(!s.last_command.unwrap().accepted);
}

#[test]
fn reconstruction_publishes_the_scene() {
    let server = start(Clock::Stepped, false);
    let mut c = Client::connect(server.local_addr()).unwrap();
    c.subscribe(topics::SESSION_PHASE).unwrap();
    c.subscribe(topics::SPLAT_SCENE).unwrap();
    c.publish(topics::SESSION_COMMAND, command(SessionCommand::BeginReconstruction)).unwrap();
    c.publish(topics::SESSION_COMMAND, command(SessionCommand::Advance { ticks: 1 })).unwrap();
    let mut asm = SceneAssembler::new();
    let mut scenes = Vec::new();
    let s = c
        .recv_until(WAIT, |f| {
            if f.topic == topics::SPLAT_SCENE {
                scenes.extend(asm.push(&f.payload).unwrap());
                return None;
            }
            topics::parse_phase(&f.payload).ok().filter(|s| s.commands == 2)
        })
        .unwrap();
    assert_eq!(s.phase, Phase::Manipulation);
    // Empty latched scene at start, then the reconstruction.
    assert_eq!(scenes.len(), 2);
    assert!(scenes[0].is_empty());
    let scene = splatbridge::splat::load_splat_binary(&scenes[1]).unwrap();
    assert!(!scene.is_empty());
    assert!(matches!(s.last_reconstruction, Some(splatbridge::session::SessionEvent::ReconstructionFinished { .. })));
}

fn chat_seqs(c: &mut Client, n: usize) -> Vec<u32> {
    let mut got = Vec::new();
    while got.len() < n {
        match c.recv(Duration::from_millis(500)).unwrap() {
            Some(f) if f.topic == "/chat" => got.push(u32::from_le_bytes(f.payload[..].try_into().unwrap())),
            Some(_) => {}
            None => break,
        }
    }
    got
}

/// A burst that fits in the per-topic buffer arrives complete and in order
/// at every subscriber.
#[test]
fn broadcasts_reach_every_client_in_order() {
    let server = start(Clock::Stepped, false);
    let mut a = Client::connect(server.local_addr()).unwrap();
    let mut b = Client::connect(server.local_addr()).unwrap();
    let mut p = Client::connect(server.local_addr()).unwrap();
    for c in [&mut a, &mut b] {
        c.subscribe("/chat").unwrap();
        c.send(&Frame::ping()).unwrap();
        c.recv_until(WAIT, |f| (f.kind == Kind::Pong).then_some(())).unwrap();
    }
    for i in 0..64u32 {
        p.publish("/chat", i.to_le_bytes().to_vec()).unwrap();
    }
    for c in [&mut a, &mut b] {
        assert_eq!(chat_seqs(c, 64), (0..64).collect::<Vec<_>>());
    }
}

/// Bursts beyond the buffer lose the oldest messages, never reorder, and
/// the losses show up in the session diagnostics.
#[test]
fn overflowing_bursts_drop_oldest_and_are_counted() {
    let server = start(Clock::Stepped, false);
    let mut a = Client::connect(server.local_addr()).unwrap();
    let mut p = Client::connect(server.local_addr()).unwrap();
    a.subscribe("/chat").unwrap();
    a.subscribe(topics::SESSION_PHASE).unwrap();
    a.send(&Frame::ping()).unwrap();
    a.recv_until(WAIT, |f| (f.kind == Kind::Pong).then_some(())).unwrap();
    for i in 0..2000u32 {
        p.publish("/chat", i.to_le_bytes().to_vec()).unwrap();
    }
    let got = chat_seqs(&mut a, 2000);
    assert!(got.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(got.last(), Some(&1999));
    let dropped = 2000 - got.len() as u64;
    p.publish(topics::SESSION_COMMAND, command(SessionCommand::Advance { ticks: 0 })).unwrap();
    assert_eq!(status_after(&mut a, 1).dropped, dropped);
}

#[test]
fn malformed_client_is_dropped_and_others_continue() {
    let server = start(Clock::Stepped, false);
    let mut good = Client::connect(server.local_addr()).unwrap();
    good.subscribe(topics::SESSION_PHASE).unwrap();
    next_on(&mut good, topics::SESSION_PHASE);

    let mut bad = Client::connect(server.local_addr()).unwrap();
    bad.send_raw(&[2, 0, 0, 0, 0x63, 0]).unwrap();
    let diag = next_on(&mut bad, topics::PROTOCOL_ERROR);
    assert!(String::from_utf8(diag.payload).unwrap().contains("unknown frame kind 99"));
    let end = bad.recv_until(WAIT, |_| None::<()>).unwrap_err();
    assert_eq!(end, ProtocolError::Closed);

    good.publish(topics::SESSION_COMMAND, command(SessionCommand::Advance { ticks: 2 })).unwrap();
    assert_eq!(status_after(&mut good, 1).tick, 2);
}

#[test]
fn schema_violations_get_a_diagnostic_without_disconnect() {
    let server = start(Clock::Stepped, false);
    let mut c = Client::connect(server.local_addr()).unwrap();
    c.publish(topics::BASE_CMD_VEL, b"{\"vx\":1}".to_vec()).unwrap();
    next_on(&mut c, topics::PROTOCOL_ERROR);
    c.publish(topics::SESSION_PHASE, b"{}".to_vec()).unwrap();
    next_on(&mut c, topics::PROTOCOL_ERROR);
    c.send(&Frame::ping()).unwrap();
    c.recv_until(WAIT, |f| (f.kind == Kind::Pong).then_some(())).unwrap();
}

#[test]
fn second_server_on_the_same_port_fails() {
    let server = start(Clock::Stepped, false);
    let session = Session::new(SessionConfig::default(), KinematicChain::bundled_arm(), CameraRig::default(), world()).unwrap();
    let cfg = ServerConfig { listen: server.local_addr().to_string(), ..ServerConfig::default() };
    let err = serve(&cfg, session).err().unwrap();
    assert!(err.to_string().contains("cannot listen"), "{err}");
}

#[test]
fn shutdown_returns_the_session() {
    let server = start(Clock::Stepped, false);
    server.inject(topics::SESSION_COMMAND, command(SessionCommand::Advance { ticks: 4 })).unwrap();
    let mut c = Client::connect(server.local_addr()).unwrap();
    c.subscribe(topics::SESSION_PHASE).unwrap();
    status_after(&mut c, 1);
    assert_eq!(server.shutdown().unwrap().tick_count(), 4);
}

#[test]
fn web_socket_bridge_carries_frames() {
    use tungstenite::Message;
    let server = start(Clock::Stepped, true);
    let url = format!("ws://{}", server.ws_addr().unwrap());
    let (mut ws, _) = tungstenite::connect(url).unwrap();
    let send = |ws: &mut tungstenite::WebSocket<_>, f: Frame| {
        ws.send(Message::Binary(splatbridge::protocol::encode_frame(&f).unwrap())).unwrap()
    };
    send(&mut ws, Frame::subscribe(topics::SESSION_PHASE));
    send(&mut ws, Frame::ping());
    let mut seen = Vec::new();
    while seen.len() < 2 {
        if let Message::Binary(b) = ws.read().unwrap() {
            match splatbridge::protocol::decode_frame(&b).unwrap() {
                splatbridge::protocol::Decoded::Frame { frame, consumed } => {
                    assert_eq!(consumed, b.len());
                    seen.push(frame.kind);
                }
                other => panic!("{other:?}"),
            }
        }
    }
    assert_eq!(seen, [Kind::Publish, Kind::Pong]);

    // Two frames in one message is a framing violation.
    let mut two = splatbridge::protocol::encode_frame(&Frame::ping()).unwrap();
    two.extend(two.clone());
    ws.send(Message::Binary(two)).unwrap();
    let mut diag = None;
    while let Ok(m) = ws.read() {
        if let Message::Binary(b) = m {
            if let Ok(splatbridge::protocol::Decoded::Frame { frame, .. }) = splatbridge::protocol::decode_frame(&b) {
                if frame.topic == topics::PROTOCOL_ERROR {
                    diag = Some(frame);
                }
            }
        }
    }
    assert!(diag.is_some());
}
