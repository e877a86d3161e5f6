//! Scripted operator sessions run against a live server over TCP.
//!
//! A script is TOML: optional `world`, `session` and `rig` overrides and an
//! ordered `[[steps]]` list. Time only passes on `advance` steps, which run
//! the server on its stepped clock, so a script and a seed fully determine
//! the transcript.
//!
//! ```toml
//! [[steps]]
//! op = "drive"          # vx, vy, omega
//! vx = 0.5
//! vy = 0.0
//! [[steps]]
//! op = "advance"        # ticks
//! ticks = 130
//! [[steps]]
//! op = "expect_base"    # x, y, tolerance (world frame)
//! x = 1.3
//! y = 0.0
//! tolerance = 0.05
//! ```
//!
//! Other steps: `command` (`command = "begin_reconstruction"` and the other
//! session commands), `drag` (`position`, optional `orientation` w,x,y,z in
//! the splat frame), `expect_phase`, `expect_rejected`, `expect_captures`
//! (`min`) and `expect_ee` (`position`, `tolerance`, base frame).

use std::fmt::Write as _;
use std::io::Write;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use splatbridge::protocol::topics::{self, CmdVel, JointStates, PhaseStatus, SessionCommand, TargetPose};
use splatbridge::protocol::{decode_video, serve, Client, Clock, Frame, SceneAssembler, ServerConfig, VideoPixels};
use splatbridge::session::SessionEvent;
use splatbridge::{Phase, Session, SessionConfig};

use crate::config::{Config, RigConfig};
use crate::CliError;

/// Longest single `advance` sent to the server. Staying under the per-topic
/// subscriber buffer keeps the transcript lossless.
const ADVANCE_CHUNK: u32 = 32;
const REPLY_TIMEOUT: Duration = Duration::from_secs(600);

pub const OCCLUDED_BUTTON_SCRIPT: &str = include_str!("../scenarios/occluded_button.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Step {
    Drive {
        vx: f64,
        vy: f64,
        #[serde(default)]
        omega: f64,
    },
    Advance {
        ticks: u32,
    },
    Command {
        command: String,
    },
    Drag {
        position: [f64; 3],
        #[serde(default)]
        orientation: Option<[f64; 4]>,
    },
    ExpectPhase {
        phase: Phase,
    },
    ExpectRejected,
    ExpectCaptures {
        min: usize,
    },
    ExpectBase {
        x: f64,
        y: f64,
        tolerance: f64,
    },
    ExpectEe {
        position: [f64; 3],
        tolerance: f64,
    },
}

impl Step {
    fn name(&self) -> &'static str {
        match self {
            Step::Drive { .. } => "drive",
            Step::Advance { .. } => "advance",
            Step::Command { .. } => "command",
            Step::Drag { .. } => "drag",
            Step::ExpectPhase { .. } => "expect_phase",
            Step::ExpectRejected => "expect_rejected",
            Step::ExpectCaptures { .. } => "expect_captures",
            Step::ExpectBase { .. } => "expect_base",
            Step::ExpectEe { .. } => "expect_ee",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Script {
    pub name: String,
    /// Overrides the config's world.
    pub world: Option<String>,
    pub session: Option<SessionConfig>,
    pub rig: Option<RigConfig>,
    pub steps: Vec<Step>,
}

impl Script {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let script: Script = toml::from_str(text).map_err(|e| CliError::Usage(format!("script: {}", e.message())))?;
        for (i, s) in script.steps.iter().enumerate() {
            if let Step::Command { command } = s {
                let json = format!("{{\"type\":\"{command}\"}}");
                match topics::parse_session_command(json.as_bytes()) {
                    Ok(SessionCommand::Advance { .. }) | Err(_) => {
                        return Err(CliError::Usage(format!("step {}: unknown command `{command}`", i + 1)))
                    }
                    Ok(_) => {}
                }
            }
        }
        Ok(script)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub transcript: String,
    /// First failing step, 1-based, with the reason.
    pub failure: Option<(usize, String)>,
    pub final_state: Option<JointStates>,
    pub final_status: Option<PhaseStatus>,
}

/// Starts a fresh stepped server on `listen`, runs the script through a TCP
/// client and shuts the server down.
pub fn run(cfg: &Config, script: &Script, listen: &str) -> Result<Outcome, CliError> {
    if cfg.seed.is_none() {
        return Err(CliError::Usage("scenario runs need a seed (--seed or `seed` in the config)".into()));
    }
    let mut cfg = cfg.clone();
    if let Some(w) = &script.world {
        cfg.world = w.clone();
    }
    if let Some(s) = &script.session {
        cfg.session = s.clone();
    }
    if let Some(r) = &script.rig {
        cfg.rig = r.clone();
    }
    let cfg = cfg.clone().with_seed(cfg.seed);
    let session = Session::new(cfg.session.clone(), cfg.load_chain()?, cfg.rig.build()?, cfg.load_world()?)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let server_cfg = ServerConfig { listen: listen.into(), ws_listen: None, clock: Clock::Stepped, ..cfg.server.clone() };
    let server = serve(&server_cfg, session).map_err(|e| CliError::Io(e.to_string()))?;
    let result = drive_script(server.local_addr(), script);
    drop(server);
    result
}

struct Runner {
    client: Client,
    transcript: String,
    sent: u64,
    state: Option<JointStates>,
    status: Option<PhaseStatus>,
    scene: SceneAssembler,
}

fn io(e: splatbridge::protocol::ProtocolError) -> CliError {
    CliError::Io(e.to_string())
}

fn drive_script(addr: std::net::SocketAddr, script: &Script) -> Result<Outcome, CliError> {
    let mut client = Client::connect(addr).map_err(io)?;
    for t in [
        topics::SESSION_PHASE,
        topics::ARM_JOINT_STATES,
        topics::BASE_CAMERA,
        topics::EE_CAMERA,
        topics::EE_DEPTH,
        topics::SPLAT_SCENE,
        topics::PROTOCOL_ERROR,
    ] {
        client.subscribe(t).map_err(io)?;
    }
    let mut r = Runner { client, transcript: String::new(), sent: 0, state: None, status: None, scene: SceneAssembler::new() };
    r.wait_for_ack()?;
    let mut failure = None;
    for (i, step) in script.steps.iter().enumerate() {
        writeln!(r.transcript, "# step {} {}", i + 1, step.name()).unwrap();
        if let Err(reason) = r.step(step)? {
            writeln!(r.transcript, "# FAILED: {reason}").unwrap();
            failure = Some((i + 1, reason));
            break;
        }
    }
    Ok(Outcome { transcript: r.transcript, failure, final_state: r.state, final_status: r.status })
}

impl Runner {
    fn send(&mut self, topic: &str, payload: Vec<u8>) -> Result<(), CliError> {
        self.client.publish(topic, payload).map_err(io)?;
        self.sent += 1;
        self.wait_for_ack()
    }

    /// Logs everything until the status that acknowledges the last command.
    fn wait_for_ack(&mut self) -> Result<(), CliError> {
        let want = self.sent;
        let Self { client, transcript, state, status, scene, .. } = self;
        let result = client.recv_until(REPLY_TIMEOUT, |f| {
            log_frame(transcript, scene, f);
            match f.topic.as_str() {
                topics::ARM_JOINT_STATES => *state = topics::parse_joint_states(&f.payload).ok(),
                topics::SESSION_PHASE => {
                    let s = topics::parse_phase(&f.payload).ok()?;
                    let done = s.commands >= want;
                    *status = Some(s);
                    return done.then_some(());
                }
                _ => {}
            }
            None
        });
        result.map_err(io)
    }

    fn status(&self) -> Result<&PhaseStatus, String> {
        self.status.as_ref().ok_or_else(|| "no session status received".to_string())
    }

    fn step(&mut self, step: &Step) -> Result<Result<(), String>, CliError> {
        match step {
            Step::Drive { vx, vy, omega } => {
                self.send(topics::BASE_CMD_VEL, topics::to_json(&CmdVel { vx: *vx, vy: *vy, omega: *omega }))?
            }
            Step::Advance { ticks } => {
                let mut left = *ticks;
                while left > 0 {
                    let n = left.min(ADVANCE_CHUNK);
                    self.send(topics::SESSION_COMMAND, topics::to_json(&SessionCommand::Advance { ticks: n }))?;
                    left -= n;
                }
            }
            Step::Command { command } => {
                self.send(topics::SESSION_COMMAND, format!("{{\"type\":\"{command}\"}}").into_bytes())?
            }
            Step::Drag { position, orientation } => {
                let t = TargetPose { position: *position, orientation: *orientation };
                self.send(topics::ARM_TARGET_POSE, topics::to_json(&t))?
            }
            Step::ExpectPhase { phase } => {
                let got = self.status().map(|s| s.phase);
                return Ok(match got {
                    Ok(p) if p == *phase => Ok(()),
                    Ok(p) => Err(format!("phase is {p}, expected {phase}")),
                    Err(e) => Err(e),
                });
            }
            Step::ExpectRejected => {
                return Ok(match self.status().map(|s| s.last_command.clone()) {
                    Ok(Some(c)) if !c.accepted => Ok(()),
                    Ok(Some(c)) => Err(format!("{} was accepted", c.command)),
                    Ok(None) => Err("no command has been sent".into()),
                    Err(e) => Err(e),
                });
            }
            Step::ExpectCaptures { min } => {
                return Ok(match self.status().map(|s| s.last_reconstruction.clone()) {
                    Ok(Some(SessionEvent::ReconstructionFinished { captures, .. })) if captures >= *min => Ok(()),
                    Ok(Some(SessionEvent::ReconstructionFinished { captures, .. })) => {
                        Err(format!("{captures} captures, expected at least {min}"))
                    }
                    Ok(Some(SessionEvent::ReconstructionFailed { reason })) => Err(format!("reconstruction failed: {reason}")),
                    Ok(None) => Err("no reconstruction has finished".into()),
                    Err(e) => Err(e),
                });
            }
            Step::ExpectBase { x, y, tolerance } => {
                let Some(s) = &self.state else { return Ok(Err("no joint state received".into())) };
                let d = (s.base.x - x).hypot(s.base.y - y);
                return Ok(if d <= *tolerance {
                    Ok(())
                } else {
                    Err(format!("base at ({}, {}) is {d} m from ({x}, {y})", s.base.x, s.base.y))
                });
            }
            Step::ExpectEe { position, tolerance } => {
                let Some(s) = &self.state else { return Ok(Err("no joint state received".into())) };
                let d = (0..3).map(|k| (s.ee_position[k] - position[k]).powi(2)).sum::<f64>().sqrt();
                return Ok(if d < *tolerance {
                    Ok(())
                } else {
                    Err(format!("end effector at {:?} is {d} m from {position:?}", s.ee_position))
                });
            }
        }
        Ok(Ok(()))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// One line per received message; JSON payloads verbatim, binary ones as
/// header fields plus a hash of the bytes.
fn log_frame(out: &mut String, scene: &mut SceneAssembler, f: &Frame) {
    match f.topic.as_str() {
        topics::BASE_CAMERA | topics::EE_CAMERA | topics::EE_DEPTH => match decode_video(&f.payload) {
            Ok(v) => {
                let kind = if matches!(v.pixels, VideoPixels::Rgb8(_)) { "rgb8" } else { "depth" };
                writeln!(
                    out,
                    "{} seq={} camera={} {}x{} {kind} fnv={:016x}",
                    f.topic,
                    v.seq,
                    v.camera_id,
                    v.width,
                    v.height,
                    fnv1a(&f.payload)
                )
                .unwrap();
            }
            Err(e) => writeln!(out, "{} undecodable: {e}", f.topic).unwrap(),
        },
        topics::SPLAT_SCENE => match scene.push(&f.payload) {
            Ok(Some(bytes)) => writeln!(out, "{} gaussians={} fnv={:016x}", f.topic, bytes.len() / 32, fnv1a(&bytes)).unwrap(),
            Ok(None) => {}
            Err(e) => writeln!(out, "{} bad chunk: {e}", f.topic).unwrap(),
        },
        _ => writeln!(out, "{} {}", f.topic, String::from_utf8_lossy(&f.payload)).unwrap(),
    }
}

/// Writes the transcript and turns a failed step into an assertion error.
pub fn finish(outcome: &Outcome, transcript: Option<&std::path::Path>) -> Result<(), CliError> {
    if let Some(p) = transcript {
        let mut f = std::fs::File::create(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
        f.write_all(outcome.transcript.as_bytes()).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
    }
    match &outcome.failure {
        None => Ok(()),
        Some((step, reason)) => Err(CliError::Assertion(format!("step {step} failed: {reason}"))),
    }
}
