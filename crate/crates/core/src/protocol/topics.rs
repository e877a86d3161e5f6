//! Topic names and their payload schemas.
//!
//! JSON topics carry UTF-8 JSON objects; unknown fields are rejected.
//!
//! | topic               | direction | payload                                  |
//! |---------------------|-----------|------------------------------------------|
//! | `/base/cmd_vel`     | client    | [`CmdVel`]                               |
//! | `/arm/target_pose`  | client    | [`TargetPose`]                           |
//! | `/session/command`  | client    | [`SessionCommand`]                       |
//! | `/base/camera`      | server    | video, RGB8                              |
//! | `/ee/camera`        | server    | video, RGB8                              |
//! | `/ee/depth`         | server    | video, `f32` depth                       |
//! | `/arm/joint_states` | server    | [`JointStates`]                          |
//! | `/session/phase`    | server    | [`PhaseStatus`], latched                 |
//! | `/splat/scene`      | server    | `.splat` chunks, latched                 |
//! | `/protocol/error`   | server    | UTF-8 diagnostic for one client          |

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::{decode_video, ProtocolError};
use crate::robot::{BaseCommand, EETarget};
use crate::session::{FeedbackPacket, IkStatus, OperatorCommand, Phase, SessionEvent};

pub const BASE_CMD_VEL: &str = "/base/cmd_vel";
pub const BASE_CAMERA: &str = "/base/camera";
pub const EE_CAMERA: &str = "/ee/camera";
pub const EE_DEPTH: &str = "/ee/depth";
pub const ARM_TARGET_POSE: &str = "/arm/target_pose";
pub const ARM_JOINT_STATES: &str = "/arm/joint_states";
pub const SESSION_PHASE: &str = "/session/phase";
pub const SESSION_COMMAND: &str = "/session/command";
pub const SPLAT_SCENE: &str = "/splat/scene";
pub const PROTOCOL_ERROR: &str = "/protocol/error";

/// Topics clients publish commands on.
pub const COMMAND_TOPICS: [&str; 3] = [BASE_CMD_VEL, ARM_TARGET_POSE, SESSION_COMMAND];
/// Topics only the server publishes on.
pub const SERVER_TOPICS: [&str; 7] =
    [BASE_CAMERA, EE_CAMERA, EE_DEPTH, ARM_JOINT_STATES, SESSION_PHASE, SPLAT_SCENE, PROTOCOL_ERROR];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CmdVel {
    pub vx: f64,
    pub vy: f64,
    #[serde(default)]
    pub omega: f64,
}

impl From<CmdVel> for BaseCommand {
    fn from(c: CmdVel) -> Self {
        BaseCommand { vx: c.vx, vy: c.vy, omega: c.omega }
    }
}

/// End-effector goal in the splat frame. Orientation is `[w, x, y, z]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetPose {
    pub position: [f64; 3],
    #[serde(default)]
    pub orientation: Option<[f64; 4]>,
}

impl TargetPose {
    pub fn to_target(&self) -> Result<EETarget, String> {
        if !self.position.iter().all(|v| v.is_finite()) {
            return Err("position must be finite".into());
        }
        let orientation = match self.orientation {
            None => None,
            Some([w, x, y, z]) => {
                let q = Quaternion::new(w, x, y, z);
                let n = q.norm();
                if !n.is_finite() || n < 1e-9 {
                    return Err("orientation must be a non-zero finite quaternion".into());
                }
                Some(UnitQuaternion::from_quaternion(q))
            }
        };
        Ok(EETarget { position: Vector3::from(self.position), orientation })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SessionCommand {
    BeginReconstruction,
    AbortReconstruction,
    ReleaseDrag,
    SwitchToLocomotion,
    /// Runs `ticks` control ticks. Only honoured by a server on the stepped
    /// clock.
    Advance { ticks: u32 },
}

impl SessionCommand {
    pub fn operator_command(&self) -> Option<OperatorCommand> {
        match self {
            SessionCommand::BeginReconstruction => Some(OperatorCommand::BeginReconstruction),
            SessionCommand::AbortReconstruction => Some(OperatorCommand::AbortReconstruction),
            SessionCommand::ReleaseDrag => Some(OperatorCommand::ReleaseDrag),
            SessionCommand::SwitchToLocomotion => Some(OperatorCommand::SwitchToLocomotion),
            SessionCommand::Advance { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireBase {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

/// Published every tick. Poses are in the base frame except `base`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointStates {
    pub tick: u64,
    pub timestamp: f64,
    pub base: WireBase,
    pub joints: Vec<f64>,
    pub ee_position: [f64; 3],
    /// `[w, x, y, z]`.
    pub ee_orientation: [f64; 4],
    pub ik_status: IkStatus,
}

impl JointStates {
    pub fn from_packet(p: &FeedbackPacket) -> Self {
        let t = p.ee_pose.translation.vector;
        let q = p.ee_pose.rotation;
        JointStates {
            tick: p.tick,
            timestamp: p.robot.timestamp,
            base: WireBase { x: p.robot.base.x, y: p.robot.base.y, yaw: p.robot.base.yaw },
            joints: p.robot.joints.clone(),
            ee_position: [t.x, t.y, t.z],
            ee_orientation: [q.w, q.i, q.j, q.k],
            ik_status: p.ik_status,
        }
    }
}

/// Outcome of the most recent command received on a command topic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandOutcome {
    pub command: String,
    pub accepted: bool,
    #[serde(default)]
    pub reason: Option<String>,
}

/// Session status and diagnostics. Published when anything in it changes
/// and after every command; latched for late subscribers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseStatus {
    pub phase: Phase,
    pub tick: u64,
    pub splat_version: u64,
    pub splat_stale: bool,
    pub ik_status: IkStatus,
    /// Commands taken from the session queue so far, accepted or not.
    pub commands: u64,
    pub last_command: Option<CommandOutcome>,
    /// Most recent reconstruction outcome.
    pub last_reconstruction: Option<SessionEvent>,
    /// Messages discarded by the drop-oldest policy, all subscribers.
    pub dropped: u64,
}

fn json<'a, T: Deserialize<'a>>(topic: &str, payload: &'a [u8]) -> Result<T, ProtocolError> {
    serde_json::from_slice(payload).map_err(|e| ProtocolError::Schema { topic: topic.into(), reason: e.to_string() })
}

pub fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("wire types serialize")
}

pub fn parse_cmd_vel(payload: &[u8]) -> Result<CmdVel, ProtocolError> {
    let c: CmdVel = json(BASE_CMD_VEL, payload)?;
    if ![c.vx, c.vy, c.omega].iter().all(|v| v.is_finite()) {
        return Err(ProtocolError::Schema { topic: BASE_CMD_VEL.into(), reason: "velocities must be finite".into() });
    }
    Ok(c)
}

pub fn parse_target_pose(payload: &[u8]) -> Result<EETarget, ProtocolError> {
    let t: TargetPose = json(ARM_TARGET_POSE, payload)?;
    t.to_target().map_err(|reason| ProtocolError::Schema { topic: ARM_TARGET_POSE.into(), reason })
}

pub fn parse_session_command(payload: &[u8]) -> Result<SessionCommand, ProtocolError> {
    json(SESSION_COMMAND, payload)
}

pub fn parse_joint_states(payload: &[u8]) -> Result<JointStates, ProtocolError> {
    json(ARM_JOINT_STATES, payload)
}

pub fn parse_phase(payload: &[u8]) -> Result<PhaseStatus, ProtocolError> {
    json(SESSION_PHASE, payload)
}

/// Checks a payload against the schema of its topic. Topics outside the
/// table are free-form and always pass.
pub fn validate_payload(topic: &str, payload: &[u8]) -> Result<(), ProtocolError> {
    let schema = |reason: String| ProtocolError::Schema { topic: topic.into(), reason };
    match topic {
        BASE_CMD_VEL => parse_cmd_vel(payload).map(drop),
        ARM_TARGET_POSE => parse_target_pose(payload).map(drop),
        SESSION_COMMAND => parse_session_command(payload).map(drop),
        ARM_JOINT_STATES => parse_joint_states(payload).map(drop),
        SESSION_PHASE => parse_phase(payload).map(drop),
        BASE_CAMERA | EE_CAMERA => match decode_video(payload) {
            Ok(f) if f.image().is_some() => Ok(()),
            Ok(_) => Err(schema("expected RGB8 pixels".into())),
            Err(e) => Err(schema(e.to_string())),
        },
        EE_DEPTH => match decode_video(payload) {
            Ok(f) if f.image().is_none() => Ok(()),
            Ok(_) => Err(schema("expected depth pixels".into())),
            Err(e) => Err(schema(e.to_string())),
        },
        SPLAT_SCENE => {
            if payload.len() < 8 {
                return Err(schema("chunk shorter than its prefix".into()));
            }
            let index = u32::from_le_bytes(payload[0..4].try_into().unwrap());
            let count = u32::from_le_bytes(payload[4..8].try_into().unwrap());
            if index >= count || !(payload.len() - 8).is_multiple_of(crate::splat::RECORD_SIZE) {
                return Err(schema(format!("chunk {index} of {count} with {} bytes", payload.len())));
            }
            Ok(())
        }
        PROTOCOL_ERROR => std::str::from_utf8(payload).map(drop).map_err(|e| schema(e.to_string())),
        _ => Ok(()),
    }
}
