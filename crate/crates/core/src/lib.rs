//! Two-phase loco-manipulation teleoperation on a simulated mobile manipulator.
//!
//! The crate is split along the data flow of a session:
//!
//! * [`splat`] holds the Gaussian scene representation and its file codecs.
//! * [`raster`] projects and alpha-composites Gaussians on the CPU.
//! * [`recon`] plans capture poses, seeds geometry from posed views, runs
//!   bundle adjustment and fits splats by gradient descent.
//! * [`robot`] simulates the base, the serial arm and the mounted cameras.
//! * [`session`] is the phase machine gating operator commands.
//! * [`protocol`] is the framed topic wire format and the TCP / web-socket hub.

pub mod protocol;
pub mod raster;
pub mod recon;
pub mod robot;
pub mod session;
pub mod splat;

pub use raster::{Image, PinholeCamera};
pub use robot::{BaseCommand, EETarget, KinematicChain, RobotState};
pub use session::{OperatorCommand, Phase, Session, SessionConfig};
pub use splat::{Gaussian3D, SplatScene};

/// Rigid transforms are used for camera poses, joint origins and mounts alike.
pub type Pose = nalgebra::Isometry3<f64>;
