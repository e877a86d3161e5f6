//! TOML configuration shared by every subcommand.
//!
//! ```toml
//! seed = 7                          # required for scenario runs
//! world = "builtin:occluded_button" # or a .splat / .ply path
//! chain = "arm.toml"                # optional; bundled 7-joint arm otherwise
//!
//! [server]                          # protocol::ServerConfig
//! listen = "127.0.0.1:7400"
//! ws_listen = "127.0.0.1:7401"
//! clock = "realtime"                # or "stepped"
//!
//! [session]                         # session::SessionConfig
//! tick_rate = 50.0
//!
//! [rig.base]                        # camera intrinsics and mounts
//! focal = 60.0
//! width = 96
//! height = 72
//! mount = { xyz = [0.3, 0.0, 0.5], quat_wxyz = [0.5, -0.5, 0.5, -0.5] }
//!
//! [train]                           # recon::TrainConfig for `train`
//! iterations = 300
//! ```
//!
//! Relative paths resolve against the directory of the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use splatbridge::protocol::ServerConfig;
use splatbridge::raster::Intrinsics;
use splatbridge::recon::TrainConfig;
use splatbridge::robot::{CameraRig, TransformSpec};
use splatbridge::{KinematicChain, SessionConfig, SplatScene};

use crate::{worlds, CliError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub focal: f64,
    pub width: u32,
    pub height: u32,
    pub mount: TransformSpec,
}

impl CameraSpec {
    fn intrinsics(&self) -> Intrinsics {
        Intrinsics::centered(self.focal, self.width, self.height)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigConfig {
    pub base: Option<CameraSpec>,
    pub ee: Option<CameraSpec>,
}

impl RigConfig {
    pub fn build(&self) -> Result<CameraRig, CliError> {
        let mut rig = CameraRig::default();
        if let Some(b) = &self.base {
            rig.base_intrinsics = b.intrinsics();
            rig.base_mount = b.mount.to_pose().map_err(|e| CliError::Usage(format!("rig.base.mount: {e}")))?;
        }
        if let Some(e) = &self.ee {
            rig.ee_intrinsics = e.intrinsics();
            rig.ee_mount = e.mount.to_pose().map_err(|err| CliError::Usage(format!("rig.ee.mount: {err}")))?;
        }
        Ok(rig)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,
    pub world: String,
    pub chain: Option<PathBuf>,
    pub server: ServerConfig,
    pub session: SessionConfig,
    pub rig: RigConfig,
    pub train: TrainConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: None,
            world: format!("{}{}", worlds::BUILTIN_PREFIX, worlds::OCCLUDED_BUTTON),
            chain: None,
            server: ServerConfig::default(),
            session: SessionConfig::default(),
            rig: RigConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl Config {
    /// Parses and validates a config file. Every referenced file must exist.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let mut cfg: Config =
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {}", path.display(), e.message())))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        if let Some(c) = &mut cfg.chain {
            *c = dir.join(&*c);
        }
        if !cfg.world.starts_with(worlds::BUILTIN_PREFIX) {
            cfg.world = dir.join(&cfg.world).to_string_lossy().into_owned();
        }
        cfg.check(&path.display().to_string())?;
        Ok(cfg)
    }

    fn check(&self, origin: &str) -> Result<(), CliError> {
        if let Some(c) = &self.chain {
            if !c.is_file() {
                return Err(CliError::Io(format!("{origin}: field `chain`: no such file {}", c.display())));
            }
        }
        match self.world.strip_prefix(worlds::BUILTIN_PREFIX) {
            Some(name) if worlds::builtin(name).is_none() => {
                return Err(CliError::Usage(format!("{origin}: field `world`: unknown builtin world `{name}`")))
            }
            Some(_) => {}
            None if !Path::new(&self.world).is_file() => {
                return Err(CliError::Io(format!("{origin}: field `world`: no such file {}", self.world)))
            }
            None => {}
        }
        self.session.validate().map_err(|e| CliError::Usage(format!("{origin}: field `session`: {e}")))
    }

    /// Propagates the seed into every seeded component.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed.or(self.seed) {
            self.seed = Some(s);
            self.session.rng_seed = s;
            self.session.capture.train.rng_seed = s;
            self.train.rng_seed = s;
        }
        self
    }

    pub fn load_chain(&self) -> Result<KinematicChain, CliError> {
        match &self.chain {
            None => Ok(KinematicChain::bundled_arm()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
                KinematicChain::from_toml(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn load_world(&self) -> Result<SplatScene, CliError> {
        match self.world.strip_prefix(worlds::BUILTIN_PREFIX) {
            Some(name) => worlds::builtin(name).ok_or_else(|| CliError::Usage(format!("unknown builtin world `{name}`"))),
            None => crate::commands::load_scene(Path::new(&self.world)),
        }
    }
}
