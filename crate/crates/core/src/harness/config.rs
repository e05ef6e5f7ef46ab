use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contact::GroundParams;
use crate::control::ControlGains;
use crate::dynamics::RobotParams;
use crate::erg::ErgParams;
use crate::gait::GaitPlan;
use crate::mpc::MpcConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid TOML: {0}")]
    Syntax(String),
    #[error("at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("bad override `{0}`: {1}")]
    Override(String, String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSettings {
    /// Plant integration step (s).
    pub dt_sim: f64,
    /// Supervisory rate (Hz); must be an integer fraction of the plant rate.
    pub control_rate: f64,
    /// Simulated time; the gait plan length when omitted.
    pub duration: Option<f64>,
    pub seed: u64,
    /// Body height below which the run counts as a fall (m).
    pub fall_height: f64,
    /// State magnitude treated as numerical blow-up.
    pub blowup: f64,
    pub output_dir: Option<PathBuf>,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            dt_sim: 5e-4,
            control_rate: 100.0,
            duration: None,
            seed: 0,
            fall_height: 0.15,
            blowup: 1e6,
            output_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialConditions {
    /// Body-frame sagittal foot offset at rest (m).
    pub foot_x: f64,
    pub roll_deg: f64,
    pub pitch_deg: f64,
    pub yaw_deg: f64,
    /// Standard deviation of seeded joint-angle noise (rad).
    pub joint_noise: f64,
}

impl Default for InitialConditions {
    fn default() -> Self {
        Self { foot_x: 0.0, roll_deg: 0.0, pitch_deg: 0.0, yaw_deg: 0.0, joint_noise: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JumpSettings {
    /// Leg extension before take-off and during flight (m).
    pub extension: f64,
    /// Time before take-off at which the legs start extending (s).
    pub extension_lead: f64,
    /// Duration of the thrust hand-over ramp before take-off (s).
    pub thrust_ramp: f64,
}

impl Default for JumpSettings {
    fn default() -> Self {
        Self { extension: 0.06, extension_lead: 0.375, thrust_ramp: 0.1 }
    }
}

/// Axis-aligned clearance box on the walking line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    pub x_min: f64,
    pub x_max: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub robot: RobotParams,
    pub ground: GroundParams,
    pub gait: GaitPlan,
    pub gains: ControlGains,
    pub erg: ErgParams,
    pub mpc: MpcConfig,
    pub sim: SimSettings,
    pub initial: InitialConditions,
    pub jump: JumpSettings,
    pub obstacles: Vec<Obstacle>,
}

impl SimConfig {
    pub fn duration(&self) -> f64 {
        self.sim.duration.unwrap_or_else(|| self.gait.duration())
    }

    /// Plant steps per control tick.
    pub fn control_divisor(&self) -> usize {
        (1.0 / (self.sim.control_rate * self.sim.dt_sim)).round() as usize
    }

    pub fn dt_control(&self) -> f64 {
        self.sim.dt_sim * self.control_divisor() as f64
    }

    /// Number of control ticks in the run.
    pub fn ticks(&self) -> usize {
        (self.duration() * self.sim.control_rate - 1e-9).ceil().max(0.0) as usize
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |m: String| Err(ConfigError::Invalid(m));
        self.robot.validate().or_else(inv)?;
        self.ground.validate().or_else(inv)?;
        self.gait.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.gains.validate().or_else(inv)?;
        self.erg.validate().or_else(inv)?;
        self.mpc.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let s = &self.sim;
        if !(s.dt_sim > 0.0) || !(s.control_rate > 0.0) {
            return inv("sim.dt_sim and sim.control_rate must be positive".into());
        }
        let ratio = 1.0 / (s.control_rate * s.dt_sim);
        if ratio < 1.0 - 1e-9 || (ratio - ratio.round()).abs() > 1e-6 {
            return inv(format!(
                "sim.dt_sim = {} does not divide the control period 1/{} into an integer number of steps",
                s.dt_sim, s.control_rate
            ));
        }
        if (self.mpc.dt - self.dt_control()).abs() > 1e-12 {
            return inv(format!("mpc.dt = {} must equal the control period {}", self.mpc.dt, self.dt_control()));
        }
        if let Some(d) = s.duration {
            if !(d > 0.0) {
                return inv("sim.duration must be positive".into());
            }
        }
        if !(s.fall_height >= 0.0) || !(s.blowup > 0.0) {
            return inv("sim.fall_height must be non-negative and sim.blowup positive".into());
        }
        let j = &self.jump;
        if !(j.extension >= 0.0) || !(j.thrust_ramp >= 0.0) || !(j.extension_lead >= j.thrust_ramp) {
            return inv("jump: need extension ≥ 0 and extension_lead ≥ thrust_ramp ≥ 0".into());
        }
        if j.extension_lead > self.gait.cycle_period {
            return inv("jump.extension_lead must not exceed the cycle period".into());
        }
        if !(self.initial.joint_noise >= 0.0) {
            return inv("initial.joint_noise must be non-negative".into());
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            if !(o.x_max > o.x_min) || !(o.height > 0.0) {
                return inv(format!("obstacles[{i}] needs x_max > x_min and positive height"));
            }
        }
        Ok(())
    }

    /// Sets a dotted key (`mpc.w_e.0`, `gait.cycle_period`) to a number and
    /// revalidates the result.
    pub fn with_override(&self, key: &str, value: f64) -> Result<SimConfig, ConfigError> {
        let bad = |m: &str| ConfigError::Override(key.to_string(), m.to_string());
        let mut root = toml::Value::try_from(self).map_err(|e| bad(&e.to_string()))?;
        let parts: Vec<&str> = key.split('.').collect();
        let (last, init) = parts.split_last().ok_or_else(|| bad("empty key"))?;
        let mut node = &mut root;
        for part in init {
            node = match node {
                toml::Value::Table(t) => t.get_mut(*part).ok_or_else(|| bad("no such key"))?,
                toml::Value::Array(a) => {
                    let i: usize = part.parse().map_err(|_| bad("expected an array index"))?;
                    a.get_mut(i).ok_or_else(|| bad("index out of range"))?
                }
                _ => return Err(bad("path descends into a scalar")),
            };
        }
        let slot = match node {
            toml::Value::Table(t) => t.entry(last.to_string()).or_insert(toml::Value::Float(value)),
            toml::Value::Array(a) => {
                let i: usize = last.parse().map_err(|_| bad("expected an array index"))?;
                a.get_mut(i).ok_or_else(|| bad("index out of range"))?
            }
            _ => return Err(bad("path descends into a scalar")),
        };
        *slot = match slot {
            toml::Value::Integer(_) if value.fract() == 0.0 => toml::Value::Integer(value as i64),
            toml::Value::Integer(_) => return Err(bad("integer field")),
            toml::Value::Float(_) => toml::Value::Float(value),
            _ => return Err(bad("not a numeric field")),
        };
        let text = toml::to_string(&root).map_err(|e| bad(&e.to_string()))?;
        parse_config(&text)
    }
}

/// Parses and validates a TOML document; omitted fields take defaults.
pub fn parse_config(text: &str) -> Result<SimConfig, ConfigError> {
    let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    let cfg: SimConfig = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Schema {
        path: e.path().to_string(),
        message: e.into_inner().message().to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<SimConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    parse_config(&text)
}
