//! Scenario files, the multirate closed-loop runner, CSV logs and metrics.
//!
//! Metrics are computed from log records only, so the same numbers can be
//! reproduced from a CSV file. Wall-clock timing is reported separately.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::command::LocomotionCommand;
use crate::controller::{ContactConfig, Controller, ControllerConfig, TrackingConfig};
use crate::dynamics::{compute_dynamics, foot_positions};
use crate::footstep::FootstepConfig;
use crate::gait::{gait_by_name, GaitSpec};
use crate::model::{load_model, neutral_state, GeneralizedState, JointVector, RobotModel, NUM_JOINTS, NUM_LEGS};
use crate::mpc::MpcConfig;
use crate::sim::{step, JointCommand, Push, SimConfig, SimState};
use crate::wbic::WbicConfig;

/// WBIC update rate (Hz).
pub const WBIC_RATE_HZ: f64 = 500.0;
/// Body height band, as fractions of the commanded height, outside which
/// the robot counts as fallen.
pub const FALL_HEIGHT_BAND: [f64; 2] = [0.5, 1.6];
/// Roll or pitch magnitude (deg) beyond which the robot counts as fallen.
pub const FALL_TILT_DEG: f64 = 60.0;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("scenario error: {0}")]
    Config(String),
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("log format error: {0}")]
    Log(String),
}

fn config_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

/// A gait given by library name or spelled out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GaitRef {
    Named(String),
    Spec(GaitSpec),
}

impl GaitRef {
    pub fn resolve(&self) -> Result<GaitSpec, HarnessError> {
        let g = match self {
            GaitRef::Named(n) => gait_by_name(n).map_err(|e| config_err(e.to_string()))?,
            GaitRef::Spec(s) => s.clone(),
        };
        g.validate().map_err(|e| config_err(e.to_string()))?;
        Ok(g)
    }
}

/// One piece of the scripted command profile, active from `t_start` until
/// the next segment starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandSegment {
    pub t_start: f64,
    /// (forward, lateral) velocity in the heading frame (m/s).
    pub v_cmd: [f64; 2],
    #[serde(default)]
    pub yaw_rate: f64,
    /// Defaults to the model's standing height.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body_height: Option<f64>,
    /// Gait to switch to at the next cycle boundary.
    #[serde(default, alias = "gait_name", skip_serializing_if = "Option::is_none")]
    pub gait: Option<GaitRef>,
}

/// Seeded horizontal pushes added to the explicit disturbance schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomPushes {
    pub count: usize,
    /// Start times are drawn uniformly from this interval (s).
    pub window: [f64; 2],
    /// Force magnitudes are drawn uniformly from this interval (N).
    pub force: [f64; 2],
    pub duration: f64,
}

/// Default parameter and values for a sweep of this scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub param: String,
    pub values: Vec<f64>,
}

fn default_decimation() -> usize {
    1
}

fn default_metrics_window() -> f64 {
    5.0
}

fn default_max_accel() -> f64 {
    2.0
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// Robot description file, relative to the scenario file. The bundled
    /// model is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub gait: GaitRef,
    pub segments: Vec<CommandSegment>,
    pub duration: f64,
    #[serde(default)]
    pub seed: u64,
    /// Log every n-th simulation step.
    #[serde(default = "default_decimation")]
    pub decimation: usize,
    /// Metrics cover the final `metrics_window` seconds.
    #[serde(default = "default_metrics_window")]
    pub metrics_window: f64,
    /// Rate limit on the commanded planar velocity (m/s²).
    #[serde(default = "default_max_accel")]
    pub max_accel: f64,
    /// Release MPC results immediately instead of one WBIC tick later.
    #[serde(default, skip_serializing_if = "is_false")]
    pub zero_latency: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_pushes: Option<RandomPushes>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub mpc: MpcConfig,
    #[serde(default)]
    pub wbic: WbicConfig,
    #[serde(default)]
    pub footstep: FootstepConfig,
    #[serde(default)]
    pub tracking: TrackingConfig,
    #[serde(default)]
    pub contact: ContactConfig,
    #[serde(default)]
    pub sim: SimConfig,
    /// Directory used to resolve `model`; not serialized.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| config_err(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut s = Self::from_json(&text).map_err(|e| match e {
            HarnessError::Config(m) => config_err(format!("{}: {m}", path.display())),
            other => other,
        })?;
        s.base_dir = path.parent().map(Path::to_path_buf);
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(config_err("duration must be > 0"));
        }
        if self.segments.is_empty() {
            return Err(config_err("at least one command segment is required"));
        }
        if self.segments[0].t_start > 0.0 {
            return Err(config_err("first segment must start at t = 0"));
        }
        if self.segments.windows(2).any(|w| w[1].t_start <= w[0].t_start) {
            return Err(config_err("segments must be strictly time-ordered"));
        }
        for seg in &self.segments {
            if seg.v_cmd.iter().chain([&seg.yaw_rate]).any(|v| !v.is_finite()) {
                return Err(config_err("segment commands must be finite"));
            }
            if let Some(h) = seg.body_height {
                if !(h > 0.0) {
                    return Err(config_err("body_height must be > 0"));
                }
            }
            if let Some(g) = &seg.gait {
                g.resolve()?;
            }
        }
        if self.decimation == 0 {
            return Err(config_err("decimation must be >= 1"));
        }
        if !(self.max_accel > 0.0) {
            return Err(config_err("max_accel must be > 0"));
        }
        if !(self.metrics_window > 0.0) {
            return Err(config_err("metrics_window must be > 0"));
        }
        if let Some(r) = &self.random_pushes {
            if !(r.window[0] <= r.window[1] && r.force[0] <= r.force[1] && r.duration >= 0.0) {
                return Err(config_err("random_pushes ranges must be ordered"));
            }
        }
        if let Some(sw) = &self.sweep {
            if sw.values.is_empty() || sw.values.iter().any(|v| !v.is_finite()) {
                return Err(config_err("sweep values must be finite and non-empty"));
            }
        }
        self.gait.resolve()?;
        self.mpc.validate().map_err(|e| config_err(e.to_string()))?;
        self.sim.validate().map_err(|e| config_err(e.to_string()))?;
        let (mpc_every, wbic_every) = self.schedule();
        if wbic_every < 2 || mpc_every < wbic_every {
            return Err(config_err(format!(
                "rate layering violated: PD every step, WBIC every {wbic_every}, MPC every {mpc_every}"
            )));
        }
        Ok(())
    }

    /// Simulation steps between MPC updates and between WBIC updates.
    pub fn schedule(&self) -> (usize, usize) {
        let dt = self.sim.dt;
        (
            (1.0 / (self.mpc.rate_hz * dt)).round().max(1.0) as usize,
            (1.0 / (WBIC_RATE_HZ * dt)).round().max(1.0) as usize,
        )
    }

    pub fn model(&self) -> Result<RobotModel, HarnessError> {
        match &self.model {
            None => Ok(RobotModel::bundled()),
            Some(rel) => {
                let path = match &self.base_dir {
                    Some(dir) => dir.join(rel),
                    None => PathBuf::from(rel),
                };
                let text = std::fs::read_to_string(&path).map_err(|source| HarnessError::Io { path: path.clone(), source })?;
                load_model(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
            }
        }
    }

    pub fn controller_config(&self) -> ControllerConfig {
        ControllerConfig {
            mpc: self.mpc.clone(),
            wbic: self.wbic.clone(),
            footstep: self.footstep,
            tracking: self.tracking,
            contact: self.contact,
        }
    }

    /// Explicit pushes plus the seeded random ones.
    pub fn disturbances(&self) -> Vec<Push> {
        let mut pushes = self.sim.pushes.clone();
        if let Some(r) = &self.random_pushes {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            for _ in 0..r.count {
                let t = rng.random_range(r.window[0]..=r.window[1]);
                let mag = rng.random_range(r.force[0]..=r.force[1]);
                let dir = rng.random_range(0.0..std::f64::consts::TAU);
                pushes.push(Push {
                    t_start: t,
                    duration: r.duration,
                    force: [mag * dir.cos(), mag * dir.sin(), 0.0],
                });
            }
        }
        pushes
    }

    fn active_segment(&self, t: f64) -> usize {
        self.segments.iter().rposition(|s| s.t_start <= t + 1e-12).unwrap_or(0)
    }

    /// Override a named parameter, as used by sweeps.
    pub fn set_param(&mut self, param: &str, value: f64) -> Result<(), HarnessError> {
        match param {
            "cmd.vx" => self.segments.iter_mut().for_each(|s| s.v_cmd[0] = value),
            "cmd.vy" => self.segments.iter_mut().for_each(|s| s.v_cmd[1] = value),
            "cmd.yaw_rate" => self.segments.iter_mut().for_each(|s| s.yaw_rate = value),
            "cmd.body_height" => self.segments.iter_mut().for_each(|s| s.body_height = Some(value)),
            "duration" => self.duration = value,
            _ => return Err(config_err(format!("unknown sweep parameter `{param}`"))),
        }
        self.validate()
    }
}

/// Base height that puts the feet of the stand posture on the ground.
pub fn standing_height(model: &RobotModel) -> f64 {
    let s = neutral_state(model);
    -foot_positions(model, &s).iter().map(|p| p.z).fold(f64::INFINITY, f64::min)
}

pub fn initial_state(model: &RobotModel) -> GeneralizedState {
    let mut s = neutral_state(model);
    s.base_position.z = standing_height(model);
    s
}

/// One logged sample. State is taken at `t`; forces and torques act over
/// the following simulation step.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub t: f64,
    pub gait: String,
    pub base_position: Vector3<f64>,
    /// Unit quaternion as (w, x, y, z).
    pub base_quaternion: [f64; 4],
    /// Z-Y-X Euler angles (roll, pitch, yaw).
    pub rpy: Vector3<f64>,
    /// Body-frame angular velocity.
    pub base_angular_velocity: Vector3<f64>,
    /// World-frame linear velocity.
    pub base_linear_velocity: Vector3<f64>,
    pub joint_positions: JointVector,
    pub joint_velocities: JointVector,
    pub contact: [bool; NUM_LEGS],
    pub ground_forces: [Vector3<f64>; NUM_LEGS],
    pub tau_applied: JointVector,
    pub tau_cmd: JointVector,
    pub q_cmd: JointVector,
    pub qd_cmd: JointVector,
    pub scheduled_contact: [bool; NUM_LEGS],
    /// Contact set used by WBIC after touchdown handling.
    pub stance: [bool; NUM_LEGS],
    pub mpc_forces: [Vector3<f64>; NUM_LEGS],
    pub wbic_forces: [Vector3<f64>; NUM_LEGS],
    /// World-frame foot positions.
    pub foot_positions: [Vector3<f64>; NUM_LEGS],
    /// Foot reference while not in WBIC stance; zero otherwise.
    pub foot_desired: [Vector3<f64>; NUM_LEGS],
    /// Heading-frame velocity command after rate limiting.
    pub cmd_forward: f64,
    pub cmd_lateral: f64,
    pub cmd_yaw_rate: f64,
    pub cmd_height: f64,
}

const AXES: [&str; 3] = ["x", "y", "z"];
const FEET: [&str; NUM_LEGS] = ["fr", "fl", "hr", "hl"];

fn joint_names(prefix: &str) -> Vec<String> {
    (0..NUM_JOINTS).map(|j| format!("{prefix}_{j}")).collect()
}

fn vec_names(prefix: &str) -> Vec<String> {
    AXES.iter().map(|a| format!("{prefix}_{a}")).collect()
}

fn foot_vec_names(prefix: &str) -> Vec<String> {
    FEET.iter().flat_map(|f| AXES.iter().map(move |a| format!("{prefix}_{f}_{a}"))).collect()
}

fn foot_names(prefix: &str) -> Vec<String> {
    FEET.iter().map(|f| format!("{prefix}_{f}")).collect()
}

impl LogRecord {
    /// CSV header in column order.
    pub fn columns() -> Vec<String> {
        let mut c = vec!["t".to_string(), "gait".to_string()];
        c.extend(vec_names("pos"));
        c.extend(["quat_w", "quat_x", "quat_y", "quat_z"].map(String::from));
        c.extend(["roll", "pitch", "yaw"].map(String::from));
        c.extend(vec_names("omega_body"));
        c.extend(vec_names("vel"));
        c.extend(joint_names("q"));
        c.extend(joint_names("qd"));
        c.extend(foot_names("contact"));
        c.extend(foot_vec_names("grf"));
        c.extend(joint_names("tau"));
        c.extend(joint_names("tau_cmd"));
        c.extend(joint_names("q_cmd"));
        c.extend(joint_names("qd_cmd"));
        c.extend(foot_names("sched"));
        c.extend(foot_names("stance"));
        c.extend(foot_vec_names("f_mpc"));
        c.extend(foot_vec_names("f_wbic"));
        c.extend(foot_vec_names("foot"));
        c.extend(foot_vec_names("foot_des"));
        c.extend(["cmd_forward", "cmd_lateral", "cmd_yaw_rate", "cmd_height"].map(String::from));
        c
    }

    pub fn to_row(&self) -> Vec<String> {
        let mut r = Vec::with_capacity(160);
        let num = |r: &mut Vec<String>, x: f64| r.push(format!("{x}"));
        num(&mut r, self.t);
        r.push(self.gait.clone());
        self.base_position.iter().for_each(|x| num(&mut r, *x));
        self.base_quaternion.iter().for_each(|x| num(&mut r, *x));
        self.rpy.iter().for_each(|x| num(&mut r, *x));
        self.base_angular_velocity.iter().for_each(|x| num(&mut r, *x));
        self.base_linear_velocity.iter().for_each(|x| num(&mut r, *x));
        self.joint_positions.iter().for_each(|x| num(&mut r, *x));
        self.joint_velocities.iter().for_each(|x| num(&mut r, *x));
        self.contact.iter().for_each(|c| r.push(u8::from(*c).to_string()));
        self.ground_forces.iter().flat_map(|f| f.iter()).for_each(|x| num(&mut r, *x));
        for v in [&self.tau_applied, &self.tau_cmd, &self.q_cmd, &self.qd_cmd] {
            v.iter().for_each(|x| num(&mut r, *x));
        }
        for flags in [&self.scheduled_contact, &self.stance] {
            flags.iter().for_each(|c| r.push(u8::from(*c).to_string()));
        }
        self.mpc_forces.iter().flat_map(|f| f.iter()).for_each(|x| num(&mut r, *x));
        for v in [&self.wbic_forces, &self.foot_positions, &self.foot_desired] {
            v.iter().flat_map(|f| f.iter()).for_each(|x| num(&mut r, *x));
        }
        for x in [self.cmd_forward, self.cmd_lateral, self.cmd_yaw_rate, self.cmd_height] {
            num(&mut r, x);
        }
        r
    }

    pub fn from_row(row: &csv::StringRecord) -> Result<Self, HarnessError> {
        let expected = Self::columns().len();
        if row.len() != expected {
            return Err(HarnessError::Log(format!("row has {} fields, expected {expected}", row.len())));
        }
        let mut it = row.iter();
        let mut next = || it.next().expect("length checked");
        let gait_field = |s: &str| s.to_string();
        let t = parse_f(next())?;
        let gait = gait_field(next());
        let mut f = |n: usize| -> Result<Vec<f64>, HarnessError> { (0..n).map(|_| parse_f(next())).collect() };
        let v3 = |v: Vec<f64>| Vector3::new(v[0], v[1], v[2]);
        let jv = |v: Vec<f64>| JointVector::from_column_slice(&v);
        let feet3 = |v: Vec<f64>| -> [Vector3<f64>; NUM_LEGS] { std::array::from_fn(|i| Vector3::new(v[3 * i], v[3 * i + 1], v[3 * i + 2])) };
        let flags = |v: Vec<f64>| -> [bool; NUM_LEGS] { std::array::from_fn(|i| v[i] != 0.0) };
        let base_position = v3(f(3)?);
        let q = f(4)?;
        let rpy = v3(f(3)?);
        let base_angular_velocity = v3(f(3)?);
        let base_linear_velocity = v3(f(3)?);
        let joint_positions = jv(f(NUM_JOINTS)?);
        let joint_velocities = jv(f(NUM_JOINTS)?);
        let contact = flags(f(NUM_LEGS)?);
        let ground_forces = feet3(f(3 * NUM_LEGS)?);
        let tau_applied = jv(f(NUM_JOINTS)?);
        let tau_cmd = jv(f(NUM_JOINTS)?);
        let q_cmd = jv(f(NUM_JOINTS)?);
        let qd_cmd = jv(f(NUM_JOINTS)?);
        let scheduled_contact = flags(f(NUM_LEGS)?);
        let stance = flags(f(NUM_LEGS)?);
        let mpc_forces = feet3(f(3 * NUM_LEGS)?);
        let wbic_forces = feet3(f(3 * NUM_LEGS)?);
        let foot_positions = feet3(f(3 * NUM_LEGS)?);
        let foot_desired = feet3(f(3 * NUM_LEGS)?);
        let c = f(4)?;
        Ok(Self {
            t,
            gait,
            base_position,
            base_quaternion: [q[0], q[1], q[2], q[3]],
            rpy,
            base_angular_velocity,
            base_linear_velocity,
            joint_positions,
            joint_velocities,
            contact,
            ground_forces,
            tau_applied,
            tau_cmd,
            q_cmd,
            qd_cmd,
            scheduled_contact,
            stance,
            mpc_forces,
            wbic_forces,
            foot_positions,
            foot_desired,
            cmd_forward: c[0],
            cmd_lateral: c[1],
            cmd_yaw_rate: c[2],
            cmd_height: c[3],
        })
    }

    /// Measured velocity in the heading frame (forward, lateral).
    pub fn heading_velocity(&self) -> Vector2<f64> {
        let (s, c) = self.rpy.z.sin_cos();
        let v = self.base_linear_velocity;
        Vector2::new(c * v.x + s * v.y, -s * v.x + c * v.y)
    }

    /// World-frame yaw rate.
    pub fn yaw_rate(&self) -> f64 {
        let q = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            self.base_quaternion[0],
            self.base_quaternion[1],
            self.base_quaternion[2],
            self.base_quaternion[3],
        ));
        (q * self.base_angular_velocity).z
    }

    pub fn is_fallen(&self) -> bool {
        let z = self.base_position.z;
        let h = self.cmd_height;
        let tilt = FALL_TILT_DEG.to_radians();
        z < FALL_HEIGHT_BAND[0] * h || z > FALL_HEIGHT_BAND[1] * h || self.rpy.x.abs() > tilt || self.rpy.y.abs() > tilt
    }

    pub fn in_flight(&self) -> bool {
        self.contact.iter().all(|c| !c)
    }
}

fn parse_f(s: &str) -> Result<f64, HarnessError> {
    s.trim().parse::<f64>().map_err(|e| HarnessError::Log(format!("bad number `{s}`: {e}")))
}

pub fn write_log<W: Write>(out: W, records: &[LogRecord]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    let log_err = |e: csv::Error| HarnessError::Log(e.to_string());
    w.write_record(LogRecord::columns()).map_err(log_err)?;
    for r in records {
        w.write_record(r.to_row()).map_err(log_err)?;
    }
    w.flush().map_err(|e| HarnessError::Log(e.to_string()))
}

pub fn read_log<R: Read>(input: R) -> Result<Vec<LogRecord>, HarnessError> {
    let mut rd = csv::Reader::from_reader(input);
    let header: Vec<String> = rd
        .headers()
        .map_err(|e| HarnessError::Log(e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    if header != LogRecord::columns() {
        return Err(HarnessError::Log("header does not match the log schema".into()));
    }
    rd.records()
        .map(|r| LogRecord::from_row(&r.map_err(|e| HarnessError::Log(e.to_string()))?))
        .collect()
}

/// Summary computed from log records alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub samples: usize,
    pub t_end: f64,
    pub window_start: f64,
    /// Planar velocity error norm over the window (m/s).
    pub mean_velocity_error: f64,
    pub max_velocity_error: f64,
    /// Absolute heading-frame forward velocity error over the window (m/s).
    pub mean_forward_velocity_error: f64,
    pub mean_forward_velocity: f64,
    /// Absolute yaw-rate error over the window (rad/s).
    pub mean_yaw_rate_error: f64,
    pub max_yaw_rate_error: f64,
    pub mean_height_error: f64,
    pub mean_abs_roll_deg: f64,
    pub mean_abs_pitch_deg: f64,
    pub max_abs_roll_deg: f64,
    pub max_abs_pitch_deg: f64,
    pub fell: bool,
    pub fall_time: Option<f64>,
    /// Mean and peak vertical ground force per foot over the whole run (N).
    pub foot_force_mean: [f64; NUM_LEGS],
    pub foot_force_max: [f64; NUM_LEGS],
    /// Maximal runs of samples with no foot touching the ground.
    pub flight_phases: usize,
    /// Swing-foot position error over samples tracking a swing trajectory (m).
    pub mean_swing_error: f64,
}

pub fn compute_metrics(records: &[LogRecord], window_start: f64) -> Metrics {
    let t_end = records.last().map_or(0.0, |r| r.t);
    let window: Vec<&LogRecord> = records.iter().filter(|r| r.t >= window_start).collect();
    let n = window.len().max(1) as f64;
    let mean = |f: &dyn Fn(&LogRecord) -> f64| window.iter().map(|r| f(r)).sum::<f64>() / n;
    let max = |f: &dyn Fn(&LogRecord) -> f64| window.iter().map(|r| f(r)).fold(0.0, f64::max);

    let vel_err = |r: &LogRecord| (r.heading_velocity() - Vector2::new(r.cmd_forward, r.cmd_lateral)).norm();
    let fwd_err = |r: &LogRecord| (r.heading_velocity().x - r.cmd_forward).abs();
    let yaw_err = |r: &LogRecord| (r.yaw_rate() - r.cmd_yaw_rate).abs();
    let roll = |r: &LogRecord| r.rpy.x.abs().to_degrees();
    let pitch = |r: &LogRecord| r.rpy.y.abs().to_degrees();

    let fall_time = records.iter().find(|r| r.is_fallen()).map(|r| r.t);
    let all = records.len().max(1) as f64;
    let foot_force_mean = std::array::from_fn(|i| records.iter().map(|r| r.ground_forces[i].z).sum::<f64>() / all);
    let foot_force_max = std::array::from_fn(|i| records.iter().map(|r| r.ground_forces[i].z).fold(0.0, f64::max));
    let flight_phases = flight_intervals(records).len();
    let swing_errors: Vec<f64> = window
        .iter()
        .flat_map(|r| (0..NUM_LEGS).filter(|&i| !r.scheduled_contact[i] && !r.stance[i]).map(|i| (r.foot_desired[i] - r.foot_positions[i]).norm()))
        .collect();
    let mean_swing_error = swing_errors.iter().sum::<f64>() / swing_errors.len().max(1) as f64;

    Metrics {
        samples: records.len(),
        t_end,
        window_start,
        mean_velocity_error: mean(&vel_err),
        max_velocity_error: max(&vel_err),
        mean_forward_velocity_error: mean(&fwd_err),
        mean_forward_velocity: mean(&|r| r.heading_velocity().x),
        mean_yaw_rate_error: mean(&yaw_err),
        max_yaw_rate_error: max(&yaw_err),
        mean_height_error: mean(&|r| (r.base_position.z - r.cmd_height).abs()),
        mean_abs_roll_deg: mean(&roll),
        mean_abs_pitch_deg: mean(&pitch),
        max_abs_roll_deg: max(&roll),
        max_abs_pitch_deg: max(&pitch),
        fell: fall_time.is_some(),
        fall_time,
        foot_force_mean,
        foot_force_max,
        flight_phases,
        mean_swing_error,
    }
}

/// `(t_first, t_last)` of each maximal run of flight samples.
pub fn flight_intervals(records: &[LogRecord]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut start: Option<f64> = None;
    let mut last = 0.0;
    for r in records {
        match (r.in_flight(), start) {
            (true, None) => start = Some(r.t),
            (false, Some(s)) => {
                out.push((s, last));
                start = None;
            }
            _ => {}
        }
        last = r.t;
    }
    if let Some(s) = start {
        out.push((s, last));
    }
    out
}

/// Time after `t_from` at which the heading-frame velocity error, averaged
/// over the following `hold` seconds, first drops below `tol` (m/s).
/// Returns the delay from `t_from`, or `None` if the log ends first.
pub fn recovery_time(records: &[LogRecord], t_from: f64, hold: f64, tol: f64) -> Option<f64> {
    let err = |r: &LogRecord| (r.heading_velocity() - Vector2::new(r.cmd_forward, r.cmd_lateral)).norm();
    let t_end = records.last()?.t;
    let start = records.iter().position(|r| r.t >= t_from)?;
    for (i, r) in records.iter().enumerate().skip(start) {
        if r.t + hold > t_end {
            break;
        }
        let span: Vec<f64> = records[i..].iter().take_while(|s| s.t <= r.t + hold).map(err).collect();
        if span.iter().sum::<f64>() / (span.len() as f64) < tol {
            return Some(r.t - t_from);
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScheduleCounters {
    pub pd_steps: u64,
    pub wbic_ticks: u64,
    pub mpc_ticks: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TimingStats {
    pub mpc_mean_ms: f64,
    pub mpc_max_ms: f64,
    pub wbic_mean_ms: f64,
    pub wbic_max_ms: f64,
    pub wall_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunOutcome {
    Completed,
    Fell { t: f64 },
    Diverged { t: f64, message: String },
    ControllerFailed { t: f64, message: String },
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<LogRecord>,
    pub metrics: Metrics,
    pub outcome: RunOutcome,
    pub counters: ScheduleCounters,
    pub timing: TimingStats,
}

/// JSON document written by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub outcome: RunOutcome,
    pub metrics: Metrics,
    pub schedule: ScheduleCounters,
    pub timing: TimingStats,
}

impl RunOutput {
    pub fn report(&self, scenario: &Scenario) -> RunReport {
        RunReport {
            scenario: scenario.name.clone(),
            outcome: self.outcome.clone(),
            metrics: self.metrics.clone(),
            schedule: self.counters,
            timing: self.timing,
        }
    }
}

/// Rate-limited heading-frame velocity command.
struct CommandFilter {
    v: Vector2<f64>,
    max_accel: f64,
}

impl CommandFilter {
    fn update(&mut self, target: Vector2<f64>, dt: f64) -> Vector2<f64> {
        let dv = target - self.v;
        let lim = self.max_accel * dt;
        let n = dv.norm();
        self.v += if n > lim { dv * (lim / n) } else { dv };
        self.v
    }
}

fn window_start(scenario: &Scenario) -> f64 {
    (scenario.duration - scenario.metrics_window).max(0.0)
}

/// Recompute metrics from a CSV log of `scenario`.
pub fn metrics_from_log<R: Read>(scenario: &Scenario, input: R) -> Result<Metrics, HarnessError> {
    let records = read_log(input)?;
    Ok(compute_metrics(&records, window_start(scenario)))
}

/// Run the scenario: MPC at its configured rate, WBIC at 500 Hz and the
/// joint PD loop at every simulation step.
pub fn run_closed_loop(model: &RobotModel, scenario: &Scenario) -> Result<RunOutput, HarnessError> {
    scenario.validate()?;
    let wall = Instant::now();
    let (mpc_every, wbic_every) = scenario.schedule();
    let dt = scenario.sim.dt;
    let total_steps = (scenario.duration / dt).round() as u64;
    let mut sim_cfg = scenario.sim.clone();
    sim_cfg.pushes = scenario.disturbances();
    let stand_h = standing_height(model);

    let mut state0 = initial_state(model);
    // start at the static penalty-contact equilibrium
    let weight = crate::mpc::lumped_mass(model) * model.gravity_magnitude();
    state0.base_position.z -= weight / (NUM_LEGS as f64 * sim_cfg.ground.k_n);
    let mut controller = Controller::new(model.clone(), scenario.controller_config(), scenario.gait.resolve()?, &state0, 0.0);
    if scenario.zero_latency {
        controller = controller.with_zero_latency();
    }
    let mut sim = SimState::new(state0);
    let mut filter = CommandFilter {
        v: Vector2::zeros(),
        max_accel: scenario.max_accel,
    };
    let mut counters = ScheduleCounters::default();
    let mut records = Vec::with_capacity((total_steps as usize) / scenario.decimation + 2);
    let mut outcome = RunOutcome::Completed;
    let mut joint_cmd = JointCommand::zero();
    let mut segment_idx = usize::MAX;
    let mut heading_cmd = Vector2::zeros();
    let (mut mpc_time, mut mpc_max, mut wbic_time, mut wbic_max) = (0.0, 0.0f64, 0.0, 0.0f64);

    for k in 0..total_steps {
        let t = sim.t;
        let seg_now = scenario.active_segment(t);
        let seg = &scenario.segments[seg_now];
        if seg_now != segment_idx {
            segment_idx = seg_now;
            if let Some(g) = &seg.gait {
                controller.request_gait(g.resolve()?, t);
            }
        }
        let height = seg.body_height.unwrap_or(stand_h);
        let wbic_tick = k % wbic_every as u64 == 0;
        if wbic_tick {
            heading_cmd = filter.update(Vector2::from(seg.v_cmd), wbic_every as f64 * dt);
        }
        let yaw = sim.robot.euler_rpy().z;
        let command = LocomotionCommand::from_heading_frame(heading_cmd.x, heading_cmd.y, seg.yaw_rate, height, yaw);

        if k % mpc_every as u64 == 0 {
            let feet = foot_positions(model, &sim.robot);
            let start = Instant::now();
            if let Err(e) = controller.mpc_update(&sim.robot, &feet, &command, t) {
                outcome = RunOutcome::ControllerFailed { t, message: e.to_string() };
                break;
            }
            let el = start.elapsed().as_secs_f64() * 1e3;
            mpc_time += el;
            mpc_max = mpc_max.max(el);
            counters.mpc_ticks += 1;
        }
        if wbic_tick {
            let d = compute_dynamics(model, &sim.robot);
            let start = Instant::now();
            match controller.wbic_update(&sim.robot, &d, &command, t) {
                Ok(c) => joint_cmd = c,
                Err(e) => {
                    outcome = RunOutcome::ControllerFailed { t, message: e.to_string() };
                    break;
                }
            }
            let el = start.elapsed().as_secs_f64() * 1e3;
            wbic_time += el;
            wbic_max = wbic_max.max(el);
            counters.wbic_ticks += 1;
        }

        let pre = sim.robot.clone();
        let out = match step(model, &mut sim, &joint_cmd, &sim_cfg) {
            Ok(o) => o,
            Err(e) => {
                outcome = RunOutcome::Diverged { t, message: e.to_string() };
                break;
            }
        };
        counters.pd_steps += 1;

        let status = controller.status();
        let q = pre.base_orientation.into_inner();
        let record = LogRecord {
            t,
            gait: status.gait_name.clone(),
            base_position: pre.base_position,
            base_quaternion: [q.w, q.i, q.j, q.k],
            rpy: pre.euler_rpy(),
            base_angular_velocity: pre.base_angular_velocity,
            base_linear_velocity: pre.base_linear_velocity,
            joint_positions: pre.joint_positions,
            joint_velocities: pre.joint_velocities,
            contact: out.in_contact,
            ground_forces: out.ground_forces,
            tau_applied: out.tau_applied,
            tau_cmd: joint_cmd.tau_ff,
            q_cmd: joint_cmd.q_cmd,
            qd_cmd: joint_cmd.qd_cmd,
            scheduled_contact: status.scheduled_contact,
            stance: status.contact,
            mpc_forces: status.mpc_forces,
            wbic_forces: status.wbic_forces,
            foot_positions: foot_positions(model, &pre),
            foot_desired: status.swing_desired.map(|p| p.unwrap_or_else(Vector3::zeros)),
            cmd_forward: heading_cmd.x,
            cmd_lateral: heading_cmd.y,
            cmd_yaw_rate: seg.yaw_rate,
            cmd_height: height,
        };
        let fallen = record.is_fallen();
        if k % scenario.decimation as u64 == 0 || fallen {
            records.push(record);
        }
        if fallen {
            outcome = RunOutcome::Fell { t };
            break;
        }
    }

    assert!(
        matches!(outcome, RunOutcome::Completed) || counters.pd_steps < total_steps,
        "early exit must stop the loop"
    );
    if counters.mpc_ticks > 1 {
        assert!(counters.pd_steps > counters.wbic_ticks && counters.wbic_ticks > counters.mpc_ticks);
    }
    let metrics = compute_metrics(&records, window_start(scenario));
    let timing = TimingStats {
        mpc_mean_ms: mpc_time / counters.mpc_ticks.max(1) as f64,
        mpc_max_ms: mpc_max,
        wbic_mean_ms: wbic_time / counters.wbic_ticks.max(1) as f64,
        wbic_max_ms: wbic_max,
        wall_s: wall.elapsed().as_secs_f64(),
    };
    Ok(RunOutput {
        records,
        metrics,
        outcome,
        counters,
        timing,
    })
}

/// One row of a parameter sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub outcome: RunOutcome,
    pub metrics: Option<Metrics>,
    pub stable: bool,
    pub error: Option<String>,
}

/// Forward-velocity error (m/s) above which a completed run is not counted
/// as stable in a sweep.
pub const SWEEP_TRACKING_TOL: f64 = 0.25;

/// Run `scenario` once per value of `param`, in parallel. Failed runs are
/// recorded and the sweep continues.
pub fn sweep(scenario: &Scenario, param: &str, values: &[f64]) -> Result<Vec<SweepRow>, HarnessError> {
    if values.is_empty() {
        return Err(config_err("sweep needs at least one value"));
    }
    let model = scenario.model()?;
    let mut variants = Vec::with_capacity(values.len());
    for &v in values {
        let mut s = scenario.clone();
        s.set_param(param, v)?;
        variants.push(s);
    }
    let rows = std::thread::scope(|scope| {
        let handles: Vec<_> = variants
            .iter()
            .zip(values)
            .map(|(s, &v)| {
                let model = &model;
                scope.spawn(move || match run_closed_loop(model, s) {
                    Ok(out) => {
                        let stable = out.outcome == RunOutcome::Completed && out.metrics.mean_forward_velocity_error < SWEEP_TRACKING_TOL;
                        SweepRow {
                            value: v,
                            outcome: out.outcome,
                            metrics: Some(out.metrics),
                            stable,
                            error: None,
                        }
                    }
                    Err(e) => SweepRow {
                        value: v,
                        outcome: RunOutcome::ControllerFailed { t: 0.0, message: e.to_string() },
                        metrics: None,
                        stable: false,
                        error: Some(e.to_string()),
                    },
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect::<Vec<_>>()
    });
    Ok(rows)
}

/// Largest swept value whose run was stable.
pub fn max_stable_value(rows: &[SweepRow]) -> Option<f64> {
    rows.iter().filter(|r| r.stable).map(|r| r.value).fold(None, |m, v| Some(m.map_or(v, |m: f64| m.max(v))))
}
