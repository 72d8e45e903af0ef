//! Locomotion controller: gait scheduling, foothold planning, MPC and WBIC
//! composed into a multirate stack that emits joint-level commands.

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::command::LocomotionCommand;
use crate::dynamics::DynamicsQuantities;
use crate::footstep::{plan_footsteps, speed_step_width_adjust, swing_trajectory, FootstepConfig, StepCommand, SwingParams};
use crate::gait::{contact_state, swing_phase, GaitSpec};
use crate::model::{GenVector, GeneralizedState, JointVector, RobotModel, NUM_JOINTS, NUM_LEGS};
use crate::mpc::{mpc_tick, MpcConfig, MpcError, MpcSolution};
use crate::sim::JointCommand;
use crate::wbic::{wbic_tick, Task, WbicConfig, WbicError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("MPC failed at t = {t:.4} s: {source}")]
    Mpc { t: f64, source: MpcError },
    #[error("WBIC failed at t = {t:.4} s: {source}")]
    Wbic { t: f64, source: WbicError },
}

/// Limits on how far the integrated desired pose may lead the measured one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackingConfig {
    /// Largest tracked horizontal position error (m).
    pub max_position_error: f64,
    /// Largest tracked yaw error (rad).
    pub max_yaw_error: f64,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            max_position_error: 0.1,
            max_yaw_error: 0.2,
        }
    }
}

/// Touchdown handling from measured foot height. The ground is the plane
/// `z = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContactConfig {
    /// Use foot height to shift touchdowns away from the schedule.
    pub enabled: bool,
    /// A foot below this height (m) counts as touching the ground.
    pub height: f64,
    /// Swing progress after which an early touchdown switches to stance.
    pub early_progress: f64,
    /// Descent speed (m/s) of a foot that is late for touchdown.
    pub descent_speed: f64,
    /// Deepest target (m) for a late foot.
    pub max_depth: f64,
}

impl Default for ContactConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            height: 0.0,
            early_progress: 0.5,
            descent_speed: 0.3,
            max_depth: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ControllerConfig {
    pub mpc: MpcConfig,
    pub wbic: WbicConfig,
    pub footstep: FootstepConfig,
    pub tracking: TrackingConfig,
    pub contact: ContactConfig,
}

/// Quantities exposed for logging after each WBIC update.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerStatus {
    pub scheduled_contact: [bool; NUM_LEGS],
    /// Contact set used by WBIC after touchdown handling.
    pub contact: [bool; NUM_LEGS],
    pub mpc_forces: [Vector3<f64>; NUM_LEGS],
    pub wbic_forces: [Vector3<f64>; NUM_LEGS],
    pub swing_targets: [Vector3<f64>; NUM_LEGS],
    pub swing_desired: [Option<Vector3<f64>>; NUM_LEGS],
    pub gait_name: String,
    /// Generalized acceleration after the floating-base relaxation.
    pub qdd: GenVector,
    /// Acceleration before relaxation.
    pub qdd_cmd: GenVector,
}

pub struct Controller {
    model: RobotModel,
    config: ControllerConfig,
    gait: GaitSpec,
    gait_t0: f64,
    /// Requested gait and the cycle boundary at which it takes over.
    pending_gait: Option<(GaitSpec, f64)>,
    prev_contact: [bool; NUM_LEGS],
    liftoff: [Vector3<f64>; NUM_LEGS],
    /// Foot reached the ground since its scheduled touchdown or early.
    landed: [bool; NUM_LEGS],
    /// Scheduled touchdown time and last swing target of each foot.
    touchdown: [(f64, Vector3<f64>); NUM_LEGS],
    yaw_des: f64,
    pos_des: Vector3<f64>,
    last_wbic_t: Option<f64>,
    mpc: Option<MpcSolution>,
    mpc_solved_at: f64,
    /// Solution computed but not yet released to WBIC.
    pending_mpc: Option<(MpcSolution, f64)>,
    /// Hold new MPC solutions back by one WBIC tick.
    mpc_latency: bool,
    status: ControllerStatus,
    last_command: JointCommand,
}

impl Controller {
    pub fn new(model: RobotModel, config: ControllerConfig, gait: GaitSpec, state: &GeneralizedState, t: f64) -> Self {
        let feet = crate::dynamics::foot_positions(&model, state);
        let contact = contact_state(&gait, 0.0);
        let status = ControllerStatus {
            scheduled_contact: contact,
            contact,
            mpc_forces: [Vector3::zeros(); NUM_LEGS],
            wbic_forces: [Vector3::zeros(); NUM_LEGS],
            swing_targets: feet,
            swing_desired: [None; NUM_LEGS],
            gait_name: gait.name.clone(),
            qdd: GenVector::zeros(),
            qdd_cmd: GenVector::zeros(),
        };
        Self {
            model,
            config,
            gait,
            gait_t0: t,
            pending_gait: None,
            prev_contact: contact,
            liftoff: feet,
            landed: contact,
            touchdown: std::array::from_fn(|i| (t, feet[i])),
            yaw_des: state.euler_rpy().z,
            pos_des: state.base_position,
            last_wbic_t: None,
            mpc: None,
            mpc_solved_at: t,
            pending_mpc: None,
            mpc_latency: true,
            status,
            last_command: JointCommand::zero(),
        }
    }

    /// Apply new MPC solutions immediately instead of one WBIC tick later.
    pub fn with_zero_latency(mut self) -> Self {
        self.mpc_latency = false;
        self
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn gait(&self) -> &GaitSpec {
        &self.gait
    }

    pub fn status(&self) -> &ControllerStatus {
        &self.status
    }

    pub fn last_command(&self) -> &JointCommand {
        &self.last_command
    }

    /// Switch gaits at the next cycle boundary of the current gait.
    pub fn request_gait(&mut self, gait: GaitSpec, t: f64) {
        if gait == self.gait {
            self.pending_gait = None;
            return;
        }
        let period = self.gait.cycle_duration;
        let cycles = (self.gait_time(t) / period - 1e-9).ceil().max(0.0);
        self.pending_gait = Some((gait, self.gait_t0 + cycles * period));
    }

    fn gait_time(&self, t: f64) -> f64 {
        t - self.gait_t0
    }

    fn update_gait(&mut self, t: f64) {
        let due = matches!(&self.pending_gait, Some((_, at)) if t >= *at - 1e-9);
        if due {
            let (next, at) = self.pending_gait.take().expect("checked above");
            log::info!("gait {} -> {} at t = {:.3}", self.gait.name, next.name, at);
            self.gait = next;
            self.gait_t0 = at;
            self.mpc = None;
            self.pending_mpc = None;
        }
    }

    fn plan(&self, state: &GeneralizedState, command: &LocomotionCommand, t: f64) -> StepCommand {
        let steps = plan_footsteps(&self.model, state, command, &self.gait, self.gait_time(t), &self.config.footstep);
        let yaw = state.euler_rpy().z;
        let forward = state.base_linear_velocity.xy().dot(&nalgebra::Vector2::new(yaw.cos(), yaw.sin()));
        speed_step_width_adjust(&steps, forward, yaw, &self.config.footstep.width_schedule)
    }

    /// MPC update at its scheduled tick.
    pub fn mpc_update(
        &mut self,
        state: &GeneralizedState,
        foot_positions: &[Vector3<f64>; NUM_LEGS],
        command: &LocomotionCommand,
        t: f64,
    ) -> Result<(), ControllerError> {
        self.update_gait(t);
        let steps = self.plan(state, command, t);
        let sol = mpc_tick(
            &self.model,
            state,
            foot_positions,
            command,
            &self.gait,
            self.gait_time(t),
            &steps,
            &self.config.mpc,
            self.mpc.as_ref(),
        )
        .map_err(|source| ControllerError::Mpc { t, source })?;
        if self.mpc_latency && self.mpc.is_some() {
            self.pending_mpc = Some((sol, t));
        } else {
            self.mpc = Some(sol);
            self.mpc_solved_at = t;
        }
        Ok(())
    }

    /// MPC forces for the horizon step containing `t`.
    fn current_mpc_forces(&self, t: f64) -> [Vector3<f64>; NUM_LEGS] {
        match &self.mpc {
            Some(sol) if !sol.forces.is_empty() => {
                let dt = self.config.mpc.step_dt(&self.gait);
                let k = ((t - self.mpc_solved_at) / dt + 1e-9).floor().max(0.0) as usize;
                sol.forces[k.min(sol.forces.len() - 1)]
            }
            _ => [Vector3::zeros(); NUM_LEGS],
        }
    }

    /// WBIC update. Returns the joint command held by the PD loop until the
    /// next update.
    pub fn wbic_update(
        &mut self,
        state: &GeneralizedState,
        dynamics: &DynamicsQuantities,
        command: &LocomotionCommand,
        t: f64,
    ) -> Result<JointCommand, ControllerError> {
        if matches!(&self.pending_mpc, Some((_, at)) if *at < t) {
            let (sol, at) = self.pending_mpc.take().expect("checked above");
            self.mpc = Some(sol);
            self.mpc_solved_at = at;
        }
        self.update_gait(t);
        let dt = self.last_wbic_t.map_or(0.0, |t0| t - t0);
        self.last_wbic_t = Some(t);
        let tg = self.gait_time(t);
        let scheduled = contact_state(&self.gait, tg);

        for foot in 0..NUM_LEGS {
            if self.prev_contact[foot] && !scheduled[foot] {
                self.liftoff[foot] = dynamics.foot_positions[foot];
                self.landed[foot] = false;
            }
            if !self.prev_contact[foot] && scheduled[foot] {
                self.touchdown[foot].0 = t;
            }
        }
        self.prev_contact = scheduled;
        let contact = self.resolve_contact(&scheduled, dynamics, tg);

        // integrate the desired pose and keep it near the measured one
        let yaw = state.euler_rpy().z;
        self.yaw_des += command.yaw_rate * dt;
        let yaw_err = wrap_angle(self.yaw_des - yaw).clamp(-self.config.tracking.max_yaw_error, self.config.tracking.max_yaw_error);
        self.yaw_des = yaw + yaw_err;
        self.pos_des.x += command.velocity.x * dt;
        self.pos_des.y += command.velocity.y * dt;
        let mut e = self.pos_des.xy() - state.base_position.xy();
        let n = e.norm();
        if n > self.config.tracking.max_position_error {
            e *= self.config.tracking.max_position_error / n;
        }
        self.pos_des = Vector3::new(state.base_position.x + e.x, state.base_position.y + e.y, command.body_height);

        let gains = self.config.wbic.task_gains;
        let q_des = UnitQuaternion::from_euler_angles(0.0, 0.0, self.yaw_des);
        let v_des = Vector3::new(command.velocity.x, command.velocity.y, 0.0);
        let mut tasks = vec![
            Task::body_orientation(state, &q_des, &Vector3::new(0.0, 0.0, command.yaw_rate), &Vector3::zeros(), gains.ori),
            Task::body_position(state, &self.pos_des, &v_des, &Vector3::zeros(), gains.pos),
        ];

        let steps = self.plan(state, command, t);
        let mut swing_desired = [None; NUM_LEGS];
        let cc = self.config.contact;
        for foot in 0..NUM_LEGS {
            if contact[foot] {
                continue;
            }
            if scheduled[foot] {
                // late touchdown: keep pushing the foot down
                let (t_td, p_td) = self.touchdown[foot];
                let depth = (cc.descent_speed * (t - t_td)).min(cc.max_depth);
                let pos = Vector3::new(p_td.x, p_td.y, p_td.z.min(0.0) - depth);
                let vel = Vector3::new(0.0, 0.0, -cc.descent_speed);
                tasks.push(Task::foot_position(dynamics, foot, &pos, &vel, &Vector3::zeros(), gains.foot));
                swing_desired[foot] = Some(pos);
                continue;
            }
            let phase = swing_phase(&self.gait, tg, foot);
            let params = SwingParams {
                apex_height: self.config.footstep.apex,
                duration: self.gait.swing_time(foot),
                touchdown_vz: self.config.footstep.touchdown_vz,
            };
            let sample = swing_trajectory(&self.liftoff[foot], &steps.targets[foot], phase.progress, &params);
            tasks.push(Task::foot_position(dynamics, foot, &sample.pos, &sample.vel, &sample.acc, gains.foot));
            swing_desired[foot] = Some(sample.pos);
            self.touchdown[foot].1 = steps.targets[foot];
        }

        let mpc_forces = self.current_mpc_forces(t);
        let mpc_forces: [Vector3<f64>; NUM_LEGS] =
            std::array::from_fn(|i| if contact[i] { mpc_forces[i] } else { Vector3::zeros() });
        let out = wbic_tick(state, dynamics, &contact, &mpc_forces, &tasks, &self.config.wbic)
            .map_err(|source| ControllerError::Wbic { t, source })?;

        let pd = self.config.wbic.joint_pd;
        let cmd = JointCommand {
            tau_ff: out.tau,
            q_cmd: out.q_cmd,
            qd_cmd: out.qd_cmd,
            kp: JointVector::from_element(pd.kp),
            kd: JointVector::from_fn(|j, _| pd.kd_for(j)),
        };
        debug_assert_eq!(cmd.kp.len(), NUM_JOINTS);
        self.status = ControllerStatus {
            scheduled_contact: scheduled,
            contact,
            mpc_forces,
            wbic_forces: out.forces,
            swing_targets: steps.targets,
            swing_desired,
            gait_name: self.gait.name.clone(),
            qdd: out.qdd,
            qdd_cmd: out.qdd_cmd,
        };
        self.last_command = cmd;
        Ok(cmd)
    }
}

impl Controller {
    /// Contact set for WBIC: the schedule, corrected by measured foot height
    /// around touchdown when enabled.
    fn resolve_contact(&mut self, scheduled: &[bool; NUM_LEGS], dynamics: &DynamicsQuantities, tg: f64) -> [bool; NUM_LEGS] {
        let cc = self.config.contact;
        if !cc.enabled {
            return *scheduled;
        }
        std::array::from_fn(|foot| {
            let down = dynamics.foot_positions[foot].z < cc.height;
            if scheduled[foot] {
                self.landed[foot] |= down;
                self.landed[foot]
            } else {
                let progress = swing_phase(&self.gait, tg, foot).progress;
                if down && progress > cc.early_progress {
                    self.landed[foot] = true;
                }
                self.landed[foot]
            }
        })
    }
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI
}
