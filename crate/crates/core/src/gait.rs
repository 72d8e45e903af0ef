//! Periodic phase-based gait scheduling.
//!
//! A gait is fully described by one phase offset and one stance fraction per
//! foot over a cycle of duration `T`. Foot `i` is in stance at time `t` iff
//! `frac(t/T - offset_i) < stance_i`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::NUM_LEGS;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GaitError {
    #[error("gait `{name}`: {message}")]
    Invalid { name: String, message: String },
    #[error("frequency scale factor must be > 0, got {0}")]
    BadScale(f64),
    #[error("unknown gait `{0}`")]
    Unknown(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaitSpec {
    pub name: String,
    /// Cycle duration in seconds.
    #[serde(rename = "T")]
    pub cycle_duration: f64,
    pub offsets: [f64; NUM_LEGS],
    #[serde(rename = "stance")]
    pub stance_fractions: [f64; NUM_LEGS],
}

impl GaitSpec {
    pub fn new(
        name: &str,
        cycle_duration: f64,
        offsets: [f64; NUM_LEGS],
        stance_fractions: [f64; NUM_LEGS],
    ) -> Result<Self, GaitError> {
        let g = Self {
            name: name.to_string(),
            cycle_duration,
            offsets,
            stance_fractions,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), GaitError> {
        let fail = |message: String| {
            Err(GaitError::Invalid {
                name: self.name.clone(),
                message,
            })
        };
        if !(self.cycle_duration.is_finite() && self.cycle_duration > 0.0) {
            return fail(format!("cycle duration must be > 0, got {}", self.cycle_duration));
        }
        for (i, o) in self.offsets.iter().enumerate() {
            if !(0.0..1.0).contains(o) {
                return fail(format!("offset[{i}] = {o} not in [0, 1)"));
            }
        }
        for (i, s) in self.stance_fractions.iter().enumerate() {
            if !(*s > 0.0 && *s <= 1.0) {
                return fail(format!("stance[{i}] = {s} not in (0, 1]"));
            }
        }
        Ok(())
    }

    /// Fractional phase of `foot` within its own cycle, in [0, 1).
    pub fn foot_phase(&self, t: f64, foot: usize) -> f64 {
        let phase = (t / self.cycle_duration - self.offsets[foot]).rem_euclid(1.0);
        // rem_euclid can round up to exactly 1.0 for tiny negative inputs
        if phase >= 1.0 {
            0.0
        } else {
            phase
        }
    }

    /// Stance duration of `foot` in seconds.
    pub fn stance_time(&self, foot: usize) -> f64 {
        self.stance_fractions[foot] * self.cycle_duration
    }

    pub fn swing_time(&self, foot: usize) -> f64 {
        (1.0 - self.stance_fractions[foot]) * self.cycle_duration
    }

    /// True when some foot has a swing phase.
    pub fn has_swing(&self) -> bool {
        self.stance_fractions.iter().any(|s| *s < 1.0)
    }
}

pub fn contact_state(gait: &GaitSpec, t: f64) -> [bool; NUM_LEGS] {
    std::array::from_fn(|i| gait.foot_phase(t, i) < gait.stance_fractions[i])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwingPhase {
    pub in_swing: bool,
    /// 0 at liftoff, 1 at touchdown; 0 while in stance.
    pub progress: f64,
    pub remaining_swing_time: f64,
}

pub fn swing_phase(gait: &GaitSpec, t: f64, foot: usize) -> SwingPhase {
    let phase = gait.foot_phase(t, foot);
    let stance = gait.stance_fractions[foot];
    if phase < stance {
        return SwingPhase {
            in_swing: false,
            progress: 0.0,
            remaining_swing_time: 0.0,
        };
    }
    SwingPhase {
        in_swing: true,
        progress: ((phase - stance) / (1.0 - stance)).clamp(0.0, 1.0),
        remaining_swing_time: (1.0 - phase) * gait.cycle_duration,
    }
}

/// Progress through the current stance (0 at touchdown) and the stance time
/// left, or `None` while swinging.
pub fn stance_phase(gait: &GaitSpec, t: f64, foot: usize) -> Option<(f64, f64)> {
    let phase = gait.foot_phase(t, foot);
    let stance = gait.stance_fractions[foot];
    (phase < stance).then(|| (phase / stance, (stance - phase) * gait.cycle_duration))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContactTable {
    pub horizon_steps: usize,
    pub dt: f64,
    pub flags: Vec<[bool; NUM_LEGS]>,
}

impl ContactTable {
    pub fn stance_count(&self, foot: usize) -> usize {
        self.flags.iter().filter(|row| row[foot]).count()
    }
}

/// Row `k` holds the contact state at `t + k·dt`.
pub fn build_contact_table(gait: &GaitSpec, t: f64, horizon: usize, dt: f64) -> ContactTable {
    assert!(horizon >= 1 && dt > 0.0, "horizon >= 1 and dt > 0 required");
    ContactTable {
        horizon_steps: horizon,
        dt,
        flags: (0..horizon)
            .map(|k| contact_state(gait, t + k as f64 * dt))
            .collect(),
    }
}

/// Speed the gait up by `factor`, keeping offsets and duty factors.
pub fn frequency_scale(gait: &GaitSpec, factor: f64) -> Result<GaitSpec, GaitError> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(GaitError::BadScale(factor));
    }
    Ok(GaitSpec {
        cycle_duration: gait.cycle_duration / factor,
        ..gait.clone()
    })
}

/// Bundled gaits in (FR, FL, HR, HL) order. Gaits with long single-side
/// or flight phases use short cycles so the body drifts little per phase.
pub fn gait_library() -> Vec<GaitSpec> {
    let g = |name: &str, t: f64, offsets: [f64; 4], stance: [f64; 4]| {
        GaitSpec::new(name, t, offsets, stance).expect("library gait is valid")
    };
    vec![
        g("stand", 0.5, [0.0; 4], [1.0; 4]),
        g("trot", 0.5, [0.0, 0.5, 0.5, 0.0], [0.5; 4]),
        g("walking_trot", 0.6, [0.0, 0.5, 0.5, 0.0], [0.6; 4]),
        g("running_trot", 0.4, [0.0, 0.5, 0.5, 0.0], [0.4; 4]),
        g("pace", 0.25, [0.0, 0.5, 0.0, 0.5], [0.5; 4]),
        g("bound", 0.25, [0.0, 0.0, 0.5, 0.5], [0.4; 4]),
        g("pronk", 0.25, [0.0; 4], [0.5; 4]),
        g("gallop", 0.25, [0.0, 0.2, 0.7, 0.9], [0.4; 4]),
    ]
}

pub fn gait_by_name(name: &str) -> Result<GaitSpec, GaitError> {
    gait_library()
        .into_iter()
        .find(|g| g.name == name)
        .ok_or_else(|| GaitError::Unknown(name.to_string()))
}
