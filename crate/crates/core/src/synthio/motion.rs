use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CapsuleBody, JointAngles, Skeleton, NUM_JOINTS};

/// Motion families; each drives a different set of joint groups hard.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Walking,
    Boxing,
    Reaching,
    Squatting,
    Waving,
    LookingAround,
}

impl Action {
    pub const ALL: [Action; 6] =
        [Action::Walking, Action::Boxing, Action::Reaching, Action::Squatting, Action::Waving, Action::LookingAround];

    pub fn name(self) -> &'static str {
        match self {
            Action::Walking => "walking",
            Action::Boxing => "boxing",
            Action::Reaching => "reaching",
            Action::Squatting => "squatting",
            Action::Waving => "waving",
            Action::LookingAround => "looking_around",
        }
    }

    /// `(base pose, amplitude)` per joint and axis.
    fn profile(self) -> (JointAngles, JointAngles) {
        let mut base = [[0.0; 3]; NUM_JOINTS];
        let mut amp = [[0.0; 3]; NUM_JOINTS];
        // small background motion everywhere
        amp[0] = [0.15, 0.15, 0.05];
        amp[1] = [0.08, 0.1, 0.05];
        for j in [2, 3] {
            amp[j] = [0.25, 0.05, 0.15];
        }
        for j in [4, 5] {
            base[j] = [-0.3, 0.0, 0.0];
            amp[j] = [0.25, 0.05, 0.0];
        }
        for j in [8, 9] {
            amp[j] = [0.1, 0.05, 0.05];
        }
        for j in [10, 11] {
            base[j] = [0.1, 0.0, 0.0];
            amp[j] = [0.1, 0.0, 0.0];
        }
        match self {
            Action::Walking => {
                for j in [8, 9] {
                    amp[j] = [0.6, 0.05, 0.05];
                }
                for j in [10, 11] {
                    base[j] = [0.5, 0.0, 0.0];
                    amp[j] = [0.5, 0.0, 0.0];
                }
                for j in [12, 13] {
                    amp[j] = [0.3, 0.0, 0.0];
                }
                for j in [2, 3] {
                    amp[j] = [0.5, 0.05, 0.1];
                }
                base[0] = [-0.25, 0.0, 0.0];
            }
            Action::Boxing => {
                for j in [2, 3] {
                    base[j] = [-1.1, 0.0, 0.0];
                    amp[j] = [0.6, 0.3, 0.3];
                }
                for j in [4, 5] {
                    base[j] = [-1.3, 0.0, 0.0];
                    amp[j] = [0.9, 0.1, 0.0];
                }
                amp[1] = [0.15, 0.35, 0.1];
            }
            Action::Reaching => {
                for j in [2, 3] {
                    base[j] = [-1.2, 0.0, 0.0];
                    amp[j] = [0.9, 0.2, 0.4];
                }
                for j in [4, 5] {
                    amp[j] = [0.6, 0.1, 0.0];
                }
                base[1] = [-0.15, 0.0, 0.0];
                amp[1] = [0.2, 0.2, 0.1];
            }
            Action::Squatting => {
                base[1] = [-0.2, 0.0, 0.0];
                amp[1] = [0.2, 0.05, 0.05];
                for j in [8, 9] {
                    base[j] = [-0.8, 0.0, 0.0];
                    amp[j] = [0.7, 0.05, 0.1];
                }
                for j in [10, 11] {
                    base[j] = [1.0, 0.0, 0.0];
                    amp[j] = [0.9, 0.0, 0.0];
                }
                for j in [2, 3] {
                    base[j] = [-0.8, 0.0, 0.0];
                    amp[j] = [0.4, 0.1, 0.1];
                }
                base[0] = [-0.2, 0.0, 0.0];
            }
            Action::Waving => {
                base[3] = [-0.4, 0.0, 1.8];
                amp[3] = [0.3, 0.2, 0.6];
                base[5] = [-0.9, 0.0, 0.0];
                amp[5] = [0.8, 0.2, 0.0];
                base[2] = [-0.3, 0.0, 0.0];
            }
            Action::LookingAround => {
                amp[0] = [0.45, 0.5, 0.15];
                amp[1] = [0.15, 0.3, 0.1];
                for j in [2, 3] {
                    base[j] = [-0.4, 0.0, 0.0];
                    amp[j] = [0.5, 0.1, 0.2];
                }
            }
        }
        (base, amp)
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Action::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown action `{s}`")))
    }
}

/// Per-joint, per-axis angle limits `(min, max)`, radians.
pub fn joint_limits() -> [[(f64, f64); 3]; NUM_JOINTS] {
    let mut lim = [[(-0.3, 0.3); 3]; NUM_JOINTS];
    lim[0] = [(-0.7, 0.6), (-0.8, 0.8), (-0.3, 0.3)];
    lim[1] = [(-0.6, 0.4), (-0.6, 0.6), (-0.3, 0.3)];
    lim[2] = [(-2.8, 0.6), (-0.6, 0.6), (-1.4, 0.4)];
    lim[3] = [(-2.8, 0.6), (-0.6, 0.6), (-0.4, 2.4)];
    for j in [4, 5] {
        lim[j] = [(-2.4, 0.0), (-0.4, 0.4), (-0.1, 0.1)];
    }
    for j in [8, 9] {
        lim[j] = [(-1.9, 0.5), (-0.4, 0.4), (-0.4, 0.4)];
    }
    lim[8][2] = (-0.5, 0.2);
    lim[9][2] = (-0.2, 0.5);
    for j in [10, 11] {
        lim[j] = [(0.0, 2.3), (-0.1, 0.1), (-0.1, 0.1)];
    }
    for j in [12, 13] {
        lim[j] = [(-0.6, 0.6), (-0.2, 0.2), (-0.2, 0.2)];
    }
    lim
}

/// Knobs of the band-limited motion generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionConfig {
    pub fps: f64,
    /// Upper bound on any angle's change between consecutive frames, radians.
    pub max_velocity: f64,
    /// Multiplier on every action's amplitudes.
    pub amplitude_scale: f64,
    /// Sinusoids per angle.
    pub components: usize,
    /// Frequency range of each sinusoid, Hz.
    pub min_frequency: f64,
    pub max_frequency: f64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self { fps: 10.0, max_velocity: 0.35, amplitude_scale: 1.0, components: 3, min_frequency: 0.1, max_frequency: 0.6 }
    }
}

/// Body proportions of one synthetic subject.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityParams {
    pub id: u32,
    pub torso_scale: f64,
    pub arm_scale: f64,
    pub leg_scale: f64,
    /// Multiplier on capsule radii.
    pub girth: f64,
}

impl IdentityParams {
    /// Deterministic proportions for identity `id`.
    pub fn sample(id: u32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(id as u64 + 1)));
        Self {
            id,
            torso_scale: rng.random_range(0.9..1.1),
            arm_scale: rng.random_range(0.9..1.1),
            leg_scale: rng.random_range(0.9..1.1),
            girth: rng.random_range(0.85..1.2),
        }
    }

    pub fn skeleton(&self) -> Skeleton {
        Skeleton::scaled(self.torso_scale, self.arm_scale, self.leg_scale)
    }

    /// The default capsule body with every radius scaled by `girth`.
    pub fn body(&self) -> CapsuleBody {
        let mut body = CapsuleBody::default();
        for c in body.capsules.iter_mut() {
            c.radius *= self.girth;
        }
        body
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionClip {
    pub identity_id: u32,
    pub action: Action,
    pub fps: f64,
    pub frames: Vec<JointAngles>,
}

/// Band-limited random joint trajectories: per angle, a sum of sinusoids
/// with random phases, frequencies and amplitudes around the action's base
/// pose, clamped to the joint limits. Amplitudes are shrunk as needed so the
/// per-frame change never exceeds `max_velocity`.
pub fn sample_motion(
    seed: u64,
    identity: &IdentityParams,
    frames: usize,
    action: Action,
    cfg: &MotionConfig,
) -> Result<MotionClip> {
    if frames == 0 || !(cfg.fps > 0.0) || !(cfg.max_velocity > 0.0) || cfg.min_frequency > cfg.max_frequency {
        return Err(Error::Config(format!("invalid motion request: {frames} frames, {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (base, amp) = action.profile();
    let limits = joint_limits();
    let comps = cfg.components.max(1);
    let dt = 1.0 / cfg.fps;
    // (amplitude, angular frequency, phase) per component per angle
    let mut waves = vec![[vec![], vec![], vec![]]; NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        for a in 0..3 {
            let mut total = 0.0;
            let mut comp = vec![(0.0, 0.0, 0.0); comps];
            for c in comp.iter_mut() {
                let w = rng.random::<f64>();
                let f = rng.random_range(cfg.min_frequency..=cfg.max_frequency);
                let phase = rng.random_range(0.0..TAU);
                *c = (w, TAU * f, phase);
                total += w;
            }
            let target = amp[j][a] * cfg.amplitude_scale;
            // |d/dt Σ A sin(ωt+φ)| · dt <= Σ A ω dt
            let mut slope = 0.0;
            for c in comp.iter_mut() {
                c.0 = if total > 0.0 { target * c.0 / total } else { 0.0 };
                slope += c.0 * c.1 * dt;
            }
            // chord bound: |sin(x+h) - sin(x)| <= |h|, so slope bounds the step
            if slope > cfg.max_velocity {
                let s = cfg.max_velocity / slope;
                for c in comp.iter_mut() {
                    c.0 *= s;
                }
            }
            waves[j][a] = comp;
        }
    }
    let t0 = rng.random_range(0.0..100.0);
    let clip_frames = (0..frames)
        .map(|i| {
            let t = t0 + i as f64 * dt;
            let mut angles = [[0.0; 3]; NUM_JOINTS];
            for j in 0..NUM_JOINTS {
                for a in 0..3 {
                    let v = base[j][a] + waves[j][a].iter().map(|&(am, w, ph)| am * (w * t + ph).sin()).sum::<f64>();
                    let (lo, hi) = limits[j][a];
                    angles[j][a] = v.clamp(lo, hi);
                }
            }
            angles
        })
        .collect();
    Ok(MotionClip { identity_id: identity.id, action, fps: cfg.fps, frames: clip_frames })
}
