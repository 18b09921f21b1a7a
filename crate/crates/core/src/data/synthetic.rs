//! Procedural gait generator.
//!
//! Builds walking sequences on the 16-joint skeleton from a small set of
//! per-class parameters: sinusoidal leg and arm oscillation, torso slump,
//! forward drift, pelvis bounce, and Gaussian joint noise. Each class also
//! carries a temporal signature that survives downsampling to 48 frames:
//! sad gaits freeze for 20-40 frames at a time, angry gaits stomp in short
//! bursts, happy gaits modulate their swing with a multi-second envelope.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{joint, EmotionLabel, Frame, SkeletonSequence, JOINT_COUNT, NUM_CLASSES};
use crate::rng::stream_rng;

/// Public knobs of one emotion class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassParams {
    /// Stride cycles per second.
    pub frequency_hz: f64,
    /// Peak hip swing in radians.
    pub stride_amp: f64,
    /// Peak shoulder swing in radians.
    pub arm_amp: f64,
    /// Torso slump (forward spine curvature) in radians.
    pub slump_rad: f64,
    /// Forward drift in meters per second.
    pub speed: f64,
    /// Per-joint Gaussian position noise in meters.
    pub noise_std: f64,
}

/// Generator settings: sequence geometry plus one preset per class.
///
/// Deserializes from JSON where every field is optional; missing fields fall
/// back to the defaults below. Overriding a class replaces all six knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Frames per sequence before any resampling.
    #[serde(default = "default_frames")]
    pub frames: usize,
    /// Capture rate the kinematics are integrated at.
    #[serde(default = "default_fps")]
    pub fps: f64,
    /// Relative per-sequence jitter applied to every class knob.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    #[serde(default = "preset_happy")]
    pub happy: ClassParams,
    #[serde(default = "preset_sad")]
    pub sad: ClassParams,
    #[serde(default = "preset_angry")]
    pub angry: ClassParams,
    #[serde(default = "preset_neutral")]
    pub neutral: ClassParams,
}

fn default_frames() -> usize {
    240
}

fn default_fps() -> f64 {
    30.0
}

fn default_jitter() -> f64 {
    0.15
}

fn preset_happy() -> ClassParams {
    ClassParams {
        frequency_hz: 1.05,
        stride_amp: 0.50,
        arm_amp: 0.55,
        slump_rad: 0.05,
        speed: 1.15,
        noise_std: 0.012,
    }
}

fn preset_sad() -> ClassParams {
    ClassParams {
        frequency_hz: 0.70,
        stride_amp: 0.30,
        arm_amp: 0.18,
        slump_rad: 0.38,
        speed: 0.55,
        noise_std: 0.012,
    }
}

fn preset_angry() -> ClassParams {
    ClassParams {
        frequency_hz: 1.25,
        stride_amp: 0.55,
        arm_amp: 0.42,
        slump_rad: 0.16,
        speed: 1.25,
        noise_std: 0.012,
    }
}

fn preset_neutral() -> ClassParams {
    ClassParams {
        frequency_hz: 0.90,
        stride_amp: 0.42,
        arm_amp: 0.35,
        slump_rad: 0.12,
        speed: 0.90,
        noise_std: 0.012,
    }
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            frames: default_frames(),
            fps: default_fps(),
            jitter: default_jitter(),
            happy: preset_happy(),
            sad: preset_sad(),
            angry: preset_angry(),
            neutral: preset_neutral(),
        }
    }
}

impl GeneratorConfig {
    /// The preset of one class.
    pub fn class(&self, label: EmotionLabel) -> &ClassParams {
        match label {
            EmotionLabel::Happy => &self.happy,
            EmotionLabel::Sad => &self.sad,
            EmotionLabel::Angry => &self.angry,
            EmotionLabel::Neutral => &self.neutral,
        }
    }
}

/// Frame windows as (start, length) pairs.
type Windows = Vec<(usize, usize)>;

fn in_window(windows: &Windows, t: usize) -> bool {
    windows.iter().any(|&(s, w)| t >= s && t < s + w)
}

/// Smooth bump in [0, 1] summed over overlapping windows, capped at 1.2.
fn bump_at(windows: &Windows, t: usize) -> f64 {
    let mut b = 0.0;
    for &(s, w) in windows {
        if t >= s && t < s + w {
            let prog = (t - s) as f64 / w as f64;
            b += (std::f64::consts::PI * prog).sin().powi(2);
        }
    }
    b.min(1.2)
}

fn normalize_to(v: [f64; 3], len: f64) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n * len, v[1] / n * len, v[2] / n * len]
}

fn offset(from: [f64; 3], dir: [f64; 3], len: f64) -> [f64; 3] {
    let d = normalize_to(dir, len);
    [from[0] + d[0], from[1] + d[1], from[2] + d[2]]
}

/// Generates one walking sequence of the given class.
///
/// Deterministic for a fixed rng state. The walker drifts along a random
/// heading; orientation-free cues (limb geometry, rhythm, speed) carry the
/// class.
pub fn generate<R: Rng>(config: &GeneratorConfig, label: EmotionLabel, rng: &mut R) -> SkeletonSequence {
    use joint::*;
    let p = config.class(label);
    let jit = |rng: &mut R, v: f64| v * (1.0 + config.jitter * rng.random_range(-1.0..1.0));

    let freq = jit(rng, p.frequency_hz);
    let stride = jit(rng, p.stride_amp);
    let arm = jit(rng, p.arm_amp);
    let slump = jit(rng, p.slump_rad);
    let speed = jit(rng, p.speed);
    let noise = jit(rng, p.noise_std);
    let scale = 1.0 + 0.06 * rng.random_range(-1.0..1.0);
    let phase0 = rng.random_range(0.0..std::f64::consts::TAU);
    let heading = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);

    // Class-specific temporal events; windows are wide enough to survive a
    // five-fold temporal downsampling.
    let mut pauses: Windows = Vec::new();
    let mut stomps: Windows = Vec::new();
    let mut env_period = 0.0;
    let mut env_phase = 0.0;
    if config.frames >= 60 {
        match label {
            EmotionLabel::Sad => {
                for _ in 0..2 {
                    let len = rng.random_range(20..=40usize);
                    let start = rng.random_range(0..config.frames - len);
                    pauses.push((start, len));
                }
            }
            EmotionLabel::Angry => {
                for _ in 0..(config.frames / 60).max(1) {
                    let len = rng.random_range(10..=14usize);
                    let start = rng.random_range(0..config.frames - len);
                    stomps.push((start, len));
                }
            }
            EmotionLabel::Happy => {
                env_period = rng.random_range(3.6..4.8);
                env_phase = rng.random_range(0.0..std::f64::consts::TAU);
            }
            EmotionLabel::Neutral => {}
        }
    }

    let pelvis_h = 0.92 * scale;
    let spine_len = 0.26 * scale;
    let neck_len = 0.24 * scale;
    let head_len = 0.16 * scale;
    let sh_off = 0.19 * scale;
    let upper_arm = 0.30 * scale;
    let forearm = 0.27 * scale;
    let hip_off = 0.10 * scale;
    let thigh = 0.44 * scale;
    let shin = 0.44 * scale;

    let dt = 1.0 / config.fps;
    let mut tau = 0.0f64;
    let (sin_h, cos_h) = heading.sin_cos();
    let mut frames = Vec::with_capacity(config.frames);
    for t in 0..config.frames {
        let phi = std::f64::consts::TAU * freq * tau + phase0;
        let bump = bump_at(&stomps, t);

        let (arm_t, stride_env) = if env_period > 0.0 {
            let e = (std::f64::consts::TAU * tau / env_period + env_phase).sin();
            (arm * (1.0 + 0.45 * e), stride * (1.0 + 0.18 * e))
        } else {
            (arm, stride)
        };
        let stride_t = stride_env * (1.0 + 0.9 * bump);
        let knee_amp = 0.55 * stride_t + 0.5 * bump;
        let bounce_amp = 0.05 * stride_t + 0.05 * bump;

        let bounce = 0.5 * bounce_amp * (1.0 - (2.0 * phi).cos());
        let sway = 0.025 * scale * phi.sin();
        let root = [speed * tau, pelvis_h + bounce - 0.05 * bump * scale, sway];

        // Torso chain curves forward progressively with the slump.
        let spine = offset(root, [slump.sin(), slump.cos(), 0.0], spine_len);
        let s2 = 1.7 * slump;
        let neck = offset(spine, [s2.sin(), s2.cos(), 0.0], neck_len);
        let nod = 2.3 * slump + 0.06 * (2.0 * phi + 0.5).sin();
        let head = offset(neck, [nod.sin(), nod.cos(), 0.0], head_len);

        let mut f: Frame = [[0.0; 3]; JOINT_COUNT];
        f[ROOT] = root;
        f[SPINE] = spine;
        f[NECK] = neck;
        f[HEAD] = head;

        for (side, sh_j, el_j, ha_j, hip_j, kn_j, ft_j, leg_phase) in [
            (1.0, L_SHOULDER, L_ELBOW, L_HAND, L_HIP, L_KNEE, L_FOOT, 0.0),
            (-1.0, R_SHOULDER, R_ELBOW, R_HAND, R_HIP, R_KNEE, R_FOOT, std::f64::consts::PI),
        ] {
            let shoulder = [neck[0] + 0.01, neck[1] - 0.04 * scale, neck[2] + side * sh_off];
            f[sh_j] = shoulder;
            // Arms oppose the same-side leg; elbows bend more on the forward swing.
            let fwd = (phi + leg_phase + std::f64::consts::PI).sin();
            let alpha = arm_t * fwd + 0.25 * slump;
            let beta = 0.22 + 0.5 * arm_t * fwd.max(0.0);
            f[el_j] = offset(shoulder, [alpha.sin(), -alpha.cos(), side * 0.10], upper_arm);
            let gb = alpha + beta;
            f[ha_j] = offset(f[el_j], [gb.sin(), -gb.cos(), side * 0.06], forearm);

            let hip = [root[0], root[1] - 0.03 * scale, root[2] + side * hip_off];
            f[hip_j] = hip;
            let theta = stride_t * (phi + leg_phase).sin();
            f[kn_j] = offset(hip, [theta.sin(), -theta.cos(), side * 0.02], thigh);
            // Knee flexes during the forward swing of the leg.
            let kappa = 0.10 + knee_amp * (phi + leg_phase).cos().max(0.0).powi(2);
            let sa = theta - kappa;
            f[ft_j] = offset(f[kn_j], [sa.sin(), -sa.cos(), side * 0.01], shin);
        }

        for point in &mut f {
            let (x, z) = (point[0], point[2]);
            point[0] = cos_h * x + sin_h * z;
            point[2] = -sin_h * x + cos_h * z;
            for c in point.iter_mut() {
                let n: f64 = rng.sample(StandardNormal);
                *c += noise * n;
            }
        }
        frames.push(f);

        if !in_window(&pauses, t) {
            tau += dt;
        }
    }

    SkeletonSequence { id: None, label, frames }
}

/// Generates `counts[c]` sequences of class `c`, each from its own seed
/// stream, with ids like `happy-0003`.
pub fn generate_dataset(
    config: &GeneratorConfig,
    counts: [usize; NUM_CLASSES],
    seed: u64,
) -> Vec<SkeletonSequence> {
    let mut out = Vec::new();
    for label in EmotionLabel::ALL {
        for i in 0..counts[label.index()] {
            let mut rng = stream_rng(seed, label.as_str(), i as u64);
            let mut seq = generate(config, label, &mut rng);
            seq.id = Some(format!("{label}-{i:04}"));
            out.push(seq);
        }
    }
    out
}
