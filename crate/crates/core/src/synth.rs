//! Synthetic paired pose/IMU generator.
//!
//! A 14-joint planar skeleton is driven by per-degree-of-freedom oscillators plus
//! a seeded low-frequency wander that keeps every window of a sequence distinct.
//! Pose streams are the forward kinematics projected to pixels; each IMU is the
//! discrete second difference of its mounted joint's world position minus
//! gravity, rotated into the segment frame, plus the first difference of the
//! segment angle as the gyroscope.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{ImuSequence, PoseSequence, SensorLayout, SensorSpec, SequencePair};
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const JOINT_COUNT: usize = 14;
pub const JOINT_NAMES: [&str; JOINT_COUNT] = [
    "head",
    "torso",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
];

/// IMU channels: three accelerometer axes then three gyroscope axes.
pub const IMU_CHANNELS: usize = 6;

/// Degrees of freedom driven by oscillators, in [`MotionParams::dofs`] order.
pub const DOF_NAMES: [&str; DOF_COUNT] = [
    "root_x",
    "root_y",
    "trunk",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
];
pub const DOF_COUNT: usize = 11;

const PX_PER_M: f64 = 100.0;
const WANDER_COMPONENTS: usize = 6;

/// Default layout: one sensor per wrist and ankle, each bound to its three-joint limb chain.
pub fn default_layout() -> SensorLayout {
    let spec = |id: &str, part: &str, j: [usize; 3]| SensorSpec {
        sensor_id: id.into(),
        body_part: part.into(),
        joint_indices: j.to_vec(),
    };
    SensorLayout::new(vec![
        spec("left_wrist", "left_arm", [2, 4, 6]),
        spec("right_wrist", "right_arm", [3, 5, 7]),
        spec("left_ankle", "left_leg", [8, 10, 12]),
        spec("right_ankle", "right_leg", [9, 11, 13]),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Oscillator {
    pub amplitude: f64,
    pub frequency_hz: f64,
    pub phase: f64,
}

/// Motion of one degree of freedom: radians for angles, metres for the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DofMotion {
    pub components: Vec<Oscillator>,
    /// Linear drift per second.
    pub drift: f64,
    /// Amplitude of the seeded low-frequency wander.
    pub wander: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionParams {
    pub dofs: Vec<DofMotion>,
    pub action_class: u32,
    /// Pixels.
    pub noise_std_pose: f64,
    /// Per IMU channel.
    pub noise_std_imu: Vec<f64>,
    /// Optional constant per-channel IMU bias.
    pub imu_bias: Vec<f64>,
    /// World gravity, m/s². The motion plane is x (right) / y (up); z points out of it.
    pub gravity: [f64; 3],
    pub seed: u64,
    /// Segment length multiplier.
    pub body_scale: f64,
    /// Image position of the pelvis at rest, pixels.
    pub origin_px: [f64; 2],
    pub imu_rate_hz: f64,
    pub pose_fps: f64,
}

impl Default for MotionParams {
    fn default() -> Self {
        MotionParams {
            dofs: vec![DofMotion::default(); DOF_COUNT],
            action_class: 0,
            noise_std_pose: 0.0,
            noise_std_imu: vec![0.0; IMU_CHANNELS],
            imu_bias: vec![0.0; IMU_CHANNELS],
            gravity: [0.0, -9.81, 0.0],
            seed: 0,
            body_scale: 1.0,
            origin_px: [320.0, 360.0],
            imu_rate_hz: 50.0,
            pose_fps: 25.0,
        }
    }
}

impl MotionParams {
    pub fn validate(&self) -> Result<()> {
        if self.dofs.len() != DOF_COUNT {
            return Err(Error::Config(format!(
                "expected {} degrees of freedom, got {}",
                DOF_COUNT,
                self.dofs.len()
            )));
        }
        if !(self.imu_rate_hz > 0.0 && self.pose_fps > 0.0) {
            return Err(Error::Config("sample rates must be positive".into()));
        }
        let nyquist_margin = self.imu_rate_hz.min(self.pose_fps) / 4.0;
        for (d, name) in self.dofs.iter().zip(DOF_NAMES) {
            for o in &d.components {
                if !(o.frequency_hz > 0.0 && o.frequency_hz < nyquist_margin) {
                    return Err(Error::Config(format!(
                        "{name}: frequency {} Hz outside (0, {nyquist_margin})",
                        o.frequency_hz
                    )));
                }
                if !(o.amplitude >= 0.0) {
                    return Err(Error::Config(format!("{name}: negative amplitude")));
                }
            }
            if !(d.wander >= 0.0) {
                return Err(Error::Config(format!("{name}: negative wander")));
            }
        }
        if self.noise_std_imu.len() != IMU_CHANNELS || self.imu_bias.len() != IMU_CHANNELS {
            return Err(Error::Config(format!("imu noise and bias need {IMU_CHANNELS} channels")));
        }
        if !(self.body_scale > 0.0) {
            return Err(Error::Config("body_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Seed of the `index`-th item derived from a master seed (splitmix64).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sum of random low-frequency sinusoids with unit RMS.
#[derive(Debug, Clone)]
struct Wander {
    terms: Vec<(f64, f64, f64)>,
}

impl Wander {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut terms = Vec::with_capacity(WANDER_COMPONENTS);
        for _ in 0..WANDER_COMPONENTS {
            let f = rng.random_range(0.05..0.6);
            let p = rng.random_range(0.0..2.0 * PI);
            let a = rng.random_range(0.5..1.0);
            terms.push((a, f, p));
        }
        let rms = libm::sqrt(terms.iter().map(|t| t.0 * t.0 / 2.0).sum::<f64>());
        for t in &mut terms {
            t.0 /= rms;
        }
        Wander { terms }
    }

    fn eval(&self, t: f64) -> f64 {
        self.terms
            .iter()
            .map(|&(a, f, p)| a * libm::sin(2.0 * PI * f * t + p))
            .sum()
    }
}

/// Deterministic planar skeleton driven by [`MotionParams`].
#[derive(Debug, Clone)]
pub struct Kinematics {
    params: MotionParams,
    wander: Vec<Wander>,
}

/// World-frame joint positions (metres, y up) at one instant.
pub type JointPositions = [[f64; 2]; JOINT_COUNT];

impl Kinematics {
    pub fn new(params: &MotionParams) -> Result<Self> {
        params.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, 0xA11CE));
        let wander = (0..DOF_COUNT).map(|_| Wander::new(&mut rng)).collect();
        Ok(Kinematics {
            params: params.clone(),
            wander,
        })
    }

    fn dof(&self, k: usize, t: f64) -> f64 {
        let d = &self.params.dofs[k];
        let osc: f64 = d
            .components
            .iter()
            .map(|o| o.amplitude * libm::sin(2.0 * PI * o.frequency_hz * t + o.phase))
            .sum();
        osc + d.drift * t + d.wander * self.wander[k].eval(t)
    }

    pub fn joints(&self, t: f64) -> JointPositions {
        let s = self.params.body_scale;
        let dir = |a: f64| [libm::cos(a), libm::sin(a)];
        let add = |p: [f64; 2], l: f64, a: f64| {
            let d = dir(a);
            [p[0] + l * d[0], p[1] + l * d[1]]
        };
        let q: Vec<f64> = (0..DOF_COUNT).map(|k| self.dof(k, t)).collect();
        let pelvis = [q[0], q[1]];
        let up = PI / 2.0 + q[2];
        let torso = add(pelvis, 0.5 * s, up);
        let head = add(torso, 0.25 * s, up);
        let across = q[2];
        let l_sh = add(torso, 0.2 * s, across + PI);
        let r_sh = add(torso, 0.2 * s, across);
        let down = -PI / 2.0 + q[2];
        let l_ua = down - q[3];
        let r_ua = down + q[4];
        let l_el = add(l_sh, 0.3 * s, l_ua);
        let r_el = add(r_sh, 0.3 * s, r_ua);
        let l_wr = add(l_el, 0.25 * s, l_ua - q[5]);
        let r_wr = add(r_el, 0.25 * s, r_ua + q[6]);
        let l_hip = add(pelvis, 0.12 * s, across + PI);
        let r_hip = add(pelvis, 0.12 * s, across);
        let l_th = -PI / 2.0 - q[7];
        let r_th = -PI / 2.0 + q[8];
        let l_kn = add(l_hip, 0.45 * s, l_th);
        let r_kn = add(r_hip, 0.45 * s, r_th);
        let l_an = add(l_kn, 0.42 * s, l_th + q[9]);
        let r_an = add(r_kn, 0.42 * s, r_th - q[10]);
        [
            head, torso, l_sh, r_sh, l_el, r_el, l_wr, r_wr, l_hip, r_hip, l_kn, r_kn, l_an, r_an,
        ]
    }

    /// Absolute angle of the segment `parent → child`; zero when both coincide.
    pub fn segment_angle(joints: &JointPositions, parent: usize, child: usize) -> f64 {
        if parent == child {
            return 0.0;
        }
        let d = [joints[child][0] - joints[parent][0], joints[child][1] - joints[parent][1]];
        libm::atan2(d[1], d[0])
    }

    pub fn to_pixels(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.params.origin_px[0] + PX_PER_M * p[0],
            self.params.origin_px[1] - PX_PER_M * p[1],
        ]
    }
}

/// Wrap an angle difference into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    } else if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

/// Generate a pose stream and one IMU stream per layout sensor over `[0, duration_s)`.
pub fn gen_sequence(
    params: &MotionParams,
    layout: &SensorLayout,
    duration_s: f64,
) -> Result<(PoseSequence, Vec<ImuSequence>)> {
    if !(duration_s >= 1.0) {
        return Err(Error::range("duration_s", format!("{duration_s} < 1")));
    }
    layout.validate(JOINT_COUNT)?;
    let kin = Kinematics::new(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut gauss = |std: f64| -> f64 {
        if std == 0.0 {
            0.0
        } else {
            let z: f64 = StandardNormal.sample(&mut rng);
            std * z
        }
    };

    let frames = libm::round(duration_s * params.pose_fps) as usize;
    let mut joints = Mat::<f32>::zeros(frames, 2 * JOINT_COUNT);
    for f in 0..frames {
        let world = kin.joints(f as f64 / params.pose_fps);
        let row = joints.row_mut(f);
        for (j, p) in world.iter().enumerate() {
            let px = kin.to_pixels(*p);
            row[2 * j] = (px[0] + gauss(params.noise_std_pose)) as f32;
            row[2 * j + 1] = (px[1] + gauss(params.noise_std_pose)) as f32;
        }
    }
    let pose = PoseSequence {
        joints,
        fps: params.pose_fps,
        t0_s: 0.0,
        visibility: None,
    };

    let rate = params.imu_rate_hz;
    let samples = libm::round(duration_s * rate) as usize;
    // one extra sample on each side for the central differences
    let grid: Vec<JointPositions> = (0..samples + 2)
        .map(|i| kin.joints((i as f64 - 1.0) / rate))
        .collect();
    let g = params.gravity;
    let mut imu = Vec::with_capacity(layout.len());
    for n in 0..layout.len() {
        let (parent, child) = layout.mount_segment(n);
        let mut m = Mat::<f32>::zeros(samples, IMU_CHANNELS);
        for i in 0..samples {
            let (prev, cur, next) = (&grid[i], &grid[i + 1], &grid[i + 2]);
            let acc = [
                (next[child][0] - 2.0 * cur[child][0] + prev[child][0]) * rate * rate,
                (next[child][1] - 2.0 * cur[child][1] + prev[child][1]) * rate * rate,
            ];
            let theta = Kinematics::segment_angle(cur, parent, child);
            let omega = wrap_angle(
                Kinematics::segment_angle(next, parent, child)
                    - Kinematics::segment_angle(prev, parent, child),
            ) * rate
                / 2.0;
            let specific = [acc[0] - g[0], acc[1] - g[1]];
            let (c, s) = (libm::cos(theta), libm::sin(theta));
            let clean = [
                c * specific[0] + s * specific[1],
                -s * specific[0] + c * specific[1],
                -g[2],
                0.0,
                0.0,
                omega,
            ];
            let row = m.row_mut(i);
            for ch in 0..IMU_CHANNELS {
                row[ch] = (clean[ch] + params.imu_bias[ch] + gauss(params.noise_std_imu[ch])) as f32;
            }
        }
        imu.push(ImuSequence {
            sensor_id: layout.sensors[n].sensor_id.clone(),
            samples: m,
            sample_rate_hz: rate,
            t0_s: 0.0,
        });
    }
    Ok((pose, imu))
}

/// Template for one action class. Each entry is `(dof, amplitude, frequency_hz, phase)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionFamily {
    pub name: String,
    pub components: Vec<(usize, f64, f64, f64)>,
    /// Wander amplitude per DOF; angles in radians, the root in metres.
    pub wander_rad: f64,
}

/// Built-in action families, distinct in which limbs move and at what tempo.
pub fn builtin_families() -> Vec<ActionFamily> {
    let fam = |name: &str, c: &[(usize, f64, f64, f64)]| ActionFamily {
        name: name.into(),
        components: c.to_vec(),
        wander_rad: 0.12,
    };
    vec![
        fam(
            "wave",
            &[(4, 0.9, 0.8, 0.0), (6, 0.6, 1.6, 0.5), (3, 0.15, 0.4, 0.0), (2, 0.05, 0.4, 0.0)],
        ),
        fam(
            "walk",
            &[
                (7, 0.35, 0.9, 0.0),
                (8, 0.35, 0.9, PI),
                (9, 0.4, 0.9, 0.6),
                (10, 0.4, 0.9, PI + 0.6),
                (3, 0.3, 0.9, PI),
                (4, 0.3, 0.9, 0.0),
                (1, 0.02, 1.8, 0.0),
            ],
        ),
        fam(
            "squat",
            &[
                (7, 0.5, 0.45, 0.0),
                (8, 0.5, 0.45, PI),
                (9, 0.7, 0.45, 0.0),
                (10, 0.7, 0.45, PI),
                (1, 0.15, 0.45, PI / 2.0),
                (3, 0.6, 0.45, 0.0),
                (4, 0.6, 0.45, 0.0),
            ],
        ),
        fam(
            "jumping_jack",
            &[
                (3, 1.1, 1.1, 0.0),
                (4, 1.1, 1.1, 0.0),
                (7, 0.3, 1.1, 0.0),
                (8, 0.3, 1.1, 0.0),
                (1, 0.05, 2.2, 0.0),
            ],
        ),
        fam(
            "punch",
            &[
                (3, 0.7, 0.7, 0.0),
                (5, 0.9, 0.7, PI / 2.0),
                (4, 0.7, 0.7, PI),
                (6, 0.9, 0.7, 3.0 * PI / 2.0),
                (2, 0.1, 0.7, 0.0),
            ],
        ),
        fam(
            "kick",
            &[(8, 0.8, 0.6, 0.0), (10, 0.9, 0.6, PI / 3.0), (7, 0.1, 0.6, PI), (2, 0.08, 0.6, 0.0)],
        ),
    ]
}

/// Per-subject body attributes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubjectTraits {
    pub body_scale: f64,
    pub origin_px: [f64; 2],
    /// Per-subject tempo multiplier.
    pub tempo: f64,
}

impl SubjectTraits {
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SubjectTraits {
            body_scale: rng.random_range(0.85..1.15),
            origin_px: [rng.random_range(200.0..440.0), rng.random_range(300.0..420.0)],
            tempo: rng.random_range(0.9..1.1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub pose_px: f64,
    pub imu: Vec<f64>,
    pub imu_bias_std: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            pose_px: 1.0,
            imu: vec![0.2, 0.2, 0.02, 0.01, 0.01, 0.05],
            imu_bias_std: 0.0,
        }
    }
}

impl NoiseConfig {
    pub fn noiseless() -> Self {
        NoiseConfig {
            pose_px: 0.0,
            imu: vec![0.0; IMU_CHANNELS],
            imu_bias_std: 0.0,
        }
    }
}

/// Draw a member of `family` with within-class jitter of amplitudes, frequencies and phases.
pub fn sample_params(
    family: &ActionFamily,
    class_id: u32,
    subject: &SubjectTraits,
    noise: &NoiseConfig,
    jitter: f64,
    seed: u64,
) -> MotionParams {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5EED));
    let mut dofs = vec![DofMotion::default(); DOF_COUNT];
    for &(k, a, f, p) in &family.components {
        dofs[k].components.push(Oscillator {
            amplitude: a * rng.random_range(1.0 - jitter..1.0 + jitter),
            frequency_hz: f * subject.tempo * rng.random_range(1.0 - jitter..1.0 + jitter),
            phase: p + rng.random_range(-0.3..0.3),
        });
    }
    // one common random phase per sequence keeps the family's inter-limb coordination
    let common = rng.random_range(0.0..2.0 * PI);
    for d in &mut dofs {
        for o in &mut d.components {
            o.phase += common * o.frequency_hz / dofs_base_freq(family);
        }
    }
    for (k, d) in dofs.iter_mut().enumerate() {
        d.wander = if k < 2 {
            family.wander_rad * 0.1
        } else {
            family.wander_rad
        };
    }
    let imu_bias = (0..IMU_CHANNELS)
        .map(|_| {
            if noise.imu_bias_std > 0.0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * noise.imu_bias_std
            } else {
                0.0
            }
        })
        .collect();
    MotionParams {
        dofs,
        action_class: class_id,
        noise_std_pose: noise.pose_px,
        noise_std_imu: noise.imu.clone(),
        imu_bias,
        seed,
        body_scale: subject.body_scale,
        origin_px: subject.origin_px,
        ..MotionParams::default()
    }
}

fn dofs_base_freq(family: &ActionFamily) -> f64 {
    family
        .components
        .iter()
        .map(|c| c.2)
        .fold(f64::INFINITY, f64::min)
        .max(1e-3)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    /// Subjects are partitioned between splits.
    SubjectWise,
    /// Sequences are partitioned irrespective of subject.
    SequenceWise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    /// Names from [`builtin_families`]; empty means the first `num_classes`.
    pub classes: Vec<String>,
    pub num_classes: usize,
    pub sequences_per_class: usize,
    pub subjects: usize,
    pub duration_s: f64,
    /// Fractions for (train, val); the rest is test.
    pub split_fractions: [f64; 2],
    pub split: SplitStrategy,
    pub jitter: f64,
    pub noise: NoiseConfig,
    pub imu_rate_hz: f64,
    pub pose_fps: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            classes: Vec::new(),
            num_classes: 4,
            sequences_per_class: 50,
            subjects: 10,
            duration_s: 20.0,
            split_fractions: [0.6, 0.2],
            split: SplitStrategy::SubjectWise,
            jitter: 0.15,
            noise: NoiseConfig::default(),
            imu_rate_hz: 50.0,
            pose_fps: 25.0,
            seed: 7,
        }
    }
}

/// An in-memory generated dataset.
#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub layout: SensorLayout,
    pub class_names: Vec<String>,
    pub sequences: Vec<SequencePair>,
    pub splits: Vec<Split>,
}

impl GeneratedDataset {
    pub fn split(&self, split: Split) -> Vec<&SequencePair> {
        self.sequences
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == split)
            .map(|(q, _)| q)
            .collect()
    }
}

fn resolve_families(config: &GenConfig) -> Result<Vec<ActionFamily>> {
    let all = builtin_families();
    if config.classes.is_empty() {
        if config.num_classes == 0 || config.num_classes > all.len() {
            return Err(Error::Config(format!(
                "num_classes must be in 1..={}",
                all.len()
            )));
        }
        return Ok(all[..config.num_classes].to_vec());
    }
    config
        .classes
        .iter()
        .map(|name| {
            all.iter()
                .find(|f| &f.name == name)
                .cloned()
                .ok_or_else(|| Error::Config(format!("unknown action class '{name}'")))
        })
        .collect()
}

/// Split assignment for `count` items by fractions: the first block is train, then val, then test.
fn partition(count: usize, fractions: [f64; 2]) -> Vec<Split> {
    let n_train = libm::round(count as f64 * fractions[0]) as usize;
    let n_val = libm::round(count as f64 * fractions[1]) as usize;
    (0..count)
        .map(|i| {
            if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            }
        })
        .collect()
}

/// Generate a labelled dataset with `num_classes × sequences_per_class` sequences.
pub fn gen_dataset(config: &GenConfig) -> Result<GeneratedDataset> {
    let families = resolve_families(config)?;
    if config.sequences_per_class == 0 || config.subjects == 0 {
        return Err(Error::Config("sequences_per_class and subjects must be positive".into()));
    }
    let layout = default_layout();
    let subjects: Vec<SubjectTraits> = (0..config.subjects)
        .map(|s| SubjectTraits::sample(derive_seed(config.seed, 1_000_000 + s as u64)))
        .collect();
    let subject_split = partition(config.subjects, config.split_fractions);
    let total = families.len() * config.sequences_per_class;
    let sequence_split = partition(total, config.split_fractions);
    // interleave classes so sequence-wise blocks stay balanced
    let mut sequences = Vec::with_capacity(total);
    let mut splits = Vec::with_capacity(total);
    for i in 0..total {
        let class = i % families.len();
        let within = i / families.len();
        let subject = within % config.subjects;
        let seed = derive_seed(config.seed, i as u64);
        let noise = config.noise.clone();
        let mut params = sample_params(&families[class], class as u32, &subjects[subject], &noise, config.jitter, seed);
        params.imu_rate_hz = config.imu_rate_hz;
        params.pose_fps = config.pose_fps;
        let (pose, imu) = gen_sequence(&params, &layout, config.duration_s)?;
        sequences.push(SequencePair {
            id: format!("seq{i:04}"),
            subject_id: format!("subj{subject:02}"),
            label: Some(class as u32),
            imu,
            pose,
        });
        splits.push(match config.split {
            SplitStrategy::SubjectWise => subject_split[subject],
            SplitStrategy::SequenceWise => sequence_split[i],
        });
    }
    Ok(GeneratedDataset {
        layout,
        class_names: families.iter().map(|f| f.name.clone()).collect(),
        sequences,
        splits,
    })
}

/// A recorded pair viewed as a clip with independent start times for each modality.
/// The ground-truth offset is `pose_start_s − imu_start_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncPair {
    pub pair: SequencePair,
    pub imu_start_s: f64,
    pub pose_start_s: f64,
    pub clip_len_s: f64,
}

impl SyncPair {
    pub fn new(pair: SequencePair, start_s: f64, clip_len_s: f64) -> Result<Self> {
        let sp = SyncPair {
            pair,
            imu_start_s: start_s,
            pose_start_s: start_s,
            clip_len_s,
        };
        sp.check()?;
        Ok(sp)
    }

    pub fn ground_truth_s(&self) -> f64 {
        self.pose_start_s - self.imu_start_s
    }

    fn check(&self) -> Result<()> {
        let (start, end) = self.pair.common_span();
        for (what, s) in [("imu clip", self.imu_start_s), ("pose clip", self.pose_start_s)] {
            if s < start - 1e-9 || s + self.clip_len_s > end + 1e-9 {
                return Err(Error::range(
                    what,
                    format!(
                        "[{:.3}, {:.3}) s exceeds recording [{:.3}, {:.3}) s",
                        s,
                        s + self.clip_len_s,
                        start,
                        end
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Delay the pose clip by `lag_s` relative to the IMU clip.
    pub fn inject_offset(&self, lag_s: f64) -> Result<SyncPair> {
        let shifted = SyncPair {
            pose_start_s: self.pose_start_s + lag_s,
            ..self.clone()
        };
        shifted.check()?;
        Ok(shifted)
    }

    /// The two clips as stand-alone streams starting at `t0 = 0`, at native rates.
    pub fn clips(&self) -> Result<(Vec<ImuSequence>, PoseSequence)> {
        let mut imu = Vec::with_capacity(self.pair.imu.len());
        for s in &self.pair.imu {
            let frames = libm::round(self.clip_len_s * s.sample_rate_hz) as usize;
            let samples = crate::data::resample(
                &s.samples,
                s.sample_rate_hz,
                s.t0_s,
                self.imu_start_s,
                self.clip_len_s,
                frames,
            )?;
            imu.push(ImuSequence {
                sensor_id: s.sensor_id.clone(),
                samples,
                sample_rate_hz: s.sample_rate_hz,
                t0_s: 0.0,
            });
        }
        let p = &self.pair.pose;
        let frames = libm::round(self.clip_len_s * p.fps) as usize;
        let joints = crate::data::resample(&p.filled(), p.fps, p.t0_s, self.pose_start_s, self.clip_len_s, frames)?;
        Ok((
            imu,
            PoseSequence {
                joints,
                fps: p.fps,
                t0_s: 0.0,
                visibility: None,
            },
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSubject {
    pub subject_id: String,
    pub params: MotionParams,
    /// Added to the subject's image origin, pixels.
    pub offset_px: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub subjects: Vec<SceneSubject>,
    pub duration_s: f64,
}

/// Multi-person recording: one pose track and one IMU set per subject.
#[derive(Debug, Clone)]
pub struct Scene {
    pub pairs: Vec<SequencePair>,
    /// Subject ids in track order; the ground-truth wearer of `pairs[k].imu` is `subject_ids[k]`.
    pub subject_ids: Vec<String>,
    /// Set when two subjects share identical motion, which makes localization ill-posed.
    pub duplicate_motion: bool,
}

pub fn gen_scene(spec: &SceneSpec, layout: &SensorLayout) -> Result<Scene> {
    if spec.subjects.is_empty() {
        return Err(Error::Empty("scene subjects"));
    }
    let mut pairs = Vec::with_capacity(spec.subjects.len());
    for s in &spec.subjects {
        let mut params = s.params.clone();
        params.origin_px[0] += s.offset_px[0];
        params.origin_px[1] += s.offset_px[1];
        let (pose, imu) = gen_sequence(&params, layout, spec.duration_s)?;
        pairs.push(SequencePair {
            id: s.subject_id.clone(),
            subject_id: s.subject_id.clone(),
            label: Some(params.action_class),
            imu,
            pose,
        });
    }
    let mut duplicate_motion = false;
    for i in 0..spec.subjects.len() {
        for j in 0..i {
            let (a, b) = (&spec.subjects[i].params, &spec.subjects[j].params);
            let same = MotionParams {
                origin_px: b.origin_px,
                ..a.clone()
            } == *b;
            duplicate_motion |= same;
        }
    }
    Ok(Scene {
        pairs,
        subject_ids: spec.subjects.iter().map(|s| s.subject_id.clone()).collect(),
        duplicate_motion,
    })
}

/// A scene of `count` subjects with distinct random classes and traits.
pub fn random_scene(
    count: usize,
    families: &[ActionFamily],
    noise: &NoiseConfig,
    duration_s: f64,
    seed: u64,
) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subjects = (0..count)
        .map(|k| {
            let class = rng.random_range(0..families.len());
            let traits = SubjectTraits::sample(derive_seed(seed, 100 + k as u64));
            let params = sample_params(
                &families[class],
                class as u32,
                &traits,
                noise,
                0.15,
                derive_seed(seed, k as u64),
            );
            SceneSubject {
                subject_id: format!("person{k}"),
                params,
                offset_px: [(k as f64 - (count as f64 - 1.0) / 2.0) * 150.0, 0.0],
            }
        })
        .collect();
    SceneSpec {
        subjects,
        duration_s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn still() -> MotionParams {
        MotionParams::default()
    }

    #[test]
    fn static_limb_reads_gravity_only() {
        let layout = default_layout();
        let (pose, imu) = gen_sequence(&still(), &layout, 2.0).unwrap();
        for r in 1..pose.frames() {
            assert_eq!(pose.joints.row(r), pose.joints.row(0));
        }
        for (n, s) in imu.iter().enumerate() {
            let (p, c) = layout.mount_segment(n);
            let kin = Kinematics::new(&still()).unwrap();
            let theta = Kinematics::segment_angle(&kin.joints(0.0), p, c);
            // specific force R(-θ)·(0, 9.81)
            let fx = libm::sin(theta) * 9.81;
            let fy = libm::cos(theta) * 9.81;
            for r in 0..s.samples.rows {
                let row = s.samples.row(r);
                assert!((row[0] as f64 - fx).abs() < 1e-4, "{} vs {}", row[0], fx);
                assert!((row[1] as f64 - fy).abs() < 1e-4);
                assert_eq!(&row[2..], &[0.0, 0.0, 0.0, 0.0]);
            }
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let fam = &builtin_families()[1];
        let p = sample_params(fam, 1, &SubjectTraits::sample(3), &NoiseConfig::default(), 0.15, 42);
        let a = gen_sequence(&p, &default_layout(), 6.0).unwrap();
        let b = gen_sequence(&p, &default_layout(), 6.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sinusoidal_sway_matches_analytic_acceleration() {
        let (amp, f0) = (0.05, 1.3);
        let mut p = still();
        p.gravity = [0.0; 3];
        p.dofs[0].components.push(Oscillator {
            amplitude: amp,
            frequency_hz: f0,
            phase: 0.0,
        });
        let (_, imu) = gen_sequence(&p, &default_layout(), 5.0).unwrap();
        let want = amp * (2.0 * PI * f0).powi(2);
        for s in &imu {
            let peak = (0..s.samples.rows)
                .map(|r| {
                    let row = s.samples.row(r);
                    libm::sqrt((row[0] as f64).powi(2) + (row[1] as f64).powi(2))
                })
                .fold(0.0, f64::max);
            assert!((peak - want).abs() / want < 0.02, "peak {peak} want {want}");
        }
    }

    #[test]
    fn double_integration_recovers_displacement() {
        let fam = &builtin_families()[3];
        let mut p = sample_params(fam, 3, &SubjectTraits::sample(1), &NoiseConfig::noiseless(), 0.15, 9);
        p.imu_rate_hz = 50.0;
        let layout = default_layout();
        let (_, imu) = gen_sequence(&p, &layout, 5.0).unwrap();
        let kin = Kinematics::new(&p).unwrap();
        let rate = p.imu_rate_hz;
        for (n, s) in imu.iter().enumerate() {
            let (parent, child) = layout.mount_segment(n);
            let pos = |i: isize| kin.joints(i as f64 / rate)[child];
            let mut rec = vec![pos(-1), pos(0)];
            let mut err2 = 0.0;
            let mut ref2 = 0.0;
            for i in 0..s.samples.rows {
                let t = i as f64 / rate;
                let theta = Kinematics::segment_angle(&kin.joints(t), parent, child);
                let row = s.samples.row(i);
                let (fx, fy) = (row[0] as f64, row[1] as f64);
                let (c, sn) = (libm::cos(theta), libm::sin(theta));
                let ax = c * fx - sn * fy + p.gravity[0];
                let ay = sn * fx + c * fy + p.gravity[1];
                let cur = rec[rec.len() - 1];
                let prev = rec[rec.len() - 2];
                let next = [
                    2.0 * cur[0] - prev[0] + ax / (rate * rate),
                    2.0 * cur[1] - prev[1] + ay / (rate * rate),
                ];
                rec.push(next);
                let truth = pos(i as isize + 1);
                let d0 = pos(0);
                err2 += (next[0] - truth[0]).powi(2) + (next[1] - truth[1]).powi(2);
                ref2 += (truth[0] - d0[0]).powi(2) + (truth[1] - d0[1]).powi(2);
            }
            let rel = libm::sqrt(err2 / ref2);
            assert!(rel < 0.01, "sensor {n}: relative error {rel}");
        }
    }

    #[test]
    fn four_classes_of_fifty_are_balanced_and_subject_disjoint() {
        let cfg = GenConfig {
            duration_s: 2.0,
            ..GenConfig::default()
        };
        let ds = gen_dataset(&cfg).unwrap();
        assert_eq!(ds.sequences.len(), 200);
        for c in 0..4u32 {
            assert_eq!(ds.sequences.iter().filter(|s| s.label == Some(c)).count(), 50);
        }
        for a in [Split::Train, Split::Val, Split::Test] {
            for b in [Split::Train, Split::Val, Split::Test] {
                if a == b {
                    continue;
                }
                for x in ds.split(a) {
                    assert!(ds.split(b).iter().all(|y| y.subject_id != x.subject_id));
                }
            }
        }
    }

    #[test]
    fn offset_injection_is_invertible_and_checked() {
        let p = sample_params(&builtin_families()[0], 0, &SubjectTraits::sample(2), &NoiseConfig::noiseless(), 0.1, 5);
        let (pose, imu) = gen_sequence(&p, &default_layout(), 36.0).unwrap();
        let pair = SequencePair {
            id: "a".into(),
            subject_id: "s".into(),
            label: None,
            imu,
            pose,
        };
        let base = SyncPair::new(pair, 8.0, 20.0).unwrap();
        assert_eq!(base.inject_offset(0.0).unwrap(), base);
        let back = base.inject_offset(1.0).unwrap().inject_offset(-1.0).unwrap();
        assert_eq!(back.ground_truth_s(), 0.0);
        assert_eq!(back.pose_start_s, base.pose_start_s);
        let demo = base.inject_offset(6.8).unwrap();
        assert!((demo.ground_truth_s() - 6.8).abs() < 1e-12);
        assert!(base.inject_offset(9.0).is_err());
        let (ic, pc) = demo.clips().unwrap();
        assert_eq!(ic[0].samples.rows, 1000);
        assert_eq!(pc.frames(), 500);
    }

    #[test]
    fn duplicate_subjects_are_flagged() {
        let p = sample_params(&builtin_families()[0], 0, &SubjectTraits::sample(2), &NoiseConfig::default(), 0.1, 5);
        let spec = SceneSpec {
            subjects: vec![
                SceneSubject {
                    subject_id: "a".into(),
                    params: p.clone(),
                    offset_px: [0.0, 0.0],
                },
                SceneSubject {
                    subject_id: "b".into(),
                    params: p,
                    offset_px: [150.0, 20.0],
                },
            ],
            duration_s: 5.0,
        };
        let scene = gen_scene(&spec, &default_layout()).unwrap();
        assert!(scene.duplicate_motion);
        let layout = default_layout();
        let w = |k: usize| crate::data::window(&scene.pairs[k], &layout, 0.0, 5.0, 50).unwrap();
        for (a, b) in w(0).part_windows.iter().zip(&w(1).part_windows) {
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| (x - y).abs() < 1e-4));
        }
    }

    #[test]
    fn frequency_bound_is_enforced() {
        let mut p = still();
        p.dofs[3].components.push(Oscillator {
            amplitude: 0.1,
            frequency_hz: 7.0,
            phase: 0.0,
        });
        assert!(matches!(p.validate(), Err(Error::Config(_))));
    }
}
