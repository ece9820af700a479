//! Paired IMU / pose streams, windowing, body-part decomposition and pose normalization.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Fractional sample positions within this distance of an integer snap to it,
/// so aligned windows reproduce native samples exactly.
const SNAP: f64 = 1e-9;

/// One sensor, the body part it is mounted on, and the skeleton joints of that part.
///
/// Joint indices are listed proximal to distal; the sensor sits on the segment
/// between the last two joints (or on the single joint when only one is listed).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub sensor_id: String,
    pub body_part: String,
    pub joint_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorLayout {
    pub sensors: Vec<SensorSpec>,
}

impl SensorLayout {
    pub fn new(sensors: Vec<SensorSpec>) -> Self {
        SensorLayout { sensors }
    }

    pub fn len(&self) -> usize {
        self.sensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sensors.is_empty()
    }

    /// Checks uniqueness of ids and joint bounds against a skeleton with `joint_count` joints.
    pub fn validate(&self, joint_count: usize) -> Result<()> {
        if self.sensors.is_empty() {
            return Err(Error::Layout("layout has no sensors".into()));
        }
        for (i, s) in self.sensors.iter().enumerate() {
            if self.sensors[..i].iter().any(|o| o.sensor_id == s.sensor_id) {
                return Err(Error::Layout(format!("duplicate sensor id '{}'", s.sensor_id)));
            }
            if s.joint_indices.is_empty() {
                return Err(Error::Layout(format!("sensor '{}' has no joints", s.sensor_id)));
            }
            for (k, &j) in s.joint_indices.iter().enumerate() {
                if j >= joint_count {
                    return Err(Error::Layout(format!(
                        "sensor '{}' references joint {} but the skeleton has {} joints",
                        s.sensor_id, j, joint_count
                    )));
                }
                if s.joint_indices[..k].contains(&j) {
                    return Err(Error::Layout(format!(
                        "sensor '{}' lists joint {} twice",
                        s.sensor_id, j
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn index_of(&self, sensor_id: &str) -> Option<usize> {
        self.sensors.iter().position(|s| s.sensor_id == sensor_id)
    }

    /// Input width `2·Jⁿ` of each body-part stream.
    pub fn part_widths(&self) -> Vec<usize> {
        self.sensors.iter().map(|s| 2 * s.joint_indices.len()).collect()
    }

    /// `(parent, child)` joints of the segment the sensor is mounted on.
    pub fn mount_segment(&self, n: usize) -> (usize, usize) {
        let j = &self.sensors[n].joint_indices;
        let mut sorted = j.clone();
        sorted.sort_unstable();
        match sorted.len() {
            1 => (sorted[0], sorted[0]),
            l => (sorted[l - 2], sorted[l - 1]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImuSequence {
    pub sensor_id: String,
    /// `F_raw × C`, rows are time.
    pub samples: Mat<f32>,
    pub sample_rate_hz: f64,
    pub t0_s: f64,
}

impl ImuSequence {
    pub fn validate(&self) -> Result<()> {
        if self.samples.rows == 0 || self.samples.cols == 0 {
            return Err(Error::Empty("imu sequence"));
        }
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::range("sample_rate_hz", format!("{}", self.sample_rate_hz)));
        }
        if !self.samples.is_finite() {
            return Err(Error::NonFinite("imu samples"));
        }
        Ok(())
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.rows as f64 / self.sample_rate_hz
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSequence {
    /// `F_v × 2J`, (x, y) interleaved per joint.
    pub joints: Mat<f32>,
    pub fps: f64,
    pub t0_s: f64,
    /// Optional `F_v × J` visibility flags, row-major.
    pub visibility: Option<Vec<bool>>,
}

impl PoseSequence {
    pub fn joint_count(&self) -> usize {
        self.joints.cols / 2
    }

    pub fn frames(&self) -> usize {
        self.joints.rows
    }

    pub fn duration_s(&self) -> f64 {
        self.joints.rows as f64 / self.fps
    }

    fn visible(&self, f: usize, j: usize) -> bool {
        match &self.visibility {
            Some(v) => v[f * self.joint_count() + j],
            None => true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints.rows == 0 || self.joints.cols == 0 || !self.joints.cols.is_multiple_of(2) {
            return Err(Error::shape(
                "pose sequence",
                "F_v ≥ 1 rows and an even number of columns",
                format!("{}×{}", self.joints.rows, self.joints.cols),
            ));
        }
        if !(self.fps > 0.0) {
            return Err(Error::range("fps", format!("{}", self.fps)));
        }
        let jc = self.joint_count();
        if let Some(v) = &self.visibility {
            if v.len() != self.joints.rows * jc {
                return Err(Error::shape(
                    "pose visibility",
                    format!("{}", self.joints.rows * jc),
                    format!("{}", v.len()),
                ));
            }
        }
        for f in 0..self.joints.rows {
            for j in 0..jc {
                if self.visible(f, j)
                    && !(self.joints.at(f, 2 * j).is_finite() && self.joints.at(f, 2 * j + 1).is_finite())
                {
                    return Err(Error::NonFinite("visible pose coordinate"));
                }
            }
        }
        Ok(())
    }

    /// Joint coordinates with invisible entries filled by linear interpolation
    /// between the nearest visible frames of the same joint (held constant at the ends).
    pub fn filled(&self) -> Mat<f32> {
        let Some(_) = &self.visibility else {
            return self.joints.clone();
        };
        let mut out = self.joints.clone();
        let frames = self.frames();
        for j in 0..self.joint_count() {
            let vis: Vec<usize> = (0..frames).filter(|&f| self.visible(f, j)).collect();
            for f in 0..frames {
                if self.visible(f, j) {
                    continue;
                }
                let (x, y) = match vis.binary_search(&f) {
                    Ok(_) => unreachable!(),
                    Err(pos) => {
                        let before = pos.checked_sub(1).map(|p| vis[p]);
                        let after = vis.get(pos).copied();
                        match (before, after) {
                            (Some(a), Some(b)) => {
                                let w = (f - a) as f32 / (b - a) as f32;
                                let lerp = |c: usize| {
                                    self.joints.at(a, c) * (1.0 - w) + self.joints.at(b, c) * w
                                };
                                (lerp(2 * j), lerp(2 * j + 1))
                            }
                            (Some(a), None) => (self.joints.at(a, 2 * j), self.joints.at(a, 2 * j + 1)),
                            (None, Some(b)) => (self.joints.at(b, 2 * j), self.joints.at(b, 2 * j + 1)),
                            (None, None) => (0.0, 0.0),
                        }
                    }
                };
                out.set(f, 2 * j, x);
                out.set(f, 2 * j + 1, y);
            }
        }
        out
    }
}

/// One recorded sequence: all IMU streams of the layout plus the pose stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequencePair {
    pub id: String,
    pub subject_id: String,
    pub label: Option<u32>,
    /// In layout order.
    pub imu: Vec<ImuSequence>,
    pub pose: PoseSequence,
}

impl SequencePair {
    /// Time span `[start, end)` covered by every stream.
    pub fn common_span(&self) -> (f64, f64) {
        let mut start = self.pose.t0_s;
        let mut end = self.pose.t0_s + self.pose.duration_s();
        for s in &self.imu {
            start = start.max(s.t0_s);
            end = end.min(s.t0_s + s.duration_s());
        }
        (start, end)
    }
}

/// A training/evaluation window: per-sensor IMU and body-part slices at a common frame count.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    /// `F × C` per sensor, layout order.
    pub imu_windows: Vec<Mat<f32>>,
    /// `F × 2Jⁿ` per sensor, layout order, normalized.
    pub part_windows: Vec<Mat<f32>>,
    pub label: Option<u32>,
    pub subject_id: String,
    pub sequence_id: String,
    pub window_start_s: f64,
    pub window_len_s: f64,
    /// Set when the pose was frozen over the window (zero motion extent).
    pub degenerate: bool,
}

impl PairedSample {
    pub fn frames(&self) -> usize {
        self.imu_windows.first().map(|m| m.rows).unwrap_or(0)
    }

    /// Whether two windows come from the same sequence and overlap in time.
    pub fn overlaps(&self, other: &PairedSample) -> bool {
        self.sequence_id == other.sequence_id
            && self.window_start_s < other.window_start_s + other.window_len_s
            && other.window_start_s < self.window_start_s + self.window_len_s
    }
}

/// Linearly resample `[start_s, start_s + len_s)` of a uniformly sampled stream to `target_frames` rows.
///
/// Output row `k` is the stream value at `start_s + k·len_s/target_frames`.
pub fn resample(
    samples: &Mat<f32>,
    rate_hz: f64,
    t0_s: f64,
    start_s: f64,
    len_s: f64,
    target_frames: usize,
) -> Result<Mat<f32>> {
    if target_frames == 0 {
        return Err(Error::range("target_frames", "must be positive"));
    }
    if !(len_s > 0.0) {
        return Err(Error::range("window length", format!("{len_s}")));
    }
    let first = (start_s - t0_s) * rate_hz;
    let step = len_s * rate_hz / target_frames as f64;
    let last = first + step * (target_frames - 1) as f64;
    let max_pos = (samples.rows - 1) as f64;
    let span_end = t0_s + samples.rows as f64 / rate_hz;
    if first < -SNAP || last > max_pos + SNAP || start_s + len_s > span_end + SNAP {
        return Err(Error::range(
            "window",
            format!(
                "[{:.3}, {:.3}) s is outside the stream span [{:.3}, {:.3}) s",
                start_s,
                start_s + len_s,
                t0_s,
                span_end
            ),
        ));
    }
    let mut out = Mat::zeros(target_frames, samples.cols);
    for k in 0..target_frames {
        let mut pos = (first + step * k as f64).clamp(0.0, max_pos);
        let rounded = libm::round(pos);
        if (pos - rounded).abs() < SNAP {
            pos = rounded;
        }
        let i0 = libm::floor(pos) as usize;
        let frac = pos - i0 as f64;
        let row = out.row_mut(k);
        if frac == 0.0 || i0 + 1 >= samples.rows {
            row.copy_from_slice(samples.row(i0));
        } else {
            let w = frac as f32;
            for ((o, &a), &b) in row.iter_mut().zip(samples.row(i0)).zip(samples.row(i0 + 1)) {
                *o = a + (b - a) * w;
            }
        }
    }
    Ok(out)
}

/// Gather each sensor's joints into an `F × 2Jⁿ` stream, joints ascending, (x, y) interleaved.
pub fn decompose_pose(pose: &Mat<f32>, layout: &SensorLayout) -> Result<Vec<Mat<f32>>> {
    layout.validate(pose.cols / 2)?;
    let mut parts = Vec::with_capacity(layout.len());
    for s in &layout.sensors {
        let mut joints = s.joint_indices.clone();
        joints.sort_unstable();
        let mut m = Mat::zeros(pose.rows, 2 * joints.len());
        for f in 0..pose.rows {
            let src = pose.row(f);
            let dst = m.row_mut(f);
            for (k, &j) in joints.iter().enumerate() {
                dst[2 * k] = src[2 * j];
                dst[2 * k + 1] = src[2 * j + 1];
            }
        }
        parts.push(m);
    }
    Ok(parts)
}

/// Result of [`normalize_pose`].
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedPose {
    pub joints: Mat<f32>,
    pub degenerate: bool,
}

/// Subtract each joint trajectory's window mean, then divide by the bounding-box
/// diagonal of the centered skeleton. A zero diagonal (frozen pose) keeps scale 1
/// and sets the degenerate flag.
pub fn normalize_pose(window: &Mat<f32>) -> NormalizedPose {
    let frames = window.rows as f64;
    let mut centered = Mat::<f64>::zeros(window.rows, window.cols);
    for c in 0..window.cols {
        let mean = (0..window.rows).map(|r| window.at(r, c) as f64).sum::<f64>() / frames;
        for r in 0..window.rows {
            centered.set(r, c, window.at(r, c) as f64 - mean);
        }
    }
    let (mut min_x, mut max_x, mut min_y, mut max_y) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for r in 0..window.rows {
        for (k, &v) in centered.row(r).iter().enumerate() {
            if k % 2 == 0 {
                min_x = min_x.min(v);
                max_x = max_x.max(v);
            } else {
                min_y = min_y.min(v);
                max_y = max_y.max(v);
            }
        }
    }
    let diag = libm::sqrt((max_x - min_x) * (max_x - min_x) + (max_y - min_y) * (max_y - min_y));
    let degenerate = !(diag > 1e-9);
    let scale = if degenerate { 1.0 } else { diag };
    let joints = Mat {
        rows: window.rows,
        cols: window.cols,
        data: centered.data.iter().map(|&v| (v / scale) as f32).collect(),
    };
    NormalizedPose { joints, degenerate }
}

/// Cut a paired window `[start_s, start_s + len_s)` from a sequence, resampling
/// both modalities to `target_frames` rows, normalizing the pose and splitting it
/// into the layout's body parts.
pub fn window(
    pair: &SequencePair,
    layout: &SensorLayout,
    start_s: f64,
    len_s: f64,
    target_frames: usize,
) -> Result<PairedSample> {
    let imu_windows = imu_window(&pair.imu, layout, start_s, len_s, target_frames)?;
    let (part_windows, degenerate) = pose_window(&pair.pose, layout, start_s, len_s, target_frames)?;
    Ok(PairedSample {
        imu_windows,
        part_windows,
        label: pair.label,
        subject_id: pair.subject_id.clone(),
        sequence_id: pair.id.clone(),
        window_start_s: start_s,
        window_len_s: len_s,
        degenerate,
    })
}

/// IMU half of [`window`]: each stream resampled to `target_frames` rows.
pub fn imu_window(
    imu: &[ImuSequence],
    layout: &SensorLayout,
    start_s: f64,
    len_s: f64,
    target_frames: usize,
) -> Result<Vec<Mat<f32>>> {
    if imu.len() != layout.len() {
        return Err(Error::shape(
            "window",
            format!("{} imu streams", layout.len()),
            format!("{}", imu.len()),
        ));
    }
    let mut out = Vec::with_capacity(layout.len());
    for (spec, seq) in layout.sensors.iter().zip(imu) {
        if spec.sensor_id != seq.sensor_id {
            return Err(Error::Layout(format!(
                "imu stream '{}' found where layout expects '{}'",
                seq.sensor_id, spec.sensor_id
            )));
        }
        out.push(resample(&seq.samples, seq.sample_rate_hz, seq.t0_s, start_s, len_s, target_frames)?);
    }
    Ok(out)
}

/// Pose half of [`window`]: resampled, normalized and split into body parts,
/// plus the degenerate flag.
pub fn pose_window(
    pose: &PoseSequence,
    layout: &SensorLayout,
    start_s: f64,
    len_s: f64,
    target_frames: usize,
) -> Result<(Vec<Mat<f32>>, bool)> {
    let m = resample(&pose.filled(), pose.fps, pose.t0_s, start_s, len_s, target_frames)?;
    let normalized = normalize_pose(&m);
    Ok((decompose_pose(&normalized.joints, layout)?, normalized.degenerate))
}

/// Start times of overlapping windows `k·stride` for a clip, count `floor((clip − window)/stride) + 1`.
pub fn window_starts(clip_len_s: f64, window_len_s: f64, stride_s: f64) -> Result<Vec<f64>> {
    if !(stride_s > 0.0) {
        return Err(Error::range("stride", format!("{stride_s}")));
    }
    if window_len_s > clip_len_s {
        return Err(Error::range(
            "window",
            format!("window {window_len_s} s longer than clip {clip_len_s} s"),
        ));
    }
    let count = libm::floor((clip_len_s - window_len_s) / stride_s + SNAP) as usize + 1;
    Ok((0..count).map(|k| k as f64 * stride_s).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(joints: &[&[usize]]) -> SensorLayout {
        SensorLayout::new(
            joints
                .iter()
                .enumerate()
                .map(|(i, j)| SensorSpec {
                    sensor_id: format!("s{i}"),
                    body_part: format!("p{i}"),
                    joint_indices: j.to_vec(),
                })
                .collect(),
        )
    }

    fn ramp_pose(frames: usize, joints: usize) -> Mat<f32> {
        Mat::from_fn(frames, 2 * joints, |r, c| (r * 31 + c * 7) as f32 * 0.1)
    }

    #[test]
    fn joint_index_equal_to_count_is_rejected() {
        let l = layout(&[&[0, 16], &[17]]);
        let err = l.validate(17).unwrap_err();
        assert!(matches!(err, Error::Layout(ref m) if m.contains("joint 17")));
        assert!(layout(&[&[0, 16]]).validate(17).is_ok());
    }

    #[test]
    fn duplicate_ids_and_empty_joint_lists_are_rejected() {
        let mut l = layout(&[&[0], &[1]]);
        l.sensors[1].sensor_id = "s0".into();
        assert!(l.validate(4).is_err());
        assert!(layout(&[&[]]).validate(4).is_err());
    }

    #[test]
    fn single_joint_selection() {
        let pose = ramp_pose(6, 4);
        let parts = decompose_pose(&pose, &layout(&[&[0]])).unwrap();
        assert_eq!(parts[0].shape(), (6, 2));
        for r in 0..6 {
            assert_eq!(parts[0].row(r), &pose.row(r)[0..2]);
        }
    }

    #[test]
    fn disjoint_parts_recover_selected_columns() {
        let pose = ramp_pose(5, 6);
        let l = layout(&[&[4, 1], &[0, 5]]);
        let parts = decompose_pose(&pose, &l).unwrap();
        let order = [1usize, 4, 0, 5];
        for r in 0..5 {
            let cat: Vec<f32> = parts.iter().flat_map(|p| p.row(r).to_vec()).collect();
            for (k, &j) in order.iter().enumerate() {
                assert_eq!(cat[2 * k], pose.at(r, 2 * j));
                assert_eq!(cat[2 * k + 1], pose.at(r, 2 * j + 1));
            }
        }
    }

    #[test]
    fn overlapping_parts_both_contain_shared_joint() {
        let pose = ramp_pose(4, 5);
        let parts = decompose_pose(&pose, &layout(&[&[1, 2], &[2, 3]])).unwrap();
        for r in 0..4 {
            assert_eq!(parts[0].at(r, 2), pose.at(r, 4));
            assert_eq!(parts[1].at(r, 0), pose.at(r, 4));
            assert_eq!(parts[0].at(r, 3), parts[1].at(r, 1));
        }
    }

    #[test]
    fn constant_stream_gives_constant_window_anywhere() {
        let s = Mat::from_fn(1000, 3, |_, c| c as f32 + 0.5);
        for start in [0.0, 3.3, 14.999] {
            let w = resample(&s, 50.0, 0.0, start, 5.0, 250).unwrap();
            assert_eq!(w.shape(), (250, 3));
            assert!(w.data.chunks(3).all(|r| r == [0.5, 1.5, 2.5]));
        }
    }

    #[test]
    fn aligned_native_window_is_exact() {
        let s = Mat::from_fn(1000, 2, |r, c| ((r * 3 + c) as f32).sin());
        let w = resample(&s, 50.0, 2.0, 4.0, 5.0, 250).unwrap();
        for k in 0..250 {
            assert_eq!(w.row(k), s.row(100 + k));
        }
    }

    #[test]
    fn window_past_stream_end_is_range_error() {
        let s = Mat::from_fn(1000, 1, |r, _| r as f32);
        assert!(matches!(
            resample(&s, 50.0, 0.0, 16.0, 5.0, 250),
            Err(Error::Range { .. })
        ));
        assert!(resample(&s, 50.0, 0.0, 15.0, 5.0, 250).is_ok());
        assert!(resample(&s, 50.0, 0.0, -0.1, 5.0, 250).is_err());
    }

    #[test]
    fn normalization_removes_translation_and_scale() {
        let base = Mat::from_fn(20, 6, |r, c| ((r as f32) * 0.3 + c as f32).sin() * 40.0 + 200.0);
        let shifted = Mat::from_fn(20, 6, |r, c| base.at(r, c) + if c % 2 == 0 { 100.0 } else { 50.0 });
        let a = normalize_pose(&base);
        let b = normalize_pose(&shifted);
        for (x, y) in a.joints.data.iter().zip(&b.joints.data) {
            assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0));
        }
        let centroid: Vec<f32> = (0..6).map(|c| (0..20).map(|r| base.at(r, c)).sum::<f32>() / 20.0).collect();
        let scaled = Mat::from_fn(20, 6, |r, c| centroid[c] + 2.0 * (base.at(r, c) - centroid[c]));
        let s = normalize_pose(&scaled);
        for (x, y) in a.joints.data.iter().zip(&s.joints.data) {
            assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0));
        }
        assert!(!a.degenerate);
    }

    #[test]
    fn frozen_pose_is_zero_and_flagged() {
        let frozen = Mat::from_fn(10, 8, |_, c| c as f32 * 13.0);
        let n = normalize_pose(&frozen);
        assert!(n.degenerate);
        assert!(n.joints.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sync_clip_yields_76_windows() {
        assert_eq!(window_starts(20.0, 5.0, 0.2).unwrap().len(), 76);
        assert_eq!(window_starts(5.0, 5.0, 0.2).unwrap().len(), 1);
        assert!(window_starts(4.0, 5.0, 0.2).is_err());
    }

    #[test]
    fn invisible_joints_are_interpolated() {
        let joints = Mat::from_vec(3, 2, vec![0.0, 0.0, f32::NAN, f32::NAN, 2.0, 4.0]).unwrap();
        let pose = PoseSequence {
            joints,
            fps: 10.0,
            t0_s: 0.0,
            visibility: Some(vec![true, false, true]),
        };
        pose.validate().unwrap();
        assert_eq!(pose.filled().row(1), &[1.0, 2.0]);
    }
}
