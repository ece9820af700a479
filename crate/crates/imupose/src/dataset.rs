//! On-disk dataset: `manifest.json` plus one raw little-endian `.f32` blob per array.

use std::fs;
use std::path::{Path, PathBuf};

use imupose_core::data::{ImuSequence, PoseSequence, SensorLayout, SequencePair};
use imupose_core::synth::{GeneratedDataset, Split};
use imupose_core::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATASET_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    pub name: String,
    pub unit: String,
}

/// The six channels the synthetic generator emits.
pub fn default_channels() -> Vec<ChannelSpec> {
    [
        ("acc_x", "m/s^2"),
        ("acc_y", "m/s^2"),
        ("acc_z", "m/s^2"),
        ("gyro_x", "rad/s"),
        ("gyro_y", "rad/s"),
        ("gyro_z", "rad/s"),
    ]
    .iter()
    .map(|(n, u)| ChannelSpec {
        name: n.to_string(),
        unit: u.to_string(),
    })
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayRef {
    /// Relative to the dataset root.
    pub file: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImuEntry {
    pub sensor_id: String,
    pub array: ArrayRef,
    pub sample_rate_hz: f64,
    pub t0_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseEntry {
    /// Shape `[F, J, 2]`.
    pub array: ArrayRef,
    /// Shape `[F, J]`, 1.0 visible / 0.0 missing.
    pub visibility: Option<ArrayRef>,
    pub fps: f64,
    pub t0_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceEntry {
    pub id: String,
    pub subject_id: String,
    pub label: Option<u32>,
    pub split: Split,
    pub imu: Vec<ImuEntry>,
    pub pose: PoseEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub layout: SensorLayout,
    pub channels: Vec<ChannelSpec>,
    pub class_names: Vec<String>,
    pub sequences: Vec<SequenceEntry>,
}

/// A dataset whose arrays are read on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

fn write_blob(root: &Path, rel: &str, data: &[f32]) -> Result<()> {
    let path = root.join(rel);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

fn read_blob(root: &Path, entry: &str, a: &ArrayRef) -> Result<Vec<f32>> {
    if a.dtype != "f32" {
        return Err(Error::invalid(entry, format!("{}: unsupported dtype '{}'", a.file, a.dtype)));
    }
    let path = root.join(&a.file);
    let bytes = fs::read(&path).map_err(|e| Error::invalid(entry, format!("{}: {e}", path.display())))?;
    let want = a.shape.iter().product::<usize>() * 4;
    if bytes.len() != want {
        return Err(Error::invalid(
            entry,
            format!("{}: {} bytes, shape {:?} needs {want}", a.file, bytes.len(), a.shape),
        ));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

fn array(file: String, shape: Vec<usize>) -> ArrayRef {
    ArrayRef {
        file,
        shape,
        dtype: "f32".into(),
    }
}

/// Write every sequence with its split; returns the manifest written.
pub fn write_dataset(
    root: &Path,
    layout: &SensorLayout,
    class_names: &[String],
    sequences: &[(&SequencePair, Split)],
) -> Result<DatasetManifest> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut entries = Vec::with_capacity(sequences.len());
    for (seq, split) in sequences {
        let dir = &seq.id;
        let mut imu = Vec::with_capacity(seq.imu.len());
        for s in &seq.imu {
            let rel = format!("{dir}/imu_{}.f32", s.sensor_id);
            write_blob(root, &rel, &s.samples.data)?;
            imu.push(ImuEntry {
                sensor_id: s.sensor_id.clone(),
                array: array(rel, vec![s.samples.rows, s.samples.cols]),
                sample_rate_hz: s.sample_rate_hz,
                t0_s: s.t0_s,
            });
        }
        let rel = format!("{dir}/pose.f32");
        let (f, j) = (seq.pose.frames(), seq.pose.joint_count());
        write_blob(root, &rel, &seq.pose.joints.data)?;
        let visibility = match &seq.pose.visibility {
            Some(v) => {
                let rel = format!("{dir}/visibility.f32");
                let data: Vec<f32> = v.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                write_blob(root, &rel, &data)?;
                Some(array(rel, vec![f, j]))
            }
            None => None,
        };
        entries.push(SequenceEntry {
            id: seq.id.clone(),
            subject_id: seq.subject_id.clone(),
            label: seq.label,
            split: *split,
            imu,
            pose: PoseEntry {
                array: array(rel, vec![f, j, 2]),
                visibility,
                fps: seq.pose.fps,
                t0_s: seq.pose.t0_s,
            },
        });
    }
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        layout: layout.clone(),
        channels: default_channels(),
        class_names: class_names.to_vec(),
        sequences: entries,
    };
    let path = root.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn write_generated(root: &Path, ds: &GeneratedDataset) -> Result<DatasetManifest> {
    let seqs: Vec<(&SequencePair, Split)> = ds.sequences.iter().zip(ds.splits.iter().copied()).collect();
    write_dataset(root, &ds.layout, &ds.class_names, &seqs)
}

impl Dataset {
    /// Read and validate `manifest.json`. Blob sizes are checked here; contents
    /// are read by [`Dataset::sequence`].
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let version: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let found = version.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != DATASET_VERSION {
            return Err(Error::Version {
                path,
                found,
                expected: DATASET_VERSION,
            });
        }
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let ds = Dataset {
            root: root.to_path_buf(),
            manifest,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        let channels = m.channels.len();
        for (i, e) in m.sequences.iter().enumerate() {
            let entry = format!("sequence '{}'", e.id);
            if m.sequences[..i].iter().any(|o| o.id == e.id) {
                return Err(Error::invalid(entry, "duplicate sequence id"));
            }
            let shape = &e.pose.array.shape;
            if shape.len() != 3 || shape[2] != 2 {
                return Err(Error::invalid(entry, format!("pose shape {shape:?} is not [F, J, 2]")));
            }
            m.layout
                .validate(shape[1])
                .map_err(|err| Error::invalid(&entry, err.to_string()))?;
            if let Some(v) = &e.pose.visibility {
                if v.shape != shape[..2] {
                    return Err(Error::invalid(entry, format!("visibility shape {:?} does not match pose", v.shape)));
                }
            }
            if e.imu.len() != m.layout.len() {
                return Err(Error::invalid(entry, format!("{} imu streams for {} sensors", e.imu.len(), m.layout.len())));
            }
            for (s, spec) in e.imu.iter().zip(&m.layout.sensors) {
                if s.sensor_id != spec.sensor_id {
                    return Err(Error::invalid(entry, format!("imu '{}' where layout expects '{}'", s.sensor_id, spec.sensor_id)));
                }
                if s.array.shape.len() != 2 || s.array.shape[1] != channels {
                    return Err(Error::invalid(entry, format!("imu '{}' shape {:?} needs {channels} channels", s.sensor_id, s.array.shape)));
                }
            }
            for a in e.imu.iter().map(|s| &s.array).chain([&e.pose.array]).chain(&e.pose.visibility) {
                let path = self.root.join(&a.file);
                let len = fs::metadata(&path)
                    .map_err(|err| Error::invalid(&entry, format!("{}: {err}", path.display())))?
                    .len() as usize;
                let want = a.shape.iter().product::<usize>() * 4;
                if len != want {
                    return Err(Error::invalid(entry, format!("{}: {len} bytes, shape {:?} needs {want}", a.file, a.shape)));
                }
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> &SensorLayout {
        &self.manifest.layout
    }

    pub fn len(&self) -> usize {
        self.manifest.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.sequences.is_empty()
    }

    pub fn sequence(&self, i: usize) -> Result<SequencePair> {
        let e = &self.manifest.sequences[i];
        let entry = format!("sequence '{}'", e.id);
        let mut imu = Vec::with_capacity(e.imu.len());
        for s in &e.imu {
            let data = read_blob(&self.root, &entry, &s.array)?;
            let seq = ImuSequence {
                sensor_id: s.sensor_id.clone(),
                samples: Mat::from_vec(s.array.shape[0], s.array.shape[1], data)?,
                sample_rate_hz: s.sample_rate_hz,
                t0_s: s.t0_s,
            };
            seq.validate().map_err(|err| Error::invalid(&entry, err.to_string()))?;
            imu.push(seq);
        }
        let shape = &e.pose.array.shape;
        let joints = Mat::from_vec(shape[0], shape[1] * 2, read_blob(&self.root, &entry, &e.pose.array)?)?;
        let visibility = match &e.pose.visibility {
            Some(a) => Some(read_blob(&self.root, &entry, a)?.into_iter().map(|v| v != 0.0).collect()),
            None => None,
        };
        let pose = PoseSequence {
            joints,
            fps: e.pose.fps,
            t0_s: e.pose.t0_s,
            visibility,
        };
        pose.validate().map_err(|err| Error::invalid(&entry, err.to_string()))?;
        Ok(SequencePair {
            id: e.id.clone(),
            subject_id: e.subject_id.clone(),
            label: e.label,
            imu,
            pose,
        })
    }

    /// All sequences of one split, in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<SequencePair>> {
        (0..self.len())
            .filter(|&i| self.manifest.sequences[i].split == split)
            .map(|i| self.sequence(i))
            .collect()
    }

    pub fn load_all(&self) -> Result<Vec<(SequencePair, Split)>> {
        (0..self.len())
            .map(|i| Ok((self.sequence(i)?, self.manifest.sequences[i].split)))
            .collect()
    }
}
