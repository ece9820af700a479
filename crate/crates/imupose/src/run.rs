//! Task runners shared by the command line and the acceptance suite.

use std::path::Path;

use imupose_core::data::{resample, window, SensorLayout, SequencePair};
use imupose_core::model::Model;
use imupose_core::nn::ParamStore;
use imupose_core::tensor::Mat;
use imupose_core::synth::{builtin_families, derive_seed, gen_dataset, gen_scene, random_scene, GenConfig, Split};
use imupose_core::tasks::{
    accuracy, crosscorr_oracle, estimate_offset, har_1nn, har_finetune, localize_part, localize_subject, pose_angular_velocity,
    PartCandidate, RetrievalMetrics, WindowEmbedder, GYRO_Z,
};
use imupose_core::training::{embed_globals, eval_samples, evaluate_retrieval, train, EpochLog, TrainOutcome};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{HarMode, LocalizeConfig, RunConfig, SyncTaskConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// Sequences with their split, from disk or generated in memory.
#[derive(Debug, Clone)]
pub struct Data {
    pub layout: SensorLayout,
    pub class_names: Vec<String>,
    pub sequences: Vec<(SequencePair, Split)>,
}

impl Data {
    pub fn generate(gen: &GenConfig) -> Result<Self> {
        let ds = gen_dataset(gen)?;
        let sequences = ds.sequences.iter().cloned().zip(ds.splits.iter().copied()).collect();
        Ok(Data {
            layout: ds.layout,
            class_names: ds.class_names,
            sequences,
        })
    }

    pub fn open(root: &Path) -> Result<Self> {
        let ds = Dataset::open(root)?;
        Ok(Data {
            layout: ds.layout().clone(),
            class_names: ds.manifest.class_names.clone(),
            sequences: ds.load_all()?,
        })
    }

    /// The dataset at `root`, or the configured synthetic one.
    pub fn load(root: Option<&Path>, cfg: &RunConfig) -> Result<Self> {
        match root {
            Some(r) => Data::open(r),
            None => Data::generate(&cfg.gen),
        }
    }

    pub fn split(&self, split: Split) -> Vec<&SequencePair> {
        self.sequences.iter().filter(|(_, s)| *s == split).map(|(p, _)| p).collect()
    }

    fn nonempty(&self, split: Split) -> Result<Vec<&SequencePair>> {
        let v = self.split(split);
        if v.is_empty() {
            return Err(Error::invalid(format!("{} split", split.as_str()), "has no sequences"));
        }
        Ok(v)
    }
}

/// A fresh model for the layout, initialized from `train.seed`.
pub fn init_model(cfg: &RunConfig, layout: &SensorLayout) -> Result<(Model, ParamStore<f32>)> {
    let spec = cfg.model.spec(imupose_core::synth::IMU_CHANNELS, layout.part_widths(), cfg.train.loss.tau_init);
    let mut ps = ParamStore::new();
    let model = Model::new(&mut ps, spec, &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?;
    Ok((model, ps))
}

pub fn train_model<L: FnMut(&EpochLog)>(cfg: &RunConfig, data: &Data, log: L) -> Result<(Model, TrainOutcome)> {
    let (model, mut ps) = init_model(cfg, &data.layout)?;
    let outcome = train(
        &model,
        &mut ps,
        &data.nonempty(Split::Train)?,
        &data.nonempty(Split::Val)?,
        &data.layout,
        &cfg.train,
        log,
    )?;
    Ok((model, outcome))
}

/// Presence mask keeping only the named sensors; `None` keeps all.
pub fn presence(layout: &SensorLayout, sensors: &[String]) -> Result<Option<Vec<bool>>> {
    if sensors.is_empty() {
        return Ok(None);
    }
    let mut keep = vec![false; layout.len()];
    for s in sensors {
        let n = layout.index_of(s).ok_or_else(|| Error::invalid("config.eval.sensors", format!("unknown sensor '{s}'")))?;
        keep[n] = true;
    }
    Ok(Some(keep))
}

pub fn eval_retrieval(cfg: &RunConfig, model: &Model, ps: &ParamStore<f32>, data: &Data, split: Split) -> Result<RetrievalMetrics> {
    let samples = eval_samples(
        &data.nonempty(split)?,
        &data.layout,
        cfg.train.window_len_s,
        cfg.eval.windows_per_sequence,
        model.spec.encoder.frames,
        cfg.eval.seed,
    )?;
    let present = presence(&data.layout, &cfg.eval.sensors)?;
    Ok(evaluate_retrieval(model, ps, &samples, present.as_deref(), &cfg.eval.ks, cfg.eval.group)?)
}

/// Clips with lags drawn uniformly from the configured range, one per
/// sequence in turn; the IMU start is uniform over the positions that keep
/// both clips inside the recording.
pub fn sync_clips(seqs: &[&SequencePair], cfg: &SyncTaskConfig) -> Result<Vec<imupose_core::synth::SyncPair>> {
    if seqs.is_empty() {
        return Err(Error::invalid("sync", "no sequences to cut clips from"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let [lo, hi] = cfg.lag_range_s;
    let len = cfg.sync.clip_len_s;
    (0..cfg.clips)
        .map(|i| {
            let pair = seqs[i % seqs.len()];
            let lag = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let (a, b) = pair.common_span();
            let first = a.max(a - lag);
            let last = (b - len).min(b - len - lag);
            if first > last {
                return Err(Error::invalid(
                    format!("sequence '{}'", pair.id),
                    format!("{:.1} s is too short for a {len} s clip at lag {lag:.2} s", b - a),
                ));
            }
            let start = if last > first { rng.random_range(first..last) } else { first };
            let base = imupose_core::synth::SyncPair::new(pair.clone(), start, len)?;
            Ok(base.inject_offset(lag)?)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipResult {
    pub sequence: String,
    pub truth_s: f64,
    pub estimate_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncSummary {
    /// Fraction of clips with `|δ̂ − δ| ≤ tolerance`.
    pub accuracy: f64,
    pub mae_s: f64,
    pub clips: Vec<ClipResult>,
}

pub fn run_sync<E: WindowEmbedder + ?Sized>(
    embedder: &E,
    clips: &[imupose_core::synth::SyncPair],
    cfg: &SyncTaskConfig,
) -> Result<SyncSummary> {
    let mut out = Vec::with_capacity(clips.len());
    for c in clips {
        let (imu, pose) = c.clips()?;
        let e = estimate_offset(embedder, &imu, &pose, &cfg.sync)?;
        out.push(ClipResult {
            sequence: c.pair.id.clone(),
            truth_s: c.ground_truth_s(),
            estimate_s: e.delta_hat_s,
        });
    }
    let n = out.len().max(1) as f64;
    let err = |c: &ClipResult| (c.estimate_s - c.truth_s).abs();
    Ok(SyncSummary {
        accuracy: out.iter().filter(|c| err(c) <= cfg.sync.tolerance_s + 1e-9).count() as f64 / n,
        mae_s: out.iter().map(err).sum::<f64>() / n,
        clips: out,
    })
}

/// Lag in seconds from cross-correlating the first sensor's orientation
/// (integrated gyroscope rate) with its segment's orientation from the pose
/// (integrated angular velocity), at the pose frame rate. Orientation keeps the
/// slow aperiodic wander that rates suppress, so periodic motion stays unambiguous.
pub fn crosscorr_lag_s(clip: &imupose_core::synth::SyncPair, layout: &SensorLayout, max_lag_s: f64) -> Result<f64> {
    let (imu, pose) = clip.clips()?;
    let w = pose_angular_velocity(&pose, layout)?;
    let s0 = &imu[0];
    let mut angle = 0.0f64;
    let integrated = Mat::from_fn(s0.samples.rows, 1, |r, _| {
        angle += s0.samples.at(r, GYRO_Z) as f64 / s0.sample_rate_hz;
        angle as f32
    });
    let a_mat = resample(&integrated, s0.sample_rate_hz, 0.0, 0.0, clip.clip_len_s, pose.frames())?;
    let a: Vec<f64> = a_mat.data.iter().map(|&v| v as f64).collect();
    let mut acc = 0.0f64;
    let b: Vec<f64> = (0..w.rows)
        .map(|r| {
            acc += w.at(r, 0) as f64 / pose.fps;
            acc
        })
        .collect();
    let s = crosscorr_oracle(&a, &b, (max_lag_s * pose.fps).ceil() as usize)?;
    Ok(s as f64 / pose.fps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizeSummary {
    pub subject_accuracy: f64,
    /// Macro-F1 over track positions.
    pub subject_macro_f1: f64,
    /// A part query counts when both the wearer and the body part are right.
    pub part_accuracy: f64,
    pub scenes: usize,
    pub part_queries: usize,
    pub ties: usize,
}

pub fn run_localize(model: &Model, ps: &ParamStore<f32>, layout: &SensorLayout, cfg: &LocalizeConfig) -> Result<LocalizeSummary> {
    let families = builtin_families();
    let frames = model.spec.encoder.frames;
    let start = 0.5 * (cfg.duration_s - cfg.window_len_s);
    let n = layout.len();
    let mut confusion = vec![vec![0usize; cfg.subjects]; cfg.subjects];
    let (mut part_ok, mut part_total, mut ties) = (0usize, 0usize, 0usize);
    for s in 0..cfg.scenes {
        let seed = derive_seed(cfg.seed, s as u64);
        let scene = gen_scene(&random_scene(cfg.subjects, &families, &cfg.noise, cfg.duration_s, seed), layout)?;
        let windows = scene
            .pairs
            .iter()
            .map(|p| window(p, layout, start, cfg.window_len_s, frames))
            .collect::<imupose_core::Result<Vec<_>>>()?;
        let poses = windows.iter().map(|w| model.embed_pose(ps, &w.part_windows)).collect::<imupose_core::Result<Vec<_>>>()?;
        let people: Vec<Vec<f32>> = poses.iter().map(|p| p.global.clone()).collect();
        let candidates: Vec<PartCandidate> = poses
            .iter()
            .enumerate()
            .flat_map(|(person, p)| {
                p.locals.iter().enumerate().filter_map(move |(part, l)| {
                    l.as_ref().map(|e| PartCandidate {
                        person,
                        part,
                        embedding: e.clone(),
                    })
                })
            })
            .collect();
        for (k, w) in windows.iter().enumerate() {
            let pick = localize_subject(&model.embed_imu(ps, &w.imu_windows, None)?.global, &people)?;
            confusion[k][pick.index] += 1;
            ties += pick.tied as usize;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
        for _ in 0..cfg.part_queries_per_scene {
            let (wearer, sensor) = (rng.random_range(0..cfg.subjects), rng.random_range(0..n));
            let mut only = vec![false; n];
            only[sensor] = true;
            let e = model.embed_imu(ps, &windows[wearer].imu_windows, Some(&only))?;
            let local = e.locals[sensor].as_ref().ok_or_else(|| Error::invalid("localize", "missing local embedding"))?;
            let (person, part, pick) = localize_part(local, &candidates)?;
            part_ok += (person == wearer && part == sensor) as usize;
            part_total += 1;
            ties += pick.tied as usize;
        }
    }
    let total: usize = confusion.iter().flatten().sum();
    let correct: usize = (0..cfg.subjects).map(|i| confusion[i][i]).sum();
    let f1: f64 = (0..cfg.subjects)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let pred: usize = confusion.iter().map(|r| r[c]).sum();
            let actual: usize = confusion[c].iter().sum();
            if pred + actual == 0 {
                0.0
            } else {
                2.0 * tp / (pred + actual) as f64
            }
        })
        .sum::<f64>()
        / cfg.subjects as f64;
    Ok(LocalizeSummary {
        subject_accuracy: correct as f64 / total.max(1) as f64,
        subject_macro_f1: f1,
        part_accuracy: part_ok as f64 / part_total.max(1) as f64,
        scenes: cfg.scenes,
        part_queries: part_total,
        ties,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarSummary {
    pub mode: HarMode,
    pub accuracy: f64,
    pub train_windows: usize,
    pub test_windows: usize,
    /// Per-epoch test accuracy when fine-tuning.
    pub epoch_accuracy: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Activity recognition with the IMU encoder, trained on `train` windows and
/// scored on `test` windows.
pub fn run_har(cfg: &RunConfig, model: &Model, ps: &ParamStore<f32>, data: &Data, test: Split) -> Result<HarSummary> {
    let frames = model.spec.encoder.frames;
    let samples = |split: Split, seed: u64| -> Result<Vec<imupose_core::data::PairedSample>> {
        Ok(eval_samples(&data.nonempty(split)?, &data.layout, cfg.train.window_len_s, cfg.har.windows_per_sequence, frames, seed)?)
    };
    let train_s = samples(Split::Train, cfg.eval.seed)?;
    let test_s = samples(test, derive_seed(cfg.eval.seed, 1))?;
    let classes = data.class_names.len().max(1);
    let labels = |s: &[imupose_core::data::PairedSample]| -> Result<Vec<u32>> {
        s.iter().map(|w| w.label.ok_or_else(|| Error::invalid(format!("sequence '{}'", w.sequence_id), "has no label"))).collect()
    };
    let (train_y, test_y) = (labels(&train_s)?, labels(&test_s)?);
    match cfg.har.mode {
        HarMode::OneNn => {
            let (train_e, _) = embed_globals(model, ps, &train_s, None)?;
            let (test_e, _) = embed_globals(model, ps, &test_s, None)?;
            let pred = har_1nn(&train_e, &train_y, &test_e)?;
            let mut confusion = vec![vec![0usize; classes]; classes];
            for (&t, &p) in test_y.iter().zip(&pred) {
                if (t as usize) < classes && (p as usize) < classes {
                    confusion[t as usize][p as usize] += 1;
                }
            }
            Ok(HarSummary {
                mode: HarMode::OneNn,
                accuracy: accuracy(&pred, &test_y),
                train_windows: train_s.len(),
                test_windows: test_s.len(),
                epoch_accuracy: Vec::new(),
                confusion,
            })
        }
        HarMode::Finetune => {
            let mut tuned = ps.clone();
            let r = har_finetune(model, &mut tuned, &train_s, &test_s, classes, &cfg.har.finetune)?;
            Ok(HarSummary {
                mode: HarMode::Finetune,
                accuracy: r.accuracy,
                train_windows: train_s.len(),
                test_windows: test_s.len(),
                epoch_accuracy: r.epoch_accuracy,
                confusion: r.confusion,
            })
        }
    }
}
