//! Batch construction with sensor dropout, the optimization loop and
//! early stopping on validation retrieval.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{window, PairedSample, SensorLayout, SequencePair};
use crate::error::{Error, Result};
use crate::losses::{sample_mask, LossBreakdown, LossConfig, MaskSet};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::optim::Adam;
use crate::real::Real;
use crate::synth::derive_seed;
use crate::tasks::{retrieval, RetrievalMetrics};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub window_len_s: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub betas: [f64; 2],
    pub max_epochs: usize,
    pub patience: usize,
    /// Per-sensor drop probability; at least one sensor always stays.
    pub dropout_p: f64,
    pub seed: u64,
    /// Random windows drawn from each training sequence per epoch.
    pub windows_per_sequence: usize,
    /// Evenly spaced validation windows per sequence.
    pub val_windows_per_sequence: usize,
    /// Validation retrieval is scored within groups of this many samples.
    pub eval_group: usize,
    /// Mask same-sequence overlapping windows out of the negatives.
    pub exclude_overlaps: bool,
    pub skip_degenerate: bool,
    pub clip_norm: Option<f64>,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            window_len_s: 5.0,
            batch_size: 128,
            learning_rate: 1e-4,
            betas: [0.9, 0.999],
            max_epochs: 100,
            patience: 50,
            dropout_p: 0.0,
            seed: 0,
            windows_per_sequence: 8,
            val_windows_per_sequence: 3,
            eval_group: 64,
            exclude_overlaps: true,
            skip_degenerate: false,
            clip_norm: None,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Batch size and patience of the full-scale recipe.
    pub fn paper_preset() -> Self {
        TrainConfig {
            batch_size: 1356,
            patience: 500,
            max_epochs: 5000,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size {} must be at least 2", self.batch_size));
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if !(self.window_len_s > 0.0) {
            return bad(format!("window_len_s {} must be positive", self.window_len_s));
        }
        if !(0.0..=1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} must lie in [0, 1]", self.dropout_p));
        }
        if self.windows_per_sequence == 0 || self.val_windows_per_sequence == 0 || self.eval_group < 2 {
            return bad("windows_per_sequence, val_windows_per_sequence ≥ 1 and eval_group ≥ 2 required".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub samples: Vec<PairedSample>,
    /// `presence[i][n]`: sensor `n` observed in sample `i`.
    pub presence: Vec<Vec<bool>>,
    pub labels: Vec<Option<u32>>,
    /// `K × K` negatives to ignore, row-major.
    pub exclude: Option<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub batches: Vec<Batch>,
    /// Sequences shorter than one window.
    pub skipped: Vec<String>,
}

/// Independent per-sensor drop with probability `p`; if everything was dropped
/// one sensor chosen uniformly is kept.
pub fn sample_presence<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Vec<bool> {
    let mut keep: Vec<bool> = (0..n).map(|_| p <= 0.0 || !rng.random_bool(p.min(1.0))).collect();
    if n > 0 && !keep.iter().any(|&k| k) {
        keep[rng.random_range(0..n)] = true;
    }
    keep
}

/// Row-major `K × K` mask of same-sequence overlapping pairs (diagonal excluded).
pub fn overlap_mask(samples: &[PairedSample]) -> Vec<bool> {
    let k = samples.len();
    let mut m = vec![false; k * k];
    for i in 0..k {
        for j in 0..k {
            m[i * k + j] = i != j && samples[i].overlaps(&samples[j]);
        }
    }
    m
}

/// Random windows per sequence, shuffled and grouped into batches, with
/// per-sample sensor presence. A short trailing remainder joins the last batch.
pub fn make_batches<R: Rng + ?Sized>(
    sequences: &[&SequencePair],
    layout: &SensorLayout,
    cfg: &TrainConfig,
    frames: usize,
    rng: &mut R,
) -> Result<BatchPlan> {
    cfg.validate()?;
    if sequences.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let mut skipped = Vec::new();
    let mut samples = Vec::new();
    for seq in sequences {
        let (a, b) = seq.common_span();
        if b - a < cfg.window_len_s {
            skipped.push(seq.id.clone());
            continue;
        }
        for _ in 0..cfg.windows_per_sequence {
            let start = a + rng.random::<f64>() * (b - a - cfg.window_len_s);
            let s = window(seq, layout, start, cfg.window_len_s, frames)?;
            if !(cfg.skip_degenerate && s.degenerate) {
                samples.push(s);
            }
        }
    }
    if samples.len() < 2 {
        return Err(Error::Empty("training windows (need at least two)"));
    }
    samples.shuffle(rng);
    let mut groups: Vec<Vec<PairedSample>> = Vec::new();
    let mut it = samples.into_iter().peekable();
    while it.peek().is_some() {
        groups.push(it.by_ref().take(cfg.batch_size).collect());
    }
    if groups.len() > 1 && groups.last().is_some_and(|g| g.len() < 2) {
        let tail = groups.pop().unwrap_or_default();
        if let Some(last) = groups.last_mut() {
            last.extend(tail);
        }
    }
    let n = layout.len();
    let batches = groups
        .into_iter()
        .map(|samples| Batch {
            presence: samples.iter().map(|_| sample_presence(n, cfg.dropout_p, rng)).collect(),
            labels: samples.iter().map(|s| s.label).collect(),
            exclude: cfg.exclude_overlaps.then(|| overlap_mask(&samples)),
            samples,
        })
        .collect();
    Ok(BatchPlan { batches, skipped })
}

/// Replace dropped sensors' local embeddings by their learned absent vectors
/// (`absent` is `N × D`, row-major).
pub fn apply_dropout<T: Real>(locals: &[Vec<T>], absent: &[T], present: &[bool]) -> Result<Vec<Vec<T>>> {
    let n = locals.len();
    let d = locals.first().map_or(0, Vec::len);
    if present.len() != n || absent.len() != n * d || locals.iter().any(|l| l.len() != d) {
        return Err(Error::shape("apply_dropout", format!("{n}×{d} locals, absent and mask"), "mismatched sizes"));
    }
    Ok(locals
        .iter()
        .enumerate()
        .map(|(s, l)| if present[s] { l.clone() } else { absent[s * d..(s + 1) * d].to_vec() })
        .collect())
}

/// Evenly spaced windows from each sequence, shuffled with `seed` so that
/// scoring groups mix sequences.
pub fn eval_samples(
    sequences: &[&SequencePair],
    layout: &SensorLayout,
    window_len_s: f64,
    per_sequence: usize,
    frames: usize,
    seed: u64,
) -> Result<Vec<PairedSample>> {
    let mut out = Vec::new();
    for seq in sequences {
        let (a, b) = seq.common_span();
        let room = b - a - window_len_s;
        if room < 0.0 {
            continue;
        }
        for w in 0..per_sequence {
            let start = if per_sequence == 1 { a } else { a + room * w as f64 / (per_sequence - 1) as f64 };
            out.push(window(seq, layout, start, window_len_s, frames)?);
        }
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(out)
}

pub type Embeddings = Vec<Vec<f32>>;

/// Global embeddings of both modalities, IMU side restricted to `present`.
pub fn embed_globals(
    model: &Model,
    ps: &ParamStore<f32>,
    samples: &[PairedSample],
    present: Option<&[bool]>,
) -> Result<(Embeddings, Embeddings)> {
    let mut imu = Vec::with_capacity(samples.len());
    let mut pose = Vec::with_capacity(samples.len());
    for s in samples {
        imu.push(model.embed_imu(ps, &s.imu_windows, present)?.global);
        pose.push(model.embed_pose(ps, &s.part_windows)?.global);
    }
    Ok((imu, pose))
}

pub fn evaluate_retrieval(
    model: &Model,
    ps: &ParamStore<f32>,
    samples: &[PairedSample],
    present: Option<&[bool]>,
    ks: &[usize],
    group: usize,
) -> Result<RetrievalMetrics> {
    let (a, b) = embed_globals(model, ps, samples, present)?;
    retrieval(&a, &b, ks, group)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: u64,
    pub loss_total: f64,
    pub loss_align: f64,
    pub loss_global: f64,
    pub loss_local: f64,
    pub loss_token: f64,
    pub loss_mtp: f64,
    pub val_r1: f64,
    pub val_r1_imu_to_pose: f64,
    pub val_r1_pose_to_imu: f64,
    pub tau: f64,
    pub best_epoch: usize,
    pub skipped_sequences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Patience,
    /// Training hit a non-finite loss or gradient; the best parameters so far are kept.
    NonFinite { epoch: usize, detail: String },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: ParamStore<f32>,
    /// 1-based; 0 when no epoch finished.
    pub best_epoch: usize,
    pub best_val_r1: f64,
    pub epochs_run: usize,
    pub stop: StopReason,
}

fn mean_breakdown(acc: &mut [f64; 6], b: &LossBreakdown) {
    let v = [b.total, b.align.total, b.align.global, b.align.local, b.align.token, b.mtp];
    acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
}

/// Optimize `ps` in place. After each epoch the validation R@1 (mean of both
/// directions) is measured; the best parameters are returned and training stops
/// once `patience` epochs pass without a strict improvement.
pub fn train<L: FnMut(&EpochLog)>(
    model: &Model,
    ps: &mut ParamStore<f32>,
    train_set: &[&SequencePair],
    val_set: &[&SequencePair],
    layout: &SensorLayout,
    cfg: &TrainConfig,
    mut log: L,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if val_set.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let frames = model.spec.encoder.frames;
    let val = eval_samples(val_set, layout, cfg.window_len_s, cfg.val_windows_per_sequence, frames, derive_seed(cfg.seed, u64::MAX))?;
    if val.len() < 2 {
        return Err(Error::Empty("validation windows (need at least two)"));
    }
    let mut opt = Adam::new(ps, cfg.learning_rate, (cfg.betas[0], cfg.betas[1]))?;
    opt.clip_norm = cfg.clip_norm;
    let mtp_on = cfg.loss.weights()[3] > 0.0;
    let (n, t) = (model.sensors(), model.tokens());
    let mut best = ps.clone();
    let mut best_epoch = 0;
    let mut best_r1 = f64::NEG_INFINITY;
    let mut stop = StopReason::MaxEpochs;
    let mut epochs_run = 0;

    'epochs: for epoch in 1..=cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64));
        let plan = make_batches(train_set, layout, cfg, frames, &mut rng)?;
        let mut acc = [0.0; 6];
        for b in &plan.batches {
            let refs: Vec<&PairedSample> = b.samples.iter().collect();
            let masks: Option<Vec<MaskSet>> = if mtp_on {
                Some(refs.iter().map(|_| sample_mask(n, t, cfg.loss.mask_ratio, &mut rng)).collect::<Result<_>>()?)
            } else {
                None
            };
            let presence = (cfg.dropout_p > 0.0).then_some(b.presence.as_slice());
            let mut grads = ps.zero_grads();
            let step = model
                .batch_loss(ps, &refs, presence, b.exclude.clone(), masks.as_deref(), &cfg.loss, Some(&mut grads))
                .and_then(|br| opt.step(ps, &grads).map(|_| br));
            match step {
                Ok(br) => mean_breakdown(&mut acc, &br),
                Err(e @ Error::NonFinite(_)) => {
                    stop = StopReason::NonFinite { epoch, detail: format!("{e}") };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        epochs_run = epoch;
        let m = evaluate_retrieval(model, ps, &val, None, &[1], cfg.eval_group)?;
        let r1 = m.r1_mean();
        if r1 > best_r1 {
            best_r1 = r1;
            best_epoch = epoch;
            best.load_from(ps)?;
        }
        let k = plan.batches.len() as f64;
        log(&EpochLog {
            epoch,
            steps: opt.steps(),
            loss_total: acc[0] / k,
            loss_align: acc[1] / k,
            loss_global: acc[2] / k,
            loss_local: acc[3] / k,
            loss_token: acc[4] / k,
            loss_mtp: acc[5] / k,
            val_r1: r1,
            val_r1_imu_to_pose: m.imu_to_pose[0],
            val_r1_pose_to_imu: m.pose_to_imu[0],
            tau: model.tau(ps) as f64,
            best_epoch,
            skipped_sequences: plan.skipped.len(),
        });
        if epoch - best_epoch >= cfg.patience {
            stop = StopReason::Patience;
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_r1: if best_epoch == 0 { 0.0 } else { best_r1 },
        epochs_run,
        stop,
    })
}

/// Early-stopping rule on its own: the epoch (1-based) at which training
/// with this validation curve stops.
pub fn stopping_epoch(val_r1: &[f64], patience: usize) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    for (i, &r) in val_r1.iter().enumerate() {
        let e = i + 1;
        if r > best {
            best = r;
            best_epoch = e;
        }
        if e - best_epoch >= patience {
            return e;
        }
    }
    val_r1.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::align_loss;
    use crate::model::tests::tiny_spec;
    use crate::synth::{gen_dataset, GenConfig, Split};
    use proptest::prelude::{prop_assert, proptest};

    fn tiny_data() -> crate::synth::GeneratedDataset {
        gen_dataset(&GenConfig {
            num_classes: 2,
            sequences_per_class: 4,
            subjects: 4,
            duration_s: 8.0,
            split_fractions: [0.5, 0.25],
            ..GenConfig::default()
        })
        .unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            windows_per_sequence: 2,
            val_windows_per_sequence: 2,
            eval_group: 64,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn presence_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            assert_eq!(sample_presence(4, 0.0, &mut rng), vec![true; 4]);
            let one = sample_presence(4, 1.0, &mut rng);
            assert_eq!(one.iter().filter(|&&b| b).count(), 1);
            assert!(sample_presence(4, 0.7, &mut rng).iter().any(|&b| b));
        }
    }

    #[test]
    fn batches_are_deterministic_and_sized() {
        let ds = tiny_data();
        let train = ds.split(Split::Train);
        let c = cfg();
        let a = make_batches(&train, &ds.layout, &c, 10, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = make_batches(&train, &ds.layout, &c, 10, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        let total: usize = a.batches.iter().map(|b| b.samples.len()).sum();
        assert_eq!(total, train.len() * 2);
        assert!(a.batches.iter().all(|b| b.samples.len() >= 2 && b.presence.iter().all(|p| p == &vec![true; 4])));
        for b in &a.batches {
            for s in &b.samples {
                assert!(s.window_start_s >= 0.0 && s.window_start_s + 5.0 <= 8.0 + 1e-9);
            }
        }
    }

    #[test]
    fn short_sequences_are_skipped() {
        let ds = tiny_data();
        let train = ds.split(Split::Train);
        let c = TrainConfig { window_len_s: 9.0, ..cfg() };
        let r = make_batches(&train, &ds.layout, &c, 10, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(r.is_err());
        let mut c2 = cfg();
        c2.window_len_s = 7.5;
        let mut seqs = train.clone();
        let mut short = train[0].clone();
        short.id = "short".into();
        short.pose.joints.rows = 25;
        short.pose.joints.data.truncate(25 * short.pose.joints.cols);
        short.pose.visibility = None;
        seqs.push(&short);
        let r = make_batches(&seqs, &ds.layout, &c2, 10, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(r.skipped, vec!["short".to_string()]);
    }

    #[test]
    fn dropout_substitution() {
        let locals = vec![vec![1.0f64, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        let absent = [9.0, 9.5, 8.0, 8.5, 7.0, 7.5];
        assert_eq!(apply_dropout(&locals, &absent, &[true; 3]).unwrap(), locals);
        let d = apply_dropout(&locals, &absent, &[true, true, false]).unwrap();
        assert_eq!(d[2], vec![7.0, 7.5]);
        assert_eq!(d[..2], locals[..2]);
        assert!(apply_dropout(&locals, &absent[..4], &[true; 3]).is_err());
    }

    #[test]
    fn dropped_sensor_is_excluded_from_the_loss() {
        // Align loss with sensor 1 dropped everywhere equals the loss recomputed
        // over the present sensor alone.
        let k = 3;
        let mut x = crate::losses::tests::toy(k, 2, 4, 5, 5);
        x.presence = Some(vec![vec![true, false]; k]);
        let cfg = LossConfig::default();
        let (a, _) = align_loss(&x, 0.2, &cfg).unwrap();
        let mut y = x.clone();
        y.presence = None;
        y.local_imu.truncate(1);
        y.local_pose.truncate(1);
        y.token_imu.truncate(1);
        y.token_pose.truncate(1);
        let (b, _) = align_loss(&y, 0.2, &cfg).unwrap();
        assert!((a.local - b.local).abs() < 1e-12 && (a.token - b.token).abs() < 1e-12);
    }

    #[test]
    fn overlap_mask_marks_same_sequence_windows() {
        let ds = tiny_data();
        let s: Vec<PairedSample> = [(0, 0.0), (0, 2.0), (1, 0.0), (0, 3.0)]
            .iter()
            .map(|&(q, t)| window(&ds.sequences[q], &ds.layout, t, 2.5, 10).unwrap())
            .collect();
        let m = overlap_mask(&s);
        assert!(m[1] && m[4] && !m[2] && !m[3] && m[7] && !m[0]);
    }

    #[test]
    fn one_epoch_trains_and_reports() {
        let ds = tiny_data();
        let (train_set, val_set) = (ds.split(Split::Train), ds.split(Split::Val));
        let mut ps = ParamStore::<f32>::new();
        let model = Model::new(&mut ps, tiny_spec(4), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let before = ps.clone();
        let c = TrainConfig { max_epochs: 1, ..cfg() };
        let mut logs = Vec::new();
        let out = train(&model, &mut ps, &train_set, &val_set, &ds.layout, &c, |l| logs.push(l.clone())).unwrap();
        assert_eq!(logs.len(), 1);
        assert_eq!(out.epochs_run, 1);
        assert_eq!(out.best_epoch, 1);
        assert_eq!(out.stop, StopReason::MaxEpochs);
        assert!(logs[0].loss_total.is_finite() && logs[0].steps > 0);
        assert_ne!(before.params()[0].value, ps.params()[0].value);
        assert_eq!(out.best.params()[0].value, ps.params()[0].value);
    }

    #[test]
    fn identical_seeds_reproduce_losses() {
        let ds = tiny_data();
        let (train_set, val_set) = (ds.split(Split::Train), ds.split(Split::Val));
        let c = TrainConfig {
            max_epochs: 2,
            dropout_p: 0.3,
            ..cfg()
        };
        let run = || {
            let mut ps = ParamStore::<f32>::new();
            let model = Model::new(&mut ps, tiny_spec(4), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let mut logs = Vec::new();
            train(&model, &mut ps, &train_set, &val_set, &ds.layout, &c, |l| logs.push(l.loss_total)).unwrap();
            logs
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn forward_succeeds_for_every_sensor_subset() {
        let ds = tiny_data();
        let mut ps = ParamStore::<f32>::new();
        let model = Model::new(&mut ps, tiny_spec(4), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let s = window(&ds.sequences[0], &ds.layout, 0.0, 5.0, 10).unwrap();
        for bits in 1u32..16 {
            let present: Vec<bool> = (0..4).map(|i| bits >> i & 1 == 1).collect();
            let e = model.embed_imu(&ps, &s.imu_windows, Some(&present)).unwrap();
            assert!(e.global.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn stopping_rule_examples() {
        assert_eq!(stopping_epoch(&[0.5, 0.4, 0.3, 0.2], 1), 2);
        assert_eq!(stopping_epoch(&[0.1, 0.2, 0.3], 1), 3);
        assert_eq!(stopping_epoch(&[0.5, 0.5, 0.5, 0.5], 2), 3);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { batch_size: 1, ..cfg() }.validate().is_err());
        assert!(TrainConfig { patience: 0, ..cfg() }.validate().is_err());
        assert!(TrainConfig::paper_preset().validate().is_ok());
        assert_eq!(TrainConfig::paper_preset().batch_size, 1356);
    }

    proptest! {
        #[test]
        fn presence_keeps_a_sensor(seed in 0u64..1000, p in 0.0f64..=1.0, n in 1usize..6) {
            let v = sample_presence(n, p, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert!(v.len() == n && v.iter().any(|&b| b));
        }

        #[test]
        fn early_stop_never_regresses(v in proptest::collection::vec(0.0f64..1.0, 1..30), patience in 1usize..5) {
            let e = stopping_epoch(&v, patience);
            let best = v[..e].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let first_best = v[..e].iter().position(|&x| x == best).unwrap();
            prop_assert!(v[..=first_best].iter().all(|&x| x <= best));
            prop_assert!(e == v.len() || e - (first_best + 1) >= patience);
        }
    }
}
