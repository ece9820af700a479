//! Downstream evaluators: cross-modal retrieval, temporal synchronization,
//! subject and body-part localization, and nearest-neighbour action recognition.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{imu_window, pose_window, resample, ImuSequence, PairedSample, PoseSequence, SensorLayout};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{Linear, ParamStore};
use crate::optim::Adam;
use crate::synth::wrap_angle;
use crate::tensor::{dot, Mat};

/// Gyroscope channel about the image-plane normal.
pub const GYRO_Z: usize = 5;

/// `scores[p][q] = ⟨query_p, ref_q⟩` (cosine for unit inputs).
pub fn similarity_matrix(queries: &[Vec<f32>], refs: &[Vec<f32>]) -> Result<Mat<f32>> {
    let d = queries.first().or(refs.first()).map_or(0, |v| v.len());
    if queries.iter().chain(refs).any(|v| v.len() != d) {
        return Err(Error::shape("similarity_matrix", format!("width {d}"), "mixed widths"));
    }
    Ok(Mat::from_fn(queries.len(), refs.len(), |p, q| dot(&queries[p], &refs[q])))
}

/// 0-based rank of `target` in a score row; ties go to the smaller index.
pub fn rank_of(row: &[f32], target: usize) -> usize {
    let s = row[target];
    row.iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < target))
        .count()
}

/// Fraction of queries whose true reference ranks within the top `k`.
pub fn recall_at_k(s: &Mat<f32>, truth: &[usize], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::range("k", "must be at least 1"));
    }
    if truth.len() != s.rows || truth.iter().any(|&t| t >= s.cols) {
        return Err(Error::shape("recall_at_k", format!("{} valid targets", s.rows), format!("{}", truth.len())));
    }
    if s.rows == 0 {
        return Err(Error::Empty("queries"));
    }
    let hits = (0..s.rows).filter(|&p| rank_of(s.row(p), truth[p]) < k).count();
    Ok(hits as f64 / s.rows as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub ks: Vec<usize>,
    /// IMU queries against pose references.
    pub imu_to_pose: Vec<f64>,
    pub pose_to_imu: Vec<f64>,
    pub queries: usize,
}

impl RetrievalMetrics {
    /// Mean of both directions at the first `k`.
    pub fn r1_mean(&self) -> f64 {
        0.5 * (self.imu_to_pose[0] + self.pose_to_imu[0])
    }
}

/// Paired retrieval evaluated within consecutive groups of `group` samples;
/// the result is the query-weighted mean over groups.
pub fn retrieval(imu: &[Vec<f32>], pose: &[Vec<f32>], ks: &[usize], group: usize) -> Result<RetrievalMetrics> {
    if imu.len() != pose.len() {
        return Err(Error::shape("retrieval", format!("{} pose embeddings", imu.len()), format!("{}", pose.len())));
    }
    if imu.is_empty() || ks.is_empty() || group == 0 {
        return Err(Error::Empty("retrieval set"));
    }
    let mut a = vec![0.0; ks.len()];
    let mut b = vec![0.0; ks.len()];
    for start in (0..imu.len()).step_by(group) {
        let end = (start + group).min(imu.len());
        let s = similarity_matrix(&imu[start..end], &pose[start..end])?;
        let st = Mat::from_fn(s.cols, s.rows, |i, j| s.at(j, i));
        let truth: Vec<usize> = (0..end - start).collect();
        let w = (end - start) as f64;
        for (i, &k) in ks.iter().enumerate() {
            a[i] += recall_at_k(&s, &truth, k)? * w;
            b[i] += recall_at_k(&st, &truth, k)? * w;
        }
    }
    let n = imu.len() as f64;
    Ok(RetrievalMetrics {
        ks: ks.to_vec(),
        imu_to_pose: a.into_iter().map(|v| v / n).collect(),
        pose_to_imu: b.into_iter().map(|v| v / n).collect(),
        queries: imu.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyncConfig {
    pub clip_len_s: f64,
    pub window_len_s: f64,
    pub stride_s: f64,
    pub top_k: usize,
    pub offset_range_s: [f64; 2],
    pub tolerance_s: f64,
}

impl Default for SyncConfig {
    fn default() -> Self {
        SyncConfig {
            clip_len_s: 20.0,
            window_len_s: 5.0,
            stride_s: 0.2,
            top_k: 5,
            offset_range_s: [-7.0, 7.0],
            tolerance_s: 0.2,
        }
    }
}

impl SyncConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.stride_s > 0.0) || !(self.window_len_s > 0.0) || self.window_len_s > self.clip_len_s {
            return Err(Error::Config(format!(
                "sync needs stride > 0 and 0 < window ≤ clip, got stride {} window {} clip {}",
                self.stride_s, self.window_len_s, self.clip_len_s
            )));
        }
        if self.top_k == 0 || self.offset_range_s[0] > self.offset_range_s[1] {
            return Err(Error::Config("sync needs top_k ≥ 1 and an ordered offset range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vote {
    pub imu_window: usize,
    pub pose_window: usize,
    pub weight: f64,
    /// Found while ranking pose windows for an IMU window.
    pub from_imu: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetEstimate {
    /// Positive when the pose stream starts later than the IMU stream.
    pub delta_hat_s: f64,
    /// Offset in strides (IMU index − pose index) → accumulated weight.
    pub histogram: BTreeMap<i64, f64>,
    pub votes: Vec<Vote>,
}

fn top_k(scores: impl Iterator<Item = f32>, k: usize) -> Vec<usize> {
    let mut idx: Vec<(usize, f32)> = scores.enumerate().collect();
    idx.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    idx.into_iter().take(k).map(|(i, _)| i).collect()
}

/// Top-k votes in both directions over an IMU × pose window similarity
/// matrix; the heaviest offset bin wins, ties going to the smallest |offset|
/// and then the smaller offset.
pub fn vote_offset(d: &Mat<f32>, cfg: &SyncConfig) -> Result<OffsetEstimate> {
    cfg.validate()?;
    if d.rows == 0 || d.cols == 0 {
        return Err(Error::Empty("similarity matrix"));
    }
    let lo = libm::ceil(cfg.offset_range_s[0] / cfg.stride_s - 1e-9) as i64;
    let hi = libm::floor(cfg.offset_range_s[1] / cfg.stride_s + 1e-9) as i64;
    let mut votes = Vec::new();
    for p in 0..d.rows {
        for q in top_k(d.row(p).iter().copied(), cfg.top_k) {
            votes.push(Vote {
                imu_window: p,
                pose_window: q,
                weight: d.at(p, q) as f64,
                from_imu: true,
            });
        }
    }
    for q in 0..d.cols {
        for p in top_k((0..d.rows).map(|p| d.at(p, q)), cfg.top_k) {
            votes.push(Vote {
                imu_window: p,
                pose_window: q,
                weight: d.at(p, q) as f64,
                from_imu: false,
            });
        }
    }
    let mut histogram = BTreeMap::new();
    for v in &votes {
        let bin = v.imu_window as i64 - v.pose_window as i64;
        if (lo..=hi).contains(&bin) {
            *histogram.entry(bin).or_insert(0.0) += v.weight;
        }
    }
    let best = histogram
        .iter()
        .max_by(|a, b| {
            a.1.total_cmp(b.1)
                .then(b.0.abs().cmp(&a.0.abs()))
                .then(b.0.cmp(a.0))
        })
        .map(|(&k, _)| k)
        .ok_or(Error::Empty("offset histogram within range"))?;
    Ok(OffsetEstimate {
        delta_hat_s: best as f64 * cfg.stride_s,
        histogram,
        votes,
    })
}

/// Embeds windows of the two modalities into a common space.
pub trait WindowEmbedder {
    fn embed_imu(&self, imu: &[ImuSequence], starts: &[f64], len_s: f64) -> Result<Vec<Vec<f32>>>;
    fn embed_pose(&self, pose: &PoseSequence, starts: &[f64], len_s: f64) -> Result<Vec<Vec<f32>>>;
}

/// Window both clips, embed, build the similarity matrix and vote.
pub fn estimate_offset<E: WindowEmbedder + ?Sized>(
    embedder: &E,
    imu: &[ImuSequence],
    pose: &PoseSequence,
    cfg: &SyncConfig,
) -> Result<OffsetEstimate> {
    cfg.validate()?;
    let short = imu.iter().map(|s| s.duration_s()).fold(f64::INFINITY, f64::min).min(pose.duration_s());
    if short + 1e-9 < cfg.clip_len_s {
        return Err(Error::range("stream", format!("{short:.3} s is shorter than the {} s clip", cfg.clip_len_s)));
    }
    let starts = crate::data::window_starts(cfg.clip_len_s, cfg.window_len_s, cfg.stride_s)?;
    let a = embedder.embed_imu(imu, &starts, cfg.window_len_s)?;
    let b = embedder.embed_pose(pose, &starts, cfg.window_len_s)?;
    vote_offset(&similarity_matrix(&a, &b)?, cfg)
}

/// Global embeddings from a trained model.
pub struct ModelEmbedder<'a> {
    pub model: &'a Model,
    pub params: &'a ParamStore<f32>,
    pub layout: &'a SensorLayout,
    pub present: Option<Vec<bool>>,
}

impl WindowEmbedder for ModelEmbedder<'_> {
    fn embed_imu(&self, imu: &[ImuSequence], starts: &[f64], len_s: f64) -> Result<Vec<Vec<f32>>> {
        let f = self.model.spec.encoder.frames;
        starts
            .iter()
            .map(|&s| {
                let w = imu_window(imu, self.layout, s, len_s, f)?;
                Ok(self.model.embed_imu(self.params, &w, self.present.as_deref())?.global)
            })
            .collect()
    }

    fn embed_pose(&self, pose: &PoseSequence, starts: &[f64], len_s: f64) -> Result<Vec<Vec<f32>>> {
        let f = self.model.spec.encoder.frames;
        starts
            .iter()
            .map(|&s| {
                let (parts, _) = pose_window(pose, self.layout, s, len_s, f)?;
                Ok(self.model.embed_pose(self.params, &parts)?.global)
            })
            .collect()
    }
}

/// Angular velocity (rad/s, world frame) of each sensor's mount segment,
/// derived from pixel-space joints; `frames × N`.
pub fn pose_angular_velocity(pose: &PoseSequence, layout: &SensorLayout) -> Result<Mat<f32>> {
    pose.validate()?;
    let j = pose.filled();
    let f = j.rows;
    if f < 2 {
        return Err(Error::range("pose", "needs at least two frames"));
    }
    let mut out = Mat::zeros(f, layout.len());
    for n in 0..layout.len() {
        let (parent, child) = layout.mount_segment(n);
        if parent == child {
            continue;
        }
        // Pixel y points down; flip it back.
        let angle = |r: usize| {
            let dx = (j.at(r, 2 * child) - j.at(r, 2 * parent)) as f64;
            let dy = (j.at(r, 2 * child + 1) - j.at(r, 2 * parent + 1)) as f64;
            libm::atan2(-dy, dx)
        };
        for r in 0..f {
            let (a, b) = (r.saturating_sub(1), (r + 1).min(f - 1));
            let w = wrap_angle(angle(b) - angle(a)) * pose.fps / (b - a) as f64;
            out.set(r, n, w as f32);
        }
    }
    Ok(out)
}

/// Lag `s` (in samples) maximizing the normalized cross-correlation of
/// `b[i]` against `a[i + s]` over `|s| ≤ max_lag`; ties go to the smallest |s|.
/// Lags overlapping less than half of the shorter signal are skipped, since
/// a short overlap of periodic motion can correlate almost perfectly by chance.
pub fn crosscorr_oracle(a: &[f64], b: &[f64], max_lag: usize) -> Result<isize> {
    let var = |x: &[f64]| {
        let m = x.iter().sum::<f64>() / x.len().max(1) as f64;
        x.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
    };
    if a.len() < 2 || b.len() < 2 || !(var(a) > 0.0) || !(var(b) > 0.0) {
        return Err(Error::range("cross-correlation input", "zero variance or too short"));
    }
    let mut best: Option<(f64, isize)> = None;
    let m = max_lag as isize;
    for s in -m..=m {
        let pairs: Vec<(f64, f64)> = (0..b.len() as isize)
            .filter_map(|i| {
                let k = i + s;
                (k >= 0 && (k as usize) < a.len()).then(|| (a[k as usize], b[i as usize]))
            })
            .collect();
        if pairs.len() < 2 || 2 * pairs.len() < a.len().min(b.len()) {
            continue;
        }
        let n = pairs.len() as f64;
        let (ma, mb) = (pairs.iter().map(|p| p.0).sum::<f64>() / n, pairs.iter().map(|p| p.1).sum::<f64>() / n);
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for &(x, y) in &pairs {
            sab += (x - ma) * (y - mb);
            saa += (x - ma) * (x - ma);
            sbb += (y - mb) * (y - mb);
        }
        if !(saa > 0.0 && sbb > 0.0) {
            continue;
        }
        let r = sab / libm::sqrt(saa * sbb);
        let better = match best {
            None => true,
            Some((br, bs)) => r > br || (r == br && s.abs() < bs.abs()),
        };
        if better {
            best = Some((r, s));
        }
    }
    best.map(|b| b.1).ok_or(Error::Empty("overlapping lags"))
}

/// Reference embedder built from physics alone: the IMU side is each sensor's
/// gyroscope rate, the pose side the angular velocity of the same segment,
/// each z-scored per sensor, concatenated and L2-normalized.
#[derive(Debug, Clone)]
pub struct PhysicsEmbedder<'a> {
    pub layout: &'a SensorLayout,
    pub frames: usize,
}

fn physics_vector(blocks: &[Vec<f64>]) -> Vec<f32> {
    let mut v: Vec<f64> = Vec::with_capacity(blocks.iter().map(Vec::len).sum());
    for b in blocks {
        let m = b.iter().sum::<f64>() / b.len() as f64;
        let sd = libm::sqrt(b.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / b.len() as f64);
        v.extend(b.iter().map(|x| if sd > 1e-12 { (x - m) / sd } else { 0.0 }));
    }
    let n = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    v.iter().map(|x| if n > 0.0 { (x / n) as f32 } else { 0.0 }).collect()
}

impl WindowEmbedder for PhysicsEmbedder<'_> {
    fn embed_imu(&self, imu: &[ImuSequence], starts: &[f64], len_s: f64) -> Result<Vec<Vec<f32>>> {
        starts
            .iter()
            .map(|&s| {
                let w = imu_window(imu, self.layout, s, len_s, self.frames)?;
                let blocks: Vec<Vec<f64>> = w.iter().map(|m| (0..m.rows).map(|r| m.at(r, GYRO_Z) as f64).collect()).collect();
                Ok(physics_vector(&blocks))
            })
            .collect()
    }

    fn embed_pose(&self, pose: &PoseSequence, starts: &[f64], len_s: f64) -> Result<Vec<Vec<f32>>> {
        let omega = pose_angular_velocity(pose, self.layout)?;
        starts
            .iter()
            .map(|&s| {
                let w = resample(&omega, pose.fps, pose.t0_s, s, len_s, self.frames)?;
                let blocks: Vec<Vec<f64>> = (0..w.cols).map(|c| (0..w.rows).map(|r| w.at(r, c) as f64).collect()).collect();
                Ok(physics_vector(&blocks))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pick {
    pub index: usize,
    pub score: f64,
    /// Another candidate had the same score.
    pub tied: bool,
}

/// Highest-cosine candidate; ties go to the lowest index and are flagged.
pub fn argmax_cosine(query: &[f32], candidates: &[Vec<f32>]) -> Result<Pick> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidates"));
    }
    let s = similarity_matrix(&[query.to_vec()], candidates)?;
    let row = s.row(0);
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    Ok(Pick {
        index: best,
        score: row[best] as f64,
        tied: row.iter().enumerate().any(|(i, &v)| i != best && v == row[best]),
    })
}

/// Person whose global pose embedding best matches a global IMU embedding.
pub fn localize_subject(imu_global: &[f32], people: &[Vec<f32>]) -> Result<Pick> {
    argmax_cosine(imu_global, people)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartCandidate {
    pub person: usize,
    pub part: usize,
    pub embedding: Vec<f32>,
}

/// `(person, part)` whose local pose embedding best matches a local IMU embedding.
pub fn localize_part(imu_local: &[f32], candidates: &[PartCandidate]) -> Result<(usize, usize, Pick)> {
    let embs: Vec<Vec<f32>> = candidates.iter().map(|c| c.embedding.clone()).collect();
    let p = argmax_cosine(imu_local, &embs)?;
    Ok((candidates[p.index].person, candidates[p.index].part, p))
}

/// Label of the most cosine-similar training embedding for each query.
pub fn har_1nn(train: &[Vec<f32>], labels: &[u32], queries: &[Vec<f32>]) -> Result<Vec<u32>> {
    if train.is_empty() {
        return Err(Error::Empty("1-NN training set"));
    }
    if train.len() != labels.len() {
        return Err(Error::shape("har_1nn", format!("{} labels", train.len()), format!("{}", labels.len())));
    }
    queries.iter().map(|q| Ok(labels[argmax_cosine(q, train)?.index])).collect()
}

pub fn accuracy(pred: &[u32], truth: &[u32]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 5,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    /// Test accuracy after the last epoch.
    pub accuracy: f64,
    /// Test accuracy after each epoch.
    pub epoch_accuracy: Vec<f64>,
    /// `confusion[true][predicted]` after the last epoch.
    pub confusion: Vec<Vec<usize>>,
}

fn labels_of(samples: &[PairedSample], classes: usize) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| match s.label {
            Some(l) if (l as usize) < classes => Ok(l as usize),
            Some(l) => Err(Error::range("label", format!("{l} with {classes} classes"))),
            None => Err(Error::Empty("label")),
        })
        .collect()
}

fn head_predict(model: &Model, ps: &ParamStore<f32>, head: &Linear, hs: &ParamStore<f32>, samples: &[PairedSample]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let refs: Vec<&PairedSample> = chunk.iter().collect();
        let logits = head.forward(hs, model.imu_global(ps, &refs)?.unit())?;
        for r in 0..logits.rows {
            let row = logits.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Softmax cross-entropy head on the global IMU embedding, trained jointly with
/// the IMU tower. The head starts at zero weights with the log class prior as
/// bias, so zero epochs predict the majority training class.
pub fn har_finetune(
    model: &Model,
    ps: &mut ParamStore<f32>,
    train: &[PairedSample],
    test: &[PairedSample],
    classes: usize,
    cfg: &FinetuneConfig,
) -> Result<FinetuneReport> {
    let y = labels_of(train, classes)?;
    let y_test = labels_of(test, classes)?;
    let mut counts = vec![0usize; classes];
    y.iter().for_each(|&c| counts[c] += 1);
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::Config("fine-tuning needs at least two classes in the training labels".into()));
    }
    if cfg.batch_size == 0 || test.is_empty() {
        return Err(Error::Empty("fine-tuning batch or test set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut hs = ParamStore::<f32>::new();
    let head = Linear::new(&mut hs, "head", model.spec.encoder.proj_dim, classes, true, &mut rng)?;
    hs.get_mut(head.w).iter_mut().for_each(|v| *v = 0.0);
    if let Some(b) = head.b {
        for (v, &c) in hs.get_mut(b).iter_mut().zip(&counts) {
            *v = libm::log((c as f64 + 1e-3) / y.len() as f64) as f32;
        }
    }
    let mut opt_m = Adam::new(ps, cfg.learning_rate, (0.9, 0.999))?;
    let mut opt_h = Adam::new(&hs, cfg.learning_rate, (0.9, 0.999))?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_accuracy = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let refs: Vec<&PairedSample> = idx.iter().map(|&i| &train[i]).collect();
            let pass = model.imu_global(ps, &refs)?;
            let logits = head.forward(&hs, pass.unit())?;
            let k = refs.len() as f32;
            let mut dl = logits.clone();
            for (r, &i) in idx.iter().enumerate() {
                let row = dl.row_mut(r);
                let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let z: f32 = row.iter().map(|v| libm::expf(v - m)).sum();
                row.iter_mut().for_each(|v| *v = libm::expf(*v - m) / z / k);
                row[y[i]] -= 1.0 / k;
            }
            let mut gm = ps.zero_grads();
            let mut gh = hs.zero_grads();
            let du = head.backward(&hs, &mut gh, pass.unit(), &dl);
            model.imu_global_backward(ps, &mut gm, &pass, &du);
            opt_h.step(&mut hs, &gh)?;
            opt_m.step(ps, &gm)?;
        }
        let pred = head_predict(model, ps, &head, &hs, test)?;
        epoch_accuracy.push(pred.iter().zip(&y_test).filter(|(a, b)| a == b).count() as f64 / test.len() as f64);
    }
    let pred = head_predict(model, ps, &head, &hs, test)?;
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&p, &t) in pred.iter().zip(&y_test) {
        confusion[t][p] += 1;
    }
    let accuracy = pred.iter().zip(&y_test).filter(|(a, b)| a == b).count() as f64 / test.len() as f64;
    Ok(FinetuneReport {
        accuracy,
        epoch_accuracy,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{builtin_families, default_layout, gen_sequence, sample_params, NoiseConfig, SubjectTraits, SyncPair};
    use crate::data::SequencePair;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: Vec<f32>) -> Vec<f32> {
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn random_units(n: usize, d: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| unit((0..d).map(|_| r.random_range(-1.0..1.0)).collect())).collect()
    }

    #[test]
    fn similarity_examples() {
        let q = random_units(3, 4, 0);
        let s = similarity_matrix(&q, &q).unwrap();
        for i in 0..3 {
            assert!((s.at(i, i) - 1.0).abs() < 1e-6);
        }
        let e = |i: usize| (0..4).map(|k| if k == i { 1.0 } else { 0.0 }).collect::<Vec<f32>>();
        let z = similarity_matrix(&[e(0), e(1)], &[e(2), e(3)]).unwrap();
        assert!(z.data.iter().all(|&v| v == 0.0));
        let r = random_units(4, 4, 1);
        let s = similarity_matrix(&q, &r).unwrap();
        for p in 0..3 {
            for c in 0..4 {
                let want: f32 = q[p].iter().zip(&r[c]).map(|(a, b)| a * b).sum();
                assert!((s.at(p, c) - want).abs() < 1e-6);
            }
        }
        assert!(similarity_matrix(&q, &random_units(2, 5, 2)).is_err());
    }

    #[test]
    fn recall_examples() {
        let id = Mat::from_fn(4, 4, |i, j| if i == j { 1.0 } else { 0.0 });
        let truth = [0, 1, 2, 3];
        assert_eq!(recall_at_k(&id, &truth, 1).unwrap(), 1.0);
        let rev = Mat::from_fn(4, 4, |i, j| if i == j { -1.0 } else { 0.5 });
        assert_eq!(recall_at_k(&rev, &truth, 1).unwrap(), 0.0);
        assert!(recall_at_k(&id, &truth, 0).is_err());
        // Ties go to the smaller reference index.
        let tie = Mat::from_fn(2, 2, |_, _| 0.3);
        assert_eq!(recall_at_k(&tie, &[0, 1], 1).unwrap(), 0.5);
    }

    #[test]
    fn recall_matches_sort_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let s = Mat::from_fn(5, 5, |_, _| r.random_range(-1.0f32..1.0));
            let truth: Vec<usize> = (0..5).map(|_| r.random_range(0..5)).collect();
            for k in 1..=5 {
                let mut hits = 0;
                for p in 0..5 {
                    let mut order: Vec<usize> = (0..5).collect();
                    order.sort_by(|&a, &b| s.at(p, b).total_cmp(&s.at(p, a)).then(a.cmp(&b)));
                    if order[..k].contains(&truth[p]) {
                        hits += 1;
                    }
                }
                assert_eq!(recall_at_k(&s, &truth, k).unwrap(), hits as f64 / 5.0);
            }
        }
    }

    #[test]
    fn retrieval_reports_both_directions() {
        let a = random_units(10, 6, 4);
        let m = retrieval(&a, &a, &[1, 5, 10], 64).unwrap();
        assert_eq!(m.imu_to_pose, vec![1.0, 1.0, 1.0]);
        assert_eq!(m.pose_to_imu.len(), 3);
    }

    #[test]
    fn offset_votes_identity_matrix() {
        let cfg = SyncConfig {
            top_k: 1,
            ..SyncConfig::default()
        };
        let d = Mat::from_fn(76, 76, |p, q| if p == q + 5 { 1.0 } else { 0.1 });
        let e = vote_offset(&d, &cfg).unwrap();
        assert!((e.delta_hat_s - 1.0).abs() < 1e-12);
        let total: f64 = e.votes.iter().filter(|v| (v.imu_window as i64 - v.pose_window as i64).abs() <= 35).map(|v| v.weight).sum();
        assert!((e.histogram.values().sum::<f64>() - total).abs() < 1e-9);
    }

    #[test]
    fn offset_ties_prefer_small_offsets() {
        let cfg = SyncConfig {
            top_k: 1,
            ..SyncConfig::default()
        };
        let d = Mat::from_fn(3, 3, |_, _| 0.5);
        assert_eq!(vote_offset(&d, &cfg).unwrap().delta_hat_s, 0.0);
    }

    fn clip_pair(seed: u64, duration: f64, noise: &NoiseConfig) -> SequencePair {
        let fam = &builtin_families()[(seed % 6) as usize];
        let p = sample_params(fam, 0, &SubjectTraits::sample(seed), noise, 0.1, seed);
        let (pose, imu) = gen_sequence(&p, &default_layout(), duration).unwrap();
        SequencePair {
            id: format!("c{seed}"),
            subject_id: "s".into(),
            label: Some(0),
            imu,
            pose,
        }
    }

    #[test]
    fn window_count_is_76() {
        assert_eq!(crate::data::window_starts(20.0, 5.0, 0.2).unwrap().len(), 76);
    }

    #[test]
    fn physics_sync_recovers_lag() {
        let layout = default_layout();
        let pair = clip_pair(1, 40.0, &NoiseConfig::noiseless());
        let base = SyncPair::new(pair, 10.0, 20.0).unwrap();
        let emb = PhysicsEmbedder { layout: &layout, frames: 50 };
        let cfg = SyncConfig::default();
        for lag in [0.0, 3.0, -2.4] {
            let sp = base.inject_offset(lag).unwrap();
            let (imu, pose) = sp.clips().unwrap();
            let e = estimate_offset(&emb, &imu, &pose, &cfg).unwrap();
            assert!((e.delta_hat_s - lag).abs() < 1e-9, "{lag}: {}", e.delta_hat_s);
        }
    }

    #[test]
    fn crosscorr_examples() {
        let a: Vec<f64> = (0..200).map(|i| ((i as f64) * 0.37).sin() + ((i as f64) * 0.051).cos()).collect();
        assert_eq!(crosscorr_oracle(&a, &a, 20).unwrap(), 0);
        let b: Vec<f64> = a[7..].to_vec();
        assert_eq!(crosscorr_oracle(&a, &b, 20).unwrap(), 7);
        assert!(crosscorr_oracle(&[1.0; 10], &a, 3).is_err());
    }

    #[test]
    fn crosscorr_on_gyro_matches_injected_lag() {
        let layout = default_layout();
        let pair = clip_pair(2, 40.0, &NoiseConfig::noiseless());
        let base = SyncPair::new(pair, 10.0, 20.0).unwrap();
        for lag in [0.0, 2.0, -4.4] {
            let sp = base.inject_offset(lag).unwrap();
            let (imu, pose) = sp.clips().unwrap();
            let w = pose_angular_velocity(&pose, &layout).unwrap();
            let gyro = resample(&imu[0].samples, imu[0].sample_rate_hz, 0.0, 0.0, 20.0, pose.frames()).unwrap();
            let a: Vec<f64> = (0..gyro.rows).map(|r| gyro.at(r, GYRO_Z) as f64).collect();
            let b: Vec<f64> = (0..w.rows).map(|r| w.at(r, 0) as f64).collect();
            let s = crosscorr_oracle(&a, &b, 7 * 25).unwrap();
            assert!((s as f64 - lag * 25.0).abs() <= 1.0, "{lag}: {s}");
        }
    }

    #[test]
    fn localization_examples() {
        let q = unit(vec![1.0, 0.2, 0.0]);
        assert_eq!(localize_subject(&q, &[vec![0.0, 0.0, 1.0]]).unwrap().index, 0);
        let cands = vec![vec![0.0, 0.0, 1.0], q.clone(), unit(vec![-0.2, 1.0, 0.0])];
        assert_eq!(localize_subject(&q, &cands).unwrap().index, 1);
        let parts = vec![
            PartCandidate {
                person: 0,
                part: 2,
                embedding: vec![0.0, 0.0, 1.0],
            },
            PartCandidate {
                person: 1,
                part: 3,
                embedding: q.clone(),
            },
        ];
        assert_eq!(localize_part(&q, &parts).unwrap().0, 1);
        assert_eq!(localize_part(&q, &parts).unwrap().1, 3);
        let tie = localize_subject(&q, &[q.clone(), q.clone()]).unwrap();
        assert!(tie.tied && tie.index == 0);
        assert!(localize_subject(&q, &[]).is_err());
    }

    #[test]
    fn nearest_neighbour_examples() {
        let train = random_units(20, 5, 8);
        let labels: Vec<u32> = (0..20).map(|i| i % 3).collect();
        assert_eq!(har_1nn(&train, &labels, &train[4..5]).unwrap(), vec![labels[4]]);
        let queries = random_units(20, 5, 9);
        let got = har_1nn(&train, &labels, &queries).unwrap();
        for (q, g) in queries.iter().zip(&got) {
            let mut best = (f32::MIN, 0);
            for (i, t) in train.iter().enumerate() {
                let s: f32 = q.iter().zip(t).map(|(a, b)| a * b).sum();
                if s > best.0 {
                    best = (s, i);
                }
            }
            assert_eq!(*g, labels[best.1]);
        }
        let a = [vec![1.0, 0.0], vec![0.9, 0.1]];
        let b = vec![vec![0.0, 1.0], vec![0.1, 0.9]];
        let train: Vec<Vec<f32>> = a.iter().chain(&b).cloned().collect();
        let pred = har_1nn(&train, &[0, 0, 1, 1], &[vec![0.95, 0.0], vec![0.0, 0.8]]).unwrap();
        assert_eq!(accuracy(&pred, &[0, 1]), 1.0);
    }

    fn labelled(spec: &crate::model::ModelSpec, n: usize, seed: u64) -> Vec<PairedSample> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let mut s = crate::model::tests::sample(spec, &mut r, i);
                let c = (i % 2) as u32;
                let sign = if c == 0 { 1.0 } else { -1.0 };
                for w in &mut s.imu_windows {
                    for row in 0..w.rows {
                        let v = w.at(row, 0) * 0.3 + 2.0 * sign;
                        w.set(row, 0, v);
                    }
                }
                s.label = Some(c);
                s
            })
            .collect()
    }

    fn tiny_model() -> (Model, ParamStore<f32>) {
        let mut ps = ParamStore::new();
        let m = Model::new(&mut ps, crate::model::tests::tiny_spec(2), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (m, ps)
    }

    #[test]
    fn finetune_separates_easy_classes() {
        let (m, mut ps) = tiny_model();
        let spec = m.spec.clone();
        let r = har_finetune(&m, &mut ps, &labelled(&spec, 40, 1), &labelled(&spec, 20, 2), 2, &FinetuneConfig::default()).unwrap();
        assert!(r.accuracy >= 0.99, "{r:?}");
        assert_eq!(r.epoch_accuracy.len(), 5);
    }

    #[test]
    fn zero_epochs_predict_the_prior() {
        let (m, mut ps) = tiny_model();
        let spec = m.spec.clone();
        let mut train = labelled(&spec, 9, 1);
        train[1].label = Some(0);
        let cfg = FinetuneConfig { epochs: 0, ..FinetuneConfig::default() };
        let r = har_finetune(&m, &mut ps, &train, &labelled(&spec, 10, 2), 2, &cfg).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.confusion, vec![vec![5, 0], vec![5, 0]]);
        let one_class: Vec<PairedSample> = train.iter().filter(|s| s.label == Some(0)).cloned().collect();
        assert!(har_finetune(&m, &mut ps, &one_class, &train, 2, &cfg).is_err());
    }

    #[test]
    fn permuted_labels_permute_the_confusion() {
        let (m, ps) = tiny_model();
        let spec = m.spec.clone();
        let (train, test) = (labelled(&spec, 20, 1), labelled(&spec, 10, 2));
        let flip = |v: &[PairedSample]| -> Vec<PairedSample> {
            v.iter().cloned().map(|mut s| { s.label = s.label.map(|l| 1 - l); s }).collect()
        };
        let cfg = FinetuneConfig { epochs: 1, ..FinetuneConfig::default() };
        let a = har_finetune(&m, &mut ps.clone(), &train, &test, 2, &cfg).unwrap();
        let b = har_finetune(&m, &mut ps.clone(), &flip(&train), &flip(&test), 2, &cfg).unwrap();
        assert_eq!(a.confusion[0][0], b.confusion[1][1]);
        assert_eq!(a.confusion[0][1], b.confusion[1][0]);
        assert_eq!(a.confusion[1][1], b.confusion[0][0]);
    }

    proptest! {
        #[test]
        fn recall_is_monotone_in_k(seed in 0u64..500, q in 1usize..8) {
            let a = random_units(q, 4, seed);
            let b = random_units(q, 4, seed + 1000);
            let s = similarity_matrix(&a, &b).unwrap();
            let truth: Vec<usize> = (0..q).collect();
            let mut prev = 0.0;
            for k in 1..=q {
                let r = recall_at_k(&s, &truth, k).unwrap();
                prop_assert!(r >= prev);
                prev = r;
            }
            prop_assert_eq!(prev, 1.0);
        }

        #[test]
        fn subject_choice_survives_permutation(seed in 0u64..500, n in 2usize..6) {
            let q = random_units(1, 4, seed).remove(0);
            let c = random_units(n, 4, seed + 7);
            let pick = localize_subject(&q, &c).unwrap();
            let mut rev = c.clone();
            rev.reverse();
            let p2 = localize_subject(&q, &rev).unwrap();
            prop_assert_eq!(n - 1 - p2.index, pick.index);
        }

        #[test]
        fn histogram_conserves_weight(seed in 0u64..200) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let d = Mat::from_fn(12, 12, |_, _| r.random_range(-1.0f32..1.0));
            let cfg = SyncConfig { offset_range_s: [-100.0, 100.0], ..SyncConfig::default() };
            let e = vote_offset(&d, &cfg).unwrap();
            let total: f64 = e.votes.iter().map(|v| v.weight).sum();
            prop_assert!((e.histogram.values().sum::<f64>() - total).abs() < 1e-6);
            prop_assert_eq!(e.votes.len(), 2 * 12 * 5);
        }
    }
}
