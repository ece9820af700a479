//! The full two-tower model: encoders, aggregators, projection heads, learned
//! temperature, absent-sensor vectors and the masked token predictor.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::PairedSample;
use crate::encoders::{mean_pool, mean_pool_backward, Aggregator, AggregatorCache, Branch, BranchCache, EncoderConfig, Projected, Projection};
use crate::error::{Error, Result};
use crate::losses::{align_loss, total_loss, AlignInputs, LossBreakdown, LossConfig, MaskSet, MtpOutput, MtpPredictor};
use crate::nn::{grad_check, GradCheckReport, Grads, Init, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Mat;

/// Everything needed to rebuild the parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub encoder: EncoderConfig,
    pub imu_channels: usize,
    /// Input width `2Jⁿ` of each body part, layout order.
    pub part_widths: Vec<usize>,
    pub tau_init: f64,
    pub mtp_heads: usize,
    pub mtp_hidden: usize,
}

impl ModelSpec {
    pub fn sensors(&self) -> usize {
        self.part_widths.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub imu: Vec<Branch>,
    pub part: Vec<Branch>,
    pub imu_agg: Aggregator,
    pub pose_agg: Aggregator,
    pub token_imu: Projection,
    pub local_imu: Projection,
    pub global_imu: Projection,
    pub token_pose: Projection,
    pub local_pose: Projection,
    pub global_pose: Projection,
    /// Stand-in local embedding per sensor, `N × D`.
    pub absent: ParamId,
    pub log_tau: ParamId,
    pub mtp: MtpPredictor,
}

/// Unit-norm shared-space embeddings of one modality for one window.
/// Absent sensors have no local or token entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityEmbedding {
    pub global: Vec<f32>,
    pub locals: Vec<Option<Vec<f32>>>,
    pub tokens: Vec<Option<Mat<f32>>>,
}

struct Tower<T> {
    tokens: Vec<Mat<T>>,
    caches: Vec<BranchCache<T>>,
    locals: Vec<Vec<T>>,
    global: Vec<T>,
    agg: AggregatorCache<T>,
}

impl Model {
    pub fn new<T: Real, R: Rng + ?Sized>(ps: &mut ParamStore<T>, spec: ModelSpec, rng: &mut R) -> Result<Self> {
        let cfg = &spec.encoder;
        cfg.validate()?;
        let n = spec.sensors();
        if n == 0 {
            return Err(Error::Empty("sensor layout"));
        }
        if !(spec.tau_init > 0.0) {
            return Err(Error::Config(format!("tau_init {} must be positive", spec.tau_init)));
        }
        let imu = if cfg.per_sensor_imu {
            (0..n)
                .map(|s| Branch::new(ps, &format!("imu{s}"), spec.imu_channels, None, cfg, rng))
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![Branch::new(ps, "imu", spec.imu_channels, None, cfg, rng)?]
        };
        let part = if cfg.shared_part_encoder {
            let w = spec.part_widths[0];
            if spec.part_widths.iter().any(|&x| x != w) {
                return Err(Error::Config(format!(
                    "shared part encoder needs equal part widths, got {:?}",
                    spec.part_widths
                )));
            }
            vec![Branch::new(ps, "part", w, Some(n), cfg, rng)?]
        } else {
            spec.part_widths
                .iter()
                .enumerate()
                .map(|(s, &w)| Branch::new(ps, &format!("part{s}"), w, None, cfg, rng))
                .collect::<Result<Vec<_>>>()?
        };
        let (d, g, p) = (cfg.dim, cfg.global_dim, cfg.proj_dim);
        Ok(Model {
            imu,
            part,
            imu_agg: Aggregator::new(ps, "imu_agg", n, cfg, rng)?,
            pose_agg: Aggregator::new(ps, "pose_agg", n, cfg, rng)?,
            token_imu: Projection::new(ps, "proj.token_imu", d, p, rng)?,
            local_imu: Projection::new(ps, "proj.local_imu", d, p, rng)?,
            global_imu: Projection::new(ps, "proj.global_imu", g, p, rng)?,
            token_pose: Projection::new(ps, "proj.token_pose", d, p, rng)?,
            local_pose: Projection::new(ps, "proj.local_pose", d, p, rng)?,
            global_pose: Projection::new(ps, "proj.global_pose", g, p, rng)?,
            absent: ps.add("absent", &[n, d], Init::TruncNormal(0.02), rng)?,
            log_tau: ps.add("log_tau", &[1], Init::Const(libm::log(spec.tau_init)), rng)?,
            mtp: MtpPredictor::new(ps, "mtp", n, cfg.tokens(), d, spec.mtp_heads, spec.mtp_hidden, rng)?,
            spec,
        })
    }

    pub fn sensors(&self) -> usize {
        self.spec.sensors()
    }

    pub fn tokens(&self) -> usize {
        self.spec.encoder.tokens()
    }

    pub fn tau<T: Real>(&self, ps: &ParamStore<T>) -> T {
        ps.get(self.log_tau)[0].exp()
    }

    fn imu_branch(&self, n: usize) -> &Branch {
        &self.imu[if self.imu.len() == 1 { 0 } else { n }]
    }

    fn part_branch(&self, n: usize) -> (&Branch, Option<usize>) {
        if self.part.len() == 1 {
            (&self.part[0], Some(n))
        } else {
            (&self.part[n], None)
        }
    }

    fn check_sample(&self, s: &PairedSample) -> Result<()> {
        let n = self.sensors();
        if s.imu_windows.len() != n || s.part_windows.len() != n {
            return Err(Error::shape(
                "model",
                format!("{n} sensors"),
                format!("{} imu / {} part windows", s.imu_windows.len(), s.part_windows.len()),
            ));
        }
        Ok(())
    }

    /// Encode one tower. `present = None` means every sensor observed.
    fn tower<T: Real>(&self, ps: &ParamStore<T>, windows: &[Mat<f32>], imu: bool, present: Option<&[bool]>) -> Result<Tower<T>> {
        let n = self.sensors();
        let d = self.spec.encoder.dim;
        let mut tokens = Vec::with_capacity(n);
        let mut caches = Vec::with_capacity(n);
        let mut locals = Vec::with_capacity(n);
        let mut agg_in = Vec::with_capacity(n);
        for (s, w) in windows.iter().enumerate() {
            let x: Mat<T> = w.cast();
            let (z, c) = if imu {
                self.imu_branch(s).forward(ps, &x, None)?
            } else {
                let (b, part) = self.part_branch(s);
                b.forward(ps, &x, part)?
            };
            let l = mean_pool(&z);
            if present.is_none_or(|p| p[s]) {
                agg_in.push(l.clone());
            } else {
                agg_in.push(ps.get(self.absent)[s * d..(s + 1) * d].to_vec());
            }
            tokens.push(z);
            caches.push(c);
            locals.push(l);
        }
        let agg = if imu { &self.imu_agg } else { &self.pose_agg };
        let (global, agg) = agg.forward(ps, &agg_in)?;
        Ok(Tower {
            tokens,
            caches,
            locals,
            global,
            agg,
        })
    }

    fn tower_sparse<T: Real>(&self, ps: &ParamStore<T>, windows: &[Mat<f32>], present: &[bool]) -> Result<ModalityEmbedding> {
        // Absent sensors are never encoded: their inputs may be missing.
        let n = self.sensors();
        let d = self.spec.encoder.dim;
        let mut locals = vec![None; n];
        let mut tokens = vec![None; n];
        let mut agg_in = Vec::with_capacity(n);
        for s in 0..n {
            if present[s] {
                let (z, _) = self.imu_branch(s).forward(ps, &windows[s].cast(), None)?;
                let l = mean_pool(&z);
                agg_in.push(l.clone());
                let pl = self.local_imu.forward(ps, Mat::from_vec(1, d, l)?)?;
                locals[s] = Some(pl.unit.data.iter().map(|v| v.f64() as f32).collect());
                tokens[s] = Some(self.token_imu.forward(ps, z)?.unit.cast());
            } else {
                agg_in.push(ps.get(self.absent)[s * d..(s + 1) * d].to_vec());
            }
        }
        let (g, _) = self.imu_agg.forward(ps, &agg_in)?;
        let gp = self.global_imu.forward(ps, Mat::from_vec(1, g.len(), g)?)?;
        Ok(ModalityEmbedding {
            global: gp.unit.data.iter().map(|v| v.f64() as f32).collect(),
            locals,
            tokens,
        })
    }

    /// IMU-side embedding; `windows[n]` is ignored when sensor `n` is absent.
    pub fn embed_imu(&self, ps: &ParamStore<f32>, windows: &[Mat<f32>], present: Option<&[bool]>) -> Result<ModalityEmbedding> {
        let n = self.sensors();
        let all = vec![true; n];
        let present = present.unwrap_or(&all);
        if windows.len() != n || present.len() != n {
            return Err(Error::shape("embed_imu", format!("{n} sensors"), format!("{}", windows.len())));
        }
        if !present.iter().any(|&p| p) {
            return Err(Error::Empty("present sensors"));
        }
        self.tower_sparse(ps, windows, present)
    }

    pub fn embed_pose(&self, ps: &ParamStore<f32>, parts: &[Mat<f32>]) -> Result<ModalityEmbedding> {
        let n = self.sensors();
        if parts.len() != n {
            return Err(Error::shape("embed_pose", format!("{n} parts"), format!("{}", parts.len())));
        }
        let t = self.tower(ps, parts, false, None)?;
        let d = self.spec.encoder.dim;
        let mut locals = Vec::with_capacity(n);
        let mut tokens = Vec::with_capacity(n);
        for (z, l) in t.tokens.into_iter().zip(t.locals) {
            locals.push(Some(self.local_pose.forward(ps, Mat::from_vec(1, d, l)?)?.unit.data));
            tokens.push(Some(self.token_pose.forward(ps, z)?.unit));
        }
        let g = self.global_pose.forward(ps, Mat::from_vec(1, t.global.len(), t.global)?)?;
        Ok(ModalityEmbedding {
            global: g.unit.data,
            locals,
            tokens,
        })
    }

    /// Loss on a batch and, when `grads` is given, its gradient.
    ///
    /// `presence[i][n]` marks observed IMU sensors; `exclude` is a `K × K`
    /// near-duplicate mask; `masks` holds one MTP mask per sample (required
    /// when the MTP weight is positive).
    #[allow(clippy::too_many_arguments)]
    pub fn batch_loss<T: Real>(
        &self,
        ps: &ParamStore<T>,
        samples: &[&PairedSample],
        presence: Option<&[Vec<bool>]>,
        exclude: Option<Vec<bool>>,
        masks: Option<&[MaskSet]>,
        cfg: &LossConfig,
        grads: Option<&mut Grads<T>>,
    ) -> Result<LossBreakdown> {
        let k = samples.len();
        let n = self.sensors();
        let t = self.tokens();
        let d = self.spec.encoder.dim;
        if k == 0 {
            return Err(Error::Empty("batch"));
        }
        for s in samples {
            self.check_sample(s)?;
        }
        if let Some(p) = presence {
            if p.len() != k || p.iter().any(|r| r.len() != n || !r.iter().any(|&b| b)) {
                return Err(Error::shape("batch", format!("{k}×{n} presence with a sensor per row"), "invalid mask"));
            }
        }
        let [_, _, _, w_mtp] = cfg.weights();
        let mtp_on = w_mtp > 0.0;
        if mtp_on && masks.is_none_or(|m| m.len() != k) {
            return Err(Error::Config(format!("{k} MTP masks required")));
        }

        let mut imu = Vec::with_capacity(k);
        let mut pose = Vec::with_capacity(k);
        for (i, s) in samples.iter().enumerate() {
            imu.push(self.tower(ps, &s.imu_windows, true, presence.map(|p| p[i].as_slice()))?);
            pose.push(self.tower(ps, &s.part_windows, false, None)?);
        }

        let stack_global = |ts: &[Tower<T>]| Mat {
            rows: k,
            cols: ts[0].global.len(),
            data: ts.iter().flat_map(|x| x.global.iter().copied()).collect(),
        };
        let stack_local = |ts: &[Tower<T>], s: usize| Mat {
            rows: k,
            cols: d,
            data: ts.iter().flat_map(|x| x.locals[s].iter().copied()).collect(),
        };
        let stack_tokens = |ts: &[Tower<T>], s: usize| Mat {
            rows: k * t,
            cols: d,
            data: ts.iter().flat_map(|x| x.tokens[s].data.iter().copied()).collect(),
        };
        let gi = self.global_imu.forward(ps, stack_global(&imu))?;
        let gp = self.global_pose.forward(ps, stack_global(&pose))?;
        let mut li = Vec::with_capacity(n);
        let mut lp = Vec::with_capacity(n);
        let mut ti = Vec::with_capacity(n);
        let mut tp = Vec::with_capacity(n);
        for s in 0..n {
            li.push(self.local_imu.forward(ps, stack_local(&imu, s))?);
            lp.push(self.local_pose.forward(ps, stack_local(&pose, s))?);
            ti.push(self.token_imu.forward(ps, stack_tokens(&imu, s))?);
            tp.push(self.token_pose.forward(ps, stack_tokens(&pose, s))?);
        }
        let units = |v: &[Projected<T>]| v.iter().map(|p| p.unit.clone()).collect::<Vec<_>>();
        let inputs = AlignInputs {
            global_imu: gi.unit.clone(),
            global_pose: gp.unit.clone(),
            local_imu: units(&li),
            local_pose: units(&lp),
            token_imu: units(&ti),
            token_pose: units(&tp),
            tokens: t,
            presence: presence.map(|p| p.to_vec()),
            exclude,
        };
        let tau = self.tau(ps);
        let (align, ag) = align_loss(&inputs, tau, cfg)?;

        let mut mtp_outs: Vec<MtpOutput<T>> = Vec::new();
        let mut mtp = 0.0;
        if mtp_on {
            let masks = masks.unwrap_or(&[]);
            for (i, tw) in imu.iter().enumerate() {
                let o = self.mtp.forward(ps, &tw.tokens, &masks[i])?;
                mtp += o.loss.f64() / k as f64;
                mtp_outs.push(o);
            }
        }
        let br = total_loss(&align, mtp, cfg);
        if !br.total.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let Some(grads) = grads else {
            return Ok(br);
        };

        if cfg.learn_tau {
            grads.get_mut(self.log_tau)[0] += ag.log_tau;
        }
        let dgi = self.global_imu.backward(ps, grads, &gi, &ag.global_imu);
        let dgp = self.global_pose.backward(ps, grads, &gp, &ag.global_pose);
        let mut dli = Vec::with_capacity(n);
        let mut dlp = Vec::with_capacity(n);
        let mut dti = Vec::with_capacity(n);
        let mut dtp = Vec::with_capacity(n);
        for s in 0..n {
            dli.push(self.local_imu.backward(ps, grads, &li[s], &ag.local_imu[s]));
            dlp.push(self.local_pose.backward(ps, grads, &lp[s], &ag.local_pose[s]));
            dti.push(self.token_imu.backward(ps, grads, &ti[s], &ag.token_imu[s]));
            dtp.push(self.token_pose.backward(ps, grads, &tp[s], &ag.token_pose[s]));
        }
        let mtp_scale = T::of(w_mtp / k as f64);
        for i in 0..k {
            let present = |s: usize| presence.is_none_or(|p| p[i][s]);
            let dz_mtp = if mtp_on {
                let masks = masks.unwrap_or(&[]);
                Some(self.mtp.backward(ps, grads, &mtp_outs[i], &masks[i], mtp_scale, cfg.mtp_stop_grad))
            } else {
                None
            };
            for (tw, dg, dl, dt, is_imu) in [(&imu[i], &dgi, &dli, &dti, true), (&pose[i], &dgp, &dlp, &dtp, false)] {
                let agg = if is_imu { &self.imu_agg } else { &self.pose_agg };
                let dagg = agg.backward(ps, grads, &tw.agg, dg.row(i));
                for s in 0..n {
                    let mut dlocal = dl[s].row(i).to_vec();
                    if !is_imu || present(s) {
                        dlocal.iter_mut().zip(&dagg[s]).for_each(|(a, &b)| *a += b);
                    } else {
                        let ga = &mut grads.get_mut(self.absent)[s * d..(s + 1) * d];
                        ga.iter_mut().zip(&dagg[s]).for_each(|(a, &b)| *a += b);
                    }
                    let mut dz = mean_pool_backward(&dlocal, t);
                    let rows = &dt[s].data[i * t * d..(i + 1) * t * d];
                    dz.data.iter_mut().zip(rows).for_each(|(a, &b)| *a += b);
                    if is_imu {
                        if let Some(m) = &dz_mtp {
                            dz.add_assign(&m[s]);
                        }
                        self.imu_branch(s).backward(ps, grads, &tw.caches[s], &dz, None);
                    } else {
                        let (b, part) = self.part_branch(s);
                        b.backward(ps, grads, &tw.caches[s], &dz, part);
                    }
                }
            }
        }
        Ok(br)
    }
}

/// IMU towers and global projection of a batch, kept for a backward pass.
pub struct ImuGlobalPass<T> {
    towers: Vec<Tower<T>>,
    proj: Projected<T>,
}

impl<T: Real> ImuGlobalPass<T> {
    /// `K × P` unit embeddings.
    pub fn unit(&self) -> &Mat<T> {
        &self.proj.unit
    }
}

impl Model {
    /// Global IMU embeddings of a batch (all sensors present) with a cache for
    /// [`Model::imu_global_backward`].
    pub fn imu_global<T: Real>(&self, ps: &ParamStore<T>, samples: &[&PairedSample]) -> Result<ImuGlobalPass<T>> {
        if samples.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let mut towers = Vec::with_capacity(samples.len());
        for s in samples {
            self.check_sample(s)?;
            towers.push(self.tower(ps, &s.imu_windows, true, None)?);
        }
        let g = towers[0].global.len();
        let x = Mat {
            rows: samples.len(),
            cols: g,
            data: towers.iter().flat_map(|t| t.global.iter().copied()).collect(),
        };
        let proj = self.global_imu.forward(ps, x)?;
        Ok(ImuGlobalPass { towers, proj })
    }

    pub fn imu_global_backward<T: Real>(&self, ps: &ParamStore<T>, grads: &mut Grads<T>, pass: &ImuGlobalPass<T>, d_unit: &Mat<T>) {
        let t = self.tokens();
        let dg = self.global_imu.backward(ps, grads, &pass.proj, d_unit);
        for (i, tw) in pass.towers.iter().enumerate() {
            let dagg = self.imu_agg.backward(ps, grads, &tw.agg, dg.row(i));
            for (s, dl) in dagg.iter().enumerate() {
                let dz = mean_pool_backward(dl, t);
                self.imu_branch(s).backward(ps, grads, &tw.caches[s], &dz, None);
            }
        }
    }
}

/// Shape of a randomized finite-difference check of the full training loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossCheck {
    pub batch: usize,
    pub sensors: usize,
    pub tokens: usize,
    pub dim: usize,
    pub epsilon: f64,
    pub coordinates: usize,
    /// Standard deviation of the noise added to the initial parameters.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for LossCheck {
    fn default() -> Self {
        LossCheck {
            batch: 4,
            sensors: 2,
            tokens: 5,
            dim: 16,
            epsilon: 1e-3,
            coordinates: 400,
            jitter: 0.3,
            seed: 0,
        }
    }
}

/// Finite differences against backprop on `total_loss` in `f64`, with random
/// inputs, one dropped sensor, one excluded pair and MTP masks.
pub fn check_total_loss(c: &LossCheck, cfg: &LossConfig) -> Result<GradCheckReport> {
    use rand::SeedableRng;
    if c.batch < 2 || c.sensors == 0 || c.tokens == 0 {
        return Err(Error::Config(format!("loss check needs batch ≥ 2, sensors and tokens ≥ 1, got {c:?}")));
    }
    let spec = ModelSpec {
        encoder: EncoderConfig {
            dim: c.dim,
            global_dim: c.dim,
            proj_dim: c.dim,
            frames: 2 * c.tokens,
            patch_len: 2,
            conv_channels: vec![4],
            conv_kernel: 3,
            heads: 2,
            ffn_hidden: c.dim,
            blocks: 1,
            agg_hidden: c.dim,
            per_sensor_imu: true,
            shared_part_encoder: true,
        },
        imu_channels: 6,
        part_widths: vec![6; c.sensors],
        tau_init: 0.5,
        mtp_heads: 2,
        mtp_hidden: c.dim,
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(c.seed);
    let mut ps = ParamStore::<f64>::new();
    let model = Model::new(&mut ps, spec.clone(), &mut rng)?;
    ps.jitter(c.jitter, &mut rng);
    let f = spec.encoder.frames;
    let mut m = |cols: usize| Mat::from_fn(f, cols, |_, _| rng.random_range(-1.0f32..1.0));
    let batch: Vec<PairedSample> = (0..c.batch)
        .map(|i| PairedSample {
            imu_windows: (0..c.sensors).map(|_| m(6)).collect(),
            part_windows: (0..c.sensors).map(|_| m(6)).collect(),
            label: Some(0),
            subject_id: "s".into(),
            sequence_id: format!("q{i}"),
            window_start_s: 0.0,
            window_len_s: 1.0,
            degenerate: false,
        })
        .collect();
    let refs: Vec<&PairedSample> = batch.iter().collect();
    let mut presence = vec![vec![true; c.sensors]; c.batch];
    if c.sensors > 1 {
        presence[1][0] = false;
    }
    let masks = (0..c.batch)
        .map(|_| crate::losses::sample_mask(c.sensors, c.tokens, cfg.mask_ratio, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut exclude = vec![false; c.batch * c.batch];
    exclude[1] = true;
    let loss = |p: &ParamStore<f64>| {
        let mut g = p.zero_grads();
        let l = model.batch_loss(p, &refs, Some(&presence), Some(exclude.clone()), Some(&masks), cfg, Some(&mut g))?;
        Ok((l.total, g))
    };
    grad_check(loss, &ps, c.epsilon, c.coordinates, c.seed)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::losses::sample_mask;
    use crate::nn::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_spec(n: usize) -> ModelSpec {
        ModelSpec {
            encoder: EncoderConfig {
                dim: 8,
                global_dim: 8,
                proj_dim: 6,
                frames: 10,
                patch_len: 2,
                conv_channels: vec![4],
                conv_kernel: 3,
                heads: 2,
                ffn_hidden: 8,
                blocks: 1,
                agg_hidden: 8,
                per_sensor_imu: true,
                shared_part_encoder: true,
            },
            imu_channels: 6,
            part_widths: vec![6; n],
            tau_init: 0.5,
            mtp_heads: 2,
            mtp_hidden: 8,
        }
    }

    pub(crate) fn sample(spec: &ModelSpec, rng: &mut ChaCha8Rng, i: usize) -> PairedSample {
        let f = spec.encoder.frames;
        let m = |c: usize, rng: &mut ChaCha8Rng| Mat::from_fn(f, c, |_, _| rng.random_range(-1.0f32..1.0));
        PairedSample {
            imu_windows: (0..spec.sensors()).map(|_| m(spec.imu_channels, rng)).collect(),
            part_windows: spec.part_widths.iter().map(|&w| m(w, rng)).collect(),
            label: Some(0),
            subject_id: "s".into(),
            sequence_id: format!("q{i}"),
            window_start_s: 0.0,
            window_len_s: 5.0,
            degenerate: false,
        }
    }

    #[test]
    fn full_loss_gradient_check() {
        let spec = tiny_spec(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamStore::<f64>::new();
        let model = Model::new(&mut ps, spec.clone(), &mut rng).unwrap();
        ps.jitter(0.3, &mut rng);
        let batch: Vec<_> = (0..3).map(|i| sample(&spec, &mut rng, i)).collect();
        let refs: Vec<&PairedSample> = batch.iter().collect();
        let presence = vec![vec![true, true], vec![false, true], vec![true, true]];
        let masks: Vec<_> = (0..3).map(|_| sample_mask(2, 5, 0.75, &mut rng).unwrap()).collect();
        let mut excl = vec![false; 9];
        excl[5] = true;
        let cfg = LossConfig::default();
        let f = |p: &ParamStore<f64>| {
            let mut g = p.zero_grads();
            let l = model.batch_loss(p, &refs, Some(&presence), Some(excl.clone()), Some(&masks), &cfg, Some(&mut g))?;
            Ok((l.total, g))
        };
        let r = grad_check(f, &ps, 1e-3, 400, 1).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn per_part_encoders_and_shared_imu_also_check() {
        let mut spec = tiny_spec(2);
        spec.encoder.per_sensor_imu = false;
        spec.encoder.shared_part_encoder = false;
        spec.part_widths = vec![4, 6];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamStore::<f64>::new();
        let model = Model::new(&mut ps, spec.clone(), &mut rng).unwrap();
        ps.jitter(0.3, &mut rng);
        let batch: Vec<_> = (0..2).map(|i| sample(&spec, &mut rng, i)).collect();
        let refs: Vec<&PairedSample> = batch.iter().collect();
        let masks: Vec<_> = (0..2).map(|_| sample_mask(2, 5, 0.5, &mut rng).unwrap()).collect();
        let cfg = LossConfig::default();
        let f = |p: &ParamStore<f64>| {
            let mut g = p.zero_grads();
            let l = model.batch_loss(p, &refs, None, None, Some(&masks), &cfg, Some(&mut g))?;
            Ok((l.total, g))
        };
        let r = grad_check(f, &ps, 1e-3, 300, 2).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn shared_part_encoder_needs_equal_widths() {
        let mut spec = tiny_spec(2);
        spec.part_widths = vec![4, 6];
        let mut ps = ParamStore::<f32>::new();
        assert!(Model::new(&mut ps, spec, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn embeddings_are_unit_and_skip_absent_sensors() {
        let spec = tiny_spec(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamStore::<f32>::new();
        let model = Model::new(&mut ps, spec.clone(), &mut rng).unwrap();
        let s = sample(&spec, &mut rng, 0);
        let e = model.embed_imu(&ps, &s.imu_windows, Some(&[true, false, true])).unwrap();
        assert!(e.locals[1].is_none() && e.tokens[1].is_none());
        let n: f32 = e.global.iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-5);
        let p = model.embed_pose(&ps, &s.part_windows).unwrap();
        assert_eq!(p.tokens[2].as_ref().unwrap().rows, 5);
        assert!(model.embed_imu(&ps, &s.imu_windows, Some(&[false; 3])).is_err());
    }

    #[test]
    fn embed_matches_batch_tower() {
        // The global IMU embedding with a dropped sensor is what the loss sees.
        let spec = tiny_spec(2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamStore::<f32>::new();
        let model = Model::new(&mut ps, spec.clone(), &mut rng).unwrap();
        let s = sample(&spec, &mut rng, 0);
        let present = [false, true];
        let e = model.embed_imu(&ps, &s.imu_windows, Some(&present)).unwrap();
        let t = model.tower(&ps, &s.imu_windows, true, Some(&present)).unwrap();
        let g = model.global_imu.forward(&ps, Mat::from_vec(1, 8, t.global).unwrap()).unwrap();
        assert_eq!(e.global, g.unit.data);
    }
}
